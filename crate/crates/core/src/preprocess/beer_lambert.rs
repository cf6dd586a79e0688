use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::ingest::ChannelSeries;

/// Modified Beer-Lambert law parameters for a two-wavelength system.
///
/// `extinction[i][j]` is the extinction coefficient of chromophore `j`
/// (0 = HbO, 1 = HbR) at wavelength `i`. Units are up to the caller; the
/// returned concentrations are in whatever units make
/// `OD_i = dpf_i * distance * sum_j extinction[i][j] * c_j` hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeerLambertCoefficients {
    pub extinction: [[f64; 2]; 2],
    pub dpf: [f64; 2],
    pub source_detector_distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelengths_nm: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

/// 760/850 nm table shipped with the crate (`data/coefficients_760_850.json`).
const STANDARD_JSON: &str = include_str!("../../data/coefficients_760_850.json");

impl BeerLambertCoefficients {
    /// Identity extinction, unit path length: HbO = OD1, HbR = OD2.
    pub fn identity() -> Self {
        BeerLambertCoefficients {
            extinction: [[1.0, 0.0], [0.0, 1.0]],
            dpf: [1.0, 1.0],
            source_detector_distance: 1.0,
            wavelengths_nm: None,
            description: None,
        }
    }

    /// Standard 760/850 nm extinction table, dpf 6.0, 3 cm spacing.
    pub fn standard() -> Self {
        serde_json::from_str(STANDARD_JSON).expect("bundled coefficient table parses")
    }

    pub fn from_json(text: &str) -> Result<Self, PreprocessError> {
        let c: Self = serde_json::from_str(text)
            .map_err(|e| PreprocessError::InvalidCoefficients(e.to_string()))?;
        c.inverse()?;
        Ok(c)
    }

    pub fn determinant(&self) -> f64 {
        let e = &self.extinction;
        e[0][0] * e[1][1] - e[0][1] * e[1][0]
    }

    /// Inverse of the extinction matrix, after checking every invariant.
    fn inverse(&self) -> Result<[[f64; 2]; 2], PreprocessError> {
        let e = &self.extinction;
        if e.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PreprocessError::InvalidCoefficients(
                "extinction entries must be finite".into(),
            ));
        }
        if !self.dpf.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(PreprocessError::InvalidCoefficients(
                "dpf values must be positive".into(),
            ));
        }
        let dist = self.source_detector_distance;
        if !(dist.is_finite() && dist > 0.0) {
            return Err(PreprocessError::InvalidCoefficients(
                "source-detector distance must be positive".into(),
            ));
        }
        let det = self.determinant();
        let norm_sq: f64 = e.iter().flatten().map(|v| v * v).sum();
        if det.abs() <= 1e-12 * norm_sq || det == 0.0 {
            return Err(PreprocessError::SingularCoefficients { det });
        }
        Ok([[e[1][1] / det, -e[0][1] / det], [-e[1][0] / det, e[0][0] / det]])
    }
}

/// HbO/HbR concentration change of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HbSeries {
    pub channel_id: String,
    pub hbo: Vec<f64>,
    pub hbr: Vec<f64>,
}

impl HbSeries {
    pub fn len(&self) -> usize {
        self.hbo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hbo.is_empty()
    }
}

/// Solves the 2x2 modified Beer-Lambert system sample by sample.
pub fn od_to_hb(
    series: &ChannelSeries,
    coeff: &BeerLambertCoefficients,
) -> Result<HbSeries, PreprocessError> {
    let inv = coeff.inverse()?;
    if series.od_wl1.len() != series.od_wl2.len() {
        return Err(PreprocessError::LengthMismatch(series.channel_id.clone()));
    }
    let path = [
        coeff.dpf[0] * coeff.source_detector_distance,
        coeff.dpf[1] * coeff.source_detector_distance,
    ];
    let (hbo, hbr) = series
        .od_wl1
        .iter()
        .zip(&series.od_wl2)
        .map(|(&od1, &od2)| {
            let a = od1 / path[0];
            let b = od2 / path[1];
            (inv[0][0] * a + inv[0][1] * b, inv[1][0] * a + inv[1][1] * b)
        })
        .unzip();
    Ok(HbSeries {
        channel_id: series.channel_id.clone(),
        hbo,
        hbr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(a: Vec<f64>, b: Vec<f64>) -> ChannelSeries {
        ChannelSeries {
            channel_id: "ch1".into(),
            od_wl1: a,
            od_wl2: b,
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let hb = od_to_hb(&series(vec![0.0; 5], vec![0.0; 5]), &BeerLambertCoefficients::standard())
            .unwrap();
        assert!(hb.hbo.iter().chain(&hb.hbr).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_coefficients() {
        let hb = od_to_hb(&series(vec![1.0], vec![0.0]), &BeerLambertCoefficients::identity())
            .unwrap();
        assert_eq!(hb.hbo, vec![1.0]);
        assert_eq!(hb.hbr, vec![0.0]);
    }

    #[test]
    fn doubling_input_doubles_output() {
        let c = BeerLambertCoefficients::standard();
        let x = series(vec![0.013, -0.002, 0.4], vec![0.021, 0.005, -0.1]);
        let x2 = series(
            x.od_wl1.iter().map(|v| 2.0 * v).collect(),
            x.od_wl2.iter().map(|v| 2.0 * v).collect(),
        );
        let (h, h2) = (od_to_hb(&x, &c).unwrap(), od_to_hb(&x2, &c).unwrap());
        for (a, b) in h.hbo.iter().chain(&h.hbr).zip(h2.hbo.iter().chain(&h2.hbr)) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn standard_table_reconstructs_od() {
        let c = BeerLambertCoefficients::standard();
        let (hbo, hbr) = (2.5e-7, -1.0e-7);
        let od = |i: usize| {
            c.dpf[i] * c.source_detector_distance * (c.extinction[i][0] * hbo + c.extinction[i][1] * hbr)
        };
        let hb = od_to_hb(&series(vec![od(0)], vec![od(1)]), &c).unwrap();
        approx::assert_relative_eq!(hb.hbo[0], hbo, max_relative = 1e-12);
        approx::assert_relative_eq!(hb.hbr[0], hbr, max_relative = 1e-12);
    }

    #[test]
    fn singular_and_invalid() {
        let mut c = BeerLambertCoefficients::identity();
        c.extinction = [[1.0, 2.0], [2.0, 4.0]];
        assert!(matches!(
            od_to_hb(&series(vec![0.0], vec![0.0]), &c),
            Err(PreprocessError::SingularCoefficients { .. })
        ));
        let mut c = BeerLambertCoefficients::identity();
        c.dpf[1] = 0.0;
        assert!(matches!(
            od_to_hb(&series(vec![0.0], vec![0.0]), &c),
            Err(PreprocessError::InvalidCoefficients(_))
        ));
        assert!(BeerLambertCoefficients::from_json("{}").is_err());
        let text = serde_json::to_string(&BeerLambertCoefficients::standard()).unwrap();
        assert_eq!(
            BeerLambertCoefficients::from_json(&text).unwrap(),
            BeerLambertCoefficients::standard()
        );
    }

    proptest! {
        #[test]
        fn linear_in_od(
            a in -5.0..5.0f64, b in -5.0..5.0f64,
            x in proptest::collection::vec(-1.0..1.0f64, 8),
            y in proptest::collection::vec(-1.0..1.0f64, 8),
        ) {
            let c = BeerLambertCoefficients::standard();
            let (x1, x2) = x.split_at(4);
            let (y1, y2) = y.split_at(4);
            let comb = |u: &[f64], v: &[f64]| -> Vec<f64> {
                u.iter().zip(v).map(|(p, q)| a * p + b * q).collect()
            };
            let fx = od_to_hb(&series(x1.to_vec(), x2.to_vec()), &c).unwrap();
            let fy = od_to_hb(&series(y1.to_vec(), y2.to_vec()), &c).unwrap();
            let fxy = od_to_hb(&series(comb(x1, y1), comb(x2, y2)), &c).unwrap();
            let expect_o = comb(&fx.hbo, &fy.hbo);
            let expect_r = comb(&fx.hbr, &fy.hbr);
            let scale = fx.hbo.iter().chain(&fy.hbo).chain(&fx.hbr).chain(&fy.hbr)
                .fold(0.0f64, |m, v| m.max(v.abs())) * (a.abs() + b.abs()) + 1e-300;
            for (got, want) in fxy.hbo.iter().zip(&expect_o).chain(fxy.hbr.iter().zip(&expect_r)) {
                prop_assert!((got - want).abs() <= 1e-12 * scale);
            }
        }
    }
}

//! Gramian Angular Fields.
//!
//! A series is min-max rescaled onto `[-1, 1]`, read as the cosine of a polar
//! angle `phi = arccos(x)`, and expanded into an `n x n` image:
//! `cos(phi_i + phi_j)` for the summation field (GASF) or
//! `sin(phi_i - phi_j)` for the difference field (GADF).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numfmt::fmt_f64;
use crate::preprocess::Epoch;
use crate::task::Task;

#[derive(Debug, thiserror::Error)]
pub enum GafError {
    #[error("series is empty")]
    EmptySeries,
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),
    #[error("cannot downsample {len} samples to {target}")]
    TargetTooLarge { len: usize, target: usize },
    #[error("channel `{0}` not present in epoch")]
    UnknownChannel(String),
    #[error("no samples in the encoding window")]
    EmptyWindow,
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GafKind {
    Gasf,
    Gadf,
}

impl fmt::Display for GafKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GafKind::Gasf => "gasf",
            GafKind::Gadf => "gadf",
        })
    }
}

impl FromStr for GafKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gasf" => Ok(GafKind::Gasf),
            "gadf" => Ok(GafKind::Gadf),
            other => Err(format!("unknown GAF kind `{other}` (expected gasf or gadf)")),
        }
    }
}

/// Which haemoglobin trace of a channel is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Hbo,
    Hbr,
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Signal::Hbo => "hbo",
            Signal::Hbr => "hbr",
        })
    }
}

impl FromStr for Signal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hbo" => Ok(Signal::Hbo),
            "hbr" => Ok(Signal::Hbr),
            other => Err(format!("unknown signal `{other}` (expected hbo or hbr)")),
        }
    }
}

/// A series mapped onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledSeries {
    values: Vec<f64>,
    pub original_min: f64,
    pub original_max: f64,
}

impl RescaledSeries {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Min-max rescaling onto `[-1, 1]`. A constant series maps to all zeros.
pub fn rescale(x: &[f64]) -> Result<RescaledSeries, GafError> {
    if x.is_empty() {
        return Err(GafError::EmptySeries);
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(GafError::NonFiniteValue(i));
    }
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let values = if range > 0.0 {
        x.iter()
            .map(|&v| {
                if v == max {
                    1.0
                } else {
                    ((2.0 * (v - min) - range) / range).clamp(-1.0, 1.0)
                }
            })
            .collect()
    } else {
        vec![0.0; x.len()]
    };
    Ok(RescaledSeries {
        values,
        original_min: min,
        original_max: max,
    })
}

/// `phi_i = arccos(x_i)`, each in `[0, pi]`.
pub fn polar_angles(s: &RescaledSeries) -> Vec<f64> {
    s.values.iter().map(|v| v.acos()).collect()
}

/// Square image plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GafImage {
    pub size: usize,
    pub kind: GafKind,
    pub channel_id: String,
    pub task: Option<Task>,
    /// Row-major `size * size` entries.
    pub matrix: Vec<f64>,
}

impl GafImage {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.size + j]
    }

    fn from_angles(phi: &[f64], kind: GafKind) -> Self {
        let n = phi.len();
        let mut matrix = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                match kind {
                    GafKind::Gasf => {
                        let v = (phi[i] + phi[j]).cos();
                        matrix[i * n + j] = v;
                        matrix[j * n + i] = v;
                    }
                    GafKind::Gadf => {
                        if i != j {
                            let v = (phi[i] - phi[j]).sin();
                            matrix[i * n + j] = v;
                            matrix[j * n + i] = -v;
                        }
                    }
                }
            }
        }
        GafImage {
            size: n,
            kind,
            channel_id: String::new(),
            task: None,
            matrix,
        }
    }

    pub fn with_provenance(mut self, channel_id: impl Into<String>, task: Option<Task>) -> Self {
        self.channel_id = channel_id.into();
        self.task = task;
        self
    }
}

/// Gramian Angular Summation Field: `G[i][j] = cos(phi_i + phi_j)`.
pub fn gasf(s: &RescaledSeries) -> GafImage {
    GafImage::from_angles(&polar_angles(s), GafKind::Gasf)
}

/// Gramian Angular Difference Field: `G[i][j] = sin(phi_i - phi_j)`.
pub fn gadf(s: &RescaledSeries) -> GafImage {
    GafImage::from_angles(&polar_angles(s), GafKind::Gadf)
}

pub fn encode(s: &RescaledSeries, kind: GafKind) -> GafImage {
    match kind {
        GafKind::Gasf => gasf(s),
        GafKind::Gadf => gadf(s),
    }
}

/// Piecewise aggregate approximation: the mean of each of `target_n`
/// contiguous segments, segment `k` covering `[k*n/target_n, (k+1)*n/target_n)`.
pub fn paa_downsample(x: &[f64], target_n: usize) -> Result<Vec<f64>, GafError> {
    let n = x.len();
    if target_n == 0 || target_n > n {
        return Err(GafError::TargetTooLarge {
            len: n,
            target: target_n,
        });
    }
    Ok((0..target_n)
        .map(|k| {
            let seg = &x[k * n / target_n..(k + 1) * n / target_n];
            seg.iter().sum::<f64>() / seg.len() as f64
        })
        .collect())
}

/// How one epoch channel becomes an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GafSettings {
    pub kind: GafKind,
    pub size: usize,
    pub signal: Signal,
    /// Encode the whole `[-5, 25] s` epoch instead of `[0, 25] s`.
    pub full_window: bool,
}

impl Default for GafSettings {
    fn default() -> Self {
        GafSettings {
            kind: GafKind::Gasf,
            size: 64,
            signal: Signal::Hbo,
            full_window: false,
        }
    }
}

/// Encodes one channel of a baseline-corrected epoch: window selection, PAA
/// to `settings.size` points, rescaling, then the field.
pub fn encode_epoch(
    epoch: &Epoch,
    channel_id: &str,
    settings: &GafSettings,
) -> Result<GafImage, GafError> {
    let ch = epoch
        .channel(channel_id)
        .ok_or_else(|| GafError::UnknownChannel(channel_id.to_string()))?;
    let trace = match settings.signal {
        Signal::Hbo => &ch.hbo,
        Signal::Hbr => &ch.hbr,
    };
    let window = if settings.full_window {
        0..epoch.len()
    } else {
        epoch.window(0.0, epoch.t_end_s, true)
    };
    if window.is_empty() {
        return Err(GafError::EmptyWindow);
    }
    let reduced = paa_downsample(&trace[window], settings.size)?;
    let img = encode(&rescale(&reduced)?, settings.kind);
    Ok(img.with_provenance(channel_id, Some(epoch.task)))
}

/// `[-1, 1]` to `0..=255`, rounding half up.
pub fn to_pixel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0 + 0.5).floor() as u8
}

/// Writes `<stem>.csv` (raw matrix) and `<stem>.pgm` (8-bit plain graymap).
pub fn export_image(img: &GafImage, stem: &Path) -> Result<(PathBuf, PathBuf), GafError> {
    let csv_path = stem.with_extension("csv");
    let pgm_path = stem.with_extension("pgm");
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| GafError::Io { path, source }
    };
    let n = img.size;

    let mut text = String::with_capacity(n * n * 20);
    for row in img.matrix.chunks(n.max(1)) {
        let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    fs::write(&csv_path, text).map_err(io(&csv_path))?;

    let file = fs::File::create(&pgm_path).map_err(io(&pgm_path))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "P2 {n} {n} 255").map_err(io(&pgm_path))?;
    for row in img.matrix.chunks(n.max(1)) {
        let line: Vec<String> = row.iter().map(|&v| to_pixel(v).to_string()).collect();
        writeln!(out, "{}", line.join(" ")).map_err(io(&pgm_path))?;
    }
    out.flush().map_err(io(&pgm_path))?;
    Ok((csv_path, pgm_path))
}

/// Reads a square matrix written by [`export_image`].
pub fn read_matrix_csv(path: &Path) -> Result<(usize, Vec<f64>), GafError> {
    let text = fs::read_to_string(path).map_err(|source| GafError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |message: String| GafError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut matrix = Vec::new();
    let mut rows = 0;
    for (r, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        for cell in line.split(',') {
            let v = cell
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(format!("row {}: bad cell {cell:?}", r + 1)))?;
            matrix.push(v);
        }
        rows += 1;
    }
    if rows * rows != matrix.len() {
        return Err(parse_err(format!(
            "expected a square matrix, found {rows} rows and {} cells",
            matrix.len()
        )));
    }
    Ok((rows, matrix))
}

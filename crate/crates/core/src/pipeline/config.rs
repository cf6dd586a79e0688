use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::gaf::GafSettings;
use crate::nn::{NetworkSpec, TrainConfig};
use crate::preprocess::{BeerLambertCoefficients, FilterSpec};

/// Channel chosen by permutation importance instead of by name.
pub const AUTO_CHANNEL: &str = "auto";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    /// JSON coefficient table; `None` uses the bundled 760/850 nm table.
    pub coefficients: Option<PathBuf>,
    pub filter: FilterSpec,
    /// Write `<subject>.epochs.json` files.
    pub save_epochs: bool,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            coefficients: None,
            filter: FilterSpec::default(),
            save_epochs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogregSettings {
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for LogregSettings {
    fn default() -> Self {
        LogregSettings {
            l2: 1e-3,
            learning_rate: 0.5,
            epochs: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub enabled: bool,
    pub importance_repeats: usize,
    pub logreg: LogregSettings,
    pub knn_k: usize,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            enabled: true,
            importance_repeats: 10,
            logreg: LogregSettings::default(),
            knn_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GafSection {
    /// Channel id, or `"auto"` for the top permutation-importance channel.
    pub channel: String,
    #[serde(flatten)]
    pub settings: GafSettings,
    /// Write every image as `.csv` and `.pgm`.
    pub save_images: bool,
}

impl Default for GafSection {
    fn default() -> Self {
        GafSection {
            channel: AUTO_CHANNEL.into(),
            settings: GafSettings::default(),
            save_images: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Network spec file (TOML); overrides `network`.
    pub network_file: Option<PathBuf>,
    /// Inline network; `None` uses the default architecture sized to the
    /// GAF image.
    pub network: Option<NetworkSpec>,
    /// Training config file (TOML); overrides `train`.
    pub train_file: Option<PathBuf>,
    pub train: TrainConfig,
    /// Train a final model on every epoch and save it for `classify`.
    pub save_model: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            network_file: None,
            network: None,
            train_file: None,
            train: TrainConfig::default(),
            save_model: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Logreg,
    Knn,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Logreg => "logreg",
            Baseline::Knn => "knn",
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logreg" => Ok(Baseline::Logreg),
            "knn" => Ok(Baseline::Knn),
            other => Err(format!("unknown model `{other}` (expected logreg or knn)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub stratified: bool,
    /// Feature-based models cross-validated next to the CNN.
    pub baselines: Vec<Baseline>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: 10,
            stratified: true,
            baselines: vec![Baseline::Logreg],
        }
    }
}

/// Everything `pipeline run` needs. Relative paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub preprocess: PreprocessSection,
    pub features: FeatureSection,
    pub gaf: GafSection,
    pub model: ModelSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input_dir: "data".into(),
            output_dir: "out".into(),
            seed: 0,
            preprocess: PreprocessSection::default(),
            features: FeatureSection::default(),
            gaf: GafSection::default(),
            model: ModelSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// A validated config with every referenced file loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: PipelineConfig,
    pub coefficients: BeerLambertCoefficients,
    pub network: NetworkSpec,
    pub train: TrainConfig,
}

fn config_err(m: impl Into<String>) -> PipelineError {
    PipelineError::Config(m.into())
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    /// Parses a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let mut cfg = PipelineConfig::from_toml(&read(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes to TOML")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input_dir);
        fix(&mut self.output_dir);
        for p in [
            &mut self.preprocess.coefficients,
            &mut self.model.network_file,
            &mut self.model.train_file,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Checks every setting and loads referenced files; nothing is written.
    pub fn validate(&self) -> Result<ResolvedConfig, PipelineError> {
        if !self.input_dir.is_dir() {
            return Err(config_err(format!("input directory {} does not exist", self.input_dir.display())));
        }
        let coefficients = match &self.preprocess.coefficients {
            Some(p) => BeerLambertCoefficients::from_json(&read(p)?)
                .map_err(|e| config_err(format!("{}: {e}", p.display())))?,
            None => BeerLambertCoefficients::standard(),
        };
        let size = self.gaf.settings.size;
        if size == 0 {
            return Err(config_err("gaf.size must be at least 1"));
        }
        if self.gaf.channel.is_empty() {
            return Err(config_err("gaf.channel must name a channel or be \"auto\""));
        }
        if self.gaf.channel == AUTO_CHANNEL && !self.features.enabled {
            return Err(config_err("gaf.channel = \"auto\" needs the features stage enabled"));
        }
        if self.features.enabled && self.features.importance_repeats == 0 {
            return Err(config_err("features.importance_repeats must be at least 1"));
        }
        if !self.eval.baselines.is_empty() && !self.features.enabled {
            return Err(config_err("feature baselines need the features stage enabled"));
        }
        if self.features.knn_k == 0 {
            return Err(config_err("features.knn_k must be at least 1"));
        }
        let lr = &self.features.logreg;
        if !(lr.learning_rate > 0.0 && lr.l2 >= 0.0) {
            return Err(config_err("features.logreg needs learning_rate > 0 and l2 >= 0"));
        }
        if self.eval.k < 2 {
            return Err(config_err("eval.k must be at least 2"));
        }
        let network = match (&self.model.network_file, &self.model.network) {
            (Some(p), _) => NetworkSpec::from_toml(&read(p)?).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
            (None, Some(spec)) => spec.clone(),
            (None, None) => NetworkSpec::default_architecture(size),
        };
        network.validate().map_err(|e| config_err(e.to_string()))?;
        if network.input_shape != [1, size, size] {
            return Err(config_err(format!(
                "network input shape {:?} does not match {size}x{size} single-channel images",
                network.input_shape
            )));
        }
        let train = match &self.model.train_file {
            Some(p) => TrainConfig::from_toml(&read(p)?).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
            None => self.model.train.clone(),
        };
        train.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(ResolvedConfig {
            config: self.clone(),
            coefficients,
            network,
            train,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_input() -> (tempfile::TempDir, PipelineConfig) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            input_dir: dir.path().to_path_buf(),
            ..PipelineConfig::default()
        };
        (dir, cfg)
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let parsed = PipelineConfig::from_toml("seed = 4\n[gaf]\nchannel = \"ch2\"\nsize = 32\n").unwrap();
        assert_eq!(parsed.seed, 4);
        assert_eq!(parsed.gaf.settings.size, 32);
        assert_eq!(parsed.eval.k, 10);
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn default_network_follows_image_size() {
        let (_d, mut cfg) = with_input();
        cfg.gaf.settings.size = 32;
        let r = cfg.validate().unwrap();
        assert_eq!(r.network.input_shape, vec![1, 32, 32]);
        assert_eq!(r.coefficients, BeerLambertCoefficients::standard());
    }

    #[test]
    fn missing_files_fail_validation() {
        let (d, mut cfg) = with_input();
        cfg.preprocess.coefficients = Some(d.path().join("nope.json"));
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        let (_d, mut cfg) = with_input();
        cfg.input_dir = "/definitely/not/here".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn auto_channel_needs_features() {
        let (_d, mut cfg) = with_input();
        cfg.features.enabled = false;
        cfg.eval.baselines.clear();
        assert!(cfg.validate().is_err());
        cfg.gaf.channel = "ch1".into();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn network_must_match_images() {
        let (_d, mut cfg) = with_input();
        cfg.model.network = Some(NetworkSpec::default_architecture(32));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let mut cfg = PipelineConfig::default();
        cfg.preprocess.coefficients = Some("c.json".into());
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.input_dir, Path::new("/base/data"));
        assert_eq!(cfg.preprocess.coefficients.unwrap(), Path::new("/base/c.json"));
    }
}

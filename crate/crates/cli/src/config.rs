//! TOML run configuration.

use std::path::{Path, PathBuf};

use augsearch::data::{generate_synthetic, Dataset, Splits, SyntheticKind};
use augsearch::eval::EvalConfig;
use augsearch::search::SearchConfig;
use serde::{Deserialize, Serialize};

use crate::BadInput;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Search seed; `--seed` overrides it.
    pub seed: u64,
    /// Output directory, relative to the working directory.
    pub out: PathBuf,
    /// Retraining seeds used by `evaluate`.
    pub eval_seeds: Vec<u64>,
    pub data: DataConfig,
    pub search: SearchConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            eval_seeds: vec![0, 1, 2, 3],
            data: DataConfig::default(),
            search: SearchConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Either a synthetic task or a pair of AUGD files. With neither given the
/// rotation-invariant task is generated.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<String>,
    pub n: usize,
    pub test_n: usize,
    pub side: usize,
    /// Training data file (AUGD); split into search train and validation.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Fraction kept for lower-level training, the rest is validation.
    pub split_ratio: f64,
    /// Seed for generation and splitting, independent of the search seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: None,
            n: 2000,
            test_n: 1000,
            side: 16,
            train: None,
            test: None,
            split_ratio: 0.5,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file. Relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<RunConfig, BadInput> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BadInput(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| BadInput(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train, &mut cfg.data.test]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.search.seed = cfg.seed;
        cfg.validate()
            .map_err(|e| BadInput(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.search.seed = seed;
        self
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.search.validate()?;
        self.eval.validate()?;
        match (&self.data.synthetic, &self.data.train, &self.data.test) {
            (None, None, None) => {}
            (Some(kind), None, None) => {
                kind.parse::<SyntheticKind>()?;
            }
            (None, Some(_), Some(_)) => {}
            _ => anyhow::bail!("data needs either `synthetic` or both `train` and `test`"),
        }
        Ok(())
    }

    /// Files the run reads, for the manifest.
    pub fn input_files(&self) -> Vec<PathBuf> {
        [&self.data.train, &self.data.test]
            .into_iter()
            .flatten()
            .cloned()
            .collect()
    }

    pub fn splits(&self) -> anyhow::Result<Splits> {
        let d = &self.data;
        let (data, test) = match (&d.train, &d.test) {
            (None, None) => {
                let kind: SyntheticKind = d
                    .synthetic
                    .as_deref()
                    .unwrap_or(SyntheticKind::ROTATION)
                    .parse()?;
                (
                    generate_synthetic(kind, d.n, d.side, d.seed)?,
                    generate_synthetic(kind, d.test_n, d.side, d.seed + 1000)?,
                )
            }
            _ => {
                let load = |p: &Option<PathBuf>| -> anyhow::Result<Dataset> {
                    let p = p.as_ref().expect("validated");
                    Dataset::load(p).map_err(|e| BadInput(format!("{}: {e}", p.display())).into())
                };
                (load(&d.train)?, load(&d.test)?)
            }
        };
        Ok(Splits::new(&data, test, d.split_ratio, d.seed)?)
    }
}

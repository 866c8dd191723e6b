//! Experiment configuration files (TOML) and their resolution against
//! command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segcons::consistency::ConsistencyMode;
use segcons::data::{ShapeGenConfig, SplitSpec};
use segcons::trainer::TrainConfig;

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// Training-pool size; `None` uses every training sample.
    pub total: Option<usize>,
    pub labelled_count: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            total: None,
            labelled_count: 20,
        }
    }
}

/// Everything one experiment needs, as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of the generated dataset.
    pub data_seed: u64,
    /// Number of training seeds, starting at `train.seed`.
    pub seeds: usize,
    pub generate: ShapeGenConfig,
    pub split: SplitSection,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_seed: 0,
            seeds: 1,
            generate: ShapeGenConfig::default(),
            split: SplitSection::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Keys the user set explicitly; unset ones take mode-dependent defaults.
#[derive(Clone, Copy, Debug, Default)]
pub struct Explicit {
    pub gamma: bool,
    pub distance: bool,
}

/// Command-line overrides of config keys. `None` leaves the file's value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<ConsistencyMode>,
    pub gamma: Option<f64>,
    pub colour_aug: Option<bool>,
    pub labelled: Option<usize>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub overlap: Option<f64>,
    pub data_seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<(Self, Explicit), Failure> {
        let cfg: Self = toml::from_str(text).map_err(|e| Failure::Config(e.to_string()))?;
        let value: toml::Table = toml::from_str(text).map_err(|e| Failure::Config(e.to_string()))?;
        let cons = value
            .get("train")
            .and_then(|t| t.get("consistency"))
            .and_then(|c| c.as_table());
        let explicit = Explicit {
            gamma: cons.is_some_and(|c| c.contains_key("gamma")),
            distance: cons.is_some_and(|c| c.contains_key("distance")),
        };
        Ok((cfg, explicit))
    }

    pub fn load(path: Option<&Path>) -> Result<(Self, Explicit), Failure> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text)
            }
            None => Ok((Self::default(), Explicit::default())),
        }
    }

    /// Applies flags over the file, then fills mode-dependent defaults for
    /// keys neither set: the consistency weight follows the mode and colour
    /// switch, the distance follows the mode.
    pub fn resolve(mut self, mut explicit: Explicit, o: &Overrides) -> Result<Self, Failure> {
        let t = &mut self.train;
        if let Some(m) = o.mode {
            t.consistency.mode = m;
        }
        if let Some(g) = o.gamma {
            t.consistency.gamma = g;
            explicit.gamma = true;
        }
        if let Some(c) = o.colour_aug {
            t.augment.colour = c;
        }
        if let Some(v) = o.steps {
            t.steps = v;
        }
        if let Some(v) = o.lr {
            t.lr = v;
        }
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(v) = o.labelled {
            self.split.labelled_count = v;
        }
        if let Some(v) = o.seeds {
            self.seeds = v;
        }
        if let Some(v) = o.overlap {
            self.generate.overlap = v;
        }
        if let Some(v) = o.data_seed {
            self.data_seed = v;
        }
        let mode = t.consistency.mode;
        if !explicit.gamma {
            t.consistency.gamma = mode.default_gamma(t.augment.colour);
        }
        if !explicit.distance {
            t.consistency.distance = mode.distance();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.seeds == 0 {
            return Err(Failure::Config("seeds must be positive".into()));
        }
        self.generate.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// The split of seed `seed`: membership follows the training seed.
    pub fn split_spec(&self, pool: usize, seed: u64) -> Result<SplitSpec, Failure> {
        let total = self.split.total.unwrap_or(pool);
        let spec = SplitSpec {
            total,
            labelled_count: self.split.labelled_count,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Directory name of an experiment: mode, colour switch, γ and labels.
    pub fn run_name(&self) -> String {
        let c = &self.train.consistency;
        format!(
            "{}-{}-g{}-l{}",
            c.mode.name(),
            if self.train.augment.colour { "colour" } else { "plain" },
            c.gamma,
            self.split.labelled_count
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialise")
    }
}

/// Output root: the flag, else `SEGCONS_OUT`, else `./runs`.
pub fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(crate::OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

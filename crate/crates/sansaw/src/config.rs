//! Run configuration: JSON file with defaults, command-line overrides on
//! top, and validation of the cross-field constraints.

use crate::domains::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::net::{NetConfig, SanMode, TrainConfig, WhitenMode};
use crate::san::{RegionConfig, SanConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Iw,
    Giw,
    Saw,
}

impl std::str::FromStr for Grouping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iw" => Ok(Grouping::Iw),
            "giw" => Ok(Grouping::Giw),
            "saw" => Ok(Grouping::Saw),
            other => Err(Error::Config(format!(
                "unknown grouping `{other}` (expected iw, giw, or saw)"
            ))),
        }
    }
}

/// Everything one run needs. Unknown keys in a config file are rejected with
/// the offending key named; every field has a default matching the training
/// recipe (lr 5e-4, momentum 0.9, weight decay 5e-4, poly power 0.9,
/// batch 2, C = 4, k = 5, t = 1, epsilon 1e-5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Category-level normalization transform on/off.
    pub san: bool,
    /// Whitening loss on/off.
    pub saw: bool,
    /// Which whitening variant when `saw` is on.
    pub grouping: Grouping,
    /// Branch refinement block on/off.
    pub cfr: bool,
    /// Aligned category count C.
    pub c: usize,
    /// Cluster count for region partitioning.
    pub k: usize,
    /// Top clusters taken as the category region.
    pub t: usize,
    pub epsilon: f64,
    pub kmeans_max_iters: usize,
    /// Stage widths.
    pub k1: usize,
    pub k2: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub poly_power: f64,
    pub iters: usize,
    pub lambda_san: f64,
    pub lambda_saw: f64,
    /// Dataset bundle directory.
    pub dataset: Option<String>,
    /// Output directory.
    pub out: Option<String>,
    /// Dataset generation parameters.
    pub data: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            san: true,
            saw: true,
            grouping: Grouping::Saw,
            cfr: true,
            c: 4,
            k: 5,
            t: 1,
            epsilon: 1e-5,
            kmeans_max_iters: 50,
            k1: 16,
            k2: 16,
            lr0: 5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch: 2,
            poly_power: 0.9,
            iters: 2000,
            lambda_san: 1.0,
            lambda_saw: 1.0,
            dataset: None,
            out: None,
            data: BenchmarkConfig::default(),
        }
    }
}

/// Command-line overrides; `None` keeps the file/default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub san: Option<bool>,
    pub saw: Option<bool>,
    pub grouping: Option<Grouping>,
    pub cfr: Option<bool>,
    pub c: Option<usize>,
    pub k: Option<usize>,
    pub t: Option<usize>,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub lr0: Option<f64>,
    pub iters: Option<usize>,
    pub batch: Option<usize>,
    pub lambda_san: Option<f64>,
    pub lambda_saw: Option<f64>,
    pub dataset: Option<String>,
    pub out: Option<String>,
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = o.$field.clone() { self.$field = v; })*
            };
        }
        set!(seed, san, saw, grouping, cfr, c, k, t, k1, k2, lr0, iters, batch,
             lambda_san, lambda_saw);
        if o.dataset.is_some() {
            self.dataset = o.dataset.clone();
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.k1 % self.c != 0 || self.k2 % self.c != 0 {
            return Err(Error::Config(format!(
                "c = {} must divide the stage widths k1 = {} and k2 = {}",
                self.c, self.k1, self.k2
            )));
        }
        if self.t < 1 || self.t >= self.k {
            return Err(Error::Config(format!(
                "t = {} must satisfy 1 <= t < k = {}",
                self.t, self.k
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.saw && self.grouping == Grouping::Saw && !self.san {
            return Err(Error::Config(
                "saw grouping requires san on (the channel ranking reads the \
                 alignment module's classifier weights)"
                    .into(),
            ));
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch: self.batch,
            poly_power: self.poly_power,
            iters: self.iters,
            lambda_san: self.lambda_san,
            lambda_saw: self.lambda_saw,
            seed: self.seed,
        }
    }

    pub fn san_config(&self) -> SanConfig {
        SanConfig {
            region: RegionConfig {
                k: self.k,
                t: self.t,
                max_iters: self.kmeans_max_iters,
            },
            epsilon: self.epsilon,
            cfr_enabled: self.cfr,
        }
    }

    /// Network layout implied by the switches. The classifier-only alignment
    /// form is not reachable through user configs; the ablation runner
    /// constructs it directly.
    pub fn net_config(&self, num_classes: usize) -> NetConfig {
        NetConfig {
            k1: self.k1,
            k2: self.k2,
            num_classes,
            categories: self.c,
            san_mode: if self.san { SanMode::Full } else { SanMode::Off },
            whiten: if !self.saw {
                WhitenMode::Off
            } else {
                match self.grouping {
                    Grouping::Iw => WhitenMode::Iw,
                    Grouping::Giw => WhitenMode::Giw,
                    Grouping::Saw => WhitenMode::Saw,
                }
            },
            san: self.san_config(),
        }
    }
}

/// Load a config: file (if any) with defaults filled, then flag overrides,
/// then validation.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            serde_json::from_str::<RunConfig>(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}

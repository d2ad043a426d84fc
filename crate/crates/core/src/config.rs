//! Pipeline configuration: flat `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::autograd::BatchNormMode;
use crate::error::{Error, Result};
use crate::postprocess::{Connectivity, VoteMode};
use crate::training::{AdamConfig, TrainConfig};

/// Where a default value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Stated by the published method.
    Published,
    /// Chosen here where the method is silent.
    Chosen,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Published => "published",
            Self::Chosen => "chosen",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub window_lo: f32,
    pub window_hi: f32,
    pub loc_size: usize,
    pub liver_patch: [usize; 3],
    pub tumor_patch: [usize; 3],
    pub brain_patch: [usize; 3],
    pub stride_fraction: f64,
    pub margin: usize,
    pub threshold: f32,
    pub connectivity: usize,
    pub vote: String,
    pub norm: String,
    pub folds: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub liver_patches: usize,
    pub tumor_patches: usize,
    pub tumor_fraction: f64,
    pub loc_net: String,
    pub liver_net: String,
    pub tumor_net: String,
    pub brain_net: String,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_lo: -100.0,
            window_hi: 200.0,
            loc_size: 256,
            liver_patch: [224, 224, 32],
            tumor_patch: [128, 128, 32],
            brain_patch: [64, 64, 64],
            stride_fraction: 0.5,
            margin: 10,
            threshold: 0.5,
            connectivity: 26,
            vote: "mean".into(),
            norm: "batch".into(),
            folds: 5,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            plateau_patience: 20,
            lr_factor: 0.1,
            epochs: 50,
            steps_per_epoch: 1,
            liver_patches: 8,
            tumor_patches: 150,
            tumor_fraction: 0.5,
            loc_net: "raunet1".into(),
            liver_net: "raunet2".into(),
            tumor_net: "raunet2".into(),
            brain_net: "raunet_brain".into(),
            seed: 0,
        }
    }
}

/// Every key with its provenance and a one-line description.
pub const KEYS: &[(&str, Provenance, &str)] = &[
    ("window_lo", Provenance::Published, "lower HU window bound"),
    ("window_hi", Provenance::Published, "upper HU window bound"),
    ("loc_size", Provenance::Published, "in-plane size of localization slices"),
    ("liver_patch", Provenance::Published, "liver patch x,y,z"),
    ("tumor_patch", Provenance::Published, "tumor patch x,y,z"),
    ("brain_patch", Provenance::Published, "brain patch x,y,z"),
    ("stride_fraction", Provenance::Chosen, "inference tiling stride as a fraction of the patch"),
    ("margin", Provenance::Published, "bounding-box margin in voxels"),
    ("threshold", Provenance::Chosen, "probability threshold (inclusive)"),
    ("connectivity", Provenance::Chosen, "3D component connectivity (6, 18 or 26)"),
    ("vote", Provenance::Chosen, "patch merging: mean or majority"),
    ("norm", Provenance::Chosen, "inference normalization: batch (per-patch statistics) or running"),
    ("folds", Provenance::Published, "cross-validation folds"),
    ("lr", Provenance::Published, "initial learning rate"),
    ("beta1", Provenance::Published, "Adam first-moment decay"),
    ("beta2", Provenance::Published, "Adam second-moment decay"),
    ("adam_eps", Provenance::Chosen, "Adam denominator guard"),
    ("plateau_patience", Provenance::Published, "epochs without improvement before a rate cut"),
    ("lr_factor", Provenance::Published, "rate multiplier on plateau"),
    ("epochs", Provenance::Published, "training epochs"),
    ("steps_per_epoch", Provenance::Chosen, "passes over the training patches per epoch"),
    ("liver_patches", Provenance::Chosen, "liver windows sampled per volume"),
    ("tumor_patches", Provenance::Published, "tumor patches sampled per volume"),
    ("tumor_fraction", Provenance::Chosen, "share of tumor-centred patches"),
    ("loc_net", Provenance::Published, "localization network"),
    ("liver_net", Provenance::Published, "liver network"),
    ("tumor_net", Provenance::Published, "tumor network"),
    ("brain_net", Provenance::Published, "brain tumor network"),
    ("seed", Provenance::Chosen, "base random seed"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("`{key}`: expected x,y,z, got `{v}`")));
    }
    Ok([parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?])
}

fn triple(t: [usize; 3]) -> String {
    format!("{},{},{}", t[0], t[1], t[2])
}

impl PipelineConfig {
    pub fn provenance(key: &str) -> Option<Provenance> {
        KEYS.iter().find(|k| k.0 == key).map(|k| k.1)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "window_lo" => self.window_lo = parse(key, v)?,
            "window_hi" => self.window_hi = parse(key, v)?,
            "loc_size" => self.loc_size = parse(key, v)?,
            "liver_patch" => self.liver_patch = parse_triple(key, v)?,
            "tumor_patch" => self.tumor_patch = parse_triple(key, v)?,
            "brain_patch" => self.brain_patch = parse_triple(key, v)?,
            "stride_fraction" => self.stride_fraction = parse(key, v)?,
            "margin" => self.margin = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "connectivity" => self.connectivity = parse(key, v)?,
            "vote" => self.vote = v.to_string(),
            "norm" => self.norm = v.to_string(),
            "folds" => self.folds = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "plateau_patience" => self.plateau_patience = parse(key, v)?,
            "lr_factor" => self.lr_factor = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "liver_patches" => self.liver_patches = parse(key, v)?,
            "tumor_patches" => self.tumor_patches = parse(key, v)?,
            "tumor_fraction" => self.tumor_fraction = parse(key, v)?,
            "loc_net" => self.loc_net = v.to_string(),
            "liver_net" => self.liver_net = v.to_string(),
            "tumor_net" => self.tumor_net = v.to_string(),
            "brain_net" => self.brain_net = v.to_string(),
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "window_lo" => self.window_lo.to_string(),
            "window_hi" => self.window_hi.to_string(),
            "loc_size" => self.loc_size.to_string(),
            "liver_patch" => triple(self.liver_patch),
            "tumor_patch" => triple(self.tumor_patch),
            "brain_patch" => triple(self.brain_patch),
            "stride_fraction" => self.stride_fraction.to_string(),
            "margin" => self.margin.to_string(),
            "threshold" => self.threshold.to_string(),
            "connectivity" => self.connectivity.to_string(),
            "vote" => self.vote.clone(),
            "norm" => self.norm.clone(),
            "folds" => self.folds.to_string(),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "plateau_patience" => self.plateau_patience.to_string(),
            "lr_factor" => self.lr_factor.to_string(),
            "epochs" => self.epochs.to_string(),
            "steps_per_epoch" => self.steps_per_epoch.to_string(),
            "liver_patches" => self.liver_patches.to_string(),
            "tumor_patches" => self.tumor_patches.to_string(),
            "tumor_fraction" => self.tumor_fraction.to_string(),
            "loc_net" => self.loc_net.clone(),
            "liver_net" => self.liver_net.clone(),
            "tumor_net" => self.tumor_net.clone(),
            "brain_net" => self.brain_net.clone(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.window_lo < self.window_hi) {
            return bad(format!("window_lo {} must be below window_hi {}", self.window_lo, self.window_hi));
        }
        if self.loc_size == 0 || [self.liver_patch, self.tumor_patch, self.brain_patch].iter().any(|p| p.contains(&0)) {
            return bad("patch and slice sizes must be positive".into());
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return bad(format!("stride_fraction must lie in (0, 1], got {}", self.stride_fraction));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        if ![6, 18, 26].contains(&self.connectivity) {
            return bad(format!("connectivity must be 6, 18 or 26, got {}", self.connectivity));
        }
        if !["mean", "majority"].contains(&self.vote.as_str()) {
            return bad(format!("vote must be mean or majority, got {}", self.vote));
        }
        if !["batch", "running"].contains(&self.norm.as_str()) {
            return bad(format!("norm must be batch or running, got {}", self.norm));
        }
        if self.folds == 0 || self.steps_per_epoch == 0 {
            return bad("folds and steps_per_epoch must be positive".into());
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam settings out of range".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) || self.plateau_patience == 0 {
            return bad("plateau settings out of range".into());
        }
        if !(0.0..=1.0).contains(&self.tumor_fraction) {
            return bad(format!("tumor_fraction must lie in [0, 1], got {}", self.tumor_fraction));
        }
        Ok(())
    }

    /// Full config text with each key's description and provenance.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, prov, desc) in KEYS {
            let _ = writeln!(s, "# {desc} ({})", prov.as_str());
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    pub fn connectivity(&self) -> Connectivity {
        Connectivity::from_count(self.connectivity).expect("validated")
    }

    pub fn vote_mode(&self) -> VoteMode {
        match self.vote.as_str() {
            "majority" => VoteMode::Majority(self.threshold),
            _ => VoteMode::Mean,
        }
    }

    pub fn inference_norm(&self) -> BatchNormMode {
        match self.norm.as_str() {
            "running" => BatchNormMode::Eval,
            _ => BatchNormMode::Batch,
        }
    }

    /// Tiling stride for `patch`: `stride_fraction` of each extent, at least 1.
    pub fn stride(&self, patch: [usize; 3]) -> [usize; 3] {
        patch.map(|p| ((p as f64 * self.stride_fraction).round() as usize).max(1))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            plateau_patience: self.plateau_patience,
            plateau_factor: self.lr_factor,
            inference_norm: self.inference_norm(),
            seed: self.seed,
            checkpoint: None,
            loss_csv: None,
        }
    }
}

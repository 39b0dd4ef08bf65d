//! Run configuration: every hyperparameter of a run, loaded from a flat
//! `key = value` text file plus command-line overrides.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Average,
    MinEntropy,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Average => "average",
            FusionMode::MinEntropy => "min_entropy",
        }
    }
}

/// One switch per row of the ablation table. All off is the full method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Disables photometric noise, multi-scale fusion and flipping together.
    pub no_aug_consistency: bool,
    /// Momentum net replaced by the segmentation net itself (γψ = 0, T = 1).
    pub no_momentum: bool,
    pub no_photometric: bool,
    /// Pseudo labels come from the momentum net's full-image pass only.
    pub no_multiscale: bool,
    /// λ = 0.
    pub no_focal: bool,
    /// Min-entropy fusion instead of averaging.
    pub min_entropy: bool,
    /// Class-based thresholding off (β → 0): θ = ζ·m*.
    pub no_cbt: bool,
    /// Confidence weight of the momentum net replaced by 1.
    pub no_conf_reg: bool,
    /// Uniform target image sampling.
    pub no_importance_sampling: bool,
    /// Target crops are never flipped.
    pub no_flip: bool,
}

pub const ABLATION_KEYS: [(&str, &str); 10] = [
    ("no_aug_consistency", "No augmentation consistency"),
    ("no_momentum", "No momentum net (gamma_psi = 0, T = 1)"),
    ("no_photometric", "No photometric noise"),
    ("no_multiscale", "No multi-scale fusion"),
    ("no_focal", "No focal loss (lambda = 0)"),
    ("min_entropy", "Min. entropy fusion (vs averaging)"),
    ("no_cbt", "No class-based thresholding (beta -> 0)"),
    ("no_conf_reg", "No confidence regularisation"),
    ("no_importance_sampling", "No importance sampling"),
    ("no_flip", "No horizontal flipping"),
];

impl Ablations {
    fn flag_mut(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "no_aug_consistency" => &mut self.no_aug_consistency,
            "no_momentum" => &mut self.no_momentum,
            "no_photometric" => &mut self.no_photometric,
            "no_multiscale" => &mut self.no_multiscale,
            "no_focal" => &mut self.no_focal,
            "min_entropy" => &mut self.min_entropy,
            "no_cbt" => &mut self.no_cbt,
            "no_conf_reg" => &mut self.no_conf_reg,
            "no_importance_sampling" => &mut self.no_importance_sampling,
            "no_flip" => &mut self.no_flip,
            _ => return None,
        })
    }

    pub fn flag(&self, name: &str) -> Option<bool> {
        let mut copy = *self;
        copy.flag_mut(name).map(|f| *f)
    }

    pub fn any(&self) -> bool {
        ABLATION_KEYS
            .iter()
            .any(|(k, _)| self.flag(k).unwrap_or(false))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub num_classes: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub crops_per_image: usize,
    pub min_scale: f64,
    pub gamma_chi: f64,
    pub gamma_psi: f64,
    pub momentum_period: usize,
    pub zeta: f64,
    pub beta: f64,
    pub lambda: f64,
    pub target_loss_scale: f64,
    pub lr: f64,
    /// Learning rate of the adaptation phase.
    pub adapt_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    pub batch_source: usize,
    pub batch_target_images: usize,
    pub pretrain_iters: usize,
    pub adapt_iters: usize,
    pub fusion_mode: FusionMode,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub val_count: usize,
    /// Replaces every class threshold by a constant. Diagnostic only.
    pub force_threshold: Option<f64>,
    pub ablation: Ablations,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            image_h: 64,
            image_w: 64,
            input_h: 64,
            input_w: 64,
            crops_per_image: 3,
            min_scale: 0.5,
            gamma_chi: 0.99,
            gamma_psi: 0.99,
            momentum_period: 100,
            zeta: 0.75,
            beta: 1e-3,
            lambda: 3.0,
            target_loss_scale: 5.0,
            lr: 0.01,
            adapt_lr: 1e-3,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            bn_momentum: 0.1,
            batch_source: 4,
            batch_target_images: 1,
            pretrain_iters: 3000,
            adapt_iters: 6000,
            fusion_mode: FusionMode::Average,
            eval_every: 500,
            checkpoint_every: 500,
            source_count: 200,
            target_count: 200,
            val_count: 100,
            force_threshold: None,
            ablation: Ablations::default(),
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(location: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(location, format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(location: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(
            location,
            format!("`{key}` expects true/false, got `{value}`"),
        )),
    }
}

impl RunConfig {
    /// Parses a config file. Keys not listed in the file keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::default();
        config.merge_text(&text, &path.display().to_string())?;
        config.finalize()?;
        Ok(config)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.merge_text(text, "<text>")?;
        config.finalize()?;
        Ok(config)
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("{origin}:{}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(&location, "expected `key = value`"))?;
            self.set(key.trim(), value.trim(), &location)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override, as given to `--set`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let location = format!("--set {assignment}");
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(&location, "expected key=value"))?;
        self.set(key.trim(), value.trim(), &location)
    }

    pub fn set(&mut self, key: &str, value: &str, location: &str) -> Result<()> {
        let l = location;
        match key {
            "num_classes" => self.num_classes = parse_num(l, key, value)?,
            "image_h" => self.image_h = parse_num(l, key, value)?,
            "image_w" => self.image_w = parse_num(l, key, value)?,
            "input_h" => self.input_h = parse_num(l, key, value)?,
            "input_w" => self.input_w = parse_num(l, key, value)?,
            "crops_per_image" => self.crops_per_image = parse_num(l, key, value)?,
            "min_scale" => self.min_scale = parse_num(l, key, value)?,
            "gamma_chi" => self.gamma_chi = parse_num(l, key, value)?,
            "gamma_psi" => self.gamma_psi = parse_num(l, key, value)?,
            "momentum_period" => self.momentum_period = parse_num(l, key, value)?,
            "zeta" => self.zeta = parse_num(l, key, value)?,
            "beta" => self.beta = parse_num(l, key, value)?,
            "lambda" => self.lambda = parse_num(l, key, value)?,
            "target_loss_scale" => self.target_loss_scale = parse_num(l, key, value)?,
            "lr" => self.lr = parse_num(l, key, value)?,
            "adapt_lr" => self.adapt_lr = parse_num(l, key, value)?,
            "sgd_momentum" => self.sgd_momentum = parse_num(l, key, value)?,
            "weight_decay" => self.weight_decay = parse_num(l, key, value)?,
            "bn_momentum" => self.bn_momentum = parse_num(l, key, value)?,
            "batch_source" => self.batch_source = parse_num(l, key, value)?,
            "batch_target_images" => self.batch_target_images = parse_num(l, key, value)?,
            "pretrain_iters" => self.pretrain_iters = parse_num(l, key, value)?,
            "adapt_iters" => self.adapt_iters = parse_num(l, key, value)?,
            "fusion_mode" => {
                self.fusion_mode = match value {
                    "average" => FusionMode::Average,
                    "min_entropy" => FusionMode::MinEntropy,
                    _ => {
                        return Err(Error::config(
                            l,
                            format!("fusion_mode must be average or min_entropy, got `{value}`"),
                        ))
                    }
                }
            }
            "eval_every" => self.eval_every = parse_num(l, key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(l, key, value)?,
            "source_count" => self.source_count = parse_num(l, key, value)?,
            "target_count" => self.target_count = parse_num(l, key, value)?,
            "val_count" => self.val_count = parse_num(l, key, value)?,
            "force_threshold" => {
                self.force_threshold = match value {
                    "none" | "" => None,
                    v => Some(parse_num(l, key, v)?),
                }
            }
            "seed" => self.seed = parse_num(l, key, value)?,
            _ => {
                let flag = key
                    .strip_prefix("ablation.")
                    .and_then(|name| self.ablation.flag_mut(name))
                    .ok_or_else(|| Error::config(l, format!("unknown key `{key}`")))?;
                *flag = parse_bool(l, key, value)?;
            }
        }
        Ok(())
    }

    /// Resolves ablation flags into the hyperparameters they pin, then
    /// validates. Idempotent.
    pub fn finalize(&mut self) -> Result<()> {
        let a = &mut self.ablation;
        if a.no_aug_consistency {
            a.no_photometric = true;
            a.no_multiscale = true;
            a.no_flip = true;
        }
        if a.no_momentum {
            self.gamma_psi = 0.0;
            self.momentum_period = 1;
        }
        if a.no_focal {
            self.lambda = 0.0;
        }
        if a.min_entropy {
            self.fusion_mode = FusionMode::MinEntropy;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config("config", msg));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_classes > 255 {
            return fail("num_classes must fit below the IGNORE label 255".into());
        }
        for (name, v) in [("gamma_chi", self.gamma_chi), ("gamma_psi", self.gamma_psi)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return fail(format!("zeta must lie in (0, 1], got {}", self.zeta));
        }
        if !(self.beta > 0.0) {
            return fail(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        for (name, v) in [("lr", self.lr), ("adapt_lr", self.adapt_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if self.momentum_period < 1 {
            return fail("momentum_period must be >= 1".into());
        }
        if !(self.min_scale > 0.0 && self.min_scale <= 1.0) {
            return fail(format!("min_scale must lie in (0, 1], got {}", self.min_scale));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail(format!("bn_momentum must lie in [0, 1], got {}", self.bn_momentum));
        }
        if self.input_h < 2 || self.input_w < 2 || self.image_h < 2 || self.image_w < 2 {
            return fail("image and input sizes must be >= 2".into());
        }
        if self.batch_source == 0 {
            return fail("batch_source must be >= 1".into());
        }
        if let Some(t) = self.force_threshold {
            if !(0.0..=1.0).contains(&t) {
                return fail(format!("force_threshold must lie in [0, 1], got {t}"));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("num_classes", self.num_classes.to_string());
        kv("image_h", self.image_h.to_string());
        kv("image_w", self.image_w.to_string());
        kv("input_h", self.input_h.to_string());
        kv("input_w", self.input_w.to_string());
        kv("crops_per_image", self.crops_per_image.to_string());
        kv("min_scale", format!("{:?}", self.min_scale));
        kv("gamma_chi", format!("{:?}", self.gamma_chi));
        kv("gamma_psi", format!("{:?}", self.gamma_psi));
        kv("momentum_period", self.momentum_period.to_string());
        kv("zeta", format!("{:?}", self.zeta));
        kv("beta", format!("{:?}", self.beta));
        kv("lambda", format!("{:?}", self.lambda));
        kv("target_loss_scale", format!("{:?}", self.target_loss_scale));
        kv("lr", format!("{:?}", self.lr));
        kv("adapt_lr", format!("{:?}", self.adapt_lr));
        kv("sgd_momentum", format!("{:?}", self.sgd_momentum));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("bn_momentum", format!("{:?}", self.bn_momentum));
        kv("batch_source", self.batch_source.to_string());
        kv("batch_target_images", self.batch_target_images.to_string());
        kv("pretrain_iters", self.pretrain_iters.to_string());
        kv("adapt_iters", self.adapt_iters.to_string());
        kv("fusion_mode", self.fusion_mode.as_str().to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("source_count", self.source_count.to_string());
        kv("target_count", self.target_count.to_string());
        kv("val_count", self.val_count.to_string());
        kv(
            "force_threshold",
            self.force_threshold
                .map_or_else(|| "none".to_string(), |t| format!("{t:?}")),
        );
        kv("seed", self.seed.to_string());
        for (name, _) in ABLATION_KEYS {
            kv(
                &format!("ablation.{name}"),
                self.ablation.flag(name).unwrap_or(false).to_string(),
            );
        }
        s
    }

    /// Short hex digest of the canonical text, stored in checkpoint headers.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

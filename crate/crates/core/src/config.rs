//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Curvature;
use crate::losses::{AdamWConfig, ContrastMode, ReconNorm};
use crate::masking::{Criterion, GcmAxis, MaskConfig};
use crate::network::{DecoderPositions, ModelConfig};
use crate::skeleton::BODY25_TORSO;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub joints: usize,
    pub frames: usize,
    pub pool_r: usize,
    pub embed_dim: usize,
    pub torso_joints: Vec<usize>,
    pub curvature_c: f64,
    pub heads: usize,
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub decoder_positions: DecoderPositions,
    pub mask_ratio: f64,
    pub tau: f64,
    pub odd_criterion: Criterion,
    pub even_criterion: Criterion,
    pub use_gumbel: bool,
    pub invert_criterion: bool,
    pub gcm_strategy: u8,
    pub gcm_axis: GcmAxis,
    pub mu: f64,
    pub contrast_mode: ContrastMode,
    pub recon_norm: ReconNorm,
    pub lr: f64,
    pub lr_end: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub crop_min: f64,
    pub crop_max: f64,
    pub eval_crop: f64,
    pub checkpoint_every: usize,
    pub overfit: bool,
    pub max_steps: usize,
    pub log_timing: bool,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub probe_momentum: f64,
    pub probe_random_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("data/synthetic.seq"),
            out: PathBuf::from("runs/default"),
            joints: 25,
            frames: 72,
            pool_r: 3,
            embed_dim: 256,
            torso_joints: BODY25_TORSO.to_vec(),
            curvature_c: -1.0,
            heads: 8,
            hidden: 1024,
            enc_layers: 8,
            dec_layers: 3,
            dropout: 0.0,
            decoder_positions: DecoderPositions::OriginalFrame,
            mask_ratio: 0.9,
            tau: 0.9,
            odd_criterion: Criterion::Temporal,
            even_criterion: Criterion::Spatial,
            use_gumbel: true,
            invert_criterion: false,
            gcm_strategy: 1,
            gcm_axis: GcmAxis::Last,
            mu: 1.0,
            contrast_mode: ContrastMode::AsWritten,
            recon_norm: ReconNorm::Masked,
            lr: 1e-3,
            lr_end: 5e-4,
            warmup_epochs: 20,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            epochs: 400,
            batch_size: 16,
            seed: 0,
            crop_min: 0.5,
            crop_max: 1.0,
            eval_crop: 0.9,
            checkpoint_every: 0,
            overfit: false,
            max_steps: 0,
            log_timing: false,
            probe_epochs: 100,
            probe_lr: 0.1,
            probe_batch: 32,
            probe_momentum: 0.9,
            probe_random_seeds: 5,
        }
    }
}

/// Keys that fix parameter shapes; hashed into the checkpoint digest.
const MODEL_KEYS: &[&str] = &[
    "joints",
    "frames",
    "pool_r",
    "embed_dim",
    "torso_joints",
    "curvature_c",
    "heads",
    "hidden",
    "enc_layers",
    "dec_layers",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn show_axis(a: GcmAxis) -> &'static str {
    match a {
        GcmAxis::Last => "last",
        GcmAxis::First => "first",
    }
}

fn show_positions(p: DecoderPositions) -> &'static str {
    match p {
        DecoderPositions::OriginalFrame => "original",
        DecoderPositions::WithinHalf => "within-half",
    }
}

fn show_contrast(m: ContrastMode) -> &'static str {
    match m {
        ContrastMode::AsWritten => "as-written",
        ContrastMode::Corrected => "corrected",
    }
}

fn show_norm(n: ReconNorm) -> &'static str {
    match n {
        ReconNorm::Masked => "masked",
        ReconNorm::AsWritten => "as-written",
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data" => self.data = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "joints" => self.joints = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "pool_r" => self.pool_r = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "torso_joints" => self.torso_joints = parse_list(key, v)?,
            "curvature_c" => self.curvature_c = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "enc_layers" => self.enc_layers = parse(key, v)?,
            "dec_layers" => self.dec_layers = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "decoder_positions" => self.decoder_positions = v.parse()?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "odd_criterion" => self.odd_criterion = v.parse()?,
            "even_criterion" => self.even_criterion = v.parse()?,
            "use_gumbel" => self.use_gumbel = parse_bool(key, v)?,
            "invert_criterion" => self.invert_criterion = parse_bool(key, v)?,
            "gcm_strategy" => self.gcm_strategy = parse(key, v)?,
            "gcm_axis" => {
                self.gcm_axis = match v {
                    "last" => GcmAxis::Last,
                    "first" => GcmAxis::First,
                    _ => return Err(Error::Config(format!("`gcm_axis` expects last or first, got `{v}`"))),
                }
            }
            "mu" => self.mu = parse(key, v)?,
            "contrast_mode" => self.contrast_mode = v.parse()?,
            "recon_norm" => self.recon_norm = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "lr_end" => self.lr_end = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "crop_min" => self.crop_min = parse(key, v)?,
            "crop_max" => self.crop_max = parse(key, v)?,
            "eval_crop" => self.eval_crop = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "overfit" => self.overfit = parse_bool(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "log_timing" => self.log_timing = parse_bool(key, v)?,
            "probe_epochs" => self.probe_epochs = parse(key, v)?,
            "probe_lr" => self.probe_lr = parse(key, v)?,
            "probe_batch" => self.probe_batch = parse(key, v)?,
            "probe_momentum" => self.probe_momentum = parse(key, v)?,
            "probe_random_seeds" => self.probe_random_seeds = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k, v)
    }

    /// Parses config text on top of the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Every key in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let list = self.torso_joints.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("data", self.data.display().to_string()),
            ("out", self.out.display().to_string()),
            ("joints", self.joints.to_string()),
            ("frames", self.frames.to_string()),
            ("pool_r", self.pool_r.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("torso_joints", list),
            ("curvature_c", self.curvature_c.to_string()),
            ("heads", self.heads.to_string()),
            ("hidden", self.hidden.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("dropout", self.dropout.to_string()),
            ("decoder_positions", show_positions(self.decoder_positions).into()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("tau", self.tau.to_string()),
            ("odd_criterion", self.odd_criterion.to_string()),
            ("even_criterion", self.even_criterion.to_string()),
            ("use_gumbel", self.use_gumbel.to_string()),
            ("invert_criterion", self.invert_criterion.to_string()),
            ("gcm_strategy", self.gcm_strategy.to_string()),
            ("gcm_axis", show_axis(self.gcm_axis).into()),
            ("mu", self.mu.to_string()),
            ("contrast_mode", show_contrast(self.contrast_mode).into()),
            ("recon_norm", show_norm(self.recon_norm).into()),
            ("lr", self.lr.to_string()),
            ("lr_end", self.lr_end.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("crop_min", self.crop_min.to_string()),
            ("crop_max", self.crop_max.to_string()),
            ("eval_crop", self.eval_crop.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("overfit", self.overfit.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("log_timing", self.log_timing.to_string()),
            ("probe_epochs", self.probe_epochs.to_string()),
            ("probe_lr", self.probe_lr.to_string()),
            ("probe_batch", self.probe_batch.to_string()),
            ("probe_momentum", self.probe_momentum.to_string()),
            ("probe_random_seeds", self.probe_random_seeds.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 over the keys that fix parameter shapes.
    pub fn model_digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            if MODEL_KEYS.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn curvature(&self) -> Result<Curvature> {
        Curvature::new(self.curvature_c)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        if self.torso_joints.is_empty() || self.torso_joints.len() >= self.joints {
            return Err(Error::Config(format!(
                "torso_joints must hold between 1 and {} of the {} joints",
                self.joints.saturating_sub(1),
                self.joints
            )));
        }
        let cfg = ModelConfig {
            joints: self.joints - self.torso_joints.len(),
            frames: self.frames,
            pool_r: self.pool_r,
            embed_dim: self.embed_dim,
            heads: self.heads,
            hidden: self.hidden,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            curvature: self.curvature()?,
            dropout: self.dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            ratio: self.mask_ratio,
            tau: self.tau,
            odd: self.odd_criterion,
            even: self.even_criterion,
            use_gumbel: self.use_gumbel,
            invert: self.invert_criterion,
            gcm_strategy: self.gcm_strategy,
            gcm_axis: self.gcm_axis,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }

    /// Checks ranges not covered by the model configuration.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.mu >= 0.0) {
            return bad(format!("mu must be non-negative, got {}", self.mu));
        }
        if !matches!(self.gcm_strategy, 1 | 2) {
            return bad(format!("gcm_strategy must be 1 or 2, got {}", self.gcm_strategy));
        }
        if !(0.0 < self.crop_min && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return bad(format!("crop range [{}, {}] must lie in (0, 1]", self.crop_min, self.crop_max));
        }
        if !(0.0 < self.eval_crop && self.eval_crop <= 1.0) {
            return bad(format!("eval_crop must lie in (0, 1], got {}", self.eval_crop));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 for the contrast loss, got {}", self.batch_size));
        }
        if self.probe_batch == 0 {
            return bad("probe_batch must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("embed_dim", "64").unwrap();
        cfg.set("torso_joints", "0, 1,2").unwrap();
        cfg.set("gcm_axis", "first").unwrap();
        cfg.set("contrast_mode", "corrected").unwrap();
        let back = RunConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::parse_text("# heading\n\ntau = 0.5 # inline\n").unwrap();
        assert_eq!(cfg.tau, 0.5);
        assert!(RunConfig::parse_text("nonsense").is_err());
        assert!(RunConfig::parse_text("bogus = 1").is_err());
        assert!(RunConfig::parse_text("use_gumbel = yes").is_err());
        assert!(RunConfig::parse_text("odd_criterion = loud").is_err());
    }

    #[test]
    fn digest_tracks_model_keys_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.epochs = 3;
        b.tau = 0.1;
        assert_eq!(a.model_digest(), b.model_digest());
        b.embed_dim = 64;
        assert_ne!(a.model_digest(), b.model_digest());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let mut c = RunConfig::default();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        c = RunConfig::default();
        c.torso_joints.clear();
        assert!(c.validate().is_err());
    }
}

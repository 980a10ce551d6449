//! Model, loss, attention and training configuration, and the flat
//! `key=value` config file that carries all four.
//!
//! ```text
//! # comments and blank lines are ignored
//! img_size_small=48
//! lambda=0.01
//! alpha_k=1/3
//! beta_pair=auto
//! ```
//!
//! Every key belongs to exactly one section; unknown or repeated keys are
//! rejected. Float values accept `a/b` fractions.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{check_heads, INIT_STD};

/// Init scale of [`ModelConfig::toy`].
pub const TOY_INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub img_size_small: usize,
    pub img_size_large: usize,
    pub patch_small: usize,
    pub patch_large: usize,
    pub dim_small: usize,
    pub dim_large: usize,
    pub depth_small: usize,
    pub depth_large: usize,
    pub heads: usize,
    pub decoder_depth: usize,
    pub channels: usize,
    /// Standard deviation of the truncated-normal weight init.
    pub init_std: f64,
}

impl ModelConfig {
    /// Full-size two-branch layout: 384px/12px/192 and 224px/16px/384,
    /// depths 1 and 4, six heads, one decoder layer.
    pub fn paper() -> Self {
        Self {
            img_size_small: 384,
            img_size_large: 224,
            patch_small: 12,
            patch_large: 16,
            dim_small: 192,
            dim_large: 384,
            depth_small: 1,
            depth_large: 4,
            heads: 6,
            decoder_depth: 1,
            channels: 3,
            init_std: INIT_STD,
        }
    }

    /// Desk-scale layout used for training runs on synthetic data. At
    /// widths 24/48 the full-size init of 0.02 leaves every MLP in its
    /// linear range, so the init is scaled up to give pre-activations of
    /// the same order as the full-size model.
    pub fn toy() -> Self {
        Self {
            img_size_small: 48,
            img_size_large: 28,
            patch_small: 6,
            patch_large: 7,
            dim_small: 24,
            dim_large: 48,
            depth_small: 1,
            depth_large: 4,
            heads: 6,
            decoder_depth: 1,
            channels: 1,
            init_std: TOY_INIT_STD,
        }
    }

    /// Smallest layout exercised by the finite-difference suite.
    pub fn gradcheck() -> Self {
        Self {
            img_size_small: 16,
            img_size_large: 16,
            patch_small: 4,
            patch_large: 8,
            dim_small: 8,
            dim_large: 16,
            depth_small: 1,
            depth_large: 2,
            heads: 2,
            decoder_depth: 1,
            channels: 1,
            init_std: INIT_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, img, patch) in [
            ("small", self.img_size_small, self.patch_small),
            ("large", self.img_size_large, self.patch_large),
        ] {
            if patch == 0 || img == 0 || img % patch != 0 {
                return Err(Error::Config(format!(
                    "{name} branch: image size {img} is not a multiple of patch size {patch}"
                )));
            }
        }
        check_heads(self.dim_small, self.heads)?;
        check_heads(self.dim_large, self.heads)?;
        if self.depth_small == 0 || self.depth_large == 0 || self.decoder_depth == 0 {
            return Err(Error::Config(
                "encoder and decoder depths must be at least 1".into(),
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!(
                "init_std must be positive, got {}",
                self.init_std
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Number of contrastive taps: the deeper branch's depth.
    pub fn taps(&self) -> usize {
        self.depth_small.max(self.depth_large)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    AllPairs,
    LeastSimilar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseForm {
    /// `exp(-Sim)` per region pair.
    ExpInverse,
    /// `1 / max(Sim, floor)` per region pair.
    Reciprocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMode {
    SelectAtt,
    CrossAtt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SclConfig {
    pub tau: f64,
    /// Label-distance threshold; `None` means 0.1 × the training label range.
    pub beta_pair: Option<f64>,
    pub noise_mode: NoiseMode,
    pub noise_form: NoiseForm,
    /// Regions per side of each branch's patch grid.
    pub regions_per_side: usize,
}

impl Default for SclConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            beta_pair: None,
            noise_mode: NoiseMode::AllPairs,
            noise_form: NoiseForm::ExpInverse,
            regions_per_side: 2,
        }
    }
}

impl SclConfig {
    pub const AUTO_BETA_FRACTION: f64 = 0.1;

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if let Some(b) = self.beta_pair {
            if b.is_nan() || b < 0.0 {
                return Err(Error::Config(format!("beta_pair must be >= 0, got {b}")));
            }
        }
        if self.regions_per_side == 0 {
            return Err(Error::Config("regions_per_side must be at least 1".into()));
        }
        Ok(())
    }

    pub fn resolve_beta_pair(&self, label_range: f64) -> f64 {
        self.beta_pair
            .unwrap_or(Self::AUTO_BETA_FRACTION * label_range)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SfaConfig {
    pub alpha_k: f64,
    pub beta_k: f64,
    pub icm_frozen_seed: u64,
    pub mode: AttnMode,
    pub masks: usize,
}

impl Default for SfaConfig {
    fn default() -> Self {
        Self {
            alpha_k: 1.0 / 3.0,
            beta_k: 3.0 / 4.0,
            icm_frozen_seed: 0x5eed,
            mode: AttnMode::SelectAtt,
            masks: 3,
        }
    }
}

impl SfaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha_k && self.alpha_k <= self.beta_k && self.beta_k <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < alpha_k <= beta_k <= 1, got [{}, {}]",
                self.alpha_k, self.beta_k
            )));
        }
        if self.masks == 0 {
            return Err(Error::Config("masks must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub repeats: usize,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 9,
            lr: 2e-4,
            lr_decay_factor: 10.0,
            lr_decay_every: 3,
            batch_size: 16,
            lambda: 0.01,
            repeats: 10,
            split_fraction: 0.8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !positive(self.lr) || !positive(self.lr_decay_factor) || self.lr_decay_every == 0 {
            return Err(Error::Config(
                "lr, lr_decay_factor and lr_decay_every must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.repeats == 0 {
            return Err(Error::Config(
                "batch_size and repeats must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Step schedule: `lr / factor^(epoch / every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr
            / self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Everything a run needs, as read from a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub scl: SclConfig,
    pub sfa: SfaConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            scl: SclConfig::default(),
            sfa: SfaConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// False for NaN as well as for non-positive values.
fn positive(x: f64) -> bool {
    x > 0.0
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let bad = || Error::Config(format!("{key}: cannot parse {v:?} as a number"));
    let x = match v.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            n / d
        }
        None => v.parse().map_err(|_| bad())?,
    };
    if x.is_nan() {
        return Err(bad());
    }
    Ok(x)
}

fn parse_int<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?} as an integer")))
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scl.validate()?;
        self.sfa.validate()?;
        self.train.validate()
    }

    /// Sets one key from its textual form, as it would appear in a config
    /// file. The result is not validated.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.scl;
        let a = &mut self.sfa;
        let t = &mut self.train;
        match key {
            "img_size_small" => m.img_size_small = parse_int(key, v)?,
            "img_size_large" => m.img_size_large = parse_int(key, v)?,
            "patch_small" => m.patch_small = parse_int(key, v)?,
            "patch_large" => m.patch_large = parse_int(key, v)?,
            "dim_small" => m.dim_small = parse_int(key, v)?,
            "dim_large" => m.dim_large = parse_int(key, v)?,
            "depth_small" => m.depth_small = parse_int(key, v)?,
            "depth_large" => m.depth_large = parse_int(key, v)?,
            "heads" => m.heads = parse_int(key, v)?,
            "decoder_depth" => m.decoder_depth = parse_int(key, v)?,
            "channels" => m.channels = parse_int(key, v)?,
            "init_std" => m.init_std = parse_f64(key, v)?,
            "tau" => s.tau = parse_f64(key, v)?,
            "beta_pair" => {
                s.beta_pair = match v {
                    "auto" => None,
                    _ => Some(parse_f64(key, v)?),
                }
            }
            "noise_mode" => {
                s.noise_mode = match v {
                    "all_pairs" => NoiseMode::AllPairs,
                    "least_similar" => NoiseMode::LeastSimilar,
                    _ => return Err(Error::Config(format!("noise_mode: unknown value {v:?}"))),
                }
            }
            "noise_form" => {
                s.noise_form = match v {
                    "exp_inverse" => NoiseForm::ExpInverse,
                    "reciprocal" => NoiseForm::Reciprocal,
                    _ => return Err(Error::Config(format!("noise_form: unknown value {v:?}"))),
                }
            }
            "regions_per_side" => s.regions_per_side = parse_int(key, v)?,
            "alpha_k" => a.alpha_k = parse_f64(key, v)?,
            "beta_k" => a.beta_k = parse_f64(key, v)?,
            "icm_frozen_seed" => a.icm_frozen_seed = parse_int(key, v)?,
            "mode" => {
                a.mode = match v {
                    "select_att" => AttnMode::SelectAtt,
                    "cross_att" => AttnMode::CrossAtt,
                    _ => return Err(Error::Config(format!("mode: unknown value {v:?}"))),
                }
            }
            "masks" => a.masks = parse_int(key, v)?,
            "epochs" => t.epochs = parse_int(key, v)?,
            "lr" => t.lr = parse_f64(key, v)?,
            "lr_decay_factor" => t.lr_decay_factor = parse_f64(key, v)?,
            "lr_decay_every" => t.lr_decay_every = parse_int(key, v)?,
            "batch_size" => t.batch_size = parse_int(key, v)?,
            "lambda" => t.lambda = parse_f64(key, v)?,
            "repeats" => t.repeats = parse_int(key, v)?,
            "split_fraction" => t.split_fraction = parse_f64(key, v)?,
            "seed" => t.seed = parse_int(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {k:?}",
                    n + 1
                )));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes every key; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let m = &self.model;
        let s = &self.scl;
        let a = &self.sfa;
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        kv("img_size_small", m.img_size_small.to_string());
        kv("img_size_large", m.img_size_large.to_string());
        kv("patch_small", m.patch_small.to_string());
        kv("patch_large", m.patch_large.to_string());
        kv("dim_small", m.dim_small.to_string());
        kv("dim_large", m.dim_large.to_string());
        kv("depth_small", m.depth_small.to_string());
        kv("depth_large", m.depth_large.to_string());
        kv("heads", m.heads.to_string());
        kv("decoder_depth", m.decoder_depth.to_string());
        kv("channels", m.channels.to_string());
        kv("init_std", m.init_std.to_string());
        kv("tau", s.tau.to_string());
        kv(
            "beta_pair",
            s.beta_pair.map_or("auto".to_string(), |b| b.to_string()),
        );
        kv(
            "noise_mode",
            match s.noise_mode {
                NoiseMode::AllPairs => "all_pairs",
                NoiseMode::LeastSimilar => "least_similar",
            }
            .into(),
        );
        kv(
            "noise_form",
            match s.noise_form {
                NoiseForm::ExpInverse => "exp_inverse",
                NoiseForm::Reciprocal => "reciprocal",
            }
            .into(),
        );
        kv("regions_per_side", s.regions_per_side.to_string());
        kv("alpha_k", a.alpha_k.to_string());
        kv("beta_k", a.beta_k.to_string());
        kv("icm_frozen_seed", a.icm_frozen_seed.to_string());
        kv(
            "mode",
            match a.mode {
                AttnMode::SelectAtt => "select_att",
                AttnMode::CrossAtt => "cross_att",
            }
            .into(),
        );
        kv("masks", a.masks.to_string());
        kv("epochs", t.epochs.to_string());
        kv("lr", t.lr.to_string());
        kv("lr_decay_factor", t.lr_decay_factor.to_string());
        kv("lr_decay_every", t.lr_decay_every.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lambda", t.lambda.to_string());
        kv("repeats", t.repeats.to_string());
        kv("split_fraction", t.split_fraction.to_string());
        kv("seed", t.seed.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_instance_is_valid() {
        let p = ModelConfig::paper();
        p.validate().unwrap();
        assert_eq!((p.depth_small, p.depth_large, p.decoder_depth), (1, 4, 1));
        assert_eq!((p.img_size_small, p.img_size_large), (384, 224));
        assert_eq!((p.patch_small, p.patch_large), (12, 16));
        assert_eq!((p.dim_small, p.dim_large, p.heads), (192, 384, 6));
        ModelConfig::toy().validate().unwrap();
        ModelConfig::gradcheck().validate().unwrap();
    }

    #[test]
    fn indivisible_sizes_rejected() {
        let mut m = ModelConfig::toy();
        m.patch_large = 16;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::toy();
        m.heads = 5;
        assert!(m.validate().is_err());
    }

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let t = TrainConfig::default();
        assert_eq!(
            (t.epochs, t.lr, t.lambda, t.repeats, t.split_fraction),
            (9, 2e-4, 0.01, 10, 0.8)
        );
        let s = SfaConfig::default();
        assert_eq!((s.alpha_k, s.beta_k, s.masks), (1.0 / 3.0, 0.75, 3));
    }

    #[test]
    fn lr_schedule_decays_every_three_epochs() {
        let t = TrainConfig::default();
        let lrs: Vec<f64> = (0..9).map(|e| t.lr_at(e)).collect();
        for e in 0..3 {
            assert_eq!(lrs[e], 2e-4);
            assert!((lrs[e + 3] - 2e-5).abs() < 1e-18);
            assert!((lrs[e + 6] - 2e-6).abs() < 1e-19);
        }
    }

    #[test]
    fn parse_rejects_unknown_and_duplicate_keys() {
        assert!(Config::parse("lamda=0.1\n")
            .unwrap_err()
            .to_string()
            .contains("unknown key"));
        assert!(Config::parse("lambda=0.1\nlambda=0.2\n").is_err());
        assert!(Config::parse("lambda 0.1\n").is_err());
        assert!(Config::parse("alpha_k=0.9\nbeta_k=0.5\n").is_err());
    }

    #[test]
    fn parse_accepts_fractions_and_comments() {
        let c =
            Config::parse("# sweep\nalpha_k = 1/4  # lower\nbeta_k=2/3\nbeta_pair=0.05\n").unwrap();
        assert_eq!(c.sfa.alpha_k, 0.25);
        assert_eq!(c.sfa.beta_k, 2.0 / 3.0);
        assert_eq!(c.scl.beta_pair, Some(0.05));
    }

    #[test]
    fn round_trip() {
        let mut c = Config::default();
        c.sfa.alpha_k = 1.0 / 3.0;
        c.scl.noise_form = NoiseForm::Reciprocal;
        c.scl.beta_pair = Some(0.123456789);
        c.train.lr = 2e-4;
        let again = Config::parse(&c.serialize()).unwrap();
        assert_eq!(again, c);
        assert_eq!(Config::parse(&again.serialize()).unwrap(), again);
    }
}

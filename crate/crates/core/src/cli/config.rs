use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{DEFAULT_MAX_VALUE, HANDCRAFTED_ID};
use crate::models::GuideMode;
use crate::training::{AdversarialLoss, TrainConfig};

/// Where an offending setting came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "config line {n}"),
            Origin::Override(s) => write!(f, "override `{s}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{origin}: {msg}")]
pub struct ConfigError {
    pub origin: Origin,
    pub msg: String,
}

/// Every tunable of a run, stored as a flat `key = value` document.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub max_value: f64,
    pub feature_extractor: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            max_value: DEFAULT_MAX_VALUE,
            feature_extractor: HANDCRAFTED_ID.into(),
        }
    }
}

/// Recognized keys with a one-line description, in canonical (sorted) order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("adam_eps", "optimizer denominator stabilizer"),
    ("adversarial_loss", "least-squares | logistic"),
    ("batch_size", "samples per optimization step"),
    ("beta1", "optimizer first-moment decay"),
    ("beta2", "optimizer second-moment decay"),
    ("beta_max", "last variance of the linear schedule"),
    ("beta_min", "first variance of the linear schedule"),
    ("disc_widths", "four discriminator block widths"),
    ("epochs", "passes over the training split"),
    ("feature_extractor", "feature extractor id for the Frechet distance"),
    ("gen_widths", "three generator stage widths"),
    ("guide", "gray | one-hot mask encoding"),
    ("init_std", "standard deviation of initial weights"),
    ("lambda_rec", "weight of the L1 reconstruction term"),
    ("latent_dim", "length of the latent vector"),
    ("lr_disc", "discriminator learning rate"),
    ("lr_gen", "generator learning rate"),
    ("max_value", "peak value for PSNR and SSIM"),
    ("seed", "seed for initialization, split, batching and noise"),
    ("side", "image side length in pixels"),
    ("span", "fine steps per reverse step"),
    ("total_steps", "fine diffusion steps"),
    ("validation_fraction", "share of samples held out"),
    ("var_ceiling_frac", "upper variance bound as a fraction of the span variance"),
    ("var_floor_frac", "lower variance bound as a fraction of the span variance"),
];

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_list<const N: usize>(v: &str) -> Result<[usize; N], String> {
    let items = v.split(',').map(|s| parse::<usize>(s.trim())).collect::<Result<Vec<_>, _>>()?;
    <[usize; N]>::try_from(items).map_err(|got| format!("expected {N} comma-separated widths, found {}", got.len()))
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "adam_eps" => t.adam_eps = parse(value)?,
            "adversarial_loss" => {
                t.loss = match value {
                    "least-squares" => AdversarialLoss::LeastSquares,
                    "logistic" => AdversarialLoss::Logistic,
                    other => return Err(format!("unknown loss `{other}` (valid: least-squares, logistic)")),
                }
            }
            "batch_size" => t.batch_size = parse(value)?,
            "beta1" => t.beta1 = parse(value)?,
            "beta2" => t.beta2 = parse(value)?,
            "beta_max" => t.schedule.beta_max = parse(value)?,
            "beta_min" => t.schedule.beta_min = parse(value)?,
            "disc_widths" => t.model.disc_widths = parse_list(value)?,
            "epochs" => t.epochs = parse(value)?,
            "feature_extractor" => {
                if value != HANDCRAFTED_ID {
                    return Err(format!("unknown feature extractor `{value}` (valid: {HANDCRAFTED_ID})"));
                }
                self.feature_extractor = value.into();
            }
            "gen_widths" => t.model.gen_widths = parse_list(value)?,
            "guide" => {
                t.model.guide_mode = match value {
                    "gray" => GuideMode::Gray,
                    "one-hot" => GuideMode::OneHot,
                    other => return Err(format!("unknown guide `{other}` (valid: gray, one-hot)")),
                }
            }
            "init_std" => t.model.init_std = parse(value)?,
            "lambda_rec" => t.lambda_rec = parse(value)?,
            "latent_dim" => t.model.latent_dim = parse(value)?,
            "lr_disc" => t.lr_disc = parse(value)?,
            "lr_gen" => t.lr_gen = parse(value)?,
            "max_value" => self.max_value = parse(value)?,
            "seed" => {
                t.seed = parse(value)?;
                t.model.seed = t.seed;
            }
            "side" => t.model.image_side = parse(value)?,
            "span" => t.schedule.span = parse(value)?,
            "total_steps" => {
                t.schedule.total_steps = parse(value)?;
                t.model.total_steps = t.schedule.total_steps;
            }
            "validation_fraction" => t.validation_fraction = parse(value)?,
            "var_ceiling_frac" => t.schedule.var_ceiling_frac = parse(value)?,
            "var_floor_frac" => t.schedule.var_floor_frac = parse(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "adam_eps" => t.adam_eps.to_string(),
            "adversarial_loss" => t.loss.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "beta_max" => t.schedule.beta_max.to_string(),
            "beta_min" => t.schedule.beta_min.to_string(),
            "disc_widths" => list(&t.model.disc_widths),
            "epochs" => t.epochs.to_string(),
            "feature_extractor" => self.feature_extractor.clone(),
            "gen_widths" => list(&t.model.gen_widths),
            "guide" => t.model.guide_mode.to_string(),
            "init_std" => t.model.init_std.to_string(),
            "lambda_rec" => t.lambda_rec.to_string(),
            "latent_dim" => t.model.latent_dim.to_string(),
            "lr_disc" => t.lr_disc.to_string(),
            "lr_gen" => t.lr_gen.to_string(),
            "max_value" => self.max_value.to_string(),
            "seed" => t.seed.to_string(),
            "side" => t.model.image_side.to_string(),
            "span" => t.schedule.span.to_string(),
            "total_steps" => t.schedule.total_steps.to_string(),
            "validation_fraction" => t.validation_fraction.to_string(),
            "var_ceiling_frac" => t.schedule.var_ceiling_frac.to_string(),
            "var_floor_frac" => t.schedule.var_floor_frac.to_string(),
            _ => return None,
        })
    }

    /// Parses a document; keys not mentioned keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let origin = Origin::Line(i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
                origin: origin.clone(),
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError {
                    origin,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, value).map_err(|msg| ConfigError { origin, msg })?;
        }
        cfg.check().map_err(|msg| ConfigError { origin: Origin::Line(0), msg })?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let origin = Origin::Override(o.clone());
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError {
                origin: origin.clone(),
                msg: "expected key=value".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|msg| ConfigError { origin, msg })?;
        }
        self.check().map_err(|msg| ConfigError {
            origin: Origin::Override(overrides.join(" ")),
            msg,
        })
    }

    fn check(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        self.train.schedule.build().map_err(|e| e.to_string())?;
        if !(self.max_value > 0.0 && self.max_value.is_finite()) {
            return Err(format!("max_value {} must be positive", self.max_value));
        }
        let side = self.train.model.image_side;
        if side < 16 || !side.is_multiple_of(16) {
            return Err(format!("side {side} must be a multiple of 16"));
        }
        Ok(())
    }

    /// Every key in sorted order, one `key = value` line each.
    pub fn canonical_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Hex SHA-256 of [`RunConfig::canonical_text`].
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.canonical_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

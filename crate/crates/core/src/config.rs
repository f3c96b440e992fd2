//! Flat `key = value` run configuration.
//!
//! Only keys that were actually set are stored, so each command can fall
//! back to its own defaults (the toy training loop, for instance, uses a
//! wider interpolation bandwidth than point selection does).

use std::path::{Path, PathBuf};

use crate::decode::LossWeights;
use crate::dtoc::DtocOptions;
use crate::embed::Activation;
use crate::error::{Result, SaspError};
use crate::select::SelectionConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub epsilon: Option<f64>,
    pub max_points: Option<usize>,
    pub include_neutral: Option<bool>,
    pub stride: Option<f64>,
    pub tau: Option<f64>,
    pub sigma_mask: Option<f64>,
    pub lambda_txt: Option<f64>,
    pub lambda_mask: Option<f64>,
    pub lambda_bce: Option<f64>,
    pub lambda_dice: Option<f64>,
    pub threshold_step: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub activation: Option<Activation>,
}

pub const KEYS: &[&str] = &[
    "epsilon",
    "max_points",
    "include_neutral",
    "stride",
    "tau",
    "sigma_mask",
    "lambda_txt",
    "lambda_mask",
    "lambda_bce",
    "lambda_dice",
    "threshold_step",
    "out_dir",
    "seed",
    "steps",
    "lr",
    "activation",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SaspError::invalid(format!("cannot parse value '{value}' for key '{key}'")))
}

impl RunConfig {
    pub fn from_str_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SaspError::invalid(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| match e {
                    SaspError::InvalidArgument(m) => SaspError::invalid(format!("line {}: {m}", lineno + 1)),
                    other => other,
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_str_kv(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epsilon" => self.epsilon = Some(parse(key, value)?),
            "max_points" => self.max_points = Some(parse(key, value)?),
            "include_neutral" => self.include_neutral = Some(parse(key, value)?),
            "stride" => self.stride = Some(parse(key, value)?),
            "tau" => self.tau = Some(parse(key, value)?),
            "sigma_mask" => self.sigma_mask = Some(parse(key, value)?),
            "lambda_txt" => self.lambda_txt = Some(parse(key, value)?),
            "lambda_mask" => self.lambda_mask = Some(parse(key, value)?),
            "lambda_bce" => self.lambda_bce = Some(parse(key, value)?),
            "lambda_dice" => self.lambda_dice = Some(parse(key, value)?),
            "threshold_step" => self.threshold_step = Some(parse(key, value)?),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "seed" => self.seed = Some(parse(key, value)?),
            "steps" => self.steps = Some(parse(key, value)?),
            "lr" => self.lr = Some(parse(key, value)?),
            "activation" => self.activation = Some(value.parse()?),
            other => return Err(SaspError::invalid(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Values from `other` win wherever they are set.
    pub fn merge(mut self, other: &RunConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f.clone(); } )* };
        }
        take!(
            epsilon, max_points, include_neutral, stride, tau, sigma_mask, lambda_txt, lambda_mask,
            lambda_bce, lambda_dice, threshold_step, out_dir, seed, steps, lr, activation
        );
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: Option<f64>| match v {
            Some(v) if !(v > 0.0 && v.is_finite()) => Err(SaspError::invalid(format!("{name} must be positive, got {v}"))),
            _ => Ok(()),
        };
        let non_negative = |name: &str, v: Option<f64>| match v {
            Some(v) if !(v >= 0.0 && v.is_finite()) => {
                Err(SaspError::invalid(format!("{name} must be non-negative, got {v}")))
            }
            _ => Ok(()),
        };
        positive("epsilon", self.epsilon)?;
        positive("tau", self.tau)?;
        positive("sigma_mask", self.sigma_mask)?;
        non_negative("lambda_txt", self.lambda_txt)?;
        non_negative("lambda_mask", self.lambda_mask)?;
        non_negative("lambda_bce", self.lambda_bce)?;
        non_negative("lambda_dice", self.lambda_dice)?;
        non_negative("lr", self.lr)?;
        if self.max_points == Some(0) {
            return Err(SaspError::invalid("max_points must be at least 1"));
        }
        if let Some(s) = self.stride.filter(|s| !(*s >= 1.0 && s.is_finite())) {
            return Err(SaspError::invalid(format!("stride must be >= 1, got {s}")));
        }
        if let Some(s) = self.threshold_step.filter(|s| !(*s > 0.0 && *s <= 0.5)) {
            return Err(SaspError::invalid(format!("threshold_step must be in (0, 0.5], got {s}")));
        }
        Ok(())
    }

    pub fn selection(&self) -> SelectionConfig {
        self.selection_over(SelectionConfig::default())
    }

    fn selection_over(&self, base: SelectionConfig) -> SelectionConfig {
        SelectionConfig {
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            max_points: self.max_points.or(base.max_points),
            include_neutral: self.include_neutral.unwrap_or(base.include_neutral),
        }
    }

    pub fn dtoc_options(&self) -> DtocOptions {
        let base = DtocOptions::default();
        DtocOptions {
            tau: self.tau.unwrap_or(base.tau),
            ..base
        }
    }

    pub fn stride_or_default(&self) -> f64 {
        self.stride.unwrap_or(1.0)
    }

    pub fn threshold_step_or_default(&self) -> f64 {
        self.threshold_step.unwrap_or(0.01)
    }

    pub fn loss_weights(&self) -> LossWeights {
        let base = LossWeights::default();
        LossWeights {
            text: self.lambda_txt.unwrap_or(base.text),
            mask: self.lambda_mask.unwrap_or(base.mask),
            bce: self.lambda_bce.unwrap_or(base.bce),
            dice: self.lambda_dice.unwrap_or(base.dice),
        }
    }

    pub fn train_config(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            steps: self.steps.unwrap_or(base.steps),
            lr: self.lr.unwrap_or(base.lr),
            selection: self.selection_over(base.selection),
            stride: self.stride.unwrap_or(base.stride),
            tau: self.tau.unwrap_or(base.tau),
            weights: self.loss_weights(),
            exec: base.exec,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let cfg = RunConfig::from_str_kv(
            "# run settings\nepsilon = 0.75\n\nmax_points=10 # cap\ninclude_neutral = true\nout_dir = runs/a\nactivation = tanh\n",
        )
        .unwrap();
        assert_eq!(cfg.epsilon, Some(0.75));
        assert_eq!(cfg.max_points, Some(10));
        assert_eq!(cfg.include_neutral, Some(true));
        assert_eq!(cfg.out_dir, Some(PathBuf::from("runs/a")));
        assert_eq!(cfg.activation, Some(Activation::Tanh));
        assert_eq!(cfg.selection().max_points, Some(10));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_str_kv("colour = red").is_err());
        assert!(RunConfig::from_str_kv("epsilon").is_err());
        assert!(RunConfig::from_str_kv("epsilon = abc").is_err());
        assert!(RunConfig::from_str_kv("epsilon = -1").is_err());
        assert!(RunConfig::from_str_kv("stride = 0.5").is_err());
        assert!(RunConfig::from_str_kv("max_points = 0").is_err());
        assert!(RunConfig::from_str_kv("threshold_step = 0.7").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let sample = |k: &str| match k {
            "include_neutral" => "false",
            "out_dir" => "x",
            "activation" => "relu",
            "max_points" | "seed" | "steps" | "stride" => "3",
            _ => "0.5",
        };
        let mut cfg = RunConfig::default();
        for k in KEYS {
            cfg.set(k, sample(k)).unwrap();
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn flags_override_file_values() {
        let file = RunConfig::from_str_kv("epsilon = 0.3\ntau = 2").unwrap();
        let flags = RunConfig {
            epsilon: Some(0.9),
            ..Default::default()
        };
        let merged = file.merge(&flags);
        assert_eq!(merged.epsilon, Some(0.9));
        assert_eq!(merged.tau, Some(2.0));
    }

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.selection(), SelectionConfig::default());
        assert_eq!(cfg.dtoc_options().tau, 1.0);
        assert_eq!(cfg.threshold_step_or_default(), 0.01);
        let w = cfg.loss_weights();
        assert_eq!((w.text, w.mask, w.bce, w.dice), (1.0, 1.0, 2.0, 0.5));
    }
}

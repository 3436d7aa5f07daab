//! Every tunable in one place, with a flat `key = value` config file format
//! and `#` comments. Command-line flags override file values, which
//! override the defaults below. Reports embed the fully resolved settings
//! so any result file is self-describing.

use std::path::Path;

use crate::datagen::{DataError, SyntheticSpec};
use crate::model::LayerSizes;
use crate::trainer::{AblationSwitches, LrSchedule, TrainConfig};

use super::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    // data generation
    pub num_classes: usize,
    pub feature_dim: usize,
    pub confusable_pairs: usize,
    pub base_separation: f64,
    pub pair_separation: f64,
    pub spread: f64,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub noise_ratio: f64,
    // training
    pub sharpen_t: f64,
    pub omega: f64,
    pub gamma: f64,
    pub beta: usize,
    pub max_epoch: usize,
    /// 0 means "one pass over the training split per epoch".
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub weight_decay_on_uncertainty: bool,
    pub trunk_width: usize,
    pub head_hidden: usize,
    pub enable_latent: bool,
    pub enable_sp: bool,
    pub enable_confidence: bool,
    pub detach_confidence: bool,
    pub renormalize_soft: bool,
    pub checked: bool,
    // experiment drivers
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            num_classes: 4,
            feature_dim: 16,
            confusable_pairs: 2,
            base_separation: 3.0,
            pair_separation: 1.2,
            spread: 1.0,
            samples_per_class: 400,
            test_per_class: 100,
            noise_ratio: 0.3,
            sharpen_t: 1.2,
            omega: 0.5,
            gamma: 1e3,
            beta: 6,
            max_epoch: 30,
            iters_per_epoch: 0,
            batch_size: 72,
            lr: 1e-3,
            lr_decay_epochs: vec![10, 20],
            lr_decay_factor: 0.1,
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            weight_decay_on_uncertainty: true,
            trunk_width: 32,
            head_hidden: 16,
            enable_latent: true,
            enable_sp: true,
            enable_confidence: true,
            detach_confidence: false,
            renormalize_soft: false,
            checked: false,
            ratios: vec![0.1, 0.2, 0.3],
            seeds: vec![1, 2, 3],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| HarnessError::Config(format!("{key}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| HarnessError::Config(format!("{key}: {e}"))))
        .collect()
}

impl Settings {
    /// Applies one `key = value` assignment. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        match key {
            "num_classes" => self.num_classes = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "confusable_pairs" => self.confusable_pairs = parse(key, value)?,
            "base_separation" => self.base_separation = parse(key, value)?,
            "pair_separation" => self.pair_separation = parse(key, value)?,
            "spread" => self.spread = parse(key, value)?,
            "samples_per_class" => self.samples_per_class = parse(key, value)?,
            "test_per_class" => self.test_per_class = parse(key, value)?,
            "noise_ratio" => self.noise_ratio = parse(key, value)?,
            "sharpen_t" => self.sharpen_t = parse(key, value)?,
            "omega" => self.omega = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "max_epoch" => self.max_epoch = parse(key, value)?,
            "iters_per_epoch" => self.iters_per_epoch = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "decoupled_weight_decay" => self.decoupled_weight_decay = parse(key, value)?,
            "weight_decay_on_uncertainty" => self.weight_decay_on_uncertainty = parse(key, value)?,
            "trunk_width" => self.trunk_width = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "enable_latent" => self.enable_latent = parse(key, value)?,
            "enable_sp" => self.enable_sp = parse(key, value)?,
            "enable_confidence" => self.enable_confidence = parse(key, value)?,
            "detach_confidence" => self.detach_confidence = parse(key, value)?,
            "renormalize_soft" => self.renormalize_soft = parse(key, value)?,
            "checked" => self.checked = parse(key, value)?,
            "ratios" => self.ratios = parse_list(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            other => return Err(HarnessError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a config file into `self` (later lines win).
    pub fn apply_file(&mut self, path: &Path) -> Result<(), HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The fully resolved configuration as stable `key = value` lines, for
    /// report headers.
    pub fn resolved_lines(&self) -> Vec<String> {
        let join_f = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let join_u = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let join_s = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        vec![
            format!("num_classes = {}", self.num_classes),
            format!("feature_dim = {}", self.feature_dim),
            format!("confusable_pairs = {}", self.confusable_pairs),
            format!("base_separation = {}", self.base_separation),
            format!("pair_separation = {}", self.pair_separation),
            format!("spread = {}", self.spread),
            format!("samples_per_class = {}", self.samples_per_class),
            format!("test_per_class = {}", self.test_per_class),
            format!("noise_ratio = {}", self.noise_ratio),
            format!("sharpen_t = {}", self.sharpen_t),
            format!("omega = {}", self.omega),
            format!("gamma = {}", self.gamma),
            format!("beta = {}", self.beta),
            format!("max_epoch = {}", self.max_epoch),
            format!("iters_per_epoch = {}", self.iters_per_epoch),
            format!("batch_size = {}", self.batch_size),
            format!("lr = {}", self.lr),
            format!("lr_decay_epochs = {}", join_u(&self.lr_decay_epochs)),
            format!("lr_decay_factor = {}", self.lr_decay_factor),
            format!("weight_decay = {}", self.weight_decay),
            format!("decoupled_weight_decay = {}", self.decoupled_weight_decay),
            format!("weight_decay_on_uncertainty = {}", self.weight_decay_on_uncertainty),
            format!("trunk_width = {}", self.trunk_width),
            format!("head_hidden = {}", self.head_hidden),
            format!("enable_latent = {}", self.enable_latent),
            format!("enable_sp = {}", self.enable_sp),
            format!("enable_confidence = {}", self.enable_confidence),
            format!("detach_confidence = {}", self.detach_confidence),
            format!("renormalize_soft = {}", self.renormalize_soft),
            format!("checked = {}", self.checked),
            format!("ratios = {}", join_f(&self.ratios)),
            format!("seeds = {}", join_s(&self.seeds)),
        ]
    }

    pub fn synthetic_spec(&self, seed: u64) -> Result<SyntheticSpec, DataError> {
        SyntheticSpec::confusable_pairs(
            self.num_classes,
            self.feature_dim,
            self.confusable_pairs,
            self.base_separation,
            self.pair_separation,
            self.spread,
            self.samples_per_class,
            self.test_per_class,
            seed,
        )
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            sharpen_t: self.sharpen_t,
            omega: self.omega,
            gamma: self.gamma,
            beta: self.beta,
            max_epoch: self.max_epoch,
            iters_per_epoch: if self.iters_per_epoch == 0 { None } else { Some(self.iters_per_epoch) },
            batch_size: self.batch_size,
            lr: LrSchedule {
                initial: self.lr,
                decay_epochs: self.lr_decay_epochs.clone(),
                factor: self.lr_decay_factor,
            },
            weight_decay: self.weight_decay,
            decoupled_weight_decay: self.decoupled_weight_decay,
            weight_decay_on_uncertainty: self.weight_decay_on_uncertainty,
            seed,
            checked: self.checked,
            switches: AblationSwitches {
                latent_distribution: self.enable_latent,
                similarity_preserving: self.enable_sp,
                confidence: self.enable_confidence,
            },
            detach_confidence: self.detach_confidence,
            renormalize_soft: self.renormalize_soft,
            sizes: LayerSizes { trunk_width: self.trunk_width, head_hidden: self.head_hidden },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults_and_flags_would_override_file() {
        let mut s = Settings::default();
        s.apply_text("# comment\nbeta = 9\nratios = 0.05, 0.15\nenable_sp = false\n").unwrap();
        assert_eq!(s.beta, 9);
        assert_eq!(s.ratios, vec![0.05, 0.15]);
        assert!(!s.enable_sp);
        // a later `set` (how CLI flags are applied) wins
        s.set("beta", "11").unwrap();
        assert_eq!(s.beta, 11);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut s = Settings::default();
        assert!(s.apply_text("nope = 3\n").is_err());
        assert!(s.apply_text("beta = fast\n").is_err());
        assert!(s.apply_text("beta 7\n").is_err());
    }

    #[test]
    fn resolved_lines_round_trip() {
        let mut s = Settings::default();
        s.set("gamma", "250").unwrap();
        s.set("seeds", "5,6").unwrap();
        let text = s.resolved_lines().join("\n");
        let mut restored = Settings::default();
        restored.apply_text(&text).unwrap();
        assert_eq!(s, restored);
    }
}

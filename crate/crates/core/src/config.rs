//! Hyperparameters, dataset profiles and the flat `key = value` config format.
//!
//! A config file may name a `profile`; its values are applied first and the
//! remaining keys override them, regardless of line order.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::datagen::{DomainSpec, ShiftSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::selector::GateThresholds;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Office,
    OfficeHome,
    Visda,
    Custom,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Office => "office",
            Profile::OfficeHome => "office-home",
            Profile::Visda => "visda",
            Profile::Custom => "custom",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "office" => Ok(Profile::Office),
            "office-home" | "officehome" | "office_home" => Ok(Profile::OfficeHome),
            "visda" | "visda-c" => Ok(Profile::Visda),
            "custom" => Ok(Profile::Custom),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

/// Objective for the last fine-tuning pass over all target samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Finetune {
    /// Information maximization only.
    InfoMax,
    /// The full weighted objective, with stored pseudo-labels as teacher.
    Full,
    None,
}

impl FromStr for Finetune {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "im" => Ok(Finetune::InfoMax),
            "full" => Ok(Finetune::Full),
            "none" => Ok(Finetune::None),
            other => Err(Error::Config(format!(
                "finetune must be im|full|none, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Finetune {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Finetune::InfoMax => "im",
            Finetune::Full => "full",
            Finetune::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Softmax confidence threshold of the warm-up gate.
    pub alpha: f64,
    /// Prototype distance-margin threshold.
    pub beta: f64,
    /// Stop once the low-confidence fraction drops below this.
    pub lambda_stop: f64,
    /// Cosine similarity threshold for intra-class similarity.
    pub delta: f64,
    /// Similarity score threshold.
    pub theta: f64,
    pub theta_step: f64,
    pub theta_cap: f64,
    /// Label smoothing for the source model.
    pub gamma: f64,
    /// Beta(ω, ω) parameter of the mixup coefficient.
    pub omega: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_source: usize,
    /// Epochs for the crude target model and the student.
    pub epochs_warm: usize,
    pub epochs_round: usize,
    pub epochs_finetune: usize,
    pub max_rounds: usize,
    pub hidden: Vec<usize>,
    pub bottleneck: usize,
    pub loss_weights: LossWeights,
    pub finetune: Finetune,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::for_profile(Profile::Office)
    }
}

impl Hyperparams {
    pub fn for_profile(profile: Profile) -> Self {
        let (alpha, beta, lambda_stop) = match profile {
            Profile::Office | Profile::Custom => (0.8, 0.3, 0.1),
            Profile::OfficeHome => (0.6, 0.2, 0.2),
            Profile::Visda => (0.7, 0.2, 0.25),
        };
        Self {
            alpha,
            beta,
            lambda_stop,
            delta: 0.6,
            theta: 0.3,
            theta_step: 0.05,
            theta_cap: 0.9,
            gamma: 0.1,
            omega: 0.3,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 64,
            epochs_source: 30,
            epochs_warm: 30,
            epochs_round: 10,
            epochs_finetune: 10,
            max_rounds: 20,
            hidden: vec![64],
            bottleneck: 32,
            loss_weights: LossWeights::FULL,
            finetune: Finetune::InfoMax,
            seed: 0,
        }
    }

    pub fn layer_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 3);
        dims.push(input_dim);
        dims.extend(&self.hidden);
        dims.push(self.bottleneck);
        dims.push(num_classes);
        dims
    }

    pub fn thresholds(&self) -> GateThresholds {
        GateThresholds {
            alpha: self.alpha,
            beta: self.beta,
            theta: self.theta,
            theta_step: self.theta_step,
            theta_cap: self.theta_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("alpha", self.alpha),
            ("lambda", self.lambda_stop),
            ("theta", self.theta),
            ("theta_cap", self.theta_cap),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(-1.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!(
                "delta must be in [-1, 1], got {}",
                self.delta
            )));
        }
        if !(0.0..).contains(&self.beta) || !(0.0..).contains(&self.theta_step) {
            return Err(Error::Config(
                "beta and theta_step must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        if self.omega.is_nan() || self.omega <= 0.0 {
            return Err(Error::Config(format!(
                "omega must be positive, got {}",
                self.omega
            )));
        }
        if self.lr.is_nan()
            || self.lr <= 0.0
            || !(0.0..1.0).contains(&self.momentum)
            || !(0.0..).contains(&self.weight_decay)
        {
            return Err(Error::Config(
                "need lr > 0, momentum in [0, 1), weight_decay >= 0".into(),
            ));
        }
        if self.max_rounds < 1 || self.batch_size < 1 || self.bottleneck < 1 {
            return Err(Error::Config(
                "max_rounds, batch_size and bottleneck must be >= 1".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        let w = self.loss_weights;
        if [w.kd, w.im, w.mix].iter().any(|v| !(0.0..).contains(v)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything a command needs: data spec, hyperparameters, seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub hyper: Hyperparams,
    pub data: DomainSpec,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Office)
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|v| parse_value(key, v))
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            hyper: Hyperparams::for_profile(profile),
            data: DomainSpec::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let h = &mut self.hyper;
        let d = &mut self.data;
        match key.trim() {
            "profile" => {
                return Err(Error::Config(
                    "`profile` must be applied through RunConfig::parse".into(),
                ))
            }
            "alpha" => h.alpha = parse_value(key, value)?,
            "beta" => h.beta = parse_value(key, value)?,
            "lambda" => h.lambda_stop = parse_value(key, value)?,
            "delta" => h.delta = parse_value(key, value)?,
            "theta" => h.theta = parse_value(key, value)?,
            "theta_step" => h.theta_step = parse_value(key, value)?,
            "theta_cap" => h.theta_cap = parse_value(key, value)?,
            "gamma" => h.gamma = parse_value(key, value)?,
            "omega" => h.omega = parse_value(key, value)?,
            "lr" => h.lr = parse_value(key, value)?,
            "momentum" => h.momentum = parse_value(key, value)?,
            "weight_decay" => h.weight_decay = parse_value(key, value)?,
            "batch_size" => h.batch_size = parse_value(key, value)?,
            "epochs_source" => h.epochs_source = parse_value(key, value)?,
            "epochs_warm" => h.epochs_warm = parse_value(key, value)?,
            "epochs_round" => h.epochs_round = parse_value(key, value)?,
            "epochs_finetune" => h.epochs_finetune = parse_value(key, value)?,
            "max_rounds" => h.max_rounds = parse_value(key, value)?,
            "hidden" => h.hidden = parse_list(key, value)?,
            "bottleneck" => h.bottleneck = parse_value(key, value)?,
            "w_kd" => h.loss_weights.kd = parse_value(key, value)?,
            "w_im" => h.loss_weights.im = parse_value(key, value)?,
            "w_mix" => h.loss_weights.mix = parse_value(key, value)?,
            "finetune" => h.finetune = parse_value(key, value)?,
            "seed" => self.seeds = vec![parse_value(key, value)?],
            "seeds" => self.seeds = parse_list(key, value)?,
            "classes" => d.num_classes = parse_value(key, value)?,
            "dim" => d.dim = parse_value(key, value)?,
            "n_source" => d.n_source = parse_value(key, value)?,
            "n_source_test" => d.n_source_test = parse_value(key, value)?,
            "n_target" => d.n_target = parse_value(key, value)?,
            "separation" => d.separation = parse_value(key, value)?,
            "class_std" => d.class_std = parse_value(key, value)?,
            "imbalance" => d.imbalance = parse_value(key, value)?,
            "rotation" => d.shift.rotation = parse_value(key, value)?,
            "translation" => d.shift.translation = parse_value(key, value)?,
            "noise" => d.shift.noise = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses the flat format. `profile` (if present) seeds the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut profile = Profile::Office;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "profile" {
                profile = value.parse()?;
            } else {
                entries.push((i + 1, key, value));
            }
        }
        let mut config = Self::for_profile(profile);
        for (line, key, value) in entries {
            config
                .set(key, value)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.data
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        Ok(())
    }

    /// Fully resolved settings in the same format `parse` reads.
    pub fn render(&self) -> String {
        let h = &self.hyper;
        let d = &self.data;
        let ShiftSpec {
            rotation,
            translation,
            noise,
        } = d.shift;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("profile", self.profile.to_string());
        kv("alpha", h.alpha.to_string());
        kv("beta", h.beta.to_string());
        kv("lambda", h.lambda_stop.to_string());
        kv("delta", h.delta.to_string());
        kv("theta", h.theta.to_string());
        kv("theta_step", h.theta_step.to_string());
        kv("theta_cap", h.theta_cap.to_string());
        kv("gamma", h.gamma.to_string());
        kv("omega", h.omega.to_string());
        kv("lr", h.lr.to_string());
        kv("momentum", h.momentum.to_string());
        kv("weight_decay", h.weight_decay.to_string());
        kv("batch_size", h.batch_size.to_string());
        kv("epochs_source", h.epochs_source.to_string());
        kv("epochs_warm", h.epochs_warm.to_string());
        kv("epochs_round", h.epochs_round.to_string());
        kv("epochs_finetune", h.epochs_finetune.to_string());
        kv("max_rounds", h.max_rounds.to_string());
        kv("hidden", join(&h.hidden));
        kv("bottleneck", h.bottleneck.to_string());
        kv("w_kd", h.loss_weights.kd.to_string());
        kv("w_im", h.loss_weights.im.to_string());
        kv("w_mix", h.loss_weights.mix.to_string());
        kv("finetune", h.finetune.to_string());
        kv("seeds", join(&self.seeds));
        kv("classes", d.num_classes.to_string());
        kv("dim", d.dim.to_string());
        kv("n_source", d.n_source.to_string());
        kv("n_source_test", d.n_source_test.to_string());
        kv("n_target", d.n_target.to_string());
        kv("separation", d.separation.to_string());
        kv("class_std", d.class_std.to_string());
        kv("imbalance", d.imbalance.to_string());
        kv("rotation", rotation.to_string());
        kv("translation", translation.to_string());
        kv("noise", noise.to_string());
        s
    }

    /// Hyperparameters for one seed of the run.
    pub fn hyper_for_seed(&self, seed: u64) -> Hyperparams {
        Hyperparams {
            seed,
            ..self.hyper.clone()
        }
    }
}

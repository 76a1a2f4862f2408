//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors. The
//! resolved config (every key, defaults included) is written next to results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bandit::BanditSpec;
use crate::critic::CriticConfig;
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{config, Error, Result};
use crate::metrics::Grouping;
use crate::nn::{AdamConfig, TimeEmbedding};
use crate::policy::{Bounds, PolicyArch, PolicyConfig, PolicyVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvPreset {
    Unit,
    Ur10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchPreset {
    Bandit,
    Ur10,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variant: PolicyVariant,
    pub arch_preset: ArchPreset,
    pub arch: PolicyArch,
    pub time_base: f64,
    pub schedule_kind: ScheduleKind,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub adam: AdamConfig,
    /// Cosine-anneal the policy learning rate from `lr` to zero over
    /// `iterations`.
    pub lr_cosine: bool,
    pub batch_size: usize,
    pub iterations: u64,
    pub eval_interval: u64,
    pub seeds: Vec<u64>,
    pub env: EnvPreset,
    /// Half width of the unit bandit's training box.
    pub train_half_width: f64,
    /// Train on the test box instead (the in-distribution setting).
    pub train_on_test_box: bool,
    pub n_train: usize,
    pub n_eval: usize,
    pub m_ref: usize,
    pub n_accuracy: usize,
    pub n_loss_eval: usize,
    pub grouping: Grouping,
    pub clip: bool,
    pub critic: bool,
    pub critic_hidden: Vec<usize>,
    pub critic_lr: f64,
    pub eta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub checkpoints: bool,
    pub output_dir: PathBuf,
    pub dataset: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: PolicyVariant::Srdp { lambda: 0.75 },
            arch_preset: ArchPreset::Bandit,
            arch: PolicyArch::bandit(),
            time_base: 10_000.0,
            schedule_kind: ScheduleKind::Linear,
            diffusion_steps: 10,
            beta_min: 0.05,
            beta_max: 0.7,
            adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            lr_cosine: true,
            batch_size: 256,
            iterations: 20_000,
            eval_interval: 4_000,
            seeds: vec![0, 1, 2, 3, 4],
            env: EnvPreset::Unit,
            train_half_width: 0.08,
            train_on_test_box: false,
            n_train: 10_000,
            n_eval: 1_000,
            m_ref: 10,
            n_accuracy: 1_000,
            n_loss_eval: 1_024,
            grouping: Grouping::Quadrant,
            clip: true,
            critic: false,
            critic_hidden: vec![64, 64],
            critic_lr: 1e-3,
            eta: 1.0,
            gamma: 0.99,
            rho: 0.005,
            checkpoints: true,
            output_dir: PathBuf::from("runs/default"),
            dataset: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Parse(format!("`{key}` expects a boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("`{key}` has bad value `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() || v == "-" {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn list<T: ToString>(v: &[T]) -> String {
    if v.is_empty() {
        return "-".into();
    }
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_grouping(v: &str) -> Result<Grouping> {
    match v {
        "quadrant" => Ok(Grouping::Quadrant),
        "mode_pair" => Ok(Grouping::ModePair),
        _ => Err(Error::Parse(format!("unknown grouping `{v}`"))),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "variant" => {
                self.variant = match v {
                    "srdp" => PolicyVariant::Srdp { lambda: self.variant.lambda() },
                    "bc_diffusion" => PolicyVariant::BcDiffusion,
                    _ => return Err(Error::Parse(format!("unknown variant `{v}`"))),
                }
            }
            "lambda" => {
                let lambda = parse_num(key, v)?;
                if let PolicyVariant::Srdp { .. } = self.variant {
                    self.variant = PolicyVariant::Srdp { lambda };
                } else if lambda != 0.0 {
                    return config("bc_diffusion has no state head; lambda must be 0");
                }
            }
            "arch" => {
                let (preset, arch) = match v {
                    "bandit" => (ArchPreset::Bandit, PolicyArch::bandit()),
                    "ur10" => (ArchPreset::Ur10, PolicyArch::ur10()),
                    "custom" => (ArchPreset::Custom, self.arch.clone()),
                    _ => return Err(Error::Parse(format!("unknown arch preset `{v}`"))),
                };
                self.arch_preset = preset;
                self.arch = arch;
            }
            "trunk" => {
                self.arch.trunk = parse_list(key, v)?;
                self.arch_preset = ArchPreset::Custom;
            }
            "head_hidden" => {
                self.arch.head_hidden = parse_list(key, v)?;
                self.arch_preset = ArchPreset::Custom;
            }
            "time_dim" => {
                self.arch.time_dim = parse_num(key, v)?;
                self.arch_preset = ArchPreset::Custom;
            }
            "time_base" => self.time_base = parse_num(key, v)?,
            "schedule" => self.schedule_kind = ScheduleKind::parse(v)?,
            "diffusion_steps" => self.diffusion_steps = parse_num(key, v)?,
            "beta_min" => self.beta_min = parse_num(key, v)?,
            "beta_max" => self.beta_max = parse_num(key, v)?,
            "lr" => self.adam.lr = parse_num(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam.eps = parse_num(key, v)?,
            "lr_cosine" => self.lr_cosine = parse_bool(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "eval_interval" => self.eval_interval = parse_num(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "env" => {
                self.env = match v {
                    "unit" => EnvPreset::Unit,
                    "ur10" => EnvPreset::Ur10,
                    _ => return Err(Error::Parse(format!("unknown env `{v}`"))),
                }
            }
            "train_half_width" => self.train_half_width = parse_num(key, v)?,
            "train_on_test_box" => self.train_on_test_box = parse_bool(key, v)?,
            "n_train" => self.n_train = parse_num(key, v)?,
            "n_eval" => self.n_eval = parse_num(key, v)?,
            "m_ref" => self.m_ref = parse_num(key, v)?,
            "n_accuracy" => self.n_accuracy = parse_num(key, v)?,
            "n_loss_eval" => self.n_loss_eval = parse_num(key, v)?,
            "grouping" => self.grouping = parse_grouping(v)?,
            "clip" => self.clip = parse_bool(key, v)?,
            "critic" => self.critic = parse_bool(key, v)?,
            "critic_hidden" => self.critic_hidden = parse_list(key, v)?,
            "critic_lr" => self.critic_lr = parse_num(key, v)?,
            "eta" => self.eta = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "rho" => self.rho = parse_num(key, v)?,
            "checkpoints" => self.checkpoints = parse_bool(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "dataset" => self.dataset = if v.is_empty() || v == "-" { None } else { Some(PathBuf::from(v)) },
            other => return Err(Error::Parse(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` string, as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Parse(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line {}: expected key = value", i + 1)))?;
            cfg.set(k, v).map_err(|e| match e {
                Error::Parse(m) => Error::Parse(format!("config line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config("batch_size must be positive");
        }
        if self.eval_interval == 0 {
            return config("eval_interval must be positive");
        }
        if self.iterations % self.eval_interval != 0 {
            return config(format!(
                "eval_interval {} must divide iterations {}",
                self.eval_interval, self.iterations
            ));
        }
        if self.seeds.is_empty() {
            return config("at least one seed is required");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return config("seeds must be distinct");
        }
        if self.n_train == 0 && self.dataset.is_none() {
            return config("n_train must be positive");
        }
        if self.n_eval < 4 || self.m_ref == 0 || self.n_accuracy == 0 || self.n_loss_eval == 0 {
            return config("evaluation sizes must be positive (n_eval at least 4)");
        }
        if !(self.adam.lr > 0.0 && self.critic_lr > 0.0) {
            return config("learning rates must be positive");
        }
        if !(self.train_half_width > 0.0) {
            return config("train_half_width must be positive");
        }
        self.schedule()?;
        TimeEmbedding::new(self.arch.time_dim, self.time_base)?;
        self.critic_config().validate()?;
        self.bandit().validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.schedule_kind, self.diffusion_steps, self.beta_min, self.beta_max)
    }

    pub fn bandit(&self) -> BanditSpec {
        let mut spec = match self.env {
            EnvPreset::Unit => BanditSpec::unit(self.train_half_width),
            EnvPreset::Ur10 => BanditSpec::ur10(),
        };
        if self.train_on_test_box {
            spec.train_box = spec.test_box;
        }
        spec
    }

    pub fn policy_config(&self) -> Result<PolicyConfig> {
        let spec = self.bandit();
        let clip = self.clip.then(|| Bounds {
            lo: spec.action_box.lo.to_vec(),
            hi: spec.action_box.hi.to_vec(),
        });
        Ok(PolicyConfig {
            variant: self.variant,
            arch: self.arch.clone(),
            state_dim: 2,
            action_dim: 2,
            schedule: self.schedule()?,
            time_embedding: TimeEmbedding::new(self.arch.time_dim, self.time_base)?,
            clip,
        })
    }

    /// Policy learning rate for the step taken at `iteration` (0-based).
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if !self.lr_cosine || self.iterations == 0 {
            return self.adam.lr;
        }
        let frac = iteration as f64 / self.iterations as f64;
        0.5 * self.adam.lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig { hidden: self.critic_hidden.clone(), gamma: self.gamma, rho: self.rho, eta: self.eta }
    }

    /// Every key with its effective value, in a fixed order. Parsing this text
    /// yields an equal config.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("variant", self.variant.name().into());
        kv("lambda", self.variant.lambda().to_string());
        kv("trunk", list(&self.arch.trunk));
        kv("head_hidden", list(&self.arch.head_hidden));
        kv("time_dim", self.arch.time_dim.to_string());
        // The preset goes last so it wins over the explicit layer keys.
        kv(
            "arch",
            match self.arch_preset {
                ArchPreset::Bandit => "bandit",
                ArchPreset::Ur10 => "ur10",
                ArchPreset::Custom => "custom",
            }
            .into(),
        );
        kv("time_base", self.time_base.to_string());
        kv("schedule", self.schedule_kind.name().into());
        kv("diffusion_steps", self.diffusion_steps.to_string());
        kv("beta_min", self.beta_min.to_string());
        kv("beta_max", self.beta_max.to_string());
        kv("lr", self.adam.lr.to_string());
        kv("adam_beta1", self.adam.beta1.to_string());
        kv("adam_beta2", self.adam.beta2.to_string());
        kv("adam_eps", self.adam.eps.to_string());
        kv("lr_cosine", self.lr_cosine.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("iterations", self.iterations.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv("seeds", list(&self.seeds));
        kv(
            "env",
            match self.env {
                EnvPreset::Unit => "unit",
                EnvPreset::Ur10 => "ur10",
            }
            .into(),
        );
        kv("train_half_width", self.train_half_width.to_string());
        kv("train_on_test_box", self.train_on_test_box.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_eval", self.n_eval.to_string());
        kv("m_ref", self.m_ref.to_string());
        kv("n_accuracy", self.n_accuracy.to_string());
        kv("n_loss_eval", self.n_loss_eval.to_string());
        kv("grouping", self.grouping.name().into());
        kv("clip", self.clip.to_string());
        kv("critic", self.critic.to_string());
        kv("critic_hidden", list(&self.critic_hidden));
        kv("critic_lr", self.critic_lr.to_string());
        kv("eta", self.eta.to_string());
        kv("gamma", self.gamma.to_string());
        kv("rho", self.rho.to_string());
        kv("checkpoints", self.checkpoints.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("dataset", self.dataset.as_ref().map_or("-".into(), |p| p.display().to_string()));
        s
    }
}

//! Training configuration: a flat `key = value` text format with one
//! section per module, parsed strictly. Unknown sections, unknown keys,
//! duplicate keys and out-of-range values are all hard errors, so a sweep
//! over config files cannot silently misconfigure a run.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::GmmSpec;
use crate::flow::{JumpSchedule, JumpScheduleKind, LogitNormal, NoisingSchedule, SolutionParam};
use crate::guide::GuidanceConfig;
use crate::loss::LossConfig;
use crate::net::NetConfig;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value` or `[section]`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key `{key}` in section [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: key `{key}` set twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {detail}")]
    BadValue { line: usize, key: String, detail: String },
    #[error("`{key}`: {detail}")]
    Range { key: String, detail: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    // [data]
    pub preset: String,
    pub data_dim: usize,
    // [flow]
    pub schedule: NoisingSchedule,
    pub parameterization: SolutionParam,
    // [network]
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub embed_dim: usize,
    pub label_embed_dim: usize,
    pub freq_base: f64,
    // [loss]
    pub lambda: f64,
    pub p: f64,
    pub epsilon: f64,
    // [lschedule]
    pub lschedule: JumpScheduleKind,
    pub r_init: f64,
    pub r_end: f64,
    // [times]
    pub mu_fm: f64,
    pub sigma_fm: f64,
    pub mu_t: f64,
    pub sigma_t: f64,
    pub mu_s: f64,
    pub sigma_s: f64,
    // [guidance]
    pub strength: f64,
    pub mix: f64,
    pub drop_rate: f64,
    pub t_decay: f64,
    // [optim]
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    // [train]
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub ema_decay: f64,
    pub log_every: usize,
    pub eval_every: usize,
    pub eval_count: usize,
    pub checkpoint_every: usize,
    pub log_path: String,
    pub checkpoint_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: "ring8".into(),
            data_dim: 2,
            schedule: NoisingSchedule::Linear,
            parameterization: SolutionParam::Euler,
            hidden_width: 128,
            hidden_layers: 3,
            embed_dim: 32,
            label_embed_dim: 16,
            freq_base: 100.0,
            lambda: 0.75,
            p: 1.0,
            epsilon: 1e-3,
            lschedule: JumpScheduleKind::Exponential,
            r_init: 0.1,
            r_end: 0.002,
            // Wider and corner-heavy compared to large-scale practice: a
            // short run must actually visit the (t near 1, s near 0) region
            // the one-step sampler queries, which thin logit-normal tails
            // only reach with millions of consistency samples.
            mu_fm: 0.0,
            sigma_fm: 1.3,
            mu_t: 0.8,
            sigma_t: 1.2,
            mu_s: -1.5,
            sigma_s: 1.2,
            strength: 2.0,
            mix: 0.25,
            drop_rate: 0.1,
            t_decay: 0.8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 256,
            steps: 20000,
            seed: 0,
            // Cap on the warmed-up EMA decay; the ramp in EmaParams::update
            // governs desk-scale runs almost entirely, so the cap only bites
            // past ~100k steps.
            ema_decay: 0.9999,
            log_every: 100,
            eval_every: 1000,
            eval_count: 2048,
            checkpoint_every: 5000,
            log_path: "metrics.csv".into(),
            checkpoint_dir: ".".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(
    line: usize,
    key: &str,
    value: &str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        detail: format!("`{value}` is not a valid number"),
    })
}

impl TrainConfig {
    /// Parse a config file on top of the defaults; every key is optional
    /// but must be known, in the right section, and set at most once.
    pub fn parse(text: &str) -> Result<TrainConfig, ConfigError> {
        let mut cfg = TrainConfig::default();
        let mut section = String::new();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    text: trimmed.to_string(),
                })?;
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::UnknownSection { line, name: name.to_string() });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: trimmed.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax { line, text: trimmed.to_string() });
            }
            let full = format!("{section}.{key}");
            if seen.contains(&full) {
                return Err(ConfigError::DuplicateKey { line, key: full });
            }
            cfg.apply(line, &section, key, value)?;
            seen.push(full);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(
        &mut self,
        line: usize,
        section: &str,
        key: &str,
        value: &str,
    ) -> Result<(), ConfigError> {
        let bad = |detail: &str| ConfigError::BadValue {
            line,
            key: key.to_string(),
            detail: detail.to_string(),
        };
        let unknown = || ConfigError::UnknownKey {
            line,
            section: section.to_string(),
            key: key.to_string(),
        };
        match (section, key) {
            ("data", "preset") => {
                if !GmmSpec::preset_names().contains(&value) {
                    return Err(bad(&format!(
                        "unknown preset; available: {}",
                        GmmSpec::preset_names().join(", ")
                    )));
                }
                self.preset = value.to_string();
            }
            ("data", "data_dim") => self.data_dim = parse_num(line, key, value)?,
            ("flow", "schedule") => {
                self.schedule = match value {
                    "linear" => NoisingSchedule::Linear,
                    "trigonometric" => NoisingSchedule::Trigonometric,
                    _ => return Err(bad("expected `linear` or `trigonometric`")),
                }
            }
            ("flow", "parameterization") => {
                self.parameterization = match value {
                    "euler" => SolutionParam::Euler,
                    "trigonometric" => SolutionParam::Trigonometric,
                    _ => return Err(bad("expected `euler` or `trigonometric`")),
                }
            }
            ("network", "hidden_width") => self.hidden_width = parse_num(line, key, value)?,
            ("network", "hidden_layers") => self.hidden_layers = parse_num(line, key, value)?,
            ("network", "embed_dim") => self.embed_dim = parse_num(line, key, value)?,
            ("network", "label_embed_dim") => {
                self.label_embed_dim = parse_num(line, key, value)?
            }
            ("network", "freq_base") => self.freq_base = parse_num(line, key, value)?,
            ("loss", "lambda") => self.lambda = parse_num(line, key, value)?,
            ("loss", "p") => self.p = parse_num(line, key, value)?,
            ("loss", "epsilon") => self.epsilon = parse_num(line, key, value)?,
            ("lschedule", "kind") => {
                self.lschedule = match value {
                    "exponential" => JumpScheduleKind::Exponential,
                    "cosine" => JumpScheduleKind::Cosine,
                    "linear" => JumpScheduleKind::Linear,
                    "constant" => JumpScheduleKind::Constant,
                    _ => {
                        return Err(bad(
                            "expected `exponential`, `cosine`, `linear` or `constant`",
                        ))
                    }
                }
            }
            ("lschedule", "r_init") => self.r_init = parse_num(line, key, value)?,
            ("lschedule", "r_end") => self.r_end = parse_num(line, key, value)?,
            ("times", "mu_fm") => self.mu_fm = parse_num(line, key, value)?,
            ("times", "sigma_fm") => self.sigma_fm = parse_num(line, key, value)?,
            ("times", "mu_t") => self.mu_t = parse_num(line, key, value)?,
            ("times", "sigma_t") => self.sigma_t = parse_num(line, key, value)?,
            ("times", "mu_s") => self.mu_s = parse_num(line, key, value)?,
            ("times", "sigma_s") => self.sigma_s = parse_num(line, key, value)?,
            ("guidance", "strength") => self.strength = parse_num(line, key, value)?,
            ("guidance", "mix") => self.mix = parse_num(line, key, value)?,
            ("guidance", "drop_rate") => self.drop_rate = parse_num(line, key, value)?,
            ("guidance", "t_decay") => self.t_decay = parse_num(line, key, value)?,
            ("optim", "lr") => self.lr = parse_num(line, key, value)?,
            ("optim", "beta1") => self.beta1 = parse_num(line, key, value)?,
            ("optim", "beta2") => self.beta2 = parse_num(line, key, value)?,
            ("optim", "adam_eps") => self.adam_eps = parse_num(line, key, value)?,
            ("train", "batch_size") => self.batch_size = parse_num(line, key, value)?,
            ("train", "steps") => self.steps = parse_num(line, key, value)?,
            ("train", "seed") => self.seed = parse_num(line, key, value)?,
            ("train", "ema_decay") => self.ema_decay = parse_num(line, key, value)?,
            ("train", "log_every") => self.log_every = parse_num(line, key, value)?,
            ("train", "eval_every") => self.eval_every = parse_num(line, key, value)?,
            ("train", "eval_count") => self.eval_count = parse_num(line, key, value)?,
            ("train", "checkpoint_every") => {
                self.checkpoint_every = parse_num(line, key, value)?
            }
            ("train", "log_path") => self.log_path = value.to_string(),
            ("train", "checkpoint_dir") => self.checkpoint_dir = value.to_string(),
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Range checks across all sections; every constraint an owning module
    /// relies on is re-validated here so a bad file fails at load time.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |key: &str, detail: String| {
            Err(ConfigError::Range { key: key.to_string(), detail })
        };
        let gmm = self.gmm();
        if self.data_dim != gmm.dim {
            return err("data_dim", format!("preset `{}` has dim {}", self.preset, gmm.dim));
        }
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return err("hidden_width", "network must have at least one hidden unit and layer".into());
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return err("embed_dim", "need an even embedding dimension >= 2".into());
        }
        if self.label_embed_dim == 0 {
            return err("label_embed_dim", "must be positive".into());
        }
        if !(self.freq_base >= 1.0) || !self.freq_base.is_finite() {
            return err("freq_base", "need a finite value >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return err("lambda", "need 0 <= lambda <= 1".into());
        }
        if !(self.p >= 0.0) || !self.p.is_finite() {
            return err("p", "need finite p >= 0".into());
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return err("epsilon", "need finite epsilon > 0".into());
        }
        if !(self.r_init > 0.0 && self.r_init <= 1.0) {
            return err("r_init", "need 0 < r_init <= 1".into());
        }
        if !(self.r_end > 0.0 && self.r_end <= self.r_init) {
            return err("r_end", "need 0 < r_end <= r_init".into());
        }
        for (key, sigma) in
            [("sigma_fm", self.sigma_fm), ("sigma_t", self.sigma_t), ("sigma_s", self.sigma_s)]
        {
            if !(sigma >= 0.0) || !sigma.is_finite() {
                return err(key, "need finite sigma >= 0".into());
            }
        }
        for (key, mu) in [("mu_fm", self.mu_fm), ("mu_t", self.mu_t), ("mu_s", self.mu_s)] {
            if !mu.is_finite() {
                return err(key, "need a finite value".into());
            }
        }
        if !(self.strength >= 1.0) || !self.strength.is_finite() {
            return err("strength", "need finite strength >= 1".into());
        }
        if !(self.mix > 0.0 && self.mix <= 1.0) {
            return err("mix", "need 0 < mix <= 1".into());
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return err("drop_rate", "need 0 <= drop_rate <= 1".into());
        }
        if !(self.t_decay > 0.0 && self.t_decay < 1.0) {
            return err("t_decay", "need 0 < t_decay < 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return err("lr", "need finite lr > 0".into());
        }
        for (key, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return err(key, "need 0 <= beta < 1".into());
            }
        }
        if !(self.adam_eps > 0.0) {
            return err("adam_eps", "need adam_eps > 0".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive".into());
        }
        if self.lambda > 0.0 && self.lambda < 1.0 && self.batch_size < 2 {
            return err("batch_size", "need at least 2 samples to split between losses".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return err("ema_decay", "need 0 <= ema_decay < 1".into());
        }
        for (key, every) in [
            ("log_every", self.log_every),
            ("eval_every", self.eval_every),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if every == 0 {
                return err(key, "must be positive".into());
            }
        }
        if self.eval_count < 2 {
            return err("eval_count", "need at least 2 evaluation samples".into());
        }
        Ok(())
    }

    /// Serialize with every key explicit, in fixed order. Parsing the
    /// result reproduces `self`; checkpoints embed this form.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "[data]\npreset = {}\ndata_dim = {}\n\n[flow]\nschedule = {}\nparameterization = {}\n\n",
            self.preset,
            self.data_dim,
            match self.schedule {
                NoisingSchedule::Linear => "linear",
                NoisingSchedule::Trigonometric => "trigonometric",
            },
            match self.parameterization {
                SolutionParam::Euler => "euler",
                SolutionParam::Trigonometric => "trigonometric",
            },
        );
        let _ = write!(
            s,
            "[network]\nhidden_width = {}\nhidden_layers = {}\nembed_dim = {}\nlabel_embed_dim = {}\nfreq_base = {}\n\n",
            self.hidden_width, self.hidden_layers, self.embed_dim, self.label_embed_dim,
            self.freq_base,
        );
        let _ = write!(
            s,
            "[loss]\nlambda = {}\np = {}\nepsilon = {}\n\n[lschedule]\nkind = {}\nr_init = {}\nr_end = {}\n\n",
            self.lambda,
            self.p,
            self.epsilon,
            match self.lschedule {
                JumpScheduleKind::Exponential => "exponential",
                JumpScheduleKind::Cosine => "cosine",
                JumpScheduleKind::Linear => "linear",
                JumpScheduleKind::Constant => "constant",
            },
            self.r_init,
            self.r_end,
        );
        let _ = write!(
            s,
            "[times]\nmu_fm = {}\nsigma_fm = {}\nmu_t = {}\nsigma_t = {}\nmu_s = {}\nsigma_s = {}\n\n",
            self.mu_fm, self.sigma_fm, self.mu_t, self.sigma_t, self.mu_s, self.sigma_s,
        );
        let _ = write!(
            s,
            "[guidance]\nstrength = {}\nmix = {}\ndrop_rate = {}\nt_decay = {}\n\n[optim]\nlr = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\n\n",
            self.strength, self.mix, self.drop_rate, self.t_decay, self.lr, self.beta1,
            self.beta2, self.adam_eps,
        );
        let _ = write!(
            s,
            "[train]\nbatch_size = {}\nsteps = {}\nseed = {}\nema_decay = {}\nlog_every = {}\neval_every = {}\neval_count = {}\ncheckpoint_every = {}\nlog_path = {}\ncheckpoint_dir = {}\n",
            self.batch_size, self.steps, self.seed, self.ema_decay, self.log_every,
            self.eval_every, self.eval_count, self.checkpoint_every, self.log_path,
            self.checkpoint_dir,
        );
        s
    }

    pub fn gmm(&self) -> GmmSpec {
        GmmSpec::preset(&self.preset).expect("preset validated at parse time")
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            data_dim: self.data_dim,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            embed_dim: self.embed_dim,
            label_embed_dim: self.label_embed_dim,
            freq_base: self.freq_base,
            num_classes: self.gmm().num_classes(),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            p: self.p,
            epsilon: self.epsilon,
            schedule: self.schedule,
            sol: self.parameterization,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            strength: self.strength,
            mix: self.mix,
            drop_rate: self.drop_rate,
            t_decay: self.t_decay,
        }
    }

    pub fn jump_schedule(&self) -> JumpSchedule {
        JumpSchedule { kind: self.lschedule, r_init: self.r_init, r_end: self.r_end }
    }

    pub fn fm_sampler(&self) -> LogitNormal {
        LogitNormal::new(self.mu_fm, self.sigma_fm)
    }

    pub fn t_sampler(&self) -> LogitNormal {
        LogitNormal::new(self.mu_t, self.sigma_t)
    }

    pub fn s_sampler(&self) -> LogitNormal {
        LogitNormal::new(self.mu_s, self.sigma_s)
    }
}

const SECTIONS: [&str; 9] =
    ["data", "flow", "network", "loss", "lschedule", "times", "guidance", "optim", "train"];

//! Run configuration: UTF-8 `key = value` lines with dotted section
//! prefixes (`env.h = 28`). Unknown keys are errors; every value has a
//! default. The canonical text rendering feeds the config hash and is
//! embedded in checkpoint manifests.

use std::fs;
use std::path::Path;

use crate::contrastive::{ContrastiveConfig, TemperatureSchedule};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::env::EnvConfig;
use crate::error::Error;
use crate::graph_mask::CubeShape;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub eval_every: usize,
    pub warmup_steps: usize,
    /// Contrastive loss weight lambda.
    pub lambda: f64,
    pub out_dir: String,

    pub env: EnvConfig,
    pub train_episodes: usize,
    pub eval_episodes: usize,

    /// Sequence length F.
    pub seq_len: usize,
    pub cube: CubeShape,
    pub mask_ratio: f64,

    /// Temporal window L.
    pub window: usize,
    pub tau0: f64,
    pub dtau: f64,

    /// State dimension d.
    pub d: usize,
    pub enc_channels: Vec<usize>,
    pub enc_kernels: Vec<usize>,
    pub enc_strides: Vec<usize>,
    pub dec_depth: usize,
    pub dec_heads: usize,
    /// Projection-head width; 0 means "use d".
    pub dec_mlp_hidden: usize,

    pub ema_m: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 3000,
            batch: 16,
            eval_every: 250,
            warmup_steps: 300,
            lambda: 0.1,
            out_dir: "runs/default".into(),
            env: EnvConfig::default(),
            train_episodes: 32,
            eval_episodes: 12,
            seq_len: 8,
            cube: CubeShape { f: 2, h: 7, w: 7 },
            mask_ratio: 0.5,
            window: 4,
            tau0: 0.07,
            dtau: 0.075,
            d: 32,
            enc_channels: vec![8, 16, 16],
            enc_kernels: vec![3, 3, 3],
            enc_strides: vec![2, 2, 1],
            dec_depth: 2,
            dec_heads: 4,
            dec_mlp_hidden: 0,
            ema_m: 0.95,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_batches: 8,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, Error> {
    value
        .split(',')
        .map(|part| parse_num::<usize>(key, part.trim()))
        .collect()
}

fn join(list: &[usize]) -> String {
    list.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses overrides on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "env.h" => self.env.h = parse_num(key, value)?,
            "env.w" => self.env.w = parse_num(key, value)?,
            "env.dt" => self.env.dt = parse_num(key, value)?,
            "env.accel" => self.env.accel = parse_num(key, value)?,
            "env.v_max" => self.env.v_max = parse_num(key, value)?,
            "env.radius" => self.env.radius = parse_num(key, value)?,
            "env.episode_len" => self.env.episode_len = parse_num(key, value)?,
            "env.train_episodes" => self.train_episodes = parse_num(key, value)?,
            "env.eval_episodes" => self.eval_episodes = parse_num(key, value)?,
            "seq.len" => self.seq_len = parse_num(key, value)?,
            "cube.f" => self.cube.f = parse_num(key, value)?,
            "cube.h" => self.cube.h = parse_num(key, value)?,
            "cube.w" => self.cube.w = parse_num(key, value)?,
            "mask.ratio" => self.mask_ratio = parse_num(key, value)?,
            "contrast.window" => self.window = parse_num(key, value)?,
            "contrast.tau0" => self.tau0 = parse_num(key, value)?,
            "contrast.dtau" => self.dtau = parse_num(key, value)?,
            "embed.dim" => self.d = parse_num(key, value)?,
            "encoder.channels" => self.enc_channels = parse_list(key, value)?,
            "encoder.kernels" => self.enc_kernels = parse_list(key, value)?,
            "encoder.strides" => self.enc_strides = parse_list(key, value)?,
            "decoder.depth" => self.dec_depth = parse_num(key, value)?,
            "decoder.heads" => self.dec_heads = parse_num(key, value)?,
            "decoder.mlp_hidden" => self.dec_mlp_hidden = parse_num(key, value)?,
            "ema.m" => self.ema_m = parse_num(key, value)?,
            "adam.lr" => self.lr = parse_num(key, value)?,
            "adam.beta1" => self.beta1 = parse_num(key, value)?,
            "adam.beta2" => self.beta2 = parse_num(key, value)?,
            "adam.eps" => self.adam_eps = parse_num(key, value)?,
            "eval.batches" => self.eval_batches = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), Error> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.steps < 1 {
            return err("steps must be >= 1".into());
        }
        if self.batch < 1 {
            return err("batch must be >= 1".into());
        }
        if self.eval_every < 1 {
            return err("eval_every must be >= 1".into());
        }
        if self.lambda < 0.0 {
            return err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        self.env.validate()?;
        if self.seq_len < 1 {
            return err("seq.len must be >= 1".into());
        }
        if self.env.episode_len < self.seq_len {
            return err(format!(
                "env.episode_len ({}) must be >= seq.len ({})",
                self.env.episode_len, self.seq_len
            ));
        }
        if self.seq_len % self.cube.f != 0 {
            return err(format!(
                "temporal axis: seq.len ({}) not divisible by cube.f ({})",
                self.seq_len, self.cube.f
            ));
        }
        if self.env.h % self.cube.h != 0 {
            return err(format!(
                "height axis: env.h ({}) not divisible by cube.h ({})",
                self.env.h, self.cube.h
            ));
        }
        if self.env.w % self.cube.w != 0 {
            return err(format!(
                "width axis: env.w ({}) not divisible by cube.w ({})",
                self.env.w, self.cube.w
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return err(format!("mask.ratio ({}) outside [0, 1]", self.mask_ratio));
        }
        if self.tau0 <= 0.0 {
            return err(format!("contrast.tau0 must be > 0, got {}", self.tau0));
        }
        if self.dtau <= 0.0 {
            return err(format!("contrast.dtau must be > 0, got {}", self.dtau));
        }
        if self.d < 1 {
            return err("embed.dim must be >= 1".into());
        }
        if self.dec_depth < 1 {
            return err("decoder.depth must be >= 1".into());
        }
        if self.dec_heads < 1 || self.d % self.dec_heads != 0 {
            return err(format!(
                "embed.dim ({}) must be divisible by decoder.heads ({})",
                self.d, self.dec_heads
            ));
        }
        if !(0.0..1.0).contains(&self.ema_m) {
            return err(format!("ema.m ({}) outside [0, 1)", self.ema_m));
        }
        if self.lr <= 0.0 {
            return err(format!("adam.lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("adam.beta1/beta2 must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            return err("adam.eps must be > 0".into());
        }
        if self.train_episodes < 1 || self.eval_episodes < 1 {
            return err("env.train_episodes and env.eval_episodes must be >= 1".into());
        }
        if self.eval_batches < 1 {
            return err("eval.batches must be >= 1".into());
        }
        self.encoder_config().validate()?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 1,
            in_h: self.env.h,
            in_w: self.env.w,
            channels: self.enc_channels.clone(),
            kernels: self.enc_kernels.clone(),
            strides: self.enc_strides.clone(),
            d: self.d,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let hidden = if self.dec_mlp_hidden == 0 { self.d } else { self.dec_mlp_hidden };
        DecoderConfig::new(self.dec_depth, self.dec_heads, self.d, hidden)
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            window: self.window,
            schedule: TemperatureSchedule::new(self.tau0, self.dtau),
            weight: self.lambda,
        }
    }

    /// Every key in fixed order; parsing this text reproduces the config.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("seed", self.seed.to_string());
        push("steps", self.steps.to_string());
        push("batch", self.batch.to_string());
        push("eval_every", self.eval_every.to_string());
        push("warmup_steps", self.warmup_steps.to_string());
        push("lambda", format!("{:?}", self.lambda));
        push("out_dir", self.out_dir.clone());
        push("env.h", self.env.h.to_string());
        push("env.w", self.env.w.to_string());
        push("env.dt", format!("{:?}", self.env.dt));
        push("env.accel", format!("{:?}", self.env.accel));
        push("env.v_max", format!("{:?}", self.env.v_max));
        push("env.radius", format!("{:?}", self.env.radius));
        push("env.episode_len", self.env.episode_len.to_string());
        push("env.train_episodes", self.train_episodes.to_string());
        push("env.eval_episodes", self.eval_episodes.to_string());
        push("seq.len", self.seq_len.to_string());
        push("cube.f", self.cube.f.to_string());
        push("cube.h", self.cube.h.to_string());
        push("cube.w", self.cube.w.to_string());
        push("mask.ratio", format!("{:?}", self.mask_ratio));
        push("contrast.window", self.window.to_string());
        push("contrast.tau0", format!("{:?}", self.tau0));
        push("contrast.dtau", format!("{:?}", self.dtau));
        push("embed.dim", self.d.to_string());
        push("encoder.channels", join(&self.enc_channels));
        push("encoder.kernels", join(&self.enc_kernels));
        push("encoder.strides", join(&self.enc_strides));
        push("decoder.depth", self.dec_depth.to_string());
        push("decoder.heads", self.dec_heads.to_string());
        push("decoder.mlp_hidden", self.dec_mlp_hidden.to_string());
        push("ema.m", format!("{:?}", self.ema_m));
        push("adam.lr", format!("{:?}", self.lr));
        push("adam.beta1", format!("{:?}", self.beta1));
        push("adam.beta2", format!("{:?}", self.beta2));
        push("adam.eps", format!("{:?}", self.adam_eps));
        push("eval.batches", self.eval_batches.to_string());
        s
    }

    /// FNV-1a hash of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical_text().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

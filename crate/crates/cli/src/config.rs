//! Flat key=value experiment configuration with flag overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use uio_core::TransformerConfig;

/// Resolved experiment settings. Every field has a default; a config
/// file sets keys, command-line flags override the file, and `UIO_SEED`
/// is consulted only when nothing else set the seed.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: String,
    /// Truncation window S.
    pub window: usize,
    /// Segments per document T.
    pub segments: usize,
    /// Segment length l.
    pub seg_len: usize,
    pub k_mem: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub ffn_mult: usize,
    pub lora_rank: usize,
    pub seed: u64,
    pub n_trials: usize,
    pub lr: f64,
    pub steps: usize,
    pub iterations: usize,
    pub batch: usize,
    pub mode: Option<String>,
    pub output_path: String,
    /// Keys explicitly provided by the file or flags, so commands can
    /// pick command-specific defaults for untouched fields.
    set_keys: BTreeMap<String, ()>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "toy-transformer".into(),
            window: 2,
            segments: 8,
            seg_len: 16,
            k_mem: 4,
            d_model: 32,
            layers: 2,
            heads: 2,
            vocab: 64,
            ffn_mult: 4,
            lora_rank: 4,
            seed: 0,
            n_trials: 20,
            lr: 0.01,
            steps: 200,
            iterations: 10,
            batch: 8,
            mode: None,
            output_path: "uio-out".into(),
            set_keys: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    /// Merge defaults, optional config file, and `--key=value` flags
    /// (flags win). The `UIO_SEED` environment variable applies only if
    /// neither the file nor a flag set `seed`.
    pub fn resolve(config_path: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut kv = BTreeMap::new();
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {path}"))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .with_context(|| format!("{path}:{}: expected key=value", lineno + 1))?;
                kv.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        for (key, value) in overrides {
            kv.insert(key.clone(), value.clone());
        }
        if !kv.contains_key("seed") {
            if let Ok(seed) = std::env::var("UIO_SEED") {
                kv.insert("seed".into(), seed);
            }
        }

        let mut cfg = ExperimentConfig::default();
        for (key, value) in &kv {
            cfg.set(key, value)
                .with_context(|| format!("config key `{key}`"))?;
            cfg.set_keys.insert(key.clone(), ());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.set_keys.contains_key(key)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| anyhow::anyhow!("bad value `{value}`: {e}"))
        }
        match key {
            "model" => self.model = value.to_string(),
            "S" => self.window = num(value)?,
            "T" => self.segments = num(value)?,
            "l" => self.seg_len = num(value)?,
            "k_mem" => self.k_mem = num(value)?,
            "d_model" => self.d_model = num(value)?,
            "layers" => self.layers = num(value)?,
            "heads" => self.heads = num(value)?,
            "vocab" => self.vocab = num(value)?,
            "ffn_mult" => self.ffn_mult = num(value)?,
            "lora_rank" => self.lora_rank = num(value)?,
            "seed" => self.seed = num(value)?,
            "n_trials" => self.n_trials = num(value)?,
            "lr" => self.lr = num(value)?,
            "steps" => self.steps = num(value)?,
            "iterations" => self.iterations = num(value)?,
            "batch" => self.batch = num(value)?,
            "mode" => self.mode = Some(value.to_string()),
            "output_path" => self.output_path = value.to_string(),
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("S", self.window),
            ("T", self.segments),
            ("l", self.seg_len),
            ("k_mem", self.k_mem),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("ffn_mult", self.ffn_mult),
            ("lora_rank", self.lora_rank),
            ("n_trials", self.n_trials),
            ("iterations", self.iterations),
            ("batch", self.batch),
        ] {
            if v == 0 {
                bail!("{name} must be positive");
            }
        }
        if !matches!(self.model.as_str(), "toy-rnn" | "toy-transformer") {
            bail!("model must be toy-rnn or toy-transformer, got `{}`", self.model);
        }
        if self.seg_len % self.k_mem != 0 {
            bail!(
                "k_mem ({}) must divide l ({}) for an integer compression ratio",
                self.k_mem,
                self.seg_len
            );
        }
        if self.d_model % self.heads != 0 {
            bail!("heads ({}) must divide d_model ({})", self.heads, self.d_model);
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bail!("lr must be a positive finite number");
        }
        Ok(())
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            vocab: self.vocab,
            d_model: self.d_model,
            n_layers: self.layers,
            n_heads: self.heads,
            seg_len: self.seg_len,
            k_mem: self.k_mem,
            lora_rank: self.lora_rank,
            lora_alpha: 16.0,
            ffn_mult: self.ffn_mult,
            max_pos: 1024,
        }
    }

    /// Canonical key=value rendering; the CSV header hash is taken over
    /// this, so equal configs hash equally regardless of how they were
    /// supplied.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "S={} T={} batch={} d_model={} ffn_mult={} heads={} iterations={} k_mem={} l={} \
             layers={} lora_rank={} lr={} mode={} model={} n_trials={} seed={} steps={} vocab={}",
            self.window,
            self.segments,
            self.batch,
            self.d_model,
            self.ffn_mult,
            self.heads,
            self.iterations,
            self.k_mem,
            self.seg_len,
            self.layers,
            self.lora_rank,
            self.lr,
            self.mode.as_deref().unwrap_or("-"),
            self.model,
            self.n_trials,
            self.seed,
            self.steps,
            self.vocab,
        );
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

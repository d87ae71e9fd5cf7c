//! Resolved run configuration: defaults, then a config file, then flags.
//!
//! A config file is either flat `key = value` lines (`#` starts a comment) or a JSON
//! artifact written by this tool, whose `"config"` object holds the same keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use decepkit::harness::{ExperimentConfig, GradCheckOptions, SyntheticSpec, TrainConfig, Variant};
use decepkit::schema::DEFAULT_DEDUP_THRESHOLD;
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub seed: u64,
    pub seeds: usize,
    pub steps: usize,
    pub lr: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub latent: usize,
    pub stability_weight: f64,
    pub use_sics: bool,
    pub use_dmc: bool,
    pub n_samples: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub l_v: usize,
    pub l_a: usize,
    pub snr_v: f64,
    pub snr_a: f64,
    pub spike_frac: f64,
    pub spike_gain: f64,
    pub class_balance: f64,
    pub mirrored: bool,
    pub threshold: f64,
    pub tol: f64,
    pub gradcheck_d: usize,
    pub gradcheck_len: usize,
    pub gradcheck_batch: usize,
    pub gradcheck_warm_steps: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = SyntheticSpec::default();
        let g = GradCheckOptions::default();
        Self {
            seed: 0,
            seeds: 5,
            steps: 500,
            lr: t.lr,
            alpha: t.alpha,
            lambda: t.lambda,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            latent: t.latent,
            stability_weight: t.stability_weight,
            use_sics: t.use_sics,
            use_dmc: t.use_dmc,
            n_samples: d.n_samples,
            d_v: d.d_v,
            d_a: d.d_a,
            l_v: d.l_v,
            l_a: d.l_a,
            snr_v: d.snr_v,
            snr_a: d.snr_a,
            spike_frac: d.spike_frac,
            spike_gain: d.spike_gain,
            class_balance: d.class_balance,
            mirrored: d.mirrored,
            threshold: DEFAULT_DEDUP_THRESHOLD,
            tol: g.tol,
            gradcheck_d: g.d,
            gradcheck_len: g.len,
            gradcheck_batch: g.batch,
            gradcheck_warm_steps: g.warm_steps,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| anyhow!("config key {key}: cannot parse {value:?}: {e}"))
}

macro_rules! fields {
    ($($name:ident),* $(,)?) => {
        impl CliConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => self.$name = parse(key, value)?,)*
                    _ => bail!("unknown config key {key:?}; known keys: {}", Self::KEYS.join(", ")),
                }
                Ok(())
            }

            /// Every key with its value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), self.$name.to_string())),*]
            }

            pub fn to_json(&self) -> Value {
                let mut m = Map::new();
                $(m.insert(stringify!($name).to_string(), serde_json::json!(self.$name));)*
                Value::Object(m)
            }
        }
    };
}

fields!(
    seed, seeds, steps, lr, alpha, lambda, weight_decay, batch_size, latent, stability_weight, use_sics, use_dmc,
    n_samples, d_v, d_a, l_v, l_a, snr_v, snr_a, spike_frac, spike_gain, class_balance, mirrored, threshold, tol,
    gradcheck_d, gradcheck_len, gradcheck_batch, gradcheck_warm_steps,
);

impl CliConfig {
    /// Applies a config file on top of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        if text.trim_start().starts_with('{') {
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let block = v
                .get("config")
                .and_then(Value::as_object)
                .ok_or_else(|| anyhow!("{}: JSON config needs a \"config\" object", path.display()))?;
            for (k, v) in block {
                let text = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                self.set(k, &text)?;
            }
        } else {
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), n + 1))?;
                self.set(k.trim(), v).with_context(|| format!("{}:{}", path.display(), n + 1))?;
            }
        }
        Ok(())
    }

    /// Flat `key = value` form, readable back by [`CliConfig::apply_file`].
    pub fn to_conf(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn data_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_samples: self.n_samples,
            d_v: self.d_v,
            d_a: self.d_a,
            l_v: self.l_v,
            l_a: self.l_a,
            snr_v: self.snr_v,
            snr_a: self.snr_a,
            spike_frac: self.spike_frac,
            spike_gain: self.spike_gain,
            class_balance: self.class_balance,
            mirrored: self.mirrored,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.steps.max(1),
            max_steps: Some(self.steps),
            batch_size: self.batch_size,
            alpha: self.alpha,
            lambda: self.lambda,
            weight_decay: self.weight_decay,
            stability_weight: self.stability_weight,
            latent: self.latent,
            seed,
            use_sics: self.use_sics,
            use_dmc: self.use_dmc,
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            data: self.data_spec(self.seed),
            train: self.train_config(self.seed),
            seeds: (0..self.seeds as u64).map(|k| self.seed + k).collect(),
            variants: Variant::ALL.to_vec(),
        }
    }

    pub fn gradcheck(&self) -> GradCheckOptions {
        GradCheckOptions {
            tol: self.tol,
            d: self.gradcheck_d,
            len: self.gradcheck_len,
            batch: self.gradcheck_batch,
            seed: self.seed,
            warm_steps: self.gradcheck_warm_steps,
            ..Default::default()
        }
    }
}

/// Overrides collected from command-line flags, applied last.
#[derive(Debug, Default)]
pub struct Overrides(pub BTreeMap<&'static str, String>);

impl Overrides {
    pub fn put<T: ToString>(&mut self, key: &'static str, value: Option<T>) {
        if let Some(v) = value {
            self.0.insert(key, v.to_string());
        }
    }

    pub fn apply(&self, cfg: &mut CliConfig) -> Result<()> {
        for (k, v) in &self.0 {
            cfg.set(k, v)?;
        }
        Ok(())
    }
}

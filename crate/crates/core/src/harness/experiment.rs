use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    build_model, evaluate, gen_synthetic, train, Dataset, HarnessError, Metrics, Model, SyntheticSpec, TrainConfig,
    TrainTrace,
};
use crate::dmc::{balance_statistic, Modality};

/// Steps averaged by the balance statistic.
pub const BALANCE_WINDOW: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "Base")]
    Base,
    #[serde(rename = "+SICS")]
    Sics,
    #[serde(rename = "+DMC")]
    Dmc,
    #[serde(rename = "Full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Dmc, Variant::Sics, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::Sics => "+SICS",
            Variant::Dmc => "+DMC",
            Variant::Full => "Full",
        }
    }

    /// File-name friendly tag.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Sics => "sics",
            Variant::Dmc => "dmc",
            Variant::Full => "full",
        }
    }

    pub fn uses_sics(self) -> bool {
        matches!(self, Variant::Sics | Variant::Full)
    }

    pub fn uses_dmc(self) -> bool {
        matches!(self, Variant::Dmc | Variant::Full)
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            use_sics: self.uses_sics(),
            use_dmc: self.uses_dmc(),
            ..cfg.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A shared data recipe and training recipe, repeated over seeds.
///
/// For each seed both the dataset and the model initialization are reseeded, so
/// every variant sees the same data and the same shared-component initial weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            seeds: (0..5).collect(),
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub metrics: Metrics,
    /// Mean `|ln r|` over the last [`BALANCE_WINDOW`] steps.
    pub balance_b: Option<f64>,
    #[serde(skip)]
    pub trace: TrainTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config: ExperimentConfig,
    pub variants: BTreeMap<Variant, Vec<RunSummary>>,
}

impl ComparisonReport {
    pub fn runs(&self, v: Variant) -> &[RunSummary] {
        self.variants.get(&v).map_or(&[], Vec::as_slice)
    }

    pub fn mean_accuracy(&self, v: Variant) -> Option<f64> {
        let runs = self.runs(v);
        (!runs.is_empty()).then(|| runs.iter().map(|r| r.metrics.accuracy).sum::<f64>() / runs.len() as f64)
    }
}

fn seeded(cfg: &ExperimentConfig, seed: u64) -> (SyntheticSpec, TrainConfig) {
    (
        SyntheticSpec { seed, ..cfg.data.clone() },
        TrainConfig { seed, ..cfg.train.clone() },
    )
}

/// Trains one variant on one seed.
pub fn run_variant(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> Result<RunSummary, HarnessError> {
    let (spec, train_cfg) = seeded(cfg, seed);
    let data = gen_synthetic(&spec)?;
    let train_cfg = variant.apply(&train_cfg);
    let mut model = build_model(&train_cfg, spec.d_v, spec.d_a)?;
    let trace = train(&mut model, &data, &train_cfg)?;
    Ok(RunSummary {
        seed,
        steps: trace.steps.len(),
        metrics: evaluate(&model, &data)?,
        balance_b: balance_statistic(&trace.grad_trace(), BALANCE_WINDOW),
        trace,
    })
}

/// Runs every variant on every seed. Variants run on separate threads.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ComparisonReport, HarnessError> {
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(HarnessError::Config("an experiment needs at least one seed and one variant".into()));
    }
    cfg.data.validate()?;
    cfg.train.validate()?;
    let results: Vec<(Variant, Result<Vec<RunSummary>, HarnessError>)> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .variants
            .iter()
            .map(|&v| {
                (
                    v,
                    s.spawn(move || cfg.seeds.iter().map(|&seed| run_variant(cfg, v, seed)).collect()),
                )
            })
            .collect();
        handles
            .into_iter()
            .map(|(v, h)| (v, h.join().expect("variant thread panicked")))
            .collect()
    });
    let mut variants = BTreeMap::new();
    for (v, runs) in results {
        variants.insert(v, runs?);
    }
    Ok(ComparisonReport {
        config: cfg.clone(),
        variants,
    })
}

/// Per spiked dimension spread of raw tokens against adapter outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionSpread {
    pub modality: Modality,
    pub dim: usize,
    pub raw_std: f64,
    pub refined_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilizationReport {
    pub seed: u64,
    pub dims: Vec<DimensionSpread>,
}

impl StabilizationReport {
    /// Every spiked dimension is tighter after refinement.
    pub fn stabilized(&self) -> bool {
        !self.dims.is_empty() && self.dims.iter().all(|d| d.refined_std < d.raw_std)
    }
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Standard deviation over all tokens of all samples, raw against adapter output,
/// on each spiked dimension of each modality the model has an adapter for.
pub fn feature_spread(model: &Model, data: &Dataset, seed: u64) -> Result<StabilizationReport, HarnessError> {
    let mut dims = Vec::new();
    for m in Modality::ALL {
        let spiked = data.spike_dims(m);
        if spiked.is_empty() || model.sics(m).is_none() {
            continue;
        }
        let mut raw = vec![Vec::new(); spiked.len()];
        let mut refined = vec![Vec::new(); spiked.len()];
        for s in &data.samples {
            let x = s.modality(m);
            let y = model.refine(m, x)?.expect("adapter presence checked above");
            for r in 0..x.rows() {
                for (k, &j) in spiked.iter().enumerate() {
                    raw[k].push(x.row(r)[j]);
                    refined[k].push(y.row(r)[j]);
                }
            }
        }
        for (k, &dim) in spiked.iter().enumerate() {
            dims.push(DimensionSpread {
                modality: m,
                dim,
                raw_std: std_dev(&raw[k]),
                refined_std: std_dev(&refined[k]),
            });
        }
    }
    Ok(StabilizationReport { seed, dims })
}

/// Trains a model with adapters on `spec`, then measures [`feature_spread`].
pub fn stabilization(spec: &SyntheticSpec, cfg: &TrainConfig) -> Result<StabilizationReport, HarnessError> {
    let cfg = TrainConfig {
        use_sics: true,
        seed: spec.seed,
        ..cfg.clone()
    };
    let data = gen_synthetic(spec)?;
    let mut model = build_model(&cfg, spec.d_v, spec.d_a)?;
    train(&mut model, &data, &cfg)?;
    feature_spread(&model, &data, spec.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_flags_and_names() {
        assert_eq!(Variant::ALL.map(|v| (v.uses_sics(), v.uses_dmc())), [
            (false, false),
            (false, true),
            (true, false),
            (true, true)
        ]);
        assert_eq!(serde_json::to_string(&Variant::Dmc).unwrap(), "\"+DMC\"");
    }

    #[test]
    fn empty_experiment_is_rejected() {
        let cfg = ExperimentConfig {
            seeds: vec![],
            ..Default::default()
        };
        assert!(run_experiment(&cfg).is_err());
    }
}

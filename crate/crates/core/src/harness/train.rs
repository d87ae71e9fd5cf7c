use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, Dataset, HarnessError, Model, Sample};
use crate::dmc::GradTrace;
use crate::numerics::{Graph, NumericsError, ParamStore, Tensor, Var};
use crate::sics::DEFAULT_LAMBDA;
use crate::Label;

/// Distillation weight used unless configured otherwise.
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub weight_decay: f64,
    /// Weight of the optional adapter residual penalty.
    pub stability_weight: f64,
    pub latent: usize,
    pub seed: u64,
    pub use_sics: bool,
    pub use_dmc: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 10,
            max_steps: None,
            batch_size: 32,
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            weight_decay: 1e-2,
            stability_weight: 0.0,
            latent: 8,
            seed: 0,
            use_sics: true,
            use_dmc: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.latent == 0 || self.max_steps == Some(0) {
            return bad("epochs, batch_size, latent and max_steps must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.weight_decay >= 0.0 && self.stability_weight >= 0.0) {
            return bad("weight_decay and stability_weight must be non-negative".into());
        }
        Ok(())
    }
}

/// Confusion-matrix metrics with deceptive as the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Metrics {
    /// F1 is 0 when there are neither actual nor predicted positives.
    pub fn from_confusion(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let n = tp + fp + tn + fn_;
        let accuracy = if n == 0 { 0.0 } else { (tp + tn) as f64 / n as f64 };
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        Self {
            accuracy,
            f1,
            tp,
            fp,
            tn,
            fn_,
        }
    }

    pub fn from_predictions(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (truth, pred) in pairs {
            match (truth, pred) {
                (Label::Deceptive, Label::Deceptive) => tp += 1,
                (Label::Truthful, Label::Deceptive) => fp += 1,
                (Label::Truthful, Label::Truthful) => tn += 1,
                (Label::Deceptive, Label::Truthful) => fn_ += 1,
            }
        }
        Self::from_confusion(tp, fp, tn, fn_)
    }
}

/// Argmax of the fused prediction (ties go to deceptive) over a dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Metrics, HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::Config("cannot evaluate on an empty dataset".into()));
    }
    let pairs = data
        .samples
        .iter()
        .map(|s| Ok((s.label, Label::from_index(model.predict(s)?.argmax()))))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(Metrics::from_predictions(pairs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_rep: f64,
    pub loss_distill: f64,
    pub loss_stability: f64,
    pub total: f64,
    pub grad: GradTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn grad_trace(&self) -> Vec<GradTrace> {
        self.steps.iter().map(|s| s.grad).collect()
    }

    /// Columns `step,loss_rep,loss_distill,total,norm_v,norm_a,ratio`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss_rep", "loss_distill", "total", "norm_v", "norm_a", "ratio"])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.loss_rep.to_string(),
                s.loss_distill.to_string(),
                s.total.to_string(),
                s.grad.norm_v.to_string(),
                s.grad.norm_a.to_string(),
                s.grad.ratio.map(|r| r.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loss nodes for one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub rep: Var,
    pub distill: Option<Var>,
    pub stability: Option<Var>,
    pub total: Var,
}

fn mean(g: &mut Graph, terms: &[Var]) -> Result<Var, NumericsError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// `L = L_rep + α·L_distill (+ β·‖Δz‖²)`, each term averaged over the batch.
///
/// `L_rep` is the two-class cross-entropy of the fused prediction. The distillation
/// term is only built when `cfg.use_dmc` is set.
pub fn batch_objective(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    batch: &[&Sample],
    cfg: &TrainConfig,
) -> Result<BatchLoss, HarnessError> {
    batch_objective_with(g, model, store, batch, cfg, None)
}

/// [`batch_objective`] with the per-sample teacher distributions optionally pinned.
pub fn batch_objective_with(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    batch: &[&Sample],
    cfg: &TrainConfig,
    teachers: Option<&[Tensor]>,
) -> Result<BatchLoss, HarnessError> {
    if batch.is_empty() {
        return Err(HarnessError::Config("empty batch".into()));
    }
    if teachers.is_some_and(|t| t.len() != batch.len()) {
        return Err(HarnessError::Config("one pinned teacher per sample is required".into()));
    }
    let (mut reps, mut kls, mut stabs) = (Vec::new(), Vec::new(), Vec::new());
    for (i, sample) in batch.iter().enumerate() {
        let vars = model.forward_sample(g, store, sample)?;
        reps.push(vars.rep_loss);
        if cfg.use_dmc {
            kls.push(model.distill_term_with(g, store, &vars, teachers.map(|t| &t[i]))?);
        }
        if cfg.stability_weight > 0.0 {
            if let Some(s) = model.stability_term(g, &vars)? {
                stabs.push(s);
            }
        }
    }
    let rep = mean(g, &reps)?;
    let mut total = rep;
    let distill = if kls.is_empty() {
        None
    } else {
        let d = mean(g, &kls)?;
        let weighted = g.scale(d, cfg.alpha)?;
        total = g.add(total, weighted)?;
        Some(d)
    };
    let stability = if stabs.is_empty() {
        None
    } else {
        let s = mean(g, &stabs)?;
        let weighted = g.scale(s, cfg.stability_weight)?;
        total = g.add(total, weighted)?;
        Some(s)
    };
    Ok(BatchLoss {
        rep,
        distill,
        stability,
        total,
    })
}

/// Value of the batch objective at `store`'s parameters, teachers optionally pinned.
pub fn objective_value(
    model: &Model,
    store: &ParamStore,
    batch: &[&Sample],
    cfg: &TrainConfig,
    teachers: Option<&[Tensor]>,
) -> Result<f64, HarnessError> {
    let mut g = Graph::new();
    let loss = batch_objective_with(&mut g, model, store, batch, cfg, teachers)?;
    Ok(g.value(loss.total).data()[0])
}

/// Accumulates gradients of the batch objective into `model.store` and returns the losses.
pub fn accumulate_gradients(model: &mut Model, batch: &[&Sample], cfg: &TrainConfig) -> Result<(f64, f64, f64, f64), HarnessError> {
    let mut g = Graph::new();
    let loss = batch_objective(&mut g, model, &model.store, batch, cfg)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let out = (
        g.value(loss.rep).data()[0],
        value(loss.distill),
        value(loss.stability),
        g.value(loss.total).data()[0],
    );
    g.backward_into(loss.total, &mut model.store)?;
    Ok(out)
}

fn extrema_dump(store: &ParamStore) -> String {
    let mut lines = Vec::new();
    for (_, name, t) in store.iter() {
        let (lo, hi) = t
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let g = t
            .grad()
            .map(|g| g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .map_or("none".to_string(), |m| format!("{m:e}"));
        lines.push(format!("{name}: value [{lo:e}, {hi:e}] max|grad| {g}"));
    }
    lines.join("\n")
}

/// One optimizer step on `batch`. Gradients are cleared before and after.
pub fn train_step(
    model: &mut Model,
    batch: &[&Sample],
    cfg: &TrainConfig,
    opt: &mut AdamW,
    step: usize,
    epoch: usize,
) -> Result<StepRecord, HarnessError> {
    model.store.zero_grad();
    let (loss_rep, loss_distill, loss_stability, total) = match accumulate_gradients(model, batch, cfg) {
        Ok(v) => v,
        Err(HarnessError::Numerics(NumericsError::NonFinite { op })) => {
            return Err(HarnessError::NonFinite {
                step,
                detail: format!("{op} produced a non-finite value\n{}", extrema_dump(&model.store)),
            })
        }
        Err(e) => return Err(e),
    };
    if !total.is_finite() {
        return Err(HarnessError::NonFinite {
            step,
            detail: extrema_dump(&model.store),
        });
    }
    let grad = GradTrace::from_store(step, &model.store, &model.proj_v, &model.proj_a);
    opt.step(&mut model.store);
    model.store.zero_grad();
    Ok(StepRecord {
        step,
        epoch,
        loss_rep,
        loss_distill,
        loss_stability,
        total,
        grad,
    })
}

/// Builds the model a training config describes for data of the given widths.
pub fn build_model(cfg: &TrainConfig, d_v: usize, d_a: usize) -> Result<Model, HarnessError> {
    Model::new(super::ModelConfig {
        d_v,
        d_a,
        latent: cfg.latent,
        sics_hidden: None,
        lambda: cfg.lambda,
        use_sics: cfg.use_sics,
        distill_head: cfg.use_dmc,
        seed: cfg.seed,
    })
}

/// Mini-batch training with a per-epoch shuffle seeded by `cfg.seed`.
///
/// Training-set metrics are recorded at the end of every epoch and after the last step.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainTrace, HarnessError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(HarnessError::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F5A_u64);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            trace.steps.push(train_step(model, &batch, cfg, &mut opt, step, epoch)?);
            step += 1;
        }
        trace.epochs.push(EpochRecord {
            epoch,
            steps: step,
            metrics: evaluate(model, data)?,
        });
    }
    if trace.epochs.last().map(|e| e.steps) != Some(step) {
        let epoch = trace.steps.last().map_or(0, |s| s.epoch);
        trace.epochs.push(EpochRecord {
            epoch,
            steps: step,
            metrics: evaluate(model, data)?,
        });
    }
    Ok(trace)
}

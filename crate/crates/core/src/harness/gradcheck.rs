use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    accumulate_gradients, build_model, gen_synthetic, objective_value, train, HarnessError, Model, Sample,
    SyntheticSpec, TrainConfig,
};
use crate::numerics::{
    grad_check, GradCheckReport, GradMismatch, Graph, NumericsError, ParamStore, Tensor, Var, DEFAULT_STEP,
};
use crate::sics::{sics_apply, SicsConfig, SicsParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub tol: f64,
    pub step: f64,
    /// Feature width of both modalities.
    pub d: usize,
    /// Sequence length of both modalities.
    pub len: usize,
    pub batch: usize,
    pub seed: u64,
    /// Training steps taken before the off-init check.
    pub warm_steps: usize,
    /// Negate the analytic gradient of every parameter whose name contains this string.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            step: DEFAULT_STEP,
            d: 4,
            len: 3,
            batch: 4,
            seed: 0,
            warm_steps: 100,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst_param: Option<String>,
    pub worst_index: Option<usize>,
    pub analytic: Option<f64>,
    pub numeric: Option<f64>,
    pub passed: bool,
    /// `(analytic, numeric)` per coordinate.
    #[serde(skip)]
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckCase {
    fn new(name: &str, report: GradCheckReport, tol: f64) -> Self {
        let w: Option<GradMismatch> = report.worst.clone();
        Self {
            name: name.to_string(),
            max_rel_error: report.max_rel_error,
            coordinates: report.coordinates,
            worst_param: w.as_ref().map(|w| w.param.clone()),
            worst_index: w.as_ref().map(|w| w.index),
            analytic: w.as_ref().map(|w| w.analytic),
            numeric: w.as_ref().map(|w| w.numeric),
            passed: report.passes(tol),
            pairs: report.pairs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tol: f64,
    pub cases: Vec<GradCheckCase>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckCase> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

fn lift(e: HarnessError) -> NumericsError {
    match e {
        HarnessError::Numerics(n) => n,
        other => NumericsError::InvalidArgument(other.to_string()),
    }
}

fn corrupt(store: &mut ParamStore, pattern: Option<&str>) {
    let Some(pattern) = pattern else { return };
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).contains(pattern)).collect();
    for id in ids {
        let flipped: Vec<f64> = store.grad_or_zeros(id).iter().map(|g| -2.0 * g).collect();
        store.get_mut(id).accumulate_grad(&flipped);
    }
}

/// Pre-activations closer to zero than this are treated as sitting on a ReLU kink.
const KINK_MARGIN: f64 = 1e-3;

/// Smallest `|w±|` entry the adapters of `store` produce on `sample`.
fn kink_distance(
    store: &ParamStore,
    adapters: &[(&SicsParams, &Tensor)],
    lambda: f64,
) -> Result<f64, HarnessError> {
    let mut nearest = f64::INFINITY;
    for (p, x) in adapters {
        let mut g = Graph::new();
        let xv = g.input((*x).clone());
        let vars = sics_apply(&mut g, store, p, lambda, xv)?;
        for v in [vars.w_plus, vars.w_minus] {
            nearest = g.value(v).data().iter().fold(nearest, |m, z| m.min(z.abs()));
        }
    }
    Ok(nearest)
}

/// Up to `n` samples whose adapter pre-activations all stay clear of the ReLU kink,
/// so that no finite-difference stencil straddles a non-differentiable point.
fn smooth_batch<'a>(model: &Model, data: &'a [Sample], n: usize) -> Result<Vec<&'a Sample>, HarnessError> {
    let mut picked = Vec::with_capacity(n);
    for s in data {
        let adapters: Vec<(&SicsParams, &Tensor)> = [(model.sics_v.as_ref(), &s.video), (model.sics_a.as_ref(), &s.audio)]
            .into_iter()
            .filter_map(|(p, x)| p.map(|p| (p, x)))
            .collect();
        if kink_distance(&model.store, &adapters, model.config.lambda)? > KINK_MARGIN {
            picked.push(s);
            if picked.len() == n {
                return Ok(picked);
            }
        }
    }
    Err(HarnessError::Config(format!(
        "fewer than {n} samples keep every ReLU input at least {KINK_MARGIN:e} from zero"
    )))
}

/// Adapter alone under a fixed random linear read-out of its output.
fn sics_case(opts: &GradCheckOptions, pool: &[Sample]) -> Result<GradCheckReport, HarnessError> {
    let mut store = ParamStore::new();
    let cfg = SicsConfig {
        seed: opts.seed,
        ..SicsConfig::new(opts.d)
    };
    let p = SicsParams::init(&mut store, "sics", &cfg)?;
    let mut data = Vec::with_capacity(opts.batch);
    for s in pool {
        if kink_distance(&store, &[(&p, &s.video)], cfg.lambda)? > KINK_MARGIN {
            data.push(s);
        }
        if data.len() == opts.batch {
            break;
        }
    }
    if data.len() < opts.batch {
        return Err(HarnessError::Config("too few kink-free samples for the adapter check".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(17));
    let readouts: Vec<Tensor> = data
        .iter()
        .map(|s| {
            let v = (0..s.video.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(s.video.shape().to_vec(), v)
        })
        .collect::<Result<_, _>>()?;
    let objective = |g: &mut Graph, store: &ParamStore| -> Result<Var, HarnessError> {
        let mut total: Option<Var> = None;
        for (s, r) in data.iter().zip(&readouts) {
            let x = g.input(s.video.clone());
            let out = sics_apply(g, store, &p, cfg.lambda, x)?.output;
            let r = g.input(r.clone());
            let prod = g.mul(out, r)?;
            let term = g.sum(prod)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        total.ok_or_else(|| HarnessError::Config("empty batch".into()))
    };
    let mut g = Graph::new();
    let loss = objective(&mut g, &store)?;
    g.backward_into(loss, &mut store)?;
    corrupt(&mut store, opts.corrupt.as_deref());
    Ok(grad_check(&store, opts.step, |s| {
        let mut g = Graph::new();
        let v = objective(&mut g, s).map_err(lift)?;
        Ok(g.value(v).data()[0])
    })?)
}

/// Objective gradients of `model` on `batch`, compared against finite differences
/// with the teacher distributions held at their unperturbed values.
fn objective_case(
    model: &Model,
    pool: &[Sample],
    cfg: &TrainConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, HarnessError> {
    let batch = smooth_batch(model, pool, opts.batch)?;
    let batch = batch.as_slice();
    let mut model = model.clone();
    model.store.zero_grad();
    accumulate_gradients(&mut model, batch, cfg)?;
    corrupt(&mut model.store, opts.corrupt.as_deref());
    let teachers = batch
        .iter()
        .map(|s| model.teacher_values(&model.store, s))
        .collect::<Result<Vec<_>, _>>()?;
    let pinned = cfg.use_dmc.then_some(teachers.as_slice());
    Ok(grad_check(&model.store, opts.step, |s| {
        objective_value(&model, s, batch, cfg, pinned).map_err(lift)
    })?)
}

/// Certifies analytic gradients for the adapter alone, the consistency loss alone,
/// and the full objective both at initialization and after `warm_steps` of training.
pub fn gradcheck_suite(opts: &GradCheckOptions) -> Result<SuiteReport, HarnessError> {
    if opts.batch == 0 || opts.d == 0 || opts.len == 0 {
        return Err(HarnessError::Config("gradcheck sizes must be positive".into()));
    }
    let spec = SyntheticSpec {
        n_samples: 4 * opts.batch.max(2),
        d_v: opts.d,
        d_a: opts.d,
        l_v: opts.len,
        l_a: opts.len.saturating_sub(1).max(1),
        snr_v: 1.0,
        snr_a: 0.25,
        seed: opts.seed,
        ..Default::default()
    };
    let data = gen_synthetic(&spec)?;
    let base = TrainConfig {
        latent: opts.d,
        batch_size: opts.batch,
        seed: opts.seed,
        ..Default::default()
    };
    let mut cases = Vec::new();

    cases.push(GradCheckCase::new("sics", sics_case(opts, &data.samples)?, opts.tol));

    // Consistency loss alone: no adapters, no supervised term.
    let dmc_cfg = TrainConfig {
        use_sics: false,
        use_dmc: true,
        ..base.clone()
    };
    let dmc_model = build_model(&dmc_cfg, spec.d_v, spec.d_a)?;
    let dmc_batch = smooth_batch(&dmc_model, &data.samples, opts.batch)?;
    cases.push(GradCheckCase::new(
        "dmc",
        distill_only_case(&dmc_model, &dmc_batch, opts)?,
        opts.tol,
    ));

    let full_cfg = TrainConfig {
        use_sics: true,
        use_dmc: true,
        ..base.clone()
    };
    let mut full = build_model(&full_cfg, spec.d_v, spec.d_a)?;
    cases.push(GradCheckCase::new(
        "full@init",
        objective_case(&full, &data.samples, &full_cfg, opts)?,
        opts.tol,
    ));

    if opts.warm_steps > 0 {
        let warm = TrainConfig {
            epochs: opts.warm_steps,
            max_steps: Some(opts.warm_steps),
            ..full_cfg.clone()
        };
        train(&mut full, &data, &warm)?;
        let name = format!("full@{}", opts.warm_steps);
        cases.push(GradCheckCase::new(
            &name,
            objective_case(&full, &data.samples, &full_cfg, opts)?,
            opts.tol,
        ));
    }
    Ok(SuiteReport { tol: opts.tol, cases })
}

/// The consistency term `mean KL(q‖p_v) + KL(q‖p_a)` on its own, teacher pinned.
fn distill_only_case(model: &Model, batch: &[&Sample], opts: &GradCheckOptions) -> Result<GradCheckReport, HarnessError> {
    let value = |g: &mut Graph, store: &ParamStore, teachers: Option<&[Tensor]>| -> Result<Var, HarnessError> {
        let mut total: Option<Var> = None;
        for (i, s) in batch.iter().enumerate() {
            let vars = model.forward_sample(g, store, s)?;
            let term = model.distill_term_with(g, store, &vars, teachers.map(|t| &t[i]))?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        let t = total.ok_or_else(|| HarnessError::Config("empty batch".into()))?;
        Ok(g.scale(t, 1.0 / batch.len() as f64)?)
    };
    let mut store = model.store.clone();
    store.zero_grad();
    let mut g = Graph::new();
    let loss = value(&mut g, &store, None)?;
    g.backward_into(loss, &mut store)?;
    corrupt(&mut store, opts.corrupt.as_deref());
    let teachers = batch
        .iter()
        .map(|s| model.teacher_values(&store, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(grad_check(&store, opts.step, |s| {
        let mut g = Graph::new();
        let v = value(&mut g, s, Some(&teachers)).map_err(lift)?;
        Ok(g.value(v).data()[0])
    })?)
}

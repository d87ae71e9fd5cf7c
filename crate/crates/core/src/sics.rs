//! Gated individuality-commonality adapter.
//!
//! For one `L×d` token sequence `x`:
//!
//! ```text
//! c   = mean over rows of x
//! Δz  = W2·tanh(W1·c + b1) + b2
//! g   = σ(W_g·Δz + b_g)                       (one scalar per sample)
//! w   = tanh(g·b_global + (1 − g)·Δz)
//! w⁺  = W⁺·w + b⁺,   w⁻ = W⁻·w + b⁻
//! x'  = x ⊙ ReLU(w⁺) − x ⊙ ReLU(w⁻)          (w± broadcast over rows)
//! out = λ·x' + (1 − λ)·x
//! ```
//!
//! `b_global` is a learned prior shared by all samples; `Δz` is the per-sample residual.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};

/// Blend coefficient used unless configured otherwise.
pub const DEFAULT_LAMBDA: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SicsError {
    #[error("invalid adapter config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SicsConfig {
    pub d: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Weight of the optional `‖Δz‖²` penalty. Zero disables it.
    pub stability_weight: f64,
}

impl SicsConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            hidden: d,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            stability_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SicsError> {
        if self.d == 0 || self.hidden == 0 {
            return Err(SicsError::Config(format!(
                "d and hidden must be positive (d={}, hidden={})",
                self.d, self.hidden
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SicsError::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.stability_weight >= 0.0 && self.stability_weight.is_finite()) {
            return Err(SicsError::Config(format!(
                "stability weight must be non-negative, got {}",
                self.stability_weight
            )));
        }
        Ok(())
    }
}

/// Handles to the adapter's tensors inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SicsParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub b_global: ParamId,
    pub w_plus: ParamId,
    pub b_plus: ParamId,
    pub w_minus: ParamId,
    pub b_minus: ParamId,
}

impl SicsParams {
    /// Registers a fresh adapter under `prefix`.
    ///
    /// Weight matrices are uniform in `±1/√fan_in`; biases and `b_global` start at zero.
    /// Draws come from a generator seeded by `cfg.seed` alone.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &SicsConfig) -> Result<Self, SicsError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, h) = (cfg.d, cfg.hidden);
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let name = |n: &str| format!("{prefix}.{n}");
        Ok(Self {
            w1: store.add_uniform(name("w1"), &[h, d], inv(d), &mut rng),
            b1: store.add_zeros(name("b1"), &[h]),
            w2: store.add_uniform(name("w2"), &[d, h], inv(h), &mut rng),
            b2: store.add_zeros(name("b2"), &[d]),
            w_g: store.add_uniform(name("w_g"), &[1, d], inv(d), &mut rng),
            b_g: store.add_zeros(name("b_g"), &[1]),
            b_global: store.add_zeros(name("b_global"), &[d]),
            w_plus: store.add_uniform(name("w_plus"), &[d, d], inv(d), &mut rng),
            b_plus: store.add_zeros(name("b_plus"), &[d]),
            w_minus: store.add_uniform(name("w_minus"), &[d, d], inv(d), &mut rng),
            b_minus: store.add_zeros(name("b_minus"), &[d]),
        })
    }

    pub fn ids(&self) -> [ParamId; 11] {
        [
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.w_g,
            self.b_g,
            self.b_global,
            self.w_plus,
            self.b_plus,
            self.w_minus,
            self.b_minus,
        ]
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.get(self.b2).numel()
    }
}

/// Graph handles for one adapter application.
#[derive(Clone, Copy, Debug)]
pub struct SicsVars {
    pub context: Var,
    pub residual: Var,
    pub gate: Var,
    pub modulation: Var,
    pub w_plus: Var,
    pub w_minus: Var,
    pub refined: Var,
    pub output: Var,
}

/// Per-sample diagnostics read back from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SicsTrace {
    pub gate: f64,
    pub residual: Vec<f64>,
    pub w_plus: Vec<f64>,
    pub w_minus: Vec<f64>,
    pub refined: Tensor,
}

impl SicsTrace {
    pub fn from_graph(g: &Graph, vars: &SicsVars) -> Self {
        Self {
            gate: g.value(vars.gate).data()[0],
            residual: g.value(vars.residual).data().to_vec(),
            w_plus: g.value(vars.w_plus).data().to_vec(),
            w_minus: g.value(vars.w_minus).data().to_vec(),
            refined: g.value(vars.refined).clone(),
        }
    }
}

/// Temporal mean of an `L×d` sequence.
pub fn context_pool(g: &mut Graph, x: Var) -> Result<Var, SicsError> {
    Ok(g.mean_rows(x)?)
}

/// `Δz = W2·tanh(W1·c + b1) + b2`.
pub fn residual_net(g: &mut Graph, store: &ParamStore, p: &SicsParams, c: Var) -> Result<Var, SicsError> {
    let w1 = g.param(store, p.w1);
    let b1 = g.param(store, p.b1);
    let w2 = g.param(store, p.w2);
    let b2 = g.param(store, p.b2);
    let h = g.matmul(w1, c)?;
    let h = g.add(h, b1)?;
    let h = g.tanh(h)?;
    let out = g.matmul(w2, h)?;
    Ok(g.add(out, b2)?)
}

/// Returns `(w, g)`: the modulation vector and the scalar gate.
pub fn gate_fuse(g: &mut Graph, store: &ParamStore, p: &SicsParams, dz: Var) -> Result<(Var, Var), SicsError> {
    let w_g = g.param(store, p.w_g);
    let b_g = g.param(store, p.b_g);
    let b_global = g.param(store, p.b_global);
    let logit = g.matmul(w_g, dz)?;
    let logit = g.add(logit, b_g)?;
    let gate = g.sigmoid(logit)?;
    let one_minus = g.scale(gate, -1.0)?;
    let one_minus = g.offset(one_minus, 1.0)?;
    let prior = g.scalar_mul(gate, b_global)?;
    let sample = g.scalar_mul(one_minus, dz)?;
    let mix = g.add(prior, sample)?;
    Ok((g.tanh(mix)?, gate))
}

/// `x ⊙ ReLU(w⁺) − x ⊙ ReLU(w⁻)` with `w±` broadcast across the rows of `x`.
pub fn polarity_apply(g: &mut Graph, x: Var, w_plus: Var, w_minus: Var) -> Result<Var, SicsError> {
    let up = g.relu(w_plus)?;
    let down = g.relu(w_minus)?;
    let enhanced = g.mul(x, up)?;
    let suppressed = g.mul(x, down)?;
    Ok(g.sub(enhanced, suppressed)?)
}

/// Returns `(x', w⁺, w⁻)`.
pub fn polarity_refine(
    g: &mut Graph,
    store: &ParamStore,
    p: &SicsParams,
    x: Var,
    w: Var,
) -> Result<(Var, Var, Var), SicsError> {
    let wp = g.param(store, p.w_plus);
    let bp = g.param(store, p.b_plus);
    let wm = g.param(store, p.w_minus);
    let bm = g.param(store, p.b_minus);
    let w_plus = g.matmul(wp, w)?;
    let w_plus = g.add(w_plus, bp)?;
    let w_minus = g.matmul(wm, w)?;
    let w_minus = g.add(w_minus, bm)?;
    let refined = polarity_apply(g, x, w_plus, w_minus)?;
    Ok((refined, w_plus, w_minus))
}

/// `λ·x' + (1 − λ)·x`.
pub fn blend(g: &mut Graph, refined: Var, x: Var, lambda: f64) -> Result<Var, SicsError> {
    let a = g.scale(refined, lambda)?;
    let b = g.scale(x, 1.0 - lambda)?;
    Ok(g.add(a, b)?)
}

/// Full adapter on the graph.
pub fn sics_apply(
    g: &mut Graph,
    store: &ParamStore,
    p: &SicsParams,
    lambda: f64,
    x: Var,
) -> Result<SicsVars, SicsError> {
    let d = p.width(store);
    let xs = g.value(x).shape();
    if xs.len() != 2 || xs[1] != d {
        return Err(NumericsError::Shape {
            op: "sics",
            left: xs.to_vec(),
            right: vec![d],
        }
        .into());
    }
    let context = context_pool(g, x)?;
    let residual = residual_net(g, store, p, context)?;
    let (modulation, gate) = gate_fuse(g, store, p, residual)?;
    let (refined, w_plus, w_minus) = polarity_refine(g, store, p, x, modulation)?;
    let output = blend(g, refined, x, lambda)?;
    Ok(SicsVars {
        context,
        residual,
        gate,
        modulation,
        w_plus,
        w_minus,
        refined,
        output,
    })
}

/// `‖Δz‖²`, the optional light stability term.
pub fn stability_penalty(g: &mut Graph, vars: &SicsVars) -> Result<Var, SicsError> {
    let sq = g.mul(vars.residual, vars.residual)?;
    Ok(g.sum(sq)?)
}

/// Evaluates the adapter on one sequence outside of any training graph.
pub fn sics_forward(
    x: &Tensor,
    store: &ParamStore,
    p: &SicsParams,
    cfg: &SicsConfig,
) -> Result<(Tensor, SicsTrace), SicsError> {
    cfg.validate()?;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let vars = sics_apply(&mut g, store, p, cfg.lambda, xv)?;
    Ok((g.value(vars.output).clone(), SicsTrace::from_graph(&g, &vars)))
}

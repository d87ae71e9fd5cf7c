//! Modality-consistency distillation.
//!
//! Each modality's pooled tokens pass through its own two-layer projector into a
//! shared latent space. A single distillation head maps either latent to a
//! two-class distribution `p_m`, which is pulled toward the fused teacher
//! distribution `q` by `KL(q ‖ p_v) + KL(q ‖ p_a)`. The teacher output is a constant
//! for this loss.
//!
//! The projectors also feed the fused head, so their gradient norms expose which
//! modality dominates training (see [`GradTrace`]). Only the distillation head is
//! training-time state; prediction never touches it.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{softmax_slice, Graph, NumericsError, ParamId, ParamStore, Tensor, Var, PROB_EPS};

/// Label order used throughout: index 0 is deceptive, index 1 truthful.
pub const NUM_CLASSES: usize = 2;

/// Tolerance for a probability vector to count as normalized.
pub const DIST_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DmcError {
    #[error("malformed distribution {0:?}")]
    Malformed(Vec<f64>),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Video, Modality::Audio];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Video => "v",
            Modality::Audio => "a",
        }
    }
}

/// Distribution over `{deceptive, truthful}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbDist {
    probs: [f64; NUM_CLASSES],
}

impl ProbDist {
    pub fn new(probs: [f64; NUM_CLASSES]) -> Result<Self, DmcError> {
        let ok = probs.iter().all(|p| p.is_finite() && *p >= 0.0 && *p <= 1.0)
            && (probs.iter().sum::<f64>() - 1.0).abs() <= DIST_SUM_TOL;
        if ok {
            Ok(Self { probs })
        } else {
            Err(DmcError::Malformed(probs.to_vec()))
        }
    }

    pub fn from_logits(z: [f64; NUM_CLASSES]) -> Self {
        let p = softmax_slice(&z);
        Self { probs: [p[0], p[1]] }
    }

    pub fn uniform() -> Self {
        Self { probs: [0.5, 0.5] }
    }

    pub fn probs(&self) -> [f64; NUM_CLASSES] {
        self.probs
    }

    /// Index of the most likely class; ties go to index 0.
    pub fn argmax(&self) -> usize {
        if self.probs[1] > self.probs[0] {
            1
        } else {
            0
        }
    }

    fn from_var(g: &Graph, v: Var) -> Self {
        let d = g.value(v).data();
        Self { probs: [d[0], d[1]] }
    }
}

/// `Σ_y q(y)·ln((q(y)+ε)/(p(y)+ε))`, `ε = 1e-12`.
pub fn kl_div(q: &ProbDist, p: &ProbDist) -> Result<f64, DmcError> {
    let q = ProbDist::new(q.probs)?;
    let p = ProbDist::new(p.probs)?;
    Ok(q.probs
        .iter()
        .zip(&p.probs)
        .map(|(&qi, &pi)| qi * ((qi + PROB_EPS) / (pi + PROB_EPS)).ln())
        .sum())
}

/// `KL(q ‖ p_v) + KL(q ‖ p_a)`.
pub fn distill_loss(q: &ProbDist, p_v: &ProbDist, p_a: &ProbDist) -> Result<f64, DmcError> {
    Ok(kl_div(q, p_v)? + kl_div(q, p_a)?)
}

/// Two-layer tanh map from a pooled modality vector to the shared latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectorParams {
    pub p1: ParamId,
    pub c1: ParamId,
    pub p2: ParamId,
    pub c2: ParamId,
}

impl ProjectorParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, latent: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            p1: store.add_uniform(format!("{prefix}.p1"), &[latent, input], fan_in(input), &mut rng),
            c1: store.add_zeros(format!("{prefix}.c1"), &[latent]),
            p2: store.add_uniform(format!("{prefix}.p2"), &[latent, latent], fan_in(latent), &mut rng),
            c2: store.add_zeros(format!("{prefix}.c2"), &[latent]),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.p1, self.c1, self.p2, self.c2]
    }

    /// `P2·tanh(P1·pooled + c1) + c2`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<Var, DmcError> {
        let p1 = g.param(store, self.p1);
        let c1 = g.param(store, self.c1);
        let p2 = g.param(store, self.p2);
        let c2 = g.param(store, self.c2);
        let h = g.matmul(p1, pooled)?;
        let h = g.add(h, c1)?;
        let h = g.tanh(h)?;
        let z = g.matmul(p2, h)?;
        Ok(g.add(z, c2)?)
    }
}

/// Shared head mapping a latent vector to two logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistillHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl DistillHead {
    pub fn init(store: &mut ParamStore, prefix: &str, latent: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w: store.add_uniform(format!("{prefix}.w"), &[NUM_CLASSES, latent], fan_in(latent), &mut rng),
            b: store.add_zeros(format!("{prefix}.b"), &[NUM_CLASSES]),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, latent: Var) -> Result<Var, DmcError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let z = g.matmul(w, latent)?;
        Ok(g.add(z, b)?)
    }
}

/// Linear head over the concatenated modality latents `[z_v ‖ z_a]`, stored
/// as its two column blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusedHead {
    pub w_v: ParamId,
    pub w_a: ParamId,
    pub b: ParamId,
}

impl FusedHead {
    pub fn init(store: &mut ParamStore, prefix: &str, latent: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = fan_in(2 * latent);
        Self {
            w_v: store.add_uniform(format!("{prefix}.w_v"), &[NUM_CLASSES, latent], bound, &mut rng),
            w_a: store.add_uniform(format!("{prefix}.w_a"), &[NUM_CLASSES, latent], bound, &mut rng),
            b: store.add_zeros(format!("{prefix}.b"), &[NUM_CLASSES]),
        }
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_v, self.w_a, self.b]
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, z_v: Var, z_a: Var) -> Result<Var, DmcError> {
        let w_v = g.param(store, self.w_v);
        let w_a = g.param(store, self.w_a);
        let b = g.param(store, self.b);
        let lv = g.matmul(w_v, z_v)?;
        let la = g.matmul(w_a, z_a)?;
        let l = g.add(lv, la)?;
        Ok(g.add(l, b)?)
    }
}

fn fan_in(n: usize) -> f64 {
    1.0 / (n as f64).sqrt()
}

/// Pool, project, shared head, softmax. Returns the probability node.
pub fn modality_predict_graph(
    g: &mut Graph,
    store: &ParamStore,
    proj: &ProjectorParams,
    head: &DistillHead,
    h_m: Var,
) -> Result<Var, DmcError> {
    let pooled = g.mean_rows(h_m)?;
    let z = proj.apply(g, store, pooled)?;
    student_from_latent(g, store, head, z)
}

/// Shared head and softmax over an already projected latent.
pub fn student_from_latent(g: &mut Graph, store: &ParamStore, head: &DistillHead, z: Var) -> Result<Var, DmcError> {
    let logits = head.logits(g, store, z)?;
    Ok(g.softmax(logits)?)
}

pub fn modality_predict(
    h_m: &Tensor,
    store: &ParamStore,
    proj: &ProjectorParams,
    head: &DistillHead,
) -> Result<ProbDist, DmcError> {
    let mut g = Graph::new();
    let x = g.input(h_m.clone());
    let p = modality_predict_graph(&mut g, store, proj, head, x)?;
    Ok(ProbDist::from_var(&g, p))
}

/// Teacher distribution for a pair of sequences: softmax of the fused head over the
/// projected, pooled modalities.
pub fn teacher_predict(
    h_v: &Tensor,
    h_a: &Tensor,
    store: &ParamStore,
    proj_v: &ProjectorParams,
    proj_a: &ProjectorParams,
    teacher: &FusedHead,
) -> Result<ProbDist, DmcError> {
    let mut g = Graph::new();
    let xv = g.input(h_v.clone());
    let xa = g.input(h_a.clone());
    let pv = g.mean_rows(xv)?;
    let pa = g.mean_rows(xa)?;
    let zv = proj_v.apply(&mut g, store, pv)?;
    let za = proj_a.apply(&mut g, store, pa)?;
    let logits = teacher.logits(&mut g, store, zv, za)?;
    let q = teacher_distribution(&mut g, logits)?;
    Ok(ProbDist::from_var(&g, q))
}

/// Softmax of fused logits, detached so no distillation gradient reaches the teacher.
pub fn teacher_distribution(g: &mut Graph, logits: Var) -> Result<Var, DmcError> {
    let q = g.softmax(logits)?;
    Ok(g.detach(q))
}

/// `KL(q ‖ p_v) + KL(q ‖ p_a)` on the graph.
pub fn distill_loss_graph(g: &mut Graph, q: Var, p_v: Var, p_a: Var) -> Result<Var, DmcError> {
    let kv = g.kl_div(q, p_v)?;
    let ka = g.kl_div(q, p_a)?;
    Ok(g.add(kv, ka)?)
}

/// Projector gradient norms for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradTrace {
    pub step: usize,
    pub norm_v: f64,
    pub norm_a: f64,
    /// `norm_v / norm_a`; absent when `norm_a == 0`.
    pub ratio: Option<f64>,
}

impl GradTrace {
    pub fn new(step: usize, norm_v: f64, norm_a: f64) -> Self {
        Self {
            step,
            norm_v,
            norm_a,
            ratio: grad_ratio(norm_v, norm_a),
        }
    }

    /// Reads the projector gradient norms currently accumulated in `store`.
    pub fn from_store(step: usize, store: &ParamStore, proj_v: &ProjectorParams, proj_a: &ProjectorParams) -> Self {
        Self::new(step, store.grad_norm(&proj_v.ids()), store.grad_norm(&proj_a.ids()))
    }
}

/// `r = norm_v / norm_a`. `r > 1` means the video projector receives more gradient.
pub fn grad_ratio(norm_v: f64, norm_a: f64) -> Option<f64> {
    (norm_a > 0.0 && norm_v.is_finite()).then(|| norm_v / norm_a)
}

/// Mean of `|ln r|` over the last `window` steps with a defined, positive ratio.
pub fn balance_statistic(trace: &[GradTrace], window: usize) -> Option<f64> {
    let start = trace.len().saturating_sub(window);
    let logs: Vec<f64> = trace[start..]
        .iter()
        .filter_map(|t| t.ratio)
        .filter(|r| *r > 0.0)
        .map(|r| r.ln().abs())
        .collect();
    (!logs.is_empty()).then(|| logs.iter().sum::<f64>() / logs.len() as f64)
}

/// Writes `step,norm_v,norm_a,ratio` rows; an undefined ratio is an empty cell.
pub fn write_grad_trace_csv<W: Write>(out: W, trace: &[GradTrace]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "norm_v", "norm_a", "ratio"])?;
    for t in trace {
        w.write_record([
            t.step.to_string(),
            t.norm_v.to_string(),
            t.norm_a.to_string(),
            t.ratio.map(|r| r.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

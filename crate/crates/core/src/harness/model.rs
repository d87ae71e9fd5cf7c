use serde::{Deserialize, Serialize};

use super::{HarnessError, Sample};
use crate::dmc::{
    distill_loss_graph, student_from_latent, teacher_distribution, DistillHead, FusedHead, Modality, ProbDist,
    ProjectorParams,
};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::sics::{sics_apply, stability_penalty, SicsConfig, SicsParams, SicsVars, DEFAULT_LAMBDA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_a: usize,
    /// Shared projector latent width.
    pub latent: usize,
    /// Adapter hidden width; `None` uses the modality width.
    pub sics_hidden: Option<usize>,
    pub lambda: f64,
    pub use_sics: bool,
    /// Build the distillation head. Training only uses it when DMC is enabled.
    pub distill_head: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 8,
            d_a: 8,
            latent: 8,
            sics_hidden: None,
            lambda: DEFAULT_LAMBDA,
            use_sics: true,
            distill_head: true,
            seed: 0,
        }
    }
}

/// Components draw from independent streams so adding or dropping one never
/// changes another's initialization.
fn component_seed(seed: u64, component: u64) -> u64 {
    let mut z = seed ^ component.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fused classifier: optional adapter per modality, temporal pooling, per-modality
/// projector, linear fused head. The distillation head hangs off the projector
/// outputs and is only used for the consistency loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub store: ParamStore,
    pub config: ModelConfig,
    pub sics_v: Option<SicsParams>,
    pub sics_a: Option<SicsParams>,
    pub proj_v: ProjectorParams,
    pub proj_a: ProjectorParams,
    pub fused: FusedHead,
    pub distill: Option<DistillHead>,
}

/// Graph handles for one sample.
#[derive(Clone, Debug)]
pub struct SampleVars {
    pub sics_v: Option<SicsVars>,
    pub sics_a: Option<SicsVars>,
    pub latent_v: Var,
    pub latent_a: Var,
    pub logits: Var,
    pub rep_loss: Var,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, HarnessError> {
        if config.d_v == 0 || config.d_a == 0 || config.latent == 0 {
            return Err(HarnessError::Config("model widths must be positive".into()));
        }
        let mut store = ParamStore::new();
        let seed = config.seed;
        let sics = |store: &mut ParamStore, d: usize, name: &str, k: u64| -> Result<SicsParams, HarnessError> {
            let cfg = SicsConfig {
                d,
                hidden: config.sics_hidden.unwrap_or(d),
                lambda: config.lambda,
                seed: component_seed(seed, k),
                stability_weight: 0.0,
            };
            Ok(SicsParams::init(store, name, &cfg)?)
        };
        let sics_v = config
            .use_sics
            .then(|| sics(&mut store, config.d_v, "sics_v", 1))
            .transpose()?;
        let sics_a = config
            .use_sics
            .then(|| sics(&mut store, config.d_a, "sics_a", 2))
            .transpose()?;
        let proj_v = ProjectorParams::init(&mut store, "proj_v", config.d_v, config.latent, component_seed(seed, 3));
        let proj_a = ProjectorParams::init(&mut store, "proj_a", config.d_a, config.latent, component_seed(seed, 4));
        let fused = FusedHead::init(&mut store, "fused", config.latent, component_seed(seed, 5));
        let distill = config
            .distill_head
            .then(|| DistillHead::init(&mut store, "distill", config.latent, component_seed(seed, 6)));
        Ok(Self {
            store,
            config,
            sics_v,
            sics_a,
            proj_v,
            proj_a,
            fused,
            distill,
        })
    }

    pub fn projector(&self, m: Modality) -> &ProjectorParams {
        match m {
            Modality::Video => &self.proj_v,
            Modality::Audio => &self.proj_a,
        }
    }

    pub fn sics(&self, m: Modality) -> Option<&SicsParams> {
        match m {
            Modality::Video => self.sics_v.as_ref(),
            Modality::Audio => self.sics_a.as_ref(),
        }
    }

    /// Fused prediction path for one sample, including its cross-entropy.
    pub fn forward_sample(&self, g: &mut Graph, store: &ParamStore, sample: &Sample) -> Result<SampleVars, HarnessError> {
        let mut branch = |m: Modality| -> Result<(Option<SicsVars>, Var), HarnessError> {
            let x = g.input(sample.modality(m).clone());
            let (vars, tokens) = match self.sics(m) {
                Some(p) => {
                    let v = sics_apply(g, store, p, self.config.lambda, x)?;
                    (Some(v), v.output)
                }
                None => (None, x),
            };
            let pooled = g.mean_rows(tokens)?;
            let z = self.projector(m).apply(g, store, pooled)?;
            Ok((vars, z))
        };
        let (sics_v, latent_v) = branch(Modality::Video)?;
        let (sics_a, latent_a) = branch(Modality::Audio)?;
        let logits = self.fused.logits(g, store, latent_v, latent_a)?;
        let rep_loss = g.cross_entropy(logits, sample.label.index())?;
        Ok(SampleVars {
            sics_v,
            sics_a,
            latent_v,
            latent_a,
            logits,
            rep_loss,
        })
    }

    /// `KL(q ‖ p_v) + KL(q ‖ p_a)` for a sample whose fused path is already on `g`.
    pub fn distill_term(&self, g: &mut Graph, store: &ParamStore, vars: &SampleVars) -> Result<Var, HarnessError> {
        self.distill_term_with(g, store, vars, None)
    }

    /// As [`Model::distill_term`], optionally with the teacher distribution pinned to
    /// given values instead of read off the fused logits.
    ///
    /// Pinning makes the stop-gradient an actual constant, which is what a
    /// finite-difference check of the objective needs.
    pub fn distill_term_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vars: &SampleVars,
        teacher: Option<&Tensor>,
    ) -> Result<Var, HarnessError> {
        let head = self
            .distill
            .as_ref()
            .ok_or_else(|| HarnessError::Config("model was built without a distillation head".into()))?;
        let q = match teacher {
            Some(q) => g.input(q.clone()),
            None => teacher_distribution(g, vars.logits)?,
        };
        let p_v = student_from_latent(g, store, head, vars.latent_v)?;
        let p_a = student_from_latent(g, store, head, vars.latent_a)?;
        Ok(distill_loss_graph(g, q, p_v, p_a)?)
    }

    /// Sum of `‖Δz‖²` over the adapters applied to this sample.
    pub fn stability_term(&self, g: &mut Graph, vars: &SampleVars) -> Result<Option<Var>, HarnessError> {
        let terms = [vars.sics_v, vars.sics_a]
            .into_iter()
            .flatten()
            .map(|v| stability_penalty(g, &v))
            .collect::<Result<Vec<_>, _>>()?;
        let mut iter = terms.into_iter();
        let Some(first) = iter.next() else { return Ok(None) };
        let mut acc = first;
        for t in iter {
            acc = g.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    /// Softmax of the fused logits, the values the teacher takes for this sample.
    pub fn teacher_values(&self, store: &ParamStore, sample: &Sample) -> Result<Tensor, HarnessError> {
        let mut g = Graph::new();
        let vars = self.forward_sample(&mut g, store, sample)?;
        let q = g.softmax(vars.logits)?;
        Ok(g.value(q).clone())
    }

    /// Fused-head distribution. Never touches the distillation head.
    pub fn predict(&self, sample: &Sample) -> Result<ProbDist, HarnessError> {
        let mut g = Graph::new();
        let vars = self.forward_sample(&mut g, &self.store, sample)?;
        let z = g.value(vars.logits).data();
        Ok(ProbDist::from_logits([z[0], z[1]]))
    }

    /// Copy without the distillation head, the form used for deployment.
    pub fn without_distillation(&self) -> Result<Self, HarnessError> {
        let config = ModelConfig {
            distill_head: false,
            ..self.config.clone()
        };
        let mut stripped = Self::new(config)?;
        stripped.store.load_values(&self.store)?;
        Ok(stripped)
    }

    /// Prediction-path parameters, excluding the distillation head.
    pub fn prediction_params(&self) -> Vec<ParamId> {
        let head: Vec<ParamId> = self.distill.map(|h| h.ids().to_vec()).unwrap_or_default();
        self.store.ids().filter(|id| !head.contains(id)).collect()
    }

    /// Adapter outputs for a sequence, or `None` when this modality has no adapter.
    pub fn refine(&self, m: Modality, x: &Tensor) -> Result<Option<Tensor>, HarnessError> {
        let Some(p) = self.sics(m) else { return Ok(None) };
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let vars = sics_apply(&mut g, &self.store, p, self.config.lambda, xv)?;
        Ok(Some(g.value(vars.output).clone()))
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter holding a gradient; parameters without one are left alone.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(grad) = store.get(id).grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let decay = 1.0 - self.lr * self.weight_decay;
            for (i, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p = *p * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_are_independent_of_each_other() {
        let full = Model::new(ModelConfig::default()).unwrap();
        let bare = Model::new(ModelConfig {
            use_sics: false,
            distill_head: false,
            ..Default::default()
        })
        .unwrap();
        for id in bare.store.ids() {
            let name = bare.store.name(id);
            let other = full.store.get(full.store.find(name).unwrap());
            assert_eq!(bare.store.get(id), other, "{name}");
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, -1.0]).unwrap());
        store.get_mut(p).accumulate_grad(&[0.5, -2.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store);
        let d = store.get(p).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_skips_parameters_without_gradients() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut store);
        assert_eq!(store.get(p).data(), &[1.0]);
    }

    #[test]
    fn stripping_the_head_keeps_predictions() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let stripped = model.without_distillation().unwrap();
        assert!(stripped.distill.is_none());
        let sample = Sample {
            video: Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 / 10.0).collect()).unwrap(),
            audio: Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64).sin()).collect()).unwrap(),
            label: crate::Label::Truthful,
        };
        assert_eq!(model.predict(&sample).unwrap(), stripped.predict(&sample).unwrap());
    }
}

//! Plain scalar-loop references for the adapter and the distillation heads.
#![allow(dead_code, clippy::needless_range_loop)]

use decepkit::dmc::{DistillHead, FusedHead, ProjectorParams};
use decepkit::numerics::ParamStore;
use decepkit::sics::{SicsConfig, SicsParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Row-major `rows×cols` matrix times vector, one multiply-add at a time.
pub fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        let mut acc = 0.0;
        for j in 0..cols {
            acc += m[i * cols + j] * v[j];
        }
        out[i] = acc;
    }
    out
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub struct SicsRef {
    d: usize,
    h: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w_g: Vec<f64>,
    b_g: f64,
    b_global: Vec<f64>,
    w_plus: Vec<f64>,
    b_plus: Vec<f64>,
    w_minus: Vec<f64>,
    b_minus: Vec<f64>,
}

impl SicsRef {
    pub fn read(store: &ParamStore, p: &SicsParams, d: usize, h: usize) -> Self {
        let v = |id| store.get(id).data().to_vec();
        Self {
            d,
            h,
            w1: v(p.w1),
            b1: v(p.b1),
            w2: v(p.w2),
            b2: v(p.b2),
            w_g: v(p.w_g),
            b_g: store.get(p.b_g).data()[0],
            b_global: v(p.b_global),
            w_plus: v(p.w_plus),
            b_plus: v(p.b_plus),
            w_minus: v(p.w_minus),
            b_minus: v(p.b_minus),
        }
    }

    pub fn residual(&self, c: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = matvec(&self.w1, self.h, self.d, c)
            .iter()
            .zip(&self.b1)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        matvec(&self.w2, self.d, self.h, &hidden)
            .iter()
            .zip(&self.b2)
            .map(|(a, b)| a + b)
            .collect()
    }

    pub fn gate(&self, dz: &[f64]) -> (Vec<f64>, f64) {
        let mut logit = self.b_g;
        for j in 0..self.d {
            logit += self.w_g[j] * dz[j];
        }
        let g = 1.0 / (1.0 + (-logit).exp());
        let w = (0..self.d)
            .map(|j| (g * self.b_global[j] + (1.0 - g) * dz[j]).tanh())
            .collect();
        (w, g)
    }

    pub fn forward(&self, x: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
        let l = x.len();
        let mut c = vec![0.0; self.d];
        for row in x {
            for j in 0..self.d {
                c[j] += row[j];
            }
        }
        c.iter_mut().for_each(|v| *v /= l as f64);
        let dz = self.residual(&c);
        let (w, _) = self.gate(&dz);
        let wp: Vec<f64> = matvec(&self.w_plus, self.d, self.d, &w)
            .iter()
            .zip(&self.b_plus)
            .map(|(a, b)| a + b)
            .collect();
        let wm: Vec<f64> = matvec(&self.w_minus, self.d, self.d, &w)
            .iter()
            .zip(&self.b_minus)
            .map(|(a, b)| a + b)
            .collect();
        x.iter()
            .map(|row| {
                (0..self.d)
                    .map(|j| {
                        let refined = row[j] * relu(wp[j]) - row[j] * relu(wm[j]);
                        lambda * refined + (1.0 - lambda) * row[j]
                    })
                    .collect()
            })
            .collect()
    }
}

/// Adapter with every tensor randomized, including biases and the global prior.
pub fn random_sics(rng: &mut ChaCha8Rng, d: usize, h: usize) -> (ParamStore, SicsParams, SicsConfig) {
    let mut cfg = SicsConfig::new(d);
    cfg.hidden = h;
    cfg.seed = rng.random();
    let mut store = ParamStore::new();
    let p = SicsParams::init(&mut store, "sics", &cfg).unwrap();
    for id in p.ids() {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    (store, p, cfg)
}

pub fn random_rows(rng: &mut ChaCha8Rng, l: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..l)
        .map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

/// Projector weights `(p1, c1, p2, c2)` and input width.
type Projector = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, usize);

pub struct DmcRef {
    p: usize,
    proj: Vec<Projector>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    t_wv: Vec<f64>,
    t_wa: Vec<f64>,
    t_b: Vec<f64>,
}

impl DmcRef {
    /// Copies both projectors, the shared head and the fused head out of `s`.
    pub fn read(
        s: &ParamStore,
        pv: &ProjectorParams,
        pa: &ProjectorParams,
        head: &DistillHead,
        teacher: &FusedHead,
        (dv, da, p): (usize, usize, usize),
    ) -> Self {
        let v = |id| s.get(id).data().to_vec();
        Self {
            p,
            proj: vec![
                (v(pv.p1), v(pv.c1), v(pv.p2), v(pv.c2), dv),
                (v(pa.p1), v(pa.c1), v(pa.p2), v(pa.c2), da),
            ],
            head_w: v(head.w),
            head_b: v(head.b),
            t_wv: v(teacher.w_v),
            t_wa: v(teacher.w_a),
            t_b: v(teacher.b),
        }
    }

    pub fn latent(&self, m: usize, x: &[Vec<f64>]) -> Vec<f64> {
        let (p1, c1, p2, c2, d) = &self.proj[m];
        let mut pooled = vec![0.0; *d];
        for row in x {
            for j in 0..*d {
                pooled[j] += row[j];
            }
        }
        pooled.iter_mut().for_each(|v| *v /= x.len() as f64);
        let h: Vec<f64> = matvec(p1, self.p, *d, &pooled)
            .iter()
            .zip(c1)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        matvec(p2, self.p, self.p, &h).iter().zip(c2).map(|(a, b)| a + b).collect()
    }

    pub fn softmax2(z0: f64, z1: f64) -> [f64; 2] {
        let m = z0.max(z1);
        let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
        [e0 / (e0 + e1), e1 / (e0 + e1)]
    }

    pub fn student(&self, m: usize, x: &[Vec<f64>]) -> [f64; 2] {
        let z = self.latent(m, x);
        let l = matvec(&self.head_w, 2, self.p, &z);
        Self::softmax2(l[0] + self.head_b[0], l[1] + self.head_b[1])
    }

    pub fn teacher(&self, xv: &[Vec<f64>], xa: &[Vec<f64>]) -> [f64; 2] {
        let lv = matvec(&self.t_wv, 2, self.p, &self.latent(0, xv));
        let la = matvec(&self.t_wa, 2, self.p, &self.latent(1, xa));
        Self::softmax2(lv[0] + la[0] + self.t_b[0], lv[1] + la[1] + self.t_b[1])
    }

    pub fn kl(q: [f64; 2], p: [f64; 2]) -> f64 {
        let eps = 1e-12;
        let mut s = 0.0;
        for y in 0..2 {
            s += q[y] * ((q[y] + eps) / (p[y] + eps)).ln();
        }
        s
    }
}


use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dmc::Modality;
use crate::numerics::Tensor;
use crate::Label;

/// Recipe for class-conditional Gaussian token sequences.
///
/// Each modality has a fixed unit direction `μ_m`. A deceptive sample's tokens are
/// `+snr_m·μ_m + noise`, a truthful sample's `−snr_m·μ_m + noise`, with unit normal
/// noise. On a `spike_frac` share of each modality's dimensions the noise is
/// multiplied by `spike_gain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub l_v: usize,
    pub l_a: usize,
    pub snr_v: f64,
    pub snr_a: f64,
    pub spike_frac: f64,
    pub spike_gain: f64,
    /// Fraction of deceptive samples.
    pub class_balance: f64,
    /// Reuse the video direction and spike dimensions for audio (needs `d_v == d_a`).
    pub mirrored: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 256,
            d_v: 8,
            d_a: 8,
            l_v: 4,
            l_a: 4,
            snr_v: 1.0,
            snr_a: 0.25,
            spike_frac: 0.0,
            spike_gain: 1.0,
            class_balance: 0.5,
            mirrored: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.d_v == 0 || self.d_a == 0 || self.l_v == 0 || self.l_a == 0 {
            return bad("modality widths and lengths must be positive".into());
        }
        if !(self.snr_v >= 0.0 && self.snr_a >= 0.0 && self.snr_v.is_finite() && self.snr_a.is_finite()) {
            return bad(format!("snr must be non-negative (v={}, a={})", self.snr_v, self.snr_a));
        }
        if !(0.0..=1.0).contains(&self.spike_frac) {
            return bad(format!("spike_frac must lie in [0, 1], got {}", self.spike_frac));
        }
        if !(self.spike_gain > 0.0 && self.spike_gain.is_finite()) {
            return bad(format!("spike_gain must be positive, got {}", self.spike_gain));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return bad(format!("class_balance must lie in (0, 1), got {}", self.class_balance));
        }
        if self.mirrored && self.d_v != self.d_a {
            return bad("mirrored data needs d_v == d_a".into());
        }
        Ok(())
    }

    pub fn width(&self, m: Modality) -> usize {
        match m {
            Modality::Video => self.d_v,
            Modality::Audio => self.d_a,
        }
    }

    /// `ceil(spike_frac·d)` dimensions are spiked.
    pub fn spike_count(&self, d: usize) -> usize {
        ((self.spike_frac * d as f64).ceil() as usize).min(d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video: Tensor,
    pub audio: Tensor,
    pub label: Label,
}

impl Sample {
    pub fn modality(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub spike_dims_v: Vec<usize>,
    pub spike_dims_a: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn spike_dims(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Video => &self.spike_dims_v,
            Modality::Audio => &self.spike_dims_a,
        }
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn spike_dims(rng: &mut ChaCha8Rng, d: usize, count: usize) -> Vec<usize> {
    let mut dims: Vec<usize> = (0..d).collect();
    dims.shuffle(rng);
    let mut picked = dims[..count].to_vec();
    picked.sort_unstable();
    picked
}

fn tokens(
    rng: &mut ChaCha8Rng,
    len: usize,
    direction: &[f64],
    signal: f64,
    spikes: &[usize],
    gain: f64,
) -> Result<Tensor, HarnessError> {
    let d = direction.len();
    let mut data = Vec::with_capacity(len * d);
    for _ in 0..len {
        for (j, mu) in direction.iter().enumerate() {
            let mut noise: f64 = rng.sample(StandardNormal);
            if spikes.contains(&j) {
                noise *= gain;
            }
            data.push(signal * mu + noise);
        }
    }
    Ok(Tensor::new(vec![len, d], data)?)
}

/// Deterministic under `spec.seed`. Exactly `round(n·class_balance)` samples are
/// deceptive, in shuffled order.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dir_v = unit_direction(&mut rng, spec.d_v);
    let spikes_v = spike_dims(&mut rng, spec.d_v, spec.spike_count(spec.d_v));
    let (dir_a, spikes_a) = if spec.mirrored {
        (dir_v.clone(), spikes_v.clone())
    } else {
        let dir = unit_direction(&mut rng, spec.d_a);
        let spikes = spike_dims(&mut rng, spec.d_a, spec.spike_count(spec.d_a));
        (dir, spikes)
    };

    let n_deceptive = ((spec.n_samples as f64 * spec.class_balance).round() as usize).min(spec.n_samples);
    let mut labels: Vec<Label> = (0..spec.n_samples)
        .map(|i| if i < n_deceptive { Label::Deceptive } else { Label::Truthful })
        .collect();
    labels.shuffle(&mut rng);

    let samples = labels
        .into_iter()
        .map(|label| {
            let sign = if label == Label::Deceptive { 1.0 } else { -1.0 };
            let video = tokens(&mut rng, spec.l_v, &dir_v, sign * spec.snr_v, &spikes_v, spec.spike_gain)?;
            let audio = tokens(&mut rng, spec.l_a, &dir_a, sign * spec.snr_a, &spikes_a, spec.spike_gain)?;
            Ok(Sample { video, audio, label })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    Ok(Dataset {
        samples,
        spike_dims_v: spikes_v,
        spike_dims_a: spikes_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticSpec::default();
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(gen_synthetic(&spec).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let zero = SyntheticSpec {
            n_samples: 0,
            ..Default::default()
        };
        assert!(matches!(gen_synthetic(&zero), Err(HarnessError::Config(_))));
        for bad in [
            SyntheticSpec { snr_v: -1.0, ..Default::default() },
            SyntheticSpec { spike_frac: 1.5, ..Default::default() },
            SyntheticSpec { class_balance: 1.0, ..Default::default() },
            SyntheticSpec { mirrored: true, d_a: 3, ..Default::default() },
        ] {
            assert!(gen_synthetic(&bad).is_err());
        }
    }

    #[test]
    fn shapes_balance_and_spikes() {
        let spec = SyntheticSpec {
            n_samples: 30,
            d_v: 20,
            d_a: 10,
            l_v: 3,
            l_a: 5,
            spike_frac: 0.05,
            class_balance: 2.0 / 3.0,
            ..Default::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        assert_eq!(data.len(), 30);
        assert_eq!(data.samples.iter().filter(|s| s.label == Label::Deceptive).count(), 20);
        assert_eq!(data.samples[0].video.shape(), &[3, 20]);
        assert_eq!(data.samples[0].audio.shape(), &[5, 10]);
        assert_eq!(data.spike_dims_v.len(), 1);
        assert_eq!(data.spike_dims_a.len(), 1);
    }

    #[test]
    fn mirrored_shares_direction() {
        let spec = SyntheticSpec {
            mirrored: true,
            snr_a: 0.4,
            spike_frac: 0.25,
            ..Default::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        assert_eq!(data.spike_dims_v, data.spike_dims_a);
    }
}

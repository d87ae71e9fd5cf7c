use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, gradient-tracked learnable tensors.
///
/// Registration order is stable and defines [`ParamId`]s; the checkpoint format
/// is keyed by name so it does not depend on that order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct SavedTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `tensor` under `name`. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        tensor.set_requires_grad(true);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a `shape` tensor with entries uniform in `±bound`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Gradient of `id`, or zeros when nothing has been accumulated yet.
    pub fn grad_or_zeros(&self, id: ParamId) -> Vec<f64> {
        let t = self.get(id);
        t.grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }

    /// Frobenius norm of the accumulated gradients of `ids` taken together.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.get(id).grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Flat JSON object `{name: {"shape": [...], "values": [...]}}`, keys sorted.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, SavedTensor> = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                (
                    n.as_str(),
                    SavedTensor {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("parameter map serializes")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("parameter map serializes")
    }

    /// Rebuilds a store from [`ParamStore::to_json`] output. Parameters come back
    /// in sorted-name order.
    pub fn from_json(value: &serde_json::Value) -> Result<Self, NumericsError> {
        let map: BTreeMap<String, SavedTensor> = serde_json::from_value(value.clone())
            .map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
        let mut store = Self::new();
        for (name, saved) in map {
            let t = Tensor::new(saved.shape, saved.values)
                .map_err(|e| NumericsError::Checkpoint(format!("{name}: {e}")))?;
            store.add(name, t);
        }
        Ok(store)
    }

    /// Overwrites values of same-named parameters from a checkpoint, checking shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), NumericsError> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .find(name)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing parameter {name}")))?;
            let src = other.get(src);
            let dst = &mut self.tensors[i];
            if src.shape() != dst.shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "{name}: shape {:?} != {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn find_and_names() {
        let mut s = ParamStore::new();
        let a = s.add_zeros("a", &[2]);
        let b = s.add_zeros("b", &[1, 3]);
        assert_eq!(s.find("b"), Some(b));
        assert_eq!(s.name(a), "a");
        assert!(s.get(a).requires_grad());
    }

    #[test]
    fn grad_norm_spans_all_tensors() {
        let mut s = ParamStore::new();
        let a = s.add_zeros("a", &[2]);
        let b = s.add_zeros("b", &[1]);
        s.get_mut(a).accumulate_grad(&[3.0, 0.0]);
        s.get_mut(b).accumulate_grad(&[4.0]);
        assert_eq!(s.grad_norm(&[a, b]), 5.0);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), scale in 1e-300f64..1e300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ParamStore::new();
            s.add_uniform("w", &[3, 4], 1.0, &mut rng);
            let b = s.add_uniform("b", &[5], 1.0, &mut rng);
            s.get_mut(b).data_mut().iter_mut().for_each(|v| *v *= scale);
            let text = s.to_json_string();
            let back = ParamStore::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
            for (_, name, t) in s.iter() {
                let u = back.get(back.find(name).unwrap());
                prop_assert_eq!(t.shape(), u.shape());
                let lhs: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
                let rhs: Vec<u64> = u.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(lhs, rhs);
            }
        }
    }
}

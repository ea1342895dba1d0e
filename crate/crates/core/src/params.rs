//! Named parameter tensors shared by the encoder, its heads and the probe.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse grouping used by the parameter census.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Subsampler,
    GlobalBranch,
    Cgmlp,
    Merge,
    Ffn,
    ConvModule,
    Norms,
    Heads,
    Probe,
}

impl Component {
    pub const ALL: [Component; 9] = [
        Component::Subsampler,
        Component::GlobalBranch,
        Component::Cgmlp,
        Component::Merge,
        Component::Ffn,
        Component::ConvModule,
        Component::Norms,
        Component::Heads,
        Component::Probe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Subsampler => "subsampler",
            Component::GlobalBranch => "global_branch",
            Component::Cgmlp => "cgmlp",
            Component::Merge => "merge",
            Component::Ffn => "ffn",
            Component::ConvModule => "conv_module",
            Component::Norms => "norms",
            Component::Heads => "heads",
            Component::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub component: Component,
    pub value: Array2<F>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, component: Component, value: Array2<F>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            component,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<F>> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn scalars_by_component(&self) -> BTreeMap<Component, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            *out.entry(p.component).or_insert(0) += p.value.len();
        }
        out
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    component: p.component,
                    value: p.value.mapv(|v| G::of(v.as_f64())),
                })
                .collect(),
        }
    }

    /// Digest over names, shapes and exact bit patterns of every value.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.value.dim().hash(&mut h);
            for v in p.value.iter() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Bit-exact equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore<F>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.dim() == b.value.dim()
                    && a.value
                        .iter()
                        .zip(b.value.iter())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Seeded initializers. Values are drawn in f64 and rounded to `F`, so an
/// f32 store and an f64 store built from the same seed agree to rounding.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn xavier_uniform<F: Scalar>(&mut self, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<F> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| F::of(self.rng.random_range(-a..=a)))
    }

    pub fn uniform<F: Scalar>(&mut self, rows: usize, cols: usize, a: f64) -> Array2<F> {
        Array2::from_shape_fn((rows, cols), |_| F::of(self.rng.random_range(-a..=a)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn digest_tracks_single_bit_changes() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Component::Heads, Array2::ones((2, 3)));
        let before = store.digest();
        store.value_mut(id)[[1, 2]] = f32::from_bits(1.0f32.to_bits() + 1);
        assert_ne!(before, store.digest());
    }

    #[test]
    fn xavier_bound_holds() {
        let mut init = Initializer::new(seed::rng(&[1]));
        let w: Array2<f64> = init.xavier_uniform(16, 512, 512, 16);
        let a = (6.0f64 / 528.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= a));
    }
}

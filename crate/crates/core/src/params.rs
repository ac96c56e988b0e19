//! Named parameter storage.
//!
//! Model layouts are declared once against a [`ParamSink`]. Declaring into a
//! [`ParamCounter`] only sums shapes, so counting a 60M-parameter
//! configuration allocates nothing; declaring into a [`ParamStore`]
//! materializes initialized tensors.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

// shadowed by inherent methods whenever std is linked (tests)
#[allow(unused_imports)]
use num_traits::Float;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::numerics::{Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Initialization rule for a declared parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// `U[-bound, bound)`.
    Uniform(f64),
    /// `ln(h + 1)` along the last axis, so `A = -exp(·) = -(h + 1)`.
    StateDecay,
    /// Inverse softplus of step sizes drawn log-uniformly from `[min, max]`.
    StepBias {
        min: f64,
        max: f64,
    },
}

/// Fan-in scaled uniform initialization, `U[-1/√fan_in, 1/√fan_in)`.
pub fn fan_in(n: usize) -> Init {
    Init::Uniform(1.0 / (n.max(1) as f64).sqrt())
}

pub trait ParamSink {
    fn declare(&mut self, name: String, shape: &[usize], init: Init) -> ParamId;
}

/// Counts declared scalars without allocating tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamCounter {
    pub scalars: usize,
    pub tensors: usize,
}

impl ParamSink for ParamCounter {
    fn declare(&mut self, _: String, shape: &[usize], _: Init) -> ParamId {
        self.scalars += shape.iter().product::<usize>();
        self.tensors += 1;
        ParamId(self.tensors - 1)
    }
}

/// Owned, named, initialized parameters.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let Some(&i) = self.index.get(name) else {
            return Err(invalid("ParamStore::set", alloc::format!("unknown parameter {name}")));
        };
        if self.tensors[i].shape() != value.shape() {
            return Err(invalid(
                "ParamStore::set",
                alloc::format!("{name}: expected shape {:?}, got {:?}", self.tensors[i].shape(), value.shape()),
            ));
        }
        self.tensors[i] = value;
        Ok(())
    }

    /// Wraps every tensor in a graph leaf.
    pub fn bind(&self, trainable: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| Var::leaf(t.clone(), trainable)).collect() }
    }

    fn sample(&mut self, shape: &[usize], init: Init) -> Tensor {
        let rng = &mut self.rng;
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Constant(v) => Tensor::full(shape, v),
            Init::Uniform(bound) => Tensor::uniform(shape, -bound, bound, rng),
            Init::StateDecay => {
                let last = shape.last().copied().unwrap_or(1).max(1);
                Tensor::from_fn(shape, |i| ((i % last) as f64 + 1.0).ln())
            }
            Init::StepBias { min, max } => Tensor::from_fn(shape, |_| {
                let dt = (rng.random_range(min.ln()..max.ln())).exp();
                // softplus⁻¹(dt) = dt + ln(1 − e^(−dt))
                dt + (-(-dt).exp_m1()).ln()
            }),
        }
    }
}

impl ParamSink for ParamStore {
    fn declare(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let tensor = self.sample(shape, init);
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }
}

/// Parameters bound into a graph for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps externally created leaves, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; parameters the loss never reached get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars.iter().map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()))).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn counter_and_store_agree() {
        let declare = |sink: &mut dyn ParamSink| {
            sink.declare("a".to_string(), &[3, 4], Init::Zeros);
            sink.declare("b".to_string(), &[5], fan_in(4));
        };
        let mut counter = ParamCounter::default();
        declare(&mut counter);
        let mut store = ParamStore::new(0);
        declare(&mut store);
        assert_eq!(counter.scalars, 17);
        assert_eq!(store.num_scalars(), 17);
        assert_eq!(store.id("b"), Some(ParamId(1)));
    }

    #[test]
    fn state_decay_gives_negative_integers() {
        let mut store = ParamStore::new(0);
        let id = store.declare("a_log".to_string(), &[2, 3], Init::StateDecay);
        let a: Vec<f64> = store.get(id).data().iter().map(|v| -v.exp()).collect();
        for (got, want) in a.iter().zip([-1.0, -2.0, -3.0, -1.0, -2.0, -3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn step_bias_inverts_softplus() {
        let mut store = ParamStore::new(7);
        let id = store.declare("dt".to_string(), &[64], Init::StepBias { min: 1e-3, max: 1e-1 });
        for &b in store.get(id).data() {
            let dt = crate::numerics::ops::softplus_scalar(b);
            assert!((1e-3..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new(0);
        store.declare("x".to_string(), &[1], Init::Zeros);
        store.declare("x".to_string(), &[1], Init::Zeros);
    }

    #[test]
    fn set_checks_shape() {
        let mut store = ParamStore::new(0);
        store.declare("x".to_string(), &[2], Init::Zeros);
        assert!(store.set("x", Tensor::ones(&[3])).is_err());
        assert!(store.set("y", Tensor::ones(&[2])).is_err());
        store.set("x", Tensor::ones(&[2])).unwrap();
    }
}

//! Named parameters and the layers built on them.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{DqError, Result};
use crate::tensor::NdTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Owns all trainable tensors by name, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<NdTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdTensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = NdTensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &NdTensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdTensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(NdTensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdTensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces the value of `name` after checking its shape.
    pub fn assign(&mut self, name: &str, value: NdTensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| DqError::Malformed(format!("unknown parameter {name:?}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(DqError::ShapeMismatch {
                expected: self.values[id.0].shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Maps parameters to their leaf nodes in one graph so that a parameter used
/// several times is a single node.
#[derive(Debug, Default)]
pub struct Binding {
    nodes: HashMap<ParamId, NodeId>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> NodeId {
        *self
            .nodes
            .entry(id)
            .or_insert_with(|| g.variable(store.get(id).clone()))
    }

    /// Gradients for every bound parameter, ordered by id.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, NdTensor)> {
        let mut out: Vec<(ParamId, NdTensor)> = self.nodes.iter().map(|(&p, &n)| (p, grads.get(n))).collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), &[out_channels], fan_in, rng);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// Same-size 3x3 convolution.
    pub fn same3<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, 3, 1, 1, rng)
    }

    /// 4x4 convolution halving the spatial extent.
    pub fn down4<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, 4, 2, 1, rng)
    }

    pub fn pointwise<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, cin, cout, 1, 1, 0, rng)
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = bind.node(g, store, self.weight);
        let b = bind.node(g, store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[outputs, inputs], inputs, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[outputs], inputs, rng);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = bind.node(g, store, self.weight);
        let b = bind.node(g, store, self.bias);
        g.linear(x, w, b)
    }
}

/// `x + conv3x3(relu(conv3x3(relu(x))))`.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl ResidualUnit {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            first: Conv2d::same3(store, &format!("{name}.conv1"), channels, channels, rng),
            second: Conv2d::same3(store, &format!("{name}.conv2"), channels, channels, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binding, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = g.relu(x);
        let h = self.first.forward(g, bind, store, h)?;
        let h = g.relu(h);
        let h = self.second.forward(g, bind, store, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tests::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let c = Conv2d::same3(&mut store, "c", 4, 8, &mut rng);
        let bound = 1.0 / 36f64.sqrt();
        assert!(store.get(c.weight).data().iter().all(|w| w.abs() <= bound));
        assert_eq!(store.get(c.weight).shape(), &[8, 4, 3, 3]);
        assert_eq!(store.name(c.bias), "c.bias");
        assert_eq!(store.num_scalars(), 8 * 4 * 9 + 8);
    }

    #[test]
    fn shared_parameter_binds_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 2, 2, &mut rng);
        let mut g = Graph::new();
        let mut bind = Binding::new();
        let x = g.constant(NdTensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let y1 = d.forward(&mut g, &mut bind, &store, x).unwrap();
        let y2 = d.forward(&mut g, &mut bind, &store, y1).unwrap();
        let l = g.sum(y2);
        let grads = g.backward(l).unwrap();
        let pg = bind.param_grads(&grads);
        assert_eq!(pg.len(), 2);
        assert_eq!(pg[0].0, d.weight);
    }

    #[test]
    fn residual_unit_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let unit = ResidualUnit::new(&mut store, "r", 2, &mut rng);
        let x = NdTensor::from_fn(&[1, 2, 4, 4], |i| ((i * 37 % 11) as f64 - 4.9) / 5.0);
        let params: Vec<NdTensor> = store.ids().map(|id| store.get(id).clone()).collect();
        let mut inputs = vec![x];
        inputs.extend(params);
        check_gradients(
            &inputs,
            &move |g, v| {
                let w1 = v[1];
                let b1 = v[2];
                let w2 = v[3];
                let b2 = v[4];
                let h = g.relu(v[0]);
                let h = g.conv2d(h, w1, b1, 1, 1).unwrap();
                let h = g.relu(h);
                let h = g.conv2d(h, w2, b2, 1, 1).unwrap();
                let y = g.add(v[0], h).unwrap();
                let s = g.square(y);
                g.mean(s)
            },
            1e-4,
        );
        // the unit itself builds the same graph
        let mut g = Graph::new();
        let mut bind = Binding::new();
        let xi = g.constant(NdTensor::from_fn(&[1, 2, 4, 4], |i| ((i * 37 % 11) as f64 - 4.9) / 5.0));
        let y = unit.forward(&mut g, &mut bind, &store, xi).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 4, 4]);
    }

    #[test]
    fn assign_checks_shape() {
        let mut store = ParamStore::new();
        store.add("a", NdTensor::zeros(&[2]));
        assert!(store.assign("a", NdTensor::zeros(&[3])).is_err());
        assert!(store.assign("b", NdTensor::zeros(&[2])).is_err());
        store.assign("a", NdTensor::full(&[2], 1.0)).unwrap();
        assert_eq!(store.get(ParamId(0)).data(), &[1.0, 1.0]);
    }
}

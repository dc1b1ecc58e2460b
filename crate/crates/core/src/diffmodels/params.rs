use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(S::zero()),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated from the pre-activation and the activation output.
    #[inline]
    pub fn derivative<S: Scalar>(self, pre: S, post: S) -> S {
        match self {
            Activation::Tanh => S::one() - post * post,
            Activation::Relu => {
                if pre > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Identity => S::one(),
        }
    }

    pub fn is_bounded(self) -> bool {
        matches!(self, Activation::Tanh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Ordered layer descriptors of a dense network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    layers: Vec<LayerSpec>,
    /// Width of the input when the layout has no layers (identity map).
    input_dim: usize,
}

impl Layout {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let first = layers.first().ok_or(FusionError::Empty("layer list"))?;
        let input_dim = first.fan_in;
        for pair in layers.windows(2) {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(FusionError::DimensionMismatch {
                    context: "layer chain",
                    expected: pair[0].fan_out,
                    got: pair[1].fan_in,
                });
            }
        }
        if layers.iter().any(|l| l.fan_in == 0 || l.fan_out == 0) {
            return Err(FusionError::InvalidConfig("zero-width layer".into()));
        }
        Ok(Self { layers, input_dim })
    }

    /// Layout with no layers; the network it describes is the identity on `dim` inputs.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: Vec::new(),
            input_dim: dim,
        }
    }

    /// Dense chain `input -> hidden.. -> output` with `hidden_act` on hidden layers.
    pub fn dense(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                fan_in: widths[i],
                fan_out: widths[i + 1],
                activation: if i + 1 == n { output_act } else { hidden_act },
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.fan_out)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::num_params).sum()
    }

    /// Start offset of each layer's block in the flat parameter vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.num_params();
                o
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    Zeros,
    ScaledUniform,
}

/// Flat parameter storage. Each layer block is the `fan_out x fan_in` weight
/// matrix in row-major order followed by the `fan_out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector<S> {
    values: Vec<S>,
    layout: Layout,
}

impl<S: Scalar> ParamVector<S> {
    pub fn from_values(layout: Layout, values: Vec<S>) -> Result<Self> {
        if values.len() != layout.num_params() {
            return Err(FusionError::DimensionMismatch {
                context: "parameter vector",
                expected: layout.num_params(),
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        let values = vec![S::zero(); layout.num_params()];
        Self { values, layout }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn block(&self, layer: usize) -> (usize, LayerSpec) {
        let spec = self.layout.layers[layer];
        let off = self.layout.layers[..layer].iter().map(LayerSpec::num_params).sum();
        (off, spec)
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, S> {
        let (off, spec) = self.block(layer);
        let n = spec.fan_in * spec.fan_out;
        ArrayView2::from_shape((spec.fan_out, spec.fan_in), &self.values[off..off + n])
            .expect("layout-consistent block")
    }

    pub fn weights_mut(&mut self, layer: usize) -> ArrayViewMut2<'_, S> {
        let (off, spec) = self.block(layer);
        let n = spec.fan_in * spec.fan_out;
        ArrayViewMut2::from_shape((spec.fan_out, spec.fan_in), &mut self.values[off..off + n])
            .expect("layout-consistent block")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, S> {
        let (off, spec) = self.block(layer);
        let start = off + spec.fan_in * spec.fan_out;
        ArrayView1::from(&self.values[start..start + spec.fan_out])
    }

    pub fn bias_mut(&mut self, layer: usize) -> ArrayViewMut1<'_, S> {
        let (off, spec) = self.block(layer);
        let start = off + spec.fan_in * spec.fan_out;
        ArrayViewMut1::from(&mut self.values[start..start + spec.fan_out])
    }

    /// `self += scale * direction`.
    pub fn axpy(&mut self, scale: S, direction: &[S]) {
        debug_assert_eq!(direction.len(), self.values.len());
        for (p, d) in self.values.iter_mut().zip(direction) {
            *p += scale * *d;
        }
    }
}

/// Deterministic parameter initialisation.
///
/// `ScaledUniform` draws each weight from `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`; biases start at zero.
pub fn init_params<S: Scalar>(layout: &Layout, scheme: InitScheme, seed: u64) -> ParamVector<S> {
    let mut params = ParamVector::zeros(layout.clone());
    if scheme == InitScheme::Zeros {
        return params;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (l, spec) in layout.layers.iter().enumerate() {
        let bound = (6.0 / (spec.fan_in + spec.fan_out) as f64).sqrt();
        for w in params.weights_mut(l).iter_mut() {
            *w = S::lit(rng.random_range(-bound..bound));
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_parameters() {
        let layout = Layout::dense(3, &[4, 5], 2, Activation::Tanh, Activation::Identity).unwrap();
        assert_eq!(layout.num_params(), 3 * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2);
        assert_eq!(layout.offsets(), vec![0, 16, 41]);
        assert_eq!(layout.output_dim(), 2);
    }

    #[test]
    fn broken_chain_is_rejected() {
        let bad = Layout::new(vec![
            LayerSpec {
                fan_in: 2,
                fan_out: 3,
                activation: Activation::Tanh,
            },
            LayerSpec {
                fan_in: 4,
                fan_out: 1,
                activation: Activation::Identity,
            },
        ]);
        assert!(matches!(bad, Err(FusionError::DimensionMismatch { .. })));
    }

    #[test]
    fn zeros_scheme_is_all_zero() {
        let layout = Layout::dense(4, &[8], 3, Activation::Tanh, Activation::Identity).unwrap();
        let p: ParamVector<f64> = init_params(&layout, InitScheme::Zeros, 11);
        assert!(p.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_vector() {
        let layout = Layout::dense(6, &[5], 2, Activation::Relu, Activation::Identity).unwrap();
        let a: ParamVector<f64> = init_params(&layout, InitScheme::ScaledUniform, 42);
        let b: ParamVector<f64> = init_params(&layout, InitScheme::ScaledUniform, 42);
        let c: ParamVector<f64> = init_params(&layout, InitScheme::ScaledUniform, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn scaled_uniform_respects_bound() {
        let layout = Layout::dense(4, &[], 4, Activation::Identity, Activation::Identity).unwrap();
        let p: ParamVector<f64> = init_params(&layout, InitScheme::ScaledUniform, 7);
        let bound = (6.0f64 / 8.0).sqrt();
        let w = p.weights(0);
        assert_eq!(w.len(), 16);
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(p.bias(0).iter().all(|&b| b == 0.0));
    }
}

use ndarray::{Array2, ArrayView2, Axis};

use super::params::{init_params, InitScheme, Layout, ParamVector};
use crate::error::{FusionError, Result};
use crate::scalar::Scalar;

/// Dense feed-forward network over row-major batches (one sample per row).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S> {
    pub params: ParamVector<S>,
}

/// Activations recorded by [`Mlp::forward_record`] for a subsequent backward pass.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    inputs: Vec<Array2<S>>,
    pre: Vec<Array2<S>>,
    output: Option<Array2<S>>,
}

impl<S> Default for Tape<S> {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            pre: Vec::new(),
            output: None,
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn is_recorded(&self) -> bool {
        self.output.is_some()
    }

    pub fn output(&self) -> Option<&Array2<S>> {
        self.output.as_ref()
    }

    pub fn pre_activations(&self) -> &[Array2<S>] {
        &self.pre
    }
}

/// Parameter gradient (flat, same layout as the network) and input gradient.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub params: Vec<S>,
    pub input: Array2<S>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(params: ParamVector<S>) -> Self {
        Self { params }
    }

    pub fn init(layout: &Layout, scheme: InitScheme, seed: u64) -> Self {
        Self::new(init_params(layout, scheme, seed))
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(ParamVector::zeros(Layout::identity(dim)))
    }

    pub fn layout(&self) -> &Layout {
        self.params.layout()
    }

    pub fn input_dim(&self) -> usize {
        self.layout().input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layout().output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &ArrayView2<'_, S>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(FusionError::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn affine(&self, layer: usize, x: &ArrayView2<'_, S>) -> Array2<S> {
        let mut z = x.dot(&self.params.weights(layer).t());
        z += &self.params.bias(layer);
        z
    }

    pub fn forward(&self, x: ArrayView2<'_, S>) -> Result<Array2<S>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for (l, spec) in self.layout().layers().iter().enumerate() {
            let mut z = self.affine(l, &h.view());
            z.mapv_inplace(|v| spec.activation.apply(v));
            h = z;
        }
        Ok(h)
    }

    /// Forward pass that records per-layer inputs and pre-activations in `tape`.
    pub fn forward_record(&self, x: ArrayView2<'_, S>, tape: &mut Tape<S>) -> Result<Array2<S>> {
        self.check_input(&x)?;
        tape.inputs.clear();
        tape.pre.clear();
        let mut h = x.to_owned();
        for (l, spec) in self.layout().layers().iter().enumerate() {
            let z = self.affine(l, &h.view());
            let a = z.mapv(|v| spec.activation.apply(v));
            tape.inputs.push(h);
            tape.pre.push(z);
            h = a;
        }
        tape.output = Some(h.clone());
        Ok(h)
    }

    /// Contracts the Jacobian of the recorded outputs with `upstream`
    /// (same shape as the output), summed over the batch.
    pub fn backward(&self, tape: &Tape<S>, upstream: ArrayView2<'_, S>) -> Result<Gradients<S>> {
        let (params, input) = self.backward_impl(tape, upstream, true)?;
        Ok(Gradients {
            params,
            input: input.expect("input gradient requested"),
        })
    }

    /// Parameter gradient only; skips the product with the first weight matrix.
    pub fn param_grad(&self, tape: &Tape<S>, upstream: ArrayView2<'_, S>) -> Result<Vec<S>> {
        Ok(self.backward_impl(tape, upstream, false)?.0)
    }

    fn backward_impl(
        &self,
        tape: &Tape<S>,
        upstream: ArrayView2<'_, S>,
        want_input: bool,
    ) -> Result<(Vec<S>, Option<Array2<S>>)> {
        let output = tape.output.as_ref().ok_or(FusionError::NoForwardCache)?;
        if upstream.dim() != output.dim() {
            return Err(FusionError::DimensionMismatch {
                context: "upstream gradient",
                expected: output.len(),
                got: upstream.len(),
            });
        }
        let layers = self.layout().layers();
        if tape.pre.len() != layers.len() {
            return Err(FusionError::NoForwardCache);
        }
        let mut grads = vec![S::zero(); self.num_params()];
        if layers.is_empty() {
            return Ok((grads, Some(upstream.to_owned())));
        }
        let offsets = self.layout().offsets();
        let last = layers.len() - 1;
        let post_last = output;
        let mut delta = upstream.to_owned();
        ndarray::Zip::from(&mut delta)
            .and(&tape.pre[last])
            .and(post_last)
            .for_each(|d, &z, &a| *d *= layers[last].activation.derivative(z, a));

        for l in (0..layers.len()).rev() {
            let spec = layers[l];
            let input = &tape.inputs[l];
            let gw = delta.t().dot(input);
            let gb = delta.sum_axis(Axis(0));
            let off = offsets[l];
            let nw = spec.fan_in * spec.fan_out;
            for (dst, src) in grads[off..off + nw].iter_mut().zip(gw.iter()) {
                *dst = *src;
            }
            for (dst, src) in grads[off + nw..off + nw + spec.fan_out].iter_mut().zip(gb.iter()) {
                *dst = *src;
            }
            if l == 0 {
                return Ok((grads, want_input.then(|| delta.dot(&self.params.weights(l)))));
            }
            let d_input = delta.dot(&self.params.weights(l));
            let prev = layers[l - 1];
            let mut next = d_input;
            ndarray::Zip::from(&mut next)
                .and(&tape.pre[l - 1])
                .and(&tape.inputs[l])
                .for_each(|d, &z, &a| *d *= prev.activation.derivative(z, a));
            delta = next;
        }
        unreachable!("loop returns at layer 0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmodels::params::{Activation, LayerSpec};
    use ndarray::array;

    #[test]
    fn zero_weights_give_zero_output() {
        let layout = Layout::dense(3, &[4], 2, Activation::Tanh, Activation::Identity).unwrap();
        let net: Mlp<f64> = Mlp::init(&layout, InitScheme::Zeros, 0);
        let out = net.forward(array![[0.3, -1.2, 5.0]].view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_initialised_linear_layer() {
        let layout = Layout::new(vec![LayerSpec {
            fan_in: 3,
            fan_out: 3,
            activation: Activation::Identity,
        }])
        .unwrap();
        let mut p = ParamVector::<f64>::zeros(layout);
        for i in 0..3 {
            p.weights_mut(0)[[i, i]] = 1.0;
        }
        let net = Mlp::new(p);
        let v = array![[0.5, -2.0, 7.25]];
        assert_eq!(net.forward(v.view()).unwrap(), v);
    }

    #[test]
    fn hand_evaluated_tanh_net() {
        // 2-2-1, tanh hidden, identity output.
        let layout = Layout::dense(2, &[2], 1, Activation::Tanh, Activation::Identity).unwrap();
        let values = vec![
            0.5, -0.3, // hidden row 0
            0.2, 0.8, // hidden row 1
            0.1, -0.1, // hidden bias
            1.5, -2.0, // output row
            0.25, // output bias
        ];
        let net = Mlp::new(ParamVector::from_values(layout, values).unwrap());
        let out = net.forward(array![[1.0, 0.0]].view()).unwrap()[[0, 0]];
        let h0 = (0.5f64 + 0.1).tanh();
        let h1 = (0.2f64 - 0.1).tanh();
        let expected = 1.5 * h0 - 2.0 * h1 + 0.25;
        assert!((out - expected).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_typed() {
        let net: Mlp<f64> = Mlp::init(
            &Layout::dense(3, &[], 1, Activation::Identity, Activation::Identity).unwrap(),
            InitScheme::ScaledUniform,
            1,
        );
        let err = net.forward(array![[1.0, 2.0]].view()).unwrap_err();
        assert!(matches!(
            err,
            FusionError::DimensionMismatch {
                expected: 3,
                got: 2,
                ..
            }
        ));
    }

    #[test]
    fn backward_before_forward_is_typed() {
        let net: Mlp<f64> = Mlp::init(
            &Layout::dense(2, &[], 1, Activation::Identity, Activation::Identity).unwrap(),
            InitScheme::ScaledUniform,
            1,
        );
        let tape = Tape::default();
        let err = net.backward(&tape, array![[1.0]].view()).unwrap_err();
        assert!(matches!(err, FusionError::NoForwardCache));
    }

    #[test]
    fn linear_layer_gradients() {
        let layout = Layout::dense(3, &[], 1, Activation::Identity, Activation::Identity).unwrap();
        let values = vec![2.0, -1.0, 0.5, 0.0];
        let net = Mlp::new(ParamVector::from_values(layout, values).unwrap());
        let x = array![[1.0, 4.0, -3.0]];
        let mut tape = Tape::default();
        net.forward_record(x.view(), &mut tape).unwrap();
        let g = net.backward(&tape, array![[1.0]].view()).unwrap();
        assert_eq!(g.params, vec![1.0, 4.0, -3.0, 1.0]);
        assert_eq!(g.input, array![[2.0, -1.0, 0.5]]);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let layout = Layout::dense(3, &[5, 4], 2, Activation::Tanh, Activation::Tanh).unwrap();
        let net: Mlp<f64> = Mlp::init(&layout, InitScheme::ScaledUniform, 3);
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]];
        let mut tape = Tape::default();
        net.forward_record(x.view(), &mut tape).unwrap();
        let g = net.backward(&tape, Array2::zeros((2, 2)).view()).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_repeatable() {
        let layout = Layout::dense(4, &[6], 3, Activation::Relu, Activation::Identity).unwrap();
        let net: Mlp<f64> = Mlp::init(&layout, InitScheme::ScaledUniform, 9);
        let x = array![[0.3, -0.7, 1.1, 2.0]];
        let a = net.forward(x.view()).unwrap();
        let b = net.forward(x.view()).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn works_in_single_precision() {
        let layout = Layout::dense(2, &[3], 1, Activation::Tanh, Activation::Identity).unwrap();
        let net: Mlp<f32> = Mlp::init(&layout, InitScheme::ScaledUniform, 5);
        let out = net.forward(array![[0.5f32, -0.5]].view()).unwrap();
        assert!(out[[0, 0]].is_finite());
    }
}

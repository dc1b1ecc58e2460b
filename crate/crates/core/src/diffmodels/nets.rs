use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp, Tape};
use super::params::{init_params, Activation, InitScheme, LayerSpec, Layout, ParamVector};
use crate::error::{FusionError, Result};
use crate::scalar::Scalar;

/// Anything whose parameters can be viewed and updated as one flat vector.
pub trait Trainable<S: Scalar> {
    fn num_params(&self) -> usize;
    fn params_flat(&self) -> Vec<S>;
    fn set_params_flat(&mut self, values: &[S]) -> Result<()>;
    /// `params += scale * direction`.
    fn step(&mut self, scale: S, direction: &[S]);
}

impl<S: Scalar> Trainable<S> for Mlp<S> {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn params_flat(&self) -> Vec<S> {
        self.params.values().to_vec()
    }

    fn set_params_flat(&mut self, values: &[S]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(FusionError::DimensionMismatch {
                context: "flat parameters",
                expected: self.params.len(),
                got: values.len(),
            });
        }
        self.params.values_mut().copy_from_slice(values);
        Ok(())
    }

    fn step(&mut self, scale: S, direction: &[S]) {
        self.params.axpy(scale, direction);
    }
}

/// Architecture of the three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub rep_hidden: Vec<usize>,
    pub rep_dim: usize,
    pub predictor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            rep_hidden: vec![64, 64],
            rep_dim: 16,
            predictor_hidden: vec![64],
            critic_hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

/// Representation map from covariates to the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationNet<S> {
    pub net: Mlp<S>,
}

impl<S: Scalar> RepresentationNet<S> {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, act: Activation, seed: u64) -> Result<Self> {
        let layout = Layout::dense(input_dim, hidden, output_dim, act, Activation::Identity)?;
        Ok(Self {
            net: Mlp::init(&layout, InitScheme::ScaledUniform, seed),
        })
    }

    /// The identity representation (models fitted in the raw covariate space).
    pub fn identity(dim: usize) -> Self {
        Self {
            net: Mlp::identity(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn forward(&self, x: ArrayView2<'_, S>) -> Result<Array2<S>> {
        self.net.forward(x)
    }

    pub fn forward_record(&self, x: ArrayView2<'_, S>, tape: &mut Tape<S>) -> Result<Array2<S>> {
        self.net.forward_record(x, tape)
    }

    pub fn backward(&self, tape: &Tape<S>, upstream: ArrayView2<'_, S>) -> Result<Gradients<S>> {
        self.net.backward(tape, upstream)
    }

    pub fn param_grad(&self, tape: &Tape<S>, upstream: ArrayView2<'_, S>) -> Result<Vec<S>> {
        self.net.param_grad(tape, upstream)
    }
}

impl<S: Scalar> Trainable<S> for RepresentationNet<S> {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }
    fn params_flat(&self) -> Vec<S> {
        self.net.params_flat()
    }
    fn set_params_flat(&mut self, values: &[S]) -> Result<()> {
        self.net.set_params_flat(values)
    }
    fn step(&mut self, scale: S, direction: &[S]) {
        self.net.step(scale, direction)
    }
}

/// Shared trunk over the latent input followed by one scalar head per arm.
///
/// Head `t` is row `t` of the head layer; `m(z, t)` reads only that row, so
/// head 0 plays the role of the baseline and head `k` minus head 0 the
/// treatment-specific increment.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorNet<S> {
    pub trunk: Mlp<S>,
    pub heads: ParamVector<S>,
}

#[derive(Debug, Clone)]
pub struct PredictorTape<S> {
    trunk: Tape<S>,
    hidden: Option<Array2<S>>,
    arms: Vec<usize>,
}

impl<S> Default for PredictorTape<S> {
    fn default() -> Self {
        Self {
            trunk: Tape::default(),
            hidden: None,
            arms: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictorGradients<S> {
    /// Trunk gradient followed by head gradient, matching [`Trainable::params_flat`].
    pub params: Vec<S>,
    pub input: Array2<S>,
}

impl<S: Scalar> PredictorNet<S> {
    pub fn new(input_dim: usize, hidden: &[usize], n_arms: usize, act: Activation, seed: u64) -> Result<Self> {
        Self::with_scheme(input_dim, hidden, n_arms, act, InitScheme::ScaledUniform, seed)
    }

    pub fn with_scheme(
        input_dim: usize,
        hidden: &[usize],
        n_arms: usize,
        act: Activation,
        scheme: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        if n_arms < 2 {
            return Err(FusionError::InvalidConfig("predictor needs at least two arms".into()));
        }
        let trunk = if hidden.is_empty() {
            Mlp::identity(input_dim)
        } else {
            let last = *hidden.last().expect("nonempty");
            Layout::dense(input_dim, &hidden[..hidden.len() - 1], last, act, act)
                .map(|l| Mlp::init(&l, scheme, seed))?
        };
        let head_layout = Layout::new(vec![LayerSpec {
            fan_in: trunk.output_dim(),
            fan_out: n_arms,
            activation: Activation::Identity,
        }])?;
        let heads = init_params(&head_layout, scheme, seed.wrapping_add(0x9e37_79b9));
        Ok(Self { trunk, heads })
    }

    pub fn n_arms(&self) -> usize {
        self.heads.layout().output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn trunk_params(&self) -> usize {
        self.trunk.num_params()
    }

    fn check_arms(&self, t: &[usize], rows: usize) -> Result<()> {
        if t.len() != rows {
            return Err(FusionError::LengthMismatch {
                left: rows,
                right: t.len(),
            });
        }
        let n_arms = self.n_arms();
        if let Some(&bad) = t.iter().find(|&&a| a >= n_arms) {
            return Err(FusionError::InvalidTreatment { t: bad, n_arms });
        }
        Ok(())
    }

    fn head_values(&self, hidden: &Array2<S>, t: &[usize]) -> Array1<S> {
        let w = self.heads.weights(0);
        let b = self.heads.bias(0);
        Array1::from_iter(hidden.rows().into_iter().zip(t).map(|(h, &a)| h.dot(&w.row(a)) + b[a]))
    }

    /// `m(z_i, t_i)` for every row.
    pub fn predict(&self, z: ArrayView2<'_, S>, t: &[usize]) -> Result<Array1<S>> {
        self.check_arms(t, z.nrows())?;
        let hidden = self.trunk.forward(z)?;
        Ok(self.head_values(&hidden, t))
    }

    /// All heads, one column per arm.
    pub fn predict_all(&self, z: ArrayView2<'_, S>) -> Result<Array2<S>> {
        let hidden = self.trunk.forward(z)?;
        let mut out = hidden.dot(&self.heads.weights(0).t());
        out += &self.heads.bias(0);
        Ok(out)
    }

    pub fn forward_record(&self, z: ArrayView2<'_, S>, t: &[usize], tape: &mut PredictorTape<S>) -> Result<Array1<S>> {
        self.check_arms(t, z.nrows())?;
        let hidden = self.trunk.forward_record(z, &mut tape.trunk)?;
        let out = self.head_values(&hidden, t);
        tape.hidden = Some(hidden);
        tape.arms = t.to_vec();
        Ok(out)
    }

    pub fn backward(&self, tape: &PredictorTape<S>, upstream: ArrayView1<'_, S>) -> Result<PredictorGradients<S>> {
        let hidden = tape.hidden.as_ref().ok_or(FusionError::NoForwardCache)?;
        if upstream.len() != hidden.nrows() {
            return Err(FusionError::DimensionMismatch {
                context: "predictor upstream",
                expected: hidden.nrows(),
                got: upstream.len(),
            });
        }
        let width = hidden.ncols();
        let n_arms = self.n_arms();
        let w = self.heads.weights(0);
        let mut g_w = Array2::<S>::zeros((n_arms, width));
        let mut g_b = Array1::<S>::zeros(n_arms);
        let mut d_hidden = Array2::<S>::zeros(hidden.raw_dim());
        for (i, (&a, &u)) in tape.arms.iter().zip(upstream.iter()).enumerate() {
            if u == S::zero() {
                continue;
            }
            let h = hidden.row(i);
            g_w.row_mut(a).scaled_add(u, &h);
            g_b[a] += u;
            d_hidden.row_mut(i).scaled_add(u, &w.row(a));
        }
        let trunk_grads = if self.trunk.layout().layers().is_empty() {
            Gradients {
                params: Vec::new(),
                input: d_hidden,
            }
        } else {
            self.trunk.backward(&tape.trunk, d_hidden.view())?
        };
        let mut params = trunk_grads.params;
        params.extend(g_w.iter().copied());
        params.extend(g_b.iter().copied());
        Ok(PredictorGradients {
            params,
            input: trunk_grads.input,
        })
    }
}

impl<S: Scalar> Trainable<S> for PredictorNet<S> {
    fn num_params(&self) -> usize {
        self.trunk.num_params() + self.heads.len()
    }

    fn params_flat(&self) -> Vec<S> {
        let mut v = self.trunk.params_flat();
        v.extend_from_slice(self.heads.values());
        v
    }

    fn set_params_flat(&mut self, values: &[S]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(FusionError::DimensionMismatch {
                context: "predictor parameters",
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let split = self.trunk.num_params();
        self.trunk.set_params_flat(&values[..split])?;
        self.heads.values_mut().copy_from_slice(&values[split..]);
        Ok(())
    }

    fn step(&mut self, scale: S, direction: &[S]) {
        let split = self.trunk.num_params();
        self.trunk.step(scale, &direction[..split]);
        self.heads.axpy(scale, &direction[split..]);
    }
}

/// Critic over `concat(z, one_hot(t))` with a bounded `tanh` output.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet<S> {
    pub net: Mlp<S>,
    pub n_arms: usize,
}

impl<S: Scalar> CriticNet<S> {
    pub fn new(rep_dim: usize, n_arms: usize, hidden: &[usize], act: Activation, seed: u64) -> Result<Self> {
        let layout = Layout::dense(rep_dim + n_arms, hidden, 1, act, Activation::Tanh)?;
        Ok(Self {
            net: Mlp::init(&layout, InitScheme::ScaledUniform, seed),
            n_arms,
        })
    }

    pub fn rep_dim(&self) -> usize {
        self.net.input_dim() - self.n_arms
    }

    pub fn evaluate(&self, z: ArrayView2<'_, S>, t: &[usize]) -> Result<Array1<S>> {
        let input = append_one_hot(z, t, self.n_arms)?;
        Ok(self.net.forward(input.view())?.column(0).to_owned())
    }

    pub fn forward_record(&self, z: ArrayView2<'_, S>, t: &[usize], tape: &mut Tape<S>) -> Result<Array1<S>> {
        let input = append_one_hot(z, t, self.n_arms)?;
        Ok(self.net.forward_record(input.view(), tape)?.column(0).to_owned())
    }

    /// Gradient w.r.t. critic parameters and w.r.t. the `z` block of the input.
    pub fn backward(&self, tape: &Tape<S>, upstream: ArrayView1<'_, S>) -> Result<Gradients<S>> {
        let up = upstream.insert_axis(ndarray::Axis(1));
        let g = self.net.backward(tape, up)?;
        let dz = g.input.slice(s![.., ..self.rep_dim()]).to_owned();
        Ok(Gradients {
            params: g.params,
            input: dz,
        })
    }
}

impl<S: Scalar> Trainable<S> for CriticNet<S> {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }
    fn params_flat(&self) -> Vec<S> {
        self.net.params_flat()
    }
    fn set_params_flat(&mut self, values: &[S]) -> Result<()> {
        self.net.set_params_flat(values)
    }
    fn step(&mut self, scale: S, direction: &[S]) {
        self.net.step(scale, direction)
    }
}

/// `[z | one_hot(t)]`.
pub fn append_one_hot<S: Scalar>(z: ArrayView2<'_, S>, t: &[usize], n_arms: usize) -> Result<Array2<S>> {
    if t.len() != z.nrows() {
        return Err(FusionError::LengthMismatch {
            left: z.nrows(),
            right: t.len(),
        });
    }
    let d = z.ncols();
    let mut out = Array2::<S>::zeros((z.nrows(), d + n_arms));
    out.slice_mut(s![.., ..d]).assign(&z);
    for (i, &a) in t.iter().enumerate() {
        if a >= n_arms {
            return Err(FusionError::InvalidTreatment { t: a, n_arms });
        }
        out[[i, d + a]] = S::one();
    }
    Ok(out)
}

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::mlp::Tape;
use super::nets::{PredictorNet, PredictorTape, RepresentationNet, Trainable};
use crate::error::Result;
use crate::scalar::Scalar;

/// Representation followed by the arm-headed predictor: `m(phi(x), t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<S> {
    pub phi: RepresentationNet<S>,
    pub predictor: PredictorNet<S>,
}

#[derive(Debug, Clone)]
pub struct FusionTape<S> {
    pub phi: Tape<S>,
    pub predictor: PredictorTape<S>,
}

impl<S> Default for FusionTape<S> {
    fn default() -> Self {
        Self {
            phi: Tape::default(),
            predictor: PredictorTape::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionGradients<S> {
    pub phi: Vec<S>,
    pub predictor: Vec<S>,
}

impl<S: Scalar> FusionGradients<S> {
    pub fn zeros_like(model: &FusionModel<S>) -> Self {
        Self {
            phi: vec![S::zero(); model.phi.num_params()],
            predictor: vec![S::zero(); model.predictor.num_params()],
        }
    }

    pub fn accumulate(&mut self, other: &FusionGradients<S>) {
        for (a, b) in self.phi.iter_mut().zip(&other.phi) {
            *a += *b;
        }
        for (a, b) in self.predictor.iter_mut().zip(&other.predictor) {
            *a += *b;
        }
    }

    pub fn flat(&self) -> Vec<S> {
        let mut v = self.phi.clone();
        v.extend_from_slice(&self.predictor);
        v
    }
}

impl<S: Scalar> FusionModel<S> {
    pub fn new(phi: RepresentationNet<S>, predictor: PredictorNet<S>) -> Self {
        Self { phi, predictor }
    }

    pub fn n_arms(&self) -> usize {
        self.predictor.n_arms()
    }

    pub fn represent(&self, x: ArrayView2<'_, S>) -> Result<Array2<S>> {
        self.phi.forward(x)
    }

    pub fn predict(&self, x: ArrayView2<'_, S>, t: &[usize]) -> Result<Array1<S>> {
        let z = self.phi.forward(x)?;
        self.predictor.predict(z.view(), t)
    }

    /// Every head at every row: column `k` is `m(phi(x), k)`.
    pub fn predict_all(&self, x: ArrayView2<'_, S>) -> Result<Array2<S>> {
        let z = self.phi.forward(x)?;
        self.predictor.predict_all(z.view())
    }

    /// Effect of arm `arm` relative to arm 0.
    pub fn effect(&self, x: ArrayView2<'_, S>, arm: usize) -> Result<Array1<S>> {
        let all = self.predict_all(x)?;
        Ok(&all.column(arm) - &all.column(0))
    }

    /// Returns `(phi(x), m(phi(x), t))`, recording both passes.
    pub fn forward_record(
        &self,
        x: ArrayView2<'_, S>,
        t: &[usize],
        tape: &mut FusionTape<S>,
    ) -> Result<(Array2<S>, Array1<S>)> {
        let z = self.phi.forward_record(x, &mut tape.phi)?;
        let m = self.predictor.forward_record(z.view(), t, &mut tape.predictor)?;
        Ok((z, m))
    }

    /// Backpropagates `upstream` on the predictions plus an optional extra
    /// gradient arriving directly at the representation output.
    pub fn backward(
        &self,
        tape: &FusionTape<S>,
        upstream: ArrayView1<'_, S>,
        extra_dz: Option<ArrayView2<'_, S>>,
    ) -> Result<FusionGradients<S>> {
        let pg = self.predictor.backward(&tape.predictor, upstream)?;
        let mut dz = pg.input;
        if let Some(extra) = extra_dz {
            dz += &extra;
        }
        let phi = if self.phi.num_params() == 0 {
            Vec::new()
        } else {
            self.phi.param_grad(&tape.phi, dz.view())?
        };
        Ok(FusionGradients {
            phi,
            predictor: pg.params,
        })
    }
}

impl<S: Scalar> Trainable<S> for FusionModel<S> {
    fn num_params(&self) -> usize {
        self.phi.num_params() + self.predictor.num_params()
    }

    fn params_flat(&self) -> Vec<S> {
        let mut v = self.phi.params_flat();
        v.extend(self.predictor.params_flat());
        v
    }

    fn set_params_flat(&mut self, values: &[S]) -> Result<()> {
        let split = self.phi.num_params();
        if values.len() != self.num_params() {
            return Err(crate::error::FusionError::DimensionMismatch {
                context: "fusion model parameters",
                expected: self.num_params(),
                got: values.len(),
            });
        }
        self.phi.set_params_flat(&values[..split])?;
        self.predictor.set_params_flat(&values[split..])
    }

    fn step(&mut self, scale: S, direction: &[S]) {
        let split = self.phi.num_params();
        self.phi.step(scale, &direction[..split]);
        self.predictor.step(scale, &direction[split..]);
    }
}

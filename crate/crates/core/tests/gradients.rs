//! Analytic gradients of every network type against central differences,
//! under a random linear functional of the outputs.

use fusion_core::diffmodels::{
    finite_diff_grad, finite_diff_net, max_relative_error, Activation, CriticNet, FusionModel, FusionTape, InitScheme,
    Layout, Mlp, PredictorNet, PredictorTape, RepresentationNet, Tape, Trainable,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
struct Shape {
    input: usize,
    hidden: Vec<usize>,
    out: usize,
    arms: usize,
    act: Activation,
    batch: usize,
    seed: u64,
}

fn shapes() -> impl Strategy<Value = Shape> {
    (
        1usize..6,
        prop::collection::vec(1usize..7, 0..3),
        1usize..5,
        2usize..4,
        prop_oneof![
            Just(Activation::Tanh),
            Just(Activation::Identity),
            Just(Activation::Relu)
        ],
        1usize..9,
        any::<u64>(),
    )
        .prop_map(|(input, hidden, out, arms, act, batch, seed)| Shape {
            input,
            hidden,
            out,
            arms,
            act,
            batch,
            seed,
        })
}

struct Draw {
    x: Array2<f64>,
    t: Vec<usize>,
    rng: ChaCha8Rng,
}

fn draw(s: &Shape, cols: usize) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0xabcd);
    let x = Array2::from_shape_fn((s.batch, cols), |_| rng.random_range(-2.0..2.0));
    let t = (0..s.batch).map(|_| rng.random_range(0..s.arms)).collect();
    Draw { x, t, rng }
}

fn weights2(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn weights1(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0))
}

/// Moves every parameter off its initial value so zero biases cannot park a
/// ReLU pre-activation exactly on the kink.
fn jitter<T: Trainable<f64>>(net: &mut T, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7177);
    let p: Vec<f64> = net
        .params_flat()
        .iter()
        .map(|v| v + rng.random_range(-0.5..0.5))
        .collect();
    net.set_params_flat(&p).unwrap();
}

fn close(analytic: &[f64], numeric: &[f64]) -> Result<(), TestCaseError> {
    prop_assert_eq!(analytic.len(), numeric.len());
    let err = max_relative_error(analytic, numeric, FLOOR);
    prop_assert!(err < TOL, "relative error {err:e}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mlp_params_and_input(s in shapes()) {
        let layout = Layout::dense(s.input, &s.hidden, s.out, s.act, Activation::Identity).unwrap();
        let mut net = Mlp::<f64>::init(&layout, InitScheme::ScaledUniform, s.seed);
        jitter(&mut net, s.seed);
        let Draw { x, mut rng, .. } = draw(&s, s.input);
        let w = weights2(&mut rng, s.batch, s.out);
        let mut tape = Tape::default();
        net.forward_record(x.view(), &mut tape).unwrap();
        let g = net.backward(&tape, w.view()).unwrap();

        let fd = finite_diff_net(&net, |n: &Mlp<f64>| (n.forward(x.view()).unwrap() * &w).sum(), H).unwrap();
        close(&g.params, &fd)?;

        let flat: Vec<f64> = x.iter().copied().collect();
        let fd_x = finite_diff_grad(&flat, |v| {
            let xv = Array2::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap();
            (net.forward(xv.view()).unwrap() * &w).sum()
        }, H).unwrap();
        close(g.input.as_slice().unwrap(), &fd_x)?;
    }

    #[test]
    fn representation_params(s in shapes()) {
        let mut net = RepresentationNet::<f64>::new(s.input, &s.hidden, s.out, s.act, s.seed).unwrap();
        jitter(&mut net, s.seed);
        let Draw { x, mut rng, .. } = draw(&s, s.input);
        let w = weights2(&mut rng, s.batch, s.out);
        let mut tape = Tape::default();
        net.forward_record(x.view(), &mut tape).unwrap();
        let g = net.param_grad(&tape, w.view()).unwrap();
        let full = net.backward(&tape, w.view()).unwrap();
        prop_assert_eq!(&g, &full.params);

        let fd = finite_diff_net(&net, |n: &RepresentationNet<f64>| {
            let mut tp = Tape::default();
            (n.forward_record(x.view(), &mut tp).unwrap() * &w).sum()
        }, H).unwrap();
        close(&g, &fd)?;
    }

    #[test]
    fn predictor_params_and_input(s in shapes()) {
        let mut net = PredictorNet::<f64>::new(s.input, &s.hidden, s.arms, s.act, s.seed).unwrap();
        jitter(&mut net, s.seed);
        let Draw { x: z, t, mut rng } = draw(&s, s.input);
        let w = weights1(&mut rng, s.batch);
        let mut tape = PredictorTape::default();
        net.forward_record(z.view(), &t, &mut tape).unwrap();
        let g = net.backward(&tape, w.view()).unwrap();

        let eval = |n: &PredictorNet<f64>, zv: &Array2<f64>| {
            let mut tp = PredictorTape::default();
            n.forward_record(zv.view(), &t, &mut tp).unwrap().dot(&w)
        };
        let fd = finite_diff_net(&net, |n: &PredictorNet<f64>| eval(n, &z), H).unwrap();
        close(&g.params, &fd)?;

        let flat: Vec<f64> = z.iter().copied().collect();
        let fd_z = finite_diff_grad(&flat, |v| {
            eval(&net, &Array2::from_shape_vec(z.raw_dim(), v.to_vec()).unwrap())
        }, H).unwrap();
        close(g.input.as_slice().unwrap(), &fd_z)?;
    }

    #[test]
    fn critic_params_and_input(s in shapes()) {
        let mut net = CriticNet::<f64>::new(s.input, s.arms, &s.hidden, s.act, s.seed).unwrap();
        jitter(&mut net, s.seed);
        let Draw { x: z, t, mut rng } = draw(&s, s.input);
        let w = weights1(&mut rng, s.batch);
        let mut tape = Tape::default();
        net.forward_record(z.view(), &t, &mut tape).unwrap();
        let g = net.backward(&tape, w.view()).unwrap();

        let fd = finite_diff_net(&net, |n: &CriticNet<f64>| n.evaluate(z.view(), &t).unwrap().dot(&w), H).unwrap();
        close(&g.params, &fd)?;

        let flat: Vec<f64> = z.iter().copied().collect();
        let fd_z = finite_diff_grad(&flat, |v| {
            let zv = Array2::from_shape_vec(z.raw_dim(), v.to_vec()).unwrap();
            net.evaluate(zv.view(), &t).unwrap().dot(&w)
        }, H).unwrap();
        close(g.input.as_slice().unwrap(), &fd_z)?;
    }

    #[test]
    fn fusion_params_with_representation_term(s in shapes(), pred_hidden in prop::collection::vec(1usize..6, 0..2)) {
        let phi = RepresentationNet::<f64>::new(s.input, &s.hidden, s.out, s.act, s.seed).unwrap();
        let pred = PredictorNet::<f64>::new(s.out, &pred_hidden, s.arms, s.act, s.seed.wrapping_add(1)).unwrap();
        let mut model = FusionModel::new(phi, pred);
        jitter(&mut model, s.seed);
        let Draw { x, t, mut rng } = draw(&s, s.input);
        let w = weights1(&mut rng, s.batch);
        let wz = weights2(&mut rng, s.batch, s.out);
        let mut tape = FusionTape::default();
        model.forward_record(x.view(), &t, &mut tape).unwrap();
        let g = model.backward(&tape, w.view(), Some(wz.view())).unwrap();

        // loss = w . m(phi(x), t) + <wz, phi(x)>
        let fd = finite_diff_net(&model, |m: &FusionModel<f64>| {
            let mut tp = FusionTape::default();
            let (z, out) = m.forward_record(x.view(), &t, &mut tp).unwrap();
            out.dot(&w) + (z * &wz).sum()
        }, H).unwrap();
        prop_assert_eq!(g.flat().len(), model.num_params());
        close(&g.flat(), &fd)?;
    }
}

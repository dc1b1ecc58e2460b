use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::{ModelBundle, Standardizer, TraceRecord, TrainTrace};
use crate::datagen::{Dataset, Source};
use crate::diffmodels::{
    append_one_hot, Architecture, CriticNet, FusionModel, FusionTape, PredictorNet, RepresentationNet, Tape, Trainable,
};
use crate::discrepancy::{critic_ipm_step, critic_objective, mmd_joint, mmd_with_grad_median, IpmKind};
use crate::error::{FusionError, Result};
use crate::moments::{moment_residual, AssignmentProbs};

/// Rows per source used when a full-sample MMD would not fit comfortably.
const EVAL_MMD_ROWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Quadratic augmentation weight; 0 disables the penalty term.
    pub rho: f64,
    /// Weight of the overlap discrepancy in the primal objective.
    pub lambda_ov: f64,
    /// Radius of the dual ball; 0 pins the multiplier at the origin.
    pub lambda_dual: f64,
    pub eta_primal: f64,
    pub eta_dual: f64,
    pub eta_critic: f64,
    pub critic_steps: usize,
    /// Primal steps decay as `eta_primal / sqrt(1 + s / decay_s0)`.
    pub decay_s0: f64,
    pub batch_obs: usize,
    pub batch_rct: usize,
    pub iters: usize,
    pub seed: u64,
    /// Weight of the randomized squared loss in weighted fusion.
    pub alpha: f64,
    /// Constants of the feasibility-augmented criterion.
    pub mu_o_over_lg2: f64,
    pub c_ov: f64,
    pub ipm: IpmKind,
    /// Global gradient-norm cap applied before each primal step.
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            lambda_ov: 1.0,
            lambda_dual: 50.0,
            eta_primal: 1e-2,
            eta_dual: 1e-1,
            eta_critic: 1e-2,
            critic_steps: 5,
            decay_s0: 1000.0,
            batch_obs: 256,
            batch_rct: 256,
            iters: 5000,
            seed: 0,
            alpha: 1.0,
            mu_o_over_lg2: 1.0,
            c_ov: 1.0,
            ipm: IpmKind::KernelMmd,
            grad_clip: Some(10.0),
            log_every: 10,
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FusionError::InvalidConfig(m));
        for (name, v) in [
            ("rho", self.rho),
            ("lambda_ov", self.lambda_ov),
            ("lambda_dual", self.lambda_dual),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        for (name, v) in [
            ("eta_primal", self.eta_primal),
            ("eta_dual", self.eta_dual),
            ("eta_critic", self.eta_critic),
            ("decay_s0", self.decay_s0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.iters == 0 || self.batch_obs == 0 || self.batch_rct == 0 {
            return bad("iters and batch sizes must be at least 1".into());
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        Ok(())
    }

    pub fn step_size(&self, s: usize) -> f64 {
        self.eta_primal / (1.0 + s as f64 / self.decay_s0).sqrt()
    }
}

/// Which terms enter the primal objective
/// `w_o R_o + alpha R_r + lambda eps_ov + <nu, g> + rho/2 |g|^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// All terms, with projected dual ascent.
    PrimalDual,
    /// Multiplier frozen at zero.
    Penalty,
    /// `R_o + alpha R_r`.
    Weighted,
    ObsOnly,
    RctOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Constraints without the overlap term.
    DualOnly,
    /// Overlap term without constraints.
    IpmOnly,
}

struct Weights {
    obs: f64,
    rct: f64,
    lambda: f64,
    rho: f64,
    dual: bool,
}

impl Weights {
    fn of(mode: TrainMode, cfg: &TrainConfig) -> Self {
        use TrainMode::*;
        Self {
            obs: if mode == RctOnly { 0.0 } else { 1.0 },
            rct: match mode {
                Weighted => cfg.alpha,
                RctOnly => 1.0,
                _ => 0.0,
            },
            lambda: if matches!(mode, PrimalDual | Penalty) {
                cfg.lambda_ov
            } else {
                0.0
            },
            rho: if matches!(mode, PrimalDual | Penalty) {
                cfg.rho
            } else {
                0.0
            },
            dual: mode == PrimalDual,
        }
    }
}

/// Seed of an independent stream for one component of a run.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn init_bundle(data: &Dataset, train_rows: &[usize], cfg: &TrainConfig) -> Result<ModelBundle> {
    let arch = &cfg.arch;
    let d = data.dim();
    let phi = RepresentationNet::new(
        d,
        &arch.rep_hidden,
        arch.rep_dim,
        arch.activation,
        sub_seed(cfg.seed, 1),
    )?;
    let predictor = PredictorNet::new(
        arch.rep_dim,
        &arch.predictor_hidden,
        data.n_arms,
        arch.activation,
        sub_seed(cfg.seed, 2),
    )?;
    let critic = CriticNet::new(
        arch.rep_dim,
        data.n_arms,
        &arch.critic_hidden,
        arch.activation,
        sub_seed(cfg.seed, 3),
    )?;
    Ok(ModelBundle {
        model: FusionModel::new(phi, predictor),
        critic,
        nu: vec![0.0; data.n_arms - 1],
        step_count: 0,
        standardizer: Standardizer::fit(data.x_rows(train_rows).view()),
    })
}

fn draw(rows: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rows[rng.random_range(0..rows.len())]).collect()
}

fn sq_loss(m: &Array1<f64>, y: &[f64]) -> (f64, Array1<f64>) {
    let n = y.len() as f64;
    let resid: Array1<f64> = m.iter().zip(y).map(|(a, b)| a - b).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    (loss, resid * (2.0 / n))
}

fn probs_rows(probs: &AssignmentProbs<f64>, strata: Option<&[usize]>, n: usize) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .map(|i| probs.row(strata.map(|s| s[i])).map(<[f64]>::to_vec))
        .collect()
}

fn project_ball(nu: &mut [f64], radius: f64) {
    let norm = nu.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > radius {
        let scale = if norm > 0.0 { radius / norm } else { 0.0 };
        nu.iter_mut().for_each(|v| *v *= scale);
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Batch {
    x: Array2<f64>,
    t: Vec<usize>,
    y: Vec<f64>,
    p: Vec<Vec<f64>>,
    strata: Option<Vec<usize>>,
}

fn make_batch(data: &Dataset, xs: &Array2<f64>, rows: &[usize], with_probs: bool) -> Result<Batch> {
    let strata = data.strata_rows(rows);
    let p = if with_probs {
        probs_rows(&data.probs, strata.as_deref(), rows.len())?
    } else {
        Vec::new()
    };
    Ok(Batch {
        x: xs.select(Axis(0), rows),
        t: data.t_rows(rows),
        y: data.y_rows(rows),
        p,
        strata,
    })
}

/// Runs the generic loop on `data` (all rows used for training).
pub fn train(data: &Dataset, cfg: &TrainConfig, mode: TrainMode) -> Result<(ModelBundle, TrainTrace)> {
    cfg.validate()?;
    let w = Weights::of(mode, cfg);
    let obs_rows = if w.obs > 0.0 || w.lambda > 0.0 {
        data.require(Source::Obs)?
    } else {
        data.rows_of(Source::Obs)
    };
    let needs_rct = w.rct > 0.0 || w.lambda > 0.0 || w.rho > 0.0 || w.dual || mode != TrainMode::ObsOnly;
    let rct_rows = if needs_rct {
        data.require(Source::Rct)?
    } else {
        data.rows_of(Source::Rct)
    };
    let all_rows: Vec<usize> = (0..data.len()).collect();
    let mut bundle = init_bundle(data, &all_rows, cfg)?;
    let xs = bundle.standardizer.apply(data.x.view())?;
    let mut trace = TrainTrace::default();

    let mut rng_obs = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 10));
    let mut rng_rct = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 11));
    let k_dim = data.n_arms - 1;
    let radius = if w.dual { cfg.lambda_dual } else { 0.0 };

    for s in 0..cfg.iters {
        let ob = if obs_rows.is_empty() {
            None
        } else {
            Some(make_batch(
                data,
                &xs,
                &draw(&obs_rows, cfg.batch_obs, &mut rng_obs),
                false,
            )?)
        };
        let rb = if rct_rows.is_empty() {
            None
        } else {
            Some(make_batch(
                data,
                &xs,
                &draw(&rct_rows, cfg.batch_rct, &mut rng_rct),
                true,
            )?)
        };

        // (i) critic ascent on detached representations
        let use_critic = w.lambda > 0.0 && cfg.ipm == IpmKind::Critic;
        if use_critic {
            let (ob, rb) = (ob.as_ref().expect("obs batch"), rb.as_ref().expect("rct batch"));
            let zo = bundle.model.represent(ob.x.view())?;
            let zr = bundle.model.represent(rb.x.view())?;
            for _ in 0..cfg.critic_steps {
                critic_ipm_step(&mut bundle.critic, zr.view(), &rb.t, zo.view(), &ob.t, cfg.eta_critic)?;
            }
        }

        // (ii) minibatch evaluation with recorded forward passes
        let mut grad = vec![0.0; bundle.model.num_params()];
        let mut r_obs = f64::NAN;
        let mut objective = 0.0;
        let mut tape_o = FusionTape::default();
        let mut tape_r = FusionTape::default();
        let mut up_o = None;
        let mut up_r = None;
        let mut dz_o: Option<Array2<f64>> = None;
        let mut dz_r: Option<Array2<f64>> = None;
        let mut z_o = None;
        let mut z_r = None;
        if let Some(ob) = &ob {
            let (z, m) = bundle.model.forward_record(ob.x.view(), &ob.t, &mut tape_o)?;
            let (loss, dm) = sq_loss(&m, &ob.y);
            r_obs = loss;
            objective += w.obs * loss;
            up_o = Some(dm * w.obs);
            z_o = Some(z);
        }
        let mut g = vec![0.0; k_dim];
        if let Some(rb) = &rb {
            let (z, m) = bundle.model.forward_record(rb.x.view(), &rb.t, &mut tape_r)?;
            let mut up = Array1::<f64>::zeros(rb.t.len());
            if w.rct > 0.0 {
                let (loss, dm) = sq_loss(&m, &rb.y);
                objective += w.rct * loss;
                up.scaled_add(w.rct, &dm);
            }
            g = moment_residual(
                &rb.y,
                &rb.t,
                m.as_slice().expect("contiguous"),
                &data.probs,
                rb.strata.as_deref(),
            )?
            .g;
            let coef: Vec<f64> = (0..k_dim).map(|k| bundle.nu[k] + w.rho * g[k]).collect();
            objective += (0..k_dim)
                .map(|k| bundle.nu[k] * g[k] + 0.5 * w.rho * g[k] * g[k])
                .sum::<f64>();
            if coef.iter().any(|&c| c != 0.0) {
                let inv = 1.0 / rb.t.len() as f64;
                for i in 0..rb.t.len() {
                    let mut acc = 0.0;
                    for k in 1..=k_dim {
                        let dk = if rb.t[i] == k { 1.0 } else { 0.0 };
                        acc -= coef[k - 1] * (dk - rb.p[i][k]) * inv;
                    }
                    up[i] += acc;
                }
            }
            up_r = Some(up);
            z_r = Some(z);
        }
        let mut eps_ov = 0.0;
        if w.lambda > 0.0 {
            let (ob, rb) = (ob.as_ref().expect("obs batch"), rb.as_ref().expect("rct batch"));
            let (zo, zr) = (z_o.as_ref().expect("obs reps"), z_r.as_ref().expect("rct reps"));
            let rep_dim = zo.ncols();
            match cfg.ipm {
                IpmKind::KernelMmd => {
                    let fr = append_one_hot(zr.view(), &rb.t, data.n_arms)?;
                    let fo = append_one_hot(zo.view(), &ob.t, data.n_arms)?;
                    let mg = mmd_with_grad_median(fr.view(), fo.view())?;
                    eps_ov = mg.value;
                    dz_r = Some(mg.grad_rct.slice(s![.., ..rep_dim]).to_owned() * w.lambda);
                    dz_o = Some(mg.grad_obs.slice(s![.., ..rep_dim]).to_owned() * w.lambda);
                }
                IpmKind::Critic => {
                    let mut tape = Tape::default();
                    bundle.critic.forward_record(zr.view(), &rb.t, &mut tape)?;
                    let nr = rb.t.len() as f64;
                    let up = Array1::from_elem(rb.t.len(), w.lambda / nr);
                    dz_r = Some(bundle.critic.backward(&tape, up.view())?.input);
                    bundle.critic.forward_record(zo.view(), &ob.t, &mut tape)?;
                    let no = ob.t.len() as f64;
                    let up = Array1::from_elem(ob.t.len(), -w.lambda / no);
                    dz_o = Some(bundle.critic.backward(&tape, up.view())?.input);
                    eps_ov = critic_objective(&bundle.critic, zr.view(), &rb.t, zo.view(), &ob.t)?.max(0.0);
                }
            }
            objective += w.lambda * eps_ov;
        }

        if !objective.is_finite() {
            trace.records.push(TraceRecord {
                step: s,
                r_obs,
                g_norm: norm(&g),
                eps_ov,
                nu_norm: norm(&bundle.nu),
                objective,
            });
            return Err(FusionError::Divergence {
                step: s,
                trace: Box::new(trace),
            });
        }
        if s % cfg.log_every.max(1) == 0 || s + 1 == cfg.iters {
            trace.records.push(TraceRecord {
                step: s,
                r_obs,
                g_norm: norm(&g),
                eps_ov,
                nu_norm: norm(&bundle.nu),
                objective,
            });
        }

        // (iii) primal descent
        if let Some(up) = &up_o {
            let gr = bundle
                .model
                .backward(&tape_o, up.view(), dz_o.as_ref().map(|d| d.view()))?;
            for (a, b) in grad.iter_mut().zip(gr.flat()) {
                *a += b;
            }
        }
        // a zero upstream contributes nothing, so skipping it keeps trajectories identical
        if let Some(up) = up_r.as_ref().filter(|u| dz_r.is_some() || u.iter().any(|&v| v != 0.0)) {
            let gr = bundle
                .model
                .backward(&tape_r, up.view(), dz_r.as_ref().map(|d| d.view()))?;
            for (a, b) in grad.iter_mut().zip(gr.flat()) {
                *a += b;
            }
        }
        if let Some(cap) = cfg.grad_clip {
            let gn = norm(&grad);
            if gn > cap {
                let scale = cap / gn;
                grad.iter_mut().for_each(|v| *v *= scale);
            }
        }
        bundle.model.step(-cfg.step_size(s), &grad);

        // (iv) projected dual ascent with the updated parameters on the same batch
        if w.dual && radius > 0.0 {
            let rb = rb.as_ref().expect("rct batch");
            let m = bundle.model.predict(rb.x.view(), &rb.t)?;
            let g_new = moment_residual(
                &rb.y,
                &rb.t,
                m.as_slice().expect("contiguous"),
                &data.probs,
                rb.strata.as_deref(),
            )?
            .g;
            for (nu, gk) in bundle.nu.iter_mut().zip(&g_new) {
                *nu += cfg.eta_dual * gk;
            }
            project_ball(&mut bundle.nu, radius);
        }
        bundle.step_count = s + 1;
    }
    Ok((bundle, trace))
}

pub fn train_constrained_pd(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelBundle, TrainTrace)> {
    data.require(Source::Rct)?;
    data.require(Source::Obs)?;
    train(data, cfg, TrainMode::PrimalDual)
}

pub fn train_penalty(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelBundle, TrainTrace)> {
    data.require(Source::Rct)?;
    data.require(Source::Obs)?;
    train(data, cfg, TrainMode::Penalty)
}

pub fn train_weighted(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelBundle, TrainTrace)> {
    data.require(Source::Rct)?;
    data.require(Source::Obs)?;
    train(data, cfg, TrainMode::Weighted)
}

pub fn train_obs_only(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelBundle, TrainTrace)> {
    data.require(Source::Obs)?;
    train(data, cfg, TrainMode::ObsOnly)
}

pub fn train_rct_only(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelBundle, TrainTrace)> {
    data.require(Source::Rct)?;
    train(data, cfg, TrainMode::RctOnly)
}

pub fn train_ablation(data: &Dataset, cfg: &TrainConfig, ablation: Ablation) -> Result<(ModelBundle, TrainTrace)> {
    match ablation {
        Ablation::DualOnly => train_constrained_pd(
            data,
            &TrainConfig {
                lambda_ov: 0.0,
                ..cfg.clone()
            },
        ),
        Ablation::IpmOnly => train_penalty(
            data,
            &TrainConfig {
                rho: 0.0,
                ..cfg.clone()
            },
        ),
    }
}

/// Population-style quantities of a fitted bundle on the rows of `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub r_obs: Option<f64>,
    pub r_rct: Option<f64>,
    pub g: Vec<f64>,
    pub g_norm: f64,
    /// Kernel MMD between the sources on `(phi(x), t)`.
    pub eps_ov: Option<f64>,
}

fn strided(rows: &[usize], cap: usize) -> Vec<usize> {
    if rows.len() <= cap {
        return rows.to_vec();
    }
    (0..cap).map(|i| rows[i * rows.len() / cap]).collect()
}

fn mse_rows(bundle: &ModelBundle, data: &Dataset, rows: &[usize]) -> Result<Option<f64>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let m = bundle.predict(data.x_rows(rows).view(), &data.t_rows(rows))?;
    Ok(Some(sq_loss(&m, &data.y_rows(rows)).0))
}

/// Risks, moment residual and overlap discrepancy of `bundle` on `data`. The
/// MMD uses at most 1000 evenly strided rows per source.
pub fn evaluate_objective_terms(bundle: &ModelBundle, data: &Dataset) -> Result<ObjectiveTerms> {
    let obs = data.rows_of(Source::Obs);
    let rct = data.rows_of(Source::Rct);
    let (g, g_norm) = if rct.is_empty() {
        (Vec::new(), 0.0)
    } else {
        let m = bundle.predict(data.x_rows(&rct).view(), &data.t_rows(&rct))?;
        let strata = data.strata_rows(&rct);
        let r = moment_residual(
            &data.y_rows(&rct),
            &data.t_rows(&rct),
            m.as_slice().expect("contiguous"),
            &data.probs,
            strata.as_deref(),
        )?;
        let n = r.norm();
        (r.g, n)
    };
    let eps_ov = if obs.is_empty() || rct.is_empty() {
        None
    } else {
        let (ro, rr) = (strided(&obs, EVAL_MMD_ROWS), strided(&rct, EVAL_MMD_ROWS));
        let fo = append_one_hot(
            bundle.represent(data.x_rows(&ro).view())?.view(),
            &data.t_rows(&ro),
            data.n_arms,
        )?;
        let fr = append_one_hot(
            bundle.represent(data.x_rows(&rr).view())?.view(),
            &data.t_rows(&rr),
            data.n_arms,
        )?;
        Some(mmd_joint(fr.view(), fo.view(), None)?.value)
    };
    Ok(ObjectiveTerms {
        r_obs: mse_rows(bundle, data, &obs)?,
        r_rct: mse_rows(bundle, data, &rct)?,
        g,
        g_norm,
        eps_ov,
    })
}

/// `R_o + (mu_o / L_g^2) (|g| + c_ov eps_ov)^2`.
pub fn q_hat_objective(r_obs: f64, g_norm: f64, eps_ov: f64, cfg: &TrainConfig) -> f64 {
    let v = g_norm + cfg.c_ov * eps_ov;
    r_obs + cfg.mu_o_over_lg2 * v * v
}

/// [`q_hat_objective`] of a fitted bundle evaluated on `data`.
pub fn q_hat(bundle: &ModelBundle, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let terms = evaluate_objective_terms(bundle, data)?;
    let r = terms.r_obs.ok_or(FusionError::MissingSource(Source::Obs))?;
    Ok(q_hat_objective(r, terms.g_norm, terms.eps_ov.unwrap_or(0.0), cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub r_obs: f64,
    pub r_rct: f64,
    pub g_norm: f64,
    /// Root mean square of `m_alpha - m_0` over the randomized evaluation rows.
    pub path_dist: f64,
}

/// Weighted fusion along `alphas` with a shared seed and initialization,
/// evaluated on `eval`.
pub fn alpha_sweep(train_data: &Dataset, eval: &Dataset, alphas: &[f64], cfg: &TrainConfig) -> Result<Vec<AlphaRow>> {
    if alphas.first() != Some(&0.0) || alphas.windows(2).any(|p| p[0] > p[1]) {
        return Err(FusionError::InvalidConfig(
            "alpha grid must be ascending and start at 0".into(),
        ));
    }
    let rct = eval.require(Source::Rct)?;
    let x_r = eval.x_rows(&rct);
    let t_r = eval.t_rows(&rct);
    let mut base: Option<Array1<f64>> = None;
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let (bundle, _) = train_weighted(train_data, &TrainConfig { alpha, ..cfg.clone() })?;
        let terms = evaluate_objective_terms(&bundle, eval)?;
        let pred = bundle.predict(x_r.view(), &t_r)?;
        let b = base.get_or_insert_with(|| pred.clone());
        let path_dist = ((&pred - &*b).mapv(|v| v * v).sum() / pred.len() as f64).sqrt();
        out.push(AlphaRow {
            alpha,
            r_obs: terms.r_obs.unwrap_or(f64::NAN),
            r_rct: terms.r_rct.unwrap_or(f64::NAN),
            g_norm: terms.g_norm,
            path_dist,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_synthetic, SyntheticConfig};

    fn tiny_data(seed: u64) -> Dataset {
        gen_synthetic(&SyntheticConfig {
            n_rct: 120,
            n_obs: 240,
            n_cont: 10,
            n_cat: 2,
            ..SyntheticConfig::appendix_f(seed)
        })
        .unwrap()
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            iters: 30,
            batch_obs: 32,
            batch_rct: 32,
            seed,
            log_every: 1,
            arch: Architecture {
                rep_hidden: vec![8],
                rep_dim: 4,
                predictor_hidden: vec![8],
                critic_hidden: vec![8],
                ..Architecture::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn degenerate_pd_matches_obs_only() {
        let data = tiny_data(1);
        let cfg = TrainConfig {
            rho: 0.0,
            lambda_ov: 0.0,
            lambda_dual: 0.0,
            ..quick(3)
        };
        let (a, ta) = train_constrained_pd(&data, &cfg).unwrap();
        let (b, tb) = train_obs_only(&data, &cfg).unwrap();
        assert_eq!(a.model.params_flat(), b.model.params_flat());
        let ra: Vec<f64> = ta.records.iter().map(|r| r.r_obs).collect();
        let rb: Vec<f64> = tb.records.iter().map(|r| r.r_obs).collect();
        assert_eq!(ra, rb);
    }

    #[test]
    fn penalty_at_zero_rho_matches_obs_only() {
        let data = tiny_data(2);
        let cfg = TrainConfig {
            rho: 0.0,
            lambda_ov: 0.0,
            ..quick(4)
        };
        let (a, _) = train_penalty(&data, &cfg).unwrap();
        let (b, _) = train_obs_only(&data, &cfg).unwrap();
        assert_eq!(a.model.params_flat(), b.model.params_flat());
    }

    #[test]
    fn weighted_at_zero_alpha_matches_obs_only() {
        let data = tiny_data(2);
        let cfg = TrainConfig { alpha: 0.0, ..quick(5) };
        let (a, _) = train_weighted(&data, &cfg).unwrap();
        let (b, _) = train_obs_only(&data, &cfg).unwrap();
        assert_eq!(a.model.params_flat(), b.model.params_flat());
    }

    #[test]
    fn dual_only_is_pd_without_overlap_term() {
        let data = tiny_data(3);
        let cfg = TrainConfig {
            lambda_ov: 0.0,
            ..quick(6)
        };
        let (a, ta) = train_ablation(&data, &cfg, Ablation::DualOnly).unwrap();
        let (b, tb) = train_constrained_pd(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn deterministic_trace() {
        let data = tiny_data(4);
        let (_, a) = train_constrained_pd(&data, &quick(8)).unwrap();
        let (_, b) = train_constrained_pd(&data, &quick(8)).unwrap();
        assert_eq!(a, b);
        assert!(a.records.iter().all(|r| r.objective.is_finite()));
    }

    #[test]
    fn critic_mode_runs() {
        let data = tiny_data(5);
        let cfg = TrainConfig {
            ipm: IpmKind::Critic,
            ..quick(9)
        };
        let (b, t) = train_constrained_pd(&data, &cfg).unwrap();
        assert_eq!(b.step_count, 30);
        assert!(t.records.iter().all(|r| r.eps_ov >= 0.0));
    }

    #[test]
    fn dual_stays_in_ball() {
        let data = tiny_data(6);
        let cfg = TrainConfig {
            lambda_dual: 0.05,
            eta_dual: 10.0,
            ..quick(1)
        };
        let (b, _) = train_constrained_pd(&data, &cfg).unwrap();
        assert!(norm(&b.nu) <= 0.05 + 1e-12);
    }

    #[test]
    fn missing_source_is_typed() {
        let data = tiny_data(7);
        let obs_only = data.select(&data.rows_of(Source::Obs));
        assert!(matches!(
            train_constrained_pd(&obs_only, &quick(1)),
            Err(FusionError::MissingSource(Source::Rct))
        ));
    }

    #[test]
    fn divergence_is_typed() {
        let data = tiny_data(8);
        let cfg = TrainConfig {
            eta_primal: 1e200,
            grad_clip: None,
            ..quick(1)
        };
        match train_obs_only(&data, &cfg) {
            Err(FusionError::Divergence { trace, .. }) => assert!(!trace.records.is_empty()),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn q_hat_reduces_to_risk() {
        let cfg = TrainConfig::default();
        assert_eq!(q_hat_objective(0.7, 0.0, 0.0, &cfg), 0.7);
        let one = q_hat_objective(0.0, 0.1, 0.05, &cfg);
        let two = q_hat_objective(0.0, 0.2, 0.1, &cfg);
        assert!((two - 4.0 * one).abs() < 1e-15);
    }
}

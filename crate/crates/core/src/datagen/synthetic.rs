//! Semi-synthetic randomized + observational generator with a latent support
//! mismatch, mixed covariates and an unobserved confounder.

use ndarray::{Array2, Array3, ArrayView1};
use rand::distr::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Source};
use crate::error::{FusionError, Result};
use crate::moments::AssignmentProbs;

/// Dimension of the latent coordinates.
pub const N_LATENT: usize = 2;

/// Half-plane `normal . z > offset` of the latent space where the
/// observational policy never assigns arm 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub normal: [f64; 2],
    pub offset: f64,
}

impl Exclusion {
    pub fn contains(&self, z: ArrayView1<'_, f64>) -> bool {
        self.normal[0] * z[0] + self.normal[1] * z[1] > self.offset
    }

    /// Half-plane through the origin with a seeded random direction.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            normal: [angle.cos(), angle.sin()],
            offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_rct: usize,
    pub n_obs: usize,
    pub n_cont: usize,
    pub n_cat: usize,
    pub n_levels: usize,
    pub sigma_rct: f64,
    pub sigma_obs: f64,
    /// 0 keeps the narrow observational latent law; 1 matches the randomized one.
    pub overlap_dial: f64,
    pub exclusion: Option<Exclusion>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::appendix_f(0)
    }
}

impl SyntheticConfig {
    /// 10,000 randomized and 40,000 observational rows.
    pub fn appendix_f(seed: u64) -> Self {
        Self {
            n_rct: 10_000,
            n_obs: 40_000,
            n_cont: 120,
            n_cat: 40,
            n_levels: 4,
            sigma_rct: 3.0,
            sigma_obs: 1.0,
            overlap_dial: 0.0,
            exclusion: None,
            seed,
        }
    }

    /// 5,000 rows at the same 1:4 source ratio.
    pub fn section4(dial: f64, seed: u64) -> Self {
        Self {
            n_rct: 1_000,
            n_obs: 4_000,
            overlap_dial: dial,
            ..Self::appendix_f(seed)
        }
    }

    /// Minimal overlap plus a random latent region the observational policy never treats.
    pub fn severe(seed: u64) -> Self {
        Self {
            exclusion: Some(Exclusion::random(seed)),
            ..Self::section4(0.0, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FusionError::InvalidConfig(m.to_string()));
        if self.n_rct == 0 || self.n_obs == 0 {
            return bad("sample counts must be positive");
        }
        if self.n_cont < 10 {
            return bad("the outcome model reads ten continuous covariates");
        }
        if self.n_cat > 0 && self.n_levels < 2 {
            return bad("categorical covariates need at least two levels");
        }
        if !(self.sigma_rct > 0.0 && self.sigma_obs > 0.0) {
            return bad("latent scales must be positive");
        }
        if !(0.0..=1.0).contains(&self.overlap_dial) {
            return bad("overlap dial must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n_cont + self.n_cat * self.n_levels
    }

    pub fn effective_sigma_obs(&self) -> f64 {
        self.sigma_obs + self.overlap_dial * (self.sigma_rct - self.sigma_obs)
    }

    pub fn confounder_coef(&self) -> f64 {
        0.9 * (1.0 - 0.5 * self.overlap_dial)
    }
}

/// Fixed weight objects drawn once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub config: SyntheticConfig,
    /// `2 x n_cont` loading matrix.
    pub a: Array2<f64>,
    /// `n_cat x L x 2` latent logit weights; level 0 is the zero reference.
    pub w_z: Array3<f64>,
    /// `n_cat x L` logit intercepts; level 0 is zero.
    pub b: Array2<f64>,
    pub w_mu: Array2<f64>,
    pub w_tau: Array2<f64>,
}

impl GenerationRecord {
    fn draw(cfg: &SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let (nc, nk, l) = (cfg.n_cont, cfg.n_cat, cfg.n_levels);
        let a = Array2::from_shape_fn((N_LATENT, nc), |_| normal());
        let w_z = Array3::from_shape_fn((nk, l, N_LATENT), |(_, lev, _)| if lev == 0 { 0.0 } else { normal() });
        let b = Array2::from_shape_fn((nk, l), |(_, lev)| if lev == 0 { 0.0 } else { normal() });
        let w_mu = Array2::from_shape_fn((nk, l), |_| normal());
        let w_tau = Array2::from_shape_fn((nk, l), |_| normal());
        Self {
            config: cfg.clone(),
            a,
            w_z,
            b,
            w_mu,
            w_tau,
        }
    }

    fn cat_contrib(table: &Array2<f64>, levels: ArrayView1<'_, usize>) -> f64 {
        levels.iter().enumerate().map(|(j, &lev)| table[[j, lev]]).sum()
    }
}

fn soft(v: f64) -> f64 {
    v / (1.0 + v.abs())
}

/// Effect formula; `xc` holds at least the first ten continuous covariates.
fn tau_formula(xc: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>, cat_tau: f64, n_cat: usize) -> f64 {
    let cat = if n_cat == 0 {
        0.0
    } else {
        cat_tau / (n_cat as f64).sqrt()
    };
    0.5 + 0.7 * (0.7 * xc[5] + 0.3 * xc[6]).tanh() - 0.5 * (0.5 * xc[7]).sin() + 0.4 * soft(z[0]) - 0.3 * soft(z[1])
        + 0.25 * (xc[8] * xc[9] / (1.0 + xc[9].abs())).tanh()
        + 0.5 * cat
}

fn mu0_formula(xc: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>, u: f64, cat_mu: f64, n_cat: usize) -> f64 {
    let cat = if n_cat == 0 {
        0.0
    } else {
        cat_mu / (n_cat as f64).sqrt()
    };
    let (z1, z2) = (z[0], z[1]);
    1.2 * xc[0].tanh() + 0.8 * xc[1].sin() + 0.5 * xc[2] * xc[3] / (1.0 + xc[3].abs()) - 0.7 * (1.0 + xc[4].abs()).ln()
        + 0.3 * z1 * z1 / (1.0 + z1 * z1)
        - 0.2 * z2 * z2 / (1.0 + z2 * z2)
        + 0.6 * u
        + 0.4 * cat
}

fn obs_score(xc: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>, u: f64, u_coef: f64) -> f64 {
    0.6 * xc[0].tanh() + 0.4 * xc[1].sin() - 0.3 * xc[2] * xc[2] / (1.0 + xc[2].abs()) + 0.5 * z[0] - 0.2 * z[1]
        + u_coef * u
}

struct Block {
    x: Array2<f64>,
    cat: Array2<usize>,
    z: Array2<f64>,
    t: Vec<usize>,
    y: Vec<f64>,
    u: Vec<f64>,
    tau: Vec<f64>,
    mu0: Vec<f64>,
    structural: Vec<bool>,
}

fn gen_block(rec: &GenerationRecord, source: Source, n: usize) -> Block {
    let cfg = &rec.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(match source {
        Source::Rct => 1,
        Source::Obs => 2,
    });
    let sigma = match source {
        Source::Rct => cfg.sigma_rct,
        Source::Obs => cfg.effective_sigma_obs(),
    };
    let (nc, nk, l) = (cfg.n_cont, cfg.n_cat, cfg.n_levels);
    let latent = Normal::new(0.0, sigma).expect("positive scale");
    let coin = Bernoulli::new(0.5).expect("valid probability");

    let mut out = Block {
        x: Array2::zeros((n, cfg.dim())),
        cat: Array2::zeros((n, nk)),
        z: Array2::zeros((n, N_LATENT)),
        t: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        tau: Vec::with_capacity(n),
        mu0: Vec::with_capacity(n),
        structural: Vec::with_capacity(n),
    };
    let mut logits = vec![0.0; l];
    for i in 0..n {
        let z = [latent.sample(&mut rng), latent.sample(&mut rng)];
        out.z[[i, 0]] = z[0];
        out.z[[i, 1]] = z[1];
        for j in 0..nc {
            let eps: f64 = rng.sample(StandardNormal);
            out.x[[i, j]] = z[0] * rec.a[[0, j]] + z[1] * rec.a[[1, j]] + eps;
        }
        for j in 0..nk {
            for (lev, lg) in logits.iter_mut().enumerate() {
                *lg = z[0] * rec.w_z[[j, lev, 0]] + z[1] * rec.w_z[[j, lev, 1]] + rec.b[[j, lev]];
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            let draw: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut level = l - 1;
            for (lev, lg) in logits.iter().enumerate() {
                acc += (lg - max).exp();
                if draw < acc {
                    level = lev;
                    break;
                }
            }
            out.cat[[i, j]] = level;
            out.x[[i, nc + j * l + level]] = 1.0;
        }
        let u: f64 = rng.sample(StandardNormal);
        let xc = out.x.row(i);
        let zr = out.z.row(i);
        let excluded = cfg.exclusion.is_some_and(|e| e.contains(zr));
        let w = match source {
            Source::Rct => usize::from(coin.sample(&mut rng)),
            Source::Obs => {
                let score = obs_score(xc, zr, u, cfg.confounder_coef());
                let pi = 1.0 / (1.0 + (-score).exp());
                let draw: f64 = rng.random();
                usize::from(!excluded && draw < pi)
            }
        };
        let levels = out.cat.row(i);
        let tau = tau_formula(xc, zr, GenerationRecord::cat_contrib(&rec.w_tau, levels), nk);
        let mu0 = mu0_formula(xc, zr, u, GenerationRecord::cat_contrib(&rec.w_mu, levels), nk);
        let sd = 0.8 + 0.2 * soft(xc[0].abs());
        let eps: f64 = rng.sample(StandardNormal);
        out.y.push(mu0 + w as f64 * tau + sd * eps);
        out.t.push(w);
        out.u.push(u);
        out.tau.push(tau);
        out.mu0.push(mu0);
        out.structural.push(excluded);
    }
    out
}

/// Randomized rows first, then observational rows.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let rec = GenerationRecord::draw(cfg);
    let rct = gen_block(&rec, Source::Rct, cfg.n_rct);
    let obs = gen_block(&rec, Source::Obs, cfg.n_obs);
    let cat = |a: &Array2<f64>, b: &Array2<f64>| ndarray::concatenate![ndarray::Axis(0), *a, *b];
    let join = |a: &Vec<f64>, b: &Vec<f64>| a.iter().chain(b).copied().collect::<Vec<_>>();

    let source = std::iter::repeat_n(Source::Rct, cfg.n_rct)
        .chain(std::iter::repeat_n(Source::Obs, cfg.n_obs))
        .collect();
    let mut ds = Dataset::new(
        cat(&rct.x, &obs.x),
        rct.t.iter().chain(&obs.t).copied().collect(),
        join(&rct.y, &obs.y),
        source,
        AssignmentProbs::marginal(vec![0.5, 0.5])?,
    )?;
    ds.tau_true = Some(join(&rct.tau, &obs.tau));
    ds.mu0 = Some(join(&rct.mu0, &obs.mu0));
    ds.u = Some(join(&rct.u, &obs.u));
    ds.z_latent = Some(cat(&rct.z, &obs.z));
    ds.x_cat = Some(ndarray::concatenate![ndarray::Axis(0), rct.cat, obs.cat]);
    ds.structural = cfg
        .exclusion
        .map(|_| rct.structural.iter().chain(&obs.structural).copied().collect());
    ds.record = Some(rec);
    Ok(ds)
}

/// Recomputes the effect from stored covariates, latents and weight table.
pub fn true_tau(ds: &Dataset) -> Result<Vec<f64>> {
    let (rec, z) = match (&ds.record, &ds.z_latent) {
        (Some(r), Some(z)) => (r, z),
        _ => return Err(FusionError::NotSynthetic),
    };
    let nk = rec.config.n_cat;
    let levels = match &ds.x_cat {
        Some(c) => c.clone(),
        None if nk == 0 => Array2::zeros((ds.len(), 0)),
        None => return Err(FusionError::NotSynthetic),
    };
    Ok((0..ds.len())
        .map(|i| {
            let cat = GenerationRecord::cat_contrib(&rec.w_tau, levels.row(i));
            tau_formula(ds.x.row(i), z.row(i), cat, nk)
        })
        .collect())
}

impl Dataset {
    /// JSON sidecar with the generation record.
    pub fn save_sidecar(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let rec = self.record.as_ref().ok_or(FusionError::NotSynthetic)?;
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, rec)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_rct: 300,
            n_obs: 600,
            n_cont: 12,
            n_cat: 3,
            ..SyntheticConfig::appendix_f(seed)
        }
    }

    #[test]
    fn tau_constant_at_origin() {
        let zeros = ndarray::Array1::<f64>::zeros(10);
        let z = array![0.0, 0.0];
        assert_eq!(tau_formula(zeros.view(), z.view(), 0.0, 40), 0.5);
    }

    #[test]
    fn shapes_and_one_hot() {
        let cfg = small(1);
        let ds = gen_synthetic(&cfg).unwrap();
        assert_eq!(ds.len(), 900);
        assert_eq!(ds.dim(), 12 + 3 * 4);
        for i in 0..ds.len() {
            for j in 0..3 {
                let block: f64 = (0..4).map(|l| ds.x[[i, 12 + j * 4 + l]]).sum();
                assert_eq!(block, 1.0);
            }
        }
        assert_eq!(ds.count(Source::Rct), 300);
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(gen_synthetic(&small(5)).unwrap(), gen_synthetic(&small(5)).unwrap());
        assert_ne!(gen_synthetic(&small(5)).unwrap().y, gen_synthetic(&small(6)).unwrap().y);
    }

    #[test]
    fn stored_tau_matches_recomputation() {
        let ds = gen_synthetic(&small(2)).unwrap();
        let again = true_tau(&ds).unwrap();
        for (a, b) in again.iter().zip(ds.tau_true.as_ref().unwrap()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn exclusion_blocks_observational_treatment() {
        let cfg = SyntheticConfig {
            exclusion: Some(Exclusion {
                normal: [1.0, 0.0],
                offset: 0.0,
            }),
            ..small(3)
        };
        let ds = gen_synthetic(&cfg).unwrap();
        let flags = ds.structural.as_ref().unwrap();
        for i in ds.rows_of(Source::Obs) {
            if flags[i] {
                assert_eq!(ds.t[i], 0);
            }
        }
        assert!(flags.iter().any(|&f| f));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(0);
        cfg.overlap_dial = 1.5;
        assert!(gen_synthetic(&cfg).is_err());
        cfg.overlap_dial = 0.0;
        cfg.n_rct = 0;
        assert!(gen_synthetic(&cfg).is_err());
    }
}

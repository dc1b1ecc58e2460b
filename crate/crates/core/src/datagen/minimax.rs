//! Two-cell latent, binary treatment construction with an `epsilon` shift of
//! treated mass between the latent cells.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{Dataset, Source};
use crate::error::{FusionError, Result};
use crate::moments::AssignmentProbs;

/// Cell `(z, t)` with `z = 0` for latent `a` and `z = 1` for latent `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinimaxCell {
    pub z: usize,
    pub t: usize,
}

impl MinimaxCell {
    pub const ALL: [MinimaxCell; 4] = [
        MinimaxCell { z: 0, t: 0 },
        MinimaxCell { z: 0, t: 1 },
        MinimaxCell { z: 1, t: 0 },
        MinimaxCell { z: 1, t: 1 },
    ];

    /// Conditional outcome mean: `+1` on `(a,1)`, `-1` on `(b,1)`, 0 under control.
    pub fn outcome_mean(self) -> f64 {
        match (self.z, self.t) {
            (0, 1) => 1.0,
            (1, 1) => -1.0,
            _ => 0.0,
        }
    }
}

/// Exact cell laws, ordered as [`MinimaxCell::ALL`], plus samples from each.
#[derive(Debug, Clone)]
pub struct MinimaxToy {
    pub epsilon: f64,
    pub law_obs: [f64; 4],
    pub law_rct_balanced: [f64; 4],
    pub law_rct_imbalanced: [f64; 4],
    pub obs: Dataset,
    pub rct_balanced: Dataset,
    pub rct_imbalanced: Dataset,
}

impl MinimaxToy {
    pub fn laws(epsilon: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
        let q = 0.25;
        let h = epsilon / 2.0;
        ([q, q - h, q, q + h], [q; 4], [q, q + h, q, q - h])
    }
}

fn sample(law: &[f64; 4], n: usize, source: Source, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut x = Array2::zeros((n, 1));
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        let mut cell = MinimaxCell::ALL[3];
        for (c, p) in MinimaxCell::ALL.iter().zip(law) {
            acc += p;
            if draw < acc {
                cell = *c;
                break;
            }
        }
        x[[i, 0]] = cell.z as f64;
        t.push(cell.t);
        let yi = if cell.t == 1 {
            cell.outcome_mean()
        } else if rng.random::<bool>() {
            1.0
        } else {
            -1.0
        };
        y.push(yi);
    }
    Dataset::new(x, t, y, vec![source; n], AssignmentProbs::marginal(vec![0.5, 0.5])?)
}

/// Samples `n_per_source` rows from the observational law and from both
/// randomized variants. `epsilon = 0` gives the symmetric instance.
pub fn gen_minimax_toy(epsilon: f64, n_per_source: usize, seed: u64) -> Result<MinimaxToy> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(FusionError::InvalidConfig(format!("epsilon {epsilon} outside [0, 1)")));
    }
    let (law_obs, law_rct_balanced, law_rct_imbalanced) = MinimaxToy::laws(epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = sample(&law_obs, n_per_source, Source::Obs, &mut rng)?;
    let rct_balanced = sample(&law_rct_balanced, n_per_source, Source::Rct, &mut rng)?;
    let rct_imbalanced = sample(&law_rct_imbalanced, n_per_source, Source::Rct, &mut rng)?;
    Ok(MinimaxToy {
        epsilon,
        law_obs,
        law_rct_balanced,
        law_rct_imbalanced,
        obs,
        rct_balanced,
        rct_imbalanced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laws_sum_to_one() {
        for eps in [0.0, 0.2, 0.9] {
            let (a, b, c) = MinimaxToy::laws(eps);
            for law in [a, b, c] {
                assert!((law.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn treated_outcomes_deterministic() {
        let toy = gen_minimax_toy(0.2, 500, 1).unwrap();
        for ds in [&toy.obs, &toy.rct_balanced, &toy.rct_imbalanced] {
            for i in 0..ds.len() {
                if ds.t[i] == 1 {
                    let expect = if ds.x[[i, 0]] == 0.0 { 1.0 } else { -1.0 };
                    assert_eq!(ds.y[i], expect);
                } else {
                    assert_eq!(ds.y[i].abs(), 1.0);
                }
            }
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(gen_minimax_toy(1.0, 10, 0).is_err());
        assert!(gen_minimax_toy(-0.1, 10, 0).is_err());
    }
}

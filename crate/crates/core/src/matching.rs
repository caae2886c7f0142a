//! One-to-one assignment of real targets to predictions.

use serde::{Deserialize, Serialize};

use crate::boxops::{box_cost, BoxCxCyWH};
use crate::error::{Error, Result};
use crate::model::PredictionSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub embedding: f64,
    /// Down-weight on the no-object class in the classification term.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            embedding: 1.0,
            no_object: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.class, self.l1, self.giou, self.embedding, self.no_object];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!("loss weights must be non-negative: {self:?}")));
        }
        if self.l1 + self.giou <= 0.0 {
            return Err(Error::Invalid("box loss needs a positive L1 or GIoU weight".into()));
        }
        Ok(())
    }
}

/// Target `j` is assigned prediction `pairs[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<usize>,
    pub cost: f64,
}

/// `cost[j][q] = λc·(1 − p̂_q(class_j)) + λl1·L1 + λgiou·(1 − GIoU)`.
pub fn matching_cost_matrix(
    targets: &[(usize, BoxCxCyWH)],
    preds: &PredictionSet,
    weights: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    let probs: Vec<Vec<f32>> = (0..preds.len()).map(|q| preds.probs(q)).collect();
    let boxes: Vec<BoxCxCyWH> = (0..preds.len())
        .map(|q| preds.bbox(q).validate())
        .collect::<Result<_>>()?;
    targets
        .iter()
        .map(|&(class, target)| {
            boxes
                .iter()
                .zip(&probs)
                .map(|(&pred, p)| {
                    let (l1, giou_cost) = box_cost(target, pred)?;
                    Ok(weights.class * (1.0 - p[class] as f64) + weights.l1 * l1 + weights.giou * giou_cost)
                })
                .collect()
        })
        .collect()
}

/// Minimum-cost injective map from the rows of an `m × k` matrix (`m ≤ k`)
/// to its columns, by shortest augmenting paths with row potentials.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<Assignment> {
    let m = cost.len();
    if m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        });
    }
    let k = cost[0].len();
    if cost.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if m > k {
        return Err(Error::TooManyTargets { rows: m, cols: k });
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("cost matrix has non-finite entries".into()));
    }

    // 1-based potentials and matching; column 0 is the virtual start.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; k + 1];
    let mut row_of = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=m {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = vec![0; m];
    for j in 1..=k {
        if row_of[j] != 0 {
            pairs[row_of[j] - 1] = j - 1;
        }
    }
    let total = pairs.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    Ok(Assignment { pairs, cost: total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..used.len() {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[row][c] + go(cost, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn small_examples() {
        let a = hungarian_assign(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(a.pairs, vec![0, 1]);
        assert_eq!(a.cost, 0.0);
        assert_eq!(hungarian_assign(&[vec![5.0, 2.0, 9.0]]).unwrap().pairs, vec![1]);
        assert!(matches!(
            hungarian_assign(&[vec![1.0], vec![2.0]]),
            Err(Error::TooManyTargets { rows: 2, cols: 1 })
        ));
        assert_eq!(hungarian_assign(&[vec![3.0, 3.0, 3.0]]).unwrap().pairs, vec![0]);
    }

    #[test]
    fn matches_exhaustive_search_on_random_5x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let cost: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
            let a = hungarian_assign(&cost).unwrap();
            assert!((a.cost - brute_force(&cost)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn optimal_and_injective(m in 1usize..=6, extra in 0usize..=2, seed in any::<u64>(), integer in any::<bool>()) {
            let k = (m + extra).min(8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..k).map(|_| if integer { rng.gen_range(0..4) as f64 } else { rng.gen_range(0.0..1.0) }).collect())
                .collect();
            let a = hungarian_assign(&cost).unwrap();
            let mut seen = vec![false; k];
            for &c in &a.pairs {
                prop_assert!(!seen[c]);
                seen[c] = true;
            }
            prop_assert_eq!(a.cost, brute_force(&cost));
        }
    }

    fn preds(logits: Vec<Vec<f32>>, boxes: Vec<Vec<f32>>) -> PredictionSet {
        let k = logits.len();
        PredictionSet {
            logits: Tensor::from_rows(&logits).unwrap(),
            boxes: Tensor::from_rows(&boxes).unwrap(),
            embeddings: Tensor::zeros(&[k, 4]),
        }
    }

    #[test]
    fn cost_examples() {
        let w = LossWeights::default();
        let b = BoxCxCyWH::new(0.5, 0.5, 0.2, 0.2);
        let p = preds(vec![vec![0.0; 7]], vec![b.to_array().to_vec()]);
        let c = matching_cost_matrix(&[(2, b)], &p, &w).unwrap();
        assert!((c[0][0] - 2.0 * (1.0 - 1.0 / 7.0)).abs() < 1e-6);

        let mut sure = vec![-100.0; 7];
        sure[2] = 100.0;
        let p = preds(vec![sure], vec![b.to_array().to_vec()]);
        assert!(matching_cost_matrix(&[(2, b)], &p, &w).unwrap()[0][0].abs() < 1e-9);

        let degenerate = preds(vec![vec![0.0; 7]], vec![vec![0.5, 0.5, 0.0, 0.0]]);
        assert!(matching_cost_matrix(&[(0, b)], &degenerate, &w).is_err());
    }

    #[test]
    fn cost_rows_follow_target_order() {
        let w = LossWeights::default();
        let p = preds(
            vec![vec![0.1, 0.3, -0.2], vec![1.0, 0.0, 0.5]],
            vec![vec![0.3, 0.3, 0.2, 0.2], vec![0.7, 0.6, 0.3, 0.1]],
        );
        let t = [(0, BoxCxCyWH::new(0.3, 0.35, 0.2, 0.2)), (1, BoxCxCyWH::new(0.6, 0.6, 0.2, 0.3))];
        let fwd = matching_cost_matrix(&t, &p, &w).unwrap();
        let rev = matching_cost_matrix(&[t[1], t[0]], &p, &w).unwrap();
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
        assert!(fwd.iter().flatten().all(|&v| v >= 0.0 && v.is_finite()));
    }
}

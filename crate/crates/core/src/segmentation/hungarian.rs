use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Minimum-cost injective matching between ground-truth columns and prediction rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// matched prediction per ground-truth instance; `None` only when there are fewer predictions than instances
    pub pred_for_gt: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// `cost` is `P x G` (predictions by ground truth). Among equal-cost choices the
/// search keeps the first column it scanned, which favours lower prediction indices.
pub fn hungarian_match(cost: &Matrix) -> Result<Assignment> {
    if !cost.is_finite() {
        return Err(Error::NonFinite("matching cost matrix".into()));
    }
    let (p, g) = cost.shape();
    if g == 0 {
        return Ok(Assignment { pred_for_gt: Vec::new(), total_cost: 0.0 });
    }
    let pred_for_gt = if g <= p {
        // rows = ground truth, columns = predictions
        solve(g, p, |i, j| cost.get(j, i))
    } else {
        let gt_for_pred = solve(p, g, |i, j| cost.get(i, j));
        let mut out = vec![None; g];
        for (pred, gt) in gt_for_pred.into_iter().enumerate() {
            if let Some(gt) = gt {
                out[gt] = Some(pred);
            }
        }
        out
    };
    let total_cost = pred_for_gt
        .iter()
        .enumerate()
        .filter_map(|(gt, pred)| pred.map(|pr| cost.get(pr, gt)))
        .sum();
    Ok(Assignment { pred_for_gt, total_cost })
}

/// Shortest-augmenting-path Hungarian method for an `n x m` matrix with `n <= m`.
/// Returns the column assigned to each row.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // row matched to column j (1-based, 0 = free)
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut out = vec![None; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            out[row_of[j] - 1] = Some(j - 1);
        }
    }
    out
}

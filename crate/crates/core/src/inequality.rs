//! Gini inequality of attribution maps and the transfer arguments behind it.
//!
//! The Gini value of a nonnegative population `phi` sorted ascending is
//!
//! ```text
//! G = (1/n) * (n + 1 - 2 * sum_i (n + 1 - i) * phi_i / sum_i phi_i)
//! ```
//!
//! Populations of one element or with zero total are rejected rather than
//! mapped to zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn validate(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Degenerate(format!("population of {} element(s)", values.len())));
    }
    let mut total = 0.0;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Precondition("non-finite population entry".into()));
        }
        if v < 0.0 {
            return Err(Error::Precondition(format!("negative population entry {v}")));
        }
        total += v;
    }
    if total <= 0.0 {
        return Err(Error::Degenerate("population sums to zero".into()));
    }
    Ok(total)
}

/// Gini value of a nonnegative population.
pub fn gini(values: &[f64]) -> Result<f64> {
    let total = validate(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(gini_sorted(&sorted, total))
}

fn gini_sorted(sorted: &[f64], total: f64) -> f64 {
    let n = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &phi)| (n - i as f64) * phi)
        .sum();
    (n + 1.0 - 2.0 * weighted / total) / n
}

/// Sum an `[H, W]` map over `r x r` blocks; edge blocks are clipped.
pub fn block_sums(map: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::Precondition("block size must be >= 1".into()));
    }
    if map.shape().len() != 2 {
        return Err(Error::Shape(format!("expected [H, W], got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (bh, bw) = (h.div_ceil(r), w.div_ceil(r));
    let mut out = vec![0.0; bh * bw];
    for y in 0..h {
        for x in 0..w {
            out[(y / r) * bw + x / r] += map.data()[y * w + x];
        }
    }
    Tensor::new(vec![bh, bw], out)
}

/// Gini value of the `r x r` block-summed map.
pub fn regional_gini(map: &Tensor, r: usize) -> Result<f64> {
    let blocks = block_sums(map, r)?;
    if blocks.len() < 2 {
        return Err(Error::Degenerate(format!(
            "block size {r} leaves a single region for a {:?} map",
            map.shape()
        )));
    }
    gini(blocks.data())
}

/// Whether `gini(k * values) == gini(values)` within `tol`.
pub fn gini_scale_invariance_check(values: &[f64], k: f64, tol: f64) -> Result<bool> {
    if k <= 0.0 {
        return Err(Error::Precondition(format!("scale must be positive, got {k}")));
    }
    let scaled: Vec<f64> = values.iter().map(|v| v * k).collect();
    Ok((gini(&scaled)? - gini(values)?).abs() <= tol)
}

/// Summary row for one attribution map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiniReport {
    pub global_gini: f64,
    pub regional_gini: f64,
    pub block: usize,
    pub n: usize,
    pub method: String,
}

impl GiniReport {
    pub fn from_map(map: &Tensor, block: usize, method: &str) -> Result<Self> {
        Ok(Self {
            global_gini: gini(map.data())?,
            regional_gini: regional_gini(map, block)?,
            block,
            n: map.len(),
            method: method.to_string(),
        })
    }
}

/// One order-preserving elementary transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferStep {
    /// Sorted positions of the receiving and donating elements.
    pub low: usize,
    pub high: usize,
    pub amount: f64,
    /// Sorted population after the step.
    pub population: Vec<f64>,
    pub gini: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub initial_gini: f64,
    pub steps: Vec<TransferStep>,
    /// Final population in the caller's order, signs preserved.
    pub result: Vec<f64>,
}

fn check_transfer(values: &[f64], a: usize, b: usize, delta: f64) -> Result<()> {
    let n = values.len();
    if a >= n || b >= n || a == b {
        return Err(Error::Precondition(format!("indices {a}, {b} invalid for {n} elements")));
    }
    let (wa, wb) = (values[a].abs(), values[b].abs());
    if !(wa < wb) {
        return Err(Error::Precondition(format!("|w_a| = {wa} must be below |w_b| = {wb}")));
    }
    if delta < 0.0 || 2.0 * delta > wb - wa {
        return Err(Error::Precondition(format!(
            "transfer {delta} must satisfy 0 <= 2*delta <= {}",
            wb - wa
        )));
    }
    Ok(())
}

/// Move `delta` of magnitude from element `b` to element `a` as a sequence of
/// elementary transfers, none of which changes the sorted order.
///
/// Each step raises the receiver up to its next-larger neighbour or lowers the
/// donor down to its next-smaller neighbour, whichever comes first; on a tie
/// with a neighbour the roles pass to that neighbour. Works on absolute values.
pub fn monotonic_reduce(values: &[f64], a: usize, b: usize, delta: f64) -> Result<Reduction> {
    check_transfer(values, a, b, delta)?;
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let total = validate(&abs)?;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let initial_gini = gini_sorted(&sorted, total);

    // Receiver takes the highest slot holding |w_a|, donor the lowest holding |w_b|,
    // so the pair straddles every element strictly between them.
    let mut low = sorted.iter().rposition(|&v| v == abs[a]).expect("present");
    let mut high = sorted.iter().position(|&v| v == abs[b]).expect("present");
    let mut remaining = delta;
    let mut steps = Vec::new();
    while remaining > 0.0 {
        if low + 1 < high && sorted[low + 1] == sorted[low] {
            low += 1;
            continue;
        }
        if high - 1 > low && sorted[high - 1] == sorted[high] {
            high -= 1;
            continue;
        }
        let mut amount = remaining;
        if low + 1 < high {
            amount = amount.min(sorted[low + 1] - sorted[low]);
            amount = amount.min(sorted[high] - sorted[high - 1]);
        }
        sorted[low] += amount;
        sorted[high] -= amount;
        remaining -= amount;
        steps.push(TransferStep {
            low,
            high,
            amount,
            population: sorted.clone(),
            gini: gini_sorted(&sorted, total),
        });
    }

    let mut result = values.to_vec();
    let sign = |v: f64| if v < 0.0 { -1.0 } else { 1.0 };
    result[a] = sign(values[a]) * (abs[a] + delta);
    result[b] = sign(values[b]) * (abs[b] - delta);
    Ok(Reduction { initial_gini, steps, result })
}

/// Squared norm after moving `delta` of magnitude from `b` to `a`, via the
/// closed form `sum w^2 + 2 delta (delta - |w_b| + |w_a|)`.
pub fn sum_sq_after_transfer(w: &[f64], a: usize, b: usize, delta: f64) -> f64 {
    let sum_sq: f64 = w.iter().map(|v| v * v).sum();
    sum_sq + 2.0 * delta * (delta - w[b].abs() + w[a].abs())
}

/// Change in squared norm per change in Gini for a single order-preserving transfer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferRatio {
    pub delta_sum_sq: f64,
    pub delta_gini: f64,
    /// `delta_sum_sq / delta_gini` from the two recomputed deltas.
    pub direct: f64,
    /// `(delta - |w_b| + |w_a|) * sum|w| * k / (rank_a - rank_b)` with 1-based sorted ranks.
    pub closed_form: f64,
}

pub fn transfer_ratio(w: &[f64], a: usize, b: usize, delta: f64) -> Result<TransferRatio> {
    check_transfer(w, a, b, delta)?;
    if delta == 0.0 {
        return Err(Error::Precondition("ratio undefined for a zero transfer".into()));
    }
    let abs: Vec<f64> = w.iter().map(|v| v.abs()).collect();
    let mut after = abs.clone();
    after[a] += delta;
    after[b] -= delta;
    let sum_sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let delta_sum_sq = sum_sq(&after) - sum_sq(&abs);
    let delta_gini = gini(&after)? - gini(&abs)?;

    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let rank_a = sorted.iter().rposition(|&v| v == abs[a]).expect("present") as f64 + 1.0;
    let rank_b = sorted.iter().position(|&v| v == abs[b]).expect("present") as f64 + 1.0;
    let k = w.len() as f64;
    let l1: f64 = abs.iter().sum();
    let closed_form = (delta - abs[b] + abs[a]) * l1 * k / (rank_a - rank_b);
    Ok(TransferRatio { delta_sum_sq, delta_gini, direct: delta_sum_sq / delta_gini, closed_form })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagrangeReport {
    pub k: usize,
    pub l1: f64,
    pub trials: usize,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub min_sum_sq: f64,
    pub max_sum_sq: f64,
    pub violations: usize,
    /// `sum w^2` at the all-equal vector; should equal `lower_bound`.
    pub equal_sum_sq: f64,
    /// `sum w^2` at a one-hot vector; should equal `upper_bound`.
    pub one_hot_sum_sq: f64,
}

impl LagrangeReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.violations == 0
            && (self.equal_sum_sq - self.lower_bound).abs() <= tol * self.lower_bound
            && (self.one_hot_sum_sq - self.upper_bound).abs() <= tol * self.upper_bound
    }
}

/// Sample nonnegative vectors with fixed L1 norm and check
/// `C^2 / k <= sum w^2 <= C^2`.
pub fn lagrange_optimum_check(k: usize, l1: f64, trials: usize, rng: &mut impl Rng) -> Result<LagrangeReport> {
    if k == 0 || l1 <= 0.0 {
        return Err(Error::Precondition("need k >= 1 and a positive L1 budget".into()));
    }
    let lower = l1 * l1 / k as f64;
    let upper = l1 * l1;
    let tol = 1e-12 * upper;
    let mut min_sum_sq = f64::INFINITY;
    let mut max_sum_sq = 0.0f64;
    let mut violations = 0;
    for t in 0..trials {
        // Alternate dense and sparse draws so both ends of the range are visited.
        let mut v: Vec<f64> = (0..k)
            .map(|_| {
                let u: f64 = rng.random();
                let e = -(1.0 - u).ln();
                if t % 2 == 1 { e.powi(4) } else { e }
            })
            .collect();
        let s: f64 = v.iter().sum();
        if s == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x *= l1 / s);
        let sq: f64 = v.iter().map(|x| x * x).sum();
        min_sum_sq = min_sum_sq.min(sq);
        max_sum_sq = max_sum_sq.max(sq);
        if sq < lower - tol || sq > upper + tol {
            violations += 1;
        }
    }
    let equal_sum_sq = (0..k).map(|_| (l1 / k as f64).powi(2)).sum();
    Ok(LagrangeReport {
        k,
        l1,
        trials,
        lower_bound: lower,
        upper_bound: upper,
        min_sum_sq,
        max_sum_sq,
        violations,
        equal_sum_sq,
        one_hot_sum_sq: l1 * l1,
    })
}

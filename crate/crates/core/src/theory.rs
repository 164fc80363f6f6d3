//! Expected class-score deviation of a linear score model under masked noise.
//!
//! For `y = w·x + b` and a mask selecting coordinates `d_1..d_k`, the three
//! perturbation families give closed-form second moments of `y' - y` in terms
//! of `Σ w_d` and `Σ w_d²`. Nonlinear networks are handled through their
//! linearization at each input.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attacks::ranked_pixels;
use crate::attribution::{AttributionMap, Method};
use crate::error::{Error, Result};
use crate::models::{input_gradients, LinearScoreModel, ScoreModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseKind {
    /// `x' = x + δ ⊙ m`
    Additive,
    /// `x' = x + (δ - x) ⊙ m`
    MultAdditive,
    /// Masked pixels painted with a constant `color`.
    Occlusion { color: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub mu_delta: f64,
    pub sigma_delta: f64,
    pub mu_x: f64,
    pub sigma_x: f64,
    pub kind: NoiseKind,
}

impl NoiseSpec {
    pub fn additive(mu_delta: f64, sigma_delta: f64) -> Self {
        Self { mu_delta, sigma_delta, mu_x: 0.0, sigma_x: 0.0, kind: NoiseKind::Additive }
    }

    pub fn mult_additive(mu_delta: f64, sigma_delta: f64, mu_x: f64, sigma_x: f64) -> Self {
        Self { mu_delta, sigma_delta, mu_x, sigma_x, kind: NoiseKind::MultAdditive }
    }

    pub fn occlusion(color: f64, mu_x: f64, sigma_x: f64) -> Self {
        Self { mu_delta: color, sigma_delta: 0.0, mu_x, sigma_x, kind: NoiseKind::Occlusion { color } }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.mu_delta, self.sigma_delta, self.mu_x, self.sigma_x].iter().all(|v| v.is_finite());
        if !finite || self.sigma_delta < 0.0 || self.sigma_x < 0.0 {
            return Err(Error::Precondition(format!("invalid noise spec {self:?}")));
        }
        if let NoiseKind::Occlusion { color } = self.kind {
            if self.sigma_delta != 0.0 || self.mu_delta != color {
                return Err(Error::Precondition("occlusion needs sigma_delta = 0 and mu_delta = color".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskStats {
    pub k: usize,
    pub sum_sq: f64,
    pub sum: f64,
    pub sum_abs: f64,
}

/// Sums of `w` over the selected coordinates.
pub fn mask_stats(w: &[f64], coords: &[usize]) -> Result<MaskStats> {
    let mut s = MaskStats { k: coords.len(), ..Default::default() };
    for &i in coords {
        let v = *w.get(i).ok_or_else(|| Error::Precondition(format!("coordinate {i} outside {}", w.len())))?;
        s.sum += v;
        s.sum_sq += v * v;
        s.sum_abs += v.abs();
    }
    Ok(s)
}

/// Coordinates of an `[C, H, W]` tensor covered by the given pixels.
pub fn pixel_coords(shape: &[usize], pixels: &[usize]) -> Vec<usize> {
    let plane = shape[1] * shape[2];
    (0..shape[0]).flat_map(|c| pixels.iter().map(move |&p| c * plane + p)).collect()
}

/// Closed-form `E[(y' - y)²]`.
pub fn predicted_deviation(model: &LinearScoreModel, coords: &[usize], spec: &NoiseSpec) -> Result<f64> {
    spec.validate()?;
    let s = mask_stats(model.w.data(), coords)?;
    let sum2 = s.sum * s.sum;
    Ok(match spec.kind {
        NoiseKind::Additive => spec.mu_delta.powi(2) * sum2 + spec.sigma_delta.powi(2) * s.sum_sq,
        NoiseKind::MultAdditive => {
            (spec.mu_delta - spec.mu_x).powi(2) * sum2 + (spec.sigma_delta.powi(2) + spec.sigma_x.powi(2)) * s.sum_sq
        }
        NoiseKind::Occlusion { .. } => (spec.mu_delta - spec.mu_x).powi(2) * sum2 + spec.sigma_x.powi(2) * s.sum_sq,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return Self { mean, stderr: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, stderr: (var / n).sqrt() }
    }

    pub fn within(&self, target: f64, stderrs: f64) -> bool {
        (self.mean - target).abs() <= stderrs * self.stderr
    }
}

fn normal(mu: f64, sigma: f64) -> Result<Normal<f64>> {
    Normal::new(mu, sigma).map_err(|e| Error::Precondition(e.to_string()))
}

/// Draws Gaussian pixels `N(μ_x, σ_x²)` and noise `N(μ_δ, σ_δ²)` per sample and
/// averages `(y' - y)²`.
pub fn monte_carlo_deviation(
    model: &LinearScoreModel,
    coords: &[usize],
    spec: &NoiseSpec,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Estimate> {
    spec.validate()?;
    if samples == 0 {
        return Err(Error::Precondition("monte carlo needs samples".into()));
    }
    mask_stats(model.w.data(), coords)?;
    let w: Vec<f64> = coords.iter().map(|&i| model.w.data()[i]).collect();
    let delta = normal(spec.mu_delta, spec.sigma_delta)?;
    let pixel = normal(spec.mu_x, spec.sigma_x)?;
    let values: Vec<f64> = (0..samples)
        .map(|_| {
            let dy: f64 = w
                .iter()
                .map(|wi| {
                    let d = match spec.kind {
                        NoiseKind::Additive => delta.sample(rng),
                        NoiseKind::MultAdditive => delta.sample(rng) - pixel.sample(rng),
                        NoiseKind::Occlusion { color } => color - pixel.sample(rng),
                    };
                    wi * d
                })
                .sum();
            dy * dy
        })
        .collect();
    Ok(Estimate::from_samples(&values))
}

/// Same estimate on given inputs `[C, H, W]` instead of Gaussian pixels; the
/// score difference is evaluated directly as `y(x') - y(x)`.
pub fn empirical_deviation(
    model: &LinearScoreModel,
    coords: &[usize],
    spec: &NoiseSpec,
    inputs: &[Tensor],
    rng: &mut impl Rng,
) -> Result<Estimate> {
    spec.validate()?;
    if inputs.is_empty() {
        return Err(Error::Precondition("no inputs".into()));
    }
    mask_stats(model.w.data(), coords)?;
    let delta = normal(spec.mu_delta, spec.sigma_delta)?;
    let mut values = Vec::with_capacity(inputs.len());
    for x in inputs {
        if x.len() != model.w.len() {
            return Err(Error::Shape(format!("input {:?} vs weights {:?}", x.shape(), model.w.shape())));
        }
        let mut xp = x.data().to_vec();
        for &i in coords {
            xp[i] = match spec.kind {
                NoiseKind::Additive => xp[i] + delta.sample(rng),
                NoiseKind::MultAdditive => delta.sample(rng),
                NoiseKind::Occlusion { color } => color,
            };
        }
        let dy = model.score(&xp) - model.score(x.data());
        values.push(dy * dy);
    }
    Ok(Estimate::from_samples(&values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Random,
    AttributionRanked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    /// Pixels masked.
    pub k: usize,
    pub sum_sq: Estimate,
    /// `(Σ w_d)²`
    pub sum_squared: Estimate,
    pub selection: Selection,
}

/// Input-gradient weights of each sample's true-class score: the weights of
/// the linearization at that input.
pub fn linearized_weights(model: &dyn ScoreModel, batch: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>> {
    let g = input_gradients(model, batch, labels)?;
    Ok((0..labels.len()).map(|i| g.index_first(i)).collect())
}

/// Mask statistics per `k` averaged over weight maps `[C, H, W]`. Random masks
/// take `draws` uniform pixel subsets per map; ranked masks take the top-`k`
/// pixels by channel-summed `|w|`.
pub fn sweep_mask_stats(
    weights: &[Tensor],
    ks: &[usize],
    selection: Selection,
    draws: usize,
    rng: &mut impl Rng,
) -> Result<Vec<CurvePoint>> {
    if weights.is_empty() {
        return Err(Error::Precondition("no weight maps".into()));
    }
    let shape = weights[0].shape().to_vec();
    if shape.len() != 3 || weights.iter().any(|w| w.shape() != &shape[..]) {
        return Err(Error::Shape(format!("weight maps must share a [C, H, W] shape, first is {shape:?}")));
    }
    let pixels = shape[1] * shape[2];
    let ranked: Vec<Vec<usize>> = match selection {
        Selection::AttributionRanked => weights
            .iter()
            .map(|w| Ok(ranked_pixels(&AttributionMap::new(w.clone(), Method::Saliency, 0)?)))
            .collect::<Result<_>>()?,
        Selection::Random => Vec::new(),
    };
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        if k > pixels {
            return Err(Error::Precondition(format!("k = {k} exceeds {pixels} pixels")));
        }
        let mut sq = Vec::new();
        let mut s2 = Vec::new();
        for (i, w) in weights.iter().enumerate() {
            let mut push = |picked: &[usize]| -> Result<()> {
                let st = mask_stats(w.data(), &pixel_coords(&shape, picked))?;
                sq.push(st.sum_sq);
                s2.push(st.sum * st.sum);
                Ok(())
            };
            match selection {
                Selection::AttributionRanked => push(&ranked[i][..k])?,
                Selection::Random => {
                    for _ in 0..draws.max(1) {
                        push(&index::sample(rng, pixels, k).into_vec())?;
                    }
                }
            }
        }
        out.push(CurvePoint {
            k,
            sum_sq: Estimate::from_samples(&sq),
            sum_squared: Estimate::from_samples(&s2),
            selection,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lin(w: Vec<f64>) -> LinearScoreModel {
        let n = w.len();
        LinearScoreModel::new(Tensor::new(vec![1, 1, n], w).unwrap(), 0.5)
    }

    #[test]
    fn stats_by_hand() {
        let s = mask_stats(&[1.0, -1.0, 2.0], &[0, 1, 2]).unwrap();
        assert_eq!((s.k, s.sum, s.sum_sq, s.sum_abs), (3, 2.0, 6.0, 4.0));
        assert_eq!(mask_stats(&[1.0, 2.0], &[]).unwrap(), MaskStats::default());
        assert!(mask_stats(&[1.0], &[3]).is_err());
    }

    #[test]
    fn closed_forms() {
        let m = lin(vec![1.0, 1.0]);
        assert_eq!(predicted_deviation(&m, &[0, 1], &NoiseSpec::additive(0.0, 1.0)).unwrap(), 2.0);
        assert_eq!(predicted_deviation(&m, &[0, 1], &NoiseSpec::occlusion(0.3, 0.3, 0.0)).unwrap(), 0.0);
        let bad = NoiseSpec { sigma_delta: 0.1, ..NoiseSpec::occlusion(0.0, 0.5, 0.1) };
        assert!(predicted_deviation(&m, &[0], &bad).is_err());
    }

    #[test]
    fn zero_noise_is_exactly_zero() {
        let m = lin(vec![0.3, -2.0, 1.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = monte_carlo_deviation(&m, &[0, 2], &NoiseSpec::additive(0.0, 0.0), 100, &mut rng).unwrap();
        assert_eq!((e.mean, e.stderr), (0.0, 0.0));
    }

    #[test]
    fn empirical_matches_closed_form_for_occlusion_on_constant_inputs() {
        let m = lin(vec![0.3, -2.0, 1.5, 0.25]);
        let inputs = vec![Tensor::full(&[1, 1, 4], 0.2); 3];
        let spec = NoiseSpec::occlusion(1.0, 0.2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = empirical_deviation(&m, &[1, 3], &spec, &inputs, &mut rng).unwrap();
        let p = predicted_deviation(&m, &[1, 3], &spec).unwrap();
        assert!((e.mean - p).abs() < 1e-12);
    }

    #[test]
    fn full_mask_sweep_has_no_spread() {
        let w = Tensor::new(vec![1, 2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = sweep_mask_stats(&[w.clone()], &[0, 6], Selection::Random, 20, &mut rng).unwrap();
        assert_eq!(pts[0].sum_sq.mean, 0.0);
        assert_eq!(pts[1].sum_sq.mean, w.data().iter().map(|v| v * v).sum::<f64>());
        assert!(pts[1].sum_sq.stderr < 1e-12);
        let ranked = sweep_mask_stats(&[w], &[2], Selection::AttributionRanked, 1, &mut rng).unwrap();
        assert_eq!(ranked[0].sum_sq.mean, 13.0);
        assert_eq!(ranked[0].sum_squared.mean, 25.0);
    }

    #[test]
    fn pixel_coords_cover_channels() {
        assert_eq!(pixel_coords(&[2, 2, 2], &[1, 3]), vec![1, 3, 5, 7]);
    }
}

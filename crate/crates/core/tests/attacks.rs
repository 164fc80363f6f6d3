//! Statistical and contract checks for the attack suite.

use gradeq::attacks::*;
use gradeq::attribution::Method;
use gradeq::autodiff::{Graph, NodeId};
use gradeq::data::ImageBatch;
use gradeq::models::{Activation, ModelSpec, Network, ScoreModel};
use gradeq::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn image(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Two-sample Kolmogorov-Smirnov statistic; equal values are stepped over together.
fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn ks_critical_1pct(n: usize, m: usize) -> f64 {
    1.628 * ((n + m) as f64 / (n * m) as f64).sqrt()
}

/// Moments of `clip(x0 + Z, 0, 1)` by Simpson integration of the normal density.
fn clipped_moments(x0: f64) -> (f64, f64) {
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| {
        let n = 200_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let upper = simpson(&phi, 1.0 - x0, 12.0);
    let m1 = upper + simpson(&|z| (x0 + z) * phi(z), -x0, 1.0 - x0);
    let m2 = upper + simpson(&|z| (x0 + z).powi(2) * phi(z), -x0, 1.0 - x0);
    (m1, m2)
}

#[test]
fn ina1_masked_variance_matches_clipped_normal() {
    let x = Tensor::full(&[1, 2, 2], 0.3);
    let mask = Mask::from_indices(2, 2, &[2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let vals: Vec<f64> = (0..n).map(|_| ina1(&x, &mask, &mut rng).unwrap().data()[2]).collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let m4 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n as f64;
    let se = ((m4 - var * var) / n as f64).sqrt();
    let (m1, m2) = clipped_moments(0.3);
    let expect = m2 - m1 * m1;
    assert!((var - expect).abs() < 4.0 * se, "variance {var} vs {expect} (se {se})");
    assert!((mean - m1).abs() < 4.0 * (var / n as f64).sqrt());
}

#[test]
fn ina2_masked_pixels_follow_clipped_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = image(1, 2, 2, &mut rng);
    let mask = Mask::from_indices(2, 2, &[1]).unwrap();
    let n = 100_000;
    let mut got: Vec<f64> = (0..n).map(|_| ina2(&x, &mask, &mut rng).unwrap().data()[1]).collect();
    let mut reference_rng = ChaCha8Rng::seed_from_u64(99);
    let mut want: Vec<f64> =
        (0..n).map(|_| reference_rng.sample::<f64, _>(StandardNormal).clamp(0.0, 1.0)).collect();
    let d = ks_statistic(&mut got, &mut want);
    assert!(d < ks_critical_1pct(n, n), "KS statistic {d}");
}

#[test]
fn rn_picks_distinct_uniform_pixels() {
    let x = Tensor::full(&[1, 4, 4], 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (draws, k) = (100_000, 3);
    let mut counts = [0usize; 16];
    for _ in 0..draws {
        let (_, m) = rn(&x, k, &mut rng).unwrap();
        let idx = m.indices();
        assert_eq!(idx.len(), k);
        for i in idx {
            counts[i] += 1;
        }
    }
    let expect = (draws * k) as f64 / 16.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // 99th percentile of chi-square with 15 degrees of freedom.
    assert!(chi2 < 30.578, "chi-square {chi2}");
}

#[test]
fn rn_with_every_pixel_matches_full_mask_ina1() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = image(1, 3, 3, &mut rng);
    let full = Mask::from_indices(3, 3, &(0..9).collect::<Vec<_>>()).unwrap();
    let n = 10_000;
    let mut a: Vec<f64> = (0..n).map(|_| rn(&x, 9, &mut rng).unwrap().0.data()[4]).collect();
    let mut b: Vec<f64> = (0..n).map(|_| ina1(&x, &full, &mut rng).unwrap().data()[4]).collect();
    let d = ks_statistic(&mut a, &mut b);
    assert!(d < ks_critical_1pct(n, n), "KS statistic {d}");
}

#[test]
fn gaussian_corruption_mse_grows_with_severity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images: Vec<Tensor> = (0..1000).map(|_| image(1, 4, 4, &mut rng)).collect();
    let table = SeverityTable::default();
    let mut last = 0.0;
    for s in 1..=5 {
        let mse: f64 = images
            .iter()
            .map(|x| {
                let y = corrupt(x, Corruption::Gaussian, s, &table, &mut rng).unwrap();
                x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 16.0
            })
            .sum::<f64>()
            / 1000.0;
        assert!(mse > last, "severity {s}: {mse} <= {last}");
        last = mse;
    }
}

fn small_batch(n: usize, seed: u64) -> (Network, ImageBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::init(ModelSpec::cnn(&[2, 8, 8], &[3], 3, Activation::Relu), &mut rng).unwrap();
    let imgs: Vec<Tensor> = (0..n).map(|_| image(2, 8, 8, &mut rng)).collect();
    let labels = gradeq::models::predict(&net, &Tensor::stack(&imgs).unwrap()).unwrap();
    (net, ImageBatch::new(Tensor::stack(&imgs).unwrap(), labels, 3).unwrap())
}

fn all_kinds() -> Vec<AttackKind> {
    vec![
        AttackKind::Pgd { eps: 8.0 / 255.0, step: 2.0 / 255.0, iters: 5 },
        AttackKind::Ina1 { k: 6 },
        AttackKind::Ina2 { k: 6 },
        AttackKind::Ioa { n: 3, r: 2, color: Color::White },
        AttackKind::Rn { k: 6 },
        AttackKind::Corrupt { corruption: Corruption::Shot, severity: 3 },
        AttackKind::Corrupt { corruption: Corruption::Impulse, severity: 5 },
    ]
}

#[test]
fn attacks_are_reproducible_and_stay_on_support() {
    let (net, batch) = small_batch(6, 6);
    let ids: Vec<usize> = (0..batch.len()).collect();
    for kind in all_kinds() {
        for method in [Method::Saliency, Method::smoothgrad()] {
            let mut spec = AttackSpec::new(kind.clone(), 17);
            spec.attribution = method;
            let a = attack_batch(&net, &spec, &batch, &ids).unwrap();
            let b = attack_batch(&net, &spec, &batch, &ids).unwrap();
            assert_eq!(a.perturbed, b.perturbed, "{kind:?}");
            assert!(a.perturbed.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for (i, m) in a.masks.iter().enumerate() {
                let Some(m) = m else { continue };
                let (orig, pert) = (batch.image(i), a.perturbed.index_first(i));
                for ch in 0..2 {
                    for p in 0..64 {
                        if m.m.data()[p] == 0.0 {
                            assert_eq!(orig.data()[ch * 64 + p], pert.data()[ch * 64 + p]);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn per_sample_streams_ignore_batch_composition() {
    let (net, batch) = small_batch(5, 7);
    let spec = AttackSpec::new(AttackKind::Rn { k: 4 }, 3);
    let whole = attack_batch(&net, &spec, &batch, &[10, 11, 12, 13, 14]).unwrap();
    let part = attack_batch(&net, &spec, &batch.select(&[3]), &[13]).unwrap();
    assert_eq!(whole.perturbed.index_first(3), part.perturbed.index_first(0));
}

#[test]
fn ioa_trace_areas_match_closed_form() {
    let (net, batch) = small_batch(8, 8);
    for i in 0..batch.len() {
        let out = ioa(&net, &batch.image(i), batch.labels[i], 4, 3, Color::Black, Method::Saliency, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for step in &out.trace {
            assert_eq!(step.centers.len(), step.n);
            for (&(cy, cx), &area) in step.centers.iter().zip(&step.areas) {
                assert_eq!(area, square_area(cy, cx, step.r, 8, 8));
            }
        }
        if !out.fooled {
            assert_eq!(out.trace.len(), 12);
        }
    }
}

#[test]
fn gray_paint_on_gray_image_changes_nothing() {
    let (net, _) = small_batch(1, 9);
    let x = Tensor::full(&[2, 8, 8], 0.5);
    let y = gradeq::models::predict(&net, &x.clone().reshape(&[1, 2, 8, 8]).unwrap()).unwrap()[0];
    let out = ioa(&net, &x, y, 2, 2, Color::Gray, Method::Saliency, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.trace[0].predicted, y);
    assert_eq!(out.image, x);
}

/// Predicts from a table keyed by the first pixel of each image.
struct Lookup(Vec<(f64, usize)>);

impl ScoreModel for Lookup {
    fn input_shape(&self) -> &[usize] {
        &[1, 1, 2]
    }
    fn classes(&self) -> usize {
        2
    }
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let v = g.value(x).clone();
        let mut out = Vec::new();
        for row in v.data().chunks(2) {
            let class = self.0.iter().find(|(k, _)| *k == row[0]).map_or(0, |e| e.1);
            out.extend(if class == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
        }
        g.constant(Tensor::new(vec![out.len() / 2, 2], out)?)
    }
}

#[test]
fn error_rate_on_hand_fixture() {
    // Clean keys 0.1..0.4 with label 1; attacked keys are clean + 0.5.
    let pixels = Tensor::new(vec![4, 1, 1, 2], vec![0.1, 0.0, 0.2, 0.0, 0.3, 0.0, 0.4, 0.0]).unwrap();
    let batch = ImageBatch::new(pixels, vec![1; 4], 2).unwrap();
    let a = Lookup(vec![(0.1, 1), (0.2, 1), (0.3, 1), (0.4, 0), (0.6, 0), (0.7, 1), (0.8, 1)]);
    let b = Lookup(vec![(0.1, 1), (0.2, 1), (0.3, 1), (0.4, 1), (0.6, 0), (0.7, 0), (0.8, 1)]);
    let c = Lookup(vec![(0.1, 1), (0.2, 0), (0.3, 1), (0.4, 1), (0.6, 1), (0.7, 1), (0.8, 1)]);
    let shift = |m: &dyn ScoreModel, sub: &ImageBatch, _: &[usize]| {
        let p = sub.pixels.map(|v| if v > 0.0 { v + 0.5 } else { v });
        AttackOutcome::score(m, sub, p)
    };
    // Jointly correct: samples 0 and 2. After the attack A misses 0, B misses 0, C misses none.
    let models: [&dyn ScoreModel; 3] = [&a, &b, &c];
    let r = error_rate_with(&models, &batch, shift).unwrap();
    assert_eq!(r.subset, vec![0, 2]);
    assert_eq!(r.rates(), vec![0.5, 0.5, 0.0]);
    let never = Lookup(vec![]);
    let pair: [&dyn ScoreModel; 2] = [&a, &never];
    assert!(matches!(error_rate_with(&pair, &batch, shift), Err(Error::EmptyJointSubset)));
    let single: [&dyn ScoreModel; 1] = [&b];
    let identity = AttackSpec::new(AttackKind::Pgd { eps: 0.0, step: 0.0, iters: 3 }, 0);
    assert_eq!(error_rate(&single, &identity, &batch).unwrap().rates(), vec![0.0]);
}

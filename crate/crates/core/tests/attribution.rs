use gradeq::attribution::*;
use gradeq::autodiff::{Graph, NodeId};
use gradeq::models::{class_score, Activation, LinearScoreModel, ModelSpec, Network, ScoreModel};
use gradeq::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn saliency_matches_finite_differences_on_cnn() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Network::init(ModelSpec::cnn(&[2, 8, 8], &[3, 4], 3, Activation::Softplus), &mut rng).unwrap();
    let x = random(&[2, 8, 8], &mut rng);
    let s = saliency(&net, &x, 1).unwrap();
    let h = 1e-5;
    let mut fd = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        fd.data_mut()[i] = (class_score(&net, &p, 1).unwrap() - class_score(&net, &m, 1).unwrap()) / (2.0 * h);
    }
    let err = s.values.max_abs_diff(&fd) / fd.l2_norm().max(1e-12);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn linear_model_maps_scale_with_stated_multipliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random(&[3, 4, 4], &mut rng).map(|v| v - 0.5);
    let x = random(&[3, 4, 4], &mut rng);
    let m = LinearScoreModel::new(w.clone(), 0.1);
    let base = Tensor::zeros(x.shape());
    let expect = |mult: &Tensor| reduce_channels(&w.zip_map(mult, |a, b| (a * b).abs()).unwrap()).unwrap();
    let ones = Tensor::full(x.shape(), 1.0);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let cases = [
        (attribute(&m, &x, 0, Method::Saliency, &mut r).unwrap(), ones.clone()),
        (attribute(&m, &x, 0, Method::InputXGradient, &mut r).unwrap(), x.clone()),
        (attribute(&m, &x, 0, Method::integrated_gradients(), &mut r).unwrap(), x.zip_map(&base, |a, b| a - b).unwrap()),
        (attribute(&m, &x, 0, Method::smoothgrad(), &mut r).unwrap(), ones),
    ];
    for (map, mult) in cases {
        assert!(map.reduced.max_abs_diff(&expect(&mult)) < 1e-12, "{:?}", map.method);
        assert!(map.reduced.data().iter().all(|&v| v >= 0.0));
    }
}

/// `f(x) = ½ Σ a_i x_i²`, one class.
struct Quadratic(Tensor);

impl ScoreModel for Quadratic {
    fn input_shape(&self) -> &[usize] {
        self.0.shape()
    }
    fn classes(&self) -> usize {
        1
    }
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let n = g.shape(x)[0];
        let d = self.0.len();
        let flat = g.reshape(x, &[n, d])?;
        let sq = g.mul(flat, flat)?;
        let mut a = Vec::with_capacity(n * d);
        for _ in 0..n {
            a.extend(self.0.data().iter().map(|v| 0.5 * v));
        }
        let a = g.constant(Tensor::new(vec![n, d], a)?)?;
        let weighted = g.mul(sq, a)?;
        let ones = g.constant(Tensor::full(&[d, 1], 1.0))?;
        g.matmul(weighted, ones)
    }
}

#[test]
fn smoothgrad_variance_shrinks_as_one_over_samples() {
    let a = Tensor::new(vec![1, 1, 3], vec![2.0, -1.0, 0.5]).unwrap();
    let model = Quadratic(a);
    let x = Tensor::new(vec![1, 1, 3], vec![0.3, 0.6, 0.9]).unwrap();
    let sigma = 0.1;
    let repeats = 400;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for samples in [4, 16, 64] {
        let vals: Vec<f64> = (0..repeats)
            .map(|_| smoothgrad(&model, &x, 0, sigma, samples, &mut rng).unwrap().values.data()[0])
            .collect();
        let mean = vals.iter().sum::<f64>() / repeats as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
        // The gradient is a ⊙ x, so the estimate's variance is a² σ² / samples.
        let expect = 4.0 * sigma * sigma / samples as f64;
        let se = expect * (2.0 / (repeats - 1) as f64).sqrt();
        assert!((var - expect).abs() < 4.0 * se, "samples {samples}: {var} vs {expect}");
    }
}

#[test]
fn zero_network_gives_flagged_zero_map() {
    let net = Network::zeros(ModelSpec::cnn(&[1, 4, 4], &[2], 2, Activation::Relu)).unwrap();
    let x = Tensor::full(&[1, 4, 4], 0.5);
    for method in [Method::Saliency, Method::InputXGradient, Method::integrated_gradients()] {
        let map = attribute(&net, &x, 0, method, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(map.is_zero());
        assert!(gradeq::inequality::gini(map.reduced.data()).is_err());
    }
}

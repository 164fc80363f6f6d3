use gradeq::data::{BlobConfig, DataSource, DatasetConfig, Splits};
use gradeq::models::{Activation, Checkpoint, ModelSpec, Network};
use gradeq::training::{igd_loss, teacher_gradients, train, GradientScore, TrainConfig, TrainMethod};
use gradeq::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(res: usize, classes: usize, train: usize, seed: u64) -> Splits {
    let mut cfg = BlobConfig::new(res, classes, 0, seed);
    cfg.blob_sigma = res as f64 / 10.0;
    DatasetConfig { source: DataSource::SyntheticBlobs(cfg), train, val: 64, test: 64, classes: None, normalize: true }
        .load()
        .unwrap()
}

fn mlp(splits: &Splits, hidden: &[usize], act: Activation, seed: u64) -> Network {
    let mut spec = ModelSpec::mlp(splits.train.image_shape(), hidden, splits.train.classes, act);
    spec.normalization = Some((splits.train.mean, splits.train.std));
    Network::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn standard_training_separates_blobs() {
    let splits = blobs(32, 4, 320, 1);
    let cfg = TrainConfig::new(TrainMethod::Standard, 20, 0.05, 2);
    let out = train(&cfg, mlp(&splits, &[16], Activation::Relu, 3), &splits, None).unwrap();
    assert_eq!(out.record.len(), 20);
    let preds = gradeq::models::predict(&out.best.network, &splits.test.pixels).unwrap();
    let acc = preds.iter().zip(&splits.test.labels).filter(|(p, y)| p == y).count() as f64 / preds.len() as f64;
    assert!(acc >= 0.95, "clean test accuracy {acc}");
}

#[test]
fn zero_lambda_matches_pgdat_bit_for_bit() {
    let splits = blobs(8, 3, 96, 4);
    let init = mlp(&splits, &[8], Activation::Relu, 5);
    let mut cfg = TrainConfig::new(TrainMethod::Pgdat, 3, 0.05, 6);
    cfg.batch_size = 32;
    let teacher = train(&TrainConfig::new(TrainMethod::Standard, 2, 0.05, 7), init.clone(), &splits, None)
        .unwrap()
        .last;
    let a = train(&cfg, init.clone(), &splits, None).unwrap();
    cfg.method = TrainMethod::Igd { lambda: 0.0 };
    let b = train(&cfg, init, &splits, Some(&teacher)).unwrap();
    assert_eq!(a.last, b.last);
    let strip = |r: &[gradeq::training::EpochRecord]| {
        r.iter().map(|e| (e.train_ce.to_bits(), e.val_pgd_acc.to_bits(), e.val_gini.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a.record), strip(&b.record));
}

#[test]
fn teacher_is_untouched_and_checkpoint_is_reproducible() {
    let splits = blobs(8, 2, 64, 8);
    let init = mlp(&splits, &[8], Activation::Softplus, 9);
    let teacher = train(&TrainConfig::new(TrainMethod::Standard, 2, 0.05, 10), init.clone(), &splits, None)
        .unwrap()
        .best
        .network;
    let before = Checkpoint::new(teacher.clone(), "standard", 0.0, 0, 0).to_bytes().unwrap();
    let mut cfg = TrainConfig::new(TrainMethod::Igd { lambda: 2.0 }, 2, 0.05, 11);
    cfg.batch_size = 32;
    let run1 = train(&cfg, init.clone(), &splits, Some(&teacher)).unwrap();
    let after = Checkpoint::new(teacher.clone(), "standard", 0.0, 0, 0).to_bytes().unwrap();
    assert_eq!(before, after);
    let run2 = train(&cfg, init, &splits, Some(&teacher)).unwrap();
    assert_eq!(run1.best.to_bytes().unwrap(), run2.best.to_bytes().unwrap());
    assert!(run1.record.iter().all(|r| r.train_cosine > -1.0 && r.train_cosine <= 1.0));
}

/// Norm-wise relative error.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

#[test]
fn igd_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (score, hidden) in [(GradientScore::Logit, vec![16, 8]), (GradientScore::Softmax, vec![12])] {
        let spec = ModelSpec::mlp(&[1, 3, 3], &hidden, 3, Activation::Softplus);
        let student = Network::init(spec.clone(), &mut rng).unwrap();
        let teacher = Network::init(spec, &mut rng).unwrap();
        let x = Tensor::new(vec![4, 1, 3, 3], (0..36).map(|_| rng.random::<f64>()).collect()).unwrap();
        let x_adv = x.map(|v| (v + 0.03).min(1.0));
        let y = [0, 2, 1, 2];
        let tg = teacher_gradients(&teacher, &x, &y, score).unwrap();
        let loss = |net: &Network| igd_loss(net, Some(&tg), &x, &x_adv, &y, 3.0, score).unwrap();
        let analytic: Vec<f64> = loss(&student).grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let mut fd = Vec::new();
        let h = 1e-5;
        for p in 0..student.params().len() {
            for i in 0..student.params()[p].len() {
                let mut plus = student.clone();
                plus.params_mut()[p].data_mut()[i] += h;
                let mut minus = student.clone();
                minus.params_mut()[p].data_mut()[i] -= h;
                fd.push((loss(&plus).total - loss(&minus).total) / (2.0 * h));
            }
        }
        let err = rel_err(&analytic, &fd);
        assert!(err < 1e-3, "{score:?}: relative error {err}");
        let cos = loss(&student).cosine;
        assert!(cos.abs() > 1e-3, "cosine term should be active, got {cos}");
    }
}

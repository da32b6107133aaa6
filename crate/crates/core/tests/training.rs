use qmf_core::data::{self, MultimodalDataset, SyntheticSpec};
use qmf_core::diffcore::{Matrix, Tape};
use qmf_core::models::ModelConfig;
use qmf_core::optim::OptimizerConfig;
use qmf_core::training::{self, derangement, TrainConfig, Weighting};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn separable(n: usize, seed: u64) -> MultimodalDataset {
    data::generate(&SyntheticSpec {
        num_classes: 2,
        num_samples: n,
        dims: vec![2, 2],
        separations: vec![3.0, 3.0],
        within_std: vec![0.5, 0.5],
        corruption_fraction: 0.0,
        corruption_scale: 3.0,
        seed,
    })
    .unwrap()
}

fn noisy(n: usize, seed: u64) -> MultimodalDataset {
    data::generate(&SyntheticSpec {
        num_classes: 3,
        num_samples: n,
        dims: vec![4, 3],
        separations: vec![3.0, 2.0],
        within_std: vec![1.0, 1.5],
        corruption_fraction: 0.4,
        corruption_scale: 3.0,
        seed,
    })
    .unwrap()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        optimizer: OptimizerConfig::adam(1e-2),
        seed,
        ..TrainConfig::default()
    }
}

fn mlp(m: usize) -> Vec<ModelConfig> {
    (0..m).map(|j| ModelConfig::mlp1(8, 10 + j as u64)).collect()
}

#[test]
fn clean_separable_data_is_learned() {
    let ds = separable(500, 1);
    let models: Vec<ModelConfig> = (0..2).map(|j| ModelConfig::linear(j as u64)).collect();
    let cfg = quick(30, 3);
    let qmf = training::train_qmf(&ds, None, &models, &cfg).unwrap();
    let acc = *qmf.report.losses.train_accuracy.last().unwrap();
    assert!(acc > 0.95, "qmf train accuracy {acc}");
    let stat = training::train_static(&ds, None, &models, &cfg).unwrap();
    let acc = *stat.report.losses.train_accuracy.last().unwrap();
    assert!(acc > 0.95, "static train accuracy {acc}");
    assert_eq!(qmf.report.losses.overall.len(), 30);
}

#[test]
fn static_policy_without_regularizer_is_the_static_trainer() {
    let ds = noisy(300, 2);
    let cfg = TrainConfig {
        weighting: Weighting::Static,
        lambda: 0.0,
        ..quick(6, 4)
    };
    let a = training::train_qmf(&ds, None, &mlp(2), &cfg).unwrap();
    let b = training::train_static(&ds, None, &mlp(2), &quick(6, 4)).unwrap();
    assert_eq!(a.report.losses, b.report.losses);
    assert_eq!(a.classifier.models, b.classifier.models);
    assert!(a.report.losses.reg.iter().all(|&r| r >= 0.0));
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let ds = noisy(300, 5);
    let val = noisy(100, 6);
    let run = || {
        let out = training::train_qmf(&ds, Some(&val), &mlp(2), &quick(5, 7)).unwrap();
        serde_json::to_string(&out.report).unwrap()
    };
    assert_eq!(run(), run());
    let other = training::train_qmf(&ds, Some(&val), &mlp(2), &quick(5, 8)).unwrap();
    assert_ne!(serde_json::to_string(&other.report).unwrap(), run());
}

#[test]
fn reported_loss_decomposes_every_epoch() {
    let ds = noisy(300, 9);
    for full_weight_grad in [false, true] {
        let cfg = TrainConfig {
            lambda: 0.3,
            full_weight_grad,
            clamp_weights: full_weight_grad,
            ..quick(8, 10)
        };
        let out = training::train_qmf(&ds, None, &mlp(2), &cfg).unwrap();
        let l = &out.report.losses;
        for e in 0..l.overall.len() {
            let parts = l.fused_ce[e] + l.unimodal_ce.iter().map(|u| u[e]).sum::<f64>() + cfg.lambda * l.reg[e];
            assert!((l.overall[e] - parts).abs() < 1e-9, "epoch {e}: {} vs {parts}", l.overall[e]);
            assert!(l.reg[e] >= 0.0);
        }
    }
}

#[test]
fn hand_set_toy_batch() {
    let f1 = Matrix::from_rows(&[vec![1.0, -0.5], vec![0.2, 0.3], vec![-1.0, 2.0], vec![0.5, 0.5]]).unwrap();
    let f2 = Matrix::from_rows(&[vec![-0.3, 0.8], vec![1.5, -1.0], vec![0.0, 0.4], vec![2.0, -2.0]]).unwrap();
    let w1 = Matrix::column(vec![0.7, 0.4, 0.55, 0.2]).unwrap();
    let w2 = Matrix::column(vec![0.3, 0.6, 0.45, 0.8]).unwrap();
    let kappa = [vec![1.2, 0.3, 0.9, 0.1], vec![0.4, 1.1, 0.2, 0.8]];
    let labels = [0, 1, 1, 0];
    let pairing = [2, 3, 1, 0];

    let mut tape = Tape::new();
    let z = [tape.leaf(f1), tape.leaf(f2)];
    let w = [tape.leaf(w1), tape.leaf(w2)];
    let fused = qmf_core::fusion::fuse_on_tape(&mut tape, &w, &z).unwrap();
    let krefs: Vec<&[f64]> = kappa.iter().map(Vec::as_slice).collect();
    let parts = training::overall_loss(&mut tape, fused, &z, &labels, &w, &krefs, 0.1, &pairing).unwrap();
    // independent high-precision evaluation
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    close(tape.scalar(parts.fused_ce), 0.563_538_618_456_398_7);
    close(tape.scalar(parts.unimodal_ce[0]), 0.396_886_117_547_502_7);
    close(tape.scalar(parts.unimodal_ce[1]), 1.124_347_559_931_435_7);
    close(tape.scalar(parts.reg), 0.643_75);
    close(tape.scalar(parts.total), 2.149_147_295_935_337);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn regularizer_is_nonnegative(
        n in 2usize..12,
        seed in any::<u64>(),
        ws in prop::collection::vec(-3.0f64..3.0, 12),
        ks in prop::collection::vec(0.0f64..5.0, 12),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairing = derangement(n, &mut rng);
        prop_assert!(pairing.iter().enumerate().all(|(i, &p)| p != i));
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::column(ws[..n].to_vec()).unwrap());
        let r = training::batch_reg_term(&mut tape, w, &ks[..n], &pairing).unwrap();
        prop_assert!(tape.scalar(r) >= 0.0);
    }
}

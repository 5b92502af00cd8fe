use alans::gen::generate_phase;
use alans::rpm::{DistractorStrategy, Phase, Regime};
use alans::tape::{Mat, Tape};
use alans::trainer::{
    forward_loss, grad_check, prepare_examples, relative_error, train, Example, GradCheckConfig, TrainConfig,
};
use alans::{EncodingKind, Model, NoiseModel, ReasonerConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn examples(regime: Regime, n: usize, eps: f64) -> Vec<Example> {
    let insts = generate_phase(regime, Phase::Train, DistractorStrategy::PerturbOne, (2 * n).max(10), 21).unwrap();
    prepare_examples(&insts[..n], &NoiseModel::uniform(eps), 21).unwrap()
}

fn spd(v: &[f64], d: usize) -> Mat {
    let a = Mat::from_column_slice(d, d, v);
    &a * a.transpose() + Mat::identity(d, d) * 0.5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solve_adjoint_matches_formula(
        k in prop::collection::vec(-1.0f64..1.0, 9),
        b in prop::collection::vec(-1.0f64..1.0, 3),
        w in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let kmat = spd(&k, 3);
        let mut tape = Tape::new();
        let kv = tape.param(kmat.clone());
        let bv = tape.param(Mat::from_column_slice(3, 1, &b));
        let x = tape.solve(kv, bv).unwrap();
        let wv = tape.constant(Mat::from_column_slice(1, 3, &w));
        let out = tape.matmul(wv, x);
        let grads = tape.backward(out);
        let xbar = Mat::from_column_slice(3, 1, &w);
        let bbar = kmat.transpose().try_inverse().unwrap() * &xbar;
        let kbar = -&bbar * tape.value(x).transpose();
        prop_assert!((grads.get(bv).unwrap() - &bbar).norm() < 1e-9);
        prop_assert!((grads.get(kv).unwrap() - kbar).norm() < 1e-9);
    }
}

#[test]
fn frobenius_gradient_is_twice_the_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::init(EncodingKind::Peano, 3, &mut rng).unwrap();
    let m0 = model.encodings[0].params()[0].clone();
    let mut tape = Tape::new();
    let v = tape.param(m0.clone());
    let f = tape.frob_sq(v);
    let g = tape.backward(f);
    assert!((g.get(v).unwrap() - m0 * 2.0).norm() < 1e-14);
}

#[test]
fn identical_candidates_give_a_stationary_point() {
    let mut ex = examples(Regime::Systematicity, 1, 0.1).remove(0);
    let first = ex.beliefs[8].clone();
    for slot in 9..16 {
        ex.beliefs[slot] = first.clone();
    }
    let model = Model::init(EncodingKind::Peano, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let lg = forward_loss(&ex, &model, &ReasonerConfig::default(), &[0.0; 4]);
    assert!((lg.value() - 8f64.ln()).abs() < 1e-12);
    let grad = lg.gradient(&model);
    assert!(grad.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn uniform_answer_costs_ln_eight() {
    let ex = examples(Regime::Localism, 1, 0.0).remove(0);
    let model = Model::init(EncodingKind::Peano, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = ReasonerConfig {
        tau_select: 1e9,
        ..ReasonerConfig::default()
    };
    let lg = forward_loss(&ex, &model, &cfg, &[0.0; 4]);
    assert!((lg.value() - 8f64.ln()).abs() < 1e-6);
}

#[test]
fn gradients_hold_for_independent_encodings() {
    let cfg = GradCheckConfig {
        kind: EncodingKind::Independent,
        ..GradCheckConfig::default()
    };
    for seed in 0..3 {
        let r = grad_check(&cfg, seed).unwrap();
        assert_eq!(r.params, (9 + 5 + 6 + 10) * 9);
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
}

#[test]
fn small_noiseless_set_is_fit() {
    let set = examples(Regime::Systematicity, 100, 0.0);
    let cfg = TrainConfig {
        stage1_epochs: 4,
        stage2_epochs: 16,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&set, &set[..50], &cfg).unwrap();
    let epochs = &out.report.epochs;
    assert_eq!(epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), (1..=20).collect::<Vec<_>>());
    let best = epochs.iter().map(|e| e.train_accuracy).fold(0.0, f64::max);
    assert!(best >= 0.9, "best train accuracy {best}");
    let joint: Vec<f64> = epochs.iter().filter(|e| e.stage == 2).map(|e| e.train_loss).collect();
    assert!(joint.last().unwrap() < joint.first().unwrap());
}

#[test]
fn independent_variant_trains() {
    let set = examples(Regime::Localism, 16, 0.1);
    let cfg = TrainConfig {
        d: 3,
        kind: EncodingKind::Independent,
        stage1_epochs: 1,
        stage2_epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = train(&set, &set[..4], &cfg).unwrap();
    assert_eq!(out.model.kind(), EncodingKind::Independent);
    assert_eq!(out.report.epochs.len(), 2);
}

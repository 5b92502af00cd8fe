//! End-to-end training of the encodings.
//!
//! The loss of one instance is the answer cross-entropy plus, per encoded
//! attribute, a weighted cross-entropy of the relation-kind probability
//! against the ground-truth kind. Gradients come from one backward sweep over
//! the reasoning tape, solves included.
//!
//! Training runs in two stages: a cyclic stage that trains one attribute's
//! encoding per epoch (Number, Type, Size, Color, Number, ...) with only that
//! attribute's auxiliary term, then a joint stage over all encodings.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::algebra::AlgebraError;
use crate::gen::{generate_one, SplitRegime};
use crate::model::{AdamRecord, EncodingKind, Model};
use crate::perception::{perceive_instance, InstanceBeliefs, NoiseModel, PerceptionError};
use crate::reasoner::{build_graph, Graph, ReasonerConfig};
use crate::rpm::{Attribute, DistractorStrategy, Phase, Regime, RelationKind, RpmInstance};
use crate::tape::Var;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    DivergenceDetected {
        epoch: usize,
        batch: usize,
        /// Best model seen before the divergence.
        last_good: Box<Model>,
        report: TrainReport,
    },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs of the cyclic per-attribute stage.
    pub stage1_epochs: usize,
    /// Epochs of the joint stage.
    pub stage2_epochs: usize,
    pub batch_size: usize,
    /// Auxiliary weight of the active attribute during the cyclic stage.
    pub aux_weight_cyclic: f64,
    /// Auxiliary weight of every attribute during the joint stage.
    pub aux_weight_joint: f64,
    pub seed: u64,
    pub d: usize,
    pub kind: EncodingKind,
    pub reasoner: ReasonerConfig,
    /// Validation instances scored after each epoch (all when `None`).
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            stage1_epochs: 4,
            stage2_epochs: 16,
            batch_size: 32,
            aux_weight_cyclic: 1.0,
            aux_weight_joint: 0.1,
            seed: 0,
            d: 8,
            kind: EncodingKind::Peano,
            reasoner: ReasonerConfig::default(),
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("tau_operator", self.reasoner.tau_operator),
            ("tau_decode", self.reasoner.tau_decode),
            ("tau_select", self.reasoner.tau_select),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::InvalidConfig("moment decays must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.aux_weight_cyclic < 0.0 || self.aux_weight_joint < 0.0 {
            return Err(TrainError::InvalidConfig("auxiliary weights must be non-negative".into()));
        }
        if self.reasoner.lambda.iter().any(|&l| !(l >= 0.0)) {
            return Err(TrainError::InvalidConfig("ridge strengths must be non-negative".into()));
        }
        if !(2..=32).contains(&self.d) {
            return Err(TrainError::InvalidConfig(format!("d must lie in 2..=32, got {}", self.d)));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// Attribute trained alone in `epoch` (0-based), or `None` in the joint stage.
    pub fn active_attribute(&self, epoch: usize) -> Option<Attribute> {
        (epoch < self.stage1_epochs).then(|| Attribute::ENCODED[epoch % Attribute::ENCODED.len()])
    }

    /// Auxiliary weights in `Attribute::ENCODED` order for `epoch`.
    pub fn aux_weights(&self, epoch: usize) -> [f64; 4] {
        match self.active_attribute(epoch) {
            Some(a) => {
                let mut w = [0.0; 4];
                w[a.encoded_slot().expect("encoded attribute")] = self.aux_weight_cyclic;
                w
            }
            None => [self.aux_weight_joint; 4],
        }
    }
}

/// One training instance: beliefs plus the supervision targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: u64,
    pub beliefs: InstanceBeliefs,
    pub answer: usize,
    /// Ground-truth relation kind per encoded attribute.
    pub kinds: [RelationKind; 4],
    /// Ground-truth kind of the layout when a rule governs it.
    pub position_kind: Option<RelationKind>,
}

impl Example {
    pub fn new(inst: &RpmInstance, beliefs: InstanceBeliefs) -> Self {
        Example {
            id: inst.id,
            beliefs,
            answer: inst.answer_index,
            kinds: Attribute::ENCODED.map(|a| inst.rules.kind(a).expect("encoded attributes always carry a rule")),
            position_kind: inst.rules.kind(Attribute::Position),
        }
    }
}

/// Perceives every instance once. Beliefs of instance `i` depend only on
/// `seed` and the instance id.
pub fn prepare_examples(instances: &[RpmInstance], noise: &NoiseModel, seed: u64) -> Result<Vec<Example>, PerceptionError> {
    instances
        .par_iter()
        .map(|inst| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ inst.id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            Ok(Example::new(inst, perceive_instance(inst, noise, &mut rng)?))
        })
        .collect()
}

/// Forward pass on a trainable tape with the loss node appended.
pub struct LossGraph {
    pub graph: Graph,
    pub loss: Var,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.graph.tape.scalar(self.loss)
    }

    pub fn correct(&self, answer: usize) -> bool {
        self.graph.distribution().choice() == answer
    }

    /// Gradient of the loss, flattened like `Model::flatten`.
    pub fn gradient(&self, model: &Model) -> Vec<f64> {
        let grads = self.graph.tape.backward(self.loss);
        let mut out = Vec::with_capacity(model.param_counts().iter().sum());
        for (enc, leaves) in model.encodings.iter().zip(&self.graph.params) {
            for (m, &leaf) in enc.params().into_iter().zip(leaves) {
                out.extend(grads.get_or_zeros(leaf, m).iter());
            }
        }
        out
    }
}

/// Builds the instance loss: answer cross-entropy plus weighted relation-kind
/// cross-entropies (`aux` in `Attribute::ENCODED` order).
pub fn forward_loss(example: &Example, model: &Model, cfg: &ReasonerConfig, aux: &[f64; 4]) -> LossGraph {
    let mut graph = build_graph(model, &example.beliefs, cfg, true);
    let tape = &mut graph.tape;
    let answer_ll = tape.entry(graph.log_answer, example.answer, 0);
    let mut terms = vec![(answer_ll, -1.0)];
    for ((&weight, kind_probs), kind) in aux.iter().zip(&graph.kind_probs).zip(example.kinds) {
        if weight == 0.0 {
            continue;
        }
        if let Some(kp) = *kind_probs {
            let p = tape.entry(kp, kind.index(), 0);
            let lp = tape.log(p);
            terms.push((lp, -weight));
        }
    }
    let loss = tape.weighted_sum(&terms);
    LossGraph { graph, loss }
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }

    /// Updates the entries of `params` whose `mask` is set; frozen entries keep
    /// their values and moments.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], mask: &[bool]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * grad[i];
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m = self.first[i] / c1;
            let v = self.second[i] / c2;
            params[i] -= self.lr * m / (v.sqrt() + self.eps);
        }
    }

    pub fn record(&self) -> AdamRecord {
        AdamRecord {
            step: self.step,
            first: self.first.clone(),
            second: self.second.clone(),
        }
    }
}

/// Mask over the flat parameters selecting the active attribute (all when `None`).
fn param_mask(model: &Model, active: Option<Attribute>) -> Vec<bool> {
    model
        .encodings
        .iter()
        .zip(model.param_counts())
        .flat_map(|(enc, n)| std::iter::repeat_n(active.is_none_or(|a| a == enc.attribute()), n))
        .collect()
}

/// Scores of a model on a set of examples.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Evaluation {
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Relation-kind accuracy per attribute in `Attribute::ALL` order; Position
    /// counts only instances with a layout rule.
    pub kind_accuracy: [Option<f64>; 5],
}

/// Loss (with the given auxiliary weights) and accuracies of `model` on `examples`.
pub fn evaluate(model: &Model, examples: &[Example], cfg: &ReasonerConfig, aux: &[f64; 4]) -> Evaluation {
    struct Row {
        loss: f64,
        correct: bool,
        kinds: [Option<bool>; 5],
    }
    let rows: Vec<Row> = examples
        .par_iter()
        .map(|ex| {
            let lg = forward_loss(ex, model, cfg, aux);
            let dist = lg.graph.distribution();
            let kinds = std::array::from_fn(|i| {
                let attr = Attribute::ALL[i];
                let truth = match attr.encoded_slot() {
                    Some(slot) => Some(ex.kinds[slot]),
                    None => ex.position_kind,
                };
                let r = dist.attribute(attr);
                truth.map(|k| r.fallback.is_none() && r.posterior.best_kind() == k)
            });
            Row {
                loss: lg.value(),
                correct: dist.choice() == ex.answer,
                kinds,
            }
        })
        .collect();
    let n = rows.len();
    if n == 0 {
        return Evaluation::default();
    }
    let mut kind_accuracy = [None; 5];
    for (i, slot) in kind_accuracy.iter_mut().enumerate() {
        let hits: Vec<bool> = rows.iter().filter_map(|r| r.kinds[i]).collect();
        if !hits.is_empty() {
            *slot = Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64);
        }
    }
    Evaluation {
        count: n,
        loss: rows.iter().map(|r| r.loss).sum::<f64>() / n as f64,
        accuracy: rows.iter().filter(|r| r.correct).count() as f64 / n as f64,
        kind_accuracy,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub stage: u8,
    pub active_attribute: Option<Attribute>,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Validation relation-kind accuracy in `Attribute::ALL` order.
    pub val_kind_accuracy: [Option<f64>; 5],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the kept model; 0 means the initialization.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// Writes one JSON object per epoch.
    pub fn write_ndjson<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.epochs {
            writeln!(out, "{}", serde_json::to_string(e).expect("epoch record serializes"))?;
        }
        Ok(())
    }
}

pub struct Trained {
    pub model: Model,
    pub optimizer: Adam,
    pub report: TrainReport,
}

/// Trains a freshly initialized model. Beliefs must already be prepared.
pub fn train(train_set: &[Example], val_set: &[Example], cfg: &TrainConfig) -> Result<Trained, TrainError> {
    train_with_progress(train_set, val_set, cfg, |_| {})
}

/// As [`train`], calling `progress` after every epoch.
pub fn train_with_progress<F: FnMut(&EpochRecord)>(
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    mut progress: F,
) -> Result<Trained, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg.kind, cfg.d, &mut rng)?;
    let mut flat = model.flatten();
    let mut adam = Adam::new(flat.len(), cfg);
    let val = &val_set[..cfg.val_limit.map_or(val_set.len(), |n| n.min(val_set.len()))];

    let mut report = TrainReport::default();
    let init_eval = evaluate(&model, val, &cfg.reasoner, &cfg.aux_weights(cfg.stage1_epochs));
    report.best_val_accuracy = init_eval.accuracy;
    let mut best = (model.clone(), adam.clone());

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.total_epochs() {
        let active = cfg.active_attribute(epoch);
        let aux = cfg.aux_weights(epoch);
        let mask = param_mask(&model, active);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, bool, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &train_set[i];
                    let lg = forward_loss(ex, &model, &cfg.reasoner, &aux);
                    (lg.value(), lg.correct(ex.answer), lg.gradient(&model))
                })
                .collect();
            let mut grad = vec![0.0; flat.len()];
            let mut batch_loss = 0.0;
            for (loss, ok, g) in &results {
                batch_loss += loss;
                correct += usize::from(*ok);
                for (acc, x) in grad.iter_mut().zip(g) {
                    *acc += x;
                }
            }
            let scale = 1.0 / results.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::DivergenceDetected {
                    epoch: epoch + 1,
                    batch: b + 1,
                    last_good: Box::new(best.0),
                    report,
                });
            }
            loss_sum += batch_loss;
            adam.update(&mut flat, &grad, &mask);
            model.assign(&flat);
        }
        let eval = evaluate(&model, val, &cfg.reasoner, &aux);
        let record = EpochRecord {
            epoch: epoch + 1,
            stage: if active.is_some() { 1 } else { 2 },
            active_attribute: active,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
            val_kind_accuracy: eval.kind_accuracy,
        };
        progress(&record);
        if eval.accuracy > report.best_val_accuracy {
            report.best_val_accuracy = eval.accuracy;
            report.best_epoch = epoch + 1;
            best = (model.clone(), adam.clone());
        }
        report.epochs.push(record);
    }
    Ok(Trained {
        model: best.0,
        optimizer: best.1,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub d: usize,
    pub kind: EncodingKind,
    /// Central-difference step.
    pub h: f64,
    pub noise: f64,
    pub reasoner: ReasonerConfig,
    /// Auxiliary weights in `Attribute::ENCODED` order.
    pub aux: [f64; 4],
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            d: 3,
            kind: EncodingKind::Peano,
            h: 1e-5,
            noise: 0.1,
            reasoner: ReasonerConfig::default(),
            aux: [1.0; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub params: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst relative error.
    pub worst_index: usize,
}

/// Relative error with a floor of 1e-3 on the denominator, so entries whose
/// true gradient vanishes are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of the full loss against central
/// differences on a generated instance.
pub fn grad_check(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport, TrainError> {
    let split = SplitRegime::new(Regime::ALL[seed as usize % 3], Phase::Train);
    let inst = generate_one(split, DistractorStrategy::PerturbOne, seed, 0).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = NoiseModel::uniform(cfg.noise);
    let example = Example::new(&inst, perceive_instance(&inst, &noise, &mut rng)?);
    let mut model = Model::init(cfg.kind, cfg.d, &mut rng)?;

    let analytic = forward_loss(&example, &model, &cfg.reasoner, &cfg.aux).gradient(&model);
    let base = model.flatten();
    let mut probe = base.clone();
    let (mut max_rel, mut max_abs, mut worst) = (0.0f64, 0.0f64, 0);
    for i in 0..base.len() {
        probe[i] = base[i] + cfg.h;
        model.assign(&probe);
        let up = forward_loss(&example, &model, &cfg.reasoner, &cfg.aux).value();
        probe[i] = base[i] - cfg.h;
        model.assign(&probe);
        let down = forward_loss(&example, &model, &cfg.reasoner, &cfg.aux).value();
        probe[i] = base[i];
        let numeric = (up - down) / (2.0 * cfg.h);
        let rel = relative_error(analytic[i], numeric);
        max_abs = max_abs.max((analytic[i] - numeric).abs());
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        seed,
        params: base.len(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst_index: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::generate_phase;

    fn examples(n: usize, noise: f64) -> Vec<Example> {
        let insts = generate_phase(Regime::Systematicity, Phase::Train, DistractorStrategy::PerturbOne, (2 * n).max(10), 3).unwrap();
        prepare_examples(&insts[..n], &NoiseModel::uniform(noise), 3).unwrap()
    }

    #[test]
    fn curriculum_schedule() {
        let cfg = TrainConfig {
            stage1_epochs: 6,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.active_attribute(0), Some(Attribute::Number));
        assert_eq!(cfg.active_attribute(3), Some(Attribute::Color));
        assert_eq!(cfg.active_attribute(4), Some(Attribute::Number));
        assert_eq!(cfg.active_attribute(6), None);
        assert_eq!(cfg.aux_weights(1), [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(cfg.aux_weights(7), [0.1; 4]);
    }

    #[test]
    fn zero_aux_weight_is_pure_answer_ce() {
        let ex = &examples(1, 0.0)[0];
        let model = Model::init(EncodingKind::Peano, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = ReasonerConfig::default();
        let lg = forward_loss(ex, &model, &cfg, &[0.0; 4]);
        let p = lg.graph.answer_probs()[ex.answer];
        assert!((lg.value() + p.ln()).abs() < 1e-12);
        let with_aux = forward_loss(ex, &model, &cfg, &[1.0; 4]);
        assert!(with_aux.value() > lg.value());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(3, &cfg);
        let mut p = vec![1.0, 1.0, 1.0];
        adam.update(&mut p, &[2.0, -0.5, 7.0], &[true, true, false]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p[2], 1.0);
        assert_eq!(adam.second[2], 0.0);
    }

    #[test]
    fn mask_covers_one_encoding() {
        let model = Model::init(EncodingKind::Peano, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mask = param_mask(&model, Some(Attribute::Size));
        assert_eq!(mask.iter().filter(|&&m| m).count(), 18);
        assert!(mask[36..54].iter().all(|&m| m));
    }

    #[test]
    fn gradient_matches_differences() {
        let report = grad_check(&GradCheckConfig::default(), 11).unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn coarse_step_is_less_accurate() {
        let fine = grad_check(&GradCheckConfig::default(), 2).unwrap();
        let coarse = grad_check(
            &GradCheckConfig {
                h: 1e-2,
                ..GradCheckConfig::default()
            },
            2,
        )
        .unwrap();
        assert!(coarse.max_abs_error > fine.max_abs_error);
    }

    #[test]
    fn training_is_deterministic() {
        let train_set = examples(12, 0.0);
        let cfg = TrainConfig {
            d: 3,
            stage1_epochs: 1,
            stage2_epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train(&train_set, &train_set[..4], &cfg).unwrap();
        let b = train(&train_set, &train_set[..4], &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&examples(2, 0.0), &[], &cfg), Err(TrainError::InvalidConfig(_))));
        assert!(matches!(train(&[], &[], &TrainConfig::default()), Err(TrainError::EmptyDataset)));
    }
}

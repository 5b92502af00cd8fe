//! Experiment plumbing shared by the command-line tool and the acceptance
//! suite: model variants, evaluation reports, ablation tables and solve traces.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::model::{EncodingKind, Model};
use crate::perception::{perceive_instance, InstanceBeliefs, NoiseModel, PerceptionError};
use crate::reasoner::{answer_distribution, AnswerDistribution, ReasonerConfig};
use crate::rpm::{Attribute, PanelSpec, Regime, RelationKind, RpmInstance};
use crate::trainer::{prepare_examples, train, TrainConfig, TrainError, Trained};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Peano encodings on noisy beliefs.
    Alans,
    /// Independent per-value encodings on noisy beliefs.
    AlansInd,
    /// Peano encodings on exact point-mass beliefs.
    AlansGt,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Alans, Variant::AlansInd, Variant::AlansGt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Alans => "alans",
            Variant::AlansInd => "alans-ind",
            Variant::AlansGt => "alans-gt",
        }
    }

    pub fn encoding(self) -> EncodingKind {
        match self {
            Variant::AlansInd => EncodingKind::Independent,
            Variant::Alans | Variant::AlansGt => EncodingKind::Peano,
        }
    }

    /// Noise actually applied; the ground-truth variant ignores `eps`.
    pub fn noise(self, eps: f64) -> NoiseModel {
        match self {
            Variant::AlansGt => NoiseModel::NONE,
            _ => NoiseModel::uniform(eps),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant '{s}' (expected alans, alans-ind or alans-gt)"))
    }
}

/// Beliefs for an instance under a variant. Seeded by `seed` and the id, so
/// evaluation is reproducible and independent of instance order.
pub fn beliefs_for(inst: &RpmInstance, variant: Variant, eps: f64, seed: u64) -> Result<InstanceBeliefs, PerceptionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ inst.id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    perceive_instance(inst, &variant.noise(eps), &mut rng)
}

/// Trains a variant on already generated folds.
pub fn train_variant(
    variant: Variant,
    eps: f64,
    train_set: &[RpmInstance],
    val_set: &[RpmInstance],
    cfg: &TrainConfig,
) -> Result<Trained, TrainError> {
    let noise = variant.noise(eps);
    let train_ex = prepare_examples(train_set, &noise, cfg.seed)?;
    let val_ex = prepare_examples(val_set, &noise, cfg.seed.wrapping_add(1))?;
    let cfg = TrainConfig {
        kind: variant.encoding(),
        ..cfg.clone()
    };
    train(&train_ex, &val_ex, &cfg)
}

/// Whether the generated panel agrees with the true answer on every governed
/// attribute. A layout without a rule is free and not compared.
pub fn generated_matches(inst: &RpmInstance, generated: &PanelSpec) -> bool {
    let answer = inst.answer();
    Attribute::ALL.iter().all(|&a| {
        if a == Attribute::Position && inst.rules.position.is_none() {
            return true;
        }
        generated.value(a) == answer.value(a)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindOutcome {
    pub truth: RelationKind,
    /// `None` when the attribute fell back to a uniform answer.
    pub predicted: Option<RelationKind>,
}

/// Per-instance evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceOutcome {
    pub id: u64,
    pub answer: usize,
    pub choice: usize,
    pub correct: bool,
    pub probs: [f64; 8],
    /// In `Attribute::ALL` order; Position is `None` without a layout rule.
    pub kinds: [Option<KindOutcome>; 5],
    /// Panels (of 16) whose belief argmax equals the truth, per attribute.
    pub perception_hits: [usize; 5],
    pub generated: PanelSpec,
    pub generated_matches: bool,
    pub fallback: bool,
}

fn outcome(inst: &RpmInstance, beliefs: &InstanceBeliefs, dist: &AnswerDistribution) -> InstanceOutcome {
    let panels: Vec<&PanelSpec> = inst.context.iter().chain(inst.candidates.iter()).collect();
    let perception_hits = Attribute::ALL.map(|a| {
        panels
            .iter()
            .zip(beliefs.iter())
            .filter(|(p, b)| b.argmax(a) == p.value(a))
            .count()
    });
    let kinds = Attribute::ALL.map(|a| {
        inst.rules.kind(a).map(|truth| {
            let r = dist.attribute(a);
            KindOutcome {
                truth,
                predicted: r.fallback.is_none().then(|| r.posterior.best_kind()),
            }
        })
    });
    let generated = dist.generated_panel();
    InstanceOutcome {
        id: inst.id,
        answer: inst.answer_index,
        choice: dist.choice(),
        correct: dist.choice() == inst.answer_index,
        probs: dist.probs,
        kinds,
        perception_hits,
        generated,
        generated_matches: generated_matches(inst, &generated),
        fallback: dist.fallback(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportTable {
    pub variant: Variant,
    pub regime: Option<Regime>,
    pub noise: f64,
    pub count: usize,
    pub correct: usize,
    pub answer_accuracy: f64,
    /// Relation-kind accuracy per attribute (`Attribute::ALL` order) with the
    /// number of instances it was measured on.
    pub kind_accuracy: [Option<f64>; 5],
    pub kind_counts: [usize; 5],
    /// Belief argmax accuracy per attribute over all 16 panels of every instance.
    pub perception_accuracy: [f64; 5],
    pub generation_accuracy: f64,
    pub fallbacks: usize,
    pub records: Vec<InstanceOutcome>,
}

impl ReportTable {
    /// Aggregates per-instance records; every number is recomputable from them.
    pub fn from_records(variant: Variant, regime: Option<Regime>, noise: f64, records: Vec<InstanceOutcome>) -> Self {
        let count = records.len();
        let frac = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let correct = records.iter().filter(|r| r.correct).count();
        let mut kind_accuracy = [None; 5];
        let mut kind_counts = [0; 5];
        for i in 0..5 {
            let judged: Vec<bool> = records
                .iter()
                .filter_map(|r| r.kinds[i].as_ref().map(|k| k.predicted == Some(k.truth)))
                .collect();
            kind_counts[i] = judged.len();
            if !judged.is_empty() {
                kind_accuracy[i] = Some(frac(judged.iter().filter(|&&h| h).count(), judged.len()));
            }
        }
        let perception_accuracy = std::array::from_fn(|i| frac(records.iter().map(|r| r.perception_hits[i]).sum(), 16 * count));
        ReportTable {
            variant,
            regime,
            noise,
            count,
            correct,
            answer_accuracy: frac(correct, count),
            kind_accuracy,
            kind_counts,
            perception_accuracy,
            generation_accuracy: frac(records.iter().filter(|r| r.generated_matches).count(), count),
            fallbacks: records.iter().filter(|r| r.fallback).count(),
            records,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let regime = self.regime.map_or("-", Regime::name);
        let _ = writeln!(s, "variant {}  regime {}  noise {}  instances {}", self.variant, regime, self.noise, self.count);
        let _ = writeln!(s, "answer accuracy      {:>7.4}  ({}/{})", self.answer_accuracy, self.correct, self.count);
        let _ = writeln!(s, "generation accuracy  {:>7.4}", self.generation_accuracy);
        if self.fallbacks > 0 {
            let _ = writeln!(s, "fallbacks            {}", self.fallbacks);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10} {:>12} {:>8} {:>12}", "attribute", "kind acc", "n", "perception");
        for (i, a) in Attribute::ALL.iter().enumerate() {
            let kind = self.kind_accuracy[i].map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{:<10} {:>12} {:>8} {:>12.4}",
                a.name(),
                kind,
                self.kind_counts[i],
                self.perception_accuracy[i]
            );
        }
        s
    }

    /// Per-instance records, one JSON object per line.
    pub fn records_ndjson(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Scores `model` on `instances`, perceiving each with the variant's noise.
pub fn evaluate_report(
    model: &Model,
    instances: &[RpmInstance],
    variant: Variant,
    eps: f64,
    seed: u64,
    cfg: &ReasonerConfig,
) -> Result<ReportTable, PerceptionError> {
    let records = instances
        .par_iter()
        .map(|inst| {
            let beliefs = beliefs_for(inst, variant, eps, seed)?;
            let dist = answer_distribution(&beliefs, model, cfg);
            Ok(outcome(inst, &beliefs, &dist))
        })
        .collect::<Result<Vec<_>, PerceptionError>>()?;
    let regime = instances.first().map(|i| i.regime);
    let noise = if variant == Variant::AlansGt { 0.0 } else { eps };
    Ok(ReportTable::from_records(variant, regime, noise, records))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub regime: Regime,
    pub alans: f64,
    pub alans_ind: f64,
    /// Accuracy points, `alans - alans_ind`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub noise: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("noise {}\n{:<14} {:>8} {:>10} {:>8}\n", self.noise, "regime", "alans", "alans-ind", "delta");
        for r in &self.rows {
            let _ = writeln!(s, "{:<14} {:>8.4} {:>10.4} {:>+8.2}", r.regime.name(), r.alans, r.alans_ind, r.delta);
        }
        s
    }
}

impl AblationRow {
    pub fn new(regime: Regime, alans: f64, alans_ind: f64) -> Self {
        AblationRow {
            regime,
            alans,
            alans_ind,
            delta: 100.0 * (alans - alans_ind),
        }
    }
}

/// Human-readable account of one solve.
pub fn solve_trace(inst: &RpmInstance, dist: &AnswerDistribution) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "instance {} ({}, {})", inst.id, inst.regime, inst.phase);
    for a in Attribute::ALL {
        let r = dist.attribute(a);
        let rule = inst.rules.get(a).map_or("free".to_string(), |rel| rel.to_string());
        let _ = writeln!(s, "\n[{a}] rule {rule}");
        if let Some(reason) = &r.fallback {
            let _ = writeln!(s, "  fell back to uniform: {reason}");
            continue;
        }
        for (i, op) in r.operators.iter().enumerate() {
            let decoded = &r.predictions[i].decoded;
            let best = crate::perception::argmax(decoded);
            let value = if a == Attribute::Position {
                format!("{:09b}", best + 1)
            } else {
                a.index_to_value(best).to_string()
            };
            let _ = writeln!(
                s,
                "  {:<18} p={:.4}  residual={:.3e}  decoded={} ({:.3})",
                op.operator.name(),
                r.posterior.probs[i],
                op.residual,
                value,
                decoded[best]
            );
        }
        let kinds = r.posterior.kind_probs();
        let _ = writeln!(
            s,
            "  kind: unary {:.4}  binary {:.4}  ternary {:.4}",
            kinds[0], kinds[1], kinds[2]
        );
        let op = crate::perception::argmax(&r.posterior.probs);
        let jsd: Vec<String> = r.distances[op].iter().map(|d| format!("{d:.3}")).collect();
        let _ = writeln!(s, "  jsd to candidates: {}", jsd.join(" "));
    }
    let probs: Vec<String> = dist.probs.iter().map(|p| format!("{p:.3}")).collect();
    let generated = dist.generated_panel();
    let _ = writeln!(s, "\ngenerated panel: {generated}");
    let _ = writeln!(s, "true answer:     {}", inst.answer());
    let _ = writeln!(s, "candidate probabilities: {}", probs.join(" "));
    let _ = writeln!(
        s,
        "selected {}  answer {}  {}",
        dist.choice(),
        inst.answer_index,
        if dist.choice() == inst.answer_index { "correct" } else { "wrong" }
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::generate_phase;
    use crate::rpm::{DistractorStrategy, Phase};

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("alans_gt".parse::<Variant>().is_err());
        assert!(Variant::AlansGt.noise(0.3).is_noiseless());
    }

    #[test]
    fn report_is_recomputable() {
        let insts = generate_phase(Regime::Localism, Phase::Test, DistractorStrategy::PerturbOne, 40, 5).unwrap();
        let model = Model::init(EncodingKind::Peano, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let report = evaluate_report(&model, &insts, Variant::Alans, 0.1, 1, &ReasonerConfig::default()).unwrap();
        assert_eq!(report.count, insts.len());
        let again = ReportTable::from_records(report.variant, report.regime, report.noise, report.records.clone());
        assert_eq!(again, report);
        assert!(report.text_ok());
    }

    impl ReportTable {
        fn text_ok(&self) -> bool {
            let t = self.to_text();
            t.contains("answer accuracy") && Attribute::ALL.iter().all(|a| t.contains(a.name()))
        }
    }

    #[test]
    fn identical_variants_have_zero_delta() {
        let row = AblationRow::new(Regime::Productivity, 0.75, 0.75);
        assert_eq!(row.delta, 0.0);
    }
}

//! Operator induction, execution, decoding and answer selection.
//!
//! Everything differentiable is built on a [`Tape`], so training and inference
//! share one code path. The plain functions at the top of the module wrap a
//! constant tape.
//!
//! Four operators are induced per attribute:
//! * unary: `A T = C` over adjacent pairs;
//! * binary compose: `A T B = C` over (col1, col2, col3);
//! * binary decompose: the same form over (col2, col3, col1), i.e. the first
//!   column is the composition of the other two;
//! * ternary: a symmetric map between the two context row aggregates.
//!
//! The two binary arrangements together make up the binary kind.

use serde::Serialize;
use thiserror::Error;

use crate::algebra::{circulant, cyclic_diagonal_sums, AlgebraError, Encoding};
use crate::model::Model;
use crate::perception::{argmax, mask_distribution, InstanceBeliefs};
use crate::rpm::{Attribute, PanelSpec, RelationKind, FULL_MASK, GRID_SLOTS};
use crate::tape::{jsd_value, Mat, SolveFailure, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReasonError {
    #[error(transparent)]
    Solve(#[from] SolveFailure),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error("distributions have supports of size {left} and {right}")]
    SupportMismatch { left: usize, right: usize },
    #[error("operator {0:?} needs the first row aggregate to execute")]
    MissingAggregate(Operator),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Unary,
    BinaryCompose,
    BinaryDecompose,
    Ternary,
}

impl Operator {
    pub const ALL: [Operator; 4] = [
        Operator::Unary,
        Operator::BinaryCompose,
        Operator::BinaryDecompose,
        Operator::Ternary,
    ];
    /// Position has no arithmetic.
    pub const POSITION: [Operator; 2] = [Operator::Unary, Operator::Ternary];

    pub fn kind(self) -> RelationKind {
        match self {
            Operator::Unary => RelationKind::Unary,
            Operator::BinaryCompose | Operator::BinaryDecompose => RelationKind::Binary,
            Operator::Ternary => RelationKind::Ternary,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::Unary => "unary",
            Operator::BinaryCompose => "binary(compose)",
            Operator::BinaryDecompose => "binary(decompose)",
            Operator::Ternary => "ternary",
        }
    }

    pub fn for_attribute(attr: Attribute) -> &'static [Operator] {
        if attr == Attribute::Position {
            &Operator::POSITION
        } else {
            &Operator::ALL
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReasonerConfig {
    /// Ridge strength per attribute, indexed by `Attribute as usize`.
    pub lambda: [f64; 5],
    pub tau_operator: f64,
    pub tau_decode: f64,
    pub tau_select: f64,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig {
            lambda: [1e-3; 5],
            tau_operator: 1.0,
            tau_decode: 1.0,
            tau_select: 1.0,
        }
    }
}

impl ReasonerConfig {
    pub fn lambda(&self, attr: Attribute) -> f64 {
        self.lambda[attr as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InducedOperator {
    pub operator: Operator,
    pub t: Mat,
    /// Objective value at `t`, ridge term included.
    pub residual: f64,
    /// Data term of the objective alone.
    pub misfit: f64,
    pub ridge: f64,
}

impl InducedOperator {
    fn from_fit(tape: &Tape, operator: Operator, fit: &Fit, ridge: f64) -> Self {
        InducedOperator {
            operator,
            t: tape.value(fit.t).clone(),
            residual: tape.scalar(fit.objective),
            misfit: tape.scalar(fit.misfit),
            ridge,
        }
    }

    pub fn kind(&self) -> RelationKind {
        self.operator.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorPosterior {
    pub operators: Vec<Operator>,
    pub probs: Vec<f64>,
}

impl OperatorPosterior {
    /// Probability of each relation kind, summing the operators of one kind.
    pub fn kind_probs(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (op, p) in self.operators.iter().zip(&self.probs) {
            out[op.kind().index()] += p;
        }
        out
    }

    pub fn best_kind(&self) -> RelationKind {
        RelationKind::ALL[argmax(&self.kind_probs())]
    }

    pub fn best_operator(&self) -> Operator {
        self.operators[argmax(&self.probs)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub m_hat: Mat,
    /// Belief over value indices (Position: over masks 1..=511, index mask-1).
    pub decoded: Vec<f64>,
}

/// Per-attribute view of one reasoning pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeReasoning {
    pub attribute: Attribute,
    pub operators: Vec<InducedOperator>,
    pub posterior: OperatorPosterior,
    pub predictions: Vec<Prediction>,
    /// JSD between each operator's prediction and each candidate.
    pub distances: Vec<[f64; 8]>,
    /// Candidate distribution from this attribute alone, mixed over operators.
    pub conditional: [f64; 8],
    /// Set when induction failed and the attribute fell back to uniform.
    pub fallback: Option<String>,
}

impl AttributeReasoning {
    /// Value predicted by the most probable operator, as an attribute value.
    pub fn generated_value(&self) -> Option<u32> {
        if self.fallback.is_some() {
            return None;
        }
        let op = argmax(&self.posterior.probs);
        let idx = argmax(&self.predictions[op].decoded);
        Some(match self.attribute {
            Attribute::Position => idx as u32 + 1,
            a => a.index_to_value(idx),
        })
    }

    fn uniform(attribute: Attribute, reason: String) -> Self {
        let operators = Operator::for_attribute(attribute).to_vec();
        let n = operators.len();
        AttributeReasoning {
            attribute,
            operators: Vec::new(),
            posterior: OperatorPosterior {
                operators,
                probs: vec![1.0 / n as f64; n],
            },
            predictions: Vec::new(),
            distances: Vec::new(),
            conditional: [0.125; 8],
            fallback: Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution {
    pub probs: [f64; 8],
    /// In `Attribute::ALL` order.
    pub attributes: Vec<AttributeReasoning>,
}

impl AnswerDistribution {
    pub fn choice(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn fallback(&self) -> bool {
        self.attributes.iter().any(|a| a.fallback.is_some())
    }

    pub fn attribute(&self, attr: Attribute) -> &AttributeReasoning {
        &self.attributes[attr as usize]
    }

    /// Symbolic answer panel: most probable operator, then most probable value,
    /// per attribute. The layout is the most probable mask holding the
    /// generated object count.
    pub fn generated_panel(&self) -> PanelSpec {
        let value = |a: Attribute| self.attribute(a).generated_value().unwrap_or(0);
        let number = value(Attribute::Number).clamp(1, GRID_SLOTS as u32);
        let pos = self.attribute(Attribute::Position);
        let position = if pos.fallback.is_none() {
            let decoded = &pos.predictions[argmax(&pos.posterior.probs)].decoded;
            (1..=FULL_MASK)
                .filter(|m| m.count_ones() == number)
                .max_by(|a, b| decoded[*a as usize - 1].total_cmp(&decoded[*b as usize - 1]).then(b.cmp(a)))
                .unwrap()
        } else {
            (1u32 << number) - 1
        };
        PanelSpec {
            position,
            ty: value(Attribute::Type),
            size: value(Attribute::Size),
            color: value(Attribute::Color),
        }
    }
}

// ---------------------------------------------------------------------------
// Tape builders

/// A fitted operator on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Fit {
    pub t: Var,
    /// Data misfit plus ridge penalty.
    pub objective: Var,
    /// Data misfit alone.
    pub misfit: Var,
}

impl Fit {
    fn finish(tape: &mut Tape, t: Var, misfit_terms: &[(Var, f64)], lambda: f64) -> Self {
        let misfit = tape.weighted_sum(misfit_terms);
        let ridge = tape.frob_sq(t);
        let objective = tape.weighted_sum(&[(misfit, 1.0), (ridge, lambda)]);
        Fit { t, objective, misfit }
    }
}

/// Ridge fit of `A T = C` over `pairs`.
pub fn unary_fit(tape: &mut Tape, pairs: &[(Var, Var)], lambda: f64) -> Result<Fit, SolveFailure> {
    let mut grams = Vec::with_capacity(pairs.len());
    let mut cross = Vec::with_capacity(pairs.len());
    for &(a, c) in pairs {
        let at = tape.transpose(a);
        grams.push(tape.matmul(at, a));
        cross.push(tape.matmul(at, c));
    }
    let g = tape.sum_all(&grams);
    let g = tape.add_identity(g, lambda);
    let h = tape.sum_all(&cross);
    let t = tape.solve(g, h)?;
    let mut terms = Vec::with_capacity(pairs.len());
    for &(a, c) in pairs {
        let at_ = tape.matmul(a, t);
        let r = tape.sub(at_, c);
        terms.push((tape.frob_sq(r), 1.0));
    }
    Ok(Fit::finish(tape, t, &terms, lambda))
}

/// Ridge fit of `A T B = C` over `triplets` through the Kronecker normal
/// equations on column-major `vec(T)`.
pub fn binary_fit(tape: &mut Tape, triplets: &[(Var, Var, Var)], lambda: f64) -> Result<Fit, SolveFailure> {
    let d = tape.value(triplets[0].0).ncols();
    let mut blocks = Vec::with_capacity(triplets.len());
    let mut rhs = Vec::with_capacity(triplets.len());
    for &(a, b, c) in triplets {
        let at = tape.transpose(a);
        let bt = tape.transpose(b);
        let ata = tape.matmul(at, a);
        let bbt = tape.matmul(b, bt);
        blocks.push(tape.kron(bbt, ata));
        let atc = tape.matmul(at, c);
        let atcbt = tape.matmul(atc, bt);
        rhs.push(tape.vec(atcbt));
    }
    let n = tape.sum_all(&blocks);
    let n = tape.add_identity(n, lambda);
    let r = tape.sum_all(&rhs);
    let tv = tape.solve(n, r)?;
    let t = tape.unvec(tv, d);
    let mut terms = Vec::with_capacity(triplets.len());
    for &(a, b, c) in triplets {
        let at_ = tape.matmul(a, t);
        let atb = tape.matmul(at_, b);
        let res = tape.sub(atb, c);
        terms.push((tape.frob_sq(res), 1.0));
    }
    Ok(Fit::finish(tape, t, &terms, lambda))
}

/// Ridge fit `X = argmin ||Q X - Y||^2 + lambda ||X||^2`.
fn ridge_solve(tape: &mut Tape, q: Var, y: Var, lambda: f64) -> Result<Var, SolveFailure> {
    let qt = tape.transpose(q);
    let g = tape.matmul(qt, q);
    let g = tape.add_identity(g, lambda);
    let h = tape.matmul(qt, y);
    tape.solve(g, h)
}

/// Context representations of one attribute, panels 1..=8 in row-major order.
struct RowReps {
    panels: Vec<Var>,
    agg1: Var,
    agg2: Var,
}

impl RowReps {
    fn new(tape: &mut Tape, panels: Vec<Var>) -> Self {
        let agg1 = tape.sum_all(&panels[0..3]);
        let agg2 = tape.sum_all(&panels[3..6]);
        RowReps { panels, agg1, agg2 }
    }
}

/// Induces `op` from rows 1-2 and executes it on row 3's prefix.
fn induce_and_execute(tape: &mut Tape, reps: &RowReps, op: Operator, lambda: f64) -> Result<(Fit, Var), SolveFailure> {
    let p = &reps.panels;
    match op {
        Operator::Unary => {
            let pairs = [(p[0], p[1]), (p[1], p[2]), (p[3], p[4]), (p[4], p[5])];
            let fit = unary_fit(tape, &pairs, lambda)?;
            let pred = tape.matmul(p[7], fit.t);
            Ok((fit, pred))
        }
        Operator::BinaryCompose => {
            let fit = binary_fit(tape, &[(p[0], p[1], p[2]), (p[3], p[4], p[5])], lambda)?;
            let at = tape.matmul(p[6], fit.t);
            let pred = tape.matmul(at, p[7]);
            Ok((fit, pred))
        }
        Operator::BinaryDecompose => {
            let fit = binary_fit(tape, &[(p[1], p[2], p[0]), (p[4], p[5], p[3])], lambda)?;
            let q = tape.matmul(p[7], fit.t);
            let pred = ridge_solve(tape, q, p[6], lambda)?;
            Ok((fit, pred))
        }
        Operator::Ternary => {
            let pairs = [(reps.agg1, reps.agg2), (reps.agg2, reps.agg1)];
            let fit = unary_fit(tape, &pairs, lambda)?;
            let row = tape.matmul(reps.agg1, fit.t);
            let prefix = tape.add(p[6], p[7]);
            let pred = tape.sub(row, prefix);
            Ok((fit, pred))
        }
    }
}

/// Tape nodes of one attribute's contribution to the answer distribution.
pub struct AttributeNodes {
    /// Log of the operator-mixed candidate distribution (8x1).
    pub log_conditional: Var,
    /// Operator posterior (one entry per operator).
    pub posterior: Var,
    /// Relation-kind probabilities (3x1).
    pub kind_probs: Var,
    pub reasoning: AttributeReasoning,
}

/// Value representations of an encoding on the tape, given its parameter nodes.
pub fn value_nodes(tape: &mut Tape, enc: &Encoding, params: &[Var]) -> Vec<Var> {
    match enc {
        Encoding::Peano(_) => {
            let (m0, m) = (params[0], params[1]);
            let mut out = vec![m0];
            for _ in 1..enc.cardinality() {
                let prev = *out.last().unwrap();
                out.push(tape.matmul(m, prev));
            }
            out
        }
        Encoding::Independent(_) => params.to_vec(),
    }
}

fn expected_node(tape: &mut Tape, values: &[Var], dist: &[f64]) -> Var {
    let terms: Vec<(Var, f64)> = values
        .iter()
        .zip(dist)
        .filter(|(_, &p)| p != 0.0)
        .map(|(&v, &p)| (v, p))
        .collect();
    if terms.is_empty() {
        tape.weighted_sum(&[(values[0], 0.0)])
    } else {
        tape.weighted_sum(&terms)
    }
}

fn selection(tape: &mut Tape, decoded: Var, candidates: &[Vec<f64>], tau: f64) -> (Var, [f64; 8]) {
    let mut ds = Vec::with_capacity(8);
    let mut raw = [0.0; 8];
    for (n, c) in candidates.iter().enumerate() {
        let d = tape.jsd(decoded, c);
        raw[n] = tape.scalar(d);
        ds.push(d);
    }
    let d = tape.concat(&ds);
    let logits = tape.scale(d, -1.0 / tau);
    (tape.softmax(logits), raw)
}

fn kind_prob_nodes(tape: &mut Tape, posterior: Var, ops: &[Operator]) -> Var {
    let entries: Vec<(Operator, Var)> = ops.iter().enumerate().map(|(i, &op)| (op, tape.entry(posterior, i, 0))).collect();
    let kinds: Vec<Var> = RelationKind::ALL
        .iter()
        .map(|&k| {
            let terms: Vec<(Var, f64)> = entries.iter().filter(|(op, _)| op.kind() == k).map(|&(_, v)| (v, 1.0)).collect();
            if terms.is_empty() {
                tape.constant_scalar(0.0)
            } else {
                tape.weighted_sum(&terms)
            }
        })
        .collect();
    tape.concat(&kinds)
}

/// Mixes per-operator candidate distributions by the posterior.
fn mixture(tape: &mut Tape, posterior: Var, selections: &[Var]) -> Var {
    let parts: Vec<Var> = selections
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let w = tape.entry(posterior, i, 0);
            tape.scale_by(w, s)
        })
        .collect();
    tape.sum_all(&parts)
}

fn posterior_node(tape: &mut Tape, residuals: &[Var], tau: f64) -> Var {
    let r = tape.concat(residuals);
    let logits = tape.scale(r, -1.0 / tau);
    tape.softmax(logits)
}

fn fits_to_reasoning(
    tape: &Tape,
    attribute: Attribute,
    ops: &[Operator],
    fits: &[(Fit, Var)],
    decoded: &[Var],
    posterior: Var,
    distances: Vec<[f64; 8]>,
    conditional: Var,
    lambda: f64,
) -> AttributeReasoning {
    AttributeReasoning {
        attribute,
        operators: ops
            .iter()
            .zip(fits)
            .map(|(&operator, (fit, _))| InducedOperator::from_fit(tape, operator, fit, lambda))
            .collect(),
        posterior: OperatorPosterior {
            operators: ops.to_vec(),
            probs: tape.value(posterior).iter().copied().collect(),
        },
        predictions: fits
            .iter()
            .zip(decoded)
            .map(|(&(_, pred), &q)| Prediction {
                m_hat: tape.value(pred).clone(),
                decoded: tape.value(q).iter().copied().collect(),
            })
            .collect(),
        distances,
        conditional: std::array::from_fn(|n| tape.value(conditional)[(n, 0)]),
        fallback: None,
    }
}

/// Builds one encoded attribute's reasoning graph.
pub fn attribute_graph(
    tape: &mut Tape,
    attribute: Attribute,
    enc: &Encoding,
    params: &[Var],
    beliefs: &InstanceBeliefs,
    cfg: &ReasonerConfig,
) -> Result<AttributeNodes, SolveFailure> {
    let lambda = cfg.lambda(attribute);
    let values = value_nodes(tape, enc, params);
    let panels: Vec<Var> = beliefs[..8]
        .iter()
        .map(|b| expected_node(tape, &values, &b.dist(attribute)))
        .collect();
    let reps = RowReps::new(tape, panels);
    let candidates: Vec<Vec<f64>> = beliefs[8..].iter().map(|b| b.dist(attribute)).collect();
    let ops = Operator::ALL;
    let mut fits = Vec::with_capacity(ops.len());
    for op in ops {
        fits.push(induce_and_execute(tape, &reps, op, lambda)?);
    }
    let residuals: Vec<Var> = fits.iter().map(|f| f.0.objective).collect();
    let posterior = posterior_node(tape, &residuals, cfg.tau_operator);
    let mut decoded = Vec::with_capacity(ops.len());
    let mut selections = Vec::with_capacity(ops.len());
    let mut distances = Vec::with_capacity(ops.len());
    for &(_, pred) in &fits {
        let sq = tape.sq_dists(pred, &values);
        let logits = tape.scale(sq, -1.0 / cfg.tau_decode);
        let q = tape.softmax(logits);
        let (sel, raw) = selection(tape, q, &candidates, cfg.tau_select);
        decoded.push(q);
        selections.push(sel);
        distances.push(raw);
    }
    let conditional = mixture(tape, posterior, &selections);
    let log_conditional = tape.log(conditional);
    let kind_probs = kind_prob_nodes(tape, posterior, &ops);
    let reasoning = fits_to_reasoning(tape, attribute, &ops, &fits, &decoded, posterior, distances, conditional, lambda);
    Ok(AttributeNodes {
        log_conditional,
        posterior,
        kind_probs,
        reasoning,
    })
}

/// Position reasoning on circulant lifts of the occupancy marginals. It has
/// no learnable parameters and is evaluated on a constant tape.
pub fn position_reasoning(beliefs: &InstanceBeliefs, cfg: &ReasonerConfig) -> AttributeReasoning {
    let attribute = Attribute::Position;
    let lambda = cfg.lambda(attribute);
    let mut tape = Tape::new();
    let panels: Vec<Var> = beliefs[..8].iter().map(|b| tape.constant(circulant(&b.position))).collect();
    let reps = RowReps::new(&mut tape, panels);
    let ops = Operator::POSITION;
    let mut fits = Vec::with_capacity(2);
    for op in ops {
        match induce_and_execute(&mut tape, &reps, op, lambda) {
            Ok(f) => fits.push(f),
            Err(e) => return AttributeReasoning::uniform(attribute, e.to_string()),
        }
    }
    let residuals: Vec<Var> = fits.iter().map(|f| f.0.objective).collect();
    let posterior = posterior_node(&mut tape, &residuals, cfg.tau_operator);
    let candidates: Vec<Vec<f64>> = beliefs[8..].iter().map(|b| mask_distribution(&b.position)).collect();
    let mut decoded = Vec::new();
    let mut selections = Vec::new();
    let mut distances = Vec::new();
    for &(_, pred) in &fits {
        let m_hat = tape.value(pred);
        let g = cyclic_diagonal_sums(m_hat);
        let norm = m_hat.norm_squared();
        let logits: Vec<f64> = (1..=FULL_MASK)
            .map(|m| {
                let (mut dot, mut ones) = (0.0, 0.0);
                for (s, gs) in g.iter().enumerate() {
                    if m >> s & 1 == 1 {
                        dot += gs;
                        ones += 1.0;
                    }
                }
                // ||m_hat - circ(m)||^2 with ||circ(m)||^2 = 9 * popcount
                -(norm - 2.0 * dot + GRID_SLOTS as f64 * ones) / cfg.tau_decode
            })
            .collect();
        let l = tape.constant_vector(&logits);
        let q = tape.softmax(l);
        let (sel, raw) = selection(&mut tape, q, &candidates, cfg.tau_select);
        decoded.push(q);
        selections.push(sel);
        distances.push(raw);
    }
    let conditional = mixture(&mut tape, posterior, &selections);
    fits_to_reasoning(&tape, attribute, &ops, &fits, &decoded, posterior, distances, conditional, lambda)
}

/// Full forward graph over one instance.
pub struct Graph {
    pub tape: Tape,
    /// Parameter leaves per encoded attribute, in `Model::encodings` order.
    pub params: Vec<Vec<Var>>,
    /// Log answer distribution (8x1).
    pub log_answer: Var,
    /// Relation-kind probability node per encoded attribute, unless it fell back.
    pub kind_probs: Vec<Option<Var>>,
    pub attributes: Vec<AttributeReasoning>,
}

impl Graph {
    pub fn answer_probs(&self) -> [f64; 8] {
        std::array::from_fn(|n| self.tape.value(self.log_answer)[(n, 0)].exp())
    }

    pub fn distribution(&self) -> AnswerDistribution {
        AnswerDistribution {
            probs: self.answer_probs(),
            attributes: self.attributes.clone(),
        }
    }
}

/// Builds the answer distribution on a tape. With `trainable`, encoding
/// matrices become gradient-carrying leaves.
pub fn build_graph(model: &Model, beliefs: &InstanceBeliefs, cfg: &ReasonerConfig, trainable: bool) -> Graph {
    let mut tape = Tape::new();
    let mut params = Vec::new();
    let mut kind_probs = Vec::new();
    let mut logs = Vec::new();
    let mut by_attr: Vec<Option<AttributeReasoning>> = vec![None; 5];
    for enc in &model.encodings {
        let attr = enc.attribute();
        let leaves: Vec<Var> = enc
            .params()
            .into_iter()
            .map(|m| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
            .collect();
        match attribute_graph(&mut tape, attr, enc, &leaves, beliefs, cfg) {
            Ok(nodes) => {
                logs.push(nodes.log_conditional);
                kind_probs.push(Some(nodes.kind_probs));
                by_attr[attr as usize] = Some(nodes.reasoning);
            }
            Err(e) => {
                kind_probs.push(None);
                by_attr[attr as usize] = Some(AttributeReasoning::uniform(attr, e.to_string()));
            }
        }
        params.push(leaves);
    }
    let pos = position_reasoning(beliefs, cfg);
    let pos_log: Vec<f64> = pos.conditional.iter().map(|p| p.max(1e-300).ln()).collect();
    logs.push(tape.constant_vector(&pos_log));
    by_attr[Attribute::Position as usize] = Some(pos);
    let total = tape.sum_all(&logs);
    let log_answer = tape.log_softmax(total);
    Graph {
        tape,
        params,
        log_answer,
        kind_probs,
        attributes: by_attr.into_iter().map(|a| a.expect("every attribute reasoned")).collect(),
    }
}

/// Factorized answer distribution over the eight candidates.
pub fn answer_distribution(beliefs: &InstanceBeliefs, model: &Model, cfg: &ReasonerConfig) -> AnswerDistribution {
    build_graph(model, beliefs, cfg, false).distribution()
}

// ---------------------------------------------------------------------------
// Plain entry points

fn constants(tape: &mut Tape, mats: &[&Mat]) -> Vec<Var> {
    mats.iter().map(|m| tape.constant((*m).clone())).collect()
}

/// Unary induction over the adjacent pairs of rows 1 and 2 (`reps` = panels 1..=6).
pub fn induce_unary(reps: &[Mat], lambda: f64) -> Result<InducedOperator, ReasonError> {
    let mut tape = Tape::new();
    let p = constants(&mut tape, &reps.iter().collect::<Vec<_>>());
    let pairs = [(p[0], p[1]), (p[1], p[2]), (p[3], p[4]), (p[4], p[5])];
    let fit = unary_fit(&mut tape, &pairs, lambda)?;
    Ok(InducedOperator::from_fit(&tape, Operator::Unary, &fit, lambda))
}

/// Binary induction `A T B = C` over the given triplets.
pub fn induce_binary(triplets: &[[Mat; 3]], lambda: f64) -> Result<InducedOperator, ReasonError> {
    let mut tape = Tape::new();
    let vars: Vec<(Var, Var, Var)> = triplets
        .iter()
        .map(|[a, b, c]| (tape.constant(a.clone()), tape.constant(b.clone()), tape.constant(c.clone())))
        .collect();
    let fit = binary_fit(&mut tape, &vars, lambda)?;
    Ok(InducedOperator::from_fit(&tape, Operator::BinaryCompose, &fit, lambda))
}

/// Ternary induction: a map carrying each row aggregate onto the other.
pub fn induce_ternary(agg1: &Mat, agg2: &Mat, lambda: f64) -> Result<InducedOperator, ReasonError> {
    let mut tape = Tape::new();
    let a = tape.constant(agg1.clone());
    let b = tape.constant(agg2.clone());
    let fit = unary_fit(&mut tape, &[(a, b), (b, a)], lambda)?;
    Ok(InducedOperator::from_fit(&tape, Operator::Ternary, &fit, lambda))
}

/// Softmax of `-residual / tau`.
pub fn operator_posterior(residuals: &[f64], tau: f64) -> Vec<f64> {
    let max = residuals.iter().map(|r| -r / tau).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = residuals.iter().map(|r| (-r / tau - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Predicted answer representation from row 3's prefix.
pub fn execute(op: &InducedOperator, r7: &Mat, r8: &Mat, agg1: Option<&Mat>) -> Result<Mat, ReasonError> {
    Ok(match op.operator {
        Operator::Unary => r8 * &op.t,
        Operator::BinaryCompose => r7 * &op.t * r8,
        Operator::BinaryDecompose => {
            let q = r8 * &op.t;
            let g = q.transpose() * &q + Mat::identity(q.ncols(), q.ncols()) * op.ridge;
            crate::tape::solve_checked(&g, &(q.transpose() * r7))?
        }
        Operator::Ternary => {
            let agg1 = agg1.ok_or(ReasonError::MissingAggregate(op.operator))?;
            agg1 * &op.t - r7 - r8
        }
    })
}

/// Softmax of `-||m_hat - rep_k||^2 / tau` over the value representations.
pub fn decode(m_hat: &Mat, reps: &[Mat], tau: f64) -> Vec<f64> {
    let neg: Vec<f64> = reps.iter().map(|r| (m_hat - r).norm_squared()).collect();
    operator_posterior(&neg, tau)
}

/// Base-2 Jensen-Shannon divergence.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, ReasonError> {
    if p.len() != q.len() {
        return Err(ReasonError::SupportMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(jsd_value(p, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{init_encoding, PeanoEncoding};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn peano(seed: u64, d: usize) -> (Encoding, PeanoEncoding) {
        let e = init_encoding(Attribute::Color, d, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (Encoding::Peano(e.clone()), e)
    }

    #[test]
    fn identity_pairs_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = crate::algebra::random_orthogonal(3, &mut rng);
        let b = crate::algebra::random_orthogonal(3, &mut rng);
        let reps = vec![a.clone(), a.clone(), a, b.clone(), b.clone(), b];
        let op = induce_unary(&reps, 0.0).unwrap();
        assert!((op.t - Mat::identity(3, 3)).norm() < 1e-10);
        assert!(op.residual < 1e-20);
    }

    #[test]
    fn progression_is_realizable() {
        let (enc, e) = peano(5, 4);
        let reps: Vec<Mat> = [1, 2, 3, 4, 5, 6].iter().map(|&k| enc.encode(k).unwrap()).collect();
        let op = induce_unary(&reps, 1e-6).unwrap();
        assert!(op.misfit <= 1e-10, "{}", op.misfit);
        let exact = e.m0.clone().try_inverse().unwrap() * &e.m * &e.m0;
        assert!((op.t - exact).norm() < 1e-3);
    }

    #[test]
    fn single_triplet_with_identities() {
        let c = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let op = induce_binary(&[[Mat::identity(2, 2), Mat::identity(2, 2), c.clone()]], 0.0).unwrap();
        assert!((op.t - c).norm() < 1e-12);
    }

    #[test]
    fn arithmetic_plus_executes_exactly() {
        let (enc, e) = peano(7, 3);
        let r = |k: usize| enc.encode(k).unwrap();
        let op = induce_binary(&[[r(1), r(2), r(3)], [r(2), r(4), r(6)]], 1e-6).unwrap();
        assert!(op.misfit <= 1e-10, "{}", op.misfit);
        let inv = e.m0.clone().try_inverse().unwrap();
        let exact = InducedOperator {
            operator: Operator::BinaryCompose,
            t: inv,
            residual: 0.0,
            misfit: 0.0,
            ridge: 0.0,
        };
        let m_hat = execute(&exact, &r(2), &r(3), None).unwrap();
        assert!((&m_hat - r(5)).norm() < 1e-10);
        let decoded = decode(&m_hat, &enc.encode_all(), 1.0);
        assert_eq!(argmax(&decoded), 5);
    }

    #[test]
    fn distribute_three_aggregate_subtraction() {
        let (enc, _) = peano(8, 3);
        let r = |k: usize| enc.encode(k).unwrap();
        let agg1 = r(1) + r(4) + r(7);
        let agg2 = r(4) + r(7) + r(1);
        let op = induce_ternary(&agg1, &agg2, 1e-9).unwrap();
        assert!(op.residual < 1e-6);
        let m_hat = execute(&op, &r(4), &r(7), Some(&agg1)).unwrap();
        assert!((m_hat - r(1)).norm() < 1e-6);
    }

    #[test]
    fn posterior_examples() {
        let p = operator_posterior(&[0.0, 10.0, 10.0], 1.0);
        assert!((p[0] - 0.99990921).abs() < 1e-8);
        assert!((p[1] - 4.5397e-5).abs() < 1e-8);
        let u = operator_posterior(&[2.0, 2.0, 2.0], 1.0);
        assert!(u.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let shifted = operator_posterior(&[5.0, 15.0, 15.0], 1.0);
        assert!(p.iter().zip(&shifted).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn decode_preserves_ties() {
        let reps = vec![Mat::identity(2, 2), -Mat::identity(2, 2)];
        let q = decode(&Mat::zeros(2, 2), &reps, 1.0);
        assert_eq!(q[0], q[1]);
    }

    #[test]
    fn jsd_support_mismatch() {
        assert!(matches!(jsd(&[1.0], &[0.5, 0.5]), Err(ReasonError::SupportMismatch { left: 1, right: 2 })));
        assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    }
}

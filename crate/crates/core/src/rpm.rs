//! Attribute-level RPM instances and the semantics of their row relations.
//!
//! Every panel lives on a 3x3 slot grid. `Number` is carried implicitly by
//! the popcount of the position mask, so the two attributes share one rule
//! slot: whenever `Number` carries a non-constant relation (other than a
//! distribute-three mirrored by `Position`), the object layout is free and the
//! rule set records no relation for `Position`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of slots in the 3x3 grid.
pub const GRID_SLOTS: usize = 9;
/// Largest valid position mask (all nine slots occupied).
pub const FULL_MASK: u32 = (1 << GRID_SLOTS) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Number,
    Position,
    Type,
    Size,
    Color,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Number,
        Attribute::Position,
        Attribute::Type,
        Attribute::Size,
        Attribute::Color,
    ];

    /// Attributes reasoned about through learnable matrix encodings.
    pub const ENCODED: [Attribute; 4] = [
        Attribute::Number,
        Attribute::Type,
        Attribute::Size,
        Attribute::Color,
    ];

    pub fn domain(self) -> AttrDomain {
        let cardinality = match self {
            Attribute::Number => 9,
            Attribute::Position => GRID_SLOTS,
            Attribute::Type => 5,
            Attribute::Size => 6,
            Attribute::Color => 10,
        };
        AttrDomain {
            attribute: self,
            cardinality,
        }
    }

    pub fn cardinality(self) -> usize {
        self.domain().cardinality
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Number => "number",
            Attribute::Position => "position",
            Attribute::Type => "type",
            Attribute::Size => "size",
            Attribute::Color => "color",
        }
    }

    /// Slot of this attribute inside `Attribute::ENCODED`.
    pub fn encoded_slot(self) -> Option<usize> {
        Attribute::ENCODED.iter().position(|&a| a == self)
    }

    /// Maps an attribute value onto its 0-based index in the domain.
    /// Number values are object counts 1..=9; the others are already indices.
    pub fn value_to_index(self, value: u32) -> usize {
        match self {
            Attribute::Number => value as usize - 1,
            _ => value as usize,
        }
    }

    pub fn index_to_value(self, index: usize) -> u32 {
        match self {
            Attribute::Number => index as u32 + 1,
            _ => index as u32,
        }
    }

    /// Whether `value` lies in this attribute's value set.
    pub fn contains(self, value: i64) -> bool {
        match self {
            Attribute::Number => (1..=9).contains(&value),
            Attribute::Position => (1..=FULL_MASK as i64).contains(&value),
            _ => (0..self.cardinality() as i64).contains(&value),
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown attribute `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttrDomain {
    pub attribute: Attribute,
    pub cardinality: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Unary,
    Binary,
    Ternary,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [RelationKind::Unary, RelationKind::Binary, RelationKind::Ternary];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::Unary => "unary",
            RelationKind::Binary => "binary",
            RelationKind::Ternary => "ternary",
        }
    }
}

/// Row-permutation scheme of a distribute-three relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cycle {
    /// Row r is the first row rotated left by r.
    Left,
    /// Row r is the first row rotated right by r.
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    Constant,
    Progression(i8),
    ArithmeticPlus,
    ArithmeticMinus,
    DistributeThree(Cycle),
}

impl Relation {
    pub fn kind(self) -> RelationKind {
        match self {
            Relation::Constant | Relation::Progression(_) => RelationKind::Unary,
            Relation::ArithmeticPlus | Relation::ArithmeticMinus => RelationKind::Binary,
            Relation::DistributeThree(_) => RelationKind::Ternary,
        }
    }

    pub fn is_valid(self) -> bool {
        match self {
            Relation::Progression(s) => matches!(s, -2 | -1 | 1 | 2),
            _ => true,
        }
    }

    /// Stable textual label, e.g. `progression(+1)`.
    pub fn label(self) -> String {
        match self {
            Relation::Constant => "constant".into(),
            Relation::Progression(s) => format!("progression({s:+})"),
            Relation::ArithmeticPlus => "arithmetic(+)".into(),
            Relation::ArithmeticMinus => "arithmetic(-)".into(),
            Relation::DistributeThree(Cycle::Left) => "distribute_three(left)".into(),
            Relation::DistributeThree(Cycle::Right) => "distribute_three(right)".into(),
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// A relation attached to one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationInstance {
    pub attribute: Attribute,
    pub relation: Relation,
}

impl RelationInstance {
    pub fn kind(&self) -> RelationKind {
        self.relation.kind()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleError {
    #[error("value {value} leaves the {attribute} domain")]
    OutOfDomain { attribute: Attribute, value: i64 },
    #[error("relation {relation} expects a prefix of {expected} values, got {got}")]
    ArityMismatch {
        relation: Relation,
        expected: usize,
        got: usize,
    },
    #[error("distribute-three completion needs the row's value triple")]
    MissingTriple,
    #[error("invalid rule set: {0}")]
    InvalidRuleSet(String),
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
}

/// Rotates a 9-slot occupancy mask by `step` slots (slot j moves to j + step mod 9).
pub fn rotate_mask(mask: u32, step: i64) -> u32 {
    let s = step.rem_euclid(GRID_SLOTS as i64) as u32;
    let n = GRID_SLOTS as u32;
    ((mask << s) | (mask >> (n - s) % n)) & FULL_MASK
}

fn check(attribute: Attribute, value: i64) -> Result<u32, RuleError> {
    if attribute.contains(value) {
        Ok(value as u32)
    } else {
        Err(RuleError::OutOfDomain { attribute, value })
    }
}

/// Completes a row under `relation`.
///
/// Unary relations take the single previous value and return its successor;
/// binary and ternary relations take the first two row entries and return the
/// third. Distribute-three additionally needs the row's value triple.
pub fn apply_relation(
    relation: Relation,
    attribute: Attribute,
    prefix: &[u32],
    triple: Option<[u32; 3]>,
) -> Result<u32, RuleError> {
    let arity = match relation.kind() {
        RelationKind::Unary => 1,
        RelationKind::Binary | RelationKind::Ternary => 2,
    };
    if prefix.len() != arity {
        return Err(RuleError::ArityMismatch {
            relation,
            expected: arity,
            got: prefix.len(),
        });
    }
    for &v in prefix {
        check(attribute, v as i64)?;
    }
    if attribute == Attribute::Position && relation.kind() == RelationKind::Binary {
        return Err(RuleError::InvalidRuleSet(
            "arithmetic is not defined on position".into(),
        ));
    }
    match relation {
        Relation::Constant => Ok(prefix[0]),
        Relation::Progression(step) => {
            if attribute == Attribute::Position {
                Ok(rotate_mask(prefix[0], step as i64))
            } else {
                check(attribute, prefix[0] as i64 + step as i64)
            }
        }
        Relation::ArithmeticPlus => check(attribute, prefix[0] as i64 + prefix[1] as i64),
        Relation::ArithmeticMinus => check(attribute, prefix[0] as i64 - prefix[1] as i64),
        Relation::DistributeThree(_) => {
            let triple = triple.ok_or(RuleError::MissingTriple)?;
            let mut rest = triple.iter().copied().filter(|v| !prefix.contains(v));
            match (rest.next(), rest.next()) {
                (Some(v), None) if prefix[0] != prefix[1] => Ok(v),
                _ => Err(RuleError::OutOfDomain {
                    attribute,
                    value: -1,
                }),
            }
        }
    }
}

/// Row `r` (0-based) of a distribute-three pattern seeded by `first`.
pub fn distribute_row(first: [u32; 3], cycle: Cycle, r: usize) -> [u32; 3] {
    let shift = match cycle {
        Cycle::Left => r % 3,
        Cycle::Right => (3 - r % 3) % 3,
    };
    [first[shift], first[(shift + 1) % 3], first[(shift + 2) % 3]]
}

/// Whether a full 3x3 grid of values satisfies `relation` row by row.
pub fn rows_satisfy(relation: Relation, attribute: Attribute, rows: &[[u32; 3]; 3]) -> bool {
    if rows
        .iter()
        .flatten()
        .any(|&v| !attribute.contains(v as i64))
    {
        return false;
    }
    match relation.kind() {
        RelationKind::Unary => rows.iter().all(|row| {
            row.windows(2).all(|w| {
                apply_relation(relation, attribute, &w[..1], None)
                    .map(|v| v == w[1])
                    .unwrap_or(false)
            })
        }),
        RelationKind::Binary => rows.iter().all(|row| {
            apply_relation(relation, attribute, &row[..2], None)
                .map(|v| v == row[2])
                .unwrap_or(false)
        }),
        RelationKind::Ternary => {
            let Relation::DistributeThree(cycle) = relation else {
                unreachable!()
            };
            let first = rows[0];
            if first[0] == first[1] || first[1] == first[2] || first[0] == first[2] {
                return false;
            }
            (1..3).all(|r| distribute_row(first, cycle, r) == rows[r])
        }
    }
}

/// One relation per attribute. `Position` carries `None` when the layout is
/// free, which is only allowed while `Number` is driven by its own relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleSet {
    pub number: Relation,
    pub position: Option<Relation>,
    pub ty: Relation,
    pub size: Relation,
    pub color: Relation,
}

impl RuleSet {
    pub fn new(
        number: Relation,
        position: Option<Relation>,
        ty: Relation,
        size: Relation,
        color: Relation,
    ) -> Result<Self, RuleError> {
        let rules = RuleSet {
            number,
            position,
            ty,
            size,
            color,
        };
        rules.check()?;
        Ok(rules)
    }

    pub fn check(&self) -> Result<(), RuleError> {
        for attr in Attribute::ALL {
            if let Some(rel) = self.get(attr) {
                if !rel.is_valid() {
                    return Err(RuleError::InvalidRuleSet(format!("{rel} on {attr}")));
                }
            }
        }
        match (self.number, self.position) {
            (_, Some(p)) if p.kind() == RelationKind::Binary => Err(RuleError::InvalidRuleSet(
                "binary relations cannot govern position".into(),
            )),
            (Relation::Constant, Some(Relation::Constant | Relation::Progression(_))) => Ok(()),
            (Relation::DistributeThree(a), Some(Relation::DistributeThree(b))) if a == b => Ok(()),
            (Relation::Constant, None) => Err(RuleError::InvalidRuleSet(
                "a constant number requires a position relation".into(),
            )),
            (_, None) => Ok(()),
            (n, Some(p)) => Err(RuleError::InvalidRuleSet(format!(
                "number {n} is incompatible with position {p}"
            ))),
        }
    }

    pub fn get(&self, attr: Attribute) -> Option<Relation> {
        match attr {
            Attribute::Number => Some(self.number),
            Attribute::Position => self.position,
            Attribute::Type => Some(self.ty),
            Attribute::Size => Some(self.size),
            Attribute::Color => Some(self.color),
        }
    }

    pub fn set(&mut self, attr: Attribute, rel: Option<Relation>) {
        match attr {
            Attribute::Number => self.number = rel.expect("number always carries a relation"),
            Attribute::Position => self.position = rel,
            Attribute::Type => self.ty = rel.expect("type always carries a relation"),
            Attribute::Size => self.size = rel.expect("size always carries a relation"),
            Attribute::Color => self.color = rel.expect("color always carries a relation"),
        }
    }

    /// Governed attributes with their relations.
    pub fn instances(&self) -> Vec<RelationInstance> {
        Attribute::ALL
            .into_iter()
            .filter_map(|attribute| {
                self.get(attribute).map(|relation| RelationInstance {
                    attribute,
                    relation,
                })
            })
            .collect()
    }

    /// Ground-truth operator kind for `attr`, if governed.
    pub fn kind(&self, attr: Attribute) -> Option<RelationKind> {
        self.get(attr).map(Relation::kind)
    }
}

/// Symbolic panel: an occupancy mask plus one shared type/size/color index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PanelSpec {
    #[serde(rename = "position_mask")]
    pub position: u32,
    #[serde(rename = "type")]
    pub ty: u32,
    pub size: u32,
    pub color: u32,
}

impl PanelSpec {
    pub fn new(position: u32, ty: u32, size: u32, color: u32) -> Result<Self, RuleError> {
        let p = PanelSpec {
            position,
            ty,
            size,
            color,
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<(), RuleError> {
        if self.position == 0 || self.position > FULL_MASK {
            return Err(RuleError::InvalidPanel(format!(
                "position mask {} outside 1..=511",
                self.position
            )));
        }
        for (attr, v) in [
            (Attribute::Type, self.ty),
            (Attribute::Size, self.size),
            (Attribute::Color, self.color),
        ] {
            if !attr.contains(v as i64) {
                return Err(RuleError::InvalidPanel(format!("{attr} index {v} out of range")));
            }
        }
        Ok(())
    }

    pub fn number(&self) -> u32 {
        self.position.count_ones()
    }

    pub fn value(&self, attr: Attribute) -> u32 {
        match attr {
            Attribute::Number => self.number(),
            Attribute::Position => self.position,
            Attribute::Type => self.ty,
            Attribute::Size => self.size,
            Attribute::Color => self.color,
        }
    }

    pub fn occupied(&self, slot: usize) -> bool {
        self.position >> slot & 1 == 1
    }
}

impl fmt::Display for PanelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "number={} position={:09b} type={} size={} color={}",
            self.number(),
            self.position,
            self.ty,
            self.size,
            self.color
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Systematicity,
    Productivity,
    Localism,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Systematicity, Regime::Productivity, Regime::Localism];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Systematicity => "systematicity",
            Regime::Productivity => "productivity",
            Regime::Localism => "localism",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown regime `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
    Test,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Train, Phase::Val, Phase::Test];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Val => "val",
            Phase::Test => "test",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown phase `{s}`"))
    }
}

/// Candidate-generation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorStrategy {
    /// Each distractor alters exactly one attribute slot of the answer.
    PerturbOne,
    /// Candidates form a three-level attribute tree, so every attribute value
    /// is shared by exactly half of the candidates.
    Hierarchical,
}

impl DistractorStrategy {
    pub fn name(self) -> &'static str {
        match self {
            DistractorStrategy::PerturbOne => "perturb_one",
            DistractorStrategy::Hierarchical => "hierarchical",
        }
    }
}

impl std::str::FromStr for DistractorStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "perturb_one" | "perturbone" => Ok(DistractorStrategy::PerturbOne),
            "hierarchical" => Ok(DistractorStrategy::Hierarchical),
            _ => Err(format!("unknown distractor strategy `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpmInstance {
    pub id: u64,
    pub regime: Regime,
    pub phase: Phase,
    pub strategy: DistractorStrategy,
    pub rules: RuleSet,
    /// Row-major context; the ninth panel is missing.
    pub context: [PanelSpec; 8],
    pub candidates: [PanelSpec; 8],
    pub answer_index: usize,
}

impl RpmInstance {
    pub fn answer(&self) -> &PanelSpec {
        &self.candidates[self.answer_index]
    }

    /// The full grid with `candidate` placed in the missing slot.
    pub fn completed_grid(&self, candidate: &PanelSpec) -> [PanelSpec; 9] {
        let mut grid = [*candidate; 9];
        grid[..8].copy_from_slice(&self.context);
        grid
    }
}

/// Value grid of one attribute, rows x columns.
pub fn attribute_rows(grid: &[PanelSpec; 9], attr: Attribute) -> [[u32; 3]; 3] {
    let mut rows = [[0u32; 3]; 3];
    for (i, p) in grid.iter().enumerate() {
        rows[i / 3][i % 3] = p.value(attr);
    }
    rows
}

/// Per-attribute rule check of a completed grid. Free attributes always pass.
pub fn grid_satisfies(rules: &RuleSet, grid: &[PanelSpec; 9]) -> [(Attribute, bool); 5] {
    Attribute::ALL.map(|attr| {
        let ok = match rules.get(attr) {
            Some(rel) => rows_satisfy(rel, attr, &attribute_rows(grid, attr)),
            None => true,
        };
        (attr, ok)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    /// Per attribute: do rows 1-3, completed with the answer, satisfy the rule?
    pub attributes: Vec<(Attribute, bool)>,
    /// Candidates whose completed grid satisfies every rule.
    pub satisfying: Vec<usize>,
    pub distinct_candidates: bool,
    pub panels_valid: bool,
}

impl ValidationReport {
    pub fn unique_answer(&self, answer_index: usize) -> bool {
        self.satisfying == [answer_index]
    }

    pub fn failures(&self, answer_index: usize) -> Vec<String> {
        let mut out: Vec<String> = self
            .attributes
            .iter()
            .filter(|(_, ok)| !ok)
            .map(|(a, _)| format!("{a} violates its rule"))
            .collect();
        if !self.unique_answer(answer_index) {
            out.push(format!(
                "expected only candidate {answer_index} to satisfy all rules, got {:?}",
                self.satisfying
            ));
        }
        if !self.distinct_candidates {
            out.push("candidates are not pairwise distinct".into());
        }
        if !self.panels_valid {
            out.push("a panel violates its domain".into());
        }
        out
    }
}

pub fn validate_instance(inst: &RpmInstance) -> ValidationReport {
    let panels_valid = inst.rules.check().is_ok()
        && inst
            .context
            .iter()
            .chain(inst.candidates.iter())
            .all(|p| p.check().is_ok())
        && inst.answer_index < 8;
    let answer = inst.candidates[inst.answer_index.min(7)];
    let attributes = grid_satisfies(&inst.rules, &inst.completed_grid(&answer)).to_vec();
    let satisfying = inst
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            grid_satisfies(&inst.rules, &inst.completed_grid(c))
                .iter()
                .all(|(_, ok)| *ok)
        })
        .map(|(i, _)| i)
        .collect();
    let mut sorted = inst.candidates.to_vec();
    sorted.sort();
    sorted.dedup();
    ValidationReport {
        attributes,
        satisfying,
        distinct_candidates: sorted.len() == 8,
        panels_valid,
    }
}

impl ValidationReport {
    pub fn passed(&self, answer_index: usize) -> bool {
        self.failures(answer_index).is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn progression_on_number() {
        let v = apply_relation(Relation::Progression(1), Attribute::Number, &[3], None).unwrap();
        assert_eq!(v, 4);
    }

    #[test]
    fn arithmetic_plus_on_number() {
        let v = apply_relation(Relation::ArithmeticPlus, Attribute::Number, &[2, 3], None).unwrap();
        assert_eq!(v, 5);
    }

    #[test]
    fn distribute_three_remaining_member() {
        let rel = Relation::DistributeThree(Cycle::Left);
        let v = apply_relation(rel, Attribute::Color, &[4, 7], Some([1, 4, 7])).unwrap();
        assert_eq!(v, 1);
        assert_eq!(
            apply_relation(rel, Attribute::Color, &[4, 7], None),
            Err(RuleError::MissingTriple)
        );
    }

    #[test]
    fn out_of_domain_and_arity() {
        assert!(matches!(
            apply_relation(Relation::ArithmeticPlus, Attribute::Number, &[5, 6], None),
            Err(RuleError::OutOfDomain { value: 11, .. })
        ));
        assert!(matches!(
            apply_relation(Relation::Progression(-2), Attribute::Type, &[1], None),
            Err(RuleError::OutOfDomain { value: -1, .. })
        ));
        assert!(matches!(
            apply_relation(Relation::ArithmeticMinus, Attribute::Size, &[3], None),
            Err(RuleError::ArityMismatch { expected: 2, got: 1, .. })
        ));
        assert!(apply_relation(Relation::ArithmeticPlus, Attribute::Position, &[3, 4], None).is_err());
    }

    #[test]
    fn mask_rotation_is_cyclic() {
        assert_eq!(rotate_mask(0b1, 1), 0b10);
        assert_eq!(rotate_mask(1 << 8, 1), 0b1);
        assert_eq!(rotate_mask(0b1, -1), 1 << 8);
        for m in 1..=FULL_MASK {
            assert_eq!(rotate_mask(rotate_mask(m, 2), -2), m);
            assert_eq!(rotate_mask(m, 1).count_ones(), m.count_ones());
        }
    }

    #[test]
    fn distribute_rows_follow_cycle() {
        let first = [1, 4, 7];
        assert_eq!(distribute_row(first, Cycle::Left, 1), [4, 7, 1]);
        assert_eq!(distribute_row(first, Cycle::Left, 2), [7, 1, 4]);
        assert_eq!(distribute_row(first, Cycle::Right, 1), [7, 1, 4]);
        assert_eq!(distribute_row(first, Cycle::Right, 2), [4, 7, 1]);
        let rows = [first, [4, 7, 1], [7, 1, 4]];
        assert!(rows_satisfy(Relation::DistributeThree(Cycle::Left), Attribute::Type, &[
            [0, 1, 2],
            [1, 2, 0],
            [2, 0, 1]
        ]));
        assert!(rows_satisfy(Relation::DistributeThree(Cycle::Left), Attribute::Color, &rows));
        assert!(!rows_satisfy(Relation::DistributeThree(Cycle::Right), Attribute::Color, &rows));
    }

    #[test]
    fn ruleset_coupling() {
        use Relation::*;
        assert!(RuleSet::new(Constant, Some(Progression(1)), Constant, Constant, Constant).is_ok());
        assert!(RuleSet::new(ArithmeticPlus, None, Constant, Constant, Constant).is_ok());
        assert!(RuleSet::new(Constant, None, Constant, Constant, Constant).is_err());
        assert!(RuleSet::new(Progression(1), Some(Constant), Constant, Constant, Constant).is_err());
        assert!(RuleSet::new(
            DistributeThree(Cycle::Left),
            Some(DistributeThree(Cycle::Left)),
            Constant,
            Constant,
            Constant
        )
        .is_ok());
        assert!(RuleSet::new(Constant, Some(ArithmeticPlus), Constant, Constant, Constant).is_err());
        assert!(RuleSet::new(Progression(3), None, Constant, Constant, Constant).is_err());
    }

    #[test]
    fn panel_number_is_popcount() {
        let p = PanelSpec::new(0b101_000_011, 1, 2, 3).unwrap();
        assert_eq!(p.number(), 4);
        assert!(PanelSpec::new(0, 0, 0, 0).is_err());
        assert!(PanelSpec::new(1, 5, 0, 0).is_err());
        assert!(PanelSpec::new(512, 0, 0, 0).is_err());
    }
}

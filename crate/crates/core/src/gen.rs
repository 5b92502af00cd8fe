//! Procedural generation of attribute-level RPM instances for the three
//! systematic-generalization regimes.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rpm::{
    distribute_row, grid_satisfies, rotate_mask, Attribute, Cycle, DistractorStrategy, PanelSpec,
    Phase, Regime, Relation, RelationKind, RpmInstance, RuleSet, FULL_MASK, GRID_SLOTS,
};

/// Resample budget before an instance is declared infeasible.
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("generation exhausted after {0} attempts; the rule combination is infeasible")]
    GenerationExhausted(usize),
    #[error("rules not admissible: {0}")]
    InvalidRules(String),
    #[error("split needs at least 10 instances, got {0}")]
    TooFewInstances(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitRegime {
    pub regime: Regime,
    pub phase: Phase,
}

impl SplitRegime {
    pub fn new(regime: Regime, phase: Phase) -> Self {
        SplitRegime { regime, phase }
    }

    /// Validation folds draw from the training pool.
    fn uses_test_pool(self) -> bool {
        self.phase == Phase::Test
    }

    /// Relation variants admissible for the non-position attributes.
    pub fn pool(self) -> Vec<Relation> {
        use Relation::*;
        let unary = vec![
            Constant,
            Progression(1),
            Progression(-1),
            Progression(2),
            Progression(-2),
        ];
        let binary = vec![ArithmeticPlus, ArithmeticMinus];
        match (self.regime, self.uses_test_pool()) {
            (Regime::Systematicity, false) => vec![
                Constant,
                Progression(1),
                Progression(-1),
                ArithmeticPlus,
                DistributeThree(Cycle::Left),
            ],
            (Regime::Systematicity, true) => vec![
                Progression(2),
                Progression(-2),
                ArithmeticMinus,
                DistributeThree(Cycle::Right),
            ],
            (Regime::Productivity, false) | (Regime::Localism, true) => unary,
            (Regime::Productivity, true) | (Regime::Localism, false) => binary,
        }
    }

    /// Relations `Position` may carry next to a constant `Number`.
    fn position_pool(self) -> Vec<Relation> {
        match self.regime {
            Regime::Systematicity => self
                .pool()
                .into_iter()
                .filter(|r| matches!(r, Relation::Constant | Relation::Progression(_)))
                .collect(),
            // Only the unary/binary contrast is probed here; layouts stay fixed.
            Regime::Productivity | Regime::Localism => self
                .pool()
                .into_iter()
                .filter(|r| *r == Relation::Constant)
                .collect(),
        }
    }
}

/// Every complete row a unary or binary relation admits on `attr`.
pub fn row_options(rel: Relation, attr: Attribute) -> Vec<[u32; 3]> {
    let values: Vec<u32> = (0..attr.cardinality())
        .map(|i| attr.index_to_value(i))
        .collect();
    let ok = |v: i64| attr.contains(v);
    let mut out = Vec::new();
    match rel {
        Relation::Constant => out.extend(values.iter().map(|&v| [v, v, v])),
        Relation::Progression(s) => {
            for &v in &values {
                let (a, b) = (v as i64 + s as i64, v as i64 + 2 * s as i64);
                if ok(a) && ok(b) {
                    out.push([v, a as u32, b as u32]);
                }
            }
        }
        Relation::ArithmeticPlus | Relation::ArithmeticMinus => {
            for &x in &values {
                // a zero second operand would make the row look constant
                for &y in values.iter().filter(|&&y| y >= 1) {
                    let z = if rel == Relation::ArithmeticPlus {
                        x as i64 + y as i64
                    } else {
                        x as i64 - y as i64
                    };
                    if ok(z) {
                        out.push([x, y, z as u32]);
                    }
                }
            }
        }
        Relation::DistributeThree(_) => {}
    }
    out
}

/// Context rows 1 and 2 must not share their value multiset, otherwise a
/// permutation-invariant reading of the rows fits equally well. Binary rows
/// must also differ in the second operand, since a shared operand lets the
/// opposite arithmetic arrangement fit both rows exactly.
fn rows_distinguishable(rel: Relation, a: [u32; 3], b: [u32; 3]) -> bool {
    let (mut sa, mut sb) = (a, b);
    sa.sort_unstable();
    sb.sort_unstable();
    sa != sb && (rel.kind() != RelationKind::Binary || a[1] != b[1])
}

/// Whether `rel` can populate two distinguishable context rows on `attr`.
pub fn feasible(rel: Relation, attr: Attribute) -> bool {
    match rel.kind() {
        RelationKind::Ternary => attr.cardinality() >= 3,
        _ => {
            let opts = row_options(rel, attr);
            opts.iter()
                .any(|&a| opts.iter().any(|&b| rows_distinguishable(rel, a, b)))
        }
    }
}

fn family(rel: Relation) -> u8 {
    match rel {
        Relation::Constant => 0,
        Relation::Progression(_) => 1,
        Relation::ArithmeticPlus | Relation::ArithmeticMinus => 2,
        Relation::DistributeThree(_) => 3,
    }
}

/// Uniform over relation families present in `pool`, then uniform over variants.
fn pick_relation<R: Rng + ?Sized>(pool: &[Relation], attr: Attribute, rng: &mut R) -> Relation {
    let usable: Vec<Relation> = pool.iter().copied().filter(|r| feasible(*r, attr)).collect();
    let mut families: Vec<u8> = usable.iter().map(|r| family(*r)).collect();
    families.dedup();
    families.sort_unstable();
    families.dedup();
    let fam = *families.choose(rng).expect("every pool is feasible on every attribute");
    let variants: Vec<Relation> = usable.into_iter().filter(|r| family(*r) == fam).collect();
    *variants.choose(rng).unwrap()
}

/// Samples one relation per attribute from the regime/phase pool, respecting
/// the coupling between `Number` and `Position`.
pub fn sample_ruleset<R: Rng + ?Sized>(split: SplitRegime, rng: &mut R) -> RuleSet {
    let pool = split.pool();
    let number = pick_relation(&pool, Attribute::Number, rng);
    let position = match number {
        Relation::Constant => {
            let ppool = split.position_pool();
            Some(*ppool.choose(rng).expect("constant number implies a position pool"))
        }
        Relation::DistributeThree(c) => rng.random_bool(0.5).then_some(Relation::DistributeThree(c)),
        _ => None,
    };
    let rules = RuleSet {
        number,
        position,
        ty: pick_relation(&pool, Attribute::Type, rng),
        size: pick_relation(&pool, Attribute::Size, rng),
        color: pick_relation(&pool, Attribute::Color, rng),
    };
    debug_assert!(rules.check().is_ok());
    rules
}

fn random_mask<R: Rng + ?Sized>(count: u32, rng: &mut R) -> u32 {
    let mut slots: Vec<usize> = (0..GRID_SLOTS).collect();
    slots.shuffle(rng);
    slots[..count as usize].iter().fold(0, |m, s| m | 1 << s)
}

/// Rows of values for a non-position attribute. Rows 1 and 2 always differ.
fn sample_rows<R: Rng + ?Sized>(rel: Relation, attr: Attribute, rng: &mut R) -> Option<[[u32; 3]; 3]> {
    if let Relation::DistributeThree(cycle) = rel {
        let mut values: Vec<u32> = (0..attr.cardinality())
            .map(|i| attr.index_to_value(i))
            .collect();
        values.shuffle(rng);
        let first = [values[0], values[1], values[2]];
        return Some([0, 1, 2].map(|r| distribute_row(first, cycle, r)));
    }
    let options = row_options(rel, attr);
    if options.len() < 2 {
        return None;
    }
    let candidates: Vec<(usize, usize)> = (0..options.len())
        .flat_map(|i| (0..options.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| rows_distinguishable(rel, options[i], options[j]))
        .collect();
    let &(i, j) = candidates.choose(rng)?;
    Some([options[i], options[j], *options.choose(rng)?])
}

fn sample_grid<R: Rng + ?Sized>(rules: &RuleSet, rng: &mut R) -> Option<[PanelSpec; 9]> {
    let number = sample_rows(rules.number, Attribute::Number, rng)?;
    let ty = sample_rows(rules.ty, Attribute::Type, rng)?;
    let size = sample_rows(rules.size, Attribute::Size, rng)?;
    let color = sample_rows(rules.color, Attribute::Color, rng)?;
    let mut masks = [[0u32; 3]; 3];
    match rules.position {
        Some(Relation::Constant) => {
            for r in 0..3 {
                masks[r] = [random_mask(number[r][0], rng); 3];
            }
        }
        Some(Relation::Progression(s)) => {
            for r in 0..3 {
                let m = random_mask(number[r][0], rng);
                masks[r] = [0, 1, 2].map(|j| rotate_mask(m, s as i64 * j as i64));
            }
        }
        Some(Relation::DistributeThree(cycle)) => {
            let first = number[0].map(|n| random_mask(n, rng));
            for r in 0..3 {
                masks[r] = distribute_row(first, cycle, r);
            }
        }
        Some(_) => return None,
        None => {
            for r in 0..3 {
                masks[r] = number[r].map(|n| random_mask(n, rng));
            }
        }
    }
    let mut grid = [PanelSpec {
        position: 1,
        ty: 0,
        size: 0,
        color: 0,
    }; 9];
    for (i, p) in grid.iter_mut().enumerate() {
        let (r, c) = (i / 3, i % 3);
        *p = PanelSpec {
            position: masks[r][c],
            ty: ty[r][c],
            size: size[r][c],
            color: color[r][c],
        };
    }
    Some(grid)
}

/// Attribute slots a distractor can alter. Number and position form one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    NumPos,
    Type,
    Size,
    Color,
}

const SLOTS: [Slot; 4] = [Slot::NumPos, Slot::Type, Slot::Size, Slot::Color];

fn perturb<R: Rng + ?Sized>(panel: &PanelSpec, slot: Slot, governed_layout: bool, rng: &mut R) -> PanelSpec {
    let mut out = *panel;
    let other = |v: u32, card: usize, rng: &mut R| loop {
        let w = rng.random_range(0..card as u32);
        if w != v {
            break w;
        }
    };
    match slot {
        Slot::Type => out.ty = other(panel.ty, Attribute::Type.cardinality(), rng),
        Slot::Size => out.size = other(panel.size, Attribute::Size.cardinality(), rng),
        Slot::Color => out.color = other(panel.color, Attribute::Color.cardinality(), rng),
        Slot::NumPos => {
            let n = panel.number();
            let keep_count = governed_layout && n < GRID_SLOTS as u32 && rng.random_bool(0.5);
            out.position = if keep_count {
                loop {
                    let m = random_mask(n, rng);
                    if m != panel.position {
                        break m;
                    }
                }
            } else {
                let c = other(n - 1, GRID_SLOTS, rng) + 1;
                random_mask(c, rng)
            };
        }
    }
    debug_assert!(out.position >= 1 && out.position <= FULL_MASK);
    out
}

fn violates(rules: &RuleSet, context: &[PanelSpec; 9], candidate: &PanelSpec) -> bool {
    let mut grid = *context;
    grid[8] = *candidate;
    grid_satisfies(rules, &grid).iter().any(|(_, ok)| !ok)
}

fn distractors<R: Rng + ?Sized>(
    rules: &RuleSet,
    grid: &[PanelSpec; 9],
    strategy: DistractorStrategy,
    rng: &mut R,
) -> Option<Vec<PanelSpec>> {
    let answer = grid[8];
    let governed = rules.position.is_some();
    match strategy {
        DistractorStrategy::PerturbOne => {
            let mut out: Vec<PanelSpec> = Vec::with_capacity(7);
            let mut tries = 0;
            while out.len() < 7 {
                tries += 1;
                if tries > 200 {
                    return None;
                }
                let slot = *SLOTS.choose(rng)?;
                let d = perturb(&answer, slot, governed, rng);
                if d != answer && !out.contains(&d) && violates(rules, grid, &d) {
                    out.push(d);
                }
            }
            Some(out)
        }
        DistractorStrategy::Hierarchical => {
            // three attribute levels in fixed slot order, one alternative each
            let mut chosen = SLOTS.to_vec();
            chosen.remove(rng.random_range(0..SLOTS.len()));
            let alternatives: Vec<PanelSpec> = chosen
                .iter()
                .map(|&s| perturb(&answer, s, governed, rng))
                .collect();
            let mut out = Vec::with_capacity(7);
            for code in 1..8u32 {
                let mut c = answer;
                for (level, (&slot, alt)) in chosen.iter().zip(&alternatives).enumerate() {
                    if code >> level & 1 == 1 {
                        match slot {
                            Slot::NumPos => c.position = alt.position,
                            Slot::Type => c.ty = alt.ty,
                            Slot::Size => c.size = alt.size,
                            Slot::Color => c.color = alt.color,
                        }
                    }
                }
                if !violates(rules, grid, &c) {
                    return None;
                }
                out.push(c);
            }
            Some(out)
        }
    }
}

/// Builds one instance obeying `rules`: context rows satisfy every rule and
/// exactly one of the eight candidates completes the matrix.
pub fn generate_instance<R: Rng + ?Sized>(
    rules: &RuleSet,
    strategy: DistractorStrategy,
    split: SplitRegime,
    id: u64,
    rng: &mut R,
) -> Result<RpmInstance, GenError> {
    rules
        .check()
        .map_err(|e| GenError::InvalidRules(e.to_string()))?;
    for attr in Attribute::ALL {
        if let Some(rel) = rules.get(attr) {
            if attr != Attribute::Position && !feasible(rel, attr) {
                return Err(GenError::InvalidRules(format!("{rel} is infeasible on {attr}")));
            }
        }
    }
    for _ in 0..MAX_ATTEMPTS {
        let Some(grid) = sample_grid(rules, rng) else {
            continue;
        };
        if grid_satisfies(rules, &grid).iter().any(|(_, ok)| !ok) {
            continue;
        }
        let Some(mut others) = distractors(rules, &grid, strategy, rng) else {
            continue;
        };
        others.shuffle(rng);
        let answer_index = rng.random_range(0..8);
        others.insert(answer_index, grid[8]);
        let mut context = [grid[0]; 8];
        context.copy_from_slice(&grid[..8]);
        let mut candidates = [grid[8]; 8];
        candidates.copy_from_slice(&others);
        return Ok(RpmInstance {
            id,
            regime: split.regime,
            phase: split.phase,
            strategy,
            rules: *rules,
            context,
            candidates,
            answer_index,
        });
    }
    Err(GenError::GenerationExhausted(MAX_ATTEMPTS))
}

/// Deterministic per-instance seed derived from the split seed.
pub fn derive_seed(seed: u64, regime: Regime, phase: Phase, index: u64) -> u64 {
    let mut z = seed
        ^ (regime as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (phase as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ index.wrapping_mul(0x1656_67B1_9E37_79F9);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples rules and an instance for one slot of a split.
pub fn generate_one(
    split: SplitRegime,
    strategy: DistractorStrategy,
    seed: u64,
    index: u64,
) -> Result<RpmInstance, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, split.regime, split.phase, index));
    for _ in 0..MAX_ATTEMPTS {
        let rules = sample_ruleset(split, &mut rng);
        match generate_instance(&rules, strategy, split, index, &mut rng) {
            Ok(inst) => return Ok(inst),
            Err(GenError::GenerationExhausted(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(GenError::GenerationExhausted(MAX_ATTEMPTS))
}

/// Fold sizes for `n` instances: 6/2/2 tenths.
pub fn fold_sizes(n: usize) -> [usize; 3] {
    let train = n * 6 / 10;
    let val = n * 2 / 10;
    [train, val, n - train - val]
}

/// Instances of one phase of a split, in id order. Ids are global across phases.
pub fn generate_phase(
    regime: Regime,
    phase: Phase,
    strategy: DistractorStrategy,
    n: usize,
    seed: u64,
) -> Result<Vec<RpmInstance>, GenError> {
    use rayon::prelude::*;
    if n < 10 {
        return Err(GenError::TooFewInstances(n));
    }
    let folds = fold_sizes(n);
    let offset: usize = folds[..phase as usize].iter().sum();
    let split = SplitRegime::new(regime, phase);
    (0..folds[phase as usize])
        .into_par_iter()
        .map(|i| generate_one(split, strategy, seed, (offset + i) as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rpm::validate_instance;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn productivity_pools() {
        let mut r = rng(1);
        for _ in 0..200 {
            let train = sample_ruleset(SplitRegime::new(Regime::Productivity, Phase::Train), &mut r);
            for inst in train.instances() {
                assert_eq!(inst.kind(), RelationKind::Unary, "{inst:?}");
            }
            let test = sample_ruleset(SplitRegime::new(Regime::Productivity, Phase::Test), &mut r);
            assert_eq!(test.position, None);
            for inst in test.instances() {
                assert_eq!(inst.kind(), RelationKind::Binary);
                assert_ne!(inst.attribute, Attribute::Position);
            }
        }
    }

    #[test]
    fn localism_train_is_productivity_test_pool() {
        let a = SplitRegime::new(Regime::Localism, Phase::Train).pool();
        let b = SplitRegime::new(Regime::Productivity, Phase::Test).pool();
        assert_eq!(a, b);
        let a = SplitRegime::new(Regime::Localism, Phase::Test).pool();
        let b = SplitRegime::new(Regime::Productivity, Phase::Train).pool();
        assert_eq!(a, b);
    }

    #[test]
    fn all_constant_rows_repeat() {
        use Relation::Constant;
        let rules = RuleSet::new(Constant, Some(Constant), Constant, Constant, Constant).unwrap();
        let split = SplitRegime::new(Regime::Productivity, Phase::Train);
        let inst = generate_instance(&rules, DistractorStrategy::PerturbOne, split, 0, &mut rng(3)).unwrap();
        let grid = inst.completed_grid(inst.answer());
        for r in 0..3 {
            assert_eq!(grid[3 * r], grid[3 * r + 1]);
            assert_eq!(grid[3 * r + 1], grid[3 * r + 2]);
        }
        for (i, c) in inst.candidates.iter().enumerate() {
            if i != inst.answer_index {
                assert_ne!(c, inst.answer());
            }
        }
    }

    #[test]
    fn arithmetic_plus_on_number_rows() {
        use Relation::*;
        let rules = RuleSet::new(ArithmeticPlus, None, Constant, Constant, Constant).unwrap();
        let split = SplitRegime::new(Regime::Localism, Phase::Train);
        for seed in 0..20 {
            let inst = generate_instance(&rules, DistractorStrategy::PerturbOne, split, 0, &mut rng(seed)).unwrap();
            let grid = inst.completed_grid(inst.answer());
            for r in 0..3 {
                assert_eq!(grid[3 * r + 2].number(), grid[3 * r].number() + grid[3 * r + 1].number());
            }
        }
    }

    #[test]
    fn binary_position_rejected() {
        let mut rules = RuleSet::new(
            Relation::ArithmeticPlus,
            None,
            Relation::Constant,
            Relation::Constant,
            Relation::Constant,
        )
        .unwrap();
        rules.position = Some(Relation::ArithmeticPlus);
        let split = SplitRegime::new(Regime::Localism, Phase::Train);
        assert!(matches!(
            generate_instance(&rules, DistractorStrategy::PerturbOne, split, 0, &mut rng(0)),
            Err(GenError::InvalidRules(_))
        ));
    }

    #[test]
    fn generated_instances_validate() {
        for regime in Regime::ALL {
            for phase in Phase::ALL {
                for strategy in [DistractorStrategy::PerturbOne, DistractorStrategy::Hierarchical] {
                    for i in 0..60 {
                        let inst = generate_one(SplitRegime::new(regime, phase), strategy, 11, i).unwrap();
                        let report = validate_instance(&inst);
                        assert!(report.passed(inst.answer_index), "{:?}", report.failures(inst.answer_index));
                    }
                }
            }
        }
    }

    #[test]
    fn hierarchical_candidates_balance_each_altered_slot() {
        let split = SplitRegime::new(Regime::Systematicity, Phase::Train);
        for i in 0..50 {
            let inst = generate_one(split, DistractorStrategy::Hierarchical, 5, i).unwrap();
            let ans = *inst.answer();
            for attr in [Attribute::Type, Attribute::Size, Attribute::Color, Attribute::Position] {
                let same = inst.candidates.iter().filter(|c| c.value(attr) == ans.value(attr)).count();
                assert!(same == 8 || same == 4, "{attr}: {same}");
            }
        }
    }

    #[test]
    fn answer_index_roughly_uniform() {
        let split = SplitRegime::new(Regime::Productivity, Phase::Train);
        let mut counts = [0usize; 8];
        for i in 0..800 {
            counts[generate_one(split, DistractorStrategy::PerturbOne, 2, i).unwrap().answer_index] += 1;
        }
        assert!(counts.iter().all(|&c| c > 60), "{counts:?}");
    }

    #[test]
    fn infeasible_variants_filtered() {
        assert!(!feasible(Relation::Progression(2), Attribute::Type));
        assert!(feasible(Relation::Progression(2), Attribute::Size));
        assert!(feasible(Relation::ArithmeticMinus, Attribute::Type));
        assert!(feasible(Relation::DistributeThree(Cycle::Left), Attribute::Type));
    }

    #[test]
    fn fold_partition() {
        assert_eq!(fold_sizes(10_000), [6000, 2000, 2000]);
        assert_eq!(fold_sizes(10), [6, 2, 2]);
        assert!(matches!(
            generate_phase(Regime::Localism, Phase::Train, DistractorStrategy::PerturbOne, 5, 0),
            Err(GenError::TooFewInstances(5))
        ));
    }
}

//! Simulated perception: noisy per-region object distributions and their
//! marginalization into panel belief states.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rpm::{Attribute, PanelSpec, FULL_MASK, GRID_SLOTS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("no region carries any objectiveness mass")]
    DegeneratePanel,
    #[error("{0} is not an object-level attribute")]
    NotObjectAttribute(Attribute),
}

/// Object-level distributions for one of the nine grid regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBelief {
    pub index: usize,
    /// Probability that the region holds an object.
    pub objectiveness: f64,
    pub ty: Vec<f64>,
    pub size: Vec<f64>,
    pub color: Vec<f64>,
}

impl RegionBelief {
    pub fn dist(&self, attr: Attribute) -> Option<&[f64]> {
        match attr {
            Attribute::Type => Some(&self.ty),
            Attribute::Size => Some(&self.size),
            Attribute::Color => Some(&self.color),
            _ => None,
        }
    }
}

/// Symmetric corruption of the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Mass moved off the true value of each categorical.
    pub eps: f64,
    /// Objectiveness corruption: occupied slots get `1 - eps_obj`, empty ones `eps_obj`.
    pub eps_obj: f64,
    /// Relative jitter of the wrong-value masses; 0 spreads them uniformly.
    pub jitter: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        eps: 0.0,
        eps_obj: 0.0,
        jitter: 0.0,
    };

    /// Categorical noise `eps` with objectiveness noise `eps / 4`.
    pub fn uniform(eps: f64) -> Self {
        NoiseModel {
            eps,
            eps_obj: eps / 4.0,
            jitter: 0.0,
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.eps == 0.0 && self.eps_obj == 0.0
    }
}

fn corrupt_categorical<R: Rng + ?Sized>(truth: usize, card: usize, noise: &NoiseModel, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; card];
    if card == 1 {
        out[0] = 1.0;
        return out;
    }
    let weights: Vec<f64> = (0..card)
        .map(|v| {
            if v == truth {
                0.0
            } else if noise.jitter > 0.0 {
                1.0 + noise.jitter * (rng.random::<f64>() - 0.5)
            } else {
                1.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    for (v, w) in weights.iter().enumerate() {
        out[v] = noise.eps * w / total;
    }
    out[truth] = 1.0 - noise.eps;
    out
}

/// Per-region object beliefs for a panel under `noise`. Empty regions carry
/// uniform type/size/color distributions.
pub fn corrupt<R: Rng + ?Sized>(panel: &PanelSpec, noise: &NoiseModel, rng: &mut R) -> [RegionBelief; GRID_SLOTS] {
    std::array::from_fn(|j| {
        let occupied = panel.occupied(j);
        let cat = |attr: Attribute, truth: u32, rng: &mut R| {
            let card = attr.cardinality();
            if occupied {
                corrupt_categorical(truth as usize, card, noise, rng)
            } else {
                vec![1.0 / card as f64; card]
            }
        };
        RegionBelief {
            index: j,
            objectiveness: if occupied { 1.0 - noise.eps_obj } else { noise.eps_obj },
            ty: cat(Attribute::Type, panel.ty, rng),
            size: cat(Attribute::Size, panel.size, rng),
            color: cat(Attribute::Color, panel.color, rng),
        }
    })
}

/// Distribution of the object count over 0..=9 (Poisson-binomial DP).
pub fn infer_number(regions: &[RegionBelief]) -> Vec<f64> {
    let mut dist = vec![0.0; regions.len() + 1];
    dist[0] = 1.0;
    for (n, r) in regions.iter().enumerate() {
        let p = r.objectiveness;
        for k in (0..=n + 1).rev() {
            let stay = dist[k] * (1.0 - p);
            let step = if k > 0 { dist[k - 1] * p } else { 0.0 };
            dist[k] = stay + step;
        }
    }
    dist
}

/// Per-slot occupancy marginals.
pub fn infer_position(regions: &[RegionBelief]) -> [f64; GRID_SLOTS] {
    std::array::from_fn(|j| regions[j].objectiveness)
}

/// Objectiveness-weighted geometric pooling of region distributions.
pub fn infer_attr(regions: &[RegionBelief], attr: Attribute) -> Result<Vec<f64>, PerceptionError> {
    let card = attr.cardinality();
    if regions.iter().all(|r| r.objectiveness <= 0.0) {
        return Err(PerceptionError::DegeneratePanel);
    }
    let mut log_q = vec![0.0; card];
    for r in regions.iter().filter(|r| r.objectiveness > 0.0) {
        let dist = r.dist(attr).ok_or(PerceptionError::NotObjectAttribute(attr))?;
        for (lq, &p) in log_q.iter_mut().zip(dist) {
            *lq += r.objectiveness * p.ln();
        }
    }
    let max = log_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // regions are certain about different values; nothing survives pooling
        return Ok(vec![1.0 / card as f64; card]);
    }
    let mut q: Vec<f64> = log_q.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= z);
    Ok(q)
}

/// Panel-level attribute distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    /// Object count over 0..=9.
    pub number: Vec<f64>,
    pub position: [f64; GRID_SLOTS],
    pub ty: Vec<f64>,
    pub size: Vec<f64>,
    pub color: Vec<f64>,
}

impl BeliefState {
    /// Point-mass beliefs matching `panel` exactly.
    pub fn from_panel(panel: &PanelSpec) -> Self {
        let delta = |card: usize, v: usize| {
            let mut d = vec![0.0; card];
            d[v] = 1.0;
            d
        };
        BeliefState {
            number: delta(GRID_SLOTS + 1, panel.number() as usize),
            position: std::array::from_fn(|j| if panel.occupied(j) { 1.0 } else { 0.0 }),
            ty: delta(Attribute::Type.cardinality(), panel.ty as usize),
            size: delta(Attribute::Size.cardinality(), panel.size as usize),
            color: delta(Attribute::Color.cardinality(), panel.color as usize),
        }
    }

    /// Distribution over the attribute's value indices as the reasoner sees
    /// it. Number drops the zero count and renormalizes over 1..=9.
    pub fn dist(&self, attr: Attribute) -> Vec<f64> {
        match attr {
            Attribute::Number => {
                let tail = &self.number[1..];
                let z: f64 = tail.iter().sum();
                if z > 0.0 {
                    tail.iter().map(|p| p / z).collect()
                } else {
                    vec![1.0 / tail.len() as f64; tail.len()]
                }
            }
            Attribute::Position => mask_distribution(&self.position),
            Attribute::Type => self.ty.clone(),
            Attribute::Size => self.size.clone(),
            Attribute::Color => self.color.clone(),
        }
    }

    /// Most probable value of `attr` (Position: the slot-wise rounded mask).
    pub fn argmax(&self, attr: Attribute) -> u32 {
        match attr {
            Attribute::Number => argmax(&self.number) as u32,
            Attribute::Position => (0..GRID_SLOTS)
                .filter(|&j| self.position[j] > 0.5)
                .fold(0, |m, j| m | 1 << j),
            _ => argmax(&self.dist(attr)) as u32,
        }
    }
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Joint distribution over the 511 nonempty masks (index = mask - 1),
/// assuming independent slots.
pub fn mask_distribution(marginals: &[f64; GRID_SLOTS]) -> Vec<f64> {
    let mut out: Vec<f64> = (1..=FULL_MASK)
        .map(|m| {
            (0..GRID_SLOTS)
                .map(|j| if m >> j & 1 == 1 { marginals[j] } else { 1.0 - marginals[j] })
                .product()
        })
        .collect();
    let z: f64 = out.iter().sum();
    if z > 0.0 {
        out.iter_mut().for_each(|p| *p /= z);
    } else {
        out.fill(1.0 / FULL_MASK as f64);
    }
    out
}

pub fn belief_state(regions: &[RegionBelief]) -> Result<BeliefState, PerceptionError> {
    Ok(BeliefState {
        number: infer_number(regions),
        position: infer_position(regions),
        ty: infer_attr(regions, Attribute::Type)?,
        size: infer_attr(regions, Attribute::Size)?,
        color: infer_attr(regions, Attribute::Color)?,
    })
}

/// Belief states of the 8 context panels followed by the 8 candidates.
pub type InstanceBeliefs = [BeliefState; 16];

/// Perceives every panel of an instance; point masses when `noise` is zero.
pub fn perceive_instance<R: Rng + ?Sized>(
    inst: &crate::rpm::RpmInstance,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<InstanceBeliefs, PerceptionError> {
    let panels: Vec<&PanelSpec> = inst.context.iter().chain(inst.candidates.iter()).collect();
    let mut out = Vec::with_capacity(16);
    for p in panels {
        if noise.is_noiseless() {
            out.push(BeliefState::from_panel(p));
        } else {
            out.push(belief_state(&corrupt(p, noise, rng))?);
        }
    }
    Ok(out.try_into().expect("sixteen panels"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn region(p: f64) -> RegionBelief {
        RegionBelief {
            index: 0,
            objectiveness: p,
            ty: vec![0.2; 5],
            size: vec![1.0 / 6.0; 6],
            color: vec![0.1; 10],
        }
    }

    #[test]
    fn two_half_regions() {
        let mut regions: Vec<RegionBelief> = (0..9).map(|_| region(0.0)).collect();
        regions[0].objectiveness = 0.5;
        regions[4].objectiveness = 0.5;
        let d = infer_number(&regions);
        assert!((d[0] - 0.25).abs() < 1e-15);
        assert!((d[1] - 0.5).abs() < 1e-15);
        assert!((d[2] - 0.25).abs() < 1e-15);
        assert!(d[3..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn certain_regions_give_point_mass() {
        let regions: Vec<RegionBelief> = (0..9).map(|j| region(if j < 4 { 1.0 } else { 0.0 })).collect();
        let d = infer_number(&regions);
        assert_eq!(d[4], 1.0);
        assert_eq!(d.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn type_noise_spread() {
        let panel = PanelSpec::new(0b11, 2, 0, 0).unwrap();
        let regions = corrupt(&panel, &NoiseModel { eps: 0.1, eps_obj: 0.2, jitter: 0.0 }, &mut ChaCha8Rng::seed_from_u64(0));
        assert!((regions[0].ty[2] - 0.9).abs() < 1e-12);
        assert!((regions[0].ty[0] - 0.025).abs() < 1e-12);
        assert!((regions[0].objectiveness - 0.8).abs() < 1e-12);
        assert!((regions[5].objectiveness - 0.2).abs() < 1e-12);
        assert!((infer_position(&regions)[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn product_pool_of_two_regions() {
        let mut a = region(1.0);
        a.ty = vec![0.9, 0.1];
        let b = a.clone();
        let mut regions = vec![a, b];
        for r in &mut regions {
            r.ty.resize(5, 0.0);
        }
        // only the first two type values carry mass
        let q = infer_attr(&regions, Attribute::Type).unwrap();
        assert!((q[0] - 0.81 / 0.82).abs() < 1e-12);
        assert!((q[1] - 0.01 / 0.82).abs() < 1e-12);
    }

    #[test]
    fn degenerate_panel() {
        let regions: Vec<RegionBelief> = (0..9).map(|_| region(0.0)).collect();
        assert_eq!(infer_attr(&regions, Attribute::Size), Err(PerceptionError::DegeneratePanel));
    }

    #[test]
    fn noiseless_round_trip() {
        let panel = PanelSpec::new(0b100_010_001, 3, 4, 9).unwrap();
        let b = belief_state(&corrupt(&panel, &NoiseModel::NONE, &mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        assert_eq!(b, BeliefState::from_panel(&panel));
    }

    #[test]
    fn mask_distribution_of_certain_marginals() {
        let mut m = [0.0; GRID_SLOTS];
        m[0] = 1.0;
        m[3] = 1.0;
        let d = mask_distribution(&m);
        assert_eq!(d[0b1001 - 1], 1.0);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

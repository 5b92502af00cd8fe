//! Matrix encodings of attribute values.
//!
//! A Peano encoding represents value index `k` as `M^k * M0`; the independent
//! encoding used for ablations keeps one free matrix per value.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rpm::{Attribute, GRID_SLOTS};
use crate::tape::Mat;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AlgebraError {
    #[error("value index {index} outside the {attribute} domain of size {cardinality}")]
    IndexOutOfDomain {
        attribute: Attribute,
        index: usize,
        cardinality: usize,
    },
    #[error("encoding dimension {0} outside 2..=32")]
    BadDimension(usize),
    #[error("distribution has {got} entries, {attribute} needs {expected}")]
    DistributionLength {
        attribute: Attribute,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeanoEncoding {
    pub attribute: Attribute,
    pub d: usize,
    /// Zero element.
    pub m0: Mat,
    /// Successor.
    pub m: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndependentEncoding {
    pub attribute: Attribute,
    pub d: usize,
    /// One matrix per value index.
    pub values: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    Peano(PeanoEncoding),
    Independent(IndependentEncoding),
}

impl Encoding {
    pub fn attribute(&self) -> Attribute {
        match self {
            Encoding::Peano(e) => e.attribute,
            Encoding::Independent(e) => e.attribute,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Encoding::Peano(e) => e.d,
            Encoding::Independent(e) => e.d,
        }
    }

    pub fn cardinality(&self) -> usize {
        self.attribute().cardinality()
    }

    pub fn encode(&self, k: usize) -> Result<Mat, AlgebraError> {
        let cardinality = self.cardinality();
        if k >= cardinality {
            return Err(AlgebraError::IndexOutOfDomain {
                attribute: self.attribute(),
                index: k,
                cardinality,
            });
        }
        Ok(match self {
            Encoding::Peano(e) => {
                let mut r = e.m0.clone();
                for _ in 0..k {
                    r = &e.m * r;
                }
                r
            }
            Encoding::Independent(e) => e.values[k].clone(),
        })
    }

    /// Representations of every value index in order.
    pub fn encode_all(&self) -> Vec<Mat> {
        match self {
            Encoding::Peano(e) => {
                let mut out = Vec::with_capacity(self.cardinality());
                let mut r = e.m0.clone();
                for _ in 0..self.cardinality() {
                    let next = &e.m * &r;
                    out.push(r);
                    r = next;
                }
                out
            }
            Encoding::Independent(e) => e.values.clone(),
        }
    }

    /// Representation expected under a categorical belief over value indices.
    pub fn expected_rep(&self, dist: &[f64]) -> Result<Mat, AlgebraError> {
        if dist.len() != self.cardinality() {
            return Err(AlgebraError::DistributionLength {
                attribute: self.attribute(),
                expected: self.cardinality(),
                got: dist.len(),
            });
        }
        let d = self.d();
        let mut out = Mat::zeros(d, d);
        for (p, rep) in dist.iter().zip(self.encode_all()) {
            if *p != 0.0 {
                out += rep * *p;
            }
        }
        Ok(out)
    }

    /// Sum of the expected representations of a row; order-free.
    pub fn row_aggregate(&self, dists: [&[f64]; 3]) -> Result<Mat, AlgebraError> {
        let mut out = self.expected_rep(dists[0])?;
        out += self.expected_rep(dists[1])?;
        out += self.expected_rep(dists[2])?;
        Ok(out)
    }

    /// Parameter matrices in a fixed order: `[M0, M]` or `[E_0, E_1, ...]`.
    pub fn params(&self) -> Vec<&Mat> {
        match self {
            Encoding::Peano(e) => vec![&e.m0, &e.m],
            Encoding::Independent(e) => e.values.iter().collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        match self {
            Encoding::Peano(e) => vec![&mut e.m0, &mut e.m],
            Encoding::Independent(e) => e.values.iter_mut().collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Smallest Frobenius distance between two distinct value representations.
    pub fn min_separation(&self) -> f64 {
        let reps = self.encode_all();
        let mut best = f64::INFINITY;
        for i in 0..reps.len() {
            for j in i + 1..reps.len() {
                best = best.min((&reps[i] - &reps[j]).norm());
            }
        }
        best
    }
}

fn gaussian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Mat {
    DMatrix::from_fn(d, d, |_, _| rng.sample(StandardNormal))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix).
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Mat {
    let qr = gaussian(d, rng).qr();
    let (mut q, r) = qr.unpack();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn check_dim(d: usize) -> Result<(), AlgebraError> {
    if (2..=32).contains(&d) {
        Ok(())
    } else {
        Err(AlgebraError::BadDimension(d))
    }
}

/// Zero element a random orthogonal matrix scaled to unit Frobenius norm;
/// successor a slightly perturbed random orthogonal matrix, redrawn until its
/// determinant is safely nonzero.
pub fn init_encoding<R: Rng + ?Sized>(attribute: Attribute, d: usize, rng: &mut R) -> Result<PeanoEncoding, AlgebraError> {
    check_dim(d)?;
    let m0 = random_orthogonal(d, rng) / (d as f64).sqrt();
    let m = loop {
        let m = random_orthogonal(d, rng) + gaussian(d, rng) * 0.01;
        if m.determinant().abs() > 1e-6 {
            break m;
        }
    };
    Ok(PeanoEncoding { attribute, d, m0, m })
}

/// One unit-norm Gaussian matrix per value.
pub fn init_independent<R: Rng + ?Sized>(attribute: Attribute, d: usize, rng: &mut R) -> Result<IndependentEncoding, AlgebraError> {
    check_dim(d)?;
    let values = (0..attribute.cardinality())
        .map(|_| {
            let g = gaussian(d, rng);
            &g / g.norm()
        })
        .collect();
    Ok(IndependentEncoding { attribute, d, values })
}

/// Position is reasoned about directly on its slot-occupancy vector.
pub fn position_rep(marginals: &[f64; GRID_SLOTS]) -> Vec<f64> {
    marginals.to_vec()
}

/// Circulant lift of a slot vector: row `i` is `v` rotated by `i`, so a cyclic
/// slot shift of `v` becomes right-multiplication by a permutation matrix.
pub fn circulant(v: &[f64]) -> Mat {
    let n = v.len();
    DMatrix::from_fn(n, n, |i, j| v[(j + n - i) % n])
}

/// Sums of the cyclic diagonals of `m`: entry `s` collects `m[i][(i + s) % n]`.
/// `<m, circulant(v)>` equals the dot product of this vector with `v`.
pub fn cyclic_diagonal_sums(m: &Mat) -> Vec<f64> {
    let n = m.nrows();
    (0..n)
        .map(|s| (0..n).map(|i| m[(i, (i + s) % n)]).sum())
        .collect()
}

//! Unit-sphere geometry and the small numeric kernels shared by every stage
//! of the pipeline.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MsdError, Result};

/// Norms below this are treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

/// A direction on the unit hypersphere `S^{D-1}`, `D >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Renormalizes `components` to unit length. Vectors whose norm is
    /// already 1 to within a few ulps are kept as given, so normalization is
    /// idempotent bit for bit.
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.len() < 2 {
            return Err(MsdError::DimTooSmall(components.len()));
        }
        let norm = l2_norm(&components);
        if !(norm > ZERO_NORM) || !norm.is_finite() {
            return Err(MsdError::ZeroVector);
        }
        let mut v = components;
        if (norm - 1.0).abs() > 4.0 * f64::EPSILON {
            v.iter_mut().for_each(|c| *c /= norm);
        }
        Ok(Self(v))
    }

    /// Standard basis vector `e_axis` in `dim` dimensions.
    pub fn basis(dim: usize, axis: usize) -> Result<Self> {
        if axis >= dim {
            return Err(MsdError::DimMismatch {
                expected: dim,
                found: axis + 1,
            });
        }
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Self::new(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Raw dot product without a dimension check.
    #[inline]
    pub(crate) fn dot_unchecked(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = MsdError;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        UnitVector::new(value)
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(value: UnitVector) -> Self {
        value.0
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Which encoder an embedding set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// The `N >= 1` local embeddings of one image or one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: Vec<UnitVector>,
    dim: usize,
    modality: Modality,
    grid: Option<(usize, usize)>,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<UnitVector>, modality: Modality) -> Result<Self> {
        let first = vectors.first().ok_or(MsdError::EmptyInput)?;
        let dim = first.dim();
        if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(MsdError::DimMismatch {
                expected: dim,
                found: bad.dim(),
            });
        }
        Ok(Self {
            vectors,
            dim,
            modality,
            grid: None,
        })
    }

    /// Builds a set from raw rows, normalizing each one.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], modality: Modality) -> Result<Self> {
        let vectors = rows
            .iter()
            .map(|r| UnitVector::new(r.as_ref().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(vectors, modality)
    }

    /// Attaches the patch grid layout (`rows * cols` must equal `len`).
    pub fn with_grid(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.len() {
            return Err(MsdError::GridMismatch {
                rows,
                cols,
                count: self.len(),
            });
        }
        self.grid = Some((rows, cols));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn vectors(&self) -> &[UnitVector] {
        &self.vectors
    }

    pub fn iter(&self) -> impl Iterator<Item = &UnitVector> {
        self.vectors.iter()
    }

    /// Keeps only the rows whose index passes `keep`; the grid is dropped.
    pub fn retain_indices(&self, keep: impl Fn(usize) -> bool) -> Result<Self> {
        let vectors = self
            .vectors
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, v)| v.clone())
            .collect::<Vec<_>>();
        Self::new(vectors, self.modality)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit length.
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    UnitVector::new(v.to_vec())
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &UnitVector, b: &UnitVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MsdError::DimMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(a.dot_unchecked(b.as_slice()).clamp(-1.0, 1.0))
}

/// `ln Σ exp(x)` evaluated with a max shift.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(MsdError::EmptyInput);
    }
    Ok(lse(xs))
}

/// Infallible core of [`log_sum_exp`]; the empty slice maps to `-inf`.
#[inline]
pub(crate) fn lse(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Arithmetic mean of the set, renormalized.
pub fn mean_pool(set: &EmbeddingSet) -> Result<UnitVector> {
    let mut acc = vec![0.0; set.dim()];
    for v in set.iter() {
        acc.iter_mut().zip(v.as_slice()).for_each(|(a, x)| *a += x);
    }
    let n = set.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    UnitVector::new(acc).map_err(|e| match e {
        MsdError::ZeroVector => MsdError::DegeneratePooling,
        other => other,
    })
}

/// Seed for every random draw in the pipeline. Streams are ChaCha8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
}

impl RngState {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Child seed bound to `tag`, independent of evaluation order.
    pub fn derive(&self, tag: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((tag.len() as u64).to_le_bytes());
        h.update(tag.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        Self::new(u64::from_le_bytes(bytes))
    }

    pub fn derive_index(&self, index: u64) -> Self {
        self.derive(&index.to_string())
    }
}

impl Default for RngState {
    fn default() -> Self {
        Self::new(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert!((v.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((v.as_slice()[1] - 0.8).abs() < 1e-15);
        assert_eq!(
            normalize(&[0.0, 0.0, 1.0]).unwrap().as_slice(),
            &[0.0, 0.0, 1.0]
        );
        assert!(matches!(
            normalize(&[1e-15, 0.0]),
            Err(MsdError::ZeroVector)
        ));
        assert!(matches!(normalize(&[1.0]), Err(MsdError::DimTooSmall(1))));
    }

    #[test]
    fn cosine_examples() {
        let e1 = UnitVector::basis(2, 0).unwrap();
        let e2 = UnitVector::basis(2, 1).unwrap();
        let m1 = normalize(&[-1.0, 0.0]).unwrap();
        assert_eq!(cosine(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert_eq!(cosine(&e1, &m1).unwrap(), -1.0);
        let e3 = UnitVector::basis(3, 0).unwrap();
        assert!(matches!(
            cosine(&e1, &e3),
            Err(MsdError::DimMismatch { .. })
        ));
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // mpmath, 50 digits: 1000.69314718055994530941723...
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - 1_000.693_147_180_559_9).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[5.0]).unwrap(), 5.0);
        assert!(matches!(log_sum_exp(&[]), Err(MsdError::EmptyInput)));
        assert_eq!(lse(&[f64::NEG_INFINITY, 0.0]), 0.0);
    }

    #[test]
    fn mean_pool_examples() {
        let s = EmbeddingSet::from_rows(&[[1.0, 0.0], [1.0, 0.0]], Modality::Image).unwrap();
        assert_eq!(mean_pool(&s).unwrap().as_slice(), &[1.0, 0.0]);
        let s = EmbeddingSet::from_rows(&[[1.0, 0.0], [0.0, 1.0]], Modality::Image).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let m = mean_pool(&s).unwrap();
        assert!((m.as_slice()[0] - h).abs() < 1e-15 && (m.as_slice()[1] - h).abs() < 1e-15);
        let s = EmbeddingSet::from_rows(&[[1.0, 0.0], [-1.0, 0.0]], Modality::Image).unwrap();
        assert!(matches!(mean_pool(&s), Err(MsdError::DegeneratePooling)));
    }

    #[test]
    fn embedding_set_rejects_mixed_dims_and_empty() {
        let a = UnitVector::basis(2, 0).unwrap();
        let b = UnitVector::basis(3, 0).unwrap();
        assert!(EmbeddingSet::new(vec![a, b], Modality::Text).is_err());
        assert!(matches!(
            EmbeddingSet::new(vec![], Modality::Text),
            Err(MsdError::EmptyInput)
        ));
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let s = RngState::new(7);
        assert_eq!(s.derive("img"), s.derive("img"));
        assert_ne!(s.derive("img"), s.derive("txt"));
        assert_ne!(s.derive("1"), RngState::new(8).derive("1"));
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        (2usize..12)
            .prop_flat_map(|d| proptest::collection::vec(-10.0f64..10.0, d))
            .prop_filter("nonzero", |v| l2_norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn self_cosine_is_one(v in vec_strategy()) {
            let u = normalize(&v).unwrap();
            prop_assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn normalize_is_idempotent(v in vec_strategy()) {
            let a = normalize(&v).unwrap();
            let b = normalize(a.as_slice()).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn lse_shift_equivariant(xs in proptest::collection::vec(-50.0f64..50.0, 1..10), c in -1e6f64..1e6) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let lhs = log_sum_exp(&shifted).unwrap();
            let rhs = log_sum_exp(&xs).unwrap() + c;
            prop_assert!((lhs - rhs).abs() <= 1e-9);
        }

        #[test]
        fn mean_pool_permutation_invariant(rows in proptest::collection::vec(proptest::collection::vec(0.1f64..1.0, 4), 1..8), rot in 0usize..8) {
            let a = EmbeddingSet::from_rows(&rows, Modality::Text).unwrap();
            let mut perm = rows.clone();
            let n = perm.len();
            perm.rotate_left(rot % n);
            perm.reverse();
            let b = EmbeddingSet::from_rows(&perm, Modality::Text).unwrap();
            let (ma, mb) = (mean_pool(&a).unwrap(), mean_pool(&b).unwrap());
            for (x, y) in ma.as_slice().iter().zip(mb.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

//! Fixed-concentration von Mises–Fisher mixtures and their EM fit.
//!
//! Every component shares one concentration `kappa`, so the vMF normalizing
//! constant is identical across components and is dropped: all densities here
//! are *unnormalized*, `log p~(x) = LSE_k(log pi_k + kappa * mu_k . x)`.
//! Responsibilities and KL differences between two mixtures with the same
//! `kappa` are unaffected by the omission.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsdError, Result};
use crate::sphere::{l2_norm, lse, EmbeddingSet, RngState, UnitVector, ZERO_NORM};

/// One mixture component: a mean direction and its mixing weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfComponent {
    pub mu: UnitVector,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct VmfMixture {
    components: Vec<VmfComponent>,
    kappa: f64,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawMixture {
    kappa: f64,
    components: Vec<VmfComponent>,
}

impl TryFrom<RawMixture> for VmfMixture {
    type Error = MsdError;

    fn try_from(raw: RawMixture) -> Result<Self> {
        VmfMixture::new(raw.components, raw.kappa)
    }
}

impl From<VmfMixture> for RawMixture {
    fn from(m: VmfMixture) -> Self {
        RawMixture {
            kappa: m.kappa,
            components: m.components,
        }
    }
}

impl VmfMixture {
    /// Validates weights (non-negative, summing to 1 within 1e-9), a positive
    /// `kappa`, and a common dimension.
    ///
    /// Zero weights are accepted so ground-truth mixtures can carry inert
    /// components; fitted mixtures always have strictly positive weights when
    /// the reinitialization threshold is positive.
    pub fn new(components: Vec<VmfComponent>, kappa: f64) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| MsdError::InvalidMixture("no components".into()))?;
        let dim = first.mu.dim();
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(MsdError::OutOfRange {
                what: "kappa",
                value: kappa,
            });
        }
        for c in &components {
            if c.mu.dim() != dim {
                return Err(MsdError::DimMismatch {
                    expected: dim,
                    found: c.mu.dim(),
                });
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(MsdError::InvalidMixture(format!("weight {}", c.weight)));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MsdError::InvalidMixture(format!("weights sum to {total}")));
        }
        Ok(Self {
            components,
            kappa,
            dim,
        })
    }

    /// Equal-weight mixture over `means`.
    pub fn uniform(means: Vec<UnitVector>, kappa: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::new(
            means
                .into_iter()
                .map(|mu| VmfComponent { mu, weight: w })
                .collect(),
            kappa,
        )
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[VmfComponent] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// `log pi_k + kappa * mu_k . x` for every component, written into `out`.
    #[inline]
    pub(crate) fn component_log_terms(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.weight.ln() + self.kappa * c.mu.dot_unchecked(x);
        }
    }

    /// Unnormalized log density; no dimension check.
    pub(crate) fn log_density_raw(&self, x: &[f64]) -> f64 {
        let mut terms = vec![0.0; self.k()];
        self.component_log_terms(x, &mut terms);
        lse(&terms)
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim {
            return Err(MsdError::DimMismatch {
                expected: self.dim,
                found: dim,
            });
        }
        Ok(())
    }
}

/// `LSE_k(log pi_k + kappa mu_k^T x)`, the mixture log density with the
/// normalizing constant set to one.
pub fn unnorm_log_density(m: &VmfMixture, x: &UnitVector) -> Result<f64> {
    m.check_dim(x.dim())?;
    Ok(m.log_density_raw(x.as_slice()))
}

/// Settings for [`em_fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub k: usize,
    pub kappa: f64,
    pub iterations: usize,
    pub reinit_threshold: f64,
    pub seed: RngState,
}

impl EmConfig {
    pub const DEFAULT_KAPPA: f64 = 20.0;
    pub const DEFAULT_ITERATIONS: usize = 20;
    pub const DEFAULT_REINIT_THRESHOLD: f64 = 1e-6;

    pub fn new(k: usize) -> Self {
        Self {
            k,
            kappa: Self::DEFAULT_KAPPA,
            iterations: Self::DEFAULT_ITERATIONS,
            reinit_threshold: Self::DEFAULT_REINIT_THRESHOLD,
            seed: RngState::default(),
        }
    }

    pub fn with_seed(mut self, seed: RngState) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(MsdError::InvalidConfig("k must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(MsdError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(MsdError::InvalidConfig(format!("kappa = {}", self.kappa)));
        }
        if !(self.reinit_threshold >= 0.0) {
            return Err(MsdError::InvalidConfig(format!(
                "reinit_threshold = {}",
                self.reinit_threshold
            )));
        }
        Ok(())
    }
}

/// A component that was reset to a data point during EM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReinitEvent {
    /// 1-based EM iteration.
    pub iteration: usize,
    pub component: usize,
}

/// What happened during a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// `log_likelihood[0]` is the initial mixture; entry `t` is the mixture
    /// after iteration `t`. Unnormalized (constant offset dropped).
    pub log_likelihood: Vec<f64>,
    pub reinit_events: Vec<ReinitEvent>,
    /// Responsibilities of the returned mixture, one row per data point.
    pub responsibilities: Vec<Vec<f64>>,
}

impl EmTrace {
    pub fn reinit_at(&self, iteration: usize) -> bool {
        self.reinit_events.iter().any(|e| e.iteration == iteration)
    }

    /// Hard labels from the final responsibilities.
    pub fn hard_assignments(&self) -> Vec<usize> {
        hard_assignments(&self.responsibilities)
    }
}

fn draw_initial(data: &EmbeddingSet, cfg: &EmConfig, rng: &mut impl Rng) -> Result<VmfMixture> {
    let n = data.len();
    let picks: Vec<usize> = if n >= cfg.k {
        // Random order, preferring points whose values differ: identical
        // starting means stay identical under EM.
        let order = index::sample(rng, n, n).into_vec();
        let rows = data.vectors();
        let mut picks: Vec<usize> = Vec::with_capacity(cfg.k);
        for &i in &order {
            if picks.len() == cfg.k {
                break;
            }
            if picks.iter().all(|&j| rows[j] != rows[i]) {
                picks.push(i);
            }
        }
        for &i in &order {
            if picks.len() == cfg.k {
                break;
            }
            if !picks.contains(&i) {
                picks.push(i);
            }
        }
        picks
    } else {
        (0..cfg.k).map(|_| rng.gen_range(0..n)).collect()
    };
    let means = picks
        .into_iter()
        .map(|i| data.vectors()[i].clone())
        .collect();
    VmfMixture::uniform(means, cfg.kappa)
}

/// The mixture EM starts from: `k` data points drawn with `cfg.seed`
/// (distinct indices when `N >= k`, distinct values where the data allows),
/// uniform weights.
pub fn initial_mixture(data: &EmbeddingSet, cfg: &EmConfig) -> Result<VmfMixture> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MsdError::EmptyData);
    }
    draw_initial(data, cfg, &mut cfg.seed.rng())
}

/// E-step into `gamma`; returns the unnormalized log-likelihood of `mix`.
fn e_step(mix: &VmfMixture, data: &EmbeddingSet, gamma: &mut [Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (row, x) in gamma.iter_mut().zip(data.iter()) {
        mix.component_log_terms(x.as_slice(), row);
        let l = lse(row);
        row.iter_mut().for_each(|g| *g = (*g - l).exp());
        total += l;
    }
    total
}

/// M-step in place. Returns the effective counts `N_k`.
fn m_step(mix: &mut VmfMixture, data: &EmbeddingSet, gamma: &[Vec<f64>]) -> Vec<f64> {
    let n = data.len() as f64;
    let dim = mix.dim;
    let mut counts = Vec::with_capacity(mix.k());
    for (k, comp) in mix.components.iter_mut().enumerate() {
        let mut resultant = vec![0.0; dim];
        let mut nk = 0.0;
        for (row, x) in gamma.iter().zip(data.iter()) {
            let g = row[k];
            nk += g;
            resultant
                .iter_mut()
                .zip(x.as_slice())
                .for_each(|(r, xi)| *r += g * xi);
        }
        comp.weight = nk / n;
        if l2_norm(&resultant) > ZERO_NORM {
            // Unwrap is fine: norm checked above and dim >= 2.
            comp.mu = UnitVector::new(resultant).expect("nonzero resultant");
        }
        counts.push(nk);
    }
    counts
}

/// Runs exactly `cfg.iterations` EM iterations.
///
/// Components whose effective count falls below `cfg.reinit_threshold` are
/// moved to a uniformly drawn data point with weight `1/K`, after which all
/// weights are renormalized.
pub fn em_fit(data: &EmbeddingSet, cfg: &EmConfig) -> Result<(VmfMixture, EmTrace)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MsdError::EmptyData);
    }
    let mut rng = cfg.seed.rng();
    let mut mix = draw_initial(data, cfg, &mut rng)?;
    let k = cfg.k;
    let n = data.len();
    let mut gamma = vec![vec![0.0; k]; n];
    let mut log_likelihood = Vec::with_capacity(cfg.iterations + 1);
    let mut reinit_events = Vec::new();

    for t in 1..=cfg.iterations {
        // Scores the mixture left by iteration t - 1.
        log_likelihood.push(e_step(&mix, data, &mut gamma));
        let counts = m_step(&mut mix, data, &gamma);
        let mut reset = false;
        for (j, &nk) in counts.iter().enumerate() {
            if nk < cfg.reinit_threshold {
                let pick = rng.gen_range(0..n);
                mix.components[j].mu = data.vectors()[pick].clone();
                mix.components[j].weight = 1.0 / k as f64;
                reinit_events.push(ReinitEvent {
                    iteration: t,
                    component: j,
                });
                reset = true;
            }
        }
        if reset {
            let total: f64 = mix.components.iter().map(|c| c.weight).sum();
            mix.components.iter_mut().for_each(|c| c.weight /= total);
        }
    }
    let ll = e_step(&mix, data, &mut gamma);
    log_likelihood.push(ll);
    Ok((
        mix,
        EmTrace {
            log_likelihood,
            reinit_events,
            responsibilities: gamma,
        },
    ))
}

/// Standalone E-step: `gamma[i][k] = p(z_i = k | x_i)`.
pub fn responsibilities(m: &VmfMixture, data: &EmbeddingSet) -> Result<Vec<Vec<f64>>> {
    m.check_dim(data.dim())?;
    let mut gamma = vec![vec![0.0; m.k()]; data.len()];
    e_step(m, data, &mut gamma);
    Ok(gamma)
}

/// Shannon entropy (nats) of one responsibility row, with `0 ln 0 = 0`.
pub fn responsibility_entropy(row: &[f64]) -> Result<f64> {
    let sum: f64 = row.iter().sum();
    if row.is_empty()
        || (sum - 1.0).abs() > 1e-6
        || row.iter().any(|&g| !(-1e-12..=1.0 + 1e-12).contains(&g))
    {
        return Err(MsdError::NotAProbabilityRow { sum });
    }
    Ok(row
        .iter()
        .filter(|&&g| g > 0.0)
        .map(|&g| -g * g.ln())
        .sum::<f64>()
        .max(0.0))
}

/// Mean of [`responsibility_entropy`] over all rows.
pub fn mean_responsibility_entropy(gamma: &[Vec<f64>]) -> Result<f64> {
    if gamma.is_empty() {
        return Err(MsdError::EmptyInput);
    }
    let mut total = 0.0;
    for row in gamma {
        total += responsibility_entropy(row)?;
    }
    Ok(total / gamma.len() as f64)
}

/// Concentration implied by a mean resultant length,
/// `(r D - r^3) / (1 - r^2)`. Diagnostic only; fitting never uses it.
pub fn kappa_hat(r_bar: f64, d: usize) -> Result<f64> {
    if !(r_bar > 0.0 && r_bar < 1.0) {
        return Err(MsdError::OutOfRange {
            what: "r_bar",
            value: r_bar,
        });
    }
    let d = d as f64;
    Ok((r_bar * d - r_bar.powi(3)) / (1.0 - r_bar * r_bar))
}

/// `argmax_k gamma[i][k]` per row, lowest index on ties.
pub fn hard_assignments(gamma: &[Vec<f64>]) -> Vec<usize> {
    gamma
        .iter()
        .map(|row| {
            let mut best = 0;
            for (k, &g) in row.iter().enumerate() {
                if g > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index between two labelings of the same points.
pub fn clustering_ari(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(MsdError::LengthMismatch {
            left: labels_a.len(),
            right: labels_b.len(),
        });
    }
    let n = labels_a.len();
    if n < 2 {
        return Err(MsdError::OutOfRange {
            what: "n",
            value: n as f64,
        });
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n as u64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // Both partitions trivial (all singletons or one block).
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Mean pairwise ARI across several labelings.
pub fn mean_pairwise_ari(labelings: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..labelings.len() {
        for j in i + 1..labelings.len() {
            total += clustering_ari(&labelings[i], &labelings[j])?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(MsdError::EmptyInput);
    }
    Ok(total / pairs as f64)
}

/// Mean resultant length `||Σ x_i|| / N`.
pub fn mean_resultant_length(data: &EmbeddingSet) -> f64 {
    let mut acc = vec![0.0; data.dim()];
    for x in data.iter() {
        acc.iter_mut().zip(x.as_slice()).for_each(|(a, v)| *a += v);
    }
    l2_norm(&acc) / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::Modality;

    fn e(dim: usize, axis: usize) -> UnitVector {
        UnitVector::basis(dim, axis).unwrap()
    }

    fn set(rows: &[UnitVector]) -> EmbeddingSet {
        EmbeddingSet::new(rows.to_vec(), Modality::Text).unwrap()
    }

    #[test]
    fn unnorm_density_examples() {
        let m = VmfMixture::uniform(vec![e(3, 0)], 20.0).unwrap();
        assert_eq!(unnorm_log_density(&m, &e(3, 0)).unwrap(), 20.0);
        assert_eq!(unnorm_log_density(&m, &e(3, 1)).unwrap(), 0.0);
        let neg = UnitVector::new(vec![-1.0, 0.0, 0.0]).unwrap();
        let m2 = VmfMixture::uniform(vec![e(3, 0), neg], 20.0).unwrap();
        // mpmath: ln(0.5 e^20 + 0.5 e^-20) = 19.30685281944005469483...
        let v = unnorm_log_density(&m2, &e(3, 0)).unwrap();
        assert!((v - 19.306_852_819_440_055).abs() < 1e-12);
        assert!(matches!(
            unnorm_log_density(&m2, &e(2, 0)),
            Err(MsdError::DimMismatch { .. })
        ));
    }

    #[test]
    fn mixture_validation() {
        assert!(VmfMixture::new(
            vec![
                VmfComponent {
                    mu: e(2, 0),
                    weight: 0.7
                },
                VmfComponent {
                    mu: e(2, 1),
                    weight: 0.7
                },
            ],
            20.0
        )
        .is_err());
        assert!(VmfMixture::uniform(vec![e(2, 0)], 0.0).is_err());
        assert!(VmfMixture::uniform(vec![e(2, 0), e(3, 0)], 1.0).is_err());
    }

    #[test]
    fn mixture_json_round_trip() {
        let m = VmfMixture::uniform(vec![e(3, 0), e(3, 2)], 20.0).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: VmfMixture = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        assert!(serde_json::from_str::<VmfMixture>(
            r#"{"kappa":20,"components":[{"mu":[1,0],"weight":0.3}]}"#
        )
        .is_err());
    }

    #[test]
    fn single_point_is_a_fixed_point() {
        let x = UnitVector::new(vec![0.3, -0.2, 0.9]).unwrap();
        let (m, trace) = em_fit(&set(std::slice::from_ref(&x)), &EmConfig::new(1)).unwrap();
        assert_eq!(m.components()[0].mu, x);
        assert_eq!(m.components()[0].weight, 1.0);
        assert_eq!(trace.log_likelihood.len(), 21);
    }

    #[test]
    fn two_well_separated_clusters() {
        let data = set(&[e(3, 0), e(3, 0), e(3, 1), e(3, 1)]);
        let cfg = EmConfig::new(2);
        let (m, trace) = em_fit(&data, &cfg).unwrap();
        let mut mus: Vec<_> = m.components().iter().map(|c| c.mu.clone()).collect();
        if mus[0].as_slice()[0] < 0.5 {
            mus.swap(0, 1);
        }
        for (mu, axis) in mus.iter().zip([0, 1]) {
            let target = e(3, axis);
            for (a, b) in mu.as_slice().iter().zip(target.as_slice()) {
                assert!((a - b).abs() < 1e-3, "{mu:?}");
            }
        }
        for c in m.components() {
            assert!((c.weight - 0.5).abs() < 1e-3);
        }
        assert!(trace.reinit_events.is_empty());
    }

    #[test]
    fn identical_points_stay_finite() {
        let x = UnitVector::new(vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let data = set(&vec![x; 6]);
        let (m, trace) = em_fit(&data, &EmConfig::new(2)).unwrap();
        assert!(trace.log_likelihood.iter().all(|l| l.is_finite()));
        assert!(m.weights().iter().all(|w| w.is_finite()));
        let total: f64 = m.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fewer_points_than_components() {
        let data = set(&[e(3, 0), e(3, 1)]);
        let (m, trace) = em_fit(&data, &EmConfig::new(3)).unwrap();
        assert_eq!(m.k(), 3);
        for row in &trace.responsibilities {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reinit_fires_for_starved_component() {
        // Threshold above any achievable count forces a reset every iteration.
        let data = set(&[e(3, 0), e(3, 1), e(3, 2)]);
        let mut cfg = EmConfig::new(2);
        cfg.reinit_threshold = 10.0;
        cfg.iterations = 3;
        let (m, trace) = em_fit(&data, &cfg).unwrap();
        assert_eq!(trace.reinit_events.len(), 6);
        assert!(trace.reinit_at(2));
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in m.components() {
            assert!(data.vectors().contains(&c.mu));
        }
    }

    #[test]
    fn em_rejects_bad_config() {
        let data = set(&[e(3, 0)]);
        assert!(em_fit(&data, &EmConfig::new(0)).is_err());
        assert!(em_fit(&data, &EmConfig::new(1).with_iterations(0)).is_err());
        assert!(em_fit(&data, &EmConfig::new(1).with_kappa(-1.0)).is_err());
    }

    #[test]
    fn responsibilities_examples() {
        let data = set(&[e(3, 0), e(3, 1)]);
        let m = VmfMixture::uniform(vec![e(3, 2)], 20.0).unwrap();
        for row in responsibilities(&m, &data).unwrap() {
            assert_eq!(row, vec![1.0]);
        }
        // x = e3 is equidistant from e1 and e2.
        let m = VmfMixture::uniform(vec![e(3, 0), e(3, 1)], 20.0).unwrap();
        let g = responsibilities(&m, &set(&[e(3, 2)])).unwrap();
        assert_eq!(g[0], vec![0.5, 0.5]);
        // dots [1, 0] -> softmax([20, 0]); mpmath: 2.0611536181902036e-9
        let g = responsibilities(&m, &set(&[e(3, 0)])).unwrap();
        assert!((g[0][1] - 2.061_153_618_190_203_6e-9).abs() < 1e-20);
        assert!((g[0][0] - (1.0 - 2.061_153_618_190_203_6e-9)).abs() < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(responsibility_entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((responsibility_entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((responsibility_entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(responsibility_entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn kappa_hat_examples() {
        // Direct arithmetic (mpmath): 511.8333..., 10.37368421...
        assert!((kappa_hat(0.5, 768).unwrap() - 511.833_333_333_333_3).abs() < 1e-9);
        assert!((kappa_hat(0.9, 3).unwrap() - 10.373_684_210_526_315).abs() < 1e-9);
        assert!(kappa_hat(1e-9, 3).unwrap() < 1e-8);
        assert!(kappa_hat(0.0, 3).is_err());
        assert!(kappa_hat(1.0, 3).is_err());
        let mut prev = 0.0;
        for i in 1..100 {
            let k = kappa_hat(i as f64 / 100.0, 64).unwrap();
            assert!(k > prev);
            prev = k;
        }
    }

    /// Independent ARI oracle: count agreeing point pairs directly.
    fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut total) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                total += 1.0;
                if sa && sb {
                    both += 1.0;
                }
                if sa {
                    only_a += 1.0;
                }
                if sb {
                    only_b += 1.0;
                }
            }
        }
        let expected = only_a * only_b / total;
        (both - expected) / (0.5 * (only_a + only_b) - expected)
    }

    #[test]
    fn ari_examples() {
        assert_eq!(clustering_ari(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(clustering_ari(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let v = clustering_ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((v - ari_by_pairs(&[0, 0, 1, 1], &[0, 1, 0, 1])).abs() < 1e-12);
        assert!((v + 0.5).abs() < 1e-12);
        assert!(clustering_ari(&[0, 1], &[0]).is_err());
        let a = [0, 1, 2, 0, 1, 2, 2, 1, 0, 0];
        let b = [1, 1, 0, 0, 2, 2, 2, 1, 0, 1];
        assert!((clustering_ari(&a, &b).unwrap() - ari_by_pairs(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn hard_assignment_ties_go_low() {
        assert_eq!(
            hard_assignments(&[vec![0.5, 0.5], vec![0.2, 0.8]]),
            vec![0, 1]
        );
    }
}

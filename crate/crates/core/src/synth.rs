//! Synthetic embeddings drawn from known vMF mixtures, planted caption
//! counterfactuals, and a naive EM step used as a test oracle.

use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MsdError, Result};
use crate::sphere::{EmbeddingSet, Modality, RngState, UnitVector};
use crate::vmf::{VmfComponent, VmfMixture};

/// A controlled change applied to a ground-truth mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    #[default]
    None,
    /// Rotates `mu_index` by `angle` radians towards a seeded orthogonal
    /// direction.
    RotateComponent(usize, f64),
    /// Appends a component with weight `pi`; the others are scaled by `1 - pi`.
    AddComponent(UnitVector, f64),
    /// Removes a component and renormalizes the remaining weights.
    DropComponent(usize),
    /// Exchanges the weights of two components.
    SwapComponents(usize, usize),
}

impl Perturbation {
    fn validate(&self, m: &VmfMixture) -> Result<()> {
        let k = m.k();
        let bad = |msg: String| Err(MsdError::InvalidConfig(msg));
        match self {
            Perturbation::None => Ok(()),
            Perturbation::RotateComponent(i, angle) => {
                if *i >= k {
                    return bad(format!("rotate index {i} with K = {k}"));
                }
                if !(0.0..=std::f64::consts::PI).contains(angle) {
                    return Err(MsdError::OutOfRange {
                        what: "angle",
                        value: *angle,
                    });
                }
                Ok(())
            }
            Perturbation::AddComponent(mu, pi) => {
                if mu.dim() != m.dim() {
                    return Err(MsdError::DimMismatch {
                        expected: m.dim(),
                        found: mu.dim(),
                    });
                }
                if !(*pi > 0.0 && *pi < 1.0) {
                    return Err(MsdError::OutOfRange {
                        what: "pi",
                        value: *pi,
                    });
                }
                Ok(())
            }
            Perturbation::DropComponent(i) => {
                if *i >= k || k < 2 {
                    return bad(format!("drop index {i} with K = {k}"));
                }
                if m.components()[*i].weight >= 1.0 {
                    return bad("dropping the only component with mass".into());
                }
                Ok(())
            }
            Perturbation::SwapComponents(i, j) => {
                if *i >= k || *j >= k {
                    return bad(format!("swap ({i}, {j}) with K = {k}"));
                }
                Ok(())
            }
        }
    }

    /// The perturbed mixture. `seed` only matters for rotations.
    pub fn apply(&self, m: &VmfMixture, seed: RngState) -> Result<VmfMixture> {
        self.validate(m)?;
        let mut comps = m.components().to_vec();
        match self {
            Perturbation::None => {}
            Perturbation::RotateComponent(i, angle) => {
                let mu = comps[*i].mu.as_slice();
                let ortho = random_orthogonal(mu, &mut seed.rng());
                let rotated: Vec<f64> = mu
                    .iter()
                    .zip(&ortho)
                    .map(|(a, b)| angle.cos() * a + angle.sin() * b)
                    .collect();
                comps[*i].mu = UnitVector::new(rotated)?;
            }
            Perturbation::AddComponent(mu, pi) => {
                comps.iter_mut().for_each(|c| c.weight *= 1.0 - pi);
                comps.push(VmfComponent {
                    mu: mu.clone(),
                    weight: *pi,
                });
            }
            Perturbation::DropComponent(i) => {
                comps.remove(*i);
                let total: f64 = comps.iter().map(|c| c.weight).sum();
                comps.iter_mut().for_each(|c| c.weight /= total);
            }
            Perturbation::SwapComponents(i, j) => {
                let (wi, wj) = (comps[*i].weight, comps[*j].weight);
                comps[*i].weight = wj;
                comps[*j].weight = wi;
            }
        }
        VmfMixture::new(comps, m.kappa())
    }
}

/// Ground truth plus sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub mixture: VmfMixture,
    pub n_samples: usize,
    #[serde(default)]
    pub perturbation: Perturbation,
    pub seed: RngState,
}

impl SynthSpec {
    pub fn new(mixture: VmfMixture, n_samples: usize, seed: RngState) -> Self {
        Self {
            dim: mixture.dim(),
            mixture,
            n_samples,
            perturbation: Perturbation::None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != self.mixture.dim() {
            return Err(MsdError::DimMismatch {
                expected: self.dim,
                found: self.mixture.dim(),
            });
        }
        if self.n_samples == 0 {
            return Err(MsdError::InvalidConfig("n_samples must be >= 1".into()));
        }
        self.perturbation.validate(&self.mixture)
    }

    /// The mixture actually sampled: `perturbation` applied to `mixture`.
    pub fn target_mixture(&self) -> Result<VmfMixture> {
        self.perturbation
            .apply(&self.mixture, self.seed.derive("perturb"))
    }
}

/// Uniform point on the unit sphere orthogonal to `mu`.
fn random_orthogonal(mu: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
        let proj: f64 = v.iter().zip(mu).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(mu).for_each(|(a, b)| *a -= proj * b);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            return v;
        }
    }
}

/// Uniform point on the unit sphere.
pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Result<UnitVector> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        match UnitVector::new(v) {
            Err(MsdError::ZeroVector) => continue,
            other => return other,
        }
    }
}

/// Wood's rejection sampler for `w = mu . x`, then a uniform tangent
/// direction.
fn sample_one(mu: &UnitVector, kappa: f64, rng: &mut impl Rng) -> UnitVector {
    let d = mu.dim() as f64;
    let dm1 = d - 1.0;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("dim >= 2");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.gen();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    let v = random_orthogonal(mu.as_slice(), rng);
    let s = (1.0 - w * w).max(0.0).sqrt();
    let x: Vec<f64> = mu
        .as_slice()
        .iter()
        .zip(&v)
        .map(|(m, t)| w * m + s * t)
        .collect();
    UnitVector::new(x).expect("unit combination")
}

/// `n` draws from `vMF(mu, kappa)`.
pub fn sample_vmf(
    mu: &UnitVector,
    kappa: f64,
    n: usize,
    seed: RngState,
    modality: Modality,
) -> Result<EmbeddingSet> {
    if n == 0 {
        return Err(MsdError::EmptyData);
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(MsdError::OutOfRange {
            what: "kappa",
            value: kappa,
        });
    }
    let mut rng = seed.rng();
    let vectors = (0..n).map(|_| sample_one(mu, kappa, &mut rng)).collect();
    EmbeddingSet::new(vectors, modality)
}

fn draw_from(
    m: &VmfMixture,
    n: usize,
    seed: RngState,
    modality: Modality,
) -> Result<(EmbeddingSet, Vec<usize>)> {
    let mut rng = seed.rng();
    let pick =
        WeightedIndex::new(m.weights()).map_err(|e| MsdError::InvalidMixture(e.to_string()))?;
    let mut labels = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for _ in 0..n {
        let k = pick.sample(&mut rng);
        labels.push(k);
        vectors.push(sample_one(&m.components()[k].mu, m.kappa(), &mut rng));
    }
    Ok((EmbeddingSet::new(vectors, modality)?, labels))
}

/// Samples `spec.n_samples` points from the target mixture, returning the
/// ground-truth component of each.
pub fn sample_mixture(spec: &SynthSpec, modality: Modality) -> Result<(EmbeddingSet, Vec<usize>)> {
    spec.validate()?;
    draw_from(&spec.target_mixture()?, spec.n_samples, spec.seed, modality)
}

/// An image with a faithful and a counterfactual caption.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedPair {
    pub img: EmbeddingSet,
    pub txt_pos: EmbeddingSet,
    pub txt_neg: EmbeddingSet,
}

/// `img` (`base.n_samples` patches) and `txt_pos` (`n_text` tokens) are
/// independent draws from `base.mixture`; `txt_neg` comes from the mixture
/// after `perturbation`. `base.perturbation` is ignored.
pub fn planted_pair(
    base: &SynthSpec,
    perturbation: &Perturbation,
    n_text: usize,
) -> Result<PlantedPair> {
    base.validate()?;
    if n_text == 0 {
        return Err(MsdError::EmptyData);
    }
    let neg_mix = perturbation.apply(&base.mixture, base.seed.derive("perturb"))?;
    let (img, _) = draw_from(
        &base.mixture,
        base.n_samples,
        base.seed.derive("img"),
        Modality::Image,
    )?;
    let (txt_pos, _) = draw_from(
        &base.mixture,
        n_text,
        base.seed.derive("pos"),
        Modality::Text,
    )?;
    let (txt_neg, _) = draw_from(&neg_mix, n_text, base.seed.derive("neg"), Modality::Text)?;
    Ok(PlantedPair {
        img,
        txt_pos,
        txt_neg,
    })
}

/// Equal-weight mixture with means drawn uniformly on the sphere.
pub fn random_mixture(dim: usize, k: usize, kappa: f64, seed: RngState) -> Result<VmfMixture> {
    if k == 0 {
        return Err(MsdError::InvalidConfig("k must be >= 1".into()));
    }
    let mut rng = seed.rng();
    let means = (0..k)
        .map(|_| random_unit(dim, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    VmfMixture::uniform(means, kappa)
}

/// Perturbation family for generated datasets, resolved per pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantedChange {
    #[default]
    None,
    Rotate {
        index: usize,
        angle: f64,
    },
    /// A fresh random direction with weight `pi`.
    Add {
        pi: f64,
    },
    Drop {
        index: usize,
    },
    Swap {
        i: usize,
        j: usize,
    },
}

/// A whole planted-pair dataset: pair `i` uses ground truth drawn from
/// `seed.derive_index(i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDatasetSpec {
    pub dim: usize,
    pub k: usize,
    /// Concentration of the generating components.
    pub kappa: f64,
    pub n_pairs: usize,
    pub n_img: usize,
    pub n_txt: usize,
    #[serde(default)]
    pub change: PlantedChange,
    #[serde(default)]
    pub grid: Option<(usize, usize)>,
    pub seed: u64,
}

impl PairDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(MsdError::DimTooSmall(self.dim));
        }
        if self.k == 0 || self.n_pairs == 0 || self.n_img == 0 || self.n_txt == 0 {
            return Err(MsdError::InvalidConfig(
                "k, n_pairs, n_img and n_txt must be >= 1".into(),
            ));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(MsdError::OutOfRange {
                what: "kappa",
                value: self.kappa,
            });
        }
        if let Some((r, c)) = self.grid {
            if r * c != self.n_img {
                return Err(MsdError::GridMismatch {
                    rows: r,
                    cols: c,
                    count: self.n_img,
                });
            }
        }
        Ok(())
    }

    pub fn pair(&self, i: usize) -> Result<PlantedPair> {
        let seed = RngState::new(self.seed).derive_index(i as u64);
        let mixture = random_mixture(self.dim, self.k, self.kappa, seed.derive("truth"))?;
        let perturbation = match &self.change {
            PlantedChange::None => Perturbation::None,
            PlantedChange::Rotate { index, angle } => Perturbation::RotateComponent(*index, *angle),
            PlantedChange::Add { pi } => {
                let mu = random_unit(self.dim, &mut seed.derive("added").rng())?;
                Perturbation::AddComponent(mu, *pi)
            }
            PlantedChange::Drop { index } => Perturbation::DropComponent(*index),
            PlantedChange::Swap { i, j } => Perturbation::SwapComponents(*i, *j),
        };
        let base = SynthSpec::new(mixture, self.n_img, seed);
        let mut pair = planted_pair(&base, &perturbation, self.n_txt)?;
        if let Some((r, c)) = self.grid {
            pair.img = pair.img.with_grid(r, c)?;
        }
        Ok(pair)
    }
}

/// One EM iteration written as plain loops with direct exponentials: no
/// log-space shift, no reinitialization. Reference for testing the fitted
/// path.
#[allow(clippy::needless_range_loop)]
pub fn brute_force_em_step(data: &EmbeddingSet, mixture: &VmfMixture) -> Result<VmfMixture> {
    if data.is_empty() {
        return Err(MsdError::EmptyData);
    }
    if data.dim() != mixture.dim() {
        return Err(MsdError::DimMismatch {
            expected: mixture.dim(),
            found: data.dim(),
        });
    }
    let n = data.len();
    let k = mixture.k();
    let d = mixture.dim();
    let comps = mixture.components();
    let mut gamma = vec![vec![0.0; k]; n];
    for i in 0..n {
        let x = data.vectors()[i].as_slice();
        let mut total = 0.0;
        for j in 0..k {
            let mut dot = 0.0;
            for t in 0..d {
                dot += comps[j].mu.as_slice()[t] * x[t];
            }
            gamma[i][j] = comps[j].weight * (mixture.kappa() * dot).exp();
            total += gamma[i][j];
        }
        for j in 0..k {
            gamma[i][j] /= total;
        }
    }
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let mut nk = 0.0;
        let mut r = vec![0.0; d];
        for i in 0..n {
            nk += gamma[i][j];
            for t in 0..d {
                r[t] += gamma[i][j] * data.vectors()[i].as_slice()[t];
            }
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mu = if norm > 1e-12 {
            UnitVector::new(r)?
        } else {
            comps[j].mu.clone()
        };
        out.push(VmfComponent {
            mu,
            weight: nk / n as f64,
        });
    }
    // Weights are renormalized only to absorb rounding for the validator.
    let total: f64 = out.iter().map(|c| c.weight).sum();
    out.iter_mut().for_each(|c| c.weight /= total);
    VmfMixture::new(out, mixture.kappa())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vmf::{em_fit, initial_mixture, mean_resultant_length, EmConfig};

    fn two_cluster(dim: usize, kappa: f64) -> VmfMixture {
        VmfMixture::uniform(
            vec![
                UnitVector::basis(dim, 0).unwrap(),
                UnitVector::basis(dim, 1).unwrap(),
            ],
            kappa,
        )
        .unwrap()
    }

    #[test]
    fn high_kappa_samples_hug_the_mean() {
        let mu = UnitVector::basis(5, 2).unwrap();
        let s = sample_vmf(&mu, 1e6, 100, RngState::new(3), Modality::Image).unwrap();
        for x in s.iter() {
            let cos = x.as_slice()[2].min(1.0);
            assert!(cos.acos() < 0.01);
        }
    }

    #[test]
    fn low_kappa_is_near_uniform() {
        let mu = UnitVector::basis(3, 0).unwrap();
        let s = sample_vmf(&mu, 0.01, 10_000, RngState::new(4), Modality::Image).unwrap();
        assert!(mean_resultant_length(&s) < 0.1);
    }

    #[test]
    fn samples_are_unit_and_deterministic() {
        let mu = UnitVector::new(vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let a = sample_vmf(&mu, 20.0, 200, RngState::new(9), Modality::Text).unwrap();
        let b = sample_vmf(&mu, 20.0, 200, RngState::new(9), Modality::Text).unwrap();
        assert_eq!(a, b);
        for x in a.iter() {
            let n: f64 = x.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_of_samples_matches_mu() {
        // E[mu . x] = A_d(kappa); for d = 3, A = coth(k) - 1/k.
        let mu = UnitVector::basis(3, 1).unwrap();
        let s = sample_vmf(&mu, 5.0, 20_000, RngState::new(12), Modality::Image).unwrap();
        let mean_w: f64 = s.iter().map(|x| x.as_slice()[1]).sum::<f64>() / s.len() as f64;
        let a3 = 1.0 / 5.0f64.tanh() - 0.2;
        assert!((mean_w - a3).abs() < 0.01, "{mean_w} vs {a3}");
    }

    #[test]
    fn mixture_label_rules() {
        let single = VmfMixture::uniform(vec![UnitVector::basis(3, 0).unwrap()], 10.0).unwrap();
        let (_, labels) = sample_mixture(
            &SynthSpec::new(single, 50, RngState::new(1)),
            Modality::Image,
        )
        .unwrap();
        assert!(labels.iter().all(|&l| l == 0));

        let inert = VmfMixture::new(
            vec![
                VmfComponent {
                    mu: UnitVector::basis(3, 0).unwrap(),
                    weight: 1.0,
                },
                VmfComponent {
                    mu: UnitVector::basis(3, 1).unwrap(),
                    weight: 0.0,
                },
            ],
            10.0,
        )
        .unwrap();
        let (_, labels) = sample_mixture(
            &SynthSpec::new(inert, 500, RngState::new(2)),
            Modality::Image,
        )
        .unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn label_frequencies_within_three_sigma() {
        let weights = [0.2, 0.3, 0.5];
        let comps = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| VmfComponent {
                mu: UnitVector::basis(4, i).unwrap(),
                weight: w,
            })
            .collect();
        let m = VmfMixture::new(comps, 20.0).unwrap();
        let n = 10_000;
        let (_, labels) =
            sample_mixture(&SynthSpec::new(m, n, RngState::new(77)), Modality::Image).unwrap();
        for (k, &w) in weights.iter().enumerate() {
            let count = labels.iter().filter(|&&l| l == k).count() as f64;
            let sigma = (n as f64 * w * (1.0 - w)).sqrt();
            assert!((count - n as f64 * w).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn perturbations_reshape_the_mixture() {
        let m = two_cluster(4, 20.0);
        let s = RngState::new(5);
        let rot = Perturbation::RotateComponent(0, std::f64::consts::FRAC_PI_2)
            .apply(&m, s)
            .unwrap();
        let dot: f64 = rot.components()[0]
            .mu
            .as_slice()
            .iter()
            .zip(m.components()[0].mu.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot.abs() < 1e-12);

        let add = Perturbation::AddComponent(UnitVector::basis(4, 3).unwrap(), 0.2)
            .apply(&m, s)
            .unwrap();
        assert_eq!(add.k(), 3);
        assert!((add.weights()[0] - 0.4).abs() < 1e-15);

        let drop = Perturbation::DropComponent(1).apply(&m, s).unwrap();
        assert_eq!(drop.k(), 1);
        assert_eq!(drop.weights(), vec![1.0]);

        assert!(Perturbation::DropComponent(2).apply(&m, s).is_err());
        assert!(Perturbation::RotateComponent(0, 4.0).apply(&m, s).is_err());
    }

    #[test]
    fn planted_pair_seeds_are_independent() {
        let spec = SynthSpec::new(two_cluster(6, 20.0), 30, RngState::new(8));
        let p = planted_pair(&spec, &Perturbation::None, 10).unwrap();
        assert_eq!(p.img.len(), 30);
        assert_eq!(p.txt_pos.len(), 10);
        assert_ne!(p.txt_pos, p.txt_neg);
        assert_eq!(p, planted_pair(&spec, &Perturbation::None, 10).unwrap());
    }

    #[test]
    fn brute_force_k1_is_normalized_sum() {
        let data =
            EmbeddingSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], Modality::Image).unwrap();
        let m = VmfMixture::uniform(vec![UnitVector::basis(2, 0).unwrap()], 20.0).unwrap();
        let next = brute_force_em_step(&data, &m).unwrap();
        let h = 0.5f64.sqrt();
        assert!((next.components()[0].mu.as_slice()[0] - h).abs() < 1e-15);
        assert!((next.components()[0].mu.as_slice()[1] - h).abs() < 1e-15);
    }

    #[test]
    fn brute_force_uniform_gamma_gives_equal_means() {
        // Identical means force uniform responsibilities.
        let mu = UnitVector::new(vec![1.0, 1.0, 0.0]).unwrap();
        let m = VmfMixture::uniform(vec![mu.clone(), mu.clone(), mu], 20.0).unwrap();
        let data = sample_vmf(
            &UnitVector::basis(3, 2).unwrap(),
            3.0,
            12,
            RngState::new(1),
            Modality::Image,
        )
        .unwrap();
        let next = brute_force_em_step(&data, &m).unwrap();
        let c = next.components();
        assert_eq!(c[0].mu, c[1].mu);
        assert_eq!(c[1].mu, c[2].mu);
    }

    #[test]
    fn brute_force_matches_one_em_iteration() {
        let spec = SynthSpec::new(two_cluster(5, 8.0), 14, RngState::new(31));
        let (data, _) = sample_mixture(&spec, Modality::Image).unwrap();
        let cfg = EmConfig::new(2)
            .with_iterations(1)
            .with_seed(RngState::new(4));
        let (fit, trace) = em_fit(&data, &cfg).unwrap();
        assert!(trace.reinit_events.is_empty());
        let oracle = brute_force_em_step(&data, &initial_mixture(&data, &cfg).unwrap()).unwrap();
        for (a, b) in fit.components().iter().zip(oracle.components()) {
            assert!((a.weight - b.weight).abs() < 1e-9);
            for (x, y) in a.mu.as_slice().iter().zip(b.mu.as_slice()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dataset_spec_is_reproducible() {
        let spec = PairDatasetSpec {
            dim: 8,
            k: 2,
            kappa: 30.0,
            n_pairs: 3,
            n_img: 9,
            n_txt: 5,
            change: PlantedChange::Add { pi: 0.3 },
            grid: Some((3, 3)),
            seed: 11,
        };
        spec.validate().unwrap();
        let a = spec.pair(1).unwrap();
        assert_eq!(a, spec.pair(1).unwrap());
        assert_ne!(a, spec.pair(2).unwrap());
        assert_eq!(a.img.grid(), Some((3, 3)));
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            serde_json::from_str::<PairDatasetSpec>(&json).unwrap(),
            spec
        );
    }
}

//! Global similarity, MSD fusion and the uncertainty-gated Soft-MSD.

use serde::{Deserialize, Serialize};

use crate::divergence::{bi_kl, BetaConfig, DivergenceReport};
use crate::error::{MsdError, Result};
use crate::sphere::{cosine, lse, mean_pool, EmbeddingSet, UnitVector};
use crate::vmf::{em_fit, EmConfig, VmfMixture};

/// Which divergence feeds the local correction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// `beta(L) KL(img||txt) + (1 - beta(L)) KL(txt||img)`.
    #[default]
    BiKl,
    ImgToTxt,
    TxtToImg,
}

impl DivergenceMode {
    pub fn select(self, report: &DivergenceReport) -> f64 {
        match self {
            DivergenceMode::BiKl => report.weighted,
            DivergenceMode::ImgToTxt => report.kl_img_txt,
            DivergenceMode::TxtToImg => report.kl_txt_img,
        }
    }
}

impl std::str::FromStr for DivergenceMode {
    type Err = MsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bikl" | "bi_kl" => Ok(Self::BiKl),
            "img_to_txt" | "coverage" => Ok(Self::ImgToTxt),
            "txt_to_img" | "support" => Ok(Self::TxtToImg),
            other => Err(MsdError::InvalidConfig(format!(
                "divergence mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alpha: f64,
    /// Softmax temperature over candidate global scores.
    pub xi: f64,
    pub beta: BetaConfig,
    pub mode: DivergenceMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            xi: 0.2,
            beta: BetaConfig::default(),
            mode: DivergenceMode::BiKl,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(MsdError::InvalidConfig(format!("alpha = {}", self.alpha)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(MsdError::InvalidConfig(format!("xi = {}", self.xi)));
        }
        self.beta.validate()
    }
}

/// Scores of one candidate caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub candidate_id: String,
    /// Cosine of the pooled image and caption embeddings.
    pub g: f64,
    /// Local divergence selected by the fusion mode.
    pub d: f64,
    pub msd: f64,
    pub soft_msd: f64,
    /// Uncertainty shared by all candidates of the image.
    pub u: f64,
    /// Softmax mass of this candidate's global score.
    pub p: f64,
    pub kl_img_txt: f64,
    pub kl_txt_img: f64,
    pub beta: f64,
    pub caption_length: usize,
}

/// `g - alpha * u * d`. MSD is the `u = 1` case.
#[inline]
pub fn fuse(g: f64, d: f64, alpha: f64, u: f64) -> f64 {
    g - alpha * u * d
}

pub fn msd(g: f64, d: f64, alpha: f64) -> f64 {
    fuse(g, d, alpha, 1.0)
}

/// Softmax over `g / xi` and the normalized uncertainty
/// `M/(M-1) (1 - max_j p_j)` (1 for a single candidate), clamped to `[0, 1]`.
pub fn softmax_uncertainty(global_scores: &[f64], xi: f64) -> Result<(Vec<f64>, f64)> {
    let m = global_scores.len();
    if m == 0 {
        return Err(MsdError::EmptyCandidates);
    }
    let logits: Vec<f64> = global_scores.iter().map(|g| g / xi).collect();
    let z = lse(&logits);
    let p: Vec<f64> = logits.iter().map(|l| (l - z).exp()).collect();
    if m == 1 {
        return Ok((p, 1.0));
    }
    let max_p = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let u = m as f64 / (m as f64 - 1.0) * (1.0 - max_p);
    Ok((p, u.clamp(0.0, 1.0)))
}

/// `g(I, T)`: cosine between the mean-pooled image and caption embeddings.
pub fn global_similarity(img: &EmbeddingSet, txt: &EmbeddingSet) -> Result<f64> {
    cosine(&mean_pool(img)?, &mean_pool(txt)?)
}

struct ImageSide<'a> {
    set: &'a EmbeddingSet,
    pooled: UnitVector,
    mixture: VmfMixture,
}

impl<'a> ImageSide<'a> {
    fn fit(set: &'a EmbeddingSet, em: &EmConfig) -> Result<Self> {
        let pooled = mean_pool(set)?;
        let (mixture, _) = em_fit(set, em)?;
        Ok(Self {
            set,
            pooled,
            mixture,
        })
    }

    fn score(
        &self,
        id: &str,
        txt: &EmbeddingSet,
        fusion: &FusionConfig,
        em_txt: &EmConfig,
    ) -> Result<(ScoreRecord, DivergenceReport)> {
        let g = cosine(&self.pooled, &mean_pool(txt)?)?;
        let (p_txt, _) = em_fit(txt, em_txt)?;
        let report = bi_kl(&self.mixture, &p_txt, self.set, txt, &fusion.beta)?;
        let d = fusion.mode.select(&report);
        let msd = msd(g, d, fusion.alpha);
        let record = ScoreRecord {
            candidate_id: id.to_string(),
            g,
            d,
            msd,
            soft_msd: msd,
            u: 1.0,
            p: 1.0,
            kl_img_txt: report.kl_img_txt,
            kl_txt_img: report.kl_txt_img,
            beta: report.beta,
            caption_length: report.caption_length,
        };
        Ok((record, report))
    }
}

/// Single-candidate MSD: fits both mixtures and fuses. `u = 1`, so
/// `soft_msd == msd`.
pub fn msd_score(
    img: &EmbeddingSet,
    txt: &EmbeddingSet,
    fusion: &FusionConfig,
    em_img: &EmConfig,
    em_txt: &EmConfig,
) -> Result<(ScoreRecord, DivergenceReport)> {
    fusion.validate()?;
    ImageSide::fit(img, em_img)?.score("", txt, fusion, em_txt)
}

/// Caption EM settings for candidate `cand_id`: `em_txt` reseeded with
/// `em_txt.seed.derive(cand_id)`.
pub fn candidate_em(em_txt: &EmConfig, cand_id: &str) -> EmConfig {
    em_txt.clone().with_seed(em_txt.seed.derive(cand_id))
}

/// Soft-MSD over all candidate captions of one image.
///
/// The image mixture is fitted once with `em_img`; candidate `id` fits its
/// caption mixture with seed `em_txt.seed.derive(id)`, so scores do not depend
/// on candidate order.
pub fn soft_msd_batch(
    img: &EmbeddingSet,
    candidates: &[(String, EmbeddingSet)],
    fusion: &FusionConfig,
    em_img: &EmConfig,
    em_txt: &EmConfig,
) -> Result<Vec<(ScoreRecord, DivergenceReport)>> {
    fusion.validate()?;
    if candidates.is_empty() {
        return Err(MsdError::EmptyCandidates);
    }
    let side = ImageSide::fit(img, em_img)?;
    let mut scored = candidates
        .iter()
        .map(|(id, txt)| side.score(id, txt, fusion, &candidate_em(em_txt, id)))
        .collect::<Result<Vec<_>>>()?;
    let gs: Vec<f64> = scored.iter().map(|(r, _)| r.g).collect();
    let (p, u) = softmax_uncertainty(&gs, fusion.xi)?;
    for ((record, _), p) in scored.iter_mut().zip(p) {
        record.p = p;
        record.u = u;
        record.soft_msd = fuse(record.g, record.d, fusion.alpha, u);
    }
    Ok(scored)
}

/// Cosine and Bi-KL of one candidate, as consumed by [`rank_agg`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosKl {
    pub cos: f64,
    pub bikl: f64,
}

/// Two-stage rank aggregation: trust cosine when the gap exceeds `tau_r`,
/// otherwise prefer the lower Bi-KL. Strict comparisons; ties are not
/// preferred.
pub fn rank_agg(pos: CosKl, neg: CosKl, tau_r: f64) -> bool {
    if (pos.cos - neg.cos).abs() > tau_r {
        pos.cos > neg.cos
    } else {
        pos.bikl < neg.bikl
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::Modality;

    fn e(dim: usize, axis: usize) -> UnitVector {
        UnitVector::basis(dim, axis).unwrap()
    }

    #[test]
    fn fusion_arithmetic() {
        assert!((msd(0.5, 1.0, 0.1) - 0.4).abs() < 1e-15);
        assert_eq!(msd(0.5, 123.0, 0.0), 0.5);
        for alpha in [0.0, 0.05, 0.1, 0.2] {
            let direct = 0.7 - alpha * 2.5;
            assert!((msd(0.7, 2.5, alpha) - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn global_similarity_examples() {
        let img = EmbeddingSet::new(vec![e(2, 0)], Modality::Image).unwrap();
        let same = EmbeddingSet::new(vec![e(2, 0)], Modality::Text).unwrap();
        let orth = EmbeddingSet::new(vec![e(2, 1)], Modality::Text).unwrap();
        let both = EmbeddingSet::new(vec![e(2, 0), e(2, 1)], Modality::Text).unwrap();
        assert_eq!(global_similarity(&img, &same).unwrap(), 1.0);
        assert_eq!(global_similarity(&img, &orth).unwrap(), 0.0);
        let g = global_similarity(&img, &both).unwrap();
        assert!((g - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn identical_sets_give_zero_divergence() {
        let rows = [
            [1.0, 0.2, 0.0],
            [0.1, 1.0, 0.0],
            [0.0, 0.3, 1.0],
            [0.9, 0.0, 0.1],
        ];
        let img = EmbeddingSet::from_rows(&rows, Modality::Image).unwrap();
        let txt = EmbeddingSet::from_rows(&rows, Modality::Text).unwrap();
        let em = EmConfig::new(2);
        let (r, report) = msd_score(&img, &txt, &FusionConfig::default(), &em, &em).unwrap();
        assert_eq!(report.kl_img_txt, 0.0);
        assert_eq!(r.d, 0.0);
        assert!((r.g - 1.0).abs() < 1e-15);
        assert_eq!(r.msd, r.g);
        assert_eq!(r.u, 1.0);
        assert_eq!(r.soft_msd, r.msd);
    }

    #[test]
    fn uncertainty_examples() {
        let (p, u) = softmax_uncertainty(&[0.3], 0.2).unwrap();
        assert_eq!((p, u), (vec![1.0], 1.0));
        let (p, u) = softmax_uncertainty(&[0.4; 3], 0.2).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!((u - 1.0).abs() < 1e-9);
        let (_, u) = softmax_uncertainty(&[10.0, -10.0], 0.2).unwrap();
        assert!(u < 1e-6);
        assert!(matches!(
            softmax_uncertainty(&[], 0.2),
            Err(MsdError::EmptyCandidates)
        ));
    }

    #[test]
    fn rank_agg_examples() {
        let c = |cos, bikl| CosKl { cos, bikl };
        assert!(rank_agg(c(0.9, 5.0), c(0.1, 0.0), 0.05));
        assert!(rank_agg(c(0.50, 1.0), c(0.51, 2.0), 0.05));
        assert!(!rank_agg(c(0.5, 1.0), c(0.5, 1.0), 0.05));
    }

    #[test]
    fn batch_is_order_independent() {
        let img = EmbeddingSet::from_rows(
            &[
                [1.0, 0.2, 0.0, 0.1],
                [0.1, 1.0, 0.0, 0.2],
                [0.0, 0.3, 1.0, 0.0],
            ],
            Modality::Image,
        )
        .unwrap();
        let a = EmbeddingSet::from_rows(
            &[[1.0, 0.0, 0.1, 0.0], [0.0, 0.1, 1.0, 0.0]],
            Modality::Text,
        )
        .unwrap();
        let b = EmbeddingSet::from_rows(
            &[[0.0, 0.0, 0.0, 1.0], [0.2, 0.0, 0.0, 1.0]],
            Modality::Text,
        )
        .unwrap();
        let fusion = FusionConfig::default();
        let em_img = EmConfig::new(3);
        let em_txt = EmConfig::new(2);
        let fwd = soft_msd_batch(
            &img,
            &[("a".into(), a.clone()), ("b".into(), b.clone())],
            &fusion,
            &em_img,
            &em_txt,
        )
        .unwrap();
        let rev = soft_msd_batch(
            &img,
            &[("b".into(), b), ("a".into(), a)],
            &fusion,
            &em_img,
            &em_txt,
        )
        .unwrap();
        assert_eq!(fwd[0].0, rev[1].0);
        assert_eq!(fwd[1].0, rev[0].0);
        assert_eq!(fwd[0].0.u, fwd[1].0.u);
        let total: f64 = fwd.iter().map(|(r, _)| r.p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(soft_msd_batch(&img, &[], &fusion, &em_img, &em_txt).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "bikl".parse::<DivergenceMode>().unwrap(),
            DivergenceMode::BiKl
        );
        assert_eq!(
            "support".parse::<DivergenceMode>().unwrap(),
            DivergenceMode::TxtToImg
        );
        assert!("other".parse::<DivergenceMode>().is_err());
    }
}

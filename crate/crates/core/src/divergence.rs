//! Monte-Carlo KL between fixed-κ mixtures, the length-adaptive two-way
//! weighting, and the per-patch / per-token decomposition behind heatmaps.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{MsdError, Result};
use crate::sphere::{lse, EmbeddingSet, RngState};
use crate::vmf::{em_fit, VmfMixture};

/// Length-dependent blend between coverage and support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaConfig {
    /// Reference caption length at which both directions weigh 0.5.
    pub l0: f64,
    /// Width of the sigmoid transition.
    pub tau_l: f64,
}

impl Default for BetaConfig {
    fn default() -> Self {
        Self {
            l0: 20.0,
            tau_l: 3.0,
        }
    }
}

impl BetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_l > 0.0 && self.tau_l.is_finite()) || !self.l0.is_finite() {
            return Err(MsdError::InvalidConfig(format!(
                "beta config l0={} tau_l={}",
                self.l0, self.tau_l
            )));
        }
        Ok(())
    }

    /// `1 / (1 + exp((L - L0) / tau_L))` for real-valued `length`.
    pub fn weight(&self, length: f64) -> f64 {
        let z = (length - self.l0) / self.tau_l;
        if z > 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        }
    }
}

/// Weight of `KL(P_img || P_txt)` for a caption of `length` tokens.
pub fn beta_of_length(length: usize, cfg: &BetaConfig) -> f64 {
    cfg.weight(length as f64)
}

/// Monte-Carlo KL estimate together with its per-sample terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub contributions: Vec<f64>,
}

/// Per-sample terms `log p(s) - log q(s)` from precomputed log densities.
pub fn kl_from_log_densities(log_p: &[f64], log_q: &[f64]) -> Result<KlEstimate> {
    if log_p.len() != log_q.len() {
        return Err(MsdError::LengthMismatch {
            left: log_p.len(),
            right: log_q.len(),
        });
    }
    if log_p.is_empty() {
        return Err(MsdError::EmptyInput);
    }
    let contributions: Vec<f64> = log_p.iter().zip(log_q).map(|(p, q)| p - q).collect();
    let value = contributions.iter().sum::<f64>() / contributions.len() as f64;
    Ok(KlEstimate {
        value,
        contributions,
    })
}

fn check_pair(p: &VmfMixture, q: &VmfMixture, samples: &EmbeddingSet) -> Result<()> {
    if p.kappa() != q.kappa() {
        return Err(MsdError::KappaMismatch {
            left: p.kappa(),
            right: q.kappa(),
        });
    }
    for dim in [q.dim(), samples.dim()] {
        if dim != p.dim() {
            return Err(MsdError::DimMismatch {
                expected: p.dim(),
                found: dim,
            });
        }
    }
    Ok(())
}

/// `KL(p || q) ≈ mean_i [log p(s_i) - log q(s_i)]` over the observed samples,
/// which are treated as draws from `p`. Both mixtures must share `kappa`.
pub fn mc_kl(p: &VmfMixture, q: &VmfMixture, samples: &EmbeddingSet) -> Result<KlEstimate> {
    check_pair(p, q, samples)?;
    let k = p.k().max(q.k());
    let mut buf = vec![0.0; k];
    let mut log_p = Vec::with_capacity(samples.len());
    let mut log_q = Vec::with_capacity(samples.len());
    for s in samples.iter() {
        let x = s.as_slice();
        p.component_log_terms(x, &mut buf[..p.k()]);
        log_p.push(lse(&buf[..p.k()]));
        q.component_log_terms(x, &mut buf[..q.k()]);
        log_q.push(lse(&buf[..q.k()]));
    }
    kl_from_log_densities(&log_p, &log_q)
}

/// Both KL directions, their blend, and the terms they average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// Coverage, `KL(P_img || P_txt)`, sampled at the image patches.
    pub kl_img_txt: f64,
    /// Support, `KL(P_txt || P_img)`, sampled at the caption tokens.
    pub kl_txt_img: f64,
    pub beta: f64,
    pub weighted: f64,
    pub caption_length: usize,
    pub patch_contrib: Vec<f64>,
    pub token_contrib: Vec<f64>,
}

impl DivergenceReport {
    /// Assembles a report from the two contribution vectors.
    pub fn from_contributions(
        patch_contrib: Vec<f64>,
        token_contrib: Vec<f64>,
        cfg: &BetaConfig,
    ) -> Result<Self> {
        if patch_contrib.is_empty() || token_contrib.is_empty() {
            return Err(MsdError::EmptyInput);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let kl_img_txt = mean(&patch_contrib);
        let kl_txt_img = mean(&token_contrib);
        let caption_length = token_contrib.len();
        let beta = beta_of_length(caption_length, cfg);
        Ok(Self {
            kl_img_txt,
            kl_txt_img,
            beta,
            weighted: beta * kl_img_txt + (1.0 - beta) * kl_txt_img,
            caption_length,
            patch_contrib,
            token_contrib,
        })
    }
}

/// Length-weighted two-way KL. The caption length is the token count of `txt`.
pub fn bi_kl(
    p_img: &VmfMixture,
    p_txt: &VmfMixture,
    img: &EmbeddingSet,
    txt: &EmbeddingSet,
    cfg: &BetaConfig,
) -> Result<DivergenceReport> {
    let coverage = mc_kl(p_img, p_txt, img)?;
    let support = mc_kl(p_txt, p_img, txt)?;
    DivergenceReport::from_contributions(coverage.contributions, support.contributions, cfg)
}

/// Grid-shaped views of a [`DivergenceReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionBundle {
    pub rows: usize,
    pub cols: usize,
    /// Patch coverage terms, row-major.
    pub coverage_map: Vec<f64>,
    /// Per-token support/penalty terms.
    pub token_scores: Vec<f64>,
    /// Token terms projected onto patches, row-major. High values mark
    /// patches that attract unsupported tokens.
    pub penalty_map: Vec<f64>,
}

impl AttributionBundle {
    /// Negated penalty projection: high where well-supported tokens land.
    pub fn support_map(&self) -> Vec<f64> {
        self.penalty_map.iter().map(|v| -v).collect()
    }
}

/// Reshapes patch terms onto `grid` and projects token terms back to patches.
///
/// Token `j` spreads its term over patches with weights
/// `softmax_p(kappa * x_p . y_j)`; a patch's projected value is the sum over
/// tokens.
pub fn attribution_maps(
    report: &DivergenceReport,
    img: &EmbeddingSet,
    txt: &EmbeddingSet,
    kappa: f64,
    grid: (usize, usize),
) -> Result<AttributionBundle> {
    let (rows, cols) = grid;
    let n_img = report.patch_contrib.len();
    if rows * cols != n_img || img.len() != n_img {
        return Err(MsdError::GridMismatch {
            rows,
            cols,
            count: n_img,
        });
    }
    if txt.len() != report.token_contrib.len() {
        return Err(MsdError::LengthMismatch {
            left: txt.len(),
            right: report.token_contrib.len(),
        });
    }
    if img.dim() != txt.dim() {
        return Err(MsdError::DimMismatch {
            expected: img.dim(),
            found: txt.dim(),
        });
    }
    let mut penalty_map = vec![0.0; n_img];
    let mut logits = vec![0.0; n_img];
    for (y, &c) in txt.iter().zip(&report.token_contrib) {
        for (l, x) in logits.iter_mut().zip(img.iter()) {
            *l = kappa * x.dot_unchecked(y.as_slice());
        }
        let z = lse(&logits);
        for (m, l) in penalty_map.iter_mut().zip(&logits) {
            *m += (l - z).exp() * c;
        }
    }
    Ok(AttributionBundle {
        rows,
        cols,
        coverage_map: report.patch_contrib.clone(),
        token_scores: report.token_contrib.clone(),
        penalty_map,
    })
}

/// How masked patches are picked from a ranking map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    Top,
    Bottom,
    Random(u64),
}

/// Indices of the `ceil(fraction * N)` patches chosen by `mode`, ascending.
/// Ties in `Top`/`Bottom` go to the lower index.
pub fn select_masked(rank_map: &[f64], fraction: f64, mode: MaskMode) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(MsdError::OutOfRange {
            what: "fraction",
            value: fraction,
        });
    }
    let n = rank_map.len();
    let count = (fraction * n as f64).ceil() as usize;
    if count >= n {
        return Err(MsdError::AllMasked);
    }
    let mut picked: Vec<usize> = match mode {
        MaskMode::Top | MaskMode::Bottom => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let ord = rank_map[a].total_cmp(&rank_map[b]);
                let ord = if mode == MaskMode::Top {
                    ord.reverse()
                } else {
                    ord
                };
                ord.then(a.cmp(&b))
            });
            order.truncate(count);
            order
        }
        MaskMode::Random(seed) => {
            index::sample(&mut RngState::new(seed).rng(), n, count).into_vec()
        }
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Bi-KL before and after removing the selected patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskOutcome {
    pub original: f64,
    pub masked: f64,
    pub removed: usize,
}

/// Removes patches picked from `rank_map`, refits the image mixture and
/// recomputes Bi-KL. The caption mixture is fitted once and reused.
pub fn mask_and_rescore(
    img: &EmbeddingSet,
    txt: &EmbeddingSet,
    rank_map: &[f64],
    fraction: f64,
    mode: MaskMode,
    cfg: &PipelineConfig,
) -> Result<MaskOutcome> {
    if rank_map.len() != img.len() {
        return Err(MsdError::LengthMismatch {
            left: rank_map.len(),
            right: img.len(),
        });
    }
    let picked = select_masked(rank_map, fraction, mode)?;
    let (p_img, _) = em_fit(img, &cfg.em_img)?;
    let (p_txt, _) = em_fit(txt, &cfg.em_txt)?;
    let original = bi_kl(&p_img, &p_txt, img, txt, &cfg.fusion.beta)?.weighted;

    let masked_img = img.retain_indices(|i| picked.binary_search(&i).is_err())?;
    let (p_masked, _) = em_fit(&masked_img, &cfg.em_img)?;
    let masked = bi_kl(&p_masked, &p_txt, &masked_img, txt, &cfg.fusion.beta)?.weighted;
    Ok(MaskOutcome {
        original,
        masked,
        removed: picked.len(),
    })
}

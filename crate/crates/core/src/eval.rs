//! Evaluation statistics: pairwise accuracy, tie-aware agreement, rank
//! correlations, bucketed breakdowns, cluster bootstrap and McNemar.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsdError, Result};
use crate::scoring::{rank_agg, CosKl, ScoreRecord};
use crate::sphere::RngState;

/// One image with a preferred and a dispreferred caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseInstance {
    pub image_id: String,
    pub pos: ScoreRecord,
    pub neg: ScoreRecord,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl PairwiseInstance {
    /// `|cos(I, c+) - cos(I, c-)|`.
    pub fn cosine_margin(&self) -> f64 {
        (self.pos.g - self.neg.g).abs()
    }
}

/// A per-candidate score where larger means better. Divergences are negated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreField {
    Global,
    Msd,
    SoftMsd,
    /// `-d` as selected by the fusion mode.
    Divergence,
    /// `-KL(img||txt)`.
    Coverage,
    /// `-KL(txt||img)`.
    Support,
    /// `-(beta KL(img||txt) + (1 - beta) KL(txt||img))`.
    BiKl,
}

impl ScoreField {
    pub const ALL: [ScoreField; 7] = [
        ScoreField::Global,
        ScoreField::Msd,
        ScoreField::SoftMsd,
        ScoreField::Divergence,
        ScoreField::Coverage,
        ScoreField::Support,
        ScoreField::BiKl,
    ];

    pub fn value(self, r: &ScoreRecord) -> f64 {
        match self {
            ScoreField::Global => r.g,
            ScoreField::Msd => r.msd,
            ScoreField::SoftMsd => r.soft_msd,
            ScoreField::Divergence => -r.d,
            ScoreField::Coverage => -r.kl_img_txt,
            ScoreField::Support => -r.kl_txt_img,
            ScoreField::BiKl => -(r.beta * r.kl_img_txt + (1.0 - r.beta) * r.kl_txt_img),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreField::Global => "cosine",
            ScoreField::Msd => "msd",
            ScoreField::SoftMsd => "soft_msd",
            ScoreField::Divergence => "divergence",
            ScoreField::Coverage => "kl_img_txt",
            ScoreField::Support => "kl_txt_img",
            ScoreField::BiKl => "bikl",
        }
    }
}

impl std::str::FromStr for ScoreField {
    type Err = MsdError;

    fn from_str(s: &str) -> Result<Self> {
        ScoreField::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .or(match s {
                "g" | "global" => Some(ScoreField::Global),
                "d" => Some(ScoreField::Divergence),
                _ => None,
            })
            .ok_or_else(|| MsdError::InvalidConfig(format!("unknown score field `{s}`")))
    }
}

/// How a pairwise instance is judged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Selector {
    Field(ScoreField),
    /// Cosine when the gap exceeds `tau_r`, Bi-KL otherwise.
    RankAgg {
        tau_r: f64,
    },
}

impl Selector {
    /// Strictly prefers the positive caption.
    pub fn correct(&self, inst: &PairwiseInstance) -> bool {
        match *self {
            Selector::Field(f) => f.value(&inst.pos) > f.value(&inst.neg),
            Selector::RankAgg { tau_r } => {
                let bikl = |r: &ScoreRecord| -ScoreField::BiKl.value(r);
                rank_agg(
                    CosKl {
                        cos: inst.pos.g,
                        bikl: bikl(&inst.pos),
                    },
                    CosKl {
                        cos: inst.neg.g,
                        bikl: bikl(&inst.neg),
                    },
                    tau_r,
                )
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Selector::Field(f) => f.name().to_string(),
            Selector::RankAgg { tau_r } => format!("rank_agg({tau_r})"),
        }
    }
}

impl From<ScoreField> for Selector {
    fn from(f: ScoreField) -> Self {
        Selector::Field(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub n: usize,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub n: usize,
    pub point_estimate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(default)]
    pub per_bucket: Vec<Bucket>,
}

impl EvalResult {
    pub fn new(metric: impl Into<String>, n: usize, point_estimate: f64) -> Self {
        Self {
            metric: metric.into(),
            n,
            point_estimate,
            ci_low: None,
            ci_high: None,
            p_value: None,
            per_bucket: Vec::new(),
        }
    }

    pub fn with_ci(mut self, (low, high): (f64, f64)) -> Self {
        self.ci_low = Some(low);
        self.ci_high = Some(high);
        self
    }
}

fn accuracy<'a>(
    items: impl IntoIterator<Item = &'a PairwiseInstance>,
    sel: &Selector,
) -> (usize, f64) {
    let (mut n, mut hits) = (0usize, 0usize);
    for inst in items {
        n += 1;
        hits += sel.correct(inst) as usize;
    }
    (
        n,
        if n == 0 {
            f64::NAN
        } else {
            hits as f64 / n as f64
        },
    )
}

/// Fraction of instances where the positive caption scores strictly higher.
pub fn pairwise_accuracy(
    instances: &[PairwiseInstance],
    selector: &Selector,
) -> Result<EvalResult> {
    if instances.is_empty() {
        return Err(MsdError::EmptyEval);
    }
    let (n, acc) = accuracy(instances, selector);
    Ok(EvalResult::new(selector.name(), n, acc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HumanLabel {
    First,
    Second,
    Tie,
}

impl std::str::FromStr for HumanLabel {
    type Err = MsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | ">" | "1" => Ok(HumanLabel::First),
            "second" | "<" | "2" => Ok(HumanLabel::Second),
            "tie" | "=" | "0" => Ok(HumanLabel::Tie),
            other => Err(MsdError::InvalidConfig(format!("human label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceInstance {
    pub image_id: String,
    pub score_1: f64,
    pub score_2: f64,
    pub human: HumanLabel,
    #[serde(default)]
    pub difficulty_level: Option<i64>,
}

/// Tie when `|score_1 - score_2| <= eps_tie`, otherwise the higher score.
pub fn predict_preference(score_1: f64, score_2: f64, eps_tie: f64) -> HumanLabel {
    let delta = score_1 - score_2;
    if delta.abs() <= eps_tie {
        HumanLabel::Tie
    } else if delta > 0.0 {
        HumanLabel::First
    } else {
        HumanLabel::Second
    }
}

/// Share of instances whose predicted preference equals the human label,
/// overall and per difficulty level.
pub fn agreement(instances: &[PreferenceInstance], eps_tie: f64) -> Result<EvalResult> {
    if instances.is_empty() {
        return Err(MsdError::EmptyEval);
    }
    let mut levels: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    let mut hits = 0usize;
    for inst in instances {
        let ok = predict_preference(inst.score_1, inst.score_2, eps_tie) == inst.human;
        hits += ok as usize;
        if let Some(level) = inst.difficulty_level {
            let e = levels.entry(level).or_default();
            e.0 += 1;
            e.1 += ok as usize;
        }
    }
    let mut out = EvalResult::new(
        "agreement",
        instances.len(),
        hits as f64 / instances.len() as f64,
    );
    out.per_bucket = levels
        .into_iter()
        .map(|(level, (n, h))| Bucket {
            label: format!("level{level}"),
            n,
            estimate: h as f64 / n as f64,
        })
        .collect();
    Ok(out)
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn check_pair_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MsdError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(MsdError::DegenerateRanks);
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(a) || constant(b) {
        return Err(MsdError::DegenerateRanks);
    }
    Ok(())
}

/// Spearman's rho. Without ties this is `1 - 6 Σ d² / (M (M² - 1))`; with
/// ties, Pearson correlation of average ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair_lengths(a, b)?;
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let m = a.len() as f64;
    let distinct = |r: &[f64]| {
        r.iter().all(|x| x.fract() == 0.0) && {
            let set: BTreeSet<u64> = r.iter().map(|x| *x as u64).collect();
            set.len() == r.len()
        }
    };
    if distinct(&ra) && distinct(&rb) {
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok(1.0 - 6.0 * d2 / (m * (m * m - 1.0)));
    }
    let mean = (m + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Kendall's tau-a: `(n_c - n_d) / C(M, 2)`; tied pairs count for neither.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair_lengths(a, b)?;
    let m = a.len();
    let (mut nc, mut nd) = (0i64, 0i64);
    for i in 0..m {
        for j in i + 1..m {
            let s = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            if a[i] == a[j] || b[i] == b[j] {
                continue;
            }
            if s > 0.0 {
                nc += 1;
            } else {
                nd += 1;
            }
        }
    }
    Ok((nc - nd) as f64 / (m * (m - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    /// Mean of the bucketing key (cosine margin or caption length).
    pub mean_key: f64,
    /// Mean Soft-MSD uncertainty of the bucket.
    pub mean_u: f64,
}

/// Bucketed accuracies: `metrics[m].per_bucket[b]` pairs with `bins[b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketTable {
    pub key: String,
    pub bins: Vec<BinSummary>,
    pub metrics: Vec<EvalResult>,
}

fn build_table(
    key: &str,
    instances: &[PairwiseInstance],
    groups: Vec<(String, f64, f64, Vec<usize>)>,
    key_of: impl Fn(&PairwiseInstance) -> f64,
    selectors: &[Selector],
) -> BucketTable {
    let groups: Vec<_> = groups.into_iter().filter(|g| !g.3.is_empty()).collect();
    let bins = groups
        .iter()
        .map(|(label, lo, hi, idx)| {
            let n = idx.len() as f64;
            BinSummary {
                label: label.clone(),
                lo: *lo,
                hi: *hi,
                n: idx.len(),
                mean_key: idx.iter().map(|&i| key_of(&instances[i])).sum::<f64>() / n,
                mean_u: idx.iter().map(|&i| instances[i].pos.u).sum::<f64>() / n,
            }
        })
        .collect();
    let metrics = selectors
        .iter()
        .map(|sel| {
            let (n, overall) = accuracy(instances, sel);
            let mut r = EvalResult::new(sel.name(), n, overall);
            r.per_bucket = groups
                .iter()
                .map(|(label, _, _, idx)| {
                    let (n, acc) = accuracy(idx.iter().map(|&i| &instances[i]), sel);
                    Bucket {
                        label: label.clone(),
                        n,
                        estimate: acc,
                    }
                })
                .collect();
            r
        })
        .collect();
    BucketTable {
        key: key.to_string(),
        bins,
        metrics,
    }
}

/// Equal-count quantile bins over the cosine margin. Instances are ordered by
/// (margin, image id, input index); runs of equal margins straddling a cut
/// stay in the lower bin.
pub fn margin_buckets(
    instances: &[PairwiseInstance],
    n_bins: usize,
    selectors: &[Selector],
) -> Result<BucketTable> {
    if instances.is_empty() {
        return Err(MsdError::EmptyEval);
    }
    if n_bins == 0 {
        return Err(MsdError::InvalidConfig("n_bins must be >= 1".into()));
    }
    let n = instances.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        instances[a]
            .cosine_margin()
            .total_cmp(&instances[b].cosine_margin())
            .then_with(|| instances[a].image_id.cmp(&instances[b].image_id))
            .then(a.cmp(&b))
    });
    let margin = |pos: usize| instances[order[pos]].cosine_margin();
    let mut cuts = vec![0usize];
    for b in 1..n_bins {
        let mut c = (b * n / n_bins).max(*cuts.last().unwrap());
        while c > 0 && c < n && margin(c) == margin(c - 1) {
            c += 1;
        }
        cuts.push(c);
    }
    cuts.push(n);
    let groups = cuts
        .windows(2)
        .enumerate()
        .map(|(b, w)| {
            let idx: Vec<usize> = order[w[0]..w[1]].to_vec();
            let (lo, hi) = if idx.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (margin(w[0]), margin(w[1] - 1))
            };
            (format!("q{b}"), lo, hi, idx)
        })
        .collect();
    Ok(build_table(
        "cosine_margin",
        instances,
        groups,
        PairwiseInstance::cosine_margin,
        selectors,
    ))
}

/// Buckets by positive-caption token length. `edges` split the line into
/// `[0, e0), [e0, e1), ..., [e_last, inf)`; empty buckets are dropped.
pub fn length_buckets(
    instances: &[PairwiseInstance],
    edges: &[usize],
    selectors: &[Selector],
) -> Result<BucketTable> {
    if instances.is_empty() {
        return Err(MsdError::EmptyEval);
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MsdError::InvalidConfig(
            "length edges must be strictly increasing".into(),
        ));
    }
    let mut bounds = vec![0usize];
    bounds.extend(edges.iter().copied().filter(|&e| e > 0));
    let mut groups: Vec<(String, f64, f64, Vec<usize>)> = bounds
        .iter()
        .enumerate()
        .map(|(i, &lo)| {
            let hi = bounds.get(i + 1).copied();
            let label = match hi {
                Some(hi) => format!("[{lo},{hi})"),
                None => format!("[{lo},inf)"),
            };
            (
                label,
                lo as f64,
                hi.map_or(f64::INFINITY, |h| h as f64),
                Vec::new(),
            )
        })
        .collect();
    for (i, inst) in instances.iter().enumerate() {
        let len = inst.pos.caption_length;
        let slot = bounds.partition_point(|&b| b <= len) - 1;
        groups[slot].3.push(i);
    }
    Ok(build_table(
        "caption_length",
        instances,
        groups,
        |i| i.pos.caption_length as f64,
        selectors,
    ))
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile 95% interval of `statistic` under resampling whole clusters
/// with replacement. Resample `r` draws from `seed.derive_index(r)`.
pub fn cluster_bootstrap_ci<T, K, S>(
    items: &[T],
    cluster_of: K,
    statistic: S,
    b: usize,
    seed: RngState,
) -> Result<(f64, f64)>
where
    T: Sync,
    K: Fn(&T) -> &str,
    S: Fn(&[&T]) -> f64 + Sync,
{
    if b < 100 {
        return Err(MsdError::InvalidConfig(format!(
            "bootstrap needs b >= 100, got {b}"
        )));
    }
    let mut clusters: BTreeMap<&str, Vec<&T>> = BTreeMap::new();
    for item in items {
        clusters.entry(cluster_of(item)).or_default().push(item);
    }
    if clusters.len() < 2 {
        return Err(MsdError::TooFewClusters(clusters.len()));
    }
    let clusters: Vec<Vec<&T>> = clusters.into_values().collect();
    let resample = |r: usize| {
        let mut rng = seed.derive_index(r as u64).rng();
        let mut sample: Vec<&T> = Vec::with_capacity(items.len());
        for _ in 0..clusters.len() {
            sample.extend_from_slice(&clusters[rng.gen_range(0..clusters.len())]);
        }
        statistic(&sample)
    };
    #[cfg(feature = "parallel")]
    let mut stats: Vec<f64> = {
        use rayon::prelude::*;
        (0..b).into_par_iter().map(resample).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let mut stats: Vec<f64> = (0..b).map(resample).collect();
    stats.sort_by(f64::total_cmp);
    Ok((
        quantile_sorted(&stats, 0.025),
        quantile_sorted(&stats, 0.975),
    ))
}

/// Image-level bootstrap CI of a selector's pairwise accuracy.
pub fn accuracy_ci(
    instances: &[PairwiseInstance],
    selector: &Selector,
    b: usize,
    seed: RngState,
) -> Result<(f64, f64)> {
    cluster_bootstrap_ci(
        instances,
        |i| i.image_id.as_str(),
        |s| accuracy(s.iter().copied(), selector).1,
        b,
        seed,
    )
}

/// Image-level bootstrap CI of `acc(a) - acc(b)`.
pub fn accuracy_gain_ci(
    instances: &[PairwiseInstance],
    a: &Selector,
    b_sel: &Selector,
    b: usize,
    seed: RngState,
) -> Result<(f64, f64)> {
    cluster_bootstrap_ci(
        instances,
        |i| i.image_id.as_str(),
        |s| accuracy(s.iter().copied(), a).1 - accuracy(s.iter().copied(), b_sel).1,
        b,
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// First method right, second wrong.
    pub b: usize,
    /// First method wrong, second right.
    pub c: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sided McNemar test with Edwards' continuity correction,
/// `(|b - c| - 1)² / (b + c)` against chi-square with one degree of freedom.
pub fn mcnemar_test(paired_correctness: &[(bool, bool)]) -> McNemar {
    let b = paired_correctness.iter().filter(|(x, y)| *x && !*y).count();
    let c = paired_correctness.iter().filter(|(x, y)| !*x && *y).count();
    if b + c == 0 {
        return McNemar {
            b,
            c,
            statistic: 0.0,
            p_value: 1.0,
        };
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let statistic = diff * diff / (b + c) as f64;
    McNemar {
        b,
        c,
        statistic,
        p_value: chi2_1_sf(statistic),
    }
}

/// Upper tail of chi-square(1): `P(X > x) = erfc(sqrt(x / 2))`.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    libm::erfc((x / 2.0).sqrt()).clamp(0.0, 1.0)
}

/// Per-instance correctness of two selectors, for [`mcnemar_test`].
pub fn paired_correctness(
    instances: &[PairwiseInstance],
    a: &Selector,
    b: &Selector,
) -> Vec<(bool, bool)> {
    instances
        .iter()
        .map(|i| (a.correct(i), b.correct(i)))
        .collect()
}

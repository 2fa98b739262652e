//! Subcommand bodies. Each reads its inputs, computes in manifest order and
//! writes every output with an atomic rename.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use msd_core::divergence::{attribution_maps, mask_and_rescore, AttributionBundle, MaskMode};
use msd_core::eval::{
    accuracy_ci, accuracy_gain_ci, agreement, kendall_tau, length_buckets, margin_buckets,
    mcnemar_test, paired_correctness, pairwise_accuracy, predict_preference, spearman_rho,
    EvalResult, HumanLabel, McNemar, PreferenceInstance, ScoreField, Selector,
};
use msd_core::io::{
    atomic_write, eval_csv, grid_csv, grid_pgm, load_record, pairwise_instances, read_container,
    read_manifest, read_scores, write_container, write_eval_csv, write_eval_json, write_manifest,
    write_scores, CandidateEntry, HumanAnnotation, ManifestRecord, ScoreLine,
};
use msd_core::scoring::candidate_em;
use msd_core::synth::PairDatasetSpec;
use msd_core::vmf::{
    hard_assignments, kappa_hat, mean_pairwise_ari, mean_responsibility_entropy,
    mean_resultant_length,
};
use msd_core::{
    bi_kl, em_fit, soft_msd_batch, EmConfig, EmbeddingSet, MsdError, PipelineConfig, RngState,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::config::Settings;

type Result<T> = anyhow::Result<T>;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    atomic_write(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    read_manifest(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn meta_str(meta: &BTreeMap<String, Value>, key: &str) -> Option<String> {
    meta.get(key).and_then(Value::as_str).map(str::to_string)
}

fn role_of(record: &ManifestRecord, cand_id: &str) -> &'static str {
    if cand_id == record.positive_id() {
        "pos"
    } else {
        "neg"
    }
}

fn score_record(
    settings: &Settings,
    record: &ManifestRecord,
) -> Result<(Vec<ScoreLine>, Vec<String>)> {
    let loaded = load_record(record).with_context(|| format!("loading record `{}`", record.id))?;
    let cfg = settings.pipeline.for_sample(&record.id);
    let scored = soft_msd_batch(
        &loaded.image,
        &loaded.candidates,
        &cfg.fusion,
        &cfg.em_img,
        &cfg.em_txt,
    )
    .with_context(|| format!("scoring record `{}`", record.id))?;
    let fingerprint = settings.pipeline.fingerprint();
    let lines = scored
        .into_iter()
        .zip(&record.candidates)
        .map(|((rec, report), entry)| ScoreLine {
            fingerprint: fingerprint.clone(),
            sample_id: record.id.clone(),
            role: role_of(record, &entry.cand_id).to_string(),
            model: meta_str(&entry.meta, "model"),
            bikl: report.weighted,
            record: rec,
        })
        .collect();
    Ok((lines, loaded.warnings))
}

/// Scores every record; results keep manifest order whatever the thread count.
pub fn score(settings: &Settings, manifest: &Path, out: &Path) -> Result<()> {
    let records = load_manifest(manifest)?;
    let results = records
        .par_iter()
        .map(|r| score_record(settings, r))
        .collect::<Result<Vec<_>>>()?;
    let mut lines = Vec::new();
    for (l, warnings) in results {
        for w in warnings {
            eprintln!("warning: {w}");
        }
        lines.extend(l);
    }
    write_scores(&lines, out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!(
        "scored {} captions of {} records",
        lines.len(),
        records.len()
    );
    Ok(())
}

pub struct PairwiseOptions {
    pub scores: PathBuf,
    pub out_dir: PathBuf,
    pub metric: String,
    pub baseline: String,
    pub bins: usize,
    pub length_edges: Vec<usize>,
    pub bootstrap: usize,
    pub tau_r: f64,
}

#[derive(Serialize)]
struct Comparison {
    metric: String,
    baseline: String,
    n: usize,
    gain: f64,
    gain_ci: Option<(f64, f64)>,
    mcnemar: McNemar,
}

/// Interval, or `None` with a warning when fewer than two images are present.
fn optional_ci(ci: msd_core::Result<(f64, f64)>) -> Result<Option<(f64, f64)>> {
    match ci {
        Ok(ci) => Ok(Some(ci)),
        Err(MsdError::TooFewClusters(n)) => {
            eprintln!("warning: {n} image(s); bootstrap interval skipped");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

pub fn pairwise(settings: &Settings, o: &PairwiseOptions) -> Result<()> {
    let metric = Selector::Field(o.metric.parse::<ScoreField>()?);
    let baseline = Selector::Field(o.baseline.parse::<ScoreField>()?);
    if !(o.tau_r >= 0.0 && o.tau_r.is_finite()) {
        return Err(MsdError::OutOfRange {
            what: "tau_r",
            value: o.tau_r,
        }
        .into());
    }
    if o.bootstrap != 0 && o.bootstrap < 100 {
        return Err(MsdError::InvalidConfig(format!(
            "bootstrap must be 0 or >= 100, got {}",
            o.bootstrap
        ))
        .into());
    }
    let lines =
        read_scores(&o.scores).with_context(|| format!("reading {}", o.scores.display()))?;
    let instances = pairwise_instances(&lines)?;
    if instances.is_empty() {
        return Err(MsdError::EmptyEval)
            .context("no sample has both a positive and a negative caption");
    }
    let mut selectors: Vec<Selector> = ScoreField::ALL.into_iter().map(Selector::Field).collect();
    selectors.push(Selector::RankAgg { tau_r: o.tau_r });
    let seed = RngState::new(settings.seed).derive("pairwise");
    let mut results = Vec::new();
    for sel in &selectors {
        let mut r = pairwise_accuracy(&instances, sel)?;
        if o.bootstrap > 0 {
            if let Some(ci) = optional_ci(accuracy_ci(&instances, sel, o.bootstrap, seed))? {
                r = r.with_ci(ci);
            }
        }
        results.push(r);
    }
    let mc = mcnemar_test(&paired_correctness(&instances, &metric, &baseline));
    let acc = |s: &Selector| pairwise_accuracy(&instances, s).map(|r| r.point_estimate);
    let gain_ci = if o.bootstrap > 0 {
        optional_ci(accuracy_gain_ci(
            &instances,
            &metric,
            &baseline,
            o.bootstrap,
            seed,
        ))?
    } else {
        None
    };
    let comparison = Comparison {
        metric: metric.name(),
        baseline: baseline.name(),
        n: instances.len(),
        gain: acc(&metric)? - acc(&baseline)?,
        gain_ci,
        mcnemar: mc,
    };
    let mut gain = EvalResult::new(
        format!("gain({} - {})", comparison.metric, comparison.baseline),
        instances.len(),
        comparison.gain,
    );
    if let Some(ci) = gain_ci {
        gain = gain.with_ci(ci);
    }
    gain.p_value = Some(mc.p_value);
    results.push(gain);

    let margins = margin_buckets(&instances, o.bins, &selectors)?;
    let lengths = length_buckets(&instances, &o.length_edges, &selectors)?;

    ensure_dir(&o.out_dir)?;
    write_eval_json(&results, &o.out_dir.join("pairwise.json"))?;
    write_eval_csv(&results, &o.out_dir.join("pairwise.csv"))?;
    write_json(&comparison, &o.out_dir.join("comparison.json"))?;
    write_json(&margins, &o.out_dir.join("margin_buckets.json"))?;
    write_json(&lengths, &o.out_dir.join("length_buckets.json"))?;
    for r in &results {
        eprintln!("{:<24} n={:<6} acc={:.4}", r.metric, r.n, r.point_estimate);
    }
    Ok(())
}

#[derive(Serialize)]
struct ModelRow {
    model: String,
    comparisons: usize,
    human_win_rate: f64,
    metric_win_rate: f64,
}

#[derive(Serialize)]
struct AgreeReport {
    field: String,
    eps_tie: f64,
    caption_level: Vec<EvalResult>,
    models: Vec<ModelRow>,
    spearman: Option<f64>,
    kendall: Option<f64>,
}

fn win_shares(label: HumanLabel) -> (f64, f64) {
    match label {
        HumanLabel::First => (1.0, 0.0),
        HumanLabel::Second => (0.0, 1.0),
        HumanLabel::Tie => (0.5, 0.5),
    }
}

/// Rank correlation, or `None` with a warning when it is undefined.
fn optional_corr(name: &str, v: msd_core::Result<f64>) -> Result<Option<f64>> {
    match v {
        Ok(x) => Ok(Some(x)),
        Err(MsdError::DegenerateRanks)
        | Err(MsdError::LengthMismatch { .. })
        | Err(MsdError::EmptyInput) => {
            eprintln!("warning: {name} undefined for these model win rates");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

pub fn agree(
    settings: &Settings,
    scores: &Path,
    labels: &Path,
    out_dir: &Path,
    field: &str,
) -> Result<()> {
    let field: ScoreField = field.parse()?;
    let lines = read_scores(scores).with_context(|| format!("reading {}", scores.display()))?;
    let records = load_manifest(labels)?;
    let by_key: BTreeMap<(&str, &str), &ScoreLine> = lines
        .iter()
        .map(|l| ((l.sample_id.as_str(), l.record.candidate_id.as_str()), l))
        .collect();

    let mut fields = vec![field];
    if field != ScoreField::Global {
        fields.push(ScoreField::Global);
    }
    let mut per_field: Vec<Vec<PreferenceInstance>> = vec![Vec::new(); fields.len()];
    let mut models: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for rec in &records {
        let Some(human) = &rec.human else { continue };
        if rec.candidates.len() < 2 {
            return Err(MsdError::InvalidConfig(format!(
                "record `{}` is labelled but has fewer than two candidates",
                rec.id
            ))
            .into());
        }
        let label: HumanLabel = human
            .label
            .parse()
            .with_context(|| format!("record `{}`", rec.id))?;
        let pair: Vec<(&CandidateEntry, &ScoreLine)> = rec.candidates[..2]
            .iter()
            .map(|c| {
                by_key
                    .get(&(rec.id.as_str(), c.cand_id.as_str()))
                    .map(|l| (c, *l))
                    .ok_or_else(|| {
                        MsdError::InvalidConfig(format!("no score for `{}/{}`", rec.id, c.cand_id))
                    })
            })
            .collect::<msd_core::Result<_>>()?;
        for (f, out) in fields.iter().zip(per_field.iter_mut()) {
            out.push(PreferenceInstance {
                image_id: rec.id.clone(),
                score_1: f.value(&pair[0].1.record),
                score_2: f.value(&pair[1].1.record),
                human: label,
                difficulty_level: human.difficulty_level,
            });
        }
        let predicted = predict_preference(
            field.value(&pair[0].1.record),
            field.value(&pair[1].1.record),
            settings.eps_tie,
        );
        let (h1, h2) = win_shares(label);
        let (p1, p2) = win_shares(predicted);
        for ((entry, line), h, p) in [(pair[0], h1, p1), (pair[1], h2, p2)] {
            let name = line
                .model
                .clone()
                .or_else(|| meta_str(&entry.meta, "model"))
                .unwrap_or_else(|| entry.cand_id.clone());
            let e = models.entry(name).or_default();
            e.0 += 1;
            e.1 += h;
            e.2 += p;
        }
    }
    if per_field[0].is_empty() {
        return Err(MsdError::EmptyEval).context("no labelled records");
    }
    let mut caption_level = Vec::new();
    for (f, inst) in fields.iter().zip(&per_field) {
        let mut r = agreement(inst, settings.eps_tie)?;
        r.metric = format!("agreement({})", f.name());
        caption_level.push(r);
    }
    let rows: Vec<ModelRow> = models
        .into_iter()
        .map(|(model, (n, h, p))| ModelRow {
            model,
            comparisons: n,
            human_win_rate: h / n as f64,
            metric_win_rate: p / n as f64,
        })
        .collect();
    let human: Vec<f64> = rows.iter().map(|r| r.human_win_rate).collect();
    let metric: Vec<f64> = rows.iter().map(|r| r.metric_win_rate).collect();
    let report = AgreeReport {
        field: field.name().to_string(),
        eps_tie: settings.eps_tie,
        spearman: optional_corr("spearman", spearman_rho(&human, &metric))?,
        kendall: optional_corr("kendall", kendall_tau(&human, &metric))?,
        caption_level,
        models: rows,
    };
    ensure_dir(out_dir)?;
    write_json(&report, &out_dir.join("agree.json"))?;
    write_text(&eval_csv(&report.caption_level), &out_dir.join("agree.csv"))?;
    let mut csv = String::from("model,comparisons,human_win_rate,metric_win_rate\n");
    for r in &report.models {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.model, r.comparisons, r.human_win_rate, r.metric_win_rate
        ));
    }
    write_text(&csv, &out_dir.join("models.csv"))?;
    for r in &report.caption_level {
        eprintln!("{:<28} n={:<6} {:.4}", r.metric, r.n, r.point_estimate);
    }
    Ok(())
}

/// Image and caption of one candidate with the config its scores used.
struct Probe {
    image: EmbeddingSet,
    caption: EmbeddingSet,
    cfg: PipelineConfig,
}

fn probe(settings: &Settings, record: &ManifestRecord, cand: &str) -> Result<Probe> {
    let entry = record
        .candidates
        .iter()
        .find(|c| c.cand_id == cand)
        .ok_or_else(|| {
            MsdError::InvalidConfig(format!("record `{}` has no candidate `{cand}`", record.id))
        })?;
    let image = read_container(&record.image_container)
        .with_context(|| format!("reading {}", record.image_container.display()))?;
    let caption = read_container(&entry.text_container)
        .with_context(|| format!("reading {}", entry.text_container.display()))?;
    let mut cfg = settings.pipeline.for_sample(&record.id);
    cfg.em_txt = candidate_em(&cfg.em_txt, cand);
    Ok(Probe {
        image,
        caption,
        cfg,
    })
}

fn maps(p: &Probe) -> Result<(msd_core::DivergenceReport, AttributionBundle)> {
    let (p_img, _) = em_fit(&p.image, &p.cfg.em_img)?;
    let (p_txt, _) = em_fit(&p.caption, &p.cfg.em_txt)?;
    let report = bi_kl(&p_img, &p_txt, &p.image, &p.caption, &p.cfg.fusion.beta)?;
    let grid = p.image.grid().unwrap_or((1, p.image.len()));
    let bundle = attribution_maps(&report, &p.image, &p.caption, p.cfg.em_img.kappa, grid)?;
    Ok((report, bundle))
}

#[derive(Serialize)]
struct MapFile {
    name: String,
    csv: String,
    pgm: String,
    /// Value written as PGM level 0.
    min: f64,
    /// Value written as PGM level 255; equal to `min` for a constant map,
    /// which is written as all zeros.
    max: f64,
}

#[derive(Serialize)]
struct AttributionSidecar {
    id: String,
    cand_id: String,
    fingerprint: String,
    rows: usize,
    cols: usize,
    kl_img_txt: f64,
    kl_txt_img: f64,
    beta: f64,
    bikl: f64,
    pgm_scaling: &'static str,
    maps: Vec<MapFile>,
    tokens_csv: String,
}

fn find_record<'a>(records: &'a [ManifestRecord], id: &str) -> Result<&'a ManifestRecord> {
    records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| MsdError::InvalidConfig(format!("no record `{id}` in manifest")).into())
}

pub fn attribute(
    settings: &Settings,
    manifest: &Path,
    id: &str,
    cand: &str,
    out_dir: &Path,
) -> Result<()> {
    let records = load_manifest(manifest)?;
    let p = probe(settings, find_record(&records, id)?, cand)?;
    let (report, bundle) = maps(&p)?;
    ensure_dir(out_dir)?;
    let support = bundle.support_map();
    let mut files = Vec::new();
    for (name, values) in [
        ("coverage", &bundle.coverage_map),
        ("penalty", &bundle.penalty_map),
        ("support", &support),
    ] {
        let csv = format!("{name}.csv");
        let pgm = format!("{name}.pgm");
        write_text(
            &grid_csv(bundle.rows, bundle.cols, values)?,
            &out_dir.join(&csv),
        )?;
        let bytes = grid_pgm(bundle.rows, bundle.cols, values)?;
        atomic_write(&out_dir.join(&pgm), &bytes)?;
        files.push(MapFile {
            name: name.to_string(),
            csv,
            pgm,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    let mut tokens = String::from("token,support_term\n");
    for (i, v) in bundle.token_scores.iter().enumerate() {
        tokens.push_str(&format!("{i},{v}\n"));
    }
    write_text(&tokens, &out_dir.join("tokens.csv"))?;
    let sidecar = AttributionSidecar {
        id: id.to_string(),
        cand_id: cand.to_string(),
        fingerprint: settings.pipeline.fingerprint(),
        rows: bundle.rows,
        cols: bundle.cols,
        kl_img_txt: report.kl_img_txt,
        kl_txt_img: report.kl_txt_img,
        beta: report.beta,
        bikl: report.weighted,
        pgm_scaling: "level = round(255 * (v - min) / (max - min))",
        maps: files,
        tokens_csv: "tokens.csv".to_string(),
    };
    write_json(&sidecar, &out_dir.join("attribution.json"))?;
    eprintln!(
        "wrote maps for {id}/{cand} ({}x{})",
        bundle.rows, bundle.cols
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ModeName {
    Top,
    Bottom,
    Random,
}

impl ModeName {
    fn parse(s: &str) -> msd_core::Result<Self> {
        match s {
            "top" => Ok(Self::Top),
            "bottom" => Ok(Self::Bottom),
            "random" => Ok(Self::Random),
            other => Err(MsdError::InvalidConfig(format!("mask mode `{other}`"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Top => "top",
            Self::Bottom => "bottom",
            Self::Random => "random",
        }
    }
}

struct MaskRow {
    id: String,
    cand_id: String,
    kind: String,
    mode: ModeName,
    removed: usize,
    original: f64,
    masked: f64,
}

#[derive(Serialize)]
struct MaskSummary {
    caption_type: String,
    mode: String,
    n: usize,
    mean_original: f64,
    mean_masked: f64,
    /// Mean of `masked - original`.
    mean_delta: f64,
}

/// Masks the patches ranked by `map` and reports `masked - original` Bi-KL.
/// Caption type is candidate field `type` if present, else the role.
pub fn mask_probe(
    settings: &Settings,
    manifest: &Path,
    fraction: f64,
    modes: &[String],
    map: &str,
    out_dir: &Path,
) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(MsdError::OutOfRange {
            what: "fraction",
            value: fraction,
        }
        .into());
    }
    let modes = modes
        .iter()
        .map(|m| ModeName::parse(m))
        .collect::<msd_core::Result<Vec<_>>>()?;
    if !["penalty", "coverage", "support"].contains(&map) {
        return Err(MsdError::InvalidConfig(format!("ranking map `{map}`")).into());
    }
    let records = load_manifest(manifest)?;
    let jobs: Vec<(&ManifestRecord, &CandidateEntry)> = records
        .iter()
        .flat_map(|r| r.candidates.iter().map(move |c| (r, c)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|(rec, entry)| -> Result<Vec<MaskRow>> {
            let p = probe(settings, rec, &entry.cand_id)?;
            let (_, bundle) = maps(&p)?;
            let rank = match map {
                "coverage" => bundle.coverage_map.clone(),
                "support" => bundle.support_map(),
                _ => bundle.penalty_map.clone(),
            };
            let kind = meta_str(&entry.meta, "type")
                .unwrap_or_else(|| role_of(rec, &entry.cand_id).to_string());
            modes
                .iter()
                .map(|&mode| {
                    let mm = match mode {
                        ModeName::Top => MaskMode::Top,
                        ModeName::Bottom => MaskMode::Bottom,
                        ModeName::Random => MaskMode::Random(
                            RngState::new(settings.seed)
                                .derive(&format!("{}/{}/mask", rec.id, entry.cand_id))
                                .seed,
                        ),
                    };
                    let o = mask_and_rescore(&p.image, &p.caption, &rank, fraction, mm, &p.cfg)
                        .with_context(|| format!("masking {}/{}", rec.id, entry.cand_id))?;
                    Ok(MaskRow {
                        id: rec.id.clone(),
                        cand_id: entry.cand_id.clone(),
                        kind: kind.clone(),
                        mode,
                        removed: o.removed,
                        original: o.original,
                        masked: o.masked,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();

    let mut csv = String::from("id,cand_id,caption_type,mode,removed,original,masked,delta\n");
    let mut groups: BTreeMap<(String, usize), (String, ModeName, Vec<&MaskRow>)> = BTreeMap::new();
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.id,
            r.cand_id,
            r.kind,
            r.mode.name(),
            r.removed,
            r.original,
            r.masked,
            r.masked - r.original
        ));
        let mode_pos = modes.iter().position(|m| *m == r.mode).unwrap_or(0);
        groups
            .entry((r.kind.clone(), mode_pos))
            .or_insert_with(|| (r.kind.clone(), r.mode, Vec::new()))
            .2
            .push(r);
    }
    let summary: Vec<MaskSummary> = groups
        .into_values()
        .map(|(kind, mode, rs)| {
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&MaskRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            MaskSummary {
                caption_type: kind,
                mode: mode.name().to_string(),
                n: rs.len(),
                mean_original: mean(&|r| r.original),
                mean_masked: mean(&|r| r.masked),
                mean_delta: mean(&|r| r.masked - r.original),
            }
        })
        .collect();
    ensure_dir(out_dir)?;
    write_text(&csv, &out_dir.join("mask_probe.csv"))?;
    write_json(&summary, &out_dir.join("mask_summary.json"))?;
    for s in &summary {
        eprintln!(
            "{:<12} {:<7} n={:<5} delta={:+.4}",
            s.caption_type, s.mode, s.n, s.mean_delta
        );
    }
    Ok(())
}

/// Writes `img_<i>.msde`, `txt_<i>_pos.msde`, `txt_<i>_neg.msde` and
/// `manifest.jsonl` with paths relative to `out_dir`.
pub fn synth(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: PairDatasetSpec = serde_json::from_str(&text).map_err(|e| MsdError::Parse {
        path: spec_path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    spec.validate()?;
    ensure_dir(out_dir)?;
    let change = serde_json::to_value(&spec.change)?;
    let records = (0..spec.n_pairs)
        .into_par_iter()
        .map(|i| -> Result<ManifestRecord> {
            let pair = spec.pair(i)?;
            let img = format!("img_{i}.msde");
            let pos = format!("txt_{i}_pos.msde");
            let neg = format!("txt_{i}_neg.msde");
            write_container(&pair.img, &out_dir.join(&img))?;
            write_container(&pair.txt_pos, &out_dir.join(&pos))?;
            write_container(&pair.txt_neg, &out_dir.join(&neg))?;
            let cand = |id: &str, path: String, n: usize, kind: &str| CandidateEntry {
                cand_id: id.to_string(),
                text_container: PathBuf::from(path),
                n_tokens: Some(n),
                raw_text: None,
                meta: BTreeMap::from([("type".to_string(), Value::from(kind))]),
            };
            let mut meta = BTreeMap::new();
            meta.insert("positive".to_string(), Value::from("pos"));
            meta.insert("pair_index".to_string(), Value::from(i));
            meta.insert("change".to_string(), change.clone());
            Ok(ManifestRecord {
                id: format!("pair{i}"),
                image_container: PathBuf::from(img),
                candidates: vec![
                    cand("pos", pos, pair.txt_pos.len(), "faithful"),
                    cand("neg", neg, pair.txt_neg.len(), "planted"),
                ],
                human: None::<HumanAnnotation>,
                meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&records, &out_dir.join("manifest.jsonl"))?;
    eprintln!(
        "wrote {} planted pairs to {}",
        records.len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SeedRun {
    seed_index: usize,
    final_log_likelihood: f64,
    mean_entropy: f64,
    reinit_events: usize,
    component_sizes: Vec<usize>,
}

#[derive(Serialize)]
struct KappaReport {
    kappa: f64,
    mean_pairwise_ari: f64,
    mean_entropy: f64,
    runs: Vec<SeedRun>,
}

#[derive(Serialize)]
struct EmDiagReport {
    container: String,
    n: usize,
    dim: usize,
    k: usize,
    iterations: usize,
    seeds: usize,
    mean_resultant_length: f64,
    /// Single-component concentration estimate, for reference.
    kappa_hat: Option<f64>,
    sweeps: Vec<KappaReport>,
}

/// Fits `k` components under `seeds` derived seeds per concentration.
pub fn em_diag(
    settings: &Settings,
    container: &Path,
    k: usize,
    seeds: usize,
    kappas: &[f64],
    out: &Path,
) -> Result<()> {
    if seeds < 2 {
        return Err(MsdError::InvalidConfig(format!(
            "seed stability needs >= 2 seeds, got {seeds}"
        ))
        .into());
    }
    let data =
        read_container(container).with_context(|| format!("reading {}", container.display()))?;
    let base = &settings.pipeline.em_img;
    let kappas = if kappas.is_empty() {
        vec![base.kappa]
    } else {
        kappas.to_vec()
    };
    let root = RngState::new(settings.seed).derive("em-diag");
    let mut sweeps = Vec::new();
    for &kappa in &kappas {
        let fits = (0..seeds)
            .into_par_iter()
            .map(|s| -> Result<(Vec<usize>, SeedRun)> {
                let mut cfg = EmConfig::new(k)
                    .with_kappa(kappa)
                    .with_iterations(base.iterations)
                    .with_seed(root.derive_index(s as u64));
                cfg.reinit_threshold = base.reinit_threshold;
                let (_, trace) = em_fit(&data, &cfg)?;
                let labels = hard_assignments(&trace.responsibilities);
                let mut sizes = vec![0usize; k];
                for &l in &labels {
                    sizes[l] += 1;
                }
                let run = SeedRun {
                    seed_index: s,
                    final_log_likelihood: *trace.log_likelihood.last().unwrap_or(&f64::NAN),
                    mean_entropy: mean_responsibility_entropy(&trace.responsibilities)?,
                    reinit_events: trace.reinit_events.len(),
                    component_sizes: sizes,
                };
                Ok((labels, run))
            })
            .collect::<Result<Vec<_>>>()?;
        let (labelings, runs): (Vec<_>, Vec<_>) = fits.into_iter().unzip();
        sweeps.push(KappaReport {
            kappa,
            mean_pairwise_ari: mean_pairwise_ari(&labelings)?,
            mean_entropy: runs.iter().map(|r| r.mean_entropy).sum::<f64>() / runs.len() as f64,
            runs,
        });
    }
    let r_bar = mean_resultant_length(&data);
    let report = EmDiagReport {
        container: container.display().to_string(),
        n: data.len(),
        dim: data.dim(),
        k,
        iterations: base.iterations,
        seeds,
        mean_resultant_length: r_bar,
        kappa_hat: kappa_hat(r_bar, data.dim()).ok(),
        sweeps,
    };
    write_json(&report, out)?;
    for s in &report.sweeps {
        eprintln!(
            "kappa={:<8} ari={:.4} entropy={:.4}",
            s.kappa, s.mean_pairwise_ari, s.mean_entropy
        );
    }
    Ok(())
}

//! On-disk formats: the MSDE embedding container, JSONL manifests and score
//! files, evaluation tables and heatmap exports.
//!
//! Every writer goes through a temporary file in the target directory and
//! an atomic rename, so readers never observe a partial file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{MsdError, Result};
use crate::eval::{EvalResult, PairwiseInstance};
use crate::scoring::ScoreRecord;
use crate::sphere::{EmbeddingSet, Modality, UnitVector};

pub const MAGIC: [u8; 4] = *b"MSDE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;
/// Rows below this norm are rejected on load.
pub const MIN_ROW_NORM: f64 = 1e-6;

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| MsdError::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Decoded header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub dim: u32,
    pub count: u32,
    pub modality: Modality,
    pub grid_rows: u16,
    pub grid_cols: u16,
}

impl ContainerHeader {
    pub fn payload_len(&self) -> usize {
        4 * self.count as usize * self.dim as usize
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<ContainerHeader> {
    if bytes.len() < 4 {
        return Err(MsdError::BadHeader(format!(
            "{} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(MsdError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(MsdError::BadHeader(format!(
            "{} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(MsdError::VersionUnsupported(version));
    }
    let dim = u32_at(8);
    let count = u32_at(12);
    if dim < 2 {
        return Err(MsdError::BadHeader(format!("dim = {dim}")));
    }
    if count == 0 {
        return Err(MsdError::BadHeader("count = 0".into()));
    }
    let modality = match bytes[16] {
        0 => Modality::Image,
        1 => Modality::Text,
        m => return Err(MsdError::BadHeader(format!("modality byte {m}"))),
    };
    let (grid_rows, grid_cols) = (u16_at(17), u16_at(19));
    let cells = grid_rows as usize * grid_cols as usize;
    if cells != 0 && cells != count as usize {
        return Err(MsdError::GridMismatch {
            rows: grid_rows as usize,
            cols: grid_cols as usize,
            count: count as usize,
        });
    }
    if (grid_rows == 0) != (grid_cols == 0) {
        return Err(MsdError::BadHeader(format!("grid {grid_rows}x{grid_cols}")));
    }
    Ok(ContainerHeader {
        dim,
        count,
        modality,
        grid_rows,
        grid_cols,
    })
}

/// Parses a container, renormalizing every row in f64.
pub fn decode_container(bytes: &[u8]) -> Result<EmbeddingSet> {
    let h = parse_header(bytes)?;
    let expected = HEADER_LEN + h.payload_len();
    if bytes.len() < expected {
        return Err(MsdError::TruncatedPayload {
            offset: bytes.len(),
            expected,
        });
    }
    if bytes.len() > expected {
        return Err(MsdError::BadHeader(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let dim = h.dim as usize;
    let mut vectors = Vec::with_capacity(h.count as usize);
    for (row, chunk) in bytes[HEADER_LEN..].chunks_exact(4 * dim).enumerate() {
        let v: Vec<f64> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm >= MIN_ROW_NORM) || !norm.is_finite() {
            return Err(MsdError::DegenerateRow { row });
        }
        vectors.push(UnitVector::new(v)?);
    }
    let set = EmbeddingSet::new(vectors, h.modality)?;
    if h.grid_rows != 0 {
        set.with_grid(h.grid_rows as usize, h.grid_cols as usize)
    } else {
        Ok(set)
    }
}

/// Reads an f32 row the way [`decode_container`] does and quantizes it again.
fn requantize(q: &[f32]) -> Option<Vec<f32>> {
    let v: Vec<f64> = q.iter().map(|&x| x as f64).collect();
    let u = UnitVector::new(v).ok()?;
    Some(u.as_slice().iter().map(|&x| x as f32).collect())
}

/// Follows `requantize` for at most eight passes; `Some` at a fixed point.
fn settle(mut q: Vec<f32>) -> Option<Vec<f32>> {
    for _ in 0..8 {
        let next = requantize(&q)?;
        if next == q {
            return Some(q);
        }
        q = next;
    }
    None
}

/// `x` moved by `steps` ulps in magnitude.
fn nudge(x: f32, steps: i32) -> f32 {
    f32::from_bits(x.to_bits().wrapping_add_signed(steps))
}

/// A quantization of `row` that decoding and re-encoding maps to itself.
/// When plain iteration cycles, the largest components are nudged by one
/// or two ulps, in a fixed order, until a fixed point is reached.
fn canonical_row(row: &[f64]) -> Vec<f32> {
    let q0: Vec<f32> = row.iter().map(|&x| x as f32).collect();
    if let Some(q) = settle(q0.clone()) {
        return q;
    }
    let mut order: Vec<usize> = (0..q0.len()).collect();
    order.sort_by(|&a, &b| q0[b].abs().total_cmp(&q0[a].abs()).then(a.cmp(&b)));
    for &i in order.iter().take(4) {
        for steps in [1, -1, 2, -2] {
            let mut q = q0.clone();
            q[i] = nudge(q[i], steps);
            if let Some(q) = settle(q) {
                return q;
            }
        }
    }
    q0
}

pub fn encode_container(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let dim =
        u32::try_from(set.dim()).map_err(|_| MsdError::BadHeader("dim overflows u32".into()))?;
    let count =
        u32::try_from(set.len()).map_err(|_| MsdError::BadHeader("count overflows u32".into()))?;
    let (gr, gc) = match set.grid() {
        Some((r, c)) => (
            u16::try_from(r).map_err(|_| MsdError::BadHeader("grid rows overflow u16".into()))?,
            u16::try_from(c).map_err(|_| MsdError::BadHeader("grid cols overflow u16".into()))?,
        ),
        None => (0, 0),
    };
    let q: Vec<Vec<f32>> = set.iter().map(|v| canonical_row(v.as_slice())).collect();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * set.len() * set.dim());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.push(match set.modality() {
        Modality::Image => 0,
        Modality::Text => 1,
    });
    out.extend_from_slice(&gr.to_le_bytes());
    out.extend_from_slice(&gc.to_le_bytes());
    for row in &q {
        for x in row {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_container(path: &Path) -> Result<EmbeddingSet> {
    decode_container(&fs::read(path)?)
}

pub fn write_container(set: &EmbeddingSet, path: &Path) -> Result<()> {
    atomic_write(path, &encode_container(set)?)
}

/// One caption in a manifest record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub cand_id: String,
    pub text_container: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    /// Fields not listed above, e.g. `"model"`.
    #[serde(flatten)]
    pub meta: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanAnnotation {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_level: Option<i64>,
}

/// One manifest line. After [`read_manifest`], container paths are resolved
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_container: PathBuf,
    pub candidates: Vec<CandidateEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human: Option<HumanAnnotation>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    image_container: PathBuf,
    candidates: Vec<CandidateEntry>,
    #[serde(default)]
    human: Option<HumanAnnotation>,
    #[serde(default)]
    meta: BTreeMap<String, Value>,
    #[serde(flatten)]
    unknown: BTreeMap<String, Value>,
}

impl ManifestRecord {
    /// Candidate id treated as the faithful caption in pairwise evaluation:
    /// `meta.positive` if present, else `"pos"`.
    pub fn positive_id(&self) -> &str {
        self.meta
            .get("positive")
            .and_then(Value::as_str)
            .unwrap_or("pos")
    }
}

/// Parses JSONL from `text`; `base` resolves relative container paths and
/// `origin` labels errors.
pub fn parse_manifest(text: &str, base: &Path, origin: &str) -> Result<Vec<ManifestRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| MsdError::Parse {
            path: origin.to_string(),
            line: line_no,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if raw.candidates.is_empty() {
            return Err(parse_err(format!("record `{}` has no candidates", raw.id)));
        }
        if !seen.insert(raw.id.clone()) {
            return Err(MsdError::DuplicateId(raw.id));
        }
        let mut cand_ids = HashSet::new();
        for c in &raw.candidates {
            if !cand_ids.insert(c.cand_id.as_str()) {
                return Err(MsdError::DuplicateId(format!("{}/{}", raw.id, c.cand_id)));
            }
        }
        let resolve = |p: &Path| -> Result<PathBuf> {
            let full = base.join(p);
            if !full.is_file() {
                return Err(MsdError::MissingPath(full));
            }
            Ok(full)
        };
        let mut meta = raw.meta;
        meta.extend(raw.unknown);
        let candidates = raw
            .candidates
            .into_iter()
            .map(|mut c| {
                c.text_container = resolve(&c.text_container)?;
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ManifestRecord {
            id: raw.id,
            image_container: resolve(&raw.image_container)?,
            candidates,
            human: raw.human,
            meta,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, &path.display().to_string())
}

/// Writes records as given; paths should be relative to the manifest.
pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    atomic_write(path, buf.as_bytes())
}

/// Containers of one record, loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub image: EmbeddingSet,
    pub candidates: Vec<(String, EmbeddingSet)>,
    /// Non-fatal inconsistencies, e.g. an `n_tokens` that disagrees with the
    /// container row count (the container wins).
    pub warnings: Vec<String>,
}

pub fn load_record(record: &ManifestRecord) -> Result<LoadedRecord> {
    let image = read_container(&record.image_container)?;
    let mut warnings = Vec::new();
    let mut candidates = Vec::with_capacity(record.candidates.len());
    for c in &record.candidates {
        let txt = read_container(&c.text_container)?;
        if let Some(n) = c.n_tokens {
            if n != txt.len() {
                warnings.push(format!(
                    "{}/{}: n_tokens = {n} but container holds {} rows; using {}",
                    record.id,
                    c.cand_id,
                    txt.len(),
                    txt.len()
                ));
            }
        }
        candidates.push((c.cand_id.clone(), txt));
    }
    Ok(LoadedRecord {
        image,
        candidates,
        warnings,
    })
}

/// One score-file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub fingerprint: String,
    pub sample_id: String,
    /// `"pos"` for the faithful caption, `"neg"` otherwise.
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// `beta KL(img||txt) + (1 - beta) KL(txt||img)`.
    pub bikl: f64,
    #[serde(flatten)]
    pub record: ScoreRecord,
}

pub fn encode_scores(lines: &[ScoreLine]) -> Result<String> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a score file and rejects mixed fingerprints.
pub fn parse_scores(text: &str, origin: &str) -> Result<Vec<ScoreLine>> {
    let mut out: Vec<ScoreLine> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ScoreLine = serde_json::from_str(line).map_err(|e| MsdError::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(first) = out.first() {
            if first.fingerprint != parsed.fingerprint {
                return Err(MsdError::FingerprintMismatch(
                    first.fingerprint.clone(),
                    parsed.fingerprint,
                ));
            }
        }
        out.push(parsed);
    }
    Ok(out)
}

pub fn write_scores(lines: &[ScoreLine], path: &Path) -> Result<()> {
    atomic_write(path, encode_scores(lines)?.as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    parse_scores(&fs::read_to_string(path)?, &path.display().to_string())
}

/// One instance per (sample, negative caption). Samples without a `"pos"`
/// line are skipped; several positives for one sample are rejected.
pub fn pairwise_instances(lines: &[ScoreLine]) -> Result<Vec<PairwiseInstance>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&ScoreLine>> = BTreeMap::new();
    for l in lines {
        let g = groups.entry(l.sample_id.as_str()).or_default();
        if g.is_empty() {
            order.push(l.sample_id.as_str());
        }
        g.push(l);
    }
    let mut out = Vec::new();
    for id in order {
        let group = &groups[id];
        let pos: Vec<_> = group.iter().filter(|l| l.role == "pos").collect();
        let pos = match pos.as_slice() {
            [] => continue,
            [one] => **one,
            _ => {
                return Err(MsdError::DuplicateId(format!(
                    "{id}: several positive captions"
                )))
            }
        };
        for neg in group.iter().filter(|l| l.role != "pos") {
            let mut meta = BTreeMap::new();
            if let Some(m) = &neg.model {
                meta.insert("model".to_string(), m.clone());
            }
            out.push(PairwiseInstance {
                image_id: id.to_string(),
                pos: pos.record.clone(),
                neg: neg.record.clone(),
                meta,
            });
        }
    }
    Ok(out)
}

pub fn write_eval_json(results: &[EvalResult], path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(results)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `metric,bucket,n,estimate,ci_low,ci_high,p_value`; the overall row has an
/// empty bucket.
pub fn eval_csv(results: &[EvalResult]) -> String {
    let mut out = String::from("metric,bucket,n,estimate,ci_low,ci_high,p_value\n");
    for r in results {
        out.push_str(&format!(
            "{},,{},{},{},{},{}\n",
            r.metric,
            r.n,
            r.point_estimate,
            opt(r.ci_low),
            opt(r.ci_high),
            opt(r.p_value)
        ));
        for b in &r.per_bucket {
            out.push_str(&format!(
                "{},{},{},{},,,\n",
                r.metric, b.label, b.n, b.estimate
            ));
        }
    }
    out
}

pub fn write_eval_csv(results: &[EvalResult], path: &Path) -> Result<()> {
    atomic_write(path, eval_csv(results).as_bytes())
}

fn check_grid(rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if rows * cols != values.len() {
        return Err(MsdError::GridMismatch {
            rows,
            cols,
            count: values.len(),
        });
    }
    Ok(())
}

/// Row-major grid as CSV, one grid row per line, full f64 precision.
pub fn grid_csv(rows: usize, cols: usize, values: &[f64]) -> Result<String> {
    check_grid(rows, cols, values)?;
    let mut out = String::new();
    for r in values.chunks(cols.max(1)) {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Binary 8-bit PGM (P5), min-max scaled to 0..=255. A constant map is all
/// zeros.
pub fn grid_pgm(rows: usize, cols: usize, values: &[f64]) -> Result<Vec<u8>> {
    check_grid(rows, cols, values)?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

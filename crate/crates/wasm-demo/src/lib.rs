//! Browser bindings for three scoring primitives: the length weight, the
//! Soft-MSD gate, and end-to-end scoring of a planted caption pair.

use msd_core::divergence::beta_of_length;
use msd_core::scoring::{fuse, softmax_uncertainty};
use msd_core::synth::{planted_pair, random_mixture, Perturbation, SynthSpec};
use msd_core::vmf::hard_assignments;
use msd_core::{em_fit, soft_msd_batch, BetaConfig, PipelineConfig, RngState};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_js<T: Serialize>(value: &T) -> Result<String, JsError> {
    serde_json::to_string(value).map_err(|e| JsError::new(&e.to_string()))
}

fn js_err(e: msd_core::MsdError) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct BetaPoint {
    length: usize,
    beta: f64,
}

/// `beta(L)` for `L = 0..=max_len` as a JSON array of `{length, beta}`.
#[wasm_bindgen]
pub fn beta_curve(l0: f64, tau_l: f64, max_len: usize) -> Result<String, JsError> {
    let cfg = BetaConfig { l0, tau_l };
    cfg.validate().map_err(js_err)?;
    let points: Vec<BetaPoint> = (0..=max_len)
        .map(|length| BetaPoint {
            length,
            beta: beta_of_length(length, &cfg),
        })
        .collect();
    to_js(&points)
}

#[derive(Serialize)]
struct GateRow {
    g: f64,
    d: f64,
    p: f64,
    msd: f64,
    soft_msd: f64,
}

#[derive(Serialize)]
struct Gate {
    u: f64,
    rows: Vec<GateRow>,
}

/// Soft-MSD for candidates with cosines `g` and divergences `d`.
#[wasm_bindgen]
pub fn soft_msd_gate(g: Vec<f64>, d: Vec<f64>, alpha: f64, xi: f64) -> Result<String, JsError> {
    if g.len() != d.len() {
        return Err(JsError::new("g and d need the same length"));
    }
    if !(xi > 0.0 && alpha >= 0.0) {
        return Err(JsError::new("need xi > 0 and alpha >= 0"));
    }
    let (p, u) = softmax_uncertainty(&g, xi).map_err(js_err)?;
    let rows = g
        .iter()
        .zip(&d)
        .zip(p)
        .map(|((&g, &d), p)| GateRow {
            g,
            d,
            p,
            msd: fuse(g, d, alpha, 1.0),
            soft_msd: fuse(g, d, alpha, u),
        })
        .collect();
    to_js(&Gate { u, rows })
}

#[derive(Serialize)]
struct Scored {
    g: f64,
    kl_img_txt: f64,
    kl_txt_img: f64,
    beta: f64,
    soft_msd: f64,
}

#[derive(Serialize)]
struct PlantedDemo {
    /// First two coordinates of each patch, with its image-mixture label.
    patches: Vec<(f64, f64, usize)>,
    pos_tokens: Vec<(f64, f64)>,
    neg_tokens: Vec<(f64, f64)>,
    u: f64,
    pos: Scored,
    neg: Scored,
}

/// Draws an image and a faithful caption from a random 2-component mixture
/// in 3 dimensions, rotates one component by `angle` for the counterfactual
/// caption, and scores both with the short profile.
#[wasm_bindgen]
pub fn planted_demo(angle: f64, n_txt: usize, seed: u64) -> Result<String, JsError> {
    let s = RngState::new(seed);
    let truth = random_mixture(3, 2, 20.0, s.derive("truth")).map_err(js_err)?;
    let pair = planted_pair(
        &SynthSpec::new(truth, 64, s),
        &Perturbation::RotateComponent(0, angle),
        n_txt.max(1),
    )
    .map_err(js_err)?;
    let cfg = PipelineConfig::short().with_seed(seed).for_sample("demo");
    let cands = vec![
        ("pos".to_string(), pair.txt_pos.clone()),
        ("neg".to_string(), pair.txt_neg.clone()),
    ];
    let out =
        soft_msd_batch(&pair.img, &cands, &cfg.fusion, &cfg.em_img, &cfg.em_txt).map_err(js_err)?;
    let (_, trace) = em_fit(&pair.img, &cfg.em_img).map_err(js_err)?;
    let labels = hard_assignments(&trace.responsibilities);
    let xy = |v: &msd_core::UnitVector| (v.as_slice()[0], v.as_slice()[1]);
    let scored = |i: usize| {
        let r = &out[i].0;
        Scored {
            g: r.g,
            kl_img_txt: r.kl_img_txt,
            kl_txt_img: r.kl_txt_img,
            beta: r.beta,
            soft_msd: r.soft_msd,
        }
    };
    to_js(&PlantedDemo {
        patches: pair
            .img
            .iter()
            .zip(labels)
            .map(|(v, l)| {
                let (x, y) = xy(v);
                (x, y, l)
            })
            .collect(),
        pos_tokens: pair.txt_pos.iter().map(xy).collect(),
        neg_tokens: pair.txt_neg.iter().map(xy).collect(),
        u: out[0].0.u,
        pos: scored(0),
        neg: scored(1),
    })
}

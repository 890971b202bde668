//! Browser bindings for three operations: Poincaré-disk arithmetic, the
//! cross-masking plan of a synthetic sample, and Gumbel-Max selection
//! frequencies.
//!
//! Each export wraps a plain function so the logic runs under native tests.

use hacm::config::RunConfig;
use hacm::data::{self, SyntheticSpec};
use hacm::engine::Graph;
use hacm::geometry::{self, BallPoint, Curvature};
use hacm::masking::{self, Criterion};
use hacm::network::Binding;
use hacm::pipeline::{self, derive_seed};
use hacm::train::{self, eval_view, pipeline_config};
use hacm::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Möbius sum, distance and similarity of two disk points, plus the ball
/// image of `u` read as a tangent vector at the origin.
///
/// Returns `[sx, sy, distance, similarity, ex, ey, radius]`.
pub fn disk_ops(ux: f64, uy: f64, vx: f64, vy: f64, c: f64) -> Result<Vec<f64>> {
    let c = Curvature::new(c)?;
    let u = BallPoint::new(vec![ux, uy], c)?;
    let v = BallPoint::new(vec![vx, vy], c)?;
    let s = geometry::mobius_add(&u, &v)?;
    let d = geometry::poincare_distance(&u, &v)?;
    let sim = geometry::hyperbolic_similarity(&u, &v)?;
    let e = geometry::exp_map_origin(&[ux, uy], c)?;
    Ok(vec![s.coords()[0], s.coords()[1], d, sim, e.coords()[0], e.coords()[1], c.radius()])
}

#[wasm_bindgen(js_name = diskOps)]
pub fn disk_ops_js(ux: f64, uy: f64, vx: f64, vy: f64, c: f64) -> std::result::Result<Vec<f64>, JsError> {
    disk_ops(ux, uy, vx, vy, c).map_err(js)
}

/// Settings of the mask-plan panel.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanRequest {
    pub class: usize,
    pub seed: u64,
    pub mask_ratio: f64,
    pub tau: f64,
    pub odd: Criterion,
    pub even: Criterion,
    pub use_gumbel: bool,
}

/// Criterion scores and unmask flags of one synthetic sample as JSON:
/// `{frames, joints, l, m, odd: {frames, scores, unmasked}, even: {...}}`,
/// scores frame-major within each half.
pub fn mask_plan(req: &PlanRequest) -> Result<String> {
    let mut cfg = RunConfig::default();
    for kv in ["embed_dim=16", "heads=2", "hidden=32", "enc_layers=1", "dec_layers=1"] {
        cfg.apply_override(kv)?;
    }
    cfg.mask_ratio = req.mask_ratio;
    cfg.tau = req.tau;
    cfg.odd_criterion = req.odd;
    cfg.even_criterion = req.even;
    cfg.use_gumbel = req.use_gumbel;
    cfg.seed = req.seed;
    cfg.validate()?;
    let spec = SyntheticSpec {
        n_classes: req.class + 1,
        samples_per_class: 1,
        test_per_class: 0,
        seed: req.seed,
        ..SyntheticSpec::default()
    };
    let sample = data::generate(&spec)?.pop().expect("one sample per class");
    let model = train::init_model(&cfg)?;
    let view = eval_view(&cfg, &sample.sequence)?;
    let pcfg = pipeline_config(&cfg);
    let mut g = Graph::new();
    let mut bind = Binding::new(&model.store, true);
    let refined = pipeline::refine_sample(&mut g, &mut bind, &model, &pcfg.torso, &view)?;
    let out = pipeline::plan_for(&model, &pcfg, &refined, derive_seed(req.seed, &[7]))?;
    let p = &out.plan;
    let half = |field: &masking::CriteriaField, flags: &[u8], base: usize| {
        let frames: Vec<usize> = (0..p.half_frames()).map(|k| p.token_position(base + k * p.joints).0).collect();
        json!({ "frames": frames, "scores": field.frame_major(), "unmasked": flags })
    };
    Ok(json!({
        "frames": 2 * p.half_frames(),
        "joints": p.joints,
        "l": p.l,
        "m": p.m,
        "odd": half(&out.odd, &p.mask_odd, 0),
        "even": half(&out.even, &p.mask_even, p.l),
    })
    .to_string())
}

fn criterion(name: &str) -> Result<Criterion> {
    name.parse()
}

#[wasm_bindgen(js_name = maskPlan)]
#[allow(clippy::too_many_arguments)]
pub fn mask_plan_js(
    class: usize,
    seed: u32,
    mask_ratio: f64,
    tau: f64,
    odd: &str,
    even: &str,
    use_gumbel: bool,
) -> std::result::Result<String, JsError> {
    let req = PlanRequest {
        class,
        seed: seed as u64,
        mask_ratio,
        tau,
        odd: criterion(odd).map_err(js)?,
        even: criterion(even).map_err(js)?,
        use_gumbel,
    };
    mask_plan(&req).map_err(js)
}

/// Empirical selection frequency of each index over `draws` Gumbel top-`m`
/// draws, followed by the softmax probabilities of the scores at `tau`.
pub fn gumbel_histogram(scores: &[f64], m: usize, tau: f64, draws: usize, seed: u64) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(Error::Invalid("need at least one draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; scores.len()];
    for _ in 0..draws {
        for q in masking::gumbel_unmask(scores, m, tau, &mut rng)? {
            counts[q] += 1;
        }
    }
    let mut out: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    out.extend(masking::unmask_probabilities(scores, tau)?);
    Ok(out)
}

#[wasm_bindgen(js_name = gumbelHistogram)]
pub fn gumbel_histogram_js(scores: Vec<f64>, m: usize, tau: f64, draws: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    gumbel_histogram(&scores, m, tau, draws, seed as u64).map_err(js)
}

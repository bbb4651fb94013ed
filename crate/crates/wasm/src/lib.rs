//! Browser bindings for the demo page in `www/`.
//!
//! Every exported function has a plain Rust twin (`*_json`, `try_*`) that
//! returns the core error type, so the logic is testable off the browser.

use grounding_core::benchmark::{episode_at, TaskConfig};
use grounding_core::estimator::FittedEstimator;
use grounding_core::field::{score_field, GridSpec};
use grounding_core::grounding::{ground, Estimator, Mode};
use grounding_core::parser::parse_grammar;
use grounding_core::polar::{MixtureComponent, PolarParams, Point, SpatialMixture};
use grounding_core::scene::{SceneGraph, DEFAULT_NEAR_FACTOR};
use grounding_core::session::{check_resolution, session_step, Engine, Session};
use grounding_core::Result;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: grounding_core::Error) -> JsError {
    JsError::new(&crate_error_json(&e))
}

fn crate_error_json(e: &grounding_core::Error) -> String {
    json!({ "kind": e.kind(), "message": e.to_string(), "detail": e.detail() }).to_string()
}

fn parse_scene(scene_json: &str) -> Result<SceneGraph> {
    SceneGraph::from_json_str(scene_json, DEFAULT_NEAR_FACTOR)
}

/// A benchmark scene with its instruction, as `{scene, instruction}`.
pub fn example_json(seed: u64, index: usize) -> Result<String> {
    let ep = episode_at(&TaskConfig::test(seed), index)?;
    Ok(json!({ "scene": ep.scene.to_json(), "instruction": ep.instruction }).to_string())
}

/// Grounds a full instruction with the fitted estimator. The reply carries
/// the grounding report plus the combined field.
pub fn ground_json(scene_json: &str, instruction: &str, resolution: usize) -> Result<String> {
    check_resolution(resolution)?;
    let scene = parse_scene(scene_json)?;
    let parsed = parse_grammar(instruction)?;
    let g = ground(&scene, &parsed, &Estimator::Fitted(FittedEstimator::default()), &GridSpec::unit(resolution))?;
    let mut v = serde_json::to_value(&g)?;
    v["field"] = serde_json::to_value(g.field.as_ref().expect("ground fills the field"))?;
    Ok(v.to_string())
}

/// Max-normalized field of one polar component anchored at `(ax, ay)`.
#[allow(clippy::too_many_arguments)]
pub fn component_values(
    mu_d: f64,
    var_d: f64,
    mu_phi: f64,
    kappa_phi: f64,
    ax: f64,
    ay: f64,
    resolution: usize,
) -> Result<Vec<f64>> {
    check_resolution(resolution)?;
    let params = PolarParams::new(mu_d, var_d, mu_phi, kappa_phi)?;
    let mix = SpatialMixture::new(vec![MixtureComponent { weight: 1.0, params, anchor: Point::new(ax, ay), node_id: 0 }]);
    Ok(score_field(&mix, &GridSpec::unit(resolution))?.max_normalized()?.values)
}

#[wasm_bindgen(js_name = exampleScene)]
pub fn example_scene(seed: u64, index: usize) -> std::result::Result<String, JsError> {
    example_json(seed, index).map_err(js)
}

#[wasm_bindgen(js_name = groundInstruction)]
pub fn ground_instruction(scene_json: &str, instruction: &str, resolution: usize) -> std::result::Result<String, JsError> {
    ground_json(scene_json, instruction, resolution).map_err(js)
}

#[wasm_bindgen(js_name = componentField)]
#[allow(clippy::too_many_arguments)]
pub fn component_field(
    mu_d: f64,
    var_d: f64,
    mu_phi: f64,
    kappa_phi: f64,
    ax: f64,
    ay: f64,
    resolution: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    component_values(mu_d, var_d, mu_phi, kappa_phi, ax, ay, resolution).map_err(js)
}

/// An in-page incremental session (fitted mode).
#[wasm_bindgen]
pub struct Demo {
    session: Session,
    engine: Engine,
}

impl Demo {
    pub fn try_new(scene_json: &str, resolution: usize) -> Result<Demo> {
        let session = Session::new("page", parse_scene(scene_json)?, resolution)?;
        Ok(Demo { session, engine: Engine::default() })
    }

    /// Adds one expression; on error the session is left unchanged.
    pub fn try_step(&mut self, text: &str) -> Result<String> {
        let r = session_step(&mut self.session, text, Mode::Fitted, &self.engine)?;
        Ok(serde_json::to_string(&r)?)
    }

    pub fn session(&self) -> &Session {
        &self.session
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(scene_json: &str, resolution: usize) -> std::result::Result<Demo, JsError> {
        Demo::try_new(scene_json, resolution).map_err(js)
    }

    pub fn step(&mut self, text: &str) -> std::result::Result<String, JsError> {
        self.try_step(text).map_err(js)
    }

    /// Running field values, uniform before the first expression.
    pub fn field(&self) -> Vec<f64> {
        self.session.field().values
    }

    pub fn steps(&self) -> usize {
        self.session.history.len()
    }

    pub fn reset(&mut self) {
        let grid = self.session.grid.resolution;
        self.session = Session::new("page", self.session.scene.clone(), grid).expect("scene was accepted before");
    }
}

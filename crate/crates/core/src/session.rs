//! Incremental grounding sessions: expressions arrive one at a time and
//! each multiplies its field into the running product.

use crate::error::{Error, Result};
use crate::estimator::{EstimatorModel, EstimatorState, FittedEstimator};
use crate::field::{combine_score_fields, grid_argmax, score_field, GridSpec, ScoreField};
use crate::grounding::{summarize, ComponentSummary, Estimator, Mode};
use crate::parser::{parse_expression, parse_llm, to_relation_tuples, LlmClient, ParsedInstruction, RelationTuple};
use crate::polar::{Point, SpatialMixture};
use crate::scene::SceneGraph;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

pub const DEFAULT_RESOLUTION: usize = 128;
pub const MIN_RESOLUTION: usize = 16;
pub const MAX_RESOLUTION: usize = 512;

pub fn check_resolution(resolution: usize) -> Result<()> {
    if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&resolution) {
        return Err(Error::Config(format!(
            "resolution must lie in {MIN_RESOLUTION}..={MAX_RESOLUTION}, got {resolution}"
        )));
    }
    Ok(())
}

/// Estimators and parsers shared by all sessions.
#[derive(Default)]
pub struct Engine {
    pub fitted: FittedEstimator,
    pub learned: Option<Estimator>,
    /// Consulted when the grammar rejects an expression.
    pub llm: Option<LlmClient>,
}


impl Engine {
    pub fn with_model(mut self, model: EstimatorModel) -> Self {
        self.learned = Some(Estimator::Learned(Box::new(model)));
        self
    }

    pub fn parse(&self, text: &str) -> Result<ParsedInstruction> {
        match parse_expression(text) {
            Ok(p) => Ok(p),
            Err(grammar_err) => match &self.llm {
                Some(client) => parse_llm(text, client).map_err(|_| grammar_err),
                None => Err(grammar_err),
            },
        }
    }

    fn estimator(&self, mode: Mode) -> Result<Estimator> {
        match mode {
            Mode::Fitted => Ok(Estimator::Fitted(self.fitted.clone())),
            Mode::Learned => self
                .learned
                .clone()
                .ok_or_else(|| Error::Config("learned mode needs a model (start the service with --model)".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub scene: SceneGraph,
    pub grid: GridSpec,
    /// Accepted expression texts with the mode each used, in arrival order.
    pub history: Vec<(String, Mode)>,
    pub expressions: Vec<RelationTuple>,
    pub mixtures: Vec<SpatialMixture>,
    pub fields: Vec<ScoreField>,
    pub running: Option<ScoreField>,
    pub state: Option<EstimatorState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub step: usize,
    pub parsed: ParsedInstruction,
    pub field: ScoreField,
    pub argmax: Point,
    pub score: f64,
    /// Component summaries of each mixture added by this step.
    pub components: Vec<Vec<ComponentSummary>>,
}

impl Session {
    pub fn new(id: impl Into<String>, scene: SceneGraph, resolution: usize) -> Result<Self> {
        check_resolution(resolution)?;
        if scene.is_empty() {
            return Err(Error::Scene("a session needs at least one object".into()));
        }
        Ok(Self {
            id: id.into(),
            scene,
            grid: GridSpec::unit(resolution),
            history: Vec::new(),
            expressions: Vec::new(),
            mixtures: Vec::new(),
            fields: Vec::new(),
            running: None,
            state: None,
        })
    }

    /// The running field, or a uniform field before any expression.
    pub fn field(&self) -> ScoreField {
        self.running
            .clone()
            .unwrap_or_else(|| ScoreField { grid: self.grid, values: vec![1.0; self.grid.len()] })
    }

    /// The running product re-rendered at another resolution.
    pub fn field_at(&self, resolution: usize) -> Result<ScoreField> {
        check_resolution(resolution)?;
        if resolution == self.grid.resolution {
            return Ok(self.field());
        }
        let grid = self.grid.with_resolution(resolution);
        if self.mixtures.is_empty() {
            return Ok(ScoreField { grid, values: vec![1.0; grid.len()] });
        }
        let fields = self.mixtures.iter().map(|m| score_field(m, &grid)).collect::<Result<Vec<_>>>()?;
        combine_score_fields(&fields)
    }

    pub fn argmax(&self) -> Result<(Point, f64)> {
        grid_argmax(&self.field())
    }
}

/// Parses `expression`, estimates a mixture per relation, and multiplies
/// the fields into the running product. On error the session is unchanged.
pub fn session_step(session: &mut Session, expression: &str, mode: Mode, engine: &Engine) -> Result<StepResponse> {
    let parsed = engine.parse(expression)?;
    let tuples = to_relation_tuples(&parsed)?;
    let estimator = engine.estimator(mode)?;
    let mut state = session.state.clone();
    let mut mixtures = Vec::with_capacity(tuples.len());
    let mut fields = Vec::with_capacity(tuples.len());
    let mut running = session.running.clone();
    for t in &tuples {
        let (mix, next) = estimator.step(&session.scene, t, state.as_ref())?;
        if next.is_some() {
            state = next;
        }
        let f = score_field(&mix, &session.grid)?;
        running = Some(match running {
            Some(r) => combine_score_fields(&[r, f.clone()])?,
            None => combine_score_fields(std::slice::from_ref(&f))?,
        });
        mixtures.push(mix);
        fields.push(f);
    }
    let running = running.expect("at least one tuple");
    let (argmax, score) = grid_argmax(&running)?;
    let components = mixtures.iter().map(summarize).collect::<Result<Vec<_>>>()?;

    session.history.push((expression.to_string(), mode));
    session.expressions.extend(tuples);
    session.mixtures.extend(mixtures);
    session.fields.extend(fields);
    session.running = Some(running.clone());
    session.state = state;
    Ok(StepResponse { step: session.history.len(), parsed, field: running, argmax, score, components })
}

/// Thread-safe collection of sessions with an optional append-only journal.
pub struct SessionStore {
    engine: Arc<Engine>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: Mutex<u64>,
    journal: Option<Mutex<std::fs::File>>,
    resolution: usize,
}

impl SessionStore {
    pub fn new(engine: Engine) -> Self {
        Self {
            engine: Arc::new(engine),
            sessions: Mutex::new(HashMap::new()),
            next_id: Mutex::new(1),
            journal: None,
            resolution: DEFAULT_RESOLUTION,
        }
    }

    pub fn with_resolution(mut self, resolution: usize) -> Result<Self> {
        check_resolution(resolution)?;
        self.resolution = resolution;
        Ok(self)
    }

    /// Replays `path` if it exists, then appends every later change to it.
    pub fn with_journal(mut self, path: &Path) -> Result<Self> {
        if path.exists() {
            self.replay(path)?;
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.journal = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn log(&self, entry: Value) -> Result<()> {
        if let Some(j) = &self.journal {
            let mut f = j.lock().expect("journal lock");
            serde_json::to_writer(&mut *f, &entry)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        Ok(())
    }

    fn insert(&self, id: String, scene: SceneGraph) -> Result<String> {
        let session = Session::new(id.clone(), scene, self.resolution)?;
        self.sessions
            .lock()
            .expect("sessions lock")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    pub fn create(&self, scene: SceneGraph) -> Result<String> {
        let id = {
            let mut n = self.next_id.lock().expect("id lock");
            let id = format!("s{:06}", *n);
            *n += 1;
            id
        };
        let scene_json = scene.to_json();
        self.insert(id.clone(), scene)?;
        self.log(json!({ "op": "create", "id": id, "scene": scene_json }))?;
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    /// Runs one step while holding the session's lock, so concurrent steps
    /// on one session apply in some sequential order.
    pub fn step(&self, id: &str, text: &str, mode: Mode) -> Result<StepResponse> {
        let session = self.get(id)?;
        let mut s = session.lock().expect("session lock");
        let response = session_step(&mut s, text, mode, &self.engine)?;
        self.log(json!({ "op": "step", "id": id, "text": text, "mode": mode }))?;
        Ok(response)
    }

    pub fn with_session<T>(&self, id: &str, f: impl FnOnce(&Session) -> Result<T>) -> Result<T> {
        let session = self.get(id)?;
        let s = session.lock().expect("session lock");
        f(&s)
    }

    pub fn delete(&self, id: &str) -> Result<()> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .remove(id)
            .ok_or_else(|| Error::UnknownSession(id.to_string()))?;
        self.log(json!({ "op": "delete", "id": id }))
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("sessions lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn replay(&self, path: &Path) -> Result<()> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut max_id = 0u64;
        for (i, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let at = |e: Error| Error::Format(format!("journal line {}: {e}", i + 1));
            let v: Value = serde_json::from_str(&line).map_err(|e| at(e.into()))?;
            let id = v["id"].as_str().ok_or_else(|| at(Error::Format("missing id".into())))?.to_string();
            if let Some(n) = id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                max_id = max_id.max(n);
            }
            match v["op"].as_str() {
                Some("create") => {
                    let scene = SceneGraph::from_json(&v["scene"], crate::scene::DEFAULT_NEAR_FACTOR).map_err(at)?;
                    self.insert(id, scene).map_err(at)?;
                }
                Some("step") => {
                    let text = v["text"].as_str().ok_or_else(|| at(Error::Format("missing text".into())))?;
                    let mode: Mode = serde_json::from_value(v["mode"].clone()).map_err(|e| at(e.into()))?;
                    let session = self.get(&id).map_err(at)?;
                    let mut s = session.lock().expect("session lock");
                    session_step(&mut s, text, mode, &self.engine).map_err(at)?;
                }
                Some("delete") => {
                    self.sessions.lock().expect("sessions lock").remove(&id);
                }
                other => return Err(at(Error::Format(format!("unknown op {other:?}")))),
            }
        }
        *self.next_id.lock().expect("id lock") = max_id + 1;
        Ok(())
    }
}

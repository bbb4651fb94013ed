//! Synthetic composite-instruction episodes, relation checkers and the
//! benchmark runner.

use crate::error::{Error, Result};
use crate::estimator::TrainingSample;
use crate::field::{Bounds, GridSpec};
use crate::grounding::{ground_tuples, Estimator, Mode};
use crate::parser::{
    canonical_predicate, parse_grammar, parse_llm, to_relation_tuples, LlmClient, ParsedInstruction, RelationText,
    INSTRUCTION_PREDICATES, SELF_SOURCE,
};
use crate::polar::{to_polar, Point};
use crate::scene::{build_scene_graph, BoundingBox, ObjectNode, SceneGraph, DEFAULT_NEAR_FACTOR};
use crate::field::grid_argmax;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::io::{BufRead, Write};

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "pink", "gray", "cyan"];
pub const SHAPES: [&str; 6] = ["bowl", "box", "cube", "ring", "block", "cup"];
const VERBS: [&str; 4] = ["put", "place", "move", "set"];
/// Highest relation count with its own report row.
pub const MAX_REPORTED_RELATIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Inclusive range of objects per scene.
    pub n_objects: (usize, usize),
    /// Inclusive range of relations per instruction.
    pub n_relations: (usize, usize),
    pub workspace: Bounds,
    pub seed: u64,
    pub margin: f64,
    /// `close` holds within this many referent diagonals.
    pub close_max: f64,
    /// `far` holds beyond this many referent diagonals.
    pub far_min: f64,
    /// Inclusive range of box side lengths.
    pub box_size: (f64, f64),
    /// Resolution of the grid that x_des is drawn from.
    pub target_grid: usize,
    pub max_rejections: usize,
    /// Draw object names without replacement within a scene.
    pub unique_names: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self::test(7)
    }
}

impl TaskConfig {
    pub fn train(seed: u64) -> Self {
        Self { n_relations: (1, 3), unique_names: true, ..Self::test(seed) }
    }

    pub fn test(seed: u64) -> Self {
        Self {
            n_objects: (2, 7),
            n_relations: (1, 6),
            workspace: Bounds::UNIT,
            seed,
            margin: 0.02,
            close_max: 2.0,
            far_min: 4.0,
            box_size: (0.05, 0.15),
            target_grid: 128,
            max_rejections: 1000,
            unique_names: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.n_objects;
        let (rlo, rhi) = self.n_relations;
        if lo == 0 || lo > hi || rlo == 0 || rlo > rhi {
            return Err(Error::Config("object and relation ranges must be nonempty and start at 1".into()));
        }
        if !(0.0 < self.close_max && self.close_max < self.far_min) {
            return Err(Error::Config("need 0 < close_max < far_min".into()));
        }
        if !(self.margin >= 0.0) || !(self.box_size.0 > 0.0 && self.box_size.0 <= self.box_size.1) {
            return Err(Error::Config("margin must be >= 0 and box sizes positive".into()));
        }
        if self.unique_names && hi > COLORS.len() * SHAPES.len() {
            return Err(Error::Config("not enough distinct names".into()));
        }
        if self.target_grid < 2 {
            return Err(Error::Config("target_grid must be >= 2".into()));
        }
        Ok(())
    }
}

/// Whether `x` satisfies `predicate` relative to `node`.
pub fn check_relation(x: Point, node: &ObjectNode, predicate: &str, cfg: &TaskConfig) -> Result<bool> {
    let dx = x.x - node.coord.x;
    let dy = x.y - node.coord.y;
    let m = cfg.margin;
    let (left, right, above, below) = (dx < -m, dx > m, dy > m, dy < -m);
    let dist = dx.hypot(dy);
    let diag = node.bbox.diagonal();
    Ok(match predicate {
        "left" => left,
        "right" => right,
        "above" => above,
        "below" => below,
        "left above" => left && above,
        "right above" => right && above,
        "left below" => left && below,
        "right below" => right && below,
        "close" => dist <= cfg.close_max * diag,
        "far" => dist >= cfg.far_min * diag,
        other => return Err(Error::UnknownPredicate(other.to_string())),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scene: SceneGraph,
    pub instruction: String,
    pub truth: ParsedInstruction,
    /// Referenced node id for each relation of `truth`.
    pub referenced: Vec<u32>,
    pub x_des: Point,
}

impl Episode {
    pub fn relation_count(&self) -> usize {
        self.referenced.len()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "scene": self.scene.to_json(),
            "instruction": self.instruction,
            "truth": self.truth,
            "referenced": self.referenced,
            "x_des": self.x_des,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let field = |k: &str| v.get(k).ok_or_else(|| Error::Format(format!("episode is missing {k:?}")));
        let scene = SceneGraph::from_json(field("scene")?, DEFAULT_NEAR_FACTOR)?;
        let instruction = field("instruction")?
            .as_str()
            .ok_or_else(|| Error::Format("instruction must be a string".into()))?
            .to_string();
        let truth: ParsedInstruction = serde_json::from_value(field("truth")?.clone())?;
        let referenced: Vec<u32> = serde_json::from_value(field("referenced")?.clone())?;
        let x_des: Point = serde_json::from_value(field("x_des")?.clone())?;
        if referenced.len() != truth.targets.len() {
            return Err(Error::Format("referenced ids do not match the relation count".into()));
        }
        for id in &referenced {
            if scene.node(*id).is_none() {
                return Err(Error::Format(format!("referenced node {id} is not in the scene")));
            }
        }
        Ok(Self { scene, instruction, truth, referenced, x_des })
    }

    /// Training targets: every relation shares x_des, w_des is one-hot on
    /// the referenced node.
    pub fn to_training_sample(&self) -> Result<TrainingSample> {
        let n = self.scene.len();
        let w_des = self
            .referenced
            .iter()
            .map(|id| {
                let k = self.scene.index_of(*id).expect("validated id");
                (0..n).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
            })
            .collect();
        Ok(TrainingSample {
            scene: self.scene.clone(),
            tuples: to_relation_tuples(&self.truth)?,
            x_des: vec![self.x_des; self.referenced.len()],
            w_des,
        })
    }

    /// True when no other node carries the name of any referenced node.
    pub fn referents_unique(&self) -> bool {
        self.referenced.iter().all(|id| {
            let name = &self.scene.node(*id).expect("validated id").name;
            self.scene.ordered_nodes().filter(|n| &n.name == name).count() == 1
        })
    }
}

/// `(d / diag, phi)` of x_des around each referenced node, grouped by
/// canonical predicate. Input for [`PredicateTable::fit`](crate::estimator::PredicateTable::fit).
pub fn predicate_samples(episodes: &[Episode]) -> Result<std::collections::BTreeMap<String, Vec<(f64, f64)>>> {
    let mut out = std::collections::BTreeMap::<String, Vec<(f64, f64)>>::new();
    for ep in episodes {
        for (rel, id) in ep.truth.targets.iter().zip(&ep.referenced) {
            let node = ep.scene.node(*id).ok_or_else(|| Error::Scene(format!("missing node {id}")))?;
            let pred = canonical_predicate(&rel.predicate).ok_or_else(|| Error::UnknownPredicate(rel.predicate.clone()))?;
            let (d, phi) = to_polar(ep.x_des, node.coord);
            out.entry(pred.to_string()).or_default().push((d / node.bbox.diagonal(), phi));
        }
    }
    Ok(out)
}

pub fn write_episodes(path: &std::path::Path, episodes: &[Episode]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in episodes {
        serde_json::to_writer(&mut out, &e.to_json())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_episodes(path: &std::path::Path) -> Result<Vec<Episode>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(Episode::from_json(&v).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn phrase(predicate: &str, rng: &mut impl Rng) -> &'static str {
    let options: &[&'static str] = match predicate {
        "left" => &["to the left of", "left of"],
        "right" => &["to the right of", "right of"],
        "above" => &["above", "above of"],
        "below" => &["below", "below of"],
        "left above" => &["to the left above of", "above left of"],
        "right above" => &["to the right above of", "above right of"],
        "left below" => &["to the left below of", "below left of"],
        "right below" => &["to the right below of", "below right of"],
        "close" => &["close to", "near"],
        "far" => &["far from"],
        _ => unreachable!("predicate comes from the vocabulary"),
    };
    options[rng.gen_range(0..options.len())]
}

fn place_objects(cfg: &TaskConfig, n: usize, rng: &mut impl Rng) -> Option<Vec<ObjectNode>> {
    let b = cfg.workspace;
    let mut names: Vec<String> = Vec::with_capacity(n);
    if cfg.unique_names {
        let mut all: Vec<String> =
            COLORS.iter().flat_map(|c| SHAPES.iter().map(move |s| format!("{c} {s}"))).collect();
        all.shuffle(rng);
        names.extend(all.into_iter().take(n));
    } else {
        for _ in 0..n {
            names.push(format!("{} {}", COLORS[rng.gen_range(0..COLORS.len())], SHAPES[rng.gen_range(0..SHAPES.len())]));
        }
    }
    let mut nodes: Vec<ObjectNode> = Vec::with_capacity(n);
    for (id, name) in names.into_iter().enumerate() {
        let mut placed = false;
        for _ in 0..200 {
            let w = rng.gen_range(cfg.box_size.0..=cfg.box_size.1);
            let h = rng.gen_range(cfg.box_size.0..=cfg.box_size.1);
            let cx = rng.gen_range(b.x_min + w / 2.0..=b.x_max - w / 2.0);
            let cy = rng.gen_range(b.y_min + h / 2.0..=b.y_max - h / 2.0);
            let bbox = BoundingBox::new(cx, cy, w, h);
            if nodes.iter().any(|o| o.bbox.overlaps(&bbox, 0.0)) {
                continue;
            }
            nodes.push(ObjectNode::new(id as u32, name.clone(), Point::new(cx, cy), bbox).ok()?);
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(nodes)
}

/// Draws one self-consistent episode.
pub fn generate_episode(cfg: &TaskConfig, rng: &mut impl Rng) -> Result<Episode> {
    cfg.validate()?;
    let grid = cfg.workspace.grid(cfg.target_grid);
    // The relation count is fixed before rejection so counts stay uniform.
    let m = rng.gen_range(cfg.n_relations.0..=cfg.n_relations.1);
    for _ in 0..cfg.max_rejections {
        let n = rng.gen_range(cfg.n_objects.0..=cfg.n_objects.1);
        let Some(nodes) = place_objects(cfg, n, rng) else { continue };
        let mut pairs: Vec<(usize, &str)> = Vec::with_capacity(m);
        while pairs.len() < m {
            let pair = (rng.gen_range(0..n), INSTRUCTION_PREDICATES[rng.gen_range(0..INSTRUCTION_PREDICATES.len())]);
            if !pairs.contains(&pair) {
                pairs.push(pair);
            }
            if pairs.len() >= n * INSTRUCTION_PREDICATES.len() {
                break;
            }
        }
        let mut satisfying = Vec::new();
        for (idx, x) in grid.centers().enumerate() {
            if nodes.iter().any(|o| o.bbox.contains_point(x)) {
                continue;
            }
            let mut ok = true;
            for &(j, p) in &pairs {
                if !check_relation(x, &nodes[j], p, cfg)? {
                    ok = false;
                    break;
                }
            }
            if ok {
                satisfying.push(idx);
            }
        }
        if satisfying.is_empty() {
            continue;
        }
        let x_des = grid.center_of(satisfying[rng.gen_range(0..satisfying.len())]);

        let navigate = rng.gen_bool(0.2);
        let (verb, source) = if navigate {
            ("move", SELF_SOURCE.to_string())
        } else {
            let held = format!("{} {}", COLORS[rng.gen_range(0..COLORS.len())], SHAPES[rng.gen_range(0..SHAPES.len())]);
            (VERBS[rng.gen_range(0..VERBS.len())], held)
        };
        let mut text = verb.to_string();
        if !navigate {
            text.push_str(" the ");
            text.push_str(&source);
        }
        for (k, &(j, p)) in pairs.iter().enumerate() {
            let sep = match k {
                0 => " ",
                _ if k + 1 == pairs.len() && pairs.len() > 2 => ", and ",
                _ if pairs.len() > 2 => ", ",
                _ => " and ",
            };
            text.push_str(sep);
            text.push_str(phrase(p, rng));
            text.push_str(" the ");
            text.push_str(&nodes[j].name);
        }
        let truth = ParsedInstruction {
            action: verb.to_string(),
            source,
            targets: pairs.iter().map(|&(j, p)| RelationText::new(nodes[j].name.clone(), p)).collect(),
        };
        let referenced = pairs.iter().map(|&(j, _)| j as u32).collect();
        let scene = build_scene_graph(nodes, DEFAULT_NEAR_FACTOR)?;
        return Ok(Episode { scene, instruction: text, truth, referenced, x_des });
    }
    Err(Error::Generation(format!("no satisfiable episode after {} attempts", cfg.max_rejections)))
}

/// Episode `i` of a run, drawn from its own sub-seed `seed ^ i`.
pub fn episode_at(cfg: &TaskConfig, index: usize) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    generate_episode(cfg, &mut rng)
}

pub fn generate_episodes(cfg: &TaskConfig, count: usize) -> Result<Vec<Episode>> {
    (0..count).map(|i| episode_at(cfg, i)).collect()
}

/// Fraction of the episode's relations satisfied at `x`.
pub fn score_grounding(x: Point, episode: &Episode, cfg: &TaskConfig) -> Result<f64> {
    let m = episode.relation_count();
    if m == 0 {
        return Err(Error::Domain("episode has no relations".into()));
    }
    let mut hits = 0usize;
    for (rel, id) in episode.truth.targets.iter().zip(&episode.referenced) {
        let node = episode.scene.node(*id).ok_or_else(|| Error::Scene(format!("missing node {id}")))?;
        let pred = canonical_predicate(&rel.predicate).ok_or_else(|| Error::UnknownPredicate(rel.predicate.clone()))?;
        if check_relation(x, node, pred, cfg)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParserKind {
    Grammar,
    Llm,
    /// The generator's own parse; isolates estimation from parsing.
    Oracle,
}

impl std::str::FromStr for ParserKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grammar" => Ok(Self::Grammar),
            "llm" => Ok(Self::Llm),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::Config(format!("unknown parser {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub episodes: usize,
    pub mode: Mode,
    pub parser: ParserKind,
    pub grid: usize,
    pub task: TaskConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub relations: usize,
    pub episodes: usize,
    /// `None` when no episode has this many relations.
    pub mean_score: Option<f64>,
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub index: usize,
    pub relations: usize,
    pub location: Point,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub episodes: usize,
    pub mean_score: f64,
    pub success_rate: f64,
    pub by_relation_count: Vec<CountRow>,
    pub results: Vec<EpisodeResult>,
    /// Only filled on request; it varies between runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_wall_ms: Option<f64>,
}

impl BenchReport {
    /// Success rate over episodes whose relation count lies in `lo..=hi`.
    pub fn success_between(&self, lo: usize, hi: usize) -> Option<f64> {
        let sel: Vec<_> = self.results.iter().filter(|r| (lo..=hi).contains(&r.relations)).collect();
        if sel.is_empty() {
            return None;
        }
        Some(sel.iter().filter(|r| r.score == 1.0).count() as f64 / sel.len() as f64)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn parse_episode(ep: &Episode, kind: ParserKind, llm: Option<&LlmClient>) -> Result<ParsedInstruction> {
    match kind {
        ParserKind::Grammar => parse_grammar(&ep.instruction),
        ParserKind::Oracle => Ok(ep.truth.clone()),
        ParserKind::Llm => {
            let client = llm.ok_or_else(|| Error::Config("llm parser selected without a client".into()))?;
            parse_llm(&ep.instruction, client)
        }
    }
}

/// Grounds every episode and scores the argmax. Episode failures abort the
/// run with the episode index in the message.
pub fn run_benchmark(
    cfg: &BenchConfig,
    estimator: &Estimator,
    llm: Option<&LlmClient>,
    mut timing: Option<&mut dyn FnMut(usize, std::time::Duration)>,
) -> Result<BenchReport> {
    if estimator.mode() != cfg.mode {
        return Err(Error::Config(format!(
            "bench configured for {} but estimator is {}",
            cfg.mode.as_str(),
            estimator.mode().as_str()
        )));
    }
    let grid = GridSpec { resolution: cfg.grid, ..cfg.task.workspace.grid(cfg.grid) };
    grid.validate()?;
    let mut results = Vec::with_capacity(cfg.episodes);
    for i in 0..cfg.episodes {
        let started = std::time::Instant::now();
        let ctx = |e: Error| Error::Domain(format!("episode {i}: {e}"));
        let ep = episode_at(&cfg.task, i).map_err(ctx)?;
        let parsed = parse_episode(&ep, cfg.parser, llm).map_err(ctx)?;
        let tuples = to_relation_tuples(&parsed).map_err(ctx)?;
        let (_, field) = ground_tuples(&ep.scene, &tuples, estimator, &grid).map_err(ctx)?;
        let (location, _) = grid_argmax(&field).map_err(ctx)?;
        let score = score_grounding(location, &ep, &cfg.task).map_err(ctx)?;
        results.push(EpisodeResult { index: i, relations: ep.relation_count(), location, score });
        if let Some(f) = timing.as_mut() {
            f(i, started.elapsed());
        }
    }
    let n = results.len().max(1) as f64;
    let by_relation_count = (1..=MAX_REPORTED_RELATIONS)
        .map(|m| {
            let sel: Vec<_> = results.iter().filter(|r| r.relations == m).collect();
            let k = sel.len();
            CountRow {
                relations: m,
                episodes: k,
                mean_score: (k > 0).then(|| sel.iter().map(|r| r.score).sum::<f64>() / k as f64),
                success_rate: (k > 0).then(|| sel.iter().filter(|r| r.score == 1.0).count() as f64 / k as f64),
            }
        })
        .collect();
    Ok(BenchReport {
        config: cfg.clone(),
        episodes: results.len(),
        mean_score: results.iter().map(|r| r.score).sum::<f64>() / n,
        success_rate: results.iter().filter(|r| r.score == 1.0).count() as f64 / n,
        by_relation_count,
        results,
        mean_wall_ms: None,
    })
}

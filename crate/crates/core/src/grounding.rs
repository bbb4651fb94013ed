//! End-to-end grounding: parsed relations to per-step mixtures, their score
//! fields, the running product and its argmax.

use crate::error::{Error, Result};
use crate::estimator::{estimate_step, EstimatorModel, EstimatorState, FittedEstimator, GraphInputs};
use crate::field::{combine_score_fields, grid_argmax, score_field, GridSpec, ScoreField};
use crate::parser::{to_relation_tuples, ParsedInstruction, RelationTuple};
use crate::polar::{PolarParams, Point, SpatialMixture};
use crate::scene::SceneGraph;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fitted,
    Learned,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fitted => "fitted",
            Mode::Learned => "learned",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fitted" => Ok(Mode::Fitted),
            "learned" => Ok(Mode::Learned),
            other => Err(Error::Config(format!("unknown mode {other:?}, expected fitted or learned"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Estimator {
    Fitted(FittedEstimator),
    Learned(Box<EstimatorModel>),
}

impl Estimator {
    pub fn mode(&self) -> Mode {
        match self {
            Estimator::Fitted(_) => Mode::Fitted,
            Estimator::Learned(_) => Mode::Learned,
        }
    }

    /// Mixture for one tuple. The learned path consumes and returns the
    /// recurrent state; the fitted path ignores it.
    pub fn step(
        &self,
        scene: &SceneGraph,
        tuple: &RelationTuple,
        state: Option<&EstimatorState>,
    ) -> Result<(SpatialMixture, Option<EstimatorState>)> {
        match self {
            Estimator::Fitted(f) => Ok((f.estimate(scene, tuple)?, None)),
            Estimator::Learned(model) => {
                let g = GraphInputs::new(scene, &model.config)?;
                let zero;
                let prev = match state {
                    Some(s) => s,
                    None => {
                        zero = EstimatorState::zero(g.len(), model.config.d_hidden());
                        &zero
                    }
                };
                let (mix, next) = estimate_step(&g, tuple, prev, model)?;
                Ok((mix, Some(next)))
            }
        }
    }

    pub fn estimate_all(&self, scene: &SceneGraph, tuples: &[RelationTuple]) -> Result<Vec<SpatialMixture>> {
        let mut state = None;
        let mut out = Vec::with_capacity(tuples.len());
        for t in tuples {
            let (mix, next) = self.step(scene, t, state.as_ref())?;
            out.push(mix);
            state = next;
        }
        Ok(out)
    }
}

/// Summary of one mixture component for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub node_id: u32,
    pub weight: f64,
    pub anchor: Point,
    #[serde(flatten)]
    pub params: PolarParams,
}

pub fn summarize(mix: &SpatialMixture) -> Result<Vec<ComponentSummary>> {
    Ok(mix
        .normalized()?
        .components
        .into_iter()
        .map(|c| ComponentSummary { node_id: c.node_id, weight: c.weight, anchor: c.anchor, params: c.params })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationReport {
    pub referent: String,
    pub predicate: String,
    /// Node carrying the largest weight for this relation.
    pub node_id: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub action: String,
    pub source: String,
    pub location: Point,
    pub score: f64,
    pub per_relation: Vec<RelationReport>,
    pub mixtures: Vec<Vec<ComponentSummary>>,
    #[serde(skip)]
    pub field: Option<ScoreField>,
}

/// Per-step mixtures, their fields and the combined field.
pub fn ground_tuples(
    scene: &SceneGraph,
    tuples: &[RelationTuple],
    estimator: &Estimator,
    grid: &GridSpec,
) -> Result<(Vec<SpatialMixture>, ScoreField)> {
    if tuples.is_empty() {
        return Err(Error::Domain("nothing to ground: no relation tuples".into()));
    }
    let mixtures = estimator.estimate_all(scene, tuples)?;
    let fields = mixtures.iter().map(|m| score_field(m, grid)).collect::<Result<Vec<_>>>()?;
    Ok((mixtures, combine_score_fields(&fields)?))
}

pub fn ground(
    scene: &SceneGraph,
    parsed: &ParsedInstruction,
    estimator: &Estimator,
    grid: &GridSpec,
) -> Result<Grounding> {
    let tuples = to_relation_tuples(parsed)?;
    let (mixtures, field) = ground_tuples(scene, &tuples, estimator, grid)?;
    let (location, score) = grid_argmax(&field)?;
    let mut per_relation = Vec::with_capacity(tuples.len());
    let mut summaries = Vec::with_capacity(tuples.len());
    for (t, mix) in tuples.iter().zip(&mixtures) {
        let s = summarize(mix)?;
        let best = s
            .iter()
            .fold(None::<&ComponentSummary>, |b, c| match b {
                Some(b) if b.weight >= c.weight => Some(b),
                _ => Some(c),
            })
            .expect("scene is nonempty");
        per_relation.push(RelationReport {
            referent: t.ref_text.clone(),
            predicate: t.pred_text.clone(),
            node_id: best.node_id,
            weight: best.weight,
        });
        summaries.push(s);
    }
    Ok(Grounding {
        action: parsed.action.clone(),
        source: parsed.source.clone(),
        location,
        score,
        per_relation,
        mixtures: summaries,
        field: Some(field),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_grammar;
    use crate::scene::{build_scene_graph, BoundingBox, ObjectNode};

    fn scene() -> SceneGraph {
        let n = |id, name: &str, x: f64, y: f64| {
            ObjectNode::new(id, name, Point::new(x, y), BoundingBox::new(x, y, 0.1, 0.1)).unwrap()
        };
        build_scene_graph(vec![n(0, "chocolate", 0.3, 0.3), n(1, "silver spoon", 0.7, 0.8), n(2, "cyan bowl", 0.8, 0.2)], 1.5)
            .unwrap()
    }

    #[test]
    fn fitted_grounding_satisfies_both_relations() {
        let parsed = parse_grammar("put the cyan bowl above the chocolate and left of the silver spoon").unwrap();
        let g = ground(&scene(), &parsed, &Estimator::Fitted(FittedEstimator::default()), &GridSpec::unit(128)).unwrap();
        assert_eq!(g.action, "put");
        assert_eq!(g.per_relation[0].node_id, 0);
        assert_eq!(g.per_relation[1].node_id, 1);
        assert!(g.location.y > 0.3 + 0.02, "{:?}", g.location);
        assert!(g.location.x < 0.7 - 0.02, "{:?}", g.location);
        assert_eq!(g.score, 1.0);
        let json = serde_json::to_value(&g).unwrap();
        assert!(json.get("location").is_some() && json.get("field").is_none());
        assert_eq!(json["mixtures"][0][0]["mu_d"], serde_json::json!(g.mixtures[0][0].params.mu_d));
    }

    #[test]
    fn mode_names() {
        assert_eq!("learned".parse::<Mode>().unwrap(), Mode::Learned);
        assert!("other".parse::<Mode>().is_err());
        assert_eq!(serde_json::to_string(&Mode::Fitted).unwrap(), "\"fitted\"");
    }
}

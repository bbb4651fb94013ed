//! Scene graphs: object nodes with coordinate, box and feature payloads,
//! joined by rule-derived `near` / `in` edges.

use crate::error::{Error, Result};
use crate::parser::{embed_text, D_TXT};
use crate::polar::Point;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::BTreeMap;
use std::fmt;

/// Width of node visual features.
pub const D_VIZ: usize = D_TXT;

pub const DEFAULT_NEAR_FACTOR: f64 = 1.5;

/// Axis-aligned box as center and size. Serialized as `[cx, cy, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.cx - 0.5 * self.w, self.cx + 0.5 * self.w)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.cy - 0.5 * self.h, self.cy + 0.5 * self.h)
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        let (ax0, ax1) = self.x_range();
        let (ay0, ay1) = self.y_range();
        let (bx0, bx1) = other.x_range();
        let (by0, by1) = other.y_range();
        bx0 >= ax0 && bx1 <= ax1 && by0 >= ay0 && by1 <= ay1
    }

    pub fn contains_point(&self, p: Point) -> bool {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1
    }

    /// True when the two boxes, each grown by `gap` on every side, overlap.
    pub fn overlaps(&self, other: &BoundingBox, gap: f64) -> bool {
        (self.cx - other.cx).abs() < 0.5 * (self.w + other.w) + gap
            && (self.cy - other.cy).abs() < 0.5 * (self.h + other.h) + gap
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from([cx, cy, w, h]: [f64; 4]) -> Self {
        Self { cx, cy, w, h }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.cx, b.cy, b.w, b.h]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNode {
    pub id: u32,
    pub name: String,
    pub coord: Point,
    pub bbox: BoundingBox,
    pub viz: Vec<f64>,
}

impl ObjectNode {
    /// Node whose visual feature is the text embedding of its name.
    pub fn new(id: u32, name: impl Into<String>, coord: Point, bbox: BoundingBox) -> Result<Self> {
        let name = name.into();
        let viz = embed_text(&name)?;
        let node = Self { id, name, coord, bbox, viz };
        node.validate()?;
        Ok(node)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bbox.w > 0.0) || !(self.bbox.h > 0.0) {
            return Err(Error::Scene(format!("node {}: box width and height must be > 0", self.id)));
        }
        if !self.coord.is_finite() || !self.bbox.cx.is_finite() || !self.bbox.cy.is_finite() {
            return Err(Error::Scene(format!("node {}: non-finite geometry", self.id)));
        }
        if self.viz.len() != D_VIZ {
            return Err(Error::Scene(format!(
                "node {}: viz has length {}, expected {D_VIZ}",
                self.id,
                self.viz.len()
            )));
        }
        if self.viz.iter().any(|v| !v.is_finite()) {
            return Err(Error::Scene(format!("node {}: non-finite viz feature", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphPredicate {
    Near,
    In,
}

impl GraphPredicate {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphPredicate::Near => "near",
            GraphPredicate::In => "in",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "near" => Some(GraphPredicate::Near),
            "in" => Some(GraphPredicate::In),
            _ => None,
        }
    }
}

impl fmt::Display for GraphPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub subject_id: u32,
    pub object_id: u32,
    pub predicate: GraphPredicate,
    pub feature: Vec<f64>,
}

impl Edge {
    pub fn new(subject_id: u32, object_id: u32, predicate: GraphPredicate) -> Self {
        let feature = embed_text(predicate.as_str()).expect("predicate names are nonempty");
        Self { subject_id, object_id, predicate, feature }
    }
}

/// `in` when `u` lies inside `v`; otherwise `near` when the centers are
/// within `near_factor` mean box diagonals (inclusive).
pub fn derive_predicate(u: &ObjectNode, v: &ObjectNode, near_factor: f64) -> Option<GraphPredicate> {
    if v.bbox.contains_box(&u.bbox) {
        return Some(GraphPredicate::In);
    }
    let dist = u.bbox.center().dist(v.bbox.center());
    let threshold = near_factor * 0.5 * (u.bbox.diagonal() + v.bbox.diagonal());
    (dist <= threshold).then_some(GraphPredicate::Near)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneGraph {
    pub nodes: BTreeMap<u32, ObjectNode>,
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    /// Validates node payloads, edge endpoints and the one-edge-per-pair rule.
    pub fn new(nodes: Vec<ObjectNode>, edges: Vec<Edge>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for node in nodes {
            node.validate()?;
            let id = node.id;
            if map.insert(id, node).is_some() {
                return Err(Error::Scene(format!("duplicate node id {id}")));
            }
        }
        let graph = Self { nodes: map, edges };
        graph.validate_edges()?;
        Ok(graph)
    }

    fn validate_edges(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (k, e) in self.edges.iter().enumerate() {
            for id in [e.subject_id, e.object_id] {
                if !self.nodes.contains_key(&id) {
                    return Err(Error::Scene(format!("edges[{k}]: node id {id} does not exist")));
                }
            }
            if e.subject_id == e.object_id {
                return Err(Error::Scene(format!("edges[{k}]: self edge on node {}", e.subject_id)));
            }
            if !seen.insert((e.subject_id, e.object_id)) {
                return Err(Error::Scene(format!(
                    "edges[{k}]: second edge for pair ({}, {})",
                    e.subject_id, e.object_id
                )));
            }
            if e.feature.len() != D_TXT {
                return Err(Error::Scene(format!("edges[{k}]: feature length {}", e.feature.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in ascending id order; the row order used everywhere else.
    pub fn ordered_nodes(&self) -> impl Iterator<Item = &ObjectNode> {
        self.nodes.values()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.nodes.keys().position(|&k| k == id)
    }

    pub fn node(&self, id: u32) -> Option<&ObjectNode> {
        self.nodes.get(&id)
    }

    /// Row-major N x N matrix with 1 at (u, v) when an edge u -> v exists.
    pub fn adjacency(&self) -> Vec<Vec<u8>> {
        let n = self.len();
        let mut a = vec![vec![0u8; n]; n];
        for e in &self.edges {
            let (Some(u), Some(v)) = (self.index_of(e.subject_id), self.index_of(e.object_id)) else {
                continue;
            };
            a[u][v] = 1;
        }
        a
    }

    /// `(source index, target index, edge)` for every edge.
    pub fn indexed_edges(&self) -> Vec<(usize, usize, &Edge)> {
        let index: BTreeMap<u32, usize> = self.nodes.keys().enumerate().map(|(i, &k)| (k, i)).collect();
        self.edges
            .iter()
            .map(|e| (index[&e.subject_id], index[&e.object_id], e))
            .collect()
    }

    pub fn to_json(&self) -> Value {
        let mut nodes = Map::new();
        for node in self.nodes.values() {
            nodes.insert(
                node.id.to_string(),
                serde_json::json!({
                    "name": node.name,
                    "coord": node.coord,
                    "box": node.bbox,
                    "viz": node.viz,
                }),
            );
        }
        let edges: Vec<Value> = self
            .edges
            .iter()
            .map(|e| serde_json::json!([e.subject_id, e.predicate.as_str(), e.object_id]))
            .collect();
        serde_json::json!({ "nodes": nodes, "edges": edges })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&self.to_json()).expect("scene serializes")
    }

    /// Parses the scene schema. Missing `viz` is computed from the name and a
    /// missing `edges` list is derived with `near_factor`.
    pub fn from_json(value: &Value, near_factor: f64) -> Result<Self> {
        let wire: WireScene = serde_json::from_value(value.clone())
            .map_err(|e| Error::Scene(format!("scene schema: {e}")))?;
        wire.into_graph(near_factor)
    }

    pub fn from_json_str(text: &str, near_factor: f64) -> Result<Self> {
        let wire: WireScene =
            serde_json::from_str(text).map_err(|e| Error::Scene(format!("scene schema: {e}")))?;
        wire.into_graph(near_factor)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireNode {
    name: String,
    coord: Point,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    #[serde(default)]
    viz: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireScene {
    nodes: BTreeMap<String, WireNode>,
    #[serde(default)]
    edges: Option<Vec<(u32, String, u32)>>,
}

impl WireScene {
    fn into_graph(self, near_factor: f64) -> Result<SceneGraph> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (key, w) in self.nodes {
            let id: u32 = key
                .parse()
                .map_err(|_| Error::Scene(format!("nodes: key {key:?} is not a node id")))?;
            if w.name.trim().is_empty() {
                return Err(Error::Scene(format!("nodes.{key}.name: empty")));
            }
            let viz = match w.viz {
                Some(v) => v,
                None => embed_text(&w.name)?,
            };
            nodes.push(ObjectNode { id, name: w.name, coord: w.coord, bbox: w.bbox, viz });
        }
        match self.edges {
            None => build_scene_graph(nodes, near_factor),
            Some(list) => {
                let mut edges = Vec::with_capacity(list.len());
                for (k, (u, p, v)) in list.into_iter().enumerate() {
                    let predicate = GraphPredicate::parse(&p).ok_or_else(|| {
                        Error::Scene(format!("edges[{k}]: unknown predicate {p:?}"))
                    })?;
                    edges.push(Edge::new(u, v, predicate));
                }
                SceneGraph::new(nodes, edges)
            }
        }
    }
}

/// One edge per ordered pair for which [`derive_predicate`] fires.
pub fn build_scene_graph(objects: Vec<ObjectNode>, near_factor: f64) -> Result<SceneGraph> {
    let mut graph = SceneGraph::new(objects, Vec::new())?;
    let nodes: Vec<&ObjectNode> = graph.nodes.values().collect();
    let mut edges = Vec::new();
    for u in &nodes {
        for v in &nodes {
            if u.id == v.id {
                continue;
            }
            if let Some(p) = derive_predicate(u, v, near_factor) {
                edges.push(Edge::new(u.id, v.id, p));
            }
        }
    }
    graph.edges = edges;
    Ok(graph)
}

/// Serializes to the scene schema and parses the result back.
pub fn roundtrip_serialize(graph: &SceneGraph) -> Result<SceneGraph> {
    SceneGraph::from_json_str(&graph.to_json_string(), DEFAULT_NEAR_FACTOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(id: u32, name: &str, b: BoundingBox) -> ObjectNode {
        ObjectNode::new(id, name, b.center(), b).unwrap()
    }

    #[test]
    fn predicate_rules() {
        let small = node(0, "red cube", BoundingBox::new(0.0, 0.0, 0.1, 0.1));
        let big = node(1, "blue box", BoundingBox::new(0.0, 0.0, 1.0, 1.0));
        assert_eq!(derive_predicate(&small, &big, 1.0), Some(GraphPredicate::In));
        assert_eq!(derive_predicate(&big, &small, 1.0), Some(GraphPredicate::Near));

        let a = node(0, "a", BoundingBox::new(0.0, 0.0, 0.01, 0.01));
        let b = node(1, "b", BoundingBox::new(10.0, 0.0, 0.01, 0.01));
        assert_eq!(derive_predicate(&a, &b, 1.0), None);

        // Diagonal of a 0.1 x 0.1 box is 0.1414; centers 0.14 apart are near.
        let a = node(0, "a", BoundingBox::new(0.0, 0.0, 0.1, 0.1));
        let b = node(1, "b", BoundingBox::new(0.14, 0.0, 0.1, 0.1));
        assert_eq!(derive_predicate(&a, &b, 1.0), Some(GraphPredicate::Near));
        let c = node(2, "c", BoundingBox::new(0.15, 0.0, 0.1, 0.1));
        assert_eq!(derive_predicate(&a, &c, 1.0), None);
    }

    #[test]
    fn boundary_distance_counts_as_near() {
        let a = node(0, "a", BoundingBox::new(0.0, 0.0, 0.3, 0.4));
        let b = node(1, "b", BoundingBox::new(0.5, 0.0, 0.3, 0.4));
        // mean diagonal = 0.5, so the threshold equals the distance exactly.
        assert_eq!(derive_predicate(&a, &b, 1.0), Some(GraphPredicate::Near));
    }

    #[test]
    fn build_and_adjacency() {
        let one = build_scene_graph(vec![node(0, "a", BoundingBox::new(0.5, 0.5, 0.1, 0.1))], 1.5).unwrap();
        assert_eq!((one.len(), one.edges.len()), (1, 0));

        let pair = build_scene_graph(
            vec![
                node(4, "red cube", BoundingBox::new(0.5, 0.5, 0.05, 0.05)),
                node(2, "blue box", BoundingBox::new(0.5, 0.5, 0.3, 0.3)),
            ],
            1.5,
        )
        .unwrap();
        let triples: Vec<_> = pair.edges.iter().map(|e| (e.subject_id, e.predicate, e.object_id)).collect();
        assert!(triples.contains(&(4, GraphPredicate::In, 2)));
        assert!(triples.contains(&(2, GraphPredicate::Near, 4)));
        assert_eq!(pair.adjacency(), vec![vec![0, 1], vec![1, 0]]);

        let far: Vec<_> = (0..4)
            .map(|i| node(i, "x", BoundingBox::new(i as f64 * 10.0, 0.0, 0.1, 0.1)))
            .collect();
        let g = build_scene_graph(far, 1.5).unwrap();
        assert!(g.edges.is_empty());
        assert!(g.adjacency().iter().flatten().all(|&v| v == 0));

        let dup = vec![node(1, "a", BoundingBox::new(0.0, 0.0, 0.1, 0.1)), node(1, "b", BoundingBox::new(1.0, 0.0, 0.1, 0.1))];
        assert!(build_scene_graph(dup, 1.5).is_err());
    }

    #[test]
    fn single_edge_adjacency() {
        let g = SceneGraph::new(
            vec![node(0, "a", BoundingBox::new(0.0, 0.0, 0.1, 0.1)), node(1, "b", BoundingBox::new(1.0, 0.0, 0.1, 0.1))],
            vec![Edge::new(0, 1, GraphPredicate::Near)],
        )
        .unwrap();
        assert_eq!(g.adjacency(), vec![vec![0, 1], vec![0, 0]]);
    }

    #[test]
    fn json_errors_name_the_problem() {
        let missing = r#"{"nodes": {"0": {"name": "a", "coord": [0,0], "box": [0,0,0.1,0.1]}}, "edges": [[0, "near", 7]]}"#;
        let err = SceneGraph::from_json_str(missing, 1.5).unwrap_err().to_string();
        assert!(err.contains("node id 7"), "{err}");

        let bad_pred = r#"{"nodes": {"0": {"name": "a", "coord": [0,0], "box": [0,0,0.1,0.1]}, "1": {"name": "b", "coord": [1,0], "box": [1,0,0.1,0.1]}}, "edges": [[0, "on", 1]]}"#;
        assert!(SceneGraph::from_json_str(bad_pred, 1.5).unwrap_err().to_string().contains("edges[0]"));

        let syntax = "{\"nodes\": {\n \"0\": {\"name\": \"a\", \"coord\": [0,]}}}";
        let err = SceneGraph::from_json_str(syntax, 1.5).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        let zero_box = r#"{"nodes": {"0": {"name": "a", "coord": [0,0], "box": [0,0,0,0.1]}}}"#;
        assert!(SceneGraph::from_json_str(zero_box, 1.5).is_err());
    }

    #[test]
    fn missing_edges_are_derived() {
        let text = r#"{"nodes": {"0": {"name": "red cube", "coord": [0.5,0.5], "box": [0.5,0.5,0.05,0.05]}, "1": {"name": "blue box", "coord": [0.5,0.5], "box": [0.5,0.5,0.3,0.3]}}}"#;
        let g = SceneGraph::from_json_str(text, 1.5).unwrap();
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.nodes[&0].viz, embed_text("red cube").unwrap());
    }

    #[test]
    fn empty_graph_round_trips() {
        let g = SceneGraph::default();
        assert_eq!(roundtrip_serialize(&g).unwrap(), g);
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            boxes in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.4, 0.01f64..0.4, -1e3f64..1e3), 0..7),
            factor in 0.5f64..3.0,
        ) {
            let nodes: Vec<ObjectNode> = boxes
                .iter()
                .enumerate()
                .map(|(i, &(x, y, w, h, jitter))| {
                    let mut n = ObjectNode::new(i as u32 * 3, format!("obj {i}"), Point::new(x + jitter * 1e-9, y), BoundingBox::new(x, y, w, h)).unwrap();
                    n.viz[0] = jitter.sin() / 3.0;
                    n
                })
                .collect();
            let g = build_scene_graph(nodes, factor).unwrap();
            for row in g.adjacency().iter().enumerate() {
                prop_assert_eq!(row.1[row.0], 0);
            }
            prop_assert_eq!(roundtrip_serialize(&g).unwrap(), g);
        }
    }
}

//! Non-learned estimator: per-predicate polar parameters in units of the
//! referent's box diagonal, weights from referent/name similarity.

use crate::error::{Error, Result};
use crate::parser::{canonical_predicate, cosine, RelationTuple};
use crate::polar::{fit_polar_mle, MixtureComponent, PolarParams, SpatialMixture};
use crate::scene::SceneGraph;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

pub const PREDICATE_TABLE_FORMAT: &str = "polar-predicate-table";

/// Polar parameters with `mu_d` in diagonals and `var_d` in squared
/// diagonals of the referent box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredicateTable {
    pub format: String,
    pub entries: BTreeMap<String, PolarParams>,
}

impl Default for PredicateTable {
    fn default() -> Self {
        Self::canonical()
    }
}

impl PredicateTable {
    pub fn canonical() -> Self {
        let directional = [
            ("left", PI),
            ("right", 0.0),
            ("above", FRAC_PI_2),
            ("below", -FRAC_PI_2),
            ("left above", 3.0 * FRAC_PI_4),
            ("right above", FRAC_PI_4),
            ("left below", -3.0 * FRAC_PI_4),
            ("right below", -FRAC_PI_4),
            // +y is away from the viewer.
            ("behind", FRAC_PI_2),
            ("front", -FRAC_PI_2),
        ];
        let mut entries = BTreeMap::new();
        for (name, phi) in directional {
            entries.insert(name.to_string(), PolarParams::new(3.0, 4.0, phi, 4.0).expect("valid"));
        }
        entries.insert("close".into(), PolarParams::new(1.5, 0.25, 0.0, 0.0).expect("valid"));
        entries.insert("far".into(), PolarParams::new(6.0, 9.0, 0.0, 0.0).expect("valid"));
        Self { format: PREDICATE_TABLE_FORMAT.into(), entries }
    }

    /// Maximum-likelihood parameters per predicate from `(d / diag, phi)`
    /// samples. Predicates with fewer than two samples keep their canonical
    /// entry.
    pub fn fit(samples: &BTreeMap<String, Vec<(f64, f64)>>) -> Result<Self> {
        let mut table = Self::canonical();
        for (pred, s) in samples {
            let canon = canonical_predicate(pred).ok_or_else(|| Error::UnknownPredicate(pred.clone()))?;
            if s.len() < 2 {
                continue;
            }
            table.entries.insert(canon.to_string(), fit_polar_mle(s)?);
        }
        Ok(table)
    }

    pub fn get(&self, predicate: &str) -> Result<&PolarParams> {
        canonical_predicate(predicate)
            .and_then(|c| self.entries.get(c))
            .ok_or_else(|| Error::UnknownPredicate(predicate.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        if t.format != PREDICATE_TABLE_FORMAT {
            return Err(Error::Format(format!("unexpected table format {:?}", t.format)));
        }
        for (k, p) in &t.entries {
            if canonical_predicate(k) != Some(k.as_str()) {
                return Err(Error::UnknownPredicate(k.clone()));
            }
            PolarParams::new(p.mu_d, p.var_d, p.mu_phi, p.kappa_phi)?;
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedEstimator {
    pub table: PredicateTable,
    pub temperature: f64,
}

impl Default for FittedEstimator {
    fn default() -> Self {
        Self { table: PredicateTable::canonical(), temperature: 0.1 }
    }
}

impl FittedEstimator {
    pub fn new(table: PredicateTable) -> Self {
        Self { table, ..Default::default() }
    }

    /// One component per node: the predicate's parameters scaled by the
    /// node's box diagonal, weighted by a softmax over name similarity.
    pub fn estimate(&self, scene: &SceneGraph, tuple: &RelationTuple) -> Result<SpatialMixture> {
        if scene.is_empty() {
            return Err(Error::Scene("scene has no objects".into()));
        }
        let base = self.table.get(&tuple.pred_text)?;
        let logits: Vec<f64> = scene.ordered_nodes().map(|n| cosine(&tuple.f_ref, &n.viz) / self.temperature).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let components = scene
            .ordered_nodes()
            .zip(exps)
            .map(|(node, e)| {
                let diag = node.bbox.diagonal();
                Ok(MixtureComponent {
                    weight: e / total,
                    params: PolarParams::new(base.mu_d * diag, base.var_d * diag * diag, base.mu_phi, base.kappa_phi)?,
                    anchor: node.coord,
                    node_id: node.id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpatialMixture::new(components))
    }
}

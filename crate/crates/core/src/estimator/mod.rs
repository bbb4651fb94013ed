//! Spatial-distribution estimators: a learned graph network that predicts
//! one polar component per scene object, and a table-driven fitted variant.

mod fitted;
mod model;
mod network;
mod train;

pub use fitted::{FittedEstimator, PredicateTable, PREDICATE_TABLE_FORMAT};
pub use model::{EstimatorConfig, EstimatorModel, MODEL_FORMAT, MODEL_VERSION};
pub use network::{positional_encode, GraphInputs, WEIGHT_FLOOR};
pub use train::{
    check_gradients, clip_global_norm, loss_and_grad, relative_error, sample_loss, train, train_with_log, Adam,
    EpochStats, GradCheckReport, TrainingLog, TrainingSample,
};

use crate::autodiff::{softplus, Tape};
use crate::error::{Error, Result};
use crate::parser::RelationTuple;
use crate::polar::{polar_log_score, MixtureComponent, PolarParams, Point, SpatialMixture, KAPPA_MAX, VAR_MIN};
use crate::scene::SceneGraph;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Per-node hidden vectors carried from one expression to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub nodes: Array2<f64>,
}

impl EstimatorState {
    pub fn zero(n: usize, d_hidden: usize) -> Self {
        Self { nodes: Array2::zeros((n, d_hidden)) }
    }

    /// Row-major flattening, length N·D_H'.
    pub fn flattened(&self) -> Vec<f64> {
        self.nodes.iter().copied().collect()
    }
}

/// X₀ and E₀ for one relation tuple given the previous state.
pub fn assemble_features(
    scene: &SceneGraph,
    tuple: &RelationTuple,
    prev: &EstimatorState,
    model: &EstimatorModel,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let g = GraphInputs::new(scene, &model.config)?;
    let mut t = Tape::new(&model.params);
    let s = t.constant(prev.nodes.clone());
    let (x, e) = network::assemble_on_tape(&mut t, model, &g, tuple, Some(s))?;
    Ok((t.value(x).clone(), t.value(e).clone()))
}

/// One GPS layer. Edge features pass through unchanged.
pub fn gps_layer_forward(
    model: &EstimatorModel,
    layer: usize,
    graph: &GraphInputs,
    x: &Array2<f64>,
    e: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = model.config.d_hidden();
    let idx = model
        .layout
        .layers
        .get(layer)
        .ok_or_else(|| Error::Shape(format!("layer {layer} out of range")))?;
    if x.dim() != (graph.len(), d) || e.dim() != (graph.src.len(), d) {
        return Err(Error::Shape(format!(
            "layer input X {:?} / E {:?} does not match N={} |E|={} D={d}",
            x.dim(),
            e.dim(),
            graph.len(),
            graph.src.len()
        )));
    }
    let mut t = Tape::new(&model.params);
    let xv = t.constant(x.clone());
    let ev = t.constant(e.clone());
    let out = network::gps_layer_on_tape(&mut t, &model.config, idx, graph, xv, ev);
    Ok((t.value(out).clone(), e.clone()))
}

/// Weight and polar parameters of one component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadOutput {
    pub weight: f64,
    pub params: PolarParams,
}

/// Applies the output activations to raw head values
/// `[weight, mu_d, var_d, inv_kappa, angle_x, angle_y]`.
pub fn activate_heads(pre: [f64; 6]) -> HeadOutput {
    let [w, md, vd, ik, ax, ay] = pre;
    let kappa = 1.0 / softplus(ik).max(1.0 / KAPPA_MAX);
    HeadOutput {
        weight: softplus(w),
        params: PolarParams {
            mu_d: softplus(md),
            var_d: softplus(vd).max(VAR_MIN),
            mu_phi: ay.atan2(ax),
            kappa_phi: kappa,
        },
    }
}

/// Component parameters for every row of the final node matrix.
pub fn predict_heads(model: &EstimatorModel, x_l: &Array2<f64>) -> Result<Vec<HeadOutput>> {
    if x_l.ncols() != model.config.d_hidden() {
        return Err(Error::Shape(format!("row length {} != {}", x_l.ncols(), model.config.d_hidden())));
    }
    let mut t = Tape::new(&model.params);
    let x = t.constant(x_l.clone());
    let h = network::heads_on_tape(&mut t, model, x);
    let col = |v| t.value(v).column(0).to_vec();
    let (w, md, vd, k, mp) = (col(h.weight), col(h.mu_d), col(h.var_d), col(h.kappa), col(h.mu_phi));
    Ok((0..x_l.nrows())
        .map(|j| HeadOutput {
            weight: w[j],
            params: PolarParams { mu_d: md[j], var_d: vd[j], mu_phi: mp[j], kappa_phi: k[j] },
        })
        .collect())
}

/// Runs the estimator over the tuples in order, chaining state.
pub fn estimate_sequence(
    scene: &SceneGraph,
    tuples: &[RelationTuple],
    model: &EstimatorModel,
) -> Result<Vec<(SpatialMixture, EstimatorState)>> {
    if tuples.is_empty() {
        return Err(Error::Domain("no relation tuples to estimate".into()));
    }
    let g = GraphInputs::new(scene, &model.config)?;
    let mut out = Vec::with_capacity(tuples.len());
    let mut state = EstimatorState::zero(g.len(), model.config.d_hidden());
    for tuple in tuples {
        let (mix, next) = estimate_step(&g, tuple, &state, model)?;
        out.push((mix, next.clone()));
        state = next;
    }
    Ok(out)
}

/// One expression on prebuilt graph inputs.
pub fn estimate_step(
    graph: &GraphInputs,
    tuple: &RelationTuple,
    prev: &EstimatorState,
    model: &EstimatorModel,
) -> Result<(SpatialMixture, EstimatorState)> {
    let mut t = Tape::new(&model.params);
    let s = t.constant(prev.nodes.clone());
    let (heads, x) = network::step_on_tape(&mut t, model, graph, tuple, Some(s))?;
    let mix = network::mixture_from_heads(&t, &heads, graph)?;
    Ok((mix, EstimatorState { nodes: t.value(x).clone() }))
}

/// Combined loss `(L, L1, L2)` of one predicted mixture.
pub fn loss_total(theta: &SpatialMixture, x_des: Point, w_des: &[f64], lambda: f64) -> Result<(f64, f64, f64)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let n = theta.components.len();
    if w_des.len() != n || n == 0 {
        return Err(Error::Shape(format!("w_des has length {}, mixture has {n}", w_des.len())));
    }
    let logs: Vec<f64> = theta
        .components
        .iter()
        .map(|c| polar_log_score(x_des, c))
        .collect::<Result<_>>()?;
    let m = logs
        .iter()
        .zip(w_des)
        .filter(|(_, &w)| w > 0.0)
        .fold(f64::NEG_INFINITY, |acc, (&l, _)| acc.max(l));
    if m == f64::NEG_INFINITY {
        return Err(Error::Domain("w_des has no positive entry".into()));
    }
    let s: f64 = logs.iter().zip(w_des).filter(|(_, &w)| w > 0.0).map(|(&l, &w)| w * (l - m).exp()).sum();
    let l1 = -(m + s.ln());
    let total: f64 = theta.components.iter().map(|c| c.weight).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeights);
    }
    let l2 = -theta
        .components
        .iter()
        .zip(w_des)
        .map(|(c, &wd)| wd * (c.weight / total).max(WEIGHT_FLOOR).ln())
        .sum::<f64>()
        / n as f64;
    Ok((lambda * l1 + (1.0 - lambda) * l2, l1, l2))
}

/// Node index carrying the largest predicted weight.
pub fn weight_argmax(mix: &SpatialMixture) -> Option<&MixtureComponent> {
    mix.argmax_weight().map(|i| &mix.components[i])
}

//! Forward pass of the learned estimator, recorded on a [`Tape`] so the same
//! code serves inference and training.

use super::model::{Dense, EstimatorConfig, EstimatorModel, GpsLayerIdx, Mlp};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::parser::{RelationTuple, D_TXT};
use crate::polar::{to_polar, MixtureComponent, PolarParams, Point, SpatialMixture, KAPPA_MAX, VAR_MIN};
use crate::scene::{SceneGraph, D_VIZ};
use ndarray::Array2;
use std::f64::consts::PI;

const LN_EPS: f64 = 1e-5;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Floor on normalized weights inside the cross-entropy term.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// `[c, sin(2^0 πc), cos(2^0 πc), ..., sin(2^(K-1) πc), cos(2^(K-1) πc)]` for
/// each coordinate, x block first.
pub fn positional_encode(coord: Point, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * (2 * k + 1));
    for c in [coord.x, coord.y] {
        out.push(c);
        for f in 0..k {
            let a = (1u64 << f) as f64 * PI * c;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Scene-derived constants shared by every expression of an episode.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub anchors: Vec<Point>,
    pub node_ids: Vec<u32>,
    pub pe: Array2<f64>,
    pub viz: Array2<f64>,
    /// Source and destination row of each edge.
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_feat: Array2<f64>,
}

impl GraphInputs {
    pub fn new(scene: &SceneGraph, config: &EstimatorConfig) -> Result<Self> {
        if scene.is_empty() {
            return Err(Error::Shape("scene has no objects".into()));
        }
        let n = scene.len();
        let pe_dim = config.pe_dim();
        let mut pe = Array2::zeros((n, pe_dim));
        let mut viz = Array2::zeros((n, D_VIZ));
        let mut anchors = Vec::with_capacity(n);
        let mut node_ids = Vec::with_capacity(n);
        for (i, node) in scene.ordered_nodes().enumerate() {
            if node.viz.len() != D_VIZ {
                return Err(Error::Shape(format!("node {} viz has length {}", node.id, node.viz.len())));
            }
            let enc = positional_encode(config.workspace.normalize(node.coord), config.k_freq);
            pe.row_mut(i).assign(&ndarray::ArrayView1::from(&enc));
            viz.row_mut(i).assign(&ndarray::ArrayView1::from(&node.viz));
            anchors.push(node.coord);
            node_ids.push(node.id);
        }
        let edges = scene.indexed_edges();
        let mut edge_feat = Array2::zeros((edges.len(), D_TXT));
        let mut src = Vec::with_capacity(edges.len());
        let mut dst = Vec::with_capacity(edges.len());
        for (k, (u, v, e)) in edges.into_iter().enumerate() {
            edge_feat.row_mut(k).assign(&ndarray::ArrayView1::from(&e.feature));
            src.push(u);
            dst.push(v);
        }
        Ok(Self { anchors, node_ids, pe, viz, src, dst, edge_feat })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

fn dense(t: &mut Tape, x: Var, d: Dense) -> Var {
    let w = t.param(d.w);
    let b = t.param(d.b);
    let xw = t.matmul(x, w);
    t.add_row(xw, b)
}

fn mlp(t: &mut Tape, x: Var, m: Mlp) -> Var {
    let h = dense(t, x, m.first);
    let h = t.relu(h);
    dense(t, h, m.second)
}

fn norm(t: &mut Tape, x: Var, gain: usize, bias: usize) -> Var {
    let z = t.layer_norm_rows(x, LN_EPS);
    let g = t.param(gain);
    let b = t.param(bias);
    let z = t.mul_row(z, g);
    t.add_row(z, b)
}

/// Node matrix X₀ (N x D_H') and edge matrix E₀ (|E| x D_H') for one
/// expression. `prev` is the previous state, or `None` for the zero state.
pub(crate) fn assemble_on_tape(
    t: &mut Tape,
    model: &EstimatorModel,
    g: &GraphInputs,
    tuple: &RelationTuple,
    prev: Option<Var>,
) -> Result<(Var, Var)> {
    let cfg = &model.config;
    let n = g.len();
    let d = cfg.d_hidden();
    if tuple.f_ref.len() != D_TXT || tuple.f_pred.len() != D_TXT {
        return Err(Error::Shape(format!("relation embeddings must have length {D_TXT}")));
    }
    let lay = &model.layout;
    let pe = t.constant(g.pe.clone());
    let viz = t.constant(g.viz.clone());
    let m_viz = t.param(lay.proj_viz);
    let viz = t.matmul(viz, m_viz);
    let f_ref = t.constant(row(&tuple.f_ref));
    let m_ref = t.param(lay.proj_ref);
    let r = t.matmul(f_ref, m_ref);
    let r = t.broadcast_rows(r, n);
    let f_pred = t.constant(row(&tuple.f_pred));
    let m_pred = t.param(lay.proj_pred);
    let p = t.matmul(f_pred, m_pred);
    let p = t.broadcast_rows(p, n);
    let pooled = match prev {
        Some(s) => {
            if t.shape(s) != (n, d) {
                return Err(Error::Shape(format!("state is {:?}, expected ({n}, {d})", t.shape(s))));
            }
            t.max_pool_rows(s)
        }
        None => t.constant(Array2::zeros((1, d))),
    };
    let s = dense(t, pooled, lay.state);
    let s = t.broadcast_rows(s, n);
    let x0 = t.concat_cols(&[pe, viz, r, p, s]);
    let ef = t.constant(g.edge_feat.clone());
    let m_edge = t.param(lay.edge);
    let e0 = t.matmul(ef, m_edge);
    Ok((x0, e0))
}

pub(crate) fn gps_layer_on_tape(
    t: &mut Tape,
    cfg: &EstimatorConfig,
    layer: &GpsLayerIdx,
    g: &GraphInputs,
    x: Var,
    e: Var,
) -> Var {
    let n = g.len();
    let eps = t.param(layer.eps);
    let one_plus_eps = t.add_const(eps, 1.0);
    let mut h = t.mul_scalar(x, one_plus_eps);
    if !g.src.is_empty() {
        let xs = t.gather_rows(x, &g.src);
        let msg = t.add(xs, e);
        let msg = t.relu(msg);
        let agg = t.scatter_add_rows(msg, &g.dst, n);
        h = t.add(h, agg);
    }
    let m = mlp(t, h, layer.gine);

    let q = dense(t, x, layer.q);
    let k = dense(t, x, layer.k);
    let v = dense(t, x, layer.v);
    let dk = cfg.d_hidden() / cfg.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let qh = t.slice_cols(q, hd * dk, dk);
        let kh = t.slice_cols(k, hd * dk, dk);
        let vh = t.slice_cols(v, hd * dk, dk);
        let s = t.matmul_t(qh, kh);
        let s = t.scale(s, scale);
        let a = t.softmax_rows(s);
        heads.push(t.matmul(a, vh));
    }
    let att = t.concat_cols(&heads);
    let att = dense(t, att, layer.o);

    let y = t.add(x, m);
    let y = t.add(y, att);
    let y = norm(t, y, layer.ln1_gain, layer.ln1_bias);
    let f = mlp(t, y, layer.ffn);
    let z = t.add(y, f);
    norm(t, z, layer.ln2_gain, layer.ln2_bias)
}

/// Output head values, each N x 1.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadVars {
    pub weight: Var,
    pub mu_d: Var,
    pub var_d: Var,
    pub kappa: Var,
    pub mu_phi: Var,
}

pub(crate) fn heads_on_tape(t: &mut Tape, model: &EstimatorModel, x: Var) -> HeadVars {
    let lay = &model.layout;
    let w = mlp(t, x, lay.head_weight);
    let weight = t.softplus(w);
    let md = mlp(t, x, lay.head_mu_d);
    let mu_d = t.softplus(md);
    let vd = mlp(t, x, lay.head_var_d);
    let vd = t.softplus(vd);
    let var_d = t.max_const(vd, VAR_MIN);
    let ik = mlp(t, x, lay.head_inv_kappa);
    let ik = t.softplus(ik);
    let ik = t.max_const(ik, 1.0 / KAPPA_MAX);
    let kappa = t.recip(ik);
    let ang = mlp(t, x, lay.head_angle);
    let ax = t.slice_cols(ang, 0, 1);
    let ay = t.slice_cols(ang, 1, 1);
    let mu_phi = t.atan2(ay, ax);
    HeadVars { weight, mu_d, var_d, kappa, mu_phi }
}

/// One full step: features, GPS stack, heads. Returns the heads and the new
/// state (final-layer node matrix).
pub(crate) fn step_on_tape(
    t: &mut Tape,
    model: &EstimatorModel,
    g: &GraphInputs,
    tuple: &RelationTuple,
    prev: Option<Var>,
) -> Result<(HeadVars, Var)> {
    let (mut x, e) = assemble_on_tape(t, model, g, tuple, prev)?;
    for layer in &model.layout.layers {
        x = gps_layer_on_tape(t, &model.config, layer, g, x, e);
    }
    Ok((heads_on_tape(t, model, x), x))
}

pub(crate) fn mixture_from_heads(t: &Tape, heads: &HeadVars, g: &GraphInputs) -> Result<SpatialMixture> {
    let (w, md, vd, k, mp) = (
        t.value(heads.weight),
        t.value(heads.mu_d),
        t.value(heads.var_d),
        t.value(heads.kappa),
        t.value(heads.mu_phi),
    );
    let mut components = Vec::with_capacity(g.len());
    for j in 0..g.len() {
        let params = PolarParams::new(md[[j, 0]], vd[[j, 0]], mp[[j, 0]], k[[j, 0]])?;
        components.push(MixtureComponent {
            weight: w[[j, 0]],
            params,
            anchor: g.anchors[j],
            node_id: g.node_ids[j],
        });
    }
    Ok(SpatialMixture::new(components))
}

/// Returns (L, L1, L2) as 1x1 variables.
pub(crate) fn loss_on_tape(
    t: &mut Tape,
    heads: &HeadVars,
    g: &GraphInputs,
    x_des: Point,
    w_des: &[f64],
    lambda: f64,
) -> (Var, Var, Var) {
    let n = g.len();
    let mut d = Array2::zeros((n, 1));
    let mut phi = Array2::zeros((n, 1));
    for (j, &a) in g.anchors.iter().enumerate() {
        let (dj, pj) = to_polar(x_des, a);
        d[[j, 0]] = dj;
        phi[[j, 0]] = pj;
    }
    let d = t.constant(d);
    let phi = t.constant(phi);

    // log N(d; μ, σ²) = -½ln2π - ½ln σ² - (d-μ)²/(2σ²)
    let diff = t.sub(d, heads.mu_d);
    let sq = t.mul(diff, diff);
    let quad = t.div(sq, heads.var_d);
    let quad = t.scale(quad, -0.5);
    let lv = t.log(heads.var_d);
    let lv = t.scale(lv, -0.5);
    let lg = t.add(quad, lv);
    let lg = t.add_const(lg, -0.5 * LN_2PI);

    // log VM(φ; μ, κ) = κ cos(φ-μ) - ln2π - ln I0(κ)
    let dphi = t.sub(phi, heads.mu_phi);
    let c = t.cos(dphi);
    let kc = t.mul(heads.kappa, c);
    let li0 = t.log_i0(heads.kappa);
    let lvm = t.sub(kc, li0);
    let lvm = t.add_const(lvm, -LN_2PI);

    let log_score = t.add(lg, lvm);
    let lse = t.weighted_log_sum_exp(log_score, w_des);
    let l1 = t.scale(lse, -1.0);

    let total = t.sum_all(heads.weight);
    let wn = t.div_scalar(heads.weight, total);
    let wn = t.max_const(wn, WEIGHT_FLOOR);
    let lw = t.log(wn);
    let target = t.constant(Array2::from_shape_vec((n, 1), w_des.to_vec()).expect("w_des"));
    let ce = t.mul(lw, target);
    let ce = t.sum_all(ce);
    let l2 = t.scale(ce, -1.0 / n as f64);

    let a = t.scale(l1, lambda);
    let b = t.scale(l2, 1.0 - lambda);
    let l = t.add(a, b);
    (l, l1, l2)
}

pub(crate) fn check_targets(g: &GraphInputs, w_des: &[f64], lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if w_des.len() != g.len() {
        return Err(Error::Shape(format!("w_des has length {}, scene has {} nodes", w_des.len(), g.len())));
    }
    if w_des.iter().any(|&w| w < 0.0 || !w.is_finite()) || !(w_des.iter().sum::<f64>() > 0.0) {
        return Err(Error::Domain("w_des must be non-negative with positive mass".into()));
    }
    Ok(())
}

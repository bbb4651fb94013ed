use super::model::{EstimatorConfig, EstimatorModel};
use super::network::{self, GraphInputs};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::parser::RelationTuple;
use crate::polar::Point;
use crate::scene::SceneGraph;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Ground truth for one instruction: a target location and a one-hot
/// referent vector per relation tuple.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub scene: SceneGraph,
    pub tuples: Vec<RelationTuple>,
    pub x_des: Vec<Point>,
    pub w_des: Vec<Vec<f64>>,
}

impl TrainingSample {
    pub fn validate(&self) -> Result<()> {
        let m = self.tuples.len();
        if m == 0 || self.x_des.len() != m || self.w_des.len() != m {
            return Err(Error::Shape(format!(
                "sample has {m} tuples, {} targets and {} weight vectors",
                self.x_des.len(),
                self.w_des.len()
            )));
        }
        for w in &self.w_des {
            let ones = w.iter().filter(|&&v| v == 1.0).count();
            let zeros = w.iter().filter(|&&v| v == 0.0).count();
            if w.len() != self.scene.len() || ones != 1 || ones + zeros != w.len() {
                return Err(Error::Domain("w_des must be one-hot over the scene nodes".into()));
            }
        }
        if self.x_des.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("x_des must be finite".into()));
        }
        Ok(())
    }
}

/// Summed loss over the sample's tuples and its gradient. The third value
/// fingerprints the piecewise-smooth region the forward pass landed in.
pub fn loss_and_grad(model: &EstimatorModel, sample: &TrainingSample) -> Result<(f64, Vec<Array2<f64>>, u64)> {
    let g = GraphInputs::new(&sample.scene, &model.config)?;
    let mut t = Tape::new(&model.params);
    let total = sequence_loss(&mut t, model, &g, sample)?;
    let value = t.scalar(total);
    let grads = t.backward(total);
    Ok((value, grads, t.kink_signature()))
}

/// Forward-only variant of [`loss_and_grad`].
pub fn sample_loss(model: &EstimatorModel, sample: &TrainingSample) -> Result<(f64, u64)> {
    let g = GraphInputs::new(&sample.scene, &model.config)?;
    loss_with_inputs(model, &g, sample)
}

fn loss_with_inputs(model: &EstimatorModel, g: &GraphInputs, sample: &TrainingSample) -> Result<(f64, u64)> {
    let mut t = Tape::new(&model.params);
    let total = sequence_loss(&mut t, model, g, sample)?;
    Ok((t.scalar(total), t.kink_signature()))
}

fn sequence_loss(
    t: &mut Tape,
    model: &EstimatorModel,
    g: &GraphInputs,
    sample: &TrainingSample,
) -> Result<crate::autodiff::Var> {
    sample.validate()?;
    let lambda = model.config.lambda;
    let mut state = None;
    let mut total = None;
    for (i, tuple) in sample.tuples.iter().enumerate() {
        network::check_targets(g, &sample.w_des[i], lambda)?;
        let (heads, x) = network::step_on_tape(t, model, g, tuple, state)?;
        let (l, _, _) = network::loss_on_tape(t, &heads, g, sample.x_des[i], &sample.w_des[i], lambda);
        total = Some(match total {
            Some(acc) => t.add(acc, l),
            None => l,
        });
        state = Some(x);
    }
    Ok(total.expect("at least one tuple"))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &[Array2<f64>], learning_rate: f64) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.dim())).collect::<Vec<_>>();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for k in 0..params.len() {
            let g = &grads[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(&mut params[k]).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample loss observed during the epoch's updates.
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean per-sample loss of the freshly initialized model.
    pub initial_loss: f64,
    /// Mean per-sample loss of the trained model.
    pub final_loss: f64,
    pub epochs: Vec<EpochStats>,
}

pub fn train(data: &[TrainingSample], config: &EstimatorConfig) -> Result<EstimatorModel> {
    train_with_log(data, config, |_| {}).map(|(m, _)| m)
}

fn mean_loss(model: &EstimatorModel, data: &[TrainingSample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in data {
        sum += sample_loss(model, s)?.0;
    }
    Ok(sum / data.len() as f64)
}

/// Trains a fresh model with per-sample Adam updates. `on_epoch` sees each
/// epoch's statistics as they complete.
pub fn train_with_log(
    data: &[TrainingSample],
    config: &EstimatorConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(EstimatorModel, TrainingLog)> {
    if data.is_empty() {
        return Err(Error::Domain("training data is empty".into()));
    }
    for s in data {
        s.validate()?;
    }
    let mut model = EstimatorModel::new(config.clone())?;
    let mut log = TrainingLog { initial_loss: mean_loss(&model, data)?, ..Default::default() };
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let (loss, mut grads, _) = loss_and_grad(&model, &data[i])?;
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence(format!("non-finite loss or gradient at epoch {epoch}, sample {i}")));
            }
            sum += loss;
            clip_global_norm(&mut grads, config.grad_clip);
            adam.update(&mut model.params, &grads);
        }
        let stats = EpochStats { epoch, mean_loss: sum / data.len() as f64 };
        on_epoch(&stats);
        log.epochs.push(stats);
    }
    log.final_loss = mean_loss(&model, data)?;
    if !log.final_loss.is_finite() {
        return Err(Error::Divergence("final training loss is not finite".into()));
    }
    Ok((model, log))
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries where both step sizes straddled a ReLU/clamp/max-pool kink.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

/// Relative error with a floor on the denominator so entries whose true
/// gradient vanishes compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference check of every scalar parameter (or every `stride`-th
/// one) at step `h`. When the forward pass at `+h` and `-h` crosses a kink
/// the check retries at `h / 100` and skips the entry if that also crosses.
pub fn check_gradients(
    model: &mut EstimatorModel,
    sample: &TrainingSample,
    h: f64,
    stride: usize,
) -> Result<GradCheckReport> {
    let (_, grads, base_sig) = loss_and_grad(model, sample)?;
    // Parameters do not enter the graph inputs, so they are built once.
    let g = GraphInputs::new(&sample.scene, &model.config)?;
    let mut report = GradCheckReport { checked: 0, skipped_kinks: 0, max_rel_error: 0.0, worst_param: String::new() };
    let names = model.param_names().to_vec();
    let mut counter = 0usize;
    for k in 0..grads.len() {
        for idx in 0..grads[k].len() {
            counter += 1;
            if !(counter - 1).is_multiple_of(stride.max(1)) {
                continue;
            }
            let analytic = grads[k].as_slice().expect("contiguous")[idx];
            let mut numeric = None;
            for step in [h, h / 100.0] {
                let orig = model.params[k].as_slice().expect("contiguous")[idx];
                model.params[k].as_slice_mut().expect("contiguous")[idx] = orig + step;
                let (lp, sp) = loss_with_inputs(model, &g, sample)?;
                model.params[k].as_slice_mut().expect("contiguous")[idx] = orig - step;
                let (lm, sm) = loss_with_inputs(model, &g, sample)?;
                model.params[k].as_slice_mut().expect("contiguous")[idx] = orig;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((lp - lm) / (2.0 * step));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                report.skipped_kinks += 1;
                continue;
            };
            report.checked += 1;
            let err = relative_error(analytic, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{idx}]", names[k]);
            }
        }
    }
    Ok(report)
}

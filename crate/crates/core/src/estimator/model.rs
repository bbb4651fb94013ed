use crate::error::{Error, Result};
use crate::field::Bounds;
use crate::parser::D_TXT;
use crate::scene::D_VIZ;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MODEL_FORMAT: &str = "polar-grounding-estimator";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Highest positional-encoding frequency index.
    pub k_freq: usize,
    /// Width of each projected feature block.
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    /// Mix between the location likelihood and the weight cross-entropy.
    pub lambda: f64,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub workspace: Bounds,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            k_freq: 4,
            d_h: 32,
            layers: 2,
            heads: 2,
            lambda: 0.5,
            seed: 0,
            epochs: 40,
            learning_rate: 1e-3,
            grad_clip: 5.0,
            workspace: Bounds::UNIT,
        }
    }
}

impl EstimatorConfig {
    /// Length of the positional encoding of one coordinate pair.
    pub fn pe_dim(&self) -> usize {
        2 * (2 * self.k_freq + 1)
    }

    /// Node feature width: four projected blocks plus the positional encoding.
    pub fn d_hidden(&self) -> usize {
        4 * self.d_h + self.pe_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_freq == 0 || self.d_h == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("k_freq, d_h, layers and heads must be positive".into()));
        }
        if !self.d_hidden().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} attention heads",
                self.d_hidden(),
                self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be > 0".into()));
        }
        let b = &self.workspace;
        if !(b.x_max > b.x_min && b.y_max > b.y_min) {
            return Err(Error::Config("workspace bounds are empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Mlp {
    pub first: Dense,
    pub second: Dense,
}

#[derive(Debug, Clone)]
pub(crate) struct GpsLayerIdx {
    pub eps: usize,
    pub gine: Mlp,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub ffn: Mlp,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub proj_viz: usize,
    pub proj_ref: usize,
    pub proj_pred: usize,
    pub state: Dense,
    pub edge: usize,
    pub layers: Vec<GpsLayerIdx>,
    pub head_weight: Mlp,
    pub head_mu_d: Mlp,
    pub head_var_d: Mlp,
    pub head_inv_kappa: Mlp,
    pub head_angle: Mlp,
}

enum Init {
    /// Uniform in ±1/sqrt(fan_in).
    Uniform { fan_in: usize },
    Fill(f64),
}

struct Spec {
    name: String,
    shape: (usize, usize),
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<Spec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.specs.push(Spec { name, shape, init });
        self.specs.len() - 1
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.add(name.to_string(), (rows, cols), Init::Uniform { fan_in: rows })
    }

    fn dense(&mut self, name: &str, input: usize, output: usize) -> Dense {
        let w = self.add(format!("{name}.weight"), (input, output), Init::Uniform { fan_in: input });
        let b = self.add(format!("{name}.bias"), (1, output), Init::Uniform { fan_in: input });
        Dense { w, b }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: usize, output: usize) -> Mlp {
        Mlp {
            first: self.dense(&format!("{name}.0"), input, hidden),
            second: self.dense(&format!("{name}.1"), hidden, output),
        }
    }

    fn fill(&mut self, name: &str, cols: usize, value: f64) -> usize {
        self.add(name.to_string(), (1, cols), Init::Fill(value))
    }
}

/// Builds the parameter order. Weights are stored input-major (`x · W`).
fn layout_for(cfg: &EstimatorConfig) -> (Layout, Vec<Spec>) {
    let dh = cfg.d_h;
    let d = cfg.d_hidden();
    let mut b = LayoutBuilder::default();
    let proj_viz = b.matrix("proj.viz", D_VIZ, dh);
    let proj_ref = b.matrix("proj.ref", D_TXT, dh);
    let proj_pred = b.matrix("proj.pred", D_TXT, dh);
    let state = b.dense("state", d, dh);
    let edge = b.matrix("edge.proj", D_TXT, d);
    let layers = (0..cfg.layers)
        .map(|l| {
            let p = format!("gps.{l}");
            GpsLayerIdx {
                eps: b.fill(&format!("{p}.gine.eps"), 1, 0.0),
                gine: b.mlp(&format!("{p}.gine.mlp"), d, d, d),
                q: b.dense(&format!("{p}.attn.q"), d, d),
                k: b.dense(&format!("{p}.attn.k"), d, d),
                v: b.dense(&format!("{p}.attn.v"), d, d),
                o: b.dense(&format!("{p}.attn.o"), d, d),
                ln1_gain: b.fill(&format!("{p}.norm1.gain"), d, 1.0),
                ln1_bias: b.fill(&format!("{p}.norm1.bias"), d, 0.0),
                ffn: b.mlp(&format!("{p}.ffn"), d, d, d),
                ln2_gain: b.fill(&format!("{p}.norm2.gain"), d, 1.0),
                ln2_bias: b.fill(&format!("{p}.norm2.bias"), d, 0.0),
            }
        })
        .collect();
    let layout = Layout {
        proj_viz,
        proj_ref,
        proj_pred,
        state,
        edge,
        layers,
        head_weight: b.mlp("head.weight", d, d, 1),
        head_mu_d: b.mlp("head.mu_d", d, d, 1),
        head_var_d: b.mlp("head.var_d", d, d, 1),
        head_inv_kappa: b.mlp("head.inv_kappa", d, d, 1),
        head_angle: b.mlp("head.angle", d, d, 2),
    };
    (layout, b.specs)
}

/// All learnable parameters of the spatial-distribution estimator.
#[derive(Debug, Clone)]
pub struct EstimatorModel {
    pub config: EstimatorConfig,
    pub(crate) layout: Layout,
    names: Vec<String>,
    pub(crate) params: Vec<Array2<f64>>,
}

impl PartialEq for EstimatorModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.params == other.params
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireParam {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireModel {
    format: String,
    version: u32,
    config: EstimatorConfig,
    params: Vec<WireParam>,
}

impl EstimatorModel {
    /// Fresh model with weights drawn from `config.seed`.
    pub fn new(config: EstimatorConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout_for(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let value = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Array2::from_shape_fn(spec.shape, |_| rng.gen_range(-bound..bound))
                }
                Init::Fill(v) => Array2::from_elem(spec.shape, v),
            };
            names.push(spec.name);
            params.push(value);
        }
        Ok(Self { config, layout, names, params })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn to_json_string(&self) -> String {
        let wire = WireModel {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, p)| WireParam {
                    name: name.clone(),
                    shape: [p.nrows(), p.ncols()],
                    data: p.iter().copied().collect(),
                })
                .collect(),
        };
        serde_json::to_string(&wire).expect("model serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let wire: WireModel = serde_json::from_str(text)?;
        if wire.format != MODEL_FORMAT {
            return Err(Error::Format(format!("unexpected model format {:?}", wire.format)));
        }
        if wire.version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", wire.version)));
        }
        let mut model = Self::new(wire.config)?;
        if wire.params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "model file has {} parameters, config needs {}",
                wire.params.len(),
                model.params.len()
            )));
        }
        for (k, p) in wire.params.into_iter().enumerate() {
            let expected = (model.params[k].nrows(), model.params[k].ncols());
            if p.name != model.names[k] || (p.shape[0], p.shape[1]) != expected {
                return Err(Error::Format(format!(
                    "parameter {k}: got {} {:?}, expected {} {:?}",
                    p.name, p.shape, model.names[k], expected
                )));
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("parameter {} has non-finite entries", p.name)));
            }
            model.params[k] = Array2::from_shape_vec(expected, p.data)
                .map_err(|e| Error::Format(format!("parameter {}: {e}", p.name)))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

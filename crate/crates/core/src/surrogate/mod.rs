//! Branched sine-activated MLP that predicts LCP from cell statistics.
//!
//! The 15 input features (4 means, 10 packed covariances, 1 isovalue) feed
//! three separate encoder branches. Their outputs are concatenated and
//! decoded by a fourth stack ending in a single sigmoid unit.
//!
//! Activations: the first layer of each branch is `sin(omega0 * z)`, every
//! other layer except the last decoder layer is `sin(z)`, and the last
//! decoder layer is a sigmoid.
//!
//! The network is generic over the float type: models are trained and
//! stored in `f32`, while [`gradient_check`] runs the same code in `f64`.

mod io;
mod train;

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellstats::CellStatsGrid;
use crate::pmc::LcpField;

pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{
    cross_validate, fold_partition, gradient_check, gradient_check_with, loss_mse, train,
    train_with, FoldMetrics,
    GradCheck, TrainConfig,
};

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("training diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    VersionMismatch(u32),
    #[error("model file truncated")]
    TruncatedFile,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SurrogateError>;

pub const MEAN_INPUTS: usize = 4;
pub const COV_INPUTS: usize = 10;
pub const ISO_INPUTS: usize = 1;
pub const FEATURES: usize = MEAN_INPUTS + COV_INPUTS + ISO_INPUTS;

/// Frequency of every sine layer after the first layer of a branch.
pub const HIDDEN_OMEGA: f64 = 1.0;

/// Float types the network runs in.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::FromPrimitive
    + Send
    + Sync
    + Debug
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
fn real<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

/// Layer widths. Branch lists exclude the fixed input widths (4, 10, 1);
/// `decoder_layers` starts with its input width, which must equal the sum
/// of the branch output widths, and ends with 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub mean_layers: Vec<usize>,
    pub cov_layers: Vec<usize>,
    pub iso_layers: Vec<usize>,
    pub decoder_layers: Vec<usize>,
    pub omega0: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            mean_layers: vec![128, 128],
            cov_layers: vec![128, 128],
            iso_layers: vec![128, 128],
            decoder_layers: vec![384, 256, 128, 1],
            omega0: 30.0,
        }
    }
}

impl MlpConfig {
    /// Same topology with every branch width `branch`, decoder hidden widths given.
    pub fn uniform(branch: &[usize], decoder_hidden: &[usize]) -> Self {
        let out = branch.last().copied().unwrap_or(0);
        let mut decoder = vec![3 * out];
        decoder.extend_from_slice(decoder_hidden);
        decoder.push(1);
        Self {
            mean_layers: branch.to_vec(),
            cov_layers: branch.to_vec(),
            iso_layers: branch.to_vec(),
            decoder_layers: decoder,
            omega0: 30.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SurrogateError::InvalidConfig(m));
        for (name, l) in [
            ("mean_layers", &self.mean_layers),
            ("cov_layers", &self.cov_layers),
            ("iso_layers", &self.iso_layers),
        ] {
            if l.is_empty() || l.contains(&0) {
                return bad(format!("{name} must be non-empty with widths >= 1"));
            }
        }
        let d = &self.decoder_layers;
        if d.len() < 2 || d.contains(&0) {
            return bad("decoder_layers needs an input and an output width, all >= 1".into());
        }
        let branch_sum =
            self.mean_layers.last().unwrap() + self.cov_layers.last().unwrap() + self.iso_layers.last().unwrap();
        if d[0] != branch_sum {
            return bad(format!(
                "decoder input width {} != branch output sum {branch_sum}",
                d[0]
            ));
        }
        if *d.last().unwrap() != 1 {
            return bad("final decoder width must be 1".into());
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return bad("omega0 must be positive".into());
        }
        Ok(())
    }

    /// (input, output) shape of every layer in declaration order:
    /// mean branch, cov branch, iso branch, decoder.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        for (input, widths) in [
            (MEAN_INPUTS, &self.mean_layers),
            (COV_INPUTS, &self.cov_layers),
            (ISO_INPUTS, &self.iso_layers),
        ] {
            let mut fan_in = input;
            for &w in widths {
                shapes.push((fan_in, w));
                fan_in = w;
            }
        }
        for pair in self.decoder_layers.windows(2) {
            shapes.push((pair[0], pair[1]));
        }
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sine(f64),
    Sigmoid,
}

/// Fully connected layer, `w` is `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub act: Activation,
}

impl<F: Real> Layer<F> {
    fn pre_activation(&self, x: &ArrayView2<F>) -> Array2<F> {
        let mut z = x.dot(&self.w.t());
        for mut row in z.rows_mut() {
            ndarray::Zip::from(&mut row).and(&self.b).for_each(|a, &b| *a = *a + b);
        }
        z
    }

    fn activate(&self, z: &Array2<F>) -> Array2<F> {
        match self.act {
            Activation::Sine(omega) => {
                let omega: F = real(omega);
                z.mapv(|v| (omega * v).sin())
            }
            Activation::Sigmoid => z.mapv(|v| F::one() / (F::one() + (-v).exp())),
        }
    }
}

/// Branched MLP. Layers are grouped per stack in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub config: MlpConfig,
    pub mean: Vec<Layer<F>>,
    pub cov: Vec<Layer<F>>,
    pub iso: Vec<Layer<F>>,
    pub decoder: Vec<Layer<F>>,
}

/// The deliverable model, trained and stored in single precision.
pub type MlpModel = Mlp<f32>;

/// Per-layer cache of one forward pass: layer input and pre-activation.
pub(crate) struct Trace<F> {
    pub(crate) inputs: Vec<Array2<F>>,
    pub(crate) pre: Vec<Array2<F>>,
    pub(crate) output: Array1<F>,
}

impl<F: Real> Mlp<F> {
    pub fn layers(&self) -> impl Iterator<Item = &Layer<F>> {
        self.mean.iter().chain(&self.cov).chain(&self.iso).chain(&self.decoder)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<F>> {
        self.mean
            .iter_mut()
            .chain(self.cov.iter_mut())
            .chain(self.iso.iter_mut())
            .chain(self.decoder.iter_mut())
    }

    /// Builds a model with the given parameters, in declaration order.
    pub(crate) fn from_layers(config: MlpConfig, params: Vec<(Array2<F>, Array1<F>)>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if params.len() != shapes.len() {
            return Err(SurrogateError::ShapeMismatch(format!(
                "{} layers for {} shapes",
                params.len(),
                shapes.len()
            )));
        }
        let n_mean = config.mean_layers.len();
        let n_cov = config.cov_layers.len();
        let n_iso = config.iso_layers.len();
        let n_dec = config.decoder_layers.len() - 1;
        let mut layers = Vec::with_capacity(shapes.len());
        for (k, ((w, b), &(fan_in, fan_out))) in params.into_iter().zip(&shapes).enumerate() {
            if w.dim() != (fan_out, fan_in) || b.len() != fan_out {
                return Err(SurrogateError::ShapeMismatch(format!(
                    "layer {k}: expected ({fan_out}, {fan_in})"
                )));
            }
            let branch_first = [0, n_mean, n_mean + n_cov].contains(&k);
            let last = k == shapes.len() - 1;
            let act = if last {
                Activation::Sigmoid
            } else if branch_first && k < n_mean + n_cov + n_iso {
                Activation::Sine(config.omega0)
            } else {
                Activation::Sine(HIDDEN_OMEGA)
            };
            layers.push(Layer { w, b, act });
        }
        let decoder = layers.split_off(n_mean + n_cov + n_iso);
        debug_assert_eq!(decoder.len(), n_dec);
        let iso = layers.split_off(n_mean + n_cov);
        let cov = layers.split_off(n_mean);
        Ok(Self {
            config,
            mean: layers,
            cov,
            iso,
            decoder,
        })
    }

    /// Applies `f` to every weight and bias, keeping the structure.
    pub fn map<G: Real>(&self, f: impl Fn(F) -> G) -> Mlp<G> {
        let conv = |l: &Layer<F>| Layer {
            w: l.w.mapv(&f),
            b: l.b.mapv(&f),
            act: l.act,
        };
        Mlp {
            config: self.config.clone(),
            mean: self.mean.iter().map(conv).collect(),
            cov: self.cov.iter().map(conv).collect(),
            iso: self.iso.iter().map(conv).collect(),
            decoder: self.decoder.iter().map(conv).collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Batched forward pass over rows of 15 features.
    pub fn forward_batch(&self, x: ArrayView2<F>) -> Array1<F> {
        self.forward_traced(x, false).output
    }

    pub(crate) fn forward_traced(&self, x: ArrayView2<F>, keep: bool) -> Trace<F> {
        let mut trace = Trace {
            inputs: Vec::new(),
            pre: Vec::new(),
            output: Array1::zeros(0),
        };
        let run = |layers: &[Layer<F>], input: ArrayView2<F>, trace: &mut Trace<F>| {
            let mut a = input.to_owned();
            for layer in layers {
                let z = layer.pre_activation(&a.view());
                let next = layer.activate(&z);
                if keep {
                    trace.inputs.push(a);
                    trace.pre.push(z);
                }
                a = next;
            }
            a
        };
        let m = run(&self.mean, x.slice(s![.., 0..MEAN_INPUTS]), &mut trace);
        let c = run(
            &self.cov,
            x.slice(s![.., MEAN_INPUTS..MEAN_INPUTS + COV_INPUTS]),
            &mut trace,
        );
        let i = run(&self.iso, x.slice(s![.., MEAN_INPUTS + COV_INPUTS..FEATURES]), &mut trace);
        let latent = ndarray::concatenate(Axis(1), &[m.view(), c.view(), i.view()])
            .expect("branch outputs share the batch dimension");
        let out = run(&self.decoder, latent.view(), &mut trace);
        trace.output = out.index_axis_move(Axis(1), 0);
        trace
    }

    /// Predicted LCP of one feature vector.
    pub fn forward(&self, features: &[F]) -> Result<F> {
        if features.len() != FEATURES {
            return Err(SurrogateError::ShapeMismatch(format!(
                "expected {FEATURES} features, got {}",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(SurrogateError::NonFiniteInput);
        }
        let x = ArrayView2::from_shape((1, FEATURES), features).expect("length checked");
        Ok(self.forward_batch(x)[0])
    }
}

/// Uniform init: first branch layers in `±1/fan_in`, every other layer in
/// `±sqrt(6/fan_in)/omega` for that layer's sine frequency; zero biases.
pub fn init_model(config: &MlpConfig, seed: u64) -> Result<MlpModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = init_bounds(config);
    let params = config
        .layer_shapes()
        .into_iter()
        .zip(bounds)
        .map(|((fan_in, fan_out), bound)| {
            let bound = bound as f32;
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..=bound));
            (w, Array1::zeros(fan_out))
        })
        .collect();
    Mlp::from_layers(config.clone(), params)
}

/// Weight bound of every layer in declaration order.
pub fn init_bounds(config: &MlpConfig) -> Vec<f64> {
    let n_mean = config.mean_layers.len();
    let n_cov = config.cov_layers.len();
    config
        .layer_shapes()
        .into_iter()
        .enumerate()
        .map(|(k, (fan_in, _))| {
            if k == 0 || k == n_mean || k == n_mean + n_cov {
                1.0 / fan_in as f64
            } else {
                (6.0 / fan_in as f64).sqrt() / HIDDEN_OMEGA
            }
        })
        .collect()
}

/// Feature row of a cell for one isovalue.
pub fn cell_features(cell: &crate::cellstats::CellGaussian, isovalue: f64) -> [f32; FEATURES] {
    let mut f = [0.0f32; FEATURES];
    for (dst, src) in f.iter_mut().zip(cell.features()) {
        *dst = src as f32;
    }
    f[FEATURES - 1] = isovalue as f32;
    f
}

const PREDICT_CHUNK: usize = 2048;

/// Surrogate LCP of every cell.
pub fn predict_field(model: &MlpModel, stats: &CellStatsGrid, isovalue: f64) -> Result<LcpField> {
    model.config.validate()?;
    if !isovalue.is_finite() || stats.cells.iter().any(|c| !c.is_finite()) {
        return Err(SurrogateError::NonFiniteInput);
    }
    let mut field = LcpField::zeros(stats.cells_w, stats.cells_h);
    crate::par::for_each_chunk(&mut field.probs, PREDICT_CHUNK, |chunk, out| {
        let start = chunk * PREDICT_CHUNK;
        let mut x = Array2::<f32>::zeros((out.len(), FEATURES));
        for (j, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            let f = cell_features(&stats.cells[start + j], isovalue);
            row.assign(&ndarray::ArrayView1::from(&f[..]));
        }
        let p = model.forward_batch(x.view());
        out.copy_from_slice(p.as_slice().expect("contiguous output"));
    });
    Ok(field)
}

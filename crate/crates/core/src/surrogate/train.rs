use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_model, real, Activation, Layer, Mlp, MlpConfig, MlpModel, Real, Result, SurrogateError, Trace, FEATURES};
use crate::cellstats::TrainingSample;
use crate::evalbench::median;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub folds: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            folds: 5,
            batch_size: 1024,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(SurrogateError::InvalidConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SurrogateError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Squared error and its derivative with respect to `p_hat`.
pub fn loss_mse(p_hat: f64, p: f64) -> (f64, f64) {
    let d = p_hat - p;
    (d * d, 2.0 * d)
}

type Grads<F> = Vec<(Array2<F>, Array1<F>)>;

fn activation_grad<F: Real>(act: Activation, z: &Array2<F>, mut upstream: Array2<F>) -> Array2<F> {
    match act {
        Activation::Sine(omega) => {
            let omega: F = real(omega);
            ndarray::Zip::from(&mut upstream)
                .and(z)
                .for_each(|g, &z| *g = *g * omega * (omega * z).cos());
        }
        Activation::Sigmoid => {
            ndarray::Zip::from(&mut upstream).and(z).for_each(|g, &z| {
                let s = F::one() / (F::one() + (-z).exp());
                *g = *g * s * (F::one() - s);
            });
        }
    }
    upstream
}

/// Backpropagates through one stack whose caches start at `first` in the
/// trace. Returns the gradient with respect to the stack input, unless
/// `need_input` is false.
fn back_stack<F: Real>(
    layers: &[Layer<F>],
    trace: &Trace<F>,
    first: usize,
    mut upstream: Array2<F>,
    grads: &mut [Option<(Array2<F>, Array1<F>)>],
    need_input: bool,
) -> Option<Array2<F>> {
    for (j, layer) in layers.iter().enumerate().rev() {
        let k = first + j;
        let dz = activation_grad(layer.act, &trace.pre[k], upstream);
        let dw = dz.t().dot(&trace.inputs[k]);
        let db = dz.sum_axis(Axis(0));
        grads[k] = Some((dw, db));
        if j == 0 && !need_input {
            return None;
        }
        upstream = dz.dot(&layer.w);
    }
    Some(upstream)
}

/// Gradients of `Σ d_out[i] * output[i]` for every layer in declaration order.
pub(crate) fn backward<F: Real>(model: &Mlp<F>, trace: &Trace<F>, d_out: &Array1<F>) -> Grads<F> {
    let n_mean = model.mean.len();
    let n_cov = model.cov.len();
    let n_iso = model.iso.len();
    let mut grads: Vec<Option<(Array2<F>, Array1<F>)>> = vec![None; n_mean + n_cov + n_iso + model.decoder.len()];
    let upstream = d_out.clone().insert_axis(Axis(1));
    let d_latent = back_stack(&model.decoder, trace, n_mean + n_cov + n_iso, upstream, &mut grads, true)
        .expect("requested input gradient");
    let w_mean = model.mean.last().unwrap().w.nrows();
    let w_cov = model.cov.last().unwrap().w.nrows();
    let split = [(0, w_mean), (w_mean, w_mean + w_cov), (w_mean + w_cov, d_latent.ncols())];
    for ((layers, first), (lo, hi)) in [(&model.mean, 0), (&model.cov, n_mean), (&model.iso, n_mean + n_cov)]
        .into_iter()
        .zip(split)
    {
        let part = d_latent.slice(ndarray::s![.., lo..hi]).to_owned();
        back_stack(layers, trace, first, part, &mut grads, false);
    }
    grads.into_iter().map(|g| g.expect("every layer visited")).collect()
}

struct Adam<F> {
    m: Grads<F>,
    v: Grads<F>,
    step: i32,
    lr: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<F: Real> Adam<F> {
    fn new(model: &Mlp<F>, lr: f64) -> Self {
        let zeros: Grads<F> = model
            .layers()
            .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.len())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
        }
    }

    fn update(&mut self, model: &mut Mlp<F>, grads: &Grads<F>) {
        self.step += 1;
        let (b1, b2): (F, F) = (real(BETA1), real(BETA2));
        let one = F::one();
        let corr1 = real::<F>(1.0 - BETA1.powi(self.step));
        let corr2 = real::<F>(1.0 - BETA2.powi(self.step));
        let lr: F = real(self.lr);
        let eps: F = real(ADAM_EPS);
        let step = |p: &mut F, m: &mut F, v: &mut F, g: F| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in model
            .layers_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(&mut layer.w)
                .and(mw)
                .and(vw)
                .and(gw)
                .for_each(|p, m, v, &g| step(p, m, v, g));
            ndarray::Zip::from(&mut layer.b)
                .and(mb)
                .and(vb)
                .and(gb)
                .for_each(|p, m, v, &g| step(p, m, v, g));
        }
    }
}

fn to_arrays(samples: &[TrainingSample]) -> (Array2<f32>, Array1<f32>) {
    let x = Array2::from_shape_fn((samples.len(), FEATURES), |(i, j)| samples[i].0[j]);
    let y = samples.iter().map(|s| s.lcp()).collect();
    (x, y)
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    samples: &[TrainingSample],
    mcfg: &MlpConfig,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(MlpModel, Vec<f64>)> {
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(SurrogateError::EmptyTrainingSet);
    }
    let mut model = init_model(mcfg, tcfg.seed)?;
    let (x, y) = to_arrays(samples);
    let mut adam = Adam::new(&model, tcfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(tcfg.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb = y.select(Axis(0), batch);
            let trace = model.forward_traced(xb.view(), true);
            let residual = &trace.output - &yb;
            total += residual.iter().map(|&r| (r as f64) * (r as f64)).sum::<f64>();
            let d_out = residual.mapv(|r| 2.0 * r / batch.len() as f32);
            let grads = backward(&model, &trace, &d_out);
            adam.update(&mut model, &grads);
        }
        let mean = total / samples.len() as f64;
        if !mean.is_finite() {
            return Err(SurrogateError::DivergedLoss { epoch });
        }
        history.push(mean);
        on_epoch(epoch, mean);
    }
    Ok((model, history))
}

/// Minibatch Adam on MSE. Returns the model and the mean training loss of
/// each epoch. Single-threaded with a fixed summation order, so the result
/// depends only on the inputs.
pub fn train(samples: &[TrainingSample], mcfg: &MlpConfig, tcfg: &TrainConfig) -> Result<(MlpModel, Vec<f64>)> {
    train_with(samples, mcfg, tcfg, |_, _| {})
}

/// Index sets of `folds` contiguous blocks of a seeded permutation of `0..n`.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..folds)
        .map(|k| order[k * n / folds..(k + 1) * n / folds].to_vec())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_median_abs_err: f64,
}

/// Absolute errors of `model` on `samples`.
pub(crate) fn abs_errors(model: &MlpModel, samples: &[TrainingSample]) -> Vec<f64> {
    let (x, y) = to_arrays(samples);
    let mut out = Vec::with_capacity(samples.len());
    for (xb, yb) in x
        .axis_chunks_iter(Axis(0), 4096)
        .zip(y.axis_chunks_iter(Axis(0), 4096))
    {
        let p = model.forward_batch(xb);
        out.extend(p.iter().zip(yb).map(|(&a, &b)| (a as f64 - b as f64).abs()));
    }
    out
}

/// k-fold cross-validation; one model per fold, metrics per fold.
pub fn cross_validate(samples: &[TrainingSample], mcfg: &MlpConfig, tcfg: &TrainConfig) -> Result<Vec<FoldMetrics>> {
    if tcfg.folds < 2 {
        return Err(SurrogateError::InvalidConfig("folds must be at least 2".into()));
    }
    if samples.len() < tcfg.folds {
        return Err(SurrogateError::TooFewSamples {
            needed: tcfg.folds,
            got: samples.len(),
        });
    }
    let parts = fold_partition(samples.len(), tcfg.folds, tcfg.seed);
    let mut out = Vec::with_capacity(tcfg.folds);
    for (k, val_idx) in parts.iter().enumerate() {
        let train_set: Vec<TrainingSample> = parts
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .flat_map(|(_, idx)| idx.iter().map(|&i| samples[i]))
            .collect();
        let val_set: Vec<TrainingSample> = val_idx.iter().map(|&i| samples[i]).collect();
        let (model, history) = train(&train_set, mcfg, tcfg)?;
        let errs = abs_errors(&model, &val_set);
        let val_loss = errs.iter().map(|e| e * e).sum::<f64>() / errs.len().max(1) as f64;
        out.push(FoldMetrics {
            fold: k,
            train_loss: *history.last().expect("epochs >= 1"),
            val_loss,
            val_median_abs_err: median(&errs),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

const GRAD_CHECK_PARAMS: usize = 256;
const REL_FLOOR: f64 = 1e-7;

/// Compares backpropagated gradients of the squared error against central
/// differences, in `f64`, on up to 256 randomly chosen parameters.
pub fn gradient_check(model: &MlpModel, sample: &TrainingSample, epsilon: f64) -> GradCheck {
    gradient_check_with(model, sample, epsilon, GRAD_CHECK_PARAMS, 0)
}

pub fn gradient_check_with(
    model: &MlpModel,
    sample: &TrainingSample,
    epsilon: f64,
    n_params: usize,
    seed: u64,
) -> GradCheck {
    let mut m64: Mlp<f64> = model.map(f64::from);
    let x: Vec<f64> = sample.features().iter().map(|&v| v as f64).collect();
    let target = sample.lcp() as f64;
    let xv = ArrayView2::from_shape((1, FEATURES), &x[..]).expect("15 features");
    let loss = |m: &Mlp<f64>| loss_mse(m.forward_batch(xv)[0], target).0;

    let trace = m64.forward_traced(xv, true);
    let (_, d_out) = loss_mse(trace.output[0], target);
    let grads = backward(&m64, &trace, &Array1::from_elem(1, d_out));

    let sizes: Vec<(usize, usize)> = m64.layers().map(|l| (l.w.len(), l.b.len())).collect();
    let total: usize = sizes.iter().map(|(w, b)| w + b).sum();
    let n = n_params.min(total);
    let picks = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), total, n);

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: n,
    };
    for flat in picks.iter() {
        let (mut layer, mut off) = (0, flat);
        while off >= sizes[layer].0 + sizes[layer].1 {
            off -= sizes[layer].0 + sizes[layer].1;
            layer += 1;
        }
        let is_w = off < sizes[layer].0;
        let fan_in = grads[layer].0.ncols();
        let analytic = if is_w {
            grads[layer].0[[off / fan_in, off % fan_in]]
        } else {
            grads[layer].1[off - sizes[layer].0]
        };
        let nudge = |m: &mut Mlp<f64>, delta: f64| {
            let l = m.layers_mut().nth(layer).expect("layer index");
            if is_w {
                l.w[[off / fan_in, off % fan_in]] += delta;
            } else {
                l.b[off - sizes[layer].0] += delta;
            }
        };
        nudge(&mut m64, epsilon);
        let up = loss(&m64);
        nudge(&mut m64, -2.0 * epsilon);
        let down = loss(&m64);
        nudge(&mut m64, epsilon);
        let numeric = (up - down) / (2.0 * epsilon);
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
    }
    report
}

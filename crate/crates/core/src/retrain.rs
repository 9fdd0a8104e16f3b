//! Error-feedback retraining on a built-in toy regression task.
//!
//! Parameters are stored quantized between steps. Each step computes
//! full-precision gradients, forms the updated value `u` from the *decoded*
//! parameters plus the carried residual, re-quantizes `u` (refitting the
//! scale), and stores the discarded difference back into the residual. The
//! residual is kept as an error-free `(hi, lo)` pair so that
//! `decode(params) + residual == u` holds exactly: an update is never lost,
//! only delayed.
//!
//! The toy model is a two-layer tanh regressor trained with plain SGD on a
//! deterministic synthetic teacher task; with quantization disabled the loop
//! reproduces an ordinary SGD trajectory bit for bit.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{self, QuantConfig, QuantizedTensor, ScaleStrategy};
use crate::container::ModelContainer;
use crate::error::{Error, Result};
use crate::qdot::{self, ActQuantConfig, ActScaleMode};
use crate::scale;
use crate::tensor::{Tensor, TensorArchive};
use crate::wide::two_sum;

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

/// A deterministic regression dataset generated by a fixed random teacher
/// network.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub in_dim: usize,
    pub n_samples: usize,
    /// Row-major `[n_samples, in_dim]`.
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate the synthetic task: standard-normal inputs, targets from a
/// narrow random teacher network (in_dim -> 8 -> 1) plus Gaussian noise.
/// The same seed always yields a bit-identical dataset.
pub fn gen_synthetic_task(
    seed: u64,
    n_samples: usize,
    in_dim: usize,
    noise_std: f64,
) -> Result<SyntheticTask> {
    if n_samples == 0 {
        return Err(Error::validation("n_samples must be >= 1"));
    }
    if in_dim == 0 {
        return Err(Error::validation("in_dim must be >= 1"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::validation(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let teacher_hidden = 8usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let w0: Vec<f64> = (0..in_dim * teacher_hidden)
        .map(|_| normal(&mut rng) / (in_dim as f64).sqrt())
        .collect();
    let b0: Vec<f64> = (0..teacher_hidden).map(|_| 0.1 * normal(&mut rng)).collect();
    let w1: Vec<f64> = (0..teacher_hidden)
        .map(|_| normal(&mut rng) / (teacher_hidden as f64).sqrt())
        .collect();
    let b1 = 0.1 * normal(&mut rng);

    let inputs: Vec<f64> = (0..n_samples * in_dim).map(|_| normal(&mut rng)).collect();
    let mut targets = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let x = &inputs[s * in_dim..(s + 1) * in_dim];
        let mut y = b1;
        for j in 0..teacher_hidden {
            let mut acc = 0.0;
            for i in 0..in_dim {
                acc += x[i] * w0[i * teacher_hidden + j];
            }
            y += (acc + b0[j]).tanh() * w1[j];
        }
        targets.push(y + noise_std * normal(&mut rng));
    }
    Ok(SyntheticTask { in_dim, n_samples, inputs, targets })
}

// ---------------------------------------------------------------------------
// Toy model
// ---------------------------------------------------------------------------

pub const W0_NAME: &str = "layer0.weight";
pub const B0_NAME: &str = "layer0.bias";
pub const W1_NAME: &str = "layer1.weight";
pub const B1_NAME: &str = "layer1.bias";

/// Two-layer tanh regressor: `y = tanh(x·W0 + b0)·W1 + b1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    /// `[in_dim, hidden]`, row-major.
    pub w0: Vec<f64>,
    pub b0: Vec<f64>,
    /// `[hidden, out_dim]`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
}

impl ToyModel {
    /// Random initialization (1/sqrt(fan-in) weights, small random biases).
    pub fn init(seed: u64, in_dim: usize, hidden: usize) -> ToyModel {
        let out_dim = 1usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_796d_6f64_656c);
        let w0 = (0..in_dim * hidden).map(|_| normal(&mut rng) / (in_dim as f64).sqrt()).collect();
        let b0 = (0..hidden).map(|_| 0.01 * normal(&mut rng)).collect();
        let w1 = (0..hidden * out_dim).map(|_| normal(&mut rng) / (hidden as f64).sqrt()).collect();
        let b1 = (0..out_dim).map(|_| 0.01 * normal(&mut rng)).collect();
        ToyModel { in_dim, hidden, out_dim, w0, b0, w1, b1 }
    }

    /// Named parameters with shapes, in archive order.
    pub fn param_map(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        let mut map = BTreeMap::new();
        map.insert(B0_NAME.to_string(), (vec![self.hidden], self.b0.clone()));
        map.insert(W0_NAME.to_string(), (vec![self.in_dim, self.hidden], self.w0.clone()));
        map.insert(B1_NAME.to_string(), (vec![self.out_dim], self.b1.clone()));
        map.insert(W1_NAME.to_string(), (vec![self.hidden, self.out_dim], self.w1.clone()));
        map
    }

    /// Export to a full-precision archive (f32).
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive::new();
        for (name, (shape, values)) in self.param_map() {
            let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
            archive.insert(Tensor::new(name, shape, data)?)?;
        }
        Ok(archive)
    }

    /// Rebuild from an archive produced by [`ToyModel::to_archive`] (or a
    /// dequantized model of the same layout).
    pub fn from_archive(archive: &TensorArchive) -> Result<ToyModel> {
        let get = |name: &str| -> Result<&Tensor> {
            archive
                .get(name)
                .ok_or_else(|| Error::validation(format!("archive missing tensor '{name}'")))
        };
        let w0t = get(W0_NAME)?;
        let w1t = get(W1_NAME)?;
        let b0t = get(B0_NAME)?;
        let b1t = get(B1_NAME)?;
        let &[in_dim, hidden] = w0t.shape() else {
            return Err(Error::validation(format!("'{W0_NAME}' must be 2-D")));
        };
        let &[hidden2, out_dim] = w1t.shape() else {
            return Err(Error::validation(format!("'{W1_NAME}' must be 2-D")));
        };
        if hidden2 != hidden || b0t.len() != hidden || b1t.len() != out_dim {
            return Err(Error::validation("archive layer shapes are inconsistent"));
        }
        let promote = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
        Ok(ToyModel {
            in_dim,
            hidden,
            out_dim,
            w0: promote(w0t),
            b0: promote(b0t),
            w1: promote(w1t),
            b1: promote(b1t),
        })
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct ForwardCache {
    h: Vec<f64>,
    y: Vec<f64>,
}

struct ParamViews {
    w0: Vec<f64>,
    b0: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
}

fn forward_plain(
    x: &[f64],
    batch: usize,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    p: &ParamViews,
) -> ForwardCache {
    let mut h = vec![0.0f64; batch * hidden];
    for b in 0..batch {
        for j in 0..hidden {
            let mut acc = 0.0f64;
            for i in 0..in_dim {
                acc += x[b * in_dim + i] * p.w0[i * hidden + j];
            }
            h[b * hidden + j] = (acc + p.b0[j]).tanh();
        }
    }
    let mut y = vec![0.0f64; batch * out_dim];
    for b in 0..batch {
        for o in 0..out_dim {
            let mut acc = 0.0f64;
            for j in 0..hidden {
                acc += h[b * hidden + j] * p.w1[j * out_dim + o];
            }
            y[b * out_dim + o] = acc + p.b1[o];
        }
    }
    ForwardCache { h, y }
}

fn mean_squared_error(y: &[f64], targets: &[f64]) -> f64 {
    let n = y.len() as f64;
    y.iter().zip(targets).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>() / n
}

fn backward_plain(
    x: &[f64],
    batch: usize,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    p: &ParamViews,
    cache: &ForwardCache,
    targets: &[f64],
) -> BTreeMap<String, Vec<f64>> {
    let norm = (batch * out_dim) as f64;
    let dy: Vec<f64> = cache
        .y
        .iter()
        .zip(targets)
        .map(|(&y, &t)| 2.0 * (y - t) / norm)
        .collect();

    let mut grad_w1 = vec![0.0f64; hidden * out_dim];
    let mut grad_b1 = vec![0.0f64; out_dim];
    for j in 0..hidden {
        for o in 0..out_dim {
            let mut acc = 0.0f64;
            for b in 0..batch {
                acc += cache.h[b * hidden + j] * dy[b * out_dim + o];
            }
            grad_w1[j * out_dim + o] = acc;
        }
    }
    for o in 0..out_dim {
        let mut acc = 0.0f64;
        for b in 0..batch {
            acc += dy[b * out_dim + o];
        }
        grad_b1[o] = acc;
    }

    let mut grad_w0 = vec![0.0f64; in_dim * hidden];
    let mut grad_b0 = vec![0.0f64; hidden];
    let mut dh_pre = vec![0.0f64; batch * hidden];
    for b in 0..batch {
        for j in 0..hidden {
            let mut acc = 0.0f64;
            for o in 0..out_dim {
                acc += dy[b * out_dim + o] * p.w1[j * out_dim + o];
            }
            let h = cache.h[b * hidden + j];
            dh_pre[b * hidden + j] = acc * (1.0 - h * h);
        }
    }
    for i in 0..in_dim {
        for j in 0..hidden {
            let mut acc = 0.0f64;
            for b in 0..batch {
                acc += x[b * in_dim + i] * dh_pre[b * hidden + j];
            }
            grad_w0[i * hidden + j] = acc;
        }
    }
    for j in 0..hidden {
        let mut acc = 0.0f64;
        for b in 0..batch {
            acc += dh_pre[b * hidden + j];
        }
        grad_b0[j] = acc;
    }

    let mut grads = BTreeMap::new();
    grads.insert(W0_NAME.to_string(), grad_w0);
    grads.insert(B0_NAME.to_string(), grad_b0);
    grads.insert(W1_NAME.to_string(), grad_w1);
    grads.insert(B1_NAME.to_string(), grad_b1);
    grads
}

/// Forward pass through quantized dot products: activations are quantized
/// on the fly before each product, intermediate activations stay full
/// precision. Returns the cache plus what the backward pass needs.
struct QdotCache {
    h: Vec<f64>,
    y: Vec<f64>,
    x_dec: Vec<f64>,
    h_dec: Vec<f64>,
    mask_h: Vec<f64>,
}

fn forward_qdot(
    x: &[f64],
    batch: usize,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    w0_q: &QuantizedTensor,
    w1_q: &QuantizedTensor,
    b0: &[f64],
    b1: &[f64],
    act_cfg: &ActQuantConfig,
) -> Result<QdotCache> {
    let x_f32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let x_t = Tensor::new("x", vec![batch, in_dim], x_f32)?;
    let x_q = qdot::quantize_activations(&x_t, act_cfg)?.tensor;
    let h_pre_q = qdot::qdot_shift(&x_q, w0_q)?;

    let mut h = vec![0.0f64; batch * hidden];
    for b in 0..batch {
        for j in 0..hidden {
            h[b * hidden + j] = (h_pre_q.data()[b * hidden + j] as f64 + b0[j]).tanh();
        }
    }

    let h_f32: Vec<f32> = h.iter().map(|&v| v as f32).collect();
    let h_t = Tensor::new("h", vec![batch, hidden], h_f32)?;
    let h_q = qdot::quantize_activations(&h_t, act_cfg)?.tensor;
    let y_q = qdot::qdot_shift(&h_q, w1_q)?;

    let mut y = vec![0.0f64; batch * out_dim];
    for b in 0..batch {
        for o in 0..out_dim {
            y[b * out_dim + o] = y_q.data()[b * out_dim + o] as f64 + b1[o];
        }
    }

    let mask_h: Vec<f64> = h_t
        .data()
        .iter()
        .map(|&v| qdot::ste_mask(v as f64, h_q.scale() as f64, h_q.bits()) as u8 as f64)
        .collect();

    Ok(QdotCache { h, y, x_dec: x_q.decode_f64(), h_dec: h_q.decode_f64(), mask_h })
}

fn backward_qdot(
    batch: usize,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    w1_q: &QuantizedTensor,
    cache: &QdotCache,
    targets: &[f64],
) -> BTreeMap<String, Vec<f64>> {
    let norm = (batch * out_dim) as f64;
    let dy: Vec<f64> =
        cache.y.iter().zip(targets).map(|(&y, &t)| 2.0 * (y - t) / norm).collect();
    let w1_dec = w1_q.decode_f64();

    let mut grad_w1 = vec![0.0f64; hidden * out_dim];
    let mut grad_b1 = vec![0.0f64; out_dim];
    for j in 0..hidden {
        for o in 0..out_dim {
            let mut acc = 0.0f64;
            for b in 0..batch {
                acc += cache.h_dec[b * hidden + j] * dy[b * out_dim + o];
            }
            grad_w1[j * out_dim + o] = acc;
        }
    }
    for o in 0..out_dim {
        grad_b1[o] = (0..batch).map(|b| dy[b * out_dim + o]).sum();
    }

    // Gradient through the on-the-fly quantization of h: straight-through
    // inside the clip range, zero outside.
    let mut dh_pre = vec![0.0f64; batch * hidden];
    for b in 0..batch {
        for j in 0..hidden {
            let mut acc = 0.0f64;
            for o in 0..out_dim {
                acc += dy[b * out_dim + o] * w1_dec[j * out_dim + o];
            }
            let h = cache.h[b * hidden + j];
            dh_pre[b * hidden + j] = acc * cache.mask_h[b * hidden + j] * (1.0 - h * h);
        }
    }

    let mut grad_w0 = vec![0.0f64; in_dim * hidden];
    let mut grad_b0 = vec![0.0f64; hidden];
    for i in 0..in_dim {
        for j in 0..hidden {
            let mut acc = 0.0f64;
            for b in 0..batch {
                acc += cache.x_dec[b * in_dim + i] * dh_pre[b * hidden + j];
            }
            grad_w0[i * hidden + j] = acc;
        }
    }
    for j in 0..hidden {
        grad_b0[j] = (0..batch).map(|b| dh_pre[b * hidden + j]).sum();
    }

    let mut grads = BTreeMap::new();
    grads.insert(W0_NAME.to_string(), grad_w0);
    grads.insert(B0_NAME.to_string(), grad_b0);
    grads.insert(W1_NAME.to_string(), grad_w1);
    grads.insert(B1_NAME.to_string(), grad_b1);
    grads
}

// ---------------------------------------------------------------------------
// Training state and the error-feedback step
// ---------------------------------------------------------------------------

/// Training knobs. `quant: None` disables quantization entirely, making the
/// loop an ordinary SGD trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub quant: Option<QuantConfig>,
    pub error_feedback: bool,
    pub quantize_dots: bool,
    pub act_scale: ActScaleMode,
    /// EM iteration cap per re-quantization during retraining; the initial
    /// quantization uses the strategy's own budget.
    pub em_steps_per_update: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
            quant: Some(QuantConfig::default()),
            error_feedback: true,
            quantize_dots: false,
            act_scale: ActScaleMode::Max,
            em_steps_per_update: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::validation("steps must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if self.em_steps_per_update == 0 {
            return Err(Error::validation("em_steps_per_update must be >= 1"));
        }
        if let Some(q) = &self.quant {
            q.validate()?;
        } else if self.quantize_dots {
            return Err(Error::validation("quantize_dots requires quantization to be enabled"));
        }
        if let ActScaleMode::Fixed(s) = self.act_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::validation(format!("activation scale must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum ParamState {
    Full(Vec<f64>),
    Quantized { qt: QuantizedTensor, res_hi: Vec<f64>, res_lo: Vec<f64> },
}

#[derive(Debug, Clone)]
struct ParamEntry {
    shape: Vec<usize>,
    state: ParamState,
}

/// Everything [`ef_step`](TrainState::ef_step) produced besides the new
/// state: the pre-quantization values and step diagnostics.
#[derive(Debug, Clone)]
pub struct EfStepOutcome {
    /// Per quantized tensor: the full-precision updated value `u` that was
    /// re-quantized this step.
    pub pre_quant: BTreeMap<String, Vec<f64>>,
    /// Total squared re-quantization error of this step.
    pub sse: f64,
    /// EM iterations spent refitting scales this step.
    pub scale_iters: usize,
}

/// Read-only view of one quantized parameter for invariant checks.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    pub decoded: Vec<f64>,
    pub residual_hi: Vec<f64>,
    pub residual_lo: Vec<f64>,
}

/// Parameter store for the error-feedback loop, independent of the model
/// architecture.
#[derive(Debug, Clone)]
pub struct TrainState {
    lr: f64,
    error_feedback: bool,
    quant: Option<QuantConfig>,
    em_cap: usize,
    params: BTreeMap<String, ParamEntry>,
}

impl TrainState {
    /// Build the state, applying the initial quantization. Residuals start
    /// at zero: the initial quantization error is not carried.
    pub fn new(
        params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut out = BTreeMap::new();
        for (name, (shape, values)) in params {
            if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::data(format!("parameter '{name}': non-finite at {idx}")));
            }
            let quantize = cfg.quant.as_ref().map(|q| !q.is_passthrough(&name)).unwrap_or(false);
            let state = if quantize {
                let q = cfg.quant.as_ref().unwrap();
                let (scale, _) = fit_scale(&name, &values, q, None, None)?;
                let n = values.len();
                let codes = codec::encode_slice_f64(values.iter().copied(), scale, q.bits)?;
                let qt = QuantizedTensor::new(&name, shape.clone(), scale as f32, q.bits, codes)?;
                ParamState::Quantized { qt, res_hi: vec![0.0; n], res_lo: vec![0.0; n] }
            } else {
                ParamState::Full(values)
            };
            out.insert(name, ParamEntry { shape, state });
        }
        Ok(TrainState {
            lr: cfg.lr,
            error_feedback: cfg.error_feedback,
            quant: cfg.quant.clone(),
            em_cap: cfg.em_steps_per_update,
            params: out,
        })
    }

    /// Current full-precision view of a parameter (decoded when quantized).
    pub fn values(&self, name: &str) -> Option<Vec<f64>> {
        self.params.get(name).map(|e| match &e.state {
            ParamState::Full(v) => v.clone(),
            ParamState::Quantized { qt, .. } => qt.decode_f64(),
        })
    }

    /// The stored quantized form of a parameter, if it has one.
    pub fn quantized_tensor(&self, name: &str) -> Option<&QuantizedTensor> {
        match &self.params.get(name)?.state {
            ParamState::Quantized { qt, .. } => Some(qt),
            ParamState::Full(_) => None,
        }
    }

    /// Decoded values plus residual parts for every quantized parameter.
    pub fn quantized_snapshot(&self) -> BTreeMap<String, ParamSnapshot> {
        let mut out = BTreeMap::new();
        for (name, entry) in &self.params {
            if let ParamState::Quantized { qt, res_hi, res_lo } = &entry.state {
                out.insert(
                    name.clone(),
                    ParamSnapshot {
                        decoded: qt.decode_f64(),
                        residual_hi: res_hi.clone(),
                        residual_lo: res_lo.clone(),
                    },
                );
            }
        }
        out
    }

    /// One error-feedback update: apply the gradients at full precision,
    /// re-quantize (refitting scales), and carry the discarded error.
    ///
    /// With `error_feedback` disabled the residual is reset to zero each
    /// step. Passthrough parameters update in full precision and keep no
    /// residual: nothing is discarded for them.
    pub fn ef_step(&mut self, grads: &BTreeMap<String, Vec<f64>>) -> Result<EfStepOutcome> {
        for (name, grad) in grads {
            let entry = self
                .params
                .get(name)
                .ok_or_else(|| Error::validation(format!("gradient for unknown parameter '{name}'")))?;
            let expect = match &entry.state {
                ParamState::Full(v) => v.len(),
                ParamState::Quantized { qt, .. } => qt.len(),
            };
            if grad.len() != expect {
                return Err(Error::validation(format!(
                    "gradient for '{name}' has {} elements, parameter has {expect}",
                    grad.len()
                )));
            }
            if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::data(format!("gradient for '{name}': non-finite at {idx}")));
            }
        }
        if grads.len() != self.params.len() {
            return Err(Error::validation(format!(
                "expected gradients for {} parameters, got {}",
                self.params.len(),
                grads.len()
            )));
        }

        let lr = self.lr;
        let mut sse = 0.0f64;
        let mut scale_iters = 0usize;
        let mut pre_quant = BTreeMap::new();
        for (name, entry) in self.params.iter_mut() {
            let grad = &grads[name];
            match &mut entry.state {
                ParamState::Full(values) => {
                    for (v, &g) in values.iter_mut().zip(grad) {
                        *v -= lr * g;
                    }
                }
                ParamState::Quantized { qt, res_hi, res_lo } => {
                    let quant = self.quant.as_ref().expect("quantized param implies config");
                    let decoded = qt.decode_f64();
                    let u: Vec<f64> = decoded
                        .iter()
                        .zip(grad)
                        .zip(res_hi.iter().zip(res_lo.iter()))
                        .map(|((&w, &g), (&hi, &lo))| ((w - lr * g) + hi) + lo)
                        .collect();

                    let warm = qt.scale() as f64;
                    let (scale, iters) =
                        fit_scale(name, &u, quant, Some(warm), Some(self.em_cap))?;
                    scale_iters += iters;
                    let codes = codec::encode_slice_f64(u.iter().copied(), scale, quant.bits)?;
                    *qt = QuantizedTensor::new(
                        name.clone(),
                        entry.shape.clone(),
                        scale as f32,
                        quant.bits,
                        codes,
                    )?;
                    let new_decoded = qt.decode_f64();
                    for i in 0..u.len() {
                        let err = u[i] - new_decoded[i];
                        sse += err * err;
                        if self.error_feedback {
                            let (hi, lo) = two_sum(u[i], -new_decoded[i]);
                            res_hi[i] = hi;
                            res_lo[i] = lo;
                        } else {
                            res_hi[i] = 0.0;
                            res_lo[i] = 0.0;
                        }
                    }
                    pre_quant.insert(name.clone(), u);
                }
            }
        }
        Ok(EfStepOutcome { pre_quant, sse, scale_iters })
    }

    /// Export the current parameters as a model container (quantized
    /// tensors plus full-precision passthrough). `None` when quantization
    /// is disabled.
    pub fn export_container(&self) -> Result<Option<ModelContainer>> {
        let Some(quant) = &self.quant else {
            return Ok(None);
        };
        let mut quantized = BTreeMap::new();
        let mut passthrough = BTreeMap::new();
        for (name, entry) in &self.params {
            match &entry.state {
                ParamState::Quantized { qt, .. } => {
                    quantized.insert(name.clone(), qt.clone());
                }
                ParamState::Full(values) => {
                    let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
                    passthrough.insert(name.clone(), Tensor::new(name.clone(), entry.shape.clone(), data)?);
                }
            }
        }
        Ok(Some(ModelContainer::from_parts(
            quant.bits,
            quant.keep_biases,
            quantized,
            passthrough,
        )?))
    }
}

/// Scale for a value slice under a strategy. `warm`/`em_cap` override the
/// EM start and iteration budget during retraining. The result is always
/// rounded to f32 so the in-memory scale matches what a container stores.
fn fit_scale(
    name: &str,
    values: &[f64],
    quant: &QuantConfig,
    warm: Option<f64>,
    em_cap: Option<usize>,
) -> Result<(f64, usize)> {
    let (scale, iters) = match quant.scale_strategy {
        ScaleStrategy::Fixed(s) => (s, 0),
        ScaleStrategy::Max => (scale::max_scale_values(values, name)?, 0),
        ScaleStrategy::Em { tol, max_iter } => {
            let start = match warm {
                Some(s) => s,
                None => scale::max_scale_values(values, name)?,
            };
            let budget = em_cap.map_or(max_iter, |cap| cap.min(max_iter));
            let report = scale::em_fit_values(values, quant.bits, start, tol, budget)?;
            (report.scale, report.iterations)
        }
    };
    let stored = scale as f32;
    if !(stored > 0.0 && stored.is_finite()) {
        return Err(Error::validation(format!(
            "parameter '{name}': scale {scale} is not representable as f32"
        )));
    }
    Ok((stored as f64, iters))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One line of the JSON-lines metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub sse: f64,
    pub scale_iters: usize,
}

/// Result of a retraining run.
#[derive(Debug)]
pub struct RetrainOutcome {
    pub metrics: Vec<StepMetrics>,
    /// Final quantized model; `None` when quantization was disabled.
    pub model: Option<ModelContainer>,
    /// Loss over the full dataset with the final parameters.
    pub final_eval_loss: f64,
    /// Final parameter values (decoded when quantized).
    pub trained: ToyModel,
}

fn gather_views(state: &TrainState) -> Result<ParamViews> {
    let fetch = |name: &str| {
        state
            .values(name)
            .ok_or_else(|| Error::validation(format!("state missing parameter '{name}'")))
    };
    Ok(ParamViews { w0: fetch(W0_NAME)?, b0: fetch(B0_NAME)?, w1: fetch(W1_NAME)?, b1: fetch(B1_NAME)? })
}

fn batch_slice(data: &SyntheticTask, step: usize, batch: usize) -> (Vec<f64>, Vec<f64>) {
    let n = data.n_samples;
    let start = (step * batch) % n;
    let mut x = Vec::with_capacity(batch * data.in_dim);
    let mut t = Vec::with_capacity(batch);
    for i in 0..batch {
        let s = (start + i) % n;
        x.extend_from_slice(&data.inputs[s * data.in_dim..(s + 1) * data.in_dim]);
        t.push(data.targets[s]);
    }
    (x, t)
}

/// Mini-batch SGD with re-quantization after every update.
///
/// Deterministic given (model, data, config): batches are taken as a
/// sequential wrapping window and all arithmetic is sequential f64.
pub fn retrain(model: &ToyModel, data: &SyntheticTask, cfg: &TrainConfig) -> Result<RetrainOutcome> {
    cfg.validate()?;
    if data.in_dim != model.in_dim {
        return Err(Error::validation(format!(
            "dataset in_dim {} does not match model in_dim {}",
            data.in_dim, model.in_dim
        )));
    }
    let mut state = TrainState::new(model.param_map(), cfg)?;
    let (in_dim, hidden, out_dim) = (model.in_dim, model.hidden, model.out_dim);
    let act_cfg = ActQuantConfig {
        bits: cfg.quant.as_ref().map(|q| q.bits).unwrap_or(8),
        scale_mode: cfg.act_scale,
    };

    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x, targets) = batch_slice(data, step, cfg.batch_size);
        let views = gather_views(&state)?;
        let (loss, grads) = if cfg.quantize_dots {
            let w0_q = state
                .quantized_tensor(W0_NAME)
                .ok_or_else(|| Error::validation("quantize_dots requires quantized weights"))?;
            let w1_q = state
                .quantized_tensor(W1_NAME)
                .ok_or_else(|| Error::validation("quantize_dots requires quantized weights"))?;
            let cache = forward_qdot(
                &x, cfg.batch_size, in_dim, hidden, out_dim, w0_q, w1_q, &views.b0, &views.b1,
                &act_cfg,
            )?;
            let loss = mean_squared_error(&cache.y, &targets);
            let grads =
                backward_qdot(cfg.batch_size, in_dim, hidden, out_dim, w1_q, &cache, &targets);
            (loss, grads)
        } else {
            let cache = forward_plain(&x, cfg.batch_size, in_dim, hidden, out_dim, &views);
            let loss = mean_squared_error(&cache.y, &targets);
            let grads = backward_plain(
                &x, cfg.batch_size, in_dim, hidden, out_dim, &views, &cache, &targets,
            );
            (loss, grads)
        };
        if !loss.is_finite() {
            return Err(Error::Training { step, reason: format!("loss is {loss}") });
        }
        let outcome = state.ef_step(&grads)?;
        metrics.push(StepMetrics { step, loss, sse: outcome.sse, scale_iters: outcome.scale_iters });
    }

    let final_eval_loss = eval_state_loss(&state, data, cfg)?;
    let model = state.export_container()?;
    let views = gather_views(&state)?;
    let trained = ToyModel {
        in_dim,
        hidden,
        out_dim,
        w0: views.w0,
        b0: views.b0,
        w1: views.w1,
        b1: views.b1,
    };
    Ok(RetrainOutcome { metrics, model, final_eval_loss, trained })
}

fn eval_state_loss(state: &TrainState, data: &SyntheticTask, cfg: &TrainConfig) -> Result<f64> {
    let views = gather_views(state)?;
    // Infer dims from the parameter shapes.
    let hidden = views.b0.len();
    let out_dim = views.b1.len();
    let in_dim = views.w0.len() / hidden;
    if cfg.quantize_dots {
        let w0_q = state.quantized_tensor(W0_NAME).unwrap();
        let w1_q = state.quantized_tensor(W1_NAME).unwrap();
        let act_cfg = ActQuantConfig {
            bits: cfg.quant.as_ref().map(|q| q.bits).unwrap_or(8),
            scale_mode: cfg.act_scale,
        };
        let cache = forward_qdot(
            &data.inputs,
            data.n_samples,
            in_dim,
            hidden,
            out_dim,
            w0_q,
            w1_q,
            &views.b0,
            &views.b1,
            &act_cfg,
        )?;
        Ok(mean_squared_error(&cache.y, &data.targets))
    } else {
        let cache = forward_plain(&data.inputs, data.n_samples, in_dim, hidden, out_dim, &views);
        Ok(mean_squared_error(&cache.y, &data.targets))
    }
}

/// Loss of a full-precision toy model on a dataset.
pub fn eval_model_loss(model: &ToyModel, data: &SyntheticTask) -> f64 {
    let views = ParamViews {
        w0: model.w0.clone(),
        b0: model.b0.clone(),
        w1: model.w1.clone(),
        b1: model.b1.clone(),
    };
    let cache =
        forward_plain(&data.inputs, data.n_samples, model.in_dim, model.hidden, model.out_dim, &views);
    mean_squared_error(&cache.y, &data.targets)
}

/// One-shot quantize-and-evaluate: the no-retraining baseline arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    pub param_sse: f64,
    pub per_tensor_sse: BTreeMap<String, f64>,
}

pub fn quantize_then_eval(
    archive: &TensorArchive,
    cfg: &QuantConfig,
    data: &SyntheticTask,
) -> Result<EvalReport> {
    let container = crate::container::quantize_archive(archive, cfg)?;
    let mut per_tensor_sse = BTreeMap::new();
    let mut param_sse = 0.0f64;
    for (name, qt) in container.quantized() {
        let original = archive
            .get(name)
            .ok_or_else(|| Error::validation(format!("archive missing '{name}'")))?;
        let sse = codec::quantization_sse(original, qt)?;
        per_tensor_sse.insert(name.clone(), sse);
        param_sse += sse;
    }
    let decoded = container.to_archive()?;
    let model = ToyModel::from_archive(&decoded)?;
    Ok(EvalReport { loss: eval_model_loss(&model, data), param_sse, per_tensor_sse })
}

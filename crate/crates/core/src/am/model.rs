//! Network definition: 1-D conv front-end over time (product of strides =
//! sub-sampling rate R), fully-connected hidden layers with ReLU and dropout,
//! and a log-softmax projection to blank + character tokens.
//!
//! All parameters live in one flat `f64` vector with a layout table, which
//! keeps Adagrad, checkpointing, and finite-difference checks trivial.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::stage_rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv: vec![
                ConvSpec {
                    kernel: 5,
                    stride: 2,
                    channels: 24,
                },
                ConvSpec {
                    kernel: 3,
                    stride: 1,
                    channels: 32,
                },
            ],
            hidden: vec![64, 64],
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.conv.iter().enumerate() {
            if c.kernel == 0 || c.stride == 0 || c.channels == 0 {
                return Err(Error::InvalidConfig {
                    key: format!("model.conv[{i}]"),
                    message: "kernel, stride, and channels must be >= 1".into(),
                });
            }
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig {
                key: "model.hidden".into(),
                message: "hidden widths must be >= 1".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig {
                key: "model.dropout".into(),
                message: format!("dropout must be in [0, 1), got {}", self.dropout),
            });
        }
        Ok(())
    }

    /// Overall sub-sampling rate R (product of conv strides).
    pub fn subsample_rate(&self) -> usize {
        self.conv.iter().map(|c| c.stride).product::<usize>().max(1)
    }
}

/// Frame-by-label log-probability matrix produced by [`AcousticModel::forward`].
/// Rows are log-normalized; `T' = ceil(T / R)` where the conv front-end pads
/// each layer symmetrically with zeros so that `t_out = ceil(t_in / stride)`
/// (left pad `floor(total/2)`, right pad the rest).
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionLattice {
    pub log_probs: Array2<f64>,
    pub utterance_id: String,
}

impl EmissionLattice {
    pub fn frames(&self) -> usize {
        self.log_probs.nrows()
    }

    pub fn n_labels(&self) -> usize {
        self.log_probs.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TensorSpec {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel {
    config: ModelConfig,
    input_dim: usize,
    n_labels: usize,
    layout: Vec<TensorSpec>,
    params: Vec<f64>,
}

/// Intermediate activations kept for backpropagation.
pub(super) struct ForwardCache {
    /// Padded input of each conv layer.
    conv_inputs: Vec<Array2<f64>>,
    /// Pre-activation of each conv layer.
    conv_pre: Vec<Array2<f64>>,
    /// Input activation of each FC layer (hidden + output).
    fc_inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    hidden_pre: Vec<Array2<f64>>,
    /// Inverted-dropout masks (already scaled), one per hidden layer when training.
    dropout_masks: Vec<Option<Array2<f64>>>,
    /// Output log-probabilities.
    pub log_probs: Array2<f64>,
}

impl AcousticModel {
    pub fn init(config: &ModelConfig, input_dim: usize, n_labels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || n_labels < 2 {
            return Err(Error::InvalidConfig {
                key: "model".into(),
                message: format!("input_dim {input_dim} / n_labels {n_labels} out of range"),
            });
        }
        let mut layout = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize, offset: &mut usize| {
            layout.push(TensorSpec {
                name,
                rows,
                cols,
                offset: *offset,
            });
            *offset += rows * cols;
        };
        let mut dim = input_dim;
        for (i, c) in config.conv.iter().enumerate() {
            push(format!("conv{i}.w"), c.channels, c.kernel * dim, &mut offset);
            push(format!("conv{i}.b"), 1, c.channels, &mut offset);
            dim = c.channels;
        }
        for (i, &w) in config.hidden.iter().enumerate() {
            push(format!("fc{i}.w"), w, dim, &mut offset);
            push(format!("fc{i}.b"), 1, w, &mut offset);
            dim = w;
        }
        push("out.w".into(), n_labels, dim, &mut offset);
        push("out.b".into(), 1, n_labels, &mut offset);

        let mut params = vec![0.0; offset];
        let mut rng = stage_rng(seed, "model-init");
        for spec in &layout {
            if spec.name.ends_with(".b") {
                continue;
            }
            // fan_in = cols, fan_out = rows for all weight matrices here.
            let bound = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
            for v in &mut params[spec.offset..spec.offset + spec.rows * spec.cols] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(AcousticModel {
            config: config.clone(),
            input_dim,
            n_labels,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(super) fn from_parts(
        config: ModelConfig,
        input_dim: usize,
        n_labels: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let template = AcousticModel::init(&config, input_dim, n_labels, 0)?;
        if params.len() != template.params.len() {
            return Err(Error::InvalidConfig {
                key: "model".into(),
                message: format!(
                    "parameter vector has {} entries, architecture needs {}",
                    params.len(),
                    template.params.len()
                ),
            });
        }
        Ok(AcousticModel { params, ..template })
    }

    fn tensor(&self, idx: usize) -> ArrayView2<'_, f64> {
        let s = &self.layout[idx];
        ArrayView2::from_shape((s.rows, s.cols), &self.params[s.offset..s.offset + s.rows * s.cols])
            .expect("layout consistent")
    }

    /// Output frame count after the conv front-end for an input of length `t`.
    pub fn out_frames(&self, t: usize) -> usize {
        let mut t = t;
        for c in &self.config.conv {
            t = t.div_ceil(c.stride);
        }
        t
    }

    /// Runs the network in eval mode (no dropout).
    pub fn forward(&self, features: &ArrayView2<f32>, utterance_id: &str) -> Result<EmissionLattice> {
        let cache = self.forward_cached(features, None)?;
        Ok(EmissionLattice {
            log_probs: cache.log_probs,
            utterance_id: utterance_id.to_string(),
        })
    }

    /// CTC loss and its gradient over all parameters, eval mode. Exposed for
    /// gradient verification.
    pub fn loss_and_grad(
        &self,
        features: &ArrayView2<f32>,
        target: &[usize],
    ) -> Result<(f64, Vec<f64>)> {
        let cache = self.forward_cached(features, None)?;
        let lattice = EmissionLattice {
            log_probs: cache.log_probs.clone(),
            utterance_id: String::new(),
        };
        let (loss, grad_lattice) = super::ctc::ctc_loss_grad(&lattice, target)?;
        Ok((loss, self.backward(&cache, &grad_lattice)))
    }

    /// Full forward pass; `dropout_rng` enables training mode.
    pub(super) fn forward_cached(
        &self,
        features: &ArrayView2<f32>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache> {
        let (t, d) = features.dim();
        if d != self.input_dim {
            return Err(Error::InputDimMismatch {
                expected: self.input_dim,
                got: d,
            });
        }
        if t == 0 {
            return Err(Error::InvalidConfig {
                key: "features".into(),
                message: "empty feature matrix".into(),
            });
        }

        let mut act = features.mapv(|v| v as f64);
        let mut conv_inputs = Vec::new();
        let mut conv_pre = Vec::new();
        let mut tensor_idx = 0usize;

        for (li, c) in self.config.conv.iter().enumerate() {
            let w = self.tensor(tensor_idx);
            let b = self.tensor(tensor_idx + 1);
            tensor_idx += 2;
            let padded = pad_for_stride(&act, c.kernel, c.stride);
            let windows = im2col(&padded, c.kernel, c.stride, act.nrows().div_ceil(c.stride));
            let mut pre = windows.dot(&w.t());
            for mut row in pre.rows_mut() {
                for (v, bv) in row.iter_mut().zip(b.row(0).iter()) {
                    *v += bv;
                }
            }
            check_finite(&pre, &format!("conv{li}"))?;
            conv_inputs.push(padded);
            act = pre.mapv(|v| v.max(0.0));
            conv_pre.push(pre);
        }

        let mut fc_inputs = Vec::new();
        let mut hidden_pre = Vec::new();
        let mut dropout_masks = Vec::new();
        for (li, _) in self.config.hidden.iter().enumerate() {
            let w = self.tensor(tensor_idx);
            let b = self.tensor(tensor_idx + 1);
            tensor_idx += 2;
            fc_inputs.push(act.clone());
            let mut pre = act.dot(&w.t());
            for mut row in pre.rows_mut() {
                for (v, bv) in row.iter_mut().zip(b.row(0).iter()) {
                    *v += bv;
                }
            }
            check_finite(&pre, &format!("fc{li}"))?;
            act = pre.mapv(|v| v.max(0.0));
            hidden_pre.push(pre);
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if self.config.dropout > 0.0 => {
                    let keep = 1.0 - self.config.dropout;
                    let m = Array2::from_shape_fn(act.dim(), |_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    act *= &m;
                    Some(m)
                }
                _ => None,
            };
            dropout_masks.push(mask);
        }

        let w = self.tensor(tensor_idx);
        let b = self.tensor(tensor_idx + 1);
        fc_inputs.push(act.clone());
        let mut logits = act.dot(&w.t());
        for mut row in logits.rows_mut() {
            for (v, bv) in row.iter_mut().zip(b.row(0).iter()) {
                *v += bv;
            }
        }
        check_finite(&logits, "out")?;

        // Log-softmax per frame.
        let mut log_probs = logits;
        for mut row in log_probs.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }

        Ok(ForwardCache {
            conv_inputs,
            conv_pre,
            fc_inputs,
            hidden_pre,
            dropout_masks,
            log_probs,
        })
    }

    /// Backpropagates `d loss / d log_probs` through the network and returns
    /// the flat gradient over all parameters.
    pub(super) fn backward(&self, cache: &ForwardCache, grad_log_probs: &Array2<f64>) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];

        // Through log-softmax: dL/dz = g - softmax(z) * rowsum(g).
        let mut delta = grad_log_probs.clone();
        for (mut drow, lrow) in delta.rows_mut().into_iter().zip(cache.log_probs.rows()) {
            let gsum: f64 = drow.iter().sum();
            for (dv, lv) in drow.iter_mut().zip(lrow.iter()) {
                *dv -= lv.exp() * gsum;
            }
        }

        let n_conv = self.config.conv.len();
        let n_hidden = self.config.hidden.len();

        // Output projection.
        let out_w_idx = 2 * (n_conv + n_hidden);
        let input = &cache.fc_inputs[n_hidden];
        self.accumulate_linear(&mut grads, out_w_idx, input, &delta);
        let mut delta = delta.dot(&self.tensor(out_w_idx));

        // Hidden layers in reverse.
        for li in (0..n_hidden).rev() {
            if let Some(mask) = &cache.dropout_masks[li] {
                delta *= mask;
            }
            let pre = &cache.hidden_pre[li];
            delta.zip_mut_with(pre, |d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
            let w_idx = 2 * (n_conv + li);
            self.accumulate_linear(&mut grads, w_idx, &cache.fc_inputs[li], &delta);
            delta = delta.dot(&self.tensor(w_idx));
        }

        // Conv layers in reverse.
        for li in (0..n_conv).rev() {
            let c = &self.config.conv[li];
            let pre = &cache.conv_pre[li];
            delta.zip_mut_with(pre, |d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
            let w_idx = 2 * li;
            let padded = &cache.conv_inputs[li];
            let in_dim = padded.ncols();
            let windows = im2col(padded, c.kernel, c.stride, delta.nrows());
            self.accumulate_linear(&mut grads, w_idx, &windows, &delta);

            if li > 0 {
                // Scatter back into the padded input, then trim padding.
                let w = self.tensor(w_idx);
                let mut dpad = Array2::<f64>::zeros(padded.dim());
                let dwin = delta.dot(&w); // T_out x (kernel * in_dim)
                for (ti, drow) in dwin.rows().into_iter().enumerate() {
                    let start = ti * c.stride;
                    for k in 0..c.kernel {
                        for dcol in 0..in_dim {
                            dpad[(start + k, dcol)] += drow[k * in_dim + dcol];
                        }
                    }
                }
                let prev_t = cache.conv_pre[li - 1].nrows();
                let pad_left = pad_left_for(prev_t, c.kernel, c.stride);
                delta = dpad
                    .slice(ndarray::s![pad_left..pad_left + prev_t, ..])
                    .to_owned();
            }
        }
        grads
    }

    fn accumulate_linear(
        &self,
        grads: &mut [f64],
        w_idx: usize,
        input: &Array2<f64>,
        delta: &Array2<f64>,
    ) {
        let ws = &self.layout[w_idx];
        let bs = &self.layout[w_idx + 1];
        let dw = delta.t().dot(input); // rows x cols
        for (i, v) in dw.iter().enumerate() {
            grads[ws.offset + i] += v;
        }
        for drow in delta.rows() {
            for (j, v) in drow.iter().enumerate() {
                grads[bs.offset + j] += v;
            }
        }
    }
}

fn check_finite(m: &Array2<f64>, layer: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation {
            layer: layer.to_string(),
        })
    }
}

fn pad_left_for(t: usize, kernel: usize, stride: usize) -> usize {
    let t_out = t.div_ceil(stride);
    let total = ((t_out - 1) * stride + kernel).saturating_sub(t);
    total / 2
}

fn pad_for_stride(x: &Array2<f64>, kernel: usize, stride: usize) -> Array2<f64> {
    let (t, d) = x.dim();
    let t_out = t.div_ceil(stride);
    let total = ((t_out - 1) * stride + kernel).saturating_sub(t);
    let left = total / 2;
    let mut padded = Array2::<f64>::zeros((t + total, d));
    padded.slice_mut(ndarray::s![left..left + t, ..]).assign(x);
    padded
}

fn im2col(padded: &Array2<f64>, kernel: usize, stride: usize, t_out: usize) -> Array2<f64> {
    let d = padded.ncols();
    let mut out = Array2::<f64>::zeros((t_out, kernel * d));
    for ti in 0..t_out {
        let start = ti * stride;
        for k in 0..kernel {
            for c in 0..d {
                out[(ti, k * d + c)] = padded[(start + k, c)];
            }
        }
    }
    out
}

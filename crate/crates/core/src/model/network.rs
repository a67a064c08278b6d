use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{Gradient, ModelConfig, Params};
use crate::error::{shape, Result};

#[derive(Debug, Clone)]
struct Conv {
    /// `(kernel_width * in) x out`; row `k * in + i` holds tensor entry
    /// `[i, :, k]`.
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// `f64` working copy of [`Params`].
#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    convs: Vec<Conv>,
    proj: Array2<f64>,
    proj_bias: Array1<f64>,
}

/// Activations cached by a forward pass over one or more stacked examples.
#[derive(Debug, Clone)]
pub struct Tape {
    segments: Vec<Range<usize>>,
    /// Per layer: im2col of the layer input, `frames x (w * in)`.
    cols: Vec<Array2<f64>>,
    /// Per layer: pre-activation, `frames x hidden`.
    pre: Vec<Array2<f64>>,
    /// Output of the last ReLU.
    hidden: Array2<f64>,
}

impl Tape {
    pub fn frames(&self) -> usize {
        self.hidden.nrows()
    }

    /// Row range of each stacked example.
    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }
}

/// Per-layer error signals at the pre-activations.
#[derive(Debug, Clone)]
pub struct BackwardSignals {
    dpre: Vec<Array2<f64>>,
    dlogits: Array2<f64>,
}

impl Network {
    pub fn from_params(params: &Params) -> Self {
        let values: Vec<f64> = params.as_slice().iter().map(|&v| v as f64).collect();
        Self::from_values(params.config(), &values).expect("params match their own layout")
    }

    /// Builds a network from flat `f64` values in parameter layout order.
    pub fn from_values(cfg: &ModelConfig, values: &[f64]) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        if values.len() != layout.len {
            return Err(shape(format!(
                "expected {} values, got {}",
                layout.len,
                values.len()
            )));
        }
        let w = cfg.kernel_width;
        let out = cfg.hidden_dim;
        let mut tensors = layout.tensors.iter();
        let mut convs = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let input = cfg.layer_input(l);
            let wt = &values[tensors.next().unwrap().range()];
            let bt = &values[tensors.next().unwrap().range()];
            let mut weight = Array2::zeros((w * input, out));
            for i in 0..input {
                for o in 0..out {
                    for k in 0..w {
                        weight[[k * input + i, o]] = wt[(i * out + o) * w + k];
                    }
                }
            }
            convs.push(Conv {
                weight,
                bias: Array1::from(bt.to_vec()),
            });
        }
        let classes = cfg.classes();
        let pw = &values[tensors.next().unwrap().range()];
        let pb = &values[tensors.next().unwrap().range()];
        Ok(Self {
            cfg: *cfg,
            convs,
            proj: Array2::from_shape_vec((cfg.hidden_dim, classes), pw.to_vec()).unwrap(),
            proj_bias: Array1::from(pb.to_vec()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Inverse of [`Network::from_values`].
    pub fn to_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cfg.layout().len);
        let w = self.cfg.kernel_width;
        for (l, conv) in self.convs.iter().enumerate() {
            let input = self.cfg.layer_input(l);
            for i in 0..input {
                for o in 0..self.cfg.hidden_dim {
                    for k in 0..w {
                        out.push(conv.weight[[k * input + i, o]]);
                    }
                }
            }
            out.extend(conv.bias.iter());
        }
        out.extend(self.proj.iter());
        out.extend(self.proj_bias.iter());
        out
    }

    pub fn forward(&self, features: ArrayView2<f32>) -> Result<(Array2<f64>, Tape)> {
        self.forward_batch(&[features])
    }

    /// Runs every example through the network as one stacked matrix.
    /// Padding is applied per example, so stacking never mixes frames of
    /// neighbouring examples.
    pub fn forward_batch(&self, inputs: &[ArrayView2<f32>]) -> Result<(Array2<f64>, Tape)> {
        let d = self.cfg.feature_dim;
        let mut segments = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for x in inputs {
            if x.ncols() != d {
                return Err(shape(format!(
                    "features have {} columns, model expects {d}",
                    x.ncols()
                )));
            }
            if x.nrows() == 0 {
                return Err(shape("features have no frames"));
            }
            segments.push(total..total + x.nrows());
            total += x.nrows();
        }
        let mut act = Array2::zeros((total, d));
        for (x, seg) in inputs.iter().zip(&segments) {
            act.slice_mut(s![seg.clone(), ..])
                .assign(&x.mapv(|v| v as f64));
        }

        let mut cols = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let c = im2col(act.view(), &segments, self.cfg.kernel_width);
            let mut z = c.dot(&conv.weight);
            z += &conv.bias;
            act = z.mapv(|v| v.max(0.0));
            cols.push(c);
            pre.push(z);
        }
        let mut logits = act.dot(&self.proj);
        logits += &self.proj_bias;
        Ok((
            logits,
            Tape {
                segments,
                cols,
                pre,
                hidden: act,
            },
        ))
    }

    /// Propagates `dlogits` back to every layer's pre-activation.
    pub fn backward_signals(
        &self,
        tape: &Tape,
        dlogits: ArrayView2<f64>,
    ) -> Result<BackwardSignals> {
        if dlogits.dim() != (tape.frames(), self.cfg.classes()) {
            return Err(shape(format!(
                "dlogits is {:?}, expected ({}, {})",
                dlogits.dim(),
                tape.frames(),
                self.cfg.classes()
            )));
        }
        let mut dpre = vec![Array2::zeros((0, 0)); self.convs.len()];
        let mut dact = dlogits.dot(&self.proj.t());
        for l in (0..self.convs.len()).rev() {
            let mut dz = dact;
            dz.zip_mut_with(&tape.pre[l], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            if l > 0 {
                let dcols = dz.dot(&self.convs[l].weight.t());
                dact = col2im(
                    dcols.view(),
                    &tape.segments,
                    self.cfg.kernel_width,
                    self.cfg.hidden_dim,
                );
            } else {
                dact = Array2::zeros((0, 0));
            }
            dpre[l] = dz;
        }
        Ok(BackwardSignals {
            dpre,
            dlogits: dlogits.to_owned(),
        })
    }

    /// Parameter gradient accumulated over the stacked rows in `rows`.
    /// Passing the full range sums over every example in one product per
    /// tensor; passing one segment yields that example's gradient alone.
    pub fn weight_gradient(
        &self,
        tape: &Tape,
        signals: &BackwardSignals,
        rows: Range<usize>,
    ) -> Gradient {
        let mut out = Vec::with_capacity(self.cfg.layout().len);
        let w = self.cfg.kernel_width;
        let h = self.cfg.hidden_dim;
        for l in 0..self.convs.len() {
            let input = self.cfg.layer_input(l);
            let cols = tape.cols[l].slice(s![rows.clone(), ..]);
            let dz = signals.dpre[l].slice(s![rows.clone(), ..]);
            let dw = cols.t().dot(&dz);
            for i in 0..input {
                for o in 0..h {
                    for k in 0..w {
                        out.push(dw[[k * input + i, o]]);
                    }
                }
            }
            out.extend(dz.sum_axis(Axis(0)).iter());
        }
        let hidden = tape.hidden.slice(s![rows.clone(), ..]);
        let dl = signals.dlogits.slice(s![rows, ..]);
        out.extend(hidden.t().dot(&dl).iter());
        out.extend(dl.sum_axis(Axis(0)).iter());
        Gradient::from_vec(out)
    }
}

fn im2col(x: ArrayView2<f64>, segments: &[Range<usize>], width: usize) -> Array2<f64> {
    let (rows, c) = x.dim();
    let pad = width / 2;
    let mut out = Array2::zeros((rows, width * c));
    for seg in segments {
        for t in seg.clone() {
            let local = t - seg.start;
            for k in 0..width {
                let src = local + k;
                if src < pad || src - pad >= seg.len() {
                    continue;
                }
                let src = seg.start + src - pad;
                out.slice_mut(s![t, k * c..(k + 1) * c])
                    .assign(&x.row(src));
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
fn col2im(
    dcols: ArrayView2<f64>,
    segments: &[Range<usize>],
    width: usize,
    c: usize,
) -> Array2<f64> {
    let pad = width / 2;
    let mut out = Array2::zeros((dcols.nrows(), c));
    for seg in segments {
        for t in seg.clone() {
            let local = t - seg.start;
            for k in 0..width {
                let src = local + k;
                if src < pad || src - pad >= seg.len() {
                    continue;
                }
                let src = seg.start + src - pad;
                let mut dst = out.row_mut(src);
                dst += &dcols.slice(s![t, k * c..(k + 1) * c]);
            }
        }
    }
    out
}

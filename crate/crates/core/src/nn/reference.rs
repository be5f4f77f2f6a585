//! Naive `f64` forward evaluation of a [`Stack`], written with direct loops and
//! no im2col or GEMM. Used as the numeric side of gradient checks so finite
//! differences are not swamped by `f32` rounding.

use super::{ActivationPattern, LayerSpec, NnError, ParamStore, Stack};

/// Batched `f64` activations: `shape[0]` is the batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Activations {
    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }
}

fn param(params: &ParamStore, stack: &Stack, layer: usize, suffix: &str) -> Result<Vec<f64>, NnError> {
    let p = params.get(&format!("{}.{layer}.{suffix}", stack.name))?;
    Ok(p.value.data().iter().map(|&v| v as f64).collect())
}

/// Evaluates `stack` in double precision, appending relu/pool decisions to `pattern`.
pub fn forward_f64(
    stack: &Stack,
    params: &ParamStore,
    input: &Activations,
    pattern: &mut ActivationPattern,
) -> Result<Activations, NnError> {
    stack.output_shape(&input.shape[1..])?;
    let n = input.shape[0];
    let mut x = input.clone();
    let mut codes = Vec::new();
    for (li, layer) in stack.layers.iter().enumerate() {
        x = match *layer {
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: oc,
                kernel: k,
                stride,
                padding,
            } => {
                let w = param(params, stack, li, "weight")?;
                let b = param(params, stack, li, "bias")?;
                let (h, wd) = (x.shape[2], x.shape[3]);
                let oh = (h + 2 * padding - k) / stride + 1;
                let ow = (wd + 2 * padding - k) / stride + 1;
                let mut out = vec![0.0; n * oc * oh * ow];
                for s in 0..n {
                    for o in 0..oc {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = b[o];
                                for ci in 0..c {
                                    for ki in 0..k {
                                        for kj in 0..k {
                                            let iy = (oy * stride + ki) as isize - padding as isize;
                                            let ix = (ox * stride + kj) as isize - padding as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = ((s * c + ci) * h + iy as usize) * wd + ix as usize;
                                            let wi = ((o * c + ci) * k + ki) * k + kj;
                                            acc += w[wi] * x.data[xi];
                                        }
                                    }
                                }
                                out[((s * oc + o) * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                Activations {
                    shape: vec![n, oc, oh, ow],
                    data: out,
                }
            }
            LayerSpec::MaxPool2x2 => {
                let (c, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(n * c * oh * ow);
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + 2 * oy * w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                                if x.data[idx] > x.data[best] {
                                    best = idx;
                                }
                            }
                            out.push(x.data[best]);
                            codes.push(best as u32);
                        }
                    }
                }
                Activations {
                    shape: vec![n, c, oh, ow],
                    data: out,
                }
            }
            LayerSpec::Relu => {
                for v in x.data.iter_mut() {
                    codes.push(if *v > 0.0 {
                        1
                    } else if *v < 0.0 {
                        0
                    } else {
                        u32::MAX
                    });
                    *v = v.max(0.0);
                }
                x
            }
            LayerSpec::Flatten => {
                let d = x.data.len() / n;
                Activations {
                    shape: vec![n, d],
                    data: x.data,
                }
            }
            LayerSpec::Linear {
                in_features: d,
                out_features: o,
            } => {
                let w = param(params, stack, li, "weight")?;
                let b = param(params, stack, li, "bias")?;
                let mut out = vec![0.0; n * o];
                for s in 0..n {
                    for j in 0..o {
                        out[s * o + j] = b[j] + (0..d).map(|i| w[j * d + i] * x.data[s * d + i]).sum::<f64>();
                    }
                }
                Activations {
                    shape: vec![n, o],
                    data: out,
                }
            }
            LayerSpec::Softmax => {
                let d = x.shape[1];
                for row in x.data.chunks_exact_mut(d) {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for v in row.iter_mut() {
                        *v = (*v - m).exp() / z;
                    }
                }
                x
            }
        };
    }
    pattern.extend(&ActivationPattern::from_codes(codes));
    Ok(x)
}

use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Tensor};

/// One layer of a feed-forward stack. Shapes below are per sample; every
/// tensor flowing through a stack carries a leading batch dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `[C, H, W] -> [out_channels, H', W']`, square kernel, zero padding.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// 2x2 window, stride 2, floor on odd sizes.
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Relu,
    /// `[C, H, W] -> [C * H * W]`
    Flatten,
    /// `[in_features] -> [out_features]`
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Row-wise softmax over a `[D]` vector.
    Softmax,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let mismatch = |want: String| NnError::Shape(format!("{} expects {want}, got {input:?}", self.kind()));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
                    return Err(NnError::Config(format!("degenerate conv2d {self:?}")));
                }
                match input {
                    &[c, h, w] if c == in_channels && h + 2 * padding >= kernel && w + 2 * padding >= kernel => {
                        let oh = (h + 2 * padding - kernel) / stride + 1;
                        let ow = (w + 2 * padding - kernel) / stride + 1;
                        Ok(vec![out_channels, oh, ow])
                    }
                    _ => Err(mismatch(format!("[{in_channels}, H>={kernel}, W>={kernel}]"))),
                }
            }
            LayerSpec::MaxPool2x2 => match input {
                &[c, h, w] if h >= 2 && w >= 2 => Ok(vec![c, h / 2, w / 2]),
                _ => Err(mismatch("[C, H>=2, W>=2]".into())),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return Err(NnError::Config(format!("degenerate linear {self:?}")));
                }
                match input {
                    &[d] if d == in_features => Ok(vec![out_features]),
                    _ => Err(mismatch(format!("[{in_features}]"))),
                }
            }
            LayerSpec::Softmax => match input {
                &[_] => Ok(input.to_vec()),
                _ => Err(mismatch("[D]".into())),
            },
        }
    }

    /// `(suffix, shape, fan_in)` for every parameter the layer owns.
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                vec![
                    ("weight", vec![out_channels, in_channels, kernel, kernel], fan_in),
                    ("bias", vec![out_channels], fan_in),
                ]
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features], in_features),
                ("bias", vec![out_features], in_features),
            ],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
enum Cache {
    Conv {
        cols: Vec<f32>,
        in_shape: Vec<usize>,
        out_hw: (usize, usize),
    },
    Pool {
        argmax: Vec<u32>,
        in_shape: Vec<usize>,
    },
    Relu {
        sign: Vec<i8>,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
    Linear {
        input: Tensor,
    },
    Softmax {
        output: Tensor,
    },
}

/// Intermediates recorded by [`Stack::forward_cached`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    stack: String,
    caches: Vec<Cache>,
}

/// Which side of every relu kink and which pool window winner a forward pass took.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ActivationPattern(Vec<u32>);

impl ActivationPattern {
    pub fn extend(&mut self, other: &ActivationPattern) {
        self.0.extend_from_slice(&other.0);
    }

    pub(crate) fn from_codes(codes: Vec<u32>) -> Self {
        Self(codes)
    }

    /// True when some relu saw an input of exactly zero.
    pub fn has_kink(&self) -> bool {
        self.0.contains(&KINK)
    }
}

const KINK: u32 = u32::MAX;

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }

    pub fn clear(&mut self) {
        self.caches.clear();
    }

    pub fn pattern(&self) -> ActivationPattern {
        let mut out = Vec::new();
        for c in &self.caches {
            match c {
                Cache::Relu { sign } => out.extend(sign.iter().map(|&s| match s {
                    0 => KINK,
                    s if s > 0 => 1,
                    _ => 0,
                })),
                Cache::Pool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        ActivationPattern(out)
    }
}

/// A named sequence of layers. Parameters live in a shared [`ParamStore`]
/// under `"{name}.{layer_index}.{weight|bias}"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl Stack {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        Self {
            name: name.into(),
            layers,
        }
    }

    fn param_name(&self, layer: usize, suffix: &str) -> String {
        format!("{}.{layer}.{suffix}", self.name)
    }

    /// Checks that adjacent layers fit together and returns the per-sample output shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let mut shape = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| NnError::Shape(format!("{} layer {i}: {e}", self.name)))?;
        }
        Ok(shape)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.param_shapes())
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn init_params(&self, params: &mut ParamStore) -> Result<(), NnError> {
        for (i, layer) in self.layers.iter().enumerate() {
            for (suffix, shape, fan_in) in layer.param_shapes() {
                params.init_uniform(&self.param_name(i, suffix), &shape, fan_in)?;
            }
        }
        Ok(())
    }

    /// Inference pass, nothing cached.
    pub fn forward(&self, params: &ParamStore, input: &Tensor) -> Result<Tensor, NnError> {
        self.run(params, input, None)
    }

    /// Training pass; `tape` is overwritten with what [`Stack::backward`] needs.
    pub fn forward_cached(&self, params: &ParamStore, input: &Tensor, tape: &mut Tape) -> Result<Tensor, NnError> {
        tape.stack = self.name.clone();
        tape.caches.clear();
        let out = self.run(params, input, Some(&mut tape.caches));
        if out.is_err() {
            tape.caches.clear();
        }
        out
    }

    fn run(&self, params: &ParamStore, input: &Tensor, mut caches: Option<&mut Vec<Cache>>) -> Result<Tensor, NnError> {
        if input.shape().len() < 2 {
            return Err(NnError::Shape(format!(
                "{}: input needs a batch dimension, got {:?}",
                self.name,
                input.shape()
            )));
        }
        self.output_shape(input.sample_shape())?;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = match *layer {
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    out_channels,
                    ..
                } => {
                    let w = &params.get(&self.param_name(i, "weight"))?.value;
                    let b = &params.get(&self.param_name(i, "bias"))?.value;
                    conv_forward(&x, w, b, out_channels, kernel, stride, padding, caches.is_some())
                }
                LayerSpec::MaxPool2x2 => pool_forward(&x),
                LayerSpec::Relu => relu_forward(&x),
                LayerSpec::Flatten => {
                    let n = x.batch();
                    let d = x.sample_shape().iter().product();
                    let in_shape = x.shape().to_vec();
                    (x.clone().reshape(vec![n, d])?, Cache::Flatten { in_shape })
                }
                LayerSpec::Linear { out_features, .. } => {
                    let w = &params.get(&self.param_name(i, "weight"))?.value;
                    let b = &params.get(&self.param_name(i, "bias"))?.value;
                    let y = linear_forward(&x, w, b, out_features);
                    (
                        y,
                        Cache::Linear {
                            input: if caches.is_some() {
                                x.clone()
                            } else {
                                Tensor::zeros(&[1])
                            },
                        },
                    )
                }
                LayerSpec::Softmax => {
                    let y = softmax_rows(&x);
                    let output = y.clone();
                    (y, Cache::Softmax { output })
                }
            };
            if !y.is_finite() {
                return Err(NnError::NonFinite(format!(
                    "{} layer {i} ({})",
                    self.name,
                    layer.kind()
                )));
            }
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            x = y;
        }
        Ok(x)
    }

    /// Accumulates parameter gradients for the pass recorded in `tape` and
    /// returns the gradient with respect to the stack input.
    pub fn backward(&self, params: &mut ParamStore, tape: &Tape, grad_output: &Tensor) -> Result<Tensor, NnError> {
        self.backward_impl(params, tape, grad_output, true)
            .map(|g| g.expect("input gradient requested"))
    }

    /// Same as [`Stack::backward`] but skips the input gradient of the first layer.
    pub fn backward_params(&self, params: &mut ParamStore, tape: &Tape, grad_output: &Tensor) -> Result<(), NnError> {
        self.backward_impl(params, tape, grad_output, false).map(|_| ())
    }

    fn backward_impl(
        &self,
        params: &mut ParamStore,
        tape: &Tape,
        grad_output: &Tensor,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>, NnError> {
        if tape.caches.is_empty() {
            return Err(NnError::NoForwardPass(self.name.clone()));
        }
        if tape.stack != self.name || tape.caches.len() != self.layers.len() {
            return Err(NnError::State(format!(
                "tape recorded for '{}' replayed on '{}'",
                tape.stack, self.name
            )));
        }
        let mut g = grad_output.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let need_dx = want_input_grad || i > 0;
            g = match (*layer, cache) {
                (
                    LayerSpec::Conv2d {
                        kernel,
                        stride,
                        padding,
                        out_channels,
                        ..
                    },
                    Cache::Conv { cols, in_shape, out_hw },
                ) => {
                    let wname = self.param_name(i, "weight");
                    let bname = self.param_name(i, "bias");
                    let w = params.get(&wname)?.value.clone();
                    let geom = ConvGeom::new(in_shape, out_channels, kernel, stride, padding, *out_hw);
                    let (dx, dw, db) = conv_backward(&g, &w, cols, &geom, need_dx);
                    add_into(&mut params.get_mut(&wname)?.grad, &dw);
                    add_into(&mut params.get_mut(&bname)?.grad, &db);
                    match dx {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (LayerSpec::MaxPool2x2, Cache::Pool { argmax, in_shape }) => {
                    let mut dx = Tensor::zeros(in_shape);
                    for (&gi, &src) in g.data().iter().zip(argmax) {
                        dx.data_mut()[src as usize] += gi;
                    }
                    dx
                }
                (LayerSpec::Relu, Cache::Relu { sign }) => {
                    let mut dx = g.clone();
                    for (d, &s) in dx.data_mut().iter_mut().zip(sign) {
                        if s <= 0 {
                            *d = 0.0;
                        }
                    }
                    dx
                }
                (LayerSpec::Flatten, Cache::Flatten { in_shape }) => g.reshape(in_shape.clone())?,
                (
                    LayerSpec::Linear {
                        in_features,
                        out_features,
                    },
                    Cache::Linear { input },
                ) => {
                    let wname = self.param_name(i, "weight");
                    let bname = self.param_name(i, "bias");
                    let n = input.batch();
                    {
                        let p = params.get_mut(&wname)?;
                        gemm(
                            out_features,
                            n,
                            in_features,
                            g.data(),
                            true,
                            input.data(),
                            false,
                            1.0,
                            p.grad.data_mut(),
                        );
                    }
                    {
                        let p = params.get_mut(&bname)?;
                        let db = p.grad.data_mut();
                        for r in 0..n {
                            for (d, v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                    }
                    if !need_dx {
                        break;
                    }
                    let w = &params.get(&wname)?.value;
                    let mut dx = Tensor::zeros(&[n, in_features]);
                    gemm(
                        n,
                        out_features,
                        in_features,
                        g.data(),
                        false,
                        w.data(),
                        false,
                        0.0,
                        dx.data_mut(),
                    );
                    dx
                }
                (LayerSpec::Softmax, Cache::Softmax { output }) => {
                    let mut dx = g.clone();
                    let d = output.shape()[1];
                    for ((dr, yr), gr) in dx
                        .data_mut()
                        .chunks_exact_mut(d)
                        .zip(output.data().chunks_exact(d))
                        .zip(g.data().chunks_exact(d))
                    {
                        let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((o, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = y * (gv - dot);
                        }
                    }
                    dx
                }
                _ => return Err(NnError::State(format!("{} layer {i}: cache kind mismatch", self.name))),
            };
        }
        Ok(want_input_grad.then_some(g))
    }
}

fn add_into(dst: &mut Tensor, src: &[f32]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

/// `C[m x n] = beta * C + op(A) * op(B)` on dense row-major buffers.
/// `a_t` means A is stored `k x m`; `b_t` means B is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(in_shape: &[usize], oc: usize, k: usize, stride: usize, pad: usize, out_hw: (usize, usize)) -> Self {
        Self {
            c: in_shape[1],
            h: in_shape[2],
            w: in_shape[3],
            oc,
            k,
            stride,
            pad,
            oh: out_hw.0,
            ow: out_hw.1,
        }
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input pixel offset for (channel, kernel row, kernel col, out row, out col), if inside.
    #[inline]
    fn source(&self, ci: usize, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kj).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then(|| (ci * self.h + iy) * self.w + ix)
    }

    fn im2col(&self, img: &[f32], col: &mut [f32]) {
        let p = self.col_cols();
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = self.source(ci, ki, kj, oy, ox).map_or(0.0, |s| img[s]);
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], img: &mut [f32]) {
        let p = self.col_cols();
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some(s) = self.source(ci, ki, kj, oy, ox) {
                                img[s] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    oc: usize,
    k: usize,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> (Tensor, Cache) {
    let s = x.shape();
    let (n, h, wd) = (s[0], s[2], s[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let geom = ConvGeom::new(s, oc, k, stride, pad, (oh, ow));
    let (kr, p) = (geom.col_rows(), geom.col_cols());
    let in_stride = geom.c * h * wd;
    let mut cols = vec![0.0f32; if keep_cols { n * kr * p } else { kr * p }];
    let mut y = Tensor::zeros(&[n, oc, oh, ow]);
    for i in 0..n {
        let col = if keep_cols {
            &mut cols[i * kr * p..(i + 1) * kr * p]
        } else {
            &mut cols[..]
        };
        geom.im2col(&x.data()[i * in_stride..(i + 1) * in_stride], col);
        let out = &mut y.data_mut()[i * oc * p..(i + 1) * oc * p];
        for (o, row) in out.chunks_exact_mut(p).enumerate() {
            row.fill(b.data()[o]);
        }
        gemm(oc, kr, p, w.data(), false, col, false, 1.0, out);
    }
    let cache = Cache::Conv {
        cols: if keep_cols { cols } else { Vec::new() },
        in_shape: s.to_vec(),
        out_hw: (oh, ow),
    };
    (y, cache)
}

fn conv_backward(
    g: &Tensor,
    w: &Tensor,
    cols: &[f32],
    geom: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor>, Vec<f32>, Vec<f32>) {
    let n = g.batch();
    let (kr, p, oc) = (geom.col_rows(), geom.col_cols(), geom.oc);
    let mut dw = vec![0.0f32; oc * kr];
    let mut db = vec![0.0f32; oc];
    let in_stride = geom.c * geom.h * geom.w;
    let mut dx = need_dx.then(|| Tensor::zeros(&[n, geom.c, geom.h, geom.w]));
    let mut dcol = vec![0.0f32; if need_dx { kr * p } else { 0 }];
    for i in 0..n {
        let gi = &g.data()[i * oc * p..(i + 1) * oc * p];
        let col = &cols[i * kr * p..(i + 1) * kr * p];
        gemm(oc, p, kr, gi, false, col, true, 1.0, &mut dw);
        for (d, row) in db.iter_mut().zip(gi.chunks_exact(p)) {
            *d += row.iter().sum::<f32>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kr, oc, p, w.data(), true, gi, false, 0.0, &mut dcol);
            geom.col2im(&dcol, &mut dx.data_mut()[i * in_stride..(i + 1) * in_stride]);
        }
    }
    (dx, dw, db)
}

fn pool_forward(x: &Tensor) -> (Tensor, Cache) {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    let yd = y.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    // strict comparison keeps the first row-major maximum
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                yd[o] = xd[best];
                argmax.push(best as u32);
                o += 1;
            }
        }
    }
    (
        y,
        Cache::Pool {
            argmax,
            in_shape: s.to_vec(),
        },
    )
}

fn relu_forward(x: &Tensor) -> (Tensor, Cache) {
    let mut y = x.clone();
    let mut sign = Vec::with_capacity(x.len());
    for v in y.data_mut() {
        sign.push(if *v > 0.0 {
            1
        } else if *v < 0.0 {
            -1
        } else {
            0
        });
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    (y, Cache::Relu { sign })
}

fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor, out: usize) -> Tensor {
    let n = x.batch();
    let d = x.shape()[1];
    let mut y = Tensor::zeros(&[n, out]);
    for row in y.data_mut().chunks_exact_mut(out) {
        row.copy_from_slice(b.data());
    }
    gemm(n, d, out, x.data(), false, w.data(), true, 1.0, y.data_mut());
    y
}

/// Numerically stable softmax over the last axis of a `[N, D]` tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let d = *x.shape().last().expect("rank >= 1");
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(d) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

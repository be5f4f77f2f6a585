//! Multi-modal quality model: an image encoder and a pose/force encoder, each
//! producing 128 features, fused into the 128-d task feature `V_t` and a
//! two-class confidence.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, InputNorm, ScanSample};
use crate::nn::reference::{self, Activations};
use crate::nn::{
    cross_entropy, cross_entropy_reduced, softmax_rows, ActivationPattern, LayerSpec, NnError, Objective, ParamStore,
    Reduction, Sgd, Stack, Tape, Tensor,
};
use crate::phantom::{ImageSize, ProbeState, UltrasoundFrame};

pub const MODEL_MAGIC: &[u8; 5] = b"USGM1";
pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 128;

const EVAL_CHUNK: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input state: {0}")]
    State(String),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("dataset is empty")]
    Empty,
    #[error("training diverged in epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("{variant} repeat {repeat}: {source}")]
    Ablation {
        variant: Variant,
        repeat: usize,
        source: Box<ModelError>,
    },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {found} (this build reads {MODEL_FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("model file truncated: {0}")]
    Truncated(String),
    #[error("model checksum mismatch: header {expected:#010x}, payload {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Nn(NnError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<NnError> for ModelError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Shape(m) => ModelError::Shape(m),
            other => ModelError::Nn(other),
        }
    }
}

/// Which inputs reach the pose/force side of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Image + pose.
    Net1,
    /// Image + force.
    Net2,
    /// Image + separate pose and force encoders, no interaction.
    Net3,
    /// Image + joint pose/force encoder.
    Net4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Net1, Variant::Net2, Variant::Net3, Variant::Net4];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Net1 => "net1",
            Variant::Net2 => "net2",
            Variant::Net3 => "net3",
            Variant::Net4 => "net4",
        }
    }

    /// Widths and feature ranges of the pose/force streams.
    fn streams(self) -> &'static [(&'static str, std::ops::Range<usize>)] {
        match self {
            Variant::Net1 => &[("pf", 0..4)],
            Variant::Net2 => &[("pf", 4..10)],
            Variant::Net3 => &[("pose", 0..4), ("force", 4..10)],
            Variant::Net4 => &[("pf", 0..10)],
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::Config(format!("unknown variant '{s}' (net1..net4)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image: ImageSize,
    /// One 3x3 conv + relu + 2x2 max-pool block per entry.
    pub conv_channels: Vec<usize>,
    /// Stride of the first convolution.
    pub first_stride: usize,
    /// Widths of the four fully connected pose/force layers; the last is the feature size.
    pub pf_widths: Vec<usize>,
    /// Width of the fused task feature.
    pub fusion_width: usize,
    /// How per-sample losses combine into a minibatch loss during training.
    pub reduction: Reduction,
    /// Fitted from the first training set when absent.
    pub input_norm: Option<InputNorm>,
}

impl ModelConfig {
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            image: ImageSize {
                height: 64,
                width: 64,
                channels: 1,
            },
            conv_channels: vec![16, 32, 64, 64],
            first_stride: 2,
            pf_widths: vec![64, 128, 128, 128],
            fusion_width: FEATURE_DIM,
            reduction: Reduction::Sum,
            input_norm: None,
        }
    }

    /// Smallest configuration of the same shape, for gradient checks.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            image: ImageSize {
                height: 16,
                width: 16,
                channels: 1,
            },
            conv_channels: vec![2, 2],
            pf_widths: vec![4, 4, 4, FEATURE_DIM],
            ..Self::desk(variant)
        }
    }

    pub fn with_image(mut self, image: ImageSize) -> Self {
        self.image = image;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    fn image_stack(&self) -> Stack {
        let mut layers = Vec::new();
        let mut c = self.image.channels;
        for (i, &oc) in self.conv_channels.iter().enumerate() {
            let stride = if i == 0 { self.first_stride } else { 1 };
            layers.extend([
                LayerSpec::conv3x3(c, oc, stride),
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
            ]);
            c = oc;
        }
        layers.push(LayerSpec::Flatten);
        let flat = self.conv_output().iter().product::<usize>();
        layers.extend([LayerSpec::linear(flat, FEATURE_DIM), LayerSpec::Relu]);
        Stack::new("image", layers)
    }

    /// Spatial output of the conv blocks, `[C, H, W]`, or zeros if the image is too small.
    fn conv_output(&self) -> [usize; 3] {
        let (mut h, mut w) = (self.image.height, self.image.width);
        let mut c = self.image.channels;
        for (i, &oc) in self.conv_channels.iter().enumerate() {
            let s = if i == 0 { self.first_stride.max(1) } else { 1 };
            h = (h + 2 - 3) / s + 1;
            w = (w + 2 - 3) / s + 1;
            h /= 2;
            w /= 2;
            c = oc;
        }
        [c, h, w]
    }

    fn pf_stack(&self, name: &str, input: usize) -> Stack {
        let mut layers = Vec::new();
        let mut d = input;
        for &o in &self.pf_widths {
            layers.extend([LayerSpec::linear(d, o), LayerSpec::Relu]);
            d = o;
        }
        Stack::new(name, layers)
    }

    fn fused_width(&self) -> usize {
        FEATURE_DIM * (1 + self.variant.streams().len())
    }

    fn stacks(&self) -> Stacks {
        Stacks {
            image: self.image_stack(),
            streams: self
                .variant
                .streams()
                .iter()
                .map(|(name, range)| (self.pf_stack(name, range.len()), range.clone()))
                .collect(),
            fusion: Stack::new(
                "fusion",
                vec![
                    LayerSpec::linear(self.fused_width(), self.fusion_width),
                    LayerSpec::Relu,
                ],
            ),
            head: Stack::new("head", vec![LayerSpec::linear(self.fusion_width, 2)]),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.image.height < 16 || self.image.width < 16 || self.image.channels == 0 {
            return bad(format!("image {:?} below 16x16", self.image));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be nonempty and positive".into());
        }
        if self.first_stride == 0 {
            return bad("first_stride must be >= 1".into());
        }
        if self.conv_output()[1] == 0 || self.conv_output()[2] == 0 {
            return bad(format!(
                "{} conv blocks shrink a {}x{} image to nothing",
                self.conv_channels.len(),
                self.image.height,
                self.image.width
            ));
        }
        if self.pf_widths.len() != 4 || self.pf_widths.contains(&0) {
            return bad(format!(
                "pose/force encoder needs 4 positive widths, got {:?}",
                self.pf_widths
            ));
        }
        if self.pf_widths[3] != FEATURE_DIM {
            return bad(format!(
                "pose/force encoder must end at {FEATURE_DIM}, got {}",
                self.pf_widths[3]
            ));
        }
        if self.fusion_width != FEATURE_DIM {
            return bad(format!(
                "task feature must be {FEATURE_DIM}-d, got {}",
                self.fusion_width
            ));
        }
        if let Some(n) = &self.input_norm {
            let means = n.mean.iter().chain([&n.pixel_mean]);
            let stds = n.std.iter().chain([&n.pixel_std]);
            if !(means.into_iter().all(|m| m.is_finite()) && stds.into_iter().all(|s| s.is_finite() && *s > 0.0)) {
                return bad("input normalization needs finite means and positive deviations".into());
            }
        }
        let s = self.stacks();
        s.image
            .output_shape(&[self.image.channels, self.image.height, self.image.width])
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(())
    }

    /// Parameter count without building the model.
    pub fn param_count(&self) -> usize {
        let s = self.stacks();
        s.image.param_count()
            + s.streams.iter().map(|(st, _)| st.param_count()).sum::<usize>()
            + s.fusion.param_count()
            + s.head.param_count()
    }
}

struct Stacks {
    image: Stack,
    streams: Vec<(Stack, std::ops::Range<usize>)>,
    fusion: Stack,
    head: Stack,
}

/// The 128-d fused representation `V_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFeature(Vec<f32>);

impl TaskFeature {
    pub fn new(values: Vec<f32>) -> Result<Self, ModelError> {
        if values.len() != FEATURE_DIM {
            return Err(ModelError::Shape(format!(
                "task feature needs {FEATURE_DIM} values, got {}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(ModelError::Nn(NnError::NonFinite("task feature".into())));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Probability of label 1.
    pub confidence: f32,
    /// `[P(label 0), P(label 1)]`.
    pub probabilities: [f32; 2],
    pub feature: TaskFeature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch: 20,
            epochs: 20,
            seed: 0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ModelError::Hyper(format!("lr {} must be > 0", self.lr)));
        }
        if self.batch == 0 {
            return Err(ModelError::Hyper("batch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Rows are true labels, columns predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; 2]; 2]);

impl Confusion {
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        (self.0[0][0] + self.0[1][1]) as f64 / t as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
    /// Mean label-1 confidence over samples whose true label is 0 and 1.
    pub mean_confidence: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub hyper: Hyper,
    pub epochs: Vec<EpochStats>,
    pub wall_clock_s: f64,
    /// After the last epoch, on the validation set when given, otherwise the training set.
    pub final_evaluation: Evaluation,
}

impl TrainReport {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_accuracy)
    }

    /// First epoch (1-based) whose validation accuracy reaches `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.val_accuracy.is_some_and(|a| a >= threshold))
            .map(|e| e.epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                e.epoch,
                e.train_loss,
                e.train_accuracy,
                opt(e.val_loss),
                opt(e.val_accuracy)
            ));
        }
        out
    }
}

/// Image and pose/force inputs for a batch, already normalized.
pub struct Batch {
    pub images: Tensor,
    pub pf: Tensor,
}

struct Trace {
    image: Tape,
    streams: Vec<Tape>,
    fusion: Tape,
    head: Tape,
}

pub struct QualityModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub trained_epochs: usize,
    pub train_seed: u64,
    stacks: Stacks,
}

impl Clone for QualityModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            trained_epochs: self.trained_epochs,
            train_seed: self.train_seed,
            stacks: self.config.stacks(),
        }
    }
}

impl std::fmt::Debug for QualityModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QualityModel")
            .field("variant", &self.config.variant)
            .field("params", &self.params.numel())
            .field("trained_epochs", &self.trained_epochs)
            .finish()
    }
}

impl QualityModel {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let stacks = config.stacks();
        let mut params = ParamStore::new(seed);
        stacks.image.init_params(&mut params)?;
        for (s, _) in &stacks.streams {
            s.init_params(&mut params)?;
        }
        stacks.fusion.init_params(&mut params)?;
        stacks.head.init_params(&mut params)?;
        Ok(Self {
            config,
            params,
            trained_epochs: 0,
            train_seed: seed,
            stacks,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Width of the pose/force input this variant consumes.
    pub fn pf_width(&self) -> usize {
        self.stacks.streams.iter().map(|(_, r)| r.len()).sum()
    }

    fn check_state(state: &ProbeState) -> Result<(), ModelError> {
        if !state.pose().is_unit() {
            return Err(ModelError::State(format!("pose {:?} is not unit", state.pose())));
        }
        Ok(())
    }

    fn norm(&self) -> InputNorm {
        self.config.input_norm.unwrap_or(InputNorm::IDENTITY)
    }

    /// Uses the training set's normalization, or fits one, unless already set.
    fn fit_norm(&mut self, train: &Dataset) {
        if self.config.input_norm.is_none() {
            self.config.input_norm = train.norm.or_else(|| InputNorm::from_samples(&train.samples));
        }
    }

    /// Normalized pose/force row for this variant.
    fn pf_row(&self, state: &ProbeState) -> Vec<f32> {
        let f = self.norm().apply(&state.features());
        self.stacks
            .streams
            .iter()
            .flat_map(|(_, r)| f[r.clone()].to_vec())
            .collect()
    }

    fn push_image(&self, frame: &UltrasoundFrame, out: &mut Vec<f32>) -> Result<(), ModelError> {
        let size = self.config.image;
        if frame.size != size || frame.pixels.len() != size.len() {
            return Err(ModelError::Shape(format!(
                "frame {:?} but model expects {:?}",
                frame.size, size
            )));
        }
        let norm = self.norm();
        // HWC -> CHW
        for c in 0..size.channels {
            out.extend(
                frame
                    .pixels
                    .iter()
                    .skip(c)
                    .step_by(size.channels)
                    .map(|&p| norm.apply_pixel(p)),
            );
        }
        Ok(())
    }

    pub fn image_tensor(&self, frames: &[&UltrasoundFrame]) -> Result<Tensor, ModelError> {
        let size = self.config.image;
        let mut data = Vec::with_capacity(frames.len() * size.len());
        for f in frames {
            self.push_image(f, &mut data)?;
        }
        Ok(Tensor::new(
            vec![frames.len(), size.channels, size.height, size.width],
            data,
        )?)
    }

    pub fn pf_tensor(&self, states: &[&ProbeState]) -> Result<Tensor, ModelError> {
        let mut data = Vec::with_capacity(states.len() * self.pf_width());
        for s in states {
            Self::check_state(s)?;
            data.extend(self.pf_row(s));
        }
        Ok(Tensor::new(vec![states.len(), self.pf_width()], data)?)
    }

    pub fn batch(&self, samples: &[&ScanSample]) -> Result<Batch, ModelError> {
        let frames: Vec<_> = samples.iter().map(|s| &s.frame).collect();
        let states: Vec<_> = samples.iter().map(|s| &s.state).collect();
        Ok(Batch {
            images: self.image_tensor(&frames)?,
            pf: self.pf_tensor(&states)?,
        })
    }

    fn check_pf(&self, pf: &Tensor) -> Result<(), ModelError> {
        if pf.shape().len() != 2 || pf.shape()[1] != self.pf_width() {
            return Err(ModelError::Shape(format!(
                "{} expects pose/force rows of width {}, got {:?}",
                self.variant(),
                self.pf_width(),
                pf.shape()
            )));
        }
        Ok(())
    }

    /// Image features `[N, 128]`.
    pub fn image_features(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.stacks.image.forward(&self.params, images)?)
    }

    /// Logits and task features from precomputed image features. An image
    /// feature batch of one row is broadcast over all pose/force rows.
    pub fn head_from_features(&self, image_features: &Tensor, pf: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        self.check_pf(pf)?;
        let n = pf.batch();
        let img = match image_features.batch() {
            b if b == n => image_features.clone(),
            1 => Tensor::new(vec![n, FEATURE_DIM], image_features.data().repeat(n))?,
            b => return Err(ModelError::Shape(format!("{b} image rows for {n} pose/force rows"))),
        };
        let mut parts = vec![img];
        let widths: Vec<usize> = self.stacks.streams.iter().map(|(_, r)| r.len()).collect();
        for ((stack, _), x) in self.stacks.streams.iter().zip(pf.split_features(&widths)?) {
            parts.push(stack.forward(&self.params, &x)?);
        }
        let cat = Tensor::concat_features(&parts.iter().collect::<Vec<_>>())?;
        let v = self.stacks.fusion.forward(&self.params, &cat)?;
        let logits = self.stacks.head.forward(&self.params, &v)?;
        Ok((logits, v))
    }

    /// Logits `[N, 2]` and task features `[N, 128]`.
    pub fn forward_batch(&self, batch: &Batch) -> Result<(Tensor, Tensor), ModelError> {
        self.check_pf(&batch.pf)?;
        let img = self.image_features(&batch.images)?;
        self.head_from_features(&img, &batch.pf)
    }

    pub fn forward(&self, frame: &UltrasoundFrame, state: &ProbeState) -> Result<Prediction, ModelError> {
        Self::check_state(state)?;
        let batch = Batch {
            images: self.image_tensor(&[frame])?,
            pf: self.pf_tensor(&[state])?,
        };
        let (logits, v) = self.forward_batch(&batch)?;
        let p = softmax_rows(&logits);
        Ok(Prediction {
            confidence: p.data()[1],
            probabilities: [p.data()[0], p.data()[1]],
            feature: TaskFeature::new(v.into_data())?,
        })
    }

    /// Confidence of label 1 for many states sharing one frame.
    pub fn score_states(&self, frame: &UltrasoundFrame, states: &[ProbeState]) -> Result<Vec<f32>, ModelError> {
        let img = self.image_features(&self.image_tensor(&[frame])?)?;
        let mut out = Vec::with_capacity(states.len());
        for chunk in states.chunks(1000) {
            let refs: Vec<&ProbeState> = chunk.iter().collect();
            let (logits, _) = self.head_from_features(&img, &self.pf_tensor(&refs)?)?;
            out.extend(softmax_rows(&logits).data().chunks_exact(2).map(|r| r[1]));
        }
        Ok(out)
    }

    fn forward_train(&self, batch: &Batch, trace: &mut Trace) -> Result<Tensor, NnError> {
        let img = self
            .stacks
            .image
            .forward_cached(&self.params, &batch.images, &mut trace.image)?;
        let widths: Vec<usize> = self.stacks.streams.iter().map(|(_, r)| r.len()).collect();
        let mut parts = vec![img];
        for (((stack, _), x), tape) in self
            .stacks
            .streams
            .iter()
            .zip(batch.pf.split_features(&widths)?)
            .zip(trace.streams.iter_mut())
        {
            parts.push(stack.forward_cached(&self.params, &x, tape)?);
        }
        let cat = Tensor::concat_features(&parts.iter().collect::<Vec<_>>())?;
        let v = self
            .stacks
            .fusion
            .forward_cached(&self.params, &cat, &mut trace.fusion)?;
        self.stacks.head.forward_cached(&self.params, &v, &mut trace.head)
    }

    fn backward_train(&mut self, trace: &Trace, grad_logits: &Tensor) -> Result<(), NnError> {
        let gv = self.stacks.head.backward(&mut self.params, &trace.head, grad_logits)?;
        let gcat = self.stacks.fusion.backward(&mut self.params, &trace.fusion, &gv)?;
        let widths: Vec<usize> = std::iter::repeat_n(FEATURE_DIM, 1 + self.stacks.streams.len()).collect();
        let grads = gcat.split_features(&widths)?;
        self.stacks
            .image
            .backward_params(&mut self.params, &trace.image, &grads[0])?;
        for (((stack, _), g), tape) in self.stacks.streams.iter().zip(&grads[1..]).zip(&trace.streams) {
            stack.backward_params(&mut self.params, tape, g)?;
        }
        Ok(())
    }

    fn new_trace(&self) -> Trace {
        Trace {
            image: Tape::default(),
            streams: self.stacks.streams.iter().map(|_| Tape::default()).collect(),
            fusion: Tape::default(),
            head: Tape::default(),
        }
    }

    /// Logits of the composed model evaluated in `f64` by the naive reference
    /// layers, under `params` instead of the model's own.
    pub fn reference_logits(
        &self,
        params: &ParamStore,
        batch: &Batch,
    ) -> Result<(Activations, ActivationPattern), ModelError> {
        self.check_pf(&batch.pf)?;
        let mut pattern = ActivationPattern::default();
        let img = reference::forward_f64(
            &self.stacks.image,
            params,
            &Activations::from_f32(batch.images.shape(), batch.images.data()),
            &mut pattern,
        )?;
        let widths: Vec<usize> = self.stacks.streams.iter().map(|(_, r)| r.len()).collect();
        let mut parts = vec![img];
        for ((stack, _), x) in self.stacks.streams.iter().zip(batch.pf.split_features(&widths)?) {
            parts.push(reference::forward_f64(
                stack,
                params,
                &Activations::from_f32(x.shape(), x.data()),
                &mut pattern,
            )?);
        }
        let n = batch.pf.batch();
        let mut cat = Vec::with_capacity(n * self.config.fused_width());
        for i in 0..n {
            for p in &parts {
                cat.extend_from_slice(p.row(i));
            }
        }
        let cat = Activations {
            shape: vec![n, self.config.fused_width()],
            data: cat,
        };
        let v = reference::forward_f64(&self.stacks.fusion, params, &cat, &mut pattern)?;
        let logits = reference::forward_f64(&self.stacks.head, params, &v, &mut pattern)?;
        Ok((logits, pattern))
    }

    /// Mean cross-entropy and accumulated gradients for one batch.
    pub fn loss_and_grads(&mut self, batch: &Batch, labels: &[u8]) -> Result<f32, ModelError> {
        let mut trace = self.new_trace();
        let logits = self.forward_train(batch, &mut trace)?;
        let (loss, g) = cross_entropy(&logits, labels)?;
        self.backward_train(&trace, &g)?;
        Ok(loss)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation, ModelError> {
        if data.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut tally = Tally::default();
        for chunk in data.samples.chunks(EVAL_CHUNK) {
            let refs: Vec<&ScanSample> = chunk.iter().collect();
            let (logits, _) = self.forward_batch(&self.batch(&refs)?)?;
            tally.add(&logits, &chunk.iter().map(|s| s.label).collect::<Vec<_>>())?;
        }
        Ok(tally.finish())
    }

    /// Minibatch SGD on cross-entropy with per-epoch shuffling from `hyper.seed`.
    /// An unset input normalization is taken from `train`.
    pub fn train(&mut self, train: &Dataset, val: Option<&Dataset>, hyper: &Hyper) -> Result<TrainReport, ModelError> {
        hyper.validate()?;
        if train.is_empty() || val.is_some_and(|v| v.is_empty()) {
            return Err(ModelError::Empty);
        }
        if hyper.epochs > 0 {
            self.fit_norm(train);
        }
        let start = Instant::now();
        let sgd = Sgd::new(hyper.lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut trace = self.new_trace();
        let mut epochs = Vec::with_capacity(hyper.epochs);
        self.params.zero_grads();
        for epoch in 1..=hyper.epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct) = (0.0f64, 0usize);
            for idx in order.chunks(hyper.batch) {
                let samples: Vec<&ScanSample> = idx.iter().map(|&i| &train.samples[i]).collect();
                let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
                let batch = self.batch(&samples)?;
                let diverged = |detail: String| ModelError::Diverged { epoch, detail };
                let logits = match self.forward_train(&batch, &mut trace) {
                    Err(NnError::NonFinite(where_)) => return Err(diverged(where_)),
                    r => r?,
                };
                let (loss, g) = cross_entropy_reduced(&logits, &labels, self.config.reduction)?;
                let loss = per_sample(loss, labels.len(), self.config.reduction);
                if !loss.is_finite() {
                    return Err(diverged(format!("loss {loss}")));
                }
                self.backward_train(&trace, &g)?;
                sgd.step(&mut self.params);
                loss_sum += loss as f64 * labels.len() as f64;
                correct += logits
                    .data()
                    .chunks_exact(2)
                    .zip(&labels)
                    .filter(|(row, &y)| predict(row) == y)
                    .count();
            }
            let v = val.map(|v| self.evaluate(v)).transpose()?;
            self.trained_epochs += 1;
            tracing::debug!(epoch, loss = loss_sum / train.len() as f64, val = ?v.as_ref().map(|e| e.accuracy));
            epochs.push(EpochStats {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                train_accuracy: correct as f64 / train.len() as f64,
                val_loss: v.as_ref().map(|e| e.loss),
                val_accuracy: v.as_ref().map(|e| e.accuracy),
            });
        }
        if hyper.epochs > 0 {
            self.train_seed = hyper.seed;
        }
        let final_evaluation = self.evaluate(val.unwrap_or(train))?;
        Ok(TrainReport {
            variant: self.variant(),
            hyper: *hyper,
            epochs,
            wall_clock_s: start.elapsed().as_secs_f64(),
            final_evaluation,
        })
    }

    /// Warm start: trains the image encoder with a temporary image-only
    /// head on `(frame, label)` pairs, then discards the head. Nothing but
    /// image-encoder weights changes.
    pub fn pretrain_image_encoder(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        hyper: &Hyper,
    ) -> Result<TrainReport, ModelError> {
        hyper.validate()?;
        if train.is_empty() || val.is_some_and(|v| v.is_empty()) {
            return Err(ModelError::Empty);
        }
        if hyper.epochs > 0 {
            self.fit_norm(train);
        }
        let start = Instant::now();
        let head = Stack::new("warmup", vec![LayerSpec::linear(FEATURE_DIM, 2)]);
        let mut head_params = ParamStore::new(hyper.seed ^ 0x9e37_79b9);
        head.init_params(&mut head_params)?;
        let image = self.stacks.image.clone();
        let sgd = Sgd::new(hyper.lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let (mut t_img, mut t_head) = (Tape::default(), Tape::default());
        let logits_of =
            |model: &Self, head_params: &ParamStore, samples: &[&ScanSample]| -> Result<Tensor, ModelError> {
                let frames: Vec<_> = samples.iter().map(|s| &s.frame).collect();
                let f = image.forward(&model.params, &model.image_tensor(&frames)?)?;
                Ok(head.forward(head_params, &f)?)
            };
        let eval = |model: &Self, head_params: &ParamStore, data: &Dataset| -> Result<Evaluation, ModelError> {
            let mut tally = Tally::default();
            for chunk in data.samples.chunks(EVAL_CHUNK) {
                let refs: Vec<&ScanSample> = chunk.iter().collect();
                let logits = logits_of(model, head_params, &refs)?;
                tally.add(&logits, &chunk.iter().map(|s| s.label).collect::<Vec<_>>())?;
            }
            Ok(tally.finish())
        };
        let mut epochs = Vec::with_capacity(hyper.epochs);
        self.params.zero_grads();
        for epoch in 1..=hyper.epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct) = (0.0f64, 0usize);
            for idx in order.chunks(hyper.batch) {
                let samples: Vec<&ScanSample> = idx.iter().map(|&i| &train.samples[i]).collect();
                let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
                let frames: Vec<_> = samples.iter().map(|s| &s.frame).collect();
                let x = self.image_tensor(&frames)?;
                let f = image.forward_cached(&self.params, &x, &mut t_img)?;
                let logits = head.forward_cached(&head_params, &f, &mut t_head)?;
                let (loss, g) = cross_entropy_reduced(&logits, &labels, self.config.reduction)?;
                let loss = per_sample(loss, labels.len(), self.config.reduction);
                if !loss.is_finite() {
                    return Err(ModelError::Diverged {
                        epoch,
                        detail: format!("warm-start loss {loss}"),
                    });
                }
                let gf = head.backward(&mut head_params, &t_head, &g)?;
                image.backward_params(&mut self.params, &t_img, &gf)?;
                sgd.step(&mut head_params);
                sgd.step_only(&mut self.params, &["image."]);
                loss_sum += loss as f64 * labels.len() as f64;
                correct += logits
                    .data()
                    .chunks_exact(2)
                    .zip(&labels)
                    .filter(|(row, &y)| predict(row) == y)
                    .count();
            }
            let v = val.map(|v| eval(self, &head_params, v)).transpose()?;
            epochs.push(EpochStats {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                train_accuracy: correct as f64 / train.len() as f64,
                val_loss: v.as_ref().map(|e| e.loss),
                val_accuracy: v.as_ref().map(|e| e.accuracy),
            });
        }
        let final_evaluation = eval(self, &head_params, val.unwrap_or(train))?;
        Ok(TrainReport {
            variant: self.variant(),
            hyper: *hyper,
            epochs,
            wall_clock_s: start.elapsed().as_secs_f64(),
            final_evaluation,
        })
    }

    /// Layout: magic, version u32, config JSON (u32 length), trained epochs
    /// u32, train seed u64, parameter blob (u64 length), then CRC32 of
    /// everything between the magic and the CRC.
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        let params = self.params.to_bytes();
        let mut body = Vec::with_capacity(cfg.len() + params.len() + 32);
        body.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        body.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        body.extend_from_slice(&cfg);
        body.extend_from_slice(&(self.trained_epochs as u32).to_le_bytes());
        body.extend_from_slice(&self.train_seed.to_le_bytes());
        body.extend_from_slice(&(params.len() as u64).to_le_bytes());
        body.extend_from_slice(&params);
        let crc = crc32fast::hash(&body);
        let mut out = Vec::with_capacity(body.len() + 9);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let trunc = |what: &str| ModelError::Truncated(what.to_string());
        if bytes.len() < 5 {
            return Err(trunc("magic"));
        }
        if &bytes[..5] != MODEL_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let mut pos = 5;
        let mut take = |n: usize, what: &str| -> Result<&[u8], ModelError> {
            if bytes.len() - pos < n {
                return Err(trunc(what));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Version { found: version });
        }
        let cfg_len = u32::from_le_bytes(take(4, "config length")?.try_into().unwrap()) as usize;
        let cfg = take(cfg_len, "config")?;
        let epochs = u32::from_le_bytes(take(4, "epochs")?.try_into().unwrap());
        let seed = u64::from_le_bytes(take(8, "seed")?.try_into().unwrap());
        let plen = u64::from_le_bytes(take(8, "parameter length")?.try_into().unwrap());
        let plen = usize::try_from(plen).map_err(|_| trunc("parameters"))?;
        let pbytes = take(plen, "parameters")?;
        let body_end = 5 + 4 + 4 + cfg_len + 4 + 8 + 8 + plen;
        let expected = u32::from_le_bytes(take(4, "checksum")?.try_into().unwrap());
        if bytes.len() != body_end + 4 {
            return Err(ModelError::Format(format!(
                "{} trailing bytes",
                bytes.len() - body_end - 4
            )));
        }
        let actual = crc32fast::hash(&bytes[5..body_end]);
        if actual != expected {
            return Err(ModelError::Checksum { expected, actual });
        }
        let config: ModelConfig =
            serde_json::from_slice(cfg).map_err(|e| ModelError::Format(format!("config: {e}")))?;
        config.validate()?;
        let params = ParamStore::from_bytes(pbytes).map_err(|e| ModelError::Format(e.to_string()))?;
        let mut model = Self::build(config, seed)?;
        for p in model.params.iter_mut() {
            let src = params.get(&p.name).map_err(|e| ModelError::Format(e.to_string()))?;
            if src.value.shape() != p.value.shape() {
                return Err(ModelError::Format(format!("{}: shape {:?}", p.name, src.value.shape())));
            }
            p.value = src.value.clone();
        }
        if params.len() != model.params.len() {
            return Err(ModelError::Format(format!(
                "{} parameters in file, {} in config",
                params.len(),
                model.params.len()
            )));
        }
        model.trained_epochs = epochs as usize;
        model.train_seed = seed;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).and_then(|_| f.sync_all()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| ModelError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Default)]
struct Tally {
    confusion: Confusion,
    loss_sum: f64,
    conf_sum: [f64; 2],
}

impl Tally {
    fn add(&mut self, logits: &Tensor, labels: &[u8]) -> Result<(), ModelError> {
        let (loss, _) = cross_entropy(logits, labels)?;
        self.loss_sum += loss as f64 * labels.len() as f64;
        let probs = softmax_rows(logits);
        for ((row, p), &y) in logits
            .data()
            .chunks_exact(2)
            .zip(probs.data().chunks_exact(2))
            .zip(labels)
        {
            self.confusion.0[y as usize][predict(row) as usize] += 1;
            self.conf_sum[y as usize] += p[1] as f64;
        }
        Ok(())
    }

    fn finish(self) -> Evaluation {
        let c = &self.confusion.0;
        let per = |y: usize| {
            let n = c[y][0] + c[y][1];
            if n == 0 {
                0.0
            } else {
                self.conf_sum[y] / n as f64
            }
        };
        Evaluation {
            loss: self.loss_sum / self.confusion.total().max(1) as f64,
            accuracy: self.confusion.accuracy(),
            confusion: self.confusion,
            mean_confidence: [per(0), per(1)],
        }
    }
}

fn per_sample(loss: f32, n: usize, reduction: Reduction) -> f32 {
    match reduction {
        Reduction::Mean => loss,
        Reduction::Sum => loss / n as f32,
    }
}

/// Mean cross-entropy of the whole composed model on one batch, as a
/// gradient-check objective over an external parameter store.
pub struct ModelObjective<'a> {
    pub model: &'a QualityModel,
    pub batch: &'a Batch,
    pub labels: &'a [u8],
}

impl Objective for ModelObjective<'_> {
    fn backprop(&self, params: &mut ParamStore) -> Result<(), NnError> {
        let mut m = self.model.clone();
        m.params = params.clone();
        m.params.zero_grads();
        m.loss_and_grads(self.batch, self.labels).map_err(|e| match e {
            ModelError::Nn(e) => e,
            other => NnError::State(other.to_string()),
        })?;
        for p in params.iter_mut() {
            p.grad = m.params.get(&p.name)?.grad.clone();
        }
        Ok(())
    }

    fn reference_loss(&self, params: &ParamStore) -> Result<(f64, ActivationPattern), NnError> {
        let (logits, pattern) = self
            .model
            .reference_logits(params, self.batch)
            .map_err(|e| NnError::State(e.to_string()))?;
        let mut total = 0.0;
        for (i, &y) in self.labels.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y as usize];
        }
        Ok((total / self.labels.len() as f64, pattern))
    }
}

/// Argmax of a two-logit row; ties go to label 0.
fn predict(row: &[f32]) -> u8 {
    (row[1] > row[0]) as u8
}

/// Accuracy of always answering the majority label.
pub fn majority_baseline(data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let p = data.positives() as f64 / data.len() as f64;
    p.max(1.0 - p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub repeat: usize,
    pub seed: u64,
    pub val_accuracy: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean difference with a two-sided 95% t interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<VariantSummary>,
    pub majority_baseline: f64,
    /// net4 minus net3 validation accuracy, paired by repeat.
    pub net4_minus_net3: Option<Interval>,
}

impl AblationReport {
    pub fn summary_of(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,repeat,seed,val_accuracy,wall_clock_s\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.3}\n",
                r.variant, r.repeat, r.seed, r.val_accuracy, r.wall_clock_s
            ));
        }
        out
    }
}

impl std::fmt::Display for AblationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "majority baseline {:.4}", self.majority_baseline)?;
        for s in &self.summary {
            writeln!(
                f,
                "{}  mean {:.4}  std {:.4}  range [{:.4}, {:.4}]",
                s.variant, s.mean, s.std, s.min, s.max
            )?;
        }
        if let Some(g) = self.net4_minus_net3 {
            writeln!(f, "net4 - net3  {:+.4}  95% CI [{:+.4}, {:+.4}]", g.mean, g.lo, g.hi)?;
        }
        Ok(())
    }
}

/// Two-sided 97.5% quantile of Student's t.
fn t_quantile(df: usize) -> f64 {
    const T: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
        2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    match df {
        0 => f64::INFINITY,
        d if d <= 30 => T[d - 1],
        _ => 1.96,
    }
}

pub fn mean_interval(xs: &[f64]) -> Option<Interval> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some(Interval {
            mean,
            lo: mean,
            hi: mean,
        });
    }
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let half = t_quantile(xs.len() - 1) * sd / n.sqrt();
    Some(Interval {
        mean,
        lo: mean - half,
        hi: mean + half,
    })
}

/// Trains every variant `repeats` times on the same split. Repeat `r` of
/// every variant uses the same seed, so differences are paired.
pub fn ablate(
    base: &ModelConfig,
    variants: &[Variant],
    train: &Dataset,
    val: &Dataset,
    hyper: &Hyper,
    repeats: usize,
) -> Result<AblationReport, ModelError> {
    if repeats == 0 || variants.is_empty() {
        return Err(ModelError::Hyper("need at least one variant and one repeat".into()));
    }
    let mut runs = Vec::new();
    for &variant in variants {
        for repeat in 0..repeats {
            let seed = hyper.seed.wrapping_add(repeat as u64);
            let annotate = |e: ModelError| ModelError::Ablation {
                variant,
                repeat,
                source: Box::new(e),
            };
            let mut model = QualityModel::build(base.clone().with_variant(variant), seed).map_err(annotate)?;
            let report = model
                .train(train, Some(val), &Hyper { seed, ..*hyper })
                .map_err(annotate)?;
            let acc = report.final_evaluation.accuracy;
            tracing::info!(%variant, repeat, acc, "ablation run");
            runs.push(AblationRun {
                variant,
                repeat,
                seed,
                val_accuracy: acc,
                wall_clock_s: report.wall_clock_s,
            });
        }
    }
    let accs = |v: Variant| -> Vec<f64> { runs.iter().filter(|r| r.variant == v).map(|r| r.val_accuracy).collect() };
    let summary = variants
        .iter()
        .map(|&v| {
            let a = accs(v);
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            VariantSummary {
                variant: v,
                mean,
                std: (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt(),
                min: a.iter().copied().fold(f64::INFINITY, f64::min),
                max: a.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let gap = if variants.contains(&Variant::Net3) && variants.contains(&Variant::Net4) {
        let d: Vec<f64> = accs(Variant::Net4)
            .iter()
            .zip(accs(Variant::Net3))
            .map(|(a, b)| a - b)
            .collect();
        mean_interval(&d)
    } else {
        None
    };
    Ok(AblationReport {
        runs,
        summary,
        majority_baseline: majority_baseline(val),
        net4_minus_net3: gap,
    })
}

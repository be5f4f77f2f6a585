//! Demonstration datasets: scripted probe trajectories over the phantom,
//! labelled by the quality oracle, with a versioned binary file format.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::phantom::{self, mix64, ImageSize, PhantomConfig, PhantomError, ProbeState, UltrasoundFrame};
use crate::quat::{quat_distance, Quat};

pub const DATASET_MAGIC: &[u8; 5] = b"USGD1";
pub const FORMAT_VERSION: u32 = 1;

/// Largest per-step orientation change a scripted policy may make (rad).
pub const MAX_POSE_STEP: f64 = 0.1;
/// Largest per-step change of the normal force (N).
pub const MAX_FZ_STEP: f64 = 1.0;

// Policies move strictly inside the published bounds.
const POSE_STEP_CAP: f64 = 0.08;
const FZ_STEP_CAP: f64 = 0.8;
const LATERAL_STEP_CAP: f64 = 0.4;
const TORQUE_STEP_CAP: f64 = 4.0;

// Amplitude of the in-plane force (N) and torque (N·mm) waypoints. These only
// perturb speckle; kept within half the default guidance bounds.
const NUISANCE_FORCE: f64 = 1.0;
const NUISANCE_TORQUE: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid demonstration policy: {0}")]
    InvalidPolicy(String),
    #[error("could not reach positive fraction {target:.3} within {attempts} trajectory attempts (best {best:.3})")]
    BalancingFailure { target: f64, attempts: usize, best: f64 },
    #[error("cannot split: {0}")]
    Split(String),
    #[error("dataset is empty")]
    Empty,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset format version {found} (this build reads {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("dataset file truncated: {0}")]
    Truncated(String),
    #[error("dataset checksum mismatch: header {expected:#010x}, payload {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("label of sample {index} disagrees with the oracle")]
    LabelMismatch { index: usize },
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanSample {
    pub frame: UltrasoundFrame,
    pub state: ProbeState,
    pub label: u8,
    pub trajectory_id: u32,
    pub step_index: u32,
}

/// Input normalization frozen from a training split: per-dimension mean/std
/// of the 10 pose+wrench inputs and the global pixel mean/std.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: [f32; 10],
    pub std: [f32; 10],
    pub pixel_mean: f32,
    pub pixel_std: f32,
}

impl InputNorm {
    pub const IDENTITY: InputNorm = InputNorm {
        mean: [0.0; 10],
        std: [1.0; 10],
        pixel_mean: 0.0,
        pixel_std: 1.0,
    };

    /// Moments over the given samples; zero deviations are replaced by 1.
    pub fn from_samples(samples: &[ScanSample]) -> Option<Self> {
        let m = Moments::over(samples.iter().map(|s| s.state.features()))?;
        let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
        for s in samples {
            for &p in &s.frame.pixels {
                sum += p as f64;
                sq += (p as f64) * (p as f64);
            }
            n += s.frame.pixels.len();
        }
        let pm = sum / n.max(1) as f64;
        let guard = |s: f32| if s > 1e-6 { s } else { 1.0 };
        Some(InputNorm {
            mean: m.mean.map(|v| v as f32),
            std: m.std.map(|v| guard(v as f32)),
            pixel_mean: pm as f32,
            pixel_std: guard((sq / n.max(1) as f64 - pm * pm).max(0.0).sqrt() as f32),
        })
    }

    pub fn apply(&self, features: &[f32; 10]) -> [f32; 10] {
        let mut out = [0.0; 10];
        for i in 0..10 {
            out[i] = (features[i] - self.mean[i]) / self.std[i];
        }
        out
    }

    pub fn apply_pixel(&self, p: f32) -> f32 {
        (p - self.pixel_mean) / self.pixel_std
    }

    fn to_vec(self) -> Vec<f32> {
        let mut v = Vec::with_capacity(22);
        v.extend_from_slice(&self.mean);
        v.extend_from_slice(&self.std);
        v.extend([self.pixel_mean, self.pixel_std]);
        v
    }

    fn from_slice(v: &[f32]) -> Self {
        let mut norm = InputNorm::IDENTITY;
        norm.mean.copy_from_slice(&v[..10]);
        norm.std.copy_from_slice(&v[10..20]);
        norm.pixel_mean = v[20];
        norm.pixel_std = v[21];
        norm
    }
}

struct Moments {
    n: usize,
    mean: [f64; 10],
    std: [f64; 10],
}

impl Moments {
    fn over(rows: impl Iterator<Item = [f32; 10]>) -> Option<Self> {
        let rows: Vec<[f32; 10]> = rows.collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mut mean = [0.0f64; 10];
        for r in &rows {
            for i in 0..10 {
                mean[i] += r[i] as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0f64; 10];
        for r in &rows {
            for i in 0..10 {
                var[i] += (r[i] as f64 - mean[i]).powi(2);
            }
        }
        Some(Self {
            n: rows.len(),
            mean,
            std: var.map(|v| (v / n).sqrt()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ScanSample>,
    pub phantom: PhantomConfig,
    pub generation_seed: u64,
    pub format_version: u32,
    /// Input normalization frozen from the training split, if split.
    pub norm: Option<InputNorm>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DemoPolicy {
    /// Slow sweeps around the view an experienced operator aims for, with a
    /// normal force drawn from `[force_lo, force_hi]`. Starts off the skin.
    ExpertSweep {
        amplitude_rad: f64,
        force_lo: f64,
        force_hi: f64,
    },
    /// Wider, jittery search with per-step noise on orientation and force.
    NoviceJitter {
        amplitude_rad: f64,
        force_lo: f64,
        force_hi: f64,
        jitter_rad: f64,
        jitter_n: f64,
    },
    /// Waypoints drawn uniformly over the whole pose/force box.
    UniformRandom { max_tilt_rad: f64, force_max: f64 },
}

impl DemoPolicy {
    pub fn expert() -> Self {
        DemoPolicy::ExpertSweep {
            amplitude_rad: 0.3,
            force_lo: 3.0,
            force_hi: 12.0,
        }
    }

    pub fn novice() -> Self {
        DemoPolicy::NoviceJitter {
            amplitude_rad: 0.7,
            force_lo: 0.0,
            force_hi: 20.0,
            jitter_rad: 0.03,
            jitter_n: 0.3,
        }
    }

    pub fn uniform() -> Self {
        DemoPolicy::UniformRandom {
            max_tilt_rad: 1.2,
            force_max: 25.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DemoPolicy::ExpertSweep { .. } => "expert_sweep",
            DemoPolicy::NoviceJitter { .. } => "novice_jitter",
            DemoPolicy::UniformRandom { .. } => "uniform_random",
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidPolicy(m));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        match *self {
            DemoPolicy::ExpertSweep {
                amplitude_rad,
                force_lo,
                force_hi,
            }
            | DemoPolicy::NoviceJitter {
                amplitude_rad,
                force_lo,
                force_hi,
                ..
            } => {
                if !(force_lo.is_finite() && force_lo >= 0.0) {
                    return bad(format!("force_lo {force_lo} would allow Fz < 0"));
                }
                if !(force_hi.is_finite() && force_hi >= force_lo) {
                    return bad(format!("force range [{force_lo}, {force_hi}] is empty"));
                }
                if !finite_nonneg(amplitude_rad) {
                    return bad(format!("amplitude {amplitude_rad} must be >= 0"));
                }
                if let DemoPolicy::NoviceJitter {
                    jitter_rad, jitter_n, ..
                } = *self
                {
                    if !(finite_nonneg(jitter_rad) && finite_nonneg(jitter_n)) {
                        return bad("jitter must be >= 0".into());
                    }
                }
            }
            DemoPolicy::UniformRandom {
                max_tilt_rad,
                force_max,
            } => {
                if !(force_max.is_finite() && force_max >= 0.0) {
                    return bad(format!("force_max {force_max} would allow Fz < 0"));
                }
                if !finite_nonneg(max_tilt_rad) {
                    return bad(format!("max_tilt {max_tilt_rad} must be >= 0"));
                }
            }
        }
        Ok(())
    }
}

/// Orientation an operator aims for: the plane through the organ centre.
fn aim_pose(config: &PhantomConfig) -> Quat {
    let [_, cy, cz] = config.organ_center;
    Quat::from_axis_angle([1.0, 0.0, 0.0], -(cy / cz.max(1e-9)).atan())
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform rotation vector inside a ball of radius `r`.
fn ball(rng: &mut ChaCha8Rng, r: f64) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        ];
        if v.iter().map(|x: &f64| x * x).sum::<f64>() <= 1.0 {
            return v.map(|x| x * r);
        }
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cap3(v: [f64; 3], cap: f64) -> [f64; 3] {
    let n = norm3(v);
    if n > cap {
        v.map(|x| x * cap / n)
    } else {
        v
    }
}

struct Waypoint {
    pose: Quat,
    wrench: [f64; 6],
}

/// Waypoint follower shared by all scripted policies.
struct Walker<'a> {
    policy: DemoPolicy,
    config: &'a PhantomConfig,
    rng: ChaCha8Rng,
    pose: Quat,
    wrench: [f64; 6],
    target: Waypoint,
    pose_speed: f64,
    force_speed: f64,
}

impl<'a> Walker<'a> {
    fn new(policy: DemoPolicy, config: &'a PhantomConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pose_speed, force_speed) = match policy {
            DemoPolicy::ExpertSweep { .. } => (0.04, 0.5),
            DemoPolicy::NoviceJitter { .. } => (0.07, 0.8),
            DemoPolicy::UniformRandom { .. } => (0.08, 0.8),
        };
        let first = Self::draw(policy, config, &mut rng);
        let (pose, wrench) = match policy {
            // probe lowered onto the skin near the aim pose
            DemoPolicy::ExpertSweep { .. } => (first.pose, [0.0; 6]),
            _ => (first.pose, first.wrench),
        };
        let target = Self::draw(policy, config, &mut rng);
        Self {
            policy,
            config,
            rng,
            pose,
            wrench,
            target,
            pose_speed,
            force_speed,
        }
    }

    fn draw(policy: DemoPolicy, config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Waypoint {
        let small_nuisance = |rng: &mut ChaCha8Rng, f: f64, t: f64| {
            [
                rng.random_range(-f..=f),
                rng.random_range(-f..=f),
                0.0,
                rng.random_range(-t..=t),
                rng.random_range(-t..=t),
                rng.random_range(-t..=t),
            ]
        };
        match policy {
            DemoPolicy::ExpertSweep {
                amplitude_rad,
                force_lo,
                force_hi,
            }
            | DemoPolicy::NoviceJitter {
                amplitude_rad,
                force_lo,
                force_hi,
                ..
            } => {
                // sweeps mostly in-plane (about y) and in elevation (about x)
                let v = [
                    rng.random_range(-amplitude_rad..=amplitude_rad) * 0.5,
                    rng.random_range(-amplitude_rad..=amplitude_rad),
                    rng.random_range(-amplitude_rad..=amplitude_rad) * 0.3,
                ];
                let mut wrench = small_nuisance(rng, NUISANCE_FORCE, NUISANCE_TORQUE);
                wrench[2] = rng.random_range(force_lo..=force_hi);
                Waypoint {
                    pose: Quat::exp(v).mul(aim_pose(config)).canonical(),
                    wrench,
                }
            }
            DemoPolicy::UniformRandom {
                max_tilt_rad,
                force_max,
            } => {
                let mut wrench = small_nuisance(rng, NUISANCE_FORCE, NUISANCE_TORQUE);
                wrench[2] = rng.random_range(0.0..=force_max);
                Waypoint {
                    pose: Quat::exp(ball(rng, max_tilt_rad)).canonical(),
                    wrench,
                }
            }
        }
    }

    fn state(&self) -> ProbeState {
        ProbeState::new(self.pose, self.wrench)
            .expect("walker keeps a unit pose")
            .quantized()
    }

    fn advance(&mut self) {
        let (jitter_rad, jitter_n) = match self.policy {
            DemoPolicy::NoviceJitter {
                jitter_rad, jitter_n, ..
            } => (jitter_rad, jitter_n),
            _ => (0.0, 0.0),
        };
        let to_target = self.target.pose.mul(self.pose.conjugate()).log();
        let remaining = norm3(to_target);
        let force_gap = (self.target.wrench[2] - self.wrench[2]).abs();
        if remaining < 0.02 && force_gap < 0.2 {
            self.target = Self::draw(self.policy, self.config, &mut self.rng);
        }
        let to_target = self.target.pose.mul(self.pose.conjugate()).log();
        let mut delta = cap3(to_target, self.pose_speed);
        if jitter_rad > 0.0 {
            for d in delta.iter_mut() {
                *d += jitter_rad * gaussian(&mut self.rng);
            }
        }
        let delta = cap3(delta, POSE_STEP_CAP);
        self.pose = Quat::exp(delta)
            .mul(self.pose)
            .normalized()
            .expect("unit times unit")
            .canonical();

        let caps = [
            LATERAL_STEP_CAP,
            LATERAL_STEP_CAP,
            FZ_STEP_CAP,
            TORQUE_STEP_CAP,
            TORQUE_STEP_CAP,
            TORQUE_STEP_CAP,
        ];
        for i in 0..6 {
            let speed = if i == 2 { self.force_speed } else { caps[i] * 0.5 };
            let mut step = (self.target.wrench[i] - self.wrench[i]).clamp(-speed, speed);
            if i == 2 && jitter_n > 0.0 {
                step += jitter_n * gaussian(&mut self.rng);
            }
            self.wrench[i] += step.clamp(-caps[i], caps[i]);
        }
        self.wrench[2] = self.wrench[2].max(0.0);
    }
}

/// Seed of trajectory `id` within a dataset generated from `generation_seed`.
pub fn trajectory_seed(generation_seed: u64, id: u32) -> u64 {
    mix64(generation_seed ^ mix64(id as u64 + 1))
}

/// Render seed of step `step` of a trajectory.
pub fn frame_seed(trajectory_seed: u64, step: u32) -> u64 {
    mix64(
        trajectory_seed
            .wrapping_add(0x5851_f42d_4c95_7f2d)
            .wrapping_add(step as u64),
    )
}

/// Records one scripted trajectory: states move by at most [`MAX_POSE_STEP`]
/// and [`MAX_FZ_STEP`] per step, every state is rendered and oracle-labelled.
pub fn record_demonstration(
    policy: &DemoPolicy,
    config: &PhantomConfig,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<ScanSample>, DatasetError> {
    record_trajectory(policy, config, n_steps, seed, 0)
}

fn record_trajectory(
    policy: &DemoPolicy,
    config: &PhantomConfig,
    n_steps: usize,
    seed: u64,
    trajectory_id: u32,
) -> Result<Vec<ScanSample>, DatasetError> {
    policy.validate()?;
    config.validate()?;
    if n_steps == 0 {
        return Err(DatasetError::Invalid("n_steps must be >= 1".into()));
    }
    let mut walker = Walker::new(*policy, config, seed);
    let mut out = Vec::with_capacity(n_steps);
    for step in 0..n_steps as u32 {
        if step > 0 {
            walker.advance();
        }
        let state = walker.state();
        let frame = phantom::render(&state, config, frame_seed(seed, step))?;
        let label = phantom::oracle_quality(&state, config).label;
        out.push(ScanSample {
            frame,
            state,
            label,
            trajectory_id,
            step_index: step,
        });
    }
    Ok(out)
}

/// Which policies to run and how many trajectories of each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoPlan {
    pub mix: Vec<(DemoPolicy, usize)>,
    pub steps_per_trajectory: usize,
}

impl DemoPlan {
    /// Expert, novice and random trajectories in 2:2:1 proportion totalling
    /// about `samples` samples.
    pub fn standard(samples: usize, steps_per_trajectory: usize) -> Self {
        let trajectories = samples.div_ceil(steps_per_trajectory).max(1);
        let expert = (trajectories * 2).div_ceil(5);
        let novice = (trajectories * 2 / 5).min(trajectories - expert);
        let uniform = trajectories - expert - novice;
        let mut mix = vec![(DemoPolicy::expert(), expert)];
        if novice > 0 {
            mix.push((DemoPolicy::novice(), novice));
        }
        if uniform > 0 {
            mix.push((DemoPolicy::uniform(), uniform));
        }
        Self {
            mix,
            steps_per_trajectory,
        }
    }

    pub fn total_samples(&self) -> usize {
        self.mix.iter().map(|(_, c)| c).sum::<usize>() * self.steps_per_trajectory
    }

    /// Policy of every trajectory slot, interleaved in proportion to the counts.
    fn schedule(&self) -> Vec<DemoPolicy> {
        let total: usize = self.mix.iter().map(|(_, c)| c).sum();
        let mut emitted = vec![0usize; self.mix.len()];
        (0..total)
            .map(|slot| {
                // the policy furthest behind its share goes next
                let i = (0..self.mix.len())
                    .filter(|&i| emitted[i] < self.mix[i].1)
                    .min_by(|&a, &b| {
                        let lag = |i: usize| (emitted[i] as f64 + 0.5) / self.mix[i].1 as f64;
                        lag(a).total_cmp(&lag(b)).then(a.cmp(&b))
                    })
                    .expect("slot < total");
                let _ = slot;
                emitted[i] += 1;
                self.mix[i].0
            })
            .collect()
    }
}

/// Builds a dataset from a plan. With `target_positive_fraction`, candidate
/// trajectories are accepted only while they keep the running positive
/// fraction moving toward the target (or within half the tolerance of it),
/// until the plan's sample count is reached; the result is within ±0.01 of
/// the target or an error after 100× the planned trajectory count.
pub fn build_dataset(
    plan: &DemoPlan,
    config: &PhantomConfig,
    seed: u64,
    target_positive_fraction: Option<f64>,
) -> Result<Dataset, DatasetError> {
    const TOLERANCE: f64 = 0.01;
    config.validate()?;
    if plan.mix.is_empty() || plan.mix.iter().any(|(_, c)| *c == 0) || plan.steps_per_trajectory == 0 {
        return Err(DatasetError::Invalid(
            "every policy needs a count >= 1 and steps >= 1".into(),
        ));
    }
    for (p, _) in &plan.mix {
        p.validate()?;
    }
    let schedule = plan.schedule();
    let total = plan.total_samples();
    let steps = plan.steps_per_trajectory;
    let mut samples: Vec<ScanSample> = Vec::with_capacity(total);

    let Some(target) = target_positive_fraction else {
        for (id, policy) in schedule.iter().enumerate() {
            let id = id as u32;
            samples.extend(record_trajectory(policy, config, steps, trajectory_seed(seed, id), id)?);
        }
        return Ok(Dataset::new(samples, config.clone(), seed));
    };
    if !(0.0..=1.0).contains(&target) {
        return Err(DatasetError::Invalid(format!(
            "target fraction {target} outside [0, 1]"
        )));
    }

    let budget = 100 * schedule.len();
    let mut positives = 0usize;
    let mut best = f64::NAN;
    for attempt in 0..budget {
        if samples.len() >= total {
            break;
        }
        let id = attempt as u32;
        let policy = &schedule[attempt % schedule.len()];
        let take = steps.min(total - samples.len());
        let traj = record_trajectory(policy, config, take, trajectory_seed(seed, id), id)?;
        let p = traj.iter().filter(|s| s.label == 1).count();
        let before = if samples.is_empty() {
            f64::INFINITY
        } else {
            (positives as f64 / samples.len() as f64 - target).abs()
        };
        let after = ((positives + p) as f64 / (samples.len() + take) as f64 - target).abs();
        // one trajectory moves the fraction by up to take/len, so early slack is wider
        let slack = (TOLERANCE / 2.0).max(0.25 * take as f64 / (samples.len() + take) as f64);
        let last = samples.len() + take == total;
        if after <= before.max(slack) && (!last || after <= TOLERANCE) {
            positives += p;
            samples.extend(traj);
            best = positives as f64 / samples.len() as f64;
        }
    }
    let fraction = positives as f64 / samples.len().max(1) as f64;
    if samples.len() < total || (fraction - target).abs() > TOLERANCE {
        return Err(DatasetError::BalancingFailure {
            target,
            attempts: budget,
            best: if best.is_nan() { 0.0 } else { best },
        });
    }
    Ok(Dataset::new(samples, config.clone(), seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub pos_fraction: f64,
    /// Moments of `[w, x, y, z, Fx, Fy, Fz, Tx, Ty, Tz]` over raw values.
    pub mean: [f64; 10],
    pub std: [f64; 10],
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "samples {}  positive {} ({:.1}%)  negative {} ({:.1}%)",
            self.n,
            self.n_pos,
            100.0 * self.pos_fraction,
            self.n_neg,
            100.0 * (1.0 - self.pos_fraction)
        )?;
        const NAMES: [&str; 10] = ["qw", "qx", "qy", "qz", "Fx", "Fy", "Fz", "Tx", "Ty", "Tz"];
        for i in 0..10 {
            writeln!(
                f,
                "  {:>2}  mean {:>9.4}  std {:>9.4}",
                NAMES[i], self.mean[i], self.std[i]
            )?;
        }
        Ok(())
    }
}

impl Dataset {
    pub fn new(samples: Vec<ScanSample>, phantom: PhantomConfig, generation_seed: u64) -> Self {
        Self {
            samples,
            phantom,
            generation_seed,
            format_version: FORMAT_VERSION,
            norm: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> ImageSize {
        self.phantom.image
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    pub fn stats(&self) -> Result<DatasetStats, DatasetError> {
        let m = Moments::over(self.samples.iter().map(|s| s.state.features())).ok_or(DatasetError::Empty)?;
        let n_pos = self.positives();
        Ok(DatasetStats {
            n: m.n,
            n_pos,
            n_neg: m.n - n_pos,
            pos_fraction: n_pos as f64 / m.n as f64,
            mean: m.mean,
            std: m.std,
        })
    }

    /// Re-runs the oracle on every stored state.
    pub fn verify_labels(&self) -> Result<(), DatasetError> {
        for (index, s) in self.samples.iter().enumerate() {
            if phantom::oracle_quality(&s.state, &self.phantom).label != s.label {
                return Err(DatasetError::LabelMismatch { index });
            }
        }
        Ok(())
    }

    fn subset(&self, keep: impl Fn(&ScanSample) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            phantom: self.phantom.clone(),
            generation_seed: self.generation_seed,
            format_version: self.format_version,
            norm: self.norm,
        }
    }

    /// Distinct trajectory ids in first-seen order.
    pub fn trajectory_ids(&self) -> Vec<u32> {
        let mut seen = std::collections::BTreeSet::new();
        self.samples
            .iter()
            .map(|s| s.trajectory_id)
            .filter(|id| seen.insert(*id))
            .collect()
    }

    /// Splits whole trajectories into `(train, val)`, stratified by each
    /// trajectory's positive fraction, and freezes input normalization from
    /// the training part into both.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(DatasetError::Split(format!(
                "val_fraction {val_fraction} not in (0, 1)"
            )));
        }
        let ids = self.trajectory_ids();
        if ids.len() < 2 {
            return Err(DatasetError::Split(format!(
                "{} trajectories cannot be split without breaking one",
                ids.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trajs: Vec<(u32, f64)> = ids
            .iter()
            .map(|&id| {
                let (n, p) = self
                    .samples
                    .iter()
                    .filter(|s| s.trajectory_id == id)
                    .fold((0usize, 0usize), |(n, p), s| (n + 1, p + s.label as usize));
                (id, p as f64 / n as f64)
            })
            .collect();
        // shuffle first so equal fractions are ordered by the seed, then stratify
        trajs.shuffle(&mut rng);
        trajs.sort_by(|a, b| a.1.total_cmp(&b.1));
        let n = trajs.len();
        let m = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let offset: f64 = rng.random();
        let val_ids: std::collections::BTreeSet<u32> = (0..m)
            .map(|i| trajs[(((i as f64 + offset) * n as f64 / m as f64) as usize).min(n - 1)].0)
            .collect();
        let mut train = self.subset(|s| !val_ids.contains(&s.trajectory_id));
        let mut val = self.subset(|s| val_ids.contains(&s.trajectory_id));
        let norm = InputNorm::from_samples(&train.samples);
        train.norm = norm;
        val.norm = norm;
        Ok((train, val))
    }

    fn record_stride(&self) -> usize {
        4 * 4 + 6 * 4 + 1 + 4 + 4 + 4 * self.image_size().len()
    }

    /// Writes the dataset atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&self.to_bytes())?;
            w.into_inner().map_err(|e| e.into_error())?.sync_all()
        };
        write().map_err(io_err(path))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Layout: magic, version u32, n u64, H/W/C u32, generation seed u64,
    /// normalization flag u8 (+22 f32), config length u32 + TOML, CRC32 of
    /// everything after the magic except the CRC itself, then fixed-stride records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let size = self.image_size();
        let mut head = Vec::new();
        head.extend_from_slice(&self.format_version.to_le_bytes());
        head.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for d in [size.height, size.width, size.channels] {
            head.extend_from_slice(&(d as u32).to_le_bytes());
        }
        head.extend_from_slice(&self.generation_seed.to_le_bytes());
        match &self.norm {
            Some(norm) => {
                head.push(1);
                for v in norm.to_vec() {
                    head.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => head.push(0),
        }
        let cfg = self.phantom.to_toml();
        head.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        head.extend_from_slice(cfg.as_bytes());

        let mut body = Vec::with_capacity(self.samples.len() * self.record_stride());
        for s in &self.samples {
            for v in s.state.features() {
                body.extend_from_slice(&v.to_le_bytes());
            }
            body.push(s.label);
            body.extend_from_slice(&s.trajectory_id.to_le_bytes());
            body.extend_from_slice(&s.step_index.to_le_bytes());
            for p in &s.frame.pixels {
                body.extend_from_slice(&p.to_le_bytes());
            }
        }
        let mut crc = crc32fast::Hasher::new();
        crc.update(&head);
        crc.update(&body);

        let mut out = Vec::with_capacity(5 + head.len() + 4 + body.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&head);
        out.extend_from_slice(&crc.finalize().to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset, DatasetError> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(5)? != DATASET_MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(DatasetError::Version { found: version });
        }
        let n = r.u64()? as usize;
        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let generation_seed = r.u64()?;
        let norm = match r.take(1)?[0] {
            0 => None,
            1 => {
                let mut vals = [0.0f32; 22];
                for v in vals.iter_mut() {
                    *v = r.f32()?;
                }
                Some(InputNorm::from_slice(&vals))
            }
            flag => return Err(DatasetError::Format(format!("normalization flag {flag}"))),
        };
        let cfg_len = r.u32()? as usize;
        let cfg_bytes = r.take(cfg_len)?;
        let head_end = r.pos;
        let expected = r.u32()?;
        let body = &bytes[r.pos..];

        let pixels = h * w * c;
        let stride = 49 + 4 * pixels;
        let want = n
            .checked_mul(stride)
            .ok_or_else(|| DatasetError::Format("record count overflow".into()))?;
        if body.len() < want {
            return Err(DatasetError::Truncated(format!(
                "{} of {want} record bytes",
                body.len()
            )));
        }
        if body.len() > want {
            return Err(DatasetError::Format(format!("{} trailing bytes", body.len() - want)));
        }
        let mut crc = crc32fast::Hasher::new();
        crc.update(&bytes[5..head_end]);
        crc.update(body);
        let actual = crc.finalize();
        if actual != expected {
            return Err(DatasetError::Checksum { expected, actual });
        }

        let cfg_text =
            std::str::from_utf8(cfg_bytes).map_err(|_| DatasetError::Format("phantom config is not UTF-8".into()))?;
        let phantom = PhantomConfig::from_toml(cfg_text)?;
        if phantom.image.height != h || phantom.image.width != w || phantom.image.channels != c {
            return Err(DatasetError::Format(
                "header image size disagrees with phantom config".into(),
            ));
        }

        let mut samples = Vec::with_capacity(n);
        let mut rec = Cursor { buf: body, pos: 0 };
        for _ in 0..n {
            let mut f = [0.0f32; 10];
            for v in f.iter_mut() {
                *v = rec.f32()?;
            }
            let state = ProbeState::from_features(&f)?;
            let label = rec.take(1)?[0];
            if label > 1 {
                return Err(DatasetError::Format(format!("label {label}")));
            }
            let trajectory_id = rec.u32()?;
            let step_index = rec.u32()?;
            let px = rec.take(4 * pixels)?;
            let frame = UltrasoundFrame {
                size: phantom.image,
                pixels: px
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
                render_seed: frame_seed(trajectory_seed(generation_seed, trajectory_id), step_index),
            };
            samples.push(ScanSample {
                frame,
                state,
                label,
                trajectory_id,
                step_index,
            });
        }
        Ok(Dataset {
            samples,
            phantom,
            generation_seed,
            format_version: version,
            norm,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.buf.len() - self.pos < n {
            return Err(DatasetError::Truncated(format!(
                "need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, DatasetError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Largest step between consecutive samples of one trajectory: `(rad, N)`.
pub fn max_step(samples: &[ScanSample]) -> (f64, f64) {
    samples
        .windows(2)
        .filter(|w| w[0].trajectory_id == w[1].trajectory_id)
        .fold((0.0, 0.0), |(dp, df), w| {
            let d = quat_distance(w[0].state.pose(), w[1].state.pose()).expect("stored poses are unit");
            (f64::max(dp, d), f64::max(df, (w[0].state.fz() - w[1].state.fz()).abs()))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PhantomConfig {
        PhantomConfig::with_image(16, 16, 1)
    }

    #[test]
    fn single_step_gives_one_sample() {
        let s = record_demonstration(&DemoPolicy::expert(), &small_config(), 1, 3).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn policies_that_allow_pulling_are_rejected() {
        let p = DemoPolicy::ExpertSweep {
            amplitude_rad: 0.1,
            force_lo: -1.0,
            force_hi: 5.0,
        };
        assert!(matches!(
            record_demonstration(&p, &small_config(), 5, 0),
            Err(DatasetError::InvalidPolicy(_))
        ));
        assert!(record_demonstration(&DemoPolicy::expert(), &small_config(), 0, 0).is_err());
    }

    #[test]
    fn trajectories_are_smooth_and_labels_match_oracle() {
        let cfg = small_config();
        for policy in [DemoPolicy::expert(), DemoPolicy::novice(), DemoPolicy::uniform()] {
            let s = record_demonstration(&policy, &cfg, 120, 9).unwrap();
            let (dp, df) = max_step(&s);
            assert!(dp <= MAX_POSE_STEP, "{}: pose step {dp}", policy.name());
            assert!(df <= MAX_FZ_STEP, "{}: force step {df}", policy.name());
            for x in &s {
                assert!(x.state.fz() >= 0.0);
                assert!(x.state.pose().w >= 0.0 && x.state.pose().is_unit());
                assert_eq!(x.label, phantom::oracle_quality(&x.state, &cfg).label);
            }
        }
    }

    #[test]
    fn schedule_interleaves_by_count() {
        let plan = DemoPlan {
            mix: vec![(DemoPolicy::expert(), 2), (DemoPolicy::uniform(), 1)],
            steps_per_trajectory: 4,
        };
        let names: Vec<_> = plan.schedule().iter().map(|p| p.name()).collect();
        assert_eq!(names, ["expert_sweep", "uniform_random", "expert_sweep"]);
        assert_eq!(plan.total_samples(), 12);
    }

    #[test]
    fn single_sample_stats_have_zero_std() {
        let s = record_demonstration(&DemoPolicy::expert(), &small_config(), 1, 0).unwrap();
        let d = Dataset::new(s, small_config(), 0);
        let st = d.stats().unwrap();
        assert_eq!(st.n, 1);
        assert!(st.std.iter().all(|&v| v == 0.0));
        let empty = Dataset::new(Vec::new(), small_config(), 0);
        assert!(matches!(empty.stats(), Err(DatasetError::Empty)));
    }

    #[test]
    fn split_needs_two_trajectories_and_a_proper_fraction() {
        let s = record_demonstration(&DemoPolicy::expert(), &small_config(), 10, 0).unwrap();
        let d = Dataset::new(s, small_config(), 0);
        assert!(matches!(d.split(0.2, 0), Err(DatasetError::Split(_))));
        assert!(d.split(0.0, 0).is_err());
        assert!(d.split(1.0, 0).is_err());
    }
}

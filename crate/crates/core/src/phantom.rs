//! Synthetic ultrasound phantom: an ellipsoidal organ under a fixed skin
//! contact point, imaged by a probe whose orientation and contact wrench are
//! the only state.
//!
//! World frame (mm): `x` lateral, `y` elevational, `z` depth into the body,
//! probe contact at the origin. The identity pose images the `x`–`z` plane;
//! image columns run along the probe's `x` axis and rows along its `z` axis.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::quat::{Quat, QuatError};

pub const PHANTOM_SCHEMA: &str = "phantom_v1";

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid probe state: {0}")]
    InvalidState(String),
    #[error("negative normal force Fz = {0} N (the probe cannot pull on the skin)")]
    NegativeNormalForce(f64),
    #[error(transparent)]
    Quat(#[from] QuatError),
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error("phantom config schema '{found}' is not supported (expected '{PHANTOM_SCHEMA}')")]
    Schema { found: String },
    #[error("phantom config parse error: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageSize {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speckle {
    pub mean: f64,
    pub variance: f64,
    /// Side of the box filter applied to white noise, in pixels.
    pub correlation_px: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub f_min: f64,
    pub f_nominal: f64,
    pub f_max: f64,
}

/// Acceptance window of the quality oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodWindow {
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
    /// Distance of the organ centroid from the image centre, as a fraction of image width.
    pub max_centroid_offset: f64,
    pub max_tilt_rad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub schema: String,
    pub organ_center: [f64; 3],
    pub organ_radii: [f64; 3],
    /// Added brightness inside the organ at full coupling.
    pub organ_intensity: f64,
    pub speckle: Speckle,
    /// Per-mm exponential decay of echo intensity with depth.
    pub attenuation_coeff: f64,
    pub image: ImageSize,
    pub mm_per_pixel: f64,
    pub coupling: Coupling,
    /// Fraction of the speckle that survives with no skin contact.
    pub noise_floor: f64,
    /// Depth compression of the organ per newton above `f_nominal`.
    pub deform_gain: f64,
    pub good_window: GoodWindow,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            schema: PHANTOM_SCHEMA.to_string(),
            organ_center: [0.0, 4.0, 50.0],
            organ_radii: [24.0, 14.0, 18.0],
            organ_intensity: 0.35,
            speckle: Speckle {
                mean: 0.35,
                variance: 0.01,
                correlation_px: 3,
            },
            attenuation_coeff: 0.008,
            image: ImageSize {
                height: 64,
                width: 64,
                channels: 1,
            },
            mm_per_pixel: 1.5,
            coupling: Coupling {
                f_min: 2.0,
                f_nominal: 6.0,
                f_max: 15.0,
            },
            noise_floor: 0.15,
            deform_gain: 0.8,
            good_window: GoodWindow {
                min_area_fraction: 0.05,
                max_area_fraction: 0.35,
                max_centroid_offset: 0.2,
                max_tilt_rad: 0.5,
            },
        }
    }
}

impl PhantomConfig {
    /// Desk default with a different image size.
    pub fn with_image(height: usize, width: usize, channels: usize) -> Self {
        Self {
            // keep the field of view at 96 mm
            mm_per_pixel: 96.0 / width as f64,
            image: ImageSize {
                height,
                width,
                channels,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::Config(m.to_string()));
        if self.schema != PHANTOM_SCHEMA {
            return Err(PhantomError::Schema {
                found: self.schema.clone(),
            });
        }
        if self.organ_radii.iter().any(|&r| !(r > 0.0)) {
            return bad("organ radii must be > 0");
        }
        let c = &self.coupling;
        if !(0.0 < c.f_min && c.f_min < c.f_nominal && c.f_nominal < c.f_max) {
            return bad("coupling forces must satisfy 0 < f_min < f_nominal < f_max");
        }
        if self.image.height < 16 || self.image.width < 16 || self.image.channels == 0 {
            return bad("image must be at least 16x16 with one channel");
        }
        let w = &self.good_window;
        let frac = |v: f64| v > 0.0 && v < 1.0;
        if !(frac(w.min_area_fraction) && frac(w.max_area_fraction) && w.min_area_fraction < w.max_area_fraction) {
            return bad("area fractions must lie in (0, 1) with min < max");
        }
        if !(w.max_centroid_offset > 0.0 && w.max_tilt_rad > 0.0) {
            return bad("centroid and tilt bounds must be > 0");
        }
        if !(self.mm_per_pixel > 0.0 && self.attenuation_coeff >= 0.0 && self.deform_gain >= 0.0) {
            return bad("mm_per_pixel must be > 0; attenuation and deform gain >= 0");
        }
        if !(self.speckle.mean > 0.0 && self.speckle.variance >= 0.0 && self.speckle.correlation_px >= 1) {
            return bad("speckle needs mean > 0, variance >= 0, correlation >= 1 px");
        }
        if !(0.0..=1.0).contains(&self.noise_floor) || !(self.organ_intensity >= 0.0) {
            return bad("noise_floor must be in [0, 1] and organ_intensity >= 0");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, PhantomError> {
        #[derive(Deserialize)]
        struct Header {
            schema: Option<String>,
        }
        let header: Header = toml::from_str(text).map_err(|e| PhantomError::Parse(e.to_string()))?;
        match header.schema {
            Some(s) if s == PHANTOM_SCHEMA => {}
            other => {
                return Err(PhantomError::Schema {
                    found: other.unwrap_or_default(),
                })
            }
        }
        let cfg: Self = toml::from_str(text).map_err(|e| PhantomError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PhantomError> {
        let text = std::fs::read_to_string(path).map_err(|source| PhantomError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), PhantomError> {
        std::fs::write(path, self.to_toml()).map_err(|source| PhantomError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Image width in mm.
    fn width_mm(&self) -> f64 {
        self.image.width as f64 * self.mm_per_pixel
    }

    /// Organ radii after compression by the normal force.
    pub fn deformed_radii(&self, fz: f64) -> [f64; 3] {
        let excess = (fz - self.coupling.f_nominal).max(0.0);
        let [rx, ry, rz] = self.organ_radii;
        [rx, ry, (rz - self.deform_gain * excess).max(0.25 * rz)]
    }

    /// Contact quality in `[0, 1]`: `Fz / f_min` below `f_min`, 1 above.
    pub fn coupling_factor(&self, fz: f64) -> f64 {
        (fz / self.coupling.f_min).clamp(0.0, 1.0)
    }
}

/// Probe orientation (canonical unit quaternion) and contact wrench
/// `(Fx, Fy, Fz, Tx, Ty, Tz)` in N and N·mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawState", into = "RawState")]
pub struct ProbeState {
    pose: Quat,
    wrench: [f64; 6],
}

#[derive(Serialize, Deserialize)]
struct RawState {
    pose: [f64; 4],
    wrench: [f64; 6],
}

impl TryFrom<RawState> for ProbeState {
    type Error = PhantomError;
    fn try_from(r: RawState) -> Result<Self, PhantomError> {
        ProbeState::new(Quat::from_array(r.pose), r.wrench)
    }
}

impl From<ProbeState> for RawState {
    fn from(s: ProbeState) -> Self {
        RawState {
            pose: s.pose.to_array(),
            wrench: s.wrench,
        }
    }
}

impl ProbeState {
    /// Requires a unit pose (within 1e-6) and a finite wrench; the pose is
    /// stored in canonical `w >= 0` form. Negative `Fz` is representable so
    /// that constraint checks can reject it explicitly.
    pub fn new(pose: Quat, wrench: [f64; 6]) -> Result<Self, PhantomError> {
        if !pose.to_array().iter().all(|v| v.is_finite()) {
            return Err(PhantomError::InvalidState(format!("non-finite pose {pose:?}")));
        }
        let pose = pose.check_unit()?.canonical();
        if !wrench.iter().all(|v| v.is_finite()) {
            return Err(PhantomError::InvalidState(format!("non-finite wrench {wrench:?}")));
        }
        Ok(Self { pose, wrench })
    }

    /// Like [`ProbeState::new`] but normalizes the pose first.
    pub fn normalizing(pose: Quat, wrench: [f64; 6]) -> Result<Self, PhantomError> {
        Self::new(pose.normalized()?, wrench)
    }

    /// Identity pose with only a normal force.
    pub fn upright(fz: f64) -> Self {
        Self {
            pose: Quat::IDENTITY,
            wrench: [0.0, 0.0, fz, 0.0, 0.0, 0.0],
        }
    }

    pub fn pose(&self) -> Quat {
        self.pose
    }

    pub fn wrench(&self) -> [f64; 6] {
        self.wrench
    }

    pub fn fz(&self) -> f64 {
        self.wrench[2]
    }

    pub fn with_fz(mut self, fz: f64) -> Self {
        self.wrench[2] = fz;
        self
    }

    pub fn with_pose(self, pose: Quat) -> Result<Self, PhantomError> {
        Self::new(pose, self.wrench)
    }

    pub fn require_contact(&self) -> Result<(), PhantomError> {
        if self.fz() < 0.0 {
            Err(PhantomError::NegativeNormalForce(self.fz()))
        } else {
            Ok(())
        }
    }

    /// Rounds every component to `f32` and re-canonicalizes, so the state
    /// survives a trip through `f32` storage unchanged.
    pub fn quantized(&self) -> Self {
        let q = |v: f64| v as f32 as f64;
        let p = self.pose;
        let pose = Quat::new(q(p.w), q(p.x), q(p.y), q(p.z)).canonical();
        Self {
            pose,
            wrench: self.wrench.map(q),
        }
    }

    /// `[w, x, y, z, Fx, Fy, Fz, Tx, Ty, Tz]` as `f32`.
    pub fn features(&self) -> [f32; 10] {
        let p = self.pose.to_array();
        let mut out = [0.0f32; 10];
        for (o, v) in out.iter_mut().zip(p.iter().chain(self.wrench.iter())) {
            *o = *v as f32;
        }
        out
    }

    pub fn from_features(f: &[f32; 10]) -> Result<Self, PhantomError> {
        let d = f.map(|v| v as f64);
        Self::new(Quat::new(d[0], d[1], d[2], d[3]), [d[4], d[5], d[6], d[7], d[8], d[9]])
    }
}

/// Rendered grayscale frame, `H x W x C` row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct UltrasoundFrame {
    pub size: ImageSize,
    pub pixels: Vec<f32>,
    pub render_seed: u64,
}

impl UltrasoundFrame {
    pub fn pixel(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.size.width + col) * self.size.channels + channel]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Plane–ellipsoid intersection in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Section {
    /// Cross-section area over image area; 0 when the plane misses the organ.
    pub area_fraction: f64,
    /// Section centre in pixels `(col, row)`. When the plane misses, this is
    /// the in-plane point nearest the organ in the ellipsoid metric.
    pub centroid_px: (f64, f64),
    pub intersects: bool,
}

/// Everything the oracle looks at, computed from geometry and wrench only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub section: Section,
    /// Centroid distance from the image centre over image width.
    pub centroid_offset: f64,
    pub tilt_rad: f64,
    pub fz: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub label: u8,
    pub score: f64,
}

/// Image-plane basis vectors in world coordinates: lateral (`x`) and axial (`z`).
fn plane_basis(pose: Quat) -> ([f64; 3], [f64; 3]) {
    (pose.rotate([1.0, 0.0, 0.0]), pose.rotate([0.0, 0.0, 1.0]))
}

/// Exact cross-section of the (deformed) organ by the imaging plane.
///
/// Writing plane points as `s a + t b`, the ellipsoid inequality becomes the
/// quadratic `[s t] A [s t]^T + 2 g.[s t] + k <= 1`; completing the square
/// gives an ellipse of area `pi h / sqrt(det A)` with `h = 1 - k + g^T A^-1 g`.
pub fn section(state: &ProbeState, config: &PhantomConfig) -> Section {
    let (a, b) = plane_basis(state.pose());
    let r = config.deformed_radii(state.fz());
    let m = [1.0 / (r[0] * r[0]), 1.0 / (r[1] * r[1]), 1.0 / (r[2] * r[2])];
    let c = config.organ_center;
    let q = |u: [f64; 3], v: [f64; 3]| (0..3).map(|i| u[i] * m[i] * v[i]).sum::<f64>();
    let (aa, ab, bb) = (q(a, a), q(a, b), q(b, b));
    let (ga, gb) = (-q(a, c), -q(b, c));
    let k = q(c, c);
    let det = aa * bb - ab * ab;
    // centre = -A^-1 g
    let s0 = -(bb * ga - ab * gb) / det;
    let t0 = -(-ab * ga + aa * gb) / det;
    let h = 1.0 - k + (ga * (bb * ga - ab * gb) + gb * (-ab * ga + aa * gb)) / det;
    let image_area = config.image.height as f64 * config.image.width as f64 * config.mm_per_pixel.powi(2);
    let intersects = h > 0.0;
    let area = if intersects {
        std::f64::consts::PI * h / det.sqrt()
    } else {
        0.0
    };
    let col = s0 / config.mm_per_pixel + config.image.width as f64 / 2.0;
    let row = t0 / config.mm_per_pixel;
    Section {
        area_fraction: area / image_area,
        centroid_px: (col, row),
        intersects,
    }
}

pub fn geometry(state: &ProbeState, config: &PhantomConfig) -> Geometry {
    let section = section(state, config);
    let (col, row) = section.centroid_px;
    let dx = col - config.image.width as f64 / 2.0;
    let dy = row - config.image.height as f64 / 2.0;
    Geometry {
        section,
        centroid_offset: dx.hypot(dy) / config.image.width as f64,
        tilt_rad: state.pose().angle(),
        fz: state.fz(),
    }
}

/// 1 inside `[lo, hi]`, Gaussian fall-off of width `scale` outside.
fn ramp(v: f64, lo: f64, hi: f64, scale: f64) -> f64 {
    let d = if v < lo {
        lo - v
    } else if v > hi {
        v - hi
    } else {
        0.0
    };
    (-(d / scale).powi(2)).exp()
}

/// Ground-truth quality label and smooth score. Depends only on geometry and
/// wrench, never on rendered pixels.
///
/// Label 1 iff the section area fraction, centroid offset, tilt and `Fz` all lie
/// inside the configured window. The score is the product of per-criterion
/// ramps that equal 1 inside the window, so it is exactly 1 for label-1 states
/// and strictly below 1 otherwise.
pub fn oracle_quality(state: &ProbeState, config: &PhantomConfig) -> Quality {
    let g = geometry(state, config);
    let w = &config.good_window;
    let c = &config.coupling;
    let area = ramp(g.section.area_fraction, w.min_area_fraction, w.max_area_fraction, 0.05);
    let centroid = ramp(g.centroid_offset, 0.0, w.max_centroid_offset, 0.1);
    let tilt = ramp(g.tilt_rad, 0.0, w.max_tilt_rad, 0.25);
    let force = ramp(g.fz, c.f_min, c.f_max, 2.0);
    let inside = g.section.intersects
        && (w.min_area_fraction..=w.max_area_fraction).contains(&g.section.area_fraction)
        && g.centroid_offset <= w.max_centroid_offset
        && g.tilt_rad <= w.max_tilt_rad
        && (c.f_min..=c.f_max).contains(&g.fz);
    Quality {
        label: inside as u8,
        score: area * centroid * tilt * force,
    }
}

/// SplitMix64 finalizer, used to fold values into RNG seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The speckle seed: render seed mixed with the nuisance wrench components
/// (in-plane forces and torques). `Fz` and the pose are deliberately excluded.
fn speckle_seed(seed: u64, wrench: &[f64; 6]) -> u64 {
    [0usize, 1, 3, 4, 5]
        .iter()
        .fold(mix64(seed), |acc, &i| mix64(acc ^ wrench[i].to_bits()))
}

/// Low-pass filtered Gaussian noise with zero mean and unit variance.
fn speckle_field(h: usize, w: usize, corr: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = corr;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let white: Vec<f64> = (0..ph * pw)
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    let k = corr;
    let norm = k as f64; // sqrt(k*k) for a k x k box of unit-variance noise
    let mut rows = vec![0.0; ph * w];
    for y in 0..ph {
        for x in 0..w {
            rows[y * w + x] = (0..k).map(|d| white[y * pw + x + d]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..k).map(|d| rows[(y + d) * w + x]).sum::<f64>() / norm;
        }
    }
    out
}

/// Renders the frame seen from `state`.
///
/// `pixel = att(depth) * (speckle * (floor + (1 - floor) * c) + c * organ_intensity * inside)`
/// where `c` is the coupling factor. The organ is the force-deformed ellipsoid.
pub fn render(state: &ProbeState, config: &PhantomConfig, seed: u64) -> Result<UltrasoundFrame, PhantomError> {
    state.pose().check_unit()?;
    state.require_contact()?;
    let ImageSize {
        height,
        width,
        channels,
    } = config.image;
    let coupling = config.coupling_factor(state.fz());
    let gain = config.noise_floor + (1.0 - config.noise_floor) * coupling;
    let field = speckle_field(
        height,
        width,
        config.speckle.correlation_px,
        speckle_seed(seed, &state.wrench()),
    );
    let sd = config.speckle.variance.sqrt();
    let mask = organ_mask(state, config);
    let mut pixels = Vec::with_capacity(height * width * channels);
    for row in 0..height {
        let depth = (row as f64 + 0.5) * config.mm_per_pixel;
        let att = (-config.attenuation_coeff * depth).exp();
        for col in 0..width {
            let i = row * width + col;
            let speckle = (config.speckle.mean + sd * field[i]).max(0.0);
            let organ = if mask[i] {
                coupling * config.organ_intensity
            } else {
                0.0
            };
            let v = (att * (speckle * gain + organ)).clamp(0.0, 1.0) as f32;
            pixels.extend(std::iter::repeat_n(v, channels));
        }
    }
    Ok(UltrasoundFrame {
        size: config.image,
        pixels,
        render_seed: seed,
    })
}

/// Row-major `H x W` mask of pixels whose centre lies inside the deformed organ.
pub fn organ_mask(state: &ProbeState, config: &PhantomConfig) -> Vec<bool> {
    let (a, b) = plane_basis(state.pose());
    let r = config.deformed_radii(state.fz());
    let c = config.organ_center;
    let ImageSize { height, width, .. } = config.image;
    let mut mask = Vec::with_capacity(height * width);
    for row in 0..height {
        let t = (row as f64 + 0.5) * config.mm_per_pixel;
        for col in 0..width {
            let s = (col as f64 + 0.5) * config.mm_per_pixel - config.width_mm() / 2.0;
            let inside = (0..3)
                .map(|i| {
                    let p = s * a[i] + t * b[i] - c[i];
                    p * p / (r[i] * r[i])
                })
                .sum::<f64>()
                <= 1.0;
            mask.push(inside);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PhantomConfig {
        PhantomConfig::default()
    }

    fn nominal() -> ProbeState {
        ProbeState::upright(cfg().coupling.f_nominal)
    }

    #[test]
    fn default_config_validates_and_round_trips_through_toml() {
        let c = cfg();
        c.validate().unwrap();
        let back = PhantomConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_file_schema_is_checked() {
        let text = cfg().to_toml().replace("phantom_v1", "phantom_v9");
        assert!(matches!(
            PhantomConfig::from_toml(&text),
            Err(PhantomError::Schema { .. })
        ));
        let mut c = cfg();
        c.coupling.f_min = 7.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identity_section_matches_closed_form() {
        // plane y = 0 through an ellipsoid centred at y = cy: semi-axes scale by sqrt(1 - (cy/ry)^2)
        let c = cfg();
        let s = section(&nominal(), &c);
        let [rx, ry, rz] = c.organ_radii;
        let h = 1.0 - (c.organ_center[1] / ry).powi(2);
        let area = std::f64::consts::PI * rx * rz * h;
        let image_area = (64.0 * 1.5) * (64.0 * 1.5);
        assert!((s.area_fraction - area / image_area).abs() < 1e-12);
        assert!((s.centroid_px.0 - 32.0).abs() < 1e-9);
        assert!((s.centroid_px.1 - c.organ_center[2] / 1.5).abs() < 1e-9);
    }

    #[test]
    fn canonical_state_is_good() {
        let q = oracle_quality(&nominal(), &cfg());
        assert_eq!(q.label, 1);
        assert_eq!(q.score, 1.0);
    }

    #[test]
    fn overload_is_bad() {
        let s = ProbeState::upright(cfg().coupling.f_max + 1.0);
        assert_eq!(oracle_quality(&s, &cfg()).label, 0);
    }

    #[test]
    fn zero_contact_renders_pure_speckle() {
        let c = cfg();
        let s = ProbeState::upright(0.0);
        assert_eq!(c.coupling_factor(0.0), 0.0);
        assert_eq!(oracle_quality(&s, &c).label, 0);
        let f = render(&s, &c, 5).unwrap();
        // identical to a phantom without an organ at all
        let mut empty = c.clone();
        empty.organ_intensity = 0.0;
        assert_eq!(f, render(&s, &empty, 5).unwrap());
    }

    #[test]
    fn plane_missing_the_organ_has_no_organ_pixels() {
        let c = cfg();
        let s = ProbeState::new(
            Quat::from_axis_angle([1.0, 0.0, 0.0], 0.9),
            [0.0, 0.0, 6.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let sec = section(&s, &c);
        assert!(!sec.intersects);
        assert_eq!(sec.area_fraction, 0.0);
        assert!(organ_mask(&s, &c).iter().all(|&m| !m));
        assert_eq!(oracle_quality(&s, &c).label, 0);
    }

    #[test]
    fn negative_normal_force_cannot_be_rendered() {
        let s = ProbeState::upright(-0.5);
        assert!(matches!(
            render(&s, &cfg(), 0),
            Err(PhantomError::NegativeNormalForce(_))
        ));
    }

    #[test]
    fn non_unit_pose_is_rejected() {
        assert!(ProbeState::new(Quat::new(1.0, 0.2, 0.0, 0.0), [0.0; 6]).is_err());
        let s = ProbeState::new(Quat::new(-1.0, 0.0, 0.0, 0.0), [0.0; 6]).unwrap();
        assert_eq!(s.pose(), Quat::IDENTITY);
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let c = cfg();
        let s = nominal();
        let a = render(&s, &c, 11).unwrap();
        assert_eq!(a, render(&s, &c, 11).unwrap());
        assert_ne!(a.pixels, render(&s, &c, 12).unwrap().pixels);
        assert!(a.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn nuisance_wrench_changes_only_speckle() {
        let c = cfg();
        let a = ProbeState::new(Quat::IDENTITY, [0.0, 0.0, 6.0, 0.0, 0.0, 0.0]).unwrap();
        let b = ProbeState::new(Quat::IDENTITY, [1.0, -0.5, 6.0, 3.0, 0.0, -2.0]).unwrap();
        assert_eq!(oracle_quality(&a, &c), oracle_quality(&b, &c));
        assert_eq!(organ_mask(&a, &c), organ_mask(&b, &c));
        assert_ne!(render(&a, &c, 1).unwrap().pixels, render(&b, &c, 1).unwrap().pixels);
    }

    #[test]
    fn channels_are_replicated() {
        let c = PhantomConfig::with_image(32, 32, 3);
        let f = render(&ProbeState::upright(6.0), &c, 0).unwrap();
        assert_eq!(f.pixels.len(), 32 * 32 * 3);
        assert_eq!(f.pixel(10, 7, 0), f.pixel(10, 7, 2));
    }

    #[test]
    fn quantized_state_survives_f32_storage() {
        let s = ProbeState::normalizing(Quat::new(0.9, 0.1, -0.3, 0.05), [0.1, 0.2, 5.3, 1.0, 2.0, 3.0]).unwrap();
        let q = s.quantized();
        assert!(q.pose().is_unit());
        assert_eq!(ProbeState::from_features(&q.features()).unwrap(), q);
    }
}

//! Shared domain vocabulary: detections, states, Gaussian mixture components,
//! tracks, and the global parameter set.

use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Wraps an angle into `[-pi, pi]`.
pub fn wrap_angle<T: Real>(angle: T) -> T {
    let two_pi = T::two_pi();
    let mut a = angle % two_pi;
    if a > T::pi() {
        a -= two_pi;
    } else if a < -T::pi() {
        a += two_pi;
    }
    a
}

/// Box dimensions plus heading, carried as metadata alongside a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimsYaw<T: Real> {
    /// Height, width, length in meters.
    pub dims: [T; 3],
    /// Heading in radians, wrapped to `[-pi, pi]`.
    pub yaw: T,
}

/// One 3D bounding box produced by the object detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T: Real> {
    pub frame: usize,
    /// Box reference point in meters (KITTI convention: bottom-face center).
    pub position: Vector3<T>,
    /// Height, width, length in meters; each strictly positive.
    pub dims: [T; 3],
    /// Heading in radians, `[-pi, pi]`.
    pub yaw: T,
    /// Detector confidence, normalized to be non-negative.
    pub confidence: T,
    /// Detector class id, passed through to the output.
    pub class_id: i32,
    /// 2D image box from the detector, carried as metadata only.
    pub bbox2d: Option<[T; 4]>,
}

impl<T: Real> Detection<T> {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| *d <= T::zero()) {
            return Err(Error::Input(format!(
                "detection at frame {} has non-positive dimensions",
                self.frame
            )));
        }
        if self.confidence < T::zero() {
            return Err(Error::Input(format!(
                "detection at frame {} has negative confidence",
                self.frame
            )));
        }
        Ok(())
    }

    pub fn dims_yaw(&self) -> DimsYaw<T> {
        DimsYaw {
            dims: self.dims,
            yaw: self.yaw,
        }
    }
}

/// Per-object, per-frame state: 3D position and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectState<T: Real> {
    pub position: Vector3<T>,
    pub velocity: Vector3<T>,
}

impl<T: Real> ObjectState<T> {
    pub fn new(position: Vector3<T>, velocity: Vector3<T>) -> Self {
        Self { position, velocity }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.velocity.iter().all(|v| v.is_finite())
    }
}

/// One component of a detection mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent<T: Real> {
    /// Component mean in meters.
    pub mean: Vector3<T>,
    /// Inverse square root of the component covariance (1/m).
    pub sqrt_info: Matrix3<T>,
    /// Assignment prior weight.
    pub weight: T,
    /// `weight * det(sqrt_info)`, the term that competes across components.
    pub scaled_weight: T,
}

impl<T: Real> GaussianComponent<T> {
    pub fn new(mean: Vector3<T>, sqrt_info: Matrix3<T>, weight: T) -> Self {
        let scaled_weight = weight * sqrt_info.determinant();
        Self {
            mean,
            sqrt_info,
            weight,
            scaled_weight,
        }
    }

    /// Diagonal sqrt information from per-axis standard deviations.
    pub fn diag_sqrt_info(sigmas: &Vector3<T>) -> Matrix3<T> {
        Matrix3::from_diagonal(&Vector3::new(
            T::one() / sigmas.x,
            T::one() / sigmas.y,
            T::one() / sigmas.z,
        ))
    }
}

/// Equally weighted Gaussian mixture backing one detection factor.
///
/// Component 0 is always the null hypothesis; components `1..=n` correspond
/// to the `n` detections of the frame in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture<T: Real> {
    components: Vec<GaussianComponent<T>>,
}

impl<T: Real> GaussianMixture<T> {
    pub fn new(components: Vec<GaussianComponent<T>>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Structure(
                "mixture must contain the null-hypothesis component".into(),
            ));
        }
        let w0 = components[0].weight;
        if components.iter().any(|c| c.weight != w0) {
            return Err(Error::Structure("mixture weights must be equal".into()));
        }
        if components.iter().any(|c| c.scaled_weight <= T::zero()) {
            return Err(Error::InvalidComponent);
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GaussianComponent<T>] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// `gamma_m`, the largest scaled weight over all components.
    pub fn max_scaled_weight(&self) -> T {
        self.components
            .iter()
            .map(|c| c.scaled_weight)
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }
}

/// Association of one track frame, as stored in the track history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Association {
    /// Index of the matched detection within its frame.
    Detection(usize),
    /// Matched to the null hypothesis (no real detection).
    Null,
}

impl Association {
    pub fn is_null(&self) -> bool {
        matches!(self, Association::Null)
    }
}

/// Track lifecycle status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    /// Not yet confirmed by `n_det` consecutive detections.
    Candidate,
    /// Confirmed and currently matched.
    Active,
    /// Confirmed, with the given number of consecutive null frames.
    Lost(usize),
    /// Ended after exceeding `n_lost` consecutive null frames.
    Terminated,
}

/// One tracked object with its full per-frame history.
#[derive(Debug, Clone)]
pub struct Track<T: Real> {
    pub id: u64,
    pub birth_frame: usize,
    pub states: Vec<ObjectState<T>>,
    pub associations: Vec<Association>,
    pub dims_history: Vec<DimsYaw<T>>,
    pub confidence_history: Vec<T>,
    pub status: TrackStatus,
    pub class_id: i32,
    /// Whether the track ever reached `n_det` consecutive detections.
    pub confirmed: bool,
    /// Length of the current run of real-detection associations.
    pub consecutive_detections: usize,
}

impl<T: Real> Track<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Frame covered by history index `i`.
    pub fn frame_at(&self, index: usize) -> usize {
        self.birth_frame + index
    }

    /// History index of `frame`, if the track covers it.
    pub fn index_of(&self, frame: usize) -> Option<usize> {
        if frame < self.birth_frame {
            return None;
        }
        let idx = frame - self.birth_frame;
        (idx < self.states.len()).then_some(idx)
    }

    pub fn last_frame(&self) -> Option<usize> {
        (!self.states.is_empty()).then(|| self.birth_frame + self.states.len() - 1)
    }

    /// Number of trailing null-hypothesis associations.
    pub fn trailing_nulls(&self) -> usize {
        self.associations
            .iter()
            .rev()
            .take_while(|a| a.is_null())
            .count()
    }

    pub fn mean_confidence(&self) -> T {
        if self.confidence_history.is_empty() {
            return T::zero();
        }
        let sum = self
            .confidence_history
            .iter()
            .fold(T::zero(), |acc, c| acc + *c);
        sum / T::from_count(self.confidence_history.len())
    }

    /// Removes the last `n` entries from every history.
    pub fn truncate_tail(&mut self, n: usize) {
        let keep = self.states.len().saturating_sub(n);
        self.states.truncate(keep);
        self.associations.truncate(keep);
        self.dims_history.truncate(keep);
        self.confidence_history.truncate(keep);
    }

    /// Re-derives the lifecycle counters and status from the association
    /// history. Does not apply to terminated tracks.
    pub(crate) fn refresh_counters(&mut self, n_det: usize) {
        debug_assert!(self.status != TrackStatus::Terminated);
        let run = self
            .associations
            .iter()
            .rev()
            .take_while(|a| !a.is_null())
            .count();
        self.consecutive_detections = run;
        if run >= n_det {
            self.confirmed = true;
        }
        self.status = if !self.confirmed {
            TrackStatus::Candidate
        } else {
            match self.trailing_nulls() {
                0 => TrackStatus::Active,
                k => TrackStatus::Lost(k),
            }
        };
    }
}

/// Tracking mode: whole-sequence batch or per-frame incremental.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Offline,
    Online,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Mode::Offline),
            "online" => Ok(Mode::Online),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Offline => write!(f, "offline"),
            Mode::Online => write!(f, "online"),
        }
    }
}

/// Global tracker parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerParams<T: Real> {
    /// Detection position standard deviations, meters.
    pub sigma_det: Vector3<T>,
    /// Null-hypothesis position standard deviations, meters.
    pub sigma_det_null: Vector3<T>,
    /// Constant-velocity standard deviations: 3x position (m), 3x velocity (m/s).
    pub sigma_cv: Vector6<T>,
    /// Repelling variance, square meters.
    pub sigma_rep: T,
    /// Distance below which a repelling factor is added, meters.
    pub d_min: T,
    /// Mean-confidence output threshold, offline mode.
    pub c_min_offline: T,
    /// Mean-confidence output threshold, online mode.
    pub c_min_online: T,
    /// Consecutive detections required to confirm a track.
    pub n_det: usize,
    /// Consecutive null frames tolerated before termination.
    pub n_lost: usize,
    /// Frames a lost track keeps being emitted in online mode.
    pub n_perm: usize,
    /// Frame period, seconds.
    pub dt: T,
    /// Additive confidence offset; `None` derives it from the ingested data
    /// (magnitude of the most negative raw confidence).
    pub confidence_offset: Option<T>,
    pub mode: Mode,
}

/// The reference parameter values (10 FPS sensor rate).
pub fn default_params<T: Real>() -> TrackerParams<T> {
    TrackerParams {
        sigma_det: Vector3::new(T::of(0.2), T::of(0.2), T::of(0.2)),
        sigma_det_null: Vector3::new(T::of(100.0), T::of(100.0), T::of(1.0)),
        sigma_cv: Vector6::repeat(T::of(0.25)),
        sigma_rep: T::of(0.5),
        d_min: T::of(4.0),
        c_min_offline: T::of(3.9),
        c_min_online: T::of(3.5),
        n_det: 2,
        n_lost: 5,
        n_perm: 1,
        dt: T::of(0.1),
        confidence_offset: None,
        mode: Mode::Offline,
    }
}

impl<T: Real> Default for TrackerParams<T> {
    fn default() -> Self {
        default_params()
    }
}

impl<T: Real> TrackerParams<T> {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        if !self.sigma_det.iter().all(|v| pos(*v))
            || !self.sigma_det_null.iter().all(|v| pos(*v))
            || !self.sigma_cv.iter().all(|v| pos(*v))
            || !pos(self.sigma_rep)
            || !pos(self.d_min)
            || !pos(self.dt)
        {
            return Err(Error::Config(
                "covariance entries, d_min and dt must be strictly positive".into(),
            ));
        }
        if self.n_det < 1 || self.n_lost < 1 {
            return Err(Error::Config("n_det and n_lost must be at least 1".into()));
        }
        Ok(())
    }

    /// Threshold applicable to the configured mode.
    pub fn c_min(&self) -> T {
        match self.mode {
            Mode::Offline => self.c_min_offline,
            Mode::Online => self.c_min_online,
        }
    }

    pub fn det_sqrt_info(&self) -> Matrix3<T> {
        GaussianComponent::diag_sqrt_info(&self.sigma_det)
    }

    pub fn null_sqrt_info(&self) -> Matrix3<T> {
        GaussianComponent::diag_sqrt_info(&self.sigma_det_null)
    }

    pub fn cv_sqrt_info(&self) -> Matrix6<T> {
        let mut diag = Vector6::zeros();
        for i in 0..6 {
            diag[i] = T::one() / self.sigma_cv[i];
        }
        Matrix6::from_diagonal(&diag)
    }

    /// Scalar whitening for the repelling residual: `sigma_rep` is a variance.
    pub fn rep_sqrt_info(&self) -> T {
        T::one() / self.sigma_rep.sqrt()
    }

    /// Renders the flat `key = value` config format.
    pub fn to_config_string(&self) -> String {
        fn vec_str<T: Real>(it: impl Iterator<Item = T>) -> String {
            it.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
        }
        let mut out = String::new();
        out.push_str("# tracker parameters (SI units)\n");
        out.push_str(&format!(
            "sigma_det = {}\n",
            vec_str(self.sigma_det.iter().copied())
        ));
        out.push_str(&format!(
            "sigma_det_null = {}\n",
            vec_str(self.sigma_det_null.iter().copied())
        ));
        out.push_str(&format!(
            "sigma_cv = {}\n",
            vec_str(self.sigma_cv.iter().copied())
        ));
        out.push_str(&format!("sigma_rep = {}\n", self.sigma_rep));
        out.push_str(&format!("d_min = {}\n", self.d_min));
        out.push_str(&format!("c_min_offline = {}\n", self.c_min_offline));
        out.push_str(&format!("c_min_online = {}\n", self.c_min_online));
        out.push_str(&format!("n_det = {}\n", self.n_det));
        out.push_str(&format!("n_lost = {}\n", self.n_lost));
        out.push_str(&format!("n_perm = {}\n", self.n_perm));
        out.push_str(&format!("dt = {}\n", self.dt));
        match self.confidence_offset {
            Some(v) => out.push_str(&format!("confidence_offset = {v}\n")),
            None => out.push_str("confidence_offset = auto\n"),
        }
        out.push_str(&format!("mode = {}\n", self.mode));
        out
    }

    /// Parses the flat `key = value` format; unknown keys are an error.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut params = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let line_err = |message: String| Error::Parse {
                line: lineno + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| line_err("expected `key = value`".into()))?;
            let key = key.trim();
            let value = value.trim();
            let scalar = |v: &str| -> Result<T> {
                v.parse::<f64>()
                    .map(T::of)
                    .map_err(|e| line_err(format!("bad number `{v}`: {e}")))
            };
            let vector = |v: &str, n: usize| -> Result<Vec<T>> {
                let parts: Vec<&str> = v.split_whitespace().collect();
                if parts.len() != n {
                    return Err(line_err(format!("expected {n} values, got {}", parts.len())));
                }
                parts.iter().map(|p| scalar(p)).collect()
            };
            let integer = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|e| line_err(format!("bad integer `{v}`: {e}")))
            };
            match key {
                "sigma_det" => {
                    let v = vector(value, 3)?;
                    params.sigma_det = Vector3::new(v[0], v[1], v[2]);
                }
                "sigma_det_null" => {
                    let v = vector(value, 3)?;
                    params.sigma_det_null = Vector3::new(v[0], v[1], v[2]);
                }
                "sigma_cv" => {
                    let v = vector(value, 6)?;
                    params.sigma_cv = Vector6::from_iterator(v);
                }
                "sigma_rep" => params.sigma_rep = scalar(value)?,
                "d_min" => params.d_min = scalar(value)?,
                "c_min_offline" => params.c_min_offline = scalar(value)?,
                "c_min_online" => params.c_min_online = scalar(value)?,
                "n_det" => params.n_det = integer(value)?,
                "n_lost" => params.n_lost = integer(value)?,
                "n_perm" => params.n_perm = integer(value)?,
                "dt" => params.dt = scalar(value)?,
                "confidence_offset" => {
                    params.confidence_offset = if value == "auto" {
                        None
                    } else {
                        Some(scalar(value)?)
                    };
                }
                "mode" => params.mode = value.parse()?,
                other => {
                    return Err(line_err(format!("unknown key `{other}`")));
                }
            }
        }
        params.validate()?;
        Ok(params)
    }

    pub fn read_config(path: &Path) -> Result<Self> {
        Self::from_config_str(&std::fs::read_to_string(path)?)
    }

    pub fn write_config(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_string())?;
        Ok(())
    }
}

/// Shifts a raw detector confidence into the non-negative range.
pub fn normalize_confidence<T: Real>(raw: T, offset: T) -> Result<T> {
    let shifted = raw + offset;
    if shifted < T::zero() {
        return Err(Error::InvalidOffset(format!(
            "confidence {raw} + offset {offset} is negative"
        )));
    }
    Ok(shifted)
}

/// Offset that maps the most negative raw confidence to zero.
pub fn auto_confidence_offset<T: Real>(raws: impl Iterator<Item = T>) -> T {
    let min = raws.fold(T::zero(), |a, b| if b < a { b } else { a });
    -min
}

//! Run configuration: TOML files with one section per subsystem, dotted-path
//! flag overrides, and a single schema table that feeds both `--help` and
//! the schema cross-check test.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use yawplan::bench::BenchConfig;
use yawplan::penalties::{FovModel, FovSign};
use yawplan::splines::{BoundaryState, PiecewisePoly};
use yawplan::tracksim::{TargetKind, TargetModel, TrackingConfig};
use yawplan::traversal::{
    allocate_times, Keyframe, TraversalLimits, TraversalProblem, Weights,
};
use yawplan::yawparam::{boundary_virtual, HeadingVector, YawLimits};

pub type ConfigError = String;

fn v3(v: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

// ---- shared sections ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitsSection {
    pub v_max: f64,
    pub a_max: f64,
    pub v_psi_max: f64,
    pub a_psi_max: f64,
    pub v_s_max: f64,
    pub a_s_max: f64,
    pub r_min: f64,
}

impl Default for LimitsSection {
    fn default() -> Self {
        let yaw = YawLimits::default();
        let lim = TraversalLimits::default();
        Self {
            v_max: lim.v_max,
            a_max: lim.a_max,
            v_psi_max: yaw.v_psi_max,
            a_psi_max: yaw.a_psi_max,
            v_s_max: yaw.v_s_max,
            a_s_max: yaw.a_s_max,
            r_min: yaw.r_min,
        }
    }
}

impl LimitsSection {
    pub fn to_limits(&self) -> TraversalLimits {
        TraversalLimits {
            yaw: YawLimits {
                v_psi_max: self.v_psi_max,
                a_psi_max: self.a_psi_max,
                v_s_max: self.v_s_max,
                a_s_max: self.a_s_max,
                r_min: self.r_min,
            },
            v_max: self.v_max,
            a_max: self.a_max,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub position_effort: f64,
    pub yaw_effort: f64,
    pub fov: f64,
    pub velocity_alignment: f64,
    pub image_velocity: f64,
    pub yaw_dynamics: f64,
    pub virtual_bounds: f64,
    pub position_limits: f64,
    pub waypoint_attraction: f64,
}

impl WeightsSection {
    fn from_weights(w: Weights) -> Self {
        Self {
            position_effort: w.position_effort,
            yaw_effort: w.yaw_effort,
            fov: w.fov,
            velocity_alignment: w.velocity_alignment,
            image_velocity: w.image_velocity,
            yaw_dynamics: w.yaw_dynamics,
            virtual_bounds: w.virtual_bounds,
            position_limits: w.position_limits,
            waypoint_attraction: w.waypoint_attraction,
        }
    }

    pub fn to_weights(&self) -> Weights {
        Weights {
            position_effort: self.position_effort,
            yaw_effort: self.yaw_effort,
            fov: self.fov,
            velocity_alignment: self.velocity_alignment,
            image_velocity: self.image_velocity,
            yaw_dynamics: self.yaw_dynamics,
            virtual_bounds: self.virtual_bounds,
            position_limits: self.position_limits,
            waypoint_attraction: self.waypoint_attraction,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("weights.position_effort", self.position_effort),
            ("weights.yaw_effort", self.yaw_effort),
            ("weights.fov", self.fov),
            ("weights.velocity_alignment", self.velocity_alignment),
            ("weights.image_velocity", self.image_velocity),
            ("weights.yaw_dynamics", self.yaw_dynamics),
            ("weights.virtual_bounds", self.virtual_bounds),
            ("weights.position_limits", self.position_limits),
            ("weights.waypoint_attraction", self.waypoint_attraction),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self::from_weights(Weights::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FovSection {
    pub theta_deg: f64,
    pub theta_r_deg: f64,
    /// "robot_to_target" (default) or "target_to_robot".
    pub fov_sign: String,
    /// Image-velocity bound (m/s).
    pub v_w_max: f64,
}

impl Default for FovSection {
    fn default() -> Self {
        Self {
            theta_deg: 87.0,
            theta_r_deg: 45.0,
            fov_sign: "robot_to_target".into(),
            v_w_max: 1.0,
        }
    }
}

impl FovSection {
    pub fn to_model(&self) -> Result<FovModel, ConfigError> {
        let sign = match self.fov_sign.as_str() {
            "robot_to_target" => FovSign::RobotToTarget,
            "target_to_robot" => FovSign::TargetToRobot,
            other => {
                return Err(format!(
                    "fov.fov_sign must be robot_to_target or target_to_robot, got '{other}'"
                ))
            }
        };
        Ok(FovModel {
            theta: self.theta_deg.to_radians(),
            theta_r: self.theta_r_deg.to_radians(),
            sign,
            ..FovModel::default()
        })
    }
}

/// Target model; `kind` selects which of the other fields apply.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    /// "static" | "line" | "circle" | "waypoints".
    pub kind: String,
    pub position: [f64; 3],
    pub start: [f64; 3],
    pub direction: [f64; 3],
    pub center: [f64; 3],
    pub radius: f64,
    pub speed: f64,
    pub waypoints: Vec<[f64; 3]>,
    pub v_target_max: f64,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            kind: "static".into(),
            position: [2.0, 0.0, 1.0],
            start: [0.0, 0.0, 1.0],
            direction: [1.0, 0.0, 0.0],
            center: [0.0, 0.0, 1.0],
            radius: 2.0,
            speed: 0.5,
            waypoints: vec![],
            v_target_max: 0.5,
        }
    }
}

impl TargetSection {
    pub fn to_model(&self) -> Result<TargetModel, ConfigError> {
        let kind = match self.kind.as_str() {
            "static" => TargetKind::Static {
                position: v3(&self.position),
            },
            "line" => TargetKind::Line {
                start: v3(&self.start),
                direction: v3(&self.direction),
                speed: self.speed,
            },
            "circle" => TargetKind::Circle {
                center: v3(&self.center),
                radius: self.radius,
                speed: self.speed,
            },
            "waypoints" => TargetKind::WaypointPath {
                waypoints: self.waypoints.iter().map(v3).collect(),
                speed: self.speed,
            },
            other => {
                return Err(format!(
                    "target.kind must be static|line|circle|waypoints, got '{other}'"
                ))
            }
        };
        TargetModel::new(kind, self.v_target_max).map_err(|e| e.to_string())
    }
}

// ---- plan ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    pub start_position: [f64; 3],
    pub start_velocity: [f64; 3],
    pub start_heading_deg: f64,
    pub start_yaw_rate: f64,
    pub start_radius: f64,
    pub end_position: [f64; 3],
    pub end_velocity: [f64; 3],
    pub end_heading_deg: f64,
    pub end_yaw_rate: f64,
    pub end_radius: f64,
    /// Per-segment durations; empty derives them from the nominal rates.
    pub durations: Vec<f64>,
    pub v_nominal: f64,
    pub omega_nominal: f64,
    pub hard_keyframes: bool,
    pub quadrature_n: usize,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            start_position: [0.0, 0.0, 1.0],
            start_velocity: [0.0; 3],
            start_heading_deg: 0.0,
            start_yaw_rate: 0.0,
            start_radius: 1.0,
            end_position: [1.0, 0.0, 1.0],
            end_velocity: [0.0; 3],
            end_heading_deg: 0.0,
            end_yaw_rate: 0.0,
            end_radius: 1.0,
            durations: vec![],
            v_nominal: 2.0,
            omega_nominal: 1.0,
            hard_keyframes: false,
            quadrature_n: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyframeSection {
    pub position: [f64; 3],
    pub heading_deg: f64,
    pub radius_hint: f64,
    /// Knot time in seconds; negative means unset.
    pub time: f64,
}

impl Default for KeyframeSection {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            heading_deg: 0.0,
            radius_hint: 1.0,
            time: -1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Trajectory CSV sample rate (Hz).
    pub sample_hz: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { sample_hz: 100.0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub problem: ProblemSection,
    pub keyframes: Vec<KeyframeSection>,
    pub limits: LimitsSection,
    pub weights: WeightsSection,
    pub fov: FovSection,
    pub target: Option<TargetSection>,
    pub output: OutputSection,
}

impl PlanConfig {
    /// Build the joint problem this configuration describes.
    pub fn to_problem(&self) -> Result<TraversalProblem, ConfigError> {
        self.weights.validate()?;
        let p = &self.problem;
        let boundary = |pos: &[f64; 3], vel: &[f64; 3]| {
            BoundaryState::new(vec![
                nalgebra::DVector::from_column_slice(pos),
                nalgebra::DVector::from_column_slice(vel),
            ])
            .expect("fixed-size rows")
        };
        let yaw_bc = |deg: f64, rate: f64, radius: f64| {
            boundary_virtual(&HeadingVector::from_angle(deg.to_radians()), rate, radius, 0.0)
                .map_err(|e| e.to_string())
        };

        let keyframes: Vec<Keyframe> = self
            .keyframes
            .iter()
            .map(|k| Keyframe {
                position: v3(&k.position),
                heading: HeadingVector::from_angle(k.heading_deg.to_radians()),
                radius_hint: k.radius_hint,
                time: (k.time >= 0.0).then_some(k.time),
            })
            .collect();

        let durations = if p.durations.is_empty() {
            let mut points = vec![(
                v3(&p.start_position),
                HeadingVector::from_angle(p.start_heading_deg.to_radians()),
            )];
            points.extend(keyframes.iter().map(|k| (k.position, k.heading)));
            points.push((
                v3(&p.end_position),
                HeadingVector::from_angle(p.end_heading_deg.to_radians()),
            ));
            allocate_times(&points, p.v_nominal, p.omega_nominal).map_err(|e| e.to_string())?
        } else {
            p.durations.clone()
        };

        let total: f64 = durations.iter().sum();
        let timed_reference = match &self.target {
            Some(t) => Some(
                reference_from_target(&t.to_model()?, total + 1.0)
                    .map_err(|e| e.to_string())?,
            ),
            None => None,
        };

        let problem = TraversalProblem {
            pos_start: boundary(&p.start_position, &p.start_velocity),
            pos_end: boundary(&p.end_position, &p.end_velocity),
            yaw_start: yaw_bc(p.start_heading_deg, p.start_yaw_rate, p.start_radius)?,
            yaw_end: yaw_bc(p.end_heading_deg, p.end_yaw_rate, p.end_radius)?,
            keyframes,
            hard_keyframes: p.hard_keyframes,
            timed_reference,
            limits: self.limits.to_limits(),
            weights: self.weights.to_weights(),
            fov: self.fov.to_model()?,
            v_w_max: self.fov.v_w_max,
            durations,
            quadrature_n: p.quadrature_n,
        };
        problem.validate().map_err(|e| e.to_string())?;
        Ok(problem)
    }
}

/// Sample a scripted target into a piecewise-linear reference trajectory.
pub fn reference_from_target(
    model: &TargetModel,
    total: f64,
) -> Result<PiecewisePoly, yawplan::splines::SplineError> {
    let n = ((total * 10.0).ceil() as usize).max(1);
    let dt = total / n as f64;
    let mut segments = Vec::with_capacity(n);
    for i in 0..n {
        let t0 = i as f64 * dt;
        let (w, wd) = model.state(t0);
        let mut seg = nalgebra::DMatrix::zeros(2, 3);
        for d in 0..3 {
            seg[(0, d)] = w[d];
            seg[(1, d)] = wd[d];
        }
        segments.push(seg);
    }
    PiecewisePoly::new(segments, vec![dt; n])
}

// ---- track ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingSection {
    pub d_des: f64,
    pub d_tol: f64,
    pub replan_hz: f64,
    pub horizon: f64,
    pub n_keyframes: usize,
    pub sim_duration: f64,
    pub seed: u64,
    pub log_hz: f64,
    /// Empty derives a standoff start beside the target.
    pub initial_position: Vec<f64>,
    pub quadrature_n: usize,
}

impl Default for TrackingSection {
    fn default() -> Self {
        let c = TrackingConfig::default();
        Self {
            d_des: c.d_des,
            d_tol: c.d_tol,
            replan_hz: c.replan_hz,
            horizon: c.horizon,
            n_keyframes: c.n_keyframes,
            sim_duration: c.sim_duration,
            seed: c.seed,
            log_hz: c.log_hz,
            initial_position: vec![],
            quadrature_n: c.quadrature_n,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    #[serde(default)]
    pub tracking: TrackingSection,
    /// The one section without a default: a scenario needs a target.
    pub target: TargetSection,
    #[serde(default)]
    pub limits: LimitsSection,
    #[serde(default = "track_weights_default")]
    pub weights: WeightsSection,
    #[serde(default)]
    pub fov: FovSection,
}

fn track_weights_default() -> WeightsSection {
    WeightsSection::from_weights(TrackingConfig::default().weights)
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            tracking: TrackingSection::default(),
            target: TargetSection::default(),
            limits: LimitsSection::default(),
            weights: track_weights_default(),
            fov: FovSection::default(),
        }
    }
}

impl TrackConfig {
    pub fn to_parts(&self) -> Result<(TargetModel, TrackingConfig), ConfigError> {
        self.weights.validate()?;
        let t = &self.tracking;
        let initial_position = match t.initial_position.len() {
            0 => None,
            3 => Some(Vector3::new(
                t.initial_position[0],
                t.initial_position[1],
                t.initial_position[2],
            )),
            n => {
                return Err(format!(
                    "tracking.initial_position needs 0 or 3 entries, got {n}"
                ))
            }
        };
        let config = TrackingConfig {
            d_des: t.d_des,
            d_tol: t.d_tol,
            replan_hz: t.replan_hz,
            horizon: t.horizon,
            n_keyframes: t.n_keyframes,
            fov: self.fov.to_model()?,
            limits: self.limits.to_limits(),
            weights: self.weights.to_weights(),
            v_w_max: self.fov.v_w_max,
            sim_duration: t.sim_duration,
            seed: t.seed,
            log_hz: t.log_hz,
            initial_position,
            quadrature_n: t.quadrature_n,
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok((self.target.to_model()?, config))
    }
}

// ---- bench ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub box_size: [f64; 3],
    pub waypoints_min: usize,
    pub waypoints_max: usize,
    pub v_nominal: f64,
    pub omega_nominal: f64,
    pub n_check: usize,
    pub accel_quad_points: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let c = BenchConfig::default();
        Self {
            box_size: c.box_size,
            waypoints_min: c.waypoints_min,
            waypoints_max: c.waypoints_max,
            v_nominal: c.v_nominal,
            omega_nominal: c.omega_nominal,
            n_check: c.n_check,
            accel_quad_points: c.accel_quad_points,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchFileConfig {
    pub bench: BenchSection,
    pub limits: LimitsSection,
}

impl BenchFileConfig {
    pub fn to_config(&self) -> BenchConfig {
        BenchConfig {
            box_size: self.bench.box_size,
            waypoints_min: self.bench.waypoints_min,
            waypoints_max: self.bench.waypoints_max,
            v_nominal: self.bench.v_nominal,
            omega_nominal: self.bench.omega_nominal,
            limits: self.limits.to_limits().yaw,
            n_check: self.bench.n_check,
            accel_quad_points: self.bench.accel_quad_points,
        }
    }
}

// ---- loading and overrides ----

/// Apply `section.key=value` overrides onto a parsed TOML document.
pub fn apply_overrides(
    doc: &mut toml::Value,
    overrides: &[(String, String)],
) -> Result<(), ConfigError> {
    for (path, raw) in overrides {
        let parts: Vec<&str> = path.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(format!("malformed override path '{path}'"));
        }
        // Parse the value as TOML; bare words fall back to strings.
        let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(t) => t["v"].clone(),
            Err(_) => toml::Value::String(raw.clone()),
        };
        let mut node = &mut *doc;
        for part in &parts[..parts.len() - 1] {
            let table = node.as_table_mut().ok_or_else(|| {
                format!("override '{path}': '{part}' is not a table")
            })?;
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| format!("override '{path}': parent is not a table"))?;
        table.insert(parts[parts.len() - 1].to_string(), parsed);
        // Unknown keys are rejected later by the typed deserialization.
    }
    Ok(())
}

/// Load a config file, apply overrides, deserialize strictly.
pub fn load_config<T: serde::de::DeserializeOwned>(
    text: &str,
    overrides: &[(String, String)],
) -> Result<T, ConfigError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| format!("config parse error: {e}"))?;
    let mut doc = toml::Value::Table(table);
    apply_overrides(&mut doc, overrides)?;
    T::deserialize(doc).map_err(|e| format!("config error: {e}"))
}

/// Dotted keys and defaults, one row per tunable; drives `--help` and the
/// schema cross-check test.
pub fn schema(kind: &str) -> Vec<(String, String)> {
    fn walk(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
        match value {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            toml::Value::Array(items)
                if items.iter().all(|i| matches!(i, toml::Value::Table(_))) && !items.is_empty() =>
            {
                // Array-of-tables: document the element shape once.
                walk(&format!("{prefix}[]"), &items[0], out);
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }

    let doc: toml::Value = match kind {
        "plan" => {
            let mut c = PlanConfig::default();
            c.keyframes.push(KeyframeSection::default());
            c.target = Some(TargetSection::default());
            toml::Value::try_from(c).expect("serializable")
        }
        "track" => toml::Value::try_from(TrackConfig::default()).expect("serializable"),
        "bench" => toml::Value::try_from(BenchFileConfig::default()).expect("serializable"),
        other => panic!("unknown schema kind {other}"),
    };
    let mut out = Vec::new();
    walk("", &doc, &mut out);
    out.sort();
    out
}

/// Render a schema as help text.
pub fn schema_help() -> String {
    let mut s = String::new();
    for kind in ["plan", "track", "bench"] {
        s.push_str(&format!("[{kind} config keys and defaults]\n"));
        for (key, default) in schema(kind) {
            s.push_str(&format!("  {key} = {default}\n"));
        }
        s.push('\n');
    }
    s.push_str(
        "Override any key with --<section>.<key>=<value>, e.g. --weights.fov=50.\n",
    );
    s
}

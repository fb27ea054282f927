//! Receding-horizon target tracking in software: scripted target motion,
//! constant-velocity prediction, visible-keyframe generation at a standoff
//! distance, fixed-rate replanning through the joint optimizer, and metric
//! aggregation from a high-rate log.

use crate::penalties::FovModel;
use crate::splines::{BoundaryState, PiecewisePoly, SplineError};
use crate::traversal::{
    solve_traversal, Keyframe, TraversalError, TraversalLimits, TraversalProblem, Weights,
};
use crate::yawparam::{heading_rates, normalize_heading, VirtualYawState, YawError};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use std::collections::VecDeque;
use std::io::{self, Write};
use std::time::Instant;

#[derive(thiserror::Error, Debug)]
pub enum TrackError {
    #[error("invalid tracking configuration: {0}")]
    InvalidConfig(String),
    #[error("planner failed at t={t:.2}: {source}")]
    PlannerFailed {
        t: f64,
        #[source]
        source: TraversalError,
    },
    #[error(transparent)]
    Traversal(#[from] TraversalError),
    #[error(transparent)]
    Yaw(#[from] YawError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Scripted target motion.
#[derive(Debug, Clone)]
pub enum TargetKind {
    Static { position: Vector3<f64> },
    Line {
        start: Vector3<f64>,
        direction: Vector3<f64>,
        speed: f64,
    },
    Circle {
        center: Vector3<f64>,
        radius: f64,
        speed: f64,
    },
    WaypointPath {
        waypoints: Vec<Vector3<f64>>,
        speed: f64,
    },
}

#[derive(Debug, Clone)]
pub struct TargetModel {
    kind: TargetKind,
    v_target_max: f64,
}

pub const DEFAULT_TARGET_SPEED_MAX: f64 = 0.5;

impl TargetModel {
    pub fn new(kind: TargetKind, v_target_max: f64) -> Result<Self, TrackError> {
        if !(v_target_max > 0.0) {
            return Err(TrackError::InvalidConfig(
                "target speed bound must be positive".into(),
            ));
        }
        let speed = match &kind {
            TargetKind::Static { .. } => 0.0,
            TargetKind::Line { speed, direction, .. } => {
                if direction.norm() < 1e-9 {
                    return Err(TrackError::InvalidConfig(
                        "line target needs a nonzero direction".into(),
                    ));
                }
                *speed
            }
            TargetKind::Circle { speed, radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(TrackError::InvalidConfig(
                        "circle target needs a positive radius".into(),
                    ));
                }
                *speed
            }
            TargetKind::WaypointPath { waypoints, speed } => {
                if waypoints.len() < 2 {
                    return Err(TrackError::InvalidConfig(
                        "waypoint path needs at least two points".into(),
                    ));
                }
                *speed
            }
        };
        if speed < 0.0 || speed > v_target_max + 1e-12 {
            return Err(TrackError::InvalidConfig(format!(
                "target speed {speed} exceeds bound {v_target_max}"
            )));
        }
        Ok(Self { kind, v_target_max })
    }

    pub fn v_target_max(&self) -> f64 {
        self.v_target_max
    }

    /// Position and velocity of the target at time `t`.
    pub fn state(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        match &self.kind {
            TargetKind::Static { position } => (*position, Vector3::zeros()),
            TargetKind::Line {
                start,
                direction,
                speed,
            } => {
                let dir = direction.normalize();
                (start + dir * (*speed * t), dir * *speed)
            }
            TargetKind::Circle {
                center,
                radius,
                speed,
            } => {
                let rate = speed / radius;
                let phi = rate * t;
                (
                    center + Vector3::new(radius * phi.cos(), radius * phi.sin(), 0.0),
                    Vector3::new(-speed * phi.sin(), speed * phi.cos(), 0.0),
                )
            }
            TargetKind::WaypointPath { waypoints, speed } => {
                let mut remaining = speed * t;
                for pair in waypoints.windows(2) {
                    let leg = pair[1] - pair[0];
                    let len = leg.norm();
                    if remaining <= len {
                        let dir = if len > 1e-12 { leg / len } else { Vector3::zeros() };
                        return (pair[0] + dir * remaining, dir * *speed);
                    }
                    remaining -= len;
                }
                (*waypoints.last().unwrap(), Vector3::zeros())
            }
        }
    }
}

/// Receding-horizon tracking parameters.
#[derive(Debug, Clone)]
pub struct TrackingConfig {
    /// Desired standoff distance (m).
    pub d_des: f64,
    /// Standoff tolerance band (m), reported as a coverage metric.
    pub d_tol: f64,
    pub replan_hz: f64,
    /// Planning horizon (s).
    pub horizon: f64,
    /// Keyframes per plan; the last one becomes the terminal boundary.
    pub n_keyframes: usize,
    pub fov: FovModel,
    pub limits: TraversalLimits,
    pub weights: Weights,
    pub v_w_max: f64,
    pub sim_duration: f64,
    pub seed: u64,
    pub log_hz: f64,
    /// Quad start position; default is a standoff point beside the target.
    pub initial_position: Option<Vector3<f64>>,
    pub quadrature_n: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            d_des: 2.0,
            d_tol: 0.3,
            replan_hz: 10.0,
            horizon: 2.0,
            n_keyframes: 4,
            fov: FovModel::default(),
            limits: TraversalLimits::default(),
            weights: Weights {
                fov: 100.0,
                waypoint_attraction: 100.0,
                yaw_dynamics: 1.0,
                virtual_bounds: 100.0,
                position_limits: 10.0,
                ..Weights::default()
            },
            v_w_max: 1.0,
            sim_duration: 60.0,
            seed: 0,
            log_hz: 100.0,
            initial_position: None,
            quadrature_n: 8,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if !(self.d_des > self.d_tol && self.d_tol > 0.0) {
            return Err(TrackError::InvalidConfig(format!(
                "need d_des > d_tol > 0, got d_des={} d_tol={}",
                self.d_des, self.d_tol
            )));
        }
        if !(self.replan_hz > 0.0) {
            return Err(TrackError::InvalidConfig("replan_hz must be positive".into()));
        }
        if self.horizon < 2.0 / self.replan_hz {
            return Err(TrackError::InvalidConfig(format!(
                "horizon {} shorter than two replan periods",
                self.horizon
            )));
        }
        if self.n_keyframes < 2 {
            return Err(TrackError::InvalidConfig(
                "n_keyframes must be at least 2".into(),
            ));
        }
        if !(self.sim_duration > 0.0) || !(self.log_hz > 0.0) {
            return Err(TrackError::InvalidConfig(
                "sim duration and log rate must be positive".into(),
            ));
        }
        let per_tick = self.log_hz / self.replan_hz;
        if (per_tick - per_tick.round()).abs() > 1e-9 || per_tick < 1.0 {
            return Err(TrackError::InvalidConfig(format!(
                "log_hz {} must be an integer multiple of replan_hz {}",
                self.log_hz, self.replan_hz
            )));
        }
        Ok(())
    }
}

/// Constant-velocity prediction: least-squares linear fit over the most
/// recent second of history, extrapolated over the horizon as a degree-1
/// curve.
pub fn predict_target(
    history: &[(f64, Vector3<f64>)],
    horizon: f64,
) -> Result<PiecewisePoly, TrackError> {
    if history.len() < 2 {
        return Err(TrackError::InvalidConfig(format!(
            "prediction needs at least 2 history samples, got {}",
            history.len()
        )));
    }
    if !(horizon > 0.0) {
        return Err(TrackError::InvalidConfig("horizon must be positive".into()));
    }
    let t_last = history.last().unwrap().0;
    let window: Vec<&(f64, Vector3<f64>)> = history
        .iter()
        .filter(|(t, _)| *t >= t_last - 1.0 - 1e-9)
        .collect();
    let n = window.len() as f64;
    let mean_t = window.iter().map(|(t, _)| *t).sum::<f64>() / n;
    let mut mean_w = Vector3::zeros();
    for (_, w) in &window {
        mean_w += *w;
    }
    mean_w /= n;
    let var_t: f64 = window.iter().map(|(t, _)| (t - mean_t).powi(2)).sum();
    let vel = if var_t > 1e-12 {
        let mut cov = Vector3::zeros();
        for (t, w) in &window {
            cov += (*t - mean_t) * (*w - mean_w);
        }
        cov / var_t
    } else {
        Vector3::zeros()
    };
    let at_last = mean_w + vel * (t_last - mean_t);

    let mut seg = DMatrix::zeros(2, 3);
    for d in 0..3 {
        seg[(0, d)] = at_last[d];
        seg[(1, d)] = vel[d];
    }
    Ok(PiecewisePoly::new(vec![seg], vec![horizon])?)
}

/// Keyframes at a horizontal standoff on the quad's side of the predicted
/// target, each heading at the prediction for its own time.
pub fn generate_tracking_keyframes(
    pred: &PiecewisePoly,
    quad_position: &Vector3<f64>,
    config: &TrackingConfig,
    prev_u: Option<Vector2<f64>>,
) -> Result<(Vec<Keyframe>, Vector2<f64>), TrackError> {
    let n = config.n_keyframes;
    let mut out = Vec::with_capacity(n);
    let mut u = prev_u.unwrap_or_else(|| Vector2::new(1.0, 0.0));
    for k in 1..=n {
        let t_k = config.horizon * k as f64 / n as f64;
        let w = pred.eval(t_k.min(pred.total_duration()), 0)?;
        let w = Vector3::new(w[0], w[1], w[2]);
        let away = Vector2::new(quad_position.x - w.x, quad_position.y - w.y);
        if away.norm() > 1e-6 {
            u = away / away.norm();
        }
        let position = w + config.d_des * Vector3::new(u.x, u.y, 0.0);
        let heading = normalize_heading(&(-u))?;
        out.push(Keyframe {
            position,
            heading,
            radius_hint: 1.0,
            time: Some(t_k),
        });
    }
    Ok((out, u))
}

/// One 100 Hz-style log sample.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub t: f64,
    pub p: Vector3<f64>,
    pub yaw: f64,
    pub omega: f64,
    pub w: Vector3<f64>,
    pub deviation: f64,
    pub distance: f64,
    pub in_fov: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrackingLog {
    pub rows: Vec<LogRow>,
    pub replan_count: usize,
    pub failure_count: usize,
    pub mean_solve_time: f64,
}

/// Aggregates in the shape of the tracking experiment's report.
#[derive(Debug, Clone, Copy)]
pub struct TrackingMetrics {
    pub out_of_fov_pct: f64,
    pub deviation_mean: f64,
    pub deviation_std: f64,
    pub z_body_rate_mean: f64,
    pub z_body_rate_std: f64,
    pub relative_distance_mean: f64,
    pub relative_distance_std: f64,
    /// Share of samples within `d_des +- d_tol`.
    pub within_band_pct: f64,
    pub replan_count: usize,
    pub failure_count: usize,
    pub mean_solve_time: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0.0;
    let mut sum = 0.0;
    for v in values.clone() {
        n += 1.0;
        sum += v;
    }
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let mean = sum / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

impl TrackingMetrics {
    pub fn from_log(log: &TrackingLog, config: &TrackingConfig) -> Self {
        let rows = &log.rows;
        let n = rows.len().max(1) as f64;
        let out = rows.iter().filter(|r| !r.in_fov).count() as f64;
        let (dev_mean, dev_std) = mean_std(rows.iter().map(|r| r.deviation));
        let (rate_mean, rate_std) = mean_std(rows.iter().map(|r| r.omega.abs()));
        let (dist_mean, dist_std) = mean_std(rows.iter().map(|r| r.distance));
        let within = rows
            .iter()
            .filter(|r| (r.distance - config.d_des).abs() <= config.d_tol)
            .count() as f64;
        Self {
            out_of_fov_pct: 100.0 * out / n,
            deviation_mean: dev_mean,
            deviation_std: dev_std,
            z_body_rate_mean: rate_mean,
            z_body_rate_std: rate_std,
            relative_distance_mean: dist_mean,
            relative_distance_std: dist_std,
            within_band_pct: 100.0 * within / n,
            replan_count: log.replan_count,
            failure_count: log.failure_count,
            mean_solve_time: log.mean_solve_time,
        }
    }

    /// Deterministic key-value entries (wall-clock figures excluded so the
    /// file is bit-identical across runs).
    pub fn file_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("out_of_fov_pct", format!("{:.6}", self.out_of_fov_pct)),
            ("deviation_mean", format!("{:.6}", self.deviation_mean)),
            ("deviation_std", format!("{:.6}", self.deviation_std)),
            ("z_body_rate_mean", format!("{:.6}", self.z_body_rate_mean)),
            ("z_body_rate_std", format!("{:.6}", self.z_body_rate_std)),
            (
                "relative_distance_mean",
                format!("{:.6}", self.relative_distance_mean),
            ),
            (
                "relative_distance_std",
                format!("{:.6}", self.relative_distance_std),
            ),
            ("within_band_pct", format!("{:.6}", self.within_band_pct)),
            ("replan_count", format!("{}", self.replan_count)),
            ("failure_count", format!("{}", self.failure_count)),
        ]
    }
}

struct QuadState {
    p: Vector3<f64>,
    v: Vector3<f64>,
    s: Vector2<f64>,
    s_dot: Vector2<f64>,
}

struct ActivePlan {
    position: PiecewisePoly,
    yaw: PiecewisePoly,
    start_time: f64,
}

impl ActivePlan {
    fn sample(&self, t: f64) -> Result<(QuadState, f64, f64), TrackError> {
        let tau = (t - self.start_time).clamp(0.0, self.position.total_duration());
        let p = self.position.eval(tau, 0)?;
        let v = self.position.eval(tau, 1)?;
        let s = self.yaw.eval(tau, 0)?;
        let sd = self.yaw.eval(tau, 1)?;
        let sdd = self.yaw.eval(tau, 2)?;
        let state = VirtualYawState::new(
            Vector2::new(s[0], s[1]),
            Vector2::new(sd[0], sd[1]),
            Vector2::new(sdd[0], sdd[1]),
        );
        let (psi, omega, _) = heading_rates(&state)?;
        Ok((
            QuadState {
                p: Vector3::new(p[0], p[1], p[2]),
                v: Vector3::new(v[0], v[1], v[2]),
                s: state.s,
                s_dot: state.s_dot,
            },
            psi.angle(),
            omega,
        ))
    }
}

fn bc3(value: Vector3<f64>, rate: Vector3<f64>) -> BoundaryState {
    BoundaryState::new(vec![
        DVector::from_column_slice(value.as_slice()),
        DVector::from_column_slice(rate.as_slice()),
    ])
    .expect("matching rows")
}

fn bc2(value: Vector2<f64>, rate: Vector2<f64>) -> BoundaryState {
    BoundaryState::new(vec![
        DVector::from_column_slice(value.as_slice()),
        DVector::from_column_slice(rate.as_slice()),
    ])
    .expect("matching rows")
}

/// Run the receding-horizon loop and aggregate metrics.
///
/// The quad follows each accepted plan exactly (perfect low-level tracking);
/// a failed replan holds the previous plan and is counted.
pub fn run_tracking(
    model: &TargetModel,
    config: &TrackingConfig,
) -> Result<(TrackingMetrics, TrackingLog), TrackError> {
    config.validate()?;
    let dt_replan = 1.0 / config.replan_hz;
    let log_per_tick = (config.log_hz / config.replan_hz).round() as usize;
    let ticks = (config.sim_duration * config.replan_hz).round() as usize;
    let n = config.n_keyframes;
    let seg_dt = config.horizon / n as f64;

    let (w0, _) = model.state(0.0);
    let p0 = config
        .initial_position
        .unwrap_or_else(|| w0 + Vector3::new(config.d_des, 0.0, 0.0));
    let face = Vector2::new(w0.x - p0.x, w0.y - p0.y);
    let psi0 = if face.norm() > 1e-6 {
        face / face.norm()
    } else {
        Vector2::new(-1.0, 0.0)
    };
    let mut quad = QuadState {
        p: p0,
        v: Vector3::zeros(),
        s: psi0,
        s_dot: Vector2::zeros(),
    };

    let mut history: VecDeque<(f64, Vector3<f64>)> = VecDeque::new();
    let mut plan: Option<ActivePlan> = None;
    let mut prev_u: Option<Vector2<f64>> = None;
    let mut log = TrackingLog::default();
    let mut solve_time_total = 0.0;

    for tick in 0..ticks {
        let t = tick as f64 / config.replan_hz;
        let (w_now, _) = model.state(t);
        history.push_back((t, w_now));
        while history
            .front()
            .is_some_and(|(ht, _)| *ht < t - 1.0 - 1e-9)
        {
            history.pop_front();
        }

        let pred = if history.len() >= 2 {
            predict_target(history.make_contiguous(), config.horizon + 1.0)?
        } else {
            PiecewisePoly::constant(
                DVector::from_column_slice(w_now.as_slice()),
                config.horizon + 1.0,
            )?
        };

        let (keyframes, u) = generate_tracking_keyframes(&pred, &quad.p, config, prev_u)?;
        prev_u = Some(u);

        let terminal = keyframes[n - 1];
        let pred_vel = pred.eval(config.horizon, 1)?;
        let problem = TraversalProblem {
            pos_start: bc3(quad.p, quad.v),
            pos_end: bc3(
                terminal.position,
                Vector3::new(pred_vel[0], pred_vel[1], pred_vel[2]),
            ),
            yaw_start: bc2(quad.s, quad.s_dot),
            yaw_end: crate::yawparam::boundary_virtual(&terminal.heading, 0.0, 1.0, 0.0)?,
            keyframes: keyframes[..n - 1].to_vec(),
            hard_keyframes: false,
            timed_reference: Some(pred.clone()),
            limits: config.limits,
            weights: config.weights,
            fov: config.fov,
            v_w_max: config.v_w_max,
            durations: vec![seg_dt; n],
            quadrature_n: config.quadrature_n,
        };

        // Warm start: previous solution shifted by one replan period.
        let x0 = plan.as_ref().map(|prev| {
            let mut x = DVector::zeros(5 * (n - 1));
            for j in 0..n - 1 {
                let knot_global = t + seg_dt * (j + 1) as f64;
                let tau = knot_global - prev.start_time;
                if tau <= prev.position.total_duration() + 1e-9 {
                    let tau = tau.min(prev.position.total_duration());
                    let pw = prev.position.eval(tau, 0).expect("within domain");
                    let sw = prev.yaw.eval(tau, 0).expect("within domain");
                    for d in 0..3 {
                        x[5 * j + d] = pw[d];
                    }
                    for d in 0..2 {
                        x[5 * j + 3 + d] = sw[d];
                    }
                } else {
                    let kf = &keyframes[j];
                    for d in 0..3 {
                        x[5 * j + d] = kf.position[d];
                    }
                    x[5 * j + 3] = kf.heading.vector().x;
                    x[5 * j + 4] = kf.heading.vector().y;
                }
            }
            x
        });

        let started = Instant::now();
        let solved = solve_traversal(&problem, x0);
        solve_time_total += started.elapsed().as_secs_f64();
        log.replan_count += 1;
        match solved {
            Ok(sol) if sol.converged => {
                plan = Some(ActivePlan {
                    position: sol.position_traj,
                    yaw: sol.virtual_yaw_traj,
                    start_time: t,
                });
            }
            Ok(sol) => {
                log.failure_count += 1;
                if plan.is_none() {
                    // Nothing to hold at the very first step; fly the best
                    // iterate rather than nothing.
                    plan = Some(ActivePlan {
                        position: sol.position_traj,
                        yaw: sol.virtual_yaw_traj,
                        start_time: t,
                    });
                }
            }
            Err(source) => {
                log.failure_count += 1;
                if plan.is_none() {
                    return Err(TrackError::PlannerFailed { t, source });
                }
            }
        }
        let active = plan.as_ref().expect("a plan is installed from tick 0");

        for j in 0..log_per_tick {
            let t_log = (tick * log_per_tick + j) as f64 / config.log_hz;
            let (state, yaw, omega) = active.sample(t_log)?;
            let (w_true, _) = model.state(t_log);
            let d = w_true - state.p;
            let psi3 = {
                let psi = normalize_heading(&state.s)?;
                Vector3::new(psi.vector().x, psi.vector().y, 0.0)
            };
            let distance = d.norm();
            let deviation = if distance > 1e-9 {
                (psi3.dot(&d) / distance).clamp(-1.0, 1.0).acos()
            } else {
                0.0
            };
            let raw = (config.fov.theta / 2.0).cos() * distance - psi3.dot(&d);
            log.rows.push(LogRow {
                t: t_log,
                p: state.p,
                yaw,
                omega,
                w: w_true,
                deviation,
                distance,
                in_fov: raw <= 0.0,
            });
        }

        let (next, _, _) = active.sample(t + dt_replan)?;
        quad = next;
    }

    log.mean_solve_time = solve_time_total / log.replan_count.max(1) as f64;
    let metrics = TrackingMetrics::from_log(&log, config);
    Ok((metrics, log))
}

/// Write the tracking log as CSV with the fixed header
/// `t,px,py,pz,yaw,omega,wx,wy,wz,deviation,distance,in_fov`.
pub fn write_log_csv<W: Write>(log: &TrackingLog, out: &mut W) -> io::Result<()> {
    writeln!(out, "t,px,py,pz,yaw,omega,wx,wy,wz,deviation,distance,in_fov")?;
    for r in &log.rows {
        writeln!(
            out,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.t,
            r.p.x,
            r.p.y,
            r.p.z,
            r.yaw,
            r.omega,
            r.w.x,
            r.w.y,
            r.w.z,
            r.deviation,
            r.distance,
            u8::from(r.in_fov)
        )?;
    }
    Ok(())
}

/// Write metrics as `key=value` lines (deterministic subset).
pub fn write_metrics<W: Write>(metrics: &TrackingMetrics, out: &mut W) -> io::Result<()> {
    for (k, v) in metrics.file_entries() {
        writeln!(out, "{k}={v}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn static_model(p: Vector3<f64>) -> TargetModel {
        TargetModel::new(TargetKind::Static { position: p }, DEFAULT_TARGET_SPEED_MAX).unwrap()
    }

    #[test]
    fn target_state_examples() {
        let m = static_model(Vector3::new(1.0, 2.0, 0.0));
        let (w, wd) = m.state(7.3);
        assert_eq!(w, Vector3::new(1.0, 2.0, 0.0));
        assert_eq!(wd, Vector3::zeros());

        // Circle of radius 2 at 0.5 m/s: period 8 pi.
        let m = TargetModel::new(
            TargetKind::Circle {
                center: Vector3::new(0.0, 0.0, 1.0),
                radius: 2.0,
                speed: 0.5,
            },
            0.5,
        )
        .unwrap();
        let (w0, v0) = m.state(0.0);
        let (w1, v1) = m.state(8.0 * PI);
        assert!((w0 - w1).norm() < 1e-9);
        assert!((v0 - v1).norm() < 1e-9);
        assert_relative_eq!(v0.norm(), 0.5, epsilon = 1e-12);

        let m = TargetModel::new(
            TargetKind::Line {
                start: Vector3::zeros(),
                direction: Vector3::new(1.0, 0.0, 0.0),
                speed: 0.5,
            },
            0.5,
        )
        .unwrap();
        let (w, _) = m.state(2.0);
        assert_relative_eq!(w.x, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn waypoint_path_stops_at_end() {
        let m = TargetModel::new(
            TargetKind::WaypointPath {
                waypoints: vec![
                    Vector3::zeros(),
                    Vector3::new(1.0, 0.0, 0.0),
                    Vector3::new(1.0, 1.0, 0.0),
                ],
                speed: 0.5,
            },
            0.5,
        )
        .unwrap();
        let (w, v) = m.state(1.0);
        assert!((w - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        assert_relative_eq!(v.x, 0.5, epsilon = 1e-12);
        let (w, v) = m.state(100.0);
        assert!((w - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
        assert_eq!(v, Vector3::zeros());
    }

    #[test]
    fn target_speed_bound_enforced() {
        let err = TargetModel::new(
            TargetKind::Line {
                start: Vector3::zeros(),
                direction: Vector3::new(1.0, 0.0, 0.0),
                speed: 0.8,
            },
            0.5,
        );
        assert!(matches!(err, Err(TrackError::InvalidConfig(_))));
    }

    #[test]
    fn prediction_examples() {
        // Stationary history.
        let hist: Vec<(f64, Vector3<f64>)> = (0..10)
            .map(|i| (i as f64 * 0.1, Vector3::new(1.0, -2.0, 0.5)))
            .collect();
        let pred = predict_target(&hist, 2.0).unwrap();
        for &tau in &[0.0, 1.0, 2.0] {
            let w = pred.eval(tau, 0).unwrap();
            assert!((Vector3::new(w[0], w[1], w[2]) - hist[0].1).norm() < 1e-9);
        }

        // Exactly linear history reproduces the motion.
        let vel = Vector3::new(0.5, 0.0, 0.0);
        let hist: Vec<(f64, Vector3<f64>)> = (0..11)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, Vector3::new(0.0, 1.0, 0.0) + vel * t)
            })
            .collect();
        let pred = predict_target(&hist, 2.0).unwrap();
        let t_last = 1.0;
        for &tau in &[0.0, 0.5, 2.0] {
            let truth = Vector3::new(0.0, 1.0, 0.0) + vel * (t_last + tau);
            let w = pred.eval(tau, 0).unwrap();
            assert!((Vector3::new(w[0], w[1], w[2]) - truth).norm() < 1e-9);
        }

        assert!(predict_target(&hist[..1], 2.0).is_err());
    }

    #[test]
    fn circular_prediction_error_grows_like_tangent_line() {
        // Geometric oracle: a constant-velocity extrapolation of circular
        // motion drifts off the circle roughly like the chord-to-arc error.
        let radius = 2.0;
        let speed = 0.5;
        let m = TargetModel::new(
            TargetKind::Circle {
                center: Vector3::zeros(),
                radius,
                speed,
            },
            0.5,
        )
        .unwrap();
        let hist: Vec<(f64, Vector3<f64>)> = (0..11)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, m.state(t).0)
            })
            .collect();
        let pred = predict_target(&hist, 3.0).unwrap();
        let t_last = 1.0;
        let window_arc = speed * 1.0 / radius;
        let mut prev_err = 0.0;
        for &tau in &[0.5, 1.0, 2.0, 3.0] {
            let w = pred.eval(tau, 0).unwrap();
            let truth = m.state(t_last + tau).0;
            let err = (Vector3::new(w[0], w[1], w[2]) - truth).norm();
            assert!(err > prev_err, "error must grow with the horizon");
            // Tangent-line-plus-fit-lag bound: quadratic in the swept arc.
            let phi = speed * tau / radius;
            assert!(
                err <= radius * (phi + window_arc) * (phi + window_arc),
                "err {err} at tau {tau}"
            );
            prev_err = err;
        }
    }

    #[test]
    fn keyframes_sit_on_the_standoff_circle() {
        let config = TrackingConfig::default();
        let target = Vector3::new(2.0, 0.0, 1.0);
        let pred =
            PiecewisePoly::constant(DVector::from_column_slice(target.as_slice()), 3.0).unwrap();

        // Quad already at standoff: keyframes coincide with it.
        let quad = Vector3::new(0.0, 0.0, 1.0);
        let (kfs, _) = generate_tracking_keyframes(&pred, &quad, &config, None).unwrap();
        assert_eq!(kfs.len(), config.n_keyframes);
        for kf in &kfs {
            assert!((kf.position - quad).norm() < 1e-9);
            assert!((kf.heading.vector() - Vector2::new(1.0, 0.0)).norm() < 1e-12);
        }

        // Quad further out: keyframes at exactly d_des from the target.
        let quad = Vector3::new(-1.0, 0.0, 1.0);
        let (kfs, _) = generate_tracking_keyframes(&pred, &quad, &config, None).unwrap();
        for kf in &kfs {
            assert_relative_eq!((kf.position - target).norm(), config.d_des, epsilon = 1e-9);
        }

        // Coincident quad falls back to +x.
        let (kfs, u) = generate_tracking_keyframes(&pred, &target, &config, None).unwrap();
        assert!((u - Vector2::new(1.0, 0.0)).norm() < 1e-12);
        assert!((kfs[0].position - (target + Vector3::new(2.0, 0.0, 0.0))).norm() < 1e-9);
    }

    #[test]
    fn keyframe_headings_point_at_moving_prediction() {
        let config = TrackingConfig::default();
        let mut seg = DMatrix::zeros(2, 3);
        seg[(0, 0)] = 2.0;
        seg[(1, 0)] = 0.4; // target drifting +x
        seg[(0, 2)] = 1.0;
        let pred = PiecewisePoly::new(vec![seg], vec![3.0]).unwrap();
        let quad = Vector3::new(-1.0, 1.0, 1.0);
        let (kfs, _) = generate_tracking_keyframes(&pred, &quad, &config, None).unwrap();
        for kf in &kfs {
            let t_k = kf.time.unwrap();
            let w = pred.eval(t_k, 0).unwrap();
            let to_target =
                Vector2::new(w[0] - kf.position.x, w[1] - kf.position.y).normalize();
            assert!((kf.heading.vector() - to_target).norm() < 1e-9);
        }
    }

    #[test]
    fn static_target_is_a_fixed_point() {
        let target = Vector3::new(2.0, 0.0, 1.0);
        let model = static_model(target);
        let config = TrackingConfig {
            sim_duration: 3.0,
            ..TrackingConfig::default()
        };
        let (metrics, log) = run_tracking(&model, &config).unwrap();
        assert_eq!(metrics.out_of_fov_pct, 0.0);
        assert!(metrics.deviation_mean <= 1e-6, "{}", metrics.deviation_mean);
        assert_relative_eq!(metrics.relative_distance_mean, 2.0, epsilon = 1e-6);
        assert_eq!(metrics.failure_count, 0);
        assert_eq!(log.rows.len(), 300);
    }

    #[test]
    fn deviation_and_fov_flag_are_consistent() {
        let model = TargetModel::new(
            TargetKind::Circle {
                center: Vector3::new(0.0, 0.0, 1.0),
                radius: 2.0,
                speed: 0.5,
            },
            0.5,
        )
        .unwrap();
        let config = TrackingConfig {
            sim_duration: 5.0,
            ..TrackingConfig::default()
        };
        let (_, log) = run_tracking(&model, &config).unwrap();
        let half = config.fov.theta / 2.0;
        for r in &log.rows {
            assert_eq!(r.in_fov, r.deviation <= half, "t={}", r.t);
        }
    }

    #[test]
    fn logs_are_deterministic() {
        let model = TargetModel::new(
            TargetKind::Circle {
                center: Vector3::new(0.0, 0.0, 1.0),
                radius: 2.0,
                speed: 0.5,
            },
            0.5,
        )
        .unwrap();
        let config = TrackingConfig {
            sim_duration: 1.0,
            ..TrackingConfig::default()
        };
        let run = || {
            let (_, log) = run_tracking(&model, &config).unwrap();
            let mut buf = Vec::new();
            write_log_csv(&log, &mut buf).unwrap();
            buf
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metrics_stable_under_log_rate_doubling() {
        let model = TargetModel::new(
            TargetKind::Circle {
                center: Vector3::new(0.0, 0.0, 1.0),
                radius: 2.0,
                speed: 0.5,
            },
            0.5,
        )
        .unwrap();
        let base = TrackingConfig {
            sim_duration: 5.0,
            ..TrackingConfig::default()
        };
        let double = TrackingConfig {
            log_hz: 200.0,
            ..base.clone()
        };
        let (m1, _) = run_tracking(&model, &base).unwrap();
        let (m2, _) = run_tracking(&model, &double).unwrap();
        assert!((m1.relative_distance_mean - m2.relative_distance_mean).abs()
            <= 0.02 * m1.relative_distance_mean.max(0.1));
        assert!((m1.deviation_mean - m2.deviation_mean).abs() <= 0.02_f64.max(0.02 * m1.deviation_mean));
        assert!(
            (m1.z_body_rate_mean - m2.z_body_rate_mean).abs()
                <= 0.02_f64.max(0.02 * m1.z_body_rate_mean)
        );
    }

    #[test]
    fn config_validation() {
        let mut c = TrackingConfig::default();
        c.d_tol = 3.0;
        assert!(c.validate().is_err());

        let mut c = TrackingConfig::default();
        c.horizon = 0.05;
        assert!(c.validate().is_err());

        let mut c = TrackingConfig::default();
        c.log_hz = 37.0;
        assert!(c.validate().is_err());
    }
}

//! Joint nonlinear optimization of position and virtual-yaw trajectories.
//!
//! Decision variables are the interior waypoints (position in R^3, virtual
//! yaw in R^2); each candidate is mapped through the closed-form
//! minimum-control spline, penalties are integrated by a midpoint rule, and
//! gradients flow back through the spline's affine dependence on the
//! waypoints.

use crate::lbfgs::{self, LbfgsParams};
use crate::penalties::{
    fov_relaxed_cost, image_velocity_cost, position_limits_cost, velocity_alignment_cost,
    virtual_bounds_cost, yaw_dynamics_cost, CostGrad, FlatState, FovModel, PenaltyError,
};
use crate::splines::{BoundaryState, MinControlSystem, PiecewisePoly, SplineError};
use crate::yawparam::{
    heading_to_virtual, min_radius, HeadingVector, YawError, YawLimits, EPS_SINGULAR,
};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};

#[derive(thiserror::Error, Debug)]
pub enum TraversalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("virtual waypoint {index} is singular (norm {norm:.3e}); re-initialize with a larger radius hint")]
    SingularWaypoint { index: usize, norm: f64 },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Yaw(#[from] YawError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
}

/// A position paired with a heading the trajectory should attain at its knot.
#[derive(Debug, Clone, Copy)]
pub struct Keyframe {
    pub position: Vector3<f64>,
    pub heading: HeadingVector,
    /// Virtual radius used when initializing the yaw decision variables.
    pub radius_hint: f64,
    /// Knot time; set for time-constrained problems, derived otherwise.
    pub time: Option<f64>,
}

impl Keyframe {
    pub fn new(position: Vector3<f64>, heading: HeadingVector) -> Self {
        Self {
            position,
            heading,
            radius_hint: 1.0,
            time: None,
        }
    }

    pub fn at_time(position: Vector3<f64>, heading: HeadingVector, time: f64) -> Self {
        Self {
            position,
            heading,
            radius_hint: 1.0,
            time: Some(time),
        }
    }
}

/// Per-cost scalar weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
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

impl Default for Weights {
    fn default() -> Self {
        Self {
            position_effort: 1.0,
            yaw_effort: 1.0,
            fov: 0.0,
            velocity_alignment: 0.0,
            image_velocity: 0.0,
            yaw_dynamics: 1.0,
            virtual_bounds: 100.0,
            position_limits: 0.0,
            waypoint_attraction: 0.0,
        }
    }
}

impl Weights {
    fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("position_effort", self.position_effort),
            ("yaw_effort", self.yaw_effort),
            ("fov", self.fov),
            ("velocity_alignment", self.velocity_alignment),
            ("image_velocity", self.image_velocity),
            ("yaw_dynamics", self.yaw_dynamics),
            ("virtual_bounds", self.virtual_bounds),
            ("position_limits", self.position_limits),
            ("waypoint_attraction", self.waypoint_attraction),
        ]
    }
}

/// Kinematic limits for the joint problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraversalLimits {
    pub yaw: YawLimits,
    /// Max speed (m/s).
    pub v_max: f64,
    /// Max acceleration (m/s^2).
    pub a_max: f64,
}

impl Default for TraversalLimits {
    fn default() -> Self {
        Self {
            yaw: YawLimits::default(),
            v_max: 1.0,
            a_max: 4.0,
        }
    }
}

/// Joint traversal problem over a fixed time allocation.
#[derive(Debug, Clone)]
pub struct TraversalProblem {
    /// Position value and velocity at the start (d=3).
    pub pos_start: BoundaryState,
    pub pos_end: BoundaryState,
    /// Virtual yaw value and rate at the start (d=2).
    pub yaw_start: BoundaryState,
    pub yaw_end: BoundaryState,
    /// Interior keyframes, one per interior knot.
    pub keyframes: Vec<Keyframe>,
    /// Pin interior positions to the keyframes instead of attracting them.
    pub hard_keyframes: bool,
    /// Target point trajectory for the perception costs (d=3), over at least
    /// the problem's total duration.
    pub timed_reference: Option<PiecewisePoly>,
    pub limits: TraversalLimits,
    pub weights: Weights,
    pub fov: FovModel,
    /// Bound for the image-velocity cost (m/s).
    pub v_w_max: f64,
    pub durations: Vec<f64>,
    /// Penalty quadrature samples per segment.
    pub quadrature_n: usize,
}

pub const DEFAULT_QUADRATURE_N: usize = 8;

/// Additive objective decomposition at a given decision vector.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostBreakdown {
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

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.position_effort
            + self.yaw_effort
            + self.fov
            + self.velocity_alignment
            + self.image_velocity
            + self.yaw_dynamics
            + self.virtual_bounds
            + self.position_limits
            + self.waypoint_attraction
    }

    pub fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("position_effort", self.position_effort),
            ("yaw_effort", self.yaw_effort),
            ("fov", self.fov),
            ("velocity_alignment", self.velocity_alignment),
            ("image_velocity", self.image_velocity),
            ("yaw_dynamics", self.yaw_dynamics),
            ("virtual_bounds", self.virtual_bounds),
            ("position_limits", self.position_limits),
            ("waypoint_attraction", self.waypoint_attraction),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TraversalSolution {
    pub position_traj: PiecewisePoly,
    pub virtual_yaw_traj: PiecewisePoly,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub breakdown: CostBreakdown,
    pub decision: DVector<f64>,
}

/// Per-segment duration from distance and heading-gap nominal rates, with a
/// 0.1 s floor.
pub fn allocate_times(
    points: &[(Vector3<f64>, HeadingVector)],
    v_nominal: f64,
    omega_nominal: f64,
) -> Result<Vec<f64>, TraversalError> {
    if points.len() < 2 {
        return Err(TraversalError::InvalidArgument(
            "time allocation needs at least two keyframes".into(),
        ));
    }
    if !(v_nominal > 0.0) || !(omega_nominal > 0.0) {
        return Err(TraversalError::InvalidArgument(
            "nominal rates must be strictly positive".into(),
        ));
    }
    const T_FLOOR: f64 = 0.1;
    Ok(points
        .windows(2)
        .map(|w| {
            let dist = (w[1].0 - w[0].0).norm();
            let gap = w[0].1.arc_to(&w[1].1);
            (dist / v_nominal).max(gap / omega_nominal).max(T_FLOOR)
        })
        .collect())
}

impl TraversalProblem {
    pub fn num_segments(&self) -> usize {
        self.durations.len()
    }

    /// Interior knot count, i.e. decision waypoints.
    pub fn num_interior(&self) -> usize {
        self.durations.len().saturating_sub(1)
    }

    pub fn total_duration(&self) -> f64 {
        self.durations.iter().sum()
    }

    pub fn validate(&self) -> Result<(), TraversalError> {
        if self.durations.is_empty() || self.durations.iter().any(|&d| !(d > 0.0)) {
            return Err(TraversalError::InvalidArgument(
                "durations must be non-empty and strictly positive".into(),
            ));
        }
        if self.keyframes.len() + 1 != self.durations.len() {
            return Err(TraversalError::InvalidArgument(format!(
                "expected {} interior keyframes for {} segments, got {}",
                self.durations.len() - 1,
                self.durations.len(),
                self.keyframes.len()
            )));
        }
        if self.keyframes.is_empty() && self.timed_reference.is_none() {
            return Err(TraversalError::InvalidArgument(
                "problem needs keyframes or a timed reference".into(),
            ));
        }
        for (name, bc, dim) in [
            ("pos_start", &self.pos_start, 3),
            ("pos_end", &self.pos_end, 3),
            ("yaw_start", &self.yaw_start, 2),
            ("yaw_end", &self.yaw_end, 2),
        ] {
            if bc.dim() != dim || bc.order() != 2 {
                return Err(TraversalError::InvalidArgument(format!(
                    "boundary state {name} must have dimension {dim} with value and rate rows"
                )));
            }
        }
        for (name, w) in self.weights.fields() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(TraversalError::InvalidArgument(format!(
                    "weight {name} must be non-negative, got {w}"
                )));
            }
        }
        self.limits.yaw.validate()?;
        if !(self.limits.v_max > 0.0) || !(self.limits.a_max > 0.0) {
            return Err(TraversalError::InvalidArgument(
                "position limits must be strictly positive".into(),
            ));
        }
        self.fov.validate()?;
        if self.quadrature_n == 0 {
            return Err(TraversalError::InvalidArgument(
                "quadrature_n must be at least 1".into(),
            ));
        }
        for (i, kf) in self.keyframes.iter().enumerate() {
            if kf.radius_hint < self.limits.yaw.r_min {
                return Err(TraversalError::InvalidArgument(format!(
                    "keyframe {i} radius hint {} below r_min {}",
                    kf.radius_hint, self.limits.yaw.r_min
                )));
            }
        }
        let needs_reference = self.weights.fov > 0.0 || self.weights.image_velocity > 0.0;
        match &self.timed_reference {
            None if needs_reference => {
                return Err(TraversalError::InvalidArgument(
                    "fov/image-velocity weights require a timed reference".into(),
                ));
            }
            Some(r) => {
                if r.dim() != 3 {
                    return Err(TraversalError::InvalidArgument(
                        "timed reference must be a 3-D trajectory".into(),
                    ));
                }
                if r.total_duration() < self.total_duration() - 1e-9 {
                    return Err(TraversalError::InvalidArgument(
                        "timed reference shorter than the problem horizon".into(),
                    ));
                }
            }
            None => {}
        }
        if let Some(t0) = self.keyframes.first().and_then(|k| k.time) {
            // When times are present they must match the allocation.
            let mut acc = 0.0;
            let mut t_prev = t0;
            for (i, kf) in self.keyframes.iter().enumerate() {
                let t = kf.time.ok_or_else(|| {
                    TraversalError::InvalidArgument(
                        "either all or no keyframes may carry times".into(),
                    )
                })?;
                if i > 0 && t < t_prev {
                    return Err(TraversalError::InvalidArgument(
                        "keyframe times must be non-decreasing".into(),
                    ));
                }
                t_prev = t;
                acc += self.durations[i];
                if (t - acc).abs() > 1e-9 {
                    return Err(TraversalError::InvalidArgument(format!(
                        "keyframe {i} time {t} does not match knot time {acc}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Initial decision vector from the keyframes: positions as-is, headings
/// scaled to their radius hints.
pub fn pack_decision(problem: &TraversalProblem) -> Result<DVector<f64>, TraversalError> {
    let mut x = DVector::zeros(5 * problem.num_interior());
    for (j, kf) in problem.keyframes.iter().enumerate() {
        let s = heading_to_virtual(&kf.heading, kf.radius_hint)?;
        x[5 * j] = kf.position.x;
        x[5 * j + 1] = kf.position.y;
        x[5 * j + 2] = kf.position.z;
        x[5 * j + 3] = s.x;
        x[5 * j + 4] = s.y;
    }
    Ok(x)
}

/// Split a decision vector into interior position and virtual waypoints.
pub fn unpack_decision(
    x: &DVector<f64>,
    num_interior: usize,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector2<f64>>), TraversalError> {
    if x.len() != 5 * num_interior {
        return Err(TraversalError::InvalidArgument(format!(
            "decision vector has length {}, expected {}",
            x.len(),
            5 * num_interior
        )));
    }
    let mut pos = Vec::with_capacity(num_interior);
    let mut virt = Vec::with_capacity(num_interior);
    for j in 0..num_interior {
        pos.push(Vector3::new(x[5 * j], x[5 * j + 1], x[5 * j + 2]));
        virt.push(Vector2::new(x[5 * j + 3], x[5 * j + 4]));
    }
    Ok((pos, virt))
}

struct EvalOutput {
    value: f64,
    grad: DVector<f64>,
    breakdown: CostBreakdown,
    position_traj: PiecewisePoly,
    virtual_yaw_traj: PiecewisePoly,
}

/// Shared factorization and scratch for repeated objective evaluations.
struct Workspace<'p> {
    problem: &'p TraversalProblem,
    sys: MinControlSystem,
    knot_times: Vec<f64>,
}

impl<'p> Workspace<'p> {
    fn new(problem: &'p TraversalProblem) -> Result<Self, TraversalError> {
        problem.validate()?;
        let sys = MinControlSystem::new(&problem.durations, 2)?;
        let mut knot_times = Vec::with_capacity(problem.durations.len() + 1);
        let mut acc = 0.0;
        knot_times.push(0.0);
        for &d in &problem.durations {
            acc += d;
            knot_times.push(acc);
        }
        Ok(Self {
            problem,
            sys,
            knot_times,
        })
    }

    fn eval(&self, x: &DVector<f64>) -> Result<EvalOutput, TraversalError> {
        let p = self.problem;
        let n_int = p.num_interior();
        let (mut pos_wps, virt_wps) = unpack_decision(x, n_int)?;
        if p.hard_keyframes {
            for (wp, kf) in pos_wps.iter_mut().zip(&p.keyframes) {
                *wp = kf.position;
            }
        }
        for (j, s) in virt_wps.iter().enumerate() {
            if s.norm() < EPS_SINGULAR {
                return Err(TraversalError::SingularWaypoint {
                    index: j,
                    norm: s.norm(),
                });
            }
        }

        let pos_cols: Vec<DVector<f64>> = pos_wps
            .iter()
            .map(|w| DVector::from_column_slice(w.as_slice()))
            .collect();
        let virt_cols: Vec<DVector<f64>> = virt_wps
            .iter()
            .map(|w| DVector::from_column_slice(w.as_slice()))
            .collect();
        let pos_pp = self.sys.solve(&p.pos_start, &p.pos_end, &pos_cols)?;
        let yaw_pp = self.sys.solve(&p.yaw_start, &p.yaw_end, &virt_cols)?;

        let mut breakdown = CostBreakdown::default();
        let n_coef = pos_pp.degree() + 1;
        let m = p.num_segments();
        let mut djdc_pos = vec![DMatrix::zeros(n_coef, 3); m];
        let mut djdc_yaw = vec![DMatrix::zeros(n_coef, 2); m];

        // Control effort terms.
        let w = &p.weights;
        if w.position_effort > 0.0 {
            breakdown.position_effort = w.position_effort * pos_pp.control_effort(2);
            for (acc, g) in djdc_pos.iter_mut().zip(pos_pp.control_effort_gradient(2)) {
                *acc += w.position_effort * g;
            }
        }
        if w.yaw_effort > 0.0 {
            breakdown.yaw_effort = w.yaw_effort * yaw_pp.control_effort(2);
            for (acc, g) in djdc_yaw.iter_mut().zip(yaw_pp.control_effort_gradient(2)) {
                *acc += w.yaw_effort * g;
            }
        }

        // Penalty quadrature: midpoint rule, quadrature_n samples/segment.
        let any_penalty = w.fov > 0.0
            || w.velocity_alignment > 0.0
            || w.image_velocity > 0.0
            || w.yaw_dynamics > 0.0
            || w.virtual_bounds > 0.0
            || w.position_limits > 0.0;
        if any_penalty {
            for seg in 0..m {
                let dt = p.durations[seg];
                let wq = dt / p.quadrature_n as f64;
                for q in 0..p.quadrature_n {
                    let tau = (q as f64 + 0.5) * wq;
                    let state = FlatState {
                        p: to_v3(&pos_pp.eval_segment(seg, tau, 0)),
                        v: to_v3(&pos_pp.eval_segment(seg, tau, 1)),
                        a: to_v3(&pos_pp.eval_segment(seg, tau, 2)),
                        s: to_v2(&yaw_pp.eval_segment(seg, tau, 0)),
                        s_dot: to_v2(&yaw_pp.eval_segment(seg, tau, 1)),
                        s_ddot: to_v2(&yaw_pp.eval_segment(seg, tau, 2)),
                    };
                    let mut combined = CostGrad::zero();
                    let t_global = self.knot_times[seg] + tau;
                    if w.fov > 0.0 || w.image_velocity > 0.0 {
                        let r = p.timed_reference.as_ref().expect("validated");
                        let t_ref = t_global.min(r.total_duration());
                        let wp = to_v3(&r.eval(t_ref, 0).map_err(YawError::from)?);
                        let wd = to_v3(&r.eval(t_ref, 1).map_err(YawError::from)?);
                        if w.fov > 0.0 {
                            let cg = fov_relaxed_cost(&state, &wp, &p.fov, w.fov)?;
                            breakdown.fov += wq * cg.value;
                            combined.accumulate(&cg, 1.0);
                        }
                        if w.image_velocity > 0.0 {
                            let cg = image_velocity_cost(
                                &state,
                                &wp,
                                &wd,
                                p.v_w_max,
                                &p.fov,
                                w.image_velocity,
                            )?;
                            breakdown.image_velocity += wq * cg.value;
                            combined.accumulate(&cg, 1.0);
                        }
                    }
                    if w.velocity_alignment > 0.0 {
                        let cg = velocity_alignment_cost(&state, &p.fov, w.velocity_alignment)?;
                        breakdown.velocity_alignment += wq * cg.value;
                        combined.accumulate(&cg, 1.0);
                    }
                    if w.yaw_dynamics > 0.0 {
                        let cg = yaw_dynamics_cost(&state, &p.limits.yaw, w.yaw_dynamics)?;
                        breakdown.yaw_dynamics += wq * cg.value;
                        combined.accumulate(&cg, 1.0);
                    }
                    if w.virtual_bounds > 0.0 {
                        let cg = virtual_bounds_cost(&state, &p.limits.yaw, w.virtual_bounds);
                        breakdown.virtual_bounds += wq * cg.value;
                        combined.accumulate(&cg, 1.0);
                    }
                    if w.position_limits > 0.0 {
                        let cg = position_limits_cost(
                            &state,
                            p.limits.v_max,
                            p.limits.a_max,
                            w.position_limits,
                        );
                        breakdown.position_limits += wq * cg.value;
                        combined.accumulate(&cg, 1.0);
                    }

                    // Distribute the flat-state gradient onto the monomial
                    // coefficients of the containing segment.
                    let mut pow0 = 1.0;
                    for r in 0..n_coef {
                        let rf = r as f64;
                        let b0 = pow0;
                        let b1 = if r >= 1 { rf * pow_or_one(tau, r - 1) } else { 0.0 };
                        let b2 = if r >= 2 {
                            rf * (rf - 1.0) * pow_or_one(tau, r - 2)
                        } else {
                            0.0
                        };
                        for d in 0..3 {
                            djdc_pos[seg][(r, d)] += wq
                                * (combined.d_p[d] * b0
                                    + combined.d_v[d] * b1
                                    + combined.d_a[d] * b2);
                        }
                        for d in 0..2 {
                            djdc_yaw[seg][(r, d)] += wq
                                * (combined.d_s[d] * b0
                                    + combined.d_s_dot[d] * b1
                                    + combined.d_s_ddot[d] * b2);
                        }
                        pow0 *= tau;
                    }
                }
            }
        }

        // Soft waypoint attraction acts on the decision variables directly.
        let mut grad = DVector::zeros(x.len());
        if !p.hard_keyframes && w.waypoint_attraction > 0.0 {
            for (j, kf) in p.keyframes.iter().enumerate() {
                let delta = pos_wps[j] - kf.position;
                breakdown.waypoint_attraction += w.waypoint_attraction * delta.norm_squared();
                for d in 0..3 {
                    grad[5 * j + d] += 2.0 * w.waypoint_attraction * delta[d];
                }
            }
        }

        // Chain the coefficient gradients back to the waypoints through the
        // affine dependence of the solve.
        let sens = self.sys.waypoint_sensitivity();
        for j in 0..n_int {
            let mut gp = [0.0; 3];
            let mut gs = [0.0; 2];
            for seg in 0..m {
                for r in 0..n_coef {
                    let w_jr = sens[(seg * n_coef + r, j)];
                    if w_jr == 0.0 {
                        continue;
                    }
                    for d in 0..3 {
                        gp[d] += w_jr * djdc_pos[seg][(r, d)];
                    }
                    for d in 0..2 {
                        gs[d] += w_jr * djdc_yaw[seg][(r, d)];
                    }
                }
            }
            if !p.hard_keyframes {
                for d in 0..3 {
                    grad[5 * j + d] += gp[d];
                }
            }
            for d in 0..2 {
                grad[5 * j + 3 + d] += gs[d];
            }
        }

        Ok(EvalOutput {
            value: breakdown.total(),
            grad,
            breakdown,
            position_traj: pos_pp,
            virtual_yaw_traj: yaw_pp,
        })
    }
}

/// Errors a line-search trial point may legitimately hit; the optimizer
/// treats these as an infinite objective rather than a failure.
fn is_transient_singularity(e: &TraversalError) -> bool {
    matches!(
        e,
        TraversalError::SingularWaypoint { .. }
            | TraversalError::Yaw(YawError::Singular { .. })
            | TraversalError::Penalty(PenaltyError::Yaw(YawError::Singular { .. }))
            | TraversalError::Penalty(PenaltyError::DegenerateAttitude(_))
            | TraversalError::Penalty(PenaltyError::CoincidentTarget)
    )
}

fn to_v3(v: &DVector<f64>) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn to_v2(v: &DVector<f64>) -> Vector2<f64> {
    Vector2::new(v[0], v[1])
}

fn pow_or_one(tau: f64, e: usize) -> f64 {
    if e == 0 {
        1.0
    } else {
        tau.powi(e as i32)
    }
}

/// Objective value and gradient of the joint problem at `x`.
pub fn objective_and_gradient(
    problem: &TraversalProblem,
    x: &DVector<f64>,
) -> Result<(f64, DVector<f64>), TraversalError> {
    let ws = Workspace::new(problem)?;
    let out = ws.eval(x)?;
    Ok((out.value, out.grad))
}

/// Cost decomposition at `x` (same terms the optimizer minimizes).
pub fn cost_breakdown(
    problem: &TraversalProblem,
    x: &DVector<f64>,
) -> Result<CostBreakdown, TraversalError> {
    Ok(Workspace::new(problem)?.eval(x)?.breakdown)
}

/// Maximum mismatch between the analytic gradient and central differences,
/// relative above unit magnitude and absolute below it.
pub fn finite_diff_check(
    problem: &TraversalProblem,
    x: &DVector<f64>,
    h: f64,
) -> Result<f64, TraversalError> {
    if !(h > 0.0) {
        return Err(TraversalError::InvalidArgument(
            "finite-difference step must be positive".into(),
        ));
    }
    let ws = Workspace::new(problem)?;
    let grad = ws.eval(x)?.grad;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        let fd = (ws.eval(&xp)?.value - ws.eval(&xm)?.value) / (2.0 * h);
        let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Minimize the joint objective with a limited-memory quasi-Newton method
/// from `x0` (keyframe initialization when absent).
pub fn solve_traversal(
    problem: &TraversalProblem,
    x0: Option<DVector<f64>>,
) -> Result<TraversalSolution, TraversalError> {
    let ws = Workspace::new(problem)?;
    let x0 = match x0 {
        Some(x) => {
            if x.len() != 5 * problem.num_interior() {
                return Err(TraversalError::InvalidArgument(format!(
                    "warm start has length {}, expected {}",
                    x.len(),
                    5 * problem.num_interior()
                )));
            }
            x
        }
        None => pack_decision(problem)?,
    };
    // Surface a singular initialization as an error rather than a failed run.
    ws.eval(&x0)?;

    // Line-search trial points may wander through the virtual origin or a
    // degenerate attitude; those evaluate as an infinite barrier so the
    // search backs off instead of aborting the run.
    let n_vars = x0.len();
    let params = LbfgsParams::default();
    let result = lbfgs::minimize(
        |x| match ws.eval(x) {
            Ok(o) => Ok((o.value, o.grad)),
            Err(e) if is_transient_singularity(&e) => {
                Ok((f64::INFINITY, DVector::zeros(n_vars)))
            }
            Err(e) => Err(e),
        },
        x0,
        &params,
    )?;

    let out = ws.eval(&result.x)?;
    let mut converged = result.converged;
    if converged && problem.weights.virtual_bounds > 0.0 {
        let (r, _) = min_radius(&out.virtual_yaw_traj);
        if r < problem.limits.yaw.r_min - 1e-6 {
            converged = false;
        }
    }
    Ok(TraversalSolution {
        position_traj: out.position_traj,
        virtual_yaw_traj: out.virtual_yaw_traj,
        final_cost: out.value,
        iterations: result.iterations,
        converged,
        breakdown: out.breakdown,
        decision: result.x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::solve_min_control;
    use crate::yawparam::boundary_virtual;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rest3(p: Vector3<f64>) -> BoundaryState {
        BoundaryState::at_rest(DVector::from_column_slice(p.as_slice()), 2)
    }

    fn yaw_rest(angle: f64) -> BoundaryState {
        boundary_virtual(&HeadingVector::from_angle(angle), 0.0, 1.0, 0.0).unwrap()
    }

    fn base_problem(keyframes: Vec<Keyframe>, durations: Vec<f64>) -> TraversalProblem {
        TraversalProblem {
            pos_start: rest3(Vector3::zeros()),
            pos_end: rest3(Vector3::new(4.0, 0.0, 1.0)),
            yaw_start: yaw_rest(0.0),
            yaw_end: yaw_rest(1.0),
            keyframes,
            hard_keyframes: false,
            timed_reference: None,
            limits: TraversalLimits::default(),
            weights: Weights {
                virtual_bounds: 0.0,
                yaw_dynamics: 0.0,
                ..Weights::default()
            },
            fov: FovModel::default(),
            v_w_max: 1.0,
            durations,
            quadrature_n: DEFAULT_QUADRATURE_N,
        }
    }

    fn random_full_problem(rng: &mut ChaCha8Rng, max_interior: usize) -> TraversalProblem {
        let n_int = rng.gen_range(1..=max_interior);
        // Heading random walk with bounded steps: keeps the initializing
        // virtual spline's chords away from the origin, where stacked hinge
        // penalties grow too steep for the finite-difference oracle.
        let mut angle = rng.gen_range(-PI..PI);
        let mut points = vec![(Vector3::zeros(), HeadingVector::from_angle(angle))];
        for _ in 0..=n_int {
            let prev = points.last().unwrap().0;
            angle += rng.gen_range(-1.2..1.2);
            points.push((
                prev + Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-0.5..0.5),
                ),
                HeadingVector::from_angle(angle),
            ));
        }
        let durations = allocate_times(&points, 2.0, 1.0).unwrap();
        let total: f64 = durations.iter().sum();
        let keyframes: Vec<Keyframe> = points[1..points.len() - 1]
            .iter()
            .map(|(p, h)| Keyframe::new(*p, *h))
            .collect();

        // A straight-line target reference drifting near the path; keeping
        // it close bounds the image-velocity hinge depth so the central
        // finite-difference oracle stays resolvable.
        let mid = points[points.len() / 2].0;
        let start = mid
            + Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-0.5..0.5),
            );
        let vel = Vector3::new(
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            0.0,
        );
        let mut seg = DMatrix::zeros(2, 3);
        for d in 0..3 {
            seg[(0, d)] = start[d];
            seg[(1, d)] = vel[d];
        }
        let reference = PiecewisePoly::new(vec![seg], vec![total + 1.0]).unwrap();

        TraversalProblem {
            pos_start: rest3(points[0].0),
            pos_end: rest3(points[points.len() - 1].0),
            yaw_start: yaw_rest(points[0].1.angle()),
            yaw_end: yaw_rest(points[points.len() - 1].1.angle()),
            keyframes,
            hard_keyframes: false,
            timed_reference: Some(reference),
            limits: TraversalLimits {
                yaw: YawLimits {
                    v_psi_max: rng.gen_range(1.0..2.0),
                    a_psi_max: rng.gen_range(2.0..4.0),
                    v_s_max: rng.gen_range(1.0..3.0),
                    a_s_max: rng.gen_range(3.0..8.0),
                    r_min: 0.5,
                },
                v_max: rng.gen_range(0.5..1.5),
                a_max: rng.gen_range(1.0..3.0),
            },
            weights: Weights {
                position_effort: 1.0,
                yaw_effort: 1.0,
                fov: rng.gen_range(0.5..3.0),
                velocity_alignment: rng.gen_range(0.1..1.0),
                image_velocity: rng.gen_range(0.1..1.0),
                yaw_dynamics: rng.gen_range(0.5..2.0),
                virtual_bounds: rng.gen_range(10.0..100.0),
                position_limits: rng.gen_range(1.0..10.0),
                waypoint_attraction: rng.gen_range(1.0..20.0),
            },
            fov: FovModel::default(),
            v_w_max: rng.gen_range(0.8..2.0),
            durations,
            quadrature_n: DEFAULT_QUADRATURE_N,
        }
    }

    #[test]
    fn allocate_times_examples() {
        let h = HeadingVector::from_angle(0.0);
        let t = allocate_times(
            &[(Vector3::zeros(), h), (Vector3::new(2.0, 0.0, 0.0), h)],
            1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(t, vec![2.0]);

        let t = allocate_times(
            &[
                (Vector3::zeros(), HeadingVector::from_angle(0.0)),
                (Vector3::zeros(), HeadingVector::from_angle(PI)),
            ],
            1.0,
            1.0,
        )
        .unwrap();
        assert_relative_eq!(t[0], PI, epsilon = 1e-12);

        let t = allocate_times(&[(Vector3::zeros(), h), (Vector3::zeros(), h)], 1.0, 1.0)
            .unwrap();
        assert_eq!(t, vec![0.1]);
    }

    #[test]
    fn pack_unpack_round_trip() {
        // No interior keyframes: empty decision vector.
        let p = base_problem(vec![], vec![1.0]);
        assert_eq!(pack_decision(&p).unwrap().len(), 0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DVector::from_fn(20, |_, _| rng.gen_range(-2.0..2.0));
        let (pos, virt) = unpack_decision(&x, 4).unwrap();
        let mut repacked = DVector::zeros(20);
        for j in 0..4 {
            for d in 0..3 {
                repacked[5 * j + d] = pos[j][d];
            }
            for d in 0..2 {
                repacked[5 * j + 3 + d] = virt[j][d];
            }
        }
        assert_eq!(x, repacked);

        assert!(unpack_decision(&x, 3).is_err());

        // Initialization: positions as keyframes, virtual = radius * heading.
        let kf = Keyframe {
            position: Vector3::new(1.0, 2.0, 3.0),
            heading: HeadingVector::from_angle(PI / 2.0),
            radius_hint: 2.0,
            time: None,
        };
        let p = base_problem(vec![kf], vec![1.0, 1.0]);
        let x = pack_decision(&p).unwrap();
        assert_eq!(x.as_slice()[..3], [1.0, 2.0, 3.0]);
        assert_relative_eq!(x[3], 0.0, epsilon = 1e-12);
        assert_relative_eq!(x[4], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_unconstrained_effort_minimum() {
        // With no penalties, the optimum over free interior waypoints is the
        // boundary-only minimum-control curve sampled at the knots.
        let p = base_problem(
            vec![
                Keyframe::new(Vector3::new(1.0, 1.0, 0.3), HeadingVector::from_angle(0.3)),
                Keyframe::new(Vector3::new(3.0, -1.0, 0.7), HeadingVector::from_angle(0.9)),
            ],
            vec![1.0, 1.2, 0.8],
        );
        let total: f64 = p.durations.iter().sum();
        let pos_opt =
            solve_min_control(&p.pos_start, &p.pos_end, &[], &[total], 2).unwrap();
        let yaw_opt = solve_min_control(&p.yaw_start, &p.yaw_end, &[], &[total], 2).unwrap();
        let mut x = DVector::zeros(10);
        let mut acc = 0.0;
        for j in 0..2 {
            acc += p.durations[j];
            let pw = pos_opt.eval(acc, 0).unwrap();
            let sw = yaw_opt.eval(acc, 0).unwrap();
            for d in 0..3 {
                x[5 * j + d] = pw[d];
            }
            for d in 0..2 {
                x[5 * j + 3 + d] = sw[d];
            }
        }
        let (_, g) = objective_and_gradient(&p, &x).unwrap();
        assert!(g.norm() <= 1e-8, "gradient norm {}", g.norm());
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..8 {
            let p = random_full_problem(&mut rng, 4);
            let mut x = pack_decision(&p).unwrap();
            for v in x.iter_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
            let err = finite_diff_check(&p, &x, 1e-6).unwrap();
            assert!(err <= 1e-4, "trial {trial}: max component error {err}");
        }
    }

    #[test]
    fn fd_truncation_grows_with_large_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_full_problem(&mut rng, 3);
        let x = pack_decision(&p).unwrap();
        let fine = finite_diff_check(&p, &x, 1e-6).unwrap();
        let coarse = finite_diff_check(&p, &x, 1e-1).unwrap();
        assert!(fine <= 1e-4);
        assert!(coarse > fine, "coarse {coarse} vs fine {fine}");
    }

    #[test]
    fn quadratic_only_problem_has_exact_gradients() {
        let p = base_problem(
            vec![Keyframe::new(
                Vector3::new(2.0, 0.5, 0.5),
                HeadingVector::from_angle(0.5),
            )],
            vec![1.0, 1.0],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut x = pack_decision(&p).unwrap();
        for v in x.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
        let err = finite_diff_check(&p, &x, 1e-5).unwrap();
        assert!(err <= 1e-9, "error {err}");
    }

    #[test]
    fn coefficients_are_affine_in_decision() {
        let p = base_problem(
            vec![
                Keyframe::new(Vector3::new(1.0, 0.0, 0.0), HeadingVector::from_angle(0.0)),
                Keyframe::new(Vector3::new(2.0, 1.0, 0.5), HeadingVector::from_angle(0.7)),
            ],
            vec![1.0, 1.0, 1.0],
        );
        let ws = Workspace::new(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let a = DVector::from_fn(10, |_, _| rng.gen_range(0.5..2.0));
            let b = DVector::from_fn(10, |_, _| rng.gen_range(0.5..2.0));
            let lambda = rng.gen_range(0.0..1.0);
            let mix = lambda * &a + (1.0 - lambda) * &b;
            let (pa, pb, pm) = (
                ws.eval(&a).unwrap().position_traj,
                ws.eval(&b).unwrap().position_traj,
                ws.eval(&mix).unwrap().position_traj,
            );
            for seg in 0..3 {
                let expect = lambda * pa.segment(seg) + (1.0 - lambda) * pb.segment(seg);
                assert!((pm.segment(seg) - expect).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn doubling_a_weight_doubles_its_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = random_full_problem(&mut rng, 3);
        let x = pack_decision(&p).unwrap();
        let base = cost_breakdown(&p, &x).unwrap();
        let mut doubled = p.clone();
        doubled.weights.fov *= 2.0;
        let after = cost_breakdown(&doubled, &x).unwrap();
        assert_relative_eq!(after.fov, 2.0 * base.fov, max_relative = 1e-12);
        assert_relative_eq!(
            after.yaw_dynamics,
            base.yaw_dynamics,
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_penalty_hard_problem_returns_closed_form() {
        // Stationary yaw, hard keyframes, no penalties: the nonlinear layer
        // must reproduce the convex solutions exactly.
        let keyframes = vec![
            Keyframe::new(Vector3::new(1.0, 1.0, 0.2), HeadingVector::from_angle(0.4)),
            Keyframe::new(Vector3::new(2.5, -0.5, 0.8), HeadingVector::from_angle(0.4)),
        ];
        let mut p = base_problem(keyframes.clone(), vec![1.0, 1.0, 1.5]);
        p.hard_keyframes = true;
        p.yaw_start = yaw_rest(0.4);
        p.yaw_end = yaw_rest(0.4);

        let sol = solve_traversal(&p, None).unwrap();
        assert!(sol.converged);

        let pos_cols: Vec<DVector<f64>> = keyframes
            .iter()
            .map(|k| DVector::from_column_slice(k.position.as_slice()))
            .collect();
        let expect_pos =
            solve_min_control(&p.pos_start, &p.pos_end, &pos_cols, &p.durations, 2).unwrap();
        for seg in 0..3 {
            assert!(
                (sol.position_traj.segment(seg) - expect_pos.segment(seg)).amax() < 1e-9
            );
        }
        // Constant-heading yaw: the optimum is the constant curve.
        let s_cols: Vec<DVector<f64>> = (0..2)
            .map(|_| {
                DVector::from_column_slice(
                    heading_to_virtual(&HeadingVector::from_angle(0.4), 1.0)
                        .unwrap()
                        .as_slice(),
                )
            })
            .collect();
        let expect_yaw =
            solve_min_control(&p.yaw_start, &p.yaw_end, &s_cols, &p.durations, 2).unwrap();
        for seg in 0..3 {
            assert!(
                (sol.virtual_yaw_traj.segment(seg) - expect_yaw.segment(seg)).amax() < 1e-9
            );
        }
        assert_relative_eq!(
            sol.final_cost,
            sol.position_traj.control_effort(2) + sol.virtual_yaw_traj.control_effort(2),
            max_relative = 1e-9
        );
        assert_eq!(sol.breakdown.fov, 0.0);
    }

    #[test]
    fn fov_weight_turns_heading_toward_static_target() {
        // The quad starts looking +x with the target behind it; over a long
        // horizon the FOV weight must put the target in the cone for almost
        // every sample, the turn-in transient aside.
        let target = Vector3::new(-3.0, 0.5, 0.5);
        // Short early segments give the spline knots to turn in quickly;
        // the long tail dominates the sample census.
        let durations = vec![0.5, 0.5, 1.0, 2.0, 13.0, 13.0];
        let segments = durations.len();
        let total: f64 = durations.iter().sum();
        let mut seg = DMatrix::zeros(1, 3);
        for d in 0..3 {
            seg[(0, d)] = target[d];
        }
        let reference = PiecewisePoly::new(vec![seg], vec![total + 1.0]).unwrap();

        let look_at = |from: Vector3<f64>| {
            let d = target - from;
            HeadingVector::from_angle(d.y.atan2(d.x))
        };
        let path_at = |k: usize| Vector3::new(2.0 * k as f64 / segments as f64, 0.0, 0.5);
        let keyframes: Vec<Keyframe> = (1..segments)
            .map(|k| Keyframe::new(path_at(k), look_at(path_at(k))))
            .collect();
        let p = TraversalProblem {
            pos_start: rest3(path_at(0)),
            pos_end: rest3(path_at(segments)),
            // Initial heading looks away from the target.
            yaw_start: yaw_rest(0.0),
            yaw_end: boundary_virtual(&look_at(path_at(segments)), 0.0, 1.0, 0.0).unwrap(),
            keyframes,
            hard_keyframes: false,
            timed_reference: Some(reference),
            limits: TraversalLimits::default(),
            weights: Weights {
                fov: 100.0,
                waypoint_attraction: 50.0,
                virtual_bounds: 100.0,
                yaw_dynamics: 1.0,
                ..Weights::default()
            },
            fov: FovModel::default(),
            v_w_max: 1.0,
            durations,
            quadrature_n: DEFAULT_QUADRATURE_N,
        };
        let sol = solve_traversal(&p, None).unwrap();

        let mut inside = 0;
        let n = 600;
        for i in 0..=n {
            let t = (total * i as f64 / n as f64).min(total);
            let pos = sol.position_traj.eval(t, 0).unwrap();
            let s = sol.virtual_yaw_traj.eval(t, 0).unwrap();
            let psi = Vector2::new(s[0], s[1]).normalize();
            let d = target - Vector3::new(pos[0], pos[1], pos[2]);
            let raw = (p.fov.theta / 2.0).cos() * d.norm()
                - Vector3::new(psi.x, psi.y, 0.0).dot(&d);
            if raw <= 0.0 {
                inside += 1;
            }
        }
        assert!(
            inside as f64 >= 0.95 * (n + 1) as f64,
            "only {inside}/{} samples inside the cone",
            n + 1
        );
    }

    #[test]
    fn descent_is_monotone_and_radius_guarded() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..5 {
            let p = random_full_problem(&mut rng, 3);
            let sol = solve_traversal(&p, None).unwrap();
            if sol.converged {
                let (r, _) = min_radius(&sol.virtual_yaw_traj);
                assert!(r >= p.limits.yaw.r_min - 1e-6, "radius {r}");
            }
            assert!(sol.final_cost.is_finite());
        }
    }

    #[test]
    fn tight_rate_limit_leaves_residual_penalty_in_breakdown() {
        // Penalty-method semantics: an infeasible bound shows up as a
        // positive dynamics cost, not a hard failure.
        let mut p = base_problem(
            vec![Keyframe::new(
                Vector3::new(2.0, 0.5, 0.5),
                HeadingVector::from_angle(1.2),
            )],
            vec![1.0, 1.0],
        );
        p.yaw_end = yaw_rest(2.4);
        p.weights.yaw_dynamics = 1.0;
        p.limits.yaw.v_psi_max = 0.1; // 2.4 rad over 2 s cannot stay under this
        let sol = solve_traversal(&p, None).unwrap();
        assert!(sol.breakdown.yaw_dynamics > 0.0);
        assert!(sol.final_cost.is_finite());
    }

    #[test]
    fn singular_initialization_is_an_error() {
        let p = base_problem(
            vec![Keyframe::new(
                Vector3::new(1.0, 0.0, 0.0),
                HeadingVector::from_angle(0.0),
            )],
            vec![1.0, 1.0],
        );
        let mut x = pack_decision(&p).unwrap();
        x[3] = 0.0;
        x[4] = 0.0;
        assert!(matches!(
            solve_traversal(&p, Some(x)),
            Err(TraversalError::SingularWaypoint { .. })
        ));
    }

    #[test]
    fn validation_rejects_bad_problems() {
        let mut p = base_problem(vec![], vec![1.0]);
        p.timed_reference = None;
        assert!(matches!(
            p.validate(),
            Err(TraversalError::InvalidArgument(_))
        ));

        let mut p = base_problem(
            vec![Keyframe::new(Vector3::zeros(), HeadingVector::from_angle(0.0))],
            vec![1.0, 1.0],
        );
        p.weights.fov = -1.0;
        assert!(p.validate().is_err());

        let mut p = base_problem(
            vec![Keyframe::new(Vector3::zeros(), HeadingVector::from_angle(0.0))],
            vec![1.0, 1.0],
        );
        p.weights.fov = 5.0; // no reference present
        assert!(p.validate().is_err());
    }
}

//! Yaw-only trajectory generators over a fixed time allocation: the
//! virtual-variable planner and two branch-angle baselines, unified behind a
//! common sampling interface so they can be measured against each other.

use crate::splines::{solve_min_control, BoundaryState, PiecewisePoly};
use crate::yawparam::{
    accumulated_yaw_distance, boundary_virtual, heading_rates, heading_to_virtual,
    insert_keyframes_until_regular, HeadingVector, VirtualYawState, YawError, YawLimits,
};
use nalgebra::{DVector, Vector2};
use std::f64::consts::PI;

/// Boundary condition for yaw planning: heading, angular rate, and the
/// virtual radius used when converting to virtual variables.
#[derive(Debug, Clone, Copy)]
pub struct YawBoundary {
    pub heading: HeadingVector,
    pub rate: f64,
    pub radius: f64,
}

impl YawBoundary {
    pub fn resting(heading: HeadingVector) -> Self {
        Self {
            heading,
            rate: 0.0,
            radius: 1.0,
        }
    }
}

/// A yaw planning request over interior heading keyframes.
#[derive(Debug, Clone)]
pub struct YawPlanRequest {
    /// Interior headings, in traversal order.
    pub keyframe_headings: Vec<HeadingVector>,
    /// Virtual radii for the interior headings (same length).
    pub radii: Vec<f64>,
    /// Segment durations; one more than the interior keyframe count.
    pub durations: Vec<f64>,
    pub start: YawBoundary,
    pub end: YawBoundary,
    pub limits: YawLimits,
    /// Discretization points per segment for bound verification.
    pub n_check: usize,
}

pub const DEFAULT_N_CHECK: usize = 10;

/// Planner outcome; violating trajectories are still returned for
/// diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanStatus {
    Success,
    BoundViolation,
    Singularity,
}

/// Yaw trajectory in either representation.
#[derive(Debug, Clone)]
pub enum YawRepr {
    /// Planar virtual-variable curve; the heading is its normalization.
    Virtual(PiecewisePoly),
    /// Scalar yaw-angle curve.
    Angle(PiecewisePoly),
}

#[derive(Debug, Clone)]
pub struct YawTrajectory {
    pub repr: YawRepr,
    pub limits: YawLimits,
    pub status: PlanStatus,
}

impl YawTrajectory {
    pub fn poly(&self) -> &PiecewisePoly {
        match &self.repr {
            YawRepr::Virtual(p) | YawRepr::Angle(p) => p,
        }
    }

    pub fn total_duration(&self) -> f64 {
        self.poly().total_duration()
    }

    /// Yaw angle in `(-pi, pi]`, angular rate, and angular acceleration at
    /// time `t`.
    pub fn sample(&self, t: f64) -> Result<(f64, f64, f64), YawError> {
        match &self.repr {
            YawRepr::Virtual(p) => {
                let (seg, tau) = p.locate(t)?;
                let (psi, omega, alpha) = heading_rates(&virtual_state(p, seg, tau))?;
                Ok((psi.angle(), omega, alpha))
            }
            YawRepr::Angle(p) => {
                let (seg, tau) = p.locate(t)?;
                Ok((
                    wrap_angle(p.eval_segment(seg, tau, 0)[0]),
                    p.eval_segment(seg, tau, 1)[0],
                    p.eval_segment(seg, tau, 2)[0],
                ))
            }
        }
    }

    /// Total variation of the heading angle over the trajectory.
    pub fn accumulated_distance(&self) -> Result<f64, YawError> {
        match &self.repr {
            YawRepr::Virtual(p) => accumulated_yaw_distance(p),
            YawRepr::Angle(p) => {
                simpson_over_segments(p, 100, |seg, tau| Ok(p.eval_segment(seg, tau, 1)[0].abs()))
            }
        }
    }

    /// Quadrature of the squared angular acceleration of the realized
    /// heading, comparable across representations.
    pub fn angular_accel_cost(&self, subintervals: usize) -> Result<f64, YawError> {
        match &self.repr {
            YawRepr::Virtual(p) => simpson_over_segments(p, subintervals, |seg, tau| {
                let (_, _, alpha) = heading_rates(&virtual_state(p, seg, tau))?;
                Ok(alpha * alpha)
            }),
            YawRepr::Angle(p) => simpson_over_segments(p, subintervals, |seg, tau| {
                let a = p.eval_segment(seg, tau, 2)[0];
                Ok(a * a)
            }),
        }
    }

    /// Control effort of the stored representation (virtual or angle space).
    pub fn native_control_effort(&self) -> f64 {
        self.poly().control_effort(2)
    }
}

fn virtual_state(p: &PiecewisePoly, seg: usize, tau: f64) -> VirtualYawState {
    let s = p.eval_segment(seg, tau, 0);
    let sd = p.eval_segment(seg, tau, 1);
    let sdd = p.eval_segment(seg, tau, 2);
    VirtualYawState::new(
        Vector2::new(s[0], s[1]),
        Vector2::new(sd[0], sd[1]),
        Vector2::new(sdd[0], sdd[1]),
    )
}

/// Map an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

fn simpson_over_segments<F>(p: &PiecewisePoly, subintervals: usize, f: F) -> Result<f64, YawError>
where
    F: Fn(usize, f64) -> Result<f64, YawError>,
{
    let n = if subintervals % 2 == 0 {
        subintervals
    } else {
        subintervals + 1
    };
    let mut total = 0.0;
    for seg in 0..p.num_segments() {
        let dt = p.durations()[seg];
        let h = dt / n as f64;
        let mut acc = f(seg, 0.0)? + f(seg, dt)?;
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(seg, k as f64 * h)?;
        }
        total += acc * h / 3.0;
    }
    Ok(total)
}

fn validate_request(req: &YawPlanRequest) -> Result<(), YawError> {
    req.limits.validate()?;
    if req.keyframe_headings.len() != req.radii.len() {
        return Err(YawError::InvalidArgument(format!(
            "heading/radius count mismatch: {} vs {}",
            req.keyframe_headings.len(),
            req.radii.len()
        )));
    }
    if req.durations.len() != req.keyframe_headings.len() + 1 {
        return Err(YawError::InvalidArgument(format!(
            "expected {} durations, got {}",
            req.keyframe_headings.len() + 1,
            req.durations.len()
        )));
    }
    if req.radii.iter().any(|&r| r < req.limits.r_min) {
        return Err(YawError::InvalidArgument(
            "all keyframe radii must be at least r_min".into(),
        ));
    }
    if req.n_check < 2 {
        return Err(YawError::InvalidArgument(
            "n_check must be at least 2".into(),
        ));
    }
    Ok(())
}

/// Plan yaw through the virtual-variable parameterization.
///
/// Solves the equality-constrained minimum-control spline over the virtual
/// variables, inserts midpoint keyframes while the radius floor is violated,
/// then verifies the virtual and real yaw bounds on a per-segment grid.
pub fn plan_virtual_yaw(req: &YawPlanRequest) -> Result<YawTrajectory, YawError> {
    validate_request(req)?;
    let bc0 = boundary_virtual(&req.start.heading, req.start.rate, req.start.radius, 0.0)?;
    let bc_end = boundary_virtual(&req.end.heading, req.end.rate, req.end.radius, 0.0)?;

    let traj = match insert_keyframes_until_regular(
        &req.keyframe_headings,
        &req.radii,
        &req.durations,
        &bc0,
        &bc_end,
        &req.limits,
    ) {
        Ok(reg) => reg.traj,
        Err(YawError::InsertionBudget { .. }) => {
            // Unrecoverable near-origin passage; return the plain solve so the
            // caller can inspect it.
            let waypoints: Vec<DVector<f64>> = req
                .keyframe_headings
                .iter()
                .zip(&req.radii)
                .map(|(h, &r)| {
                    DVector::from_column_slice(heading_to_virtual(h, r).unwrap().as_slice())
                })
                .collect();
            let traj = solve_min_control(&bc0, &bc_end, &waypoints, &req.durations, 2)?;
            return Ok(YawTrajectory {
                repr: YawRepr::Virtual(traj),
                limits: req.limits,
                status: PlanStatus::Singularity,
            });
        }
        Err(e) => return Err(e),
    };

    let mut status = PlanStatus::Success;
    'outer: for seg in 0..traj.num_segments() {
        let dt = traj.durations()[seg];
        for j in 0..req.n_check {
            let tau = dt * j as f64 / (req.n_check - 1) as f64;
            let st = virtual_state(&traj, seg, tau);
            if st.radius() < req.limits.r_min - 1e-9 {
                status = PlanStatus::BoundViolation;
                break 'outer;
            }
            let (_, omega, alpha) = match heading_rates(&st) {
                Ok(v) => v,
                Err(_) => {
                    status = PlanStatus::Singularity;
                    break 'outer;
                }
            };
            if st.s_dot.norm() > req.limits.v_s_max
                || st.s_ddot.norm() > req.limits.a_s_max
                || omega.abs() > req.limits.v_psi_max
                || alpha.abs() > req.limits.a_psi_max
            {
                status = PlanStatus::BoundViolation;
                break 'outer;
            }
        }
    }

    Ok(YawTrajectory {
        repr: YawRepr::Virtual(traj),
        limits: req.limits,
        status,
    })
}

/// Scalar yaw boundary used by the angle-space baselines.
#[derive(Debug, Clone, Copy)]
pub struct YawAngleBoundary {
    pub angle: f64,
    pub rate: f64,
}

fn check_angle_bounds(p: &PiecewisePoly, limits: &YawLimits, n_check: usize) -> PlanStatus {
    for seg in 0..p.num_segments() {
        let dt = p.durations()[seg];
        for j in 0..n_check {
            let tau = dt * j as f64 / (n_check - 1) as f64;
            if p.eval_segment(seg, tau, 1)[0].abs() > limits.v_psi_max
                || p.eval_segment(seg, tau, 2)[0].abs() > limits.a_psi_max
            {
                return PlanStatus::BoundViolation;
            }
        }
    }
    PlanStatus::Success
}

fn solve_angle_spline(
    interior: &[f64],
    durations: &[f64],
    start: YawAngleBoundary,
    end: YawAngleBoundary,
) -> Result<PiecewisePoly, YawError> {
    let bc0 = BoundaryState::new(vec![
        DVector::from_element(1, start.angle),
        DVector::from_element(1, start.rate),
    ])
    .expect("scalar boundary");
    let bc_end = BoundaryState::new(vec![
        DVector::from_element(1, end.angle),
        DVector::from_element(1, end.rate),
    ])
    .expect("scalar boundary");
    let waypoints: Vec<DVector<f64>> = interior
        .iter()
        .map(|&a| DVector::from_element(1, a))
        .collect();
    Ok(solve_min_control(&bc0, &bc_end, &waypoints, durations, 2)?)
}

/// Baseline that splines raw branch angles in `(-pi, pi]` exactly as given.
/// A pair like (170deg, -170deg) therefore travels the long way around.
pub fn plan_yaw_wrapped_baseline(
    interior_angles: &[f64],
    durations: &[f64],
    start: YawAngleBoundary,
    end: YawAngleBoundary,
    limits: &YawLimits,
    n_check: usize,
) -> Result<YawTrajectory, YawError> {
    limits.validate()?;
    for &a in interior_angles
        .iter()
        .chain([start.angle, end.angle].iter())
    {
        if !(a > -PI && a <= PI + 1e-12) {
            return Err(YawError::InvalidArgument(format!(
                "branch angle {a} outside (-pi, pi]"
            )));
        }
    }
    if durations.len() != interior_angles.len() + 1 {
        return Err(YawError::InvalidArgument(format!(
            "expected {} durations, got {}",
            interior_angles.len() + 1,
            durations.len()
        )));
    }
    let p = solve_angle_spline(interior_angles, durations, start, end)?;
    let status = check_angle_bounds(&p, limits, n_check.max(2));
    Ok(YawTrajectory {
        repr: YawRepr::Angle(p),
        limits: *limits,
        status,
    })
}

/// Replace each angle of a sequence by its 2-pi-equivalent nearest the
/// previous unwrapped value; exact ties resolve toward the smaller value.
pub fn unwrap_sequence(angles: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(angles.len());
    let mut prev: Option<f64> = None;
    for &a in angles {
        let next = match prev {
            None => a,
            Some(p) => {
                // Delta in [-pi, pi): the half-open side sends ties down.
                let d = (a - p + PI).rem_euclid(2.0 * PI) - PI;
                p + d
            }
        };
        out.push(next);
        prev = Some(next);
    }
    out
}

/// Baseline that unwraps the angle sequence to the nearest 2-pi equivalents
/// before splining, so consecutive targets never differ by more than pi.
pub fn plan_yaw_unwrapped_baseline(
    interior_angles: &[f64],
    durations: &[f64],
    start: YawAngleBoundary,
    end: YawAngleBoundary,
    limits: &YawLimits,
    n_check: usize,
) -> Result<YawTrajectory, YawError> {
    limits.validate()?;
    if durations.len() != interior_angles.len() + 1 {
        return Err(YawError::InvalidArgument(format!(
            "expected {} durations, got {}",
            interior_angles.len() + 1,
            durations.len()
        )));
    }
    let mut seq = Vec::with_capacity(interior_angles.len() + 2);
    seq.push(start.angle);
    seq.extend_from_slice(interior_angles);
    seq.push(end.angle);
    let unwrapped = unwrap_sequence(&seq);
    let p = solve_angle_spline(
        &unwrapped[1..unwrapped.len() - 1],
        durations,
        YawAngleBoundary {
            angle: unwrapped[0],
            rate: start.rate,
        },
        YawAngleBoundary {
            angle: *unwrapped.last().unwrap(),
            rate: end.rate,
        },
    )?;
    let status = check_angle_bounds(&p, limits, n_check.max(2));
    Ok(YawTrajectory {
        repr: YawRepr::Angle(p),
        limits: *limits,
        status,
    })
}

/// Knot times of a duration list, including both endpoints.
pub fn knot_times(durations: &[f64]) -> Vec<f64> {
    let mut times = Vec::with_capacity(durations.len() + 1);
    let mut acc = 0.0;
    times.push(0.0);
    for &d in durations {
        acc += d;
        times.push(acc);
    }
    times
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::yawparam::{min_radius, EPS_SINGULAR};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    fn lenient_limits() -> YawLimits {
        YawLimits {
            v_psi_max: 1e6,
            a_psi_max: 1e6,
            v_s_max: 1e6,
            a_s_max: 1e6,
            r_min: 0.1,
        }
    }

    fn virtual_request(
        interior_deg: &[f64],
        boundary_deg: (f64, f64),
        durations: Vec<f64>,
        limits: YawLimits,
    ) -> YawPlanRequest {
        YawPlanRequest {
            keyframe_headings: interior_deg
                .iter()
                .map(|&d| HeadingVector::from_angle(deg(d)))
                .collect(),
            radii: vec![1.0; interior_deg.len()],
            durations,
            start: YawBoundary::resting(HeadingVector::from_angle(deg(boundary_deg.0))),
            end: YawBoundary::resting(HeadingVector::from_angle(deg(boundary_deg.1))),
            limits,
            n_check: DEFAULT_N_CHECK,
        }
    }

    /// Independent distance estimate: unwrap densely sampled heading angles
    /// and total their increments.
    fn sampled_distance(traj: &YawTrajectory) -> f64 {
        let n = 20_000;
        let total = traj.total_duration();
        let mut dist = 0.0;
        let mut prev = traj.sample(0.0).unwrap().0;
        for i in 1..=n {
            let t = (total * i as f64 / n as f64).min(total);
            let a = traj.sample(t).unwrap().0;
            let mut d = a - prev;
            while d > PI {
                d -= 2.0 * PI;
            }
            while d < -PI {
                d += 2.0 * PI;
            }
            dist += d.abs();
            prev = a;
        }
        dist
    }

    #[test]
    fn virtual_constant_request_is_stationary() {
        let req = virtual_request(&[0.0, 0.0], (0.0, 0.0), vec![1.0; 3], YawLimits::default());
        let traj = plan_virtual_yaw(&req).unwrap();
        assert_eq!(traj.status, PlanStatus::Success);
        assert!(traj.native_control_effort() < 1e-18);
        assert!(traj.accumulated_distance().unwrap() < 1e-9);
        let (angle, omega, alpha) = traj.sample(1.3).unwrap();
        assert_relative_eq!(angle, 0.0, epsilon = 1e-12);
        assert_eq!((omega, alpha), (0.0, 0.0));
    }

    #[test]
    fn virtual_wraparound_takes_short_way() {
        let req = virtual_request(&[], (170.0, -170.0), vec![1.0], YawLimits::default());
        let traj = plan_virtual_yaw(&req).unwrap();
        assert_eq!(traj.status, PlanStatus::Success);
        let dist = traj.accumulated_distance().unwrap();
        assert_relative_eq!(dist, deg(20.0), max_relative = 0.02);
        assert_relative_eq!(dist, sampled_distance(&traj), epsilon = 1e-4);
    }

    #[test]
    fn virtual_bound_violation_is_reported() {
        let limits = YawLimits {
            v_s_max: 1e-6,
            ..YawLimits::default()
        };
        let req = virtual_request(&[90.0], (0.0, 180.0), vec![1.0, 1.0], limits);
        let traj = plan_virtual_yaw(&req).unwrap();
        assert_eq!(traj.status, PlanStatus::BoundViolation);
    }

    #[test]
    fn virtual_interpolates_requested_headings() {
        let interior = [40.0, 170.0, -120.0];
        let req = virtual_request(&interior, (0.0, 90.0), vec![1.0; 4], lenient_limits());
        let traj = plan_virtual_yaw(&req).unwrap();
        let times = knot_times(traj.poly().durations());
        // No insertion expected here: knots line up with the request.
        assert_eq!(times.len(), 5);
        for (i, &a) in interior.iter().enumerate() {
            let (angle, _, _) = traj.sample(times[i + 1]).unwrap();
            let psi = HeadingVector::from_angle(angle);
            let want = HeadingVector::from_angle(deg(a));
            assert!(psi.dot(&want) >= 1.0 - 1e-9);
        }
    }

    #[test]
    fn virtual_heading_norm_is_unit() {
        let req = virtual_request(&[100.0, -140.0], (0.0, 60.0), vec![1.0; 3], lenient_limits());
        let traj = plan_virtual_yaw(&req).unwrap();
        if let YawRepr::Virtual(p) = &traj.repr {
            for i in 0..=200 {
                let t = traj.total_duration() * i as f64 / 200.0;
                let s = p.eval(t, 0).unwrap();
                let psi = Vector2::new(s[0], s[1]).normalize();
                assert!((psi.norm() - 1.0).abs() < 1e-12);
            }
        } else {
            panic!("virtual representation expected");
        }
    }

    #[test]
    fn virtual_antipodal_boundary_recovers_by_insertion() {
        let req = virtual_request(&[], (0.0, 180.0), vec![2.0], YawLimits::default());
        let traj = plan_virtual_yaw(&req).unwrap();
        assert_eq!(traj.status, PlanStatus::Success);
        if let YawRepr::Virtual(p) = &traj.repr {
            assert!(p.num_segments() > 1);
            assert!(min_radius(p).0 >= req.limits.r_min - 1e-9);
        }
        assert_relative_eq!(
            traj.accumulated_distance().unwrap(),
            PI,
            max_relative = 0.05
        );
    }

    #[test]
    fn wrapped_baseline_zero_case() {
        let traj = plan_yaw_wrapped_baseline(
            &[0.0, 0.0],
            &[1.0; 3],
            YawAngleBoundary { angle: 0.0, rate: 0.0 },
            YawAngleBoundary { angle: 0.0, rate: 0.0 },
            &YawLimits::default(),
            DEFAULT_N_CHECK,
        )
        .unwrap();
        assert_eq!(traj.status, PlanStatus::Success);
        assert_eq!(traj.native_control_effort(), 0.0);
    }

    #[test]
    fn wrapped_baseline_travels_long_way() {
        let start = YawAngleBoundary { angle: 2.967, rate: 0.0 };
        let end = YawAngleBoundary { angle: -2.967, rate: 0.0 };
        let traj = plan_yaw_wrapped_baseline(
            &[],
            &[1.0],
            start,
            end,
            &lenient_limits(),
            DEFAULT_N_CHECK,
        )
        .unwrap();
        assert_eq!(traj.status, PlanStatus::Success);
        assert_relative_eq!(
            traj.accumulated_distance().unwrap(),
            5.934,
            max_relative = 0.02
        );

        // The same hop under a tight rate limit fails: the cubic peaks at
        // 1.5 |delta| / T ~ 8.9 rad/s.
        let traj = plan_yaw_wrapped_baseline(
            &[],
            &[1.0],
            start,
            end,
            &YawLimits {
                v_psi_max: 1.0,
                ..lenient_limits()
            },
            DEFAULT_N_CHECK,
        )
        .unwrap();
        assert_eq!(traj.status, PlanStatus::BoundViolation);
    }

    #[test]
    fn wrapped_baseline_rejects_out_of_branch() {
        let err = plan_yaw_wrapped_baseline(
            &[4.0],
            &[1.0, 1.0],
            YawAngleBoundary { angle: 0.0, rate: 0.0 },
            YawAngleBoundary { angle: 0.0, rate: 0.0 },
            &YawLimits::default(),
            DEFAULT_N_CHECK,
        );
        assert!(matches!(err, Err(YawError::InvalidArgument(_))));
    }

    #[test]
    fn unwrap_sequence_examples() {
        let u = unwrap_sequence(&[deg(170.0), deg(-170.0)]);
        assert_relative_eq!(u[1], deg(190.0), epsilon = 1e-12);

        // Exact antipodal tie resolves toward the smaller value.
        let u = unwrap_sequence(&[0.0, PI]);
        assert_relative_eq!(u[1], -PI, epsilon = 1e-12);

        let monotone: Vec<f64> = [0.0, 90.0, 180.0, 270.0, 360.0]
            .iter()
            .map(|&d| deg(d))
            .collect();
        let u = unwrap_sequence(&monotone);
        for (got, want) in u.iter().zip(&monotone) {
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn unwrapped_baseline_takes_short_way() {
        let traj = plan_yaw_unwrapped_baseline(
            &[],
            &[1.0],
            YawAngleBoundary { angle: deg(170.0), rate: 0.0 },
            YawAngleBoundary { angle: deg(-170.0), rate: 0.0 },
            &YawLimits::default(),
            DEFAULT_N_CHECK,
        )
        .unwrap();
        assert_eq!(traj.status, PlanStatus::Success);
        assert_relative_eq!(
            traj.accumulated_distance().unwrap(),
            deg(20.0),
            max_relative = 0.02
        );
        // Reported angles stay on the branch even past the cut.
        let (angle, _, _) = traj.sample(1.0).unwrap();
        assert_relative_eq!(angle, deg(-170.0), epsilon = 1e-9);
    }

    #[test]
    fn angle_samples_are_branch_reduced() {
        // A curve whose raw value exceeds pi: constant 3.3 rad.
        let p = PiecewisePoly::constant(DVector::from_element(1, 3.3), 1.0).unwrap();
        let traj = YawTrajectory {
            repr: YawRepr::Angle(p),
            limits: YawLimits::default(),
            status: PlanStatus::Success,
        };
        let (angle, _, _) = traj.sample(0.5).unwrap();
        assert_relative_eq!(angle, 3.3 - 2.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn virtual_never_takes_the_long_way() {
        // Both planners take the short way when adjacent branch gaps stay
        // below pi, so the virtual distance may exceed the angle spline only
        // by bounded interpolation ringing. Once a gap crosses pi the
        // wrapped baseline travels the long way and the virtual method must
        // beat it outright.
        let limits = YawLimits {
            v_psi_max: 1e6,
            a_psi_max: 1e6,
            v_s_max: 1e6,
            a_s_max: 1e6,
            ..YawLimits::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (mut short_checked, mut wrap_checked) = (0, 0);
        for _ in 0..400 {
            let m = rng.gen_range(1..=5);
            let mut angles = vec![rng.gen_range(-PI..PI)];
            for _ in 0..m {
                let step = rng.gen_range(-0.9 * PI..0.9 * PI);
                angles.push(wrap_angle(angles.last().unwrap() + step));
            }
            let durations: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..2.0)).collect();
            let interior = &angles[1..angles.len() - 1];
            let req = YawPlanRequest {
                keyframe_headings: interior.iter().map(|&a| HeadingVector::from_angle(a)).collect(),
                radii: vec![1.0; interior.len()],
                durations: durations.clone(),
                start: YawBoundary::resting(HeadingVector::from_angle(angles[0])),
                end: YawBoundary::resting(HeadingVector::from_angle(*angles.last().unwrap())),
                limits,
                n_check: DEFAULT_N_CHECK,
            };
            let virt = plan_virtual_yaw(&req).unwrap();
            let wrapped = plan_yaw_wrapped_baseline(
                interior,
                &durations,
                YawAngleBoundary { angle: angles[0], rate: 0.0 },
                YawAngleBoundary { angle: *angles.last().unwrap(), rate: 0.0 },
                &limits,
                DEFAULT_N_CHECK,
            )
            .unwrap();
            let dv = virt.accumulated_distance().unwrap();
            let dw = wrapped.accumulated_distance().unwrap();
            let branch_gaps: Vec<f64> = angles.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
            if branch_gaps.iter().all(|&g| g < 0.5 * PI) {
                short_checked += 1;
                assert!(dv <= 1.2 * dw + 1e-6, "virtual {dv} vs wrapped {dw}");
            } else if branch_gaps.iter().any(|&g| g > 1.2 * PI) {
                wrap_checked += 1;
                assert!(dv + 1e-6 < dw, "virtual {dv} vs long-way wrapped {dw}");
                let short_total: f64 = angles
                    .windows(2)
                    .map(|w| {
                        HeadingVector::from_angle(w[0]).arc_to(&HeadingVector::from_angle(w[1]))
                    })
                    .sum();
                assert!(dv <= 1.35 * short_total + 1e-6, "virtual {dv} vs short {short_total}");
            }
        }
        assert!(short_checked > 20, "checked {short_checked}");
        assert!(wrap_checked > 20, "checked {wrap_checked}");
    }

    #[test]
    fn all_planners_agree_on_stationary_requests() {
        let angle = deg(40.0);
        let req = virtual_request(&[40.0, 40.0], (40.0, 40.0), vec![1.0; 3], YawLimits::default());
        let virt = plan_virtual_yaw(&req).unwrap();
        let b = YawAngleBoundary { angle, rate: 0.0 };
        let wrapped = plan_yaw_wrapped_baseline(
            &[angle, angle],
            &[1.0; 3],
            b,
            b,
            &YawLimits::default(),
            DEFAULT_N_CHECK,
        )
        .unwrap();
        let unwrapped = plan_yaw_unwrapped_baseline(
            &[angle, angle],
            &[1.0; 3],
            b,
            b,
            &YawLimits::default(),
            DEFAULT_N_CHECK,
        )
        .unwrap();
        for traj in [&virt, &wrapped, &unwrapped] {
            assert_eq!(traj.status, PlanStatus::Success);
            assert!(traj.native_control_effort() < 1e-18);
        }
    }

    #[test]
    fn uniform_circular_virtual_trajectory_samples() {
        // Radius-2 rotation at 1 rad/s, built segment-wise.
        let rate = 1.0;
        let bc_at = |t: f64| {
            boundary_virtual(&HeadingVector::from_angle(rate * t), rate, 2.0, 0.0).unwrap()
        };
        let waypoints: Vec<DVector<f64>> = (1..8)
            .map(|k| {
                let a = rate * k as f64 / 8.0;
                DVector::from_column_slice(&[2.0 * a.cos(), 2.0 * a.sin()])
            })
            .collect();
        let p = solve_min_control(&bc_at(0.0), &bc_at(1.0), &waypoints, &[0.125; 8], 2).unwrap();
        let traj = YawTrajectory {
            repr: YawRepr::Virtual(p),
            limits: YawLimits::default(),
            status: PlanStatus::Success,
        };
        for i in 0..=10 {
            let (_, omega, _) = traj.sample(i as f64 / 10.0).unwrap();
            assert_relative_eq!(omega, 1.0, max_relative = 1e-3);
        }
        let s = traj.poly().eval(0.37, 0).unwrap();
        assert!(s.norm() > 2.0 - 1e-3);
        assert!(EPS_SINGULAR < s.norm());
    }
}

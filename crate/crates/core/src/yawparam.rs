//! Global yaw parameterization: the mapping between planar virtual variables
//! and unit heading vectors, derivative propagation through the
//! normalization, singularity detection, and keyframe insertion for
//! radius-regular virtual splines.

use crate::splines::{solve_min_control, BoundaryState, PiecewisePoly, SplineError};
use nalgebra::{Matrix2, Vector2};

/// Virtual-variable norms below this are treated as singular; the
/// normalization is refused rather than extrapolated.
pub const EPS_SINGULAR: f64 = 1e-6;

/// Dense-check resolution: subintervals per segment for radius and distance
/// scans, refined locally where it matters.
const SAMPLES_PER_SEGMENT: usize = 100;

#[derive(thiserror::Error, Debug)]
pub enum YawError {
    #[error("virtual variable is singular (norm {norm:.3e}{})", at_time.map(|t| format!(" at t={t:.6}")).unwrap_or_default())]
    Singular { norm: f64, at_time: Option<f64> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("keyframe insertion budget exhausted after {insertions} insertions; worst radius {worst_radius:.6} < {r_min} in segment {segment}")]
    InsertionBudget {
        insertions: usize,
        worst_radius: f64,
        r_min: f64,
        segment: usize,
    },
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Unit heading vector on the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadingVector(Vector2<f64>);

impl HeadingVector {
    pub fn from_angle(angle: f64) -> Self {
        Self(Vector2::new(angle.cos(), angle.sin()))
    }

    /// Yaw angle in `(-pi, pi]`.
    pub fn angle(&self) -> f64 {
        let a = self.0.y.atan2(self.0.x);
        if a <= -std::f64::consts::PI {
            a + 2.0 * std::f64::consts::PI
        } else {
            a
        }
    }

    pub fn vector(&self) -> Vector2<f64> {
        self.0
    }

    pub fn dot(&self, other: &HeadingVector) -> f64 {
        self.0.dot(&other.0)
    }

    /// Shorter arc between two headings, in `[0, pi]`.
    pub fn arc_to(&self, other: &HeadingVector) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }
}

/// Virtual yaw variable and its first two derivatives at an instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualYawState {
    pub s: Vector2<f64>,
    pub s_dot: Vector2<f64>,
    pub s_ddot: Vector2<f64>,
}

impl VirtualYawState {
    pub fn new(s: Vector2<f64>, s_dot: Vector2<f64>, s_ddot: Vector2<f64>) -> Self {
        Self { s, s_dot, s_ddot }
    }

    /// Radius of the virtual variable.
    pub fn radius(&self) -> f64 {
        self.s.norm()
    }
}

/// Dynamic bounds on the real and virtual yaw variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawLimits {
    /// Max angular velocity of the heading (rad/s).
    pub v_psi_max: f64,
    /// Max angular acceleration of the heading (rad/s^2).
    pub a_psi_max: f64,
    /// Max virtual-variable velocity (units/s).
    pub v_s_max: f64,
    /// Max virtual-variable acceleration (units/s^2).
    pub a_s_max: f64,
    /// Minimum virtual radius (units).
    pub r_min: f64,
}

impl Default for YawLimits {
    fn default() -> Self {
        Self {
            v_psi_max: 3.0,
            a_psi_max: 6.0,
            v_s_max: 10.0,
            a_s_max: 100.0,
            r_min: 0.5,
        }
    }
}

impl YawLimits {
    pub fn validate(&self) -> Result<(), YawError> {
        let fields = [
            ("v_psi_max", self.v_psi_max),
            ("a_psi_max", self.a_psi_max),
            ("v_s_max", self.v_s_max),
            ("a_s_max", self.a_s_max),
            ("r_min", self.r_min),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(YawError::InvalidArgument(format!(
                    "limit {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// +90 degree rotation of the plane.
pub fn rot90() -> Matrix2<f64> {
    Matrix2::new(0.0, -1.0, 1.0, 0.0)
}

fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Normalize a virtual variable to a heading vector. Refused below the
/// singularity threshold.
pub fn normalize_heading(s: &Vector2<f64>) -> Result<HeadingVector, YawError> {
    let norm = s.norm();
    if norm < EPS_SINGULAR {
        return Err(YawError::Singular {
            norm,
            at_time: None,
        });
    }
    Ok(HeadingVector(s / norm))
}

/// Heading vector, signed angular rate, and signed angular acceleration of
/// the normalized virtual variable.
///
/// With `r = |s|`: `omega = (s x s_dot) / r^2` and
/// `alpha = (s x s_ddot) / r^2 - 2 (s . s_dot)(s x s_dot) / r^4`, the
/// tangential component of the heading's second derivative.
pub fn heading_rates(state: &VirtualYawState) -> Result<(HeadingVector, f64, f64), YawError> {
    let psi = normalize_heading(&state.s)?;
    let r2 = state.s.norm_squared();
    let c1 = cross2(&state.s, &state.s_dot);
    let omega = c1 / r2;
    let alpha = cross2(&state.s, &state.s_ddot) / r2
        - 2.0 * state.s.dot(&state.s_dot) * c1 / (r2 * r2);
    Ok((psi, omega, alpha))
}

/// Scale a heading back into a virtual variable at the given radius.
pub fn heading_to_virtual(psi: &HeadingVector, r: f64) -> Result<Vector2<f64>, YawError> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(YawError::InvalidArgument(format!(
            "virtual radius must be strictly positive, got {r}"
        )));
    }
    Ok(r * psi.vector())
}

/// Boundary state (value and first derivative) of the virtual variable for a
/// heading with angular rate `omega`, radius `r`, and radial rate `r_dot`.
pub fn boundary_virtual(
    psi: &HeadingVector,
    omega: f64,
    r: f64,
    r_dot: f64,
) -> Result<BoundaryState, YawError> {
    let s = heading_to_virtual(psi, r)?;
    let s_dot = r_dot * psi.vector() + r * omega * (rot90() * psi.vector());
    Ok(BoundaryState::new(vec![
        nalgebra::DVector::from_column_slice(s.as_slice()),
        nalgebra::DVector::from_column_slice(s_dot.as_slice()),
    ])
    .expect("two rows of matching dimension"))
}

fn virtual_state_at(pp: &PiecewisePoly, seg: usize, tau: f64) -> VirtualYawState {
    let s = pp.eval_segment(seg, tau, 0);
    let sd = pp.eval_segment(seg, tau, 1);
    let sdd = pp.eval_segment(seg, tau, 2);
    VirtualYawState::new(
        Vector2::new(s[0], s[1]),
        Vector2::new(sd[0], sd[1]),
        Vector2::new(sdd[0], sdd[1]),
    )
}

/// Total variation of the heading angle along a planar virtual trajectory,
/// by composite Simpson quadrature of `|omega|`.
pub fn accumulated_yaw_distance(s_traj: &PiecewisePoly) -> Result<f64, YawError> {
    if s_traj.dim() != 2 {
        return Err(YawError::InvalidArgument(format!(
            "virtual trajectory must be planar, got dim {}",
            s_traj.dim()
        )));
    }
    let mut total = 0.0;
    for i in 0..s_traj.num_segments() {
        let dt = s_traj.durations()[i];
        let h = dt / SAMPLES_PER_SEGMENT as f64;
        let abs_omega = |tau: f64| -> Result<f64, YawError> {
            let st = virtual_state_at(s_traj, i, tau);
            let r2 = st.s.norm_squared();
            if r2.sqrt() < EPS_SINGULAR {
                return Err(YawError::Singular {
                    norm: r2.sqrt(),
                    at_time: Some(s_traj.knot_times()[i] + tau),
                });
            }
            Ok((cross2(&st.s, &st.s_dot) / r2).abs())
        };
        // Composite Simpson over an even number of subintervals.
        let mut acc = abs_omega(0.0)? + abs_omega(dt)?;
        for k in 1..SAMPLES_PER_SEGMENT {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * abs_omega(k as f64 * h)?;
        }
        total += acc * h / 3.0;
    }
    Ok(total)
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        if (b - a).abs() < 1e-12 {
            break;
        }
    }
    let t = 0.5 * (a + b);
    (t, f(t))
}

/// Minimum radius within one segment (local grid plus golden-section
/// refinement). Returns (radius, local time).
fn segment_min_radius(pp: &PiecewisePoly, seg: usize) -> (f64, f64) {
    let dt = pp.durations()[seg];
    let h = dt / SAMPLES_PER_SEGMENT as f64;
    let radius = |tau: f64| pp.eval_segment(seg, tau, 0).norm();
    let mut best_k = 0;
    let mut best = f64::INFINITY;
    for k in 0..=SAMPLES_PER_SEGMENT {
        let r = radius(k as f64 * h);
        if r < best {
            best = r;
            best_k = k;
        }
    }
    let lo = (best_k.saturating_sub(1)) as f64 * h;
    let hi = ((best_k + 1).min(SAMPLES_PER_SEGMENT)) as f64 * h;
    let (tau, refined) = golden_min(radius, lo, hi);
    if refined < best {
        (refined, tau)
    } else {
        (best, best_k as f64 * h)
    }
}

/// Minimum of `|s(t)|` over the trajectory. Returns (radius, time at min).
pub fn min_radius(s_traj: &PiecewisePoly) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..s_traj.num_segments() {
        let (r, tau) = segment_min_radius(s_traj, i);
        if r < best.0 {
            best = (r, s_traj.knot_times()[i] + tau);
        }
    }
    best
}

/// Midpoint of two headings on the shorter arc; antipodal pairs break the
/// tie counter-clockwise from `a`.
pub fn spherical_midpoint(a: &HeadingVector, b: &HeadingVector) -> HeadingVector {
    let sum = a.vector() + b.vector();
    if sum.norm() < 1e-9 {
        let v = a.vector();
        HeadingVector(Vector2::new(-v.y, v.x))
    } else {
        HeadingVector(sum / sum.norm())
    }
}

/// Result of [`insert_keyframes_until_regular`]: possibly augmented interior
/// keyframes and the radius-regular trajectory through them.
#[derive(Debug, Clone)]
pub struct RegularizedYawSpline {
    pub headings: Vec<HeadingVector>,
    pub radii: Vec<f64>,
    pub durations: Vec<f64>,
    pub traj: PiecewisePoly,
    pub insertions: usize,
}

/// Solve the minimum-control virtual spline and, while any segment dips
/// below the radius floor, insert a midpoint heading into the first
/// offending segment (splitting its duration equally) and re-solve.
pub fn insert_keyframes_until_regular(
    interior_headings: &[HeadingVector],
    interior_radii: &[f64],
    durations: &[f64],
    bc0: &BoundaryState,
    bc_end: &BoundaryState,
    limits: &YawLimits,
) -> Result<RegularizedYawSpline, YawError> {
    limits.validate()?;
    if interior_headings.len() != interior_radii.len() {
        return Err(YawError::InvalidArgument(format!(
            "heading/radius count mismatch: {} vs {}",
            interior_headings.len(),
            interior_radii.len()
        )));
    }
    if durations.len() != interior_headings.len() + 1 {
        return Err(YawError::InvalidArgument(format!(
            "expected {} durations for {} interior keyframes, got {}",
            interior_headings.len() + 1,
            interior_headings.len(),
            durations.len()
        )));
    }
    if interior_radii.iter().any(|&r| r < limits.r_min) {
        return Err(YawError::InvalidArgument(
            "all keyframe radii must be at least r_min".into(),
        ));
    }
    for (name, bc) in [("initial", bc0), ("terminal", bc_end)] {
        if bc.dim() != 2 || bc.order() != 2 {
            return Err(YawError::InvalidArgument(format!(
                "{name} boundary state must be planar with value and rate rows"
            )));
        }
    }

    let ends = |bc: &BoundaryState| -> Result<(HeadingVector, f64), YawError> {
        let v = bc.derivative(0);
        let s = Vector2::new(v[0], v[1]);
        Ok((normalize_heading(&s)?, s.norm()))
    };
    let (h_start, r_start) = ends(bc0)?;
    let (h_end, r_end) = ends(bc_end)?;

    let mut headings: Vec<HeadingVector> = Vec::with_capacity(interior_headings.len() + 2);
    headings.push(h_start);
    headings.extend_from_slice(interior_headings);
    headings.push(h_end);
    let mut radii: Vec<f64> = Vec::with_capacity(interior_radii.len() + 2);
    radii.push(r_start);
    radii.extend_from_slice(interior_radii);
    radii.push(r_end);
    let mut durs = durations.to_vec();

    let max_insertions = 3 * durations.len();
    let mut insertions = 0;
    loop {
        let waypoints: Vec<nalgebra::DVector<f64>> = headings[1..headings.len() - 1]
            .iter()
            .zip(&radii[1..radii.len() - 1])
            .map(|(h, &r)| {
                let s = r * h.vector();
                nalgebra::DVector::from_column_slice(s.as_slice())
            })
            .collect();
        let traj = solve_min_control(bc0, bc_end, &waypoints, &durs, 2)?;

        let offender = (0..traj.num_segments())
            .map(|i| (i, segment_min_radius(&traj, i)))
            .find(|(_, (r, _))| *r < limits.r_min);
        match offender {
            None => {
                return Ok(RegularizedYawSpline {
                    headings: headings[1..headings.len() - 1].to_vec(),
                    radii: radii[1..radii.len() - 1].to_vec(),
                    durations: durs,
                    traj,
                    insertions,
                });
            }
            Some((seg, (r, _))) => {
                if insertions >= max_insertions {
                    return Err(YawError::InsertionBudget {
                        insertions,
                        worst_radius: r,
                        r_min: limits.r_min,
                        segment: seg,
                    });
                }
                let mid = spherical_midpoint(&headings[seg], &headings[seg + 1]);
                let r_new = 0.5 * (radii[seg] + radii[seg + 1]);
                headings.insert(seg + 1, mid);
                radii.insert(seg + 1, r_new);
                let half = durs[seg] / 2.0;
                durs[seg] = half;
                durs.insert(seg + 1, half);
                insertions += 1;
            }
        }
    }
}

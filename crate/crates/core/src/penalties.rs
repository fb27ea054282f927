//! Differentiable penalty functionals coupling position and virtual yaw:
//! field-of-view, velocity alignment, image velocity, yaw dynamics, virtual
//! bounds, and position limits. Every cost returns its value together with
//! analytic gradients with respect to the flat state blocks, so the joint
//! optimizer can chain them through the spline coefficients.

use crate::yawparam::{heading_rates, normalize_heading, rot90, HeadingVector, VirtualYawState, YawError, YawLimits};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

pub const GRAVITY: f64 = 9.81;

/// Step used to differentiate the attitude along the trajectory inside the
/// image-velocity cost. Large enough that the `1e-16 / step` cancellation
/// noise of the rotation difference stays far below gradient-check
/// resolution; the `O(step^2)` truncation is still ~1e-6.
const ROTATION_FD_STEP: f64 = 1e-3;

#[derive(thiserror::Error, Debug)]
pub enum PenaltyError {
    #[error("degenerate attitude: {0}")]
    DegenerateAttitude(String),
    #[error("target coincides with the robot position")]
    CoincidentTarget,
    #[error(transparent)]
    Yaw(#[from] YawError),
}

/// Flat state sample: position, its first two derivatives, and the virtual
/// yaw variable with its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub s: Vector2<f64>,
    pub s_dot: Vector2<f64>,
    pub s_ddot: Vector2<f64>,
}

impl FlatState {
    pub fn virtual_state(&self) -> VirtualYawState {
        VirtualYawState::new(self.s, self.s_dot, self.s_ddot)
    }
}

/// Which way the field-of-view cost orients the relative position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FovSign {
    /// Direction from the robot toward the target (default).
    RobotToTarget,
    /// Direction from the target toward the robot.
    TargetToRobot,
}

/// Camera model for the perception costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FovModel {
    /// Horizontal field-of-view aperture (rad).
    pub theta: f64,
    /// Velocity-deviation threshold angle (rad).
    pub theta_r: f64,
    /// Fixed camera-to-body rotation (identity when the camera looks along
    /// the body x-axis).
    pub camera_rotation: Matrix3<f64>,
    pub sign: FovSign,
}

impl Default for FovModel {
    fn default() -> Self {
        Self {
            theta: 87.0_f64.to_radians(),
            theta_r: std::f64::consts::FRAC_PI_4,
            camera_rotation: Matrix3::identity(),
            sign: FovSign::RobotToTarget,
        }
    }
}

impl FovModel {
    pub fn validate(&self) -> Result<(), PenaltyError> {
        if !(self.theta > 0.0 && self.theta < 2.0 * std::f64::consts::PI) {
            return Err(PenaltyError::DegenerateAttitude(format!(
                "fov aperture theta must lie in (0, 2pi), got {}",
                self.theta
            )));
        }
        if !(self.theta_r > 0.0 && self.theta_r < std::f64::consts::PI) {
            return Err(PenaltyError::DegenerateAttitude(format!(
                "deviation threshold theta_r must lie in (0, pi), got {}",
                self.theta_r
            )));
        }
        Ok(())
    }
}

/// Penalty value with gradients for every flat-state block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostGrad {
    pub value: f64,
    pub d_p: Vector3<f64>,
    pub d_v: Vector3<f64>,
    pub d_a: Vector3<f64>,
    pub d_s: Vector2<f64>,
    pub d_s_dot: Vector2<f64>,
    pub d_s_ddot: Vector2<f64>,
}

impl CostGrad {
    pub fn zero() -> Self {
        Self {
            value: 0.0,
            d_p: Vector3::zeros(),
            d_v: Vector3::zeros(),
            d_a: Vector3::zeros(),
            d_s: Vector2::zeros(),
            d_s_dot: Vector2::zeros(),
            d_s_ddot: Vector2::zeros(),
        }
    }

    pub fn accumulate(&mut self, other: &CostGrad, scale: f64) {
        self.value += scale * other.value;
        self.d_p += scale * other.d_p;
        self.d_v += scale * other.d_v;
        self.d_a += scale * other.d_a;
        self.d_s += scale * other.d_s;
        self.d_s_dot += scale * other.d_s_dot;
        self.d_s_ddot += scale * other.d_s_ddot;
    }
}

/// One-sided cubic hinge: `max(x, 0)^3` with derivative `3 max(x, 0)^2`,
/// twice continuously differentiable at zero.
pub fn hinge_cubic(x: f64) -> (f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0)
    } else {
        (x * x * x, 3.0 * x * x)
    }
}

/// Jacobian of `s / |s|` with respect to `s`.
fn normalize_jacobian(psi: &Vector2<f64>, norm: f64) -> Matrix2<f64> {
    (Matrix2::identity() - psi * psi.transpose()) / norm
}

/// Body rotation recovered from the flat outputs: body z along the thrust
/// direction, body x the projection of the heading onto the plane normal to
/// it.
pub fn rotation_from_flat(a: &Vector3<f64>, psi: &HeadingVector) -> Result<Matrix3<f64>, PenaltyError> {
    let (r, _, _) = rotation_jacobians(a, &psi.vector())?;
    Ok(r)
}

/// Rotation plus its partial derivatives with respect to the acceleration
/// components and the raw heading components. The rotation is invariant to
/// the scale of `psi_raw`, so these partials automatically live in the
/// tangent of the normalization.
fn rotation_jacobians(
    a: &Vector3<f64>,
    psi_raw: &Vector2<f64>,
) -> Result<(Matrix3<f64>, [Matrix3<f64>; 3], [Matrix3<f64>; 2]), PenaltyError> {
    let nz = a + Vector3::new(0.0, 0.0, GRAVITY);
    let nz_norm = nz.norm();
    if nz_norm <= 1e-6 {
        return Err(PenaltyError::DegenerateAttitude(
            "free fall: thrust direction undefined".into(),
        ));
    }
    let z = nz / nz_norm;
    let psi3 = Vector3::new(psi_raw.x, psi_raw.y, 0.0);
    let nx = &psi3 - z * z.dot(&psi3);
    let nx_norm = nx.norm();
    if nx_norm <= 1e-9 {
        return Err(PenaltyError::DegenerateAttitude(
            "heading parallel to thrust axis".into(),
        ));
    }
    let x = nx / nx_norm;
    let y = z.cross(&x);
    let mut r = Matrix3::zeros();
    r.set_column(0, &x);
    r.set_column(1, &y);
    r.set_column(2, &z);

    let pz = (Matrix3::identity() - z * z.transpose()) / nz_norm;
    let px = (Matrix3::identity() - x * x.transpose()) / nx_norm;
    // nx = psi3 - z (z . psi3): d(nx)/dz = -((z.psi3) I + z psi3^T).
    let dnx_dz = -(z.dot(&psi3) * Matrix3::identity() + z * psi3.transpose());
    let dnx_dpsi3 = Matrix3::identity() - z * z.transpose();

    let mut dr_da = [Matrix3::zeros(); 3];
    for k in 0..3 {
        let dz = pz.column(k).into_owned();
        let dx = px * (dnx_dz * dz);
        let dy = dz.cross(&x) + z.cross(&dx);
        dr_da[k].set_column(0, &dx);
        dr_da[k].set_column(1, &dy);
        dr_da[k].set_column(2, &dz);
    }

    let mut dr_dpsi = [Matrix3::zeros(); 2];
    for j in 0..2 {
        let e = Vector3::new(if j == 0 { 1.0 } else { 0.0 }, if j == 1 { 1.0 } else { 0.0 }, 0.0);
        let dx = px * (dnx_dpsi3 * e);
        let dy = z.cross(&dx);
        dr_dpsi[j].set_column(0, &dx);
        dr_dpsi[j].set_column(1, &dy);
        // dz/dpsi = 0.
    }

    Ok((r, dr_da, dr_dpsi))
}

/// Relaxed field-of-view cone cost toward a target point `w`.
///
/// With `d` the oriented relative position, the violation is
/// `cos(theta/2) |d| - <[psi; 0], d>`, hinged and weighted.
pub fn fov_relaxed_cost(
    state: &FlatState,
    w: &Vector3<f64>,
    fov: &FovModel,
    weight: f64,
) -> Result<CostGrad, PenaltyError> {
    let psi = normalize_heading(&state.s)?;
    let (dir, ddir_dp) = match fov.sign {
        FovSign::RobotToTarget => (w - state.p, -1.0),
        FovSign::TargetToRobot => (state.p - w, 1.0),
    };
    let n = dir.norm();
    if n <= 1e-6 {
        return Err(PenaltyError::CoincidentTarget);
    }
    let cos_half = (fov.theta / 2.0).cos();
    let psi3 = Vector3::new(psi.vector().x, psi.vector().y, 0.0);
    let raw = cos_half * n - psi3.dot(&dir);
    let (val, dval) = hinge_cubic(raw);

    let mut out = CostGrad::zero();
    out.value = weight * val;
    if dval != 0.0 {
        let g = weight * dval;
        let draw_ddir = cos_half * dir / n - psi3;
        out.d_p = g * ddir_dp * draw_ddir;
        let dir_xy = Vector2::new(dir.x, dir.y);
        out.d_s = -g * (normalize_jacobian(&psi.vector(), state.s.norm()) * dir_xy);
    }
    Ok(out)
}

/// Alignment of the heading with the horizontal velocity direction within a
/// threshold angle; vanishes smoothly as the speed goes to zero.
pub fn velocity_alignment_cost(
    state: &FlatState,
    fov: &FovModel,
    weight: f64,
) -> Result<CostGrad, PenaltyError> {
    let psi = normalize_heading(&state.s)?;
    let vxy = Vector2::new(state.v.x, state.v.y);
    let nv = vxy.norm();
    let raw = fov.theta_r.cos() * nv - psi.vector().dot(&vxy);
    let (val, dval) = hinge_cubic(raw);

    let mut out = CostGrad::zero();
    out.value = weight * val;
    if dval != 0.0 && nv > 1e-12 {
        let g = weight * dval;
        let draw_dvxy = fov.theta_r.cos() * vxy / nv - psi.vector();
        out.d_v = g * Vector3::new(draw_dvxy.x, draw_dvxy.y, 0.0);
        out.d_s = -g * (normalize_jacobian(&psi.vector(), state.s.norm()) * vxy);
    }
    Ok(out)
}

/// Squared speed of the target point in the camera frame above a bound.
///
/// The attitude rate is taken by differencing the recovered rotation along
/// the trajectory over a fixed internal step, which keeps the cost an
/// ordinary smooth function of the flat state.
pub fn image_velocity_cost(
    state: &FlatState,
    w: &Vector3<f64>,
    w_dot: &Vector3<f64>,
    v_w_max: f64,
    fov: &FovModel,
    weight: f64,
) -> Result<CostGrad, PenaltyError> {
    let h = ROTATION_FD_STEP;
    // First-order reconstruction: a curvature term would enter both points
    // symmetrically and cancel from the central difference.
    let s0 = state.s;
    let sp = state.s + h * state.s_dot;
    let sm = state.s - h * state.s_dot;
    let psi0 = normalize_heading(&s0)?.vector();
    let psip = normalize_heading(&sp)?.vector();
    let psim = normalize_heading(&sm)?.vector();

    let (r0, dr0_da, dr0_dpsi) = rotation_jacobians(&state.a, &psi0)?;
    let (rp, drp_da, drp_dpsi) = rotation_jacobians(&state.a, &psip)?;
    let (rm, drm_da, drm_dpsi) = rotation_jacobians(&state.a, &psim)?;
    let r_dot = (rp - rm) / (2.0 * h);

    let d = w - state.p;
    let rel_v = w_dot - state.v;
    let u = r_dot.transpose() * d + r0.transpose() * rel_v;
    // The camera rotation does not change the norm; applied for fidelity.
    let u_cam = fov.camera_rotation.transpose() * u;
    let raw = u_cam.norm_squared() - v_w_max * v_w_max;
    let (val, dval) = hinge_cubic(raw);

    let mut out = CostGrad::zero();
    out.value = weight * val;
    if dval == 0.0 {
        return Ok(out);
    }
    let g = weight * dval;

    out.d_p = -2.0 * g * (r_dot * u);
    out.d_v = -2.0 * g * (r0 * u);
    for k in 0..3 {
        let du = (drp_da[k] - drm_da[k]).transpose() * d / (2.0 * h)
            + dr0_da[k].transpose() * rel_v;
        out.d_a[k] = 2.0 * g * u.dot(&du);
    }

    let p0 = normalize_jacobian(&psi0, s0.norm());
    let pp = normalize_jacobian(&psip, sp.norm());
    let pm = normalize_jacobian(&psim, sm.norm());
    // Sensitivity of u to each raw heading component, per evaluation point.
    let vp: [Vector3<f64>; 2] =
        [drp_dpsi[0].transpose() * d / (2.0 * h), drp_dpsi[1].transpose() * d / (2.0 * h)];
    let vm: [Vector3<f64>; 2] =
        [drm_dpsi[0].transpose() * d / (2.0 * h), drm_dpsi[1].transpose() * d / (2.0 * h)];
    let v0: [Vector3<f64>; 2] =
        [dr0_dpsi[0].transpose() * rel_v, dr0_dpsi[1].transpose() * rel_v];

    for j in 0..2 {
        let mut du_ds = Vector3::zeros();
        let mut du_dsdot = Vector3::zeros();
        for l in 0..2 {
            du_ds += vp[l] * pp[(l, j)] - vm[l] * pm[(l, j)] + v0[l] * p0[(l, j)];
            du_dsdot += h * (vp[l] * pp[(l, j)] + vm[l] * pm[(l, j)]);
        }
        out.d_s[j] = 2.0 * g * u.dot(&du_ds);
        out.d_s_dot[j] = 2.0 * g * u.dot(&du_dsdot);
    }
    Ok(out)
}

/// Gradients of the heading angular rate and acceleration with respect to
/// the virtual variable blocks.
struct RateGrads {
    omega: f64,
    alpha: f64,
    domega_ds: Vector2<f64>,
    domega_dsdot: Vector2<f64>,
    dalpha_ds: Vector2<f64>,
    dalpha_dsdot: Vector2<f64>,
    dalpha_dsddot: Vector2<f64>,
}

fn rate_grads(state: &FlatState) -> Result<RateGrads, PenaltyError> {
    let (_, omega, alpha) = heading_rates(&state.virtual_state())?;
    let j = rot90();
    let (s, sd, sdd) = (state.s, state.s_dot, state.s_ddot);
    let r2 = s.norm_squared();
    let c1 = s.x * sd.y - s.y * sd.x;
    let c2 = s.x * sdd.y - s.y * sdd.x;
    let q = s.dot(&sd);
    let r4 = r2 * r2;

    let domega_ds = -(j * sd) / r2 - 2.0 * c1 * s / r4;
    let domega_dsdot = (j * s) / r2;
    let dalpha_ds = -(j * sdd) / r2 - 2.0 * c2 * s / r4
        - 2.0 * (c1 * sd - q * (j * sd)) / r4
        + 8.0 * q * c1 * s / (r4 * r2);
    let dalpha_dsdot = -2.0 * (c1 * s + q * (j * s)) / r4;
    let dalpha_dsddot = (j * s) / r2;

    Ok(RateGrads {
        omega,
        alpha,
        domega_ds,
        domega_dsdot,
        dalpha_ds,
        dalpha_dsdot,
        dalpha_dsddot,
    })
}

/// Hinges on the squared heading rate and acceleration above their bounds.
pub fn yaw_dynamics_cost(
    state: &FlatState,
    limits: &YawLimits,
    weight: f64,
) -> Result<CostGrad, PenaltyError> {
    let rg = rate_grads(state)?;
    let (val_v, dval_v) = hinge_cubic(rg.omega * rg.omega - limits.v_psi_max * limits.v_psi_max);
    let (val_a, dval_a) = hinge_cubic(rg.alpha * rg.alpha - limits.a_psi_max * limits.a_psi_max);

    let mut out = CostGrad::zero();
    out.value = weight * (val_v + val_a);
    if dval_v != 0.0 {
        let g = weight * dval_v * 2.0 * rg.omega;
        out.d_s += g * rg.domega_ds;
        out.d_s_dot += g * rg.domega_dsdot;
    }
    if dval_a != 0.0 {
        let g = weight * dval_a * 2.0 * rg.alpha;
        out.d_s += g * rg.dalpha_ds;
        out.d_s_dot += g * rg.dalpha_dsdot;
        out.d_s_ddot += g * rg.dalpha_dsddot;
    }
    Ok(out)
}

/// Hinges keeping the virtual variable away from the origin and its
/// derivatives within bounds. This cost is what repels the singularity, so
/// it never errors.
pub fn virtual_bounds_cost(state: &FlatState, limits: &YawLimits, weight: f64) -> CostGrad {
    let mut out = CostGrad::zero();

    let (val_r, dval_r) = hinge_cubic(limits.r_min * limits.r_min - state.s.norm_squared());
    out.value += weight * val_r;
    out.d_s += weight * dval_r * (-2.0 * state.s);

    let (val_v, dval_v) = hinge_cubic(state.s_dot.norm_squared() - limits.v_s_max * limits.v_s_max);
    out.value += weight * val_v;
    out.d_s_dot += weight * dval_v * 2.0 * state.s_dot;

    let (val_a, dval_a) =
        hinge_cubic(state.s_ddot.norm_squared() - limits.a_s_max * limits.a_s_max);
    out.value += weight * val_a;
    out.d_s_ddot += weight * dval_a * 2.0 * state.s_ddot;

    out
}

/// Hinges on squared speed and acceleration above their bounds.
pub fn position_limits_cost(state: &FlatState, v_max: f64, a_max: f64, weight: f64) -> CostGrad {
    let mut out = CostGrad::zero();

    let (val_v, dval_v) = hinge_cubic(state.v.norm_squared() - v_max * v_max);
    out.value += weight * val_v;
    out.d_v += weight * dval_v * 2.0 * state.v;

    let (val_a, dval_a) = hinge_cubic(state.a.norm_squared() - a_max * a_max);
    out.value += weight * val_a;
    out.d_a += weight * dval_a * 2.0 * state.a;

    out
}

//! Piecewise-polynomial trajectories: evaluation, closed-form minimum-control
//! solving, exact control-effort integrals, and junction-continuity checks.

use nalgebra::{DMatrix, DVector};
use std::io::{self, Write};

/// Errors from spline construction and evaluation.
#[derive(thiserror::Error, Debug)]
pub enum SplineError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("time {t} outside trajectory domain [0, {total}]")]
    OutOfDomain { t: f64, total: f64 },
    #[error("minimum-control system is singular (kappa={kappa}, segments={segments})")]
    SingularSystem { kappa: usize, segments: usize },
}

/// Boundary data for one end of a spline: the value and its first `kappa - 1`
/// time derivatives, each a vector in the curve's dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryState {
    derivatives: Vec<DVector<f64>>,
}

impl BoundaryState {
    pub fn new(derivatives: Vec<DVector<f64>>) -> Result<Self, SplineError> {
        if derivatives.is_empty() {
            return Err(SplineError::InvalidArgument(
                "boundary state needs at least the value row".into(),
            ));
        }
        let dim = derivatives[0].len();
        if derivatives.iter().any(|d| d.len() != dim) {
            return Err(SplineError::InvalidArgument(
                "boundary derivatives must share one dimension".into(),
            ));
        }
        Ok(Self { derivatives })
    }

    /// Rest state: given value, all higher derivatives zero.
    pub fn at_rest(value: DVector<f64>, kappa: usize) -> Self {
        let dim = value.len();
        let mut derivatives = vec![value];
        derivatives.resize(kappa.max(1), DVector::zeros(dim));
        Self { derivatives }
    }

    pub fn order(&self) -> usize {
        self.derivatives.len()
    }

    pub fn dim(&self) -> usize {
        self.derivatives[0].len()
    }

    pub fn derivative(&self, k: usize) -> &DVector<f64> {
        &self.derivatives[k]
    }
}

/// An `M`-segment polynomial curve in `d` dimensions.
///
/// Each segment stores an `(N+1) x d` matrix of monomial coefficients in
/// ascending degree, evaluated in segment-local time `t - t_{i-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePoly {
    segments: Vec<DMatrix<f64>>,
    durations: Vec<f64>,
    prefix: Vec<f64>,
    dim: usize,
}

impl PiecewisePoly {
    pub fn new(segments: Vec<DMatrix<f64>>, durations: Vec<f64>) -> Result<Self, SplineError> {
        if segments.is_empty() || segments.len() != durations.len() {
            return Err(SplineError::InvalidArgument(format!(
                "segment/duration count mismatch: {} vs {}",
                segments.len(),
                durations.len()
            )));
        }
        if durations.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(SplineError::InvalidArgument(
                "all segment durations must be strictly positive".into(),
            ));
        }
        let (rows, dim) = (segments[0].nrows(), segments[0].ncols());
        if rows == 0 || dim == 0 {
            return Err(SplineError::InvalidArgument(
                "segments must have at least one coefficient row and one column".into(),
            ));
        }
        if segments.iter().any(|s| s.nrows() != rows || s.ncols() != dim) {
            return Err(SplineError::InvalidArgument(
                "all segments must share degree and dimension".into(),
            ));
        }
        let mut prefix = Vec::with_capacity(durations.len() + 1);
        let mut acc = 0.0;
        prefix.push(0.0);
        for &d in &durations {
            acc += d;
            prefix.push(acc);
        }
        Ok(Self {
            segments,
            durations,
            prefix,
            dim,
        })
    }

    /// Single-segment constant curve.
    pub fn constant(value: DVector<f64>, duration: f64) -> Result<Self, SplineError> {
        let dim = value.len();
        let mut seg = DMatrix::zeros(1, dim);
        seg.row_mut(0).copy_from(&value.transpose());
        Self::new(vec![seg], vec![duration])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.segments[0].nrows() - 1
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn total_duration(&self) -> f64 {
        *self.prefix.last().unwrap()
    }

    /// Knot times including both endpoints.
    pub fn knot_times(&self) -> &[f64] {
        &self.prefix
    }

    pub fn segment(&self, i: usize) -> &DMatrix<f64> {
        &self.segments[i]
    }

    /// Segment index and local time for a global time.
    ///
    /// Interior knots resolve to the right-hand segment; the final instant
    /// resolves to the last segment.
    pub fn locate(&self, t: f64) -> Result<(usize, f64), SplineError> {
        let total = self.total_duration();
        if !(0.0..=total).contains(&t) {
            return Err(SplineError::OutOfDomain { t, total });
        }
        let i = self.prefix[1..self.prefix.len() - 1]
            .partition_point(|&edge| edge <= t)
            .min(self.segments.len() - 1);
        Ok((i, t - self.prefix[i]))
    }

    /// `k`-th derivative of the curve at time `t`.
    pub fn eval(&self, t: f64, k: usize) -> Result<DVector<f64>, SplineError> {
        let (i, tau) = self.locate(t)?;
        Ok(self.eval_segment(i, tau, k))
    }

    /// `k`-th derivative of segment `i` at local time `tau`. No domain check.
    pub fn eval_segment(&self, i: usize, tau: f64, k: usize) -> DVector<f64> {
        let seg = &self.segments[i];
        let mut out = DVector::zeros(self.dim);
        let n = seg.nrows();
        if k >= n {
            return out;
        }
        // Horner in tau over orders r = k..N with factor r!/(r-k)!.
        for r in (k..n).rev() {
            let fac = falling_factorial(r, k);
            for d in 0..self.dim {
                out[d] = out[d] * tau + fac * seg[(r, d)];
            }
        }
        out
    }

    /// Same curve traced over durations multiplied by `factor`; the `k`-th
    /// derivative scales by `factor^{-k}`.
    pub fn time_scale(&self, factor: f64) -> Result<Self, SplineError> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(SplineError::InvalidArgument(format!(
                "time-scale factor must be positive, got {factor}"
            )));
        }
        let segments = self
            .segments
            .iter()
            .map(|seg| {
                let mut s = seg.clone();
                let mut scale = 1.0;
                for r in 0..s.nrows() {
                    s.row_mut(r).scale_mut(scale);
                    scale /= factor;
                }
                s
            })
            .collect();
        let durations = self.durations.iter().map(|d| d * factor).collect();
        Self::new(segments, durations)
    }

    /// Exact integral of the squared `kappa`-th derivative over the domain.
    pub fn control_effort(&self, kappa: usize) -> f64 {
        let n = self.segments[0].nrows();
        let mut total = 0.0;
        for (seg, &dt) in self.segments.iter().zip(&self.durations) {
            let q = effort_gram(n - 1, kappa, dt);
            for d in 0..self.dim {
                let c = seg.column(d);
                total += (q.clone() * c).dot(&c);
            }
        }
        total
    }

    /// Gradient of [`Self::control_effort`] with respect to the coefficients,
    /// one matrix per segment in the segment's own shape.
    pub fn control_effort_gradient(&self, kappa: usize) -> Vec<DMatrix<f64>> {
        let n = self.segments[0].nrows();
        self.segments
            .iter()
            .zip(&self.durations)
            .map(|(seg, &dt)| 2.0 * effort_gram(n - 1, kappa, dt) * seg)
            .collect()
    }

    /// Maximum absolute derivative mismatch (orders `0..=up_to`) over all
    /// interior junctions. A single-segment curve reports zero.
    pub fn continuity_report(&self, up_to: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.segments.len().saturating_sub(1) {
            for k in 0..=up_to {
                let left = self.eval_segment(i, self.durations[i], k);
                let right = self.eval_segment(i + 1, 0.0, k);
                worst = worst.max((left - right).amax());
            }
        }
        worst
    }

    /// Dump uniformly sampled values and derivatives `0..=max_deriv` as CSV
    /// with header `t,x0,..,d1_x0,..`.
    pub fn write_samples_csv<W: Write>(
        &self,
        max_deriv: usize,
        sample_hz: f64,
        out: &mut W,
    ) -> io::Result<()> {
        write!(out, "t")?;
        for k in 0..=max_deriv {
            for d in 0..self.dim {
                if k == 0 {
                    write!(out, ",x{d}")?;
                } else {
                    write!(out, ",d{k}_x{d}")?;
                }
            }
        }
        writeln!(out)?;
        let total = self.total_duration();
        let steps = (total * sample_hz).ceil() as usize;
        for i in 0..=steps {
            let t = (i as f64 / sample_hz).min(total);
            write!(out, "{t:.9}")?;
            for k in 0..=max_deriv {
                let v = self.eval(t, k).expect("sample inside domain");
                for d in 0..self.dim {
                    write!(out, ",{:.9}", v[d])?;
                }
            }
            writeln!(out)?;
            if t >= total {
                break;
            }
        }
        Ok(())
    }
}

fn falling_factorial(r: usize, k: usize) -> f64 {
    let mut f = 1.0;
    for j in (r - k + 1)..=r {
        f *= j as f64;
    }
    f
}

/// Gram matrix of the squared `kappa`-th derivative of the monomial basis of
/// degree `n` over `[0, dt]`.
fn effort_gram(n: usize, kappa: usize, dt: f64) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n + 1, n + 1);
    for r in kappa..=n {
        for s in kappa..=n {
            let pow = (r + s) as i32 - 2 * kappa as i32 + 1;
            q[(r, s)] = falling_factorial(r, kappa) * falling_factorial(s, kappa)
                * dt.powi(pow)
                / pow as f64;
        }
    }
    q
}

/// Map from segment coefficients to derivatives of orders `0..kappa` at both
/// segment ends, for degree `2*kappa - 1`.
fn hermite_map(kappa: usize, dt: f64) -> DMatrix<f64> {
    let n = 2 * kappa;
    let mut h = DMatrix::zeros(n, n);
    for j in 0..kappa {
        h[(j, j)] = falling_factorial(j, j);
        for r in j..n {
            h[(kappa + j, r)] = falling_factorial(r, j) * dt.powi((r - j) as i32);
        }
    }
    h
}

/// Factorized minimum-control problem for a fixed time allocation and order.
///
/// The interpolation constraints are linear, so the optimal coefficients are
/// an affine function of the boundary states and waypoint values; the same
/// scalar operator applies to every dimension. Building the system once lets
/// repeated solves and waypoint sensitivities reuse the factorization.
pub struct MinControlSystem {
    kappa: usize,
    durations: Vec<f64>,
    h_inv: Vec<DMatrix<f64>>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    g_fx: DMatrix<f64>,
    free_idx: Vec<usize>,
    fixed_idx: Vec<usize>,
    sensitivity: DMatrix<f64>,
}

impl MinControlSystem {
    pub fn new(durations: &[f64], kappa: usize) -> Result<Self, SplineError> {
        if kappa == 0 {
            return Err(SplineError::InvalidArgument("kappa must be >= 1".into()));
        }
        if durations.is_empty() {
            return Err(SplineError::InvalidArgument(
                "at least one segment duration is required".into(),
            ));
        }
        if durations.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(SplineError::InvalidArgument(
                "all segment durations must be strictly positive".into(),
            ));
        }
        let m = durations.len();
        let n_knots = m + 1;
        let n_tot = n_knots * kappa;

        let mut h_inv = Vec::with_capacity(m);
        let mut g_total = DMatrix::zeros(n_tot, n_tot);
        for (i, &dt) in durations.iter().enumerate() {
            let h = hermite_map(kappa, dt);
            let hi = h.try_inverse().ok_or(SplineError::SingularSystem {
                kappa,
                segments: m,
            })?;
            let q = effort_gram(2 * kappa - 1, kappa, dt);
            let g = hi.transpose() * q * &hi;
            let base = i * kappa;
            for a in 0..2 * kappa {
                for b in 0..2 * kappa {
                    g_total[(base + a, base + b)] += g[(a, b)];
                }
            }
            h_inv.push(hi);
        }

        // Knot layout: index k*kappa + j holds derivative order j at knot k.
        // Fixed: both boundary knots fully, plus order 0 at interior knots.
        let mut free_idx = Vec::new();
        let mut fixed_idx = Vec::new();
        for k in 0..n_knots {
            for j in 0..kappa {
                let idx = k * kappa + j;
                if k == 0 || k == m || j == 0 {
                    fixed_idx.push(idx);
                } else {
                    free_idx.push(idx);
                }
            }
        }

        let g_ff = gather(&g_total, &free_idx, &free_idx);
        let g_fx = gather(&g_total, &free_idx, &fixed_idx);
        let chol = if free_idx.is_empty() {
            None
        } else {
            Some(
                nalgebra::Cholesky::new(g_ff).ok_or(SplineError::SingularSystem {
                    kappa,
                    segments: m,
                })?,
            )
        };

        let mut sys = Self {
            kappa,
            durations: durations.to_vec(),
            h_inv,
            chol,
            g_fx,
            free_idx,
            fixed_idx,
            sensitivity: DMatrix::zeros(0, 0),
        };
        sys.sensitivity = sys.build_sensitivity();
        Ok(sys)
    }

    pub fn num_segments(&self) -> usize {
        self.durations.len()
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    /// Jacobian of the stacked scalar coefficient vector (segment-major,
    /// ascending degree) with respect to the interior waypoint values. The
    /// same matrix applies to every dimension of the curve.
    pub fn waypoint_sensitivity(&self) -> &DMatrix<f64> {
        &self.sensitivity
    }

    fn build_sensitivity(&self) -> DMatrix<f64> {
        let m = self.durations.len();
        let kappa = self.kappa;
        let n_coef = 2 * kappa;
        let mut sens = DMatrix::zeros(m * n_coef, m.saturating_sub(1));
        for j in 0..m.saturating_sub(1) {
            let mut fixed = DVector::zeros(self.fixed_idx.len());
            let knot_idx = (j + 1) * kappa;
            let pos = self
                .fixed_idx
                .iter()
                .position(|&ix| ix == knot_idx)
                .expect("interior waypoint is a fixed index");
            fixed[pos] = 1.0;
            let knots = self.solve_knots(&fixed);
            for i in 0..m {
                let ends = knots.rows(i * kappa, n_coef).into_owned();
                let coef = &self.h_inv[i] * ends;
                sens.view_mut((i * n_coef, j), (n_coef, 1)).copy_from(&coef);
            }
        }
        sens
    }

    /// Knot derivative stack for one dimension given its fixed values.
    fn solve_knots(&self, fixed: &DVector<f64>) -> DVector<f64> {
        let n_tot = (self.durations.len() + 1) * self.kappa;
        let mut knots = DVector::zeros(n_tot);
        for (pos, &idx) in self.fixed_idx.iter().enumerate() {
            knots[idx] = fixed[pos];
        }
        if let Some(chol) = &self.chol {
            let rhs = -(&self.g_fx * fixed);
            let free = chol.solve(&rhs);
            for (pos, &idx) in self.free_idx.iter().enumerate() {
                knots[idx] = free[pos];
            }
        }
        knots
    }

    /// Solve for the curve through the given boundary states and waypoints.
    pub fn solve(
        &self,
        bc0: &BoundaryState,
        bc_end: &BoundaryState,
        waypoints: &[DVector<f64>],
    ) -> Result<PiecewisePoly, SplineError> {
        let m = self.durations.len();
        let kappa = self.kappa;
        if waypoints.len() + 1 != m {
            return Err(SplineError::InvalidArgument(format!(
                "expected {} waypoints for {} segments, got {}",
                m - 1,
                m,
                waypoints.len()
            )));
        }
        if bc0.order() != kappa || bc_end.order() != kappa {
            return Err(SplineError::InvalidArgument(format!(
                "boundary states must carry exactly kappa={kappa} derivative rows"
            )));
        }
        let dim = bc0.dim();
        if bc_end.dim() != dim || waypoints.iter().any(|w| w.len() != dim) {
            return Err(SplineError::InvalidArgument(
                "boundary states and waypoints must share one dimension".into(),
            ));
        }

        let n_coef = 2 * kappa;
        let mut segments = vec![DMatrix::zeros(n_coef, dim); m];
        for d in 0..dim {
            let mut fixed = DVector::zeros(self.fixed_idx.len());
            for (pos, &idx) in self.fixed_idx.iter().enumerate() {
                let knot = idx / kappa;
                let order = idx % kappa;
                fixed[pos] = if knot == 0 {
                    bc0.derivative(order)[d]
                } else if knot == m {
                    bc_end.derivative(order)[d]
                } else {
                    waypoints[knot - 1][d]
                };
            }
            let knots = self.solve_knots(&fixed);
            for i in 0..m {
                let ends = knots.rows(i * kappa, n_coef).into_owned();
                let coef = &self.h_inv[i] * ends;
                segments[i].column_mut(d).copy_from(&coef);
            }
        }
        PiecewisePoly::new(segments, self.durations.clone())
    }
}

fn gather(g: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), cols.len());
    for (a, &r) in rows.iter().enumerate() {
        for (b, &c) in cols.iter().enumerate() {
            out[(a, b)] = g[(r, c)];
        }
    }
    out
}

/// Unique curve of degree `2*kappa - 1` that attains the boundary states,
/// interpolates the waypoints at the knots, is `C^{kappa-1}` across knots,
/// and minimizes the integral of the squared `kappa`-th derivative.
pub fn solve_min_control(
    bc0: &BoundaryState,
    bc_end: &BoundaryState,
    waypoints: &[DVector<f64>],
    durations: &[f64],
    kappa: usize,
) -> Result<PiecewisePoly, SplineError> {
    MinControlSystem::new(durations, kappa)?.solve(bc0, bc_end, waypoints)
}

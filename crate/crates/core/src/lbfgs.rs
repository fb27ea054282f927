//! Limited-memory BFGS with a strong-Wolfe line search.

use nalgebra::DVector;
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsParams {
    /// Number of curvature pairs kept for the two-loop recursion.
    pub memory: usize,
    pub max_iters: usize,
    /// Sufficient-decrease constant of the Wolfe conditions.
    pub c1: f64,
    /// Curvature constant of the Wolfe conditions.
    pub c2: f64,
    /// Converged when the gradient norm drops below
    /// `g_tol_rel * max(1, |f|)`.
    pub g_tol_rel: f64,
    pub max_line_iters: usize,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            memory: 8,
            max_iters: 500,
            c1: 1e-4,
            c2: 0.9,
            g_tol_rel: 1e-6,
            max_line_iters: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub g_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each accepted step, starting at the initial
    /// point.
    pub f_history: Vec<f64>,
}

struct Pair {
    s: DVector<f64>,
    y: DVector<f64>,
    rho: f64,
}

/// Two-loop recursion for the search direction `-H g`.
fn search_direction(pairs: &VecDeque<Pair>, g: &DVector<f64>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for pair in pairs.iter().rev() {
        let alpha = pair.rho * pair.s.dot(&q);
        q.axpy(-alpha, &pair.y, 1.0);
        alphas.push(alpha);
    }
    if let Some(last) = pairs.back() {
        let gamma = last.s.dot(&last.y) / last.y.norm_squared();
        q *= gamma;
    }
    for (pair, &alpha) in pairs.iter().zip(alphas.iter().rev()) {
        let beta = pair.rho * pair.y.dot(&q);
        q.axpy(alpha - beta, &pair.s, 1.0);
    }
    -q
}

/// Minimize `f` from `x0`. The callback returns the value and gradient; an
/// `Err` aborts the run and is passed through.
pub fn minimize<E, F>(
    mut eval: F,
    x0: DVector<f64>,
    params: &LbfgsParams,
) -> Result<LbfgsResult, E>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>), E>,
{
    let mut x = x0;
    let (mut f, mut g) = eval(&x)?;
    let mut f_history = vec![f];
    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(params.memory);
    let mut best = (x.clone(), f, g.norm());

    let mut iterations = 0;
    let mut converged = g.norm() <= params.g_tol_rel * f.abs().max(1.0);
    while !converged && iterations < params.max_iters {
        let mut dir = search_direction(&pairs, &g);
        let mut slope = g.dot(&dir);
        if !slope.is_finite() || slope >= 0.0 {
            // Curvature memory went stale; restart from steepest descent.
            pairs.clear();
            dir = -g.clone();
            slope = g.dot(&dir);
            if slope >= 0.0 {
                break;
            }
        }

        // Unit steps only make sense once curvature is known; the first
        // trial is scaled so the move stays order-one in x.
        let t_init = if pairs.is_empty() {
            (1.0 / dir.norm()).min(1.0)
        } else {
            1.0
        };
        match wolfe_search(&mut eval, &x, f, &dir, slope, t_init, params)? {
            Some((step, fx, gx)) => {
                let x_new = &x + step * &dir;
                let s = &x_new - &x;
                let y = &gx - &g;
                let sy = s.dot(&y);
                if sy > 1e-12 * s.norm() * y.norm() {
                    if pairs.len() == params.memory {
                        pairs.pop_front();
                    }
                    let rho = 1.0 / sy;
                    pairs.push_back(Pair { s, y, rho });
                }
                x = x_new;
                f = fx;
                g = gx;
                f_history.push(f);
                if f < best.1 {
                    best = (x.clone(), f, g.norm());
                }
            }
            None if !pairs.is_empty() => {
                // Retry the point along plain steepest descent before
                // declaring the search stuck.
                pairs.clear();
            }
            None => break,
        }
        iterations += 1;
        converged = g.norm() <= params.g_tol_rel * f.abs().max(1.0);
    }

    if f <= best.1 {
        best = (x, f, g.norm());
    }
    Ok(LbfgsResult {
        x: best.0,
        f: best.1,
        g_norm: best.2,
        iterations,
        converged,
        f_history,
    })
}

/// Strong-Wolfe line search (bracket and zoom). Returns the accepted step
/// with its value and gradient, or `None` on failure.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<E, F>(
    eval: &mut F,
    x: &DVector<f64>,
    f0: f64,
    dir: &DVector<f64>,
    slope0: f64,
    t_init: f64,
    params: &LbfgsParams,
) -> Result<Option<(f64, f64, DVector<f64>)>, E>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>), E>,
{
    let phi = |eval: &mut F, t: f64| -> Result<(f64, f64, DVector<f64>), E> {
        let xt = x + t * dir;
        let (ft, gt) = eval(&xt)?;
        let st = gt.dot(dir);
        Ok((ft, st, gt))
    };

    let mut t_prev = 0.0;
    let mut f_prev = f0;
    let mut s_prev = slope0;
    let mut t = t_init;
    let mut bracket = None;
    for i in 0..params.max_line_iters {
        let (ft, st, gt) = phi(eval, t)?;
        if ft > f0 + params.c1 * t * slope0 || (i > 0 && ft >= f_prev) {
            bracket = Some((t_prev, f_prev, s_prev, t, ft, st));
            break;
        }
        if st.abs() <= -params.c2 * slope0 {
            return Ok(Some((t, ft, gt)));
        }
        if st >= 0.0 {
            bracket = Some((t, ft, st, t_prev, f_prev, s_prev));
            break;
        }
        t_prev = t;
        f_prev = ft;
        s_prev = st;
        t *= 2.0;
    }
    let Some((mut lo, mut f_lo, mut s_lo, mut hi, mut f_hi, _)) = bracket else {
        return Ok(None);
    };

    for _ in 0..params.max_line_iters {
        // Quadratic interpolation with a bisection safeguard.
        let mut t = lo - 0.5 * s_lo * (hi - lo) * (hi - lo)
            / (f_hi - f_lo - s_lo * (hi - lo));
        let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
        let span = b - a;
        if !t.is_finite() || t <= a + 0.1 * span || t >= b - 0.1 * span {
            t = 0.5 * (lo + hi);
        }
        let (ft, st, gt) = phi(eval, t)?;
        if ft > f0 + params.c1 * t * slope0 || ft >= f_lo {
            hi = t;
            f_hi = ft;
        } else {
            if st.abs() <= -params.c2 * slope0 {
                return Ok(Some((t, ft, gt)));
            }
            if st * (hi - lo) >= 0.0 {
                hi = lo;
                f_hi = f_lo;
            }
            lo = t;
            f_lo = ft;
            s_lo = st;
        }
        if (hi - lo).abs() * dir.norm() < 1e-14 {
            break;
        }
    }
    Ok(None)
}

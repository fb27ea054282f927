//! Randomized yaw-planner benchmark: seeded instance generation, the three
//! planners run over shared position trajectories and time allocations, and
//! per-method aggregates of cost, distance, speed, and success.

use crate::splines::{solve_min_control, BoundaryState, PiecewisePoly, SplineError};
use crate::traversal::{allocate_times, TraversalError};
use crate::yawparam::{HeadingVector, YawError, YawLimits};
use crate::yawqp::{
    plan_virtual_yaw, plan_yaw_unwrapped_baseline, plan_yaw_wrapped_baseline, PlanStatus,
    YawAngleBoundary, YawBoundary, YawPlanRequest, YawTrajectory, DEFAULT_N_CHECK,
};
use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::io::{self, Write};
use std::time::Instant;

#[derive(thiserror::Error, Debug)]
pub enum BenchError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Yaw(#[from] YawError),
    #[error(transparent)]
    Traversal(#[from] TraversalError),
}

/// Instance-generation parameters.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Random-map extents in meters.
    pub box_size: [f64; 3],
    /// Inclusive range of waypoint counts per instance.
    pub waypoints_min: usize,
    pub waypoints_max: usize,
    pub v_nominal: f64,
    pub omega_nominal: f64,
    pub limits: YawLimits,
    /// Bound-check points per segment inside the planners.
    pub n_check: usize,
    /// Quadrature subintervals per segment for the comparable cost.
    pub accel_quad_points: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            box_size: [20.0, 20.0, 5.0],
            waypoints_min: 4,
            waypoints_max: 8,
            v_nominal: 2.0,
            omega_nominal: 1.0,
            limits: YawLimits::default(),
            n_check: DEFAULT_N_CHECK,
            accel_quad_points: 32,
        }
    }
}

/// One randomized problem: a position trajectory and yaw keyframe angles
/// over a shared time allocation.
#[derive(Debug, Clone)]
pub struct BenchInstance {
    pub seed: u64,
    pub waypoints: Vec<Vector3<f64>>,
    /// Branch angles in `(-pi, pi]`, one per waypoint.
    pub yaw_angles: Vec<f64>,
    pub durations: Vec<f64>,
    pub position_traj: PiecewisePoly,
    pub limits: YawLimits,
}

impl BenchInstance {
    pub fn total_duration(&self) -> f64 {
        self.durations.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Virtual,
    Wrapped,
    Unwrapped,
}

pub const ALL_METHODS: [Method; 3] = [Method::Virtual, Method::Wrapped, Method::Unwrapped];

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Virtual => "virtual",
            Method::Wrapped => "wrapped",
            Method::Unwrapped => "unwrapped",
        }
    }

    pub fn parse(s: &str) -> Result<Self, BenchError> {
        match s.trim() {
            "virtual" => Ok(Method::Virtual),
            "wrapped" => Ok(Method::Wrapped),
            "unwrapped" => Ok(Method::Unwrapped),
            other => Err(BenchError::InvalidArgument(format!(
                "unknown method '{other}' (expected virtual|wrapped|unwrapped)"
            ))),
        }
    }
}

/// Result of one (instance, method) evaluation. Metrics are NaN when the
/// realized trajectory cannot be measured (singular virtual curve).
#[derive(Debug, Clone, Copy)]
pub struct MethodRun {
    pub instance: usize,
    pub method: Method,
    pub success: bool,
    /// Quadrature of the squared angular acceleration of the realized
    /// heading (rad^2/s^3).
    pub control_cost: f64,
    /// Accumulated yaw distance (rad).
    pub yaw_distance: f64,
    /// yaw_distance / total duration (rad/s).
    pub avg_speed: f64,
    pub solve_time: f64,
}

/// Per-method aggregates over the successful runs.
#[derive(Debug, Clone, Copy)]
pub struct MethodAggregate {
    pub method: Method,
    pub n_runs: usize,
    pub n_success: usize,
    pub success_rate: f64,
    pub median_cost: f64,
    pub mean_cost: f64,
    pub median_distance: f64,
    pub mean_distance: f64,
    pub median_speed: f64,
    pub mean_speed: f64,
    pub mean_solve_time: f64,
}

#[derive(Debug, Clone)]
pub struct BenchResults {
    pub runs: Vec<MethodRun>,
    pub aggregates: Vec<MethodAggregate>,
}

/// Deterministic instance list for a master seed.
pub fn gen_instances(
    master_seed: u64,
    n: usize,
    config: &BenchConfig,
) -> Result<Vec<BenchInstance>, BenchError> {
    if n == 0 {
        return Err(BenchError::InvalidArgument(
            "at least one instance is required".into(),
        ));
    }
    if config.waypoints_min < 2 || config.waypoints_max < config.waypoints_min {
        return Err(BenchError::InvalidArgument(
            "waypoint count range must be ordered and at least 2".into(),
        ));
    }
    config.limits.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(master_seed);
    let seeds: Vec<u64> = (0..n).map(|_| master.gen()).collect();
    seeds
        .into_iter()
        .map(|seed| gen_instance(seed, config))
        .collect()
}

fn gen_instance(seed: u64, config: &BenchConfig) -> Result<BenchInstance, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_wp = rng.gen_range(config.waypoints_min..=config.waypoints_max);
    let waypoints: Vec<Vector3<f64>> = (0..n_wp)
        .map(|_| {
            Vector3::new(
                rng.gen_range(0.0..config.box_size[0]),
                rng.gen_range(0.0..config.box_size[1]),
                rng.gen_range(0.0..config.box_size[2]),
            )
        })
        .collect();
    // Uniform on (-pi, pi]; independent of the positions.
    let yaw_angles: Vec<f64> = (0..n_wp)
        .map(|_| PI - rng.gen::<f64>() * 2.0 * PI)
        .collect();

    let points: Vec<(Vector3<f64>, HeadingVector)> = waypoints
        .iter()
        .zip(&yaw_angles)
        .map(|(p, &a)| (*p, HeadingVector::from_angle(a)))
        .collect();
    let durations = allocate_times(&points, config.v_nominal, config.omega_nominal)?;

    let bc0 = BoundaryState::at_rest(DVector::from_column_slice(waypoints[0].as_slice()), 2);
    let bc_end = BoundaryState::at_rest(
        DVector::from_column_slice(waypoints[n_wp - 1].as_slice()),
        2,
    );
    let interior: Vec<DVector<f64>> = waypoints[1..n_wp - 1]
        .iter()
        .map(|w| DVector::from_column_slice(w.as_slice()))
        .collect();
    let position_traj = solve_min_control(&bc0, &bc_end, &interior, &durations, 2)?;

    Ok(BenchInstance {
        seed,
        waypoints,
        yaw_angles,
        durations,
        position_traj,
        limits: config.limits,
    })
}

/// Fraction of adjacent yaw keyframe pairs whose branch difference exceeds
/// pi (the wrap-around pathology census).
pub fn branch_gap_fraction(instances: &[BenchInstance]) -> f64 {
    let mut pairs = 0usize;
    let mut wraps = 0usize;
    for inst in instances {
        for w in inst.yaw_angles.windows(2) {
            pairs += 1;
            if (w[1] - w[0]).abs() > PI {
                wraps += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        wraps as f64 / pairs as f64
    }
}

/// Plan one instance with one method.
pub fn plan_instance(
    instance: &BenchInstance,
    method: Method,
    config: &BenchConfig,
) -> Result<YawTrajectory, BenchError> {
    let angles = &instance.yaw_angles;
    let last = angles.len() - 1;
    match method {
        Method::Virtual => {
            let req = YawPlanRequest {
                keyframe_headings: angles[1..last]
                    .iter()
                    .map(|&a| HeadingVector::from_angle(a))
                    .collect(),
                radii: vec![1.0; last - 1],
                durations: instance.durations.clone(),
                start: YawBoundary::resting(HeadingVector::from_angle(angles[0])),
                end: YawBoundary::resting(HeadingVector::from_angle(angles[last])),
                limits: instance.limits,
                n_check: config.n_check,
            };
            Ok(plan_virtual_yaw(&req)?)
        }
        Method::Wrapped => Ok(plan_yaw_wrapped_baseline(
            &angles[1..last],
            &instance.durations,
            YawAngleBoundary {
                angle: angles[0],
                rate: 0.0,
            },
            YawAngleBoundary {
                angle: angles[last],
                rate: 0.0,
            },
            &instance.limits,
            config.n_check,
        )?),
        Method::Unwrapped => Ok(plan_yaw_unwrapped_baseline(
            &angles[1..last],
            &instance.durations,
            YawAngleBoundary {
                angle: angles[0],
                rate: 0.0,
            },
            YawAngleBoundary {
                angle: angles[last],
                rate: 0.0,
            },
            &instance.limits,
            config.n_check,
        )?),
    }
}

fn median(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Evaluate every (instance, method) pair over the shared time allocations.
/// Failed runs keep their metrics for diagnostics but are excluded from the
/// cost aggregates.
pub fn run_benchmark(
    instances: &[BenchInstance],
    methods: &[Method],
    config: &BenchConfig,
) -> Result<BenchResults, BenchError> {
    if methods.is_empty() {
        return Err(BenchError::InvalidArgument(
            "at least one method is required".into(),
        ));
    }
    let mut runs = Vec::with_capacity(instances.len() * methods.len());
    for (i, inst) in instances.iter().enumerate() {
        for &method in methods {
            let started = Instant::now();
            let traj = plan_instance(inst, method, config)?;
            let solve_time = started.elapsed().as_secs_f64();
            let success = traj.status == PlanStatus::Success;
            let (cost, distance) = match (
                traj.angular_accel_cost(config.accel_quad_points),
                traj.accumulated_distance(),
            ) {
                (Ok(c), Ok(d)) => (c, d),
                _ => (f64::NAN, f64::NAN),
            };
            runs.push(MethodRun {
                instance: i,
                method,
                success,
                control_cost: cost,
                yaw_distance: distance,
                avg_speed: distance / inst.total_duration(),
                solve_time,
            });
        }
    }

    let aggregates = methods
        .iter()
        .map(|&method| {
            let of_method: Vec<&MethodRun> =
                runs.iter().filter(|r| r.method == method).collect();
            let successes: Vec<&&MethodRun> =
                of_method.iter().filter(|r| r.success).collect();
            let collect = |f: fn(&MethodRun) -> f64| -> (f64, f64) {
                let mut vals: Vec<f64> = successes.iter().map(|r| f(r)).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mean = if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                (median(&vals), mean)
            };
            let (median_cost, mean_cost) = collect(|r| r.control_cost);
            let (median_distance, mean_distance) = collect(|r| r.yaw_distance);
            let (median_speed, mean_speed) = collect(|r| r.avg_speed);
            let mean_solve_time = if of_method.is_empty() {
                0.0
            } else {
                of_method.iter().map(|r| r.solve_time).sum::<f64>() / of_method.len() as f64
            };
            MethodAggregate {
                method,
                n_runs: of_method.len(),
                n_success: successes.len(),
                success_rate: if of_method.is_empty() {
                    0.0
                } else {
                    successes.len() as f64 / of_method.len() as f64
                },
                median_cost,
                mean_cost,
                median_distance,
                mean_distance,
                median_speed,
                mean_speed,
                mean_solve_time,
            }
        })
        .collect();

    Ok(BenchResults { runs, aggregates })
}

/// Write one row per (instance, method) plus a `#`-prefixed summary block.
/// Wall-clock columns are omitted so files are bit-identical across runs.
pub fn write_results<W: Write>(results: &BenchResults, out: &mut W) -> io::Result<()> {
    writeln!(out, "instance,method,success,control_cost,yaw_distance,avg_speed")?;
    for r in &results.runs {
        writeln!(
            out,
            "{},{},{},{:.9},{:.9},{:.9}",
            r.instance,
            r.method.as_str(),
            u8::from(r.success),
            r.control_cost,
            r.yaw_distance,
            r.avg_speed
        )?;
    }
    writeln!(
        out,
        "# method,n_runs,n_success,success_rate,median_cost,mean_cost,median_distance,mean_distance,median_speed,mean_speed"
    )?;
    for a in &results.aggregates {
        writeln!(
            out,
            "# {},{},{},{:.6},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            a.method.as_str(),
            a.n_runs,
            a.n_success,
            a.success_rate,
            a.median_cost,
            a.mean_cost,
            a.median_distance,
            a.mean_distance,
            a.median_speed,
            a.mean_speed
        )?;
    }
    Ok(())
}

/// Aligned human-readable summary (includes wall-clock; stdout only).
pub fn summary_table(results: &BenchResults) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<10} {:>8} {:>9} {:>12} {:>12} {:>10} {:>12}\n",
        "method", "success", "rate", "med_cost", "med_dist", "med_speed", "solve_ms"
    ));
    for a in &results.aggregates {
        s.push_str(&format!(
            "{:<10} {:>3}/{:<4} {:>8.1}% {:>12.4} {:>12.4} {:>10.4} {:>12.3}\n",
            a.method.as_str(),
            a.n_success,
            a.n_runs,
            100.0 * a.success_rate,
            a.median_cost,
            a.median_distance,
            a.median_speed,
            1e3 * a.mean_solve_time
        ));
    }
    s
}

//! Position solvers.
//!
//! The iterative solvers share one damped Gauss-Newton core. Each step solves
//! `(JᵀJ + λ·diag(JᵀJ)) δ = −Jᵀr`; a step is accepted only if it does not
//! increase the cost `Σr²`, otherwise λ grows tenfold and the step is retried.
//! In 2-D the z coordinate stays at its initial value.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::measurement::{AoaMeasurement, RttMeasurement, TdoaSet};
use crate::scenario::{is_degenerate, Bounds, Dimensionality, Node, Position};
use crate::{Error, NodeId, Result};

/// Distance floor inside Jacobian rows.
pub const JACOBIAN_DISTANCE_FLOOR_M: f64 = 1e-9;
/// Bearing systems worse conditioned than this are rejected.
pub const MAX_BEARING_CONDITION: f64 = 1e8;
/// Bearing sets whose widest pairwise crossing angle is below this are rejected.
pub const MIN_BEARING_CROSSING_RAD: f64 = 0.02;
/// TDoA fixes farther from the anchor centroid than this many RMS anchor
/// radii are treated as divergent.
pub const MAX_TDOA_REACH: f64 = 20.0;
/// Largest grid [`brute_force`] will evaluate.
pub const MAX_GRID_CELLS: u64 = 100_000_000;

const LAMBDA_MAX: f64 = 1e12;
const LAMBDA_MIN: f64 = 1e-12;
const DIAG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMethod {
    RttMultilat,
    Tdoa,
    AoaTriang,
    HybridRttAoa,
    BruteForce,
}

impl EstimatorMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorMethod::RttMultilat => "rtt_multilat",
            EstimatorMethod::Tdoa => "tdoa",
            EstimatorMethod::AoaTriang => "aoa_triang",
            EstimatorMethod::HybridRttAoa => "hybrid_rtt_aoa",
            EstimatorMethod::BruteForce => "brute_force",
        }
    }
}

impl std::fmt::Display for EstimatorMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub position: Position,
    pub method: EstimatorMethod,
    pub iterations: usize,
    pub converged: bool,
    /// `sqrt(Σr²)` at the returned position, m.
    pub final_residual_norm: f64,
    /// The measurements admit more than one exact solution; the one nearest
    /// the initial guess was returned.
    #[serde(default)]
    pub ambiguous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitStrategy {
    #[default]
    AnchorCentroid,
    Provided { position: Position },
    /// Anchor centroid plus one start on either side of it along each
    /// principal axis of the anchor layout; the lowest final cost wins.
    MultiStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub step_tolerance_m: f64,
    pub damping_initial: f64,
    pub init: InitStrategy,
    pub dimensionality: Dimensionality,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance_m: 1e-6,
            damping_initial: 1e-3,
            init: InitStrategy::AnchorCentroid,
            dimensionality: Dimensionality::TwoD,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1
            || !(self.step_tolerance_m > 0.0 && self.step_tolerance_m.is_finite())
            || !(self.damping_initial > 0.0 && self.damping_initial.is_finite())
        {
            return Err(Error::Config(format!("invalid solver settings {self:?}")));
        }
        if let InitStrategy::Provided { position } = self.init {
            if !position.is_finite() {
                return Err(Error::Config("initial position must be finite".into()));
            }
        }
        Ok(())
    }

    fn initial(&self, anchors: &[Position]) -> Result<Position> {
        match self.init {
            InitStrategy::Provided { position } => Ok(position),
            InitStrategy::AnchorCentroid | InitStrategy::MultiStart => Position::centroid(anchors)
                .ok_or_else(|| Error::Config("no anchors to initialize from".into())),
        }
    }

    fn starts(&self, anchors: &[Position]) -> Result<Vec<Position>> {
        let centre = self.initial(anchors)?;
        if self.init != InitStrategy::MultiStart {
            return Ok(vec![centre]);
        }
        let axes = self.dimensionality.axes();
        let mut scatter = nalgebra::DMatrix::<f64>::zeros(axes, axes);
        for a in anchors {
            let v = *a - centre;
            for i in 0..axes {
                for j in 0..axes {
                    scatter[(i, j)] += v[i] * v[j];
                }
            }
        }
        let eig = (scatter / anchors.len() as f64).symmetric_eigen();
        let spread = eig.eigenvalues.iter().cloned().fold(0.0, f64::max).sqrt().max(1.0);
        let mut out = vec![centre];
        for k in 0..axes {
            let mut dir = Vector3::zeros();
            for i in 0..axes {
                dir[i] = eig.eigenvectors[(i, k)];
            }
            for sign in [1.0, -1.0, 2.0, -2.0] {
                out.push(centre + dir * (sign * spread));
            }
        }
        // the cost is non-smooth at each anchor, which splits basins there
        out.extend(anchors.iter().map(|a| *a + (centre - *a) * 0.1));
        Ok(out)
    }
}

/// Runs [`gauss_newton`] from every start and keeps the lowest final cost.
/// Lowest-cost solve over `starts`. With a `region` (centre, radius), solutions
/// outside it are discarded.
fn best_of<P: Residuals + ?Sized>(
    problem: &P,
    starts: &[Position],
    axes: usize,
    settings: &SolverSettings,
    region: Option<(Position, f64)>,
) -> Result<SolveTrace> {
    // costs within this margin tie; ties go to the solution nearest the first start
    let tied = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.min(b));
    let centre = starts.first().copied();
    let mut best: Option<(f64, SolveTrace)> = None;
    let mut last_err = None;
    for x0 in starts {
        match gauss_newton(problem, *x0, axes, settings) {
            Ok(t) if region.is_some_and(|(o, r)| t.position.distance(&o) > r) => {
                last_err = Some(Error::Geometry("solution diverged away from the anchors".into()));
            }
            Ok(t) => {
                let c = problem.cost(&t.position);
                let better = match (&best, centre) {
                    (None, _) => true,
                    (Some((bc, bt)), Some(o)) if tied(c, *bc) => t.position.distance(&o) < bt.position.distance(&o),
                    (Some((bc, _)), _) => c < *bc,
                };
                if better {
                    best = Some((c, t));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some((_, t)), _) => Ok(t),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::Config("no starting points".into())),
    }
}

/// Outcome of the Gauss-Newton core.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    pub position: Position,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after every accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// A least-squares problem in position.
pub trait Residuals {
    fn residuals(&self, x: &Position) -> DVector<f64>;
    /// One row per residual, columns x, y, z.
    fn jacobian(&self, x: &Position) -> DMatrix<f64>;

    fn cost(&self, x: &Position) -> f64 {
        self.residuals(x).norm_squared()
    }
}

/// Damped Gauss-Newton from `x0` over the first `axes` coordinates.
pub fn gauss_newton<P: Residuals + ?Sized>(
    problem: &P,
    x0: Position,
    axes: usize,
    settings: &SolverSettings,
) -> Result<SolveTrace> {
    settings.validate()?;
    let mut x = x0;
    let mut r = problem.residuals(&x);
    let mut cost = r.norm_squared();
    let mut lambda = settings.damping_initial;
    let mut history = vec![cost];
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < settings.max_iterations {
        iterations += 1;
        let j = problem.jacobian(&x).columns(0, axes).into_owned();
        let a = j.transpose() * &j;
        let g = j.transpose() * &r;
        // isotropic damping keeps the iteration equivariant under rotations
        let scale = (a.trace() / axes as f64).max(DIAG_FLOOR);
        if let Some(chol) = a.clone().cholesky() {
            if chol.solve(&(-&g)).norm() <= settings.step_tolerance_m {
                converged = true;
                break;
            }
        }
        loop {
            let mut m = a.clone();
            for i in 0..axes {
                m[(i, i)] += lambda * scale;
            }
            let Some(chol) = m.cholesky() else {
                lambda *= 10.0;
                if lambda > LAMBDA_MAX {
                    return Err(Error::Geometry(
                        "normal equations stay singular under maximal damping".into(),
                    ));
                }
                continue;
            };
            let delta = chol.solve(&(-&g));
            let step = delta.norm();
            let mut candidate = x.to_vector();
            for i in 0..axes {
                candidate[i] += delta[i];
            }
            let candidate = Position::from_vector(&candidate);
            let r_new = problem.residuals(&candidate);
            let cost_new = r_new.norm_squared();
            if cost_new.is_finite() && cost_new <= cost {
                x = candidate;
                r = r_new;
                cost = cost_new;
                history.push(cost);
                lambda = (lambda / 10.0).max(LAMBDA_MIN);
                break;
            }
            if step <= settings.step_tolerance_m {
                // no descent left within tolerance: x is a minimizer
                converged = true;
                break 'outer;
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                break 'outer;
            }
        }
    }

    if converged {
        x = polish(problem, x, axes);
    }
    Ok(SolveTrace {
        position: x,
        iterations,
        converged,
        cost_history: history,
    })
}

/// Gradient-driven refinement near a converged point. Each step follows the
/// Gauss-Newton direction, scaled by the secant estimate that minimizes the
/// gradient norm along it, and is kept while the gradient norm shrinks. Cost
/// comparisons cannot resolve positions on a flat minimum below about
/// `sqrt(ε)`; the gradient can.
fn polish<P: Residuals + ?Sized>(problem: &P, mut x: Position, axes: usize) -> Position {
    let gradient = |x: &Position| {
        let j = problem.jacobian(x).columns(0, axes).into_owned();
        let r = problem.residuals(x);
        let g = j.transpose() * &r;
        (j, g)
    };
    let shifted = |x: &Position, delta: &DVector<f64>, alpha: f64| {
        let mut v = x.to_vector();
        for i in 0..axes {
            v[i] += alpha * delta[i];
        }
        Position::from_vector(&v)
    };
    let (mut j, mut g) = gradient(&x);
    for _ in 0..50 {
        let Some(chol) = (j.transpose() * &j).cholesky() else {
            break;
        };
        let delta = chol.solve(&(-&g));
        let (_, g_full) = gradient(&shifted(&x, &delta, 1.0));
        let y = &g_full - &g;
        let yy = y.norm_squared();
        let alpha = if yy > 0.0 { -g.dot(&y) / yy } else { 1.0 };
        let candidate = shifted(&x, &delta, if alpha.is_finite() && alpha > 0.0 { alpha } else { 1.0 });
        let (j_new, g_new) = gradient(&candidate);
        if !(g_new.norm() < g.norm()) {
            break;
        }
        x = candidate;
        j = j_new;
        g = g_new;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeObservation {
    pub anchor: Position,
    pub range_m: f64,
}

/// Residuals `‖x − aᵢ‖ − rᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeProblem {
    pub observations: Vec<RangeObservation>,
}

impl Residuals for RangeProblem {
    fn residuals(&self, x: &Position) -> DVector<f64> {
        DVector::from_iterator(
            self.observations.len(),
            self.observations.iter().map(|o| x.distance(&o.anchor) - o.range_m),
        )
    }

    fn jacobian(&self, x: &Position) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.observations.len(), 3);
        for (row, o) in self.observations.iter().enumerate() {
            let v = *x - o.anchor;
            let u = v / v.norm().max(JACOBIAN_DISTANCE_FLOOR_M);
            j.row_mut(row).copy_from(&u.transpose());
        }
        j
    }
}

/// Residuals `(‖x − aᵢ‖ − ‖x − a_ref‖) − diffᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdoaProblem {
    pub reference: Position,
    pub anchors: Vec<Position>,
    pub diffs_m: Vec<f64>,
}

impl TdoaProblem {
    pub fn from_set(set: &TdoaSet, positions: &BTreeMap<NodeId, Position>) -> Result<Self> {
        let lookup = |id: NodeId| {
            positions
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Config(format!("no position for anchor {id}")))
        };
        Ok(Self {
            reference: lookup(set.ref_anchor_id)?,
            anchors: set
                .diffs
                .iter()
                .map(|d| lookup(d.anchor_id))
                .collect::<Result<_>>()?,
            diffs_m: set.diffs.iter().map(|d| d.diff_m).collect(),
        })
    }

    fn all_anchors(&self) -> Vec<Position> {
        std::iter::once(self.reference).chain(self.anchors.iter().copied()).collect()
    }
}

impl Residuals for TdoaProblem {
    fn residuals(&self, x: &Position) -> DVector<f64> {
        let d_ref = x.distance(&self.reference);
        DVector::from_iterator(
            self.anchors.len(),
            self.anchors
                .iter()
                .zip(&self.diffs_m)
                .map(|(a, d)| x.distance(a) - d_ref - d),
        )
    }

    fn jacobian(&self, x: &Position) -> DMatrix<f64> {
        let unit = |a: &Position| {
            let v = *x - *a;
            v / v.norm().max(JACOBIAN_DISTANCE_FLOOR_M)
        };
        let u_ref = unit(&self.reference);
        let mut j = DMatrix::zeros(self.anchors.len(), 3);
        for (row, a) in self.anchors.iter().enumerate() {
            j.row_mut(row).copy_from(&(unit(a) - u_ref).transpose());
        }
        j
    }
}

fn estimate(trace: SolveTrace, problem: &dyn Residuals, method: EstimatorMethod, ambiguous: bool) -> PositionEstimate {
    PositionEstimate {
        position: trace.position,
        method,
        iterations: trace.iterations,
        converged: trace.converged,
        final_residual_norm: problem.cost(&trace.position).sqrt(),
        ambiguous,
    }
}

fn degenerate_error(dim: Dimensionality) -> Error {
    Error::Geometry(match dim {
        Dimensionality::TwoD => "anchors are collinear".into(),
        Dimensionality::ThreeD => "anchors are coplanar".into(),
    })
}

/// Range multilateration. With exactly as many ranges as axes the fix is
/// ambiguous and flagged as such.
pub fn solve_range_multilateration(
    ranges: &[RangeObservation],
    settings: &SolverSettings,
) -> Result<PositionEstimate> {
    let dim = settings.dimensionality;
    let axes = dim.axes();
    if ranges.len() < axes {
        return Err(Error::Config(format!(
            "{} ranges cannot fix {axes} coordinates",
            ranges.len()
        )));
    }
    let anchors: Vec<Position> = ranges.iter().map(|r| r.anchor).collect();
    if ranges.len() > axes && is_degenerate(&anchors, dim) {
        return Err(degenerate_error(dim));
    }
    let problem = RangeProblem {
        observations: ranges.to_vec(),
    };
    let trace = best_of(&problem, &settings.starts(&anchors)?, axes, settings, None)?;
    Ok(estimate(trace, &problem, EstimatorMethod::RttMultilat, ranges.len() == axes))
}

/// Hyperbolic TDoA fix.
pub fn solve_tdoa(
    tdoa: &TdoaSet,
    anchor_positions: &BTreeMap<NodeId, Position>,
    settings: &SolverSettings,
) -> Result<PositionEstimate> {
    solve_tdoa_problem(&TdoaProblem::from_set(tdoa, anchor_positions)?, settings)
}

pub fn solve_tdoa_problem(problem: &TdoaProblem, settings: &SolverSettings) -> Result<PositionEstimate> {
    let dim = settings.dimensionality;
    let axes = dim.axes();
    if problem.anchors.len() < axes {
        return Err(Error::Config(format!(
            "{} differences cannot fix {axes} coordinates",
            problem.anchors.len()
        )));
    }
    let anchors = problem.all_anchors();
    if is_degenerate(&anchors, dim) {
        return Err(degenerate_error(dim));
    }
    let centroid = Position::centroid(&anchors).expect("anchors present");
    let rms = (anchors.iter().map(|a| (*a - centroid).norm_squared()).sum::<f64>() / anchors.len() as f64).sqrt();
    let region = (centroid, MAX_TDOA_REACH * rms.max(1.0));
    let trace = best_of(problem, &settings.starts(&anchors)?, axes, settings, Some(region))?;
    Ok(estimate(trace, problem, EstimatorMethod::Tdoa, problem.anchors.len() == axes))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing {
    pub observer: Position,
    pub measurement: AoaMeasurement,
}

/// Weighted least-squares intersection of bearing lines. Each line
/// contributes its horizontal normal (weight `1/σ²`); in 3-D the vertical
/// normal is added with the zenith weight.
pub fn solve_aoa_triangulation(bearings: &[Bearing], settings: &SolverSettings) -> Result<PositionEstimate> {
    settings.validate()?;
    if bearings.len() < 2 {
        return Err(Error::Config(format!(
            "triangulation needs at least 2 bearings, got {}",
            bearings.len()
        )));
    }
    let mut widest = 0.0f64;
    for (i, a) in bearings.iter().enumerate() {
        for b in &bearings[i + 1..] {
            let d = (a.measurement.azimuth_rad - b.measurement.azimuth_rad).rem_euclid(std::f64::consts::PI);
            widest = widest.max(d.min(std::f64::consts::PI - d));
        }
    }
    let observers: Vec<Position> = bearings.iter().map(|b| b.observer).collect();
    let init = settings.initial(&observers)?;
    let weight = |s: f64| 1.0 / s.max(1e-12).powi(2);

    let (position, condition) = match settings.dimensionality {
        Dimensionality::TwoD => {
            let mut a = Matrix2::zeros();
            let mut rhs = Vector2::zeros();
            for b in bearings {
                let az = b.measurement.azimuth_rad;
                let n = Vector2::new(-az.sin(), az.cos());
                let w = weight(b.measurement.std_rad);
                let nn = n * n.transpose() * w;
                a += nn;
                rhs += nn * Vector2::new(b.observer.x, b.observer.y);
            }
            let cond = condition_number(a.symmetric_eigen().eigenvalues.as_slice());
            let sol = a.try_inverse().map(|inv| inv * rhs);
            (sol.map(|s| Position::new(s.x, s.y, init.z)), cond)
        }
        Dimensionality::ThreeD => {
            let mut a = Matrix3::zeros();
            let mut rhs = Vector3::zeros();
            for b in bearings {
                let m = &b.measurement;
                let zen_std = m.zenith_std_rad.ok_or_else(|| {
                    Error::Capability(format!("observer {} cannot measure zenith", m.observer_id))
                })?;
                let (az, zen) = (m.azimuth_rad, m.zenith_rad);
                let horizontal = Vector3::new(-az.sin(), az.cos(), 0.0);
                let vertical = Vector3::new(az.cos() * zen.cos(), az.sin() * zen.cos(), -zen.sin());
                let p = b.observer.to_vector();
                for (n, w) in [(horizontal, weight(m.std_rad)), (vertical, weight(zen_std))] {
                    let nn = n * n.transpose() * w;
                    a += nn;
                    rhs += nn * p;
                }
            }
            let cond = condition_number(a.symmetric_eigen().eigenvalues.as_slice());
            (a.try_inverse().map(|inv| Position::from_vector(&(inv * rhs))), cond)
        }
    };
    if !(condition <= MAX_BEARING_CONDITION) || widest < MIN_BEARING_CROSSING_RAD {
        return Err(Error::Geometry(format!(
            "bearing lines nearly parallel (condition {condition:.3e}, widest crossing {widest:.4} rad)"
        )));
    }
    let position = position.ok_or_else(|| Error::Geometry("singular bearing system".into()))?;
    Ok(PositionEstimate {
        position,
        method: EstimatorMethod::AoaTriang,
        iterations: 0,
        converged: true,
        final_residual_norm: bearing_residual_norm(bearings, &position, settings.dimensionality),
        ambiguous: false,
    })
}

fn condition_number(eigenvalues: &[f64]) -> f64 {
    let max = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Root-sum-square perpendicular distance from `x` to the bearing lines, m.
fn bearing_residual_norm(bearings: &[Bearing], x: &Position, dim: Dimensionality) -> f64 {
    bearings
        .iter()
        .map(|b| {
            let m = &b.measurement;
            let v = *x - b.observer;
            let az = m.azimuth_rad;
            let h = -az.sin() * v.x + az.cos() * v.y;
            let vert = if dim == Dimensionality::ThreeD {
                let zen = m.zenith_rad;
                az.cos() * zen.cos() * v.x + az.sin() * zen.cos() * v.y - zen.sin() * v.z
            } else {
                0.0
            };
            h * h + vert * vert
        })
        .sum::<f64>()
        .sqrt()
}

/// Single-anchor fix from one range and one bearing taken at `anchor`.
pub fn solve_hybrid_rtt_aoa(range: &RttMeasurement, bearing: &AoaMeasurement, anchor: &Node) -> PositionEstimate {
    polar_fix(&anchor.position, range.est_range_m, bearing.azimuth_rad, bearing.zenith_rad)
}

/// `anchor + r·[cos az·sin zen, sin az·sin zen, cos zen]`.
pub fn polar_fix(anchor: &Position, range_m: f64, azimuth_rad: f64, zenith_rad: f64) -> PositionEstimate {
    let dir = Vector3::new(
        azimuth_rad.cos() * zenith_rad.sin(),
        azimuth_rad.sin() * zenith_rad.sin(),
        zenith_rad.cos(),
    );
    PositionEstimate {
        position: *anchor + dir * range_m,
        method: EstimatorMethod::HybridRttAoa,
        iterations: 0,
        converged: true,
        final_residual_norm: 0.0,
        ambiguous: false,
    }
}

/// Exhaustive grid search. Grid points are `min + k·resolution` per axis plus
/// the upper bound itself; an axis with `min == max` is held fixed.
pub fn brute_force<F>(cost: F, bounds: &Bounds, resolution_m: f64) -> Result<PositionEstimate>
where
    F: Fn(&Position) -> f64,
{
    if !(resolution_m > 0.0 && resolution_m.is_finite()) {
        return Err(Error::Config(format!("grid resolution must be positive, got {resolution_m}")));
    }
    if !bounds.min.is_finite() || !bounds.max.is_finite() {
        return Err(Error::Config("grid bounds must be finite".into()));
    }
    let axis = |lo: f64, hi: f64| -> Result<Vec<f64>> {
        if hi < lo {
            return Err(Error::Config(format!("inverted grid bounds [{lo}, {hi}]")));
        }
        let steps = ((hi - lo) / resolution_m).floor();
        if steps > MAX_GRID_CELLS as f64 {
            return Err(Error::Config("grid exceeds the cell limit".into()));
        }
        let mut v: Vec<f64> = (0..=steps as u64).map(|k| lo + k as f64 * resolution_m).collect();
        if hi - v[v.len() - 1] > 1e-9 * resolution_m {
            v.push(hi);
        }
        Ok(v)
    };
    let xs = axis(bounds.min.x, bounds.max.x)?;
    let ys = axis(bounds.min.y, bounds.max.y)?;
    let zs = axis(bounds.min.z, bounds.max.z)?;
    let cells = xs.len() as u128 * ys.len() as u128 * zs.len() as u128;
    if cells > MAX_GRID_CELLS as u128 {
        return Err(Error::Config(format!(
            "grid of {cells} cells exceeds the limit of {MAX_GRID_CELLS}"
        )));
    }
    let mut best = (f64::INFINITY, bounds.min);
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let p = Position::new(x, y, z);
                let c = cost(&p);
                if c < best.0 {
                    best = (c, p);
                }
            }
        }
    }
    Ok(PositionEstimate {
        position: best.1,
        method: EstimatorMethod::BruteForce,
        iterations: cells as usize,
        converged: best.0.is_finite(),
        final_residual_norm: best.0.sqrt(),
        ambiguous: false,
    })
}

/// Upper bound on how far the best grid cost can exceed the true minimum for
/// a TDoA problem with `m` differences on a grid of spacing `h`: each residual
/// row has gradient norm ≤ 2, so `λmax(JᵀJ) ≤ 4m`, and the nearest grid node
/// is within `h/√2` (2-D) of the minimizer.
pub fn tdoa_grid_cost_slack(m: usize, resolution_m: f64) -> f64 {
    2.0 * m as f64 * resolution_m * resolution_m
}

/// Norm-wise relative difference between an analytic Jacobian and central
/// finite differences with step `h`.
pub fn jacobian_relative_error<P: Residuals + ?Sized>(problem: &P, x: &Position, h: f64) -> f64 {
    let analytic = problem.jacobian(x);
    let mut numeric = DMatrix::zeros(analytic.nrows(), 3);
    for axis in 0..3 {
        let mut e = Vector3::zeros();
        e[axis] = h;
        let plus = problem.residuals(&(*x + e));
        let minus = problem.residuals(&(*x + (-e)));
        numeric.set_column(axis, &((plus - minus) / (2.0 * h)));
    }
    (&analytic - &numeric).norm() / analytic.norm().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{RttKind, TdoaDiff};
    use crate::scenario::NodeRole;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn p(x: f64, y: f64) -> Position {
        Position::new(x, y, 0.0)
    }

    fn exact_ranges(anchors: &[Position], truth: &Position) -> Vec<RangeObservation> {
        anchors
            .iter()
            .map(|a| RangeObservation {
                anchor: *a,
                range_m: a.distance(truth),
            })
            .collect()
    }

    fn exact_tdoa(anchors: &[Position], truth: &Position) -> TdoaProblem {
        let d0 = anchors[0].distance(truth);
        TdoaProblem {
            reference: anchors[0],
            anchors: anchors[1..].to_vec(),
            diffs_m: anchors[1..].iter().map(|a| a.distance(truth) - d0).collect(),
        }
    }

    #[test]
    fn inconsistent_tdoa_is_never_a_converged_fix() {
        // |diff| beyond the 20 m baseline: no hyperbola exists and the cost falls toward infinity
        let problem = TdoaProblem {
            reference: p(0.0, 0.0),
            anchors: vec![p(20.0, 0.0), p(10.0, 5.0)],
            diffs_m: vec![35.0, 30.0],
        };
        for init in [InitStrategy::AnchorCentroid, InitStrategy::MultiStart] {
            let settings = SolverSettings { init, ..SolverSettings::default() };
            let all = problem.all_anchors();
            let centroid = Position::centroid(&all).unwrap();
            let rms = (all.iter().map(|a| (*a - centroid).norm_squared()).sum::<f64>() / 3.0).sqrt();
            match solve_tdoa_problem(&problem, &settings) {
                Err(Error::Geometry(_)) => {}
                Ok(e) => {
                    assert!(!e.converged);
                    assert!(e.position.distance(&centroid) <= MAX_TDOA_REACH * rms);
                }
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn exactly_determined_tdoa_prefers_the_fix_near_the_anchors() {
        let anchors = [p(0.0, 0.0), p(40.0, 0.0), p(10.0, 30.0)];
        let truth = p(15.0, 12.0);
        let settings = SolverSettings { init: InitStrategy::MultiStart, ..SolverSettings::default() };
        let est = solve_tdoa_problem(&exact_tdoa(&anchors, &truth), &settings).unwrap();
        assert!(est.ambiguous);
        assert!(est.position.distance(&truth) < 1e-6, "{:?}", est.position);
    }

    #[test]
    fn multi_start_escapes_local_minimum() {
        let anchors = [p(6.0, 2.0), p(8.0, 3.0), p(-25.0, 11.0), p(2.0, 6.0)];
        let truth = p(3.0, 10.0);
        let prob = exact_tdoa(&anchors, &truth);
        let single = solve_tdoa_problem(&prob, &SolverSettings::default()).unwrap();
        assert!(single.position.distance(&truth) > 1.0);
        let multi = SolverSettings {
            init: InitStrategy::MultiStart,
            ..Default::default()
        };
        let est = solve_tdoa_problem(&prob, &multi).unwrap();
        assert!(est.position.distance(&truth) < 1e-6);
        assert!(est.final_residual_norm <= single.final_residual_norm);
    }

    fn bearing(observer: Position, az: f64, std: f64) -> Bearing {
        Bearing {
            observer,
            measurement: AoaMeasurement {
                observer_id: 0,
                source_id: 0,
                azimuth_rad: az,
                zenith_rad: FRAC_PI_2,
                std_rad: std,
                zenith_std_rad: None,
                low_quality: false,
                los: true,
            },
        }
    }

    #[test]
    fn range_exact_recovery() {
        let anchors = [p(0.0, 0.0), p(100.0, 0.0), p(0.0, 100.0)];
        let truth = p(50.0, 50.0);
        let est = solve_range_multilateration(&exact_ranges(&anchors, &truth), &SolverSettings::default()).unwrap();
        assert!(est.converged);
        assert!(!est.ambiguous);
        assert!(est.position.distance(&truth) < 1e-6);
        assert!(est.final_residual_norm < 1e-6);
    }

    #[test]
    fn range_two_anchor_ambiguity_picks_init_side() {
        let anchors = [p(0.0, 0.0), p(100.0, 0.0)];
        let truth = p(40.0, 30.0);
        let obs = exact_ranges(&anchors, &truth);
        for (init_y, expect_y) in [(10.0, 30.0), (-10.0, -30.0)] {
            let settings = SolverSettings {
                init: InitStrategy::Provided { position: p(50.0, init_y) },
                ..SolverSettings::default()
            };
            let est = solve_range_multilateration(&obs, &settings).unwrap();
            assert!(est.ambiguous);
            assert!(est.position.distance(&p(40.0, expect_y)) < 1e-6, "{:?}", est.position);
        }
    }

    #[test]
    fn range_common_bias_regression() {
        let anchors = [p(100.0, 0.0), p(0.0, 100.0), p(-100.0, 0.0), p(0.0, -100.0)];
        let truth = p(10.0, 5.0);
        let obs: Vec<RangeObservation> = exact_ranges(&anchors, &truth)
            .into_iter()
            .map(|o| RangeObservation {
                range_m: o.range_m + 1.0,
                ..o
            })
            .collect();
        let est = solve_range_multilateration(&obs, &SolverSettings::default()).unwrap();
        let err = est.position.distance(&truth);
        assert!(err < 1.0);
        let problem = RangeProblem { observations: obs };
        let bounds = Bounds {
            min: p(5.0, 0.0),
            max: p(15.0, 10.0),
        };
        let oracle = brute_force(|x| problem.cost(x), &bounds, 0.01).unwrap();
        assert!(oracle.position.distance(&est.position) < 0.02);
        // minimizer from an independent least-squares solve
        assert_relative_eq!(est.position.x, 10.100_782_566, epsilon = 1e-6);
        assert_relative_eq!(est.position.y, 5.052_899_955, epsilon = 1e-6);
    }

    #[test]
    fn range_collinear_rejected() {
        let anchors = [p(0.0, 0.0), p(50.0, 0.0), p(100.0, 0.0)];
        let err = solve_range_multilateration(&exact_ranges(&anchors, &p(30.0, 20.0)), &SolverSettings::default());
        assert!(matches!(err, Err(Error::Geometry(_))));
    }

    #[test]
    fn range_3d_recovery() {
        let anchors = [
            Position::new(0.0, 0.0, 0.0),
            Position::new(80.0, 0.0, 5.0),
            Position::new(0.0, 80.0, 10.0),
            Position::new(60.0, 70.0, 25.0),
        ];
        let truth = Position::new(30.0, 20.0, 8.0);
        let settings = SolverSettings {
            dimensionality: Dimensionality::ThreeD,
            ..SolverSettings::default()
        };
        let est = solve_range_multilateration(&exact_ranges(&anchors, &truth), &settings).unwrap();
        assert!(est.position.distance(&truth) < 1e-6);
    }

    #[test]
    fn tdoa_zero_diffs_circle_centre() {
        let anchors: Vec<Position> = (0..5)
            .map(|k| {
                let a = k as f64 * 2.0 * PI / 5.0 + 0.3;
                p(20.0 + 60.0 * a.cos(), -10.0 + 60.0 * a.sin())
            })
            .collect();
        let problem = TdoaProblem {
            reference: anchors[0],
            anchors: anchors[1..].to_vec(),
            diffs_m: vec![0.0; 4],
        };
        let settings = SolverSettings {
            init: InitStrategy::Provided { position: p(30.0, 5.0) },
            ..SolverSettings::default()
        };
        let est = solve_tdoa_problem(&problem, &settings).unwrap();
        assert!(est.position.distance(&p(20.0, -10.0)) < 1e-6);
    }

    #[test]
    fn tdoa_from_set_noiseless() {
        let anchors = [p(0.0, 0.0), p(120.0, 10.0), p(30.0, 90.0), p(-40.0, 60.0)];
        let truth = p(25.0, 35.0);
        let positions: BTreeMap<NodeId, Position> = anchors.iter().enumerate().map(|(i, a)| (i as NodeId + 1, *a)).collect();
        let d0 = anchors[0].distance(&truth);
        let set = TdoaSet {
            target_id: 0,
            ref_anchor_id: 1,
            diffs: (1..4)
                .map(|i| TdoaDiff {
                    anchor_id: i as NodeId + 1,
                    diff_m: anchors[i].distance(&truth) - d0,
                })
                .collect(),
        };
        let est = solve_tdoa(&set, &positions, &SolverSettings::default()).unwrap();
        assert!(est.converged);
        assert!(est.position.distance(&truth) < 1e-6);
    }

    #[test]
    fn tdoa_missing_anchor_position() {
        let set = TdoaSet {
            target_id: 0,
            ref_anchor_id: 1,
            diffs: vec![TdoaDiff { anchor_id: 9, diff_m: 0.0 }],
        };
        let positions = BTreeMap::from([(1, p(0.0, 0.0))]);
        assert!(matches!(solve_tdoa(&set, &positions, &SolverSettings::default()), Err(Error::Config(_))));
    }

    #[test]
    fn tdoa_collinear_rejected() {
        let anchors = [p(0.0, 0.0), p(10.0, 0.0), p(20.0, 0.0), p(30.0, 0.0)];
        let problem = exact_tdoa(&anchors, &p(5.0, 5.0));
        assert!(matches!(solve_tdoa_problem(&problem, &SolverSettings::default()), Err(Error::Geometry(_))));
    }

    #[test]
    fn tdoa_init_on_anchor_is_guarded() {
        let anchors = [p(0.0, 0.0), p(100.0, 0.0), p(0.0, 100.0), p(100.0, 100.0)];
        let truth = p(30.0, 60.0);
        let settings = SolverSettings {
            init: InitStrategy::Provided { position: anchors[1] },
            ..SolverSettings::default()
        };
        let est = solve_tdoa_problem(&exact_tdoa(&anchors, &truth), &settings).unwrap();
        assert!(est.position.is_finite());
        assert!(est.position.distance(&truth) < 1e-6);
    }

    #[test]
    fn aoa_textbook_intersection() {
        let b = [bearing(p(0.0, 0.0), FRAC_PI_4, 0.01), bearing(p(100.0, 0.0), 3.0 * FRAC_PI_4, 0.01)];
        let est = solve_aoa_triangulation(&b, &SolverSettings::default()).unwrap();
        assert!(est.position.distance(&p(50.0, 50.0)) < 1e-9);
        assert_eq!(est.iterations, 0);
    }

    #[test]
    fn aoa_three_exact_bearings() {
        let truth = p(-12.0, 33.0);
        let obs = [p(0.0, 0.0), p(50.0, 10.0), p(-40.0, -5.0)];
        let b: Vec<Bearing> = obs
            .iter()
            .zip([0.02, 0.05, 0.1])
            .map(|(o, s)| bearing(*o, (truth.y - o.y).atan2(truth.x - o.x), s))
            .collect();
        let est = solve_aoa_triangulation(&b, &SolverSettings::default()).unwrap();
        assert!(est.position.distance(&truth) < 1e-9);
        assert!(est.final_residual_norm < 1e-9);
    }

    #[test]
    fn aoa_near_parallel_rejected() {
        let b = [
            bearing(p(0.0, 0.0), 45f64.to_radians(), 0.01),
            bearing(p(0.1, 0.0), 46f64.to_radians(), 0.01),
        ];
        assert!(matches!(solve_aoa_triangulation(&b, &SolverSettings::default()), Err(Error::Geometry(_))));
    }

    #[test]
    fn aoa_3d_recovery() {
        let truth = Position::new(20.0, 30.0, 12.0);
        let obs = [Position::new(0.0, 0.0, 1.0), Position::new(60.0, 0.0, 2.0), Position::new(0.0, 70.0, 3.0)];
        let b: Vec<Bearing> = obs
            .iter()
            .map(|o| {
                let v = truth - *o;
                let mut bb = bearing(*o, v.y.atan2(v.x), 0.02);
                bb.measurement.zenith_rad = (v.z / v.norm()).acos();
                bb.measurement.zenith_std_rad = Some(0.03);
                bb
            })
            .collect();
        let settings = SolverSettings {
            dimensionality: Dimensionality::ThreeD,
            ..SolverSettings::default()
        };
        let est = solve_aoa_triangulation(&b, &settings).unwrap();
        assert!(est.position.distance(&truth) < 1e-9);
    }

    #[test]
    fn aoa_3d_without_zenith_is_capability_error() {
        let b = [bearing(p(0.0, 0.0), 0.3, 0.01), bearing(p(10.0, 0.0), 2.0, 0.01)];
        let settings = SolverSettings {
            dimensionality: Dimensionality::ThreeD,
            ..SolverSettings::default()
        };
        assert!(matches!(solve_aoa_triangulation(&b, &settings), Err(Error::Capability(_))));
    }

    fn rtt(range: f64) -> RttMeasurement {
        RttMeasurement {
            a_id: 1,
            b_id: 0,
            kind: RttKind::DoubleSided,
            est_range_m: range,
            reply_times_s: vec![1e-3, 1e-3],
            snr_db: 20.0,
            los: true,
        }
    }

    #[test]
    fn hybrid_cases() {
        let anchor = Node::new(1, NodeRole::AnchorUe, Position::new(0.0, 0.0, 0.0));
        let mut aoa = bearing(p(0.0, 0.0), 30f64.to_radians(), 0.01).measurement;
        let est = solve_hybrid_rtt_aoa(&rtt(100.0), &aoa, &anchor);
        assert_relative_eq!(est.position.x, 86.602_540_378, epsilon = 1e-8);
        assert_relative_eq!(est.position.y, 50.0, epsilon = 1e-9);
        assert!(est.position.z.abs() < 1e-9);
        assert!(est.converged);
        assert_eq!(est.iterations, 0);

        let at_anchor = solve_hybrid_rtt_aoa(&rtt(0.0), &aoa, &anchor);
        assert_eq!(at_anchor.position, anchor.position);

        aoa.azimuth_rad = 0.0;
        let east = solve_hybrid_rtt_aoa(&rtt(42.0), &aoa, &anchor);
        assert_relative_eq!(east.position.x, 42.0, epsilon = 1e-12);
        assert!(east.position.y.abs() < 1e-12);
    }

    #[test]
    fn brute_force_bowl() {
        let bounds = Bounds {
            min: p(-50.0, -50.0),
            max: p(50.0, 50.0),
        };
        let est = brute_force(|x| (x.x - 10.0).powi(2) + (x.y - 10.0).powi(2), &bounds, 0.1).unwrap();
        assert!((est.position.x - 10.0).abs() <= 0.05 + 1e-9);
        assert!((est.position.y - 10.0).abs() <= 0.05 + 1e-9);
        assert_eq!(est.method, EstimatorMethod::BruteForce);
    }

    #[test]
    fn brute_force_flat_axis() {
        let bounds = Bounds {
            min: Position::new(-5.0, 2.0, 1.5),
            max: Position::new(5.0, 2.0, 1.5),
        };
        let est = brute_force(|x| (x.x - 1.234).abs(), &bounds, 0.001).unwrap();
        assert!((est.position.x - 1.234).abs() <= 0.0005 + 1e-9);
        assert_eq!(est.position.y, 2.0);
        assert_eq!(est.position.z, 1.5);
    }

    #[test]
    fn brute_force_grid_limit() {
        let bounds = Bounds {
            min: Position::new(0.0, 0.0, 0.0),
            max: Position::new(1000.0, 1000.0, 1000.0),
        };
        assert!(matches!(brute_force(|_| 0.0, &bounds, 0.1), Err(Error::Config(_))));
        assert!(brute_force(|_| 0.0, &bounds, 0.0).is_err());
    }

    #[test]
    fn gauss_newton_reports_history() {
        let anchors = [p(0.0, 0.0), p(100.0, 0.0), p(0.0, 100.0)];
        let problem = RangeProblem {
            observations: exact_ranges(&anchors, &p(70.0, 20.0)),
        };
        let t = gauss_newton(&problem, p(10.0, 80.0), 2, &SolverSettings::default()).unwrap();
        assert!(t.converged);
        assert!(t.iterations <= 100);
        assert!(t.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn settings_validation() {
        let bad = SolverSettings {
            max_iterations: 0,
            ..SolverSettings::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverSettings {
            step_tolerance_m: 0.0,
            ..SolverSettings::default()
        };
        assert!(bad.validate().is_err());
    }

    fn coord() -> impl Strategy<Value = f64> {
        -200.0..200.0f64
    }

    fn spread_anchors() -> impl Strategy<Value = Vec<Position>> {
        prop::collection::vec((coord(), coord(), -5.0..5.0f64), 4..7)
            .prop_map(|v| v.into_iter().map(|(x, y, z)| Position::new(x, y, z)).collect())
            .prop_filter("non-degenerate", |a: &Vec<Position>| !is_degenerate(a, Dimensionality::TwoD))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn range_jacobian_matches_finite_differences(
            anchors in spread_anchors(),
            x in (coord(), coord(), -5.0..5.0f64),
            noise in prop::collection::vec(-3.0..3.0f64, 7),
        ) {
            let x = Position::new(x.0, x.1, x.2);
            prop_assume!(anchors.iter().all(|a| a.distance(&x) > 1.0));
            let problem = RangeProblem {
                observations: anchors.iter().zip(&noise).map(|(a, n)| RangeObservation { anchor: *a, range_m: 50.0 + n }).collect(),
            };
            prop_assert!(jacobian_relative_error(&problem, &x, 1e-6) <= 1e-5);
        }

        #[test]
        fn tdoa_jacobian_matches_finite_differences(
            anchors in spread_anchors(),
            x in (coord(), coord(), -5.0..5.0f64),
        ) {
            let x = Position::new(x.0, x.1, x.2);
            prop_assume!(anchors.iter().all(|a| a.distance(&x) > 1.0));
            let problem = exact_tdoa(&anchors, &Position::new(0.0, 0.0, 0.0));
            prop_assert!(jacobian_relative_error(&problem, &x, 1e-6) <= 1e-5);
        }

        #[test]
        fn accepted_steps_never_increase_cost(
            anchors in spread_anchors(),
            truth in (coord(), coord()),
            noise in prop::collection::vec(-5.0..5.0f64, 6),
            init in (coord(), coord()),
        ) {
            let truth = p(truth.0, truth.1);
            let mut problem = exact_tdoa(&anchors, &truth);
            for (d, n) in problem.diffs_m.iter_mut().zip(&noise) {
                *d += n;
            }
            let t = gauss_newton(&problem, p(init.0, init.1), 2, &SolverSettings::default()).unwrap();
            prop_assert!(t.cost_history.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn range_solver_equivariant(
            anchors in spread_anchors(),
            truth in (coord(), coord()),
            noise in prop::collection::vec(-2.0..2.0f64, 6),
            angle in -PI..PI,
            shift in (coord(), coord()),
        ) {
            let truth = p(truth.0, truth.1);
            let anchors: Vec<Position> = anchors.into_iter().map(|a| p(a.x, a.y)).collect();
            let obs: Vec<RangeObservation> = exact_ranges(&anchors, &truth)
                .into_iter()
                .zip(&noise)
                .map(|(o, n)| RangeObservation { range_m: (o.range_m + n).abs(), ..o })
                .collect();
            let (s, c) = angle.sin_cos();
            let tf = |q: &Position| p(c * q.x - s * q.y + shift.0, s * q.x + c * q.y + shift.1);
            let moved: Vec<RangeObservation> = obs.iter().map(|o| RangeObservation { anchor: tf(&o.anchor), range_m: o.range_m }).collect();
            let tight = SolverSettings { step_tolerance_m: 1e-13, max_iterations: 200, ..SolverSettings::default() };
            let a = solve_range_multilateration(&obs, &tight).unwrap();
            let b = solve_range_multilateration(&moved, &tight).unwrap();
            prop_assume!(a.converged && b.converged);
            let expected = tf(&a.position);
            prop_assert!(expected.distance(&b.position) < 1e-9, "{:?} vs {:?}", expected, b.position);
        }

        #[test]
        fn tdoa_zero_noise_exact(anchors in spread_anchors(), truth in (coord(), coord())) {
            let anchors: Vec<Position> = anchors.into_iter().map(|a| p(a.x, a.y)).collect();
            let truth = p(truth.0, truth.1);
            // the start is 3.6 m off; keep it well inside the basin
            prop_assume!(anchors.iter().all(|a| a.distance(&truth) > 40.0));
            let problem = exact_tdoa(&anchors, &truth);
            let j = problem.jacobian(&truth).columns(0, 2).into_owned();
            prop_assume!((j.transpose() * &j).symmetric_eigenvalues().min() >= 1e-3);
            let settings = SolverSettings { init: InitStrategy::Provided { position: p(truth.x + 3.0, truth.y - 2.0) }, ..SolverSettings::default() };
            let est = solve_tdoa_problem(&problem, &settings).unwrap();
            prop_assert!(est.position.distance(&truth) < 1e-6);
        }
    }
}

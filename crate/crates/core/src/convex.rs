//! Scalar convex functions, Bregman divergences, KKT residuals and the
//! centralized solvers that produce ground-truth optimal points.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::graph::{incidence_matrix, Graph, RoutingMatrix};
use crate::linalg::Matrix;
use crate::scalar::{max_abs, Scalar};

/// Margin by which a point must clear a log barrier's singularity.
const DOMAIN_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarConvexFunction<T> {
    /// `weight * (p - center)^2`
    Quadratic { center: T, weight: T },
    /// `weight * exp(rate * p)`
    Exponential { weight: T, rate: T },
    /// `-weight * ln(p - shift)` on `p > shift`
    NegLog { weight: T, shift: T },
    /// `slope * p + offset`
    Affine { slope: T, offset: T },
    Sum { terms: Vec<ScalarConvexFunction<T>> },
}

impl<T: Scalar> ScalarConvexFunction<T> {
    pub fn quadratic(center: T, weight: T) -> Self {
        Self::Quadratic { center, weight }
    }

    pub fn exponential(weight: T, rate: T) -> Self {
        Self::Exponential { weight, rate }
    }

    pub fn neg_log(weight: T, shift: T) -> Self {
        Self::NegLog { weight, shift }
    }

    pub fn affine(slope: T, offset: T) -> Self {
        Self::Affine { slope, offset }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Quadratic { .. } => "quadratic",
            Self::Exponential { .. } => "exponential",
            Self::NegLog { .. } => "neg_log",
            Self::Affine { .. } => "affine",
            Self::Sum { .. } => "sum",
        }
    }

    /// Checks parameters are finite and weights non-negative, so the function is convex.
    pub fn validate(&self) -> Result<()> {
        let finite = |vals: &[T]| vals.iter().all(|v| v.is_finite());
        let ok = match self {
            Self::Quadratic { center, weight } => finite(&[*center, *weight]) && *weight >= T::zero(),
            Self::Exponential { weight, rate } => finite(&[*weight, *rate]) && *weight >= T::zero(),
            Self::NegLog { weight, shift } => finite(&[*weight, *shift]) && *weight >= T::zero(),
            Self::Affine { slope, offset } => finite(&[*slope, *offset]),
            Self::Sum { terms } => {
                for t in terms {
                    t.validate()?;
                }
                !terms.is_empty()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "{} function needs finite parameters and a non-negative weight",
                self.name()
            )))
        }
    }

    /// Infimum of the open domain, or `None` when the domain is the whole line.
    /// Points must exceed it by a small margin to be evaluated.
    pub fn domain_lower(&self) -> Option<T> {
        match self {
            Self::NegLog { shift, .. } => Some(*shift),
            Self::Sum { terms } => terms
                .iter()
                .filter_map(Self::domain_lower)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v)))),
            _ => None,
        }
    }

    pub fn in_domain(&self, p: T) -> bool {
        p.is_finite() && self.domain_lower().is_none_or(|lo| p > lo + T::lit(DOMAIN_MARGIN))
    }

    fn check(&self, p: T) -> Result<()> {
        if self.in_domain(p) {
            Ok(())
        } else {
            Err(Error::Domain {
                function: self.name().into(),
                lower: self.domain_lower().map_or(f64::NEG_INFINITY, |l| l.as_f64()),
                value: p.as_f64(),
            })
        }
    }

    pub fn value(&self, p: T) -> Result<T> {
        self.check(p)?;
        Ok(self.value_unchecked(p))
    }

    pub fn gradient(&self, p: T) -> Result<T> {
        self.check(p)?;
        Ok(self.gradient_unchecked(p))
    }

    pub fn eval_and_grad(&self, p: T) -> Result<(T, T)> {
        self.check(p)?;
        Ok((self.value_unchecked(p), self.gradient_unchecked(p)))
    }

    /// Second derivative.
    pub fn curvature(&self, p: T) -> Result<T> {
        self.check(p)?;
        Ok(self.curvature_unchecked(p))
    }

    fn value_unchecked(&self, p: T) -> T {
        match self {
            Self::Quadratic { center, weight } => *weight * (p - *center) * (p - *center),
            Self::Exponential { weight, rate } => *weight * (*rate * p).exp(),
            Self::NegLog { weight, shift } => -*weight * (p - *shift).ln(),
            Self::Affine { slope, offset } => *slope * p + *offset,
            Self::Sum { terms } => terms.iter().map(|t| t.value_unchecked(p)).sum(),
        }
    }

    fn gradient_unchecked(&self, p: T) -> T {
        let two = T::lit(2.0);
        match self {
            Self::Quadratic { center, weight } => two * *weight * (p - *center),
            Self::Exponential { weight, rate } => *weight * *rate * (*rate * p).exp(),
            Self::NegLog { weight, shift } => -*weight / (p - *shift),
            Self::Affine { slope, .. } => *slope,
            Self::Sum { terms } => terms.iter().map(|t| t.gradient_unchecked(p)).sum(),
        }
    }

    fn curvature_unchecked(&self, p: T) -> T {
        match self {
            Self::Quadratic { weight, .. } => T::lit(2.0) * *weight,
            Self::Exponential { weight, rate } => *weight * *rate * *rate * (*rate * p).exp(),
            Self::NegLog { weight, shift } => *weight / ((p - *shift) * (p - *shift)),
            Self::Affine { .. } => T::zero(),
            Self::Sum { terms } => terms.iter().map(|t| t.curvature_unchecked(p)).sum(),
        }
    }

    /// `D_f(p, q) = f(p) - f(q) - f'(q) (p - q)`
    pub fn bregman(&self, p: T, q: T) -> Result<T> {
        let fp = self.value(p)?;
        let (fq, gq) = self.eval_and_grad(q)?;
        Ok(fp - fq - gq * (p - q))
    }

    pub fn is_strictly_convex(&self) -> bool {
        match self {
            Self::Quadratic { weight, .. } | Self::NegLog { weight, .. } => *weight > T::zero(),
            Self::Exponential { weight, rate } => *weight > T::zero() && *rate != T::zero(),
            Self::Affine { .. } => false,
            Self::Sum { terms } => terms.iter().any(Self::is_strictly_convex),
        }
    }

    /// Samples the gradient on an even grid of the in-domain part of
    /// `[lo, hi]` and reports whether it never decreases.
    pub fn gradient_is_monotone(&self, lo: T, hi: T, samples: usize) -> bool {
        let n = samples.max(2);
        let mut prev: Option<T> = None;
        for k in 0..n {
            let p = lo + (hi - lo) * T::from_usize_lossy(k) / T::from_usize_lossy(n - 1);
            let Ok(g) = self.gradient(p) else { continue };
            if let Some(q) = prev {
                if g < q - T::epsilon().sqrt() * (T::one() + q.abs()) {
                    return false;
                }
            }
            prev = Some(g);
        }
        true
    }
}

/// Consensus form: minimize `Σ F_i(θ_i)` subject to `G_i(θ_i) ≤ 0` and `Aᵀθ = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsensusProblem<T> {
    pub coupling: Matrix<T>,
    pub objectives: Vec<ScalarConvexFunction<T>>,
    pub constraints: Vec<Option<ScalarConvexFunction<T>>>,
}

impl<T: Scalar> ConsensusProblem<T> {
    /// `coupling` is `|V| × |E|` and must annihilate the all-ones vector
    /// from the left, so consensus points are feasible.
    pub fn new(
        coupling: Matrix<T>,
        objectives: Vec<ScalarConvexFunction<T>>,
        constraints: Vec<Option<ScalarConvexFunction<T>>>,
    ) -> Result<Self> {
        let n = coupling.rows();
        ensure_len("objectives per node", n, objectives.len())?;
        ensure_len("constraints per node", n, constraints.len())?;
        for f in objectives.iter().chain(constraints.iter().flatten()) {
            f.validate()?;
        }
        for j in 0..coupling.cols() {
            let col = coupling.column(j);
            let s: T = col.iter().copied().sum();
            if s.abs() > T::epsilon().sqrt() * (T::one() + max_abs(&col)) {
                return Err(Error::Validation(format!(
                    "coupling column {j} does not sum to zero, so consensus would be infeasible"
                )));
            }
        }
        Ok(ConsensusProblem {
            coupling,
            objectives,
            constraints,
        })
    }

    pub fn on_graph(
        graph: &Graph,
        objectives: Vec<ScalarConvexFunction<T>>,
        constraints: Vec<Option<ScalarConvexFunction<T>>>,
    ) -> Result<Self> {
        Self::new(incidence_matrix(graph).into_matrix(), objectives, constraints)
    }

    pub fn unconstrained(graph: &Graph, objectives: Vec<ScalarConvexFunction<T>>) -> Result<Self> {
        let n = objectives.len();
        Self::on_graph(graph, objectives, vec![None; n])
    }

    pub fn node_count(&self) -> usize {
        self.coupling.rows()
    }

    pub fn edge_count(&self) -> usize {
        self.coupling.cols()
    }

    pub fn has_constraints(&self) -> bool {
        self.constraints.iter().any(Option::is_some)
    }
}

/// Coupling-inequality form: minimize `Σ F_i(θ_i)` subject to `H_j((Rθ)_j) ≤ 0` per link.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingProblem<T> {
    pub routing: RoutingMatrix<T>,
    pub objectives: Vec<ScalarConvexFunction<T>>,
    pub link_constraints: Vec<ScalarConvexFunction<T>>,
}

impl<T: Scalar> CouplingProblem<T> {
    pub fn new(
        routing: RoutingMatrix<T>,
        objectives: Vec<ScalarConvexFunction<T>>,
        link_constraints: Vec<ScalarConvexFunction<T>>,
    ) -> Result<Self> {
        ensure_len("objectives per node", routing.matrix().cols(), objectives.len())?;
        ensure_len("constraints per link", routing.matrix().rows(), link_constraints.len())?;
        for f in objectives.iter().chain(&link_constraints) {
            f.validate()?;
        }
        Ok(CouplingProblem {
            routing,
            objectives,
            link_constraints,
        })
    }

    pub fn node_count(&self) -> usize {
        self.objectives.len()
    }

    pub fn link_count(&self) -> usize {
        self.link_constraints.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Problem<T> {
    Consensus(ConsensusProblem<T>),
    Coupling(CouplingProblem<T>),
}

impl<T: Scalar> Problem<T> {
    pub fn node_count(&self) -> usize {
        match self {
            Problem::Consensus(p) => p.node_count(),
            Problem::Coupling(p) => p.node_count(),
        }
    }

    pub fn objectives(&self) -> &[ScalarConvexFunction<T>] {
        match self {
            Problem::Consensus(p) => &p.objectives,
            Problem::Coupling(p) => &p.objectives,
        }
    }

    /// Number of multipliers: one per node for consensus problems (zero
    /// where a node has no constraint), one per link for coupling problems.
    pub fn multiplier_count(&self) -> usize {
        match self {
            Problem::Consensus(p) => p.node_count(),
            Problem::Coupling(p) => p.link_count(),
        }
    }

    /// Number of consensus multipliers (edges); zero for coupling problems.
    pub fn edge_count(&self) -> usize {
        match self {
            Problem::Consensus(p) => p.edge_count(),
            Problem::Coupling(_) => 0,
        }
    }
}

fn objective_gradients<T: Scalar>(fs: &[ScalarConvexFunction<T>], theta: &[T]) -> Result<Vec<T>> {
    fs.iter()
        .zip(theta)
        .enumerate()
        .map(|(i, (f, t))| f.gradient(*t).map_err(|e| e.at(format!("node {i}"))))
        .collect()
}

/// Max-norm of the KKT violations: stationarity, complementary slackness,
/// primal and dual feasibility. For coupling problems `mu` must be empty.
pub fn kkt_residual<T: Scalar>(problem: &Problem<T>, theta: &[T], lambda: &[T], mu: &[T]) -> Result<T> {
    ensure_len("theta", problem.node_count(), theta.len())?;
    ensure_len("lambda", problem.multiplier_count(), lambda.len())?;
    ensure_len("mu", problem.edge_count(), mu.len())?;
    let mut worst = T::zero();
    let mut bump = |v: T| worst = worst.max(v.abs());
    match problem {
        Problem::Consensus(p) => {
            let grad = objective_gradients(&p.objectives, theta)?;
            let psi = p.coupling.mul_vec(mu);
            for i in 0..theta.len() {
                let mut station = grad[i] + psi[i];
                if let Some(g) = &p.constraints[i] {
                    let (gv, gg) = g.eval_and_grad(theta[i]).map_err(|e| e.at(format!("node {i}")))?;
                    station += gg * lambda[i];
                    bump(lambda[i] * gv);
                    bump(gv.max(T::zero()));
                }
                bump(station);
                bump((-lambda[i]).max(T::zero()));
            }
            for w in p.coupling.tr_mul_vec(theta) {
                bump(w);
            }
        }
        Problem::Coupling(p) => {
            let grad = objective_gradients(&p.objectives, theta)?;
            let omega = p.routing.matrix().mul_vec(theta);
            let mut weighted = Vec::with_capacity(omega.len());
            for (j, h) in p.link_constraints.iter().enumerate() {
                let (hv, hg) = h.eval_and_grad(omega[j]).map_err(|e| e.at(format!("link {j}")))?;
                weighted.push(hg * lambda[j]);
                bump(lambda[j] * hv);
                bump(hv.max(T::zero()));
                bump((-lambda[j]).max(T::zero()));
            }
            let eta = p.routing.matrix().tr_mul_vec(&weighted);
            for i in 0..theta.len() {
                bump(grad[i] + eta[i]);
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceSolution<T> {
    pub theta_star: Vec<T>,
    pub lambda_star: Vec<T>,
    pub mu_star: Vec<T>,
    pub kkt_residual: T,
    pub tolerance: T,
    /// Per multiplier: constraint active at the optimum with a zero multiplier.
    pub weak_complementarity: Vec<bool>,
}

pub fn reference_solution<T: Scalar>(problem: &Problem<T>) -> Result<ReferenceSolution<T>> {
    match problem {
        Problem::Consensus(p) => consensus_reference(problem, p),
        Problem::Coupling(p) => coupling_reference(problem, p),
    }
}

/// Bisects a sign change of `f` on `[lo, hi]` (with `f(lo) < 0 < f(hi)` or
/// the reverse) until the bracket stops shrinking in floating point.
fn bisect<T: Scalar>(mut lo: T, mut hi: T, f: impl Fn(T) -> T) -> T {
    let rising = f(lo) < T::zero();
    for _ in 0..400 {
        let mid = lo + (hi - lo) / T::lit(2.0);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = f(mid);
        if v == T::zero() {
            return mid;
        }
        if (v < T::zero()) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo + (hi - lo) / T::lit(2.0)
}

/// Walks from `start` towards `-∞` (or towards a domain bound) until
/// `pred` holds. Returns `None` when the walk exhausts the search range.
fn walk_left<T: Scalar>(start: T, lower: Option<T>, pred: impl Fn(T) -> bool) -> Option<T> {
    match lower {
        Some(lo) => {
            let gap = start - lo;
            (1..200).map(|k| lo + gap * T::lit(0.5f64.powi(k))).find(|t| pred(*t))
        }
        None => (0..60).map(|k| start - T::lit(2f64.powi(k))).find(|t| pred(*t)),
    }
}

fn walk_right<T: Scalar>(start: T, pred: impl Fn(T) -> bool) -> Option<T> {
    (0..60).map(|k| start + T::lit(2f64.powi(k))).find(|t| pred(*t))
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
fn golden_min<T: Scalar>(mut a: T, mut b: T, f: impl Fn(T) -> T) -> T {
    let r = T::lit((5f64.sqrt() - 1.0) / 2.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
        if (b - a).abs() <= T::epsilon() * (T::one() + a.abs()) {
            break;
        }
    }
    if fc < fd {
        c
    } else {
        d
    }
}

fn consensus_reference<T: Scalar>(problem: &Problem<T>, p: &ConsensusProblem<T>) -> Result<ReferenceSolution<T>> {
    let all: Vec<&ScalarConvexFunction<T>> = p.objectives.iter().chain(p.constraints.iter().flatten()).collect();
    let lower = all
        .iter()
        .filter_map(|f| f.domain_lower())
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))));
    let in_domain = |t: T| all.iter().all(|f| f.in_domain(t));
    let slope = |t: T| -> T { p.objectives.iter().map(|f| f.gradient_unchecked(t)).sum() };
    let worst_g = |t: T| -> T {
        p.constraints
            .iter()
            .flatten()
            .map(|g| g.value_unchecked(t))
            .fold(T::neg_infinity(), T::max)
    };
    let anchor = match lower {
        Some(lo) => lo + T::one(),
        None => T::zero(),
    };

    // Feasible interval [a, b] of the scalar reduced problem; infinite ends
    // are represented by `None`.
    let (mut a, mut b) = (None, None);
    if p.has_constraints() {
        let slater = slater_point(anchor, lower, worst_g, in_domain).ok_or_else(|| {
            Error::Infeasible("no strictly feasible consensus value found by the grid probe".into())
        })?;
        if let Some(t) = walk_left(slater, lower, |t| in_domain(t) && worst_g(t) > T::zero()) {
            a = Some(bisect(t, slater, worst_g));
        }
        if let Some(t) = walk_right(slater, |t| worst_g(t) > T::zero()) {
            b = Some(bisect(slater, t, worst_g));
        }
    }

    let start = match (a, b) {
        (Some(a), Some(b)) => a + (b - a) / T::lit(2.0),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => anchor,
    };
    let unbounded = || Error::Solver {
        message: "summed objective has no minimizer on the feasible set".into(),
        iterates: vec![start.as_f64()],
    };
    let theta = match (a.map(|t| slope(t) >= T::zero()), b.map(|t| slope(t) <= T::zero())) {
        (Some(true), _) => a.unwrap(),
        (_, Some(true)) => b.unwrap(),
        _ => {
            let left = match a {
                Some(a) => a,
                None => walk_left(start, lower, |t| in_domain(t) && slope(t) < T::zero()).ok_or_else(unbounded)?,
            };
            let right = match b {
                Some(b) => b,
                None => walk_right(start, |t| slope(t) > T::zero()).ok_or_else(unbounded)?,
            };
            bisect(left, right, slope)
        }
    };
    if !in_domain(theta) {
        return Err(Error::Solver {
            message: "consensus minimizer lies on the domain boundary".into(),
            iterates: vec![theta.as_f64()],
        });
    }

    // Multipliers: only active constraints whose slope opposes the residual
    // gradient take weight, giving the minimum-norm non-negative choice.
    let n = p.node_count();
    let residual = -slope(theta);
    let act_tol = T::solver_tolerance();
    let mut lambda = vec![T::zero(); n];
    let mut active = vec![false; n];
    let mut gslopes = vec![T::zero(); n];
    for (i, g) in p.constraints.iter().enumerate() {
        if let Some(g) = g {
            let (gv, gg) = g.eval_and_grad(theta)?;
            active[i] = gv.abs() <= act_tol * (T::one() + theta.abs());
            gslopes[i] = gg;
        }
    }
    if residual.abs() > act_tol {
        let aligned = |i: usize| active[i] && gslopes[i] * residual > T::zero();
        let norm: T = (0..n).filter(|i| aligned(*i)).map(|i| gslopes[i] * gslopes[i]).sum();
        if norm == T::zero() {
            return Err(Error::Solver {
                message: "no active constraint can balance the summed gradient".into(),
                iterates: vec![theta.as_f64(), residual.as_f64()],
            });
        }
        for i in (0..n).filter(|i| aligned(*i)) {
            lambda[i] = residual * gslopes[i] / norm;
        }
    }
    let weak = (0..n).map(|i| active[i] && lambda[i] == T::zero()).collect();

    let theta_star = vec![theta; n];
    let mut rhs = objective_gradients(&p.objectives, &theta_star)?;
    for i in 0..n {
        rhs[i] = -(rhs[i] + gslopes[i] * lambda[i]);
    }
    let mu_star = if p.edge_count() == 0 {
        Vec::new()
    } else {
        p.coupling.min_norm_solve(&rhs)?
    };
    finish(problem, theta_star, lambda, mu_star, weak)
}

/// Grid probe followed by golden-section refinement of `max_i G_i(t)`.
fn slater_point<T: Scalar>(
    anchor: T,
    lower: Option<T>,
    worst_g: impl Fn(T) -> T,
    in_domain: impl Fn(T) -> bool,
) -> Option<T> {
    let mut grid: Vec<T> = vec![anchor];
    for k in -6..=9 {
        let s = T::lit(2f64.powi(k));
        match lower {
            Some(lo) => grid.push(lo + s),
            None => {
                grid.push(anchor - s);
                grid.push(anchor + s);
            }
        }
        grid.push(anchor + s);
    }
    grid.retain(|t| in_domain(*t));
    grid.sort_by(|x, y| x.partial_cmp(y).expect("finite grid"));
    grid.dedup();
    let (best, _) = grid
        .iter()
        .enumerate()
        .map(|(k, t)| (k, worst_g(*t)))
        .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap_or(std::cmp::Ordering::Equal))?;
    if worst_g(grid[best]) < T::zero() {
        return Some(grid[best]);
    }
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let t = golden_min(lo, hi, |t| if in_domain(t) { worst_g(t) } else { T::infinity() });
    (in_domain(t) && worst_g(t) < T::zero()).then_some(t)
}

fn finish<T: Scalar>(
    problem: &Problem<T>,
    theta_star: Vec<T>,
    lambda_star: Vec<T>,
    mu_star: Vec<T>,
    weak_complementarity: Vec<bool>,
) -> Result<ReferenceSolution<T>> {
    let kkt = kkt_residual(problem, &theta_star, &lambda_star, &mu_star)?;
    let tolerance = T::solver_tolerance();
    if kkt.is_nan() || kkt > tolerance {
        return Err(Error::Solver {
            message: format!("reference point misses the KKT tolerance ({kkt} > {tolerance})"),
            iterates: theta_star.iter().chain(&lambda_star).map(|v| v.as_f64()).collect(),
        });
    }
    Ok(ReferenceSolution {
        theta_star,
        lambda_star,
        mu_star,
        kkt_residual: kkt,
        tolerance,
        weak_complementarity,
    })
}

/// Lagrangian value, gradient and Hessian in θ for fixed link multipliers.
struct CouplingLagrangian<'a, T> {
    p: &'a CouplingProblem<T>,
    lambda: &'a [T],
}

impl<T: Scalar> CouplingLagrangian<'_, T> {
    fn feasible(&self, theta: &[T]) -> bool {
        let omega = self.p.routing.matrix().mul_vec(theta);
        self.p.objectives.iter().zip(theta).all(|(f, t)| f.in_domain(*t))
            && self.p.link_constraints.iter().zip(&omega).all(|(h, w)| h.in_domain(*w))
    }

    fn value(&self, theta: &[T]) -> T {
        let omega = self.p.routing.matrix().mul_vec(theta);
        let obj: T = self.p.objectives.iter().zip(theta).map(|(f, t)| f.value_unchecked(*t)).sum();
        let pen: T = self
            .p
            .link_constraints
            .iter()
            .zip(&omega)
            .zip(self.lambda)
            .map(|((h, w), l)| *l * h.value_unchecked(*w))
            .sum();
        obj + pen
    }

    fn grad_hess(&self, theta: &[T]) -> (Vec<T>, Matrix<T>) {
        let r = self.p.routing.matrix();
        let omega = r.mul_vec(theta);
        let n = theta.len();
        let mut grad: Vec<T> = self.p.objectives.iter().zip(theta).map(|(f, t)| f.gradient_unchecked(*t)).collect();
        let mut hess = Matrix::zeros(n, n);
        for (i, (f, t)) in self.p.objectives.iter().zip(theta).enumerate() {
            hess[(i, i)] = f.curvature_unchecked(*t);
        }
        for (j, h) in self.p.link_constraints.iter().enumerate() {
            let g = self.lambda[j] * h.gradient_unchecked(omega[j]);
            let c = self.lambda[j] * h.curvature_unchecked(omega[j]);
            for p in 0..n {
                grad[p] += g * r[(j, p)];
                if c != T::zero() {
                    for q in 0..n {
                        hess[(p, q)] += c * r[(j, p)] * r[(j, q)];
                    }
                }
            }
        }
        (grad, hess)
    }

    /// Damped Newton from `theta`; every iterate stays inside the domain.
    fn minimize(&self, mut theta: Vec<T>) -> Result<Vec<T>> {
        let tol = T::epsilon() * T::lit(100.0);
        for _ in 0..200 {
            let (grad, hess) = self.grad_hess(&theta);
            if max_abs(&grad) <= tol * (T::one() + max_abs(&theta)) {
                return Ok(theta);
            }
            let step = hess.solve_consistent(&grad).map_err(|_| Error::Solver {
                message: "Lagrangian Hessian is singular; objectives must be strictly convex".into(),
                iterates: theta.iter().map(|v| v.as_f64()).collect(),
            })?;
            let f0 = self.value(&theta);
            let decrement: T = grad.iter().zip(&step).map(|(g, s)| *g * *s).sum();
            let mut s = T::one();
            let mut moved = false;
            for _ in 0..60 {
                let cand: Vec<T> = theta.iter().zip(&step).map(|(t, d)| *t - s * *d).collect();
                if self.feasible(&cand) && self.value(&cand) <= f0 - T::lit(1e-4) * s * decrement {
                    moved = cand != theta;
                    theta = cand;
                    break;
                }
                s /= T::lit(2.0);
            }
            if !moved {
                return Ok(theta);
            }
            if max_abs(&theta) > T::lit(1e12) {
                break;
            }
        }
        Err(Error::Solver {
            message: "inner Newton iteration did not converge".into(),
            iterates: theta.iter().map(|v| v.as_f64()).collect(),
        })
    }
}

/// Projected gradient ascent on the dual function, with Armijo backtracking
/// and an exact inner minimization of the Lagrangian in θ.
fn coupling_reference<T: Scalar>(problem: &Problem<T>, p: &CouplingProblem<T>) -> Result<ReferenceSolution<T>> {
    let r = p.routing.matrix();
    let n = p.node_count();
    let m = p.link_count();

    // Strictly feasible start along θ = t·1.
    let worst_h = |t: T| {
        let theta = vec![t; n];
        let omega = r.mul_vec(&theta);
        let ok = p.objectives.iter().all(|f| f.in_domain(t))
            && p.link_constraints.iter().zip(&omega).all(|(h, w)| h.in_domain(*w));
        if !ok {
            return T::infinity();
        }
        p.link_constraints
            .iter()
            .zip(&omega)
            .map(|(h, w)| h.value_unchecked(*w))
            .fold(T::neg_infinity(), T::max)
    };
    let lower = p
        .objectives
        .iter()
        .filter_map(|f| f.domain_lower())
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))));
    let anchor = lower.map_or(T::zero(), |l| l + T::one());
    let start = slater_point(anchor, lower, worst_h, |t| worst_h(t).is_finite())
        .ok_or_else(|| Error::Infeasible("no strictly feasible rate vector found along the diagonal".into()))?;

    let mut theta = vec![start; n];
    let mut lambda = vec![T::one(); m];
    let dual = |lambda: &[T], warm: Vec<T>| -> Result<(T, Vec<T>, Vec<T>)> {
        let lag = CouplingLagrangian { p, lambda };
        let theta = lag.minimize(warm)?;
        let omega = r.mul_vec(&theta);
        let grad: Vec<T> = p.link_constraints.iter().zip(&omega).map(|(h, w)| h.value_unchecked(*w)).collect();
        Ok((lag.value(&theta), grad, theta))
    };
    let (mut q, mut g, th) = dual(&lambda, theta.clone())?;
    theta = th;
    let mut step = T::one();
    let mut log = Vec::new();
    for _ in 0..20_000 {
        let kkt = kkt_residual(problem, &theta, &lambda, &[])?;
        log.push(kkt.as_f64());
        if kkt <= T::solver_tolerance() {
            return finish(problem, theta, lambda, Vec::new(), vec![false; m]).map(|mut s| {
                s.weak_complementarity = weak_flags(p, &s);
                s
            });
        }
        step *= T::lit(2.0);
        loop {
            let cand: Vec<T> = lambda.iter().zip(&g).map(|(l, gj)| (*l + step * *gj).max(T::zero())).collect();
            let diff: Vec<T> = cand.iter().zip(&lambda).map(|(c, l)| *c - *l).collect();
            let lin: T = g.iter().zip(&diff).map(|(a, b)| *a * *b).sum();
            let quad: T = diff.iter().map(|d| *d * *d).sum::<T>() / (T::lit(2.0) * step);
            match dual(&cand, theta.clone()) {
                Ok((qc, gc, tc)) if qc >= q + lin - quad - T::epsilon() * (T::one() + q.abs()) => {
                    lambda = cand;
                    q = qc;
                    g = gc;
                    theta = tc;
                    break;
                }
                _ => {}
            }
            step /= T::lit(2.0);
            if step < T::lit(1e-14) {
                return Err(Error::Solver {
                    message: "dual step size collapsed".into(),
                    iterates: log.iter().rev().take(10).copied().collect(),
                });
            }
        }
    }
    Err(Error::Solver {
        message: "dual ascent did not reach the KKT tolerance".into(),
        iterates: log.iter().rev().take(10).copied().collect(),
    })
}

fn weak_flags<T: Scalar>(p: &CouplingProblem<T>, s: &ReferenceSolution<T>) -> Vec<bool> {
    let omega = p.routing.matrix().mul_vec(&s.theta_star);
    p.link_constraints
        .iter()
        .zip(&omega)
        .zip(&s.lambda_star)
        .map(|((h, w), l)| h.value_unchecked(*w).abs() <= s.tolerance && *l == T::zero())
        .collect()
}

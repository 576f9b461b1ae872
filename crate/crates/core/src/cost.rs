//! The infinite-horizon cost that the nominal augmented controller
//! minimizes: control weights, state-cost decomposition, storage functions,
//! trajectory cost evaluation and the verifiers built on them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::convex::{Problem, ReferenceSolution, ScalarConvexFunction};
use crate::dynamics::{
    nominal_controller, outputs_of, positive_projection, Block, ControlInput, OutputSnapshot, Perturbation,
    PerturbedController, System, SystemState, Variant,
};
use crate::error::{Error, Result};
use crate::scalar::{dot, max_abs, Scalar};
use crate::simulate::{default_window, equilibrium_of, simulate, Trajectory};

/// Largest deviation between a run's equilibrium and the reference before
/// the run is treated as converging elsewhere.
pub const EQUILIBRIUM_MATCH: f64 = 1e-6;

/// Diagonal control weights, laid out like [`ControlInput`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlCostMatrix<T> {
    pub node: Vec<T>,
    pub feedforward: Vec<T>,
    pub dual: Vec<T>,
    pub edge: Vec<T>,
}

impl<T: Scalar> ControlCostMatrix<T> {
    /// `Σ r_k u_k²`
    pub fn weighted_norm(&self, u: &ControlInput<T>) -> T {
        let sq = |r: &[T], v: &[T]| r.iter().zip(v).map(|(r, v)| *r * *v * *v).sum::<T>();
        sq(&self.node, &u.node) + sq(&self.feedforward, &u.feedforward) + sq(&self.dual, &u.dual) + sq(&self.edge, &u.edge)
    }

    /// Weights in the flat control order (node, feed-forward, dual, edge).
    pub fn flatten(&self) -> Vec<T> {
        let mut v = self.node.clone();
        v.extend_from_slice(&self.feedforward);
        v.extend_from_slice(&self.dual);
        v.extend_from_slice(&self.edge);
        v
    }
}

fn chain_weights<T: Scalar>(blocks: &[Block<T>], scaled: bool) -> Vec<T> {
    let two = T::lit(2.0);
    blocks
        .iter()
        .flat_map(|blk| {
            (1..blk.order()).map(move |k| {
                let (a, b) = (blk.a[k - 1], blk.b[k]);
                if scaled {
                    b / (two * a)
                } else {
                    T::one() / (two * a * b)
                }
            })
        })
        .collect()
}

/// Weights `1/(2ab)` per auxiliary channel, or `b/(2a)` and `1/(2ď)` for the
/// feed-forward variant whose channels are scaled by the chain gains.
pub fn control_cost_matrix<T: Scalar>(system: &System<T>) -> Result<ControlCostMatrix<T>> {
    let p = system.profile();
    let ff = system.variant() == Variant::FeedForward;
    let mut feedforward = Vec::with_capacity(system.layout().feedforward_edges.len());
    for j in &system.layout().feedforward_edges {
        let d = p.edge_feedforward[*j];
        if d <= T::zero() {
            return Err(Error::SingularControlCost(format!("edge {j} has a feed-forward channel with zero weight")));
        }
        feedforward.push(T::one() / (T::lit(2.0) * d));
    }
    Ok(ControlCostMatrix {
        node: chain_weights(&p.node, ff),
        feedforward,
        dual: chain_weights(&p.dual, false),
        edge: chain_weights(&p.edge, ff),
    })
}

/// The optimum every cost is measured against, with the signals it induces.
/// `mu` is the edge-state sum at the optimum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reference<T> {
    pub state: SystemState<T>,
    pub theta: Vec<T>,
    pub lambda: Vec<T>,
    pub mu: Vec<T>,
    pub omega: Vec<T>,
    pub eta: Vec<T>,
    pub gradient: Vec<T>,
}

impl<T: Scalar> Reference<T> {
    pub fn from_state(system: &System<T>, state: SystemState<T>) -> Result<Self> {
        let out = outputs_of(system, &state)?;
        let gradient = system
            .problem()
            .objectives()
            .iter()
            .zip(&out.theta)
            .map(|(f, t)| f.gradient(*t))
            .collect::<Result<_>>()?;
        Ok(Reference {
            state,
            theta: out.theta,
            lambda: out.lambda,
            mu: out.mu_tilde,
            omega: out.omega,
            eta: out.eta,
            gradient,
        })
    }

    /// The equilibrium a trajectory settles at; errors if it has not settled.
    pub fn from_trajectory(system: &System<T>, traj: &Trajectory<T>) -> Result<Self> {
        let eq = equilibrium_of(system, traj, default_window(traj.len()))?;
        if !eq.converged {
            return Err(Error::Precondition(format!(
                "trajectory has not settled by t = {} (state still moves by {})",
                traj.times.last().copied().unwrap_or_else(T::zero),
                eq.movement
            )));
        }
        Self::from_state(system, eq.state)
    }

    /// Checks the primal part against an independently computed optimum.
    pub fn check_against(&self, solution: &ReferenceSolution<T>, tolerance: T) -> Result<()> {
        let dev = self
            .theta
            .iter()
            .zip(&solution.theta_star)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
        if dev > tolerance {
            return Err(Error::EquilibriumMismatch { deviation: dev.as_f64() });
        }
        Ok(())
    }
}

/// Pointwise state cost split by origin. Integrated values reuse the same shape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateCostTerms<T> {
    /// `(θ-θ*)(∇F(θ)-∇F(θ*))` per node.
    pub gradient_gap: Vec<T>,
    /// `(θ-θ*)(η-η*)` per node.
    pub multiplier_gap: Vec<T>,
    /// Decay of the auxiliary node states, per node.
    pub node_auxiliary: Vec<T>,
    /// Constraint penalty per multiplier chain.
    pub constraint: Vec<T>,
    /// Decay of the auxiliary dual states, per multiplier chain.
    pub dual_auxiliary: Vec<T>,
    /// Decay of the auxiliary edge states, per edge.
    pub edge_auxiliary: Vec<T>,
    /// `½ θᵀ L θ` for the feed-forward variant.
    pub disagreement: T,
}

impl<T: Scalar> StateCostTerms<T> {
    fn zeros(n: usize, k: usize, m: usize) -> Self {
        StateCostTerms {
            gradient_gap: vec![T::zero(); n],
            multiplier_gap: vec![T::zero(); n],
            node_auxiliary: vec![T::zero(); n],
            constraint: vec![T::zero(); k],
            dual_auxiliary: vec![T::zero(); k],
            edge_auxiliary: vec![T::zero(); m],
            disagreement: T::zero(),
        }
    }

    fn parts(&self) -> [&[T]; 6] {
        [
            &self.gradient_gap,
            &self.multiplier_gap,
            &self.node_auxiliary,
            &self.constraint,
            &self.dual_auxiliary,
            &self.edge_auxiliary,
        ]
    }

    fn parts_mut(&mut self) -> [&mut Vec<T>; 6] {
        [
            &mut self.gradient_gap,
            &mut self.multiplier_gap,
            &mut self.node_auxiliary,
            &mut self.constraint,
            &mut self.dual_auxiliary,
            &mut self.edge_auxiliary,
        ]
    }

    pub fn total(&self) -> T {
        self.parts().iter().flat_map(|p| p.iter()).copied().sum::<T>() + self.disagreement
    }

    /// Smallest single term.
    pub fn min_term(&self) -> T {
        self.parts()
            .iter()
            .flat_map(|p| p.iter())
            .copied()
            .fold(self.disagreement, T::min)
    }

    fn add_scaled(&mut self, other: &Self, w: T) {
        for (dst, src) in self.parts_mut().into_iter().zip(other.parts()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * *s;
            }
        }
        self.disagreement += w * other.disagreement;
    }
}

fn auxiliary_decay<T: Scalar>(blk: &Block<T>, states: &[T]) -> T {
    (1..blk.order())
        .map(|k| blk.a[k - 1] * states[k] * states[k] / (T::lit(2.0) * blk.b[k]))
        .sum()
}

/// `-(τ1 - λ*)[g]⁺_{τ1} - Σ_{k≥2} τ_k g` for one dual chain at constraint level `g`.
fn constraint_penalty<T: Scalar>(tau: &[T], lambda_star: T, level: T) -> Result<T> {
    let proj = positive_projection(&[level], &tau[..1])?[0];
    Ok(-(tau[0] - lambda_star) * proj - tau[1..].iter().map(|t| *t * level).sum::<T>())
}

fn constraint_of<'a, T: Scalar>(system: &'a System<T>, k: usize, out: &OutputSnapshot<T>) -> Option<(&'a ScalarConvexFunction<T>, T)> {
    match system.problem() {
        Problem::Consensus(p) => p.constraints[k].as_ref().map(|g| (g, out.theta[k])),
        Problem::Coupling(p) => Some((&p.link_constraints[k], out.omega[k])),
    }
}

fn ensure_cost_defined<T: Scalar>(system: &System<T>) -> Result<()> {
    if system.variant() == Variant::Consensus && system.has_edge_feedforward() {
        return Err(Error::Unsupported(
            "edge feed-forward in direct form has no cost decomposition; rewrite it with feedforward_transform".into(),
        ));
    }
    Ok(())
}

/// Pointwise state cost at one sample.
pub fn state_cost<T: Scalar>(
    system: &System<T>,
    state: &SystemState<T>,
    out: &OutputSnapshot<T>,
    reference: &Reference<T>,
) -> Result<StateCostTerms<T>> {
    ensure_cost_defined(system)?;
    let l = system.layout();
    let prof = system.profile();
    let n = l.node.len();
    let mut terms = StateCostTerms::zeros(n, l.dual.len(), l.edge.len());
    for (i, f) in system.problem().objectives().iter().enumerate() {
        let dth = out.theta[i] - reference.theta[i];
        terms.gradient_gap[i] = dth * (f.gradient(out.theta[i])? - reference.gradient[i]);
        terms.multiplier_gap[i] = dth * (out.eta[i] - reference.eta[i]);
        terms.node_auxiliary[i] = auxiliary_decay(&prof.node[i], &state.xi[l.node[i].clone()]);
    }
    for (k, r) in l.dual.iter().enumerate() {
        if r.is_empty() {
            continue;
        }
        let (g, at) = constraint_of(system, k, out).expect("dual chain implies constraint");
        let tau = &state.tau[r.clone()];
        terms.constraint[k] = constraint_penalty(tau, reference.lambda[k], g.value(at)?)?;
        terms.dual_auxiliary[k] = auxiliary_decay(&prof.dual[k], tau);
    }
    for (j, r) in l.edge.iter().enumerate() {
        terms.edge_auxiliary[j] = auxiliary_decay(&prof.edge[j], &state.zeta[r.clone()]);
    }
    if let Some(lap) = system.laplacian() {
        terms.disagreement = lap.quadratic_form(&out.theta) / T::lit(2.0);
    }
    Ok(terms)
}

fn chain_storage<T: Scalar>(blk: &Block<T>, states: &[T], target: T) -> T {
    let two = T::lit(2.0);
    (0..blk.order())
        .map(|k| {
            let d = if k == 0 { states[0] - target } else { states[k] };
            d * d / (two * blk.b[k])
        })
        .sum()
}

/// Weighted squared distance of every chain to the reference.
pub fn storage_value<T: Scalar>(system: &System<T>, state: &SystemState<T>, reference: &Reference<T>) -> T {
    let l = system.layout();
    let p = system.profile();
    let mut v = T::zero();
    for (i, r) in l.node.iter().enumerate() {
        v += chain_storage(&p.node[i], &state.xi[r.clone()], reference.theta[i]);
    }
    for (k, r) in l.dual.iter().enumerate() {
        if !r.is_empty() {
            v += chain_storage(&p.dual[k], &state.tau[r.clone()], reference.lambda[k]);
        }
    }
    for (j, r) in l.edge.iter().enumerate() {
        v += chain_storage(&p.edge[j], &state.zeta[r.clone()], reference.mu[j]);
    }
    v
}

/// Cost integrand split into the control part and the state terms, per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrandSample<T> {
    pub control: T,
    pub state: StateCostTerms<T>,
}

impl<T: Scalar> IntegrandSample<T> {
    pub fn total(&self) -> T {
        self.control + self.state.total()
    }
}

pub fn integrand_series<T: Scalar>(
    system: &System<T>,
    traj: &Trajectory<T>,
    reference: &Reference<T>,
) -> Result<Vec<IntegrandSample<T>>> {
    let r = control_cost_matrix(system)?;
    (0..traj.len())
        .map(|k| {
            Ok(IntegrandSample {
                control: r.weighted_norm(&traj.controls[k]),
                state: state_cost(system, &traj.states[k], &traj.outputs[k], reference)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown<T> {
    pub control_cost: T,
    pub state_terms: StateCostTerms<T>,
    /// `control_cost` plus every integrated state term.
    pub total_cost: T,
    pub storage_at_start: T,
    pub storage_at_end: T,
    /// Largest integrand value over the trailing window.
    pub tail_integrand: T,
    /// Remaining cost beyond the horizon, estimated as the final storage
    /// plus the trailing integrand held for one more window.
    pub tail_bound: T,
}

/// Trapezoidal cost of a trajectory that settled at `reference`.
pub fn evaluate_cost<T: Scalar>(system: &System<T>, traj: &Trajectory<T>, reference: &Reference<T>) -> Result<CostBreakdown<T>> {
    if traj.len() < 3 {
        return Err(Error::Validation("trajectory too short for quadrature".into()));
    }
    let window = default_window(traj.len());
    let eq = equilibrium_of(system, traj, window)?;
    if !eq.converged {
        return Err(Error::Precondition(format!(
            "trajectory has not settled (state still moves by {})",
            eq.movement
        )));
    }
    let a = eq.state.flatten();
    let b = reference.state.flatten();
    let dev = a.iter().zip(&b).fold(T::zero(), |m, (x, y)| m.max((*x - *y).abs()));
    if dev > T::lit(EQUILIBRIUM_MATCH) * (T::one() + max_abs(&b)) {
        return Err(Error::EquilibriumMismatch { deviation: dev.as_f64() });
    }

    let series = integrand_series(system, traj, reference)?;
    let first = &series[0].state;
    let mut state_terms = StateCostTerms::zeros(first.gradient_gap.len(), first.constraint.len(), first.edge_auxiliary.len());
    let mut control_cost = T::zero();
    let half = T::lit(0.5);
    for k in 0..series.len() - 1 {
        let h = traj.times[k + 1] - traj.times[k];
        control_cost += half * h * (series[k].control + series[k + 1].control);
        state_terms.add_scaled(&series[k].state, half * h);
        state_terms.add_scaled(&series[k + 1].state, half * h);
    }
    let tail_integrand = series[series.len() - window..]
        .iter()
        .fold(T::zero(), |m, s| m.max(s.total().abs()));
    let span = traj.times[traj.len() - 1] - traj.times[traj.len() - window];
    let storage_at_end = storage_value(system, traj.states.last().expect("nonempty"), reference);
    Ok(CostBreakdown {
        control_cost,
        total_cost: control_cost + state_terms.total(),
        state_terms,
        storage_at_start: storage_value(system, &traj.states[0], reference),
        storage_at_end,
        tail_integrand,
        tail_bound: storage_at_end + tail_integrand * span,
    })
}

/// Worst per-sample residuals and slacks of the structural identities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport<T> {
    /// Cross-term cancellation between node and edge storages; `None` for
    /// coupling problems, which have no edge subsystems.
    pub interconnection_residual: Option<T>,
    /// Storage gradients times the chain gains recover the output deviations.
    pub storage_gradient_residual: T,
    /// `|gradient_gap - (D_F(θ,θ*) + D_F(θ*,θ))|`
    pub bregman_residual: T,
    /// Smallest slack of the multiplier lower bound; `None` without constraints.
    pub constraint_slack: Option<T>,
    /// Smallest total integrand.
    pub integrand_min: T,
    /// Largest total integrand over the trailing window.
    pub integrand_at_rest: T,
    /// Largest increase of the storage between consecutive samples, divided by `dt`.
    pub storage_increase_rate: T,
}

/// Thresholds the identity suite is judged against.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;
pub const SLACK_TOLERANCE: f64 = 1e-8;

impl<T: Scalar> IdentityReport<T> {
    pub fn passes(&self) -> bool {
        let exact = T::lit(IDENTITY_TOLERANCE);
        let slack = -T::lit(SLACK_TOLERANCE);
        self.interconnection_residual.is_none_or(|r| r < exact)
            && self.storage_gradient_residual < exact
            && self.bregman_residual < exact
            && self.constraint_slack.is_none_or(|s| s >= slack)
            && self.integrand_min >= slack
            && self.integrand_at_rest < exact
            && self.storage_increase_rate <= T::lit(SLACK_TOLERANCE)
    }
}

fn gradient_residual<T: Scalar>(blk: &Block<T>, states: &[T], target: T, deviation: T) -> T {
    // ∂V/∂x_k · b_k summed over the chain
    let recovered: T = (0..blk.order())
        .map(|k| {
            let d = if k == 0 { states[0] - target } else { states[k] };
            d / blk.b[k] * blk.b[k]
        })
        .sum();
    (recovered - deviation).abs()
}

/// Evaluates the identity suite at every sample of `traj`.
pub fn verify_identities<T: Scalar>(system: &System<T>, traj: &Trajectory<T>, reference: &Reference<T>) -> Result<IdentityReport<T>> {
    ensure_cost_defined(system)?;
    let l = system.layout();
    let p = system.profile();
    let problem = system.problem();
    let series = integrand_series(system, traj, reference)?;
    let mut report = IdentityReport {
        interconnection_residual: match problem {
            Problem::Consensus(_) => Some(T::zero()),
            Problem::Coupling(_) => None,
        },
        storage_gradient_residual: T::zero(),
        bregman_residual: T::zero(),
        constraint_slack: l.dual.iter().any(|r| !r.is_empty()).then(T::infinity),
        integrand_min: T::infinity(),
        integrand_at_rest: T::zero(),
        storage_increase_rate: T::neg_infinity(),
    };
    let window_start = traj.len() - default_window(traj.len());
    let mut prev_storage: Option<T> = None;
    for (k, ((state, out), sample)) in traj.states.iter().zip(&traj.outputs).zip(&series).enumerate() {
        let dth: Vec<T> = out.theta.iter().zip(&reference.theta).map(|(a, b)| *a - *b).collect();

        if let (Problem::Consensus(c), Some(worst)) = (problem, report.interconnection_residual.as_mut()) {
            let dmu: Vec<T> = out.mu_tilde.iter().zip(&reference.mu).map(|(a, b)| *a - *b).collect();
            let dom: Vec<T> = out.omega.iter().zip(&reference.omega).map(|(a, b)| *a - *b).collect();
            let dpsi = c.coupling.mul_vec(&dmu);
            let r = (dot(&dth, &dpsi) - dot(&dmu, &dom)).abs();
            *worst = worst.max(r);
            for (j, rg) in l.edge.iter().enumerate() {
                let e = gradient_residual(&p.edge[j], &state.zeta[rg.clone()], reference.mu[j], dmu[j]);
                report.storage_gradient_residual = report.storage_gradient_residual.max(e);
            }
        }
        for (i, rg) in l.node.iter().enumerate() {
            let e = gradient_residual(&p.node[i], &state.xi[rg.clone()], reference.theta[i], dth[i]);
            report.storage_gradient_residual = report.storage_gradient_residual.max(e);
            let f = &problem.objectives()[i];
            let bregman_sum = f.bregman(out.theta[i], reference.theta[i])? + f.bregman(reference.theta[i], out.theta[i])?;
            report.bregman_residual = report.bregman_residual.max((sample.state.gradient_gap[i] - bregman_sum).abs());
        }

        if let Some(worst) = report.constraint_slack.as_mut() {
            for (q, rg) in l.dual.iter().enumerate() {
                if rg.is_empty() {
                    continue;
                }
                let (g, at) = constraint_of(system, q, out).expect("dual chain implies constraint");
                let at_star = match problem {
                    Problem::Consensus(_) => reference.theta[q],
                    Problem::Coupling(_) => reference.omega[q],
                };
                let (lam, lam_star) = (out.lambda[q], reference.lambda[q]);
                // multiplier cross term carried by this constraint
                let cross = match problem {
                    Problem::Consensus(_) => sample.state.multiplier_gap[q],
                    Problem::Coupling(_) => (at - at_star) * (g.gradient(at)? * lam - g.gradient(at_star)? * lam_star),
                };
                let bound = g.bregman(at_star, at)? * lam + g.bregman(at, at_star)? * lam_star - g.value(at_star)? * lam;
                *worst = worst.min(cross + sample.state.constraint[q] - bound);
            }
        }

        let total = sample.total();
        report.integrand_min = report.integrand_min.min(total);
        if k >= window_start {
            report.integrand_at_rest = report.integrand_at_rest.max(total.abs());
        }
        let v = storage_value(system, state, reference);
        if let Some(pv) = prev_storage {
            let h = traj.times[k] - traj.times[k - 1];
            report.storage_increase_rate = report.storage_increase_rate.max((v - pv) / h);
        }
        prev_storage = Some(v);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationOutcome<T> {
    pub index: usize,
    pub seed: u64,
    /// Exact `∫ ‖v‖²_R dt`.
    pub perturbation_energy: T,
    pub perturbed_cost: T,
    /// `J(Û+v) - J(Û)`
    pub excess: T,
    /// `|excess - energy| / energy`; `None` when the run settled elsewhere.
    pub relative_error: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityReport<T> {
    pub nominal_cost: T,
    pub storage_at_start: T,
    /// `|J(Û) - V(x0)| / V(x0)`
    pub value_identity_error: T,
    pub samples: Vec<PerturbationOutcome<T>>,
    /// Perturbed runs that settled at a different equilibrium.
    pub not_applicable: usize,
    pub max_relative_error: Option<T>,
    /// `J(Û+v) ≥ J(Û)` in every applicable sample.
    pub excess_nonnegative: bool,
}

/// Runs the nominal closed loop from `state0`, then `samples` seeded
/// compact-support perturbations in parallel, and compares each cost excess
/// with the exact perturbation energy.
pub fn verify_optimality<T: Scalar>(
    system: &System<T>,
    state0: &SystemState<T>,
    dt: T,
    t_end: T,
    samples: usize,
    seed: u64,
) -> Result<OptimalityReport<T>> {
    ensure_cost_defined(system)?;
    let nominal = nominal_controller(system);
    let traj = simulate(system, &nominal, state0, dt, t_end)?;
    let reference = Reference::from_trajectory(system, &traj)?;
    let base = evaluate_cost(system, &traj, &reference)?;
    let weights = control_cost_matrix(system)?.flatten();
    if weights.is_empty() && samples > 0 {
        return Err(Error::Unsupported("the profile has no control channels to perturb".into()));
    }
    let outcomes = (0..samples)
        .into_par_iter()
        .map(|index| {
            let s = seed.wrapping_add(index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let perturbation = Perturbation::sample(&mut rng, weights.len(), t_end)?;
            let energy = perturbation.weighted_energy(&weights)?;
            let ctrl = PerturbedController { nominal, perturbation };
            let run = simulate(system, &ctrl, state0, dt, t_end)?;
            match evaluate_cost(system, &run, &reference) {
                Ok(c) => {
                    let excess = c.total_cost - base.total_cost;
                    Ok(PerturbationOutcome {
                        index,
                        seed: s,
                        perturbation_energy: energy,
                        perturbed_cost: c.total_cost,
                        excess,
                        relative_error: Some((excess - energy).abs() / energy),
                    })
                }
                Err(Error::EquilibriumMismatch { .. }) => Ok(PerturbationOutcome {
                    index,
                    seed: s,
                    perturbation_energy: energy,
                    perturbed_cost: T::nan(),
                    excess: T::nan(),
                    relative_error: None,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let applicable: Vec<&PerturbationOutcome<T>> = outcomes.iter().filter(|o| o.relative_error.is_some()).collect();
    Ok(OptimalityReport {
        nominal_cost: base.total_cost,
        storage_at_start: base.storage_at_start,
        value_identity_error: (base.total_cost - base.storage_at_start).abs() / base.storage_at_start,
        not_applicable: outcomes.len() - applicable.len(),
        max_relative_error: applicable.iter().filter_map(|o| o.relative_error).reduce(T::max),
        excess_nonnegative: applicable.iter().all(|o| o.excess >= T::zero()),
        samples: outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::{ConsensusProblem, Problem};
    use crate::dynamics::{feedforward_transform, AugmentationProfile};
    use crate::graph::Graph;

    type F = ScalarConvexFunction<f64>;

    fn triangle() -> Graph {
        Graph::new(&["v1", "v2", "v3"], &[("e1", "v1", "v2"), ("e2", "v1", "v3"), ("e3", "v2", "v3")]).unwrap()
    }

    fn problem(objectives: Vec<F>) -> Problem<f64> {
        Problem::Consensus(ConsensusProblem::unconstrained(&triangle(), objectives).unwrap())
    }

    fn example() -> Problem<f64> {
        problem(vec![F::quadratic(0.5, 1.0), F::exponential(1.0, -0.5), F::neg_log(1.0, 0.0)])
    }

    fn auxiliary(p: &Problem<f64>) -> System<f64> {
        let profile = AugmentationProfile::uniform(
            p,
            Block::new(vec![0.5, 0.5], vec![2.0]),
            Block::integrator(1.0),
            Block::integrator(1.0),
            0.0,
        );
        System::new(p.clone(), profile, Variant::Consensus).unwrap()
    }

    #[test]
    fn control_weights() {
        let p = example();
        let r = control_cost_matrix(&auxiliary(&p)).unwrap();
        assert_eq!(r.node, vec![0.5; 3]);
        assert!(r.edge.is_empty() && r.feedforward.is_empty());

        let std = System::new(p.clone(), AugmentationProfile::standard(&p), Variant::Consensus).unwrap();
        assert!(control_cost_matrix(&std).unwrap().flatten().is_empty());

        let mut prof = AugmentationProfile::standard(&p);
        prof.edge_feedforward = vec![1.0; 3];
        let ff = System::new(p, prof, Variant::FeedForward).unwrap();
        assert_eq!(control_cost_matrix(&ff).unwrap().feedforward, vec![0.5; 3]);
    }

    #[test]
    fn state_cost_terms() {
        let p = problem(vec![F::quadratic(0.0, 1.0); 3]);
        let sys = auxiliary(&p);
        let reference = Reference::from_state(&sys, sys.chain_state(&[0.0; 3], &[], &[0.0; 3]).unwrap()).unwrap();
        let at_ref = state_cost(&sys, &reference.state, &outputs_of(&sys, &reference.state).unwrap(), &reference).unwrap();
        assert_eq!(at_ref.total(), 0.0);
        assert_eq!(storage_value(&sys, &reference.state, &reference), 0.0);

        let delta = 0.3;
        let s = sys.chain_state(&[delta, 0.0, 0.0], &[], &[0.0; 3]).unwrap();
        let terms = state_cost(&sys, &s, &outputs_of(&sys, &s).unwrap(), &reference).unwrap();
        assert!((terms.gradient_gap[0] - 2.0 * delta * delta).abs() < 1e-15);
        // b_1 = ½ so the first-state deviation of 1 stores 1/(2·½)
        let s = sys.chain_state(&[1.0, 0.0, 0.0], &[], &[0.0; 3]).unwrap();
        assert!((storage_value(&sys, &s, &reference) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn direct_feedforward_has_no_cost() {
        let p = example();
        let mut prof = AugmentationProfile::standard(&p);
        prof.edge_feedforward = vec![1.0; 3];
        let direct = System::new(p, prof, Variant::Consensus).unwrap();
        let s = direct.chain_state(&[1.0; 3], &[], &[0.0; 3]).unwrap();
        let r = Reference::from_state(&feedforward_transform(&direct).unwrap(), s.clone()).unwrap();
        let out = outputs_of(&direct, &s).unwrap();
        assert!(matches!(state_cost(&direct, &s, &out, &r), Err(Error::Unsupported(_))));
    }

    #[test]
    fn value_identity_on_the_triangle() {
        let p = example();
        let sys = auxiliary(&p);
        let s0 = sys.chain_state(&[2.0, 0.5, 1.5], &[], &[0.0; 3]).unwrap();
        let traj = simulate(&sys, &nominal_controller(&sys), &s0, 1e-3, 60.0).unwrap();
        let reference = Reference::from_trajectory(&sys, &traj).unwrap();
        let cost = evaluate_cost(&sys, &traj, &reference).unwrap();
        assert!((cost.total_cost - cost.storage_at_start).abs() / cost.storage_at_start < 1e-4);
        let report = verify_identities(&sys, &traj, &reference).unwrap();
        assert!(report.passes(), "{report:?}");
        assert!(report.constraint_slack.is_none());
    }

    #[test]
    fn unsettled_runs_are_rejected() {
        let p = example();
        let sys = auxiliary(&p);
        let s0 = sys.chain_state(&[2.0, 0.5, 1.5], &[], &[0.0; 3]).unwrap();
        let traj = simulate(&sys, &nominal_controller(&sys), &s0, 1e-2, 2.0).unwrap();
        assert!(matches!(Reference::from_trajectory(&sys, &traj), Err(Error::Precondition(_))));
    }
}

//! Closed-loop projected vector fields of the augmented primal-dual
//! algorithm in control form, for the consensus, coupling-inequality and
//! feed-forward variants, plus the nominal and perturbed controllers.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convex::{ConsensusProblem, CouplingProblem, Problem, ScalarConvexFunction};
use crate::error::{ensure_len, Error, Result};
use crate::graph::weighted_laplacian;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Parameters of one auxiliary chain: gains `b_1..b_ρ` and decay rates
/// `a_2..a_ρ`. The chain order `ρ` is `b.len()`; an empty chain means the
/// subsystem is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block<T> {
    pub b: Vec<T>,
    #[serde(default = "Vec::new")]
    pub a: Vec<T>,
}

impl<T: Scalar> Block<T> {
    pub fn new(b: Vec<T>, a: Vec<T>) -> Self {
        Block { b, a }
    }

    /// Plain integrator with gain `b`.
    pub fn integrator(b: T) -> Self {
        Block { b: vec![b], a: Vec::new() }
    }

    pub fn empty() -> Self {
        Block {
            b: Vec::new(),
            a: Vec::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.b.len()
    }

    fn validate(&self, what: &str) -> Result<()> {
        ensure_len(&format!("{what} decay rates"), self.b.len().saturating_sub(1), self.a.len())?;
        if self.b.iter().any(|b| !(b.is_finite() && *b > T::zero())) {
            return Err(Error::Validation(format!("{what}: gains b must be positive")));
        }
        if self.a.iter().any(|a| !(a.is_finite() && *a > T::zero())) {
            return Err(Error::Validation(format!("{what}: decay rates a must be positive")));
        }
        if self.a.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!("{what}: decay rates a must be strictly increasing")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Consensus,
    CouplingInequality,
    /// Unconstrained consensus with edge feed-forward rewritten as node
    /// Laplacian feedback.
    #[serde(rename = "feedforward")]
    FeedForward,
}

/// Per-subsystem augmentation parameters. Dual blocks are indexed by node
/// for consensus problems (empty where the node has no constraint) and by
/// link for coupling problems, which have no edge blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationProfile<T> {
    pub node: Vec<Block<T>>,
    pub node_feedforward: Vec<T>,
    pub dual: Vec<Block<T>>,
    pub dual_feedforward: Vec<T>,
    pub edge: Vec<Block<T>>,
    pub edge_feedforward: Vec<T>,
}

impl<T: Scalar> AugmentationProfile<T> {
    /// Same block everywhere it applies; feed-forward weight `edge_ff` on every edge.
    pub fn uniform(problem: &Problem<T>, node: Block<T>, dual: Block<T>, edge: Block<T>, edge_ff: T) -> Self {
        let n = problem.node_count();
        let (duals, edges) = match problem {
            Problem::Consensus(p) => (
                p.constraints
                    .iter()
                    .map(|g| if g.is_some() { dual.clone() } else { Block::empty() })
                    .collect(),
                vec![edge; p.edge_count()],
            ),
            Problem::Coupling(p) => (vec![dual; p.link_count()], Vec::new()),
        };
        let m = edges.len();
        let k = problem.multiplier_count();
        AugmentationProfile {
            node: vec![node; n],
            node_feedforward: vec![T::zero(); n],
            dual: duals,
            dual_feedforward: vec![T::zero(); k],
            edge: edges,
            edge_feedforward: vec![edge_ff; m],
        }
    }

    /// The unaugmented algorithm: unit-gain integrators, no feed-forward.
    pub fn standard(problem: &Problem<T>) -> Self {
        let one = Block::integrator(T::one());
        Self::uniform(problem, one.clone(), one.clone(), one, T::zero())
    }

    fn validate(&self, problem: &Problem<T>, variant: Variant) -> Result<()> {
        let n = problem.node_count();
        ensure_len("node blocks", n, self.node.len())?;
        ensure_len("node feed-forward weights", n, self.node_feedforward.len())?;
        ensure_len("dual blocks", problem.multiplier_count(), self.dual.len())?;
        ensure_len("dual feed-forward weights", problem.multiplier_count(), self.dual_feedforward.len())?;
        ensure_len("edge blocks", problem.edge_count(), self.edge.len())?;
        ensure_len("edge feed-forward weights", problem.edge_count(), self.edge_feedforward.len())?;
        for (i, b) in self.node.iter().enumerate() {
            b.validate(&format!("node {i}"))?;
            if b.order() == 0 {
                return Err(Error::Validation(format!("node {i} needs at least one state")));
            }
        }
        for (j, b) in self.edge.iter().enumerate() {
            b.validate(&format!("edge {j}"))?;
            if b.order() == 0 {
                return Err(Error::Validation(format!("edge {j} needs at least one state")));
            }
        }
        for (k, b) in self.dual.iter().enumerate() {
            b.validate(&format!("dual {k}"))?;
            let needed = match problem {
                Problem::Consensus(p) => p.constraints[k].is_some(),
                Problem::Coupling(_) => true,
            };
            if needed != (b.order() > 0) {
                return Err(Error::Validation(format!(
                    "dual {k}: a dual chain is required exactly where a constraint exists"
                )));
            }
        }
        let weights = self.node_feedforward.iter().chain(&self.dual_feedforward).chain(&self.edge_feedforward);
        if weights.clone().any(|d| !(d.is_finite() && *d >= T::zero())) {
            return Err(Error::Validation("feed-forward weights must be non-negative".into()));
        }
        if self.node_feedforward.iter().chain(&self.dual_feedforward).any(|d| *d != T::zero()) {
            return Err(Error::Unsupported(
                "node and dual feed-forward terms make the outputs implicit; only edge feed-forward is implemented"
                    .into(),
            ));
        }
        if variant == Variant::FeedForward {
            if let Problem::Consensus(p) = problem {
                if p.has_constraints() {
                    return Err(Error::Unsupported(
                        "the feed-forward variant covers unconstrained consensus problems only".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Index ranges of every block inside the concatenated state and control vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Layout {
    pub node: Vec<Range<usize>>,
    pub dual: Vec<Range<usize>>,
    pub edge: Vec<Range<usize>>,
    pub node_control: Vec<Range<usize>>,
    pub dual_control: Vec<Range<usize>>,
    pub edge_control: Vec<Range<usize>>,
    /// Edges carrying a feed-forward control channel (feed-forward variant only).
    pub feedforward_edges: Vec<usize>,
}

fn ranges<T: Scalar>(blocks: &[Block<T>], drop_first: bool) -> Vec<Range<usize>> {
    let mut at = 0;
    blocks
        .iter()
        .map(|b| {
            let len = if drop_first { b.order().saturating_sub(1) } else { b.order() };
            at += len;
            at - len..at
        })
        .collect()
}

fn end_of(r: &[Range<usize>]) -> usize {
    r.last().map_or(0, |r| r.end)
}

impl Layout {
    fn new<T: Scalar>(profile: &AugmentationProfile<T>, variant: Variant) -> Self {
        Layout {
            node: ranges(&profile.node, false),
            dual: ranges(&profile.dual, false),
            edge: ranges(&profile.edge, false),
            node_control: ranges(&profile.node, true),
            dual_control: ranges(&profile.dual, true),
            edge_control: ranges(&profile.edge, true),
            feedforward_edges: if variant == Variant::FeedForward {
                (0..profile.edge.len())
                    .filter(|j| profile.edge_feedforward[*j] > T::zero())
                    .collect()
            } else {
                Vec::new()
            },
        }
    }

    pub fn xi_len(&self) -> usize {
        end_of(&self.node)
    }

    pub fn tau_len(&self) -> usize {
        end_of(&self.dual)
    }

    pub fn zeta_len(&self) -> usize {
        end_of(&self.edge)
    }

    pub fn state_len(&self) -> usize {
        self.xi_len() + self.tau_len() + self.zeta_len()
    }

    /// Range of the dual states inside the flattened state vector.
    pub fn tau_span(&self) -> Range<usize> {
        self.xi_len()..self.xi_len() + self.tau_len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemState<T> {
    pub xi: Vec<T>,
    pub tau: Vec<T>,
    pub zeta: Vec<T>,
}

impl<T: Scalar> SystemState<T> {
    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.xi.len() + self.tau.len() + self.zeta.len());
        v.extend_from_slice(&self.xi);
        v.extend_from_slice(&self.tau);
        v.extend_from_slice(&self.zeta);
        v
    }

    pub fn from_flat(layout: &Layout, flat: &[T]) -> Result<Self> {
        ensure_len("flattened state", layout.state_len(), flat.len())?;
        let (xi, rest) = flat.split_at(layout.xi_len());
        let (tau, zeta) = rest.split_at(layout.tau_len());
        Ok(SystemState {
            xi: xi.to_vec(),
            tau: tau.to_vec(),
            zeta: zeta.to_vec(),
        })
    }
}

/// Interconnection signals computed from a state. `mu` includes any edge
/// feed-forward term; `mu_tilde` is the plain sum of edge states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputSnapshot<T> {
    pub theta: Vec<T>,
    pub lambda: Vec<T>,
    pub mu: Vec<T>,
    pub mu_tilde: Vec<T>,
    pub omega: Vec<T>,
    pub eta: Vec<T>,
    pub psi: Vec<T>,
    pub phi: Vec<T>,
}

/// Control vector split by subsystem; blocks follow [`Layout`]'s control ranges.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlInput<T> {
    pub node: Vec<T>,
    pub feedforward: Vec<T>,
    pub dual: Vec<T>,
    pub edge: Vec<T>,
}

impl<T: Scalar> ControlInput<T> {
    pub fn zeros(layout: &Layout) -> Self {
        ControlInput {
            node: vec![T::zero(); end_of(&layout.node_control)],
            feedforward: vec![T::zero(); layout.feedforward_edges.len()],
            dual: vec![T::zero(); end_of(&layout.dual_control)],
            edge: vec![T::zero(); end_of(&layout.edge_control)],
        }
    }

    pub fn len(&self) -> usize {
        self.node.len() + self.feedforward.len() + self.dual.len() + self.edge.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat order: node, feed-forward, dual, edge.
    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.node);
        v.extend_from_slice(&self.feedforward);
        v.extend_from_slice(&self.dual);
        v.extend_from_slice(&self.edge);
        v
    }

    pub fn add_flat(&mut self, extra: &[T]) -> Result<()> {
        ensure_len("control perturbation", self.len(), extra.len())?;
        let parts = [&mut self.node, &mut self.feedforward, &mut self.dual, &mut self.edge];
        let mut k = 0;
        for part in parts {
            for v in part.iter_mut() {
                *v += extra[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn check(&self, layout: &Layout) -> Result<()> {
        let z = Self::zeros(layout);
        ensure_len("node control", z.node.len(), self.node.len())?;
        ensure_len("feed-forward control", z.feedforward.len(), self.feedforward.len())?;
        ensure_len("dual control", z.dual.len(), self.dual.len())?;
        ensure_len("edge control", z.edge.len(), self.edge.len())
    }
}

/// Maps `(t, state, outputs)` to a control input. Must be deterministic.
pub trait Controller<T: Scalar>: Sync {
    fn control(&self, t: T, state: &SystemState<T>, outputs: &OutputSnapshot<T>) -> Result<ControlInput<T>>;
}

/// A validated problem/profile/variant triple with its precomputed layout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct System<T> {
    problem: Problem<T>,
    profile: AugmentationProfile<T>,
    variant: Variant,
    layout: Layout,
    /// Edge-weighted Laplacian, used by the feed-forward variant.
    laplacian: Option<Matrix<T>>,
}

impl<T: Scalar> System<T> {
    pub fn new(problem: Problem<T>, profile: AugmentationProfile<T>, variant: Variant) -> Result<Self> {
        match (&problem, variant) {
            (Problem::Consensus(_), Variant::Consensus | Variant::FeedForward) => {}
            (Problem::Coupling(_), Variant::CouplingInequality) => {}
            _ => {
                return Err(Error::Validation(format!(
                    "variant {variant:?} does not match the problem's constraint structure"
                )))
            }
        }
        profile.validate(&problem, variant)?;
        let laplacian = match (&problem, variant) {
            (Problem::Consensus(p), Variant::FeedForward) => {
                Some(weighted_laplacian(&p.coupling, &profile.edge_feedforward)?)
            }
            _ => None,
        };
        let layout = Layout::new(&profile, variant);
        Ok(System {
            problem,
            profile,
            variant,
            layout,
            laplacian,
        })
    }

    pub fn problem(&self) -> &Problem<T> {
        &self.problem
    }

    pub fn profile(&self) -> &AugmentationProfile<T> {
        &self.profile
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn laplacian(&self) -> Option<&Matrix<T>> {
        self.laplacian.as_ref()
    }

    pub fn has_edge_feedforward(&self) -> bool {
        self.profile.edge_feedforward.iter().any(|d| *d != T::zero())
    }

    /// State whose first component in each chain carries the given value and
    /// whose remaining components are zero. `lambda` must be non-negative.
    pub fn chain_state(&self, theta: &[T], lambda: &[T], mu: &[T]) -> Result<SystemState<T>> {
        let l = &self.layout;
        ensure_len("initial theta", l.node.len(), theta.len())?;
        // an empty slice stands for "no multipliers" when no dual chain exists
        let zeros = vec![T::zero(); l.dual.len()];
        let lambda = if lambda.is_empty() && l.tau_len() == 0 { &zeros[..] } else { lambda };
        ensure_len("initial lambda", l.dual.len(), lambda.len())?;
        ensure_len("initial mu", l.edge.len(), mu.len())?;
        let place = |ranges: &[Range<usize>], vals: &[T], len: usize| {
            let mut v = vec![T::zero(); len];
            for (r, x) in ranges.iter().zip(vals) {
                if !r.is_empty() {
                    v[r.start] = *x;
                }
            }
            v
        };
        for (k, (r, x)) in l.dual.iter().zip(lambda).enumerate() {
            if *x < T::zero() || (r.is_empty() && *x != T::zero()) {
                return Err(Error::Validation(format!(
                    "initial multiplier {k} must be non-negative and needs a dual chain"
                )));
            }
        }
        Ok(SystemState {
            xi: place(&l.node, theta, l.xi_len()),
            tau: place(&l.dual, lambda, l.tau_len()),
            zeta: place(&l.edge, mu, l.zeta_len()),
        })
    }

    fn check_state(&self, s: &SystemState<T>) -> Result<()> {
        ensure_len("xi", self.layout.xi_len(), s.xi.len())?;
        ensure_len("tau", self.layout.tau_len(), s.tau.len())?;
        ensure_len("zeta", self.layout.zeta_len(), s.zeta.len())
    }
}

fn chain_sum<T: Scalar>(v: &[T], ranges: &[Range<usize>]) -> Vec<T> {
    ranges.iter().map(|r| v[r.clone()].iter().copied().sum()).collect()
}

/// `[σ]⁺_ε`: keeps `σ_k` unless `ε_k = 0` and `σ_k < 0`, in which case 0.
pub fn positive_projection<T: Scalar>(sigma: &[T], epsilon: &[T]) -> Result<Vec<T>> {
    ensure_len("projection operands", sigma.len(), epsilon.len())?;
    sigma
        .iter()
        .zip(epsilon)
        .map(|(s, e)| {
            if *e < T::zero() || e.is_nan() {
                Err(Error::StateCorruption(format!("negative dual state {e} reached the projection")))
            } else if *e > T::zero() || *s >= T::zero() {
                Ok(*s)
            } else {
                Ok(T::zero())
            }
        })
        .collect()
}

fn eval_at<T: Scalar>(f: &ScalarConvexFunction<T>, p: T, entity: &str, k: usize) -> Result<(T, T)> {
    f.eval_and_grad(p).map_err(|e| e.at(format!("{entity} {k}")))
}

pub fn outputs_of<T: Scalar>(system: &System<T>, state: &SystemState<T>) -> Result<OutputSnapshot<T>> {
    system.check_state(state)?;
    let l = &system.layout;
    let theta = chain_sum(&state.xi, &l.node);
    let lambda = chain_sum(&state.tau, &l.dual);
    let mu_tilde = chain_sum(&state.zeta, &l.edge);
    let mut grad = Vec::with_capacity(theta.len());
    for (i, (f, t)) in system.problem.objectives().iter().zip(&theta).enumerate() {
        grad.push(eval_at(f, *t, "node", i)?.1);
    }
    let n = theta.len();
    let (omega, eta, mu, psi) = match &system.problem {
        Problem::Consensus(p) => consensus_signals(p, &system.profile, &theta, &lambda, &mu_tilde)?,
        Problem::Coupling(p) => {
            let omega = p.routing.matrix().mul_vec(&theta);
            let mut weighted = Vec::with_capacity(omega.len());
            for (j, h) in p.link_constraints.iter().enumerate() {
                weighted.push(eval_at(h, omega[j], "link", j)?.1 * lambda[j]);
            }
            let eta = p.routing.matrix().tr_mul_vec(&weighted);
            (omega, eta, Vec::new(), vec![T::zero(); n])
        }
    };
    let phi = (0..n).map(|i| -grad[i] - eta[i] - psi[i]).collect();
    Ok(OutputSnapshot {
        theta,
        lambda,
        mu,
        mu_tilde,
        omega,
        eta,
        psi,
        phi,
    })
}

type Signals<T> = (Vec<T>, Vec<T>, Vec<T>, Vec<T>);

fn consensus_signals<T: Scalar>(
    p: &ConsensusProblem<T>,
    profile: &AugmentationProfile<T>,
    theta: &[T],
    lambda: &[T],
    mu_tilde: &[T],
) -> Result<Signals<T>> {
    let omega = p.coupling.tr_mul_vec(theta);
    let mut eta = vec![T::zero(); theta.len()];
    for (i, g) in p.constraints.iter().enumerate() {
        if let Some(g) = g {
            eta[i] = eval_at(g, theta[i], "node", i)?.1 * lambda[i];
        }
    }
    let mu: Vec<T> = mu_tilde
        .iter()
        .zip(&omega)
        .zip(&profile.edge_feedforward)
        .map(|((m, w), d)| *m + *d * *w)
        .collect();
    let psi = p.coupling.mul_vec(&mu);
    Ok((omega, eta, mu, psi))
}

/// State derivative for a given control, with the positive projection
/// applied to every dual chain.
pub fn derivative<T: Scalar>(
    system: &System<T>,
    state: &SystemState<T>,
    out: &OutputSnapshot<T>,
    u: &ControlInput<T>,
) -> Result<SystemState<T>> {
    let l = &system.layout;
    let pr = &system.profile;
    u.check(l)?;
    let ff = system.variant == Variant::FeedForward;

    // Node drive: φ, or φ̃ plus the routed feed-forward channels.
    let mut drive = out.phi.clone();
    if ff {
        if let Problem::Consensus(p) = &system.problem {
            let psi_tilde = p.coupling.mul_vec(&out.mu_tilde);
            let mut routed = vec![T::zero(); p.edge_count()];
            for (c, j) in l.feedforward_edges.iter().enumerate() {
                routed[*j] = u.feedforward[c];
            }
            let injected = p.coupling.mul_vec(&routed);
            for i in 0..drive.len() {
                drive[i] = out.phi[i] + out.psi[i] - psi_tilde[i] + injected[i];
            }
        }
    }

    let mut xi = vec![T::zero(); state.xi.len()];
    for (i, (r, c)) in l.node.iter().zip(&l.node_control).enumerate() {
        let b = &pr.node[i].b;
        for (k, idx) in r.clone().enumerate() {
            xi[idx] = b[k] * drive[i];
            if k > 0 {
                let uk = u.node[c.start + k - 1];
                xi[idx] += if ff { b[k] * uk } else { uk };
            }
        }
    }

    let mut tau = vec![T::zero(); state.tau.len()];
    for (k, (r, c)) in l.dual.iter().zip(&l.dual_control).enumerate() {
        if r.is_empty() {
            continue;
        }
        let level = match &system.problem {
            Problem::Consensus(p) => {
                let g = p.constraints[k].as_ref().expect("dual chain implies constraint");
                eval_at(g, out.theta[k], "node", k)?.0
            }
            Problem::Coupling(p) => eval_at(&p.link_constraints[k], out.omega[k], "link", k)?.0,
        };
        let b = &pr.dual[k].b;
        let sigma: Vec<T> = (0..r.len())
            .map(|m| b[m] * level + if m > 0 { u.dual[c.start + m - 1] } else { T::zero() })
            .collect();
        let proj = positive_projection(&sigma, &state.tau[r.clone()])?;
        tau[r.clone()].copy_from_slice(&proj);
    }

    let mut zeta = vec![T::zero(); state.zeta.len()];
    for (j, (r, c)) in l.edge.iter().zip(&l.edge_control).enumerate() {
        let b = &pr.edge[j].b;
        for (k, idx) in r.clone().enumerate() {
            zeta[idx] = b[k] * out.omega[j];
            if k > 0 {
                let uk = u.edge[c.start + k - 1];
                zeta[idx] += if ff { b[k] * uk } else { uk };
            }
        }
    }
    Ok(SystemState { xi, tau, zeta })
}

/// Full closed-loop field: outputs, then control, then derivative.
pub fn vector_field<T: Scalar>(
    system: &System<T>,
    t: T,
    state: &SystemState<T>,
    controller: &dyn Controller<T>,
) -> Result<SystemState<T>> {
    let out = outputs_of(system, state)?;
    let u = controller.control(t, state, &out)?;
    derivative(system, state, &out, &u)
}

/// Linear state feedback that turns the control form back into the
/// augmented algorithm.
#[derive(Debug, Clone, Copy)]
pub struct NominalController<'a, T> {
    system: &'a System<T>,
}

pub fn nominal_controller<T: Scalar>(system: &System<T>) -> NominalController<'_, T> {
    NominalController { system }
}

impl<T: Scalar> NominalController<'_, T> {
    pub fn evaluate(&self, state: &SystemState<T>, out: &OutputSnapshot<T>) -> ControlInput<T> {
        let s = self.system;
        let l = &s.layout;
        let ff = s.variant == Variant::FeedForward;
        let mut u = ControlInput::zeros(l);
        let decay = |blocks: &[Block<T>], states: &[T], ranges: &[Range<usize>], ctrl: &[Range<usize>], out: &mut [T], scaled: bool| {
            for ((blk, r), c) in blocks.iter().zip(ranges).zip(ctrl) {
                for m in 1..blk.order() {
                    let v = -blk.a[m - 1] * states[r.start + m];
                    out[c.start + m - 1] = if scaled { v / blk.b[m] } else { v };
                }
            }
        };
        decay(&s.profile.node, &state.xi, &l.node, &l.node_control, &mut u.node, ff);
        decay(&s.profile.dual, &state.tau, &l.dual, &l.dual_control, &mut u.dual, false);
        decay(&s.profile.edge, &state.zeta, &l.edge, &l.edge_control, &mut u.edge, ff);
        for (c, j) in l.feedforward_edges.iter().enumerate() {
            u.feedforward[c] = -s.profile.edge_feedforward[*j] * out.omega[*j];
        }
        u
    }
}

impl<T: Scalar> Controller<T> for NominalController<'_, T> {
    fn control(&self, _t: T, state: &SystemState<T>, out: &OutputSnapshot<T>) -> Result<ControlInput<T>> {
        Ok(self.evaluate(state, out))
    }
}

/// Open-loop sinusoidal bursts `A sin(ω t)` on `[0, T)`, one per control
/// channel, with `T` a whole number of half periods so each burst ends at zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Perturbation<T> {
    pub amplitude: Vec<T>,
    pub frequency: Vec<T>,
    pub duration: Vec<T>,
}

impl<T: Scalar> Perturbation<T> {
    /// Draws `A ∈ [0.01, 0.5]`, `ω ∈ [0.5, 5]` and up to six half periods,
    /// keeping every burst inside `[0, horizon / 4]`.
    pub fn sample(rng: &mut impl Rng, channels: usize, horizon: T) -> Result<Self> {
        let limit = horizon.as_f64() / 4.0;
        let mut p = Perturbation {
            amplitude: Vec::with_capacity(channels),
            frequency: Vec::with_capacity(channels),
            duration: Vec::with_capacity(channels),
        };
        for _ in 0..channels {
            let a = rng.gen_range(0.01..=0.5);
            let w: f64 = rng.gen_range(0.5..=5.0);
            let max_half = ((limit * w / std::f64::consts::PI).floor() as usize).min(6);
            if max_half == 0 {
                return Err(Error::Validation(format!(
                    "horizon {limit} too short for a compactly supported perturbation"
                )));
            }
            let m = rng.gen_range(1..=max_half);
            p.amplitude.push(T::lit(a));
            p.frequency.push(T::lit(w));
            p.duration.push(T::lit(m as f64 * std::f64::consts::PI / w));
        }
        Ok(p)
    }

    pub fn zero(channels: usize) -> Self {
        Perturbation {
            amplitude: vec![T::zero(); channels],
            frequency: vec![T::one(); channels],
            duration: vec![T::zero(); channels],
        }
    }

    pub fn value(&self, t: T) -> Vec<T> {
        (0..self.amplitude.len())
            .map(|k| {
                if t < self.duration[k] {
                    self.amplitude[k] * (self.frequency[k] * t).sin()
                } else {
                    T::zero()
                }
            })
            .collect()
    }

    /// Exact `∫ Σ_k r_k v_k² dt`; each burst contributes `r A² T / 2`.
    pub fn weighted_energy(&self, weights: &[T]) -> Result<T> {
        ensure_len("perturbation weights", self.amplitude.len(), weights.len())?;
        Ok((0..weights.len())
            .map(|k| weights[k] * self.amplitude[k] * self.amplitude[k] * self.duration[k] / T::lit(2.0))
            .sum())
    }
}

/// Nominal feedback plus an open-loop perturbation.
#[derive(Debug, Clone)]
pub struct PerturbedController<'a, T> {
    pub nominal: NominalController<'a, T>,
    pub perturbation: Perturbation<T>,
}

impl<T: Scalar> Controller<T> for PerturbedController<'_, T> {
    fn control(&self, t: T, state: &SystemState<T>, out: &OutputSnapshot<T>) -> Result<ControlInput<T>> {
        let mut u = self.nominal.evaluate(state, out);
        u.add_flat(&self.perturbation.value(t))?;
        Ok(u)
    }
}

/// Rewrites a consensus system with edge feed-forward as the equivalent
/// system with node Laplacian feedback and feed-forward control channels.
pub fn feedforward_transform<T: Scalar>(system: &System<T>) -> Result<System<T>> {
    match (&system.problem, system.variant) {
        (Problem::Consensus(p), Variant::Consensus | Variant::FeedForward) => {
            if p.has_constraints() {
                return Err(Error::Unsupported(
                    "local inequality constraints have no feed-forward rewrite".into(),
                ));
            }
            System::new(system.problem.clone(), system.profile.clone(), Variant::FeedForward)
        }
        _ => Err(Error::Unsupported("only consensus systems admit the feed-forward rewrite".into())),
    }
}

/// Helper for tests and tools: the consensus problem inside, if any.
pub fn consensus_problem<T: Scalar>(system: &System<T>) -> Option<&ConsensusProblem<T>> {
    match &system.problem {
        Problem::Consensus(p) => Some(p),
        Problem::Coupling(_) => None,
    }
}

pub fn coupling_problem<T: Scalar>(system: &System<T>) -> Option<&CouplingProblem<T>> {
    match &system.problem {
        Problem::Coupling(p) => Some(p),
        Problem::Consensus(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::{reference_solution, ConsensusProblem};
    use crate::graph::{incidence_matrix, Graph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type F = ScalarConvexFunction<f64>;

    fn triangle() -> Graph {
        Graph::new(&["v1", "v2", "v3"], &[("e1", "v1", "v2"), ("e2", "v1", "v3"), ("e3", "v2", "v3")]).unwrap()
    }

    fn example() -> Problem<f64> {
        Problem::Consensus(
            ConsensusProblem::unconstrained(
                &triangle(),
                vec![F::quadratic(0.5, 1.0), F::exponential(1.0, -0.5), F::neg_log(1.0, 0.0)],
            )
            .unwrap(),
        )
    }

    fn auxiliary(problem: &Problem<f64>) -> AugmentationProfile<f64> {
        AugmentationProfile::uniform(
            problem,
            Block::new(vec![0.5, 0.5], vec![2.0]),
            Block::integrator(1.0),
            Block::integrator(1.0),
            0.0,
        )
    }

    #[test]
    fn projection_cases() {
        assert_eq!(positive_projection(&[-3.0], &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(positive_projection(&[-3.0], &[0.1]).unwrap(), vec![-3.0]);
        assert_eq!(positive_projection(&[5.0], &[0.0]).unwrap(), vec![5.0]);
        assert!(matches!(positive_projection(&[1.0], &[-1e-3]), Err(Error::StateCorruption(_))));
    }

    #[test]
    fn profile_validation() {
        let p = example();
        let bad_b = AugmentationProfile::uniform(&p, Block::integrator(-1.0), Block::empty(), Block::integrator(1.0), 0.0);
        assert!(System::new(p.clone(), bad_b, Variant::Consensus).is_err());
        let bad_a = AugmentationProfile::uniform(
            &p,
            Block::new(vec![1.0, 1.0, 1.0], vec![2.0, 1.0]),
            Block::empty(),
            Block::integrator(1.0),
            0.0,
        );
        assert!(System::new(p.clone(), bad_a, Variant::Consensus).is_err());
        let mut ff_node = AugmentationProfile::standard(&p);
        ff_node.node_feedforward[0] = 0.5;
        assert!(matches!(System::new(p.clone(), ff_node, Variant::Consensus), Err(Error::Unsupported(_))));
        assert!(System::new(p, auxiliary(&example()), Variant::CouplingInequality).is_err());
    }

    #[test]
    fn outputs_on_the_triangle() {
        let p = example();
        let sys = System::new(p.clone(), AugmentationProfile::standard(&p), Variant::Consensus).unwrap();
        let s = sys.chain_state(&[1.0, 1e-3, 1e-3], &[], &[0.0; 3]).unwrap();
        let out = outputs_of(&sys, &s).unwrap();
        // ω = Aᵀθ for θ ≈ (1, 0, 0)
        assert!((out.omega[0] + 0.999).abs() < 1e-12 && (out.omega[1] + 0.999).abs() < 1e-12);
        assert_eq!(out.omega[2], 0.0);

        let bad = sys.chain_state(&[1.0, 1.0, -1.0], &[], &[0.0; 3]).unwrap();
        match outputs_of(&sys, &bad) {
            Err(Error::EntityDomain { entity, .. }) => assert_eq!(entity, "node 2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let p = example();
        let r = reference_solution(&p).unwrap();
        for profile in [AugmentationProfile::standard(&p), auxiliary(&p)] {
            let sys = System::new(p.clone(), profile, Variant::Consensus).unwrap();
            let s = sys.chain_state(&r.theta_star, &[], &r.mu_star).unwrap();
            let out = outputs_of(&sys, &s).unwrap();
            assert!(out.phi.iter().all(|v| v.abs() < 1e-12));
            assert!(out.omega.iter().all(|v| v.abs() < 1e-15));
            let d = vector_field(&sys, 0.0, &s, &nominal_controller(&sys)).unwrap();
            assert!(d.flatten().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn trivial_profile_is_the_plain_primal_dual_field() {
        let p = example();
        let sys = System::new(p.clone(), AugmentationProfile::standard(&p), Variant::Consensus).unwrap();
        let a = incidence_matrix::<f64>(&triangle()).into_matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let th: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..3.0)).collect();
            let mu: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let s = sys.chain_state(&th, &[], &mu).unwrap();
            let d = vector_field(&sys, 0.0, &s, &nominal_controller(&sys)).unwrap();
            let am = a.mul_vec(&mu);
            let grads = [2.0 * (th[0] - 0.5), -0.5 * (-0.5 * th[1]).exp(), -1.0 / th[2]];
            for i in 0..3 {
                assert!((d.xi[i] - (-grads[i] - am[i])).abs() < 1e-14);
            }
            let w = a.tr_mul_vec(&th);
            assert_eq!(d.zeta, w);
        }
    }

    #[test]
    fn auxiliary_chain_matches_proximal_form() {
        // θ' = ξ1 - ξ2: θ̇ = φ + (θ' - θ), θ̇' = θ - θ'
        let p = example();
        let sys = System::new(p.clone(), auxiliary(&p), Variant::Consensus).unwrap();
        let s = SystemState {
            xi: vec![1.0, 0.3, 0.4, -0.2, 2.0, 0.1],
            tau: vec![],
            zeta: vec![0.5, -0.1, 0.2],
        };
        let out = outputs_of(&sys, &s).unwrap();
        let d = vector_field(&sys, 0.0, &s, &nominal_controller(&sys)).unwrap();
        for i in 0..3 {
            let (x1, x2) = (s.xi[2 * i], s.xi[2 * i + 1]);
            let (th, thp) = (x1 + x2, x1 - x2);
            let (d1, d2) = (d.xi[2 * i], d.xi[2 * i + 1]);
            assert!((d1 + d2 - (out.phi[i] + thp - th)).abs() < 1e-14);
            assert!((d1 - d2 - (th - thp)).abs() < 1e-14);
        }
    }

    #[test]
    fn nominal_control_examples() {
        let p = example();
        let sys = System::new(p.clone(), auxiliary(&p), Variant::Consensus).unwrap();
        let s = SystemState {
            xi: vec![1.0, 0.3, 1.0, 0.0, 1.0, 0.0],
            tau: vec![],
            zeta: vec![0.0; 3],
        };
        let out = outputs_of(&sys, &s).unwrap();
        let u = nominal_controller(&sys).evaluate(&s, &out);
        assert!((u.node[0] + 0.6).abs() < 1e-15);
        assert!(u.edge.is_empty() && u.dual.is_empty());

        let std = System::new(p.clone(), AugmentationProfile::standard(&p), Variant::Consensus).unwrap();
        assert_eq!(ControlInput::<f64>::zeros(std.layout()).len(), 0);
    }

    #[test]
    fn feedforward_closed_loop_is_laplacian_feedback() {
        let p = example();
        let mut profile = AugmentationProfile::standard(&p);
        profile.edge_feedforward = vec![1.0; 3];
        let direct = System::new(p.clone(), profile, Variant::Consensus).unwrap();
        let ff = feedforward_transform(&direct).unwrap();
        let lap = ff.laplacian().unwrap().clone();
        let a = incidence_matrix::<f64>(&triangle()).into_matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let th: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..3.0)).collect();
            let mu: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let s = ff.chain_state(&th, &[], &mu).unwrap();
            let d_ff = vector_field(&ff, 0.0, &s, &nominal_controller(&ff)).unwrap();
            let d_direct = vector_field(&direct, 0.0, &s, &nominal_controller(&direct)).unwrap();
            let grads = [2.0 * (th[0] - 0.5), -0.5 * (-0.5 * th[1]).exp(), -1.0 / th[2]];
            let (am, lt) = (a.mul_vec(&mu), lap.mul_vec(&th));
            for i in 0..3 {
                let expected = -grads[i] - am[i] - lt[i];
                assert!((d_ff.xi[i] - expected).abs() < 1e-13);
                assert!((d_direct.xi[i] - expected).abs() < 1e-13);
            }
            assert_eq!(d_ff.zeta, a.tr_mul_vec(&th));
        }
    }

    #[test]
    fn zero_feedforward_transform_keeps_the_dynamics() {
        let p = example();
        let base = System::new(p.clone(), auxiliary(&p), Variant::Consensus).unwrap();
        let ff = feedforward_transform(&base).unwrap();
        assert!(ff.layout().feedforward_edges.is_empty());
        let s = SystemState {
            xi: vec![1.0, 0.3, 0.4, -0.2, 2.0, 0.1],
            tau: vec![],
            zeta: vec![0.5, -0.1, 0.2],
        };
        let a = vector_field(&base, 0.0, &s, &nominal_controller(&base)).unwrap();
        let b = vector_field(&ff, 0.0, &s, &nominal_controller(&ff)).unwrap();
        for (x, y) in a.flatten().iter().zip(b.flatten()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_keeps_boundary_duals_nonnegative() {
        let g = triangle();
        let cons = vec![Some(F::affine(1.0, -2.0)); 3];
        let p = Problem::Consensus(
            ConsensusProblem::on_graph(&g, vec![F::quadratic(0.5, 1.0), F::exponential(1.0, -0.5), F::neg_log(1.0, 0.0)], cons)
                .unwrap(),
        );
        let profile = AugmentationProfile::uniform(
            &p,
            Block::integrator(1.0),
            Block::new(vec![1.0, 0.5], vec![1.0]),
            Block::integrator(1.0),
            0.0,
        );
        let sys = System::new(p, profile, Variant::Consensus).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let th: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..4.0)).collect();
            let mut s = sys.chain_state(&th, &[0.0; 3], &[0.0; 3]).unwrap();
            for v in s.tau.iter_mut() {
                if rng.gen_bool(0.5) {
                    *v = rng.gen_range(0.0..1.0);
                }
            }
            let d = vector_field(&sys, 0.0, &s, &nominal_controller(&sys)).unwrap();
            for (x, dx) in s.tau.iter().zip(&d.tau) {
                if *x == 0.0 {
                    assert!(*dx >= 0.0);
                }
            }
        }
    }

    #[test]
    fn perturbation_bursts_end_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Perturbation::<f64>::sample(&mut rng, 4, 100.0).unwrap();
        for k in 0..4 {
            assert!(p.duration[k] <= 25.0);
            let end = p.amplitude[k] * (p.frequency[k] * p.duration[k]).sin();
            assert!(end.abs() < 1e-12);
        }
        assert!(p.value(30.0).iter().all(|v| *v == 0.0));
        let e = p.weighted_energy(&[1.0; 4]).unwrap();
        assert!(e > 0.0);
        assert_eq!(Perturbation::<f64>::zero(4).weighted_energy(&[1.0; 4]).unwrap(), 0.0);
    }
}

//! Fixed-step projected Runge-Kutta integration, trajectory storage,
//! equilibrium detection and transient metrics.

use std::ops::Range;

use serde::Serialize;

use crate::dynamics::{derivative, outputs_of, ControlInput, Controller, OutputSnapshot, System, SystemState};
use crate::error::{ensure_len, Error, Result};
use crate::scalar::Scalar;

/// States beyond this magnitude are treated as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e9;

/// Maximum component movement over the trailing window for a run to count as converged.
pub const CONVERGENCE_MOVEMENT: f64 = 1e-7;

/// A vector field on `R^n` whose components in [`nonnegative`](Self::nonnegative)
/// are constrained to stay `≥ 0`. The field itself is responsible for
/// projecting its derivative at the boundary.
pub trait ProjectedField<T: Scalar> {
    fn dimension(&self) -> usize;
    fn nonnegative(&self) -> Range<usize>;
    fn eval(&self, t: T, x: &[T]) -> Result<Vec<T>>;
}

/// Samples on the grid `t_k = k dt`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory<T> {
    pub dimension: usize,
    pub times: Vec<T>,
    pub data: Vec<T>,
}

impl<T: Scalar> RawTrajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn sample(&self, k: usize) -> &[T] {
        &self.data[k * self.dimension..(k + 1) * self.dimension]
    }

    pub fn last(&self) -> &[T] {
        self.sample(self.len() - 1)
    }
}

/// Number of steps so that `steps · dt` first reaches `t_end`.
pub fn step_count<T: Scalar>(dt: T, t_end: T) -> Result<usize> {
    if !(dt.is_finite() && dt > T::zero() && t_end.is_finite() && t_end > T::zero()) {
        return Err(Error::Validation(format!("need dt > 0 and t_end > 0, got dt = {dt}, t_end = {t_end}")));
    }
    let ratio = t_end.as_f64() / dt.as_f64();
    Ok((ratio - 1e-9 * ratio.max(1.0)).ceil().max(1.0) as usize)
}

fn clamp_nonnegative<T: Scalar>(x: &mut [T], span: &Range<usize>) {
    for v in &mut x[span.clone()] {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

fn axpy<T: Scalar>(x: &[T], h: T, k: &[T]) -> Vec<T> {
    x.iter().zip(k).map(|(a, b)| *a + h * *b).collect()
}

/// Classic four-stage Runge-Kutta with the constrained components clamped
/// before every stage evaluation and after every step.
pub fn integrate<T: Scalar, F: ProjectedField<T> + ?Sized>(
    field: &F,
    x0: &[T],
    dt: T,
    t_end: T,
) -> Result<RawTrajectory<T>> {
    let n = field.dimension();
    ensure_len("initial state", n, x0.len())?;
    let span = field.nonnegative();
    if x0[span.clone()].iter().any(|v| *v < T::zero()) {
        return Err(Error::Validation("initial constrained components must be non-negative".into()));
    }
    let steps = step_count(dt, t_end)?;
    let mut times = Vec::with_capacity(steps + 1);
    let mut data = Vec::with_capacity((steps + 1) * n);
    let mut x = x0.to_vec();
    times.push(T::zero());
    data.extend_from_slice(&x);
    let (half, sixth, two) = (T::lit(0.5), T::lit(1.0 / 6.0), T::lit(2.0));
    let bound = T::lit(DIVERGENCE_BOUND);
    for k in 0..steps {
        let t = dt * T::from_usize_lossy(k);
        let stage = |tt: T, mut y: Vec<T>| {
            clamp_nonnegative(&mut y, &span);
            field.eval(tt, &y)
        };
        let k1 = field.eval(t, &x)?;
        let k2 = stage(t + half * dt, axpy(&x, half * dt, &k1))?;
        let k3 = stage(t + half * dt, axpy(&x, half * dt, &k2))?;
        let k4 = stage(t + dt, axpy(&x, dt, &k3))?;
        for i in 0..n {
            x[i] += dt * sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
        }
        clamp_nonnegative(&mut x, &span);
        let t_next = dt * T::from_usize_lossy(k + 1);
        if let Some(i) = x.iter().position(|v| !v.is_finite() || v.abs() > bound) {
            return Err(Error::Divergence {
                time: t_next.as_f64(),
                message: format!("state component {i} reached {}", x[i]),
            });
        }
        times.push(t_next);
        data.extend_from_slice(&x);
    }
    Ok(RawTrajectory { dimension: n, times, data })
}

/// Closed-loop system under a controller, seen as a flat projected field.
pub struct ClosedLoop<'a, T: Scalar> {
    pub system: &'a System<T>,
    pub controller: &'a dyn Controller<T>,
}

impl<T: Scalar> ProjectedField<T> for ClosedLoop<'_, T> {
    fn dimension(&self) -> usize {
        self.system.layout().state_len()
    }

    fn nonnegative(&self) -> Range<usize> {
        self.system.layout().tau_span()
    }

    fn eval(&self, t: T, x: &[T]) -> Result<Vec<T>> {
        let s = SystemState::from_flat(self.system.layout(), x)?;
        let out = outputs_of(self.system, &s)?;
        let u = self.controller.control(t, &s, &out)?;
        Ok(derivative(self.system, &s, &out, &u)?.flatten())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<SystemState<T>>,
    pub outputs: Vec<OutputSnapshot<T>>,
    pub controls: Vec<ControlInput<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> T {
        self.times[1] - self.times[0]
    }

    pub fn final_outputs(&self) -> &OutputSnapshot<T> {
        self.outputs.last().expect("trajectory has samples")
    }
}

/// Integrates the closed loop and records outputs and controls at every sample.
pub fn simulate<T: Scalar>(
    system: &System<T>,
    controller: &dyn Controller<T>,
    state0: &SystemState<T>,
    dt: T,
    t_end: T,
) -> Result<Trajectory<T>> {
    let field = ClosedLoop { system, controller };
    let raw = integrate(&field, &state0.flatten(), dt, t_end)?;
    let mut traj = Trajectory {
        times: raw.times.clone(),
        states: Vec::with_capacity(raw.len()),
        outputs: Vec::with_capacity(raw.len()),
        controls: Vec::with_capacity(raw.len()),
    };
    for (k, t) in raw.times.iter().enumerate() {
        let s = SystemState::from_flat(system.layout(), raw.sample(k))?;
        let out = outputs_of(system, &s)?;
        let u = controller.control(*t, &s, &out)?;
        traj.states.push(s);
        traj.outputs.push(out);
        traj.controls.push(u);
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equilibrium<T> {
    pub state: SystemState<T>,
    pub converged: bool,
    /// Largest `max - min` of any state component over the window.
    pub movement: T,
}

/// Mean of the last `window` states; converged when no component moves by
/// more than [`CONVERGENCE_MOVEMENT`] across the window.
pub fn equilibrium_of<T: Scalar>(system: &System<T>, traj: &Trajectory<T>, window: usize) -> Result<Equilibrium<T>> {
    if window == 0 || window >= traj.len() {
        return Err(Error::Validation(format!(
            "window {window} must be positive and shorter than the trajectory ({} samples)",
            traj.len()
        )));
    }
    let tail: Vec<Vec<T>> = traj.states[traj.len() - window..].iter().map(SystemState::flatten).collect();
    let dim = tail[0].len();
    let mut mean = vec![T::zero(); dim];
    let mut movement = T::zero();
    for i in 0..dim {
        let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
        for s in &tail {
            mean[i] += s[i];
            lo = lo.min(s[i]);
            hi = hi.max(s[i]);
        }
        mean[i] /= T::from_usize_lossy(window);
        movement = movement.max(hi - lo);
    }
    Ok(Equilibrium {
        state: SystemState::from_flat(system.layout(), &mean)?,
        converged: movement.is_finite() && movement < T::lit(CONVERGENCE_MOVEMENT),
        movement,
    })
}

/// Default trailing window: the last 1% of the samples, at least two.
pub fn default_window(samples: usize) -> usize {
    (samples / 100).max(2).min(samples.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransientMetrics<T> {
    /// `None` when the run never stays inside the band.
    pub settling_time: Option<T>,
    pub overshoot: T,
    pub oscillation_count: usize,
    pub band: T,
    /// The initial deviation was zero, so the band collapses.
    pub degenerate: bool,
}

impl<T: Scalar> TransientMetrics<T> {
    /// Metrics from per-sample deviation vectors `θ(t_k) - θ*`.
    pub fn from_deviations(times: &[T], devs: &[Vec<T>], band_fraction: T) -> Result<Self> {
        ensure_len("deviation samples", times.len(), devs.len())?;
        if devs.is_empty() {
            return Err(Error::Validation("no samples".into()));
        }
        if !(band_fraction > T::zero() && band_fraction < T::one()) {
            return Err(Error::Validation("band fraction must lie in (0, 1)".into()));
        }
        let n = devs[0].len();
        let initial = devs[0].iter().fold(T::zero(), |m, d| m.max(d.abs()));
        if initial == T::zero() {
            return Ok(TransientMetrics {
                settling_time: Some(T::zero()),
                overshoot: T::zero(),
                oscillation_count: 0,
                band: T::zero(),
                degenerate: true,
            });
        }
        let band = band_fraction * initial;

        // last sample outside the band, then interpolate the exit time
        let outside = |k: usize| devs[k].iter().any(|d| d.abs() > band);
        let settling_time = match (0..devs.len()).rev().find(|k| outside(*k)) {
            None => Some(T::zero()),
            Some(k) if k + 1 == devs.len() => None,
            Some(k) => {
                let mut t_exit = times[k];
                for (x, y) in devs[k].iter().zip(&devs[k + 1]) {
                    let (a, b) = (x.abs(), y.abs());
                    if a > band {
                        let frac = (a - band) / (a - b);
                        t_exit = t_exit.max(times[k] + frac * (times[k + 1] - times[k]));
                    }
                }
                Some(t_exit)
            }
        };

        // sign changes, ignoring samples inside a tiny noise floor
        let floor = initial * T::lit(1e-9).max(T::lit(100.0) * T::epsilon());
        let mut oscillation_count = 0;
        let mut overshoot = T::zero();
        for i in 0..n {
            let d0 = devs[0][i];
            let mut last_sign = 0i8;
            for d in devs.iter().map(|d| d[i]) {
                let excess = if d0 > T::zero() {
                    -d
                } else if d0 < T::zero() {
                    d
                } else {
                    d.abs()
                };
                overshoot = overshoot.max(excess);
                if d.abs() <= floor {
                    continue;
                }
                let sign = if d > T::zero() { 1 } else { -1 };
                if last_sign != 0 && sign != last_sign {
                    oscillation_count += 1;
                }
                last_sign = sign;
            }
        }
        Ok(TransientMetrics {
            settling_time,
            overshoot,
            oscillation_count,
            band,
            degenerate: false,
        })
    }
}

/// Settling time, overshoot and zero-crossing count of `θ - θ*`, with the
/// band `band_fraction · max_i |θ_i(0) - θ*_i|`.
pub fn transient_metrics<T: Scalar>(traj: &Trajectory<T>, theta_star: &[T], band_fraction: T) -> Result<TransientMetrics<T>> {
    let devs: Vec<Vec<T>> = traj
        .outputs
        .iter()
        .map(|o| {
            ensure_len("reference theta", o.theta.len(), theta_star.len())?;
            Ok(o.theta.iter().zip(theta_star).map(|(a, b)| *a - *b).collect())
        })
        .collect::<Result<_>>()?;
    TransientMetrics::from_deviations(&traj.times, &devs, band_fraction)
}

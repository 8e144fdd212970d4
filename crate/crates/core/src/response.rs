//! Response generation and the tick-driven runtime loop.
//!
//! At every inference tick the remaining controlled trajectory is regenerated
//! from the current estimate. An executor running at its own rate follows the
//! latest plan, advancing along it with the estimated phase velocity, and an
//! alpha-beta tracker smooths the jumps between successive plans.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::reconstruct;
use crate::error::{Error, Result};
use crate::filter::{FilterState, NoiseConfig, PhaseFilter};
use crate::interaction::{Interaction, PartialObservation};
use crate::prior::PriorModel;

/// Lower bound on plan resolution.
pub const MIN_PLAN_POINTS: usize = 10;
/// Upper bound on plan resolution, reached when the partner has stopped.
pub const MAX_PLAN_POINTS: usize = 4096;

/// Remaining controlled trajectory from the current phase to the end.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePlan {
    pub phases: Vec<f64>,
    /// `D_c × K` setpoints.
    pub values: DMatrix<f64>,
    pub issued_at_tick: usize,
    /// Phase velocity estimate at issue time.
    pub phase_velocity: f64,
}

impl ResponsePlan {
    /// Setpoints at `phase`, linearly interpolated and held at the ends.
    pub fn value_at(&self, phase: f64) -> DVector<f64> {
        let k = self.phases.len();
        let first = self.phases[0];
        let last = self.phases[k - 1];
        if phase <= first || last <= first {
            return self.values.column(0).into_owned();
        }
        if phase >= last {
            return self.values.column(k - 1).into_owned();
        }
        let pos = (phase - first) / (last - first) * (k - 1) as f64;
        let i = (pos.floor() as usize).min(k - 2);
        let frac = pos - i as f64;
        self.values.column(i) * (1.0 - frac) + self.values.column(i + 1) * frac
    }
}

/// Number of plan points for the remaining horizon: one per expected
/// remaining sample, within [`MIN_PLAN_POINTS`, `MAX_PLAN_POINTS`].
pub fn plan_resolution(state: &FilterState) -> usize {
    let remaining = 1.0 - state.phase().clamp(0.0, 1.0);
    let vel = state.phase_velocity();
    let samples = if vel > 0.0 { (remaining / vel).ceil() } else { f64::INFINITY };
    if samples.is_finite() {
        (samples as usize).clamp(MIN_PLAN_POINTS, MAX_PLAN_POINTS)
    } else {
        MAX_PLAN_POINTS
    }
}

pub fn generate_response(
    state: &FilterState,
    resolution: usize,
    prior: &PriorModel,
    tick: usize,
) -> Result<ResponsePlan> {
    if resolution < 2 {
        return Err(Error::Config(format!(
            "plan resolution must be at least 2, got {resolution}"
        )));
    }
    if state.weight_dim() != prior.weight_dim() {
        return Err(Error::Dimension(format!(
            "state has {} weights, model has {}",
            state.weight_dim(),
            prior.weight_dim()
        )));
    }
    let start = state.phase().clamp(0.0, 1.0);
    let step = (1.0 - start) / (resolution - 1) as f64;
    let mut phases: Vec<f64> = (0..resolution).map(|k| start + step * k as f64).collect();
    phases[resolution - 1] = 1.0;

    let controlled = prior.layout.controlled();
    let mut values = DMatrix::zeros(controlled.len(), resolution);
    for (row, d) in controlled.enumerate() {
        let cfg = &prior.basis[d];
        let w = state.dof_weights(prior.weight_offset(d), cfg.count());
        let traj = reconstruct(&w, &phases, cfg);
        values.set_row(row, &DVector::from_vec(traj).transpose());
    }
    Ok(ResponsePlan {
        phases,
        values,
        issued_at_tick: tick,
        phase_velocity: state.phase_velocity(),
    })
}

/// Fixed-gain position/velocity tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherState {
    pub position: DVector<f64>,
    /// Units per second.
    pub velocity: DVector<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl SmootherState {
    pub fn new(position: DVector<f64>, alpha: f64, beta: f64) -> Result<Self> {
        check_gains(alpha, beta)?;
        let velocity = DVector::zeros(position.len());
        Ok(Self {
            position,
            velocity,
            alpha,
            beta,
        })
    }
}

fn check_gains(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    // Zero beta is allowed so the pass-through (α = 1, β = 0) can serve as
    // an unsmoothed baseline.
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

pub fn alpha_beta_step(s: &SmootherState, target: &DVector<f64>, dt: f64) -> SmootherState {
    let predicted = &s.position + &s.velocity * dt;
    let residual = target - &predicted;
    SmootherState {
        position: predicted + &residual * s.alpha,
        velocity: &s.velocity + residual * (s.beta / dt),
        alpha: s.alpha,
        beta: s.beta,
    }
}

/// Sampling, inference and execution rates in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopRates {
    pub sample_hz: f64,
    pub infer_hz: f64,
    pub exec_hz: f64,
}

impl Default for LoopRates {
    fn default() -> Self {
        Self {
            sample_hz: 30.0,
            infer_hz: 3.0,
            exec_hz: 10.0,
        }
    }
}

impl LoopRates {
    /// Inference and execution periods in samples.
    pub fn periods(&self) -> Result<(usize, usize)> {
        let rates = [self.sample_hz, self.infer_hz, self.exec_hz];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("rates must be positive".into()));
        }
        let period = |hz: f64, what: &str| -> Result<usize> {
            if hz > self.sample_hz {
                return Err(Error::Config(format!(
                    "{what} rate {hz} Hz exceeds the sample rate {} Hz",
                    self.sample_hz
                )));
            }
            let ratio = self.sample_hz / hz;
            let rounded = ratio.round();
            if (ratio - rounded).abs() > 1e-9 * ratio {
                return Err(Error::Config(format!(
                    "sample rate {} Hz is not a multiple of the {what} rate {hz} Hz",
                    self.sample_hz
                )));
            }
            Ok(rounded as usize)
        };
        Ok((period(self.infer_hz, "inference")?, period(self.exec_hz, "execution")?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub rates: LoopRates,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            rates: LoopRates::default(),
            alpha: 0.5,
            beta: 0.05,
        }
    }
}

/// Filter summary after one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSample {
    pub tick: usize,
    pub phase: f64,
    pub phase_vel: f64,
    pub var_phase: f64,
    pub var_phase_vel: f64,
}

impl PhaseSample {
    pub fn from_state(tick: usize, state: &FilterState) -> Self {
        Self {
            tick,
            phase: state.phase(),
            phase_vel: state.phase_velocity(),
            var_phase: state.phase_variance(),
            var_phase_vel: state.phase_velocity_variance(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopOutput {
    /// Observed inputs plus the emitted controlled setpoints.
    pub executed: Interaction,
    pub trace: Vec<PhaseSample>,
    pub plans_issued: usize,
    pub jitter_events: usize,
    pub final_state: FilterState,
}

/// Runs the filter at the sample rate, regenerates plans at the inference
/// rate and emits smoothed setpoints at the execution rate until the stream
/// ends.
pub fn interaction_loop<I>(
    prior: &PriorModel,
    noise: &NoiseConfig,
    stream: I,
    config: &LoopConfig,
) -> Result<LoopOutput>
where
    I: IntoIterator<Item = PartialObservation>,
{
    let (infer_period, exec_period) = config.rates.periods()?;
    if (config.rates.sample_hz - prior.sample_rate).abs() > 1e-9 * prior.sample_rate {
        return Err(Error::Config(format!(
            "loop sample rate {} Hz differs from the model's {} Hz",
            config.rates.sample_hz, prior.sample_rate
        )));
    }
    check_gains(config.alpha, config.beta)?;
    let dofs = prior.layout.dof_count();
    let controlled = prior.layout.controlled();
    let exec_dt = 1.0 / config.rates.exec_hz;

    let mut filter = PhaseFilter::new(prior, noise)?;
    let mut smoother = SmootherState::new(
        generate_response(filter.state(), 2, prior, 0)?.value_at(0.0),
        config.alpha,
        config.beta,
    )?;
    let mut plan: Option<ResponsePlan> = None;
    let mut plans_issued = 0;
    let mut trace = Vec::new();
    let mut columns: Vec<DVector<f64>> = Vec::new();

    for (tick, obs) in stream.into_iter().enumerate() {
        if obs.values.len() != dofs || obs.mask.len() != dofs {
            return Err(Error::Dimension(format!(
                "tick {tick}: observation has {} values for {dofs} DoFs",
                obs.values.len()
            )));
        }
        let state = filter.observe(&obs)?.clone();
        trace.push(PhaseSample::from_state(tick, &state));
        if tick % infer_period == 0 {
            plan = Some(generate_response(&state, plan_resolution(&state), prior, tick)?);
            plans_issued += 1;
        }
        if tick % exec_period == 0 {
            if let Some(p) = &plan {
                let elapsed = (tick - p.issued_at_tick) as f64;
                let target = p.value_at(p.phases[0] + p.phase_velocity * elapsed);
                smoother = alpha_beta_step(&smoother, &target, exec_dt);
            }
        }
        let mut col = obs.values.clone();
        col.rows_mut(controlled.start, controlled.len())
            .copy_from(&smoother.position);
        columns.push(col);
    }

    if columns.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: columns.len(),
        });
    }
    let data = DMatrix::from_columns(&columns);
    let mut executed = Interaction::new(data, prior.sample_rate, prior.layout.clone())?;
    executed.executed = true;
    Ok(LoopOutput {
        executed,
        trace,
        plans_issued,
        jitter_events: filter.jitter_events(),
        final_state: filter.state().clone(),
    })
}

/// Replays the observed DoFs of a recorded interaction through the loop.
pub fn replay(
    prior: &PriorModel,
    noise: &NoiseConfig,
    recording: &Interaction,
    config: &LoopConfig,
) -> Result<LoopOutput> {
    if recording.layout() != &prior.layout {
        return Err(Error::Layout(
            "recording layout does not match the model layout".into(),
        ));
    }
    interaction_loop(prior, noise, recording.observed_stream(), config)
}

//! Extended Kalman filter over the augmented state `s = [φ, φ̇, w]`.
//!
//! The state evolves with a constant-velocity model in phase while the
//! weights are static. Observations are the basis reconstruction of each DoF
//! at the current phase, which is nonlinear in `φ` and linear in `w`; the
//! filter linearizes around the predicted mean. Only the measured rows of a
//! [`PartialObservation`] enter the update, so the controlled DoFs are
//! inferred purely through their covariance with the observed ones.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisConfig;
use crate::error::{Error, Result};
use crate::interaction::{DofLayout, PartialObservation};
use crate::prior::{symmetrize, PriorModel};

pub const PHASE_CEILING: f64 = 1.05;

/// Jitter added to a singular innovation covariance.
pub const INNOVATION_JITTER: f64 = 1e-9;

/// Process and measurement noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Extra phase variance per tick.
    pub q_phase: f64,
    /// Phase-velocity white-noise intensity per tick.
    pub q_phase_vel: f64,
    /// Per-weight variance added each tick.
    pub q_weights: f64,
    /// Measurement variance per DoF.
    pub r_per_dof: Vec<f64>,
    /// Optional squared-Mahalanobis gate on the innovation.
    #[serde(default)]
    pub gate: Option<f64>,
}

impl NoiseConfig {
    pub const DEFAULT_Q_PHASE: f64 = 1e-9;
    pub const DEFAULT_Q_PHASE_VEL: f64 = 1e-9;
    pub const DEFAULT_Q_WEIGHTS: f64 = 0.0;
    /// Measurement standard deviation as a fraction of the DoF's range.
    pub const DEFAULT_R_FRACTION: f64 = 0.02;

    /// Default noise with `R` derived from per-DoF demonstration ranges.
    pub fn from_ranges(ranges: &[f64]) -> Self {
        Self {
            q_phase: Self::DEFAULT_Q_PHASE,
            q_phase_vel: Self::DEFAULT_Q_PHASE_VEL,
            q_weights: Self::DEFAULT_Q_WEIGHTS,
            r_per_dof: ranges
                .iter()
                .map(|r| {
                    let sd = Self::DEFAULT_R_FRACTION * r;
                    // Flat DoFs still need a positive variance.
                    (sd * sd).max(1e-12)
                })
                .collect(),
            gate: None,
        }
    }

    pub fn validate(&self, layout: &DofLayout) -> Result<()> {
        if self.r_per_dof.len() != layout.dof_count() {
            return Err(Error::Config(format!(
                "{} measurement variances for {} DoFs",
                self.r_per_dof.len(),
                layout.dof_count()
            )));
        }
        let q = [self.q_phase, self.q_phase_vel, self.q_weights];
        if q.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("process noise must be finite and non-negative".into()));
        }
        for d in layout.observed() {
            if !(self.r_per_dof[d] > 0.0 && self.r_per_dof[d].is_finite()) {
                return Err(Error::Config(format!(
                    "measurement variance for observed DoF {d} must be positive"
                )));
            }
        }
        if let Some(g) = self.gate {
            if !(g > 0.0) {
                return Err(Error::Config("gate must be positive".into()));
            }
        }
        Ok(())
    }
}

/// What happened during the most recent update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepFlags {
    pub jittered: bool,
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Transition step in units of the phase-velocity time base (samples).
    pub dt: f64,
    pub flags: StepFlags,
}

impl FilterState {
    pub fn from_prior(prior: &PriorModel) -> Self {
        Self {
            mean: prior.mean(),
            cov: prior.cov.clone(),
            dt: 1.0,
            flags: StepFlags::default(),
        }
    }

    pub fn phase(&self) -> f64 {
        self.mean[0]
    }

    pub fn phase_velocity(&self) -> f64 {
        self.mean[1]
    }

    pub fn phase_variance(&self) -> f64 {
        self.cov[(0, 0)]
    }

    pub fn phase_velocity_variance(&self) -> f64 {
        self.cov[(1, 1)]
    }

    pub fn weight_dim(&self) -> usize {
        self.mean.len() - 2
    }

    pub fn weights(&self) -> DVector<f64> {
        self.mean.rows(2, self.weight_dim()).into_owned()
    }

    /// Weights of one DoF block.
    pub fn dof_weights(&self, offset: usize, count: usize) -> DVector<f64> {
        self.mean.rows(2 + offset, count).into_owned()
    }

    fn clamp(&mut self) {
        self.mean[0] = self.mean[0].clamp(0.0, PHASE_CEILING);
        self.mean[1] = self.mean[1].max(0.0);
    }
}

fn offsets(basis: &[BasisConfig]) -> Vec<usize> {
    crate::basis::block_offsets(basis)
}

fn check_dims(state: &FilterState, basis: &[BasisConfig], layout: &DofLayout) -> Result<()> {
    let b: usize = basis.iter().map(BasisConfig::count).sum();
    if basis.len() != layout.dof_count() || state.mean.len() != b + 2 || state.cov.shape() != (b + 2, b + 2) {
        return Err(Error::Dimension(format!(
            "state of length {} does not match {} DoFs with {b} weights",
            state.mean.len(),
            layout.dof_count()
        )));
    }
    Ok(())
}

/// Constant-velocity propagation: `μ' = Gμ`, `Σ' = GΣGᵀ + Q`.
pub fn predict(state: &FilterState, noise: &NoiseConfig) -> FilterState {
    let dt = state.dt;
    let n = state.mean.len();
    let mut mean = state.mean.clone();
    mean[0] += dt * mean[1];

    // G only mixes φ̇ into φ, so GΣGᵀ touches row and column 0.
    let mut cov = state.cov.clone();
    for j in 0..n {
        let v = cov[(1, j)];
        cov[(0, j)] += dt * v;
    }
    for i in 0..n {
        let v = cov[(i, 1)];
        cov[(i, 0)] += dt * v;
    }

    let q = noise.q_phase_vel;
    cov[(0, 0)] += noise.q_phase + q * dt.powi(4) / 4.0;
    cov[(0, 1)] += q * dt.powi(3) / 2.0;
    cov[(1, 0)] += q * dt.powi(3) / 2.0;
    cov[(1, 1)] += q * dt * dt;
    if noise.q_weights > 0.0 {
        for i in 2..n {
            cov[(i, i)] += noise.q_weights;
        }
    }
    symmetrize(&mut cov);

    let mut out = FilterState {
        mean,
        cov,
        dt,
        flags: StepFlags::default(),
    };
    out.clamp();
    out
}

/// Expected observation `h(s)`: every DoF reconstructed at the current phase.
pub fn predicted_observation(state: &FilterState, basis: &[BasisConfig], layout: &DofLayout) -> DVector<f64> {
    let phase = state.phase();
    let offs = offsets(basis);
    DVector::from_iterator(
        layout.dof_count(),
        basis
            .iter()
            .zip(&offs)
            .map(|(cfg, &o)| cfg.row(phase).dot(&state.mean.rows(2 + o, cfg.count()))),
    )
}

fn jacobian_row(
    state: &FilterState,
    cfg: &BasisConfig,
    offset: usize,
    mut row: nalgebra::MatrixViewMut<f64, nalgebra::U1, nalgebra::Dyn, nalgebra::U1, nalgebra::Dyn>,
) {
    let phase = state.phase();
    let w = state.mean.rows(2 + offset, cfg.count());
    row.fill(0.0);
    row[0] = cfg.derivative_row(phase).dot(&w);
    let basis_row = cfg.row(phase);
    for (i, v) in basis_row.iter().enumerate() {
        row[2 + offset + i] = *v;
    }
}

/// `D × (B + 2)` Jacobian of [`predicted_observation`].
pub fn observation_jacobian(state: &FilterState, basis: &[BasisConfig], layout: &DofLayout) -> DMatrix<f64> {
    let n = state.mean.len();
    let mut h = DMatrix::zeros(layout.dof_count(), n);
    for (d, (cfg, o)) in basis.iter().zip(offsets(basis)).enumerate() {
        jacobian_row(state, cfg, o, h.row_mut(d));
    }
    h
}

/// Measurement update restricted to the measured DoFs of `obs`.
pub fn update(
    state: &FilterState,
    obs: &PartialObservation,
    noise: &NoiseConfig,
    basis: &[BasisConfig],
    layout: &DofLayout,
) -> Result<FilterState> {
    check_dims(state, basis, layout)?;
    if obs.mask.len() != layout.dof_count() || obs.values.len() != layout.dof_count() {
        return Err(Error::Dimension(format!(
            "observation has {} values / {} mask entries for {} DoFs",
            obs.values.len(),
            obs.mask.len(),
            layout.dof_count()
        )));
    }
    let measured: Vec<usize> = obs.measured().collect();
    let mut out = state.clone();
    out.flags = StepFlags::default();
    if measured.is_empty() {
        return Ok(out);
    }

    let n = state.mean.len();
    let m = measured.len();
    let offs = offsets(basis);
    let phase = state.phase();
    let mut h = DMatrix::zeros(m, n);
    let mut innovation = DVector::zeros(m);
    for (k, &d) in measured.iter().enumerate() {
        jacobian_row(state, &basis[d], offs[d], h.row_mut(k));
        let expected = basis[d]
            .row(phase)
            .dot(&state.mean.rows(2 + offs[d], basis[d].count()));
        innovation[k] = obs.values[d] - expected;
    }

    let pht = &state.cov * h.transpose();
    let mut s = &h * &pht;
    for (k, &d) in measured.iter().enumerate() {
        s[(k, k)] += noise.r_per_dof[d];
    }
    symmetrize(&mut s);
    let chol = match Cholesky::new(s.clone()) {
        Some(c) => c,
        None => {
            out.flags.jittered = true;
            log::warn!("singular innovation covariance; adding jitter {INNOVATION_JITTER:e}");
            let jittered = s + DMatrix::identity(m, m) * INNOVATION_JITTER;
            Cholesky::new(jittered)
                .ok_or_else(|| Error::Numerical("innovation covariance is not positive definite".into()))?
        }
    };

    if let Some(gate) = noise.gate {
        let d2 = innovation.dot(&chol.solve(&innovation));
        if d2 > gate {
            out.flags.gated = true;
            return Ok(out);
        }
    }

    // K = PHᵀ S⁻¹, computed as (S⁻¹ (PHᵀ)ᵀ)ᵀ.
    let gain = chol.solve(&pht.transpose()).transpose();
    out.mean += &gain * innovation;
    out.cov -= &gain * pht.transpose();
    symmetrize(&mut out.cov);
    if out.mean.iter().any(|v| !v.is_finite()) || out.cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite filter state after update".into()));
    }
    out.clamp();
    Ok(out)
}

/// One tick: predict then update.
pub fn step(
    state: &FilterState,
    obs: &PartialObservation,
    noise: &NoiseConfig,
    basis: &[BasisConfig],
    layout: &DofLayout,
) -> Result<FilterState> {
    update(&predict(state, noise), obs, noise, basis, layout)
}

/// Stateful convenience wrapper around a model and a running estimate.
#[derive(Debug, Clone)]
pub struct PhaseFilter<'a> {
    prior: &'a PriorModel,
    noise: &'a NoiseConfig,
    state: FilterState,
    ticks: usize,
    jitter_events: usize,
}

impl<'a> PhaseFilter<'a> {
    pub fn new(prior: &'a PriorModel, noise: &'a NoiseConfig) -> Result<Self> {
        noise.validate(&prior.layout)?;
        Ok(Self {
            prior,
            noise,
            state: FilterState::from_prior(prior),
            ticks: 0,
            jitter_events: 0,
        })
    }

    /// Consumes one observation. The first observation belongs to phase
    /// zero, so it is applied without a preceding prediction.
    pub fn observe(&mut self, obs: &PartialObservation) -> Result<&FilterState> {
        let next = if self.ticks == 0 {
            update(&self.state, obs, self.noise, &self.prior.basis, &self.prior.layout)?
        } else {
            step(&self.state, obs, self.noise, &self.prior.basis, &self.prior.layout)?
        };
        if next.flags.jittered {
            self.jitter_events += 1;
        }
        self.state = next;
        self.ticks += 1;
        Ok(&self.state)
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn ticks(&self) -> usize {
        self.ticks
    }

    pub fn jitter_events(&self) -> usize {
        self.jitter_events
    }
}

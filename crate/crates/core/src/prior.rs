//! Prior over the augmented state `[phase, phase velocity, weights]` learned
//! from a set of demonstrations.

use nalgebra::{DMatrix, DVector};

use crate::basis::{fit_interaction, BasisConfig, WeightVector};
use crate::error::{Error, Result};
use crate::interaction::{DofLayout, Interaction};

/// Prior phase variance. Every interaction starts at phase zero, so this is
/// kept small relative to the phase-velocity variance.
pub const PRIOR_PHASE_VARIANCE: f64 = 1e-4;

/// Added to the empirical phase-velocity variance so it never collapses.
pub const PHASE_VELOCITY_VARIANCE_FLOOR: f64 = 1e-8;

/// Decomposed demonstrations, one row of `weights` per demonstration.
#[derive(Debug, Clone)]
pub struct DemonstrationSet {
    pub weights: DMatrix<f64>,
    pub lengths: Vec<usize>,
    pub sample_rate: f64,
    /// Largest condition number seen while fitting.
    pub worst_condition: f64,
    /// Number of per-DoF fits that needed regularization.
    pub regularized_fits: usize,
}

impl DemonstrationSet {
    pub fn from_interactions(demos: &[Interaction], cfgs: &[BasisConfig]) -> Result<Self> {
        check_demos(demos)?;
        let basis: usize = cfgs.iter().map(BasisConfig::count).sum();
        let mut weights = DMatrix::zeros(demos.len(), basis);
        let mut worst_condition = 0.0f64;
        let mut regularized_fits = 0;
        for (i, demo) in demos.iter().enumerate() {
            let fit = fit_interaction(demo, cfgs)?;
            weights.set_row(i, &fit.weights.flatten().transpose());
            worst_condition = worst_condition.max(fit.worst_condition);
            regularized_fits += fit.regularized_dofs.len();
        }
        Ok(Self {
            weights,
            lengths: demos.iter().map(Interaction::len).collect(),
            sample_rate: demos[0].sample_rate(),
            worst_condition,
            regularized_fits,
        })
    }

    pub fn count(&self) -> usize {
        self.weights.nrows()
    }
}

fn check_demos(demos: &[Interaction]) -> Result<()> {
    if demos.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: demos.len(),
        });
    }
    let first = &demos[0];
    for (i, demo) in demos.iter().enumerate().skip(1) {
        if demo.layout() != first.layout() {
            return Err(Error::Layout(format!(
                "demonstration {i} has a different DoF layout from demonstration 0"
            )));
        }
        if demo.sample_rate() != first.sample_rate() {
            return Err(Error::Layout(format!(
                "demonstration {i} sampled at {} Hz, expected {} Hz",
                demo.sample_rate(),
                first.sample_rate()
            )));
        }
    }
    Ok(())
}

/// Gaussian prior `N(μ₀, Σ₀)` over `[φ, φ̇, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorModel {
    pub layout: DofLayout,
    pub basis: Vec<BasisConfig>,
    pub sample_rate: f64,
    pub mean_weights: WeightVector,
    pub phase0: f64,
    /// Phase advanced per sample.
    pub phase_vel0: f64,
    pub var_phase: f64,
    pub var_phase_vel: f64,
    /// `(B + 2) × (B + 2)`; phase block first, then weights.
    pub cov: DMatrix<f64>,
    /// Per-DoF value range over all demonstrations.
    pub dof_ranges: Vec<f64>,
    pub demo_count: usize,
}

impl PriorModel {
    /// Latent weight dimension `B`.
    pub fn weight_dim(&self) -> usize {
        self.mean_weights.len()
    }

    /// Augmented state dimension `B + 2`.
    pub fn state_dim(&self) -> usize {
        self.weight_dim() + 2
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.state_dim());
        mean[0] = self.phase0;
        mean[1] = self.phase_vel0;
        mean.rows_mut(2, self.weight_dim())
            .copy_from(&self.mean_weights.flatten());
        mean
    }

    /// Weight-block covariance `Σ_WW`.
    pub fn weight_cov(&self) -> DMatrix<f64> {
        let b = self.weight_dim();
        self.cov.view((2, 2), (b, b)).into_owned()
    }

    /// Offset of the first weight of DoF `dof` within the weight vector.
    pub fn weight_offset(&self, dof: usize) -> usize {
        self.basis[..dof].iter().map(BasisConfig::count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let dofs = self.layout.dof_count();
        if self.basis.len() != dofs || self.mean_weights.per_dof.len() != dofs {
            return Err(Error::Dimension(format!(
                "model has {dofs} DoFs but {} basis configs and {} weight blocks",
                self.basis.len(),
                self.mean_weights.per_dof.len()
            )));
        }
        for (d, (cfg, w)) in self.basis.iter().zip(&self.mean_weights.per_dof).enumerate() {
            if cfg.count() != w.len() {
                return Err(Error::Dimension(format!(
                    "DoF {d}: {} basis functions but {} weights",
                    cfg.count(),
                    w.len()
                )));
            }
        }
        let n = self.state_dim();
        if self.cov.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "covariance is {:?}, expected {n}×{n}",
                self.cov.shape()
            )));
        }
        if self.dof_ranges.len() != dofs {
            return Err(Error::Dimension("one range per DoF required".into()));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(())
    }
}

/// Learns the prior from decomposed demonstrations.
pub fn learn_prior(demos: &[Interaction], cfgs: &[BasisConfig]) -> Result<PriorModel> {
    let set = DemonstrationSet::from_interactions(demos, cfgs)?;
    let layout = demos[0].layout().clone();
    let dof_ranges = (0..layout.dof_count())
        .map(|d| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for demo in demos {
                for &v in demo.data().row(d).iter() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            hi - lo
        })
        .collect();
    prior_from_set(&set, cfgs, layout, dof_ranges)
}

pub fn prior_from_set(
    set: &DemonstrationSet,
    cfgs: &[BasisConfig],
    layout: DofLayout,
    dof_ranges: Vec<f64>,
) -> Result<PriorModel> {
    let n = set.count();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let b = set.weights.ncols();
    let mean_flat = column_mean(&set.weights);
    let mean_weights = WeightVector::from_flat(&mean_flat, cfgs)?;

    let rates: Vec<f64> = set.lengths.iter().map(|&t| 1.0 / t as f64).collect();
    let phase_vel0 = rates.iter().sum::<f64>() / n as f64;
    let var_rates = rates.iter().map(|r| (r - phase_vel0).powi(2)).sum::<f64>() / (n - 1) as f64;

    let mut cov = DMatrix::zeros(b + 2, b + 2);
    cov[(0, 0)] = PRIOR_PHASE_VARIANCE;
    cov[(1, 1)] = var_rates + PHASE_VELOCITY_VARIANCE_FLOOR;
    cov.view_mut((2, 2), (b, b))
        .copy_from(&weight_covariance(&set.weights)?);

    let prior = PriorModel {
        layout,
        basis: cfgs.to_vec(),
        sample_rate: set.sample_rate,
        mean_weights,
        phase0: 0.0,
        phase_vel0,
        var_phase: cov[(0, 0)],
        var_phase_vel: cov[(1, 1)],
        cov,
        dof_ranges,
        demo_count: n,
    };
    prior.validate()?;
    Ok(prior)
}

/// Column means, accumulated as offsets from the first row so constant
/// columns come out exact.
fn column_mean(w: &DMatrix<f64>) -> DVector<f64> {
    let n = w.nrows() as f64;
    DVector::from_iterator(
        w.ncols(),
        w.column_iter().map(|c| {
            let first = c[0];
            first + c.iter().map(|v| v - first).sum::<f64>() / n
        }),
    )
}

/// Unbiased sample covariance of the rows of `w`.
pub fn weight_covariance(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mean = column_mean(w);
    let mut centered = w.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    symmetrize(&mut cov);
    Ok(cov)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

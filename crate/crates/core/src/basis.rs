//! Gaussian basis functions over phase and least-squares trajectory
//! decomposition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::{phases, Interaction};

/// Default number of basis functions per DoF.
pub const DEFAULT_BASIS_COUNT: usize = 15;

/// Default Gaussian width in units of the center spacing.
pub const DEFAULT_WIDTH_FACTOR: f64 = 1.5;

/// Ratio of smallest to largest singular value below which the design matrix
/// is treated as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Ridge scale used for rank-deficient designs, relative to `trace(ΦᵀΦ)/B`.
const RIDGE_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBasis")]
pub struct BasisConfig {
    centers: Vec<f64>,
    width: f64,
}

#[derive(Deserialize)]
struct RawBasis {
    centers: Vec<f64>,
    width: f64,
}

impl TryFrom<RawBasis> for BasisConfig {
    type Error = Error;

    fn try_from(raw: RawBasis) -> Result<Self> {
        Self::new(raw.centers, raw.width)
    }
}

impl BasisConfig {
    pub fn new(centers: Vec<f64>, width: f64) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 basis functions, got {}",
                centers.len()
            )));
        }
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::Config(format!("basis width must be positive, got {width}")));
        }
        if centers.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("basis centers must lie in [0, 1]".into()));
        }
        if centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("basis centers must be strictly increasing".into()));
        }
        Ok(Self { centers, width })
    }

    /// `count` centers evenly spaced on `[0, 1]` with the default width.
    pub fn uniform(count: usize) -> Result<Self> {
        Self::uniform_with_width(count, DEFAULT_WIDTH_FACTOR)
    }

    /// `count` evenly spaced centers; width is `width_factor` times the spacing.
    pub fn uniform_with_width(count: usize, width_factor: f64) -> Result<Self> {
        if count < 2 {
            return Err(Error::Config(format!(
                "need at least 2 basis functions, got {count}"
            )));
        }
        let step = 1.0 / (count - 1) as f64;
        let centers = (0..count).map(|i| i as f64 * step).collect();
        Self::new(centers, width_factor * step)
    }

    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn row(&self, phase: f64) -> DVector<f64> {
        let inv = 1.0 / (2.0 * self.width * self.width);
        DVector::from_iterator(
            self.count(),
            self.centers.iter().map(|c| (-(phase - c).powi(2) * inv).exp()),
        )
    }

    /// Derivative of [`BasisConfig::row`] with respect to phase.
    pub fn derivative_row(&self, phase: f64) -> DVector<f64> {
        let var = self.width * self.width;
        DVector::from_iterator(
            self.count(),
            self.centers.iter().map(|c| {
                let diff = phase - c;
                -diff / var * (-diff * diff / (2.0 * var)).exp()
            }),
        )
    }

    /// `phases.len() × count` matrix whose rows are basis rows.
    pub fn design_matrix(&self, phases: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(phases.len(), self.count());
        for (i, &p) in phases.iter().enumerate() {
            m.set_row(i, &self.row(p).transpose());
        }
        m
    }
}

pub fn basis_row(phase: f64, cfg: &BasisConfig) -> DVector<f64> {
    cfg.row(phase)
}

pub fn basis_derivative_row(phase: f64, cfg: &BasisConfig) -> DVector<f64> {
    cfg.derivative_row(phase)
}

/// Result of fitting one trajectory.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub weights: DVector<f64>,
    /// Ratio of the largest to smallest singular value of the design.
    pub condition: f64,
    /// Set when the design was rank deficient and a ridge term was applied.
    pub regularized: bool,
}

/// Least-squares basis weights for a trajectory sampled uniformly in phase.
pub fn decompose(trajectory: &[f64], cfg: &BasisConfig) -> Result<Decomposition> {
    let len = trajectory.len();
    if len < cfg.count() {
        return Err(Error::Underdetermined {
            samples: len,
            basis: cfg.count(),
        });
    }
    let design = cfg.design_matrix(&phases(len)?);
    let target = DVector::from_column_slice(trajectory);
    solve_least_squares(design, &target)
}

fn solve_least_squares(design: DMatrix<f64>, target: &DVector<f64>) -> Result<Decomposition> {
    let basis = design.ncols();
    let svd = design.svd(true, true);
    let sv = &svd.singular_values;
    let (max, min) = sv
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    let u = svd.u.as_ref().ok_or_else(|| Error::Numerical("SVD without U".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("SVD without Vᵀ".into()))?;
    let projected = u.transpose() * target;

    let regularized = min <= RANK_TOLERANCE * max;
    let lambda = if regularized {
        RIDGE_SCALE * sv.iter().map(|s| s * s).sum::<f64>() / basis as f64
    } else {
        0.0
    };
    if regularized {
        log::warn!("rank-deficient basis design (condition {condition:e}); applying ridge {lambda:e}");
    }
    let scaled = DVector::from_iterator(
        sv.len(),
        sv.iter().zip(projected.iter()).map(|(&s, &p)| {
            let denom = s * s + lambda;
            if denom > 0.0 {
                s * p / denom
            } else {
                0.0
            }
        }),
    );
    Ok(Decomposition {
        weights: v_t.transpose() * scaled,
        condition,
        regularized,
    })
}

/// Noise-free trajectory values at the given phases.
pub fn reconstruct(weights: &DVector<f64>, phases: &[f64], cfg: &BasisConfig) -> Vec<f64> {
    phases.iter().map(|&p| cfg.row(p).dot(weights)).collect()
}

/// Concatenated per-DoF weights, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub per_dof: Vec<DVector<f64>>,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.per_dof.iter().map(|w| w.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        let mut offset = 0;
        for block in &self.per_dof {
            out.rows_mut(offset, block.len()).copy_from(block);
            offset += block.len();
        }
        out
    }

    pub fn from_flat(flat: &DVector<f64>, cfgs: &[BasisConfig]) -> Result<Self> {
        let total: usize = cfgs.iter().map(BasisConfig::count).sum();
        if flat.len() != total {
            return Err(Error::Dimension(format!(
                "{} weights for {total} basis functions",
                flat.len()
            )));
        }
        let mut offset = 0;
        let per_dof = cfgs
            .iter()
            .map(|c| {
                let block = flat.rows(offset, c.count()).into_owned();
                offset += c.count();
                block
            })
            .collect();
        Ok(Self { per_dof })
    }
}

/// Offsets of each DoF's block within the flattened weight vector.
pub fn block_offsets(cfgs: &[BasisConfig]) -> Vec<usize> {
    cfgs.iter()
        .scan(0, |acc, c| {
            let start = *acc;
            *acc += c.count();
            Some(start)
        })
        .collect()
}

/// Decomposition of every DoF of an interaction.
#[derive(Debug, Clone)]
pub struct InteractionFit {
    pub weights: WeightVector,
    pub worst_condition: f64,
    pub regularized_dofs: Vec<usize>,
}

pub fn decompose_interaction(interaction: &Interaction, cfgs: &[BasisConfig]) -> Result<WeightVector> {
    fit_interaction(interaction, cfgs).map(|f| f.weights)
}

pub fn fit_interaction(interaction: &Interaction, cfgs: &[BasisConfig]) -> Result<InteractionFit> {
    let dofs = interaction.layout().dof_count();
    if cfgs.len() != dofs {
        return Err(Error::Dimension(format!(
            "{} basis configs for {dofs} DoFs",
            cfgs.len()
        )));
    }
    let mut per_dof = Vec::with_capacity(dofs);
    let mut worst_condition = 0.0f64;
    let mut regularized_dofs = Vec::new();
    for (d, cfg) in cfgs.iter().enumerate() {
        let fit = decompose(&interaction.dof(d), cfg).map_err(|e| Error::Dof {
            dof: d,
            source: Box::new(e),
        })?;
        worst_condition = worst_condition.max(fit.condition);
        if fit.regularized {
            regularized_dofs.push(d);
        }
        per_dof.push(fit.weights);
    }
    Ok(InteractionFit {
        weights: WeightVector { per_dof },
        worst_condition,
        regularized_dofs,
    })
}

//! Analyses of recorded and executed interactions: time to completion,
//! correlation structure, rank tests, phase tracking error and a brute-force
//! grid filter used to check the EKF.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::filter::{NoiseConfig, PHASE_CEILING};
use crate::interaction::{Interaction, PartialObservation};
use crate::prior::PriorModel;
use crate::response::PhaseSample;

pub const DEFAULT_TTC_WINDOW_S: f64 = 2.0;
pub const DEFAULT_SETTLE_THRESHOLD: f64 = 0.001;
pub const HISTOGRAM_BINS: usize = 20;
/// Both samples at most this large use the exact Mann-Whitney distribution.
pub const EXACT_MWU_LIMIT: usize = 8;

/// Variance thresholds below which a window counts as settled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SettleThresholds {
    pub observed: f64,
    pub controlled: f64,
}

impl Default for SettleThresholds {
    fn default() -> Self {
        Self {
            observed: DEFAULT_SETTLE_THRESHOLD,
            controlled: DEFAULT_SETTLE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    /// First sample of the settled tail, divided by the full length.
    pub ratio: f64,
    /// `false` when the last window is still moving; `ratio` is then 1.
    pub settled: bool,
    pub sample: usize,
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Earliest sample after which every sliding window of `window_s` seconds
/// has per-DoF sample variance below its group threshold.
pub fn time_to_completion(
    interaction: &Interaction,
    window_s: f64,
    thresholds: SettleThresholds,
) -> Result<Completion> {
    let len = interaction.len();
    let window = (window_s * interaction.sample_rate()).round() as usize;
    if window < 2 || window >= len {
        return Err(Error::InvalidTrajectory(format!(
            "window of {window} samples needs a longer trajectory than {len} samples"
        )));
    }
    let layout = interaction.layout();
    let rows: Vec<Vec<f64>> = (0..layout.dof_count()).map(|d| interaction.dof(d)).collect();
    let settled_at = |t: usize| {
        rows.iter().enumerate().all(|(d, row)| {
            let limit = if layout.is_observed(d) {
                thresholds.observed
            } else {
                thresholds.controlled
            };
            sample_variance(&row[t..t + window]) < limit
        })
    };
    let last = len - window;
    let mut first = None;
    for t in (0..=last).rev() {
        if !settled_at(t) {
            break;
        }
        first = Some(t);
    }
    Ok(match first {
        Some(t) => Completion {
            ratio: t as f64 / len as f64,
            settled: true,
            sample: t,
        },
        None => Completion {
            ratio: 1.0,
            settled: false,
            sample: len,
        },
    })
}

/// Pearson correlation, or `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PearsonMatrix {
    pub r: DMatrix<f64>,
    /// DoFs with zero variance; their off-diagonal entries are 0.
    pub constant_dofs: Vec<usize>,
}

pub fn pearson_matrix(interaction: &Interaction) -> Result<PearsonMatrix> {
    if interaction.len() < 3 {
        return Err(Error::InvalidTrajectory(format!(
            "correlation needs at least 3 samples, got {}",
            interaction.len()
        )));
    }
    let d = interaction.layout().dof_count();
    let rows: Vec<Vec<f64>> = (0..d).map(|i| interaction.dof(i)).collect();
    let constant_dofs: Vec<usize> = (0..d)
        .filter(|&i| rows[i].iter().all(|&v| v == rows[i][0]))
        .collect();
    let mut r = DMatrix::identity(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let v = pearson(&rows[i], &rows[j]).unwrap_or(0.0);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(PearsonMatrix { r, constant_dofs })
}

/// Correlations binned over `[−1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrHistogram {
    pub counts: Vec<usize>,
    /// Windows where one of the pair was constant.
    pub skipped: usize,
}

impl CorrHistogram {
    pub fn new() -> Self {
        Self {
            counts: vec![0; HISTOGRAM_BINS],
            skipped: 0,
        }
    }

    pub fn bin_of(r: f64) -> usize {
        let pos = ((r + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor();
        (pos.max(0.0) as usize).min(HISTOGRAM_BINS - 1)
    }

    /// Lower edge of bin `i`.
    pub fn bin_lower(i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / HISTOGRAM_BINS as f64
    }

    pub fn add(&mut self, r: Option<f64>) {
        match r {
            Some(r) => self.counts[Self::bin_of(r)] += 1,
            None => self.skipped += 1,
        }
    }

    pub fn merge(&mut self, other: &CorrHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.skipped += other.skipped;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fraction of counted windows in bins lying entirely in `|r| ≥ level`.
    pub fn fraction_beyond(&self, level: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let width = 2.0 / HISTOGRAM_BINS as f64;
        let outer: usize = (0..HISTOGRAM_BINS)
            .filter(|&i| {
                let lo = Self::bin_lower(i);
                let hi = lo + width;
                hi <= -level + 1e-12 || lo >= level - 1e-12
            })
            .map(|i| self.counts[i])
            .sum();
        outer as f64 / total as f64
    }
}

impl Default for CorrHistogram {
    fn default() -> Self {
        Self::new()
    }
}

/// Pearson correlation of `pair` over every window of `window` samples.
pub fn sliding_corr_histogram(
    interaction: &Interaction,
    pair: (usize, usize),
    window: usize,
) -> Result<CorrHistogram> {
    let d = interaction.layout().dof_count();
    if pair.0 >= d || pair.1 >= d {
        return Err(Error::Dimension(format!("DoF pair {pair:?} out of range for {d} DoFs")));
    }
    if window < 3 || window > interaction.len() {
        return Err(Error::Config(format!(
            "window must lie in [3, {}], got {window}",
            interaction.len()
        )));
    }
    let a = interaction.dof(pair.0);
    let b = interaction.dof(pair.1);
    let mut hist = CorrHistogram::new();
    for t in 0..=(a.len() - window) {
        hist.add(pearson(&a[t..t + window], &b[t..t + window]));
    }
    Ok(hist)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwuMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Pairs with `a > b` plus half the ties.
    pub u: f64,
    pub p_value: f64,
    pub method: MwuMethod,
}

/// Midranks (1-based) of the pooled samples, plus the tie groups' sizes.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided Mann-Whitney U test.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            got: 0,
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidTrajectory("samples must be finite".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let mean = (na * nb) as f64 / 2.0;

    if na <= EXACT_MWU_LIMIT && nb <= EXACT_MWU_LIMIT {
        let observed = (u - mean).abs();
        let (mut extreme, mut total) = (0u64, 0u64);
        let n = na + nb;
        // Enumerate every subset of size na via bitmasks.
        for mask in 0u32..(1u32 << n) {
            if mask.count_ones() as usize != na {
                continue;
            }
            let rs: f64 = (0..n).filter(|&k| mask & (1 << k) != 0).map(|k| ranks[k]).sum();
            let uk = rs - (na * (na + 1)) as f64 / 2.0;
            total += 1;
            if (uk - mean).abs() >= observed - 1e-9 {
                extreme += 1;
            }
        }
        return Ok(MannWhitney {
            u,
            p_value: (extreme as f64 / total as f64).min(1.0),
            method: MwuMethod::Exact,
        });
    }

    let n = (na + nb) as f64;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term);
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z))).clamp(0.0, 1.0)
    };
    Ok(MannWhitney {
        u,
        p_value,
        method: MwuMethod::Normal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseError {
    pub rmse: f64,
    pub terminal: f64,
}

/// Error of an estimated phase trace against ground truth over the samples
/// from `active_start` on.
pub fn phase_error(estimate: &[f64], truth: &[f64], active_start: usize) -> Result<PhaseError> {
    if estimate.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "trace has {} samples, ground truth {}",
            estimate.len(),
            truth.len()
        )));
    }
    if active_start >= truth.len() {
        return Err(Error::InvalidTrajectory("no active samples".into()));
    }
    let span = &truth[active_start..];
    let est = &estimate[active_start..];
    let mse = est.iter().zip(span).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / span.len() as f64;
    Ok(PhaseError {
        rmse: mse.sqrt(),
        terminal: (est[est.len() - 1] - span[span.len() - 1]).abs(),
    })
}

/// Discretisation of the `(φ, φ̇)` plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub phase_cells: usize,
    pub velocity_cells: usize,
    /// Largest phase velocity on the grid; the smallest is 0.
    pub max_velocity: f64,
}

impl PhaseGrid {
    /// 200 × 50 cells with velocities up to three times the prior mean.
    pub fn for_prior(prior: &PriorModel) -> Self {
        Self {
            phase_cells: 200,
            velocity_cells: 50,
            max_velocity: 3.0 * prior.phase_vel0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.phase_cells < 2 || self.velocity_cells < 2 || !(self.max_velocity > 0.0) {
            return Err(Error::Config(format!("degenerate grid {self:?}")));
        }
        Ok(())
    }

    pub fn phase(&self, i: usize) -> f64 {
        PHASE_CEILING * i as f64 / (self.phase_cells - 1) as f64
    }

    /// Nearest phase cell.
    pub fn cell_of(&self, phase: f64) -> usize {
        let i = (phase / PHASE_CEILING * (self.phase_cells - 1) as f64).round();
        (i.max(0.0) as usize).min(self.phase_cells - 1)
    }

    pub fn velocity(&self, j: usize) -> f64 {
        self.max_velocity * j as f64 / (self.velocity_cells - 1) as f64
    }
}

/// Summary of the grid posterior after one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridTick {
    /// Mode of the phase marginal.
    pub map_phase: f64,
    /// Velocity of the joint mode.
    pub map_velocity: f64,
    pub mean_phase: f64,
    /// Total posterior mass after normalisation.
    pub mass: f64,
}

/// Bayes filter over a `(φ, φ̇)` grid. Each cell carries a Gaussian over the
/// observed DoFs' weights that is updated exactly given the cell's phase, so
/// the weights are integrated out rather than fixed. Cells also keep their
/// exact phase, which moves by the cell's velocity each tick; components
/// that round into the same cell are merged by moment matching.
#[derive(Debug, Clone)]
pub struct GridFilter<'a> {
    prior: &'a PriorModel,
    noise: &'a NoiseConfig,
    grid: PhaseGrid,
    /// Weight-vector offset of each observed DoF within the tracked block.
    offsets: Vec<usize>,
    /// Row-major over `phase_cells × velocity_cells`; `None` once pruned.
    cells: Vec<Option<Cell>>,
    ticks: usize,
}

#[derive(Debug, Clone)]
struct Cell {
    mass: f64,
    phase: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

/// Cells below this share of the total mass are dropped.
const PRUNE_MASS: f64 = 1e-14;

struct Accumulator {
    mass: f64,
    phase: f64,
    /// Mass-weighted mean.
    first: DVector<f64>,
    /// Mass-weighted `P + μμᵀ`.
    second: DMatrix<f64>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self {
            mass: 0.0,
            phase: 0.0,
            first: DVector::zeros(n),
            second: DMatrix::zeros(n, n),
        }
    }

    fn add(&mut self, w: f64, phase: f64, c: &Cell) {
        self.mass += w;
        self.phase += w * phase;
        self.first.axpy(w, &c.mean, 1.0);
        self.second.zip_apply(&c.cov, |a, b| *a += w * b);
        self.second.ger(w, &c.mean, &c.mean, 1.0);
    }

    fn finish(self) -> Cell {
        let mean = &self.first / self.mass;
        let mut cov = self.second / self.mass;
        cov.ger(-1.0, &mean, &mean, 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Cell {
            mass: self.mass,
            phase: self.phase / self.mass,
            mean,
            cov,
        }
    }
}

fn gaussian_kernel(sd_cells: f64) -> Vec<f64> {
    if sd_cells < 1e-3 {
        return vec![1.0];
    }
    let half = (4.0 * sd_cells).ceil() as i64;
    (-half..=half)
        .map(|k| (-0.5 * (k as f64 / sd_cells).powi(2)).exp())
        .collect()
}

/// Spreads index `src` over `kernel`, truncated at the grid edge and
/// renormalised so no mass leaves the grid.
fn spread(src: usize, len: usize, kernel: &[f64]) -> Vec<(usize, f64)> {
    let half = (kernel.len() / 2) as i64;
    let s = src as i64;
    let lo = (s - half).max(0);
    let hi = (s + half).min(len as i64 - 1);
    let norm: f64 = (lo..=hi).map(|t| kernel[(t - s + half) as usize]).sum();
    (lo..=hi)
        .map(|t| (t as usize, kernel[(t - s + half) as usize] / norm))
        .collect()
}

impl<'a> GridFilter<'a> {
    pub fn new(prior: &'a PriorModel, noise: &'a NoiseConfig, grid: PhaseGrid) -> Result<Self> {
        grid.validate()?;
        noise.validate(&prior.layout)?;
        let observed = prior.layout.observed();
        let mut offsets = Vec::new();
        let mut idx = Vec::new();
        for d in observed {
            offsets.push(idx.len());
            let start = prior.weight_offset(d);
            idx.extend(start..start + prior.basis[d].count());
        }
        let full_mean = prior.mean_weights.flatten();
        let full_cov = prior.weight_cov();
        let mean = DVector::from_fn(idx.len(), |r, _| full_mean[idx[r]]);
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |r, c| full_cov[(idx[r], idx[c])]);

        let mut masses = Vec::with_capacity(grid.phase_cells * grid.velocity_cells);
        for i in 0..grid.phase_cells {
            let dp = grid.phase(i) - prior.phase0;
            for j in 0..grid.velocity_cells {
                let dv = grid.velocity(j) - prior.phase_vel0;
                masses.push((-0.5 * (dp * dp / prior.var_phase + dv * dv / prior.var_phase_vel)).exp());
            }
        }
        Self::seeded(prior, noise, grid, offsets, masses, mean, cov)
    }

    /// Uniform `(φ, φ̇)` prior instead of the model's Gaussian; the weight
    /// prior is unchanged.
    pub fn with_uniform_prior(self) -> Self {
        let cell = self.cells.iter().flatten().next().expect("a live cell").clone();
        let masses = vec![1.0; self.cells.len()];
        Self::seeded(self.prior, self.noise, self.grid, self.offsets, masses, cell.mean, cell.cov)
            .expect("uniform masses are valid")
    }

    fn seeded(
        prior: &'a PriorModel,
        noise: &'a NoiseConfig,
        grid: PhaseGrid,
        offsets: Vec<usize>,
        masses: Vec<f64>,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    ) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("prior has no mass on the grid".into()));
        }
        let cells = masses
            .into_iter()
            .enumerate()
            .map(|(k, m)| {
                let mass = m / total;
                (mass >= PRUNE_MASS).then(|| Cell {
                    mass,
                    phase: grid.phase(k / grid.velocity_cells),
                    mean: mean.clone(),
                    cov: cov.clone(),
                })
            })
            .collect();
        Ok(Self {
            prior,
            noise,
            grid,
            offsets,
            cells,
            ticks: 0,
        })
    }

    /// Phase-by-velocity posterior mass.
    pub fn posterior(&self) -> DMatrix<f64> {
        let g = self.grid;
        DMatrix::from_fn(g.phase_cells, g.velocity_cells, |i, j| {
            self.cells[i * g.velocity_cells + j].as_ref().map_or(0.0, |c| c.mass)
        })
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    /// Constant-velocity shift in phase, diffusion by the process noise and
    /// weight process noise.
    pub fn predict(&mut self) {
        let g = self.grid;
        let vc = g.velocity_cells;
        let dphase = PHASE_CEILING / (g.phase_cells - 1) as f64;
        let dvel = g.max_velocity / (vc - 1) as f64;
        let q = self.noise.q_phase_vel;
        let phase_kernel = gaussian_kernel((self.noise.q_phase + q / 4.0).sqrt() / dphase);
        let vel_kernel = gaussian_kernel(q.sqrt() / dvel);
        let mut acc: Vec<Option<Accumulator>> = (0..self.cells.len()).map(|_| None).collect();
        for (k, cell) in self.cells.iter().enumerate() {
            let Some(cell) = cell else { continue };
            let j = k % vc;
            let moved = (cell.phase + g.velocity(j)).min(PHASE_CEILING);
            let pi = g.cell_of(moved);
            for (ti, tw) in spread(pi, g.phase_cells, &phase_kernel) {
                let phase = (moved + (ti as f64 - pi as f64) * dphase).clamp(0.0, PHASE_CEILING);
                for (tj, vw) in spread(j, vc, &vel_kernel) {
                    let w = cell.mass * tw * vw;
                    if w > 0.0 {
                        acc[ti * vc + tj]
                            .get_or_insert_with(|| Accumulator::new(cell.mean.len()))
                            .add(w, phase, cell);
                    }
                }
            }
        }
        let qw = self.noise.q_weights;
        self.cells = acc
            .into_iter()
            .map(|a| {
                a.map(|a| {
                    let mut c = a.finish();
                    if qw > 0.0 {
                        for r in 0..c.cov.nrows() {
                            c.cov[(r, r)] += qw;
                        }
                    }
                    c
                })
            })
            .collect();
    }

    /// Conditions every cell on the measured DoFs and reweights the cells by
    /// their marginal likelihood.
    pub fn update(&mut self, obs: &PartialObservation) -> Result<()> {
        let measured: Vec<usize> = obs.measured().collect();
        if measured.is_empty() {
            return Ok(());
        }
        if let Some(&d) = measured.iter().find(|&&d| !self.prior.layout.is_observed(d)) {
            return Err(Error::Config(format!("grid filter tracks observed DoFs only, got DoF {d}")));
        }
        let mut loglik = vec![f64::NEG_INFINITY; self.cells.len()];
        for (k, cell) in self.cells.iter_mut().enumerate() {
            let Some(cell) = cell else { continue };
            let phase = cell.phase;
            let mut ll = 0.0;
            for &d in &measured {
                let off = self.offsets[d];
                let row = self.prior.basis[d].row(phase);
                let n = row.len();
                let ph = cell.cov.columns(off, n) * &row;
                let s = row.dot(&ph.rows(off, n)) + self.noise.r_per_dof[d];
                let e = obs.values[d] - row.dot(&cell.mean.rows(off, n));
                ll -= 0.5 * (e * e / s + s.ln());
                cell.mean.axpy(e / s, &ph, 1.0);
                cell.cov.ger(-1.0 / s, &ph, &ph, 1.0);
            }
            loglik[k] = ll + cell.mass.ln();
        }
        let peak = loglik.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !peak.is_finite() {
            return Err(Error::Numerical("grid posterior lost all mass".into()));
        }
        let mut total = 0.0;
        for (cell, ll) in self.cells.iter_mut().zip(&loglik) {
            if let Some(c) = cell {
                c.mass = (ll - peak).exp();
                total += c.mass;
            }
        }
        for cell in self.cells.iter_mut() {
            if cell.as_ref().is_some_and(|c| c.mass / total < PRUNE_MASS) {
                *cell = None;
            } else if let Some(c) = cell {
                c.mass /= total;
            }
        }
        Ok(())
    }

    /// One tick; the first observation is applied without prediction, as in
    /// the EKF.
    pub fn observe(&mut self, obs: &PartialObservation) -> Result<GridTick> {
        if self.ticks > 0 {
            self.predict();
        }
        self.update(obs)?;
        self.ticks += 1;
        Ok(self.summary())
    }

    pub fn summary(&self) -> GridTick {
        let g = self.grid;
        let vc = g.velocity_cells;
        let mut marginal = vec![0.0; g.phase_cells];
        let mut weighted = vec![0.0; g.phase_cells];
        let (mut best, mut best_j) = (f64::MIN, 0);
        let mut total = 0.0;
        for (k, c) in self.cells.iter().enumerate() {
            let Some(c) = c else { continue };
            marginal[k / vc] += c.mass;
            weighted[k / vc] += c.mass * c.phase;
            total += c.mass;
            if c.mass > best {
                best = c.mass;
                best_j = k % vc;
            }
        }
        let map_i = marginal
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &m)| if m > best.1 { (i, m) } else { best })
            .0;
        GridTick {
            map_phase: weighted[map_i] / marginal[map_i],
            map_velocity: g.velocity(best_j),
            mean_phase: weighted.iter().sum::<f64>() / total,
            mass: total,
        }
    }
}

/// Runs [`GridFilter`] over a whole observation sequence.
pub fn grid_phase_oracle(
    prior: &PriorModel,
    noise: &NoiseConfig,
    observations: &[PartialObservation],
    grid: PhaseGrid,
) -> Result<Vec<GridTick>> {
    let mut filter = GridFilter::new(prior, noise, grid)?;
    observations.iter().map(|o| filter.observe(o)).collect()
}

/// One executed or recorded run entering a report.
#[derive(Debug, Clone)]
pub struct RunInput {
    pub name: String,
    pub group: String,
    pub interaction: Interaction,
    pub trace: Option<Vec<PhaseSample>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub window_s: f64,
    pub thresholds: SettleThresholds,
    /// Sliding-window length for correlation histograms, in seconds.
    pub histogram_window_s: f64,
    /// DoF pair for histograms; defaults to the first observed DoF and the
    /// last controlled DoF.
    pub histogram_pair: Option<(usize, usize)>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            window_s: DEFAULT_TTC_WINDOW_S,
            thresholds: SettleThresholds::default(),
            histogram_window_s: 2.0,
            histogram_pair: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub group: String,
    pub samples: usize,
    pub ttc_ratio: f64,
    pub settled: bool,
    pub terminal_phase: Option<f64>,
    pub terminal_phase_vel: Option<f64>,
    pub terminal_var_phase: Option<f64>,
    pub terminal_var_phase_vel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub runs: usize,
    pub ttc_mean: f64,
    /// Sample variance (divisor n − 1); zero for a single run.
    pub ttc_sample_var: f64,
    /// Mean Pearson matrix over the group's runs, as rows.
    pub pearson_mean: Vec<Vec<f64>>,
    pub histogram_pair: (usize, usize),
    pub histogram: CorrHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStat {
    pub name: String,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunSummary>,
    pub groups: Vec<GroupSummary>,
    pub test_stats: Vec<TestStat>,
}

fn mean_and_sample_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

pub fn build_report(runs: &[RunInput], settings: &EvalSettings) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let layout = runs[0].interaction.layout().clone();
    let d = layout.dof_count();
    let pair = settings
        .histogram_pair
        .unwrap_or((0, layout.controlled().end - 1));

    let mut summaries = Vec::new();
    let mut by_group: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (k, run) in runs.iter().enumerate() {
        if run.interaction.layout() != &layout {
            return Err(Error::Layout(format!("run {} has a different layout", run.name)));
        }
        let c = time_to_completion(&run.interaction, settings.window_s, settings.thresholds)?;
        let last = run.trace.as_ref().and_then(|t| t.last().copied());
        summaries.push(RunSummary {
            name: run.name.clone(),
            group: run.group.clone(),
            samples: run.interaction.len(),
            ttc_ratio: c.ratio,
            settled: c.settled,
            terminal_phase: last.map(|s| s.phase),
            terminal_phase_vel: last.map(|s| s.phase_vel),
            terminal_var_phase: last.map(|s| s.var_phase),
            terminal_var_phase_vel: last.map(|s| s.var_phase_vel),
        });
        by_group.entry(run.group.clone()).or_default().push(k);
    }

    let mut groups = Vec::new();
    for (name, members) in &by_group {
        let ttc: Vec<f64> = members.iter().map(|&k| summaries[k].ttc_ratio).collect();
        let (ttc_mean, ttc_sample_var) = mean_and_sample_var(&ttc);
        let mut pearson_sum = DMatrix::zeros(d, d);
        let mut histogram = CorrHistogram::new();
        for &k in members {
            let inter = &runs[k].interaction;
            pearson_sum += pearson_matrix(inter)?.r;
            let window = ((settings.histogram_window_s * inter.sample_rate()).round() as usize)
                .clamp(3, inter.len());
            histogram.merge(&sliding_corr_histogram(inter, pair, window)?);
        }
        let mean = pearson_sum / members.len() as f64;
        groups.push(GroupSummary {
            group: name.clone(),
            runs: members.len(),
            ttc_mean,
            ttc_sample_var,
            pearson_mean: mean.row_iter().map(|r| r.iter().copied().collect()).collect(),
            histogram_pair: pair,
            histogram,
        });
    }

    let mut test_stats = Vec::new();
    let names: Vec<&String> = by_group.keys().collect();
    for i in 0..names.len() {
        for j in (i + 1)..names.len() {
            let a: Vec<f64> = by_group[names[i]].iter().map(|&k| summaries[k].ttc_ratio).collect();
            let b: Vec<f64> = by_group[names[j]].iter().map(|&k| summaries[k].ttc_ratio).collect();
            let mw = mann_whitney_u(&a, &b)?;
            test_stats.push(TestStat {
                name: format!("mann_whitney_ttc:{}:{}", names[i], names[j]),
                statistic: mw.u,
                p_value: mw.p_value,
            });
        }
    }
    Ok(EvalReport {
        runs: summaries,
        groups,
        test_stats,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// Flat `metric,scenario,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,scenario,value\n");
        for r in &self.runs {
            let _ = writeln!(out, "ttc_ratio,{},{}", r.name, r.ttc_ratio);
            let _ = writeln!(out, "settled,{},{}", r.name, u8::from(r.settled));
            if let Some(p) = r.terminal_phase {
                let _ = writeln!(out, "terminal_phase,{},{p}", r.name);
            }
            if let Some(v) = r.terminal_phase_vel {
                let _ = writeln!(out, "terminal_phase_vel,{},{v}", r.name);
            }
            if let Some(v) = r.terminal_var_phase_vel {
                let _ = writeln!(out, "terminal_var_phase_vel,{},{v}", r.name);
            }
        }
        for g in &self.groups {
            let _ = writeln!(out, "ttc_mean,{},{}", g.group, g.ttc_mean);
            let _ = writeln!(out, "ttc_sample_var,{},{}", g.group, g.ttc_sample_var);
            for (i, c) in g.histogram.counts.iter().enumerate() {
                let _ = writeln!(out, "hist_bin_{i:02},{},{c}", g.group);
            }
            let _ = writeln!(out, "hist_skipped,{},{}", g.group, g.histogram.skipped);
        }
        for t in &self.test_stats {
            let _ = writeln!(out, "{}_u,all,{}", t.name, t.statistic);
            let _ = writeln!(out, "{}_p,all,{}", t.name, t.p_value);
        }
        out
    }

    /// Mean Pearson matrix of one group as CSV rows.
    pub fn pearson_csv(&self, group: &str) -> Option<String> {
        let g = self.groups.iter().find(|g| g.group == group)?;
        let mut out = String::new();
        for row in &g.pearson_mean {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::DofLayout;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn two_dof(a: Vec<f64>, b: Vec<f64>, rate: f64) -> Interaction {
        let t = a.len();
        let data = DMatrix::from_fn(2, t, |d, c| if d == 0 { a[c] } else { b[c] });
        Interaction::new(data, rate, DofLayout::generic(1, 1).unwrap()).unwrap()
    }

    fn noise(n: usize, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn settle_point_is_exact() {
        let (len, s) = (200, 73);
        let mut a = noise(len, 1.0, 1);
        for v in &mut a[s..] {
            *v = 0.4;
        }
        let b = vec![2.0; len];
        let c = time_to_completion(&two_dof(a, b, 10.0), 2.0, SettleThresholds::default()).unwrap();
        assert!(c.settled);
        assert_eq!(c.sample, s);
        assert_eq!(c.ratio, s as f64 / len as f64);
    }

    #[test]
    fn still_trajectory_completes_immediately() {
        let i = two_dof(vec![1.0; 100], vec![3.0; 100], 10.0);
        let c = time_to_completion(&i, 2.0, SettleThresholds::default()).unwrap();
        assert_eq!(c.ratio, 0.0);
    }

    #[test]
    fn noisy_trajectory_never_settles() {
        let i = two_dof(noise(100, 1.0, 2), noise(100, 1.0, 3), 10.0);
        let c = time_to_completion(&i, 2.0, SettleThresholds::default()).unwrap();
        assert!(!c.settled);
        assert_eq!(c.ratio, 1.0);
    }

    #[test]
    fn window_longer_than_run_is_rejected() {
        let i = two_dof(vec![1.0; 20], vec![1.0; 20], 10.0);
        assert!(time_to_completion(&i, 2.0, SettleThresholds::default()).is_err());
    }

    #[test]
    fn completion_is_monotone_in_threshold() {
        let mut a: Vec<f64> = (0..300).map(|t| (t as f64 / 40.0).min(3.0)).collect();
        for (v, n) in a.iter_mut().zip(noise(300, 0.01, 5)) {
            *v += n;
        }
        let i = two_dof(a, vec![0.0; 300], 30.0);
        let mut prev = f64::INFINITY;
        for k in 0..12 {
            let th = 1e-5 * 3f64.powi(k);
            let c = time_to_completion(&i, 2.0, SettleThresholds { observed: th, controlled: th }).unwrap();
            assert!(c.ratio <= prev);
            prev = c.ratio;
        }
    }

    #[test]
    fn pearson_affine_and_self() {
        let x: Vec<f64> = (0..50).map(|t| (t as f64 * 0.3).sin() + t as f64 * 0.01).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_relative_eq!(pearson(&x, &x).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(pearson(&x, &y).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(pearson(&x, &z).unwrap(), -1.0, epsilon = 1e-12);
        let m = pearson_matrix(&two_dof(x.clone(), y, 30.0)).unwrap();
        assert_relative_eq!(m.r[(0, 1)], 1.0, epsilon = 1e-12);
        assert_eq!(m.r[(0, 0)], 1.0);
    }

    #[test]
    fn independent_noise_is_uncorrelated() {
        let r = pearson(&noise(10_000, 1.0, 11), &noise(10_000, 1.0, 12)).unwrap();
        assert!(r.abs() < 0.05, "r = {r}");
    }

    #[test]
    fn constant_dof_gets_zero_row() {
        let m = pearson_matrix(&two_dof(noise(30, 1.0, 4), vec![1.0; 30], 30.0)).unwrap();
        assert_eq!(m.constant_dofs, vec![1]);
        assert_eq!(m.r[(0, 1)], 0.0);
        assert_eq!(m.r[(1, 1)], 1.0);
    }

    #[test]
    fn histogram_mass_counts_windows() {
        let i = two_dof(noise(6000, 1.0, 6), noise(6000, 1.0, 7), 30.0);
        let h = sliding_corr_histogram(&i, (0, 1), 40).unwrap();
        assert_eq!(h.total() + h.skipped, 5961);
        // Independent noise: centred, roughly symmetric.
        let neg: usize = h.counts[..10].iter().sum();
        let pos: usize = h.counts[10..].iter().sum();
        assert!((neg as f64 - pos as f64).abs() < 0.1 * h.total() as f64, "{neg} vs {pos}");
        assert!(h.fraction_beyond(0.8) < 0.01);
    }

    #[test]
    fn full_window_histogram_matches_matrix() {
        let x = noise(60, 1.0, 8);
        let y: Vec<f64> = x.iter().zip(noise(60, 1.0, 9)).map(|(a, b)| a + 0.5 * b).collect();
        let i = two_dof(x, y, 30.0);
        let h = sliding_corr_histogram(&i, (0, 1), 60).unwrap();
        assert_eq!(h.total(), 1);
        let r = pearson_matrix(&i).unwrap().r[(0, 1)];
        assert_eq!(h.counts[CorrHistogram::bin_of(r)], 1);
    }

    #[test]
    fn constant_windows_are_skipped() {
        let i = two_dof(noise(50, 1.0, 1), vec![0.0; 50], 30.0);
        let h = sliding_corr_histogram(&i, (0, 1), 10).unwrap();
        assert_eq!(h.total(), 0);
        assert_eq!(h.skipped, 41);
        assert!(sliding_corr_histogram(&i, (0, 1), 2).is_err());
    }

    #[test]
    fn bins_cover_the_interval() {
        assert_eq!(CorrHistogram::bin_of(-1.0), 0);
        assert_eq!(CorrHistogram::bin_of(1.0), HISTOGRAM_BINS - 1);
        assert_eq!(CorrHistogram::bin_of(0.0), 10);
        assert_eq!(CorrHistogram::bin_of(0.85), 18);
    }

    fn pair_count(a: &[f64], b: &[f64]) -> f64 {
        let mut u = 0.0;
        for x in a {
            for y in b {
                if x > y {
                    u += 1.0;
                } else if x == y {
                    u += 0.5;
                }
            }
        }
        u
    }

    #[test]
    fn identical_samples_give_p_near_one() {
        let a: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!(mann_whitney_u(&a, &a).unwrap().p_value > 0.9);
        let small = [1.0, 2.0, 3.0];
        assert!(mann_whitney_u(&small, &small).unwrap().p_value > 0.9);
    }

    #[test]
    fn separated_samples_are_significant() {
        let a: Vec<f64> = (1..=10).map(f64::from).collect();
        let b: Vec<f64> = (101..=110).map(f64::from).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.method, MwuMethod::Normal);
        assert_eq!(r.u, 0.0);
        assert!(r.p_value < 0.01);
    }

    #[test]
    fn exact_distribution_small_case() {
        // n = m = 3, full separation: 2 of the 20 arrangements are as extreme.
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.method, MwuMethod::Exact);
        assert_relative_eq!(r.p_value, 0.1, epsilon = 1e-12);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn exact_and_normal_agree_roughly() {
        let a = [1.1, 2.3, 2.9, 4.0, 5.5, 6.1, 7.7, 8.0];
        let b = [3.0, 4.4, 6.6, 7.1, 8.8, 9.2, 9.9, 10.5];
        let exact = mann_whitney_u(&a, &b).unwrap();
        let mut a9 = a.to_vec();
        a9.push(100.0);
        let approx = mann_whitney_u(&a9, &b).unwrap();
        assert_eq!(approx.method, MwuMethod::Normal);
        assert!(exact.p_value > 0.0 && exact.p_value < 1.0);
    }

    proptest! {
        #[test]
        fn u_matches_pair_counting(
            a in prop::collection::vec(0i32..6, 1..12),
            b in prop::collection::vec(0i32..6, 1..12),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let r = mann_whitney_u(&a, &b).unwrap();
            prop_assert_eq!(r.u, pair_count(&a, &b));
            prop_assert!((0.0..=1.0).contains(&r.p_value));
        }

        #[test]
        fn p_value_is_rank_invariant(
            a in prop::collection::vec(0.1f64..5.0, 2..14),
            b in prop::collection::vec(0.1f64..5.0, 2..14),
        ) {
            let p = mann_whitney_u(&a, &b).unwrap().p_value;
            let ea: Vec<f64> = a.iter().map(|v| v.exp()).collect();
            let eb: Vec<f64> = b.iter().map(|v| v.exp()).collect();
            let la: Vec<f64> = a.iter().map(|v| v.ln()).collect();
            let lb: Vec<f64> = b.iter().map(|v| v.ln()).collect();
            prop_assert!((mann_whitney_u(&ea, &eb).unwrap().p_value - p).abs() < 1e-12);
            prop_assert!((mann_whitney_u(&la, &lb).unwrap().p_value - p).abs() < 1e-12);
        }
    }

    #[test]
    fn phase_error_cases() {
        let truth: Vec<f64> = (0..11).map(|t| t as f64 / 10.0).collect();
        let e = phase_error(&truth, &truth, 0).unwrap();
        assert_eq!(e.rmse, 0.0);
        assert_eq!(e.terminal, 0.0);
        let off: Vec<f64> = truth.iter().map(|t| t + 0.1).collect();
        let e = phase_error(&off, &truth, 0).unwrap();
        assert_relative_eq!(e.rmse, 0.1, epsilon = 1e-12);
        assert!(phase_error(&off[1..], &truth, 0).is_err());
    }

    /// Single observed DoF following a min-jerk ramp with near-certain weights.
    fn ramp_prior() -> PriorModel {
        use crate::basis::{decompose, BasisConfig, WeightVector};
        use crate::simgen::min_jerk;
        let cfg = BasisConfig::uniform(15).unwrap();
        let t = 300;
        let ramp: Vec<f64> = (0..t).map(|k| min_jerk(k as f64 / (t - 1) as f64)).collect();
        let w = decompose(&ramp, &cfg).unwrap().weights;
        let mut cov = DMatrix::zeros(32, 32);
        cov[(0, 0)] = 1e-4;
        cov[(1, 1)] = 1e-6;
        for k in 2..32 {
            cov[(k, k)] = 1e-10;
        }
        PriorModel {
            layout: DofLayout::generic(1, 1).unwrap(),
            basis: vec![cfg.clone(), cfg],
            sample_rate: 30.0,
            mean_weights: WeightVector { per_dof: vec![w.clone(), w] },
            phase0: 0.0,
            phase_vel0: 1.0 / (t - 1) as f64,
            var_phase: 1e-4,
            var_phase_vel: 1e-6,
            cov,
            dof_ranges: vec![1.0, 1.0],
            demo_count: 2,
        }
    }

    fn ramp_obs(prior: &PriorModel, phase: f64) -> PartialObservation {
        let v = prior.basis[0].row(phase).dot(&prior.mean_weights.per_dof[0]);
        PartialObservation::observed_only(DVector::from_vec(vec![v, 0.0]), &prior.layout).unwrap()
    }

    #[test]
    fn degenerate_grid_is_rejected() {
        let prior = ramp_prior();
        let noise = NoiseConfig::from_ranges(&prior.dof_ranges);
        for grid in [
            PhaseGrid { phase_cells: 1, ..PhaseGrid::for_prior(&prior) },
            PhaseGrid { velocity_cells: 1, ..PhaseGrid::for_prior(&prior) },
            PhaseGrid { max_velocity: 0.0, ..PhaseGrid::for_prior(&prior) },
        ] {
            assert!(GridFilter::new(&prior, &noise, grid).is_err());
        }
    }

    #[test]
    fn sharp_observation_localizes_phase() {
        let prior = ramp_prior();
        let mut noise = NoiseConfig::from_ranges(&prior.dof_ranges);
        noise.r_per_dof = vec![1e-8, 1e-8];
        let grid = PhaseGrid::for_prior(&prior);
        let cell = PHASE_CEILING / (grid.phase_cells - 1) as f64;
        for target in [0.2, 0.45, 0.7] {
            let mut f = GridFilter::new(&prior, &noise, grid).unwrap().with_uniform_prior();
            let tick = f.observe(&ramp_obs(&prior, target)).unwrap();
            assert!((tick.map_phase - target).abs() <= cell, "{target}: {}", tick.map_phase);
            assert_relative_eq!(f.posterior().sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn posterior_stays_normalized_and_tracks_a_replay() {
        let prior = ramp_prior();
        let noise = NoiseConfig::from_ranges(&prior.dof_ranges);
        let obs: Vec<PartialObservation> = (0..300).map(|k| ramp_obs(&prior, k as f64 / 299.0)).collect();
        let ticks = grid_phase_oracle(&prior, &noise, &obs, PhaseGrid::for_prior(&prior)).unwrap();
        for (k, t) in ticks.iter().enumerate() {
            assert_relative_eq!(t.mass, 1.0, epsilon = 1e-9);
            if (30..270).contains(&k) {
                assert!((t.map_phase - k as f64 / 299.0).abs() < 0.02, "tick {k}: {}", t.map_phase);
            }
        }
    }

    #[test]
    fn controlled_measurements_are_rejected() {
        let prior = ramp_prior();
        let noise = NoiseConfig::from_ranges(&prior.dof_ranges);
        let mut f = GridFilter::new(&prior, &noise, PhaseGrid::for_prior(&prior)).unwrap();
        let full = PartialObservation::full(DVector::from_vec(vec![0.0, 0.0]));
        assert!(matches!(f.observe(&full), Err(Error::Config(_))));
    }
}

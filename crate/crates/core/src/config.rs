//! Run configuration, read from TOML. Every field has a default, so an empty
//! file is a valid configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, DEFAULT_BASIS_COUNT, DEFAULT_WIDTH_FACTOR};
use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::filter::NoiseConfig;
use crate::response::{LoopConfig, LoopRates};
use crate::simgen::{Recording, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSettings {
    pub count: usize,
    /// Width as a multiple of the center spacing.
    pub width_factor: f64,
}

impl Default for BasisSettings {
    fn default() -> Self {
        Self {
            count: DEFAULT_BASIS_COUNT,
            width_factor: DEFAULT_WIDTH_FACTOR,
        }
    }
}

/// Filter noise used when training. `R` is derived from each DoF's range
/// unless `r_per_dof` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSettings {
    pub q_phase: f64,
    pub q_phase_vel: f64,
    pub q_weights: f64,
    pub r_fraction: f64,
    pub r_per_dof: Option<Vec<f64>>,
    pub gate: Option<f64>,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self {
            q_phase: NoiseConfig::DEFAULT_Q_PHASE,
            q_phase_vel: NoiseConfig::DEFAULT_Q_PHASE_VEL,
            q_weights: NoiseConfig::DEFAULT_Q_WEIGHTS,
            r_fraction: NoiseConfig::DEFAULT_R_FRACTION,
            r_per_dof: None,
            gate: None,
        }
    }
}

impl NoiseSettings {
    pub fn to_noise(&self, ranges: &[f64]) -> NoiseConfig {
        let r_per_dof = match &self.r_per_dof {
            Some(r) => r.clone(),
            None => ranges
                .iter()
                .map(|r| {
                    let sd = self.r_fraction * r;
                    (sd * sd).max(1e-12)
                })
                .collect(),
        };
        NoiseConfig {
            q_phase: self.q_phase,
            q_phase_vel: self.q_phase_vel,
            q_weights: self.q_weights,
            r_per_dof,
            gate: self.gate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherSettings {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SmootherSettings {
    fn default() -> Self {
        let l = LoopConfig::default();
        Self {
            alpha: l.alpha,
            beta: l.beta,
        }
    }
}

/// What `simulate` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSettings {
    pub observed: usize,
    pub controlled: usize,
    pub trajectories: usize,
    pub repetitions: usize,
    pub tests_per_speed: usize,
    pub pause_tests: usize,
    pub pause_s: f64,
    pub static_runs: usize,
    pub duration_s: f64,
    pub noise_fraction: f64,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        let rec = Recording::default();
        Self {
            observed: 3,
            controlled: 5,
            trajectories: 12,
            repetitions: 3,
            tests_per_speed: 5,
            pause_tests: 5,
            pause_s: 3.0,
            static_runs: 5,
            duration_s: rec.duration_s,
            noise_fraction: rec.noise_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub basis: BasisSettings,
    pub rates: LoopRates,
    pub noise: NoiseSettings,
    pub smoother: SmootherSettings,
    pub scenario: ScenarioSettings,
    pub eval: EvalSettings,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be non-negative, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.basis.count < 2 {
            return Err(Error::Config("basis count must be at least 2".into()));
        }
        positive("basis width factor", self.basis.width_factor)?;
        self.rates.periods()?;
        let n = &self.noise;
        for (name, v) in [("q_phase", n.q_phase), ("q_phase_vel", n.q_phase_vel), ("q_weights", n.q_weights)] {
            non_negative(name, v)?;
        }
        positive("r_fraction", n.r_fraction)?;
        if let Some(r) = &n.r_per_dof {
            for v in r {
                positive("r_per_dof entry", *v)?;
            }
        }
        if let Some(g) = n.gate {
            positive("gate", g)?;
        }
        let s = &self.smoother;
        if !(s.alpha > 0.0 && s.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", s.alpha)));
        }
        if !(0.0..=1.0).contains(&s.beta) {
            return Err(Error::Config(format!("beta must be in [0, 1], got {}", s.beta)));
        }
        let sc = &self.scenario;
        if sc.observed == 0 || sc.controlled == 0 {
            return Err(Error::Config("scenario needs observed and controlled DoFs".into()));
        }
        if sc.trajectories * sc.repetitions < 2 {
            return Err(Error::Config("need at least two demonstrations".into()));
        }
        positive("duration_s", sc.duration_s)?;
        non_negative("pause_s", sc.pause_s)?;
        non_negative("noise_fraction", sc.noise_fraction)?;
        positive("eval window_s", self.eval.window_s)?;
        positive("eval histogram_window_s", self.eval.histogram_window_s)?;
        Ok(())
    }

    pub fn basis_configs(&self, dofs: usize) -> Result<Vec<BasisConfig>> {
        let cfg = BasisConfig::uniform_with_width(self.basis.count, self.basis.width_factor)?;
        Ok(vec![cfg; dofs])
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            rates: self.rates,
            alpha: self.smoother.alpha,
            beta: self.smoother.beta,
        }
    }

    /// Scene for `simulate`, recorded at the configured sample rate.
    pub fn scene(&self) -> Result<Scene> {
        let mut scene = Scene::new(self.scenario.observed, self.scenario.controlled)?;
        scene.recording = Recording {
            duration_s: self.scenario.duration_s,
            sample_rate: self.rates.sample_hz,
            noise_fraction: self.scenario.noise_fraction,
        };
        Ok(scene)
    }

    pub fn pause_ticks(&self) -> usize {
        (self.scenario.pause_s * self.rates.sample_hz).round() as usize
    }
}

/// Parses `sample,infer,exec` in Hz.
pub fn parse_rates(text: &str) -> Result<LoopRates> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("rates must be sample,infer,exec, got {text:?}")));
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .parse()
            .map_err(|_| Error::Config(format!("bad rate {p:?}")))?;
    }
    let rates = LoopRates {
        sample_hz: v[0],
        infer_hz: v[1],
        exec_hz: v[2],
    };
    rates.periods()?;
    Ok(rates)
}

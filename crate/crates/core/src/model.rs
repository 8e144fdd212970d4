//! Trained model file: prior plus filter noise, stored as JSON.
//!
//! Matrices are written as arrays of rows. Output is deterministic for a
//! given model; floats use the shortest representation that round-trips.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, WeightVector};
use crate::error::{Error, Result};
use crate::filter::NoiseConfig;
use crate::interaction::DofLayout;
use crate::prior::PriorModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub prior: PriorModel,
    pub noise: NoiseConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format_version: u32,
    layout: DofLayout,
    basis: Vec<BasisConfig>,
    sample_rate: f64,
    demo_count: usize,
    dof_ranges: Vec<f64>,
    w0: Vec<Vec<f64>>,
    phase0: f64,
    phase_vel0: f64,
    var_phase: f64,
    var_phase_vel: f64,
    noise: NoiseConfig,
    sigma0: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(prior: PriorModel, noise: NoiseConfig) -> Result<Self> {
        prior.validate()?;
        noise.validate(&prior.layout)?;
        Ok(Self { prior, noise })
    }

    pub fn to_json(&self) -> String {
        let p = &self.prior;
        let doc = ModelDoc {
            format_version: FORMAT_VERSION,
            layout: p.layout.clone(),
            basis: p.basis.clone(),
            sample_rate: p.sample_rate,
            demo_count: p.demo_count,
            dof_ranges: p.dof_ranges.clone(),
            w0: p.mean_weights.per_dof.iter().map(|w| w.iter().copied().collect()).collect(),
            phase0: p.phase0,
            phase_vel0: p.phase_vel0,
            var_phase: p.var_phase,
            var_phase_vel: p.var_phase_vel,
            noise: self.noise.clone(),
            sigma0: p.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        };
        let mut text = serde_json::to_string(&doc).expect("model serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let version: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        match version.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Format(format!(
                    "unsupported format_version {v}, expected {FORMAT_VERSION}"
                )))
            }
            None => return Err(Error::Format("missing format_version".into())),
        }
        let doc: ModelDoc = serde_json::from_value(version).map_err(|e| Error::Format(e.to_string()))?;
        let n = doc.sigma0.len();
        if doc.sigma0.iter().any(|r| r.len() != n) {
            return Err(Error::Format("sigma0 is not square".into()));
        }
        let cov = DMatrix::from_row_iterator(n, n, doc.sigma0.into_iter().flatten());
        let mean_weights = WeightVector {
            per_dof: doc.w0.into_iter().map(DVector::from_vec).collect(),
        };
        let prior = PriorModel {
            layout: doc.layout,
            basis: doc.basis,
            sample_rate: doc.sample_rate,
            mean_weights,
            phase0: doc.phase0,
            phase_vel0: doc.phase_vel0,
            var_phase: doc.var_phase,
            var_phase_vel: doc.var_phase_vel,
            cov,
            dof_ranges: doc.dof_ranges,
            demo_count: doc.demo_count,
        };
        Self::new(prior, doc.noise)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::Interaction;
    use crate::prior::learn_prior;

    fn toy_model() -> Model {
        let layout = DofLayout::generic(1, 1).unwrap();
        let demos: Vec<Interaction> = (0..3)
            .map(|i| {
                let t = 40 + 10 * i;
                let data = DMatrix::from_fn(2, t, |d, c| {
                    let x = c as f64 / (t - 1) as f64;
                    (d as f64 + 1.0) * x * (1.0 + 0.1 * i as f64) + 0.01 * ((c * 7 + d) % 5) as f64
                });
                Interaction::new(data, 30.0, layout.clone()).unwrap()
            })
            .collect();
        let cfgs = vec![BasisConfig::uniform(6).unwrap(); 2];
        let prior = learn_prior(&demos, &cfgs).unwrap();
        let noise = NoiseConfig::from_ranges(&prior.dof_ranges);
        Model::new(prior, noise).unwrap()
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = toy_model();
        let text = m.to_json();
        let back = Model::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn covariance_is_row_major() {
        let mut m = toy_model();
        m.prior.cov[(0, 1)] = 7.5;
        let doc: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(doc["sigma0"][0][1].as_f64(), Some(7.5));
        assert_eq!(doc["format_version"].as_u64(), Some(1));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let text = toy_model().to_json().replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(matches!(Model::from_json(&text), Err(Error::Format(_))));
        assert!(Model::from_json("{}").is_err());
        assert!(Model::from_json("not json").is_err());
    }

    #[test]
    fn invalid_basis_is_rejected() {
        let text = toy_model().to_json().replacen("\"width\":", "\"width\":-", 1);
        assert!(Model::from_json(&text).is_err());
    }
}

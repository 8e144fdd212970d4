//! Interaction trajectories, DoF layout and the on-disk text format.
//!
//! An interaction is a `D × T` matrix: one row per degree of freedom, one
//! column per sample. Observed (partner) DoFs always come before controlled
//! (actuated) DoFs.
//!
//! File format:
//!
//! ```text
//! D_o D_c T sample_rate [executed=true]
//! name_1,name_2,...,name_D
//! unit_1,unit_2,...,unit_D
//! v_1,v_2,...,v_D        <- sample 0
//! ...                    <- T data lines in total
//! ```

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which rows of an interaction belong to the observed partner and which are
/// actuated by us.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout")]
pub struct DofLayout {
    observed_count: usize,
    controlled_count: usize,
    names: Vec<String>,
    units: Vec<String>,
}

#[derive(Deserialize)]
struct RawLayout {
    observed_count: usize,
    controlled_count: usize,
    names: Vec<String>,
    units: Vec<String>,
}

impl TryFrom<RawLayout> for DofLayout {
    type Error = Error;

    fn try_from(raw: RawLayout) -> Result<Self> {
        Self::new(raw.observed_count, raw.controlled_count, raw.names, raw.units)
    }
}

impl DofLayout {
    pub fn new(
        observed_count: usize,
        controlled_count: usize,
        names: Vec<String>,
        units: Vec<String>,
    ) -> Result<Self> {
        if observed_count < 1 || controlled_count < 1 {
            return Err(Error::Layout(format!(
                "need at least one observed and one controlled DoF, got {observed_count}+{controlled_count}"
            )));
        }
        let dofs = observed_count + controlled_count;
        if names.len() != dofs || units.len() != dofs {
            return Err(Error::Layout(format!(
                "expected {dofs} names and units, got {} and {}",
                names.len(),
                units.len()
            )));
        }
        for label in names.iter().chain(units.iter()) {
            if label.contains(',') || label.contains('\n') {
                return Err(Error::Layout(format!("label {label:?} contains a separator")));
            }
        }
        Ok(Self {
            observed_count,
            controlled_count,
            names,
            units,
        })
    }

    /// Layout with generated names (`obs0`, `ctl0`, ...); observed DoFs in `m`, controlled in `mPa`.
    pub fn generic(observed_count: usize, controlled_count: usize) -> Result<Self> {
        let names = (0..observed_count)
            .map(|i| format!("obs{i}"))
            .chain((0..controlled_count).map(|i| format!("ctl{i}")))
            .collect();
        let units = (0..observed_count)
            .map(|_| "m".to_string())
            .chain((0..controlled_count).map(|_| "mPa".to_string()))
            .collect();
        Self::new(observed_count, controlled_count, names, units)
    }

    pub fn observed_count(&self) -> usize {
        self.observed_count
    }

    pub fn controlled_count(&self) -> usize {
        self.controlled_count
    }

    pub fn dof_count(&self) -> usize {
        self.observed_count + self.controlled_count
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn observed(&self) -> Range<usize> {
        0..self.observed_count
    }

    pub fn controlled(&self) -> Range<usize> {
        self.observed_count..self.dof_count()
    }

    pub fn is_observed(&self, dof: usize) -> bool {
        dof < self.observed_count
    }

    /// Mask with only the observed DoFs set.
    pub fn observed_mask(&self) -> Vec<bool> {
        (0..self.dof_count()).map(|d| self.is_observed(d)).collect()
    }
}

/// A recorded (or executed) two-agent interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    data: DMatrix<f64>,
    sample_rate: f64,
    layout: DofLayout,
    /// Set for interactions produced by the runtime loop rather than recorded.
    pub executed: bool,
}

impl Interaction {
    pub fn new(data: DMatrix<f64>, sample_rate: f64, layout: DofLayout) -> Result<Self> {
        if data.nrows() != layout.dof_count() {
            return Err(Error::Dimension(format!(
                "data has {} rows, layout has {} DoFs",
                data.nrows(),
                layout.dof_count()
            )));
        }
        if data.ncols() < 2 {
            return Err(Error::InvalidTrajectory(format!(
                "need at least 2 samples, got {}",
                data.ncols()
            )));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::InvalidTrajectory(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::InvalidTrajectory(format!(
                "non-finite value at DoF {row}, sample {col}"
            )));
        }
        Ok(Self {
            data,
            sample_rate,
            layout,
            executed: false,
        })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn layout(&self) -> &DofLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    /// Time series for one DoF.
    pub fn dof(&self, dof: usize) -> Vec<f64> {
        self.data.row(dof).iter().copied().collect()
    }

    pub fn sample(&self, t: usize) -> DVector<f64> {
        self.data.column(t).into_owned()
    }

    /// Samples `range` as a new interaction.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::InvalidTrajectory(format!(
                "slice {range:?} out of bounds for length {}",
                self.len()
            )));
        }
        let data = self.data.columns(range.start, range.len()).into_owned();
        let mut out = Self::new(data, self.sample_rate, self.layout.clone())?;
        out.executed = self.executed;
        Ok(out)
    }

    /// Linear resampling to `len` samples evenly spaced in phase. The sample
    /// rate is scaled so the duration is unchanged.
    pub fn resample(&self, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::InvalidTrajectory(format!(
                "cannot resample to {len} samples"
            )));
        }
        let src = self.len();
        let data = DMatrix::from_fn(self.data.nrows(), len, |d, t| {
            let pos = t as f64 * (src - 1) as f64 / (len - 1) as f64;
            let i = (pos.floor() as usize).min(src - 2);
            let frac = pos - i as f64;
            if frac == 0.0 {
                self.data[(d, i)]
            } else {
                self.data[(d, i)] * (1.0 - frac) + self.data[(d, i + 1)] * frac
            }
        });
        let rate = self.sample_rate * len as f64 / src as f64;
        let mut out = Self::new(data, rate, self.layout.clone())?;
        out.executed = self.executed;
        Ok(out)
    }

    /// Partial observations exposing only the observed DoFs, one per sample.
    pub fn observed_stream(&self) -> impl Iterator<Item = PartialObservation> + '_ {
        let mask = self.layout.observed_mask();
        (0..self.len()).map(move |t| PartialObservation {
            values: self.sample(t),
            mask: mask.clone(),
        })
    }
}

/// One tick of sensor data where only some DoFs were measured.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialObservation {
    pub values: DVector<f64>,
    /// `true` where the corresponding entry of `values` was measured.
    pub mask: Vec<bool>,
}

impl PartialObservation {
    pub fn new(values: DVector<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "{} values but {} mask entries",
                values.len(),
                mask.len()
            )));
        }
        Ok(Self { values, mask })
    }

    pub fn full(values: DVector<f64>) -> Self {
        let mask = vec![true; values.len()];
        Self { values, mask }
    }

    pub fn observed_only(values: DVector<f64>, layout: &DofLayout) -> Result<Self> {
        Self::new(values, layout.observed_mask())
    }

    pub fn measured(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(d, &m)| m.then_some(d))
    }

    pub fn any_measured(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

/// Normalised phase of sample `t` in a trajectory of `len` samples.
pub fn phase_of(t: usize, len: usize) -> Result<f64> {
    if len < 2 {
        return Err(Error::InvalidTrajectory(format!(
            "phase needs at least 2 samples, got {len}"
        )));
    }
    if t >= len {
        return Err(Error::InvalidTrajectory(format!(
            "sample {t} outside trajectory of length {len}"
        )));
    }
    Ok(t as f64 / (len - 1) as f64)
}

/// Phases of every sample of a `len`-sample trajectory.
pub fn phases(len: usize) -> Result<Vec<f64>> {
    (0..len).map(|t| phase_of(t, len)).collect()
}

pub fn save_interaction(interaction: &Interaction, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_interaction(interaction)).map_err(|e| Error::io(path, e))
}

pub fn format_interaction(interaction: &Interaction) -> String {
    let layout = interaction.layout();
    let mut out = String::new();
    let _ = write!(
        out,
        "{} {} {} {}",
        layout.observed_count(),
        layout.controlled_count(),
        interaction.len(),
        interaction.sample_rate()
    );
    if interaction.executed {
        out.push_str(" executed=true");
    }
    out.push('\n');
    out.push_str(&layout.names().join(","));
    out.push('\n');
    out.push_str(&layout.units().join(","));
    out.push('\n');
    for t in 0..interaction.len() {
        let col = interaction.data().column(t);
        for (d, v) in col.iter().enumerate() {
            if d > 0 {
                out.push(',');
            }
            // `Display` for f64 is the shortest representation that round-trips.
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn load_interaction(path: impl AsRef<Path>) -> Result<Interaction> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interaction(&text, path)
}

pub fn parse_interaction(text: &str, path: &Path) -> Result<Interaction> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let err = |line: usize, msg: String| Error::parse(path, line, msg);

    let (ln, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 && fields.len() != 5 {
        return Err(err(ln, format!("expected `D_o D_c T sample_rate`, got {header:?}")));
    }
    let int = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| err(ln, format!("{what} is not a non-negative integer: {s:?}")))
    };
    let observed = int(fields[0], "D_o")?;
    let controlled = int(fields[1], "D_c")?;
    let len = int(fields[2], "T")?;
    let sample_rate: f64 = fields[3]
        .parse()
        .map_err(|_| err(ln, format!("sample rate is not a number: {:?}", fields[3])))?;
    let executed = match fields.get(4) {
        None => false,
        Some(&"executed=true") => true,
        Some(&"executed=false") => false,
        Some(other) => return Err(err(ln, format!("unknown header flag {other:?}"))),
    };

    let (ln, names) = lines.next().ok_or_else(|| err(2, "missing DoF names".into()))?;
    let names: Vec<String> = names.split(',').map(|s| s.trim().to_string()).collect();
    let (ln_units, units) = lines.next().ok_or_else(|| err(3, "missing DoF units".into()))?;
    let units: Vec<String> = units.split(',').map(|s| s.trim().to_string()).collect();
    let layout = DofLayout::new(observed, controlled, names, units).map_err(|e| {
        let line = if e.to_string().contains("names") { ln } else { ln_units };
        err(line, e.to_string())
    })?;

    let dofs = layout.dof_count();
    let mut data = DMatrix::zeros(dofs, len);
    let mut seen = 0;
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if seen == len {
            return Err(err(ln, format!("more than {len} data lines")));
        }
        let mut count = 0;
        for (d, tok) in line.split(',').enumerate() {
            if d >= dofs {
                count = d + 1;
                continue;
            }
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| err(ln, format!("not a number: {:?}", tok.trim())))?;
            if !v.is_finite() {
                return Err(err(ln, format!("non-finite value {v} in column {d}")));
            }
            data[(d, seen)] = v;
            count = d + 1;
        }
        if count != dofs {
            return Err(err(ln, format!("expected {dofs} values, got {count}")));
        }
        seen += 1;
    }
    if seen != len {
        return Err(err(
            text.lines().count().max(1),
            format!("expected {len} data lines, got {seen}"),
        ));
    }
    let mut interaction = Interaction::new(data, sample_rate, layout).map_err(|e| err(1, e.to_string()))?;
    interaction.executed = executed;
    Ok(interaction)
}

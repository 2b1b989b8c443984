//! Parameter vectors, box bounds, unit-box normalization and the replay buffer.
//!
//! Optimizers and networks only ever see unit-box coordinates. Engineering
//! units (the `Original` space) appear only at the environment boundary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stability threshold used when none is configured; equal to the fall penalty.
pub const DEFAULT_STABILITY_THRESHOLD: f64 = 100.0;

/// Axis-aligned box constraints on a parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(Error::InvalidBounds("zero-dimensional bounds".into()));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                return Err(Error::InvalidBounds(format!(
                    "dimension {i}: lower {lo} must be strictly below upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The same interval repeated `dim` times.
    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    /// Concatenate per-dimension intervals `pattern` until `dim` entries exist.
    pub fn tiled(pattern: &[(f64, f64)], dim: usize) -> Result<Self> {
        let (lower, upper) = pattern.iter().cycle().take(dim).copied().unzip();
        Self::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

/// Which coordinate system a [`ParamVector`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    Original,
    Unit,
    Latent,
}

/// A parameter vector tagged with its coordinate system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    space: Space,
}

impl ParamVector {
    pub fn original(values: Vec<f64>) -> Self {
        Self {
            values,
            space: Space::Original,
        }
    }

    pub fn unit(values: Vec<f64>) -> Result<Self> {
        check_unit_box(&values)?;
        Ok(Self {
            values,
            space: Space::Unit,
        })
    }

    pub fn latent(values: Vec<f64>) -> Result<Self> {
        check_unit_box(&values)?;
        Ok(Self {
            values,
            space: Space::Latent,
        })
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_unit_box(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(Error::OutOfUnitBox { index }),
        None => Ok(()),
    }
}

/// Map an in-bounds vector to the unit box. Out-of-bounds input is an error,
/// never clamped.
pub fn normalize(theta: &ParamVector, bounds: &Bounds) -> Result<ParamVector> {
    normalize_slice(theta.values(), bounds).map(|values| ParamVector {
        values,
        space: Space::Unit,
    })
}

pub fn normalize_slice(theta: &[f64], bounds: &Bounds) -> Result<Vec<f64>> {
    if theta.len() != bounds.dim() {
        return Err(Error::DimensionMismatch {
            expected: bounds.dim(),
            got: theta.len(),
        });
    }
    theta
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .enumerate()
        .map(|(index, (v, (lo, hi)))| {
            if !(*v >= *lo && *v <= *hi) {
                return Err(Error::OutOfBounds { index });
            }
            Ok(((v - lo) / (hi - lo)).clamp(0.0, 1.0))
        })
        .collect()
}

/// Inverse of [`normalize`].
pub fn denormalize(u: &ParamVector, bounds: &Bounds) -> Result<ParamVector> {
    denormalize_slice(u.values(), bounds).map(ParamVector::original)
}

pub fn denormalize_slice(u: &[f64], bounds: &Bounds) -> Result<Vec<f64>> {
    if u.len() != bounds.dim() {
        return Err(Error::DimensionMismatch {
            expected: bounds.dim(),
            got: u.len(),
        });
    }
    u.iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .enumerate()
        .map(|(index, (v, (lo, hi)))| {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::OutOfUnitBox { index });
            }
            // Endpoints are returned exactly so that `upper` round-trips.
            Ok(if *v == 1.0 { *hi } else { lo + v * (hi - lo) })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Phase1,
    Phase3,
}

/// One evaluated parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSample {
    /// Parameters in engineering units.
    pub theta: Vec<f64>,
    pub cost: f64,
    pub phase: Phase,
    pub iteration: usize,
    pub seed: u64,
    pub env_id: String,
    pub stable: bool,
    /// Latent coordinates the parameters were decoded from (phase 3 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f64>>,
}

/// Append-only record of every evaluation in a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBuffer {
    samples: Vec<CostSample>,
    dim: Option<usize>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sample: CostSample) -> Result<()> {
        if !sample.cost.is_finite() || sample.cost < 0.0 {
            return Err(Error::NonFiniteCost(sample.cost));
        }
        match self.dim {
            Some(d) if d != sample.theta.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: sample.theta.len(),
                })
            }
            _ => self.dim = Some(sample.theta.len()),
        }
        if let Some(other) = self
            .samples
            .iter()
            .find(|s| s.phase == sample.phase && s.env_id != sample.env_id)
        {
            return Err(Error::InvalidConfig(format!(
                "buffer mixes environments `{}` and `{}` within one phase",
                other.env_id, sample.env_id
            )));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn samples(&self) -> &[CostSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn best(&self) -> Option<&CostSample> {
        self.samples
            .iter()
            .min_by(|a, b| a.cost.total_cmp(&b.cost))
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for sample in &self.samples {
            serde_json::to_writer(&mut writer, sample)?;
            writer
                .write_all(b"\n")
                .map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut buffer = Self::new();
        for line in BufReader::new(reader).lines() {
            let line = line.map_err(|e| Error::io("<reader>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            buffer.push(serde_json::from_str(&line)?)?;
        }
        Ok(buffer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        self.write_jsonl(&mut writer)?;
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(file)
    }
}

impl FromIterator<CostSample> for Result<ReplayBuffer> {
    fn from_iter<I: IntoIterator<Item = CostSample>>(iter: I) -> Self {
        let mut buffer = ReplayBuffer::new();
        for sample in iter {
            buffer.push(sample)?;
        }
        Ok(buffer)
    }
}

/// Parameters of every sample whose cost is strictly below `threshold`, in
/// buffer order. Returned samples are flagged stable.
pub fn filter_stable(buffer: &mut ReplayBuffer, threshold: f64) -> Result<Vec<ParamVector>> {
    if buffer.is_empty() {
        return Err(Error::EmptyResult);
    }
    let stable: Vec<ParamVector> = buffer
        .samples
        .iter_mut()
        .filter(|s| s.cost < threshold)
        .map(|s| {
            s.stable = true;
            ParamVector::original(s.theta.clone())
        })
        .collect();
    if stable.is_empty() {
        Err(Error::EmptyResult)
    } else {
        Ok(stable)
    }
}

//! Per-user input features from decorrelated pilots.

use ndarray::{Array1, Array2, ArrayView1};

use crate::prelude::*;
use crate::scenario::Point3;
use crate::{CMatrix, Error, Result, C64};

/// Which per-user inputs the network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputMode {
    Pilots,
    PilotsAndLocations,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::Pilots => "pilots",
            InputMode::PilotsAndLocations => "pilots+locations",
        }
    }

    pub fn feature_dim(self, antennas: usize, subframes: usize) -> usize {
        let base = 2 * antennas * subframes;
        match self {
            InputMode::Pilots => base,
            InputMode::PilotsAndLocations => base + 3,
        }
    }
}

impl core::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pilots" => Ok(InputMode::Pilots),
            "pilots+locations" | "locations" => Ok(InputMode::PilotsAndLocations),
            other => Err(Error::config(format!("unknown input mode '{other}'"))),
        }
    }
}

/// `[vec(Re Y), vec(Im Y)]` (column-major), optionally followed by a location.
/// No scaling is applied.
pub fn build_features(observation: &CMatrix, location: Option<&Point3>) -> Array1<f64> {
    let (m, tau) = observation.dim();
    let base = 2 * m * tau;
    let extra = if location.is_some() { 3 } else { 0 };
    let mut out = Array1::zeros(base + extra);
    for t in 0..tau {
        for r in 0..m {
            let z = observation[[r, t]];
            out[t * m + r] = z.re;
            out[m * tau + t * m + r] = z.im;
        }
    }
    if let Some(p) = location {
        for (i, c) in p.iter().enumerate() {
            out[base + i] = *c;
        }
    }
    out
}

/// Inverse of [`build_features`] for the pilot part of an unscaled row.
pub fn observation_from_features(row: ArrayView1<'_, f64>, antennas: usize, subframes: usize) -> Result<CMatrix> {
    let base = 2 * antennas * subframes;
    if row.len() < base {
        return Err(Error::shape(format!(
            "feature row of length {} for {base} pilot entries",
            row.len()
        )));
    }
    Ok(CMatrix::from_shape_fn((antennas, subframes), |(r, t)| {
        C64::new(row[t * antennas + r], row[antennas * subframes + t * antennas + r])
    }))
}

/// Divisors applied to the pilot and location parts of the features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureScaling {
    pub pilot: f64,
    pub location: f64,
}

impl Default for FeatureScaling {
    fn default() -> Self {
        FeatureScaling {
            pilot: 1.0,
            location: 1.0,
        }
    }
}

impl FeatureScaling {
    /// Root-mean-square of each part over the rows of a raw feature matrix.
    pub fn fit(raw: &Array2<f64>, pilot_dim: usize) -> Result<Self> {
        let rms = |cols: core::ops::Range<usize>| -> f64 {
            let mut total = 0.0;
            let mut count = 0usize;
            for row in raw.rows() {
                for &x in row.slice(ndarray::s![cols.clone()]).iter() {
                    total += x * x;
                    count += 1;
                }
            }
            if count == 0 {
                1.0
            } else {
                (total / count as f64).sqrt()
            }
        };
        let pilot = rms(0..pilot_dim);
        let location = if raw.ncols() > pilot_dim {
            rms(pilot_dim..raw.ncols())
        } else {
            1.0
        };
        if !(pilot > 0.0 && pilot.is_finite() && location > 0.0 && location.is_finite()) {
            return Err(Error::numerical("feature scale is zero or not finite"));
        }
        Ok(FeatureScaling { pilot, location })
    }

    pub fn apply(&self, raw: &mut Array2<f64>, pilot_dim: usize) {
        for mut row in raw.rows_mut() {
            for (i, x) in row.iter_mut().enumerate() {
                *x /= if i < pilot_dim { self.pilot } else { self.location };
            }
        }
    }
}

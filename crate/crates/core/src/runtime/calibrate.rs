//! Range calibration: running min/max per named stage.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IrnnError, Result};
use crate::instrument::float_op;
use crate::quant::{BitWidth, QuantParams};

/// Receives the real values flowing through each named stage.
pub trait Observer {
    fn observe(&mut self, stage: &str, values: &[f64]);
}

/// Discards everything.
pub struct NullObserver;

impl Observer for NullObserver {
    fn observe(&mut self, _stage: &str, _values: &[f64]) {}
}

/// Running minimum and maximum of every stage seen so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RangeObserver {
    ranges: BTreeMap<String, (f64, f64)>,
}

impl Observer for RangeObserver {
    fn observe(&mut self, stage: &str, values: &[f64]) {
        if values.is_empty() {
            return;
        }
        float_op();
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        self.ranges
            .entry(stage.to_string())
            .and_modify(|r| *r = (r.0.min(lo), r.1.max(hi)))
            .or_insert((lo, hi));
    }
}

impl RangeObserver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn range(&self, stage: &str) -> Option<(f64, f64)> {
        self.ranges.get(stage).copied()
    }

    pub fn stages(&self) -> impl Iterator<Item = &str> {
        self.ranges.keys().map(String::as_str)
    }

    /// 8-bit parameters for every expected stage.
    ///
    /// Fails listing every stage that was never observed, or whose range
    /// collapses to `[0, 0]`.
    pub fn finish<S: AsRef<str>>(&self, expected: &[S]) -> Result<StageQParams> {
        let missing: Vec<String> = expected
            .iter()
            .map(|s| s.as_ref())
            .filter(|s| !self.ranges.contains_key(*s))
            .map(String::from)
            .collect();
        if !missing.is_empty() {
            return Err(IrnnError::UnobservedStages(missing));
        }
        let mut out = BTreeMap::new();
        let mut degenerate = Vec::new();
        for s in expected {
            let s = s.as_ref();
            let (lo, hi) = self.ranges[s];
            match QuantParams::new(lo, hi, BitWidth::B8) {
                Ok(qp) => {
                    out.insert(s.to_string(), qp);
                }
                Err(IrnnError::DegenerateRange { .. }) => degenerate.push(s.to_string()),
                Err(e) => return Err(e),
            }
        }
        if !degenerate.is_empty() {
            return Err(IrnnError::DegenerateStages(degenerate));
        }
        Ok(StageQParams(out))
    }
}

/// Calibrated parameters keyed by stage name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageQParams(pub BTreeMap<String, QuantParams>);

impl StageQParams {
    /// The stage's range at the requested bitwidth.
    pub fn get(&self, stage: &str, bits: BitWidth) -> Result<QuantParams> {
        self.0
            .get(stage)
            .ok_or_else(|| IrnnError::MissingQParams(stage.to_string()))?
            .rebit(bits)
    }

    pub fn insert(&mut self, stage: impl Into<String>, qp: QuantParams) {
        self.0.insert(stage.into(), qp);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

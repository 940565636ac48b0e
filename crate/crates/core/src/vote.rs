//! Hierarchical per-voxel vote over an ensemble of label volumes.
//!
//! With `v_c` the number of members voting class `c` at a voxel and `n` the
//! ensemble size, the tree is:
//!
//! ```text
//! P_tumor     = (v1 + v2 + v3) / n        fails → 0
//! P_core      = (v1 + v3) / (v1 + v2 + v3) fails → 2
//! P_enhancing = v3 / (v1 + v3)            fails → 1, passes → 3
//! ```
//!
//! A node passes when its proportion reaches its threshold (`≥`, the default
//! [`Comparison::Inclusive`]) or exceeds it ([`Comparison::Strict`]).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::region_sizes;
use crate::volume::{class, LabelVolume};

/// Votes per class at one voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VoteCounts([u32; class::COUNT]);

impl VoteCounts {
    pub fn new(votes: [u32; class::COUNT]) -> Result<Self> {
        if votes.iter().sum::<u32>() == 0 {
            return Err(Error::InvalidArgument("vote counts must total at least 1".into()));
        }
        Ok(VoteCounts(votes))
    }

    pub fn tally(labels: impl IntoIterator<Item = u8>) -> Result<Self> {
        let mut v = [0u32; class::COUNT];
        for l in labels {
            *v.get_mut(l as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("label {l} not in 0..=3")))? += 1;
        }
        Self::new(v)
    }

    pub fn get(&self, c: u8) -> u32 {
        self.0[c as usize]
    }

    pub fn n(&self) -> u32 {
        self.0.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    /// `proportion ≥ threshold` passes.
    #[default]
    Inclusive,
    /// `proportion > threshold` passes; a threshold of 1 can never pass.
    Strict,
}

impl Comparison {
    fn passes(self, proportion: f64, threshold: f64) -> bool {
        match self {
            Comparison::Inclusive => proportion >= threshold,
            Comparison::Strict => proportion > threshold,
        }
    }
}

impl FromStr for Comparison {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inclusive" => Ok(Comparison::Inclusive),
            "strict" => Ok(Comparison::Strict),
            _ => Err(Error::InvalidArgument(format!(
                "unknown comparison {s:?}; expected inclusive or strict"
            ))),
        }
    }
}

/// Node thresholds, each in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds")]
pub struct Thresholds {
    tumor: f64,
    core: f64,
    enhancing: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawThresholds {
    tumor: f64,
    core: f64,
    enhancing: f64,
}

impl TryFrom<RawThresholds> for Thresholds {
    type Error = Error;

    fn try_from(r: RawThresholds) -> Result<Self> {
        Thresholds::new(r.tumor, r.core, r.enhancing)
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tumor: 0.4,
            core: 0.3,
            enhancing: 0.4,
        }
    }
}

impl Thresholds {
    pub fn new(tumor: f64, core: f64, enhancing: f64) -> Result<Self> {
        for (name, t) in [("tumor", tumor), ("core", core), ("enhancing", enhancing)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidArgument(format!("threshold {name} = {t} outside (0, 1]")));
            }
        }
        Ok(Thresholds { tumor, core, enhancing })
    }

    pub fn tumor(&self) -> f64 {
        self.tumor
    }

    pub fn core(&self) -> f64 {
        self.core
    }

    pub fn enhancing(&self) -> f64 {
        self.enhancing
    }
}

pub fn decide_voxel(votes: VoteCounts, t: &Thresholds, cmp: Comparison) -> u8 {
    let [_, v1, v2, v3] = votes.0.map(f64::from);
    let n = f64::from(votes.n());
    let tumor = v1 + v2 + v3;
    if !cmp.passes(tumor / n, t.tumor) {
        return class::BACKGROUND;
    }
    if !cmp.passes((v1 + v3) / tumor, t.core) {
        return class::EDEMA;
    }
    debug_assert!(v1 + v3 > 0.0, "core node passed with no core votes");
    if !cmp.passes(v3 / (v1 + v3), t.enhancing) {
        class::NECROTIC
    } else {
        class::ENHANCING
    }
}

pub fn merge_segmentations(segmentations: &[LabelVolume], t: &Thresholds, cmp: Comparison) -> Result<LabelVolume> {
    let first = segmentations
        .first()
        .ok_or_else(|| Error::InvalidArgument("merge needs at least one segmentation".into()))?;
    let dims = first.dims();
    if let Some(bad) = segmentations.iter().find(|s| s.dims() != dims) {
        return Err(Error::shape("merge_segmentations", &bad.dims(), &dims));
    }
    let mut out = LabelVolume::zeros(dims);
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let votes = VoteCounts::tally(segmentations.iter().map(|s| s.data()[i]))?;
        *o = decide_voxel(votes, t, cmp);
    }
    Ok(out)
}

/// Merged region sizes at one threshold setting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub thresholds: Thresholds,
    /// Voxel counts of WT, TC, EC.
    pub sizes: [usize; 3],
}

pub fn sensitivity_sweep(
    segmentations: &[LabelVolume],
    grid: &[Thresholds],
    cmp: Comparison,
) -> Result<Vec<SweepPoint>> {
    grid.iter()
        .map(|t| {
            let merged = merge_segmentations(segmentations, t, cmp)?;
            Ok(SweepPoint {
                thresholds: *t,
                sizes: region_sizes(merged.data()),
            })
        })
        .collect()
}

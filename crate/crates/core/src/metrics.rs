//! Dice scores over the three nested tumor regions.

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics, Statistics};

use crate::error::{Error, Result};
use crate::volume::{class, LabelVolume};

/// Evaluation region, a union of label classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Classes 1, 2, 3.
    WholeTumor,
    /// Classes 1, 3.
    TumorCore,
    /// Class 3.
    EnhancingCore,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WholeTumor, Region::TumorCore, Region::EnhancingCore];

    pub fn name(self) -> &'static str {
        match self {
            Region::WholeTumor => "WT",
            Region::TumorCore => "TC",
            Region::EnhancingCore => "EC",
        }
    }

    pub fn classes(self) -> &'static [u8] {
        match self {
            Region::WholeTumor => &[class::NECROTIC, class::EDEMA, class::ENHANCING],
            Region::TumorCore => &[class::NECROTIC, class::ENHANCING],
            Region::EnhancingCore => &[class::ENHANCING],
        }
    }

    pub fn contains(self, label: u8) -> bool {
        self.classes().contains(&label)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub fn binarize(labels: &[u8], region: Region) -> Vec<bool> {
    labels.iter().map(|&l| region.contains(l)).collect()
}

/// Voxel counts of each region, indexed by [`Region::index`].
pub fn region_sizes(labels: &[u8]) -> [usize; 3] {
    let mut sizes = [0; 3];
    for &l in labels {
        for r in Region::ALL {
            sizes[r.index()] += r.contains(l) as usize;
        }
    }
    sizes
}

/// `2|P∩T| / (|P| + |T|)`; 1.0 when both masks are empty.
pub fn dice(prediction: &[bool], truth: &[bool]) -> Result<f64> {
    if prediction.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "dice: mask sizes differ ({} vs {})",
            prediction.len(),
            truth.len()
        )));
    }
    let (mut both, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in prediction.iter().zip(truth) {
        both += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    Ok(if p + t == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + t) as f64
    })
}

/// Dice per region, indexed by [`Region::index`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScores(pub [f64; 3]);

impl RegionScores {
    pub fn get(&self, r: Region) -> f64 {
        self.0[r.index()]
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / 3.0
    }
}

pub fn evaluate(prediction: &LabelVolume, truth: &LabelVolume) -> Result<RegionScores> {
    if prediction.dims() != truth.dims() {
        return Err(Error::InvalidArgument(format!(
            "evaluate: prediction extents {:?} differ from truth {:?}",
            prediction.dims(),
            truth.dims()
        )));
    }
    let mut scores = [0.0; 3];
    for r in Region::ALL {
        scores[r.index()] = dice(&binarize(prediction.data(), r), &binarize(truth.data(), r))?;
    }
    Ok(RegionScores(scores))
}

/// Distribution summary of one region's scores across patients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Quantiles use the median-unbiased estimator (Hyndman-Fan type 8).
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("summarize: no values".into()));
    }
    let mut data = Data::new(values.to_vec());
    Ok(Summary {
        mean: values.iter().mean(),
        std: if values.len() > 1 { values.iter().std_dev() } else { 0.0 },
        median: data.median(),
        q25: data.lower_quartile(),
        q75: data.upper_quartile(),
    })
}

/// Per-patient scores with a summary per region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub patients: Vec<(String, RegionScores)>,
    pub summary: [Summary; 3],
}

impl Evaluation {
    pub fn from_scores(patients: Vec<(String, RegionScores)>) -> Result<Self> {
        let mut summary = Vec::with_capacity(3);
        for r in Region::ALL {
            let v: Vec<f64> = patients.iter().map(|(_, s)| s.get(r)).collect();
            summary.push(summarize(&v)?);
        }
        Ok(Evaluation {
            patients,
            summary: summary.try_into().expect("three regions"),
        })
    }

    pub fn mean(&self, r: Region) -> f64 {
        self.summary[r.index()].mean
    }

    /// Tab-separated per-patient rows followed by one row per statistic.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("patient\tWT\tTC\tEC\n");
        for (id, s) in &self.patients {
            out += &format!("{id}\t{:.6}\t{:.6}\t{:.6}\n", s.0[0], s.0[1], s.0[2]);
        }
        type Stat = fn(&Summary) -> f64;
        let stats: [(&str, Stat); 5] = [
            ("mean", |s| s.mean),
            ("std", |s| s.std),
            ("median", |s| s.median),
            ("q25", |s| s.q25),
            ("q75", |s| s.q75),
        ];
        for (name, f) in stats {
            out += &format!(
                "#{name}\t{:.6}\t{:.6}\t{:.6}\n",
                f(&self.summary[0]),
                f(&self.summary[1]),
                f(&self.summary[2])
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_overlap() {
        let p: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let t: Vec<bool> = (0..20).map(|i| (5..15).contains(&i)).collect();
        assert_eq!(dice(&p, &t).unwrap(), 0.5);
    }

    #[test]
    fn empty_and_disjoint() {
        assert_eq!(dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(dice(&[true, false], &[false, true]).unwrap(), 0.0);
        assert!(dice(&[true], &[true, false]).is_err());
    }

    #[test]
    fn edema_mislabeled_as_necrotic() {
        // 4x4x4: 8 voxels of class 3, 8 of class 1, 16 of class 2, rest 0
        let mut truth = vec![0u8; 64];
        truth[..8].fill(3);
        truth[8..16].fill(1);
        truth[16..32].fill(2);
        let mut pred = truth.clone();
        pred[16..32].fill(1);
        let t = LabelVolume::new([4, 4, 4], truth).unwrap();
        let p = LabelVolume::new([4, 4, 4], pred).unwrap();
        let s = evaluate(&p, &t).unwrap();
        assert_eq!(s.get(Region::WholeTumor), 1.0);
        // TC: |P| = 32, |T| = 16, overlap 16
        assert_eq!(s.get(Region::TumorCore), 2.0 * 16.0 / 48.0);
        assert_eq!(s.get(Region::EnhancingCore), 1.0);
    }

    #[test]
    fn summary_of_known_values() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.median, 3.0);
        assert!((s.std - 2.5f64.sqrt()).abs() < 1e-12);
        assert!(s.q25 < s.median && s.median < s.q75);
        assert_eq!(summarize(&[0.7]).unwrap().std, 0.0);
    }
}

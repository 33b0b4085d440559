use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetError, DatasetManifest, DatasetResult, Label};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Train/val/test fractions. Serialized as a three-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 3]", try_from = "[f64; 3]")]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const HALF_QUARTER_QUARTER: SplitRatios = SplitRatios {
        train: 0.5,
        val: 0.25,
        test: 0.25,
    };

    pub fn new(train: f64, val: f64, test: f64) -> DatasetResult<Self> {
        let arr = [train, val, test];
        let ok = arr.iter().all(|r| r.is_finite() && *r > 0.0) && ((train + val + test) - 1.0).abs() < 1e-9;
        if !ok {
            return Err(DatasetError::InvalidRatios(arr));
        }
        Ok(Self { train, val, test })
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::HALF_QUARTER_QUARTER
    }
}

impl From<SplitRatios> for [f64; 3] {
    fn from(r: SplitRatios) -> Self {
        [r.train, r.val, r.test]
    }
}

impl TryFrom<[f64; 3]> for SplitRatios {
    type Error = DatasetError;

    fn try_from(a: [f64; 3]) -> Result<Self, Self::Error> {
        SplitRatios::new(a[0], a[1], a[2])
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        let [a, b, c] = parts[..] else {
            return Err(format!("expected three comma-separated ratios, got {s:?}"));
        };
        SplitRatios::new(a, b, c).map_err(|e| e.to_string())
    }
}

const ROUNDING_RULE: &str =
    "per class: val = round(n*val), test = round(n*test) (half away from zero), train = remainder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHeader {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub rounding: String,
}

/// Deterministic partition of manifest ids into train/val/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub header: SplitHeader,
    pub split_of: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn seed(&self) -> u64 {
        self.header.seed
    }

    pub fn ratios(&self) -> SplitRatios {
        self.header.ratios
    }

    pub fn get(&self, id: &str) -> Option<Split> {
        self.split_of.get(id).copied()
    }

    /// Ids assigned to `split`, in manifest order.
    pub fn ids<'m>(&self, manifest: &'m DatasetManifest, split: Split) -> Vec<&'m str> {
        manifest
            .records()
            .iter()
            .filter(|r| self.get(&r.id) == Some(split))
            .map(|r| r.id.as_str())
            .collect()
    }

    /// Number of items per (split, class).
    pub fn counts(&self, manifest: &DatasetManifest) -> BTreeMap<(Split, Label), usize> {
        let mut out = BTreeMap::new();
        for r in manifest.records() {
            if let Some(s) = self.get(&r.id) {
                *out.entry((s, r.label)).or_insert(0) += 1;
            }
        }
        out
    }

    /// Check that every manifest id is assigned exactly once and nothing else is.
    pub fn check_covers(&self, manifest: &DatasetManifest) -> DatasetResult<()> {
        if self.split_of.len() != manifest.len() {
            return Err(DatasetError::SplitMismatch(format!(
                "split has {} ids, manifest has {}",
                self.split_of.len(),
                manifest.len()
            )));
        }
        if let Some(r) = manifest.records().iter().find(|r| !self.split_of.contains_key(&r.id)) {
            return Err(DatasetError::SplitMismatch(format!("id {} not assigned", r.id)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes") + "\n"
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn write(&self, path: &Path) -> DatasetResult<()> {
        fs::write(path, self.to_json()).map_err(|source| DatasetError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn read(path: &Path) -> DatasetResult<Self> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_owned(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: path.to_owned(),
            source,
        })
    }
}

/// Partition each class independently according to `ratios`.
///
/// Within a class, ids are sorted, shuffled with a stream derived from
/// `(seed, class)`, and cut into val, test and train blocks. Val and test
/// sizes are `round(n * ratio)`; train takes the remainder, so every block is
/// within one item of its exact share.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> DatasetResult<SplitAssignment> {
    for label in Label::ALL {
        let count = manifest.count(label);
        if count < 4 {
            return Err(DatasetError::ClassTooSmall { class: label, count });
        }
    }
    let mut split_of = BTreeMap::new();
    for label in Label::ALL {
        let mut ids: Vec<&str> = manifest
            .records()
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng::stream(seed, &["split".into(), label.as_str().into()]));
        let n = ids.len();
        let n_val = (n as f64 * ratios.val).round() as usize;
        let n_test = (n as f64 * ratios.test).round() as usize;
        for (i, id) in ids.into_iter().enumerate() {
            let s = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            split_of.insert(id.to_owned(), s);
        }
    }
    Ok(SplitAssignment {
        header: SplitHeader {
            seed,
            ratios,
            rounding: ROUNDING_RULE.to_owned(),
        },
        split_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CxrRecord, Source};
    use proptest::prelude::*;

    pub(crate) fn synthetic_manifest(healthy: usize, tb: usize) -> DatasetManifest {
        let mut recs = Vec::new();
        for (label, n) in [(Label::Healthy, healthy), (Label::Tb, tb)] {
            for i in 0..n {
                let id = format!("{label}-{i:04}");
                recs.push(CxrRecord {
                    image_path: format!("/d/{id}.png").into(),
                    id,
                    label,
                    source: Source::Other,
                    width_px: 10,
                    height_px: 10,
                });
            }
        }
        DatasetManifest::new(recs).unwrap()
    }

    #[test]
    fn exact_division() {
        let m = synthetic_manifest(4, 4);
        let s = stratified_split(&m, SplitRatios::default(), 0).unwrap();
        let c = s.counts(&m);
        for label in Label::ALL {
            assert_eq!(c[&(Split::Train, label)], 2);
            assert_eq!(c[&(Split::Val, label)], 1);
            assert_eq!(c[&(Split::Test, label)], 1);
        }
    }

    #[test]
    fn too_small_class_names_the_class() {
        let m = synthetic_manifest(3, 10);
        let err = stratified_split(&m, SplitRatios::default(), 0).unwrap_err();
        assert!(err.to_string().contains("healthy"), "{err}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let m = synthetic_manifest(216, 334);
        let a = stratified_split(&m, SplitRatios::default(), 17).unwrap();
        let b = stratified_split(&m, SplitRatios::default(), 17).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = stratified_split(&m, SplitRatios::default(), 18).unwrap();
        assert_ne!(a.split_of, c.split_of);
    }

    #[test]
    fn indian_sized_manifest_stratifies_within_one() {
        let m = synthetic_manifest(216, 334);
        let s = stratified_split(&m, SplitRatios::default(), 1).unwrap();
        let c = s.counts(&m);
        assert_eq!(c[&(Split::Test, Label::Healthy)], 54);
        assert_eq!(c[&(Split::Test, Label::Tb)], 84);
        assert_eq!(c[&(Split::Train, Label::Tb)], 166);
    }

    #[test]
    fn ratios_parse_and_reject() {
        let r: SplitRatios = "0.5,0.25,0.25".parse().unwrap();
        assert_eq!(r, SplitRatios::default());
        assert!("0.5,0.5".parse::<SplitRatios>().is_err());
        assert!("0.5,0.3,0.3".parse::<SplitRatios>().is_err());
    }

    #[test]
    fn json_round_trip_and_header() {
        let m = synthetic_manifest(5, 6);
        let s = stratified_split(&m, SplitRatios::default(), 3).unwrap();
        let json = s.to_json();
        assert!(json.contains("\"seed\": 3"));
        assert!(json.contains("\"ratios\": [\n      0.5,"));
        let back: SplitAssignment = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn partition_and_stratification(healthy in 4usize..120, tb in 4usize..120, seed in any::<u64>()) {
            let m = synthetic_manifest(healthy, tb);
            let s = stratified_split(&m, SplitRatios::default(), seed).unwrap();
            s.check_covers(&m).unwrap();
            let total: usize = Split::ALL.iter().map(|&sp| s.ids(&m, sp).len()).sum();
            prop_assert_eq!(total, m.len());
            let c = s.counts(&m);
            for label in Label::ALL {
                let n = m.count(label) as f64;
                for (sp, r) in [(Split::Train, 0.5), (Split::Val, 0.25), (Split::Test, 0.25)] {
                    let got = c.get(&(sp, label)).copied().unwrap_or(0) as f64;
                    prop_assert!((got - n * r).abs() <= 1.0, "{label} {sp}: {got} vs {}", n * r);
                }
            }
        }
    }
}

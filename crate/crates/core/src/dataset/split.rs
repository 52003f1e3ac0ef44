use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    /// Train on every target-class sample, test on the whole provided test set.
    FullTest,
    /// Train on 80% of the target class; test on the held-out 20% plus as many outliers.
    #[serde(rename = "HOLDOUT_80_20")]
    Holdout8020,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "FULL_TEST" => Ok(Protocol::FullTest),
            "HOLDOUT_80_20" => Ok(Protocol::Holdout8020),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample: ImageSample,
    /// `true` for in-class (normal), `false` for novelties.
    pub inlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneClassSplit {
    pub target_class: u32,
    pub protocol: Protocol,
    pub train: Vec<ImageSample>,
    pub test: Vec<LabeledSample>,
}

impl OneClassSplit {
    pub fn num_inliers(&self) -> usize {
        self.test.iter().filter(|t| t.inlier).count()
    }

    pub fn to_file(&self, seed: u64) -> SplitFile {
        SplitFile {
            dataset: None,
            target_class: self.target_class,
            protocol: self.protocol,
            seed,
            train: self.train.iter().map(|s| s.id.clone()).collect(),
            test: self
                .test
                .iter()
                .map(|t| (t.sample.id.clone(), u8::from(t.inlier)))
                .collect(),
        }
    }
}

/// On-disk form of a split: sample ids only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    /// Dataset manifest the ids refer to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub target_class: u32,
    pub protocol: Protocol,
    pub seed: u64,
    pub train: Vec<String>,
    /// `(id, label)` with label 1 = in-class.
    pub test: Vec<(String, u8)>,
}

impl SplitFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: SplitFile = serde_json::from_str(text).map_err(|e| Error::Config(format!("split file: {e}")))?;
        if let Some((id, l)) = file.test.iter().find(|(_, l)| *l > 1) {
            return Err(Error::Config(format!("split file: label {l} for {id} is not binary")));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split file serializes") + "\n"
    }

    /// Rebuilds the split from the pools it was drawn from.
    pub fn resolve(&self, pools: &[&[ImageSample]]) -> Result<OneClassSplit> {
        let mut by_id: BTreeMap<&str, &ImageSample> = BTreeMap::new();
        for pool in pools {
            for s in pool.iter() {
                by_id.insert(s.id.as_str(), s);
            }
        }
        let get = |id: &str| {
            by_id
                .get(id)
                .map(|s| (*s).clone())
                .ok_or_else(|| Error::Config(format!("split references unknown sample {id}")))
        };
        let train = self.train.iter().map(|id| get(id)).collect::<Result<Vec<_>>>()?;
        let test = self
            .test
            .iter()
            .map(|(id, l)| {
                Ok(LabeledSample {
                    sample: get(id)?,
                    inlier: *l == 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OneClassSplit {
            target_class: self.target_class,
            protocol: self.protocol,
            train,
            test,
        })
    }
}

/// Builds a one-class split. Under `HOLDOUT_80_20` both the held-out inliers and the
/// outliers come from `samples`; `test_samples` is only used by `FULL_TEST`.
pub fn make_one_class_split(
    samples: &[ImageSample],
    test_samples: &[ImageSample],
    target: u32,
    protocol: Protocol,
    seed: u64,
) -> Result<OneClassSplit> {
    let targets: Vec<&ImageSample> = samples.iter().filter(|s| s.label == target).collect();
    if targets.is_empty() {
        return Err(Error::Config(format!("target class {target} has no training samples")));
    }
    let split = match protocol {
        Protocol::FullTest => {
            let test: Vec<LabeledSample> = test_samples
                .iter()
                .map(|s| LabeledSample {
                    sample: s.clone(),
                    inlier: s.label == target,
                })
                .collect();
            OneClassSplit {
                target_class: target,
                protocol,
                train: targets.into_iter().cloned().collect(),
                test,
            }
        }
        Protocol::Holdout8020 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut inliers = targets;
            inliers.shuffle(&mut rng);
            let n_train = inliers.len() * 4 / 5;
            let held_out = &inliers[n_train..];
            let mut outliers: Vec<&ImageSample> = samples.iter().filter(|s| s.label != target).collect();
            if outliers.len() < held_out.len() {
                return Err(Error::Config(format!(
                    "need {} out-of-class samples, only {} available",
                    held_out.len(),
                    outliers.len()
                )));
            }
            outliers.shuffle(&mut rng);
            let mut train: Vec<ImageSample> = inliers[..n_train].iter().map(|s| (*s).clone()).collect();
            train.sort_by(|a, b| a.id.cmp(&b.id));
            let mut test: Vec<LabeledSample> = held_out
                .iter()
                .map(|s| LabeledSample {
                    sample: (*s).clone(),
                    inlier: true,
                })
                .chain(outliers[..held_out.len()].iter().map(|s| LabeledSample {
                    sample: (*s).clone(),
                    inlier: false,
                }))
                .collect();
            test.sort_by(|a, b| a.sample.id.cmp(&b.sample.id));
            OneClassSplit {
                target_class: target,
                protocol,
                train,
                test,
            }
        }
    };
    check_split(&split)?;
    Ok(split)
}

fn check_split(split: &OneClassSplit) -> Result<()> {
    let inl = split.num_inliers();
    if split.test.is_empty() || inl == 0 || inl == split.test.len() {
        return Err(Error::Config(format!(
            "test set for class {} must contain both in-class and out-of-class samples ({} of {} in-class)",
            split.target_class,
            inl,
            split.test.len()
        )));
    }
    let train_ids: HashSet<&str> = split.train.iter().map(|s| s.id.as_str()).collect();
    if let Some(t) = split.test.iter().find(|t| train_ids.contains(t.sample.id.as_str())) {
        return Err(Error::Config(format!("sample {} is in both train and test", t.sample.id)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn pool(prefix: &str, counts: &[(u32, usize)]) -> Vec<ImageSample> {
        let mut out = Vec::new();
        for &(label, n) in counts {
            for i in 0..n {
                let v = (i % 7) as f32 / 7.0;
                out.push(
                    ImageSample::new(format!("{prefix}-{label}-{i:04}"), label, Array3::from_elem((1, 2, 2), v)).unwrap(),
                );
            }
        }
        out
    }

    #[test]
    fn holdout_counts() {
        let samples = pool("tr", &[(3, 100), (1, 60), (2, 60)]);
        let split = make_one_class_split(&samples, &[], 3, Protocol::Holdout8020, 7).unwrap();
        assert_eq!(split.train.len(), 80);
        assert_eq!(split.num_inliers(), 20);
        assert_eq!(split.test.len() - split.num_inliers(), 20);
        assert!(split.train.iter().all(|s| s.label == 3));
        assert!(split.test.iter().all(|t| t.inlier == (t.sample.label == 3)));
    }

    #[test]
    fn full_test_passes_through() {
        let samples = pool("tr", &[(0, 10), (1, 10)]);
        let test = pool("te", &[(0, 30), (1, 70)]);
        let split = make_one_class_split(&samples, &test, 0, Protocol::FullTest, 0).unwrap();
        assert_eq!(split.test.len(), 100);
        assert_eq!(split.train.len(), 10);
        assert_eq!(split.num_inliers(), 30);
    }

    #[test]
    fn same_seed_same_split() {
        let samples = pool("tr", &[(0, 50), (1, 50)]);
        let a = make_one_class_split(&samples, &[], 0, Protocol::Holdout8020, 11).unwrap();
        let b = make_one_class_split(&samples, &[], 0, Protocol::Holdout8020, 11).unwrap();
        assert_eq!(a, b);
        let c = make_one_class_split(&samples, &[], 0, Protocol::Holdout8020, 12).unwrap();
        assert_ne!(a.to_file(0).train, c.to_file(0).train);
    }

    #[test]
    fn configuration_errors() {
        let samples = pool("tr", &[(0, 50), (1, 5)]);
        assert!(matches!(
            make_one_class_split(&samples, &[], 9, Protocol::Holdout8020, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_one_class_split(&samples, &[], 0, Protocol::Holdout8020, 0),
            Err(Error::Config(_))
        ));
        // test pool without outliers
        assert!(make_one_class_split(&samples, &pool("te", &[(0, 3)]), 0, Protocol::FullTest, 0).is_err());
    }

    #[test]
    fn split_file_roundtrip_and_resolve() {
        let samples = pool("tr", &[(0, 20), (1, 20)]);
        let split = make_one_class_split(&samples, &[], 0, Protocol::Holdout8020, 3).unwrap();
        let file = split.to_file(3);
        let parsed = SplitFile::parse(&file.to_json()).unwrap();
        assert_eq!(parsed, file);
        assert_eq!(parsed.resolve(&[&samples]).unwrap(), split);
    }
}

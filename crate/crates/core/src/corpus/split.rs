use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, CorpusError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Instance-level partition plus the share of test annotators also seen in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
    /// Percentage of distinct test annotators that also annotate training instances.
    pub annotator_overlap_pct: f64,
}

impl SplitAssignment {
    pub fn get(&self, instance_id: &str) -> Option<Split> {
        self.assignment.get(instance_id).copied()
    }

    pub fn instances(&self, which: Split) -> impl Iterator<Item = &str> {
        self.assignment.iter().filter(move |(_, s)| **s == which).map(|(k, _)| k.as_str())
    }

    pub fn count(&self, which: Split) -> usize {
        self.instances(which).count()
    }

    /// Distinct annotators with at least one record in the given split.
    pub fn annotators<'a>(&self, records: &'a [AnnotationRecord], which: Split) -> BTreeSet<&'a str> {
        records
            .iter()
            .filter(|r| self.get(&r.instance_id) == Some(which))
            .map(|r| r.annotator_id.as_str())
            .collect()
    }
}

/// Partitions instances into train/dev/test by a seeded shuffle.
pub fn split(records: &[AnnotationRecord], seed: u64, fractions: [f64; 3]) -> Result<SplitAssignment, CorpusError> {
    let valid = fractions.iter().all(|f| f.is_finite() && *f > 0.0) && (fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9;
    if !valid {
        return Err(CorpusError::InvalidFractions(fractions));
    }
    if records.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut instances: Vec<&str> = records.iter().map(|r| r.instance_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    instances.shuffle(&mut seed::stream(seed, seed::SPLIT));

    let n = instances.len();
    let n_test = (n as f64 * fractions[2]).round() as usize;
    let n_dev = ((n as f64 * fractions[1]).round() as usize).min(n - n_test);
    let n_train = n - n_test - n_dev;

    let mut assignment = BTreeMap::new();
    for (i, id) in instances.into_iter().enumerate() {
        let which = if i < n_train {
            Split::Train
        } else if i < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        assignment.insert(id.to_string(), which);
    }
    let mut out = SplitAssignment { assignment, annotator_overlap_pct: 0.0 };
    let train = out.annotators(records, Split::Train);
    let test = out.annotators(records, Split::Test);
    if !test.is_empty() {
        out.annotator_overlap_pct = 100.0 * test.intersection(&train).count() as f64 / test.len() as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> Vec<AnnotationRecord> {
        let mut recs = Vec::new();
        for i in 0..10 {
            for a in 0..4 {
                let ann = (i + a * 3) % 7;
                recs.push(AnnotationRecord::new(format!("i{i}"), format!("a{ann}"), 1.0 + ((i + a) % 5) as f64));
            }
        }
        recs
    }

    #[test]
    fn single_instance_lands_in_exactly_one_split() {
        let recs = vec![AnnotationRecord::new("only", "a", 3.0)];
        let s = split(&recs, 1, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!(s.assignment.len(), 1);
        assert_eq!(s.get("only"), Some(Split::Train));
    }

    #[test]
    fn deterministic_given_seed() {
        let recs = fixture();
        assert_eq!(split(&recs, 42, [0.6, 0.2, 0.2]).unwrap(), split(&recs, 42, [0.6, 0.2, 0.2]).unwrap());
    }

    #[test]
    fn overlap_matches_brute_force_recount() {
        let recs = fixture();
        let s = split(&recs, 7, [0.6, 0.2, 0.2]).unwrap();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for r in &recs {
            match s.get(&r.instance_id).unwrap() {
                Split::Train if !train.contains(&r.annotator_id) => train.push(r.annotator_id.clone()),
                Split::Test if !test.contains(&r.annotator_id) => test.push(r.annotator_id.clone()),
                _ => {}
            }
        }
        let shared = test.iter().filter(|a| train.contains(a)).count();
        let expected = 100.0 * shared as f64 / test.len() as f64;
        assert!((s.annotator_overlap_pct - expected).abs() < 1e-12);
    }

    #[test]
    fn invalid_fractions_rejected() {
        let recs = fixture();
        assert!(matches!(split(&recs, 0, [0.5, 0.5, 0.5]), Err(CorpusError::InvalidFractions(_))));
        assert!(matches!(split(&recs, 0, [1.0, 0.0, 0.0]), Err(CorpusError::InvalidFractions(_))));
        assert!(matches!(split(&[], 0, [0.8, 0.1, 0.1]), Err(CorpusError::Empty)));
    }

    proptest! {
        #[test]
        fn assignment_is_a_partition(n in 1usize..60, seed in any::<u64>(), a in 1u32..10, b in 1u32..10, c in 1u32..10) {
            let total = (a + b + c) as f64;
            let fr = [a as f64 / total, b as f64 / total, 1.0 - a as f64 / total - b as f64 / total];
            prop_assume!(fr[2] > 0.0);
            let recs: Vec<_> = (0..n).map(|i| AnnotationRecord::new(format!("i{i}"), "a", 1.0)).collect();
            let s = split(&recs, seed, fr).unwrap();
            prop_assert_eq!(s.assignment.len(), n);
            prop_assert_eq!(s.count(Split::Train) + s.count(Split::Dev) + s.count(Split::Test), n);
        }
    }
}

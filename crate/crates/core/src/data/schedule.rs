use rand::seq::SliceRandom;

use super::Dataset;
use crate::rng;
use crate::{Error, Result};

/// Order in which subjects are absorbed by a sequential run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequentialSchedule {
    /// Row indices into the dataset; a permutation of `0..n`.
    pub order: Vec<usize>,
    /// Group of the subject at each position.
    pub assigned_group: Vec<usize>,
}

impl SequentialSchedule {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Schedule that keeps the dataset's row order.
    pub fn identity(d: &Dataset) -> Self {
        SequentialSchedule {
            order: (0..d.n()).collect(),
            assigned_group: d.rows().iter().map(|r| r.group).collect(),
        }
    }
}

/// Shuffles subjects within each group, then emits them cycling through the
/// groups in schema order, skipping exhausted groups.
pub fn interleave_groups(d: &Dataset, seed: u64) -> Result<SequentialSchedule> {
    let r = d.schema().n_groups();
    let mut per_group: Vec<Vec<usize>> = vec![Vec::new(); r];
    for (i, row) in d.rows().iter().enumerate() {
        per_group[row.group].push(i);
    }
    if let Some(g) = per_group.iter().position(|v| v.is_empty()) {
        return Err(Error::OutOfRange(format!(
            "group `{}` has no subjects",
            d.schema().group_labels()[g]
        )));
    }
    for (g, members) in per_group.iter_mut().enumerate() {
        let mut rng = rng::stream(seed, &[rng::tag::SHUFFLE, g as u64]);
        members.shuffle(&mut rng);
    }
    let mut order = Vec::with_capacity(d.n());
    let mut assigned = Vec::with_capacity(d.n());
    let mut cursor = vec![0usize; r];
    while order.len() < d.n() {
        for g in 0..r {
            if cursor[g] < per_group[g].len() {
                order.push(per_group[g][cursor[g]]);
                assigned.push(g);
                cursor[g] += 1;
            }
        }
    }
    Ok(SequentialSchedule {
        order,
        assigned_group: assigned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Item, ItemKind, OutcomeSchema, Row};
    use proptest::prelude::*;

    fn dataset(counts: &[usize]) -> Dataset {
        let schema = OutcomeSchema::new(
            vec![Item {
                name: "x".into(),
                kind: ItemKind::Continuous,
            }],
            (0..counts.len()).map(|g| format!("G{g}")).collect(),
        )
        .unwrap();
        let mut rows = Vec::new();
        for (g, &c) in counts.iter().enumerate() {
            for i in 0..c {
                rows.push(Row {
                    subject_id: format!("{g}-{i}"),
                    group: g,
                    y: vec![i as f64],
                });
            }
        }
        Dataset::new(schema, rows).unwrap()
    }

    #[test]
    fn three_groups_cycle_in_schema_order() {
        let d = dataset(&[150, 146, 153]);
        let s = interleave_groups(&d, 3).unwrap();
        assert_eq!(&s.assigned_group[..6], &[0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn exhausted_group_is_skipped() {
        let d = dataset(&[2, 1]);
        let s = interleave_groups(&d, 0).unwrap();
        assert_eq!(s.assigned_group, vec![0, 1, 0]);
    }

    #[test]
    fn single_group_is_a_shuffle() {
        let d = dataset(&[20]);
        let s = interleave_groups(&d, 11).unwrap();
        let mut sorted = s.order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(s.order, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn empty_group_is_rejected() {
        let d = dataset(&[3, 0]);
        assert!(interleave_groups(&d, 0).is_err());
    }

    proptest! {
        #[test]
        fn prefixes_are_balanced(counts in proptest::collection::vec(1usize..12, 1..5), seed in any::<u64>()) {
            let d = dataset(&counts);
            let s = interleave_groups(&d, seed).unwrap();
            let mut sorted = s.order.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..d.n()).collect::<Vec<_>>());
            // While no group is exhausted, every prefix of length m*R holds m per group.
            let r = counts.len();
            let min = *counts.iter().min().unwrap();
            for m in 1..=min {
                let prefix = &s.assigned_group[..m * r];
                for g in 0..r {
                    prop_assert_eq!(prefix.iter().filter(|&&x| x == g).count(), m);
                }
            }
        }
    }
}

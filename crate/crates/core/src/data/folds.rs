use rand::seq::SliceRandom;

use super::Dataset;
use crate::rng;
use crate::{Error, Result};

/// Stratified k-fold split. Members of each group are shuffled, then dealt
/// to folds round-robin with the dealing position carried across groups,
/// so fold sizes differ by at most one overall and within each group.
pub fn split_folds(d: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    if k < 2 || k > d.n() {
        return Err(Error::OutOfRange(format!(
            "fold count {k} must lie in [2, {}]",
            d.n()
        )));
    }
    let assignment = fold_assignment(d, k, seed);
    Ok((0..k)
        .map(|f| {
            let test: Vec<usize> = (0..d.n()).filter(|&i| assignment[i] == f).collect();
            let train: Vec<usize> = (0..d.n()).filter(|&i| assignment[i] != f).collect();
            (d.subset(&train), d.subset(&test))
        })
        .collect())
}

pub(crate) fn fold_assignment(d: &Dataset, k: usize, seed: u64) -> Vec<usize> {
    let mut per_group: Vec<Vec<usize>> = vec![Vec::new(); d.schema().n_groups()];
    for (i, row) in d.rows().iter().enumerate() {
        per_group[row.group].push(i);
    }
    let mut assignment = vec![0; d.n()];
    let mut next = 0usize;
    for (g, members) in per_group.iter_mut().enumerate() {
        let mut rng = rng::stream(seed, &[rng::tag::FOLD, g as u64]);
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignment[i] = next % k;
            next += 1;
        }
    }
    assignment
}

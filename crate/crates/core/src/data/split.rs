//! Stratified k-fold partitions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits sample indices into `k` folds stratified by the joint label.
///
/// Samples are grouped by `(grade_a, grade_b)`; each group is ordered by id,
/// shuffled with a stream keyed by the group, and dealt round-robin onto the
/// folds with one counter shared across groups. Fold sizes therefore differ
/// by at most one, every label pair is spread as evenly as its count
/// allows, and the partition of ids does not depend on input order.
pub fn kfold_split<S: AsRef<str>>(ids: &[S], labels: &[(usize, usize)], k: usize, seed: u64) -> Result<Vec<Fold>> {
    let n = labels.len();
    if ids.len() != n {
        return Err(Error::Usage(format!("{} ids for {n} labels", ids.len())));
    }
    if k < 2 {
        return Err(Error::Parameter(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::Parameter(format!("k = {k} exceeds the {n} samples")));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let root = RngState::new(seed);
    let mut fold_of = vec![0usize; n];
    let mut next = 0usize;
    for ((a, b), mut members) in groups {
        members.sort_by(|&x, &y| ids[x].as_ref().cmp(ids[y].as_ref()));
        let mut rng = root.split(((a as u64) << 32) | b as u64);
        rng.shuffle(&mut members);
        for i in members {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == f);
            Fold { train, test }
        })
        .collect())
}

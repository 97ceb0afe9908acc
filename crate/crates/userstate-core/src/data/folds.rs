//! Cross-validation fold construction over labeled manifest entries.

use rand::seq::SliceRandom;

use super::{DataError, Result, SegmentManifest};
use crate::util::{rng_for, stream};

/// One cross-validation split; indices point into the manifest entry list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn folds_from_order(order: &[usize], folds: usize) -> Vec<Fold> {
    let n = order.len();
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut lo = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        let val: Vec<usize> = order[lo..lo + size].to_vec();
        let train: Vec<usize> =
            order[..lo].iter().chain(order[lo + size..].iter()).copied().collect();
        out.push(Fold { train, val });
        lo += size;
    }
    out
}

/// Splits `0..n` into `folds` validation partitions.
///
/// Same contract as [`make_folds`] but over plain indices, for callers that
/// hold examples in memory rather than behind a manifest.
pub fn make_index_folds(n: usize, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(DataError::Config(format!("folds must be >= 2, got {folds}")));
    }
    if n < folds {
        return Err(DataError::TooFewEntries { need: folds, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[stream::FOLDS]));
    Ok(folds_from_order(&order, folds))
}

/// Splits the labeled entries into `folds` validation partitions.
///
/// Partitions are disjoint, cover every labeled entry and differ in size by
/// at most one. The split is a pure function of manifest order and seed.
pub fn make_folds(manifest: &SegmentManifest, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(DataError::Config(format!("folds must be >= 2, got {folds}")));
    }
    let labeled = manifest.labeled_indices();
    if labeled.len() < folds {
        return Err(DataError::TooFewEntries { need: folds, got: labeled.len() });
    }
    let mut order = labeled;
    order.shuffle(&mut rng_for(seed, &[stream::FOLDS]));
    Ok(folds_from_order(&order, folds))
}

/// Like [`make_folds`] but keeps per-class counts balanced across folds.
///
/// Entries are grouped by class, shuffled within each group, and dealt to
/// folds in one continuous round-robin pass, so overall fold sizes still
/// differ by at most one.
pub fn make_stratified_folds(
    manifest: &SegmentManifest,
    folds: usize,
    seed: u64,
) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(DataError::Config(format!("folds must be >= 2, got {folds}")));
    }
    let labeled = manifest.labeled_indices();
    if labeled.len() < folds {
        return Err(DataError::TooFewEntries { need: folds, got: labeled.len() });
    }
    let mut rng = rng_for(seed, &[stream::FOLDS, 1]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); crate::data::ClassLabel::COUNT];
    for idx in labeled {
        let label = manifest.entries[idx].label.expect("labeled index");
        by_class[label.index()].push(idx);
    }
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); folds];
    let mut cursor = 0usize;
    for group in &mut by_class {
        group.shuffle(&mut rng);
        for &idx in group.iter() {
            assignment[cursor % folds].push(idx);
            cursor += 1;
        }
    }
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let val = assignment[f].clone();
        let train: Vec<usize> = assignment
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        out.push(Fold { train, val });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassLabel, SegmentEntry};

    fn manifest_with(n: usize, labeler: impl Fn(usize) -> Option<ClassLabel>) -> SegmentManifest {
        let entries = (0..n)
            .map(|i| SegmentEntry {
                media_id: format!("m{i}"),
                start_s: i as f64,
                end_s: i as f64 + 1.0,
                has_audio: true,
                has_face: true,
                label: labeler(i),
                annotator_agreement: None,
            })
            .collect();
        SegmentManifest { entries }
    }

    fn check_partition(folds: &[Fold], n: usize) {
        let mut seen = vec![0usize; n];
        for f in folds {
            for &i in &f.val {
                seen[i] += 1;
            }
            let mut t: Vec<usize> = f.train.clone();
            t.extend(&f.val);
            t.sort_unstable();
            assert_eq!(t, (0..n).collect::<Vec<_>>(), "train+val must cover everything");
        }
        assert!(seen.iter().all(|&c| c == 1), "validation folds must partition the set");
    }

    #[test]
    fn four_hundred_fifteen_entries_in_five_folds_give_83_each() {
        let m = manifest_with(415, |i| Some(ClassLabel::new(i % 4).unwrap()));
        let folds = make_folds(&m, 5, 9).unwrap();
        for f in &folds {
            assert_eq!(f.val.len(), 83);
            assert_eq!(f.train.len(), 415 - 83);
        }
        check_partition(&folds, 415);
    }

    #[test]
    fn ten_entries_in_five_folds_split_two_each() {
        let m = manifest_with(10, |i| Some(ClassLabel::new(i % 4).unwrap()));
        let folds = make_folds(&m, 5, 1).unwrap();
        assert!(folds.iter().all(|f| f.val.len() == 2));
        check_partition(&folds, 10);
    }

    #[test]
    fn same_seed_reproduces_the_partition() {
        let m = manifest_with(23, |i| Some(ClassLabel::new(i % 4).unwrap()));
        assert_eq!(make_folds(&m, 4, 5).unwrap(), make_folds(&m, 4, 5).unwrap());
        assert_ne!(make_folds(&m, 4, 5).unwrap(), make_folds(&m, 4, 6).unwrap());
    }

    #[test]
    fn too_few_labeled_entries_is_an_error() {
        let m = manifest_with(6, |i| (i < 3).then_some(ClassLabel::AGREEMENT));
        assert!(make_folds(&m, 5, 0).is_err());
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let m = manifest_with(40, |i| Some(ClassLabel::new(i % 4).unwrap()));
        let folds = make_stratified_folds(&m, 5, 3).unwrap();
        check_partition(&folds, 40);
        for f in &folds {
            assert_eq!(f.val.len(), 8);
            for c in ClassLabel::all() {
                let count = f
                    .val
                    .iter()
                    .filter(|&&i| m.entries[i].label == Some(c))
                    .count();
                assert_eq!(count, 2, "class {} unbalanced in fold", c.name());
            }
        }
    }
}

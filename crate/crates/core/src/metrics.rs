//! Top-K ranking metrics and continual-learning summaries.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::SplitView;
use crate::error::{KanError, Result};
use crate::model::CfModel;

/// The `k` best unmasked items, best first. Ties go to the lower item index.
/// `mask[i] == true` excludes item `i`; an empty mask excludes nothing.
pub fn rank_topk(scores: &[f64], mask: &[bool], k: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> =
        (0..scores.len()).filter(|&i| mask.get(i).is_none_or(|m| !m)).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k == 0 {
        return Vec::new();
    }
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, order);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(order);
    candidates
}

/// `|topk ∩ test| / |test|`, looking at the first `k` ranked items.
pub fn recall_at_k(topk: &[usize], test: &[usize], k: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(KanError::EmptyTestSet);
    }
    let relevant: HashSet<usize> = test.iter().copied().collect();
    let hits = topk.iter().take(k).filter(|i| relevant.contains(i)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG: DCG over hit ranks divided by the ideal DCG for
/// `min(k, |test|)` hits.
pub fn ndcg_at_k(topk: &[usize], test: &[usize], k: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(KanError::EmptyTestSet);
    }
    let relevant: HashSet<usize> = test.iter().copied().collect();
    let dcg: f64 = topk
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k.min(relevant.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Ok(dcg / ideal)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RankMetrics {
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub metrics: BTreeMap<usize, RankMetrics>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean metrics keyed by cutoff `K`.
    pub metrics: BTreeMap<usize, RankMetrics>,
    pub users: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_user: Option<Vec<UserMetrics>>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.metrics.get(&k).map(|m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.get(&k).map(|m| m.ndcg)
    }

    /// Aligned text table, one row per cutoff.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<6}{:>10}{:>10}\n", "K", "Recall", "NDCG");
        for (k, m) in &self.metrics {
            let _ = writeln!(out, "{:<6}{:>10.4}{:>10.4}", k, m.recall, m.ndcg);
        }
        let _ = writeln!(out, "users evaluated: {}", self.users);
        out
    }
}

/// Per-user model inputs, masks and held-out targets.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub users: Vec<usize>,
    pub inputs: Vec<Vec<u32>>,
    pub masks: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl EvalSet {
    /// Validation: input and mask are the training items.
    pub fn validation(view: &SplitView) -> Self {
        let mut set = Self::default();
        for u in 0..view.n_users() {
            if view.valid(u).is_empty() {
                continue;
            }
            set.users.push(u);
            set.inputs.push(view.train(u).to_vec());
            set.masks.push(view.train(u).to_vec());
            set.targets.push(view.valid(u).to_vec());
        }
        set
    }

    /// Test: input and mask are the training plus validation items.
    pub fn test(view: &SplitView) -> Self {
        let mut set = Self::default();
        for u in 0..view.n_users() {
            if view.test(u).is_empty() {
                continue;
            }
            let mut seen: Vec<u32> = view.train(u).iter().chain(view.valid(u)).copied().collect();
            seen.sort_unstable();
            set.users.push(u);
            set.inputs.push(seen.clone());
            set.masks.push(seen);
            set.targets.push(view.test(u).to_vec());
        }
        set
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Dense `(rows, n_items)` matrix with ones at the listed items.
pub fn multi_hot(rows: &[&[u32]], n_items: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), n_items));
    for (r, items) in rows.iter().enumerate() {
        for &i in items.iter() {
            m[[r, i as usize]] = 1.0;
        }
    }
    m
}

/// Ranks every user in `set` with `model` and averages Recall@K and NDCG@K.
/// Users with empty targets are skipped.
pub fn evaluate(model: &CfModel, set: &EvalSet, ks: &[usize], batch_size: usize, keep_per_user: bool) -> Result<EvalReport> {
    let n_items = model.item_count();
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut sums: BTreeMap<usize, RankMetrics> = ks.iter().map(|k| (*k, RankMetrics::default())).collect();
    let mut per_user = keep_per_user.then(Vec::new);
    let mut counted = 0usize;
    let batch_size = batch_size.max(1);
    let mut mask = vec![false; n_items];

    for start in (0..set.len()).step_by(batch_size) {
        let end = (start + batch_size).min(set.len());
        let rows: Vec<&[u32]> = set.inputs[start..end].iter().map(Vec::as_slice).collect();
        let scores = model.scores(multi_hot(&rows, n_items).view())?;
        for (r, idx) in (start..end).enumerate() {
            let target: Vec<usize> = set.targets[idx].iter().map(|i| *i as usize).collect();
            if target.is_empty() {
                continue;
            }
            for &i in &set.masks[idx] {
                mask[i as usize] = true;
            }
            let row = scores.row(r);
            let top = rank_topk(row.as_slice().expect("standard layout"), &mask, max_k);
            for &i in &set.masks[idx] {
                mask[i as usize] = false;
            }
            let mut mine = BTreeMap::new();
            for &k in ks {
                let m = RankMetrics { recall: recall_at_k(&top, &target, k)?, ndcg: ndcg_at_k(&top, &target, k)? };
                let s = sums.get_mut(&k).expect("initialized");
                s.recall += m.recall;
                s.ndcg += m.ndcg;
                mine.insert(k, m);
            }
            if let Some(p) = per_user.as_mut() {
                p.push(UserMetrics { user: set.users[idx], metrics: mine });
            }
            counted += 1;
        }
    }
    let denom = counted.max(1) as f64;
    for m in sums.values_mut() {
        m.recall /= denom;
        m.ndcg /= denom;
    }
    Ok(EvalReport { metrics: sums, users: counted, per_user })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualReport {
    /// `a[i][j]`: performance on block `j + 1` after training on block `i + 1`,
    /// for `j <= i`.
    pub a: Vec<Vec<f64>>,
    pub la: f64,
    pub ra: f64,
    pub hmean: f64,
}

impl ContinualReport {
    pub fn to_table(&self) -> String {
        let k = self.a.len();
        let mut out = format!("{:<10}", "after\\on");
        for j in 1..=k {
            let _ = write!(out, "{:>10}", format!("D{j}"));
        }
        out.push('\n');
        for (i, row) in self.a.iter().enumerate() {
            let _ = write!(out, "{:<10}", format!("D{}", i + 1));
            for v in row.iter().take(i + 1) {
                let _ = write!(out, "{v:>10.4}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "LA {:.4}  RA {:.4}  H-mean {:.4}", self.la, self.ra, self.hmean);
        out
    }
}

/// LA (mean diagonal), RA (mean last row) and their harmonic mean over the
/// first `k` blocks. Entries above the diagonal are never read.
pub fn continual_metrics(a: &[Vec<f64>], k: usize) -> Result<ContinualReport> {
    if k == 0 {
        return Err(KanError::InvalidArgument("block count must be >= 1".into()));
    }
    for i in 0..k {
        let row = a.get(i).ok_or(KanError::IncompleteMatrix { row: i, col: 0 })?;
        if row.len() <= i {
            return Err(KanError::IncompleteMatrix { row: i, col: row.len() });
        }
    }
    let la = (0..k).map(|i| a[i][i]).sum::<f64>() / k as f64;
    let ra = (0..k).map(|j| a[k - 1][j]).sum::<f64>() / k as f64;
    let hmean = harmonic_mean(la, ra);
    let a = (0..k).map(|i| a[i][..=i].to_vec()).collect();
    Ok(ContinualReport { a, la, ra, hmean })
}

pub fn harmonic_mean(x: f64, y: f64) -> f64 {
    if x + y == 0.0 {
        0.0
    } else {
        2.0 * x * y / (x + y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_order_mask_and_ties() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5];
        assert_eq!(rank_topk(&scores, &[], 3), vec![0, 1, 2]);
        let mask = [true, false, false, false, false];
        assert_eq!(rank_topk(&scores, &mask, 3), vec![1, 2, 3]);
        assert_eq!(rank_topk(&[1.0; 6], &[], 4), vec![0, 1, 2, 3]);
        assert_eq!(rank_topk(&scores, &[true, true, true, false, false], 4), vec![3, 4]);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(recall_at_k(&[4, 1, 2], &[4], 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[4, 1, 2], &[4], 10).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[1, 2, 7], &[7], 3).unwrap(), 1.0);
        assert!((ndcg_at_k(&[1, 2, 7], &[7], 3).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(recall_at_k(&[1], &[], 1), Err(KanError::EmptyTestSet)));
        assert!(matches!(ndcg_at_k(&[1], &[], 1), Err(KanError::EmptyTestSet)));
    }

    #[test]
    fn continual_examples() {
        let r = continual_metrics(&[vec![0.2], vec![0.1, 0.4]], 2).unwrap();
        assert!((r.la - 0.3).abs() < 1e-15);
        assert!((r.ra - 0.25).abs() < 1e-15);
        assert!((r.hmean - 2.0 * 0.3 * 0.25 / 0.55).abs() < 1e-15);

        let c = vec![vec![0.3; 3]; 3];
        let r = continual_metrics(&c, 3).unwrap();
        assert!((r.la - 0.3).abs() < 1e-15 && (r.ra - 0.3).abs() < 1e-15 && (r.hmean - 0.3).abs() < 1e-15);

        assert!(matches!(continual_metrics(&[vec![0.1], vec![0.2]], 2), Err(KanError::IncompleteMatrix { .. })));
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn upper_triangle_is_ignored() {
        let a = vec![vec![0.2, 9.0, 9.0], vec![0.1, 0.4, 9.0], vec![0.3, 0.2, 0.5]];
        let mut b = a.clone();
        b[0][2] = -4.0;
        b[1][2] = 123.0;
        assert_eq!(continual_metrics(&a, 3).unwrap(), continual_metrics(&b, 3).unwrap());
    }
}

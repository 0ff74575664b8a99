//! Ranking and retrieval metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidates of one query, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query: String,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    /// Larger scores first (similarities).
    Descending,
    /// Smaller scores first (distances).
    Ascending,
}

/// Sorts candidates by score; equal scores fall back to ascending candidate id.
pub fn rank(query: &str, ids: &[String], scores: &[f64], order: Order) -> RankedResult {
    assert_eq!(ids.len(), scores.len(), "one score per candidate");
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by(|&a, &b| {
        let by_score = match order {
            Order::Descending => scores[b].total_cmp(&scores[a]),
            Order::Ascending => scores[a].total_cmp(&scores[b]),
        };
        by_score.then_with(|| ids[a].cmp(&ids[b]))
    });
    RankedResult {
        query: query.to_string(),
        candidates: idx.iter().map(|&i| ids[i].clone()).collect(),
        scores: idx.iter().map(|&i| scores[i]).collect(),
    }
}

/// Mean over classes of per-class Top-P accuracy, one value per entry of `ps`.
/// Each class weighs the same however many queries it has.
pub fn top_p_per_class(rankings: &[RankedResult], truths: &[String], ps: &[usize]) -> Result<Vec<f64>> {
    if rankings.len() != truths.len() {
        return Err(Error::Argument("one truth per ranking required".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Argument("no queries to score".into()));
    }
    let mut classes: BTreeMap<&str, (usize, Vec<usize>)> = BTreeMap::new();
    for (r, truth) in rankings.iter().zip(truths) {
        let pos = r.candidates.iter().position(|c| c == truth).ok_or_else(|| {
            Error::Argument(format!("truth {truth} of query {} is not among its candidates", r.query))
        })?;
        let entry = classes.entry(truth).or_insert_with(|| (0, vec![0; ps.len()]));
        entry.0 += 1;
        for (hits, &p) in entry.1.iter_mut().zip(ps) {
            *hits += usize::from(pos < p);
        }
    }
    let n = classes.len() as f64;
    Ok((0..ps.len())
        .map(|k| classes.values().map(|(count, hits)| hits[k] as f64 / *count as f64).sum::<f64>() / n)
        .collect())
}

/// Rank (0-based) of the first relevant candidate, if any.
fn first_hit(r: &RankedResult, relevant: &BTreeSet<String>) -> Option<usize> {
    r.candidates.iter().position(|c| relevant.contains(c))
}

/// Cumulative match characteristic at each `P`. Queries without relevant
/// candidates are left out; `None` when no query remains.
pub fn cmc(rankings: &[RankedResult], relevant: &[BTreeSet<String>], ps: &[usize]) -> Vec<Option<f64>> {
    let firsts: Vec<usize> = rankings
        .iter()
        .zip(relevant)
        .filter(|(_, rel)| !rel.is_empty())
        .map(|(r, rel)| first_hit(r, rel).unwrap_or(usize::MAX))
        .collect();
    ps.iter()
        .map(|&p| {
            (!firsts.is_empty()).then(|| firsts.iter().filter(|&&f| f < p).count() as f64 / firsts.len() as f64)
        })
        .collect()
}

/// Average precision of one ranking: the mean of precision at the rank of
/// each relevant item. Relevant items missing from the ranking count as zero.
pub fn average_precision(r: &RankedResult, relevant: &BTreeSet<String>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, c) in r.candidates.iter().enumerate() {
        if relevant.contains(c) {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    Some(sum / relevant.len() as f64)
}

/// Mean average precision over queries with a non-empty relevant set.
pub fn mean_average_precision(rankings: &[RankedResult], relevant: &[BTreeSet<String>]) -> Option<f64> {
    let aps: Vec<f64> = rankings
        .iter()
        .zip(relevant)
        .filter_map(|(r, rel)| average_precision(r, rel))
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn ranking(q: &str, order: &[&str]) -> RankedResult {
        RankedResult {
            query: q.into(),
            candidates: ids(order),
            scores: (0..order.len()).map(|i| -(i as f64)).collect(),
        }
    }

    #[test]
    fn ties_break_by_candidate_id() {
        let r = rank("q", &ids(&["c", "a", "b"]), &[0.5, 0.5, 0.9], Order::Descending);
        assert_eq!(r.candidates, ids(&["b", "a", "c"]));
        let r = rank("q", &ids(&["c", "a", "b"]), &[0.1, 0.1, 0.0], Order::Ascending);
        assert_eq!(r.candidates, ids(&["b", "a", "c"]));
    }

    #[test]
    fn per_class_differs_from_pooled() {
        let rankings = vec![ranking("1", &["A", "B"]), ranking("2", &["A", "B"]), ranking("3", &["A", "B"])];
        let truths = ids(&["A", "A", "B"]);
        let acc = top_p_per_class(&rankings, &truths, &[1, 2]).unwrap();
        assert_eq!(acc, vec![0.5, 1.0]);
    }

    #[test]
    fn perfect_and_exhaustive_windows() {
        let rankings = vec![ranking("1", &["A", "B", "C"]), ranking("2", &["B", "A", "C"])];
        assert_eq!(top_p_per_class(&rankings, &ids(&["A", "B"]), &[1, 5]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(top_p_per_class(&rankings, &ids(&["C", "C"]), &[3]).unwrap(), vec![1.0]);
        assert!(top_p_per_class(&rankings, &ids(&["Z", "A"]), &[1]).is_err());
    }

    #[test]
    fn cmc_examples() {
        let rankings = vec![ranking("1", &["x", "b", "c"]), ranking("2", &["a", "b", "y"])];
        let rel = vec![set(&["x"]), set(&["y"])];
        assert_eq!(cmc(&rankings, &rel, &[1, 5]), vec![Some(0.5), Some(1.0)]);
        assert_eq!(cmc(&rankings, &[set(&[]), set(&[])], &[1]), vec![None]);
        let with_empty = vec![set(&["x"]), set(&[])];
        assert_eq!(cmc(&rankings, &with_empty, &[1]), vec![Some(1.0)]);
    }

    #[test]
    fn map_examples() {
        let r = ranking("q", &["a", "b", "c"]);
        let ap = average_precision(&r, &set(&["a", "c"])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert!((0.833333 - ap).abs() < 1e-6);
        assert_eq!(mean_average_precision(std::slice::from_ref(&r), &[set(&["a", "b"])]), Some(1.0));
        let r = ranking("q", &["a", "b", "c", "d"]);
        assert_eq!(average_precision(&r, &set(&["d"])), Some(0.25));
        assert_eq!(mean_average_precision(&[r], &[set(&[])]), None);
    }
}

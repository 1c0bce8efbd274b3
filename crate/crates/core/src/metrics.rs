//! Ranking metrics: average precision, precision@K and accuracy@K.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::retrieval::RankingResult;

pub const METRICS_HEADER: &str = "# sbir-metrics v1";

/// Mean over relevant items of precision at their rank. With a cutoff only
/// the first `cutoff` ranks count, and the mean is over the relevant items
/// found there (0 if none). `None` when `rel` holds no relevant item.
pub fn average_precision(rel: &[bool], cutoff: Option<usize>) -> Option<f64> {
    if !rel.iter().any(|&r| r) {
        return None;
    }
    let limit = cutoff.map_or(rel.len(), |c| c.min(rel.len()));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (i, &r) in rel[..limit].iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

/// Fraction of relevant items among the first `min(k, len)` ranks.
pub fn precision_at(rel: &[bool], k: usize) -> f64 {
    let k = k.min(rel.len());
    if k == 0 {
        return 0.0;
    }
    rel[..k].iter().filter(|&&r| r).count() as f64 / k as f64
}

pub fn hit_at(rel: &[bool], k: usize) -> bool {
    rel[..k.min(rel.len())].iter().any(|&r| r)
}

/// Expected AP of a uniformly random ranking of `n` items with `r`
/// relevant:
/// `(r−1)/(n−1) + H_n (n−r) / (n (n−1))`, and `1` when `n = 1`.
pub fn expected_random_ap(n: usize, r: usize) -> f64 {
    assert!(r >= 1 && r <= n, "need 1 ≤ r ≤ n");
    if n == 1 {
        return 1.0;
    }
    let (nf, rf) = (n as f64, r as f64);
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    (rf - 1.0) / (nf - 1.0) + h * (nf - rf) / (nf * (nf - 1.0))
}

/// Relevance flags of a ranking in rank order.
pub fn relevance_flags(r: &RankingResult, relevant: &dyn Fn(u64, u64) -> bool) -> Vec<bool> {
    r.gallery_ids.iter().map(|&g| relevant(r.query_id, g)).collect()
}

pub fn mean_average_precision(
    rankings: &[RankingResult],
    relevant: &dyn Fn(u64, u64) -> bool,
    cutoff: Option<usize>,
) -> Result<(f64, Vec<f64>)> {
    if rankings.is_empty() {
        return Err(Error::invalid("no rankings"));
    }
    let mut aps = Vec::with_capacity(rankings.len());
    for r in rankings {
        let ap = average_precision(&relevance_flags(r, relevant), cutoff)
            .ok_or_else(|| Error::invalid(format!("query {} has no relevant gallery item", r.query_id)))?;
        aps.push(ap);
    }
    Ok((aps.iter().sum::<f64>() / aps.len() as f64, aps))
}

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::invalid("K must be at least 1"));
    }
    Ok(())
}

pub fn precision_at_k(rankings: &[RankingResult], relevant: &dyn Fn(u64, u64) -> bool, k: usize) -> Result<f64> {
    check_k(k)?;
    if rankings.is_empty() {
        return Err(Error::invalid("no rankings"));
    }
    let sum: f64 = rankings.iter().map(|r| precision_at(&relevance_flags(r, relevant), k)).sum();
    Ok(sum / rankings.len() as f64)
}

pub fn accuracy_at_k(rankings: &[RankingResult], relevant: &dyn Fn(u64, u64) -> bool, k: usize) -> Result<f64> {
    check_k(k)?;
    if rankings.is_empty() {
        return Err(Error::invalid("no rankings"));
    }
    let hits = rankings.iter().filter(|r| hit_at(&relevance_flags(r, relevant), k)).count();
    Ok(hits as f64 / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub map: f64,
    pub prec_at: BTreeMap<usize, f64>,
    pub acc_at: BTreeMap<usize, f64>,
    /// `(query_id, AP)` in ranking order.
    pub per_query: Vec<(u64, f64)>,
}

impl MetricReport {
    pub fn compute(
        rankings: &[RankingResult],
        relevant: &dyn Fn(u64, u64) -> bool,
        ks: &[usize],
        cutoff: Option<usize>,
    ) -> Result<Self> {
        let (map, aps) = mean_average_precision(rankings, relevant, cutoff)?;
        let mut prec_at = BTreeMap::new();
        let mut acc_at = BTreeMap::new();
        for &k in ks {
            prec_at.insert(k, precision_at_k(rankings, relevant, k)?);
            acc_at.insert(k, accuracy_at_k(rankings, relevant, k)?);
        }
        Ok(Self {
            map,
            prec_at,
            acc_at,
            per_query: rankings.iter().map(|r| r.query_id).zip(aps).collect(),
        })
    }

    /// `key = value` lines after a version header.
    pub fn to_text(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\nqueries = {}\nmap = {:.6}\n", self.per_query.len(), self.map);
        for (k, v) in &self.prec_at {
            let _ = writeln!(s, "prec@{k} = {v:.6}");
        }
        for (k, v) in &self.acc_at {
            let _ = writeln!(s, "acc@{k} = {v:.6}");
        }
        for (q, ap) in &self.per_query {
            let _ = writeln!(s, "ap.{q} = {ap:.6}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_average_precision() {
        assert_eq!(average_precision(&[true, true, false], None), Some(1.0));
        assert_eq!(average_precision(&[false, true], None), Some(0.5));
        assert_eq!(average_precision(&[false, false], None), None);
        assert_eq!(average_precision(&[false, false, true], Some(2)), Some(0.0));
    }

    #[test]
    fn precision_truncates_k() {
        assert_eq!(precision_at(&[true, false], 10), 0.5);
        assert!(hit_at(&[false, false, true], 3));
        assert!(!hit_at(&[false, false, true], 2));
    }

    #[test]
    fn random_ap_closed_form_matches_enumeration() {
        // Average AP over every placement of r relevant items among n ranks.
        for (n, r) in [(4usize, 1usize), (5, 2), (6, 3), (7, 7)] {
            let (mut sum, mut count) = (0.0, 0);
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize != r {
                    continue;
                }
                let rel: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                sum += average_precision(&rel, None).unwrap();
                count += 1;
            }
            let exact = sum / f64::from(count);
            assert!((exact - expected_random_ap(n, r)).abs() < 1e-12, "n={n} r={r}");
        }
        assert!((expected_random_ap(40, 10) - 0.3131).abs() < 1e-3);
    }
}

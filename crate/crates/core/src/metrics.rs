//! Ranking metrics over per-step ground-truth ranks: recall at 1 and 3, mean
//! rank, and mean reciprocal rank, plus a breakdown by button-count bucket.
//!
//! A report keeps the full rank histogram, so bucket reports merge into the
//! overall report without rounding.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_rational::BigRational;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Button-count buckets given by inclusive upper bounds; the last bucket is
/// open-ended. `[10, 20]` yields `<= 10`, `11..=20`, `> 20`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketScheme {
    pub bounds: Vec<usize>,
}

impl Default for BucketScheme {
    fn default() -> Self {
        Self { bounds: vec![10, 20] }
    }
}

impl BucketScheme {
    pub fn validate(&self) -> Result<()> {
        if self.bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "bucket bounds must be strictly increasing, got {:?}",
                self.bounds
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bounds.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bucket_of(&self, button_count: usize) -> usize {
        self.bounds
            .iter()
            .position(|&b| button_count <= b)
            .unwrap_or(self.bounds.len())
    }

    pub fn label(&self, bucket: usize) -> String {
        let lower = bucket.checked_sub(1).map(|i| self.bounds[i]);
        match (lower, self.bounds.get(bucket)) {
            (None, Some(hi)) => format!("# of buttons <= {hi}"),
            (Some(lo), Some(hi)) => format!("{lo} < # of buttons <= {hi}"),
            (Some(lo), None) => format!("{lo} < # of buttons"),
            (None, None) => "all buttons".to_string(),
        }
    }

    /// Inclusive button-count range of a bucket; `None` upper means open.
    pub fn range(&self, bucket: usize) -> (usize, Option<usize>) {
        let lo = bucket.checked_sub(1).map_or(0, |i| self.bounds[i] + 1);
        (lo, self.bounds.get(bucket).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRecord {
    pub sample_id: String,
    pub step: usize,
    pub candidates: usize,
    /// 1-based rank of the ground truth.
    pub rank: usize,
    pub bucket: usize,
}

/// Rank of `truth` among `scores`: one plus the number of strictly higher
/// scores plus the number of equal scores at a lower index.
pub fn rank_of_truth(scores: &[f64], truth: usize) -> Result<usize> {
    let Some(&target) = scores.get(truth) else {
        return Err(Error::Index(format!(
            "truth {truth} out of range for {} scores",
            scores.len()
        )));
    };
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(k, &s)| s > target || (s == target && k < truth))
        .count();
    Ok(1 + above)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: u64,
    pub r_at_1: f64,
    pub r_at_3: f64,
    pub mr: f64,
    pub mrr: f64,
    /// rank -> number of records with that rank
    pub rank_histogram: BTreeMap<usize, u64>,
}

impl MetricsReport {
    pub fn from_histogram(rank_histogram: BTreeMap<usize, u64>) -> Result<Self> {
        let count: u64 = rank_histogram.values().sum();
        if count == 0 {
            return Err(Error::Contract("metrics need at least one rank record".into()));
        }
        if rank_histogram.contains_key(&0) {
            return Err(Error::Contract("ranks are 1-based".into()));
        }
        let n = count as f64;
        let hits = |k: usize| -> u64 {
            rank_histogram
                .iter()
                .filter(|&(&r, _)| r <= k)
                .map(|(_, &c)| c)
                .sum()
        };
        let rank_sum: u64 = rank_histogram.iter().map(|(&r, &c)| r as u64 * c).sum();
        // Exact sum, rounded once, so the value is independent of merge order.
        let reciprocal_sum: BigRational = rank_histogram
            .iter()
            .map(|(&r, &c)| BigRational::new(c.into(), r.into()))
            .sum();
        let mrr = (reciprocal_sum / BigRational::from_integer(count.into()))
            .to_f64()
            .expect("bounded ratio converts");
        let report = Self {
            count,
            r_at_1: hits(1) as f64 / n,
            r_at_3: hits(3) as f64 / n,
            mr: rank_sum as f64 / n,
            mrr,
            rank_histogram,
        };
        debug_assert!(report.r_at_1 <= report.r_at_3);
        debug_assert!(report.mrr * (1.0 + 1e-12) >= 1.0 / report.mr);
        Ok(report)
    }

    pub fn hits_at(&self, k: usize) -> u64 {
        self.rank_histogram
            .iter()
            .filter(|&(&r, _)| r <= k)
            .map(|(_, &c)| c)
            .sum()
    }

    pub fn rank_sum(&self) -> u64 {
        self.rank_histogram.iter().map(|(&r, &c)| r as u64 * c).sum()
    }
}

pub fn compute_metrics(records: &[RankRecord]) -> Result<MetricsReport> {
    let mut hist = BTreeMap::new();
    for r in records {
        if r.rank == 0 || r.rank > r.candidates {
            return Err(Error::Contract(format!(
                "sample {} step {}: rank {} outside 1..={}",
                r.sample_id, r.step, r.rank, r.candidates
            )));
        }
        *hist.entry(r.rank).or_insert(0) += 1;
    }
    MetricsReport::from_histogram(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: usize,
    pub label: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    /// Nonempty buckets, in bucket order.
    pub rows: Vec<BucketRow>,
    /// Labels of buckets with no records.
    pub empty: Vec<String>,
    pub overall: MetricsReport,
}

pub fn bucket_report(records: &[RankRecord], scheme: &BucketScheme) -> Result<BucketReport> {
    let overall = compute_metrics(records)?;
    let mut rows = Vec::new();
    let mut empty = Vec::new();
    for bucket in 0..scheme.len() {
        let subset: Vec<RankRecord> = records
            .iter()
            .filter(|r| r.bucket == bucket)
            .cloned()
            .collect();
        let label = scheme.label(bucket);
        if subset.is_empty() {
            log::info!("bucket {label:?} has no records; omitted");
            empty.push(label);
            continue;
        }
        rows.push(BucketRow {
            bucket,
            label,
            report: compute_metrics(&subset)?,
        });
    }
    if let Some(r) = records.iter().find(|r| r.bucket >= scheme.len()) {
        return Err(Error::Contract(format!(
            "record for {} has bucket {} outside the scheme",
            r.sample_id, r.bucket
        )));
    }
    Ok(BucketReport {
        rows,
        empty,
        overall,
    })
}

pub const ALL_SAMPLES: &str = "all samples";

fn grid_line(out: &mut String, label: &str, r: &MetricsReport) {
    let _ = writeln!(
        out,
        "{label:<28} {:>6.4} {:>6.4} {:>7.4} {:>6.4} {:>6}",
        r.r_at_1, r.r_at_3, r.mr, r.mrr, r.count
    );
}

impl BucketReport {
    /// Plain-text report: the four overall values, then one row per nonempty
    /// bucket and a final `all samples` row.
    pub fn render(&self) -> String {
        let o = &self.overall;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "R@1 {:.4}  R@3 {:.4}  MR {:.4}  MRR {:.4}  (n={})",
            o.r_at_1, o.r_at_3, o.mr, o.mrr, o.count
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<28} {:>6} {:>6} {:>7} {:>6} {:>6}",
            "subset", "R@1", "R@3", "MR", "MRR", "n"
        );
        for row in &self.rows {
            grid_line(&mut out, &row.label, &row.report);
        }
        grid_line(&mut out, ALL_SAMPLES, o);
        for label in &self.empty {
            let _ = writeln!(out, "(no records: {label})");
        }
        out
    }
}

/// Side-by-side comparison of labelled runs, one row per run.
pub fn comparison_table(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>6} {:>6} {:>7} {:>6} {:>6}",
        "step network", "R@1", "R@3", "MR", "MRR", "n"
    );
    for (label, r) in rows {
        grid_line(&mut out, label, r);
    }
    out
}

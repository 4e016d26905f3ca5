//! Grouped rank correlation between a metric and human judgments.
//!
//! Items are shuffled into groups with a seeded RNG, each group gets one
//! score per source, and the two group-score vectors are compared with
//! Spearman's rho and Kendall's tau-b. Results are averaged over seeds.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scoring::{ConfusionCounts, MetricKind, Scope, ScoreReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorrelationError {
    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("cannot split {items} items into {groups} groups")]
    TooManyGroups { groups: usize, items: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("item ids differ: only in metric {only_in_metric:?}, only in human {only_in_human:?}")]
    Alignment { only_in_metric: Vec<String>, only_in_human: Vec<String> },
    #[error("no seeds given")]
    NoSeeds,
    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<CorrelationError>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub seed: u64,
    pub n_groups: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl Grouping {
    /// Members of each group, in shuffled order.
    pub fn groups(&self) -> Vec<Vec<&str>> {
        let mut groups = vec![Vec::new(); self.n_groups];
        for (id, &g) in &self.assignment {
            groups[g].push(id.as_str());
        }
        groups
    }
}

/// Seeded shuffle followed by round-robin assignment, so group sizes differ
/// by at most one.
pub fn group_items(item_ids: &[String], n_groups: usize, seed: u64) -> Result<Grouping, CorrelationError> {
    if n_groups < 2 {
        return Err(CorrelationError::TooFewGroups(n_groups));
    }
    if n_groups > item_ids.len() {
        return Err(CorrelationError::TooManyGroups { groups: n_groups, items: item_ids.len() });
    }
    let mut shuffled: Vec<&String> = item_ids.iter().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = shuffled.into_iter().enumerate().map(|(k, id)| (id.clone(), k % n_groups)).collect();
    Ok(Grouping { seed, n_groups, assignment })
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), CorrelationError> {
    if a.len() != b.len() {
        return Err(CorrelationError::Degenerate(format!("lengths differ ({} vs {})", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(CorrelationError::Degenerate("need at least 2 observations".into()));
    }
    for (name, v) in [("first", a), ("second", b)] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CorrelationError::Degenerate(format!("{name} input has a non-finite value")));
        }
        if v.iter().all(|x| *x == v[0]) {
            return Err(CorrelationError::Degenerate(format!("{name} input is constant")));
        }
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1 ..= end.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64, CorrelationError> {
    check_pair(a, b)?;
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Kendall's tau-b: `(C - D) / sqrt((n0 - ta)(n0 - tb))` where `ta` and `tb`
/// count pairs tied in `a` and in `b`.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64, CorrelationError> {
    check_pair(a, b)?;
    let n = a.len();
    let (mut concordant, mut discordant, mut tied_a, mut tied_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in (i + 1)..n {
            let da = a[i].partial_cmp(&a[j]).expect("finite") as i64;
            let db = b[i].partial_cmp(&b[j]).expect("finite") as i64;
            if da == 0 {
                tied_a += 1;
            }
            if db == 0 {
                tied_b += 1;
            }
            match da * db {
                p if p > 0 => concordant += 1,
                p if p < 0 => discordant += 1,
                _ => {}
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - tied_a) * (n0 - tied_b)) as f64).sqrt();
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

/// Per-item scores for one side of a correlation.
#[derive(Debug, Clone, PartialEq)]
pub enum ItemScores {
    /// Group score is the mean of member scores.
    Scalar(BTreeMap<String, f64>),
    /// Group score is `metric` computed from the pooled member counts
    /// (undefined counts as 0).
    Counts { counts: BTreeMap<String, ConfusionCounts>, metric: MetricKind },
}

impl ItemScores {
    pub fn ids(&self) -> BTreeSet<&str> {
        match self {
            ItemScores::Scalar(m) => m.keys().map(String::as_str).collect(),
            ItemScores::Counts { counts, .. } => counts.keys().map(String::as_str).collect(),
        }
    }

    pub fn group_score(&self, members: &[&str]) -> f64 {
        match self {
            ItemScores::Scalar(m) => members.iter().map(|id| m[*id]).sum::<f64>() / members.len() as f64,
            ItemScores::Counts { counts, metric } => {
                let mut pooled = ConfusionCounts::default();
                for id in members {
                    pooled.merge(&counts[*id]);
                }
                ScoreReport::from_counts(pooled, Scope::Group).metric_or_zero(*metric)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedCorrelation {
    pub seed: u64,
    pub rho: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub spearman_rho: f64,
    pub kendall_tau: f64,
    pub per_seed: Vec<SeedCorrelation>,
    pub n_seeds: usize,
    pub n_groups: usize,
}

/// JSON layout of a correlation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub per_seed: Vec<SeedCorrelation>,
    pub mean_rho: f64,
    pub mean_tau: f64,
    pub n_groups: usize,
}

impl From<&CorrelationResult> for CorrelationReport {
    fn from(r: &CorrelationResult) -> Self {
        CorrelationReport { per_seed: r.per_seed.clone(), mean_rho: r.spearman_rho, mean_tau: r.kendall_tau, n_groups: r.n_groups }
    }
}

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const DEFAULT_GROUPS: usize = 25;

pub fn correlate(
    metric: &ItemScores,
    human: &ItemScores,
    n_groups: usize,
    seeds: &[u64],
) -> Result<CorrelationResult, CorrelationError> {
    if seeds.is_empty() {
        return Err(CorrelationError::NoSeeds);
    }
    let (m_ids, h_ids) = (metric.ids(), human.ids());
    if m_ids != h_ids {
        return Err(CorrelationError::Alignment {
            only_in_metric: m_ids.difference(&h_ids).map(|s| s.to_string()).collect(),
            only_in_human: h_ids.difference(&m_ids).map(|s| s.to_string()).collect(),
        });
    }
    let ids: Vec<String> = m_ids.into_iter().map(str::to_owned).collect();

    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let with_seed = |e| CorrelationError::Seed { seed, source: Box::new(e) };
            let grouping = group_items(&ids, n_groups, seed).map_err(with_seed)?;
            let groups = grouping.groups();
            let m: Vec<f64> = groups.iter().map(|g| metric.group_score(g)).collect();
            let h: Vec<f64> = groups.iter().map(|g| human.group_score(g)).collect();
            Ok(SeedCorrelation {
                seed,
                rho: spearman_rho(&m, &h).map_err(with_seed)?,
                tau: kendall_tau(&m, &h).map_err(with_seed)?,
            })
        })
        .collect::<Result<Vec<_>, CorrelationError>>()?;

    let n = per_seed.len() as f64;
    Ok(CorrelationResult {
        spearman_rho: per_seed.iter().map(|s| s.rho).sum::<f64>() / n,
        kendall_tau: per_seed.iter().map(|s| s.tau).sum::<f64>() / n,
        n_seeds: per_seed.len(),
        per_seed,
        n_groups,
    })
}

//! Per-table access statistics estimated from a sample of a trace.
//!
//! Three estimates drive placement: the post-hash access-frequency CDF (kept
//! as its inverse sampled at every percent), the mean pooling factor and the
//! coverage. Sampling selects whole samples, so pooling and coverage stay
//! unbiased.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{derive_seed, mix64, TableSpec, Trace};

/// Number of entries in an inverse-CDF table (percent 0 through 100).
pub const ICDF_POINTS: usize = 101;

/// Access count of one embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowCount {
    pub row: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub table_id: u32,
    pub coverage: f64,
    pub avg_pooling: f64,
    pub distinct_rows_accessed: u64,
    pub total_accesses: u64,
    /// Entry `i` is the fewest top rows covering `i`% of accesses.
    pub icdf_steps: Vec<u64>,
    /// Accessed rows by descending count, ties by ascending row. Not persisted.
    #[serde(skip)]
    ranking: Vec<RowCount>,
}

impl FeatureStats {
    /// Builds statistics from explicit per-row access counts.
    pub fn from_counts(
        table_id: u32,
        counts: &[u64],
        coverage: f64,
        avg_pooling: f64,
    ) -> Result<Self> {
        let ranking = rank_rows(counts);
        let total: u64 = ranking.iter().map(|r| r.count).sum();
        let icdf_steps = if total == 0 {
            vec![0; ICDF_POINTS]
        } else {
            icdf_from_ranking(&ranking, total)
        };
        Ok(FeatureStats {
            table_id,
            coverage,
            avg_pooling,
            distinct_rows_accessed: ranking.len() as u64,
            total_accesses: total,
            icdf_steps,
            ranking,
        })
    }

    /// Statistics known only through their percent-resolution inverse CDF.
    pub fn from_summary(
        table_id: u32,
        coverage: f64,
        avg_pooling: f64,
        total_accesses: u64,
        icdf_steps: Vec<u64>,
    ) -> Result<Self> {
        let stats = FeatureStats {
            table_id,
            coverage,
            avg_pooling,
            distinct_rows_accessed: icdf_steps.last().copied().unwrap_or(0),
            total_accesses,
            icdf_steps,
            ranking: Vec::new(),
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.table_id;
        if self.icdf_steps.len() != ICDF_POINTS {
            return Err(Error::validation(format!(
                "table {id}: icdf_steps must have {ICDF_POINTS} entries, got {}",
                self.icdf_steps.len()
            )));
        }
        if self.icdf_steps[0] != 0 {
            return Err(Error::validation(format!(
                "table {id}: icdf_steps[0] must be 0"
            )));
        }
        if self.icdf_steps.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::validation(format!(
                "table {id}: icdf_steps must be nondecreasing"
            )));
        }
        if self.icdf_steps[ICDF_POINTS - 1] != self.distinct_rows_accessed {
            return Err(Error::validation(format!(
                "table {id}: icdf_steps[100] must equal distinct_rows_accessed"
            )));
        }
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(Error::validation(format!(
                "table {id}: coverage out of [0, 1]"
            )));
        }
        if self.coverage > 0.0 && self.avg_pooling < 1.0 {
            return Err(Error::validation(format!(
                "table {id}: avg_pooling must be >= 1 when present"
            )));
        }
        Ok(())
    }

    /// Accessed rows in rank order; empty when loaded from a stats file.
    pub fn ranking(&self) -> &[RowCount] {
        &self.ranking
    }

    pub fn has_ranking(&self) -> bool {
        !self.ranking.is_empty() || self.total_accesses == 0
    }

    /// Cumulative access fraction covered by the top `k+1` rows, for each rank `k`.
    pub fn access_cdf(&self) -> Vec<f64> {
        let total = self.total_accesses as f64;
        let mut acc = 0u64;
        let mut cdf: Vec<f64> = self
            .ranking
            .iter()
            .map(|r| {
                acc += r.count;
                acc as f64 / total
            })
            .collect();
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        cdf
    }

    /// Fewest top rows covering at least `num/den` of accesses.
    ///
    /// Exact when the row ranking is available; otherwise read from the
    /// percent table at `ceil(100 * num / den)`, which never under-covers.
    pub fn rows_for_fraction(&self, num: u64, den: u64) -> u64 {
        assert!(den > 0 && num <= den);
        if self.total_accesses == 0 || num == 0 {
            return 0;
        }
        if !self.ranking.is_empty() {
            let need = num as u128 * self.total_accesses as u128;
            let mut acc = 0u128;
            for (k, r) in self.ranking.iter().enumerate() {
                acc += r.count as u128;
                if acc * den as u128 >= need {
                    return k as u64 + 1;
                }
            }
            return self.ranking.len() as u64;
        }
        let pct = (100 * num).div_ceil(den) as usize;
        self.icdf_steps[pct.min(ICDF_POINTS - 1)]
    }

    /// Inverse CDF sampled at `steps + 1` evenly spaced access fractions.
    pub fn icdf_at(&self, steps: usize) -> Vec<u64> {
        (0..=steps as u64)
            .map(|i| self.rows_for_fraction(i, steps as u64))
            .collect()
    }

    /// Exact share of accesses served by the top `rows` rows.
    pub fn share_of_top(&self, rows: u64) -> Option<f64> {
        if self.total_accesses == 0 {
            return Some(0.0);
        }
        if self.ranking.is_empty() {
            return None;
        }
        let n = (rows as usize).min(self.ranking.len());
        let acc: u64 = self.ranking[..n].iter().map(|r| r.count).sum();
        Some(acc as f64 / self.total_accesses as f64)
    }
}

fn rank_rows(counts: &[u64]) -> Vec<RowCount> {
    let mut ranking: Vec<RowCount> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(row, &count)| RowCount {
            row: row as u64,
            count,
        })
        .collect();
    ranking.sort_unstable_by(|a, b| b.count.cmp(&a.count).then(a.row.cmp(&b.row)));
    ranking
}

fn icdf_from_ranking(ranking: &[RowCount], total: u64) -> Vec<u64> {
    let mut steps = vec![0u64; ICDF_POINTS];
    let mut acc = 0u128;
    let mut i = 1usize;
    for (k, r) in ranking.iter().enumerate() {
        acc += r.count as u128;
        while i < ICDF_POINTS && acc * 100 >= i as u128 * total as u128 {
            steps[i] = k as u64 + 1;
            i += 1;
        }
    }
    steps
}

/// Inverse access CDF at every percent: entry `i` is the minimal number of
/// highest-count rows whose share of accesses is at least `i/100`.
pub fn build_icdf(counts: &[u64]) -> Result<Vec<u64>> {
    let ranking = rank_rows(counts);
    let total: u64 = ranking.iter().map(|r| r.count).sum();
    if total == 0 {
        return Err(Error::invalid("build_icdf needs at least one access"));
    }
    Ok(icdf_from_ranking(&ranking, total))
}

/// Whether sample `sid` belongs to the profiling subset.
pub fn sample_selected(sid: u64, sample_rate: f64, seed: u64) -> bool {
    if sample_rate >= 1.0 {
        return true;
    }
    let u = (mix64(derive_seed(seed, sid)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    u < sample_rate
}

/// Profiles `trace` over a uniform subset of its samples.
pub fn profile(trace: &Trace, sample_rate: f64, seed: u64) -> Result<Vec<FeatureStats>> {
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(Error::invalid(format!(
            "sample_rate must be in (0, 1], got {sample_rate}"
        )));
    }
    if trace.num_samples() == 0 {
        return Err(Error::invalid("cannot profile an empty trace"));
    }
    let sampled = (0..trace.num_samples())
        .into_par_iter()
        .filter(|&sid| sample_selected(sid, sample_rate, seed))
        .count() as u64;
    if sampled == 0 {
        return Err(Error::invalid(format!(
            "sample rate {sample_rate} selected none of {} samples",
            trace.num_samples()
        )));
    }

    let tables = trace.tables();
    let mut counts: Vec<Vec<u64>> = tables
        .iter()
        .map(|t| vec![0u64; t.hash_size as usize])
        .collect();
    let mut present = vec![0u64; tables.len()];
    for rec in trace.records() {
        if !sample_selected(rec.sample_id, sample_rate, seed) {
            continue;
        }
        let t = rec.table_id as usize;
        present[t] += 1;
        let c = &mut counts[t];
        for &id in rec.ids {
            c[id as usize] += 1;
        }
    }

    counts
        .into_par_iter()
        .enumerate()
        .map(|(t, c)| {
            let accesses: u64 = c.iter().sum();
            let avg_pooling = if present[t] > 0 {
                accesses as f64 / present[t] as f64
            } else {
                0.0
            };
            FeatureStats::from_counts(
                t as u32,
                &c,
                present[t] as f64 / sampled as f64,
                avg_pooling,
            )
        })
        .collect()
}

/// Kolmogorov-Smirnov distance between the row-access distributions of `a`
/// and `b`, with rows ordered by `a`'s ranking and rows `a` never saw last.
/// Both statistics must still hold their rankings.
pub fn cdf_ks_distance(a: &FeatureStats, b: &FeatureStats) -> f64 {
    if a.total_accesses == 0 || b.total_accesses == 0 {
        return if a.total_accesses == b.total_accesses {
            0.0
        } else {
            1.0
        };
    }
    let of_b: HashMap<u64, u64> = b.ranking.iter().map(|r| (r.row, r.count)).collect();
    let (ta, tb) = (a.total_accesses as f64, b.total_accesses as f64);
    let (mut ca, mut cb, mut d) = (0u64, 0u64, 0.0f64);
    for r in &a.ranking {
        ca += r.count;
        cb += of_b.get(&r.row).copied().unwrap_or(0);
        d = d.max((ca as f64 / ta - cb as f64 / tb).abs());
    }
    d
}

/// Unused fraction of a table split into rows never touched by the data and
/// rows lost to hash collisions: `(hash_size - distinct_rows) / hash_size`
/// and `(distinct_raw_ids - distinct_rows) / hash_size`.
pub fn hash_utilization(
    stats: &FeatureStats,
    spec: &TableSpec,
    distinct_raw_ids: u64,
) -> Result<(f64, f64)> {
    if stats.table_id != spec.table_id {
        return Err(Error::invalid(
            "stats and table spec refer to different tables",
        ));
    }
    if stats.distinct_rows_accessed > spec.hash_size
        || stats.distinct_rows_accessed > distinct_raw_ids
    {
        return Err(Error::invalid(
            "distinct rows cannot exceed the hash size or the distinct raw values",
        ));
    }
    let h = spec.hash_size as f64;
    let sparsity = (spec.hash_size - stats.distinct_rows_accessed) as f64 / h;
    let collision = (distinct_raw_ids - stats.distinct_rows_accessed) as f64 / h;
    Ok((sparsity, collision))
}

#[derive(Serialize, Deserialize)]
struct StatsFile {
    table: Vec<FeatureStats>,
}

/// Writes statistics as TOML, one `[[table]]` block per table, preceded by
/// `header` lines rendered as comments.
pub fn write_stats(
    path: impl AsRef<Path>,
    stats: &[FeatureStats],
    header: &[String],
) -> Result<()> {
    let path = path.as_ref();
    let body = toml::to_string(&StatsFile {
        table: stats.to_vec(),
    })
    .map_err(|e| Error::invalid(format!("serializing stats: {e}")))?;
    let mut out = String::new();
    for h in header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    out.push_str(&body);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<Vec<FeatureStats>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: StatsFile = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e
            .span()
            .map(|s| text[..s.start].lines().count().max(1))
            .unwrap_or(0),
        msg: e.message().to_string(),
    })?;
    for (k, s) in file.table.iter().enumerate() {
        s.validate()?;
        if s.table_id as usize != k {
            return Err(Error::validation(format!(
                "stats table {k} has id {}",
                s.table_id
            )));
        }
    }
    Ok(file.table)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::workload::{generate_trace, FeatureGenSpec, PoolingLaw};

    /// Direct prefix scan: smallest k whose top-k share reaches i%.
    fn brute_icdf(counts: &[u64]) -> Vec<u64> {
        let mut sorted = counts.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let total: u64 = sorted.iter().sum();
        (0..ICDF_POINTS as u64)
            .map(|i| {
                (0..=sorted.len())
                    .find(|&k| {
                        let s: u64 = sorted[..k].iter().sum();
                        100 * s >= i * total
                    })
                    .unwrap() as u64
            })
            .collect()
    }

    #[test]
    fn uniform_counts() {
        let icdf = build_icdf(&[7; 200]).unwrap();
        assert_eq!(icdf[50], 100);
        assert_eq!(icdf[0], 0);
        assert_eq!(icdf[100], 200);
    }

    #[test]
    fn two_point_counts() {
        let icdf = build_icdf(&[90, 10]).unwrap();
        for (i, &v) in icdf.iter().enumerate().skip(1) {
            assert_eq!(v, if i <= 90 { 1 } else { 2 }, "step {i}");
        }
        assert_eq!(icdf[0], 0);
    }

    #[test]
    fn all_zero_counts_rejected() {
        assert!(build_icdf(&[0, 0, 0]).is_err());
        assert!(build_icdf(&[]).is_err());
    }

    #[test]
    fn point_mass_profile() {
        let tables = vec![TableSpec::new(0, 10, 10, 4, 4).unwrap()];
        let mut b = Trace::builder(tables, 4).unwrap();
        for s in 0..4 {
            b.push(s, 0, &[0, 0]).unwrap();
        }
        let st = &profile(&b.finish(), 1.0, 0).unwrap()[0];
        assert_eq!(st.icdf_steps[0], 0);
        assert!(st.icdf_steps[1..].iter().all(|&v| v == 1));
        assert_eq!(st.distinct_rows_accessed, 1);
    }

    #[test]
    fn worked_example_pooling_and_coverage() {
        // Feature A has 11 ids over 3 samples, feature B is present only in the first sample.
        let tables = vec![
            TableSpec::new(0, 1000, 100, 4, 4).unwrap(),
            TableSpec::new(1, 1000, 100, 4, 4).unwrap(),
        ];
        let mut b = Trace::builder(tables, 3).unwrap();
        b.push(0, 0, &[3, 17, 42, 8]).unwrap();
        b.push(0, 1, &[5, 6, 7]).unwrap();
        b.push(1, 0, &[9, 11, 23]).unwrap();
        b.push(2, 0, &[1, 2, 3, 4]).unwrap();
        let st = profile(&b.finish(), 1.0, 0).unwrap();
        assert!((st[0].avg_pooling - 11.0 / 3.0).abs() < 1e-12);
        assert!((st[0].avg_pooling - 3.66).abs() < 0.01);
        assert_eq!(st[0].coverage, 1.0);
        assert_eq!(st[1].avg_pooling, 3.0);
        assert!((st[1].coverage - 0.33).abs() < 0.01);
    }

    #[test]
    fn zero_sample_selection_is_error() {
        let tables = vec![TableSpec::new(0, 10, 10, 4, 4).unwrap()];
        let mut b = Trace::builder(tables, 1).unwrap();
        b.push(0, 0, &[1]).unwrap();
        let t = b.finish();
        let seed = (0..).find(|&s| !sample_selected(0, 1e-9, s)).unwrap();
        assert!(matches!(
            profile(&t, 1e-9, seed),
            Err(Error::InvalidArgument(_))
        ));
        assert!(profile(&t, 0.0, 0).is_err());
    }

    #[test]
    fn full_rate_profile_matches_exact_counts() {
        let specs = vec![(
            TableSpec::new(0, 50_000, 1000, 4, 4).unwrap(),
            FeatureGenSpec {
                zipf_exponent: 1.05,
                mean_pooling: 5.0,
                coverage: 0.6,
                pooling_law: PoolingLaw::Poisson,
            },
        )];
        let trace = generate_trace(&specs, 4000, 8).unwrap();
        let mut counts = vec![0u64; 1000];
        let mut present = 0;
        for r in trace.records() {
            present += 1;
            for &id in r.ids {
                counts[id as usize] += 1;
            }
        }
        let st = &profile(&trace, 1.0, 3).unwrap()[0];
        assert_eq!(st.total_accesses, counts.iter().sum::<u64>());
        assert_eq!(st.icdf_steps, brute_icdf(&counts));
        assert_eq!(st.coverage, present as f64 / 4000.0);
        for rc in st.ranking() {
            assert_eq!(counts[rc.row as usize], rc.count);
        }
        let cdf = st.access_cdf();
        assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
        assert!((cdf.last().unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rows_for_fraction_agrees_with_percent_table() {
        let counts: Vec<u64> = (0..300u64).map(|k| (k * 7919) % 97 + 1).collect();
        let st = FeatureStats::from_counts(0, &counts, 1.0, 1.0).unwrap();
        let summary =
            FeatureStats::from_summary(0, 1.0, 1.0, st.total_accesses, st.icdf_steps.clone())
                .unwrap();
        for i in 0..=100 {
            assert_eq!(st.rows_for_fraction(i, 100), st.icdf_steps[i as usize]);
            assert_eq!(summary.rows_for_fraction(i, 100), st.icdf_steps[i as usize]);
        }
        // Coarser grids only ever round toward more rows without the ranking.
        for i in 0..=7 {
            assert!(summary.rows_for_fraction(i, 7) >= st.rows_for_fraction(i, 7));
        }
    }

    #[test]
    fn untouched_table_utilization() {
        let spec = TableSpec::new(0, 10, 64, 4, 4).unwrap();
        let st = FeatureStats::from_counts(0, &[0; 64], 0.0, 0.0).unwrap();
        assert_eq!(hash_utilization(&st, &spec, 0).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn pigeonhole_collision() {
        let spec = TableSpec::new(0, 10, 1, 4, 4).unwrap();
        let st = FeatureStats::from_counts(0, &[5], 1.0, 1.0).unwrap();
        let (sparsity, collision) = hash_utilization(&st, &spec, 2).unwrap();
        assert_eq!(sparsity, 0.0);
        assert_eq!(collision, 1.0);
    }

    #[test]
    fn stats_file_roundtrip() {
        let counts: Vec<u64> = (0..50u64).map(|k| 50 - k).collect();
        let st = FeatureStats::from_counts(0, &counts, 0.5, 2.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.toml");
        write_stats(&p, std::slice::from_ref(&st), &["tool=test".into()]).unwrap();
        let back = read_stats(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].icdf_steps, st.icdf_steps);
        assert_eq!(back[0].coverage, 0.5);
        assert_eq!(back[0].avg_pooling, 2.5);
        assert_eq!(back[0].total_accesses, st.total_accesses);
        assert!(!back[0].has_ranking());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn icdf_matches_prefix_scan(counts in prop::collection::vec(0u64..50, 1..120)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            prop_assert_eq!(build_icdf(&counts).unwrap(), brute_icdf(&counts));
        }

        #[test]
        fn icdf_is_label_invariant(counts in prop::collection::vec(0u64..20, 1..80), rot in 0usize..80) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let mut shuffled = counts.clone();
            let n = shuffled.len();
            shuffled.rotate_left(rot % n);
            shuffled.reverse();
            prop_assert_eq!(build_icdf(&counts).unwrap(), build_icdf(&shuffled).unwrap());
        }
    }

    #[test]
    fn ks_distance_uses_a_common_row_order() {
        let a = FeatureStats::from_counts(0, &[6, 3, 1, 0], 1.0, 1.0).unwrap();
        assert_eq!(cdf_ks_distance(&a, &a), 0.0);
        let b = FeatureStats::from_counts(0, &[60, 30, 10, 0], 1.0, 1.0).unwrap();
        assert!(cdf_ks_distance(&a, &b) < 1e-12);
        let c = FeatureStats::from_counts(0, &[0, 3, 1, 6], 1.0, 1.0).unwrap();
        assert!((cdf_ks_distance(&a, &c) - 0.6).abs() < 1e-12);
    }
}

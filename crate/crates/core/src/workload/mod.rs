//! Synthetic multi-hot categorical traces.
//!
//! A [`Trace`] holds, for every training sample, the hashed row indices each
//! sparse feature looks up. Features absent from a sample simply have no
//! record. Traces are stored column-wise so that multi-million-access traces
//! stay compact.

mod io;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_trace, write_trace, write_trace_with_comments};

/// SplitMix64 finalizer: shifts 30/27/31, multipliers
/// `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from a master seed and a stream key.
#[inline]
pub fn derive_seed(master: u64, key: u64) -> u64 {
    mix64(master ^ mix64(key.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

/// Maps a raw categorical value to an embedding row: `mix64(raw_id) % hash_size`.
pub fn hash_value(raw_id: u64, hash_size: u64) -> Result<u64> {
    if hash_size == 0 {
        return Err(Error::invalid("hash_size must be at least 1"));
    }
    Ok(mix64(raw_id) % hash_size)
}

/// Static description of one embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub table_id: u32,
    /// Number of distinct raw categorical values the feature can take.
    pub cardinality: u64,
    /// Number of embedding rows.
    pub hash_size: u64,
    pub dim: u32,
    /// Bytes per embedding element (2 or 4).
    pub elem_bytes: u32,
}

impl TableSpec {
    pub fn new(
        table_id: u32,
        cardinality: u64,
        hash_size: u64,
        dim: u32,
        elem_bytes: u32,
    ) -> Result<Self> {
        let spec = TableSpec {
            table_id,
            cardinality,
            hash_size,
            dim,
            elem_bytes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hash_size == 0 {
            return Err(Error::validation(format!(
                "table {}: hash_size must be >= 1",
                self.table_id
            )));
        }
        if self.cardinality == 0 {
            return Err(Error::validation(format!(
                "table {}: cardinality must be >= 1",
                self.table_id
            )));
        }
        if self.dim == 0 {
            return Err(Error::validation(format!(
                "table {}: dim must be >= 1",
                self.table_id
            )));
        }
        if self.elem_bytes != 2 && self.elem_bytes != 4 {
            return Err(Error::validation(format!(
                "table {}: elem_bytes must be 2 or 4, got {}",
                self.table_id, self.elem_bytes
            )));
        }
        Ok(())
    }

    /// Bytes of one embedding row.
    pub fn row_bytes(&self) -> u64 {
        self.dim as u64 * self.elem_bytes as u64
    }

    /// Total table footprint, `hash_size * dim * elem_bytes`.
    pub fn table_bytes(&self) -> u64 {
        self.hash_size * self.row_bytes()
    }
}

/// Checks that `specs` are individually valid and numbered `0..len`.
pub fn validate_table_list(specs: &[TableSpec]) -> Result<()> {
    for (k, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if spec.table_id as usize != k {
            return Err(Error::validation(format!(
                "table ids must be 0..{} in order; position {k} holds table {}",
                specs.len(),
                spec.table_id
            )));
        }
    }
    Ok(())
}

/// Distribution of the number of hot indices in a present sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingLaw {
    Constant,
    /// `1 + Poisson(mean - 1)`.
    Poisson,
    /// Rounded log-normal with unit log-variance, clamped to at least 1.
    LogNormal,
}

/// Generator parameters of one sparse feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureGenSpec {
    pub zipf_exponent: f64,
    pub mean_pooling: f64,
    pub coverage: f64,
    pub pooling_law: PoolingLaw,
}

impl FeatureGenSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return Err(Error::validation(format!(
                "zipf_exponent must be >= 0, got {}",
                self.zipf_exponent
            )));
        }
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(Error::validation(format!(
                "coverage must be in [0, 1], got {}",
                self.coverage
            )));
        }
        if self.coverage > 0.0 && !(self.mean_pooling >= 1.0 && self.mean_pooling.is_finite()) {
            return Err(Error::validation(format!(
                "mean_pooling must be >= 1, got {}",
                self.mean_pooling
            )));
        }
        Ok(())
    }
}

/// Borrowed view of one trace record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Record<'a> {
    pub sample_id: u64,
    pub table_id: u32,
    pub ids: &'a [u64],
}

/// Multi-hot training trace over a fixed list of tables.
///
/// Records are sorted by `(sample_id, table_id)` without duplicates, every
/// record has at least one id and every id is below its table's hash size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    tables: Vec<TableSpec>,
    num_samples: u64,
    sample_ids: Vec<u64>,
    table_ids: Vec<u32>,
    offsets: Vec<usize>,
    ids: Vec<u64>,
}

impl Trace {
    pub fn builder(tables: Vec<TableSpec>, num_samples: u64) -> Result<TraceBuilder> {
        validate_table_list(&tables)?;
        Ok(TraceBuilder {
            trace: Trace {
                tables,
                num_samples,
                sample_ids: Vec::new(),
                table_ids: Vec::new(),
                offsets: vec![0],
                ids: Vec::new(),
            },
        })
    }

    pub fn tables(&self) -> &[TableSpec] {
        &self.tables
    }

    pub fn num_samples(&self) -> u64 {
        self.num_samples
    }

    pub fn num_records(&self) -> usize {
        self.sample_ids.len()
    }

    /// Total number of hashed ids over all records.
    pub fn total_ids(&self) -> usize {
        self.ids.len()
    }

    /// Number of records whose sample id is below `sample_id`.
    pub fn records_before(&self, sample_id: u64) -> usize {
        self.sample_ids.partition_point(|&s| s < sample_id)
    }

    pub fn record(&self, k: usize) -> Record<'_> {
        Record {
            sample_id: self.sample_ids[k],
            table_id: self.table_ids[k],
            ids: &self.ids[self.offsets[k]..self.offsets[k + 1]],
        }
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = Record<'_>> + '_ {
        (0..self.num_records()).map(move |k| self.record(k))
    }

    /// Records grouped by sample, in sample order. Samples with no record are skipped.
    pub fn samples(&self) -> SampleIter<'_> {
        SampleIter {
            trace: self,
            next: 0,
        }
    }
}

/// Iterator over `(sample_id, records)` groups.
pub struct SampleIter<'a> {
    trace: &'a Trace,
    next: usize,
}

impl<'a> Iterator for SampleIter<'a> {
    type Item = (u64, std::ops::Range<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let t = self.trace;
        if self.next >= t.num_records() {
            return None;
        }
        let start = self.next;
        let sid = t.sample_ids[start];
        let mut end = start + 1;
        while end < t.num_records() && t.sample_ids[end] == sid {
            end += 1;
        }
        self.next = end;
        Some((sid, start..end))
    }
}

fn check_record(tables: &[TableSpec], num_samples: u64, rec: Record<'_>) -> Result<()> {
    let Some(spec) = tables.get(rec.table_id as usize) else {
        return Err(Error::validation(format!(
            "record for sample {} references table {} which is not declared",
            rec.sample_id, rec.table_id
        )));
    };
    if rec.sample_id >= num_samples {
        return Err(Error::validation(format!(
            "sample id {} out of range (trace has {} samples)",
            rec.sample_id, num_samples
        )));
    }
    if rec.ids.is_empty() {
        return Err(Error::validation(format!(
            "record ({}, {}) has no ids; absent features must be omitted",
            rec.sample_id, rec.table_id
        )));
    }
    if let Some(&bad) = rec.ids.iter().find(|&&id| id >= spec.hash_size) {
        return Err(Error::validation(format!(
            "id {bad} out of range for table {} (hash_size {})",
            rec.table_id, spec.hash_size
        )));
    }
    Ok(())
}

/// Appends records in `(sample_id, table_id)` order.
pub struct TraceBuilder {
    trace: Trace,
}

impl TraceBuilder {
    pub fn push(&mut self, sample_id: u64, table_id: u32, ids: &[u64]) -> Result<()> {
        let t = &mut self.trace;
        check_record(
            &t.tables,
            t.num_samples,
            Record {
                sample_id,
                table_id,
                ids,
            },
        )?;
        if let (Some(&ls), Some(&lt)) = (t.sample_ids.last(), t.table_ids.last()) {
            if (sample_id, table_id) <= (ls, lt) {
                return Err(Error::validation(format!(
                    "record ({sample_id}, {table_id}) is not after ({ls}, {lt}); records must be sorted and unique"
                )));
            }
        }
        t.sample_ids.push(sample_id);
        t.table_ids.push(table_id);
        t.ids.extend_from_slice(ids);
        t.offsets.push(t.ids.len());
        Ok(())
    }

    pub fn finish(self) -> Trace {
        self.trace
    }
}

/// Side information that only the generator knows.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GenerationSummary {
    /// Distinct raw (pre-hash) values drawn per table.
    pub distinct_raw_ids: Vec<u64>,
}

const CHUNK_SAMPLES: u64 = 2048;

struct FeatureSampler {
    zipf: Option<Zipf<f64>>,
    pooling: PoolingSampler,
    coverage: f64,
    hash_size: u64,
}

enum PoolingSampler {
    Constant(u64),
    Poisson(Poisson<f64>),
    LogNormal(LogNormal<f64>),
}

impl PoolingSampler {
    fn new(spec: &FeatureGenSpec) -> Result<Self> {
        let mean = spec.mean_pooling.max(1.0);
        Ok(match spec.pooling_law {
            PoolingLaw::Constant => PoolingSampler::Constant(mean.round().max(1.0) as u64),
            PoolingLaw::Poisson if mean <= 1.0 => PoolingSampler::Constant(1),
            PoolingLaw::Poisson => PoolingSampler::Poisson(
                Poisson::new(mean - 1.0)
                    .map_err(|e| Error::invalid(format!("poisson pooling: {e}")))?,
            ),
            PoolingLaw::LogNormal => {
                let sigma: f64 = 1.0;
                let mu = mean.ln() - 0.5 * sigma * sigma;
                PoolingSampler::LogNormal(
                    LogNormal::new(mu, sigma)
                        .map_err(|e| Error::invalid(format!("lognormal pooling: {e}")))?,
                )
            }
        })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        match self {
            PoolingSampler::Constant(k) => *k,
            PoolingSampler::Poisson(p) => 1 + p.sample(rng) as u64,
            PoolingSampler::LogNormal(l) => (l.sample(rng).round() as u64).max(1),
        }
    }
}

fn samplers(specs: &[(TableSpec, FeatureGenSpec)]) -> Result<Vec<FeatureSampler>> {
    specs
        .iter()
        .map(|(table, gen)| {
            gen.validate()?;
            let zipf = if gen.coverage > 0.0 {
                Some(
                    Zipf::new(table.cardinality as f64, gen.zipf_exponent)
                        .map_err(|e| Error::invalid(format!("table {}: {e}", table.table_id)))?,
                )
            } else {
                None
            };
            Ok(FeatureSampler {
                zipf,
                pooling: PoolingSampler::new(gen)?,
                coverage: gen.coverage,
                hash_size: table.hash_size,
            })
        })
        .collect()
}

struct Chunk {
    sample_ids: Vec<u64>,
    table_ids: Vec<u32>,
    lens: Vec<usize>,
    ids: Vec<u64>,
    raw: Option<Vec<HashSet<u64>>>,
}

fn generate_chunk(
    samplers: &[FeatureSampler],
    cardinalities: &[u64],
    range: std::ops::Range<u64>,
    seed: u64,
    track_raw: bool,
) -> Chunk {
    let mut chunk = Chunk {
        sample_ids: Vec::new(),
        table_ids: Vec::new(),
        lens: Vec::new(),
        ids: Vec::new(),
        raw: track_raw.then(|| vec![HashSet::new(); samplers.len()]),
    };
    for sid in range {
        // One stream per sample keeps output independent of chunking.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, sid));
        for (t, s) in samplers.iter().enumerate() {
            let present: f64 = rng.random();
            if present >= s.coverage {
                continue;
            }
            let zipf = s.zipf.as_ref().expect("present features have a sampler");
            let k = s.pooling.sample(&mut rng);
            for _ in 0..k {
                let rank = zipf.sample(&mut rng) as u64;
                let raw = rank.clamp(1, cardinalities[t]) - 1;
                if let Some(sets) = chunk.raw.as_mut() {
                    sets[t].insert(raw);
                }
                chunk.ids.push(mix64(raw) % s.hash_size);
            }
            chunk.sample_ids.push(sid);
            chunk.table_ids.push(t as u32);
            chunk.lens.push(k as usize);
        }
    }
    chunk
}

fn generate_inner(
    specs: &[(TableSpec, FeatureGenSpec)],
    num_samples: u64,
    seed: u64,
    track_raw: bool,
) -> Result<(Trace, GenerationSummary)> {
    if specs.is_empty() {
        return Err(Error::invalid("at least one table is required"));
    }
    if num_samples == 0 {
        return Err(Error::invalid("num_samples must be >= 1"));
    }
    let tables: Vec<TableSpec> = specs.iter().map(|(t, _)| *t).collect();
    validate_table_list(&tables)?;
    let samplers = samplers(specs)?;
    let cards: Vec<u64> = tables.iter().map(|t| t.cardinality).collect();

    let n_chunks = num_samples.div_ceil(CHUNK_SAMPLES);
    let chunks: Vec<Chunk> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK_SAMPLES;
            let end = (start + CHUNK_SAMPLES).min(num_samples);
            generate_chunk(&samplers, &cards, start..end, seed, track_raw)
        })
        .collect();

    let n_records: usize = chunks.iter().map(|c| c.sample_ids.len()).sum();
    let n_ids: usize = chunks.iter().map(|c| c.ids.len()).sum();
    let mut trace = Trace {
        tables,
        num_samples,
        sample_ids: Vec::with_capacity(n_records),
        table_ids: Vec::with_capacity(n_records),
        offsets: Vec::with_capacity(n_records + 1),
        ids: Vec::with_capacity(n_ids),
    };
    trace.offsets.push(0);
    let mut raw_sets: Vec<HashSet<u64>> = vec![HashSet::new(); specs.len()];
    for chunk in chunks {
        trace.sample_ids.extend_from_slice(&chunk.sample_ids);
        trace.table_ids.extend_from_slice(&chunk.table_ids);
        for len in chunk.lens {
            let last = *trace.offsets.last().unwrap();
            trace.offsets.push(last + len);
        }
        trace.ids.extend_from_slice(&chunk.ids);
        if let Some(sets) = chunk.raw {
            for (acc, s) in raw_sets.iter_mut().zip(sets) {
                acc.extend(s);
            }
        }
    }
    let summary = GenerationSummary {
        distinct_raw_ids: raw_sets.iter().map(|s| s.len() as u64).collect(),
    };
    Ok((trace, summary))
}

/// Generates a deterministic synthetic trace.
///
/// Each feature is present in a sample with probability `coverage`; a
/// present feature draws its pooling factor from `pooling_law`, then that
/// many raw values from a Zipf law over `[0, cardinality)`, hashed into the
/// table with [`hash_value`].
pub fn generate_trace(
    specs: &[(TableSpec, FeatureGenSpec)],
    num_samples: u64,
    seed: u64,
) -> Result<Trace> {
    generate_inner(specs, num_samples, seed, false).map(|(t, _)| t)
}

/// Like [`generate_trace`], also reporting distinct pre-hash values per table.
pub fn generate_trace_with_summary(
    specs: &[(TableSpec, FeatureGenSpec)],
    num_samples: u64,
    seed: u64,
) -> Result<(Trace, GenerationSummary)> {
    generate_inner(specs, num_samples, seed, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: u32, card: u64, hash: u64) -> TableSpec {
        TableSpec::new(id, card, hash, 16, 4).unwrap()
    }

    fn gen(coverage: f64, pooling: f64, law: PoolingLaw) -> FeatureGenSpec {
        FeatureGenSpec {
            zipf_exponent: 1.1,
            mean_pooling: pooling,
            coverage,
            pooling_law: law,
        }
    }

    #[test]
    fn single_bucket_hash() {
        for x in [0u64, 1, 42, u64::MAX, 0xdead_beef] {
            assert_eq!(hash_value(x, 1).unwrap(), 0);
        }
        assert!(hash_value(3, 0).is_err());
    }

    #[test]
    fn hash_is_pinned() {
        // Pinned so that every implementation hashes identically.
        assert_eq!(mix64(0), 0);
        assert_eq!(mix64(1), 0x5692_161d_100b_05e5);
        assert_eq!(hash_value(42, 1 << 32).unwrap(), 3_564_271_138);
    }

    #[test]
    fn zero_coverage_feature_has_no_records() {
        let specs = vec![
            (spec(0, 1000, 100), gen(0.0, 3.0, PoolingLaw::Constant)),
            (spec(1, 1000, 100), gen(0.5, 3.0, PoolingLaw::Constant)),
        ];
        let t = generate_trace(&specs, 5000, 1).unwrap();
        assert!(t.records().all(|r| r.table_id == 1));
        assert!(t.num_records() > 2000);
    }

    #[test]
    fn constant_pooling_full_coverage() {
        let specs = vec![(spec(0, 1000, 64), gen(1.0, 3.0, PoolingLaw::Constant))];
        let t = generate_trace(&specs, 1000, 9).unwrap();
        assert_eq!(t.num_records(), 1000);
        assert!(t.records().all(|r| r.ids.len() == 3));
    }

    #[test]
    fn generation_is_deterministic_and_sorted() {
        let specs = vec![
            (spec(0, 10_000, 500), gen(0.7, 4.0, PoolingLaw::Poisson)),
            (spec(1, 10_000, 50), gen(0.3, 2.0, PoolingLaw::LogNormal)),
        ];
        let a = generate_trace(&specs, 5000, 77).unwrap();
        let b = generate_trace(&specs, 5000, 77).unwrap();
        assert_eq!(a, b);
        let c = generate_trace(&specs, 5000, 78).unwrap();
        assert_ne!(a, c);
        let mut prev = None;
        for r in a.records() {
            let key = (r.sample_id, r.table_id);
            assert!(prev.is_none_or(|p| p < key));
            prev = Some(key);
            assert!(r
                .ids
                .iter()
                .all(|&id| id < a.tables()[r.table_id as usize].hash_size));
        }
    }

    #[test]
    fn prefix_of_longer_trace_matches() {
        // Per-sample streams: the first N samples do not depend on the total.
        let specs = vec![(spec(0, 10_000, 500), gen(0.7, 4.0, PoolingLaw::Poisson))];
        let short = generate_trace(&specs, 3000, 5).unwrap();
        let long = generate_trace(&specs, 9000, 5).unwrap();
        let n = short.num_records();
        for k in 0..n {
            assert_eq!(short.record(k), long.record(k));
        }
    }

    #[test]
    fn empty_spec_list_rejected() {
        assert!(matches!(
            generate_trace(&[], 10, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn builder_rejects_bad_records() {
        let tables = vec![spec(0, 10, 10)];
        let mut b = Trace::builder(tables, 3).unwrap();
        b.push(0, 0, &[1, 2]).unwrap();
        assert!(b.push(0, 0, &[1]).is_err(), "duplicate key");
        assert!(b.push(1, 1, &[1]).is_err(), "unknown table");
        assert!(b.push(1, 0, &[10]).is_err(), "id out of range");
        assert!(b.push(1, 0, &[]).is_err(), "empty record");
        assert!(b.push(5, 0, &[1]).is_err(), "sample out of range");
    }

    #[test]
    fn non_contiguous_table_ids_rejected() {
        assert!(Trace::builder(vec![spec(1, 10, 10)], 1).is_err());
    }
}

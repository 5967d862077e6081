//! Row remapping tables.
//!
//! Entry `r` of a table's remap gives the new home of original row `r`: a
//! value `v >= 0` is offset `v` in the HBM partition, a value `v < 0` is
//! offset `-v - 1` in the UVM partition. Rows never seen by the profiler can
//! optionally be left unallocated, encoded as `i32::MIN`.
//!
//! Binary layout: `SPRM`, a version byte, then `table_id`, `hash_size` and
//! `hbm_rows` as little-endian `u64`, then `hash_size` little-endian `i32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::milp::{ShardingPlan, TablePlacement};
use crate::profiler::FeatureStats;
use crate::workload::TableSpec;

pub const MAGIC: &[u8; 4] = b"SPRM";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 4 + 1 + 3 * 8;
/// Largest table the 32-bit sign encoding can address.
pub const MAX_ROWS: u64 = i32::MAX as u64;
pub const UNALLOCATED: i32 = i32::MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tier {
    Fast,
    Slow,
    Unallocated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemapTable {
    table_id: u32,
    hbm_rows: u64,
    entries: Vec<i32>,
}

/// Builds the remap of one table; unaccessed rows stay in the slow tier.
pub fn build_remap(
    placement: &TablePlacement,
    stats: &FeatureStats,
    spec: &TableSpec,
) -> Result<RemapTable> {
    build_remap_with(placement, stats, spec, false)
}

/// Builds the remap of one table. The `hbm_rows` most accessed rows (ties by
/// ascending row, unaccessed rows last) get fast offsets in that order; the
/// other rows get slow offsets by ascending row index. With
/// `omit_unaccessed`, slow-tier rows the profiler never saw are unallocated.
pub fn build_remap_with(
    placement: &TablePlacement,
    stats: &FeatureStats,
    spec: &TableSpec,
    omit_unaccessed: bool,
) -> Result<RemapTable> {
    let id = spec.table_id;
    if placement.table_id != id || stats.table_id != id {
        return Err(Error::invalid(format!(
            "remap inputs disagree on the table id (expected {id})"
        )));
    }
    let h = spec.hash_size;
    if h > MAX_ROWS {
        return Err(Error::invalid(format!(
            "table {id}: hash size {h} exceeds the {MAX_ROWS}-row limit of 32-bit remap entries"
        )));
    }
    let hbm_rows = placement.hbm_rows;
    if hbm_rows > h {
        return Err(Error::invalid(format!(
            "table {id}: hbm_rows {hbm_rows} exceeds hash size {h}"
        )));
    }
    if !stats.has_ranking() && hbm_rows > 0 {
        return Err(Error::invalid(format!(
            "table {id}: statistics lack per-row counts; profile the trace to build a remap"
        )));
    }

    const PENDING: i32 = i32::MAX;
    let mut entries = vec![PENDING; h as usize];
    let mut accessed = vec![false; h as usize];
    let ranking = stats.ranking();
    for rc in ranking {
        if rc.row >= h {
            return Err(Error::invalid(format!(
                "table {id}: profiled row {} beyond hash size",
                rc.row
            )));
        }
        accessed[rc.row as usize] = true;
    }
    let mut fast = 0u64;
    for rc in ranking.iter().take(hbm_rows as usize) {
        entries[rc.row as usize] = fast as i32;
        fast += 1;
    }
    if fast < hbm_rows {
        for (r, slot) in entries.iter_mut().enumerate() {
            if fast == hbm_rows {
                break;
            }
            if !accessed[r] {
                *slot = fast as i32;
                fast += 1;
            }
        }
    }
    let mut slow = 0i64;
    for (r, slot) in entries.iter_mut().enumerate() {
        if *slot != PENDING {
            continue;
        }
        if omit_unaccessed && !accessed[r] {
            *slot = UNALLOCATED;
        } else {
            *slot = (-slow - 1) as i32;
            slow += 1;
        }
    }
    Ok(RemapTable {
        table_id: id,
        hbm_rows,
        entries,
    })
}

/// Remaps every table of `plan`, in table order.
pub fn build_remaps(
    plan: &ShardingPlan,
    stats: &[FeatureStats],
    specs: &[TableSpec],
    omit_unaccessed: bool,
) -> Result<Vec<RemapTable>> {
    if stats.len() != specs.len() || plan.placements.len() != specs.len() {
        return Err(Error::invalid(
            "plan, statistics and table specs cover different tables",
        ));
    }
    specs
        .par_iter()
        .zip(stats)
        .map(|(spec, st)| {
            let p = plan.placement(spec.table_id).ok_or_else(|| {
                Error::validation(format!("plan has no entry for table {}", spec.table_id))
            })?;
            build_remap_with(p, st, spec, omit_unaccessed)
        })
        .collect()
}

impl RemapTable {
    pub fn table_id(&self) -> u32 {
        self.table_id
    }

    pub fn hash_size(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn hbm_rows(&self) -> u64 {
        self.hbm_rows
    }

    pub fn entries(&self) -> &[i32] {
        &self.entries
    }

    /// Decodes one entry.
    #[inline]
    pub fn decode(v: i32) -> (Tier, u64) {
        if v >= 0 {
            (Tier::Fast, v as u64)
        } else if v == UNALLOCATED {
            (Tier::Unallocated, 0)
        } else {
            (Tier::Slow, (-(v as i64) - 1) as u64)
        }
    }

    pub fn translate(&self, original_index: u64) -> Result<(Tier, u64)> {
        let v = self.entries.get(original_index as usize).ok_or_else(|| {
            Error::invalid(format!(
                "row {original_index} out of range for table {} of {} rows",
                self.table_id,
                self.entries.len()
            ))
        })?;
        Ok(Self::decode(*v))
    }

    /// Tier of `original_index`, without bounds reporting.
    #[inline]
    pub fn tier(&self, original_index: u64) -> Tier {
        Self::decode(self.entries[original_index as usize]).0
    }

    /// Checks that fast and slow offsets each form a contiguous range from zero.
    pub fn validate(&self) -> Result<()> {
        let n = self.entries.len();
        let mut fast = vec![false; n];
        let mut slow = vec![false; n];
        let (mut nf, mut ns) = (0u64, 0u64);
        for &v in &self.entries {
            let (tier, off) = Self::decode(v);
            let seen = match tier {
                Tier::Fast => {
                    nf += 1;
                    &mut fast
                }
                Tier::Slow => {
                    ns += 1;
                    &mut slow
                }
                Tier::Unallocated => continue,
            };
            if off as usize >= n || std::mem::replace(&mut seen[off as usize], true) {
                return Err(Error::validation(format!(
                    "table {}: offset {off} repeated or out of range",
                    self.table_id
                )));
            }
        }
        if nf != self.hbm_rows
            || fast[..nf as usize].iter().any(|s| !s)
            || slow[..ns as usize].iter().any(|s| !s)
        {
            return Err(Error::validation(format!(
                "table {}: tier offsets are not contiguous from zero",
                self.table_id
            )));
        }
        Ok(())
    }

    /// Size of the binary encoding.
    pub fn serialized_len(&self) -> usize {
        HEADER_BYTES + 4 * self.entries.len()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| {
            w.write_all(MAGIC)?;
            w.write_all(&[VERSION])?;
            w.write_all(&(self.table_id as u64).to_le_bytes())?;
            w.write_all(&self.hash_size().to_le_bytes())?;
            w.write_all(&self.hbm_rows.to_le_bytes())?;
            for v in &self.entries {
                w.write_all(&v.to_le_bytes())?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let perr = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: msg.to_string(),
        };
        let mut head = [0u8; HEADER_BYTES];
        r.read_exact(&mut head)
            .map_err(|_| perr("truncated header"))?;
        if &head[..4] != MAGIC {
            return Err(perr("bad magic"));
        }
        if head[4] != VERSION {
            return Err(perr(&format!("unsupported version {}", head[4])));
        }
        let word = |k: usize| u64::from_le_bytes(head[5 + 8 * k..13 + 8 * k].try_into().unwrap());
        let (table_id, hash_size, hbm_rows) = (word(0), word(1), word(2));
        if hash_size > MAX_ROWS || table_id > u32::MAX as u64 {
            return Err(perr("header values out of range"));
        }
        let mut body = Vec::with_capacity(4 * hash_size as usize);
        r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
        if body.len() != 4 * hash_size as usize {
            return Err(perr(&format!(
                "expected {} entries, found {} bytes",
                hash_size,
                body.len()
            )));
        }
        let entries = body
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let table = RemapTable {
            table_id: table_id as u32,
            hbm_rows,
            entries,
        };
        table.validate()?;
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn placement(rows: u64) -> TablePlacement {
        TablePlacement {
            table_id: 0,
            gpu: 0,
            step: 0,
            hbm_rows: rows,
            pct: 0.0,
            mem_bytes: 0,
        }
    }

    fn remap(counts: &[u64], rows: u64) -> RemapTable {
        let spec = TableSpec::new(0, 100, counts.len() as u64, 4, 4).unwrap();
        let st = FeatureStats::from_counts(0, counts, 1.0, 1.0).unwrap();
        build_remap(&placement(rows), &st, &spec).unwrap()
    }

    #[test]
    fn worked_example() {
        let r = remap(&[5, 1, 9], 2);
        assert_eq!(r.entries(), &[1, -1, 0]);
        assert_eq!(r.translate(2).unwrap(), (Tier::Fast, 0));
        assert_eq!(r.translate(1).unwrap(), (Tier::Slow, 0));
        assert!(r.translate(3).is_err());
    }

    #[test]
    fn all_slow_keeps_index_order() {
        let r = remap(&[4, 0, 7, 1], 0);
        assert_eq!(r.entries(), &[-1, -2, -3, -4]);
    }

    #[test]
    fn all_fast_is_a_permutation() {
        let r = remap(&[4, 0, 7, 1, 0], 5);
        let mut e = r.entries().to_vec();
        assert!(e.iter().all(|&v| v >= 0));
        // Accessed rows by count, then unaccessed rows by index.
        assert_eq!(e, vec![1, 3, 0, 2, 4]);
        e.sort();
        assert_eq!(e, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn omitted_rows_are_unallocated() {
        let spec = TableSpec::new(0, 100, 5, 4, 4).unwrap();
        let st = FeatureStats::from_counts(0, &[4, 0, 7, 1, 0], 1.0, 1.0).unwrap();
        let r = build_remap_with(&placement(1), &st, &spec, true).unwrap();
        assert_eq!(r.entries(), &[-1, UNALLOCATED, 0, -2, UNALLOCATED]);
        r.validate().unwrap();
        assert_eq!(r.translate(1).unwrap().0, Tier::Unallocated);
    }

    #[test]
    fn too_many_rows_rejected() {
        let spec = TableSpec::new(0, 100, 3, 4, 4).unwrap();
        let st = FeatureStats::from_counts(0, &[1, 1, 1], 1.0, 1.0).unwrap();
        assert!(matches!(
            build_remap(&placement(4), &st, &spec),
            Err(Error::InvalidArgument(_))
        ));
        let huge = TableSpec::new(0, 100, 1 << 31, 4, 4).unwrap();
        assert!(matches!(
            build_remap(&placement(0), &st, &huge),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let r = remap(&[3, 0, 9, 9, 2, 0, 1], 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.remap");
        r.write(&p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, 29 + 4 * 7);
        assert_eq!(r.serialized_len(), 29 + 4 * 7);
        assert_eq!(RemapTable::read(&p).unwrap(), r);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(RemapTable::read(&p), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn bijective(counts in prop::collection::vec(0u64..6, 1..60), frac in 0.0f64..=1.0) {
            let rows = (frac * counts.len() as f64).floor() as u64;
            let r = remap(&counts, rows);
            r.validate().unwrap();
            let mut seen = std::collections::HashSet::new();
            for i in 0..counts.len() as u64 {
                prop_assert!(seen.insert(r.translate(i).unwrap()));
            }
            let fast: Vec<usize> = (0..counts.len()).filter(|&i| r.entries()[i] >= 0).collect();
            prop_assert_eq!(fast.len() as u64, rows);
            // Every fast row is at least as hot as every slow row.
            let min_fast = fast.iter().map(|&i| counts[i]).min().unwrap_or(u64::MAX);
            let max_slow = (0..counts.len()).filter(|&i| r.entries()[i] < 0).map(|i| counts[i]).max().unwrap_or(0);
            prop_assert!(rows == 0 || min_fast >= max_slow);
        }
    }
}

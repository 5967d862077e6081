//! Text trace format.
//!
//! ```text
//! #shardplan-trace v1 tables=<J> samples=<N>
//! T <table_id> <cardinality> <hash_size> <dim> <elem_bytes>     (one per table)
//! R <sample_id> <table_id> <id1>,<id2>,...                      (one per record)
//! ```
//!
//! Lines starting with `#` after the header are comments. Paths ending in
//! `.gz` are gzip-compressed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{TableSpec, Trace};
use crate::error::{Error, Result};

const MAGIC: &str = "#shardplan-trace v1";

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn write_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    write_trace_with_comments(trace, path, &[])
}

/// Writes `trace`, with `comments` emitted as `# ...` lines after the header.
pub fn write_trace_with_comments(
    trace: &Trace,
    path: impl AsRef<Path>,
    comments: &[String],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let out = BufWriter::with_capacity(1 << 20, file);
    let res = if is_gz(path) {
        let mut enc = GzEncoder::new(out, Compression::default());
        write_body(trace, &mut enc, comments).and_then(|_| enc.finish()?.flush())
    } else {
        let mut out = out;
        write_body(trace, &mut out, comments)
    };
    res.map_err(|e| Error::io(path, e))
}

fn write_body<W: Write>(trace: &Trace, w: &mut W, comments: &[String]) -> std::io::Result<()> {
    writeln!(
        w,
        "{MAGIC} tables={} samples={}",
        trace.tables().len(),
        trace.num_samples()
    )?;
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    for t in trace.tables() {
        writeln!(
            w,
            "T {} {} {} {} {}",
            t.table_id, t.cardinality, t.hash_size, t.dim, t.elem_bytes
        )?;
    }
    let mut line = String::new();
    for rec in trace.records() {
        use std::fmt::Write as _;
        line.clear();
        let _ = write!(line, "R {} {} ", rec.sample_id, rec.table_id);
        for (k, id) in rec.ids.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            let _ = write!(line, "{id}");
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let src: Box<dyn Read> = if is_gz(path) {
        Box::new(MultiGzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse(BufReader::with_capacity(1 << 20, src), path)
}

fn parse<R: BufRead>(reader: R, path: &Path) -> Result<Trace> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate().map(|(k, l)| (k + 1, l));

    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| perr(1, format!("expected header starting with `{MAGIC}`")))?;
    let (mut n_tables, mut n_samples) = (None, None);
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("tables", v)) => n_tables = v.parse::<usize>().ok(),
            Some(("samples", v)) => n_samples = v.parse::<u64>().ok(),
            _ => return Err(perr(1, format!("unexpected header field `{field}`"))),
        }
    }
    let n_tables = n_tables.ok_or_else(|| perr(1, "header is missing tables=<J>".into()))?;
    let n_samples = n_samples.ok_or_else(|| perr(1, "header is missing samples=<N>".into()))?;

    let mut tables: Vec<TableSpec> = Vec::with_capacity(n_tables);
    let mut builder = None;
    let mut ids: Vec<u64> = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_ascii_whitespace();
        match parts.next() {
            Some("T") => {
                if builder.is_some() {
                    return Err(perr(lineno, "table line after the first record".into()));
                }
                let nums: Vec<u64> = parts
                    .map(|p| p.parse::<u64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| perr(lineno, format!("bad table line: {e}")))?;
                let [id, card, hash, dim, elem] = nums[..] else {
                    return Err(perr(
                        lineno,
                        format!("table line needs 5 fields, got {}", nums.len()),
                    ));
                };
                let spec = TableSpec {
                    table_id: u32::try_from(id)
                        .map_err(|_| perr(lineno, "table id too large".into()))?,
                    cardinality: card,
                    hash_size: hash,
                    dim: u32::try_from(dim).map_err(|_| perr(lineno, "dim too large".into()))?,
                    elem_bytes: u32::try_from(elem)
                        .map_err(|_| perr(lineno, "elem_bytes too large".into()))?,
                };
                spec.validate()
                    .map_err(|e| Error::validation(format!("line {lineno}: {e}")))?;
                tables.push(spec);
            }
            Some("R") => {
                if builder.is_none() {
                    if tables.len() != n_tables {
                        return Err(Error::validation(format!(
                            "line {lineno}: header declares {n_tables} tables but {} were listed",
                            tables.len()
                        )));
                    }
                    builder = Some(
                        Trace::builder(tables.clone(), n_samples)
                            .map_err(|e| Error::validation(format!("line {lineno}: {e}")))?,
                    );
                }
                let (Some(sid), Some(tid), Some(list), None) =
                    (parts.next(), parts.next(), parts.next(), parts.next())
                else {
                    return Err(perr(
                        lineno,
                        "record line needs `R <sample> <table> <ids>`".into(),
                    ));
                };
                let sid: u64 = sid
                    .parse()
                    .map_err(|e| perr(lineno, format!("bad sample id: {e}")))?;
                let tid: u32 = tid
                    .parse()
                    .map_err(|e| perr(lineno, format!("bad table id: {e}")))?;
                ids.clear();
                for tok in list.split(',') {
                    ids.push(
                        tok.parse()
                            .map_err(|e| perr(lineno, format!("bad id `{tok}`: {e}")))?,
                    );
                }
                builder
                    .as_mut()
                    .unwrap()
                    .push(sid, tid, &ids)
                    .map_err(|e| Error::validation(format!("line {lineno}: {e}")))?;
            }
            Some(other) => return Err(perr(lineno, format!("unknown line tag `{other}`"))),
            None => {}
        }
    }
    match builder {
        Some(b) => Ok(b.finish()),
        None => {
            if tables.len() != n_tables {
                return Err(Error::validation(format!(
                    "header declares {n_tables} tables but {} were listed",
                    tables.len()
                )));
            }
            Ok(Trace::builder(tables, n_samples)?.finish())
        }
    }
}

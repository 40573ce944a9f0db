//! Instance representation and the TSV corpus format.
//!
//! A corpus file is UTF-8 TSV with a `#fields:<N>` header line, then one
//! instance per line: `instance_id<TAB>label<TAB>value_0<TAB>...<TAB>value_{N-1}`.
//! An empty value column means the field is absent (masked); labels are `0`,
//! `1`, or `?` for unlabeled inference-only data. Raw value strings are hashed
//! to 64-bit tokens at ingestion and never stored.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hashing::value_token;

/// One instance's categorical feature assignment across `N` fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    pub instance_id: u64,
    /// `None` marks a masked/absent field; it contributes a zero embedding.
    pub fields: Vec<Option<u64>>,
    pub label: Option<u8>,
}

impl FeatureVector {
    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn present(&self) -> Vec<bool> {
        self.fields.iter().map(Option::is_some).collect()
    }
}

fn parse_header(line: &str) -> Result<usize> {
    let rest = line
        .strip_prefix("#fields:")
        .ok_or_else(|| Error::Format(format!("corpus header must be '#fields:<N>', got {line:?}")))?;
    let n: usize = rest
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad field count in corpus header: {rest:?}")))?;
    if n == 0 {
        return Err(Error::Format("corpus declares zero fields".into()));
    }
    Ok(n)
}

fn parse_line(line: &str, num_fields: usize, lineno: usize) -> Result<FeatureVector> {
    let mut cols = line.split('\t');
    let id_col = cols
        .next()
        .ok_or_else(|| Error::Data(format!("line {lineno}: empty record")))?;
    let instance_id: u64 = id_col
        .parse()
        .map_err(|_| Error::Data(format!("line {lineno}: bad instance id {id_col:?}")))?;
    let label_col = cols
        .next()
        .ok_or_else(|| Error::Data(format!("line {lineno}: missing label column")))?;
    let label = match label_col {
        "0" => Some(0),
        "1" => Some(1),
        "?" => None,
        other => {
            return Err(Error::Data(format!(
                "line {lineno}: label must be 0, 1 or ?, got {other:?}"
            )))
        }
    };
    let mut fields = Vec::with_capacity(num_fields);
    for col in cols {
        if col.is_empty() {
            fields.push(None);
        } else {
            fields.push(Some(value_token(col)));
        }
    }
    if fields.len() != num_fields {
        return Err(Error::Data(format!(
            "line {lineno}: expected {num_fields} value columns, got {}",
            fields.len()
        )));
    }
    Ok(FeatureVector {
        instance_id,
        fields,
        label,
    })
}

/// Streams a corpus file, invoking `f` per instance. Returns the field count.
pub fn for_each_instance<F>(path: &Path, mut f: F) -> Result<usize>
where
    F: FnMut(FeatureVector) -> Result<()>,
{
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty corpus file".into()))??;
    let num_fields = parse_header(&header)?;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        f(parse_line(&line, num_fields, i + 2)?)?;
    }
    Ok(num_fields)
}

/// Reads a whole corpus into memory. Returns `(num_fields, instances)`.
pub fn read_corpus(path: &Path) -> Result<(usize, Vec<FeatureVector>)> {
    let mut out = Vec::new();
    let n = for_each_instance(path, |fv| {
        out.push(fv);
        Ok(())
    })?;
    Ok((n, out))
}

/// Writes instances in the corpus format. `values` supplies the raw string
/// for each (instance, field); `None` emits an empty (masked) column.
pub fn write_corpus<W: Write>(
    out: &mut W,
    num_fields: usize,
    rows: impl Iterator<Item = (u64, Option<u8>, Vec<Option<String>>)>,
) -> Result<()> {
    writeln!(out, "#fields:{num_fields}")?;
    for (id, label, values) in rows {
        debug_assert_eq!(values.len(), num_fields);
        let label = match label {
            Some(0) => "0",
            Some(_) => "1",
            None => "?",
        };
        write!(out, "{id}\t{label}")?;
        for v in &values {
            match v {
                Some(s) => write!(out, "\t{s}")?,
                None => write!(out, "\t")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Ground-truth table: `instance_id<TAB>probability` per line.
pub fn write_ground_truth(path: &Path, rows: &[(u64, f64)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (id, p) in rows {
        writeln!(out, "{id}\t{p:.17e}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<(u64, f64)>> {
    let file = File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (id, p) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("ground truth line {}: missing tab", i + 1)))?;
        let id: u64 = id
            .parse()
            .map_err(|_| Error::Format(format!("ground truth line {}: bad id", i + 1)))?;
        let p: f64 = p
            .parse()
            .map_err(|_| Error::Format(format!("ground truth line {}: bad probability", i + 1)))?;
        rows.push((id, p));
    }
    Ok(rows)
}

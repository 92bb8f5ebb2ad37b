//! Text feature files.
//!
//! ```text
//! d=<int> classes=<int> rows=<int>
//! <label>,<f1>,...,<fd>
//! ```
//!
//! Values are written with 17 significant digits.

use std::io::Write;
use std::path::Path;

use gcl_core::stream::{FeatureSource, FeatureTable};
use gcl_core::Matrix;

use crate::error::{HarnessError, Result};

pub fn write_features(out: &mut impl Write, source: &dyn FeatureSource) -> std::io::Result<()> {
    writeln!(
        out,
        "d={} classes={} rows={}",
        source.dim(),
        source.num_classes(),
        source.len()
    )?;
    let mut row = vec![0.0; source.dim()];
    for s in 0..source.len() {
        source
            .write_features(s, &mut row)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        write!(out, "{}", source.label(s))?;
        for v in &row {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_feature_file(path: &Path, source: &dyn FeatureSource) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_features(&mut out, source)
        .and_then(|()| out.flush())
        .map_err(|e| HarnessError::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureTable> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_features(&text, path)
}

/// Parses the feature format. Errors carry the byte offset of the offending
/// token.
pub fn parse_features(text: &str, path: &Path) -> Result<FeatureTable> {
    let err = |offset: usize, message: String| HarnessError::Parse {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let mut lines = line_offsets(text);
    let Some((h_off, header)) = lines.next() else {
        return Err(err(0, "empty file".into()));
    };
    let mut fields = [None; 3];
    let mut pos = h_off;
    for token in header.split(' ') {
        let slot = match token.split_once('=') {
            Some(("d", v)) => Some((0, v)),
            Some(("classes", v)) => Some((1, v)),
            Some(("rows", v)) => Some((2, v)),
            _ => None,
        };
        let (i, v) = slot.ok_or_else(|| err(pos, format!("unexpected header token `{token}`")))?;
        let n: usize = v
            .parse()
            .map_err(|_| err(pos, format!("header value `{v}` is not a non-negative integer")))?;
        if fields[i].replace(n).is_some() {
            return Err(err(pos, format!("duplicate header token `{token}`")));
        }
        pos += token.len() + 1;
    }
    let [Some(d), Some(classes), Some(rows)] = fields else {
        return Err(err(h_off, "header must be `d=<int> classes=<int> rows=<int>`".into()));
    };
    let mut labels = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows * d);
    for (off, line) in lines {
        if line.is_empty() {
            continue;
        }
        if labels.len() == rows {
            return Err(err(off, format!("more rows than the declared {rows}")));
        }
        let mut pos = off;
        let mut parts = line.split(',');
        let label_text = parts.next().unwrap_or_default();
        let label: usize = label_text
            .trim()
            .parse()
            .map_err(|_| err(pos, format!("label `{label_text}` is not a non-negative integer")))?;
        if label >= classes {
            return Err(err(pos, format!("label {label} out of range for {classes} classes")));
        }
        pos += label_text.len() + 1;
        let mut width = 0;
        for part in parts {
            let v: f64 = part
                .trim()
                .parse()
                .map_err(|_| err(pos, format!("`{part}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(pos, format!("non-finite value `{part}`")));
            }
            data.push(v);
            width += 1;
            pos += part.len() + 1;
        }
        if width != d {
            return Err(err(off, format!("row has {width} features, header declares d={d}")));
        }
        labels.push(label);
    }
    if labels.len() != rows {
        return Err(err(
            text.len(),
            format!("found {} rows, header declares {rows}", labels.len()),
        ));
    }
    let matrix = Matrix::from_vec(rows, d, data).map_err(HarnessError::Core)?;
    FeatureTable::new(classes, labels, matrix).map_err(HarnessError::Core)
}

/// Lines with their starting byte offsets, line endings stripped.
fn line_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |raw| {
        let start = offset;
        offset += raw.len();
        (start, raw.trim_end_matches(['\n', '\r']))
    })
}

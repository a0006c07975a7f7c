//! Plain-text parameter bundle.
//!
//! ```text
//! ecotoll-checkpoint 1
//! <name> <rows> <cols>
//! <row 0 values, space separated>
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a
//! save/load cycle is bit-exact and identical parameters give identical
//! files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{DiffError, ParamStore, Result};

const MAGIC: &str = "ecotoll-checkpoint 1";

pub fn write_checkpoint(params: &ParamStore) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    for (name, m) in params.iter() {
        writeln!(out, "{name} {} {}", m.nrows(), m.ncols()).unwrap();
        for row in m.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
    }
    out
}

pub fn read_checkpoint(text: &str) -> Result<ParamStore> {
    let bad = |msg: String| DiffError::Invalid(format!("checkpoint: {msg}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(bad("missing header".into())),
    }
    let mut store = ParamStore::new();
    while let Some((ln, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        let [name, rows, cols] = parts[..] else {
            return Err(bad(format!("line {}: expected `name rows cols`", ln + 1)));
        };
        let rows: usize = rows
            .parse()
            .map_err(|_| bad(format!("line {}: bad row count", ln + 1)))?;
        let cols: usize = cols
            .parse()
            .map_err(|_| bad(format!("line {}: bad column count", ln + 1)))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| bad(format!("{name}: truncated")))?;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| bad(format!("line {}: bad value {tok}", ln + 1)))?,
                );
            }
            if data.len() - before != cols {
                return Err(bad(format!("line {}: expected {cols} values", ln + 1)));
            }
        }
        let m = Array2::from_shape_vec((rows, cols), data).expect("counted");
        store.insert(name, m)?;
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> std::io::Result<()> {
    fs::write(path, write_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> std::result::Result<ParamStore, Box<dyn std::error::Error + Send + Sync>> {
    let text = fs::read_to_string(path)?;
    Ok(read_checkpoint(&text)?)
}

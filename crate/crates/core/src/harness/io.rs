//! Plain-text tensor files: the first line holds the dimensions, the rest
//! hold the values in row-major order, whitespace separated.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut s = String::new();
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    s.push_str(&dims.join(" "));
    s.push('\n');
    let width = t.shape().last().copied().unwrap_or(1).max(1);
    for chunk in t.data().chunks(width) {
        let vals: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", vals.join(" "));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, head) = lines.next().ok_or_else(|| Error::Parse {
        file: file.clone(),
        line: 1,
        msg: "empty tensor file".into(),
    })?;
    let shape = head
        .split_whitespace()
        .map(|w| w.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse {
            file: file.clone(),
            line: 1,
            msg: format!("bad dimension: {e}"),
        })?;
    let mut data = Vec::new();
    for (i, line) in lines {
        for w in line.split_whitespace() {
            data.push(w.parse::<f64>().map_err(|e| Error::Parse {
                file: file.clone(),
                line: i + 1,
                msg: format!("bad value {w:?}: {e}"),
            })?);
        }
    }
    Tensor::new(shape, data).map_err(|e| Error::Parse {
        file,
        line: 1,
        msg: e.to_string(),
    })
}

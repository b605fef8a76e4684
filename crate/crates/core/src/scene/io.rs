use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::LabeledCloud;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "semaffine-scene v1";

/// Serializes a cloud; `{:.16e}` keeps 17 significant digits, enough to
/// round-trip every `f64`.
pub fn format_scene(cloud: &LabeledCloud, seed: u64) -> String {
    let mut s = String::with_capacity(cloud.len() * 80 + 64);
    writeln!(s, "{MAGIC}").unwrap();
    writeln!(s, "n={} classes={} seed={seed}", cloud.len(), cloud.classes).unwrap();
    for (j, &l) in cloud.labels.iter().enumerate() {
        let p = cloud.coords.row(j);
        writeln!(s, "{:.16e} {:.16e} {:.16e} {l}", p[0], p[1], p[2]).unwrap();
    }
    s
}

pub fn write_scene(path: &Path, cloud: &LabeledCloud, seed: u64) -> Result<()> {
    fs::write(path, format_scene(cloud, seed)).map_err(|e| Error::io(path, e))
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn header_field<'a>(line: usize, tok: Option<&'a str>, key: &str) -> Result<&'a str> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing '{key}=' field")))?;
    tok.strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| parse_err(line, format!("expected '{key}=…', found '{tok}'")))
}

/// Parses scene text; returns the cloud and the recorded seed.
pub fn parse_scene(text: &str) -> Result<(LabeledCloud, u64)> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.trim_end() == MAGIC => {}
        Some(l) => return Err(parse_err(1, format!("expected '{MAGIC}', found '{l}'"))),
        None => return Err(parse_err(1, "empty file")),
    }
    let header = lines.next().ok_or_else(|| parse_err(2, "missing header"))?;
    let mut toks = header.split_whitespace();
    let num = |tok: &str, key: &str| -> Result<u64> {
        tok.parse()
            .map_err(|_| parse_err(2, format!("'{key}' is not a non-negative integer: '{tok}'")))
    };
    let n = num(header_field(2, toks.next(), "n")?, "n")? as usize;
    let classes = num(header_field(2, toks.next(), "classes")?, "classes")? as usize;
    let seed = num(header_field(2, toks.next(), "seed")?, "seed")?;
    if let Some(extra) = toks.next() {
        return Err(parse_err(2, format!("unexpected header field '{extra}'")));
    }
    if n == 0 {
        return Err(Error::Contract("scene has no points".into()));
    }

    let mut coords = Vec::with_capacity(n * 3);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        if line.trim().is_empty() {
            continue;
        }
        if labels.len() == n {
            return Err(parse_err(lineno, format!("more than the declared {n} points")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(
                lineno,
                format!("expected 'x y z label', found {} fields", fields.len()),
            ));
        }
        for f in &fields[..3] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad coordinate '{f}'")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite coordinate '{f}'")));
            }
            coords.push(v);
        }
        let label: usize = fields[3]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad label '{}'", fields[3])))?;
        if label >= classes {
            return Err(Error::Validation(format!(
                "line {lineno} (point {}): label {label} out of range for {classes} classes",
                labels.len()
            )));
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(parse_err(
            text.lines().count() + 1,
            format!("declared {n} points, found {}", labels.len()),
        ));
    }
    let cloud = LabeledCloud::new(Tensor::new(&[n, 3], coords)?, labels, classes)?;
    Ok((cloud, seed))
}

pub fn read_scene(path: &Path) -> Result<(LabeledCloud, u64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text).map_err(|e| Error::Context {
        context: path.display().to_string(),
        source: Box::new(e),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory when read.
    pub path: PathBuf,
    pub split: Split,
}

/// One `path split` line per scene; `#` starts a comment.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(p), Some(tag), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(i + 1, format!("expected 'path split', found '{line}'")));
        };
        let split = match tag {
            "train" => Split::Train,
            "val" => Split::Val,
            _ => return Err(parse_err(i + 1, format!("split must be train or val, found '{tag}'"))),
        };
        out.push(ManifestEntry {
            path: dir.join(p),
            split,
        });
    }
    Ok(out)
}

/// Paths are written relative to the manifest's directory when possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut s = String::new();
    for e in entries {
        let rel = e.path.strip_prefix(dir).unwrap_or(&e.path);
        writeln!(s, "{} {}", rel.display(), e.split.as_str()).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

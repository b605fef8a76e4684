use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{RunConfig, Sgd};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamGroup;
use crate::tensor::Tensor;

const MAGIC: &str = "semaffine-checkpoint v1";

/// One named tensor of the payload.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub velocity: Tensor,
}

/// Text manifest plus a flat little-endian `f64` payload: for every
/// parameter its value, then its momentum buffer, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub tensors: Vec<CheckpointTensor>,
}

pub fn payload_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn from_state(config: &RunConfig, model: &Model, opt: &Sgd) -> Self {
        let tensors = model
            .store
            .iter()
            .zip(&opt.velocity)
            .map(|(p, v)| CheckpointTensor {
                name: p.name.clone(),
                group: p.group,
                value: p.value.clone(),
                velocity: v.clone(),
            })
            .collect();
        Checkpoint {
            config: config.clone(),
            step: opt.step,
            tensors,
        }
    }

    /// Rebuilds the model and optimizer; every parameter of the configured
    /// model must be present with its recorded shape.
    pub fn restore(&self) -> Result<(Model, Sgd)> {
        let mut model = Model::new(self.config.model.clone(), self.config.train.seed)?;
        if model.store.len() != self.tensors.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        let mut velocity = Vec::with_capacity(self.tensors.len());
        for (p, t) in model.store.iter_mut().zip(&self.tensors) {
            if p.name != t.name || p.group != t.group || p.value.shape() != t.value.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint tensor {} {:?} does not match model parameter {} {:?}",
                    t.name,
                    t.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t.value.clone();
            velocity.push(t.velocity.clone());
        }
        Ok((model, Sgd { velocity, step: self.step }))
    }

    pub fn manifest_text(&self, payload_name: &str) -> String {
        let mut s = String::new();
        writeln!(s, "{MAGIC}").unwrap();
        writeln!(s, "step {}", self.step).unwrap();
        writeln!(s, "payload {payload_name}").unwrap();
        for line in self.config.to_text().lines() {
            writeln!(s, "config {line}").unwrap();
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let bytes = t.value.numel() * 8;
            writeln!(
                s,
                "tensor {} {} {} {} {}",
                t.name,
                t.group.as_str(),
                shape_str(t.value.shape()),
                offset,
                bytes
            )
            .unwrap();
            offset += 2 * bytes;
        }
        s
    }

    pub fn payload(&self) -> Vec<u8> {
        let n: usize = self.tensors.iter().map(|t| 2 * t.value.numel()).sum();
        let mut out = Vec::with_capacity(n * 8);
        for t in &self.tensors {
            for v in t.value.data().iter().chain(t.velocity.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bin = payload_path(path);
        let name = bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        fs::write(&bin, self.payload()).map_err(|e| Error::io(&bin, e))?;
        fs::write(path, self.manifest_text(&name)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bin = payload_path(path);
        let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        Self::parse(&text, &payload).map_err(|e| Error::Context {
            context: path.display().to_string(),
            source: Box::new(e),
        })
    }

    pub fn parse(text: &str, payload: &[u8]) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(perr(1, format!("expected '{MAGIC}'"))),
        }
        let mut step = None;
        let mut config_text = String::new();
        let mut specs = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "step" => {
                    step = Some(rest.parse().map_err(|_| perr(ln, format!("bad step '{rest}'")))?)
                }
                "payload" => {}
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 5 {
                        return Err(perr(ln, "expected 'tensor name group shape offset bytes'".into()));
                    }
                    let group = ParamGroup::parse(f[1]).ok_or_else(|| perr(ln, format!("bad group '{}'", f[1])))?;
                    let shape: Vec<usize> = if f[2].is_empty() {
                        Vec::new()
                    } else {
                        f[2].split('x')
                            .map(|d| d.parse().map_err(|_| perr(ln, format!("bad shape '{}'", f[2]))))
                            .collect::<Result<_>>()?
                    };
                    let offset: usize = f[3].parse().map_err(|_| perr(ln, format!("bad offset '{}'", f[3])))?;
                    let bytes: usize = f[4].parse().map_err(|_| perr(ln, format!("bad length '{}'", f[4])))?;
                    if shape.iter().product::<usize>() * 8 != bytes {
                        return Err(perr(ln, format!("shape {} does not match {bytes} bytes", f[2])));
                    }
                    specs.push((ln, f[0].to_string(), group, shape, offset, bytes));
                }
                "" => {}
                _ => return Err(perr(ln, format!("unknown record '{kind}'"))),
            }
        }
        let step = step.ok_or_else(|| perr(2, "missing step".into()))?;
        let config = RunConfig::parse(&config_text)?;

        let read = |from: usize, bytes: usize| -> Vec<f64> {
            payload[from..from + bytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        };
        let mut expected = 0usize;
        let mut tensors = Vec::with_capacity(specs.len());
        for (ln, name, group, shape, offset, bytes) in specs {
            if offset != expected || offset + 2 * bytes > payload.len() {
                return Err(Error::Validation(format!(
                    "line {ln}: tensor {name} at byte {offset} does not fit a {}-byte payload",
                    payload.len()
                )));
            }
            tensors.push(CheckpointTensor {
                name,
                group,
                value: Tensor::new(&shape, read(offset, bytes))?,
                velocity: Tensor::new(&shape, read(offset + bytes, bytes))?,
            });
            expected = offset + 2 * bytes;
        }
        if expected != payload.len() {
            return Err(Error::Validation(format!(
                "manifest covers {expected} bytes, payload has {}",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            config,
            step,
            tensors,
        })
    }
}

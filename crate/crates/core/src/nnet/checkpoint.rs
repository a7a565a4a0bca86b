//! Checkpoint files: a text manifest followed by a little-endian `f64`
//! payload in manifest order.
//!
//! ```text
//! qdiffusion-checkpoint 1
//! seed 42
//! step 100
//! dtype f64le
//! meta <key> <value>
//! tensor <param|state> <classical|quantum|-> <path> <d0,d1,...>
//! config | <line of the run configuration>
//! payload
//! <raw bytes>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::{ModelParams, ParamKind};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "qdiffusion-checkpoint 1";
const PAYLOAD: &str = "payload\n";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Echo of the configuration that produced the file.
    pub config: String,
    pub seed: u64,
    pub step: u64,
    pub params: ModelParams,
    /// Auxiliary tensors such as optimizer moments.
    pub state: BTreeMap<String, Tensor>,
    /// Free-form single-line annotations.
    pub meta: BTreeMap<String, String>,
}

fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!("{what} `{s}` must be a non-empty token without spaces")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&format!("seed {}\nstep {}\ndtype f64le\n", self.seed, self.step));
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(Error::invalid(format!("meta `{k}` spans lines")));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload: Vec<u8> = Vec::new();
        for (path, p) in self.params.iter() {
            check_token("parameter path", path)?;
            head.push_str(&format!(
                "tensor param {} {path} {}\n",
                p.kind.name(),
                fmt_shape(p.value.shape())
            ));
            for v in p.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (path, t) in &self.state {
            check_token("state path", path)?;
            head.push_str(&format!("tensor state - {path} {}\n", fmt_shape(t.shape())));
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        for line in self.config.lines() {
            head.push_str("config | ");
            head.push_str(line);
            head.push('\n');
        }
        head.push_str(PAYLOAD);
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: origin.to_path_buf(),
            message,
        };
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("manifest has no payload marker".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| bad("manifest is not UTF-8".into()))?;
            pos += end + 1;
            if line == PAYLOAD.trim_end() {
                break;
            }
            lines.push(line);
        }
        if lines.first() != Some(&MAGIC) {
            return Err(bad("not a checkpoint (bad header)".into()));
        }
        let mut ck = Checkpoint::default();
        let mut payload = &bytes[pos..];
        let mut config = Vec::new();
        let take = |n: usize, payload: &mut &[u8]| -> Result<Vec<f64>> {
            if payload.len() < 8 * n {
                return Err(bad("payload is shorter than the manifest declares".into()));
            }
            let (head, rest) = payload.split_at(8 * n);
            *payload = rest;
            Ok(head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        for (i, line) in lines.iter().enumerate().skip(1) {
            let lineno = i + 1;
            if let Some(rest) = line.strip_prefix("config | ") {
                config.push(rest.to_string());
                continue;
            }
            if *line == "config |" {
                config.push(String::new());
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            match fields[..] {
                ["seed", v] => ck.seed = v.parse().map_err(|_| bad(format!("line {lineno}: bad seed")))?,
                ["step", v] => ck.step = v.parse().map_err(|_| bad(format!("line {lineno}: bad step")))?,
                ["dtype", "f64le"] => {}
                ["dtype", other] => return Err(bad(format!("unsupported element type {other}"))),
                ["meta", k, ..] => {
                    let v = line[5 + k.len()..].trim_start().to_string();
                    ck.meta.insert(k.to_string(), v);
                }
                ["tensor", role, kind, path, shape] => {
                    let shape: Vec<usize> = if shape == "scalar" {
                        Vec::new()
                    } else {
                        shape
                            .split(',')
                            .map(|d| d.parse())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad(format!("line {lineno}: bad shape `{shape}`")))?
                    };
                    let n = shape.iter().product();
                    let t = Tensor::new(&shape, take(n, &mut payload)?)?;
                    match (role, kind) {
                        ("param", "classical") => ck.params.insert(path, ParamKind::Classical, t),
                        ("param", "quantum") => ck.params.insert(path, ParamKind::Quantum, t),
                        ("state", _) => {
                            ck.state.insert(path.to_string(), t);
                        }
                        _ => return Err(bad(format!("line {lineno}: unknown tensor role {role}/{kind}"))),
                    }
                }
                _ => return Err(bad(format!("line {lineno}: unrecognised manifest entry"))),
            }
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing payload bytes", payload.len())));
        }
        ck.config = config.join("\n");
        if !ck.config.is_empty() {
            ck.config.push('\n');
        }
        Ok(ck)
    }

    /// Writes via a temporary file and rename, so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

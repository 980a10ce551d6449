//! Single-file checkpoints: a text header (magic line, config, parameter
//! table) followed by every parameter value as little-endian `f64`.
//!
//! ```text
//! CSFIQA-CHECKPOINT 1
//! config <line count>
//! <config file lines>
//! params <count>
//! <name> <frozen 0|1> <dims joined by x> <offset> <len>
//! data <value count>
//! <raw bytes>
//! ```
//!
//! Offsets and lengths count `f64` values from the start of the data
//! section. Nothing time-dependent is written, so identical models give
//! identical files.

use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Csfiqa;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &str = "CSFIQA-CHECKPOINT 1";

pub fn to_bytes(cfg: &Config, model: &Csfiqa) -> Vec<u8> {
    let cfg_text = cfg.serialize();
    let mut head = format!("{MAGIC}\nconfig {}\n{cfg_text}", cfg_text.lines().count());
    head.push_str(&format!("params {}\n", model.params.len()));
    let mut offset = 0;
    for (_, p) in model.params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let len = p.value.numel();
        head.push_str(&format!(
            "{} {} {} {offset} {len}\n",
            p.name,
            u8::from(p.frozen),
            dims.join("x")
        ));
        offset += len;
    }
    head.push_str(&format!("data {offset}\n"));
    let mut out = head.into_bytes();
    out.reserve(offset * 8);
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, cfg: &Config, model: &Csfiqa) -> Result<()> {
    fs::write(path, to_bytes(cfg, model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
    }

    fn tagged(&mut self, tag: &str) -> Result<usize> {
        let line = self.line()?;
        line.strip_prefix(tag)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad(&format!("expected `{tag} <n>`, got {line:?}")))
    }
}

fn bad(msg: &str) -> Error {
    Error::Data(format!("checkpoint: {msg}"))
}

/// Rebuilds the model described by the embedded config and loads the
/// stored values into it.
pub fn from_bytes(bytes: &[u8]) -> Result<(Config, Csfiqa)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.line()? != MAGIC {
        return Err(bad("missing magic line"));
    }
    let n_cfg = r.tagged("config")?;
    let mut cfg_text = String::new();
    for _ in 0..n_cfg {
        cfg_text.push_str(r.line()?);
        cfg_text.push('\n');
    }
    let cfg = Config::parse(&cfg_text)?;

    let n_params = r.tagged("params")?;
    let mut table = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let line = r.line()?;
        let f: Vec<&str> = line.split(' ').collect();
        let parsed = (|| {
            let [name, frozen, dims, off, len] = f.as_slice() else {
                return None;
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().ok())
                .collect::<Option<_>>()?;
            let frozen = match *frozen {
                "0" => false,
                "1" => true,
                _ => return None,
            };
            Some((
                name.to_string(),
                frozen,
                shape,
                off.parse::<usize>().ok()?,
                len.parse::<usize>().ok()?,
            ))
        })();
        table.push(parsed.ok_or_else(|| bad(&format!("malformed parameter row {line:?}")))?);
    }
    let n_values = r.tagged("data")?;
    let data = &bytes[r.pos..];
    if data.len() != n_values * 8 {
        return Err(bad(&format!(
            "data section has {} bytes, expected {}",
            data.len(),
            n_values * 8
        )));
    }

    let mut store = ParamStore::new();
    for (name, frozen, shape, off, len) in table {
        if off + len > n_values || shape.iter().product::<usize>() != len {
            return Err(bad(&format!("parameter {name} has an inconsistent extent")));
        }
        let values = data[off * 8..(off + len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, Tensor::new(shape, values)?, frozen);
    }

    let mut model = Csfiqa::new(cfg.model.clone(), cfg.scl.clone(), cfg.sfa.clone(), 0)?;
    for ((_, a), (_, b)) in model.params.iter().zip(store.iter()) {
        if a.frozen != b.frozen {
            return Err(bad(&format!("parameter {} frozen flag mismatch", b.name)));
        }
    }
    model.params.load_values(&store)?;
    Ok((cfg, model))
}

pub fn load(path: &Path) -> Result<(Config, Csfiqa)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

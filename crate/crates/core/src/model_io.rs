//! Model files.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! | bytes      | content                                  |
//! |------------|------------------------------------------|
//! | 4          | magic `NGRW`                             |
//! | 4 (u32)    | format version, currently 1              |
//! | 4 (u32)    | number of layer sizes `L + 1`            |
//! | 8 each     | layer sizes `H_0 .. H_L` as u64          |
//! | 8 (u64)    | parameter count `q`                      |
//! | 8 each     | `q` parameters as f64 in flat order      |
//!
//! The flat order lists, for each layer and each neuron, the bias followed
//! by the incoming weights. The text export carries the same numbers in
//! shortest round-trip decimal form.

use std::path::Path;

use crate::network::{ParamVector, Topology};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NGRW";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamVector) -> Vec<u8> {
    let sizes = params.topology().sizes();
    let mut out = Vec::with_capacity(20 + 8 * (sizes.len() + params.len()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &h in sizes {
        out.extend_from_slice(&(h as u64).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Model(format!("truncated while reading {what} at byte {}", self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice has length N"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(what)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamVector> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take::<4>("magic")? != MAGIC {
        return Err(Error::Model("not a model file (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Model(format!("unsupported format version {version}")));
    }
    let count = c.u32("layer count")? as usize;
    if count > (bytes.len() - c.pos) / 8 {
        return Err(Error::Model(format!("layer count {count} exceeds file size")));
    }
    let sizes = (0..count)
        .map(|_| c.u64("layer size").and_then(|h| usize::try_from(h).map_err(|_| Error::Model("layer size overflows".into()))))
        .collect::<Result<Vec<usize>>>()?;
    let topology = Topology::new(&sizes)?;
    let q = c.u64("parameter count")?;
    if q != topology.param_count() as u64 {
        return Err(Error::Model(format!("parameter count {q} does not match topology {topology}")));
    }
    let flat = (0..q).map(|_| c.take::<8>("parameter").map(f64::from_le_bytes)).collect::<Result<Vec<f64>>>()?;
    if c.pos != bytes.len() {
        return Err(Error::Model(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    ParamVector::from_flat(&topology, flat)
}

pub fn save(params: &ParamVector, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamVector> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Model(format!("{}: {e}", path.display())))
}

/// One header line, then one line per neuron: `layer neuron bias w_0 w_1 ...`.
pub fn to_text(params: &ParamVector) -> String {
    let t = params.topology();
    let mut out = format!("netgrow model v{VERSION} topology {t} parameters {}\n", params.len());
    for l in 1..t.sizes().len() {
        for j in 0..t.width(l) {
            out.push_str(&format!("{l} {j} {}", params.bias(l, j)));
            for w in params.weight_row(l, j) {
                out.push(' ');
                out.push_str(&w.to_string());
            }
            out.push('\n');
        }
    }
    out
}

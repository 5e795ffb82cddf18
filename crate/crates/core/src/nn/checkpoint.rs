//! Binary network checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SENS1"
//! u32 rank, u32 dims[rank]                  input shape (per sample)
//! u32 layer_count
//! per layer: u32 tag, then tag-specific u32 fields
//!     0 Conv2d    filters, kernel_size, activation
//!     1 MaxPool2d window, stride
//!     2 Flatten
//!     3 Dense     units, activation
//! u32 seed_lo, u32 seed_hi
//! u64 parameter_count
//! f64 parameters[parameter_count]           layer order, weights then bias, row-major
//! ```
//!
//! Activation codes: 0 none, 1 ReLU, 2 sigmoid, 3 softmax.

use std::path::Path;

use super::{Activation, LayerSpec, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Shape;

pub const MAGIC: &[u8; 5] = b"SENS1";

fn activation_code(a: Activation) -> u32 {
    match a {
        Activation::None => 0,
        Activation::ReLU => 1,
        Activation::Sigmoid => 2,
        Activation::Softmax => 3,
    }
}

fn activation_from(code: u32) -> Result<Activation> {
    Ok(match code {
        0 => Activation::None,
        1 => Activation::ReLU,
        2 => Activation::Sigmoid,
        3 => Activation::Softmax,
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown activation code {other}"
            )))
        }
    })
}

fn u32_field(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("field {v} exceeds u32")))
}

pub fn encode(net: &Network) -> Result<Vec<u8>> {
    let spec = net.spec();
    let mut out = Vec::with_capacity(64 + net.param_count() * 8);
    out.extend_from_slice(MAGIC);
    let put = |out: &mut Vec<u8>, v: usize| -> Result<()> {
        out.extend_from_slice(&u32_field(v)?.to_le_bytes());
        Ok(())
    };
    put(&mut out, spec.input_shape.rank())?;
    for &d in spec.input_shape.dims() {
        put(&mut out, d)?;
    }
    put(&mut out, spec.layers.len())?;
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv2d {
                filters,
                kernel_size,
                activation,
            } => {
                put(&mut out, 0)?;
                put(&mut out, filters)?;
                put(&mut out, kernel_size)?;
                out.extend_from_slice(&activation_code(activation).to_le_bytes());
            }
            LayerSpec::MaxPool2d { window, stride } => {
                put(&mut out, 1)?;
                put(&mut out, window)?;
                put(&mut out, stride)?;
            }
            LayerSpec::Flatten => put(&mut out, 2)?,
            LayerSpec::Dense { units, activation } => {
                put(&mut out, 3)?;
                put(&mut out, units)?;
                out.extend_from_slice(&activation_code(activation).to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&(spec.seed as u32).to_le_bytes());
    out.extend_from_slice(&((spec.seed >> 32) as u32).to_le_bytes());
    let params = net.parameters();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic (expected SENS1)".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let rank = r.usize()?;
    if rank == 0 || rank > crate::tensor::MAX_RANK {
        return Err(Error::Checkpoint(format!("invalid input rank {rank}")));
    }
    let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let input_shape = Shape::new(dims).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let layer_count = r.usize()?;
    let mut layers = Vec::with_capacity(layer_count.min(64));
    for _ in 0..layer_count {
        layers.push(match r.u32()? {
            0 => LayerSpec::Conv2d {
                filters: r.usize()?,
                kernel_size: r.usize()?,
                activation: activation_from(r.u32()?)?,
            },
            1 => LayerSpec::MaxPool2d {
                window: r.usize()?,
                stride: r.usize()?,
            },
            2 => LayerSpec::Flatten,
            3 => LayerSpec::Dense {
                units: r.usize()?,
                activation: activation_from(r.u32()?)?,
            },
            tag => return Err(Error::Checkpoint(format!("unknown layer tag {tag}"))),
        });
    }
    let seed = r.u32()? as u64 | (r.u32()? as u64) << 32;
    let spec = NetworkSpec {
        input_shape,
        layers,
        seed,
    };
    let mut net =
        Network::new(spec).map_err(|e| Error::Checkpoint(format!("invalid layer stack: {e}")))?;
    let count = r.u64()?;
    if count != net.param_count() as u64 {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match the layer stack ({})",
            net.param_count()
        )));
    }
    let remaining = bytes.len() - r.pos;
    if remaining as u64 != count * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {remaining}",
            count * 8
        )));
    }
    let params: Vec<f64> = r
        .take(remaining)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    net.set_parameters(&params)
        .map_err(|e| Error::Checkpoint(format!("invalid parameters: {e}")))?;
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mlp, build_paper_cnn};

    #[test]
    fn round_trip_preserves_spec_and_params() {
        let net = build_paper_cnn(Shape::new(vec![1, 8, 8]).unwrap(), 3, 1, u64::MAX - 5).unwrap();
        let bytes = encode(&net).unwrap();
        assert_eq!(&bytes[..5], b"SENS1");
        let back = decode(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode(&build_mlp(3, 2, 0).unwrap()).unwrap();
        bytes[4] = b'2';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let net = build_mlp(3, 2, 0).unwrap();
        let mut bytes = encode(&net).unwrap();
        // input dim lives right after magic + rank
        bytes[9..13].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));

        let mut short = encode(&net).unwrap();
        short.truncate(short.len() - 8);
        assert!(matches!(decode(&short), Err(Error::Checkpoint(_))));
    }
}

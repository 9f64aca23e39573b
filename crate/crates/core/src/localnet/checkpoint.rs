//! Little-endian binary checkpoints:
//!
//! ```text
//! "SGR1" u32:modules
//!   per module: u32:layers, dims*, payload*, head
//!   dims:    u32:d_out u32:d_in u32:act
//!   payload: f64[d_out*d_in] f64[d_out]
//!   head:    u32:0 u32:K u32:d f64[K*d]                (fixed ETF)
//!          | u32:1 dims dims payload payload           (learnable MLP)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Activation, AuxHead, Block, Layer, LocalModule, MlpHead, Network};
use crate::diff::Tensor;
use crate::etf::EtfClassifier;

const MAGIC: &[u8; 4] = b"SGR1";
/// Upper bound on any single dimension, to reject corrupt headers before
/// allocating.
const MAX_DIM: u32 = 1 << 24;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn write_checkpoint(net: &Network, w: &mut impl Write) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u32(w, net.modules.len())?;
    for m in &net.modules {
        put_u32(w, m.block.layers.len())?;
        put_layers(w, &m.block.layers.iter().collect::<Vec<_>>())?;
        match &m.head {
            AuxHead::EtfFixed(e) => {
                put_u32(w, 0)?;
                put_u32(w, e.classes())?;
                put_u32(w, e.dim())?;
                put_f64s(w, e.matrix().data())?;
            }
            AuxHead::LearnableMlp(h) => {
                put_u32(w, 1)?;
                put_layers(w, &[&h.hidden, &h.classifier])?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Network, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let n = get_dim(r)?;
    let mut modules = Vec::with_capacity(n);
    for _ in 0..n {
        let nl = get_dim(r)?;
        let layers = get_layers(r, nl)?;
        let head = match get_u32(r)? {
            0 => {
                let k = get_dim(r)?;
                let d = get_dim(r)?;
                let m = Tensor::matrix(k, d, get_f64s(r, k * d)?);
                // stored matrices were valid ETFs; tolerate only rounding
                AuxHead::EtfFixed(
                    EtfClassifier::from_matrix(m, 1e-9)
                        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
                )
            }
            1 => {
                let mut ls = get_layers(r, 2)?;
                let classifier = ls.pop().unwrap();
                let hidden = ls.pop().unwrap();
                AuxHead::LearnableMlp(MlpHead { hidden, classifier })
            }
            t => return Err(CheckpointError::Corrupt(format!("unknown head tag {t}"))),
        };
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(CheckpointError::Corrupt("layer widths do not chain".into()));
            }
        }
        if layers.is_empty() {
            return Err(CheckpointError::Corrupt("module without layers".into()));
        }
        let module = LocalModule::new(Block { layers }, head)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        modules.push(module);
    }
    if modules.is_empty() {
        return Err(CheckpointError::Corrupt("no modules".into()));
    }
    for pair in modules.windows(2) {
        if pair[0].d_out() != pair[1].d_in() {
            return Err(CheckpointError::Corrupt("module widths do not chain".into()));
        }
    }
    Ok(Network { modules })
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network, CheckpointError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

fn put_u32(w: &mut impl Write, v: usize) -> io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn put_layers(w: &mut impl Write, layers: &[&Layer]) -> io::Result<()> {
    for l in layers {
        put_u32(w, l.d_out())?;
        put_u32(w, l.d_in())?;
        put_u32(
            w,
            match l.activation {
                Activation::Relu => 0,
                Activation::Identity => 1,
            },
        )?;
    }
    for l in layers {
        put_f64s(w, l.weight.data())?;
        put_f64s(w, l.bias.data())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_dim(r: &mut impl Read) -> Result<usize, CheckpointError> {
    let v = get_u32(r)?;
    if v > MAX_DIM {
        return Err(CheckpointError::Corrupt(format!("implausible size {v}")));
    }
    Ok(v as usize)
}

fn get_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn get_layers(r: &mut impl Read, n: usize) -> Result<Vec<Layer>, CheckpointError> {
    let mut dims = Vec::with_capacity(n);
    for _ in 0..n {
        let d_out = get_dim(r)?;
        let d_in = get_dim(r)?;
        if d_out == 0 || d_in == 0 {
            return Err(CheckpointError::Corrupt("zero-width layer".into()));
        }
        let act = match get_u32(r)? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            a => return Err(CheckpointError::Corrupt(format!("unknown activation {a}"))),
        };
        dims.push((d_out, d_in, act));
    }
    dims.into_iter()
        .map(|(d_out, d_in, activation)| {
            Ok(Layer {
                weight: Tensor::matrix(d_out, d_in, get_f64s(r, d_out * d_in)?),
                bias: Tensor::vector(get_f64s(r, d_out)?),
                activation,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localnet::HeadSpec;

    #[test]
    fn round_trip_is_bit_identical() {
        for head in [HeadSpec::Etf, HeadSpec::Mlp { hidden: 7 }] {
            let net = Network::build(&[9, 12, 10], 2, 4, head, 5).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&net, &mut buf).unwrap();
            let back = read_checkpoint(&mut buf.as_slice()).unwrap();
            assert_eq!(back, net);
            let mut again = Vec::new();
            write_checkpoint(&back, &mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            read_checkpoint(&mut &b"NOPE\0\0\0\0"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let net = Network::build(&[3, 4], 1, 2, HeadSpec::Etf, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(CheckpointError::Io(_))));
    }
}

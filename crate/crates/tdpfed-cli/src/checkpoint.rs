//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!   magic "TDPF" | version u32 | layer_count u32 |
//!   per layer: kind u8 (0 linear, 1 conv) | mode_count u32 |
//!              extents u32 x mode_count | rank u32 |
//!              factor matrices f64 LE row-major (mode order) |
//!              bias_len u32 | bias f64 LE
//! Round trips bit-exactly.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fmt;
use std::io::Cursor;
use std::path::Path;
use tdpfed::layers::{TensorizedConv, TensorizedLinear};
use tdpfed::model::{TensorizedLayer, TensorizedModel};
use tdpfed::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"TDPF";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    BadMagic { actual: [u8; 4] },
    VersionMismatch { expected: u32, actual: u32 },
    Truncated { expected: usize, actual: usize },
    Malformed(String),
    Io(std::io::Error),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic { actual } => {
                write!(f, "bad checkpoint magic: expected \"TDPF\", got {actual:?}")
            }
            CheckpointError::VersionMismatch { expected, actual } => {
                write!(f, "checkpoint version mismatch: expected {expected}, got {actual}")
            }
            CheckpointError::Truncated { expected, actual } => {
                write!(f, "truncated checkpoint: expected {expected} bytes, got {actual}")
            }
            CheckpointError::Malformed(msg) => write!(f, "malformed checkpoint: {msg}"),
            CheckpointError::Io(e) => write!(f, "checkpoint I/O error: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

pub fn write_checkpoint(path: &Path, model: &TensorizedModel) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.write_u32::<LittleEndian>(VERSION)?;
    buf.write_u32::<LittleEndian>(model.layers.len() as u32)?;
    for layer in &model.layers {
        let kind: u8 = match layer {
            TensorizedLayer::Linear(_) => 0,
            TensorizedLayer::Conv(_) => 1,
        };
        buf.write_u8(kind)?;
        buf.write_u32::<LittleEndian>(layer.factor_count() as u32)?;
        for n in 0..layer.factor_count() {
            buf.write_u32::<LittleEndian>(layer.factor(n).rows() as u32)?;
        }
        buf.write_u32::<LittleEndian>(layer.rank() as u32)?;
        for n in 0..layer.factor_count() {
            for &v in layer.factor(n).data() {
                buf.write_f64::<LittleEndian>(v)?;
            }
        }
        buf.write_u32::<LittleEndian>(layer.bias().len() as u32)?;
        for &v in layer.bias() {
            buf.write_f64::<LittleEndian>(v)?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    total: usize,
}

impl<'a> Reader<'a> {
    fn need(&self, bytes: usize) -> Result<(), CheckpointError> {
        let pos = self.cur.position() as usize;
        if pos + bytes > self.total {
            return Err(CheckpointError::Truncated {
                expected: pos + bytes,
                actual: self.total,
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        self.need(1)?;
        Ok(self.cur.read_u8()?)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        self.need(4)?;
        Ok(self.cur.read_u32::<LittleEndian>()?)
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>, CheckpointError> {
        self.need(count * 8)?;
        (0..count).map(|_| Ok(self.cur.read_f64::<LittleEndian>()?)).collect()
    }
}

pub fn read_checkpoint(path: &Path) -> Result<TensorizedModel, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { cur: Cursor::new(bytes.as_slice()), total: bytes.len() };
    r.need(4)?;
    let mut magic = [0u8; 4];
    for m in &mut magic {
        *m = r.u8()?;
    }
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { actual: magic });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { expected: VERSION, actual: version });
    }
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for l in 0..layer_count {
        let kind = r.u8()?;
        let mode_count = r.u32()? as usize;
        let expected_modes = match kind {
            0 => 2,
            1 => 4,
            k => return Err(CheckpointError::Malformed(format!("layer {l}: unknown kind tag {k}"))),
        };
        if mode_count != expected_modes {
            return Err(CheckpointError::Malformed(format!(
                "layer {l}: kind {kind} expects {expected_modes} modes, got {mode_count}"
            )));
        }
        let extents: Vec<usize> = (0..mode_count)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_, _>>()?;
        let rank = r.u32()? as usize;
        if rank == 0 || extents.iter().any(|&e| e == 0) {
            return Err(CheckpointError::Malformed(format!("layer {l}: zero extent or rank")));
        }
        let mut factors = Vec::with_capacity(mode_count);
        for &extent in &extents {
            let data = r.f64s(extent * rank)?;
            factors.push(
                Matrix::new(extent, rank, data)
                    .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
            );
        }
        let bias_len = r.u32()? as usize;
        let bias = r.f64s(bias_len)?;
        let layer = match kind {
            0 => {
                if bias_len != extents[0] {
                    return Err(CheckpointError::Malformed(format!(
                        "layer {l}: bias length {bias_len} vs {} outputs",
                        extents[0]
                    )));
                }
                let mut it = factors.into_iter();
                TensorizedLayer::Linear(
                    TensorizedLinear::new(it.next().unwrap(), it.next().unwrap(), bias)
                        .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
                )
            }
            1 => {
                if bias_len != 0 {
                    return Err(CheckpointError::Malformed(format!(
                        "layer {l}: conv layers carry no bias, got {bias_len}"
                    )));
                }
                let mut it = factors.into_iter();
                TensorizedLayer::Conv(
                    TensorizedConv::new(
                        it.next().unwrap(),
                        it.next().unwrap(),
                        it.next().unwrap(),
                        it.next().unwrap(),
                    )
                    .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
                )
            }
            _ => unreachable!(),
        };
        layers.push(layer);
    }
    let pos = r.cur.position() as usize;
    if pos != r.total {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after layer {} (expected length {pos}, file has {})",
            r.total - pos,
            layer_count,
            r.total
        )));
    }
    Ok(TensorizedModel { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tdpfed::layers::{dnn_model_spec, Activation, LayerKind, LayerSpec, ModelSpec};
    use tdpfed::simulator::init_global;

    fn mixed_model() -> TensorizedModel {
        let spec = ModelSpec::new(vec![
            LayerSpec { kind: LayerKind::Conv { i_d: 3, i_s: 2, i_t: 4 }, rank: 3, activation: Activation::Relu },
            LayerSpec { kind: LayerKind::Linear { i_out: 5, i_in: 16 }, rank: 2, activation: Activation::Softmax },
        ])
        .unwrap();
        init_global(&spec, 77)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tdpf");
        for model in [mixed_model(), init_global(&dnn_model_spec(2.0), 3)] {
            write_checkpoint(&path, &model).unwrap();
            let back = read_checkpoint(&path).unwrap();
            assert_eq!(back, model);
        }
    }

    #[test]
    fn truncation_names_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tdpf");
        write_checkpoint(&path, &mixed_model()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match read_checkpoint(&path) {
            Err(CheckpointError::Truncated { expected, actual }) => {
                assert!(expected > actual);
                assert_eq!(actual, bytes.len() - 7);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tdpf");
        write_checkpoint(&path, &mixed_model()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch_prints_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tdpf");
        write_checkpoint(&path, &mixed_model()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        match read_checkpoint(&path) {
            Err(e @ CheckpointError::VersionMismatch { expected: 1, actual: 9 }) => {
                let msg = e.to_string();
                assert!(msg.contains('1') && msg.contains('9'));
            }
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tdpf");
        write_checkpoint(&path, &mixed_model()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(CheckpointError::Malformed(_))));
    }
}

//! Single-tensor files: one JSON header line, then the raw little-endian
//! payload.
//!
//! ```text
//! {"shape":[64,64],"dtype":"f32"}\n<64*64*4 bytes>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
}

pub(crate) fn encode_payload<F: Real>(t: &Tensor<F>, out: &mut Vec<u8>) {
    out.reserve(t.numel() * F::BYTES);
    for &v in t.data() {
        v.extend_le_bytes(out);
    }
}

pub(crate) fn decode_payload<F: Real>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<F>> {
    let numel: usize = shape.iter().product();
    if bytes.len() != numel * F::BYTES {
        return Err(Error::Corrupt(format!(
            "payload for shape {shape:?} needs {} bytes, found {}",
            numel * F::BYTES,
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(F::BYTES).map(F::from_le_slice).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor_to<F: Real>(t: &Tensor<F>, mut w: impl Write) -> Result<()> {
    let header = TensorHeader {
        shape: t.shape().to_vec(),
        dtype: F::DTYPE.to_string(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::new();
    encode_payload(t, &mut buf);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_from<F: Real>(r: impl Read) -> Result<Tensor<F>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: TensorHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Corrupt(format!("tensor header: {e}")))?;
    if header.dtype != F::DTYPE {
        return Err(Error::Corrupt(format!(
            "tensor dtype {} cannot be read as {}",
            header.dtype,
            F::DTYPE
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_payload(header.shape, &bytes)
}

pub fn write_tensor<F: Real>(t: &Tensor<F>, path: impl AsRef<Path>) -> Result<()> {
    write_tensor_to(t, BufWriter::new(File::create(path)?))
}

pub fn read_tensor<F: Real>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    read_tensor_from(File::open(path)?)
}

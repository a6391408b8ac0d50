//! Binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! payload. Full-precision payloads are `f64` little-endian values; quantized
//! payloads are LSB-first bit-packed codes, each tensor starting on a byte
//! boundary.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::denoiser::{MlpDenoiser, ParamVector, TensorSpec};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::quantizer::{payload_size, QuantizedModel, QuantizedTensor};

const MAGIC: &[u8; 8] = b"FEDDMCK1";
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpDenoiser,
    pub diffusion: DiffusionConfig,
    pub params: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCheckpoint {
    pub model: MlpDenoiser,
    pub diffusion: DiffusionConfig,
    pub quantized: QuantizedModel,
}

#[derive(Serialize, Deserialize)]
struct TensorGrid {
    delta: f64,
    offset: f64,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Encoding {
    F64,
    Quantized { bitwidth: u8, tensors: Vec<TensorGrid> },
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: MlpDenoiser,
    diffusion: DiffusionConfig,
    layout: Vec<TensorSpec>,
    encoding: Encoding,
}

/// Packs `bits`-wide codes LSB first into `ceil(len·bits/8)` bytes.
pub fn pack_codes(codes: &[u32], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    let mut pos = 0usize;
    for &c in codes {
        for b in 0..bits {
            if (c >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u32>> {
    let bits = bits as usize;
    if bytes.len() != (count * bits).div_ceil(8) {
        return Err(Error::Data(format!(
            "{} packed bytes cannot hold exactly {count} codes of {bits} bits",
            bytes.len()
        )));
    }
    let mut pos = 0usize;
    Ok((0..count)
        .map(|_| {
            let mut c = 0u32;
            for b in 0..bits {
                if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                    c |= 1 << b;
                }
                pos += 1;
            }
            c
        })
        .collect())
}

fn write_header<W: Write>(out: &mut W, header: &Header) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    Ok(())
}

fn read_header<R: Read>(input: &mut R) -> Result<Header> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Data(format!("checkpoint header of {len} bytes is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json)?;
    Ok(serde_json::from_slice(&json)?)
}

fn expect_eof<R: Read>(input: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(Error::Data("trailing bytes after checkpoint payload".into()));
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut out: W, ck: &Checkpoint) -> Result<()> {
    let header = Header {
        model: ck.model.clone(),
        diffusion: ck.diffusion,
        layout: ck.params.layout().to_vec(),
        encoding: Encoding::F64,
    };
    write_header(&mut out, &header)?;
    let mut buf = Vec::with_capacity(ck.params.len() * 8);
    for v in ck.params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let header = read_header(&mut input)?;
    if !matches!(header.encoding, Encoding::F64) {
        return Err(Error::Data("checkpoint holds quantized weights".into()));
    }
    let n: usize = header.layout.iter().map(TensorSpec::numel).sum();
    let mut buf = vec![0u8; n * 8];
    input.read_exact(&mut buf)?;
    expect_eof(&mut input)?;
    let values = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = ParamVector::new(values, header.layout)?;
    if params.layout() != header.model.layout().as_slice() {
        return Err(Error::Shape("checkpoint layout does not match its architecture".into()));
    }
    Ok(Checkpoint {
        model: header.model,
        diffusion: header.diffusion,
        params,
    })
}

pub fn write_quantized<W: Write>(mut out: W, ck: &QuantizedCheckpoint) -> Result<()> {
    let q = &ck.quantized;
    let header = Header {
        model: ck.model.clone(),
        diffusion: ck.diffusion,
        layout: q.layout.clone(),
        encoding: Encoding::Quantized {
            bitwidth: q.bitwidth,
            tensors: q
                .tensors
                .iter()
                .map(|t| TensorGrid {
                    delta: t.delta,
                    offset: t.offset,
                    shape: t.shape.clone(),
                })
                .collect(),
        },
    };
    write_header(&mut out, &header)?;
    for t in &q.tensors {
        out.write_all(&pack_codes(&t.codes, t.bitwidth))?;
    }
    Ok(())
}

pub fn read_quantized<R: Read>(mut input: R) -> Result<QuantizedCheckpoint> {
    let header = read_header(&mut input)?;
    let Encoding::Quantized { bitwidth, tensors } = header.encoding else {
        return Err(Error::Data("checkpoint holds full-precision weights".into()));
    };
    if !(1..=32).contains(&bitwidth) || tensors.len() != header.layout.len() {
        return Err(Error::Data("malformed quantized checkpoint header".into()));
    }
    let mut out = Vec::with_capacity(tensors.len());
    for (grid, spec) in tensors.into_iter().zip(&header.layout) {
        if grid.shape != spec.shape {
            return Err(Error::Shape(format!("tensor {} shape mismatch", spec.name)));
        }
        let count = spec.numel();
        let mut buf = vec![0u8; (count * bitwidth as usize).div_ceil(8)];
        input.read_exact(&mut buf)?;
        out.push(QuantizedTensor {
            codes: unpack_codes(&buf, bitwidth, count)?,
            bitwidth,
            delta: grid.delta,
            offset: grid.offset,
            shape: grid.shape,
        });
    }
    expect_eof(&mut input)?;
    let mut quantized = QuantizedModel {
        layout: header.layout,
        tensors: out,
        bitwidth,
        payload_bytes: 0,
    };
    quantized.payload_bytes = payload_size(&quantized);
    Ok(QuantizedCheckpoint {
        model: header.model,
        diffusion: header.diffusion,
        quantized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{calibrate_weights, quantize_model};
    use proptest::prelude::*;

    fn small() -> MlpDenoiser {
        MlpDenoiser {
            hidden: vec![5, 3],
            ..Default::default()
        }
    }

    #[test]
    fn pack_by_hand() {
        assert_eq!(pack_codes(&[1, 2, 3], 2), vec![0b0011_1001]);
        assert_eq!(pack_codes(&[1, 0, 1, 1, 0, 0, 0, 0, 1], 1), vec![0b0000_1101, 0b1]);
        assert_eq!(pack_codes(&[0xABC], 12), vec![0xBC, 0x0A]);
        assert!(unpack_codes(&[0, 0], 8, 3).is_err());
    }

    proptest! {
        #[test]
        fn pack_round_trip(bits in 1u8..=32, raw in prop::collection::vec(any::<u32>(), 0..64)) {
            let mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
            let codes: Vec<u32> = raw.iter().map(|c| c & mask).collect();
            let packed = pack_codes(&codes, bits);
            prop_assert_eq!(packed.len(), (codes.len() * bits as usize).div_ceil(8));
            prop_assert_eq!(unpack_codes(&packed, bits, codes.len()).unwrap(), codes);
        }
    }

    #[test]
    fn full_precision_round_trip() {
        let arch = small();
        let ck = Checkpoint {
            model: arch.clone(),
            diffusion: DiffusionConfig::default(),
            params: arch.init_params(3).unwrap(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), ck);
        assert!(read_quantized(buf.as_slice()).is_err());
        buf.push(0);
        assert!(read_checkpoint(buf.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 9]).is_err());
        assert!(read_checkpoint(&b"garbage-bytes-here"[..]).is_err());
    }

    #[test]
    fn quantized_round_trip_and_size() {
        let arch = small();
        let theta = arch.init_params(5).unwrap();
        for bits in [8u8, 16, 32] {
            let calib = calibrate_weights(&theta, bits).unwrap();
            let ck = QuantizedCheckpoint {
                model: arch.clone(),
                diffusion: DiffusionConfig::default(),
                quantized: quantize_model(&theta, bits, Some(&calib)).unwrap(),
            };
            let mut buf = Vec::new();
            write_quantized(&mut buf, &ck).unwrap();
            let back = read_quantized(buf.as_slice()).unwrap();
            assert_eq!(back, ck);
            let header_len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
            let codes = buf.len() - 16 - header_len;
            assert_eq!(codes, crate::quantizer::code_payload_size(&ck.quantized));
            assert!(read_checkpoint(buf.as_slice()).is_err());
        }
    }
}

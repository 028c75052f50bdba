//! Little-endian binary formats.
//!
//! * DQT1, one tensor: magic `DQTENS01`, `u8` rank, `rank x u32` extents,
//!   `u8` dtype (0 = f32, 1 = f64), then the row-major payload.
//! * DQC1, the codebooks of one quantizer: magic `DQCODE01`, `u32` M, `u32` K,
//!   `u32` D, `u8` dtype, then per book the codes `[K, D]`, EMA counts `[K]`
//!   and EMA sums `[K, D]`.
//! * DQP1, named parameters: magic `DQPARM01`, `u32` version, `u32` count,
//!   then per record a `u32` name length, UTF-8 name and a DQT1 tensor.

use std::fs;
use std::path::Path;

use crate::error::{DqError, Result};
use crate::nn::ParamStore;
use crate::quantizer::Codebook;
use crate::tensor::NdTensor;

pub const TENSOR_MAGIC: &[u8; 8] = b"DQTENS01";
pub const CODEBOOK_MAGIC: &[u8; 8] = b"DQCODE01";
pub const PARAMS_MAGIC: &[u8; 8] = b"DQPARM01";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            t => Err(DqError::UnknownDtype(t)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.offset;
        if available < n {
            return Err(DqError::Truncated {
                offset: self.bytes.len(),
                needed: n - available,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let found = self.take(8)?;
        if found != expected {
            return Err(DqError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn reals(&mut self, n: usize, dtype: Dtype) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(dtype.width())
            .ok_or_else(|| DqError::Malformed(format!("payload of {n} values overflows")))?;
        let raw = self.take(bytes)?;
        Ok(match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        })
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(DqError::Malformed(format!(
                "{} trailing bytes after offset {}",
                self.bytes.len() - self.offset,
                self.offset
            )));
        }
        Ok(())
    }
}

fn put_reals(out: &mut Vec<u8>, values: &[f64], dtype: Dtype) {
    for &v in values {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| DqError::InvalidArgument(format!("{what} {n} does not fit in u32")))
}

pub fn encode_tensor(t: &NdTensor, dtype: Dtype) -> Result<Vec<u8>> {
    let rank =
        u8::try_from(t.rank()).map_err(|_| DqError::InvalidArgument(format!("rank {} exceeds 255", t.rank())))?;
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + t.len() * dtype.width());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(rank);
    for &e in t.shape() {
        out.extend_from_slice(&u32_of(e, "extent")?.to_le_bytes());
    }
    out.push(dtype.tag());
    put_reals(&mut out, t.data(), dtype);
    Ok(out)
}

fn read_tensor(c: &mut Cursor) -> Result<NdTensor> {
    c.magic(TENSOR_MAGIC)?;
    let rank = c.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(c.u32()? as usize);
    }
    let dtype = Dtype::from_tag(c.u8()?)?;
    if shape.contains(&0) {
        return Err(DqError::ZeroExtent(shape));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| DqError::Malformed(format!("shape {shape:?} overflows")))?;
    let data = c.reals(n, dtype)?;
    NdTensor::new(shape, data)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<NdTensor> {
    let mut c = Cursor::new(bytes);
    let t = read_tensor(&mut c)?;
    c.finish()?;
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &NdTensor, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_tensor(t, dtype)?)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<NdTensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn encode_codebooks(books: &[Codebook], dtype: Dtype) -> Result<Vec<u8>> {
    let first = books.first().ok_or(DqError::Empty("no codebooks to encode"))?;
    let (k, d) = (first.num_codes(), first.dim());
    let mut out = Vec::new();
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&u32_of(books.len(), "book count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(k, "code count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(d, "code dim")?.to_le_bytes());
    out.push(dtype.tag());
    for b in books {
        if b.num_codes() != k || b.dim() != d {
            return Err(DqError::DimensionMismatch {
                expected: d,
                actual: b.dim(),
            });
        }
        put_reals(&mut out, b.codes(), dtype);
        put_reals(&mut out, b.ema_counts(), dtype);
        put_reals(&mut out, b.ema_sums(), dtype);
    }
    Ok(out)
}

pub fn decode_codebooks(bytes: &[u8]) -> Result<Vec<Codebook>> {
    let mut c = Cursor::new(bytes);
    c.magic(CODEBOOK_MAGIC)?;
    let (m, k, d) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let dtype = Dtype::from_tag(c.u8()?)?;
    if m == 0 || k == 0 || d == 0 {
        return Err(DqError::Malformed(format!("codebook header M={m} K={k} D={d}")));
    }
    let mut books = Vec::with_capacity(m);
    for _ in 0..m {
        let codes = c.reals(k * d, dtype)?;
        let counts = c.reals(k, dtype)?;
        let sums = c.reals(k * d, dtype)?;
        if let Some(i) = codes.iter().chain(&counts).chain(&sums).position(|v| !v.is_finite()) {
            return Err(DqError::Malformed(format!(
                "non-finite value at position {i} of book {}",
                books.len()
            )));
        }
        books.push(Codebook::from_state(k, d, codes, counts, sums)?);
    }
    c.finish()?;
    Ok(books)
}

pub fn encode_params(store: &ParamStore, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(store.len(), "parameter count")?.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(t, dtype)?);
    }
    Ok(out)
}

/// Named tensors in file order.
pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, NdTensor)>> {
    let mut c = Cursor::new(bytes);
    c.magic(PARAMS_MAGIC)?;
    let version = c.u32()?;
    if version != PARAMS_VERSION {
        return Err(DqError::Malformed(format!(
            "unsupported parameter file version {version}"
        )));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| DqError::Malformed(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        out.push((name, read_tensor(&mut c)?));
    }
    c.finish()?;
    Ok(out)
}

/// Overwrites every parameter of `store` from a DQP1 payload. The file must
/// hold exactly the store's names with matching shapes.
pub fn restore_params(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let records = decode_params(bytes)?;
    if records.len() != store.len() {
        return Err(DqError::Malformed(format!(
            "file holds {} parameters, model has {}",
            records.len(),
            store.len()
        )));
    }
    for (name, t) in records {
        store.assign(&name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(t: &NdTensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn tensor_header_layout() {
        let t = NdTensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode_tensor(&t, Dtype::F64).unwrap();
        assert_eq!(&b[..8], b"DQTENS01");
        assert_eq!(b[8], 2);
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..17], &3u32.to_le_bytes());
        assert_eq!(b[17], 1);
        assert_eq!(b.len(), 18 + 48);
        assert_eq!(&b[18..26], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncation_names_the_offset() {
        let t = NdTensor::full(&[4], 0.5);
        let b = encode_tensor(&t, Dtype::F32).unwrap();
        let cut = &b[..b.len() - 3];
        match decode_tensor(cut) {
            Err(DqError::Truncated { offset, needed }) => {
                assert_eq!(offset, cut.len());
                assert_eq!(needed, 3);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        assert!(decode_tensor(&b[..5])
            .unwrap_err()
            .to_string()
            .contains("byte offset 5"));
    }

    #[test]
    fn magic_and_dtype_errors_are_distinct() {
        let t = NdTensor::full(&[2], 1.0);
        let mut b = encode_tensor(&t, Dtype::F64).unwrap();
        b[0] = b'X';
        assert!(matches!(decode_tensor(&b), Err(DqError::BadMagic { .. })));
        let mut b = encode_tensor(&t, Dtype::F64).unwrap();
        b[13] = 9;
        assert!(matches!(decode_tensor(&b), Err(DqError::UnknownDtype(9))));
        let mut b = encode_tensor(&t, Dtype::F64).unwrap();
        b.push(0);
        assert!(matches!(decode_tensor(&b), Err(DqError::Malformed(_))));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let mut b = encode_tensor(&NdTensor::full(&[2], 1.0), Dtype::F64).unwrap();
        let n = b.len();
        b[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_tensor(&b), Err(DqError::NonFinite { index: 1, .. })));
    }

    #[test]
    fn codebooks_round_trip_bit_exactly() {
        let b0 = Codebook::from_state(
            2,
            3,
            vec![0.1, 0.2, 0.3, -1.0, 1e-300, 7.5],
            vec![1.5, 0.0],
            vec![0.15, 0.3, 0.45, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let b1 = Codebook::from_codes(2, 3, vec![std::f64::consts::PI; 6]).unwrap();
        let bytes = encode_codebooks(&[b0.clone(), b1.clone()], Dtype::F64).unwrap();
        assert_eq!(&bytes[..8], b"DQCODE01");
        let back = decode_codebooks(&bytes).unwrap();
        assert_eq!(back[0].codes(), b0.codes());
        assert_eq!(back[0].ema_counts(), b0.ema_counts());
        assert_eq!(back[0].ema_sums(), b0.ema_sums());
        assert_eq!(back[1].codes(), b1.codes());
        assert!(matches!(
            decode_codebooks(&bytes[..bytes.len() - 1]),
            Err(DqError::Truncated { .. })
        ));
    }

    #[test]
    fn params_round_trip_and_restore() {
        let mut store = ParamStore::new();
        store.add(
            "enc.weight",
            NdTensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 1e-9]).unwrap(),
        );
        store.add("enc.bias", NdTensor::new(vec![2], vec![0.25, -0.75]).unwrap());
        let bytes = encode_params(&store, Dtype::F64).unwrap();
        let recs = decode_params(&bytes).unwrap();
        assert_eq!(recs[0].0, "enc.weight");
        assert_eq!(recs[1].1, *store.get(crate::nn::ParamId(1)));

        let mut other = ParamStore::new();
        other.add("enc.weight", NdTensor::zeros(&[2, 2]));
        other.add("enc.bias", NdTensor::zeros(&[2]));
        restore_params(&mut other, &bytes).unwrap();
        assert_eq!(other.get(crate::nn::ParamId(0)), store.get(crate::nn::ParamId(0)));

        let mut wrong = ParamStore::new();
        wrong.add("enc.weight", NdTensor::zeros(&[4]));
        wrong.add("enc.bias", NdTensor::zeros(&[2]));
        assert!(matches!(
            restore_params(&mut wrong, &bytes),
            Err(DqError::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn tensors_round_trip_bit_exactly(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut x = seed | 1;
            let data: Vec<f64> = (0..n).map(|_| {
                x ^= x << 13; x ^= x >> 7; x ^= x << 17;
                (x as i64) as f64 * 1e-12
            }).collect();
            let t = NdTensor::new(shape, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t, Dtype::F64).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(bits(&back), bits(&t));
            // f32 payloads are exact for values representable in f32
            let t32 = NdTensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| *v as f32 as f64).collect()).unwrap();
            let back32 = decode_tensor(&encode_tensor(&t32, Dtype::F32).unwrap()).unwrap();
            prop_assert_eq!(bits(&back32), bits(&t32));
        }
    }
}

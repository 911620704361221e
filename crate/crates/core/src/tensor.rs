//! Dense row-major tensor container.
//!
//! All arithmetic in the engine runs in f32. The other dtypes exist for
//! storage: f16 is kept as raw IEEE half bits and widened on access, int4
//! holds two's-complement codes packed two per byte (low nibble first),
//! int32 carries index data such as channel lists.

use crate::error::{DsError, Result};
use half::f16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
    I4,
    I32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
            Dtype::I4 => 2,
            Dtype::I32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F16),
            2 => Ok(Dtype::I4),
            3 => Ok(Dtype::I32),
            other => Err(DsError::UnknownDtypeCode(other)),
        }
    }

    /// Bytes needed for `n` elements of this dtype.
    pub fn byte_len(self, n: usize) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4 * n,
            Dtype::F16 => 2 * n,
            Dtype::I4 => n.div_ceil(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    F16(Vec<u16>),
    I4(Vec<u8>),
    I32(Vec<i32>),
}

/// Row-major dense tensor. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
}

fn check_shape(shape: &[usize], n: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(DsError::ShapeMismatch(format!(
            "shape {shape:?} must be nonempty with positive dims"
        )));
    }
    let expect: usize = shape.iter().product();
    if expect != n {
        return Err(DsError::ShapeMismatch(format!(
            "shape {shape:?} implies {expect} elements, got {n}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor { shape, data: Storage::F32(data) })
    }

    pub fn from_f16_bits(shape: Vec<usize>, bits: Vec<u16>) -> Result<Self> {
        check_shape(&shape, bits.len())?;
        Ok(Tensor { shape, data: Storage::F16(bits) })
    }

    /// Narrow f32 values to f16 storage (round to nearest even).
    pub fn from_f32_as_f16(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        check_shape(&shape, data.len())?;
        let bits = data.iter().map(|&v| f16::from_f32(v).to_bits()).collect();
        Ok(Tensor { shape, data: Storage::F16(bits) })
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor { shape, data: Storage::I32(data) })
    }

    /// Pack int4 codes (each in [-8, 7]) two per byte, low nibble first.
    pub fn from_i4_codes(shape: Vec<usize>, codes: &[i8]) -> Result<Self> {
        check_shape(&shape, codes.len())?;
        if codes.iter().any(|&c| !(-8..=7).contains(&c)) {
            return Err(DsError::Format("int4 code out of range [-8, 7]".into()));
        }
        Ok(Tensor { shape, data: Storage::I4(pack_i4(codes)) })
    }

    /// Raw packed int4 bytes (must be ceil(n/2) long for n = product(shape)).
    pub fn from_i4_packed(shape: Vec<usize>, packed: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || packed.len() != n.div_ceil(2) {
            return Err(DsError::ShapeMismatch(format!(
                "packed int4 buffer of {} bytes does not match shape {shape:?}",
                packed.len()
            )));
        }
        Ok(Tensor { shape, data: Storage::I4(packed) })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            Storage::F32(_) => Dtype::F32,
            Storage::F16(_) => Dtype::F16,
            Storage::I4(_) => Dtype::I4,
            Storage::I32(_) => Dtype::I32,
        }
    }

    /// Element count = product of dims.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow f32 data; errors for other dtypes.
    pub fn f32_slice(&self) -> Result<&[f32]> {
        match &self.data {
            Storage::F32(v) => Ok(v),
            _ => Err(DsError::ShapeMismatch(format!(
                "expected f32 tensor, found {:?}",
                self.dtype()
            ))),
        }
    }

    pub fn i32_slice(&self) -> Result<&[i32]> {
        match &self.data {
            Storage::I32(v) => Ok(v),
            _ => Err(DsError::ShapeMismatch(format!(
                "expected int32 tensor, found {:?}",
                self.dtype()
            ))),
        }
    }

    /// Widen any dtype to an f32 vector (int4 yields the signed codes).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            Storage::F32(v) => v.clone(),
            Storage::F16(v) => v.iter().map(|&b| f16::from_bits(b).to_f32()).collect(),
            Storage::I4(packed) => {
                unpack_i4(packed, self.len()).iter().map(|&c| c as f32).collect()
            }
            Storage::I32(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Unpacked int4 codes; errors for other dtypes.
    pub fn i4_codes(&self) -> Result<Vec<i8>> {
        match &self.data {
            Storage::I4(packed) => Ok(unpack_i4(packed, self.len())),
            _ => Err(DsError::ShapeMismatch(format!(
                "expected int4 tensor, found {:?}",
                self.dtype()
            ))),
        }
    }

    /// Serialized little-endian byte image of the data buffer.
    pub fn data_bytes(&self) -> Vec<u8> {
        match &self.data {
            Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::F16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::I4(v) => v.clone(),
            Storage::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Rebuild a tensor from its serialized byte image.
    pub fn from_data_bytes(shape: Vec<usize>, dtype: Dtype, bytes: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != dtype.byte_len(n) {
            return Err(DsError::Format(format!(
                "byte length {} does not match shape {shape:?} dtype {dtype:?}",
                bytes.len()
            )));
        }
        match dtype {
            Dtype::F32 => {
                let v = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::from_f32(shape, v)
            }
            Dtype::F16 => {
                let v = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
                Tensor::from_f16_bits(shape, v)
            }
            Dtype::I4 => Tensor::from_i4_packed(shape, bytes.to_vec()),
            Dtype::I32 => {
                let v = bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::from_i32(shape, v)
            }
        }
    }
}

/// Pack signed 4-bit codes two per byte, low nibble first.
pub fn pack_i4(codes: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; codes.len().div_ceil(2)];
    for (i, &c) in codes.iter().enumerate() {
        let nib = (c as u8) & 0x0F;
        if i % 2 == 0 {
            out[i / 2] |= nib;
        } else {
            out[i / 2] |= nib << 4;
        }
    }
    out
}

/// Unpack `n` signed 4-bit codes.
pub fn unpack_i4(packed: &[u8], n: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let byte = packed[i / 2];
        let nib = if i % 2 == 0 { byte & 0x0F } else { byte >> 4 };
        let val = if nib >= 8 { nib as i8 - 16 } else { nib as i8 };
        out.push(val);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn i4_pack_unpack_low_nibble_first() {
        let codes = vec![1i8, -1, 7, -8, 0];
        let packed = pack_i4(&codes);
        // 1 | (-1 = 0xF) << 4 = 0xF1; 7 | (-8 = 0x8) << 4 = 0x87; 0
        assert_eq!(packed, vec![0xF1, 0x87, 0x00]);
        assert_eq!(unpack_i4(&packed, 5), codes);
    }

    #[test]
    fn i4_code_range_enforced() {
        assert!(Tensor::from_i4_codes(vec![2], &[3, -9]).is_err());
        assert!(Tensor::from_i4_codes(vec![2], &[-8, 7]).is_ok());
    }

    #[test]
    fn shape_element_mismatch_rejected() {
        assert!(Tensor::from_f32(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_f32(vec![2, 0], vec![]).is_err());
        assert!(Tensor::from_f32(vec![], vec![]).is_err());
    }

    #[test]
    fn f16_widens_on_access() {
        let t = Tensor::from_f32_as_f16(vec![3], &[1.0, -2.5, 0.0]).unwrap();
        assert_eq!(t.dtype(), Dtype::F16);
        assert_eq!(t.to_f32_vec(), vec![1.0, -2.5, 0.0]);
    }

    #[test]
    fn data_bytes_round_trip_all_dtypes() {
        let tensors = vec![
            Tensor::from_f32(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(),
            Tensor::from_f32_as_f16(vec![3], &[0.5, -1.0, 2.0]).unwrap(),
            Tensor::from_i4_codes(vec![5], &[1, -1, 7, -8, 0]).unwrap(),
            Tensor::from_i32(vec![2], vec![-7, 123456]).unwrap(),
        ];
        for t in tensors {
            let bytes = t.data_bytes();
            let back =
                Tensor::from_data_bytes(t.shape().to_vec(), t.dtype(), &bytes).unwrap();
            assert_eq!(back, t);
        }
    }
}

//! Binary clip storage.
//!
//! Layout: a 16-byte header followed by the payload as little-endian f32
//! in row-major order.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "UCLP"
//! 4       2     format version (u16 LE) = 1
//! 6       1     dtype = 1 (f32)
//! 7       1     ndim (1..=3)
//! 8       6     dims (3 x u16 LE), unused trailing dims = 1
//! 14      2     reserved = 0
//! ```

use byteorder::{ByteOrder, LittleEndian};
use ndarray::ArrayD;
use std::path::Path;

use super::{io_err, DataError, Result};

const MAGIC: &[u8; 4] = b"UCLP";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;

fn format_err(path: &str, msg: impl Into<String>) -> DataError {
    DataError::ClipFormat { path: path.to_string(), msg: msg.into() }
}

pub fn clip_to_bytes(arr: &ArrayD<f32>) -> Result<Vec<u8>> {
    let shape = arr.shape();
    if shape.is_empty() || shape.len() > 3 {
        return Err(format_err("<memory>", format!("rank {} unsupported", shape.len())));
    }
    if shape.iter().any(|&d| d == 0 || d > u16::MAX as usize) {
        return Err(format_err("<memory>", format!("dims {shape:?} outside 1..=65535")));
    }
    let mut out = vec![0u8; 16 + arr.len() * 4];
    out[0..4].copy_from_slice(MAGIC);
    LittleEndian::write_u16(&mut out[4..6], VERSION);
    out[6] = DTYPE_F32;
    out[7] = shape.len() as u8;
    for i in 0..3 {
        let d = shape.get(i).copied().unwrap_or(1) as u16;
        LittleEndian::write_u16(&mut out[8 + 2 * i..10 + 2 * i], d);
    }
    let std = arr.as_standard_layout();
    let vals = std.as_slice().unwrap();
    LittleEndian::write_f32_into(vals, &mut out[16..]);
    Ok(out)
}

pub fn clip_from_bytes(bytes: &[u8], origin: &str) -> Result<ArrayD<f32>> {
    if bytes.len() < 16 {
        return Err(format_err(origin, "shorter than the 16-byte header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(origin, "bad magic"));
    }
    let version = LittleEndian::read_u16(&bytes[4..6]);
    if version != VERSION {
        return Err(format_err(origin, format!("unsupported format version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(format_err(origin, format!("unsupported dtype {}", bytes[6])));
    }
    let ndim = bytes[7] as usize;
    if !(1..=3).contains(&ndim) {
        return Err(format_err(origin, format!("bad ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        shape.push(LittleEndian::read_u16(&bytes[8 + 2 * i..10 + 2 * i]) as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != 16 + 4 * n {
        return Err(format_err(
            origin,
            format!("payload length {} != expected {}", bytes.len() - 16, 4 * n),
        ));
    }
    let mut vals = vec![0.0f32; n];
    LittleEndian::read_f32_into(&bytes[16..], &mut vals);
    ArrayD::from_shape_vec(shape, vals).map_err(|e| format_err(origin, e.to_string()))
}

pub fn write_clip_f32(path: &Path, arr: &ArrayD<f32>) -> Result<()> {
    let bytes = clip_to_bytes(arr)?;
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_clip_f32(path: &Path) -> Result<ArrayD<f32>> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    clip_from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = Array3::<f32>::zeros((30, 68, 3));
        for (i, v) in a.iter_mut().enumerate() {
            *v = (i as f32).sin() * 1e-3 + f32::EPSILON * i as f32;
        }
        let bytes = clip_to_bytes(&a.clone().into_dyn()).unwrap();
        let back = clip_from_bytes(&bytes, "test").unwrap();
        assert_eq!(back, a.into_dyn());
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let a = Array3::<f32>::zeros((2, 2, 1)).into_dyn();
        let mut bytes = clip_to_bytes(&a).unwrap();
        bytes[0] = b'X';
        assert!(clip_from_bytes(&bytes, "test").is_err());
        let mut bytes2 = clip_to_bytes(&a).unwrap();
        bytes2.truncate(bytes2.len() - 1);
        assert!(clip_from_bytes(&bytes2, "test").is_err());
    }

    #[test]
    fn rank_one_arrays_round_trip() {
        let w = ndarray::Array1::from_vec((0..1470).map(|i| i as f32 * 0.1).collect()).into_dyn();
        let bytes = clip_to_bytes(&w).unwrap();
        assert_eq!(clip_from_bytes(&bytes, "t").unwrap(), w);
    }
}

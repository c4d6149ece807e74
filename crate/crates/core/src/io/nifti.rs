//! Minimal single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Supports 1 to 3 spatial dimensions with int16, uint8, float32 or float64
//! data in either byte order. Volumes are returned in row-major order over
//! (x, y, z), the ordering used by every other format here.

use std::path::Path;

use crate::error::{Result, SimbaError};

const HEADER_SIZE: usize = 348;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    pub dims: Vec<usize>,
    pub voxel_sizes: Vec<f64>,
    /// Row-major over `dims` (last axis fastest).
    pub data: Vec<f64>,
}

struct Reader<'a> {
    b: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn i16(&self, o: usize) -> i16 {
        let a = [self.b[o], self.b[o + 1]];
        if self.little { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }
    }
    fn i32(&self, o: usize) -> i32 {
        let a: [u8; 4] = self.b[o..o + 4].try_into().expect("4 bytes");
        if self.little { i32::from_le_bytes(a) } else { i32::from_be_bytes(a) }
    }
    fn f32(&self, o: usize) -> f32 {
        let a: [u8; 4] = self.b[o..o + 4].try_into().expect("4 bytes");
        if self.little { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }
    }
    fn f64(&self, o: usize) -> f64 {
        let a: [u8; 8] = self.b[o..o + 8].try_into().expect("8 bytes");
        if self.little { f64::from_le_bytes(a) } else { f64::from_be_bytes(a) }
    }
}

pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let bytes = std::fs::read(path).map_err(|e| SimbaError::io(path, e))?;
    parse_nifti(&bytes).map_err(|e| match e {
        SimbaError::Data(m) => SimbaError::data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_nifti(b: &[u8]) -> Result<NiftiVolume> {
    if b.len() >= 2 && b[0] == 0x1f && b[1] == 0x8b {
        return Err(SimbaError::data("gzip-compressed NIfTI is not supported; decompress first"));
    }
    if b.len() < HEADER_SIZE {
        return Err(SimbaError::data("file too short for a NIfTI-1 header"));
    }
    let mut r = Reader { b, little: true };
    if r.i32(0) != HEADER_SIZE as i32 {
        r.little = false;
        if r.i32(0) != HEADER_SIZE as i32 {
            return Err(SimbaError::data("not a NIfTI-1 file (bad header size)"));
        }
    }
    if &b[344..347] != b"n+1" {
        return Err(SimbaError::data("unsupported NIfTI variant (only single-file n+1)"));
    }
    let ndim = r.i16(40);
    if !(1..=3).contains(&ndim) {
        return Err(SimbaError::data(format!("unsupported dimensionality {ndim} (need 1 to 3)")));
    }
    let dims: Vec<usize> = (0..ndim as usize)
        .map(|k| r.i16(42 + 2 * k))
        .map(|d| if d > 0 { Ok(d as usize) } else { Err(SimbaError::data("non-positive dimension")) })
        .collect::<Result<_>>()?;
    let datatype = r.i16(70);
    let width = match datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        64 => 8,
        other => return Err(SimbaError::data(format!("unsupported NIfTI datatype code {other}"))),
    };
    let voxel_sizes = (0..ndim as usize).map(|k| r.f32(80 + 4 * k) as f64).collect();
    let offset = r.f32(108);
    if !(offset >= HEADER_SIZE as f32) {
        return Err(SimbaError::data("invalid vox_offset"));
    }
    let offset = offset as usize;
    let (slope, inter) = (r.f32(112) as f64, r.f32(116) as f64);
    let scale = |x: f64| if slope != 0.0 && slope.is_finite() { x * slope + inter } else { x };
    let total: usize = dims.iter().product();
    if b.len() < offset + total * width {
        return Err(SimbaError::data("file truncated before the end of the image data"));
    }
    // storage is x-fastest; convert to row-major
    let mut data = vec![0.0; total];
    for (row_major, slot) in data.iter_mut().enumerate() {
        let mut rem = row_major;
        let mut idx = vec![0; dims.len()];
        for k in (0..dims.len()).rev() {
            idx[k] = rem % dims[k];
            rem /= dims[k];
        }
        let mut file_idx = 0;
        for k in (0..dims.len()).rev() {
            file_idx = file_idx * dims[k] + idx[k];
        }
        let o = offset + file_idx * width;
        let raw = match datatype {
            2 => b[o] as f64,
            4 => r.i16(o) as f64,
            16 => r.f32(o) as f64,
            _ => r.f64(o),
        };
        *slot = scale(raw);
    }
    Ok(NiftiVolume { dims, voxel_sizes, data })
}

/// Little-endian float64 volume with unit voxel sizes.
pub fn write_nifti(path: &Path, dims: &[usize], row_major: &[f64]) -> Result<()> {
    if dims.is_empty() || dims.len() > 3 || dims.iter().product::<usize>() != row_major.len() {
        return Err(SimbaError::data("volume shape does not match its data"));
    }
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[40..42].copy_from_slice(&(dims.len() as i16).to_le_bytes());
    for (k, d) in dims.iter().enumerate() {
        h[42 + 2 * k..44 + 2 * k].copy_from_slice(&(*d as i16).to_le_bytes());
    }
    for k in dims.len()..7 {
        h[42 + 2 * k..44 + 2 * k].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&64i16.to_le_bytes());
    h[72..74].copy_from_slice(&64i16.to_le_bytes());
    for k in 0..8 {
        h[76 + 4 * k..80 + 4 * k].copy_from_slice(&1f32.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    let total = row_major.len();
    let mut body = vec![0u8; total * 8];
    for (file_idx, chunk) in body.chunks_exact_mut(8).enumerate() {
        let mut rem = file_idx;
        let mut idx = vec![0; dims.len()];
        for k in 0..dims.len() {
            idx[k] = rem % dims[k];
            rem /= dims[k];
        }
        let mut rm = 0;
        for k in 0..dims.len() {
            rm = rm * dims[k] + idx[k];
        }
        chunk.copy_from_slice(&row_major[rm].to_le_bytes());
    }
    h.extend(body);
    super::atomic_write(path, &h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        let dims = [3, 4, 2];
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5 - 3.0).collect();
        write_nifti(&p, &dims, &data).unwrap();
        let v = read_nifti(&p).unwrap();
        assert_eq!(v.dims, dims);
        assert_eq!(v.data, data);
        assert_eq!(v.voxel_sizes, vec![1.0; 3]);
    }

    #[test]
    fn x_fastest_storage_is_reordered() {
        // 2×3 int16 image, big-endian, file order x-fastest: value = x + 10y
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_be_bytes());
        b[40..42].copy_from_slice(&2i16.to_be_bytes());
        b[42..44].copy_from_slice(&2i16.to_be_bytes());
        b[44..46].copy_from_slice(&3i16.to_be_bytes());
        b[70..72].copy_from_slice(&4i16.to_be_bytes());
        b[108..112].copy_from_slice(&352f32.to_be_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        for y in 0..3i16 {
            for x in 0..2i16 {
                b.extend((x + 10 * y).to_be_bytes());
            }
        }
        let v = parse_nifti(&b).unwrap();
        assert_eq!(v.dims, vec![2, 3]);
        // row-major over (x, y): y fastest
        assert_eq!(v.data, vec![0.0, 10.0, 20.0, 1.0, 11.0, 21.0]);
    }

    #[test]
    fn rejects_exotic_input() {
        assert!(parse_nifti(&[0x1f, 0x8b, 0, 0]).is_err());
        assert!(parse_nifti(&[0u8; 100]).is_err());
        let mut b = vec![0u8; 360];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        b[40..42].copy_from_slice(&1i16.to_le_bytes());
        b[42..44].copy_from_slice(&2i16.to_le_bytes());
        b[70..72].copy_from_slice(&32i16.to_le_bytes()); // complex64
        b[108..112].copy_from_slice(&352f32.to_le_bytes());
        let e = parse_nifti(&b).unwrap_err().to_string();
        assert!(e.contains("datatype"), "{e}");
    }
}

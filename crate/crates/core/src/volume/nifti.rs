//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer for
//! scalar 3D volumes.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::Volume;
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;
const DT_INT64: i16 = 1024;
const DT_UINT64: i16 = 1280;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

struct Header {
    endian: Endian,
    dims: [usize; 3],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    /// Voxel-to-world affine, rows of a 3x4 matrix.
    affine: [[f64; 4]; 3],
}

fn read_i16(buf: &[u8], off: usize, e: Endian) -> i16 {
    match e {
        Endian::Little => LittleEndian::read_i16(&buf[off..]),
        Endian::Big => BigEndian::read_i16(&buf[off..]),
    }
}

fn read_f32(buf: &[u8], off: usize, e: Endian) -> f32 {
    match e {
        Endian::Little => LittleEndian::read_f32(&buf[off..]),
        Endian::Big => BigEndian::read_f32(&buf[off..]),
    }
}

fn parse_header(buf: &[u8], path: &Path) -> Result<Header> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if buf.len() < HEADER_SIZE {
        return Err(malformed("file shorter than a NIfTI-1 header"));
    }
    let endian = if LittleEndian::read_i32(buf) == HEADER_SIZE as i32 {
        Endian::Little
    } else if BigEndian::read_i32(buf) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(malformed("sizeof_hdr is not 348"));
    };
    let magic = &buf[344..348];
    if magic == MAGIC_PAIR {
        return Err(malformed("header/image pair files are not supported"));
    }
    if magic != MAGIC_SINGLE {
        return Err(malformed("bad magic string"));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = read_i16(buf, 40 + 2 * i, endian);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(malformed("dim[0] outside 1..=7"));
    }
    let extents: Vec<usize> = dim[1..=ndim as usize]
        .iter()
        .map(|&d| d.max(0) as usize)
        .collect();
    if extents.iter().any(|&d| d == 0) {
        return Err(malformed("zero-sized dimension"));
    }
    if ndim < 3 || extents[3..].iter().any(|&d| d != 1) {
        return Err(Error::NotThreeDimensional {
            path: path.to_path_buf(),
            ndim: ndim as usize,
            dims: extents,
        });
    }

    let datatype = read_i16(buf, 70, endian);
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = read_f32(buf, 76 + 4 * i, endian);
    }
    let vox_offset = read_f32(buf, 108, endian);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(malformed("vox_offset inside the header"));
    }
    let scl_slope = read_f32(buf, 112, endian);
    let scl_inter = read_f32(buf, 116, endian);
    let qform_code = read_i16(buf, 252, endian);
    let sform_code = read_i16(buf, 254, endian);

    let spacing: [f64; 3] = std::array::from_fn(|a| {
        let p = pixdim[a + 1].abs() as f64;
        if p > 0.0 && p.is_finite() {
            p
        } else {
            1.0
        }
    });

    let affine = if sform_code > 0 {
        let mut m = [[0f64; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = read_f32(buf, 280 + 16 * r + 4 * c, endian) as f64;
            }
        }
        m
    } else if qform_code > 0 {
        let b = read_f32(buf, 256, endian) as f64;
        let c = read_f32(buf, 260, endian) as f64;
        let d = read_f32(buf, 264, endian) as f64;
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let rot = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ];
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [spacing[0], spacing[1], spacing[2] * qfac];
        let offset = [
            read_f32(buf, 268, endian) as f64,
            read_f32(buf, 272, endian) as f64,
            read_f32(buf, 276, endian) as f64,
        ];
        std::array::from_fn(|r| {
            [
                rot[r][0] * scale[0],
                rot[r][1] * scale[1],
                rot[r][2] * scale[2],
                offset[r],
            ]
        })
    } else {
        [
            [spacing[0], 0.0, 0.0, 0.0],
            [0.0, spacing[1], 0.0, 0.0],
            [0.0, 0.0, spacing[2], 0.0],
        ]
    };

    Ok(Header {
        endian,
        dims: [extents[0], extents[1], extents[2]],
        datatype,
        pixdim,
        vox_offset: vox_offset as usize,
        scl_slope,
        scl_inter,
        affine,
    })
}

fn decode_payload(buf: &[u8], hdr: &Header, path: &Path) -> Result<Vec<f32>> {
    let n: usize = hdr.dims.iter().product();
    let width = match hdr.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_INT64 | DT_UINT64 | DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let bytes = buf
        .get(hdr.vox_offset..hdr.vox_offset + n * width)
        .ok_or_else(|| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("payload truncated: need {} bytes after offset {}", n * width, hdr.vox_offset),
        })?;
    let e = hdr.endian;
    let at = |i: usize| &bytes[i * width..];
    let raw: Vec<f64> = (0..n)
        .map(|i| match (hdr.datatype, e) {
            (DT_UINT8, _) => bytes[i] as f64,
            (DT_INT8, _) => bytes[i] as i8 as f64,
            (DT_INT16, Endian::Little) => LittleEndian::read_i16(at(i)) as f64,
            (DT_INT16, Endian::Big) => BigEndian::read_i16(at(i)) as f64,
            (DT_UINT16, Endian::Little) => LittleEndian::read_u16(at(i)) as f64,
            (DT_UINT16, Endian::Big) => BigEndian::read_u16(at(i)) as f64,
            (DT_INT32, Endian::Little) => LittleEndian::read_i32(at(i)) as f64,
            (DT_INT32, Endian::Big) => BigEndian::read_i32(at(i)) as f64,
            (DT_UINT32, Endian::Little) => LittleEndian::read_u32(at(i)) as f64,
            (DT_UINT32, Endian::Big) => BigEndian::read_u32(at(i)) as f64,
            (DT_FLOAT32, Endian::Little) => LittleEndian::read_f32(at(i)) as f64,
            (DT_FLOAT32, Endian::Big) => BigEndian::read_f32(at(i)) as f64,
            (DT_INT64, Endian::Little) => LittleEndian::read_i64(at(i)) as f64,
            (DT_INT64, Endian::Big) => BigEndian::read_i64(at(i)) as f64,
            (DT_UINT64, Endian::Little) => LittleEndian::read_u64(at(i)) as f64,
            (DT_UINT64, Endian::Big) => BigEndian::read_u64(at(i)) as f64,
            (DT_FLOAT64, Endian::Little) => LittleEndian::read_f64(at(i)),
            (DT_FLOAT64, Endian::Big) => BigEndian::read_f64(at(i)),
            _ => unreachable!(),
        })
        .collect();
    let scaled = hdr.scl_slope != 0.0
        && hdr.scl_slope.is_finite()
        && !(hdr.scl_slope == 1.0 && hdr.scl_inter == 0.0);
    Ok(if scaled {
        let (s, b) = (hdr.scl_slope as f64, hdr.scl_inter as f64);
        raw.into_iter().map(|v| (v * s + b) as f32).collect()
    } else {
        raw.into_iter().map(|v| v as f32).collect()
    })
}

/// For each canonical axis, the source grid axis feeding it and whether it
/// runs backwards relative to RAS+.
fn canonical_axes(affine: &[[f64; 4]; 3]) -> [(usize, bool); 3] {
    let mut out = [(usize::MAX, false); 3];
    let mut used_src = [false; 3];
    // Greedy assignment by largest absolute direction cosine.
    for _ in 0..3 {
        let mut best = (0usize, 0usize, -1.0f64);
        for (world, row) in affine.iter().enumerate() {
            if out[world].0 != usize::MAX {
                continue;
            }
            for src in 0..3 {
                if used_src[src] {
                    continue;
                }
                let m = row[src].abs();
                if m > best.2 {
                    best = (world, src, m);
                }
            }
        }
        let (world, src, _) = best;
        used_src[src] = true;
        out[world] = (src, affine[world][src] < 0.0);
    }
    out
}

/// Loads a NIfTI-1 volume (plain or gzip-compressed) and reorders it into
/// the canonical RAS+ frame.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let buf = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(Cursor::new(&raw))
            .read_to_end(&mut out)
            .map_err(|e| Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("gzip stream: {e}"),
            })?;
        out
    } else {
        raw
    };
    let hdr = parse_header(&buf, path)?;
    let src = decode_payload(&buf, &hdr, path)?;

    let axes = canonical_axes(&hdr.affine);
    let src_dims = hdr.dims;
    let dims: [usize; 3] = std::array::from_fn(|a| src_dims[axes[a].0]);
    let spacing: [f64; 3] = std::array::from_fn(|a| {
        let p = hdr.pixdim[axes[a].0 + 1].abs() as f64;
        if p > 0.0 && p.is_finite() {
            p
        } else {
            1.0
        }
    });

    let src_index = |c: [usize; 3]| -> [usize; 3] {
        let mut s = [0usize; 3];
        for a in 0..3 {
            let (axis, flipped) = axes[a];
            s[axis] = if flipped { dims[a] - 1 - c[a] } else { c[a] };
        }
        s
    };
    let identity = axes.iter().enumerate().all(|(a, &(s, f))| a == s && !f);
    let data = if identity {
        src
    } else {
        let mut data = Vec::with_capacity(src.len());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let s = src_index([i, j, k]);
                    data.push(src[s[0] + src_dims[0] * (s[1] + src_dims[1] * s[2])]);
                }
            }
        }
        data
    };

    let first = src_index([0, 0, 0]);
    let origin: [f64; 3] = std::array::from_fn(|r| {
        let m = &hdr.affine[r];
        m[0] * first[0] as f64 + m[1] * first[1] as f64 + m[2] * first[2] as f64 + m[3]
    });

    Ok(Volume::new(dims, spacing, data)?.with_origin(origin))
}

fn encode(v: &Volume) -> Result<Vec<u8>> {
    let mut h = vec![0u8; DATA_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let dims = v.dims();
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for a in 0..3 {
        dim[a + 1] = i16::try_from(dims[a])
            .map_err(|_| Error::InvalidArgument(format!("dimension {} exceeds NIfTI-1 limits", dims[a])))?;
    }
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], DT_FLOAT32);
    LittleEndian::write_i16(&mut h[72..], 32);
    let sp = v.spacing();
    let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    h[123] = 2; // mm
    let descrip = b"sinus-mil volume";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    LittleEndian::write_i16(&mut h[252..], 1);
    LittleEndian::write_i16(&mut h[254..], 1);
    let o = v.origin();
    for a in 0..3 {
        LittleEndian::write_f32(&mut h[268 + 4 * a..], o[a] as f32);
        let mut row = [0f32; 4];
        row[a] = sp[a] as f32;
        row[3] = o[a] as f32;
        for (c, x) in row.iter().enumerate() {
            LittleEndian::write_f32(&mut h[280 + 16 * a + 4 * c..], *x);
        }
    }
    h[344..348].copy_from_slice(MAGIC_SINGLE);

    h.reserve(v.len() * 4);
    for &x in v.data() {
        h.write_f32::<LittleEndian>(x)?;
    }
    Ok(h)
}

/// Writes a float32 NIfTI-1 file; a `.gz` extension selects gzip.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(v)?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Volume {
        Volume::from_fn([5, 4, 3], [0.5, 0.75, 1.25], |i, j, k| {
            (i as f32 * 0.3 - j as f32 * 1.7 + k as f32 * 11.0).sin() * 100.0
        })
        .unwrap()
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_volume("/nonexistent/missing.nii").unwrap_err();
        assert!(matches!(err, Error::FileNotFound(_)));
    }

    #[test]
    fn garbage_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        fs::write(&p, vec![7u8; 400]).unwrap();
        assert!(matches!(load_volume(&p).unwrap_err(), Error::MalformedHeader { .. }));
        fs::write(&p, b"short").unwrap();
        assert!(matches!(load_volume(&p).unwrap_err(), Error::MalformedHeader { .. }));
    }

    #[test]
    fn four_dimensional_payload_is_rejected() {
        let v = sample_volume();
        let mut bytes = encode(&v).unwrap();
        LittleEndian::write_i16(&mut bytes[40..], 4);
        LittleEndian::write_i16(&mut bytes[48..], 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("four.nii");
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_volume(&p).unwrap_err(),
            Error::NotThreeDimensional { ndim: 4, .. }
        ));
    }

    #[test]
    fn trailing_singleton_dimension_is_3d() {
        let v = sample_volume();
        let mut bytes = encode(&v).unwrap();
        LittleEndian::write_i16(&mut bytes[40..], 4);
        LittleEndian::write_i16(&mut bytes[48..], 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        fs::write(&p, bytes).unwrap();
        assert_eq!(load_volume(&p).unwrap().data(), v.data());
    }

    #[test]
    fn round_trip_plain_and_gzip() {
        let v = sample_volume().with_origin([-3.0, 4.5, 10.0]);
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("v.nii");
        let gz = dir.path().join("v.nii.gz");
        save_volume(&v, &plain).unwrap();
        save_volume(&v, &gz).unwrap();
        let a = load_volume(&plain).unwrap();
        let b = load_volume(&gz).unwrap();
        assert_eq!(a, v);
        assert_eq!(a, b);
        assert!(fs::metadata(&gz).unwrap().len() != fs::metadata(&plain).unwrap().len());
    }

    #[test]
    fn unit_spacing_passes_through_header() {
        let v = Volume::filled([3, 3, 3], [1.0; 3], 2.0).unwrap();
        let bytes = encode(&v).unwrap();
        for a in 0..3 {
            assert_eq!(LittleEndian::read_f32(&bytes[80 + 4 * a..]), 1.0);
        }
    }

    /// Writes an int16 big-endian file whose affine is LPS with axes
    /// permuted, and checks the loader lands it in RAS+.
    #[test]
    fn reorients_to_canonical_frame() {
        let src_dims = [4usize, 3, 2];
        let mut h = vec![0u8; DATA_OFFSET];
        BigEndian::write_i32(&mut h[0..], 348);
        let dim = [3i16, 4, 3, 2, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            BigEndian::write_i16(&mut h[40 + 2 * i..], *d);
        }
        BigEndian::write_i16(&mut h[70..], DT_INT16);
        BigEndian::write_i16(&mut h[72..], 16);
        let pixdim = [1.0f32, 2.0, 3.0, 4.0, 1.0, 1.0, 1.0, 1.0];
        for (i, p) in pixdim.iter().enumerate() {
            BigEndian::write_f32(&mut h[76 + 4 * i..], *p);
        }
        BigEndian::write_f32(&mut h[108..], DATA_OFFSET as f32);
        BigEndian::write_i16(&mut h[254..], 1);
        // world x (R) <- -src axis 1, world y (A) <- +src axis 2, world z (S) <- -src axis 0
        let srows = [[0.0f32, -3.0, 0.0, 0.0], [0.0, 0.0, 4.0, 0.0], [-2.0, 0.0, 0.0, 0.0]];
        for (r, row) in srows.iter().enumerate() {
            for (c, x) in row.iter().enumerate() {
                BigEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], *x);
            }
        }
        h[344..348].copy_from_slice(MAGIC_SINGLE);
        let value = |s: [usize; 3]| (s[0] + 10 * s[1] + 100 * s[2]) as i16;
        for s2 in 0..src_dims[2] {
            for s1 in 0..src_dims[1] {
                for s0 in 0..src_dims[0] {
                    h.write_i16::<BigEndian>(value([s0, s1, s2])).unwrap();
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lps.nii");
        fs::write(&p, h).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.dims(), [3, 2, 4]);
        assert_eq!(v.spacing(), [3.0, 4.0, 2.0]);
        for k in 0..4 {
            for j in 0..2 {
                for i in 0..3 {
                    let s = [3 - k, 2 - i, j];
                    assert_eq!(v.get(i, j, k), value(s) as f32);
                }
            }
        }
    }

    #[test]
    fn unsupported_datatype() {
        let v = sample_volume();
        let mut bytes = encode(&v).unwrap();
        LittleEndian::write_i16(&mut bytes[70..], 32); // complex64
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.nii");
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_volume(&p).unwrap_err(), Error::UnsupportedDatatype(32)));
    }
}

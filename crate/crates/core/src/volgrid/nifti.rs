//! Minimal NIfTI-1 single-file (`.nii`) reader and writer.
//!
//! Reading accepts little-endian uint8, int16 and float32 data with either an
//! sform or a qform. Writing always emits float32 with the sform set from the
//! grid affine. Multi-channel data (deformations, atlases) are stored along
//! the fifth dimension, as is customary for vector-valued NIfTI images.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use nalgebra::{Matrix3, Matrix4};

use crate::error::{Error, Result};

use super::{Units, Volume, VoxelGrid};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

const INTENT_VECTOR: i16 = 1007;
const XFORM_ALIGNED_ANAT: i16 = 2;
const UNITS_MM: u8 = 2;

mod off {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const INTENT_CODE: usize = 68;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Multi-channel image as read from disk.
#[derive(Debug, Clone)]
pub struct NiftiChannels {
    pub grid: VoxelGrid,
    pub channels: Vec<Vec<f64>>,
    pub units: Units,
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let img = read_nifti_channels(path)?;
    if img.channels.len() != 1 {
        return Err(Error::Format(format!(
            "{}: expected a single 3D volume, found {} channels",
            path.display(),
            img.channels.len()
        )));
    }
    let NiftiChannels { grid, mut channels, units } = img;
    let data = channels.pop().expect("one channel");
    // Probability tagging is advisory; fall back when the data disagree.
    Volume::new(grid.clone(), data.clone(), units)
        .or_else(|_| Volume::new(grid, data, Units::Dimensionless))
}

pub fn read_nifti_channels(path: impl AsRef<Path>) -> Result<NiftiChannels> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_nifti(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti_channels(v.grid(), &[v.data()], v.units(), path)
}

pub fn write_nifti_channels(grid: &VoxelGrid, channels: &[&[f64]], units: Units, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(grid, channels, units)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn encode(grid: &VoxelGrid, channels: &[&[f64]], units: Units) -> Result<Vec<u8>> {
    if channels.is_empty() || channels.iter().any(|c| c.len() != grid.len()) {
        return Err(Error::Domain("channel lengths do not match grid".into()));
    }
    let nonfinite = channels.iter().flat_map(|c| c.iter()).filter(|v| !v.is_finite()).count();
    if nonfinite > 0 {
        log::warn!("writing {nonfinite} non-finite voxel values verbatim");
    }
    let nchan = channels.len();
    let mut buf = vec![0u8; VOX_OFFSET + 4 * grid.len() * nchan];
    let h = &mut buf[..HEADER_SIZE];
    LittleEndian::write_i32(&mut h[off::SIZEOF_HDR..], HEADER_SIZE as i32);
    h[38] = b'r';

    let dims = grid.dims();
    let mut dim = [1i16; 8];
    dim[0] = if nchan > 1 { 5 } else { 3 };
    for a in 0..3 {
        dim[a + 1] = i16::try_from(dims[a])
            .map_err(|_| Error::Unsupported(format!("dimension {} exceeds NIfTI-1 limit", dims[a])))?;
    }
    if nchan > 1 {
        dim[5] = i16::try_from(nchan).map_err(|_| Error::Unsupported("too many channels".into()))?;
    }
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[off::DIM + 2 * i..], *d);
    }
    if nchan > 1 {
        LittleEndian::write_i16(&mut h[off::INTENT_CODE..], INTENT_VECTOR);
    }
    LittleEndian::write_i16(&mut h[off::DATATYPE..], DT_FLOAT32);
    LittleEndian::write_i16(&mut h[off::BITPIX..], 32);

    let lin = super::linear_part(grid.affine());
    let qfac: f32 = if lin.determinant() < 0.0 { -1.0 } else { 1.0 };
    let spacing = grid.spacing();
    let mut pixdim = [1f32; 8];
    pixdim[0] = qfac;
    for a in 0..3 {
        pixdim[a + 1] = spacing[a] as f32;
    }
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[off::PIXDIM + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[off::VOX_OFFSET..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[off::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut h[off::SCL_INTER..], 0.0);
    h[off::XYZT_UNITS] = UNITS_MM;

    let descrip = format!("units={}", units.tag());
    h[off::DESCRIP..off::DESCRIP + descrip.len()].copy_from_slice(descrip.as_bytes());

    LittleEndian::write_i16(&mut h[off::QFORM_CODE..], 0);
    LittleEndian::write_i16(&mut h[off::SFORM_CODE..], XFORM_ALIGNED_ANAT);
    let aff = grid.affine();
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[off::SROW_X + 16 * r + 4 * c..], aff[(r, c)] as f32);
        }
    }
    h[off::MAGIC..off::MAGIC + 4].copy_from_slice(b"n+1\0");

    let mut pos = VOX_OFFSET;
    for c in channels {
        for &v in c.iter() {
            LittleEndian::write_f32(&mut buf[pos..], v as f32);
            pos += 4;
        }
    }
    Ok(buf)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<NiftiChannels> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format("file shorter than a NIfTI-1 header".into()));
    }
    let h = &bytes[..HEADER_SIZE];
    let sizeof_hdr = LittleEndian::read_i32(&h[off::SIZEOF_HDR..]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::Unsupported("big-endian NIfTI files".into()));
        }
        return Err(Error::Format(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    let magic = &h[off::MAGIC..off::MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(Error::Format(format!(
            "magic {:?} is not the single-file NIfTI-1 signature",
            String::from_utf8_lossy(&magic[..3])
        )));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = LittleEndian::read_i16(&h[off::DIM + 2 * i..]);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..3 {
        if (a as i16) < ndim {
            if dim[a + 1] < 1 {
                return Err(Error::Format(format!("dim[{}] = {}", a + 1, dim[a + 1])));
            }
            dims[a] = dim[a + 1] as usize;
        }
    }
    let mut nchan = 1usize;
    for d in 4..=ndim as usize {
        if dim[d] < 1 {
            return Err(Error::Format(format!("dim[{d}] = {}", dim[d])));
        }
        nchan *= dim[d] as usize;
    }

    let datatype = LittleEndian::read_i16(&h[off::DATATYPE..]);
    let bitpix = LittleEndian::read_i16(&h[off::BITPIX..]);
    let (width, expect_bitpix) = match datatype {
        DT_UINT8 => (1usize, 8),
        DT_INT16 => (2, 16),
        DT_FLOAT32 => (4, 32),
        other => return Err(Error::Unsupported(format!("datatype code {other}"))),
    };
    if bitpix != expect_bitpix {
        return Err(Error::Format(format!("bitpix {bitpix} inconsistent with datatype {datatype}")));
    }

    let vox_offset = LittleEndian::read_f32(&h[off::VOX_OFFSET..]);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let nvox = dims[0] * dims[1] * dims[2];
    let end = start + width * nvox * nchan;
    if bytes.len() < end {
        return Err(Error::Format(format!("data truncated: need {end} bytes, file has {}", bytes.len())));
    }

    let affine = spatial_transform(h)?;
    let grid = VoxelGrid::new(dims, affine)?;

    let slope = LittleEndian::read_f32(&h[off::SCL_SLOPE..]) as f64;
    let inter = LittleEndian::read_f32(&h[off::SCL_INTER..]) as f64;
    let scale = |raw: f64| if slope != 0.0 && slope.is_finite() { raw * slope + inter } else { raw };

    let raw = &bytes[start..end];
    let channels = (0..nchan)
        .map(|c| {
            let chunk = &raw[c * nvox * width..(c + 1) * nvox * width];
            (0..nvox)
                .map(|i| {
                    let v = match datatype {
                        DT_UINT8 => chunk[i] as f64,
                        DT_INT16 => LittleEndian::read_i16(&chunk[2 * i..]) as f64,
                        _ => LittleEndian::read_f32(&chunk[4 * i..]) as f64,
                    };
                    scale(v)
                })
                .collect()
        })
        .collect();

    let descrip = &h[off::DESCRIP..off::DESCRIP + 80];
    let descrip = String::from_utf8_lossy(descrip.split(|&b| b == 0).next().unwrap_or(&[]));
    let units = descrip
        .strip_prefix("units=")
        .and_then(Units::from_tag)
        .unwrap_or(Units::Dimensionless);

    Ok(NiftiChannels { grid, channels, units })
}

fn spatial_transform(h: &[u8]) -> Result<Matrix4<f64>> {
    let sform_code = LittleEndian::read_i16(&h[off::SFORM_CODE..]);
    let qform_code = LittleEndian::read_i16(&h[off::QFORM_CODE..]);
    if sform_code > 0 {
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = LittleEndian::read_f32(&h[off::SROW_X + 16 * r + 4 * c..]) as f64;
            }
        }
        return Ok(m);
    }
    if qform_code > 0 {
        let f = |o: usize| LittleEndian::read_f32(&h[o..]) as f64;
        let (b, c, d) = (f(off::QUATERN_B), f(off::QUATERN_B + 4), f(off::QUATERN_B + 8));
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let rot = Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        );
        let pix: Vec<f64> = (0..4).map(|i| f(off::PIXDIM + 4 * i)).collect();
        let qfac = if pix[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [pix[1], pix[2], qfac * pix[3]];
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for cc in 0..3 {
                m[(r, cc)] = rot[(r, cc)] * scale[cc];
            }
            m[(r, 3)] = f(off::QOFFSET_X + 4 * r);
        }
        return Ok(m);
    }
    Err(Error::Format("neither sform nor qform is set".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> VoxelGrid {
        VoxelGrid::from_spacing([4, 4, 4], [1.0, 1.5, 3.0], [-2.0, 1.0, 5.0]).unwrap()
    }

    fn header_template(datatype: i16, bitpix: i16) -> Vec<u8> {
        let g = VoxelGrid::from_spacing([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let mut b = encode(&g, &[&[0.0, 0.0]], Units::Dimensionless).unwrap();
        LittleEndian::write_i16(&mut b[off::DATATYPE..], datatype);
        LittleEndian::write_i16(&mut b[off::BITPIX..], bitpix);
        b
    }

    #[test]
    fn file_size_matches_layout() {
        let v = Volume::zeros(small_grid(), Units::Hu);
        let b = encode(v.grid(), &[v.data()], v.units()).unwrap();
        assert_eq!(b.len(), 352 + 4 * 64);
        assert_eq!(&b[344..348], b"n+1\0");
    }

    #[test]
    fn slope_and_intercept_applied() {
        let mut b = header_template(DT_INT16, 16);
        b.truncate(VOX_OFFSET);
        b.extend_from_slice(&3i16.to_le_bytes());
        b.extend_from_slice(&(-1i16).to_le_bytes());
        LittleEndian::write_f32(&mut b[off::SCL_SLOPE..], 2.0);
        LittleEndian::write_f32(&mut b[off::SCL_INTER..], 10.0);
        let img = decode(&b).unwrap();
        assert_eq!(img.channels[0], vec![16.0, 8.0]);
    }

    #[test]
    fn uint8_data_read() {
        let mut b = header_template(DT_UINT8, 8);
        b.truncate(VOX_OFFSET);
        b.extend_from_slice(&[7u8, 250u8]);
        let img = decode(&b).unwrap();
        assert_eq!(img.channels[0], vec![7.0, 250.0]);
    }

    #[test]
    fn two_file_magic_rejected() {
        let mut b = header_template(DT_FLOAT32, 32);
        b[off::MAGIC..off::MAGIC + 4].copy_from_slice(b"ni1\0");
        assert!(matches!(decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_datatype_rejected() {
        let b = header_template(64, 64);
        assert!(matches!(decode(&b), Err(Error::Unsupported(_))));
    }

    #[test]
    fn missing_transform_rejected() {
        let mut b = header_template(DT_FLOAT32, 32);
        LittleEndian::write_i16(&mut b[off::SFORM_CODE..], 0);
        assert!(matches!(decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn qform_used_without_sform() {
        let mut b = header_template(DT_FLOAT32, 32);
        LittleEndian::write_i16(&mut b[off::SFORM_CODE..], 0);
        LittleEndian::write_i16(&mut b[off::QFORM_CODE..], 1);
        // 90 degrees about z: a = cos 45, d = sin 45
        let s = std::f32::consts::FRAC_1_SQRT_2;
        LittleEndian::write_f32(&mut b[off::QUATERN_B + 8..], s);
        LittleEndian::write_f32(&mut b[off::PIXDIM + 4..], 2.0);
        LittleEndian::write_f32(&mut b[off::QOFFSET_X..], 5.0);
        let img = decode(&b).unwrap();
        let m = img.grid.affine();
        assert!((m[(1, 0)] - 2.0).abs() < 1e-6);
        assert!((m[(0, 1)] + 1.0).abs() < 1e-6);
        assert!((m[(0, 3)] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn big_endian_rejected() {
        let mut b = header_template(DT_FLOAT32, 32);
        b[0..4].copy_from_slice(&348i32.to_be_bytes());
        assert!(matches!(decode(&b), Err(Error::Unsupported(_))));
    }

    #[test]
    fn multichannel_roundtrip() {
        let g = small_grid();
        let a: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..64).map(|i| -(i as f64) * 0.5).collect();
        let bytes = encode(&g, &[&a, &b], Units::Dimensionless).unwrap();
        let img = decode(&bytes).unwrap();
        assert_eq!(img.channels, vec![a, b]);
        assert_eq!(img.grid.dims(), [4, 4, 4]);
    }
}

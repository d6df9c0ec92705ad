//! NIfTI-1 single-file (`.nii`, optionally gzip-wrapped) reading and writing.
//!
//! Only 3D payloads of uint8, int16, float32 and float64 are handled. Spatial
//! orientation fields are carried through unchanged and never used for
//! resampling.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::volume::{check_dims, BinaryMask, Dims, Volume3D};

pub const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    F32,
    F64,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::F32 => 16,
            DataType::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(DataType::U8),
            4 => Some(DataType::I16),
            16 => Some(DataType::F32),
            64 => Some(DataType::F64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }
}

/// Orientation fields of the header (qform/sform), kept verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct Orientation {
    pub qfac: f32,
    pub xyzt_units: u8,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
}

#[derive(Debug, Clone)]
struct Header {
    dims: Dims,
    datatype: DataType,
    spacing: [f64; 3],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    orientation: Orientation,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(0, format!("gzip stream: {e}")))?;
        return Ok(out);
    }
    Ok(raw)
}

fn parse_header(buf: &[u8]) -> Result<(Header, bool)> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::format(
            buf.len(),
            format!("file holds {} bytes, header needs {HEADER_SIZE}", buf.len()),
        ));
    }
    let big = if LittleEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32 {
        false
    } else if BigEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(Error::format(0, "sizeof_hdr is not 348"));
    };
    if &buf[344..348] != MAGIC {
        return Err(Error::format(344, "magic is not \"n+1\\0\""));
    }
    if big {
        Ok((header_fields::<BigEndian>(buf)?, true))
    } else {
        Ok((header_fields::<LittleEndian>(buf)?, false))
    }
}

fn header_fields<B: ByteOrder>(buf: &[u8]) -> Result<Header> {
    let i16_at = |o: usize| B::read_i16(&buf[o..o + 2]);
    let f32_at = |o: usize| B::read_f32(&buf[o..o + 4]);
    let f32x4 = |o: usize| [f32_at(o), f32_at(o + 4), f32_at(o + 8), f32_at(o + 12)];

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(40, format!("dim[0] = {ndim} out of range")));
    }
    let mut extent = [1usize; 3];
    for (k, e) in extent.iter_mut().enumerate() {
        if (k as i16) < ndim {
            let v = i16_at(42 + 2 * k);
            if v < 1 {
                return Err(Error::format(42 + 2 * k, format!("dim[{}] = {v}", k + 1)));
            }
            *e = v as usize;
        }
    }
    for k in 3..ndim as usize {
        let v = i16_at(42 + 2 * k);
        if v > 1 {
            return Err(Error::format(
                42 + 2 * k,
                format!("dim[{}] = {v}; only 3D volumes are supported", k + 1),
            ));
        }
    }
    let code = i16_at(70);
    let datatype = DataType::from_code(code)
        .ok_or_else(|| Error::format(70, format!("unsupported datatype code {code}")))?;
    let mut spacing = [1.0; 3];
    for (k, s) in spacing.iter_mut().enumerate() {
        let p = f32_at(80 + 4 * k) as f64;
        if p.is_finite() && p > 0.0 {
            *s = p;
        }
    }
    let vox = f32_at(108);
    if !vox.is_finite() || vox < HEADER_SIZE as f32 {
        return Err(Error::format(108, format!("vox_offset {vox} invalid")));
    }
    Ok(Header {
        dims: Dims::new(extent[0], extent[1], extent[2])?,
        datatype,
        spacing,
        vox_offset: vox as usize,
        scl_slope: f32_at(112),
        scl_inter: f32_at(116),
        orientation: Orientation {
            qfac: f32_at(76),
            xyzt_units: buf[123],
            qform_code: i16_at(252),
            sform_code: i16_at(254),
            quatern: [f32_at(256), f32_at(260), f32_at(264)],
            qoffset: [f32_at(268), f32_at(272), f32_at(276)],
            srow_x: f32x4(280),
            srow_y: f32x4(296),
            srow_z: f32x4(312),
        },
    })
}

fn decode_payload<B: ByteOrder>(buf: &[u8], h: &Header) -> Result<Vec<f64>> {
    let n = h.dims.len();
    let width = h.datatype.bytes();
    let need = h.vox_offset + n * width;
    if buf.len() < need {
        return Err(Error::format(
            buf.len(),
            format!(
                "payload truncated: {} voxels need {need} bytes, file has {}",
                n,
                buf.len()
            ),
        ));
    }
    let payload = &buf[h.vox_offset..need];
    let scale = h.scl_slope != 0.0 && h.scl_slope.is_finite();
    let (slope, inter) = (h.scl_slope as f64, h.scl_inter as f64);
    let mut out = Vec::with_capacity(n);
    for (i, chunk) in payload.chunks_exact(width).enumerate() {
        let raw = match h.datatype {
            DataType::U8 => chunk[0] as f64,
            DataType::I16 => B::read_i16(chunk) as f64,
            DataType::F32 => B::read_f32(chunk) as f64,
            DataType::F64 => B::read_f64(chunk),
        };
        let v = if scale { raw * slope + inter } else { raw };
        if !v.is_finite() {
            return Err(Error::format(
                h.vox_offset + i * width,
                "non-finite voxel value",
            ));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let buf = read_bytes(path.as_ref())?;
    let (h, big) = parse_header(&buf)?;
    let data = if big {
        decode_payload::<BigEndian>(&buf, &h)?
    } else {
        decode_payload::<LittleEndian>(&buf, &h)?
    };
    let mut vol = Volume3D::new(h.dims, h.spacing, data)?;
    vol.set_orientation(Some(h.orientation));
    Ok(vol)
}

/// Reads a volume and sets voxels with value ≥ 0.5.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let vol = read_volume(path)?;
    BinaryMask::new(vol.dims(), vol.data().iter().map(|&v| v >= 0.5).collect())
}

fn encode_header(vol: &Volume3D, datatype: DataType) -> Result<[u8; VOX_OFFSET]> {
    type E = LittleEndian;
    let d = vol.dims();
    for (axis, n) in [d.nx, d.ny, d.nz].into_iter().enumerate() {
        if n > i16::MAX as usize {
            return Err(Error::Dims(format!("axis {axis} extent {n} exceeds NIfTI-1 limit")));
        }
    }
    let mut h = [0u8; VOX_OFFSET];
    E::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim = [3i16, d.nx as i16, d.ny as i16, d.nz as i16, 1, 1, 1, 1];
    for (k, v) in dim.iter().enumerate() {
        E::write_i16(&mut h[40 + 2 * k..42 + 2 * k], *v);
    }
    E::write_i16(&mut h[70..72], datatype.code());
    E::write_i16(&mut h[72..74], (datatype.bytes() * 8) as i16);
    let o = vol.orientation();
    let sp = vol.spacing();
    let pixdim = [
        o.map_or(1.0, |o| o.qfac),
        sp[0] as f32,
        sp[1] as f32,
        sp[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (k, v) in pixdim.iter().enumerate() {
        E::write_f32(&mut h[76 + 4 * k..80 + 4 * k], *v);
    }
    E::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    // scl_slope 0 means stored values are used as-is
    E::write_f32(&mut h[112..116], 0.0);
    E::write_f32(&mut h[116..120], 0.0);
    h[123] = o.map_or(10, |o| o.xyzt_units);
    if let Some(o) = o {
        E::write_i16(&mut h[252..254], o.qform_code);
        E::write_i16(&mut h[254..256], o.sform_code);
        let floats = o
            .quatern
            .iter()
            .chain(&o.qoffset)
            .chain(&o.srow_x)
            .chain(&o.srow_y)
            .chain(&o.srow_z);
        for (k, v) in floats.enumerate() {
            E::write_f32(&mut h[256 + 4 * k..260 + 4 * k], *v);
        }
    }
    h[344..348].copy_from_slice(MAGIC);
    Ok(h)
}

/// Writes `vol` as an uncompressed single-file NIfTI-1 image. Values are
/// rounded and saturated for the integer datatypes.
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>, datatype: DataType) -> Result<()> {
    let header = encode_header(vol, datatype)?;
    let mut buf = Vec::with_capacity(VOX_OFFSET + vol.data().len() * datatype.bytes());
    buf.extend_from_slice(&header);
    let mut scratch = [0u8; 8];
    for &v in vol.data() {
        match datatype {
            DataType::U8 => buf.push(v.round().clamp(0.0, 255.0) as u8),
            DataType::I16 => {
                LittleEndian::write_i16(
                    &mut scratch,
                    v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16,
                );
                buf.extend_from_slice(&scratch[..2]);
            }
            DataType::F32 => {
                LittleEndian::write_f32(&mut scratch, v as f32);
                buf.extend_from_slice(&scratch[..4]);
            }
            DataType::F64 => {
                LittleEndian::write_f64(&mut scratch, v);
                buf.extend_from_slice(&scratch);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

/// Writes a mask as uint8 {0,1}, borrowing spacing and orientation from
/// `like` when given.
pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>, like: Option<&Volume3D>) -> Result<()> {
    let mut vol = mask.to_volume();
    if let Some(like) = like {
        check_dims(like.dims(), mask.dims())?;
        vol.set_spacing(like.spacing());
        vol.set_orientation(like.orientation().cloned());
    }
    write_volume(&vol, path, DataType::U8)
}

/// White- and gray-matter probability atlases on the clinical grid.
#[derive(Debug, Clone)]
pub struct AtlasPair {
    pub wm: Volume3D,
    pub gm: Volume3D,
}

impl AtlasPair {
    /// Clamps both maps into [0, 1].
    pub fn new(wm: Volume3D, gm: Volume3D) -> Result<Self> {
        check_dims(wm.dims(), gm.dims())?;
        let clamp = |v: &Volume3D| v.with_data_unchecked(v.data().iter().map(|x| x.clamp(0.0, 1.0)).collect());
        Ok(AtlasPair {
            wm: clamp(&wm),
            gm: clamp(&gm),
        })
    }

    pub fn load(wm: impl AsRef<Path>, gm: impl AsRef<Path>, grid: Dims) -> Result<Self> {
        let wm = read_volume(wm)?;
        let gm = read_volume(gm)?;
        check_dims(grid, wm.dims())?;
        Self::new(wm, gm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn full_sized_header_round_trip() {
        let dir = tempdir().unwrap();
        let d = Dims::new(181, 217, 181).unwrap();
        let vol = Volume3D::filled(d, 0.25);
        let p = dir.path().join("big.nii");
        write_volume(&vol, &p, DataType::F32).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back.dims(), d);
        assert!(back.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn f32_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let d = Dims::new(64, 64, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..d.len()).map(|_| rng.random::<f32>() as f64 * 1000.0).collect();
        let vol = Volume3D::new(d, [0.9, 1.0, 1.2], data).unwrap();
        let p = dir.path().join("r.nii");
        write_volume(&vol, &p, DataType::F32).unwrap();
        let bytes = fs::read(&p).unwrap();
        let back = read_volume(&p).unwrap();
        for (i, (&a, &b)) in vol.data().iter().zip(back.data()).enumerate() {
            assert_eq!((a as f32).to_bits(), (b as f32).to_bits());
            // byte oracle: payload bytes are the little-endian f32 encoding
            let off = VOX_OFFSET + 4 * i;
            assert_eq!(&bytes[off..off + 4], &(a as f32).to_le_bytes());
        }
        assert_eq!(back.spacing(), [0.9f32 as f64, 1.0, 1.2f32 as f64]);
    }

    #[test]
    fn mask_round_trip_and_threshold() {
        let dir = tempdir().unwrap();
        let d = Dims::new(4, 3, 2).unwrap();
        let m = BinaryMask::from_fn(d, |x, y, z| (x + y + z) % 2 == 0);
        let p = dir.path().join("m.nii");
        write_mask(&m, &p, None).unwrap();
        assert_eq!(fs::read(&p).unwrap()[70], 2);
        assert_eq!(read_mask(&p).unwrap(), m);

        let prob = Volume3D::new(Dims::new(2, 1, 1).unwrap(), [1.0; 3], vec![0.2, 0.7]).unwrap();
        let p2 = dir.path().join("prob.nii");
        write_volume(&prob, &p2, DataType::F32).unwrap();
        assert_eq!(read_mask(&p2).unwrap().data(), &[false, true]);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempdir().unwrap();
        let small = Volume3D::filled(Dims::new(5, 5, 5).unwrap(), 1.0);
        let p = dir.path().join("t.nii");
        write_volume(&small, &p, DataType::F32).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        for k in 1..4 {
            LittleEndian::write_i16(&mut bytes[40 + 2 * k..42 + 2 * k], 10);
        }
        fs::write(&p, &bytes).unwrap();
        match read_volume(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        let dir = tempdir().unwrap();
        let empty = dir.path().join("empty.nii");
        fs::write(&empty, b"").unwrap();
        assert!(matches!(read_volume(&empty), Err(Error::Format { offset: 0, .. })));

        let vol = Volume3D::filled(Dims::new(2, 2, 2).unwrap(), 1.0);
        let p = dir.path().join("x.nii");
        write_volume(&vol, &p, DataType::F32).unwrap();
        let good = fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[344] = b'x';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { offset: 344, .. })));

        let mut bad = good.clone();
        LittleEndian::write_i16(&mut bad[70..72], 128);
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { offset: 70, .. })));

        let mut bad = good;
        LittleEndian::write_f32(&mut bad[VOX_OFFSET + 4..VOX_OFFSET + 8], f32::NAN);
        fs::write(&p, &bad).unwrap();
        assert!(matches!(
            read_volume(&p),
            Err(Error::Format { offset, .. }) if offset == VOX_OFFSET + 4
        ));
    }

    #[test]
    fn gzip_and_scaling_and_int16() {
        use flate2::write::GzEncoder;
        let dir = tempdir().unwrap();
        let d = Dims::new(3, 2, 1).unwrap();
        let vol = Volume3D::new(d, [1.0; 3], vec![-3.0, 0.0, 1.0, 2.0, 300.0, -32768.0]).unwrap();
        let p = dir.path().join("i.nii");
        write_volume(&vol, &p, DataType::I16).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        LittleEndian::write_f32(&mut bytes[112..116], 2.0);
        LittleEndian::write_f32(&mut bytes[116..120], 1.0);
        let gz = dir.path().join("i.nii.gz");
        let mut enc = GzEncoder::new(fs::File::create(&gz).unwrap(), flate2::Compression::fast());
        enc.write_all(&bytes).unwrap();
        enc.finish().unwrap();
        let back = read_volume(&gz).unwrap();
        let expect: Vec<f64> = vol.data().iter().map(|v| v * 2.0 + 1.0).collect();
        assert_eq!(back.data(), &expect[..]);
    }

    #[test]
    fn orientation_preserved() {
        let dir = tempdir().unwrap();
        let mut vol = Volume3D::filled(Dims::new(2, 2, 2).unwrap(), 0.5);
        let o = Orientation {
            qfac: -1.0,
            xyzt_units: 10,
            qform_code: 1,
            sform_code: 2,
            quatern: [0.0, 1.0, 0.0],
            qoffset: [90.0, -126.0, -72.0],
            srow_x: [-1.0, 0.0, 0.0, 90.0],
            srow_y: [0.0, 1.0, 0.0, -126.0],
            srow_z: [0.0, 0.0, 1.0, -72.0],
        };
        vol.set_orientation(Some(o.clone()));
        let p = dir.path().join("o.nii");
        write_volume(&vol, &p, DataType::F32).unwrap();
        assert_eq!(read_volume(&p).unwrap().orientation(), Some(&o));
    }

    #[test]
    fn atlas_values_clamped() {
        let d = Dims::new(3, 1, 1).unwrap();
        let wm = Volume3D::new(d, [1.0; 3], vec![-0.5, 0.5, 1.5]).unwrap();
        let gm = Volume3D::filled(d, 0.3);
        let pair = AtlasPair::new(wm, gm).unwrap();
        assert_eq!(pair.wm.data(), &[0.0, 0.5, 1.0]);
        assert!(AtlasPair::new(Volume3D::filled(d, 0.0), Volume3D::filled(Dims::new(1, 1, 1).unwrap(), 0.0)).is_err());
    }
}

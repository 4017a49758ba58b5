//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only what the pipeline needs: 3D scalar images, the common integer and
//! float datatypes, `pixdim` spacing and `scl_slope`/`scl_inter` scaling.
//! Orientation matrices are written as a plain diagonal and ignored on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};
use crate::volume::{IntensityVolume, LabelVolume, UNLABELED};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

fn bytes_per_voxel(datatype: i16) -> Result<usize> {
    Ok(match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::Format(format!("unsupported datatype code {other}"))),
    })
}

/// Decoded image: values in NIfTI order converted to `f64`, plus geometry.
#[derive(Clone, Debug)]
pub struct RawImage {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub datatype: i16,
    /// Values in `(h, w, d)` standard layout, after intensity scaling.
    pub data: Array3<f64>,
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    let res = if is_gz(path) {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut buf)
    } else {
        BufReader::new(file).read_to_end(&mut buf)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn take<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        b
    }
    fn i16(&self, at: usize) -> i16 {
        let b = self.take::<2>(at);
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }
    fn i32(&self, at: usize) -> i32 {
        let b = self.take::<4>(at);
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_bits(self.i32(at) as u32)
    }
    fn value(&self, at: usize, datatype: i16) -> f64 {
        let be = self.big_endian;
        macro_rules! num {
            ($t:ty, $n:literal) => {{
                let b = self.take::<$n>(at);
                (if be { <$t>::from_be_bytes(b) } else { <$t>::from_le_bytes(b) }) as f64
            }};
        }
        match datatype {
            DT_UINT8 => self.bytes[at] as f64,
            DT_INT8 => self.bytes[at] as i8 as f64,
            DT_INT16 => num!(i16, 2),
            DT_UINT16 => num!(u16, 2),
            DT_INT32 => num!(i32, 4),
            DT_UINT32 => num!(u32, 4),
            DT_FLOAT32 => num!(f32, 4),
            DT_FLOAT64 => num!(f64, 8),
            _ => unreachable!("datatype checked before decoding"),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!("{} bytes is shorter than a header", bytes.len())));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let be = i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::Format(format!("sizeof_hdr is {le}, expected 348"))),
    };
    let c = Cursor { bytes, big_endian };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::Format("magic is not \"n+1\" (single-file NIfTI-1)".into()));
    }
    let ndim = c.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for (i, d) in dims.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let v = c.i16(42 + 2 * i);
        if v < 1 {
            return Err(Error::Format(format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    for i in 3..ndim as usize {
        if c.i16(42 + 2 * i) > 1 {
            return Err(Error::Format("only 3D images are supported".into()));
        }
    }
    let datatype = c.i16(70);
    let bpv = bytes_per_voxel(datatype)?;
    let mut spacing = [1.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let v = c.f32(80 + 4 * i) as f64;
        *s = if v.is_finite() && v > 0.0 { v } else { 1.0 };
    }
    let vox_offset = c.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Format(format!("vox_offset = {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let n: usize = dims.iter().product();
    if bytes.len() < offset + n * bpv {
        return Err(Error::Format(format!(
            "data truncated: need {} bytes, have {}",
            offset + n * bpv,
            bytes.len()
        )));
    }
    let slope = c.f32(112) as f64;
    let inter = c.f32(116) as f64;
    let scaled = slope.is_finite() && slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    let values: Vec<f64> = (0..n)
        .map(|i| {
            let v = c.value(offset + i * bpv, datatype);
            if scaled {
                v * slope + inter
            } else {
                v
            }
        })
        .collect();
    // NIfTI stores the first index fastest.
    let data = Array3::from_shape_vec(dims.f(), values)
        .map_err(|e| Error::Format(e.to_string()))?
        .as_standard_layout()
        .into_owned();
    Ok(RawImage {
        dims,
        spacing,
        datatype,
        data,
    })
}

pub fn read(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    decode(&read_all(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn header(dims: [usize; 3], spacing: [f64; 3], datatype: i16) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    put_i16(&mut h, 40, 3);
    for (i, &d) in dims.iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds i16")))?;
        put_i16(&mut h, 42 + 2 * i, d);
    }
    for i in 3..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, (bytes_per_voxel(datatype)? * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    for (i, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, s as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    // xyzt_units: millimetres
    h[123] = 2;
    // sform_code = scanner, diagonal srow
    put_i16(&mut h, 254, 1);
    put_f32(&mut h, 280, spacing[0] as f32);
    put_f32(&mut h, 296 + 4, spacing[1] as f32);
    put_f32(&mut h, 312 + 8, spacing[2] as f32);
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(bytes).and_then(|_| enc.finish()).and_then(|mut w| w.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

fn file_id(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

/// Loads an intensity image as `f32`. The volume id is the file name without extension.
pub fn load_volume(path: impl AsRef<Path>) -> Result<IntensityVolume> {
    let path = path.as_ref();
    let raw = read(path)?;
    IntensityVolume::new(file_id(path), raw.data.mapv(|v| v as f32), raw.spacing)
}

/// Loads a label image. Stored value `num_classes` decodes to [`UNLABELED`].
pub fn load_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelVolume> {
    let path = path.as_ref();
    let raw = read(path)?;
    let mut bad = None;
    let data = raw.data.mapv(|v| {
        if v.fract() != 0.0 || v < 0.0 || v > num_classes as f64 {
            bad.get_or_insert(v);
            return 0;
        }
        if v as usize == num_classes {
            UNLABELED
        } else {
            v as u8
        }
    });
    if let Some(v) = bad {
        return Err(Error::Validation(format!(
            "{}: label value {v} is not a class index below {num_classes} (or the sentinel {num_classes})",
            path.display()
        )));
    }
    LabelVolume::new(data, num_classes)
}

pub fn save_volume(path: impl AsRef<Path>, v: &IntensityVolume) -> Result<()> {
    let mut bytes = header(v.dims(), v.spacing, DT_FLOAT32)?;
    bytes.reserve(v.data.len() * 4);
    for x in v.data.t().iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Writes labels as `uint8`, encoding [`UNLABELED`] as `num_classes`.
pub fn save_labels(path: impl AsRef<Path>, labels: &LabelVolume, spacing: [f64; 3]) -> Result<()> {
    let k = labels.num_classes() as u8;
    let mut bytes = header(labels.dims(), spacing, DT_UINT8)?;
    bytes.extend(
        labels
            .data()
            .t()
            .iter()
            .map(|&v| if v == UNLABELED { k } else { v }),
    );
    write_bytes(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn zeros_round_trip() {
        let dir = tmp();
        let p = dir.path().join("z.nii");
        let v = IntensityVolume::new("z", Array3::zeros([8, 8, 4]), [1.0; 3]).unwrap();
        save_volume(&p, &v).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.dims(), [8, 8, 4]);
        assert!(back.data.iter().all(|&x| x == 0.0));
        assert_eq!(back.id, "z");
    }

    #[test]
    fn intensity_round_trip_is_bit_exact() {
        let dir = tmp();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            let data = Array3::from_shape_fn([5, 3, 7], |(i, j, k)| {
                ((i * 31 + j * 7 + k) as f32).sin() * 1e3 + 1e-7
            });
            let v = IntensityVolume::new("a", data, [0.5, 1.25, 3.0]).unwrap();
            save_volume(&p, &v).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.spacing, v.spacing);
            assert!(back
                .data
                .iter()
                .zip(v.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn labels_round_trip_with_sentinel() {
        let dir = tmp();
        let p = dir.path().join("l.nii.gz");
        let mut a = Array3::from_shape_fn([4, 5, 6], |(i, j, k)| ((i + j + k) % 3) as u8);
        a[[1, 1, 1]] = UNLABELED;
        let labels = LabelVolume::new(a, 3).unwrap();
        save_labels(&p, &labels, [1.0; 3]).unwrap();
        assert_eq!(load_labels(&p, 3).unwrap(), labels);
        // Decoded with a larger class count the sentinel is an ordinary value 3.
        let wide = load_labels(&p, 5).unwrap();
        assert_eq!(wide.data()[[1, 1, 1]], 3);
    }

    #[test]
    fn label_value_above_class_count_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("l.nii");
        let labels = LabelVolume::new(Array3::from_elem([2, 2, 2], 4), 5).unwrap();
        save_labels(&p, &labels, [1.0; 3]).unwrap();
        assert!(matches!(load_labels(&p, 3), Err(Error::Validation(_))));
    }

    #[test]
    fn non_integer_labels_are_rejected() {
        let dir = tmp();
        let p = dir.path().join("f.nii");
        let v = IntensityVolume::new("f", Array3::from_elem([2, 2, 2], 0.5), [1.0; 3]).unwrap();
        save_volume(&p, &v).unwrap();
        assert!(matches!(load_labels(&p, 3), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode(&[0u8; 10]), Err(Error::Format(_))));
        let mut h = header([2, 2, 2], [1.0; 3], DT_FLOAT32).unwrap();
        h.extend_from_slice(&[0u8; 32]);
        assert!(decode(&h).is_ok());
        let mut bad = h.clone();
        bad[0..4].copy_from_slice(&100i32.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = h.clone();
        bad[344] = b'x';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let truncated = &h[..h.len() - 4];
        assert!(matches!(decode(truncated), Err(Error::Format(_))));
    }

    #[test]
    fn big_endian_int16_with_scaling() {
        let mut h = vec![0u8; VOX_OFFSET];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        h[40..42].copy_from_slice(&3i16.to_be_bytes());
        for i in 0..3 {
            h[42 + 2 * i..44 + 2 * i].copy_from_slice(&2i16.to_be_bytes());
        }
        h[70..72].copy_from_slice(&DT_INT16.to_be_bytes());
        h[108..112].copy_from_slice(&352f32.to_be_bytes());
        h[112..116].copy_from_slice(&2f32.to_be_bytes());
        h[116..120].copy_from_slice(&1f32.to_be_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        for i in 0..8i16 {
            h.extend_from_slice(&i.to_be_bytes());
        }
        let img = decode(&h).unwrap();
        // first axis fastest: voxel (1, 0, 0) is the second stored value
        assert_eq!(img.data[[1, 0, 0]], 3.0);
        assert_eq!(img.data[[0, 1, 0]], 5.0);
        assert_eq!(img.data[[0, 0, 1]], 9.0);
    }
}

//! PNG images and the flat `DWTF` binary field format.
//!
//! `DWTF` layout (all little-endian): the 4 magic bytes `DWTF`, a `u8` rank,
//! `rank` `u32` dimensions, then the `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{LabelMap, Rgb8Image, ScalarField, VectorField};

pub const FIELD_MAGIC: &[u8; 4] = b"DWTF";

/// A decoded PNG.
#[derive(Debug, Clone, PartialEq)]
pub enum PngImage {
    Rgb(Rgb8Image),
    Labels(LabelMap),
}

impl PngImage {
    pub fn into_rgb(self) -> Option<Rgb8Image> {
        match self {
            PngImage::Rgb(img) => Some(img),
            PngImage::Labels(_) => None,
        }
    }

    pub fn into_labels(self) -> Option<LabelMap> {
        match self {
            PngImage::Labels(l) => Some(l),
            PngImage::Rgb(_) => None,
        }
    }
}

fn encode(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let enc_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Encode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer.write_image_data(bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

pub fn write_rgb_png(image: &Rgb8Image, path: impl AsRef<Path>) -> Result<()> {
    encode(
        path.as_ref(),
        image.width(),
        image.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        image.data(),
    )
}

/// Writes a label map as 16-bit grayscale.
pub fn write_label_png(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let max = labels.max_id();
    if max > u16::MAX as u32 {
        return Err(Error::Input(format!(
            "id exceeds 16-bit range: {max} (writing {})",
            path.display()
        )));
    }
    let bytes: Vec<u8> = labels
        .data()
        .iter()
        .flat_map(|&v| (v as u16).to_be_bytes())
        .collect();
    encode(
        path,
        labels.width(),
        labels.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

pub fn write_png(image: &PngImage, path: impl AsRef<Path>) -> Result<()> {
    match image {
        PngImage::Rgb(img) => write_rgb_png(img, path),
        PngImage::Labels(l) => write_label_png(l, path),
    }
}

/// Reads 8-bit RGB as [`PngImage::Rgb`] and 8/16-bit grayscale as
/// [`PngImage::Labels`]. Every other colour type is rejected.
pub fn read_png(path: impl AsRef<Path>) -> Result<PngImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec_err = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(dec_err)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        path: path.to_path_buf(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(dec_err)?;
    buf.truncate(frame.buffer_size());
    let (w, h) = (frame.width as usize, frame.height as usize);

    match (color, depth) {
        (png::ColorType::Rgb, png::BitDepth::Eight) => Ok(PngImage::Rgb(Rgb8Image::from_vec(w, h, buf)?)),
        (png::ColorType::Grayscale, png::BitDepth::Eight) => Ok(PngImage::Labels(LabelMap::from_vec(
            w,
            h,
            buf.iter().map(|&b| b as u32).collect(),
        )?)),
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => Ok(PngImage::Labels(
            LabelMap::from_vec(
                w,
                h,
                buf.chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]) as u32)
                    .collect(),
            )?,
        )),
        (color, depth) => Err(Error::Decode {
            path: path.to_path_buf(),
            message: format!("unsupported color type {color:?} at bit depth {depth:?}"),
        }),
    }
}

pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<Rgb8Image> {
    let path = path.as_ref();
    read_png(path)?.into_rgb().ok_or_else(|| Error::Decode {
        path: path.to_path_buf(),
        message: "expected an RGB image, found grayscale".into(),
    })
}

pub fn read_label_png(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    read_png(path)?.into_labels().ok_or_else(|| Error::Decode {
        path: path.to_path_buf(),
        message: "expected a grayscale label map, found RGB".into(),
    })
}

/// Raw contents of a `DWTF` file.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldData {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode_field(dims: &[usize], values: &[f32]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > u8::MAX as usize {
        return Err(Error::Input(format!("field rank {} out of range", dims.len())));
    }
    let n: usize = dims.iter().product();
    if n != values.len() {
        return Err(Error::Dimension(format!(
            "dims {dims:?} need {n} values, got {}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(5 + 4 * dims.len() + 4 * n);
    out.extend_from_slice(FIELD_MAGIC);
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Input(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_field(bytes: &[u8], path: &Path) -> Result<FieldData> {
    let fmt = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 5 || &bytes[..4] != FIELD_MAGIC {
        return Err(fmt("magic mismatch (expected \"DWTF\")".into()));
    }
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(fmt("rank 0 is not a valid field".into()));
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(fmt(format!(
            "expected {header} header bytes, found {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fmt("dimensions overflow".into()))?;
    let expected = header + 4 * n;
    if bytes.len() != expected {
        return Err(fmt(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(FieldData { dims, values })
}

pub fn write_field_raw(path: impl AsRef<Path>, dims: &[usize], values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_field(dims, values)?;
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_field_raw(path: impl AsRef<Path>) -> Result<FieldData> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_field(&bytes, path)
}

/// Stored with dims `[height, width]`.
pub fn write_scalar_field(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let values: Vec<f32> = field.data().iter().map(|&v| v as f32).collect();
    write_field_raw(path, &[field.height(), field.width()], &values)
}

pub fn read_scalar_field(path: impl AsRef<Path>) -> Result<ScalarField> {
    let path = path.as_ref();
    let f = read_field_raw(path)?;
    if f.dims.len() != 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("scalar field needs rank 2, found rank {}", f.dims.len()),
        });
    }
    ScalarField::from_vec(
        f.dims[1],
        f.dims[0],
        f.values.iter().map(|&v| v as f64).collect(),
    )
}

/// Stored with dims `[height, width, 2]`.
pub fn write_vector_field(field: &VectorField, path: impl AsRef<Path>) -> Result<()> {
    let values: Vec<f32> = field.data().iter().map(|&v| v as f32).collect();
    write_field_raw(path, &[field.height(), field.width(), 2], &values)
}

pub fn read_vector_field(path: impl AsRef<Path>) -> Result<VectorField> {
    let path = path.as_ref();
    let f = read_field_raw(path)?;
    if f.dims.len() != 3 || f.dims[2] != 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("vector field needs dims [h, w, 2], found {:?}", f.dims),
        });
    }
    VectorField::from_vec(
        f.dims[1],
        f.dims[0],
        f.values.iter().map(|&v| v as f64).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_field_byte_layout() {
        let field = ScalarField::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.dwtf");
        write_scalar_field(&field, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 29);
        assert_eq!(&bytes[..4], b"DWTF");
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[25..29], &4.0f32.to_le_bytes());
        assert_eq!(read_scalar_field(&path).unwrap(), field);
    }

    #[test]
    fn rank_zero_rejected() {
        let err = decode_field(b"DWTF\0", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("rank 0"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = encode_field(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = decode_field(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("expected 29 bytes"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let err = decode_field(b"DWTX\x01\x01\0\0\0\0\0\0\0", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn label_id_range_checked() {
        let mut l = LabelMap::new(2, 2);
        l.set(0, 0, 70000);
        let dir = tempfile::tempdir().unwrap();
        let err = write_label_png(&l, dir.path().join("l.png")).unwrap_err();
        assert!(err.to_string().contains("id exceeds 16-bit range"), "{err}");
    }

    #[test]
    fn label_map_round_trip_16_bit() {
        let mut l = LabelMap::new(3, 2);
        l.set(1, 2, 300);
        l.set(0, 0, 65535);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        write_label_png(&l, &path).unwrap();
        assert_eq!(read_label_png(&path).unwrap(), l);
    }

    #[test]
    fn rgba_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        encode(
            &path,
            2,
            2,
            png::ColorType::Rgba,
            png::BitDepth::Eight,
            &[0u8; 16],
        )
        .unwrap();
        let err = read_png(&path).unwrap_err();
        assert!(err.to_string().contains("Rgba"), "{err}");
    }

    #[test]
    fn unwritable_path_names_file() {
        let err = write_rgb_png(&Rgb8Image::new(1, 1), "/nonexistent-dir/x.png").unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.png"), "{err}");
    }
}

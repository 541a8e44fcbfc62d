//! HSEG1 array files.
//!
//! ```text
//! magic    4 bytes  "HSEG"
//! version  u16      1
//! height   u16
//! width    u16
//! channels u16
//! dtype    u8       0 = f32 image, 1 = u8 labels (channels must be 1)
//! payload  height·width·channels values, little-endian, row-major HWC
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::labelspace::LabelMap;
use crate::tensor::Tensor;

pub const HSEG_MAGIC: &[u8; 4] = b"HSEG";
pub const HSEG_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 2 + 2 + 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: not an HSEG1 file")]
    BadMagic,
    #[error("unsupported HSEG version {0}")]
    Version(u16),
    #[error("truncated: header implies {expected} bytes, file has {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("unknown dtype code {0}")]
    Dtype(u8),
    #[error("expected a {expected} array, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("array dimension {0} does not fit the 16-bit header")]
    TooLarge(usize),
    #[error("label file has {0} channels, must be 1")]
    LabelChannels(u16),
    #[error("image and label dimensions differ")]
    DimensionMismatch,
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Decoded contents of one HSEG1 file.
#[derive(Debug, Clone, PartialEq)]
pub enum HsegArray {
    Image(Tensor),
    Labels(LabelMap),
}

impl HsegArray {
    fn kind(&self) -> &'static str {
        match self {
            HsegArray::Image(_) => "image",
            HsegArray::Labels(_) => "labels",
        }
    }
}

fn dim(v: usize) -> Result<[u8; 2], FormatError> {
    u16::try_from(v).map(u16::to_le_bytes).map_err(|_| FormatError::TooLarge(v))
}

pub fn encode(array: &HsegArray) -> Result<Vec<u8>, FormatError> {
    let (h, w, c, code) = match array {
        HsegArray::Image(t) => match *t.shape() {
            [h, w, c] => (h, w, c, 0u8),
            _ => return Err(FormatError::WrongKind { expected: "H×W×C image", found: "other tensor" }),
        },
        HsegArray::Labels(l) => (l.height, l.width, 1, 1u8),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * c * 4);
    out.extend_from_slice(HSEG_MAGIC);
    out.extend_from_slice(&HSEG_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(h)?);
    out.extend_from_slice(&dim(w)?);
    out.extend_from_slice(&dim(c)?);
    out.push(code);
    match array {
        HsegArray::Image(t) => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        HsegArray::Labels(l) => out.extend_from_slice(&l.values),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<HsegArray, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != HSEG_MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let version = u16_at(4);
    if version != HSEG_VERSION {
        return Err(FormatError::Version(version));
    }
    let (h, w, c) = (usize::from(u16_at(6)), usize::from(u16_at(8)), usize::from(u16_at(10)));
    let code = bytes[12];
    let elem = match code {
        0 => 4,
        1 => 1,
        other => return Err(FormatError::Dtype(other)),
    };
    if code == 1 && c != 1 {
        return Err(FormatError::LabelChannels(c as u16));
    }
    let expected = HEADER_LEN + h * w * c * elem;
    if bytes.len() < expected {
        return Err(FormatError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[HEADER_LEN..];
    Ok(match code {
        0 => {
            let data = payload.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap()))).collect();
            HsegArray::Image(Tensor::new(vec![h, w, c], data).expect("length checked"))
        }
        _ => HsegArray::Labels(LabelMap { height: h, width: w, values: payload.to_vec() }),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.display().to_string(), source }
}

pub fn write_array(path: &Path, array: &HsegArray) -> Result<(), FormatError> {
    fs::write(path, encode(array)?).map_err(io_err(path))
}

pub fn read_array(path: &Path) -> Result<HsegArray, FormatError> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

pub fn read_image(path: &Path) -> Result<Tensor, FormatError> {
    match read_array(path)? {
        HsegArray::Image(t) => Ok(t),
        other => Err(FormatError::WrongKind { expected: "image", found: other.kind() }),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap, FormatError> {
    match read_array(path)? {
        HsegArray::Labels(l) => Ok(l),
        other => Err(FormatError::WrongKind { expected: "labels", found: other.kind() }),
    }
}

/// Writes an image/label pair as two HSEG1 files.
pub fn write_item(image_path: &Path, labels_path: &Path, image: &Tensor, labels: &LabelMap) -> Result<(), FormatError> {
    write_array(image_path, &HsegArray::Image(image.clone()))?;
    write_array(labels_path, &HsegArray::Labels(labels.clone()))
}

pub fn read_item(image_path: &Path, labels_path: &Path) -> Result<(Tensor, LabelMap), FormatError> {
    let image = read_image(image_path)?;
    let labels = read_labels(labels_path)?;
    if image.shape()[..2] != [labels.height, labels.width] {
        return Err(FormatError::DimensionMismatch);
    }
    Ok((image, labels))
}

/// 8-bit binary PGM of a single-channel image clamped to [0, 1].
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<(), FormatError> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.pixels().map(|px| (px[0].clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(io_err(path))
}

/// Label map as PGM with ids spread over the grey range.
pub fn write_label_pgm(path: &Path, labels: &LabelMap, num_ids: usize) -> Result<(), FormatError> {
    let step = 255 / num_ids.saturating_sub(1).max(1);
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend(labels.values.iter().map(|&v| (usize::from(v) * step).min(255) as u8));
    fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor {
        Tensor::new(vec![2, 3, 1], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&HsegArray::Image(image())).unwrap();
        assert_eq!(&bytes[..4], b"HSEG");
        assert_eq!(&bytes[4..13], &[1, 0, 2, 0, 3, 0, 1, 0, 0]);
        assert_eq!(bytes.len(), 13 + 6 * 4);
        let labels = LabelMap::new(1, 2, vec![5, 0]).unwrap();
        let bytes = encode(&HsegArray::Labels(labels.clone())).unwrap();
        assert_eq!(&bytes[12..], &[1, 5, 0]);
        assert_eq!(decode(&bytes).unwrap(), HsegArray::Labels(labels));
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&HsegArray::Image(image())).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode(&bad), Err(FormatError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(FormatError::Version(2))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[6] = 3; // header now claims 3 rows
        assert!(matches!(decode(&bad), Err(FormatError::Truncated { expected: 49, actual: 37 })));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(FormatError::TrailingBytes(1))));
        let mut bad = bytes.clone();
        bad[12] = 7;
        assert!(matches!(decode(&bad), Err(FormatError::Dtype(7))));
        assert!(matches!(decode(b"HSEG\x01"), Err(FormatError::Truncated { .. })));
        assert!(matches!(decode(b""), Err(FormatError::BadMagic)));
    }

    #[test]
    fn item_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("a.img.hseg"), dir.path().join("a.lbl.hseg"));
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        write_item(&ip, &lp, &image(), &labels).unwrap();
        assert_eq!(read_item(&ip, &lp).unwrap(), (image(), labels));
        assert!(matches!(read_labels(&ip), Err(FormatError::WrongKind { .. })));
        assert!(matches!(read_image(&dir.path().join("missing")), Err(FormatError::Io { .. })));
        write_pgm(&dir.path().join("a.pgm"), &image()).unwrap();
        let pgm = fs::read(dir.path().join("a.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[0, 64, 128, 191, 255, 32]);
    }
}

//! IDX reader and writer for MNIST-style image and label files.

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use super::{DataError, Dataset, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const MAX_LABEL: u8 = 9;

fn io_err(path: &Path, source: io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn truncated(path: &Path, need: usize, have: usize) -> DataError {
    io_err(
        path,
        io::Error::new(
            ErrorKind::UnexpectedEof,
            format!("truncated: need {need} bytes, file has {have}"),
        ),
    )
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses the header of `bytes` and returns `(dims, payload)`.
fn parse<'a>(path: &Path, bytes: &'a [u8], magic: u32, rank: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let header = 4 + 4 * rank;
    if bytes.len() < 4 {
        return Err(truncated(path, 4, bytes.len()));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(format_err(
            path,
            format!("magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    if bytes.len() < header {
        return Err(truncated(path, header, bytes.len()));
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let payload_len: usize = dims.iter().product();
    if bytes.len() < header + payload_len {
        return Err(truncated(path, header + payload_len, bytes.len()));
    }
    if bytes.len() > header + payload_len {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    Ok((dims, &bytes[header..]))
}

/// Raw bytes of an image file: `(count, rows·cols, pixels)`.
pub fn read_images(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (dims, payload) = parse(path, &bytes, IMAGE_MAGIC, 3)?;
    Ok((dims[0], dims[1] * dims[2], payload.to_vec()))
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (_, payload) = parse(path, &bytes, LABEL_MAGIC, 1)?;
    if let Some(bad) = payload.iter().find(|&&y| y > MAX_LABEL) {
        return Err(format_err(path, format!("label {bad} outside 0..={MAX_LABEL}")));
    }
    Ok(payload.to_vec())
}

/// Reads an image/label file pair, scaling pixels to `[0, 1]`.
pub fn ingest_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (count, dim, pixels) = read_images(images_path)?;
    let labels = read_labels(labels_path)?;
    if labels.len() != count {
        return Err(format_err(
            labels_path,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    let features = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    Dataset::new(dim, features, labels.into_iter().map(usize::from).collect())
}

/// Writes `data` as a square-image IDX pair. Features are mapped back to
/// bytes with `round(255 · v)`.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let side = (data.dim() as f64).sqrt().round() as usize;
    if side * side != data.dim() {
        return Err(DataError::Invalid(format!(
            "width {} is not a square image",
            data.dim()
        )));
    }
    let mut img = Vec::with_capacity(16 + data.features().len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [data.len(), side, side] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(
        data.features()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for &y in data.labels() {
        let byte = u8::try_from(y)
            .ok()
            .filter(|&b| b <= MAX_LABEL)
            .ok_or_else(|| DataError::Invalid(format!("label {y} does not fit IDX")))?;
        lab.push(byte);
    }
    fs::write(images_path, img).map_err(|e| io_err(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| io_err(labels_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn round_trip_preserves_payload_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        let mut bytes = header(IMAGE_MAGIC, &[3, 2, 2]);
        bytes.extend((0..12u8).map(|b| b * 21));
        fs::write(&img, &bytes).unwrap();
        let mut lbytes = header(LABEL_MAGIC, &[3]);
        lbytes.extend([7, 0, 9]);
        fs::write(&lab, &lbytes).unwrap();

        let d = ingest_idx(&img, &lab).unwrap();
        assert_eq!((d.len(), d.dim()), (3, 4));
        assert_eq!(d.labels(), &[7, 0, 9]);
        assert_eq!(d.row(0)[1], 21.0 / 255.0);

        let (img2, lab2) = (dir.path().join("img2"), dir.path().join("lab2"));
        write_idx(&d, &img2, &lab2).unwrap();
        assert_eq!(fs::read(&img2).unwrap(), bytes);
        assert_eq!(fs::read(&lab2).unwrap(), lbytes);
    }

    #[test]
    fn zero_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, header(0, &[0, 1, 1])).unwrap();
        assert!(matches!(read_images(&p), Err(DataError::Format { .. })));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        let mut bytes = header(IMAGE_MAGIC, &[2, 2, 2]);
        bytes.extend([0u8; 5]);
        fs::write(&p, bytes).unwrap();
        match read_images(&p) {
            Err(DataError::Io { source, .. }) => assert_eq!(source.kind(), ErrorKind::UnexpectedEof),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        let mut bytes = header(LABEL_MAGIC, &[2]);
        bytes.extend([3, 10]);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_labels(&p), Err(DataError::Format { .. })));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        let mut bytes = header(IMAGE_MAGIC, &[2, 1, 1]);
        bytes.extend([0, 0]);
        fs::write(&img, bytes).unwrap();
        let mut lbytes = header(LABEL_MAGIC, &[1]);
        lbytes.push(1);
        fs::write(&lab, lbytes).unwrap();
        assert!(ingest_idx(&img, &lab).is_err());
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let p = Path::new("/nonexistent/idx");
        assert!(matches!(read_labels(p), Err(DataError::Io { .. })));
    }
}

//! CSV and IDX ingestion.
//!
//! CSV: comma separated, optional header, integer label in the last column.
//! IDX: big-endian container, magic `0x0000_08NN` (unsigned bytes, `NN`
//! dimensions). Images use `0x00000803` (N x H x W) or `0x00000804`
//! (N x H x W x C); labels use `0x00000801`. Pixel bytes are scaled to
//! `[0, 1]`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::ImageShape;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataFormat {
    Csv,
    IdxImages { labels: PathBuf },
}

pub fn load_dataset(path: &Path, format: &DataFormat) -> Result<Dataset> {
    match format {
        DataFormat::Csv => load_csv(path),
        DataFormat::IdxImages { labels } => load_idx(path, labels),
    }
}

fn parse_err(path: &Path, location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location,
        message: message.into(),
    }
}

fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, "open".into(), e.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| parse_err(path, format!("line {line}"), e.to_string()))?;
        if record.len() < 2 {
            return Err(parse_err(path, format!("line {line}"), "need at least one feature and a label"));
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().take(record.len() - 1).map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            // a non-numeric first line is a header
            Err(_) if line == 1 => continue,
            Err(e) => return Err(parse_err(path, format!("line {line}"), format!("bad feature: {e}"))),
        };
        let label: usize = record[record.len() - 1].parse().map_err(|e| {
            parse_err(path, format!("line {line}"), format!("bad label `{}`: {e}", &record[record.len() - 1]))
        })?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, format!("line {line}"), "non-finite feature"));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(
                    path,
                    format!("line {line}"),
                    format!("expected {d} features, found {}", values.len()),
                ))
            }
            _ => {}
        }
        features.extend(values);
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| parse_err(path, "end of file".into(), "no data rows"))?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(features, dim, labels, classes)
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::Serde(e.to_string()))?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.sample(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(ds.labels()[i].to_string());
        w.write_record(&row).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(parse_err(path, "offset 0".into(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(path, "offset 0".into(), "magic must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(parse_err(
            path,
            "offset 2".into(),
            format!("unsupported element type 0x{:02x} (only unsigned bytes)", bytes[2]),
        ));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if ndims == 0 || bytes.len() < header {
        return Err(parse_err(path, "offset 3".into(), "truncated dimension header"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() - header != count {
        return Err(parse_err(
            path,
            format!("offset {header}"),
            format!("dims {dims:?} need {count} bytes, found {}", bytes.len() - header),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images)?;
    let shape = match dims.as_slice() {
        [_, h, w] => ImageShape {
            height: *h,
            width: *w,
            channels: 1,
        },
        [_, h, w, c] => ImageShape {
            height: *h,
            width: *w,
            channels: *c,
        },
        _ => {
            return Err(parse_err(images, "offset 3".into(), format!("images need 3 or 4 dims, got {}", dims.len())))
        }
    };
    let (ldims, lbytes) = read_idx(labels)?;
    if ldims.len() != 1 {
        return Err(parse_err(labels, "offset 3".into(), "labels need exactly one dimension"));
    }
    if ldims[0] != dims[0] {
        return Err(parse_err(
            labels,
            "offset 4".into(),
            format!("{} labels for {} images", ldims[0], dims[0]),
        ));
    }
    let labels: Vec<usize> = lbytes.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let features = pixels.into_iter().map(|b| b as f64 / 255.0).collect();
    Dataset::new(features, shape.len(), labels, classes)?.with_image_shape(shape)
}

/// Writes images and labels as IDX files. Features are quantised to bytes
/// (`round(255 x)`), so only datasets with values on that grid round-trip.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let shape = ds
        .image()
        .ok_or_else(|| Error::InvalidValue("dataset has no image shape".into()))?;
    let mut img = Vec::new();
    let dims: Vec<usize> = if shape.channels == 1 {
        img.extend_from_slice(&[0, 0, 0x08, 3]);
        vec![ds.len(), shape.height, shape.width]
    } else {
        img.extend_from_slice(&[0, 0, 0x08, 4]);
        vec![ds.len(), shape.height, shape.width, shape.channels]
    };
    for d in dims {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in ds.features() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidValue(format!("pixel value {v} outside [0, 1]")));
        }
        img.push((v * 255.0).round() as u8);
    }
    let mut lab = vec![0, 0, 0x08, 1];
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &y in ds.labels() {
        lab.push(u8::try_from(y).map_err(|_| Error::InvalidValue(format!("label {y} exceeds a byte")))?);
    }
    write_bytes(images, &img)?;
    write_bytes(labels, &lab)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

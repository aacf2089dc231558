//! Binary PGM (P5) images and paired dataset directories.
//!
//! Images are read at any maxval in 1..=65535 and normalized to [0, 1].
//! Writing always produces 16-bit big-endian samples with maxval 65535, after
//! clamping to [0, 1].

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sim::PairedSample;
use crate::tensor::Tensor;

pub const MAXVAL: u16 = 65535;

/// Encode an `[h, w]` image.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = *image.shape() else {
        return Err(Error::invalid("pgm", format!("expected [h, w], got {:?}", image.shape())));
    };
    if !image.is_finite() {
        return Err(Error::NonFinite("image written to PGM"));
    }
    let mut out = format!("P5\n{w} {h}\n{MAXVAL}\n").into_bytes();
    out.reserve(2 * h * w);
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * MAXVAL as f64).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

/// Decode a P5 file into an `[h, w]` image in [0, 1].
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Data(format!("unsupported PGM magic `{}`, expected P5", fields[0])));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("bad PGM {what} `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
    if w == 0 || h == 0 {
        return Err(Error::Data("PGM has a zero dimension".into()));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(Error::Data(format!("PGM maxval {maxval} outside 1..=65535")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h * bps {
        return Err(Error::Data(format!(
            "PGM raster has {} bytes, expected {}",
            raster.len(),
            w * h * bps
        )));
    }
    let scale = maxval as f64;
    let data = if bps == 1 {
        raster.iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0))
            .collect()
    };
    Tensor::new(&[h, w], data)
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode(image)?).map_err(|e| Error::io(path, e))
}

/// Images of a dataset directory, keyed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub ldct: Tensor,
    pub ndct: Option<Tensor>,
}

/// `{id}_ldct.pgm` / `{id}_ndct.pgm` files in `dir`, sorted by id.
pub fn dataset_files(dir: &Path) -> Result<Vec<(String, PathBuf, Option<PathBuf>)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    let mut ndct_ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_ldct.pgm") {
            ids.push(id.to_string());
        } else if let Some(id) = name.strip_suffix("_ndct.pgm") {
            ndct_ids.push(id.to_string());
        }
    }
    ids.sort();
    if let Some(orphan) = ndct_ids.iter().find(|id| !ids.contains(id)) {
        return Err(Error::Data(format!("{}: `{orphan}_ndct.pgm` has no LDCT partner", dir.display())));
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("{}: no `*_ldct.pgm` images", dir.display())));
    }
    Ok(ids
        .into_iter()
        .map(|id| {
            let ldct = dir.join(format!("{id}_ldct.pgm"));
            let ndct = ndct_ids.contains(&id).then(|| dir.join(format!("{id}_ndct.pgm")));
            (id, ldct, ndct)
        })
        .collect())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetItem>> {
    dataset_files(dir)?
        .into_iter()
        .map(|(id, l, n)| {
            let ldct = read(&l)?;
            let ndct = n.map(|p| read(&p)).transpose()?;
            if let Some(nd) = &ndct {
                if nd.shape() != ldct.shape() {
                    return Err(Error::Data(format!("pair `{id}` has mismatched image sizes")));
                }
            }
            Ok(DatasetItem { id, ldct, ndct })
        })
        .collect()
}

/// Every item as a pair; fails on the first LDCT image without a partner.
pub fn into_pairs(items: Vec<DatasetItem>) -> Result<Vec<PairedSample>> {
    items
        .into_iter()
        .map(|it| match it.ndct {
            Some(ndct) => Ok(PairedSample {
                id: it.id,
                seed: 0,
                ndct,
                ldct: it.ldct,
            }),
            None => Err(Error::Data(format!("missing pair: `{}` has no NDCT image", it.id))),
        })
        .collect()
}

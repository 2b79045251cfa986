//! CSV manifest of paired PPM images.
//!
//! ```text
//! wl_path,nbi_path,label,subject_id,bbox_wl,bbox_nbi
//! 000_wl.ppm,000_nbi.ppm,1,s03,4:2:50:48,
//! ```
//!
//! Image paths are relative to the manifest's directory unless absolute;
//! boxes are `x:y:w:h` or empty.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::sample::{BBox, PairedSample};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const MANIFEST_HEADER: [&str; 6] = ["wl_path", "nbi_path", "label", "subject_id", "bbox_wl", "bbox_nbi"];

/// File name used by [`write_dataset`].
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// First bad row aborts the load.
    Strict,
    /// Bad rows are logged and skipped.
    Lenient,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn parse_row(base: &Path, record: &csv::StringRecord) -> Result<PairedSample> {
    if record.len() != MANIFEST_HEADER.len() {
        return Err(Error::Data(format!("expected 6 fields, found {}", record.len())));
    }
    let field = |i: usize| record.get(i).unwrap_or("").trim();
    let label = field(2)
        .parse::<usize>()
        .map_err(|_| Error::Data(format!("bad label '{}'", field(2))))?;
    let bbox = |s: &str| -> Result<Option<BBox>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some)
        }
    };
    let subject_id = field(3);
    if subject_id.is_empty() {
        return Err(Error::Data("empty subject_id".into()));
    }
    let wl = ImageTensor::read_ppm(&resolve(base, field(0)))?;
    let nbi = ImageTensor::read_ppm(&resolve(base, field(1)))?;
    let sample = PairedSample {
        id: field(0).to_string(),
        wl,
        nbi,
        label,
        subject_id: subject_id.to_string(),
        bbox_wl: bbox(field(4))?,
        bbox_nbi: bbox(field(5))?,
    };
    sample.validate()?;
    Ok(sample)
}

/// Loads every pair listed in `path`, in manifest order.
pub fn load_manifest(path: &Path, mode: LoadMode) -> Result<Vec<PairedSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let found: Vec<&str> = headers.iter().map(str::trim).collect();
    if found != MANIFEST_HEADER {
        return Err(Error::Data(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            found,
            MANIFEST_HEADER
        )));
    }
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // header is line 1
        let parsed = record
            .map_err(|e| Error::Data(e.to_string()))
            .and_then(|r| parse_row(base, &r));
        match parsed {
            Ok(s) => samples.push(s),
            Err(e) => {
                let msg = format!("{} row {row}: {e}", path.display());
                match mode {
                    LoadMode::Strict => return Err(Error::Data(msg)),
                    LoadMode::Lenient => log::warn!("skipping {msg}"),
                }
            }
        }
    }
    Ok(samples)
}

/// Writes `samples` as `<dir>/manifest.csv` plus two PPM files per pair.
/// Returns the manifest path.
pub fn write_dataset(samples: &[PairedSample], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", manifest.display()));
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for (i, s) in samples.iter().enumerate() {
        let wl_name = format!("{i:05}_wl.ppm");
        let nbi_name = format!("{i:05}_nbi.ppm");
        s.wl.write_ppm(&dir.join(&wl_name))?;
        s.nbi.write_ppm(&dir.join(&nbi_name))?;
        let bbox = |b: &Option<BBox>| b.map(|b| b.to_string()).unwrap_or_default();
        w.write_record([
            wl_name,
            nbi_name,
            s.label.to_string(),
            s.subject_id.clone(),
            bbox(&s.bbox_wl),
            bbox(&s.bbox_nbi),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

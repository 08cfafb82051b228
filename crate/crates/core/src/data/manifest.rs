//! Dataset manifest CSV (`path,label,split`) loading and split views.

use super::{load_pgm, ClassLabel, DataError, ImageSample, Split};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    /// Image path as written in the CSV, resolved relative to the manifest.
    pub path: String,
    pub label: ClassLabel,
    pub split: Split,
}

/// Parsed manifest: entries in file order, immutable after load.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub(crate) fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest { root, entries }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn count(&self, label: ClassLabel, split: Split) -> usize {
        self.entries.iter().filter(|e| e.label == label && e.split == split).count()
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

pub const MANIFEST_HEADER: &str = "path,label,split";

/// Load and validate a manifest CSV. Labels and splits must come from the
/// closed vocabularies, paths must be unique, and every referenced image
/// file must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let csv_err = |source| DataError::ManifestCsv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;

    let headers = reader.headers().map_err(csv_err)?.clone();
    let found = headers.iter().collect::<Vec<_>>().join(",");
    if found != MANIFEST_HEADER {
        return Err(DataError::ManifestBadHeader { path: path.to_path_buf(), found });
    }

    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        // +2: one for the header row, one for 1-based numbering.
        let line = record.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let get = |idx: usize| record.get(idx).unwrap_or("").to_string();
        let (p, label_s, split_s) = (get(0), get(1), get(2));
        let label: ClassLabel = label_s
            .parse()
            .map_err(|_| DataError::UnknownLabel { line, value: label_s.clone() })?;
        let split: Split = split_s
            .parse()
            .map_err(|_| DataError::UnknownSplit { line, value: split_s.clone() })?;
        if !seen.insert(p.clone()) {
            return Err(DataError::DuplicatePath { line, path: p });
        }
        let resolved = root.join(&p);
        if !resolved.is_file() {
            return Err(DataError::MissingFile { line, path: resolved });
        }
        entries.push(ManifestEntry { path: p, label, split });
    }
    Ok(DatasetManifest::new(root, entries))
}

/// Write a manifest CSV with the fixed header.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let csv_err = |source| DataError::ManifestCsv { path: path.to_path_buf(), source };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer.write_record(["path", "label", "split"]).map_err(csv_err)?;
    for e in entries {
        writer
            .write_record([e.path.as_str(), e.label.as_str(), e.split.as_str()])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Materialize one split as loaded samples, in manifest file order. Sample
/// ids are the image file stems.
pub fn split_view(manifest: &DatasetManifest, split: Split) -> Result<Vec<ImageSample>, DataError> {
    let mut samples = Vec::new();
    for entry in manifest.entries().iter().filter(|e| e.split == split) {
        let full = manifest.resolve(entry);
        let pixels = load_pgm(&full)?;
        let id = full
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| entry.path.clone());
        samples.push(ImageSample::new(id, pixels, entry.label, entry.split)?);
    }
    Ok(samples)
}

//! Dataset manifests: a CSV with the fixed header
//! `image_id,image_path,label,mask_path`. Empty label/mask cells mean the
//! field is absent; paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::cls::ClassLabel;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["image_id", "image_path", "label", "mask_path"];

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub image_id: String,
    /// Resolved (manifest-relative) image path.
    pub image_path: PathBuf,
    pub label: Option<ClassLabel>,
    pub mask_path: Option<PathBuf>,
}

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = Path::new(raw);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != MANIFEST_HEADER {
        return Err(Error::Format(format!(
            "{}: header must be {:?}, got {:?}",
            path.display(),
            MANIFEST_HEADER.join(","),
            got.join(",")
        )));
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 2; // header is line 1
        let row = row.map_err(|e| Error::Format(format!("{}: row {rownum}: {e}", path.display())))?;
        let image_id = row[0].to_string();
        if image_id.is_empty() {
            return Err(Error::Format(format!(
                "{}: row {rownum}: empty image_id",
                path.display()
            )));
        }
        if !seen.insert(image_id.clone()) {
            return Err(Error::Format(format!(
                "{}: row {rownum}: duplicate image_id {image_id:?}",
                path.display()
            )));
        }
        let image_path = resolve(&base, &row[1]);
        if !image_path.is_file() {
            return Err(Error::Format(format!(
                "{}: row {rownum} ({image_id}): image file {} does not exist",
                path.display(),
                image_path.display()
            )));
        }
        let label = match &row[2] {
            "" => None,
            s => Some(ClassLabel::parse(s).map_err(|e| {
                Error::Format(format!("{}: row {rownum} ({image_id}): {e}", path.display()))
            })?),
        };
        let mask_path = match &row[3] {
            "" => None,
            s => {
                let p = resolve(&base, s);
                if !p.is_file() {
                    return Err(Error::Format(format!(
                        "{}: row {rownum} ({image_id}): mask file {} does not exist",
                        path.display(),
                        p.display()
                    )));
                }
                Some(p)
            }
        };
        records.push(ManifestRecord {
            image_id,
            image_path,
            label,
            mask_path,
        });
    }
    Ok(records)
}

/// Write a manifest; paths are written as given (callers pass paths
/// relative to the manifest location).
pub fn write_manifest(
    path: impl AsRef<Path>,
    rows: &[(String, String, Option<ClassLabel>, Option<String>)],
) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_record(MANIFEST_HEADER)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for (id, image, label, mask) in rows {
        writer
            .write_record([
                id.as_str(),
                image.as_str(),
                label.map(|l| l.as_str()).unwrap_or(""),
                mask.as_deref().unwrap_or(""),
            ])
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn touch(dir: &Path, name: &str) {
        fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn valid_two_row_manifest_parses() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.ppm");
        touch(dir.path(), "b.ppm");
        touch(dir.path(), "a.pgm");
        let m = dir.path().join("m.csv");
        fs::write(
            &m,
            "image_id,image_path,label,mask_path\na,a.ppm,melanoma,a.pgm\nb,b.ppm,,\n",
        )
        .unwrap();
        let recs = load_manifest(&m).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].label, Some(ClassLabel::Melanoma));
        assert!(recs[0].mask_path.is_some());
        assert_eq!(recs[1].label, None);
        assert!(recs[1].mask_path.is_none());
    }

    #[test]
    fn header_only_manifest_is_empty_not_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        fs::write(&m, "image_id,image_path,label,mask_path\n").unwrap();
        assert!(load_manifest(&m).unwrap().is_empty());
    }

    #[test]
    fn unknown_label_names_offending_row() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.ppm");
        let m = dir.path().join("m.csv");
        fs::write(&m, "image_id,image_path,label,mask_path\na,a.ppm,mel,\n").unwrap();
        let err = load_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(err.contains("mel"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.ppm");
        let m = dir.path().join("m.csv");
        fs::write(
            &m,
            "image_id,image_path,label,mask_path\na,a.ppm,,\na,a.ppm,,\n",
        )
        .unwrap();
        let err = load_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_referenced_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        fs::write(&m, "image_id,image_path,label,mask_path\na,gone.ppm,,\n").unwrap();
        let err = load_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        fs::write(&m, "id,path,label,mask\n").unwrap();
        assert!(matches!(load_manifest(&m), Err(Error::Format(_))));
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "x.ppm");
        touch(dir.path(), "x.pgm");
        let m = dir.path().join("m.csv");
        write_manifest(
            &m,
            &[(
                "x".into(),
                "x.ppm".into(),
                Some(ClassLabel::Nevus),
                Some("x.pgm".into()),
            )],
        )
        .unwrap();
        let recs = load_manifest(&m).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].image_id, "x");
        assert_eq!(recs[0].label, Some(ClassLabel::Nevus));
    }
}

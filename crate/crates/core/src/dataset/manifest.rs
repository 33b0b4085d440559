use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{DatasetError, DatasetResult, Label, Source};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// One labeled radiograph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CxrRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub label: Label,
    pub source: Source,
    pub width_px: u32,
    pub height_px: u32,
}

/// Ordered inventory of labeled images.
///
/// Construction enforces unique ids and paths and positive image sizes, and
/// derives `class_counts`, so a manifest is always internally consistent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    records: Vec<CxrRecord>,
    class_counts: BTreeMap<Label, usize>,
}

impl DatasetManifest {
    pub fn new(records: Vec<CxrRecord>) -> DatasetResult<Self> {
        let mut ids = HashSet::new();
        let mut paths = HashSet::new();
        let mut class_counts = BTreeMap::new();
        for r in &records {
            if r.id.is_empty() {
                return Err(DatasetError::InvalidRecord {
                    id: r.id.clone(),
                    msg: "empty id".into(),
                });
            }
            if r.width_px == 0 || r.height_px == 0 {
                return Err(DatasetError::InvalidRecord {
                    id: r.id.clone(),
                    msg: format!("non-positive size {}x{}", r.width_px, r.height_px),
                });
            }
            if !ids.insert(r.id.as_str()) {
                return Err(DatasetError::Duplicate {
                    field: "id",
                    value: r.id.clone(),
                });
            }
            if !paths.insert(r.image_path.as_path()) {
                return Err(DatasetError::Duplicate {
                    field: "image_path",
                    value: r.image_path.display().to_string(),
                });
            }
            *class_counts.entry(r.label).or_insert(0) += 1;
        }
        Ok(Self {
            records,
            class_counts,
        })
    }

    pub fn records(&self) -> &[CxrRecord] {
        &self.records
    }

    pub fn class_counts(&self) -> &BTreeMap<Label, usize> {
        &self.class_counts
    }

    pub fn count(&self, label: Label) -> usize {
        self.class_counts.get(&label).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CxrRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Id → record lookup table.
    pub fn index(&self) -> HashMap<&str, &CxrRecord> {
        self.records.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    /// Read a JSON-lines manifest (one [`CxrRecord`] per line).
    pub fn read_jsonl(path: &Path) -> DatasetResult<Self> {
        let file = fs::File::open(path).map_err(|source| DatasetError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|source| DatasetError::Io {
                path: path.to_owned(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CxrRecord = serde_json::from_str(&line).map_err(|source| DatasetError::Json {
                path: path.to_owned(),
                source,
            })?;
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn write_jsonl(&self, path: &Path) -> DatasetResult<()> {
        let io_err = |source| DatasetError::Io {
            path: path.to_owned(),
            source,
        };
        let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|source| DatasetError::Json {
                path: path.to_owned(),
                source,
            })?;
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

/// How labels are attached to image files under a dataset root.
#[derive(Debug, Clone)]
pub enum LabelLayout {
    /// The first path component below the root names the class, e.g.
    /// `normal/xyz.png`, `tb/abc.png`. Matching is case-insensitive.
    Subdirs {
        healthy: Vec<String>,
        tb: Vec<String>,
    },
    /// Class encoded as a trailing `_0` (healthy) or `_1` (TB) in the file stem,
    /// the convention of the public Shenzhen and Montgomery collections.
    FilenameSuffix,
    /// A CSV file with columns `path,label`, paths relative to the root.
    Sidecar(PathBuf),
}

impl Default for LabelLayout {
    fn default() -> Self {
        LabelLayout::Subdirs {
            healthy: vec!["normal".into(), "healthy".into()],
            tb: vec!["tb".into(), "tuberculosis".into(), "abnormal".into()],
        }
    }
}

/// Result of scanning a directory: the manifest plus everything left out of it.
#[derive(Debug, Clone, Default)]
pub struct ScanReport {
    pub manifest: DatasetManifest,
    pub unlabeled: Vec<PathBuf>,
    pub undecodable: Vec<(PathBuf, String)>,
}

/// Walk `root` and build a manifest of every decodable, labeled image.
///
/// Files are visited in lexicographic path order so the record order is
/// stable. Ids are the root-relative path without extension, using `/`.
pub fn scan_dataset(root: &Path, layout: &LabelLayout, source: Source) -> DatasetResult<ScanReport> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_owned()));
    }
    let sidecar = match layout {
        LabelLayout::Sidecar(p) => Some(read_sidecar(&resolve(root, p))?),
        _ => None,
    };
    let sidecar_path = match layout {
        LabelLayout::Sidecar(p) => Some(resolve(root, p)),
        _ => None,
    };

    let mut records = Vec::new();
    let mut report = ScanReport::default();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| DatasetError::Io {
            path: e.path().map(Path::to_owned).unwrap_or_else(|| root.to_owned()),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk error")),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        if Some(path) == sidecar_path.as_deref() || !has_image_extension(path) {
            continue;
        }
        let rel = path.strip_prefix(root).unwrap_or(path);
        let label = match layout {
            LabelLayout::Subdirs { healthy, tb } => label_from_subdir(rel, healthy, tb),
            LabelLayout::FilenameSuffix => label_from_suffix(rel),
            LabelLayout::Sidecar(_) => sidecar.as_ref().and_then(|m| m.get(&rel_key(rel)).copied()),
        };
        let Some(label) = label else {
            report.unlabeled.push(path.to_owned());
            continue;
        };
        match read_dimensions(path) {
            Ok((width_px, height_px)) => records.push(CxrRecord {
                id: record_id(rel),
                image_path: path.to_owned(),
                label,
                source,
                width_px,
                height_px,
            }),
            Err(msg) => report.undecodable.push((path.to_owned(), msg)),
        }
    }
    report.manifest = DatasetManifest::new(records)?;
    Ok(report)
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        root.join(p)
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn rel_key(rel: &Path) -> String {
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn record_id(rel: &Path) -> String {
    rel_key(&rel.with_extension(""))
}

fn label_from_subdir(rel: &Path, healthy: &[String], tb: &[String]) -> Option<Label> {
    let mut comps = rel.components();
    let first = comps.next()?.as_os_str().to_string_lossy().to_ascii_lowercase();
    // a file directly under the root has no class directory
    comps.next()?;
    if healthy.iter().any(|h| h.eq_ignore_ascii_case(&first)) {
        Some(Label::Healthy)
    } else if tb.iter().any(|t| t.eq_ignore_ascii_case(&first)) {
        Some(Label::Tb)
    } else {
        None
    }
}

fn label_from_suffix(rel: &Path) -> Option<Label> {
    let stem = rel.file_stem()?.to_str()?;
    if stem.ends_with("_0") {
        Some(Label::Healthy)
    } else if stem.ends_with("_1") {
        Some(Label::Tb)
    } else {
        None
    }
}

fn read_sidecar(path: &Path) -> DatasetResult<HashMap<String, Label>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DatasetError::LabelFile {
            path: path.to_owned(),
            msg: e.to_string(),
        })?;
    let mut out = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| DatasetError::LabelFile {
            path: path.to_owned(),
            msg: e.to_string(),
        })?;
        let (Some(p), Some(l)) = (row.get(0), row.get(1)) else {
            return Err(DatasetError::LabelFile {
                path: path.to_owned(),
                msg: format!("expected `path,label`, got {row:?}"),
            });
        };
        let label: Label = l.parse().map_err(|msg| DatasetError::LabelFile {
            path: path.to_owned(),
            msg,
        })?;
        out.insert(p.replace('\\', "/"), label);
    }
    Ok(out)
}

fn read_dimensions(path: &Path) -> Result<(u32, u32), String> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?;
    if reader.format().is_none() {
        return Err("unrecognized image format".into());
    }
    let (w, h) = reader.into_dimensions().map_err(|e| e.to_string())?;
    if w == 0 || h == 0 {
        return Err(format!("zero-sized image {w}x{h}"));
    }
    Ok((w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::GrayImage::from_pixel(w, h, image::Luma([128])).save(path).unwrap();
    }

    #[test]
    fn empty_directory_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let report = scan_dataset(dir.path(), &LabelLayout::default(), Source::Other).unwrap();
        assert!(report.manifest.is_empty());
        assert!(report.manifest.class_counts().is_empty());
        assert!(report.unlabeled.is_empty() && report.undecodable.is_empty());
    }

    #[test]
    fn missing_root_is_fatal() {
        let err = scan_dataset(Path::new("/no/such/dir"), &LabelLayout::default(), Source::Other)
            .unwrap_err();
        assert!(matches!(err, DatasetError::MissingRoot(_)));
    }

    #[test]
    fn corrupt_file_is_reported_not_dropped() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("normal/a.png"), 8, 6);
        write_png(&dir.path().join("normal/b.png"), 8, 6);
        write_png(&dir.path().join("tb/c.png"), 8, 6);
        fs::write(dir.path().join("tb/broken.png"), b"definitely not a png").unwrap();
        let report = scan_dataset(dir.path(), &LabelLayout::default(), Source::Other).unwrap();
        assert_eq!(report.manifest.len(), 3);
        assert_eq!(report.undecodable.len(), 1);
        assert!(report.undecodable[0].0.ends_with("tb/broken.png"));
        assert_eq!(report.manifest.count(Label::Healthy), 2);
        assert_eq!(report.manifest.count(Label::Tb), 1);
        let r = report.manifest.get("normal/a").unwrap();
        assert_eq!((r.width_px, r.height_px), (8, 6));
    }

    #[test]
    fn unlabeled_images_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("normal/a.png"), 4, 4);
        write_png(&dir.path().join("misc/x.png"), 4, 4);
        write_png(&dir.path().join("loose.png"), 4, 4);
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let report = scan_dataset(dir.path(), &LabelLayout::default(), Source::Other).unwrap();
        assert_eq!(report.manifest.len(), 1);
        assert_eq!(report.unlabeled.len(), 2);
    }

    #[test]
    fn filename_suffix_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("CHNCXR_0001_0.png"), 5, 5);
        write_png(&dir.path().join("CHNCXR_0002_1.png"), 5, 5);
        write_png(&dir.path().join("CHNCXR_0003.png"), 5, 5);
        let report = scan_dataset(dir.path(), &LabelLayout::FilenameSuffix, Source::Shenzhen).unwrap();
        assert_eq!(report.manifest.len(), 2);
        assert_eq!(report.manifest.get("CHNCXR_0002_1").unwrap().label, Label::Tb);
        assert_eq!(report.manifest.records()[0].source, Source::Shenzhen);
        assert_eq!(report.unlabeled.len(), 1);
    }

    #[test]
    fn sidecar_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("img/1.png"), 5, 5);
        write_png(&dir.path().join("img/2.png"), 5, 5);
        fs::write(dir.path().join("labels.csv"), "path,label\nimg/1.png,tb\nimg/2.png,healthy\n").unwrap();
        let report = scan_dataset(
            dir.path(),
            &LabelLayout::Sidecar(PathBuf::from("labels.csv")),
            Source::Indian,
        )
        .unwrap();
        assert_eq!(report.manifest.count(Label::Tb), 1);
        assert_eq!(report.manifest.count(Label::Healthy), 1);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let rec = CxrRecord {
            id: "a".into(),
            image_path: "a.png".into(),
            label: Label::Tb,
            source: Source::Other,
            width_px: 1,
            height_px: 1,
        };
        let mut other = rec.clone();
        other.image_path = "b.png".into();
        assert!(matches!(
            DatasetManifest::new(vec![rec, other]),
            Err(DatasetError::Duplicate { field: "id", .. })
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(vec![CxrRecord {
            id: "x".into(),
            image_path: "/data/x.png".into(),
            label: Label::Healthy,
            source: Source::Shenzhen,
            width_px: 3000,
            height_px: 2993,
        }])
        .unwrap();
        let p = dir.path().join("m.jsonl");
        m.write_jsonl(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.trim(),
            r#"{"id":"x","image_path":"/data/x.png","label":"healthy","source":"shenzhen","width_px":3000,"height_px":2993}"#
        );
        assert_eq!(DatasetManifest::read_jsonl(&p).unwrap(), m);
    }
}

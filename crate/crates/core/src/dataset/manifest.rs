use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassTaxonomy, DatasetError};

pub const MANIFEST_HEADER: [&str; 4] = ["image_path", "label", "source", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" | "" => Ok(Split::Unassigned),
            other => Err(DatasetError::ManifestFormat(format!(
                "unknown split {other:?}"
            ))),
        }
    }
}

/// Train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DatasetError> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let parts = self.as_array();
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DatasetError::InvalidRatios(format!("{parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidRatios(format!(
                "{parts:?} sums to {sum}"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: String,
    pub source: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub taxonomy: ClassTaxonomy,
    pub records: Vec<ImageRecord>,
    pub split_seed: Option<u64>,
    pub split_ratios: SplitRatios,
}

/// Result of scanning a class-per-directory image tree.
#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub manifest: DatasetManifest,
    /// Files that could not be decoded as images.
    pub skipped: Vec<PathBuf>,
}

impl IngestOutcome {
    pub fn skipped_count(&self) -> usize {
        self.skipped.len()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestMeta {
    taxonomy: ClassTaxonomy,
    split_seed: Option<u64>,
    split_ratios: SplitRatios,
}

impl DatasetManifest {
    pub fn new(taxonomy: ClassTaxonomy, records: Vec<ImageRecord>) -> Result<Self, DatasetError> {
        let m = Self {
            taxonomy,
            records,
            split_seed: None,
            split_ratios: SplitRatios::default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        self.split_ratios.validate()?;
        for r in &self.records {
            if !self.taxonomy.contains(&r.label) {
                return Err(DatasetError::UnknownClass(r.label.clone()));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// (path, class index) pairs for one split, in manifest order.
    pub fn labeled(&self, split: Split) -> Vec<(PathBuf, usize)> {
        self.split(split)
            .map(|r| {
                let idx = self
                    .taxonomy
                    .index_of(&r.label)
                    .expect("manifest labels are validated against the taxonomy");
                (r.path.clone(), idx)
            })
            .collect()
    }

    /// Per-class record counts in taxonomy order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.taxonomy.len()];
        for r in &self.records {
            if let Some(i) = self.taxonomy.index_of(&r.label) {
                counts[i] += 1;
            }
        }
        counts
    }

    fn meta_path(path: &Path) -> PathBuf {
        path.with_extension("meta.json")
    }

    /// Writes the manifest as `image_path,label,source,split` rows with paths
    /// relative to the manifest's directory, plus a `.meta.json` sidecar holding
    /// the ordered taxonomy and split parameters.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let base = manifest_dir(path);
        if !base.as_os_str().is_empty() {
            fs::create_dir_all(&base)?;
        }
        let abs_base = absolute(&base)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MANIFEST_HEADER)?;
        for r in &self.records {
            let abs = absolute(&r.path)?;
            let rel = pathdiff::diff_paths(&abs, &abs_base).unwrap_or(abs);
            let rel = rel.to_string_lossy().replace('\\', "/");
            w.write_record([rel.as_str(), &r.label, &r.source, r.split.as_str()])?;
        }
        w.flush()?;
        let meta = ManifestMeta {
            taxonomy: self.taxonomy.clone(),
            split_seed: self.split_seed,
            split_ratios: self.split_ratios,
        };
        fs::write(
            Self::meta_path(path),
            serde_json::to_string_pretty(&meta).map_err(|e| DatasetError::ManifestFormat(e.to_string()))? + "\n",
        )?;
        Ok(())
    }

    /// Reads a manifest written by [`DatasetManifest::save`]. Without the sidecar
    /// the taxonomy falls back to the sorted set of labels present.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let base = manifest_dir(path);
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(DatasetError::ManifestFormat(format!(
                "expected header {}, found {}",
                MANIFEST_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            if row.len() != 4 {
                return Err(DatasetError::ManifestFormat(format!(
                    "row with {} fields",
                    row.len()
                )));
            }
            let rel = PathBuf::from(&row[0]);
            let path = if rel.is_absolute() { rel } else { base.join(rel) };
            records.push(ImageRecord {
                path,
                label: row[1].to_string(),
                source: row[2].to_string(),
                split: row[3].parse()?,
            });
        }
        let meta_path = Self::meta_path(path);
        let manifest = if meta_path.exists() {
            let meta: ManifestMeta = serde_json::from_slice(&fs::read(&meta_path)?)
                .map_err(|e| DatasetError::ManifestFormat(format!("{}: {e}", meta_path.display())))?;
            Self {
                taxonomy: meta.taxonomy,
                records,
                split_seed: meta.split_seed,
                split_ratios: meta.split_ratios,
            }
        } else {
            let mut labels: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
            labels.sort();
            labels.dedup();
            Self {
                taxonomy: ClassTaxonomy::new(labels)?,
                records,
                split_seed: None,
                split_ratios: SplitRatios::default(),
            }
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn absolute(path: &Path) -> Result<PathBuf, DatasetError> {
    if path.is_absolute() {
        Ok(path.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(path))
    }
}

/// Scans `root/<class_name>/<image files>` into a manifest. Every immediate
/// subdirectory must name a taxonomy class; files that do not decode as images
/// are skipped and reported.
pub fn ingest_directory(
    root: &Path,
    taxonomy: &ClassTaxonomy,
    source: &str,
) -> Result<IngestOutcome, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset root {} is not a directory", root.display()),
        )));
    }
    let mut candidates: Vec<(PathBuf, String)> = Vec::new();
    let mut skipped = Vec::new();
    let mut class_dirs: Vec<_> = fs::read_dir(root)?.collect::<Result<Vec<_>, _>>()?;
    class_dirs.sort_by_key(|e| e.file_name());
    for entry in class_dirs {
        let path = entry.path();
        if !path.is_dir() {
            skipped.push(path);
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if !taxonomy.contains(&name) {
            return Err(DatasetError::UnknownClass(name));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        files.sort();
        candidates.extend(
            files
                .into_iter()
                .filter(|p| p.is_file())
                .map(|p| (p, name.clone())),
        );
    }

    let decoded: Vec<bool> = candidates
        .par_iter()
        .map(|(p, _)| is_decodable(p))
        .collect();

    let mut records = Vec::new();
    for ((path, label), ok) in candidates.into_iter().zip(decoded) {
        if ok {
            records.push(ImageRecord {
                path,
                label,
                source: source.to_string(),
                split: Split::Unassigned,
            });
        } else {
            skipped.push(path);
        }
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let manifest = DatasetManifest::new(taxonomy.clone(), records)?;
    Ok(IngestOutcome { manifest, skipped })
}

fn is_decodable(path: &Path) -> bool {
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .ok()
        .and_then(|r| r.decode().ok())
        .is_some_and(|img| img.width() > 0 && img.height() > 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, rgb: [u8; 3]) {
        image::RgbImage::from_pixel(4, 4, image::Rgb(rgb))
            .save(path)
            .unwrap();
    }

    fn taxonomy() -> ClassTaxonomy {
        ClassTaxonomy::new(["red", "green", "blue"]).unwrap()
    }

    #[test]
    fn ingest_skips_non_images() {
        let dir = tempfile::tempdir().unwrap();
        let red = dir.path().join("red");
        fs::create_dir(&red).unwrap();
        for i in 0..5 {
            write_png(&red.join(format!("{i}.png")), [200, 0, 0]);
        }
        fs::write(red.join("notes.txt"), "not an image").unwrap();
        let out = ingest_directory(dir.path(), &taxonomy(), "test").unwrap();
        assert_eq!(out.manifest.len(), 5);
        assert_eq!(out.skipped_count(), 1);
        assert!(out.manifest.records.iter().all(|r| r.split == Split::Unassigned));
    }

    #[test]
    fn ingest_rejects_unknown_class_and_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_directory(dir.path(), &taxonomy(), "t"),
            Err(DatasetError::EmptyDataset)
        ));
        fs::create_dir(dir.path().join("purple")).unwrap();
        let err = ingest_directory(dir.path(), &taxonomy(), "t").unwrap_err();
        assert!(err.to_string().contains("unknown class"));
        assert!(err.to_string().contains("purple"));
    }

    #[test]
    fn save_load_roundtrip_uses_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        for class in ["red", "blue"] {
            fs::create_dir_all(data.join(class)).unwrap();
            for i in 0..3 {
                write_png(&data.join(class).join(format!("{i}.png")), [9, 9, 9]);
            }
        }
        let m = ingest_directory(&data, &taxonomy(), "unit").unwrap().manifest;
        let path = dir.path().join("out").join("manifest.csv");
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("image_path,label,source,split\n"));
        assert!(text.contains("../data/blue/0.png,blue,unit,unassigned"));
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.taxonomy, m.taxonomy);
        assert_eq!(back.len(), 6);
        for (a, b) in back.records.iter().zip(&m.records) {
            assert_eq!(
                fs::canonicalize(&a.path).unwrap(),
                fs::canonicalize(&b.path).unwrap()
            );
        }
    }

    #[test]
    fn load_rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "path,label\nx.png,a\n").unwrap();
        assert!(matches!(
            DatasetManifest::load(&p),
            Err(DatasetError::ManifestFormat(_))
        ));
    }

    #[test]
    fn ratios_must_sum_to_one() {
        assert!(SplitRatios::new(0.6, 0.2, 0.2).is_ok());
        assert!(SplitRatios::new(0.6, 0.3, 0.2).is_err());
        assert!(SplitRatios::new(1.2, -0.1, -0.1).is_err());
    }
}

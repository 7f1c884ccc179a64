//! Dataset files, deterministic splits and the synthetic scene generator.
//!
//! A dataset directory holds `annotations.jsonl` plus the files it points
//! to. Paths inside annotations are relative to the annotations file.

mod container;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::silhouette::{Mask, MeshModel, SilhouetteError};
use crate::tensorkit::Tensor;

pub use container::{decode_tensor, encode_tensor, load_feature_map, read_tensor, write_tensor, TENSOR_MAGIC};
pub use synth::{synth_generate, synth_mesh, FeatureStats, SynthConfig, SynthSummary, SYNTH_CATEGORIES};

/// Spatial size and channel count of each proxy feature map.
pub const FEATURE_DIMS: [usize; 3] = [16, 16, 8];
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated tensor file: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("not a tensor file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor dtype {0}")]
    UnsupportedDtype(u8),
    #[error("tensor checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("corrupt tensor file: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    At {
        path: PathBuf,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("{path}:{line}: {msg}")]
    Annotation { path: PathBuf, line: usize, msg: String },
    #[error("sample {sample}: referenced file {path} does not exist")]
    MissingFile { sample: String, path: PathBuf },
    #[error("sample {0} has no {1} file")]
    MissingField(String, &'static str),
    #[error("split needs at least 2 ids, got {0}")]
    TooFewIds(usize),
    #[error("fraction {0} outside the allowed range")]
    InvalidFraction(f64),
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("output directory {0} exists and is not a dataset; refusing to replace it")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Silhouette(#[from] SilhouetteError),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn at(self, path: &Path) -> Self {
        match self {
            e @ (DatasetError::Io { .. } | DatasetError::At { .. }) => e,
            e => DatasetError::At {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }
}

/// One object instance in one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub sample_id: String,
    pub category: String,
    pub mesh_id: String,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reshading_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<String>,
}

impl Annotation {
    fn paths(&self) -> impl Iterator<Item = &String> {
        [&self.normal_path, &self.reshading_path, &self.mask_path, &self.gt_mask_path]
            .into_iter()
            .flatten()
    }
}

/// Parses and validates a JSON-lines annotation file: every line must parse,
/// angles must be in range, sample ids must be unique and every referenced
/// file must exist.
pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out: Vec<Annotation> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| DatasetError::Annotation {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let a: Annotation = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if !(a.azimuth_deg.is_finite() && (0.0..360.0).contains(&a.azimuth_deg)) {
            return Err(bad(format!("azimuth {} outside [0, 360)", a.azimuth_deg)));
        }
        if !(a.elevation_deg.is_finite() && (-90.0..=90.0).contains(&a.elevation_deg)) {
            return Err(bad(format!("elevation {} outside [-90, 90]", a.elevation_deg)));
        }
        if !seen.insert(a.sample_id.clone()) {
            return Err(bad(format!("duplicate sample id {:?}", a.sample_id)));
        }
        for p in a.paths() {
            let full = base.join(p);
            if !full.is_file() {
                return Err(DatasetError::MissingFile {
                    sample: a.sample_id.clone(),
                    path: full,
                });
            }
        }
        out.push(a);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<(), DatasetError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| DatasetError::io(path, e))?);
    for a in annotations {
        let line = serde_json::to_string(a).expect("annotation serializes");
        writeln!(w, "{line}").map_err(|e| DatasetError::io(path, e))?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}

pub fn load_mask(path: &Path) -> Result<Mask, DatasetError> {
    Mask::read_pgm(path).map_err(|e| DatasetError::from(e).at(path))
}

pub fn load_mesh(path: &Path) -> Result<MeshModel, DatasetError> {
    crate::silhouette::read_obj(path).map_err(|e| DatasetError::from(e).at(path))
}

/// Train/test partition of sample ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Seeded shuffle of the sorted ids; the first `round(fraction * N)` train.
/// Both sides keep at least one id.
pub fn make_split(ids: &[String], train_fraction: f64, seed: u64) -> Result<Split, DatasetError> {
    if ids.len() < 2 {
        return Err(DatasetError::TooFewIds(ids.len()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let test = shuffled.split_off(n_train);
    Ok(Split {
        train: shuffled,
        test,
        seed,
    })
}

/// A reduced training set and the categories it lost entirely.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subsample {
    pub split: Split,
    pub emptied_categories: Vec<String>,
}

/// Keeps `floor(fraction * |train|)` training ids, stratified by category.
///
/// Each category is shuffled by `seed`; member `r` of a category with `n`
/// members gets the key `(r + 0.5) / n`, and ids are taken in key order
/// (category name breaks ties). Every fraction takes a prefix of the same
/// order, so smaller subsets are contained in larger ones.
pub fn subsample_fraction(
    split: &Split,
    fraction: f64,
    seed: u64,
    category_of: &BTreeMap<String, String>,
) -> Result<Subsample, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let unknown = "";
    let mut by_cat: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
    for id in &split.train {
        let cat = category_of.get(id).map_or(unknown, String::as_str);
        by_cat.entry(cat).or_default().push(id);
    }
    let mut keyed: Vec<(f64, &str, usize, &String)> = Vec::with_capacity(split.train.len());
    for (ci, (cat, ids)) in by_cat.iter_mut().enumerate() {
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ci as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        ids.shuffle(&mut rng);
        let n = ids.len() as f64;
        for (r, id) in ids.iter().enumerate() {
            keyed.push(((r as f64 + 0.5) / n, cat, r, id));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    let keep = ((fraction * split.train.len() as f64) + 1e-9).floor() as usize;
    let train: Vec<String> = keyed.iter().take(keep).map(|k| k.3.clone()).collect();
    let kept_cats: BTreeSet<&str> = keyed.iter().take(keep).map(|k| k.1).collect();
    let emptied_categories: Vec<String> = by_cat
        .keys()
        .filter(|c| !kept_cats.contains(*c))
        .map(|c| c.to_string())
        .collect();
    for c in &emptied_categories {
        log::warn!("subsample {fraction}: category {c:?} has no training samples left");
    }
    Ok(Subsample {
        split: Split {
            train,
            test: split.test.clone(),
            seed: split.seed,
        },
        emptied_categories,
    })
}

/// Annotation plus its loaded feature maps and predicted mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub annotation: Annotation,
    pub normal: Tensor<f32>,
    pub reshading: Tensor<f32>,
    pub mask: Mask,
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads `annotations.jsonl` under `root` and every sample's features and
    /// predicted mask.
    pub fn load(root: &Path) -> Result<Dataset, DatasetError> {
        let annotations = load_annotations(&root.join(ANNOTATIONS_FILE))?;
        let mut samples = Vec::with_capacity(annotations.len());
        for a in annotations {
            let need = |p: &Option<String>, what: &'static str| {
                p.as_ref()
                    .map(|p| root.join(p))
                    .ok_or_else(|| DatasetError::MissingField(a.sample_id.clone(), what))
            };
            let normal = load_feature_map(&need(&a.normal_path, "normal feature")?, &FEATURE_DIMS)?;
            let reshading = load_feature_map(&need(&a.reshading_path, "reshading feature")?, &FEATURE_DIMS)?;
            let mask = load_mask(&need(&a.mask_path, "predicted mask")?)?;
            samples.push(Sample {
                annotation: a,
                normal,
                reshading,
                mask,
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            samples,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.annotation.sample_id.clone()).collect()
    }

    pub fn categories(&self) -> BTreeMap<String, String> {
        self.samples
            .iter()
            .map(|s| (s.annotation.sample_id.clone(), s.annotation.category.clone()))
            .collect()
    }

    /// Samples whose ids are listed, in list order.
    pub fn select(&self, ids: &[String]) -> Vec<&Sample> {
        let index: BTreeMap<&str, &Sample> = self.samples.iter().map(|s| (s.annotation.sample_id.as_str(), s)).collect();
        ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect()
    }

    pub fn mesh_path(&self, mesh_id: &str) -> PathBuf {
        self.root.join("meshes").join(format!("{mesh_id}.obj"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:05}")).collect()
    }

    #[test]
    fn split_sizes() {
        let s = make_split(&ids(10069), 0.7487, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (7539, 2530));
        let s = make_split(&ids(4), 0.5, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (2, 2));
        assert!(make_split(&ids(1), 0.5, 0).is_err());
        assert!(make_split(&ids(5), 1.0, 0).is_err());
    }

    #[test]
    fn subsample_floor_and_identity() {
        let split = make_split(&ids(10069), 0.7487, 0).unwrap();
        let cats: BTreeMap<String, String> = split
            .train
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), ["chair", "sofa", "bed"][i % 3].to_string()))
            .collect();
        let quarter = subsample_fraction(&split, 0.25, 1, &cats).unwrap();
        assert_eq!(quarter.split.train.len(), 1884);
        assert_eq!(quarter.split.test, split.test);
        let full = subsample_fraction(&split, 1.0, 1, &cats).unwrap();
        let mut a = full.split.train.clone();
        let mut b = split.train.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_fraction_reports_emptied_categories() {
        let split = Split {
            train: ids(10),
            test: vec![],
            seed: 0,
        };
        let cats: BTreeMap<String, String> = split
            .train
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), if i == 0 { "rare" } else { "common" }.to_string()))
            .collect();
        let s = subsample_fraction(&split, 0.1, 0, &cats).unwrap();
        assert_eq!(s.split.train.len(), 1);
        assert_eq!(s.emptied_categories.len(), 1);
    }

    #[test]
    fn annotations_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.pgm"), b"").unwrap();
        let a = Annotation {
            sample_id: "a".into(),
            category: "chair".into(),
            mesh_id: "chair_0".into(),
            azimuth_deg: 12.5,
            elevation_deg: 30.0,
            normal_path: None,
            reshading_path: None,
            mask_path: Some("m.pgm".into()),
            gt_mask_path: None,
        };
        let path = dir.path().join(ANNOTATIONS_FILE);
        write_annotations(&path, std::slice::from_ref(&a)).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), vec![a.clone()]);

        let mut missing = a.clone();
        missing.mask_path = Some("nope.pgm".into());
        write_annotations(&path, &[missing]).unwrap();
        let err = load_annotations(&path).unwrap_err();
        assert!(err.to_string().contains("nope.pgm"), "{err}");

        std::fs::write(&path, "{\"sample_id\": 3}\n").unwrap();
        assert!(matches!(load_annotations(&path), Err(DatasetError::Annotation { line: 1, .. })));

        let mut bad = a;
        bad.azimuth_deg = 360.0;
        write_annotations(&path, &[bad]).unwrap();
        assert!(matches!(load_annotations(&path), Err(DatasetError::Annotation { .. })));
    }
}

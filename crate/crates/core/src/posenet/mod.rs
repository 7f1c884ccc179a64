//! The two-stage pose classifier.
//!
//! Stage 1 maps fused feature maps to azimuth and elevation bin logits.
//! Stage 2 scores each of the top three azimuth candidates by stacking the
//! candidate's D-mask onto the features masked by the predicted mask; the
//! final azimuth maximizes `[p2 >= 0.5] * p1` over the candidates.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::binning::{assign_bin, BinSpec, BinningError};
use crate::datasets::{DatasetError, Sample, FEATURE_DIMS};
use crate::silhouette::{template_match, DmaskSet, Mask, SilhouetteError, DEFAULT_SCALES, MASK_SIZE};
use crate::tensorkit::{softmax, Conv2d, Layer, Mode, Tensor, TensorError, UpsampleBilinear};

mod checkpoint;
mod eval;
mod nets;
mod train;

pub use checkpoint::{Checkpoint, ModelBundle, CHECKPOINT_MAGIC};
pub use eval::{
    evaluate, CategoryRow, ConstantPredictor, EvalReport, OraclePredictor, PosePredictor, Prediction, Retrieval,
    TwoStagePredictor,
};
pub use nets::{oracle_stage1, Stage1Net, Stage2Net, STAGE2_CHANNELS};
pub use train::{
    build_stage2_pairs, stage2_accuracy, train_stage1, train_stage2, EpochStats, History, Stage2Pair,
};

pub const FUSED_SIZE: usize = 128;
pub const FUSED_CHANNELS: usize = 8;
pub const TOP_K: usize = 3;
pub const STAGE2_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PoseNetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Binning(#[from] BinningError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Silhouette(#[from] SilhouetteError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no D-masks for mesh {0:?}")]
    MissingDmasks(String),
    #[error("no D-mask gallery for category {0:?}")]
    EmptyGallery(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Normal and re-shading feature maps of one sample, each `16 x 16 x 8`.
#[derive(Clone, Debug)]
pub struct FeatureInput {
    normal: Tensor<f32>,
    reshading: Tensor<f32>,
}

impl FeatureInput {
    pub fn new(normal: Tensor<f32>, reshading: Tensor<f32>) -> Result<Self, PoseNetError> {
        for (name, t) in [("normal", &normal), ("reshading", &reshading)] {
            if t.dims() != FEATURE_DIMS {
                return Err(PoseNetError::Shape(format!(
                    "{name} features must be {FEATURE_DIMS:?}, got {:?}",
                    t.dims()
                )));
            }
            t.ensure_finite(name)?;
        }
        Ok(Self { normal, reshading })
    }

    pub fn from_sample(sample: &Sample) -> Result<Self, PoseNetError> {
        Self::new(sample.normal.clone(), sample.reshading.clone())
    }

    pub fn normal(&self) -> &Tensor<f32> {
        &self.normal
    }

    pub fn reshading(&self) -> &Tensor<f32> {
        &self.reshading
    }

    /// Channel concatenation, normal first: `[1, 16, 16, 16]`.
    pub fn concat(&self) -> Tensor<f32> {
        let c = FEATURE_DIMS[2];
        let mut data = Vec::with_capacity(2 * self.normal.len());
        for (n, r) in self.normal.data().chunks_exact(c).zip(self.reshading.data().chunks_exact(c)) {
            data.extend_from_slice(n);
            data.extend_from_slice(r);
        }
        Tensor::new(vec![1, FEATURE_DIMS[0], FEATURE_DIMS[1], 2 * c], data).expect("sizes match")
    }
}

/// Concatenate, upsample bilinearly to 128x128, reduce 16 -> 8 channels
/// with a 1x1 convolution. The reduction is seeded and kept fixed.
#[derive(Clone, Debug)]
pub struct Fusion {
    upsample: UpsampleBilinear,
    pub conv: Conv2d<f32>,
}

impl Fusion {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf05e);
        Self::from_conv(Conv2d::init(1, 2 * FEATURE_DIMS[2], FUSED_CHANNELS, 1, 0, &mut rng)).expect("valid shape")
    }

    pub fn from_conv(conv: Conv2d<f32>) -> Result<Self, PoseNetError> {
        if conv.params.weights.dims() != [1, 1, 2 * FEATURE_DIMS[2], FUSED_CHANNELS] {
            return Err(PoseNetError::Shape(format!(
                "fusion conv must be 1x1x16x8, got {:?}",
                conv.params.weights.dims()
            )));
        }
        Ok(Self {
            upsample: UpsampleBilinear::new(FUSED_SIZE, FUSED_SIZE),
            conv,
        })
    }

    /// `[128, 128, 8]` fused representation.
    pub fn fuse(&self, input: &FeatureInput) -> Result<Tensor<f32>, PoseNetError> {
        let mut up = self.upsample.clone();
        let mut conv = self.conv.clone();
        let x = up.forward(&input.concat(), Mode::Eval)?;
        let y = conv.forward(&x, Mode::Eval)?;
        Ok(y.reshape(&[FUSED_SIZE, FUSED_SIZE, FUSED_CHANNELS])?)
    }
}

/// Top azimuth candidates with their stage-1 probabilities, descending.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    entries: Vec<(usize, f64)>,
}

impl CandidateSet {
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn bins(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn contains(&self, bin: usize) -> bool {
        self.entries.iter().any(|e| e.0 == bin)
    }

    pub fn top1(&self) -> usize {
        self.entries[0].0
    }
}

/// The `k` most probable bins under `softmax(logits)`, ties to the lower bin.
pub fn top_k_candidates(logits: &[f32], k: usize) -> Result<CandidateSet, PoseNetError> {
    if k == 0 || k > logits.len() {
        return Err(PoseNetError::Shape(format!("top-{k} of {} logits", logits.len())));
    }
    let probs: Vec<f64> = softmax(&logits.iter().map(|&z| z as f64).collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    Ok(CandidateSet {
        entries: order.into_iter().take(k).map(|i| (i, probs[i])).collect(),
    })
}

/// Picks the candidate maximizing `[p2 >= threshold] * p1`; if no candidate
/// passes, the stage-1 top-1 bin. Ties go to the earlier candidate.
pub fn select_pose(candidates: &CandidateSet, stage2_probs: &[f64], threshold: f64) -> usize {
    assert_eq!(candidates.entries.len(), stage2_probs.len(), "one stage-2 score per candidate");
    let mut best: Option<(usize, f64)> = None;
    for (&(bin, p1), &p2) in candidates.entries.iter().zip(stage2_probs) {
        if p2 >= threshold && best.is_none_or(|(_, b)| p1 > b) {
            best = Some((bin, p1));
        }
    }
    best.map_or(candidates.top1(), |b| b.0)
}

/// Stage-2 input: fused features zeroed outside the predicted mask, with the
/// D-mask appended as a ninth channel. `[128, 128, 9]`.
pub fn stage2_input(fused: &Tensor<f32>, predicted: &Mask, dmask: &Mask) -> Result<Tensor<f32>, PoseNetError> {
    let mut out = vec![0f32; FUSED_SIZE * FUSED_SIZE * STAGE2_CHANNELS];
    write_stage2_input(fused, predicted, dmask, &mut out)?;
    Ok(Tensor::new(vec![FUSED_SIZE, FUSED_SIZE, STAGE2_CHANNELS], out)?)
}

pub(crate) fn write_stage2_input(
    fused: &Tensor<f32>,
    predicted: &Mask,
    dmask: &Mask,
    out: &mut [f32],
) -> Result<(), PoseNetError> {
    let want = (FUSED_SIZE, FUSED_SIZE);
    if predicted.dims() != want || dmask.dims() != want {
        return Err(PoseNetError::Shape(format!(
            "masks must be {FUSED_SIZE}x{FUSED_SIZE}, got {:?} and {:?}",
            predicted.dims(),
            dmask.dims()
        )));
    }
    if fused.len() != FUSED_SIZE * FUSED_SIZE * FUSED_CHANNELS {
        return Err(PoseNetError::Shape(format!("fused tensor {:?}", fused.dims())));
    }
    let f = fused.data();
    for y in 0..FUSED_SIZE {
        for x in 0..FUSED_SIZE {
            let p = y * FUSED_SIZE + x;
            let dst = &mut out[p * STAGE2_CHANNELS..(p + 1) * STAGE2_CHANNELS];
            if predicted.get(x, y) {
                dst[..FUSED_CHANNELS].copy_from_slice(&f[p * FUSED_CHANNELS..(p + 1) * FUSED_CHANNELS]);
            } else {
                dst[..FUSED_CHANNELS].fill(0.0);
            }
            dst[FUSED_CHANNELS] = if dmask.get(x, y) { 1.0 } else { 0.0 };
        }
    }
    Ok(())
}

/// A sample ready for the networks: fused features computed once, labels
/// assigned to bins.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample_id: String,
    pub category: String,
    pub mesh_id: String,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub az_bin: usize,
    pub el_bin: usize,
    pub fused: Tensor<f32>,
    pub mask: Mask,
}

pub fn prepare_samples(
    fusion: &Fusion,
    samples: &[&Sample],
    az: &BinSpec,
    el: &BinSpec,
) -> Result<Vec<PreparedSample>, PoseNetError> {
    samples
        .par_iter()
        .map(|s| {
            let a = &s.annotation;
            let fused = fusion.fuse(&FeatureInput::from_sample(s)?)?;
            if s.mask.dims() != (MASK_SIZE, MASK_SIZE) {
                return Err(PoseNetError::Shape(format!(
                    "sample {}: mask {:?}, expected {MASK_SIZE}x{MASK_SIZE}",
                    a.sample_id,
                    s.mask.dims()
                )));
            }
            Ok(PreparedSample {
                sample_id: a.sample_id.clone(),
                category: a.category.clone(),
                mesh_id: a.mesh_id.clone(),
                azimuth_deg: a.azimuth_deg,
                elevation_deg: a.elevation_deg,
                az_bin: assign_bin(a.azimuth_deg, az)?.bin,
                el_bin: assign_bin(a.elevation_deg, el)?.bin,
                fused,
                mask: s.mask.clone(),
            })
        })
        .collect()
}

/// D-mask sets keyed by mesh id, with the category of each mesh for
/// retrieval.
#[derive(Clone, Debug, Default)]
pub struct DmaskLibrary {
    sets: BTreeMap<String, DmaskSet>,
    categories: BTreeMap<String, String>,
}

impl DmaskLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, category: impl Into<String>, set: DmaskSet) {
        self.categories.insert(set.mesh_id.clone(), category.into());
        self.sets.insert(set.mesh_id.clone(), set);
    }

    pub fn get(&self, mesh_id: &str) -> Result<&DmaskSet, PoseNetError> {
        self.sets
            .get(mesh_id)
            .ok_or_else(|| PoseNetError::MissingDmasks(mesh_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn mesh_ids(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }

    /// Reads `<dir>/<mesh_id>/az??_el??.pgm` for every listed mesh.
    pub fn read(dir: &Path, meshes: &BTreeMap<String, String>, az: &BinSpec, el: &BinSpec) -> Result<Self, PoseNetError> {
        let mut lib = Self::new();
        for (mesh_id, category) in meshes {
            let sub = dir.join(mesh_id);
            if !sub.is_dir() {
                return Err(PoseNetError::MissingDmasks(mesh_id.clone()));
            }
            lib.insert(category.clone(), DmaskSet::read_dir(&sub, mesh_id, az, el)?);
        }
        Ok(lib)
    }

    /// Best-matching mesh of `category` for a predicted mask, scoring every
    /// D-mask by multi-scale template matching.
    pub fn retrieve(&self, query: &Mask, category: &str) -> Result<(String, f64), PoseNetError> {
        let mut best: Option<(String, f64)> = None;
        for (id, set) in &self.sets {
            if self.categories.get(id).map(String::as_str) != Some(category) {
                continue;
            }
            let m = template_match(query, set.masks(), &DEFAULT_SCALES)?;
            if best.as_ref().is_none_or(|b| m.score > b.1) {
                best = Some((id.clone(), m.score));
            }
        }
        best.ok_or_else(|| PoseNetError::EmptyGallery(category.to_string()))
    }
}

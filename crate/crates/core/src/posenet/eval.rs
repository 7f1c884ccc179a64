use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use super::train::argmax;
use super::{
    select_pose, top_k_candidates, write_stage2_input, CandidateSet, DmaskLibrary, PoseNetError, PreparedSample,
    Stage1Net, Stage2Net, FUSED_SIZE, STAGE2_CHANNELS, STAGE2_THRESHOLD, TOP_K,
};
use crate::binning::{is_correct, BinSpec};
use crate::tensorkit::{Mode, Tensor};

/// How stage 2 picks the mesh whose D-masks it compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retrieval {
    /// The annotated mesh.
    GroundTruth,
    /// Best template match of the predicted mask among meshes of the
    /// sample's category.
    TemplateMatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub az_bin: usize,
    pub el_bin: usize,
    /// Stage-1 azimuth candidates, when the predictor has them.
    pub candidates: Option<CandidateSet>,
    pub retrieved_mesh: Option<String>,
}

/// Per-sample pose prediction. Evaluation clones one predictor per worker.
pub trait PosePredictor: Clone + Send + Sync {
    fn predict(&mut self, sample: &PreparedSample) -> Result<Prediction, PoseNetError>;
}

/// Returns the ground-truth bins.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePredictor;

impl PosePredictor for OraclePredictor {
    fn predict(&mut self, s: &PreparedSample) -> Result<Prediction, PoseNetError> {
        Ok(Prediction {
            az_bin: s.az_bin,
            el_bin: s.el_bin,
            candidates: None,
            retrieved_mesh: None,
        })
    }
}

/// Always the same bins.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor {
    pub az_bin: usize,
    pub el_bin: usize,
}

impl PosePredictor for ConstantPredictor {
    fn predict(&mut self, _: &PreparedSample) -> Result<Prediction, PoseNetError> {
        Ok(Prediction {
            az_bin: self.az_bin,
            el_bin: self.el_bin,
            candidates: None,
            retrieved_mesh: None,
        })
    }
}

/// Stage 1 alone, or stage 1 followed by D-mask verification of the top
/// three azimuth candidates. Elevation always comes from stage 1.
#[derive(Clone, Debug)]
pub struct TwoStagePredictor<'a> {
    pub stage1: Stage1Net,
    pub stage2: Option<(Stage2Net, &'a DmaskLibrary, Retrieval)>,
}

impl PosePredictor for TwoStagePredictor<'_> {
    fn predict(&mut self, s: &PreparedSample) -> Result<Prediction, PoseNetError> {
        let x = s.fused.clone().reshape(&[1, FUSED_SIZE, FUSED_SIZE, s.fused.dims()[2]])?;
        let (la, le) = self.stage1.forward(&x, Mode::Eval)?;
        let el_bin = argmax(le.data());
        let candidates = top_k_candidates(la.data(), TOP_K.min(la.len()))?;
        let Some((net, library, retrieval)) = &mut self.stage2 else {
            return Ok(Prediction {
                az_bin: candidates.top1(),
                el_bin,
                candidates: Some(candidates),
                retrieved_mesh: None,
            });
        };
        let mesh = match retrieval {
            Retrieval::GroundTruth => s.mesh_id.clone(),
            Retrieval::TemplateMatch => library.retrieve(&s.mask, &s.category)?.0,
        };
        let set = library.get(&mesh)?;
        let per = FUSED_SIZE * FUSED_SIZE * STAGE2_CHANNELS;
        let bins = candidates.bins();
        let mut data = vec![0f32; per * bins.len()];
        for (&b, out) in bins.iter().zip(data.chunks_exact_mut(per)) {
            write_stage2_input(&s.fused, &s.mask, set.get(b, el_bin), out)?;
        }
        let probs = net.probabilities(&Tensor::new(vec![bins.len(), FUSED_SIZE, FUSED_SIZE, STAGE2_CHANNELS], data)?)?;
        Ok(Prediction {
            az_bin: select_pose(&candidates, &probs, STAGE2_THRESHOLD),
            el_bin,
            candidates: Some(candidates),
            retrieved_mesh: Some(mesh),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryRow {
    pub category: String,
    pub n: usize,
    pub az_correct: usize,
    pub el_correct: usize,
}

impl CategoryRow {
    pub fn az_acc(&self) -> f64 {
        percent(self.az_correct, self.n)
    }

    pub fn el_acc(&self) -> f64 {
        percent(self.el_correct, self.n)
    }
}

fn percent(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

/// Per-category accuracy, rows sorted by category.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<CategoryRow>,
    /// Aligned with the evaluated samples.
    pub predictions: Vec<Prediction>,
    /// Final azimuths that fall outside their stage-1 candidate set.
    pub outside_candidates: usize,
}

impl EvalReport {
    /// Pooled over all samples.
    pub fn mean(&self) -> CategoryRow {
        CategoryRow {
            category: "mean".into(),
            n: self.rows.iter().map(|r| r.n).sum(),
            az_correct: self.rows.iter().map(|r| r.az_correct).sum(),
            el_correct: self.rows.iter().map(|r| r.el_correct).sum(),
        }
    }

    /// `category,n,az_acc,el_acc` with percentages to two decimals and a
    /// final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,n,az_acc,el_acc\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean())) {
            writeln!(s, "{},{},{:.2},{:.2}", r.category, r.n, r.az_acc(), r.el_acc()).expect("string write");
        }
        s
    }
}

/// Runs `predictor` over `samples` in parallel and scores bins with
/// [`is_correct`].
pub fn evaluate<P: PosePredictor>(
    predictor: &P,
    samples: &[PreparedSample],
    az: &BinSpec,
    el: &BinSpec,
) -> Result<EvalReport, PoseNetError> {
    let predictions: Vec<Prediction> = samples
        .par_iter()
        .map_init(|| predictor.clone(), |p, s| p.predict(s))
        .collect::<Result<_, _>>()?;
    let mut rows: BTreeMap<&str, CategoryRow> = BTreeMap::new();
    let mut outside = 0;
    for (s, p) in samples.iter().zip(&predictions) {
        let row = rows.entry(&s.category).or_insert_with(|| CategoryRow {
            category: s.category.clone(),
            n: 0,
            az_correct: 0,
            el_correct: 0,
        });
        row.n += 1;
        row.az_correct += usize::from(is_correct(p.az_bin, s.azimuth_deg, az)?);
        row.el_correct += usize::from(is_correct(p.el_bin, s.elevation_deg, el)?);
        if p.candidates.as_ref().is_some_and(|c| !c.contains(p.az_bin)) {
            outside += 1;
        }
    }
    Ok(EvalReport {
        rows: rows.into_values().collect(),
        predictions,
        outside_candidates: outside,
    })
}

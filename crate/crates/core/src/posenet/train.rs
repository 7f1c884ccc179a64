use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    write_stage2_input, CandidateSet, DmaskLibrary, PoseNetError, PreparedSample, Stage1Net, Stage2Net, FUSED_SIZE,
    STAGE2_CHANNELS, STAGE2_THRESHOLD,
};
use crate::binning::{is_correct, BinSpec};
use crate::tensorkit::{
    bce_from_logits, cross_entropy_batch, effective_learning_rate, sgd_step, sigmoid, zero_grad, Mode, Tensor,
    TrainConfig,
};

const EVAL_BATCH: usize = 32;

/// Metrics after one epoch. Accuracies are fractions in `[0, 1]`; for
/// stage 2 `train_acc` is binary accuracy and the elevation fields are
/// absent.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub train_el_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_el_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct History {
    /// Training-set loss before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights were kept when validating.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Contiguous chunks of `order`; a trailing chunk of one joins its
/// predecessor so batch-norm always sees at least two samples.
fn batches(len: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let size = size.max(1);
    let mut out: Vec<std::ops::Range<usize>> = (0..len).step_by(size).map(|s| s..(s + size).min(len)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = tail.end;
    }
    out
}

fn stack(samples: &[PreparedSample], idx: &[usize]) -> Tensor<f32> {
    let per = samples[0].fused.len();
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        data.extend_from_slice(samples[i].fused.data());
    }
    let d = samples[0].fused.dims();
    Tensor::new(vec![idx.len(), d[0], d[1], d[2]], data).expect("sizes match")
}

fn check_specs(net: &Stage1Net, az: &BinSpec, el: &BinSpec) -> Result<(), PoseNetError> {
    if net.k_az() != az.n_bins() || net.k_el() != el.n_bins() {
        return Err(PoseNetError::Shape(format!(
            "net has {}x{} outputs, bins are {}x{}",
            net.k_az(),
            net.k_el(),
            az.n_bins(),
            el.n_bins()
        )));
    }
    Ok(())
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode logits for every sample, batched.
pub(crate) fn stage1_logits(net: &mut Stage1Net, samples: &[PreparedSample]) -> Result<Vec<(Vec<f32>, Vec<f32>)>, PoseNetError> {
    let (ka, ke) = (net.k_az(), net.k_el());
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for r in batches(samples.len(), EVAL_BATCH) {
        let (a, e) = net.forward(&stack(samples, &idx[r]), Mode::Eval)?;
        for (ra, re) in a.data().chunks_exact(ka).zip(e.data().chunks_exact(ke)) {
            out.push((ra.to_vec(), re.to_vec()));
        }
    }
    Ok(out)
}

/// Mean summed loss, azimuth accuracy, elevation accuracy.
fn stage1_metrics(
    net: &mut Stage1Net,
    samples: &[PreparedSample],
    az: &BinSpec,
    el: &BinSpec,
) -> Result<(f64, f64, f64), PoseNetError> {
    let logits = stage1_logits(net, samples)?;
    let (mut loss, mut ca, mut ce) = (0.0, 0usize, 0usize);
    for (s, (la, le)) in samples.iter().zip(&logits) {
        let la64: Vec<f64> = la.iter().map(|&v| v as f64).collect();
        let le64: Vec<f64> = le.iter().map(|&v| v as f64).collect();
        loss += crate::tensorkit::cross_entropy(&la64, s.az_bin)? + crate::tensorkit::cross_entropy(&le64, s.el_bin)?;
        ca += usize::from(is_correct(argmax(la), s.azimuth_deg, az)?);
        ce += usize::from(is_correct(argmax(le), s.elevation_deg, el)?);
    }
    let n = samples.len().max(1) as f64;
    Ok((loss / n, ca as f64 / n, ce as f64 / n))
}

fn update_early_stop(
    val_loss: f64,
    epoch: usize,
    best: &mut Option<(f64, usize)>,
    bad: &mut usize,
) -> bool {
    if best.is_none_or(|(b, _)| val_loss < b) {
        *best = Some((val_loss, epoch));
        *bad = 0;
        true
    } else {
        *bad += 1;
        false
    }
}

/// Cross-entropy on both heads, summed, SGD with momentum and step decay.
/// With a validation set, stops after `early_stop_patience` epochs without
/// a validation-loss improvement and restores the best weights.
pub fn train_stage1(
    net: &mut Stage1Net,
    train: &[PreparedSample],
    val: &[PreparedSample],
    az: &BinSpec,
    el: &BinSpec,
    config: &TrainConfig,
) -> Result<History, PoseNetError> {
    config.validate()?;
    if train.is_empty() {
        return Err(PoseNetError::EmptyDataset);
    }
    check_specs(net, az, el)?;
    let initial_loss = stage1_metrics(net, train, az, el)?.0;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History {
        initial_loss,
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    let mut best: Option<(f64, usize)> = None;
    let mut best_net: Option<Stage1Net> = None;
    let mut bad = 0;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        for r in batches(order.len(), config.batch_size) {
            let idx = &order[r];
            let (la, le) = net.forward(&stack(train, idx), Mode::Train)?;
            let ta: Vec<usize> = idx.iter().map(|&i| train[i].az_bin).collect();
            let te: Vec<usize> = idx.iter().map(|&i| train[i].el_bin).collect();
            let (_, ga) = cross_entropy_batch(&la, &ta)?;
            let (_, ge) = cross_entropy_batch(&le, &te)?;
            net.backward(&ga, &ge)?;
            for p in net.params_mut() {
                sgd_step(p, config, epoch);
                zero_grad(p);
            }
        }
        let (train_loss, train_acc, train_el) = stage1_metrics(net, train, az, el)?;
        let val_m = if val.is_empty() {
            None
        } else {
            Some(stage1_metrics(net, val, az, el)?)
        };
        history.epochs.push(EpochStats {
            epoch,
            lr: effective_learning_rate(config, epoch),
            train_loss,
            train_acc,
            train_el_acc: Some(train_el),
            val_loss: val_m.map(|m| m.0),
            val_acc: val_m.map(|m| m.1),
            val_el_acc: val_m.map(|m| m.2),
        });
        log::info!(
            "stage1 epoch {epoch}: loss {train_loss:.4} az {:.2}% el {:.2}%{}",
            100.0 * train_acc,
            100.0 * train_el,
            val_m.map_or(String::new(), |m| format!(" | val loss {:.4} az {:.2}%", m.0, 100.0 * m.1))
        );
        if let Some((vl, _, _)) = val_m {
            if update_early_stop(vl, epoch, &mut best, &mut bad) {
                best_net = Some(net.clone());
            } else if bad >= config.early_stop_patience.max(1) {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let (Some(b), Some((_, e))) = (best_net, best) {
        *net = b;
        history.best_epoch = Some(e);
    }
    Ok(history)
}

/// One stage-2 training example: a sample paired with the D-mask of one
/// azimuth bin (at the sample's ground-truth elevation bin).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage2Pair {
    pub sample: usize,
    pub az_bin: usize,
    pub el_bin: usize,
    pub label: bool,
}

/// For every sample, its ground-truth pair and one negative. Negatives come
/// from the sample's wrong stage-1 candidates when given, otherwise from
/// all wrong bins uniformly.
pub fn build_stage2_pairs(
    samples: &[PreparedSample],
    candidates: Option<&[CandidateSet]>,
    k_az: usize,
    rng: &mut impl Rng,
) -> Vec<Stage2Pair> {
    let mut pairs = Vec::with_capacity(2 * samples.len());
    for (i, s) in samples.iter().enumerate() {
        pairs.push(Stage2Pair {
            sample: i,
            az_bin: s.az_bin,
            el_bin: s.el_bin,
            label: true,
        });
        let from_candidates: Vec<usize> = candidates
            .map(|c| c[i].bins().into_iter().filter(|&b| b != s.az_bin).collect())
            .unwrap_or_default();
        let neg = if from_candidates.is_empty() {
            let b = rng.random_range(0..k_az - 1);
            if b >= s.az_bin {
                b + 1
            } else {
                b
            }
        } else {
            from_candidates[rng.random_range(0..from_candidates.len())]
        };
        pairs.push(Stage2Pair {
            sample: i,
            az_bin: neg,
            el_bin: s.el_bin,
            label: false,
        });
    }
    pairs
}

fn stage2_batch(
    samples: &[PreparedSample],
    library: &DmaskLibrary,
    pairs: &[Stage2Pair],
) -> Result<Tensor<f32>, PoseNetError> {
    let per = FUSED_SIZE * FUSED_SIZE * STAGE2_CHANNELS;
    let mut data = vec![0f32; per * pairs.len()];
    for (p, out) in pairs.iter().zip(data.chunks_exact_mut(per)) {
        let s = &samples[p.sample];
        let dmask = library.get(&s.mesh_id)?.get(p.az_bin, p.el_bin);
        write_stage2_input(&s.fused, &s.mask, dmask, out)?;
    }
    Ok(Tensor::new(vec![pairs.len(), FUSED_SIZE, FUSED_SIZE, STAGE2_CHANNELS], data)?)
}

/// Mean BCE and binary accuracy (threshold 0.5) over `pairs`.
pub fn stage2_accuracy(
    net: &mut Stage2Net,
    samples: &[PreparedSample],
    library: &DmaskLibrary,
    pairs: &[Stage2Pair],
) -> Result<(f64, f64), PoseNetError> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for r in batches(pairs.len(), EVAL_BATCH) {
        let chunk = &pairs[r];
        let logits = net.forward(&stage2_batch(samples, library, chunk)?, Mode::Eval)?;
        for (&z, p) in logits.data().iter().zip(chunk) {
            let y = sigmoid(z as f64);
            loss += crate::tensorkit::bce(y, if p.label { 1.0 } else { 0.0 });
            correct += usize::from((y >= STAGE2_THRESHOLD) == p.label);
        }
    }
    let n = pairs.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Binary cross-entropy on balanced pairs: every batch holds each of its
/// samples' positive and negative. Negatives are redrawn each epoch;
/// metrics use one fixed draw.
pub fn train_stage2(
    net: &mut Stage2Net,
    train: &[PreparedSample],
    library: &DmaskLibrary,
    candidates: Option<&[CandidateSet]>,
    k_az: usize,
    config: &TrainConfig,
) -> Result<History, PoseNetError> {
    config.validate()?;
    if train.is_empty() {
        return Err(PoseNetError::EmptyDataset);
    }
    if k_az < 2 {
        return Err(PoseNetError::Shape("stage 2 needs at least two azimuth bins".into()));
    }
    if let Some(c) = candidates {
        if c.len() != train.len() {
            return Err(PoseNetError::Shape(format!("{} candidate sets for {} samples", c.len(), train.len())));
        }
    }
    for s in train {
        library.get(&s.mesh_id)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval_pairs = build_stage2_pairs(train, candidates, k_az, &mut ChaCha8Rng::seed_from_u64(config.seed ^ 0xe7a1));
    let initial_loss = stage2_accuracy(net, train, library, &eval_pairs)?.0;
    let mut history = History {
        initial_loss,
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    let samples_per_batch = (config.batch_size / 2).max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.max_epochs {
        let pairs = build_stage2_pairs(train, candidates, k_az, &mut rng);
        order.shuffle(&mut rng);
        for r in batches(order.len(), samples_per_batch) {
            let chunk: Vec<Stage2Pair> = order[r].iter().flat_map(|&i| [pairs[2 * i], pairs[2 * i + 1]]).collect();
            let logits = net.forward(&stage2_batch(train, library, &chunk)?, Mode::Train)?;
            let targets: Vec<f32> = chunk.iter().map(|p| if p.label { 1.0 } else { 0.0 }).collect();
            let (_, grad) = bce_from_logits(logits.data(), &targets)?;
            net.backward(&Tensor::new(vec![chunk.len(), 1], grad)?)?;
            for p in net.params_mut() {
                sgd_step(p, config, epoch);
                zero_grad(p);
            }
        }
        let (train_loss, train_acc) = stage2_accuracy(net, train, library, &eval_pairs)?;
        history.epochs.push(EpochStats {
            epoch,
            lr: effective_learning_rate(config, epoch),
            train_loss,
            train_acc,
            train_el_acc: None,
            val_loss: None,
            val_acc: None,
            val_el_acc: None,
        });
        log::info!("stage2 epoch {epoch}: loss {train_loss:.4} acc {:.2}%", 100.0 * train_acc);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_never_leave_a_singleton() {
        assert_eq!(batches(65, 32), vec![0..32, 32..65]);
        assert_eq!(batches(64, 32), vec![0..32, 32..64]);
        assert_eq!(batches(1, 32), vec![0..1]);
        assert_eq!(batches(5, 2), vec![0..2, 2..5]);
    }

    fn fake(az_bin: usize) -> PreparedSample {
        PreparedSample {
            sample_id: "x".into(),
            category: "chair".into(),
            mesh_id: "chair_0".into(),
            azimuth_deg: 0.0,
            elevation_deg: 0.0,
            az_bin,
            el_bin: 2,
            fused: Tensor::zeros(&[128, 128, 8]),
            mask: crate::silhouette::Mask::new(128, 128),
        }
    }

    #[test]
    fn pair_labels_follow_ground_truth() {
        let samples: Vec<_> = (0..9).map(fake).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = build_stage2_pairs(&samples, None, 9, &mut rng);
        assert_eq!(pairs.len(), 18);
        for p in &pairs {
            assert_eq!(p.label, p.az_bin == samples[p.sample].az_bin);
            assert_eq!(p.el_bin, 2);
        }
        let cands: Vec<CandidateSet> = samples
            .iter()
            .map(|s| {
                let mut logits = vec![0f32; 9];
                logits[s.az_bin] = 3.0;
                logits[(s.az_bin + 4) % 9] = 2.0;
                logits[(s.az_bin + 5) % 9] = 1.0;
                super::super::top_k_candidates(&logits, 3).unwrap()
            })
            .collect();
        let pairs = build_stage2_pairs(&samples, Some(&cands), 9, &mut rng);
        for p in pairs.iter().filter(|p| !p.label) {
            let gt = samples[p.sample].az_bin;
            assert!(p.az_bin == (gt + 4) % 9 || p.az_bin == (gt + 5) % 9);
        }
    }
}

//! Synthetic furniture scenes.
//!
//! Each category is a parametric composition of boxes with a distinct front
//! and back, so every azimuth produces a different image. Proxy feature maps
//! come from a z-buffered render: surface normals and Lambertian shading are
//! average-pooled to 16x16 and lifted to 8 channels by fixed random linear
//! maps, then standardized per channel over the whole dataset.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{write_annotations, write_tensor, Annotation, DatasetError, ANNOTATIONS_FILE, FEATURE_DIMS};
use crate::binning::{assign_bin, BinSpec};
use crate::geometry::ViewAngles;
use crate::silhouette::{
    auto_fit_distance, default_intrinsics, render_surface, view_transform, write_obj, MeshModel, SurfaceRender, MASK_SIZE,
};
use crate::tensorkit::Tensor;

pub const SYNTH_CATEGORIES: [&str; 5] = ["chair", "sofa", "bed", "desk", "table"];

/// Seed of the fixed feature projections. Independent of the dataset seed
/// so every generated dataset shares one feature space.
const PROJECTION_SEED: u64 = 0x6d69_6470_6f73_65;
const POOL: usize = MASK_SIZE / 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub categories: Vec<String>,
    pub instances_per_category: usize,
    pub seed: u64,
    /// Place every view exactly on an azimuth/elevation bin center.
    pub snap_to_bin_centers: bool,
    pub az_bins: usize,
    pub el_bins: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            categories: SYNTH_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            instances_per_category: 3,
            seed: 0,
            snap_to_bin_centers: false,
            az_bins: 9,
            el_bins: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Config(m));
        if self.n_samples == 0 {
            return bad("n_samples must be > 0".into());
        }
        if self.categories.is_empty() {
            return bad("categories must not be empty".into());
        }
        if let Some(c) = self.categories.iter().find(|c| !SYNTH_CATEGORIES.contains(&c.as_str())) {
            return bad(format!("unknown category {c:?}; known: {SYNTH_CATEGORIES:?}"));
        }
        if self.instances_per_category == 0 {
            return bad("instances_per_category must be > 0".into());
        }
        BinSpec::azimuth(self.az_bins).map_err(|e| DatasetError::Config(e.to_string()))?;
        BinSpec::elevation(self.el_bins).map_err(|e| DatasetError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Per-channel standardization applied to the proxy features; normal
/// channels first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub annotations: Vec<Annotation>,
    pub meshes: Vec<MeshModel>,
    pub stats: FeatureStats,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Deterministic mesh for `(category, instance)`.
pub fn synth_mesh(category: &str, instance: usize, seed: u64) -> Result<MeshModel, DatasetError> {
    let cat_index = SYNTH_CATEGORIES
        .iter()
        .position(|c| *c == category)
        .ok_or_else(|| DatasetError::Config(format!("unknown category {category:?}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003) ^ ((cat_index as u64) << 32) ^ instance as u64);
    let r = &mut rng;
    let mut boxes: Vec<([f64; 3], [f64; 3])> = Vec::new();
    match category {
        "chair" => {
            let (sd, sw, sh) = (uniform(r, 0.40, 0.50), uniform(r, 0.42, 0.55), uniform(r, 0.42, 0.48));
            let (st, leg, back_h) = (0.05, uniform(r, 0.035, 0.05), uniform(r, 0.35, 0.55));
            boxes.push(([0.0, 0.0, sh], [sd, sw, st]));
            let leg_h = sh - st / 2.0;
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    boxes.push(([sx * (sd - leg) / 2.0, sy * (sw - leg) / 2.0, leg_h / 2.0], [leg, leg, leg_h]));
                }
            }
            boxes.push(([-(sd - 0.05) / 2.0, 0.0, sh + st / 2.0 + back_h / 2.0], [0.05, sw, back_h]));
            if instance % 3 == 1 {
                for sy in [-1.0, 1.0] {
                    boxes.push(([0.0, sy * (sw / 2.0 - 0.025), sh + 0.22], [sd * 0.85, 0.05, 0.04]));
                    boxes.push(([sd * 0.35, sy * (sw / 2.0 - 0.025), sh + 0.11], [0.04, 0.04, 0.2]));
                }
            }
        }
        "sofa" => {
            let (d, l) = (uniform(r, 0.8, 0.95), uniform(r, 1.6, 2.2));
            let arm_h = uniform(r, 0.15, 0.25);
            boxes.push(([0.0, 0.0, 0.21], [d, l, 0.42]));
            boxes.push(([-(d / 2.0 - 0.1), 0.0, 0.62], [0.2, l, 0.4]));
            for sy in [-1.0, 1.0] {
                boxes.push(([0.05, sy * (l / 2.0 - 0.1), 0.42 + arm_h / 2.0], [d - 0.1, 0.2, arm_h]));
            }
            if instance % 3 == 2 {
                boxes.push(([d / 2.0 + 0.3, l / 2.0 - 0.4, 0.21], [0.6, 0.8, 0.42]));
            }
        }
        "bed" => {
            let (lx, w) = (uniform(r, 1.9, 2.1), uniform(r, 1.0, 1.6));
            boxes.push(([0.0, 0.0, 0.25], [lx, w, 0.5]));
            boxes.push(([-(lx / 2.0 + 0.03), 0.0, 0.55], [0.06, w + 0.04, uniform(r, 0.9, 1.2)]));
            boxes.push(([-(lx / 2.0 - 0.25), 0.0, 0.55], [0.3, w * 0.8, 0.1]));
            if !instance.is_multiple_of(3) {
                boxes.push(([lx / 2.0 + 0.03, 0.0, 0.3], [0.06, w + 0.04, 0.6]));
            }
        }
        "desk" => {
            let (w, d, h) = (uniform(r, 1.1, 1.5), uniform(r, 0.55, 0.75), uniform(r, 0.72, 0.78));
            let body = h - 0.04;
            boxes.push(([0.0, 0.0, h - 0.02], [d, w, 0.04]));
            boxes.push(([0.0, -(w / 2.0 - 0.02), body / 2.0], [d, 0.04, body]));
            let ped = uniform(r, 0.35, 0.45);
            boxes.push(([0.0, w / 2.0 - ped / 2.0, body / 2.0], [d, ped, body]));
            boxes.push(([-(d / 2.0 - 0.02), 0.0, h * 0.6], [0.02, w - 0.1, 0.35]));
        }
        "table" => {
            let (w, d, h) = (uniform(r, 1.2, 1.8), uniform(r, 0.7, 0.9), uniform(r, 0.70, 0.76));
            let leg = uniform(r, 0.05, 0.08);
            boxes.push(([0.0, 0.0, h - 0.025], [d, w, 0.05]));
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    boxes.push(([sx * (d - leg) / 2.0, sy * (w - leg) / 2.0, (h - 0.05) / 2.0], [leg, leg, h - 0.05]));
                }
            }
            boxes.push(([-d / 4.0, 0.0, 0.15], [d / 2.0, w - 2.0 * leg, 0.03]));
            boxes.push(([-(d / 2.0 - leg / 2.0), 0.0, h - 0.1], [0.02, w - 2.0 * leg, 0.1]));
        }
        _ => unreachable!("category checked above"),
    }
    Ok(MeshModel::from_cuboids(format!("{category}_{instance}"), &boxes)?)
}

/// Fixed `out x inp` projection with entries in `[-1, 1)`.
fn projection(out: usize, inp: usize, stream: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED ^ stream);
    (0..out * inp).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Pooled normal and shading cells projected to 8 channels each, before
/// standardization.
fn raw_features(r: &SurfaceRender) -> (Tensor<f32>, Tensor<f32>) {
    let [gh, gw, c] = FEATURE_DIMS;
    let pn = projection(c, 4, 1);
    let ps = projection(c, 2, 2);
    let mut normal = Tensor::zeros(&FEATURE_DIMS);
    let mut shading = Tensor::zeros(&FEATURE_DIMS);
    let area = (POOL * POOL) as f32;
    for gy in 0..gh {
        for gx in 0..gw {
            let mut acc = [0f32; 5];
            for y in gy * POOL..(gy + 1) * POOL {
                for x in gx * POOL..(gx + 1) * POOL {
                    let i = y * r.width + x;
                    let n = r.normals[i];
                    acc[0] += n[0];
                    acc[1] += n[1];
                    acc[2] += n[2];
                    acc[3] += f32::from(u8::from(r.mask.get(x, y)));
                    acc[4] += r.shading[i];
                }
            }
            let v = acc.map(|a| a / area);
            let n_in = [v[0], v[1], v[2], v[3]];
            let s_in = [v[4], v[3]];
            let base = (gy * gw + gx) * c;
            for ch in 0..c {
                normal.data_mut()[base + ch] = (0..4).map(|j| pn[ch * 4 + j] * n_in[j]).sum();
                shading.data_mut()[base + ch] = (0..2).map(|j| ps[ch * 2 + j] * s_in[j]).sum();
            }
        }
    }
    (normal, shading)
}

fn channel_stats(maps: &[&Tensor<f32>], c: usize) -> (Vec<f32>, Vec<f32>) {
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    let mut n = 0usize;
    for m in maps {
        for px in m.data().chunks_exact(c) {
            for (k, v) in px.iter().enumerate() {
                sum[k] += *v as f64;
                sq[k] += (*v as f64) * (*v as f64);
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-6)) as f32)
        .collect();
    (mean.iter().map(|m| *m as f32).collect(), std)
}

fn standardize(t: &mut Tensor<f32>, mean: &[f32], std: &[f32]) {
    let c = mean.len();
    for px in t.data_mut().chunks_exact_mut(c) {
        for k in 0..c {
            px[k] = (px[k] - mean[k]) / std[k];
        }
    }
}

struct Drawn {
    category: String,
    instance: usize,
    view: ViewAngles,
}

fn partial_dir(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    out.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

/// Writes a synthetic dataset to `out`.
///
/// Layout: `annotations.jsonl`, `meshes/<mesh>.obj`, `masks/<id>.pgm`,
/// `features/<id>_{normal,reshading}.mlt` and `feature_stats.json`.
/// Everything is built in a sibling directory and renamed into place. An
/// existing dataset at `out` is replaced; any other existing non-empty
/// directory is an error.
pub fn synth_generate(config: &SynthConfig, out: &Path) -> Result<SynthSummary, DatasetError> {
    config.validate()?;
    let az_spec = BinSpec::azimuth(config.az_bins).expect("validated");
    let el_spec = BinSpec::elevation(config.el_bins).expect("validated");

    let mut meshes = Vec::new();
    for cat in &config.categories {
        for i in 0..config.instances_per_category {
            meshes.push(synth_mesh(cat, i, config.seed)?);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let drawn: Vec<Drawn> = (0..config.n_samples)
        .map(|i| {
            let category = config.categories[i % config.categories.len()].clone();
            let instance = rng.random_range(0..config.instances_per_category);
            let mut az: f64 = rng.random_range(0.0..360.0);
            let mut el: f64 = rng.random_range(0.0..90.0);
            if config.snap_to_bin_centers {
                az = az_spec.centers()[assign_bin(az, &az_spec).expect("finite").bin];
                el = el_spec.centers()[assign_bin(el, &el_spec).expect("finite").bin];
            }
            Drawn {
                category,
                instance,
                view: ViewAngles::new(az, el),
            }
        })
        .collect();

    let k = default_intrinsics(MASK_SIZE);
    let mesh_of = |d: &Drawn| -> &MeshModel {
        let ci = config.categories.iter().position(|c| *c == d.category).expect("drawn from list");
        &meshes[ci * config.instances_per_category + d.instance]
    };
    let renders: Vec<SurfaceRender> = drawn
        .par_iter()
        .map(|d| {
            let mesh = mesh_of(d);
            let pose = view_transform(&mesh.center(), &d.view, auto_fit_distance(mesh.bounding_radius(), &k));
            render_surface(mesh, &pose, &k)
        })
        .collect::<Result<_, _>>()?;

    let mut feats: Vec<(Tensor<f32>, Tensor<f32>)> = renders.par_iter().map(raw_features).collect();
    let c = FEATURE_DIMS[2];
    let (nm, ns) = channel_stats(&feats.iter().map(|f| &f.0).collect::<Vec<_>>(), c);
    let (sm, ss) = channel_stats(&feats.iter().map(|f| &f.1).collect::<Vec<_>>(), c);
    for (n, s) in &mut feats {
        standardize(n, &nm, &ns);
        standardize(s, &sm, &ss);
    }
    let stats = FeatureStats {
        mean: nm.into_iter().chain(sm).collect(),
        std: ns.into_iter().chain(ss).collect(),
    };

    let tmp = partial_dir(out);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| DatasetError::io(&tmp, e))?;
    }
    let result = write_all(&tmp, config, &drawn, &meshes, &renders, &feats, &stats, mesh_of);
    let annotations = match result {
        Ok(a) => a,
        Err(e) => {
            let _ = std::fs::remove_dir_all(&tmp);
            return Err(e);
        }
    };
    replace_dir(&tmp, out)?;
    Ok(SynthSummary {
        root: out.to_path_buf(),
        annotations,
        meshes,
        stats,
    })
}

#[allow(clippy::too_many_arguments)]
fn write_all<'a>(
    root: &Path,
    config: &SynthConfig,
    drawn: &'a [Drawn],
    meshes: &[MeshModel],
    renders: &[SurfaceRender],
    feats: &[(Tensor<f32>, Tensor<f32>)],
    stats: &FeatureStats,
    mesh_of: impl Fn(&'a Drawn) -> &'a MeshModel,
) -> Result<Vec<Annotation>, DatasetError> {
    for sub in ["meshes", "masks", "features"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| DatasetError::io(&d, e))?;
    }
    for m in meshes {
        write_obj(m, &root.join("meshes").join(format!("{}.obj", m.id)))?;
    }
    let width = config.n_samples.saturating_sub(1).to_string().len().max(5);
    let mut annotations = Vec::with_capacity(drawn.len());
    for (i, d) in drawn.iter().enumerate() {
        let id = format!("s{i:0width$}");
        let mask_rel = format!("masks/{id}.pgm");
        let normal_rel = format!("features/{id}_normal.mlt");
        let reshading_rel = format!("features/{id}_reshading.mlt");
        renders[i].mask.write_pgm(&root.join(&mask_rel))?;
        write_tensor(&root.join(&normal_rel), &feats[i].0)?;
        write_tensor(&root.join(&reshading_rel), &feats[i].1)?;
        annotations.push(Annotation {
            sample_id: id,
            category: d.category.clone(),
            mesh_id: mesh_of(d).id.clone(),
            azimuth_deg: d.view.azimuth,
            elevation_deg: d.view.elevation,
            normal_path: Some(normal_rel),
            reshading_path: Some(reshading_rel),
            mask_path: Some(mask_rel),
            gt_mask_path: None,
        });
    }
    write_annotations(&root.join(ANNOTATIONS_FILE), &annotations)?;
    let stats_path = root.join("feature_stats.json");
    let json = serde_json::to_string_pretty(stats).expect("stats serialize");
    std::fs::write(&stats_path, json + "\n").map_err(|e| DatasetError::io(&stats_path, e))?;
    Ok(annotations)
}

fn replace_dir(tmp: &Path, out: &Path) -> Result<(), DatasetError> {
    if out.exists() {
        let is_dataset = out.join(ANNOTATIONS_FILE).is_file();
        let is_empty = std::fs::read_dir(out).map(|mut d| d.next().is_none()).unwrap_or(false);
        if !(is_dataset || is_empty) {
            let _ = std::fs::remove_dir_all(tmp);
            return Err(DatasetError::OutputExists(out.to_path_buf()));
        }
        std::fs::remove_dir_all(out).map_err(|e| DatasetError::io(out, e))?;
    }
    std::fs::rename(tmp, out).map_err(|e| DatasetError::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_category_builds_a_solid_mesh() {
        for cat in SYNTH_CATEGORIES {
            for i in 0..3 {
                let m = synth_mesh(cat, i, 0).unwrap();
                assert!(m.is_solid(), "{cat} {i}");
                assert_eq!(m, synth_mesh(cat, i, 0).unwrap());
            }
        }
        assert!(synth_mesh("lamp", 0, 0).is_err());
    }

    #[test]
    fn front_and_back_views_differ() {
        let k = default_intrinsics(MASK_SIZE);
        for cat in SYNTH_CATEGORIES {
            let m = synth_mesh(cat, 0, 0).unwrap();
            let render = |az: f64| {
                let v = ViewAngles::new(az, 20.0);
                let pose = view_transform(&m.center(), &v, auto_fit_distance(m.bounding_radius(), &k));
                raw_features(&render_surface(&m, &pose, &k).unwrap())
            };
            let (a, _) = render(30.0);
            let (b, _) = render(210.0);
            let diff: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 1.0, "{cat}: {diff}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = SynthConfig::default();
        c.validate().unwrap();
        c.categories = vec!["lamp".into()];
        assert!(c.validate().is_err());
        c = SynthConfig {
            az_bins: 8,
            ..SynthConfig::default()
        };
        assert!(c.validate().is_err());
    }
}

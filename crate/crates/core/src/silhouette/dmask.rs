use std::path::Path;

use rayon::prelude::*;

use super::{render_silhouette, Mask, MeshModel, SilhouetteError};
use crate::binning::BinSpec;
use crate::geometry::{CameraIntrinsics, ViewAngles};

/// Silhouettes of one mesh at every (azimuth bin, elevation bin) center.
#[derive(Clone, Debug, PartialEq)]
pub struct DmaskSet {
    pub mesh_id: String,
    az_spec: BinSpec,
    el_spec: BinSpec,
    /// Azimuth-major: index `az * n_el + el`.
    masks: Vec<Mask>,
}

impl DmaskSet {
    pub fn az_spec(&self) -> &BinSpec {
        &self.az_spec
    }

    pub fn el_spec(&self) -> &BinSpec {
        &self.el_spec
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn get(&self, az_bin: usize, el_bin: usize) -> &Mask {
        assert!(az_bin < self.az_spec.n_bins() && el_bin < self.el_spec.n_bins());
        &self.masks[az_bin * self.el_spec.n_bins() + el_bin]
    }

    fn file_name(az: usize, el: usize) -> String {
        format!("az{az:02}_el{el:02}.pgm")
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), SilhouetteError> {
        std::fs::create_dir_all(dir)?;
        for a in 0..self.az_spec.n_bins() {
            for e in 0..self.el_spec.n_bins() {
                self.get(a, e).write_pgm(&dir.join(Self::file_name(a, e)))?;
            }
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path, mesh_id: &str, az_spec: &BinSpec, el_spec: &BinSpec) -> Result<Self, SilhouetteError> {
        let mut masks = Vec::with_capacity(az_spec.n_bins() * el_spec.n_bins());
        for a in 0..az_spec.n_bins() {
            for e in 0..el_spec.n_bins() {
                masks.push(Mask::read_pgm(&dir.join(Self::file_name(a, e)))?);
            }
        }
        Ok(Self {
            mesh_id: mesh_id.to_string(),
            az_spec: az_spec.clone(),
            el_spec: el_spec.clone(),
            masks,
        })
    }
}

/// Renders one auto-fitted silhouette per pair of bin centers. Views are
/// rendered in parallel and assembled by index, so the result does not
/// depend on scheduling.
pub fn generate_dmasks(
    mesh: &MeshModel,
    az_spec: &BinSpec,
    el_spec: &BinSpec,
    k: &CameraIntrinsics,
) -> Result<DmaskSet, SilhouetteError> {
    let n_el = el_spec.n_bins();
    let views: Vec<(f64, f64)> = (0..az_spec.n_bins() * n_el)
        .map(|i| (az_spec.centers()[i / n_el], el_spec.centers()[i % n_el]))
        .collect();
    let masks = views
        .par_iter()
        .map(|&(az, el)| {
            render_silhouette(mesh, &ViewAngles::new(az, el), k).map_err(|e| SilhouetteError::View {
                az,
                el,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DmaskSet {
        mesh_id: mesh.id.clone(),
        az_spec: az_spec.clone(),
        el_spec: el_spec.clone(),
        masks,
    })
}

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use super::{MeshModel, SilhouetteError};

/// Parses the `v x y z` and `f i j k` lines of a Wavefront OBJ; every other
/// line is ignored. Face entries may carry `/vt/vn` suffixes, which are
/// dropped. Indices are 1-based.
pub fn parse_obj(id: &str, text: &str) -> Result<MeshModel, SilhouetteError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let err = |msg: String| SilhouetteError::Obj { line, msg };
        let mut tok = raw.split_whitespace();
        match tok.next() {
            Some("v") => {
                let c: Vec<f64> = tok
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad coordinate {t:?}: {e}"))))
                    .collect::<Result<_, _>>()?;
                if c.len() != 3 {
                    return Err(err("vertex needs 3 coordinates".into()));
                }
                vertices.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = tok
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        match head.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(err(format!("bad face index {t:?}"))),
                        }
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(err(format!("only triangles are supported, got {} indices", idx.len())));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let mesh = MeshModel::new(id, vertices, faces)?;
    if !mesh.is_solid() {
        return Err(SilhouetteError::Flat(id.to_string()));
    }
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> Result<MeshModel, SilhouetteError> {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh");
    parse_obj(id, &std::fs::read_to_string(path)?)
}

/// Writes vertices and triangles only; round-trips through [`parse_obj`].
pub fn write_obj(mesh: &MeshModel, path: &Path) -> Result<(), SilhouetteError> {
    let mut s = String::new();
    for v in mesh.vertices() {
        // `{:?}` prints the shortest string that parses back exactly.
        let _ = writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    std::fs::write(path, s)?;
    Ok(())
}

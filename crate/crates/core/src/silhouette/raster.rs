use nalgebra::{Point2, Point3, Vector3};

use super::{Mask, MeshModel, SilhouetteError};
use crate::geometry::{azel_to_rotation, CameraIntrinsics, GeometryError, RigidTransform, ViewAngles};

/// Side of the square D-mask and stage-2 input plane.
pub const MASK_SIZE: usize = 128;

/// Fraction of the image height filled by the mesh's bounding sphere.
pub const FRAME_FILL: f64 = 0.8;

/// Direction toward the light in camera coordinates: above, left and
/// slightly behind the camera.
pub const LIGHT_DIR: [f64; 3] = [-0.4, -0.6, -0.7];

const AREA_EPS: f64 = 1e-12;
const NEAR: f64 = 1e-6;

/// Square camera used for D-masks: focal length four times the image side,
/// principal point at the image center.
pub fn default_intrinsics(size: usize) -> CameraIntrinsics {
    let c = (size as f64 - 1.0) / 2.0;
    CameraIntrinsics {
        fx: 4.0 * size as f64,
        fy: 4.0 * size as f64,
        cx: c,
        cy: c,
        width: size as u32,
        height: size as u32,
    }
}

/// Camera distance at which a sphere of `radius` spans [`FRAME_FILL`] of the
/// image height.
pub fn auto_fit_distance(radius: f64, k: &CameraIntrinsics) -> f64 {
    let half_extent = FRAME_FILL * k.height as f64 / 2.0;
    radius * (1.0 + (k.fy / half_extent).powi(2)).sqrt()
}

/// Object-to-camera pose for a camera at `distance` from `target` along the
/// viewing direction, looking at `target` with no roll.
pub fn view_transform(target: &Point3<f64>, view: &ViewAngles, distance: f64) -> RigidTransform {
    let r = azel_to_rotation(view);
    let eye = target.coords + view.direction() * distance;
    RigidTransform::new(r, -(r * eye)).expect("look-at rotation is orthonormal")
}

fn fitted_pose(mesh: &MeshModel, view: &ViewAngles, k: &CameraIntrinsics) -> Result<RigidTransform, SilhouetteError> {
    if mesh.faces().is_empty() {
        return Err(SilhouetteError::EmptyMesh(mesh.id.clone()));
    }
    let radius = mesh.bounding_radius().max(1e-9);
    Ok(view_transform(&mesh.center(), view, auto_fit_distance(radius, k)))
}

/// Silhouette from a camera on a sphere around the mesh center, with the
/// distance chosen by [`auto_fit_distance`].
pub fn render_silhouette(mesh: &MeshModel, view: &ViewAngles, k: &CameraIntrinsics) -> Result<Mask, SilhouetteError> {
    let pose = fitted_pose(mesh, view, k)?;
    render_silhouette_at(mesh, &pose, k)
}

/// Pixels whose centers fall inside any projected triangle, borders
/// included. Zero-area triangles cover nothing.
pub fn render_silhouette_at(mesh: &MeshModel, pose: &RigidTransform, k: &CameraIntrinsics) -> Result<Mask, SilhouetteError> {
    if mesh.faces().is_empty() {
        return Err(SilhouetteError::EmptyMesh(mesh.id.clone()));
    }
    let (px, _) = project_vertices(mesh, pose, k)?;
    let mut mask = Mask::new(k.width as usize, k.height as usize);
    for f in mesh.faces() {
        let tri = [px[f[0]], px[f[1]], px[f[2]]];
        rasterize(&tri, mask.width(), mask.height(), |x, y, _| mask.set(x, y, true));
    }
    Ok(mask)
}

fn project_vertices(
    mesh: &MeshModel,
    pose: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<(Vec<Point2<f64>>, Vec<Point3<f64>>), GeometryError> {
    let mut px = Vec::with_capacity(mesh.vertices().len());
    let mut cam = Vec::with_capacity(mesh.vertices().len());
    for (index, v) in mesh.vertices().iter().enumerate() {
        let pc = pose.apply(v);
        if !(pc.z > NEAR) {
            return Err(GeometryError::BehindCamera { index, depth: pc.z });
        }
        px.push(k.project(&pc));
        cam.push(pc);
    }
    Ok((px, cam))
}

fn edge(a: &Point2<f64>, b: &Point2<f64>, p: &Point2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Calls `f(x, y, barycentrics)` for every pixel center inside the triangle.
fn rasterize(tri: &[Point2<f64>; 3], width: usize, height: usize, mut f: impl FnMut(usize, usize, [f64; 3])) {
    let area = edge(&tri[0], &tri[1], &tri[2]);
    if !(area.abs() > AREA_EPS) {
        return;
    }
    let min_x = tri.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_x = tri.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).floor().min(width as f64 - 1.0);
    let min_y = tri.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_y = tri.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).floor().min(height as f64 - 1.0);
    if min_x > max_x || min_y > max_y {
        return;
    }
    let inv = 1.0 / area;
    for y in min_y as usize..=max_y as usize {
        for x in min_x as usize..=max_x as usize {
            let p = Point2::new(x as f64, y as f64);
            let l0 = edge(&tri[1], &tri[2], &p) * inv;
            let l1 = edge(&tri[2], &tri[0], &p) * inv;
            let l2 = edge(&tri[0], &tri[1], &p) * inv;
            if l0 >= 0.0 && l1 >= 0.0 && l2 >= 0.0 {
                f(x, y, [l0, l1, l2]);
            }
        }
    }
}

/// Per-pixel surface attributes of the nearest visible triangle.
#[derive(Clone, Debug)]
pub struct SurfaceRender {
    pub width: usize,
    pub height: usize,
    pub mask: Mask,
    /// Camera-frame depth; infinite on background pixels.
    pub depth: Vec<f32>,
    /// Camera-frame unit normals facing the camera; zero on background.
    pub normals: Vec<[f32; 3]>,
    /// Lambertian term under [`LIGHT_DIR`] plus a small ambient; zero on
    /// background.
    pub shading: Vec<f32>,
}

/// Z-buffered render of normals, shading and depth.
pub fn render_surface(mesh: &MeshModel, pose: &RigidTransform, k: &CameraIntrinsics) -> Result<SurfaceRender, SilhouetteError> {
    if mesh.faces().is_empty() {
        return Err(SilhouetteError::EmptyMesh(mesh.id.clone()));
    }
    let (w, h) = (k.width as usize, k.height as usize);
    let (px, cam) = project_vertices(mesh, pose, k)?;
    let light = Vector3::from(LIGHT_DIR).normalize();
    let mut out = SurfaceRender {
        width: w,
        height: h,
        mask: Mask::new(w, h),
        depth: vec![f32::INFINITY; w * h],
        normals: vec![[0.0; 3]; w * h],
        shading: vec![0.0; w * h],
    };
    let mut zbuf = vec![f64::INFINITY; w * h];
    for f in mesh.faces() {
        let (a, b, c) = (cam[f[0]], cam[f[1]], cam[f[2]]);
        let mut n = (b - a).cross(&(c - a));
        let len = n.norm();
        if !(len > 0.0) {
            continue;
        }
        n /= len;
        // Two-sided: flip normals that point away from the camera.
        if n.dot(&a.coords) > 0.0 {
            n = -n;
        }
        let shade = (0.2 + 0.8 * n.dot(&light).max(0.0)) as f32;
        let nf = [n.x as f32, n.y as f32, n.z as f32];
        let inv_z = [1.0 / a.z, 1.0 / b.z, 1.0 / c.z];
        let tri = [px[f[0]], px[f[1]], px[f[2]]];
        rasterize(&tri, w, h, |x, y, l| {
            let z = 1.0 / (l[0] * inv_z[0] + l[1] * inv_z[1] + l[2] * inv_z[2]);
            let i = y * w + x;
            if z < zbuf[i] {
                zbuf[i] = z;
                out.depth[i] = z as f32;
                out.normals[i] = nf;
                out.shading[i] = shade;
                out.mask.set(x, y, true);
            }
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(side: f64) -> MeshModel {
        MeshModel::from_cuboids("cube", &[([0.0; 3], [side; 3])]).unwrap()
    }

    #[test]
    fn frontal_cube_area_matches_pinhole() {
        let k = default_intrinsics(MASK_SIZE);
        let m = cube(1.0);
        let mask = render_silhouette(&m, &ViewAngles::new(0.0, 0.0), &k).unwrap();
        let d = auto_fit_distance(m.bounding_radius(), &k);
        let side = k.fy * 1.0 / (d - 0.5);
        let expected = side * side;
        let area = mask.count() as f64;
        assert!((area - expected).abs() / expected < 0.02, "{area} vs {expected}");
        let (x0, y0, x1, y1) = mask.bounding_box().unwrap();
        assert_eq!(x1 - x0, y1 - y0);
        assert_eq!((x1 - x0 + 1) * (y1 - y0 + 1), mask.count());
    }

    #[test]
    fn diagonal_view_is_root_two_wide() {
        let mut k = default_intrinsics(MASK_SIZE);
        k.fx = 4096.0;
        k.fy = 4096.0;
        let mask = render_silhouette(&cube(1.0), &ViewAngles::new(45.0, 0.0), &k).unwrap();
        let (x0, y0, x1, y1) = mask.bounding_box().unwrap();
        let ratio = (x1 - x0 + 1) as f64 / (y1 - y0 + 1) as f64;
        assert!((ratio - 2f64.sqrt()).abs() / 2f64.sqrt() < 0.03, "{ratio}");
    }

    #[test]
    fn degenerate_triangle_renders_nothing() {
        let v = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(2.0, 0.0, 0.0)];
        let m = MeshModel::new("line", v, vec![[0, 1, 2]]).unwrap();
        let mask = render_silhouette(&m, &ViewAngles::new(30.0, 20.0), &default_intrinsics(64)).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn empty_mesh_is_an_error() {
        let m = MeshModel::new("none", vec![], vec![]).unwrap();
        assert!(matches!(
            render_silhouette(&m, &ViewAngles::new(0.0, 0.0), &default_intrinsics(64)),
            Err(SilhouetteError::EmptyMesh(_))
        ));
    }

    #[test]
    fn principal_point_shift_keeps_area() {
        let m = cube(1.0);
        let k = default_intrinsics(MASK_SIZE);
        let view = ViewAngles::new(30.0, 20.0);
        let base = render_silhouette(&m, &view, &k).unwrap();
        let mut shifted = k;
        shifted.cx += 9.0;
        shifted.cy -= 5.0;
        let moved = render_silhouette(&m, &view, &shifted).unwrap();
        assert_eq!(base.count(), moved.count());
    }

    #[test]
    fn top_view_covers_footprint() {
        let k = default_intrinsics(MASK_SIZE);
        let m = cube(1.0);
        let mask = render_silhouette(&m, &ViewAngles::new(0.0, 90.0), &k).unwrap();
        let d = auto_fit_distance(m.bounding_radius(), &k);
        // The bottom face, at the far end, is the footprint projection.
        let side = k.fy / (d + 0.5);
        assert!(mask.count() as f64 >= side * side * 0.98);
    }

    #[test]
    fn surface_render_prefers_near_faces() {
        let k = default_intrinsics(64);
        let m = cube(1.0);
        let pose = view_transform(&m.center(), &ViewAngles::new(0.0, 0.0), 10.0);
        let r = render_surface(&m, &pose, &k).unwrap();
        let c = 32 * 64 + 32;
        assert!((r.depth[c] - 9.5).abs() < 1e-4, "{}", r.depth[c]);
        assert!((r.normals[c][2] + 1.0).abs() < 1e-6);
        assert_eq!(r.mask, render_silhouette_at(&m, &pose, &k).unwrap());
        assert!(r.shading[c] > 0.2);
        assert_eq!(r.shading[0], 0.0);
    }
}

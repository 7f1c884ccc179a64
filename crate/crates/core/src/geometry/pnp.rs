use nalgebra::{DMatrix, Matrix3, Matrix4, Matrix6, Point2, Point3, SMatrix, SymmetricEigen, Vector3, Vector6};

use super::{CameraIntrinsics, GeometryError, RigidTransform};

const MIN_POINTS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PnpOptions {
    pub max_iterations: usize,
    /// Stop when the relative cost decrease or the step norm falls below this.
    pub tolerance: f64,
    /// Second-smallest over largest singular value of the DLT system below
    /// which the configuration counts as degenerate.
    pub degeneracy_ratio: f64,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-15,
            degeneracy_ratio: 1e-9,
        }
    }
}

/// Object-to-camera pose from 2D-3D correspondences.
///
/// A normalized DLT gives the initial pose; Levenberg-Marquardt on the pixel
/// reprojection error refines it. Needs at least six non-coplanar points.
pub fn solve_pnp(
    pixels: &[Point2<f64>],
    object_points: &[Point3<f64>],
    k: &CameraIntrinsics,
    options: &PnpOptions,
) -> Result<RigidTransform, GeometryError> {
    if pixels.len() != object_points.len() {
        return Err(GeometryError::CountMismatch {
            points: object_points.len(),
            pixels: pixels.len(),
        });
    }
    if pixels.len() < MIN_POINTS {
        return Err(GeometryError::TooFewPoints {
            need: MIN_POINTS,
            got: pixels.len(),
        });
    }
    for (i, (p, q)) in pixels.iter().zip(object_points).enumerate() {
        if p.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
    }
    let init = dlt(pixels, object_points, k, options.degeneracy_ratio)?;
    refine(init, pixels, object_points, k, options)
}

fn dlt(
    pixels: &[Point2<f64>],
    points: &[Point3<f64>],
    k: &CameraIntrinsics,
    degeneracy_ratio: f64,
) -> Result<RigidTransform, GeometryError> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let spread = points.iter().map(|p| (p.coords - mean).norm()).sum::<f64>() / n;
    if spread <= 0.0 {
        return Err(GeometryError::Degenerate(0.0));
    }
    let scale = 3f64.sqrt() / spread;

    let mut a = DMatrix::<f64>::zeros(2 * points.len(), 12);
    for (i, (px, p)) in pixels.iter().zip(points).enumerate() {
        let x = k.normalize(px);
        let q = (p.coords - mean) * scale;
        let h = [q.x, q.y, q.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = h[j];
            a[(2 * i, 8 + j)] = -x.x * h[j];
            a[(2 * i + 1, 4 + j)] = h[j];
            a[(2 * i + 1, 8 + j)] = -x.y * h[j];
        }
    }
    let ata = SMatrix::<f64, 12, 12>::from_iterator((a.transpose() * &a).iter().copied());
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let sv = |i: usize| eig.eigenvalues[order[i]].max(0.0).sqrt();
    let ratio = sv(1) / sv(11).max(f64::MIN_POSITIVE);
    if !(ratio > degeneracy_ratio) {
        return Err(GeometryError::Degenerate(ratio));
    }
    let v = eig.eigenvectors.column(order[0]);

    // Undo the point normalization: P = P' T.
    let p_norm = nalgebra::Matrix3x4::from_fn(|r, c| v[4 * r + c]);
    let mut t = Matrix4::<f64>::identity() * scale;
    t[(3, 3)] = 1.0;
    for r in 0..3 {
        t[(r, 3)] = -scale * mean[r];
    }
    let mut p = p_norm * t;
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let r = u * vt;
    if r.determinant() < 0.0 {
        return Err(GeometryError::Degenerate(0.0));
    }
    let s = svd.singular_values.mean();
    let tr = p.column(3) / s;
    Ok(RigidTransform {
        rotation: r,
        translation: tr,
    })
}

/// Sum of squared pixel residuals, or `None` if a point falls behind the camera.
fn cost(t: &RigidTransform, pixels: &[Point2<f64>], points: &[Point3<f64>], k: &CameraIntrinsics) -> Option<f64> {
    let mut c = 0.0;
    for (px, p) in pixels.iter().zip(points) {
        let pc = t.apply(p);
        if !(pc.z > 0.0) {
            return None;
        }
        c += (k.project(&pc) - px).norm_squared();
    }
    Some(c)
}

/// Closest rotation in the Frobenius sense; removes accumulated round-off.
fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    svd.u.expect("u") * svd.v_t.expect("v_t")
}

fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    nalgebra::Rotation3::new(*w).into_inner()
}

fn refine(
    init: RigidTransform,
    pixels: &[Point2<f64>],
    points: &[Point3<f64>],
    k: &CameraIntrinsics,
    options: &PnpOptions,
) -> Result<RigidTransform, GeometryError> {
    let n = pixels.len() as f64;
    let mut pose = init;
    let Some(mut current) = cost(&pose, pixels, points, k) else {
        return Err(GeometryError::NotConverged { rms: f64::INFINITY });
    };
    let mut lambda = 1e-3;
    let mut converged = current == 0.0;
    for _ in 0..options.max_iterations {
        if converged {
            break;
        }
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (px, p) in pixels.iter().zip(points) {
            let rp = pose.rotation * p.coords;
            let pc = rp + pose.translation;
            let iz = 1.0 / pc.z;
            let proj = k.project(&Point3::from(pc));
            let res = proj - px;
            // d(u,v)/d(pc)
            let dpi = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * pc.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * pc.y * iz * iz,
            );
            // Left perturbation: d(pc)/d(w) = -[R p]_x, d(pc)/d(t) = I.
            let skew = rp.cross_matrix();
            let mut jp = nalgebra::Matrix3x6::<f64>::zeros();
            jp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew));
            jp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = dpi * jp;
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        let mut accepted = false;
        for _ in 0..20 {
            let mut damped = jtj;
            for d in 0..6 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| -c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vector3::new(step[0], step[1], step[2]);
            let dt = Vector3::new(step[3], step[4], step[5]);
            let rotation = exp_so3(&w) * pose.rotation;
            let candidate = RigidTransform {
                rotation,
                translation: pose.translation + dt,
            };
            match cost(&candidate, pixels, points, k) {
                Some(c) if c <= current => {
                    let decrease = (current - c) / current.max(f64::MIN_POSITIVE);
                    let step_norm = step.norm();
                    pose = candidate;
                    current = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if decrease < options.tolerance || step_norm < options.tolerance || c == 0.0 {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            // No damping level reduces the cost: a local minimum to precision.
            converged = true;
        }
    }
    let rms = (current / n).sqrt();
    if !converged || !rms.is_finite() {
        return Err(GeometryError::NotConverged { rms });
    }
    pose.rotation = nearest_rotation(&pose.rotation);
    Ok(pose)
}

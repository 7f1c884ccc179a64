//! Binary silhouettes of triangle meshes, per-viewpoint mask sets and
//! template-matching retrieval.

mod dmask;
mod matching;
mod obj;
mod raster;

use std::path::Path;

use nalgebra::Point3;
use thiserror::Error;

use crate::geometry::GeometryError;

pub use dmask::{generate_dmasks, DmaskSet};
pub use matching::{ncc, template_match, MatchResult, DEFAULT_SCALES};
pub use obj::{parse_obj, read_obj, write_obj};
pub use raster::{
    auto_fit_distance, default_intrinsics, render_silhouette, render_silhouette_at, render_surface, view_transform,
    SurfaceRender, FRAME_FILL, LIGHT_DIR, MASK_SIZE,
};

#[derive(Debug, Error)]
pub enum SilhouetteError {
    #[error("mesh {0:?} has no triangles")]
    EmptyMesh(String),
    #[error("mesh {id:?}: face {face} references vertex {index} of {count}")]
    BadFaceIndex {
        id: String,
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("mesh {0:?} has a non-finite vertex")]
    NonFiniteVertex(String),
    #[error("mesh {0:?} needs at least 4 non-coplanar vertices")]
    Flat(String),
    #[error("mask size mismatch: {a:?} vs {b:?}")]
    DimMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("query mask is empty")]
    EmptyQuery,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("no scale lets query and gallery entry {0} overlap")]
    NoComparableScale(usize),
    #[error("invalid scale {0}")]
    InvalidScale(f64),
    #[error("render at azimuth {az}, elevation {el}: {source}")]
    View {
        az: f64,
        el: f64,
        #[source]
        source: Box<SilhouetteError>,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("OBJ line {line}: {msg}")]
    Obj { line: usize, msg: String },
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Triangle mesh in its object frame, meters.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshModel {
    pub id: String,
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
}

impl MeshModel {
    /// Checks face indices and vertex finiteness. Use [`MeshModel::is_solid`]
    /// for the stronger volume check.
    pub fn new(id: impl Into<String>, vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self, SilhouetteError> {
        let id = id.into();
        if vertices.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(SilhouetteError::NonFiniteVertex(id));
        }
        for (face, f) in faces.iter().enumerate() {
            if let Some(&index) = f.iter().find(|&&i| i >= vertices.len()) {
                return Err(SilhouetteError::BadFaceIndex {
                    id,
                    face,
                    index,
                    count: vertices.len(),
                });
            }
        }
        Ok(Self { id, vertices, faces })
    }

    /// Union of axis-aligned boxes given as `(center, size)`, each closed
    /// with 12 outward-wound triangles. Overlapping boxes are not merged.
    pub fn from_cuboids(id: impl Into<String>, boxes: &[([f64; 3], [f64; 3])]) -> Result<Self, SilhouetteError> {
        // Corner index bits: 1 = -x, 2 = -y, 4 = -z.
        const QUADS: [[usize; 4]; 6] = [[0, 2, 6, 4], [1, 5, 7, 3], [0, 4, 5, 1], [2, 3, 7, 6], [0, 1, 3, 2], [4, 6, 7, 5]];
        let mut vertices = Vec::with_capacity(8 * boxes.len());
        let mut faces = Vec::with_capacity(12 * boxes.len());
        for (c, d) in boxes {
            let base = vertices.len();
            for s in crate::geometry::CORNER_SIGNS {
                vertices.push(Point3::new(c[0] + s[0] * d[0] / 2.0, c[1] + s[1] * d[1] / 2.0, c[2] + s[2] * d[2] / 2.0));
            }
            for q in QUADS {
                faces.push([base + q[0], base + q[1], base + q[2]]);
                faces.push([base + q[0], base + q[2], base + q[3]]);
            }
        }
        Self::new(id, vertices, faces)
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Whether the vertices span a volume (four non-coplanar points exist).
    pub fn is_solid(&self) -> bool {
        let v = &self.vertices;
        if v.len() < 4 {
            return false;
        }
        let scale = self.bounding_radius().max(f64::MIN_POSITIVE);
        let tol = 1e-9 * scale * scale * scale;
        let a = v[0];
        let Some(b) = v.iter().find(|p| (*p - a).norm() > 1e-9 * scale) else {
            return false;
        };
        let ab = b - a;
        let Some(c) = v.iter().find(|p| ab.cross(&(*p - a)).norm() > 1e-9 * scale * scale) else {
            return false;
        };
        let n = ab.cross(&(c - a));
        v.iter().any(|p| n.dot(&(p - a)).abs() > tol)
    }

    /// Center of the axis-aligned bounding box.
    pub fn center(&self) -> Point3<f64> {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for p in &self.vertices {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        if self.vertices.is_empty() {
            return Point3::origin();
        }
        nalgebra::center(&lo, &hi)
    }

    /// Largest vertex distance from [`MeshModel::center`].
    pub fn bounding_radius(&self) -> f64 {
        let c = self.center();
        self.vertices.iter().map(|p| (p - c).norm()).fold(0.0, f64::max)
    }
}

/// Row-major binary image, bit-packed into 64-bit words per row.
/// Bits past `width` in the last word of a row are always zero.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, {} on)", self.width, self.height, self.count())
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        let words_per_row = width.div_ceil(64);
        Self {
            width,
            height,
            words_per_row,
            bits: vec![0; words_per_row * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.bits[y * self.words_per_row + x / 64] >> (x % 64) & 1 == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        assert!(x < self.width && y < self.height, "pixel ({x}, {y}) outside mask");
        let w = &mut self.bits[y * self.words_per_row + x / 64];
        if on {
            *w |= 1 << (x % 64);
        } else {
            *w &= !(1 << (x % 64));
        }
    }

    /// Words of row `y`, least significant bit is the leftmost pixel.
    pub fn row_words(&self, y: usize) -> &[u64] {
        &self.bits[y * self.words_per_row..(y + 1) * self.words_per_row]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    /// Left-right mirror.
    pub fn mirror_horizontal(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn complement(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| !self.get(x, y))
    }

    /// Nearest-neighbour resampling to `width x height`.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let src_x: Vec<usize> = (0..width)
            .map(|x| (((x as f64 + 0.5) * sx) as usize).min(self.width - 1))
            .collect();
        let mut out = Mask::new(width, height);
        for y in 0..height {
            let yy = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            for (x, &xx) in src_x.iter().enumerate() {
                if self.get(xx, yy) {
                    out.set(x, y, true);
                }
            }
        }
        out
    }

    /// Count of pixels set in both masks.
    pub fn intersection_count(&self, other: &Mask) -> Result<usize, SilhouetteError> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).map(|(a, b)| (a & b).count_ones() as usize).sum())
    }

    fn check_dims(&self, other: &Mask) -> Result<(), SilhouetteError> {
        if self.dims() != other.dims() {
            return Err(SilhouetteError::DimMismatch {
                a: self.dims(),
                b: other.dims(),
            });
        }
        Ok(())
    }

    /// Fraction of pixels where the two masks differ.
    pub fn disagreement(&self, other: &Mask) -> Result<f64, SilhouetteError> {
        self.check_dims(other)?;
        let diff: usize = self.bits.iter().zip(&other.bits).map(|(a, b)| (a ^ b).count_ones() as usize).sum();
        Ok(diff as f64 / (self.width * self.height).max(1) as f64)
    }

    /// Bounding box of foreground pixels as `(x0, y0, x1, y1)`, inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    pub fn to_gray(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    /// Foreground is any value of at least 128.
    pub fn from_gray(img: &image::GrayImage) -> Mask {
        Mask::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] >= 128
        })
    }

    /// Writes a binary PGM (P5, maxval 255).
    pub fn write_pgm(&self, path: &Path) -> Result<(), SilhouetteError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let encoder = image::codecs::pnm::PnmEncoder::new(file)
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary));
        self.to_gray().write_with_encoder(encoder)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Mask, SilhouetteError> {
        let img = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()?
            .into_luma8();
        Ok(Mask::from_gray(&img))
    }
}

/// Intersection over union; 0 when both masks are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, SilhouetteError> {
    a.check_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y).count_ones() as usize;
        union += (x | y).count_ones() as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

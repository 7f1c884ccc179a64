use super::{Mask, SilhouetteError};

pub const DEFAULT_SCALES: [f64; 3] = [0.8, 1.0, 1.25];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchResult {
    pub index: usize,
    /// Best normalized cross-correlation, in `[-1, 1]`.
    pub score: f64,
    /// Query scale that produced the score.
    pub scale: f64,
}

/// Best gallery entry for `query` under normalized cross-correlation,
/// maximized over query scales and integer alignments.
///
/// At each scale the query is resampled (nearest neighbour) and the smaller
/// of the two images slides over every position inside the larger one.
/// Windows with constant content score 0. Ties keep the lower index.
pub fn template_match(query: &Mask, gallery: &[Mask], scales: &[f64]) -> Result<MatchResult, SilhouetteError> {
    if query.is_empty() {
        return Err(SilhouetteError::EmptyQuery);
    }
    if gallery.is_empty() {
        return Err(SilhouetteError::EmptyGallery);
    }
    let mut scaled = Vec::with_capacity(scales.len());
    for &s in scales {
        if !(s > 0.0 && s.is_finite()) {
            return Err(SilhouetteError::InvalidScale(s));
        }
        let w = (query.width() as f64 * s).round() as usize;
        let h = (query.height() as f64 * s).round() as usize;
        if w == 0 || h == 0 {
            return Err(SilhouetteError::InvalidScale(s));
        }
        let q = if (w, h) == query.dims() { query.clone() } else { query.resize_nearest(w, h) };
        scaled.push((s, q));
    }
    let mut best: Option<MatchResult> = None;
    for (index, g) in gallery.iter().enumerate() {
        let mut entry: Option<(f64, f64)> = None;
        for (s, q) in &scaled {
            if let Some(score) = ncc(q, g) {
                if entry.is_none_or(|(e, _)| score > e) {
                    entry = Some((score, *s));
                }
            }
        }
        let (score, scale) = entry.ok_or(SilhouetteError::NoComparableScale(index))?;
        if best.is_none_or(|b| score > b.score) {
            best = Some(MatchResult { index, score, scale });
        }
    }
    Ok(best.expect("gallery is non-empty"))
}

/// Maximum NCC over all placements of the smaller mask inside the larger.
/// `None` when neither fits inside the other.
pub fn ncc(a: &Mask, b: &Mask) -> Option<f64> {
    if a.width() <= b.width() && a.height() <= b.height() {
        Some(slide(a, b))
    } else if b.width() <= a.width() && b.height() <= a.height() {
        Some(slide(b, a))
    } else {
        None
    }
}

fn integral(m: &Mask) -> Vec<u32> {
    let (w, h) = m.dims();
    let mut s = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0;
        for x in 0..w {
            row += u32::from(m.get(x, y));
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// 64 bits of `row` starting at bit `start`.
fn bits_at(row: &[u64], start: usize) -> u64 {
    let lo = start / 64;
    let sh = start % 64;
    let mut w = row.get(lo).copied().unwrap_or(0) >> sh;
    if sh > 0 {
        if let Some(&next) = row.get(lo + 1) {
            w |= next << (64 - sh);
        }
    }
    w
}

fn slide(small: &Mask, large: &Mask) -> f64 {
    let (ws, hs) = small.dims();
    let (wl, hl) = large.dims();
    let n = (ws * hs) as f64;
    let sa = small.count() as f64;
    let var_a = n * sa - sa * sa;
    let sums = integral(large);
    let stride = wl + 1;
    let mut best = f64::NEG_INFINITY;
    for dy in 0..=hl - hs {
        for dx in 0..=wl - ws {
            let sb = (sums[(dy + hs) * stride + dx + ws] + sums[dy * stride + dx]
                - sums[dy * stride + dx + ws]
                - sums[(dy + hs) * stride + dx]) as f64;
            let var_b = n * sb - sb * sb;
            let score = if var_a <= 0.0 || var_b <= 0.0 {
                0.0
            } else {
                let mut cross = 0u32;
                for y in 0..hs {
                    let lrow = large.row_words(dy + y);
                    for (j, &sw) in small.row_words(y).iter().enumerate() {
                        cross += (sw & bits_at(lrow, dx + 64 * j)).count_ones();
                    }
                }
                ((n * cross as f64 - sa * sb) / (var_a * var_b).sqrt()).clamp(-1.0, 1.0)
            };
            if score > best {
                best = score;
            }
        }
    }
    best
}

//! Skin classification, morphological cleanup, connected components and
//! hand region-of-interest extraction.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::imaging::{rgb_to_chroma, BinaryMask, Image, ImageError};

#[derive(Debug, Error, PartialEq)]
pub enum SegmentationError {
    #[error(transparent)]
    Image(#[from] ImageError),
    /// No component large enough to be a hand.
    #[error("no hand in frame")]
    NoHand,
    #[error("need at least {needed} skin samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid skin model: {0}")]
    InvalidModel(String),
    #[error("skin model file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Box classifier in normalized rg chromaticity, optionally gated on
/// channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinModel {
    pub r_lo: f64,
    pub r_hi: f64,
    pub g_lo: f64,
    pub g_hi: f64,
    /// Require R > G > B.
    pub require_order: bool,
    /// Minimum R - G, in samples; only checked with `require_order`.
    pub min_r_minus_g: i32,
}

impl Default for SkinModel {
    fn default() -> Self {
        Self { r_lo: 0.36, r_hi: 0.52, g_lo: 0.26, g_hi: 0.36, require_order: true, min_r_minus_g: 12 }
    }
}

impl SkinModel {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        let ok = |lo: f64, hi: f64| (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo < hi;
        if !ok(self.r_lo, self.r_hi) || !ok(self.g_lo, self.g_hi) {
            return Err(SegmentationError::InvalidModel(format!(
                "bounds r [{}, {}] g [{}, {}]",
                self.r_lo, self.r_hi, self.g_lo, self.g_hi
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn is_skin(&self, rgb: [u8; 3]) -> bool {
        let [r, g, b] = rgb;
        if self.require_order && !(r > g && g > b && r as i32 - g as i32 >= self.min_r_minus_g) {
            return false;
        }
        let (rn, gn) = rgb_to_chroma(r, g, b);
        rn >= self.r_lo && rn <= self.r_hi && gn >= self.g_lo && gn <= self.g_hi
    }
}

/// Line-oriented text form:
///
/// ```text
/// skinmodel 1
/// r 0.36 0.52
/// g 0.26 0.36
/// order 1
/// rminusg 12
/// ```
impl fmt::Display for SkinModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "skinmodel 1")?;
        writeln!(f, "r {} {}", self.r_lo, self.r_hi)?;
        writeln!(f, "g {} {}", self.g_lo, self.g_hi)?;
        writeln!(f, "order {}", u8::from(self.require_order))?;
        writeln!(f, "rminusg {}", self.min_r_minus_g)
    }
}

impl FromStr for SkinModel {
    type Err = SegmentationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lines: Vec<&str> = s.lines().collect();
        let err = |line: usize, msg: &str| SegmentationError::Parse { line, msg: msg.to_string() };
        if lines.len() != 5 {
            return Err(err(lines.len().min(5) + 1, "expected exactly 5 lines"));
        }
        let fields = |idx: usize, key: &str, n: usize| -> Result<Vec<&str>, SegmentationError> {
            let toks: Vec<&str> = lines[idx].split(' ').collect();
            if toks.len() != n + 1 || toks[0] != key {
                return Err(err(idx + 1, &format!("expected `{key}` with {n} values")));
            }
            Ok(toks[1..].to_vec())
        };
        let float = |idx: usize, t: &str| -> Result<f64, SegmentationError> {
            t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(idx + 1, &format!("bad number {t:?}")))
        };
        if lines[0] != "skinmodel 1" {
            return Err(err(1, "expected `skinmodel 1`"));
        }
        let r = fields(1, "r", 2)?;
        let g = fields(2, "g", 2)?;
        let order = fields(3, "order", 1)?;
        let rmg = fields(4, "rminusg", 1)?;
        let require_order = match order[0] {
            "0" => false,
            "1" => true,
            _ => return Err(err(4, "order must be 0 or 1")),
        };
        let min_r_minus_g = rmg[0].parse().map_err(|_| err(5, "bad integer"))?;
        let model = SkinModel {
            r_lo: float(1, r[0])?,
            r_hi: float(1, r[1])?,
            g_lo: float(2, g[0])?,
            g_hi: float(2, g[1])?,
            require_order,
            min_r_minus_g,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Per-pixel skin decision.
pub fn classify_skin(model: &SkinModel, img: &Image) -> Result<BinaryMask, SegmentationError> {
    if !img.is_rgb() {
        return Err(ImageError::WrongChannels { expected: 3, actual: img.channels() }.into());
    }
    let bits = img.data().chunks_exact(3).map(|p| model.is_skin([p[0], p[1], p[2]])).collect();
    Ok(BinaryMask::from_bits(img.width(), img.height(), bits)?)
}

/// 1-D sliding window over a row or column: `erode` keeps a pixel iff the
/// whole in-bounds window is set and the window does not leave the line;
/// dilation keeps it iff any in-bounds window pixel is set.
fn window_pass(line: &[bool], radius: usize, erode: bool, out: &mut [bool]) {
    let n = line.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0usize);
    for &b in line {
        prefix.push(prefix.last().unwrap() + usize::from(b));
    }
    for (i, o) in out.iter_mut().enumerate() {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(n - 1);
        let count = prefix[hi + 1] - prefix[lo];
        *o = if erode {
            // Out-of-bounds neighbours are background.
            i >= radius && i + radius < n && count == 2 * radius + 1
        } else {
            count > 0
        };
    }
}

fn separable(mask: &BinaryMask, radius: usize, erode: bool) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut rows = vec![false; w * h];
    for y in 0..h {
        window_pass(&mask.bits()[y * w..(y + 1) * w], radius, erode, &mut rows[y * w..(y + 1) * w]);
    }
    let mut out = vec![false; w * h];
    let mut col = vec![false; h];
    let mut col_out = vec![false; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        window_pass(&col, radius, erode, &mut col_out);
        for y in 0..h {
            out[y * w + x] = col_out[y];
        }
    }
    BinaryMask::from_bits(w, h, out).expect("same geometry")
}

/// Erosion with a (2r+1)² square; out-of-bounds counts as background.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    separable(mask, radius, true)
}

/// Dilation with a (2r+1)² square.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    separable(mask, radius, false)
}

/// Morphological opening (erosion then dilation).
pub fn morph_open(mask: &BinaryMask, radius: usize) -> BinaryMask {
    assert!(radius >= 1, "opening radius must be >= 1");
    dilate(&erode(mask, radius), radius)
}

/// One 8-connected component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub label: u32,
    pub area: usize,
    /// Inclusive `(x_min, y_min, x_max, y_max)`.
    pub bbox: (usize, usize, usize, usize),
}

/// Label raster (0 = background) plus per-label statistics; `regions[i]`
/// has label `i + 1`.
#[derive(Debug, Clone)]
pub struct Labeling {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub regions: Vec<Region>,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // Keep the older (smaller) provisional label as root.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labeling with 8-connectivity. Final labels are dense
/// from 1 in raster order of first encounter.
pub fn connected_components(mask: &BinaryMask) -> Labeling {
    let (w, h) = (mask.width(), mask.height());
    let mut prov = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            // Already-visited 8-neighbours: W, NW, N, NE.
            let mut neighbours = [0u32; 4];
            let mut k = 0;
            if x > 0 && prov[y * w + x - 1] != 0 {
                neighbours[k] = prov[y * w + x - 1];
                k += 1;
            }
            if y > 0 {
                let up = (y - 1) * w;
                if x > 0 && prov[up + x - 1] != 0 {
                    neighbours[k] = prov[up + x - 1];
                    k += 1;
                }
                if prov[up + x] != 0 {
                    neighbours[k] = prov[up + x];
                    k += 1;
                }
                if x + 1 < w && prov[up + x + 1] != 0 {
                    neighbours[k] = prov[up + x + 1];
                    k += 1;
                }
            }
            let label = if k == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let first = neighbours[0];
                for &n in &neighbours[1..k] {
                    union(&mut parent, first, n);
                }
                first
            };
            prov[y * w + x] = label;
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut regions: Vec<Region> = Vec::new();
    let mut labels = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = prov[y * w + x];
            if p == 0 {
                continue;
            }
            let root = find(&mut parent, p) as usize;
            if remap[root] == 0 {
                regions.push(Region { label: regions.len() as u32 + 1, area: 0, bbox: (x, y, x, y) });
                remap[root] = regions.len() as u32;
            }
            let l = remap[root];
            labels[y * w + x] = l;
            let r = &mut regions[l as usize - 1];
            r.area += 1;
            r.bbox.0 = r.bbox.0.min(x);
            r.bbox.1 = r.bbox.1.min(y);
            r.bbox.2 = r.bbox.2.max(x);
            r.bbox.3 = r.bbox.3.max(y);
        }
    }
    Labeling { width: w, height: h, labels, regions }
}

/// The largest component, cropped to its bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub mask: BinaryMask,
    /// Inclusive `(x_min, y_min, x_max, y_max)` in frame coordinates.
    pub bbox: (usize, usize, usize, usize),
    pub area: usize,
}

/// Keeps only the largest component (ties: smallest label).
pub fn extract_roi(mask: &BinaryMask, min_area: usize) -> Result<Roi, SegmentationError> {
    let labeling = connected_components(mask);
    let best = labeling.regions.iter().copied().reduce(|best, r| if r.area > best.area { r } else { best });
    let best = match best {
        Some(r) if r.area >= min_area.max(1) => r,
        _ => return Err(SegmentationError::NoHand),
    };
    let (x0, y0, x1, y1) = best.bbox;
    let mut out = BinaryMask::new(x1 - x0 + 1, y1 - y0 + 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if labeling.labels[y * labeling.width + x] == best.label {
                out.set(x - x0, y - y0, true);
            }
        }
    }
    Ok(Roi { mask: out, bbox: best.bbox, area: best.area })
}

/// Minimum hand area for a `width`×`height` frame: round(0.0013·w·h).
pub fn default_min_area(width: usize, height: usize) -> usize {
    ((0.0013 * (width * height) as f64).round() as usize).max(1)
}

/// Sets every background pixel that is not 4-connected to the outside of
/// the raster.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    let seed = |x: usize, y: usize, outside: &mut Vec<bool>, q: &mut VecDeque<(usize, usize)>| {
        let i = y * w + x;
        if !mask.bits()[i] && !outside[i] {
            outside[i] = true;
            q.push_back((x, y));
        }
    };
    for x in 0..w {
        seed(x, 0, &mut outside, &mut queue);
        seed(x, h - 1, &mut outside, &mut queue);
    }
    for y in 0..h {
        seed(0, y, &mut outside, &mut queue);
        seed(w - 1, y, &mut outside, &mut queue);
    }
    while let Some((x, y)) = queue.pop_front() {
        if x > 0 {
            seed(x - 1, y, &mut outside, &mut queue);
        }
        if x + 1 < w {
            seed(x + 1, y, &mut outside, &mut queue);
        }
        if y > 0 {
            seed(x, y - 1, &mut outside, &mut queue);
        }
        if y + 1 < h {
            seed(x, y + 1, &mut outside, &mut queue);
        }
    }
    let bits = outside.iter().map(|&o| !o).collect();
    BinaryMask::from_bits(w, h, bits).expect("same geometry")
}

/// Chroma half-width added to each side of a fitted box.
pub const FIT_EPSILON: f64 = 0.005;

/// Fits a chroma box to the `[q, 1 - q]` empirical quantiles of skin samples.
pub fn fit_skin_model(skin_pixels: &[[u8; 3]], quantile: f64) -> Result<SkinModel, SegmentationError> {
    const MIN_SAMPLES: usize = 10;
    if skin_pixels.len() < MIN_SAMPLES {
        return Err(SegmentationError::TooFewSamples { needed: MIN_SAMPLES, got: skin_pixels.len() });
    }
    if !(quantile > 0.0 && quantile <= 0.5) {
        return Err(SegmentationError::InvalidModel(format!("quantile {quantile} outside (0, 0.5]")));
    }
    let (mut rs, mut gs): (Vec<f64>, Vec<f64>) = skin_pixels.iter().map(|p| rgb_to_chroma(p[0], p[1], p[2])).unzip();
    rs.sort_by(f64::total_cmp);
    gs.sort_by(f64::total_cmp);
    let last = (rs.len() - 1) as f64;
    let lo_idx = (quantile * last).floor() as usize;
    let hi_idx = ((1.0 - quantile) * last).ceil() as usize;
    let model = SkinModel {
        r_lo: (rs[lo_idx] - FIT_EPSILON).max(0.0),
        r_hi: (rs[hi_idx] + FIT_EPSILON).min(1.0),
        g_lo: (gs[lo_idx] - FIT_EPSILON).max(0.0),
        g_hi: (gs[hi_idx] + FIT_EPSILON).min(1.0),
        require_order: true,
        min_r_minus_g: 0,
    };
    model.validate()?;
    Ok(model)
}

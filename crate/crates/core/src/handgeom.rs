//! Hand contour, palm frame and fingertip detection.
//!
//! Fingertips are peaks of the contour's radial distance from the mask
//! centroid. A peak only counts when it reaches `ratio` palm radii, so a
//! closed fist (a roughly round blob) yields no tips.

use thiserror::Error;

use crate::imaging::BinaryMask;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("mask has no set pixels")]
    EmptyMask,
    /// Every set pixel touches the raster border, so the chamfer radius is 0.
    #[error("mask too thin to estimate a palm radius")]
    Degenerate,
}

/// Closed boundary; the successor of the last point is the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contour {
    pub points: Vec<(i64, i64)>,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fingertip {
    pub pos: (i64, i64),
    /// Distance from the centroid, pixels.
    pub r: f64,
    /// Degrees in [0, 360) from the +x axis, y pointing down.
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandGeometry {
    pub centroid: (f64, f64),
    pub palm_radius: f64,
    pub fingertips: Vec<Fingertip>,
}

impl HandGeometry {
    /// Same geometry with every position moved by `(dx, dy)`.
    pub fn translated(&self, dx: i64, dy: i64) -> HandGeometry {
        HandGeometry {
            centroid: (self.centroid.0 + dx as f64, self.centroid.1 + dy as f64),
            palm_radius: self.palm_radius,
            fingertips: self.fingertips.iter().map(|t| Fingertip { pos: (t.pos.0 + dx, t.pos.1 + dy), ..*t }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingertipParams {
    /// Circular moving-average window over the radial profile (odd).
    pub smooth_window: usize,
    /// A peak must dominate this many contour indices on each side.
    pub peak_half_window: usize,
    /// Minimum smoothed distance, in palm radii.
    pub ratio: f64,
    /// Peaks closer than this angle to a higher peak are suppressed.
    pub nms_degrees: f64,
    pub max_tips: usize,
    /// Contour indices on each side of a peak used to fit the tip circle.
    pub tip_fit_half_window: usize,
}

impl Default for FingertipParams {
    fn default() -> Self {
        Self {
            smooth_window: 7,
            peak_half_window: 5,
            ratio: 2.0,
            nms_degrees: 20.0,
            max_tips: 5,
            tip_fit_half_window: 5,
        }
    }
}

// Clockwise on screen (y down), starting west.
const MOORE: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

fn direction_of(from: (i64, i64), to: (i64, i64)) -> usize {
    let d = (to.0 - from.0, to.1 - from.1);
    MOORE.iter().position(|&m| m == d).expect("backtrack must be a Moore neighbour")
}

/// Moore-neighbour boundary trace, clockwise from the topmost-then-leftmost
/// set pixel, stopped by Jacob's criterion (re-entering a pixel the same way
/// it was first entered). Out-of-bounds pixels are background.
pub fn trace_contour(mask: &BinaryMask) -> Result<Contour, GeometryError> {
    let start = mask.iter_set().next().ok_or(GeometryError::EmptyMask)?;
    let start = (start.0 as i64, start.1 as i64);
    let set = |p: (i64, i64)| mask.get_signed(p.0, p.1);

    // Scan clockwise around `c` beginning just after `b`; returns the first
    // set neighbour and the background pixel examined right before it.
    let step = |c: (i64, i64), b: (i64, i64)| -> Option<((i64, i64), (i64, i64))> {
        let d0 = direction_of(c, b);
        let mut prev = b;
        for k in 1..=8 {
            let m = MOORE[(d0 + k) % 8];
            let p = (c.0 + m.0, c.1 + m.1);
            if set(p) {
                return Some((p, prev));
            }
            prev = p;
        }
        None
    };

    let initial = (start, (start.0 - 1, start.1));
    let Some(first) = step(initial.0, initial.1) else {
        return Ok(Contour { points: vec![start] });
    };
    let mut points = vec![start];
    let mut state = first;
    // Jacob's criterion on the initial entry; the second-state check covers
    // the rare shapes whose cycle never re-enters the start from the west.
    let limit = 4 * mask.width() * mask.height() + 8;
    for _ in 0..limit {
        if state == initial {
            return Ok(Contour { points });
        }
        points.push(state.0);
        let next = step(state.0, state.1).expect("traced pixel has a set neighbour");
        if next == first {
            if points.last() == Some(&start) && points.len() > 1 {
                points.pop();
            }
            return Ok(Contour { points });
        }
        state = next;
    }
    unreachable!("Moore trace failed to close");
}

/// Centroid of the set pixels and palm radius from a (3,4) chamfer
/// transform: the largest distance-to-background divided by 3. Pixels on
/// the raster border count as background.
pub fn centroid_and_radius(mask: &BinaryMask) -> Result<((f64, f64), f64), GeometryError> {
    let (w, h) = (mask.width(), mask.height());
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for (x, y) in mask.iter_set() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    if n == 0 {
        return Err(GeometryError::EmptyMask);
    }
    let centroid = (sx / n as f64, sy / n as f64);
    let dist = chamfer_34(mask);
    let max = dist.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(GeometryError::Degenerate);
    }
    debug_assert_eq!(dist.len(), w * h);
    Ok((centroid, max as f64 / 3.0))
}

/// Two-pass (3,4) chamfer distance to background; border pixels are 0.
pub fn chamfer_34(mask: &BinaryMask) -> Vec<u32> {
    let (w, h) = (mask.width(), mask.height());
    const INF: u32 = u32::MAX / 2;
    let mut d = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let border = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            if mask.get(x, y) && !border {
                d[y * w + x] = INF;
            }
        }
    }
    if w < 3 || h < 3 {
        return d;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if d[i] == 0 {
                continue;
            }
            let v = d[i].min(d[i - 1] + 3).min(d[i - w - 1] + 4).min(d[i - w] + 3).min(d[i - w + 1] + 4);
            d[i] = v;
        }
    }
    for y in (1..h - 1).rev() {
        for x in (1..w - 1).rev() {
            let i = y * w + x;
            if d[i] == 0 {
                continue;
            }
            let v = d[i].min(d[i + 1] + 3).min(d[i + w + 1] + 4).min(d[i + w] + 3).min(d[i + w - 1] + 4);
            d[i] = v;
        }
    }
    d
}

fn polar(p: (f64, f64), centroid: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (p.0 - centroid.0, p.1 - centroid.1);
    let mut theta = dy.atan2(dx).to_degrees();
    if theta < 0.0 {
        theta += 360.0;
    }
    if theta >= 360.0 {
        theta -= 360.0;
    }
    (dx.hypot(dy), theta)
}

fn angular_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Algebraic (Kasa) least-squares circle through `pts`; returns the center.
fn fit_circle(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut suu, mut suv, mut svv, mut suz, mut svz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in pts {
        let (u, v) = (x - mx, y - my);
        let z = u * u + v * v;
        suu += u * u;
        suv += u * v;
        svv += v * v;
        suz += u * z;
        svz += v * z;
    }
    // In centred coordinates the normal equations reduce to a 2x2 system
    // for the centre (a, b): [suu suv; suv svv] [a b]^T = [suz svz]^T / 2.
    let det = suu * svv - suv * suv;
    if det.abs() < 1e-9 * (suu * svv).max(1.0) {
        return None;
    }
    let a = (suz * svv - svz * suv) / (2.0 * det);
    let b = (svz * suu - suz * suv) / (2.0 * det);
    let c = (mx + a, my + b);
    (c.0.is_finite() && c.1.is_finite()).then_some(c)
}

/// Radial-distance peak detector. Returns at most `max_tips` tips sorted by
/// ascending theta.
pub fn detect_fingertips(
    contour: &Contour,
    centroid: (f64, f64),
    palm_radius: f64,
    params: &FingertipParams,
) -> Vec<Fingertip> {
    let n = contour.len();
    if n == 0 || palm_radius <= 0.0 {
        return Vec::new();
    }
    let at = |i: i64| contour.points[i.rem_euclid(n as i64) as usize];
    let dist: Vec<f64> =
        contour.points.iter().map(|&(x, y)| (x as f64 - centroid.0).hypot(y as f64 - centroid.1)).collect();
    let half = (params.smooth_window / 2) as i64;
    let smooth: Vec<f64> = (0..n as i64)
        .map(|i| {
            let s: f64 = (-half..=half).map(|k| dist[(i + k).rem_euclid(n as i64) as usize]).sum();
            s / (2 * half + 1) as f64
        })
        .collect();
    let threshold = params.ratio * palm_radius;
    let hw = params.peak_half_window as i64;

    // Strictly above everything before, at least everything after: on a
    // flat-topped peak the first sample of the plateau wins.
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            let v = smooth[i];
            v >= threshold
                && (1..=hw).all(|k| {
                    let before = (i as i64 - k).rem_euclid(n as i64) as usize;
                    let after = (i as i64 + k).rem_euclid(n as i64) as usize;
                    (before == i || v > smooth[before]) && (after == i || v >= smooth[after])
                })
        })
        .collect();
    candidates.sort_by(|&a, &b| smooth[b].total_cmp(&smooth[a]).then(a.cmp(&b)));

    let fit_hw = params.tip_fit_half_window as i64;
    let mut tips: Vec<Fingertip> = Vec::new();
    for i in candidates {
        let peak = contour.points[i];
        let arc: Vec<(f64, f64)> = (-fit_hw..=fit_hw)
            .map(|k| {
                let p = at(i as i64 + k);
                (p.0 as f64, p.1 as f64)
            })
            .collect();
        // The tip centre sits about half a finger width inside the boundary;
        // reject fits that wander further than a third of the palm radius.
        let pos = fit_circle(&arc)
            .filter(|c| (c.0 - peak.0 as f64).hypot(c.1 - peak.1 as f64) <= palm_radius / 3.0)
            .map(|c| (c.0.round() as i64, c.1.round() as i64))
            .unwrap_or(peak);
        let (r, theta) = polar((pos.0 as f64, pos.1 as f64), centroid);
        if r < threshold {
            continue;
        }
        if tips.iter().any(|t| angular_gap(t.theta, theta) < params.nms_degrees) {
            continue;
        }
        tips.push(Fingertip { pos, r, theta });
        if tips.len() == params.max_tips {
            break;
        }
    }
    tips.sort_by(|a, b| a.theta.total_cmp(&b.theta));
    tips
}

/// Full geometry of a single-component hand mask. Pass a mask with at
/// least one pixel of background margin (see [`BinaryMask::padded`]).
pub fn analyze_hand(mask: &BinaryMask, params: &FingertipParams) -> Result<HandGeometry, GeometryError> {
    let (centroid, palm_radius) = centroid_and_radius(mask)?;
    let contour = trace_contour(mask)?;
    let fingertips = detect_fingertips(&contour, centroid, palm_radius, params);
    Ok(HandGeometry { centroid, palm_radius, fingertips })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                if (x as f64 - cx).hypot(y as f64 - cy) <= r {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    #[test]
    fn trace_single_pixel() {
        let mut m = BinaryMask::new(3, 3);
        m.set(1, 1, true);
        assert_eq!(trace_contour(&m).unwrap().points, vec![(1, 1)]);
    }

    #[test]
    fn trace_squares() {
        let m = BinaryMask::from_ascii(&["##", "##"]);
        assert_eq!(trace_contour(&m).unwrap().points, vec![(0, 0), (1, 0), (1, 1), (0, 1)]);

        let m = BinaryMask::from_ascii(&["###", "###", "###"]);
        assert_eq!(
            trace_contour(&m).unwrap().points,
            vec![(0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (1, 2), (0, 2), (0, 1)]
        );
    }

    #[test]
    fn trace_thin_line_revisits_pixels() {
        let m = BinaryMask::from_ascii(&["....", ".###", "...."]);
        assert_eq!(trace_contour(&m).unwrap().points, vec![(1, 1), (2, 1), (3, 1), (2, 1)]);
    }

    #[test]
    fn trace_empty() {
        assert_eq!(trace_contour(&BinaryMask::new(2, 2)), Err(GeometryError::EmptyMask));
    }

    #[test]
    fn trace_points_are_moore_adjacent() {
        let m = BinaryMask::from_ascii(&[
            "..........",
            "..####....",
            ".######.#.",
            ".##..####.",
            ".##...###.",
            "..#....#..",
        ]);
        let c = trace_contour(&m).unwrap();
        for (i, &p) in c.points.iter().enumerate() {
            let q = c.points[(i + 1) % c.len()];
            assert!((p.0 - q.0).abs() <= 1 && (p.1 - q.1).abs() <= 1 && p != q);
        }
    }

    #[test]
    fn radius_of_small_square() {
        let m = BinaryMask::from_ascii(&["###.", "###.", "###.", "...."]);
        let (c, r) = centroid_and_radius(&m).unwrap();
        assert_eq!(c, (1.0, 1.0));
        assert_eq!(r, 1.0);
    }

    #[test]
    fn radius_of_disc() {
        let m = disc(101, 101, 50.0, 50.0, 10.0);
        let (c, r) = centroid_and_radius(&m).unwrap();
        assert!((c.0 - 50.0).abs() <= 0.5 && (c.1 - 50.0).abs() <= 0.5);
        assert!((9.0..=11.0).contains(&r), "radius {r}");
    }

    #[test]
    fn radius_errors() {
        assert_eq!(centroid_and_radius(&BinaryMask::new(3, 3)), Err(GeometryError::EmptyMask));
        let edge = BinaryMask::from_ascii(&["##"]);
        assert_eq!(centroid_and_radius(&edge), Err(GeometryError::Degenerate));
    }

    #[test]
    fn chamfer_matches_hand_computation() {
        let m = BinaryMask::from_ascii(&[".....", ".###.", ".###.", ".###.", "....."]);
        let d = chamfer_34(&m);
        assert_eq!(&d[5..10], &[0, 3, 3, 3, 0]);
        assert_eq!(&d[10..15], &[0, 3, 6, 3, 0]);
    }

    #[test]
    fn disc_has_no_fingertips() {
        let m = disc(120, 120, 60.0, 60.0, 40.0);
        let g = analyze_hand(&m, &FingertipParams::default()).unwrap();
        assert!(g.fingertips.is_empty());
    }

    #[test]
    fn single_spike_is_found() {
        let mut m = disc(200, 200, 100.0, 120.0, 30.0);
        // Vertical bar pointing up, 8 px wide, reaching y = 30.
        for y in 30..120 {
            for x in 96..=104 {
                m.set(x, y, true);
            }
        }
        let g = analyze_hand(&m, &FingertipParams::default()).unwrap();
        assert_eq!(g.fingertips.len(), 1);
        let t = g.fingertips[0];
        assert!((t.theta - 270.0).abs() < 3.0, "theta {}", t.theta);
        assert!((t.pos.0 - 100).abs() <= 1);
        assert!(t.r >= FingertipParams::default().ratio * g.palm_radius);
    }

    #[test]
    fn translation_equivariance() {
        let mut m = disc(200, 200, 80.0, 110.0, 30.0);
        for y in 20..110 {
            for x in 76..=84 {
                m.set(x, y, true);
            }
        }
        let shifted = {
            let mut s = BinaryMask::new(200, 200);
            for (x, y) in m.iter_set() {
                s.set(x + 17, y + 9, true);
            }
            s
        };
        let p = FingertipParams::default();
        let a = analyze_hand(&m, &p).unwrap();
        let b = analyze_hand(&shifted, &p).unwrap();
        assert!((b.centroid.0 - a.centroid.0 - 17.0).abs() < 1e-9);
        assert!((b.centroid.1 - a.centroid.1 - 9.0).abs() < 1e-9);
        assert_eq!(a.palm_radius, b.palm_radius);
        assert_eq!(a.fingertips.len(), b.fingertips.len());
        for (ta, tb) in a.fingertips.iter().zip(&b.fingertips) {
            assert_eq!((tb.pos.0 - ta.pos.0, tb.pos.1 - ta.pos.1), (17, 9));
            assert!((ta.r - tb.r).abs() < 1e-9 && (ta.theta - tb.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn circle_fit_recovers_centre() {
        let pts: Vec<(f64, f64)> = (0..12)
            .map(|k| {
                let a = (k as f64) * 15f64.to_radians();
                (10.0 + 5.0 * a.cos(), -3.0 + 5.0 * a.sin())
            })
            .collect();
        let c = fit_circle(&pts).unwrap();
        assert!((c.0 - 10.0).abs() < 1e-9 && (c.1 + 3.0).abs() < 1e-9);
        assert!(fit_circle(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]).is_none());
    }

    #[test]
    fn angular_gap_wraps() {
        assert_eq!(angular_gap(355.0, 5.0), 10.0);
        assert_eq!(angular_gap(90.0, 270.0), 180.0);
    }
}

//! Debug overlay: fingertips as 7-px red crosses, the centroid as a green
//! ring of diameter 5, drawn on an RGB copy of the frame.

use crate::handgeom::HandGeometry;
use crate::imaging::Image;

pub const TIP_COLOR: [u8; 3] = [255, 0, 0];
pub const CENTROID_COLOR: [u8; 3] = [0, 255, 0];

/// Offsets of the 7-px cross.
pub fn cross_offsets() -> Vec<(i64, i64)> {
    let mut v: Vec<(i64, i64)> = (-3..=3).map(|d| (d, 0)).collect();
    v.extend((-3..=3).filter(|&d| d != 0).map(|d| (0, d)));
    v
}

/// Offsets at rounded distance exactly 2: the 12-pixel ring in a 5x5 box.
pub fn ring_offsets() -> Vec<(i64, i64)> {
    let mut v = Vec::new();
    for dy in -2i64..=2 {
        for dx in -2i64..=2 {
            if ((dx * dx + dy * dy) as f64).sqrt().round() as i64 == 2 {
                v.push((dx, dy));
            }
        }
    }
    v
}

fn plot(img: &mut Image, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
        img.set_rgb(x as usize, y as usize, color);
    }
}

/// `geom` must be in frame coordinates. Marks that fall off the frame are
/// clipped. Tips are drawn after the centroid.
pub fn draw_overlay(frame: &Image, geom: &HandGeometry) -> Image {
    let mut out = frame.to_rgb();
    let c = (geom.centroid.0.round() as i64, geom.centroid.1.round() as i64);
    for (dx, dy) in ring_offsets() {
        plot(&mut out, c.0 + dx, c.1 + dy, CENTROID_COLOR);
    }
    for t in &geom.fingertips {
        for (dx, dy) in cross_offsets() {
            plot(&mut out, t.pos.0 + dx, t.pos.1 + dy, TIP_COLOR);
        }
    }
    out
}

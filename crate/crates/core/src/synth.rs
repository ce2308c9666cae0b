//! Deterministic synthetic hands with exact fingertip ground truth.
//!
//! A hand is a filled palm disc plus one capsule per extended finger. The
//! capsule axis runs from the palm centre to `palm_radius + finger_length`
//! along the finger angle; its end-cap centre is the ground-truth tip.
//! Angles use the same convention as fingertip detection: degrees from +x
//! with y pointing down, so 270 points up the frame.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::imaging::{load_pnm, save_pnm, BinaryMask, Image, ImageError};
use crate::rng::XorShift64Star;

/// Number of gesture classes in the corpus (0 to 5 extended fingers).
pub const CORPUS_CLASSES: usize = 6;
/// Upper bound on any corpus sample; leaves headroom for a 1.4 relighting.
pub const CORPUS_MAX_SAMPLE: u8 = 182;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("hand does not fit inside a {width}x{height} frame")]
    OutOfFrame { width: usize, height: usize },
    #[error("invalid hand parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("truth manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandParams {
    pub palm_center: (f64, f64),
    pub palm_radius: f64,
    /// At most five finger directions, degrees.
    pub finger_angles: Vec<f64>,
    /// Finger length beyond the palm rim, in palm radii.
    pub finger_length: f64,
    /// Finger width, in palm radii.
    pub finger_width: f64,
    pub skin_color: [u8; 3],
    pub background_color: [u8; 3],
    pub gain: f64,
    /// Half-range of the additive uniform noise.
    pub noise_amp: f64,
    pub seed: u64,
}

impl Default for HandParams {
    fn default() -> Self {
        Self {
            palm_center: (160.0, 158.0),
            palm_radius: 40.0,
            finger_angles: Vec::new(),
            finger_length: 1.8,
            finger_width: 0.25,
            skin_color: [120, 80, 60],
            background_color: [20, 30, 45],
            gain: 1.0,
            noise_amp: 0.0,
            seed: 0,
        }
    }
}

impl HandParams {
    /// End-cap centre of each finger, frame coordinates.
    pub fn tip_centers(&self) -> Vec<(f64, f64)> {
        let reach = self.palm_radius * (1.0 + self.finger_length);
        self.finger_angles
            .iter()
            .map(|a| {
                let t = a.to_radians();
                (self.palm_center.0 + reach * t.cos(), self.palm_center.1 + reach * t.sin())
            })
            .collect()
    }

    fn validate(&self, width: usize, height: usize) -> Result<(), SynthError> {
        if self.finger_angles.len() > 5 {
            return Err(SynthError::InvalidParams(format!("{} fingers", self.finger_angles.len())));
        }
        if !(self.palm_radius > 0.0 && self.finger_length >= 0.0 && self.finger_width > 0.0 && self.gain > 0.0)
            || self.noise_amp < 0.0
        {
            return Err(SynthError::InvalidParams(format!("{self:?}")));
        }
        // One pixel of background margin on every side.
        let inside = |x: f64, y: f64, r: f64| {
            x - r >= 1.0 && y - r >= 1.0 && x + r <= width as f64 - 2.0 && y + r <= height as f64 - 2.0
        };
        let (cx, cy) = self.palm_center;
        let half = 0.5 * self.finger_width * self.palm_radius;
        if !inside(cx, cy, self.palm_radius) || self.tip_centers().iter().any(|&(x, y)| !inside(x, y, half)) {
            return Err(SynthError::OutOfFrame { width, height });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub label: usize,
    pub truth_tips: Vec<(f64, f64)>,
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0) };
    (p.0 - a.0 - t * abx).hypot(p.1 - a.1 - t * aby)
}

/// Signed distance from `q` to the hand outline, negative inside.
fn signed_distance(p: &HandParams, tips: &[(f64, f64)], q: (f64, f64)) -> f64 {
    let half = 0.5 * p.finger_width * p.palm_radius;
    let palm = (q.0 - p.palm_center.0).hypot(q.1 - p.palm_center.1) - p.palm_radius;
    tips.iter().map(|&t| segment_distance(q, p.palm_center, t) - half).fold(palm, f64::min)
}

/// Pixels whose centre lies inside the hand shape.
pub fn render_silhouette(p: &HandParams, width: usize, height: usize) -> Result<BinaryMask, SynthError> {
    p.validate(width, height)?;
    let tips = p.tip_centers();
    let mut mask = BinaryMask::new(width, height);
    for y in 0..height {
        for x in 0..width {
            if signed_distance(p, &tips, (x as f64, y as f64)) <= 0.0 {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

/// Renders the hand with antialiased edges (pixel coverage estimated from
/// the signed distance), then applies `gain` and `noise_amp` via
/// [`apply_lighting`] seeded with `p.seed`.
pub fn render_hand(p: &HandParams, width: usize, height: usize) -> Result<LabeledSample, SynthError> {
    p.validate(width, height)?;
    let tips = p.tip_centers();
    let mut img = Image::filled_rgb(width, height, p.background_color);
    for y in 0..height {
        for x in 0..width {
            let cover = (0.5 - signed_distance(p, &tips, (x as f64, y as f64))).clamp(0.0, 1.0);
            let cover = (2.0 * cover).round() / 2.0;
            if cover > 0.0 {
                let blend = |i: usize| {
                    let (bg, fg) = (p.background_color[i] as f64, p.skin_color[i] as f64);
                    (bg + cover * (fg - bg)).round() as u8
                };
                img.set_rgb(x, y, [blend(0), blend(1), blend(2)]);
            }
        }
    }
    let image = apply_lighting(&img, p.gain, p.noise_amp, p.seed);
    Ok(LabeledSample { image, label: p.finger_angles.len(), truth_tips: tips })
}

/// Per sample: `clamp(round(gain·v))`, then add uniform noise in
/// `[-noise_amp, noise_amp]`, round and clamp again.
pub fn apply_lighting(img: &Image, gain: f64, noise_amp: f64, seed: u64) -> Image {
    assert!(gain > 0.0, "gain must be positive");
    let mut rng = XorShift64Star::new(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        let lit = (gain * *v as f64).round().clamp(0.0, 255.0);
        let noise = if noise_amp > 0.0 { rng.uniform(-noise_amp, noise_amp) } else { 0.0 };
        *v = (lit + noise).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Evenly spread finger angles for `n` fingers over a 150° fan centred on
/// straight up (270°).
pub fn canonical_angles(n: usize) -> Vec<f64> {
    (0..n).map(|i| 195.0 + 150.0 * (i as f64 + 0.5) / n as f64).collect()
}

/// Randomization ranges of [`generate_corpus_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub per_class: usize,
    pub width: usize,
    pub height: usize,
    /// Per-sample noise half-range is drawn uniformly from this interval.
    pub noise_amp: (f64, f64),
    pub gain: (f64, f64),
}

impl CorpusConfig {
    /// Defaults: gain in [0.6, 1.4] and noise half-range in [0, 2]. The
    /// noise bound keeps in-hand gradients below the histogram threshold
    /// under any gain in [0.7, 1.4].
    pub fn new(seed: u64, per_class: usize, width: usize, height: usize) -> Self {
        Self { seed, per_class, width, height, noise_amp: (0.0, 2.0), gain: (0.6, 1.4) }
    }
}

fn sample_seed(seed: u64, label: usize, index: usize) -> u64 {
    let mut r = XorShift64Star::new(seed ^ ((label as u64) << 48) ^ (index as u64).wrapping_mul(0x9E37_79B9));
    r.next_u64()
}

/// Randomized hand parameters for one corpus sample.
pub fn corpus_params(cfg: &CorpusConfig, label: usize, index: usize) -> HandParams {
    let mut rng = XorShift64Star::new(sample_seed(cfg.seed, label, index));
    let scale = (cfg.width as f64 / 320.0).min(cfg.height as f64 / 240.0);
    let nominal_radius = 40.0 * scale;
    let jitter = 15.0 * scale;
    let cx = cfg.width as f64 / 2.0 + rng.uniform(-jitter, jitter);
    let cy = cfg.height as f64 / 2.0 + 0.95 * nominal_radius + rng.uniform(-jitter, jitter);
    let palm_radius = nominal_radius * rng.uniform(0.9, 1.1);
    let finger_angles = canonical_angles(label).into_iter().map(|a| a + rng.uniform(-6.0, 6.0)).collect();

    let red = rng.uniform(112.0, 128.0);
    let g_ratio = rng.uniform(0.63, 0.68);
    let b_ratio = g_ratio - rng.uniform(0.17, 0.20);
    let skin_color = [red.round() as u8, (red * g_ratio).round() as u8, (red * b_ratio).round() as u8];
    let background_color = [
        rng.uniform(5.0, 15.0).round() as u8,
        rng.uniform(10.0, 20.0).round() as u8,
        rng.uniform(20.0, 30.0).round() as u8,
    ];
    HandParams {
        palm_center: (cx, cy),
        palm_radius,
        finger_angles,
        finger_length: 1.8,
        finger_width: 0.25,
        skin_color,
        background_color,
        gain: rng.uniform(cfg.gain.0, cfg.gain.1),
        noise_amp: rng.uniform(cfg.noise_amp.0, cfg.noise_amp.1),
        seed: rng.next_u64(),
    }
}

/// `6 · per_class` samples, label-major. Sample `(label, index)` depends
/// only on the seed, the label and the index, so a larger corpus extends a
/// smaller one.
pub fn generate_corpus_with(cfg: &CorpusConfig) -> Result<Vec<LabeledSample>, SynthError> {
    let mut out = Vec::with_capacity(CORPUS_CLASSES * cfg.per_class);
    for label in 0..CORPUS_CLASSES {
        for index in 0..cfg.per_class {
            out.push(render_hand(&corpus_params(cfg, label, index), cfg.width, cfg.height)?);
        }
    }
    Ok(out)
}

pub fn generate_corpus(
    seed: u64,
    per_class: usize,
    width: usize,
    height: usize,
) -> Result<Vec<LabeledSample>, SynthError> {
    generate_corpus_with(&CorpusConfig::new(seed, per_class, width, height))
}

/// Corpus file name for the `index`-th sample of `label`.
pub fn sample_file_name(label: usize, index: usize) -> String {
    format!("{label}_{index:04}.ppm")
}

/// Writes each sample as `<label>_<index>.ppm` plus a `truth.txt` manifest
/// of `<filename> <label> <n_tips> x1 y1 ...` lines.
pub fn write_corpus(dir: &Path, samples: &[LabeledSample]) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    let mut counters = [0usize; 64];
    let mut manifest = String::new();
    for s in samples {
        let index = counters.get_mut(s.label).map(|c| {
            *c += 1;
            *c - 1
        });
        let name = sample_file_name(s.label, index.unwrap_or(0));
        fs::write(dir.join(&name), save_pnm(&s.image))?;
        write!(manifest, "{name} {} {}", s.label, s.truth_tips.len()).unwrap();
        for (x, y) in &s.truth_tips {
            write!(manifest, " {x} {y}").unwrap();
        }
        manifest.push('\n');
    }
    fs::write(dir.join("truth.txt"), manifest)?;
    Ok(())
}

/// One entry of a corpus directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub file_name: String,
    pub sample: LabeledSample,
}

/// Reads a directory written by [`write_corpus`], in manifest order.
pub fn read_corpus(dir: &Path) -> Result<Vec<CorpusEntry>, SynthError> {
    let manifest = fs::read_to_string(dir.join("truth.txt"))?;
    let mut out = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        let bad = |msg: &str| SynthError::Manifest { line: i + 1, msg: msg.to_string() };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(bad("expected <file> <label> <n_tips> ..."));
        }
        let label: usize = toks[1].parse().map_err(|_| bad("bad label"))?;
        let n: usize = toks[2].parse().map_err(|_| bad("bad tip count"))?;
        if toks.len() != 3 + 2 * n {
            return Err(bad("tip coordinate count does not match n_tips"));
        }
        let coords: Vec<f64> =
            toks[3..].iter().map(|t| t.parse::<f64>().map_err(|_| bad("bad coordinate"))).collect::<Result<_, _>>()?;
        let truth_tips = coords.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let image = load_pnm(&fs::read(dir.join(toks[0]))?)?;
        out.push(CorpusEntry { file_name: toks[0].to_string(), sample: LabeledSample { image, label, truth_tips } });
    }
    Ok(out)
}

//! Per-frame recognition and the debounce state machine.
//!
//! The classifier predicts a pose (the number of extended fingers). The
//! registry binds poses to gesture ids and lingual descriptions; a pose
//! with no registered gesture is an unknown gesture and only produces local
//! "wrong gesture" feedback.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::classifier::{ClassifierError, Mlp};
use crate::features::{
    build_feature_vector, orientation_histogram, FeatureError, FeatureVector, OrientationHistogram,
    DEFAULT_MAG_THRESHOLD,
};
use crate::handgeom::{analyze_hand, FingertipParams, GeometryError, HandGeometry};
use crate::imaging::{to_grayscale, BinaryMask, Image};
use crate::quoting::{quote, unquote};
use crate::segmentation::{
    classify_skin, default_min_area, extract_roi, fill_holes, morph_open, SegmentationError, SkinModel,
};

/// Local feedback text for rejected poses.
pub const WRONG_GESTURE: &str = "wrong gesture";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("duplicate gesture id {0}")]
    DuplicateId(u32),
    #[error("gesture {id}: finger count {fingers} outside 0..=5")]
    BadFingers { id: u32, fingers: u8 },
    #[error("gesture {0}: name must be a non-empty token without spaces")]
    BadName(u32),
    #[error("no gesture with id {0}")]
    NoSuchId(u32),
    #[error("a registry needs at least one gesture")]
    Empty,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GestureClass {
    pub id: u32,
    pub name: String,
    /// Extended fingers of the pose this gesture is made with.
    pub fingers: u8,
    pub message: String,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '"')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GestureRegistry {
    classes: Vec<GestureClass>,
}

impl Default for GestureRegistry {
    fn default() -> Self {
        let entries = [
            ("water", "need water"),
            ("food", "need food"),
            ("toilet", "need toilet"),
            ("nurse", "call nurse"),
            ("pain", "pain"),
            ("emergency", "emergency"),
        ];
        let classes = entries
            .iter()
            .enumerate()
            .map(|(i, (name, msg))| GestureClass {
                id: i as u32,
                name: name.to_string(),
                fingers: i as u8,
                message: msg.to_string(),
            })
            .collect();
        Self { classes }
    }
}

impl GestureRegistry {
    pub fn new(classes: Vec<GestureClass>) -> Result<Self, RegistryError> {
        if classes.is_empty() {
            return Err(RegistryError::Empty);
        }
        let mut reg = Self { classes: Vec::with_capacity(classes.len()) };
        for c in classes {
            reg.add(c)?;
        }
        Ok(reg)
    }

    pub fn classes(&self) -> &[GestureClass] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&GestureClass> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// First registered gesture made with `fingers` extended fingers.
    pub fn for_pose(&self, fingers: usize) -> Option<&GestureClass> {
        self.classes.iter().find(|c| c.fingers as usize == fingers)
    }

    pub fn add(&mut self, class: GestureClass) -> Result<(), RegistryError> {
        if class.fingers > 5 {
            return Err(RegistryError::BadFingers { id: class.id, fingers: class.fingers });
        }
        if !valid_token(&class.name) {
            return Err(RegistryError::BadName(class.id));
        }
        if self.get(class.id).is_some() {
            return Err(RegistryError::DuplicateId(class.id));
        }
        self.classes.push(class);
        Ok(())
    }

    /// Removes and returns a gesture. The last gesture cannot be removed.
    pub fn remove(&mut self, id: u32) -> Result<GestureClass, RegistryError> {
        let pos = self.classes.iter().position(|c| c.id == id).ok_or(RegistryError::NoSuchId(id))?;
        if self.classes.len() == 1 {
            return Err(RegistryError::Empty);
        }
        Ok(self.classes.remove(pos))
    }
}

/// One line per gesture: `gesture <id> name=<token> fingers=<n> msg="<text>"`.
impl fmt::Display for GestureRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.classes {
            writeln!(f, "gesture {} name={} fingers={} msg={}", c.id, c.name, c.fingers, quote(&c.message))?;
        }
        Ok(())
    }
}

fn parse_entry(line: &str) -> Result<GestureClass, String> {
    let rest = line.strip_prefix("gesture ").ok_or("expected 'gesture'")?;
    let (id, rest) = rest.trim_start().split_once(' ').ok_or("expected an id")?;
    let id: u32 = id.parse().map_err(|_| format!("bad id '{id}'"))?;
    let mut rest = rest.trim_start();
    let mut name = None;
    if let Some(r) = rest.strip_prefix("name=") {
        let (tok, r) = r.split_once(' ').ok_or("expected fingers after name")?;
        name = Some(tok.to_string());
        rest = r.trim_start();
    }
    let r = rest.strip_prefix("fingers=").ok_or("expected fingers=")?;
    let (n, r) = r.split_once(' ').ok_or("expected msg after fingers")?;
    let fingers: u8 = n.parse().map_err(|_| format!("bad finger count '{n}'"))?;
    let r = r.trim_start().strip_prefix("msg=").ok_or("expected msg=")?;
    let (message, tail) = unquote(r).ok_or("bad quoted msg")?;
    if !tail.trim().is_empty() {
        return Err("trailing text after msg".into());
    }
    let name = name.unwrap_or_else(|| format!("g{id}"));
    Ok(GestureClass { id, name, fingers, message })
}

impl FromStr for GestureRegistry {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut reg = Self { classes: Vec::new() };
        for (i, line) in s.lines().enumerate() {
            let trimmed = line.trim_start();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let perr = |msg: String| RegistryError::Parse { line: i + 1, msg };
            let class = parse_entry(trimmed).map_err(perr)?;
            reg.add(class).map_err(|e| perr(e.to_string()))?;
        }
        if reg.classes.is_empty() {
            return Err(RegistryError::Empty);
        }
        Ok(reg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub conf_accept: f64,
    pub conf_reject: f64,
    pub k_consecutive: u32,
    pub refractory_frames: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { conf_accept: 0.7, conf_reject: 0.5, k_consecutive: 3, refractory_frames: 30 }
    }
}

/// What the classifier saw in one frame, after the registry lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Candidate {
    Gesture(u32),
    /// A pose (finger count) with no registered gesture.
    Unregistered(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    pub current: Option<Candidate>,
    pub streak: u32,
    pub refractory_remaining: u32,
    pub thresholds: Thresholds,
}

impl PipelineState {
    pub fn new(thresholds: Thresholds) -> Self {
        Self { current: None, streak: 0, refractory_remaining: 0, thresholds }
    }
}

impl Default for PipelineState {
    fn default() -> Self {
        Self::new(Thresholds::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    LowConfidence,
    UnknownGesture,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::LowConfidence => "low-confidence",
            RejectReason::UnknownGesture => "unknown-gesture",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GestureEvent {
    pub gesture: u32,
    pub message: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameOutcome {
    NoHand,
    Rejected { reason: RejectReason, feedback: String, candidate: Candidate, confidence: f64 },
    Tracking { candidate: Candidate, streak: u32, confidence: f64 },
    Emitted(GestureEvent),
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Candidate::Gesture(id) => write!(f, "{id}"),
            Candidate::Unregistered(pose) => write!(f, "pose{pose}"),
        }
    }
}

/// `<outcome> [label conf]`, as written to the outcome log.
impl fmt::Display for FrameOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameOutcome::NoHand => write!(f, "no-hand"),
            FrameOutcome::Rejected { reason, candidate, confidence, .. } => {
                write!(f, "rejected:{} {candidate} {confidence:.3}", reason.as_str())
            }
            FrameOutcome::Tracking { candidate, confidence, .. } => write!(f, "tracking {candidate} {confidence:.3}"),
            FrameOutcome::Emitted(e) => write!(f, "emitted {} {:.3}", e.gesture, e.confidence),
        }
    }
}

/// The registered message for `id`, or the wrong-gesture feedback text.
pub fn resolve_message(registry: &GestureRegistry, id: u32) -> Result<&str, UnknownGesture> {
    registry.get(id).map(|c| c.message.as_str()).ok_or(UnknownGesture)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("wrong gesture")]
pub struct UnknownGesture;

impl UnknownGesture {
    pub fn feedback(&self) -> &'static str {
        WRONG_GESTURE
    }
}

/// A frame without a hand: resets the streak and ticks the refractory
/// counter.
pub fn debounce_no_hand(state: &mut PipelineState) -> FrameOutcome {
    state.refractory_remaining = state.refractory_remaining.saturating_sub(1);
    state.current = None;
    state.streak = 0;
    FrameOutcome::NoHand
}

/// One debounce step. The refractory counter ticks once per frame; while it
/// is running a registered gesture keeps its label but its streak does not
/// grow, so two emissions are always at least `k + refractory` frames apart.
/// Unregistered poses are debounced the same way but ignore the refractory
/// counter, since their feedback is local.
pub fn debounce_update(
    state: &mut PipelineState,
    registry: &GestureRegistry,
    candidate: Candidate,
    confidence: f64,
) -> FrameOutcome {
    let th = state.thresholds;
    let refractory = state.refractory_remaining;
    state.refractory_remaining = refractory.saturating_sub(1);
    if confidence < th.conf_reject {
        state.current = None;
        state.streak = 0;
        return FrameOutcome::Rejected {
            reason: RejectReason::LowConfidence,
            feedback: WRONG_GESTURE.to_string(),
            candidate,
            confidence,
        };
    }
    if confidence < th.conf_accept {
        return FrameOutcome::Tracking { candidate, streak: state.streak, confidence };
    }
    let gated = matches!(candidate, Candidate::Gesture(_)) && refractory > 0;
    if state.current != Some(candidate) {
        state.current = Some(candidate);
        state.streak = 0;
    }
    if !gated {
        state.streak += 1;
    }
    if state.streak < th.k_consecutive {
        return FrameOutcome::Tracking { candidate, streak: state.streak, confidence };
    }
    state.streak = 0;
    match candidate {
        Candidate::Gesture(id) => match resolve_message(registry, id) {
            Ok(message) => {
                state.refractory_remaining = th.refractory_frames;
                FrameOutcome::Emitted(GestureEvent { gesture: id, message: message.to_string(), confidence })
            }
            Err(e) => FrameOutcome::Rejected {
                reason: RejectReason::UnknownGesture,
                feedback: e.feedback().to_string(),
                candidate,
                confidence,
            },
        },
        Candidate::Unregistered(_) => FrameOutcome::Rejected {
            reason: RejectReason::UnknownGesture,
            feedback: WRONG_GESTURE.to_string(),
            candidate,
            confidence,
        },
    }
}

/// Knobs of the per-frame analysis chain.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub open_radius: usize,
    /// Minimum hand area; `None` uses [`default_min_area`].
    pub min_area: Option<usize>,
    pub fingertips: FingertipParams,
    pub mag_threshold: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            open_radius: 1,
            min_area: None,
            fingertips: FingertipParams::default(),
            mag_threshold: DEFAULT_MAG_THRESHOLD,
        }
    }
}

/// Everything extracted from one frame that contains a hand.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnalysis {
    /// Inclusive hand bounding box in frame coordinates.
    pub bbox: (usize, usize, usize, usize),
    pub area: usize,
    /// Hole-filled hand mask, frame sized.
    pub hand_mask: BinaryMask,
    /// Geometry in frame coordinates.
    pub geometry: HandGeometry,
    pub histogram: OrientationHistogram,
    pub features: FeatureVector,
}

/// Segmentation, geometry and features of an RGB frame. `Ok(None)` means
/// no usable hand.
pub fn analyze_frame(
    skin: &SkinModel,
    frame: &Image,
    cfg: &AnalysisConfig,
) -> Result<Option<FrameAnalysis>, PipelineError> {
    let raw = classify_skin(skin, frame)?;
    let opened = morph_open(&raw, cfg.open_radius);
    let min_area = cfg.min_area.unwrap_or_else(|| default_min_area(frame.width(), frame.height()));
    let roi = match extract_roi(&opened, min_area) {
        Ok(r) => r,
        Err(SegmentationError::NoHand) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let hand = fill_holes(&roi.mask.padded(1));
    let geometry = match analyze_hand(&hand, &cfg.fingertips) {
        Ok(g) => g,
        Err(GeometryError::EmptyMask | GeometryError::Degenerate) => return Ok(None),
    };
    let (x0, y0, x1, y1) = roi.bbox;
    let geometry = geometry.translated(x0 as i64 - 1, y0 as i64 - 1);
    let filled = hand.crop(1, 1, x1 - x0 + 1, y1 - y0 + 1);
    let frame_mask = filled.embedded(frame.width(), frame.height(), x0, y0);
    let histogram = orientation_histogram(&to_grayscale(frame), &frame_mask, cfg.mag_threshold)?;
    let features = build_feature_vector(&histogram, &geometry);
    Ok(Some(FrameAnalysis { bbox: roi.bbox, area: roi.area, hand_mask: frame_mask, geometry, histogram, features }))
}

/// Pose prediction for a frame: `(pose, confidence)`, or `None` without a hand.
pub fn classify_frame(
    model: &Mlp,
    skin: &SkinModel,
    frame: &Image,
    cfg: &AnalysisConfig,
) -> Result<Option<(usize, f64, FrameAnalysis)>, PipelineError> {
    match analyze_frame(skin, frame, cfg)? {
        None => Ok(None),
        Some(a) => {
            let (pose, conf) = model.predict(a.features.as_slice())?;
            Ok(Some((pose, conf, a)))
        }
    }
}

/// Everything `process_frame` needs besides the state.
#[derive(Debug, Clone)]
pub struct Recognizer {
    pub registry: GestureRegistry,
    pub model: Mlp,
    pub skin: SkinModel,
    pub analysis: AnalysisConfig,
}

impl Recognizer {
    pub fn new(registry: GestureRegistry, model: Mlp, skin: SkinModel) -> Self {
        Self { registry, model, skin, analysis: AnalysisConfig::default() }
    }

    pub fn candidate(&self, pose: usize) -> Candidate {
        match self.registry.for_pose(pose) {
            Some(c) => Candidate::Gesture(c.id),
            None => Candidate::Unregistered(pose),
        }
    }
}

/// Runs the full chain on one RGB frame and advances the debounce state.
pub fn process_frame(
    state: &mut PipelineState,
    rec: &Recognizer,
    frame: &Image,
) -> Result<FrameOutcome, PipelineError> {
    match classify_frame(&rec.model, &rec.skin, frame, &rec.analysis)? {
        None => Ok(debounce_no_hand(state)),
        Some((pose, conf, _)) => Ok(debounce_update(state, &rec.registry, rec.candidate(pose), conf)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state() -> PipelineState {
        PipelineState::default()
    }

    #[test]
    fn default_registry_has_six() {
        let r = GestureRegistry::default();
        assert_eq!(r.len(), 6);
        assert_eq!(resolve_message(&r, 3), Ok("call nurse"));
        assert_eq!(resolve_message(&r, 99), Err(UnknownGesture));
        assert_eq!(UnknownGesture.feedback(), "wrong gesture");
    }

    #[test]
    fn three_confident_frames_emit() {
        let reg = GestureRegistry::default();
        let mut s = state();
        let g = Candidate::Gesture(2);
        assert!(matches!(debounce_update(&mut s, &reg, g, 0.9), FrameOutcome::Tracking { streak: 1, .. }));
        assert!(matches!(debounce_update(&mut s, &reg, g, 0.9), FrameOutcome::Tracking { streak: 2, .. }));
        match debounce_update(&mut s, &reg, g, 0.9) {
            FrameOutcome::Emitted(e) => {
                assert_eq!(e.gesture, 2);
                assert_eq!(e.message, "need toilet");
            }
            o => panic!("{o:?}"),
        }
        assert_eq!(s.streak, 0);
        assert_eq!(s.refractory_remaining, 30);
    }

    #[test]
    fn label_change_restarts_streak() {
        let reg = GestureRegistry::default();
        let mut s = state();
        debounce_update(&mut s, &reg, Candidate::Gesture(2), 0.9);
        let o = debounce_update(&mut s, &reg, Candidate::Gesture(3), 0.9);
        assert!(matches!(o, FrameOutcome::Tracking { candidate: Candidate::Gesture(3), streak: 1, .. }));
    }

    #[test]
    fn refractory_blocks_repeat() {
        let reg = GestureRegistry::default();
        let mut s = state();
        let outs: Vec<_> = (0..13).map(|_| debounce_update(&mut s, &reg, Candidate::Gesture(1), 0.95)).collect();
        assert_eq!(outs.iter().filter(|o| matches!(o, FrameOutcome::Emitted(_))).count(), 1);
    }

    #[test]
    fn confidence_bands() {
        let reg = GestureRegistry::default();
        let mut s = state();
        debounce_update(&mut s, &reg, Candidate::Gesture(1), 0.9);
        let o = debounce_update(&mut s, &reg, Candidate::Gesture(1), 0.6);
        assert!(matches!(o, FrameOutcome::Tracking { streak: 1, .. }));
        match debounce_update(&mut s, &reg, Candidate::Gesture(1), 0.4) {
            FrameOutcome::Rejected { reason, feedback, .. } => {
                assert_eq!(reason, RejectReason::LowConfidence);
                assert_eq!(feedback, "wrong gesture");
            }
            o => panic!("{o:?}"),
        }
        assert_eq!(s.streak, 0);
    }

    #[test]
    fn unregistered_pose_rejected_once_per_streak() {
        let reg = GestureRegistry::default();
        let mut s = state();
        let outs: Vec<_> = (0..4).map(|_| debounce_update(&mut s, &reg, Candidate::Unregistered(5), 0.9)).collect();
        let rejects = outs
            .iter()
            .filter(|o| matches!(o, FrameOutcome::Rejected { reason: RejectReason::UnknownGesture, .. }))
            .count();
        assert_eq!(rejects, 1);
        assert!(matches!(outs[2], FrameOutcome::Rejected { .. }));
    }

    #[test]
    fn no_hand_resets() {
        let reg = GestureRegistry::default();
        let mut s = state();
        debounce_update(&mut s, &reg, Candidate::Gesture(0), 0.9);
        debounce_update(&mut s, &reg, Candidate::Gesture(0), 0.9);
        assert_eq!(debounce_no_hand(&mut s), FrameOutcome::NoHand);
        assert_eq!(s.streak, 0);
        assert!(matches!(
            debounce_update(&mut s, &reg, Candidate::Gesture(0), 0.9),
            FrameOutcome::Tracking { streak: 1, .. }
        ));
    }

    #[test]
    fn registry_edits() {
        let mut r = GestureRegistry::default();
        let seventh = GestureClass { id: 6, name: "lights".into(), fingers: 2, message: "lights off".into() };
        r.add(seventh.clone()).unwrap();
        assert_eq!(r.len(), 7);
        assert_eq!(r.add(seventh), Err(RegistryError::DuplicateId(6)));
        let bad = GestureClass { id: 9, name: "x".into(), fingers: 6, message: String::new() };
        assert!(matches!(r.add(bad), Err(RegistryError::BadFingers { .. })));
        r.remove(6).unwrap();
        assert_eq!(r.remove(6), Err(RegistryError::NoSuchId(6)));
        assert_eq!(r, GestureRegistry::default());
        let mut one = GestureRegistry::new(vec![r.classes()[0].clone()]).unwrap();
        assert_eq!(one.remove(0), Err(RegistryError::Empty));
    }

    #[test]
    fn registry_file_parsing() {
        let text = "# comment\n\ngesture 4 fingers=2 msg=\"say \\\"hi\\\"\"\ngesture 7 name=x fingers=0 msg=\"\"\n";
        let r: GestureRegistry = text.parse().unwrap();
        assert_eq!(r.classes()[0].message, "say \"hi\"");
        assert_eq!(r.classes()[0].name, "g4");
        assert_eq!(r.for_pose(0).unwrap().id, 7);
        let err = "gesture 1 fingers=1 msg=\"a\"\ngesture 1 fingers=2 msg=\"b\"\n".parse::<GestureRegistry>();
        assert!(matches!(err, Err(RegistryError::Parse { line: 2, .. })));
        let err = "\ngesture 1 fingers=1 msg=\"open\n".parse::<GestureRegistry>();
        assert!(matches!(err, Err(RegistryError::Parse { line: 2, .. })));
        assert!(matches!("# nothing\n".parse::<GestureRegistry>(), Err(RegistryError::Empty)));
        let default = GestureRegistry::default();
        assert_eq!(default.to_string().parse::<GestureRegistry>().unwrap(), default);
    }

    fn arb_candidate() -> impl Strategy<Value = Candidate> {
        prop_oneof![(0u32..8).prop_map(Candidate::Gesture), (0usize..6).prop_map(Candidate::Unregistered)]
    }

    proptest! {
        #[test]
        fn emissions_spaced_and_registered(
            steps in proptest::collection::vec(proptest::option::of((arb_candidate(), 0.0f64..=1.0)), 0..300),
        ) {
            let reg = GestureRegistry::default();
            let mut s = state();
            let th = s.thresholds;
            let mut last: Option<usize> = None;
            let run = |s: &mut PipelineState| -> Vec<FrameOutcome> {
                steps.iter().map(|step| match step {
                    None => debounce_no_hand(s),
                    Some((c, conf)) => debounce_update(s, &reg, *c, *conf),
                }).collect()
            };
            let outs = run(&mut s);
            for (i, o) in outs.iter().enumerate() {
                if let FrameOutcome::Emitted(e) = o {
                    prop_assert!(reg.get(e.gesture).is_some());
                    if let Some(prev) = last {
                        prop_assert!(i - prev >= (th.k_consecutive + th.refractory_frames) as usize);
                    }
                    last = Some(i);
                }
            }
            prop_assert_eq!(outs, run(&mut state()));
        }
    }
}

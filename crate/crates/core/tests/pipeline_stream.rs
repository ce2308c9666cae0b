use gestcall::classifier::{Layer, Mlp};
use gestcall::features::FEATURE_LEN;
use gestcall::imaging::Image;
use gestcall::pipeline::{
    analyze_frame, process_frame, AnalysisConfig, Candidate, FrameOutcome, GestureRegistry, PipelineState, Recognizer,
    RejectReason, WRONG_GESTURE,
};
use gestcall::segmentation::SkinModel;
use gestcall::synth::{canonical_angles, render_hand, HandParams};

fn hand(fingers: usize) -> Image {
    let p = HandParams { finger_angles: canonical_angles(fingers), ..HandParams::default() };
    render_hand(&p, 320, 240).unwrap().image
}

/// A network whose output is `pose` with confidence close to 1 for any input.
fn constant_net(pose: usize) -> Mlp {
    let hidden = Layer { inputs: FEATURE_LEN, outputs: 1, weights: vec![0.0; FEATURE_LEN], biases: vec![0.0] };
    let mut biases = vec![-10.0; 6];
    biases[pose] = 10.0;
    let out = Layer { inputs: 1, outputs: 6, weights: vec![0.0; 6], biases };
    Mlp::from_layers(vec![hidden, out]).unwrap()
}

fn zero_net() -> Mlp {
    let hidden = Layer { inputs: FEATURE_LEN, outputs: 2, weights: vec![0.0; 2 * FEATURE_LEN], biases: vec![0.0; 2] };
    let out = Layer { inputs: 2, outputs: 6, weights: vec![0.0; 12], biases: vec![0.0; 6] };
    Mlp::from_layers(vec![hidden, out]).unwrap()
}

#[test]
fn canonical_hands_give_their_finger_count() {
    for n in 0..=5 {
        let a = analyze_frame(&SkinModel::default(), &hand(n), &AnalysisConfig::default()).unwrap().unwrap();
        assert_eq!(a.geometry.fingertips.len(), n, "{n} fingers");
        assert!(a.hand_mask.count() > 0);
    }
}

#[test]
fn background_only_frame_is_no_hand() {
    let rec = Recognizer::new(GestureRegistry::default(), constant_net(5), SkinModel::default());
    let mut state = PipelineState::default();
    let frame = Image::filled_rgb(320, 240, [20, 30, 45]);
    assert_eq!(process_frame(&mut state, &rec, &frame).unwrap(), FrameOutcome::NoHand);
}

#[test]
fn three_confident_frames_emit_once() {
    let rec = Recognizer::new(GestureRegistry::default(), constant_net(5), SkinModel::default());
    let mut state = PipelineState::default();
    let frame = hand(5);
    let outcomes: Vec<_> = (0..3).map(|_| process_frame(&mut state, &rec, &frame).unwrap()).collect();
    assert!(matches!(outcomes[0], FrameOutcome::Tracking { candidate: Candidate::Gesture(5), streak: 1, .. }));
    assert!(matches!(outcomes[1], FrameOutcome::Tracking { streak: 2, .. }));
    match &outcomes[2] {
        FrameOutcome::Emitted(ev) => {
            assert_eq!(ev.gesture, 5);
            assert_eq!(ev.message, "emergency");
        }
        other => panic!("expected emission, got {other}"),
    }
    // Refractory: the same gesture held on does not emit again right away.
    for _ in 0..10 {
        assert!(!matches!(process_frame(&mut state, &rec, &frame).unwrap(), FrameOutcome::Emitted(_)));
    }
}

#[test]
fn uniform_output_is_rejected_with_feedback() {
    let rec = Recognizer::new(GestureRegistry::default(), zero_net(), SkinModel::default());
    let mut state = PipelineState::default();
    match process_frame(&mut state, &rec, &hand(2)).unwrap() {
        FrameOutcome::Rejected { reason, feedback, confidence, .. } => {
            assert_eq!(reason, RejectReason::LowConfidence);
            assert_eq!(feedback, WRONG_GESTURE);
            assert!((confidence - 1.0 / 6.0).abs() < 1e-12);
        }
        other => panic!("expected rejection, got {other}"),
    }
}

#[test]
fn unregistered_pose_gives_wrong_gesture_once() {
    let mut registry = GestureRegistry::default();
    registry.remove(5).unwrap();
    let rec = Recognizer::new(registry, constant_net(5), SkinModel::default());
    let mut state = PipelineState::default();
    let frame = hand(5);
    let rejected = (0..6)
        .map(|_| process_frame(&mut state, &rec, &frame).unwrap())
        .filter(|o| matches!(o, FrameOutcome::Rejected { reason: RejectReason::UnknownGesture, .. }))
        .count();
    assert_eq!(rejected, 2);
}

#[test]
fn stream_outcomes_are_deterministic() {
    let rec = Recognizer::new(GestureRegistry::default(), constant_net(3), SkinModel::default());
    let frames: Vec<Image> = [0, 3, 3, 3, 3, 1, 3].iter().map(|&n| hand(n)).collect();
    let run = || {
        let mut state = PipelineState::default();
        frames.iter().map(|f| process_frame(&mut state, &rec, f).unwrap().to_string()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

//! Audio in, analysed session out, through the public API only.

use std::io::Cursor;
use std::sync::Arc;

use chrono::NaiveDate;
use lull_core::analytics::{cohort_report, load_sessions, reconstruct_scores, session_metrics, MetricsConfig, ReportConfig};
use lull_core::content::{Corpus, StoryLibrary};
use lull_core::detect::{EnergyDetector, WavFrames};
use lull_core::engine::{Engine, EngineConfig};
use lull_core::sessionlog::{Arm, SessionLog, SessionMetadata};

const RATE: u32 = 8000;

/// `pattern[i]` says whether second `i` is loud.
fn wav(pattern: &[bool]) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
    for &loud in pattern {
        let amp = if loud { 6000.0 } else { 30.0 };
        for i in 0..RATE {
            let x = (i as f64 * 2.0 * std::f64::consts::PI * 220.0 / RATE as f64).sin();
            w.write_sample((amp * x) as i16).unwrap();
        }
    }
    w.finalize().unwrap();
    buf.into_inner()
}

fn run(arm: Arm, id: &str, pattern: &[bool], cfg: &EngineConfig) -> SessionLog {
    let meta = SessionMetadata {
        start_time: NaiveDate::from_ymd_opt(2024, 3, 1).unwrap().and_hms_opt(9, 0, 0).unwrap(),
        friendship_duration: Some(id.len() as f64),
        intimacy_pre: None,
        intimacy_post: None,
        preferred_genres: vec![],
        config: cfg.clone(),
        notes: vec![],
    };
    let mut engine = Engine::new(
        id,
        arm,
        cfg,
        meta,
        Arc::new(Corpus::fixture()),
        Arc::new(StoryLibrary::fixture()),
    )
    .unwrap();
    let frames = WavFrames::new(Cursor::new(wav(pattern))).unwrap();
    let mut det = EnergyDetector::new(frames, cfg.detector).unwrap();
    engine.run(&mut det, None, |_| {}).unwrap();
    engine.finish()
}

#[test]
fn wav_to_report() {
    let mut cfg = EngineConfig::default();
    cfg.score.window = 5;
    cfg.score.lull_duration = 20;
    cfg.policy.base_gap = 30;
    cfg.policy.eval_window = 10;
    // 40 s of talk, 60 s of silence, then alternating talk.
    let pattern: Vec<bool> = (0..160).map(|t| t < 40 || (t >= 100 && t % 3 != 0)).collect();

    let dir = tempfile::tempdir().unwrap();
    for (arm, id) in [(Arm::Experiment, "e1"), (Arm::Experiment, "e22"), (Arm::Control, "c1"), (Arm::Control, "c22")] {
        let log = run(arm, id, &pattern, &cfg);
        assert_eq!(log.len(), 160);
        let interventions = log.records().iter().filter(|r| r.is_intervention()).count();
        if arm == Arm::Control {
            assert_eq!(interventions, 0);
        } else {
            assert!(interventions >= 1);
        }
        log.write_to_dir(dir.path()).unwrap();
    }

    let logs = load_sessions(dir.path(), &[]).unwrap();
    assert_eq!(logs.len(), 4);
    for log in &logs {
        // The CSV carries everything needed to recompute the scores.
        let scores: Vec<u8> = log.records().iter().map(|r| r.score).collect();
        assert_eq!(reconstruct_scores(log.records(), &log.metadata.config.score), scores);
        let m = session_metrics(log, &MetricsConfig::default()).unwrap();
        assert_eq!(m.duration, 160);
    }
    // Ratio oracle straight from the audio pattern: nudge seconds drop out.
    for id in ["e1", "c1"] {
        let log = logs.iter().find(|l| l.session_id == id).unwrap();
        let m = session_metrics(log, &MetricsConfig::default()).unwrap();
        let kept: Vec<bool> = pattern
            .iter()
            .zip(log.records())
            .filter(|(_, r)| !r.is_intervention())
            .map(|(&loud, _)| loud)
            .collect();
        let expected = kept.iter().filter(|&&b| b).count() as f64 / kept.len() as f64;
        assert!((m.speech_ratio - expected).abs() < 1e-12, "{id}: {} vs {expected}", m.speech_ratio);
        assert_eq!(m.nudge_count, log.records().iter().filter(|r| r.is_intervention()).count() as u64);
    }

    let report = cohort_report(&logs, &[], &ReportConfig::default()).unwrap();
    assert_eq!(report.sessions.len(), 4);
    let out = dir.path().join("report");
    report.write_to_dir(&out).unwrap();
    assert!(out.join("report.json").is_file());
}

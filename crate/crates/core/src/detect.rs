//! Per-second speech detection.
//!
//! A [`Detector`] yields one [`ClassifiedSecond`] per session second. Two
//! detectors ship with the engine: an RMS energy gate over one-second audio
//! frames and a trace replayer for pre-labeled sessions. A learned classifier
//! can be plugged in by implementing the trait.

use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RMS_THRESHOLD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("frame has {len} samples but sample rate is {sample_rate} Hz")]
    LengthMismatch { len: usize, sample_rate: u32 },
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("sample {index} = {value} is outside [-1, 1]")]
    SampleOutOfRange { index: usize, value: f32 },
    #[error("rms threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("trace line {line}: {reason}")]
    TraceParse { line: usize, reason: String },
    #[error("unsupported wav: {0}")]
    UnsupportedWav(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Speech,
    NonSpeech,
}

impl Label {
    pub fn is_speech(self) -> bool {
        matches!(self, Label::Speech)
    }

    pub fn from_speech(speech: bool) -> Self {
        if speech {
            Label::Speech
        } else {
            Label::NonSpeech
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.is_speech() { "TRUE" } else { "FALSE" })
    }
}

/// One second of mono audio, samples normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFrame {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioFrame {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, DetectError> {
        if sample_rate == 0 {
            return Err(DetectError::ZeroSampleRate);
        }
        if samples.len() != sample_rate as usize {
            return Err(DetectError::LengthMismatch {
                len: samples.len(),
                sample_rate,
            });
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !(-1.0..=1.0).contains(*s))
        {
            return Err(DetectError::SampleOutOfRange { index, value });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn rms(&self) -> f64 {
        let sum_sq: f64 = self.samples.iter().map(|&s| f64::from(s).powi(2)).sum();
        (sum_sq / self.samples.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub rms_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            rms_threshold: DEFAULT_RMS_THRESHOLD,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.rms_threshold > 0.0 && self.rms_threshold.is_finite() {
            Ok(())
        } else {
            Err(DetectError::BadThreshold(self.rms_threshold))
        }
    }
}

/// Label and confidence for a single frame, before it is placed on the
/// session timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub label: Label,
    pub confidence: f64,
}

impl Verdict {
    pub fn at(self, t: u64) -> ClassifiedSecond {
        ClassifiedSecond {
            t,
            label: self.label,
            confidence: self.confidence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedSecond {
    pub t: u64,
    pub label: Label,
    pub confidence: f64,
}

/// Energy gate: Speech iff RMS >= threshold.
///
/// Confidence is `min(1, |rms - threshold| / threshold)`, so it is zero right
/// at the gate and saturates one full threshold away from it.
pub fn classify(frame: &AudioFrame, cfg: &DetectorConfig) -> Result<Verdict, DetectError> {
    cfg.validate()?;
    let rms = frame.rms();
    let label = Label::from_speech(rms >= cfg.rms_threshold);
    let confidence = ((rms - cfg.rms_threshold).abs() / cfg.rms_threshold).min(1.0);
    Ok(Verdict { label, confidence })
}

/// Source of per-second classifications. `Ok(None)` marks end of stream.
pub trait Detector {
    fn next_second(&mut self) -> Result<Option<ClassifiedSecond>, DetectError>;
}

/// Replays a fixed label sequence with confidence 1.0.
#[derive(Debug, Clone)]
pub struct TraceDetector {
    labels: Vec<Label>,
    cursor: usize,
}

impl TraceDetector {
    pub fn new(labels: Vec<Label>) -> Self {
        Self { labels, cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Next label, or `None` once the trace is exhausted.
    pub fn trace_next(&mut self) -> Option<ClassifiedSecond> {
        let label = *self.labels.get(self.cursor)?;
        let t = self.cursor as u64;
        self.cursor += 1;
        Some(ClassifiedSecond {
            t,
            label,
            confidence: 1.0,
        })
    }

    /// Parses a `t,label` trace where label is `TRUE` or `FALSE`.
    ///
    /// Rows must be numbered 0, 1, 2, ... without gaps.
    pub fn from_csv(text: &str) -> Result<Self, DetectError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "t,label" => {}
            Some((_, header)) => {
                return Err(DetectError::TraceParse {
                    line: 1,
                    reason: format!("expected header `t,label`, found `{header}`"),
                })
            }
            None => {
                return Err(DetectError::TraceParse {
                    line: 1,
                    reason: "empty trace".into(),
                })
            }
        }
        let mut labels = Vec::new();
        for (idx, raw) in lines {
            let line = idx + 1;
            let raw = raw.trim_end_matches('\r');
            if raw.is_empty() {
                continue;
            }
            let err = |reason: String| DetectError::TraceParse { line, reason };
            let (t, label) = raw
                .split_once(',')
                .ok_or_else(|| err(format!("expected two fields, found `{raw}`")))?;
            let t: u64 = t
                .trim()
                .parse()
                .map_err(|_| err(format!("bad second index `{t}`")))?;
            if t != labels.len() as u64 {
                return Err(err(format!("expected t = {}, found {t}", labels.len())));
            }
            let label = match label.trim() {
                "TRUE" => Label::Speech,
                "FALSE" => Label::NonSpeech,
                other => return Err(err(format!("label must be TRUE or FALSE, found `{other}`"))),
            };
            labels.push(label);
        }
        Ok(Self::new(labels))
    }

    pub fn from_path(path: &Path) -> Result<Self, DetectError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,label\n");
        for (t, label) in self.labels.iter().enumerate() {
            out.push_str(&format!("{t},{label}\n"));
        }
        out
    }
}

impl Detector for TraceDetector {
    fn next_second(&mut self) -> Result<Option<ClassifiedSecond>, DetectError> {
        Ok(self.trace_next())
    }
}

/// Runs [`classify`] over a stream of one-second frames.
pub struct EnergyDetector<I> {
    frames: I,
    cfg: DetectorConfig,
    t: u64,
}

impl<I> EnergyDetector<I>
where
    I: Iterator<Item = Result<AudioFrame, DetectError>>,
{
    pub fn new(frames: I, cfg: DetectorConfig) -> Result<Self, DetectError> {
        cfg.validate()?;
        Ok(Self { frames, cfg, t: 0 })
    }
}

impl<I> Detector for EnergyDetector<I>
where
    I: Iterator<Item = Result<AudioFrame, DetectError>>,
{
    fn next_second(&mut self) -> Result<Option<ClassifiedSecond>, DetectError> {
        let Some(frame) = self.frames.next().transpose()? else {
            return Ok(None);
        };
        let out = classify(&frame, &self.cfg)?.at(self.t);
        self.t += 1;
        Ok(Some(out))
    }
}

/// One-second frames read lazily from a mono 16-bit PCM WAV stream.
///
/// A trailing partial second is dropped.
pub struct WavFrames<R: Read> {
    samples: hound::WavIntoSamples<R, i16>,
    rate: u32,
    failed: bool,
}

impl<R: Read> WavFrames<R> {
    pub fn new(reader: R) -> Result<Self, DetectError> {
        let wav = hound::WavReader::new(reader)?;
        let spec = wav.spec();
        if spec.channels != 1 {
            return Err(DetectError::UnsupportedWav(format!(
                "{} channels, expected mono",
                spec.channels
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(DetectError::UnsupportedWav(format!(
                "{:?} {}-bit, expected 16-bit PCM",
                spec.sample_format, spec.bits_per_sample
            )));
        }
        Ok(Self {
            samples: wav.into_samples::<i16>(),
            rate: spec.sample_rate,
            failed: false,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.rate
    }
}

impl<R: Read> Iterator for WavFrames<R> {
    type Item = Result<AudioFrame, DetectError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let mut buf = Vec::with_capacity(self.rate as usize);
        for s in self.samples.by_ref().take(self.rate as usize) {
            match s {
                Ok(v) => buf.push((f32::from(v) / 32768.0).max(-1.0)),
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e.into()));
                }
            }
        }
        (buf.len() == self.rate as usize).then(|| AudioFrame::new(buf, self.rate))
    }
}

/// Reads a whole mono 16-bit PCM WAV into one-second frames.
pub fn wav_frames<R: Read>(reader: R) -> Result<Vec<AudioFrame>, DetectError> {
    WavFrames::new(reader)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, rate: u32, amp: f64) -> AudioFrame {
        let samples = (0..rate)
            .map(|n| (amp * (2.0 * PI * freq * f64::from(n) / f64::from(rate)).sin()) as f32)
            .collect();
        AudioFrame::new(samples, rate).unwrap()
    }

    #[test]
    fn silence_is_confident_non_speech() {
        let frame = AudioFrame::new(vec![0.0; 8000], 8000).unwrap();
        for thr in [0.001, 0.02, 0.5] {
            let v = classify(&frame, &DetectorConfig { rms_threshold: thr }).unwrap();
            assert_eq!(v.label, Label::NonSpeech);
            assert_eq!(v.confidence, 1.0);
        }
    }

    #[test]
    fn full_scale_sine_is_speech() {
        // 440 Hz completes an integer number of cycles in one second, so the
        // RMS is exactly 1/sqrt(2) up to f32 rounding.
        let frame = sine(440.0, 16_000, 1.0);
        assert!((frame.rms() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        let v = classify(&frame, &DetectorConfig { rms_threshold: 0.05 }).unwrap();
        assert_eq!(v.label, Label::Speech);
        assert_eq!(v.confidence, 1.0);
    }

    #[test]
    fn confidence_is_zero_at_the_gate() {
        let frame = AudioFrame::new(vec![0.1; 100], 100).unwrap();
        let v = classify(&frame, &DetectorConfig { rms_threshold: frame.rms() }).unwrap();
        assert_eq!(v.label, Label::Speech);
        assert!(v.confidence < 1e-9);
    }

    #[test]
    fn malformed_frames_are_rejected() {
        assert!(matches!(
            AudioFrame::new(vec![0.0; 99], 100),
            Err(DetectError::LengthMismatch { len: 99, .. })
        ));
        assert!(matches!(
            AudioFrame::new(vec![], 0),
            Err(DetectError::ZeroSampleRate)
        ));
        let mut s = vec![0.0; 10];
        s[3] = 1.5;
        assert!(matches!(
            AudioFrame::new(s, 10),
            Err(DetectError::SampleOutOfRange { index: 3, .. })
        ));
        let frame = AudioFrame::new(vec![0.0; 10], 10).unwrap();
        assert!(classify(&frame, &DetectorConfig { rms_threshold: 0.0 }).is_err());
    }

    #[test]
    fn trace_replays_in_order_then_ends() {
        let mut d = TraceDetector::new(vec![Label::Speech, Label::NonSpeech]);
        let first = d.trace_next().unwrap();
        assert_eq!((first.t, first.label, first.confidence), (0, Label::Speech, 1.0));
        let second = d.trace_next().unwrap();
        assert_eq!((second.t, second.label), (1, Label::NonSpeech));
        assert!(d.trace_next().is_none());
        assert!(d.next_second().unwrap().is_none());
    }

    #[test]
    fn trace_csv_parses_and_reports_line() {
        let d = TraceDetector::from_csv("t,label\n0,TRUE\n1,FALSE\n").unwrap();
        assert_eq!(d.labels(), &[Label::Speech, Label::NonSpeech]);
        assert_eq!(d.to_csv(), "t,label\n0,TRUE\n1,FALSE\n");

        let err = TraceDetector::from_csv("t,label\n0,TRUE\n1,maybe\n").unwrap_err();
        assert!(matches!(err, DetectError::TraceParse { line: 3, .. }), "{err}");
        let err = TraceDetector::from_csv("t,label\n0,TRUE\n2,TRUE\n").unwrap_err();
        assert!(matches!(err, DetectError::TraceParse { line: 3, .. }));
        assert!(TraceDetector::from_csv("time,speech\n").is_err());
    }

    #[test]
    fn wav_is_chunked_into_seconds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        // 2.5 seconds: one loud second, one silent second, half a second dropped.
        for n in 0..250 {
            let v: i16 = if n < 100 { 16_000 } else { 0 };
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();

        let frames = wav_frames(std::fs::File::open(&path).unwrap()).unwrap();
        assert_eq!(frames.len(), 2);
        let mut det = EnergyDetector::new(frames.into_iter().map(Ok), DetectorConfig::default()).unwrap();
        assert_eq!(det.next_second().unwrap().unwrap().label, Label::Speech);
        let s = det.next_second().unwrap().unwrap();
        assert_eq!((s.t, s.label), (1, Label::NonSpeech));
        assert!(det.next_second().unwrap().is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn amplification_never_silences_speech(
                samples in proptest::collection::vec(-0.5f32..0.5, 64),
                gain in 1.0f32..2.0,
                thr in 0.001f64..0.4,
            ) {
                let cfg = DetectorConfig { rms_threshold: thr };
                let base = classify(&AudioFrame::new(samples.clone(), 64).unwrap(), &cfg).unwrap();
                let louder: Vec<f32> = samples.iter().map(|s| s * gain).collect();
                let loud = classify(&AudioFrame::new(louder, 64).unwrap(), &cfg).unwrap();
                if base.label == Label::Speech {
                    prop_assert_eq!(loud.label, Label::Speech);
                }
                prop_assert!((0.0..=1.0).contains(&loud.confidence));
                let again = classify(&AudioFrame::new(samples, 64).unwrap(), &cfg).unwrap();
                prop_assert_eq!(base, again);
            }
        }
    }
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lull_serviced::{RunMode, SessionConfig};

/// Writes a `t,label` trace where `1` is speech and anything else silence.
pub fn write_trace(dir: &Path, name: &str, labels: &str) -> PathBuf {
    let mut text = String::from("t,label\n");
    for (t, c) in labels.chars().enumerate() {
        text.push_str(&format!("{t},{}\n", if c == '1' { "TRUE" } else { "FALSE" }));
    }
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

pub fn replay_config(trace: PathBuf, out: &Path) -> SessionConfig {
    let mut cfg = SessionConfig::new(RunMode::Replay);
    cfg.source.trace = Some(trace);
    cfg.output_dir = Some(out.to_path_buf());
    cfg
}

/// Mono 16-bit WAV header for `declared` samples, followed by `written`
/// samples of a loud or quiet square wave per second.
pub fn wav_bytes(rate: u32, declared: u32, seconds_loud: &[bool], written: u32) -> Vec<u8> {
    let data_len = declared * 2;
    let mut out = Vec::new();
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for i in 0..written {
        let loud = seconds_loud[(i / rate) as usize % seconds_loud.len()];
        let amp: i16 = if loud { 8000 } else { 10 };
        let s = if i % 2 == 0 { amp } else { -amp };
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

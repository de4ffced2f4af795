//! Per-second "amount of conversation" score.
//!
//! The score is the rounded percentage of Speech seconds over a sliding
//! window of the last `window` seconds. During warm-up the denominator is the
//! number of seconds seen so far.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{ClassifiedSecond, Label};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("expected second {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("invalid score config: {0}")]
    Config(String),
}

/// Which counter decides that a lull is in progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LullBasis {
    /// Score below threshold for `lull_duration` seconds.
    #[default]
    Score,
    /// `lull_duration` consecutive NonSpeech seconds.
    Silence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub window: u32,
    pub lull_threshold: u8,
    pub lull_duration: u64,
    pub lull_basis: LullBasis,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            window: 20,
            lull_threshold: 30,
            lull_duration: 120,
            lull_basis: LullBasis::Score,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.window == 0 {
            return Err(ScoreError::Config("window must be >= 1".into()));
        }
        if self.lull_threshold == 0 || self.lull_threshold >= 100 {
            return Err(ScoreError::Config(format!(
                "lull_threshold must be in (0, 100), got {}",
                self.lull_threshold
            )));
        }
        if self.lull_duration == 0 {
            return Err(ScoreError::Config("lull_duration must be >= 1".into()));
        }
        Ok(())
    }
}

/// Rounded percentage `100 * speech / occupied`, half rounded up.
pub fn window_score(speech: usize, occupied: usize) -> u8 {
    if occupied == 0 {
        return 0;
    }
    ((200 * speech + occupied) / (2 * occupied)) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Undo {
    below_threshold_run: u64,
    silence_run: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationState {
    next_t: u64,
    score: u8,
    window: VecDeque<bool>,
    window_len: usize,
    speech_in_window: usize,
    below_threshold_run: u64,
    silence_run: u64,
    undo: Option<Undo>,
}

impl ConversationState {
    pub fn new(cfg: &ScoreConfig) -> Self {
        Self {
            next_t: 0,
            score: 0,
            window: VecDeque::with_capacity(cfg.window as usize),
            window_len: cfg.window as usize,
            speech_in_window: 0,
            below_threshold_run: 0,
            silence_run: 0,
            undo: None,
        }
    }

    /// Last processed second, `None` before the first update.
    pub fn t(&self) -> Option<u64> {
        self.next_t.checked_sub(1)
    }

    pub fn seconds_seen(&self) -> u64 {
        self.next_t
    }

    pub fn score(&self) -> u8 {
        self.score
    }

    pub fn below_threshold_run(&self) -> u64 {
        self.below_threshold_run
    }

    pub fn silence_run(&self) -> u64 {
        self.silence_run
    }

    /// Speech flag of the most recent second.
    pub fn last_flag(&self) -> Option<bool> {
        self.window.back().copied()
    }

    pub fn window_flags(&self) -> impl Iterator<Item = bool> + '_ {
        self.window.iter().copied()
    }

    pub fn update(&mut self, ev: &ClassifiedSecond, cfg: &ScoreConfig) -> Result<(), ScoreError> {
        if ev.t != self.next_t {
            return Err(ScoreError::OutOfOrder {
                expected: self.next_t,
                got: ev.t,
            });
        }
        self.push(ev.label, cfg);
        Ok(())
    }

    fn push(&mut self, label: Label, cfg: &ScoreConfig) {
        let speech = label.is_speech();
        self.undo = Some(Undo {
            below_threshold_run: self.below_threshold_run,
            silence_run: self.silence_run,
        });
        if self.window.len() == self.window_len && self.window.pop_front() == Some(true) {
            self.speech_in_window -= 1;
        }
        self.window.push_back(speech);
        if speech {
            self.speech_in_window += 1;
        }
        self.next_t += 1;
        self.refresh(speech, cfg);
    }

    fn refresh(&mut self, speech: bool, cfg: &ScoreConfig) {
        let undo = self.undo.expect("refresh follows push");
        self.score = window_score(self.speech_in_window, self.window.len());
        self.below_threshold_run = if self.score < cfg.lull_threshold {
            undo.below_threshold_run + 1
        } else {
            0
        };
        self.silence_run = if speech { 0 } else { undo.silence_run + 1 };
    }

    /// Re-scores the current second as NonSpeech.
    ///
    /// Used when the device itself is playing audio during this second: the
    /// log carries no speech flag for such rows and they count as silence.
    pub fn mask_current_as_silence(&mut self, cfg: &ScoreConfig) {
        if let Some(flag) = self.window.back_mut() {
            if *flag {
                *flag = false;
                self.speech_in_window -= 1;
            }
            self.refresh(false, cfg);
        }
    }

    pub fn is_lull(&self, cfg: &ScoreConfig) -> bool {
        let run = match cfg.lull_basis {
            LullBasis::Score => self.below_threshold_run,
            LullBasis::Silence => self.silence_run,
        };
        run >= cfg.lull_duration
    }
}

/// Replays a flag sequence from a fresh state and returns the score after each
/// second. `None` entries (intervention rows) are scored as silence.
pub fn replay_scores(flags: &[Option<bool>], cfg: &ScoreConfig) -> Vec<u8> {
    let mut state = ConversationState::new(cfg);
    flags
        .iter()
        .map(|flag| {
            state.push(Label::from_speech(flag.unwrap_or(false)), cfg);
            state.score()
        })
        .collect()
}

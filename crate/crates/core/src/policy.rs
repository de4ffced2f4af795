//! Nudge scheduling.
//!
//! Light follows the score. Audio nudges fire during lulls, each one is
//! scored by comparing the speech ratio in the `eval_window` seconds before
//! and after it, failures stretch the gap to the next nudge geometrically,
//! and after `max_audio_attempts` consecutive failures the device gives up on
//! audio and keeps only the light.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{NudgeRef, NudgeSource};
use crate::score::{ConversationState, ScoreConfig};

/// Slack for comparing ratio differences against the success margin.
const RATIO_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("policy expected second {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("an audio nudge already played at second {0}")]
    RateLimited(u64),
    #[error("invalid policy config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Minimum gap (s) before the first nudge and after a successful one.
    pub base_gap: u64,
    pub backoff_multiplier: f64,
    /// Added once per failed attempt; with a multiplier of 1 this gives an
    /// arithmetic schedule.
    pub backoff_step: u64,
    pub max_audio_attempts: u32,
    pub eval_window: u64,
    pub success_margin: f64,
    pub light_enabled: bool,
    /// Light turns off only once the score reaches threshold + this margin.
    pub light_hysteresis: u8,
    pub auto_enabled: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            base_gap: 120,
            backoff_multiplier: 2.0,
            backoff_step: 0,
            max_audio_attempts: 3,
            eval_window: 60,
            success_margin: 0.10,
            light_enabled: true,
            light_hysteresis: 0,
            auto_enabled: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if self.eval_window == 0 {
            return bad("eval_window must be >= 1".into());
        }
        if self.base_gap < self.eval_window {
            return bad(format!(
                "base_gap ({}) must be >= eval_window ({})",
                self.base_gap, self.eval_window
            ));
        }
        if !(self.backoff_multiplier >= 1.0 && self.backoff_multiplier.is_finite()) {
            return bad(format!("backoff_multiplier must be >= 1, got {}", self.backoff_multiplier));
        }
        if !(0.0..=1.0).contains(&self.success_margin) {
            return bad(format!("success_margin must be in [0, 1], got {}", self.success_margin));
        }
        Ok(())
    }

    /// Eligibility gap after `failed` consecutive failures.
    pub fn gap(&self, failed: u32) -> u64 {
        let geometric = self.base_gap as f64 * self.backoff_multiplier.powi(failed as i32);
        let geometric = if geometric >= u64::MAX as f64 {
            u64::MAX
        } else {
            geometric.round() as u64
        };
        geometric.saturating_add(self.backoff_step.saturating_mul(u64::from(failed)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Watching,
    Evaluating,
    LightOnly,
    Disarmed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NudgeOrigin {
    Auto,
    Wizard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pending {
    pub nudge_t: u64,
    pub pre_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    LightOn,
    LightOff,
    PlayAudio { item: NudgeRef, origin: NudgeOrigin },
    GaveUp,
    NoContent,
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::LightOn => "light_on",
            Action::LightOff => "light_off",
            Action::PlayAudio { .. } => "play_audio",
            Action::GaveUp => "gave_up",
            Action::NoContent => "no_content",
        }
    }

    pub fn is_audio(&self) -> bool {
        matches!(self, Action::PlayAudio { .. })
    }

    pub fn event(&self, t: u64) -> PolicyEvent {
        let (item_id, origin) = match self {
            Action::PlayAudio { item, origin } => (Some(item.item_id.clone()), Some(*origin)),
            _ => (None, None),
        };
        PolicyEvent {
            t,
            kind: self.kind().to_string(),
            item_id,
            origin,
        }
    }
}

/// Wire form of an [`Action`]: `{t, kind, item_id?}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEvent {
    pub t: u64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<NudgeOrigin>,
}

/// Effect test for one nudge.
pub fn evaluate(pre_ratio: f64, post_ratio: f64, cfg: &PolicyConfig) -> bool {
    post_ratio - pre_ratio + RATIO_EPS >= cfg.success_margin
}

/// Outcome of one evaluated nudge, kept for status and reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub nudge_t: u64,
    pub pre_ratio: f64,
    pub post_ratio: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    mode: Mode,
    attempts_failed: u32,
    next_eligible_t: u64,
    pending: Option<Pending>,
    light_on: bool,
    /// Speech flags of the last `eval_window` seconds; `None` marks seconds
    /// the device itself was playing audio.
    recent: VecDeque<Option<bool>>,
    recent_cap: usize,
    last_audio_t: Option<u64>,
    skipping_lull: bool,
    next_t: u64,
    evaluations: Vec<Evaluation>,
}

impl PolicyState {
    pub fn new(cfg: &PolicyConfig) -> Self {
        let mode = if cfg.max_audio_attempts == 0 {
            Mode::LightOnly
        } else if cfg.auto_enabled {
            Mode::Watching
        } else {
            Mode::Disarmed
        };
        Self {
            mode,
            attempts_failed: 0,
            next_eligible_t: cfg.gap(0),
            pending: None,
            light_on: false,
            recent: VecDeque::with_capacity(cfg.eval_window as usize),
            recent_cap: cfg.eval_window as usize,
            last_audio_t: None,
            skipping_lull: false,
            next_t: 0,
            evaluations: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn attempts_failed(&self) -> u32 {
        self.attempts_failed
    }

    pub fn next_eligible_t(&self) -> u64 {
        self.next_eligible_t
    }

    pub fn pending(&self) -> Option<&Pending> {
        self.pending.as_ref()
    }

    pub fn light_on(&self) -> bool {
        self.light_on
    }

    pub fn evaluations(&self) -> &[Evaluation] {
        &self.evaluations
    }

    pub fn auto_armed(&self) -> bool {
        matches!(self.mode, Mode::Watching | Mode::Evaluating)
    }

    /// Switches between automatic and operator-only audio. Give-up is sticky.
    pub fn set_auto(&mut self, enabled: bool) {
        match (enabled, self.mode) {
            (false, Mode::Watching | Mode::Evaluating) => {
                self.mode = Mode::Disarmed;
                self.pending = None;
            }
            (true, Mode::Disarmed) => self.mode = Mode::Watching,
            _ => {}
        }
    }

    fn speech_ratio(&self) -> f64 {
        let (speech, flagged) = self
            .recent
            .iter()
            .flatten()
            .fold((0usize, 0usize), |(s, n), &f| (s + usize::from(f), n + 1));
        if flagged == 0 {
            0.0
        } else {
            speech as f64 / flagged as f64
        }
    }

    fn remember(&mut self, flag: Option<bool>) {
        if self.recent_cap == 0 {
            return;
        }
        if self.recent.len() == self.recent_cap {
            self.recent.pop_front();
        }
        self.recent.push_back(flag);
    }

    /// Operator-fired nudge for second `t`. It is played regardless of mode,
    /// is never scored, and does not count as an automatic attempt.
    pub fn wizard_play(&mut self, item: NudgeRef, t: u64) -> Result<Action, PolicyError> {
        if self.last_audio_t == Some(t) {
            return Err(PolicyError::RateLimited(t));
        }
        if t != self.next_t {
            return Err(PolicyError::OutOfOrder {
                expected: self.next_t,
                got: t,
            });
        }
        self.last_audio_t = Some(t);
        Ok(Action::PlayAudio {
            item,
            origin: NudgeOrigin::Wizard,
        })
    }

    /// Whether an audio nudge is already playing at second `t`.
    pub fn audio_at(&self, t: u64) -> bool {
        self.last_audio_t == Some(t)
    }

    /// Runs once per session second, after the score update for `t`.
    ///
    /// If audio plays during `t` (automatic or operator-fired), the second is
    /// re-scored as silence in `conv` before the light is updated.
    pub fn on_tick(
        &mut self,
        t: u64,
        conv: &mut ConversationState,
        cfg: &PolicyConfig,
        score_cfg: &ScoreConfig,
        content: &mut dyn NudgeSource,
    ) -> Result<Vec<Action>, PolicyError> {
        if t != self.next_t {
            return Err(PolicyError::OutOfOrder {
                expected: self.next_t,
                got: t,
            });
        }
        let mut actions = Vec::new();
        let mut audio_now = self.audio_at(t);
        let mut remembered = false;
        let lull = conv.is_lull(score_cfg);

        if let Some(pending) = self.pending.clone().filter(|p| t >= p.nudge_t + cfg.eval_window) {
            self.remember(if audio_now { None } else { conv.last_flag() });
            remembered = true;
            let post_ratio = self.speech_ratio();
            let success = evaluate(pending.pre_ratio, post_ratio, cfg);
            self.evaluations.push(Evaluation {
                nudge_t: pending.nudge_t,
                pre_ratio: pending.pre_ratio,
                post_ratio,
                success,
            });
            self.pending = None;
            if success {
                self.attempts_failed = 0;
                self.next_eligible_t = t + cfg.gap(0);
                self.mode = Mode::Watching;
            } else {
                self.attempts_failed += 1;
                if self.attempts_failed >= cfg.max_audio_attempts {
                    self.mode = Mode::LightOnly;
                    actions.push(Action::GaveUp);
                } else {
                    self.next_eligible_t = t.saturating_add(cfg.gap(self.attempts_failed));
                    self.mode = Mode::Watching;
                }
            }
        } else if self.mode == Mode::Watching
            && !audio_now
            && lull
            && !self.skipping_lull
            && t >= self.next_eligible_t
        {
            let pre_ratio = self.speech_ratio();
            match content.next_nudge() {
                Ok(item) => {
                    audio_now = true;
                    self.last_audio_t = Some(t);
                    self.pending = Some(Pending { nudge_t: t, pre_ratio });
                    self.mode = Mode::Evaluating;
                    actions.push(Action::PlayAudio {
                        item,
                        origin: NudgeOrigin::Auto,
                    });
                }
                Err(_) => {
                    self.skipping_lull = true;
                    actions.push(Action::NoContent);
                }
            }
        }
        if !lull {
            self.skipping_lull = false;
        }

        if audio_now {
            conv.mask_current_as_silence(score_cfg);
        }
        if !remembered {
            self.remember(if audio_now { None } else { conv.last_flag() });
        }

        if cfg.light_enabled {
            let threshold = score_cfg.lull_threshold;
            let want = if self.light_on {
                u16::from(conv.score()) < u16::from(threshold) + u16::from(cfg.light_hysteresis)
            } else {
                conv.score() < threshold
            };
            if want != self.light_on {
                self.light_on = want;
                actions.push(if want { Action::LightOn } else { Action::LightOff });
            }
        }

        self.next_t = t + 1;
        Ok(actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::content::ContentError;
    use crate::detect::{ClassifiedSecond, Label};

    /// Hands out numbered items forever, or a fixed number of them.
    struct Counter {
        issued: usize,
        limit: usize,
    }

    impl NudgeSource for Counter {
        fn next_nudge(&mut self) -> Result<NudgeRef, ContentError> {
            if self.issued == self.limit {
                return Err(ContentError::NoContent);
            }
            self.issued += 1;
            Ok(NudgeRef {
                item_id: format!("n{}", self.issued),
                audio_ref: None,
                text: None,
            })
        }
    }

    fn unlimited() -> Counter {
        Counter {
            issued: 0,
            limit: usize::MAX,
        }
    }

    struct Rig {
        score_cfg: ScoreConfig,
        cfg: PolicyConfig,
        conv: ConversationState,
        policy: PolicyState,
        t: u64,
    }

    impl Rig {
        fn new(cfg: PolicyConfig) -> Self {
            let score_cfg = ScoreConfig::default();
            Self {
                conv: ConversationState::new(&score_cfg),
                policy: PolicyState::new(&cfg),
                score_cfg,
                cfg,
                t: 0,
            }
        }

        fn step(&mut self, speech: bool, content: &mut dyn NudgeSource) -> Vec<Action> {
            let ev = ClassifiedSecond {
                t: self.t,
                label: Label::from_speech(speech),
                confidence: 1.0,
            };
            self.conv.update(&ev, &self.score_cfg).unwrap();
            let out = self
                .policy
                .on_tick(self.t, &mut self.conv, &self.cfg, &self.score_cfg, content)
                .unwrap();
            self.t += 1;
            out
        }
    }

    #[test]
    fn silent_dyad_gets_three_nudges_then_give_up() {
        let mut rig = Rig::new(PolicyConfig::default());
        let mut content = unlimited();
        let mut audio = Vec::new();
        let mut gave_up = Vec::new();
        let mut eligibility = vec![rig.policy.next_eligible_t()];
        for _ in 0..3600 {
            let t = rig.t;
            let before = rig.policy.next_eligible_t();
            for a in rig.step(false, &mut content) {
                match a {
                    Action::PlayAudio { .. } => audio.push(t),
                    Action::GaveUp => gave_up.push(t),
                    _ => {}
                }
            }
            let after = rig.policy.next_eligible_t();
            assert!(after >= before);
            if after != before {
                eligibility.push(after - t);
            }
        }
        // First nudge waits for the base gap, then 120*2 and 120*4 after
        // each failed evaluation.
        assert_eq!(eligibility, vec![120, 240, 480]);
        assert_eq!(audio, vec![120, 420, 960]);
        assert_eq!(gave_up, vec![1020]);
        assert_eq!(rig.policy.mode(), Mode::LightOnly);
        assert_eq!(rig.policy.attempts_failed(), 3);
        assert!(rig.policy.light_on());
    }

    #[test]
    fn success_resets_backoff() {
        let mut rig = Rig::new(PolicyConfig::default());
        let mut content = unlimited();
        let mut nudge_t = None;
        while nudge_t.is_none() {
            let t = rig.t;
            if rig.step(false, &mut content).iter().any(Action::is_audio) {
                nudge_t = Some(t);
            }
        }
        let nudge_t = nudge_t.unwrap();
        // Talk for the whole evaluation window.
        for _ in 0..60 {
            rig.step(true, &mut content);
        }
        let ev = rig.policy.evaluations()[0].clone();
        assert_eq!(ev.nudge_t, nudge_t);
        assert_eq!(ev.pre_ratio, 0.0);
        assert_eq!(ev.post_ratio, 1.0);
        assert!(ev.success);
        assert_eq!(rig.policy.attempts_failed(), 0);
        assert_eq!(rig.policy.next_eligible_t(), nudge_t + 60 + 120);
        assert_eq!(rig.policy.mode(), Mode::Watching);
    }

    #[test]
    fn evaluate_margins() {
        let cfg = PolicyConfig::default();
        assert!(evaluate(0.0, 0.5, &cfg));
        assert!(!evaluate(0.2, 0.2, &cfg));
        assert!(evaluate(0.2, 0.31, &cfg));
        assert!(evaluate(0.2, 0.3, &cfg));
        assert!(!evaluate(0.9, 0.95, &cfg));
    }

    #[test]
    fn gap_schedule() {
        let cfg = PolicyConfig::default();
        assert_eq!((0..3).map(|k| cfg.gap(k)).collect::<Vec<_>>(), vec![120, 240, 480]);
        let arithmetic = PolicyConfig {
            base_gap: 600,
            backoff_multiplier: 1.0,
            backoff_step: 600,
            ..PolicyConfig::default()
        };
        assert_eq!(arithmetic.gap(0), 600);
        assert_eq!(arithmetic.gap(1), 1200);
        assert_eq!(PolicyConfig::default().gap(200), u64::MAX);
    }

    #[test]
    fn config_validation() {
        assert!(PolicyConfig::default().validate().is_ok());
        let overlapping = PolicyConfig {
            base_gap: 30,
            ..PolicyConfig::default()
        };
        assert!(overlapping.validate().is_err());
        let shrinking = PolicyConfig {
            backoff_multiplier: 0.5,
            ..PolicyConfig::default()
        };
        assert!(shrinking.validate().is_err());
    }

    #[test]
    fn wizard_overrides_give_up_and_is_rate_limited() {
        let mut rig = Rig::new(PolicyConfig::default());
        let mut content = unlimited();
        for _ in 0..1100 {
            rig.step(false, &mut content);
        }
        assert_eq!(rig.policy.mode(), Mode::LightOnly);
        let item = NudgeRef {
            item_id: "crime#0".into(),
            audio_ref: None,
            text: None,
        };
        let t = rig.t;
        let a = rig.policy.wizard_play(item.clone(), t).unwrap();
        assert!(matches!(a, Action::PlayAudio { origin: NudgeOrigin::Wizard, .. }));
        assert_eq!(rig.policy.wizard_play(item, t), Err(PolicyError::RateLimited(t)));
        let out = rig.step(false, &mut content);
        assert!(!out.iter().any(Action::is_audio));
        assert_eq!(rig.policy.mode(), Mode::LightOnly);
        assert_eq!(rig.policy.attempts_failed(), 3);
    }

    #[test]
    fn wizard_nudge_is_not_scored_and_blocks_auto_that_second() {
        let mut rig = Rig::new(PolicyConfig::default());
        let mut content = unlimited();
        for _ in 0..120 {
            rig.step(false, &mut content);
        }
        // Second 120 is the first eligible one; the operator gets there first.
        let item = NudgeRef {
            item_id: "w".into(),
            audio_ref: None,
            text: None,
        };
        rig.policy.wizard_play(item, 120).unwrap();
        let out = rig.step(true, &mut content);
        assert_eq!(out.iter().filter(|a| a.is_audio()).count(), 0);
        assert_eq!(rig.policy.mode(), Mode::Watching);
        assert!(rig.policy.pending().is_none());
        // Masked as silence.
        assert_eq!(rig.conv.last_flag(), Some(false));
        // The automatic path fires on the next second instead.
        let out = rig.step(false, &mut content);
        assert_eq!(out.iter().filter(|a| a.is_audio()).count(), 1);
    }

    #[test]
    fn wizard_mode_disarms_auto() {
        let mut rig = Rig::new(PolicyConfig::default());
        rig.policy.set_auto(false);
        let mut content = unlimited();
        for _ in 0..3600 {
            assert!(!rig.step(false, &mut content).iter().any(Action::is_audio));
        }
        assert_eq!(rig.policy.mode(), Mode::Disarmed);
        rig.policy.set_auto(true);
        assert_eq!(rig.policy.mode(), Mode::Watching);
        let starts_disarmed = PolicyState::new(&PolicyConfig {
            auto_enabled: false,
            ..PolicyConfig::default()
        });
        assert_eq!(starts_disarmed.mode(), Mode::Disarmed);
    }

    #[test]
    fn no_content_skips_the_lull_without_counting() {
        let mut rig = Rig::new(PolicyConfig::default());
        let mut content = Counter { issued: 0, limit: 0 };
        let mut no_content = 0;
        for _ in 0..600 {
            no_content += rig
                .step(false, &mut content)
                .iter()
                .filter(|a| **a == Action::NoContent)
                .count();
        }
        assert_eq!(no_content, 1);
        assert_eq!(rig.policy.attempts_failed(), 0);
        assert_eq!(rig.policy.mode(), Mode::Watching);
        // A fresh lull tries again.
        for _ in 0..30 {
            rig.step(true, &mut content);
        }
        let mut again = 0;
        for _ in 0..200 {
            again += rig
                .step(false, &mut content)
                .iter()
                .filter(|a| **a == Action::NoContent)
                .count();
        }
        assert_eq!(again, 1);
    }

    #[test]
    fn light_hysteresis() {
        let cfg = PolicyConfig {
            light_hysteresis: 20,
            ..PolicyConfig::default()
        };
        let mut rig = Rig::new(cfg);
        let mut content = unlimited();
        let mut events = Vec::new();
        for _ in 0..20 {
            events.extend(rig.step(false, &mut content));
        }
        assert_eq!(events, vec![Action::LightOn]);
        // 8 of 20 speech = 40 < 30 + 20, light stays on.
        for _ in 0..8 {
            events.extend(rig.step(true, &mut content));
        }
        assert_eq!(rig.conv.score(), 40);
        assert!(rig.policy.light_on());
        for _ in 0..2 {
            events.extend(rig.step(true, &mut content));
        }
        assert_eq!(rig.conv.score(), 50);
        assert!(!rig.policy.light_on());
        assert_eq!(events, vec![Action::LightOn, Action::LightOff]);
    }

    #[test]
    fn zero_attempts_means_light_only_from_the_start() {
        let cfg = PolicyConfig {
            max_audio_attempts: 0,
            ..PolicyConfig::default()
        };
        let mut rig = Rig::new(cfg);
        let mut content = unlimited();
        for _ in 0..1000 {
            assert!(!rig.step(false, &mut content).iter().any(Action::is_audio));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn state_machine_invariants(
                flags in proptest::collection::vec(prop_oneof![3 => Just(false), 1 => Just(true)], 1..2500),
                attempts in 1u32..5,
                hysteresis in 0u8..2,
            ) {
                let cfg = PolicyConfig {
                    max_audio_attempts: attempts,
                    light_hysteresis: hysteresis,
                    ..PolicyConfig::default()
                };
                let mut rig = Rig::new(cfg);
                let mut content = unlimited();
                let mut gave_up = false;
                let mut prev_eligible = rig.policy.next_eligible_t();
                for &f in &flags {
                    let out = rig.step(f, &mut content);
                    let audio = out.iter().filter(|a| a.is_audio()).count();
                    prop_assert!(audio <= 1);
                    if gave_up {
                        prop_assert_eq!(audio, 0);
                    }
                    gave_up |= out.contains(&Action::GaveUp);
                    prop_assert!(rig.policy.attempts_failed() <= attempts);
                    prop_assert_eq!(rig.policy.pending().is_some(), rig.policy.mode() == Mode::Evaluating);
                    prop_assert!(rig.policy.next_eligible_t() >= prev_eligible);
                    prev_eligible = rig.policy.next_eligible_t();
                    if hysteresis == 0 {
                        prop_assert_eq!(rig.policy.light_on(), rig.conv.score() < 30);
                    }
                }
            }
        }
    }
}

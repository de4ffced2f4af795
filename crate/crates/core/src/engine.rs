//! One-second tick composition shared by the daemon, replay and the
//! simulator: classify → score update → policy → append.

use std::sync::Arc;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{
    AutoContent, ContentError, Corpus, NudgeRef, NudgeRequest, Preferences, SessionContent,
    StoryLibrary,
};
use crate::detect::{ClassifiedSecond, DetectError, Detector, DetectorConfig};
use crate::policy::{Action, Mode, PolicyConfig, PolicyError, PolicyEvent, PolicyState};
use crate::score::{ConversationState, ScoreConfig, ScoreError};
use crate::sessionlog::{Arm, LogError, SessionLog, SessionMetadata, SessionRecord};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Content(#[from] ContentError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("control-arm sessions never play nudges")]
    ControlArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContentConfig {
    /// Preferred fact genres; empty means every genre in the corpus.
    pub preferences: Vec<String>,
    pub auto: AutoContent,
    pub seed: u64,
}

impl Default for ContentConfig {
    fn default() -> Self {
        Self {
            preferences: Vec::new(),
            auto: AutoContent::Facts,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub detector: DetectorConfig,
    pub score: ScoreConfig,
    pub policy: PolicyConfig,
    pub content: ContentConfig,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        self.detector.validate()?;
        self.score.validate()?;
        self.policy.validate()?;
        Ok(())
    }

    /// Effective config for an arm: control sessions keep the device dark
    /// and silent but still log.
    pub fn for_arm(&self, arm: Arm) -> Self {
        let mut cfg = self.clone();
        if arm == Arm::Control {
            cfg.policy.auto_enabled = false;
            cfg.policy.light_enabled = false;
        }
        cfg
    }
}

/// What the event stream publishes once per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickEvent {
    pub t: u64,
    pub score: u8,
    /// `null` on seconds where the device was playing a nudge.
    pub speech: Option<bool>,
    pub light: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<PolicyEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickReport {
    pub t: u64,
    pub record: SessionRecord,
    pub light: bool,
    pub actions: Vec<Action>,
    pub mode: Mode,
    pub attempts_failed: u32,
}

impl TickReport {
    pub fn event(&self) -> TickEvent {
        TickEvent {
            t: self.t,
            score: self.record.score,
            speech: self.record.speech(),
            light: self.light,
            action: self
                .actions
                .iter()
                .find(|a| !matches!(a, Action::LightOn | Action::LightOff))
                .map(|a| a.event(self.t)),
        }
    }

    pub fn policy_events(&self) -> Vec<PolicyEvent> {
        self.actions.iter().map(|a| a.event(self.t)).collect()
    }
}

pub struct Engine {
    cfg: EngineConfig,
    conv: ConversationState,
    policy: PolicyState,
    content: SessionContent,
    log: SessionLog,
    queued: Option<NudgeRef>,
}

impl Engine {
    /// `metadata.config` is overwritten with the effective config for `arm`.
    pub fn new(
        session_id: impl Into<String>,
        arm: Arm,
        cfg: &EngineConfig,
        mut metadata: SessionMetadata,
        corpus: Arc<Corpus>,
        stories: Arc<StoryLibrary>,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        let cfg = cfg.for_arm(arm);
        let prefs = if cfg.content.preferences.is_empty() {
            Preferences::all(&corpus)
        } else {
            Preferences::new(cfg.content.preferences.iter().cloned(), &corpus)?
        };
        let content =
            SessionContent::new(corpus, stories, prefs.clone(), cfg.content.auto.clone(), cfg.content.seed)?;
        metadata.config = cfg.clone();
        metadata.preferred_genres = prefs.genres().map(String::from).collect();
        Ok(Self {
            conv: ConversationState::new(&cfg.score),
            policy: PolicyState::new(&cfg.policy),
            content,
            log: SessionLog::new(session_id, arm, metadata),
            queued: None,
            cfg,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn next_t(&self) -> u64 {
        self.conv.seconds_seen()
    }

    pub fn conversation(&self) -> &ConversationState {
        &self.conv
    }

    pub fn policy(&self) -> &PolicyState {
        &self.policy
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut SessionLog {
        &mut self.log
    }

    pub fn content(&self) -> &SessionContent {
        &self.content
    }

    pub fn finish(self) -> SessionLog {
        self.log
    }

    pub fn set_auto(&mut self, enabled: bool) {
        if self.log.group == Arm::Experiment {
            self.policy.set_auto(enabled);
        }
    }

    /// Queues an operator nudge for the next tick. Only one nudge may be
    /// queued per tick.
    pub fn queue_nudge(&mut self, req: &NudgeRequest) -> Result<NudgeRef, EngineError> {
        if self.log.group == Arm::Control {
            return Err(EngineError::ControlArm);
        }
        if self.queued.is_some() {
            return Err(PolicyError::RateLimited(self.next_t()).into());
        }
        let item = self.content.resolve(req)?;
        self.queued = Some(item.clone());
        Ok(item)
    }

    pub fn has_queued_nudge(&self) -> bool {
        self.queued.is_some()
    }

    pub fn tick(&mut self, ev: &ClassifiedSecond) -> Result<TickReport, EngineError> {
        let t = ev.t;
        self.conv.update(ev, &self.cfg.score)?;
        let mut actions = Vec::new();
        if let Some(item) = self.queued.take() {
            actions.push(self.policy.wizard_play(item, t)?);
        }
        actions.extend(self.policy.on_tick(
            t,
            &mut self.conv,
            &self.cfg.policy,
            &self.cfg.score,
            &mut self.content,
        )?);
        let time = self.log.metadata.start_time + TimeDelta::seconds(t as i64);
        let record = if self.policy.audio_at(t) {
            SessionRecord::intervention(time, self.conv.score())
        } else {
            SessionRecord::observed(time, self.conv.score(), ev.label.is_speech())
        };
        self.log.append(record)?;
        Ok(TickReport {
            t,
            record,
            light: self.policy.light_on(),
            actions,
            mode: self.policy.mode(),
            attempts_failed: self.policy.attempts_failed(),
        })
    }

    /// Drives the engine from a detector in virtual time until the detector
    /// ends or `max_seconds` ticks have run.
    pub fn run(
        &mut self,
        detector: &mut dyn Detector,
        max_seconds: Option<u64>,
        mut on_tick: impl FnMut(&TickReport),
    ) -> Result<(), EngineError> {
        while max_seconds.is_none_or(|m| self.next_t() < m) {
            let Some(ev) = detector.next_second()? else {
                break;
            };
            let report = self.tick(&ev)?;
            on_tick(&report);
        }
        Ok(())
    }
}

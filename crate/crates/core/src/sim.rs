//! Seeded dyad simulator and two-arm experiment harness.
//!
//! A dyad is a two-state chain over joint speech presence, advanced once per
//! second with a single uniform draw. Control and experiment sessions with the
//! same index share their draws, so arm differences come from the policy
//! alone.

use std::path::Path;
use std::sync::Arc;

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{cohort_report, write_cohort_csv, AnalyticsError, CohortReport, CohortRow, ReportConfig};
use crate::content::{Corpus, StoryLibrary};
use crate::detect::{ClassifiedSecond, Label};
use crate::engine::{Engine, EngineConfig, EngineError};
use crate::sessionlog::{Arm, LogError, SessionLog, SessionMetadata};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid dyad profile: {0}")]
    Profile(String),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("plan: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadProfile {
    pub p_init_talk: f64,
    /// Chance that talking continues into the next second.
    pub p_continue_talk: f64,
    /// Chance that a silent dyad starts talking in the next second.
    pub p_resume_talk: f64,
    /// Resume chance while a nudge is still working.
    pub p_r: f64,
    #[serde(default = "default_horizon")]
    pub response_horizon_k: u64,
}

fn default_horizon() -> u64 {
    10
}

impl DyadProfile {
    pub const PRESETS: [&'static str; 4] = ["responsive", "unresponsive", "close_friends", "storytelling"];

    /// Talks a little over half the time in long stretches and resumes readily
    /// once prompted, staying engaged for a few minutes after a nudge.
    pub fn responsive() -> Self {
        Self {
            p_init_talk: 1.0,
            p_continue_talk: 0.995,
            p_resume_talk: 0.007,
            p_r: 0.3,
            response_horizon_k: 360,
        }
    }

    /// Same rhythm as `responsive`, but nudges do nothing.
    pub fn unresponsive() -> Self {
        Self {
            p_r: 0.0,
            ..Self::responsive()
        }
    }

    /// Comfortable with silence: pauses last longer and prompts work less.
    pub fn close_friends() -> Self {
        Self {
            p_init_talk: 1.0,
            p_continue_talk: 0.995,
            p_resume_talk: 0.004,
            p_r: 0.15,
            response_horizon_k: 360,
        }
    }

    /// Shorter exchanges with frequent pauses, for listening to a narrative
    /// between bursts of talk.
    pub fn storytelling() -> Self {
        Self {
            p_init_talk: 1.0,
            p_continue_talk: 0.98,
            p_resume_talk: 0.006,
            p_r: 0.3,
            response_horizon_k: 120,
        }
    }

    pub fn preset(name: &str) -> Result<Self, SimError> {
        match name.replace(['-', ' '], "_").to_ascii_lowercase().as_str() {
            "responsive" | "responsive_dyad" => Ok(Self::responsive()),
            "unresponsive" | "unresponsive_dyad" => Ok(Self::unresponsive()),
            "close_friends" => Ok(Self::close_friends()),
            "storytelling" => Ok(Self::storytelling()),
            _ => Err(SimError::UnknownPreset(name.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, p) in [
            ("p_init_talk", self.p_init_talk),
            ("p_continue_talk", self.p_continue_talk),
            ("p_resume_talk", self.p_resume_talk),
            ("p_r", self.p_r),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Profile(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.response_horizon_k == 0 {
            return Err(SimError::Profile("response_horizon_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// The joint talk/silence chain, with the nudge channel.
#[derive(Debug, Clone)]
pub struct Dyad {
    profile: DyadProfile,
    rng: ChaCha8Rng,
    talking: Option<bool>,
    boost_until: Option<u64>,
}

impl Dyad {
    pub fn new(profile: DyadProfile, seed: u64) -> Self {
        Self {
            profile,
            rng: ChaCha8Rng::seed_from_u64(seed),
            talking: None,
            boost_until: None,
        }
    }

    /// Speech state for second `t`.
    pub fn step(&mut self, t: u64) -> bool {
        let u: f64 = self.rng.random();
        let p = match self.talking {
            None => self.profile.p_init_talk,
            Some(true) => self.profile.p_continue_talk,
            Some(false) if self.boost_until.is_some_and(|end| t <= end) => {
                self.profile.p_resume_talk.max(self.profile.p_r)
            }
            Some(false) => self.profile.p_resume_talk,
        };
        let talking = u < p;
        self.talking = Some(talking);
        talking
    }

    /// A nudge played during second `t` affects the next `k` seconds.
    pub fn nudge(&mut self, t: u64) {
        self.boost_until = Some(t + self.profile.response_horizon_k);
    }
}

/// Stateless 64-bit mixer used to derive independent seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const BEHAVIOUR_STREAM: u64 = 1;
const CONTENT_STREAM: u64 = 2;
const FRIENDSHIP_STREAM: u64 = 3;

/// Seed for session `index` on one stream. Arms are deliberately not mixed in.
pub fn derive_seed(plan_seed: u64, index: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(plan_seed ^ splitmix64(index)) ^ stream)
}

pub struct SessionSpec<'a> {
    pub session_id: String,
    pub arm: Arm,
    pub profile: &'a DyadProfile,
    pub engine: &'a EngineConfig,
    pub duration: u64,
    pub behaviour_seed: u64,
    pub metadata: SessionMetadata,
}

pub fn simulate_session(
    spec: SessionSpec<'_>,
    corpus: Arc<Corpus>,
    stories: Arc<StoryLibrary>,
) -> Result<SessionLog, SimError> {
    spec.profile.validate()?;
    let mut engine = Engine::new(spec.session_id, spec.arm, spec.engine, spec.metadata, corpus, stories)?;
    let mut dyad = Dyad::new(spec.profile.clone(), spec.behaviour_seed);
    for t in 0..spec.duration {
        let label = Label::from_speech(dyad.step(t));
        let report = engine.tick(&ClassifiedSecond {
            t,
            label,
            confidence: 1.0,
        })?;
        if report.record.is_intervention() {
            dyad.nudge(t);
        }
    }
    Ok(engine.finish())
}

/// Per-session friendship length, optionally lowering the resume chance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FriendshipSpec {
    pub min_years: f64,
    pub max_years: f64,
    /// `p_resume_talk` is scaled by `exp(-silence_coupling * years)`.
    #[serde(default)]
    pub silence_coupling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Preset(String),
    Custom(DyadProfile),
}

impl ProfileSpec {
    pub fn resolve(&self) -> Result<DyadProfile, SimError> {
        let p = match self {
            ProfileSpec::Preset(name) => DyadProfile::preset(name)?,
            ProfileSpec::Custom(p) => p.clone(),
        };
        p.validate()?;
        Ok(p)
    }
}

fn default_duration() -> u64 {
    3600
}

fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 8).unwrap().and_hms_opt(10, 0, 0).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub sessions_per_arm: usize,
    #[serde(default = "default_duration")]
    pub duration: u64,
    pub seed: u64,
    pub profile: ProfileSpec,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub friendship: Option<FriendshipSpec>,
    #[serde(default = "default_start")]
    pub start_time: NaiveDateTime,
}

impl ExperimentPlan {
    pub fn new(sessions_per_arm: usize, seed: u64, profile: ProfileSpec) -> Self {
        Self {
            sessions_per_arm,
            duration: default_duration(),
            seed,
            profile,
            engine: EngineConfig::default(),
            report: ReportConfig::default(),
            friendship: None,
            start_time: default_start(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.sessions_per_arm == 0 {
            return Err(SimError::Plan("sessions_per_arm must be >= 1".into()));
        }
        if self.duration == 0 {
            return Err(SimError::Plan("duration must be >= 1".into()));
        }
        if let Some(f) = &self.friendship {
            if !(0.0 <= f.min_years && f.min_years <= f.max_years && f.max_years.is_finite()) {
                return Err(SimError::Plan("friendship years need 0 <= min_years <= max_years".into()));
            }
        }
        self.profile.resolve()?;
        self.engine.validate()?;
        self.report.metrics.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmNudges {
    pub group: Arm,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plausibility {
    /// No session can nudge more often than once per `base_gap` seconds.
    pub max_possible: u64,
    pub nudges: Vec<ArmNudges>,
    pub ok: bool,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub logs: Vec<SessionLog>,
    pub cohort: Vec<CohortRow>,
    pub report: CohortReport,
    pub plausibility: Plausibility,
}

impl ExperimentOutcome {
    /// Writes session logs under `sessions/`, plus `cohort.csv`, the report
    /// files and `plausibility.json`, into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SimError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SimError::Io { path, source }
        };
        let sessions = dir.join("sessions");
        std::fs::create_dir_all(&sessions).map_err(io(&sessions))?;
        for log in &self.logs {
            log.write_to_dir(&sessions)?;
        }
        let cohort = dir.join("cohort.csv");
        std::fs::write(&cohort, write_cohort_csv(&self.cohort)).map_err(io(&cohort))?;
        self.report.write_to_dir(dir)?;
        let p = dir.join("plausibility.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.plausibility)?).map_err(io(&p))?;
        Ok(())
    }
}

fn session_id(arm: Arm, index: usize) -> String {
    let prefix = match arm {
        Arm::Experiment => "exp",
        Arm::Control => "ctl",
    };
    format!("{prefix}-{:02}", index + 1)
}

pub fn run_experiment(
    plan: &ExperimentPlan,
    corpus: Arc<Corpus>,
    stories: Arc<StoryLibrary>,
) -> Result<ExperimentOutcome, SimError> {
    plan.validate()?;
    let base = plan.profile.resolve()?;
    let mut logs = Vec::with_capacity(plan.sessions_per_arm * 2);
    let mut cohort = Vec::with_capacity(plan.sessions_per_arm * 2);
    for arm in [Arm::Experiment, Arm::Control] {
        for i in 0..plan.sessions_per_arm {
            let idx = i as u64;
            let mut profile = base.clone();
            let years = plan.friendship.as_ref().map(|f| {
                let u: f64 = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, idx, FRIENDSHIP_STREAM)).random();
                let years = f.min_years + u * (f.max_years - f.min_years);
                profile.p_resume_talk *= (-f.silence_coupling * years).exp();
                (years * 10.0).round() / 10.0
            });
            let mut engine = plan.engine.clone();
            engine.content.seed = derive_seed(plan.seed, idx, CONTENT_STREAM);
            let metadata = SessionMetadata {
                start_time: plan.start_time,
                friendship_duration: years,
                intimacy_pre: None,
                intimacy_post: None,
                preferred_genres: Vec::new(),
                config: engine.clone(),
                notes: Vec::new(),
            };
            let log = simulate_session(
                SessionSpec {
                    session_id: session_id(arm, i),
                    arm,
                    profile: &profile,
                    engine: &engine,
                    duration: plan.duration,
                    behaviour_seed: derive_seed(plan.seed, idx, BEHAVIOUR_STREAM),
                    metadata,
                },
                corpus.clone(),
                stories.clone(),
            )?;
            cohort.push(CohortRow::from_log(&log));
            logs.push(log);
        }
    }
    let mut report = cohort_report(&logs, &cohort, &plan.report)?;
    let plausibility = check_plausibility(&report, plan);
    report.notes.extend(plausibility.notes.iter().cloned());
    Ok(ExperimentOutcome {
        logs,
        cohort,
        report,
        plausibility,
    })
}

fn check_plausibility(report: &CohortReport, plan: &ExperimentPlan) -> Plausibility {
    let max_possible = plan.duration / plan.engine.policy.base_gap.max(1) + 1;
    let mut notes = Vec::new();
    let mut nudges = Vec::new();
    let mut ok = true;
    for arm in [Arm::Experiment, Arm::Control] {
        let counts: Vec<u64> = report
            .sessions
            .iter()
            .filter(|s| s.group == arm)
            .map(|s| s.nudge_count)
            .collect();
        if counts.is_empty() {
            continue;
        }
        let (min, max) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
        let mean = counts.iter().sum::<u64>() as f64 / counts.len() as f64;
        match arm {
            Arm::Control if max > 0 => {
                ok = false;
                notes.push(format!("control sessions logged {max} interventions"));
            }
            Arm::Experiment if max > max_possible => {
                ok = false;
                notes.push(format!("an experiment session logged {max} nudges, above the {max_possible} the gap allows"));
            }
            Arm::Experiment if max == 0 => {
                notes.push("no experiment session was nudged; the profile never reached a lull".into());
            }
            _ => {}
        }
        nudges.push(ArmNudges { group: arm, min, max, mean });
    }
    Plausibility {
        max_possible,
        nudges,
        ok,
        notes,
    }
}

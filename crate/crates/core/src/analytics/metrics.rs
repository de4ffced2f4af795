//! Per-session metrics derived from the logged rows only.

use serde::{Deserialize, Serialize};

use crate::score::{replay_scores, ScoreConfig};
use crate::sessionlog::{SessionLog, SessionRecord};

use super::AnalyticsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Minimum silent run, in seconds, counted as a lull.
    pub lull_len: u64,
    /// Seconds on each side of a nudge for the before/after comparison.
    pub eval_window: u64,
    pub success_margin: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            lull_len: 30,
            eval_window: 60,
            success_margin: 0.10,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if self.lull_len == 0 {
            return Err(AnalyticsError::Config("lull_len must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.success_margin) {
            return Err(AnalyticsError::Config(format!(
                "success_margin must lie in [0, 1], got {}",
                self.success_margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NudgeDelta {
    /// Row index of the intervention.
    pub t: u64,
    pub pre_ratio: f64,
    pub post_ratio: f64,
    pub success: bool,
    /// False when the session ended before the post window closed.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub duration: u64,
    pub speech_ratio: f64,
    pub lull_count: u64,
    pub nudge_count: u64,
    pub per_nudge_deltas: Vec<NudgeDelta>,
}

impl SessionMetrics {
    pub fn successes(&self) -> usize {
        self.per_nudge_deltas.iter().filter(|d| d.success).count()
    }
}

fn ratio(flags: &[Option<bool>]) -> f64 {
    let (speech, n) = flags
        .iter()
        .flatten()
        .fold((0usize, 0usize), |(s, n), &f| (s + usize::from(f), n + 1));
    if n == 0 {
        0.0
    } else {
        speech as f64 / n as f64
    }
}

/// Metrics over raw rows. Intervention rows carry no speech flag: they are
/// left out of the speech ratio but extend a silent run.
pub fn metrics_from_records(
    records: &[SessionRecord],
    cfg: &MetricsConfig,
) -> Result<SessionMetrics, AnalyticsError> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(AnalyticsError::EmptyLog);
    }
    let flags: Vec<Option<bool>> = records.iter().map(SessionRecord::speech).collect();

    let flagged = flags.iter().flatten().count();
    let speech_ratio = if flagged == 0 { 0.0 } else { ratio(&flags) };

    let mut lull_count = 0;
    let mut run = 0u64;
    for f in &flags {
        if *f == Some(true) {
            run = 0;
        } else {
            run += 1;
            if run == cfg.lull_len {
                lull_count += 1;
            }
        }
    }

    let e = cfg.eval_window as usize;
    let per_nudge_deltas = flags
        .iter()
        .enumerate()
        .filter(|(_, f)| f.is_none())
        .map(|(i, _)| {
            let pre_ratio = ratio(&flags[i.saturating_sub(e)..i]);
            let end = (i + 1 + e).min(flags.len());
            let post_ratio = ratio(&flags[i + 1..end]);
            NudgeDelta {
                t: i as u64,
                pre_ratio,
                post_ratio,
                success: post_ratio - pre_ratio + 1e-12 >= cfg.success_margin,
                complete: i + e < flags.len(),
            }
        })
        .collect::<Vec<_>>();

    Ok(SessionMetrics {
        duration: records.len() as u64,
        speech_ratio,
        lull_count,
        nudge_count: per_nudge_deltas.len() as u64,
        per_nudge_deltas,
    })
}

pub fn session_metrics(log: &SessionLog, cfg: &MetricsConfig) -> Result<SessionMetrics, AnalyticsError> {
    metrics_from_records(log.records(), cfg).map_err(|e| match e {
        AnalyticsError::EmptyLog => AnalyticsError::EmptySession(log.session_id.clone()),
        other => other,
    })
}

/// Scores recomputed from the logged speech flags.
pub fn reconstruct_scores(records: &[SessionRecord], cfg: &ScoreConfig) -> Vec<u8> {
    let flags: Vec<Option<bool>> = records.iter().map(SessionRecord::speech).collect();
    replay_scores(&flags, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sessionlog::from_csv;
    use chrono::NaiveDate;

    const EXCERPT: &str = "\
Time,Amount of Conversation,Speech,Intervention
2022-11-15 11:54:08,100,TRUE,FALSE
2022-11-15 11:54:09,100,TRUE,FALSE
2022-11-15 11:54:10,90,FALSE,FALSE
2022-11-15 11:54:11,50,FALSE,FALSE
2022-11-15 11:54:12,20,FALSE,FALSE
2022-11-15 11:54:13,10,FALSE,FALSE
2022-11-15 11:54:14,0,-,TRUE
2022-11-15 11:54:15,50,TRUE,FALSE
2022-11-15 11:54:16,55,TRUE,FALSE
";

    fn rows(flags: &[Option<bool>]) -> Vec<SessionRecord> {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        flags
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let time = start + chrono::Duration::seconds(i as i64);
                match f {
                    Some(s) => SessionRecord::observed(time, 0, *s),
                    None => SessionRecord::intervention(time, 0),
                }
            })
            .collect()
    }

    /// Run-length counting written as split-on-speech.
    fn lulls_oracle(flags: &[Option<bool>], l: usize) -> u64 {
        flags
            .split(|f| *f == Some(true))
            .filter(|run| run.len() >= l)
            .count() as u64
    }

    #[test]
    fn half_speech() {
        let flags: Vec<_> = (0..60).map(|i| Some(i % 2 == 0)).collect();
        let m = metrics_from_records(&rows(&flags), &MetricsConfig::default()).unwrap();
        assert_eq!(m.speech_ratio, 0.5);
        assert_eq!(m.nudge_count, 0);
    }

    #[test]
    fn one_long_silence_is_one_lull() {
        let flags = vec![Some(false); 3600];
        let cfg = MetricsConfig {
            lull_len: 120,
            ..Default::default()
        };
        let m = metrics_from_records(&rows(&flags), &cfg).unwrap();
        assert_eq!(m.lull_count, 1);
        assert_eq!(m.speech_ratio, 0.0);
    }

    #[test]
    fn excerpt_counts() {
        let recs = from_csv(EXCERPT).unwrap();
        let cfg = MetricsConfig {
            lull_len: 5,
            eval_window: 2,
            success_margin: 0.1,
        };
        let m = metrics_from_records(&recs, &cfg).unwrap();
        // Four FALSE rows and the intervention row form one five-second run.
        assert_eq!(m.lull_count, 1);
        assert_eq!(m.nudge_count, 1);
        assert!((m.speech_ratio - 4.0 / 8.0).abs() < 1e-15);
        let d = &m.per_nudge_deltas[0];
        assert_eq!((d.t, d.pre_ratio, d.post_ratio, d.success, d.complete), (6, 0.0, 1.0, true, true));

        let six = MetricsConfig { lull_len: 6, ..cfg };
        assert_eq!(metrics_from_records(&recs, &six).unwrap().lull_count, 0);
    }

    #[test]
    fn intervention_rows_join_silent_runs() {
        let mut flags = vec![Some(false); 10];
        flags[5] = None;
        let cfg = MetricsConfig {
            lull_len: 10,
            ..Default::default()
        };
        assert_eq!(metrics_from_records(&rows(&flags), &cfg).unwrap().lull_count, 1);
    }

    #[test]
    fn truncated_post_window() {
        let flags = vec![Some(false), Some(false), None, Some(true)];
        let cfg = MetricsConfig {
            eval_window: 5,
            ..Default::default()
        };
        let d = &metrics_from_records(&rows(&flags), &cfg).unwrap().per_nudge_deltas[0];
        assert!(!d.complete);
        assert_eq!(d.post_ratio, 1.0);
    }

    #[test]
    fn empty_log_is_an_error() {
        assert!(matches!(
            metrics_from_records(&[], &MetricsConfig::default()),
            Err(AnalyticsError::EmptyLog)
        ));
    }

    mod props {
        use super::*;
        use crate::sessionlog::to_csv;
        use proptest::prelude::*;

        fn flag() -> impl Strategy<Value = Option<bool>> {
            prop_oneof![8 => any::<bool>().prop_map(Some), 1 => Just(None)]
        }

        proptest! {
            #[test]
            fn lull_count_matches_oracle_and_bound(
                flags in proptest::collection::vec(flag(), 1..400),
                l in 1u64..50,
            ) {
                let cfg = MetricsConfig { lull_len: l, ..Default::default() };
                let m = metrics_from_records(&rows(&flags), &cfg).unwrap();
                prop_assert_eq!(m.lull_count, lulls_oracle(&flags, l as usize));
                prop_assert!(m.lull_count <= flags.len() as u64 / l);
                prop_assert!((0.0..=1.0).contains(&m.speech_ratio));
                prop_assert_eq!(m.nudge_count, flags.iter().filter(|f| f.is_none()).count() as u64);
            }

            #[test]
            fn metrics_survive_csv_round_trip(flags in proptest::collection::vec(flag(), 1..300)) {
                let recs = rows(&flags);
                let back = from_csv(&to_csv(&recs)).unwrap();
                let cfg = MetricsConfig::default();
                prop_assert_eq!(
                    metrics_from_records(&recs, &cfg).unwrap(),
                    metrics_from_records(&back, &cfg).unwrap()
                );
            }
        }
    }
}

//! Run logs and metrics: per-tick rows, merge events, and the final summary,
//! all serializable as newline-delimited JSON records.

use serde::{Deserialize, Serialize};

use crate::merge::AgentStatus;
use crate::world::Transform2;

/// Immutable run header, written as the first log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub scenario: String,
    pub strategy: String,
    pub seed: u64,
    pub agent_count: usize,
    pub resolution: f64,
    /// The ASCII world map, embedded so a log is self-contained for
    /// rendering.
    pub map_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentTick {
    pub id: usize,
    /// True pose, world frame (log-side only; planners never see it).
    pub x: f64,
    pub y: f64,
    pub odometer: f64,
    pub submap: usize,
    pub status: AgentStatus,
}

/// Merge pipeline events, logged as they happen.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MergeEvent {
    /// A new candidate connection appeared between two agents.
    Detection {
        i: usize,
        j: usize,
        omega: f64,
        overlap_len: usize,
    },
    /// An agent was sent to verify a connection.
    VerificationStarted {
        i: usize,
        j: usize,
        agent: usize,
        omega: f64,
        dist: f64,
    },
    /// The connection was rejected as a false association.
    Rejection {
        i: usize,
        j: usize,
        omega: f64,
    },
    /// The connection was confirmed and the sub-maps merged.
    Confirmation {
        i: usize,
        j: usize,
        omega: f64,
        /// Mean ICP residual of the final transform estimate, meters.
        residual: f64,
        /// Estimated transform mapping agent j's frame into agent i's.
        transform: Transform2,
        /// Ground-truth transform error (log-side diagnostic).
        translation_error_m: f64,
        rotation_error_rad: f64,
    },
    /// A planned viewpoint had to be dropped as unreachable.
    ViewpointDropped { agent: usize, count: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TickRow {
    pub t: f64,
    pub agents: Vec<AgentTick>,
    pub covered_fraction: f64,
    pub submap_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<MergeEvent>,
    /// Keyframes created this tick, world coordinates (for rendering).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keyframes: Vec<(usize, f64, f64)>,
}

/// Final run figures; the row a metrics table is built from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub strategy: String,
    pub seed: u64,
    pub exploration_time_s: f64,
    /// Longest distance traveled by any one agent.
    pub makespan_m: f64,
    pub total_dist_m: f64,
    pub duplicated_dist_m: f64,
    pub final_submaps: usize,
    pub merge_rejections: usize,
    pub covered_fraction: f64,
    /// Reached the coverage threshold before the time limit.
    pub completed: bool,
}

impl RunSummary {
    pub const CSV_HEADER: &'static str = "scenario,strategy,seed,exploration_time_s,makespan_m,total_dist_m,duplicated_dist_m,final_submaps,merge_rejections";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.1},{:.2},{:.2},{:.2},{},{}",
            self.scenario,
            self.strategy,
            self.seed,
            self.exploration_time_s,
            self.makespan_m,
            self.total_dist_m,
            self.duplicated_dist_m,
            self.final_submaps,
            self.merge_rejections
        )
    }
}

/// Complete record of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsLog {
    pub meta: RunMeta,
    pub rows: Vec<TickRow>,
    pub summary: Option<RunSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Record {
    Meta(RunMeta),
    Tick(TickRow),
    Summary(RunSummary),
}

impl MetricsLog {
    /// Serialize as newline-delimited JSON records: meta, ticks, summary.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        let mut push = |record: &Record| {
            out.push_str(&serde_json::to_string(record).expect("log records serialize"));
            out.push('\n');
        };
        push(&Record::Meta(self.meta.clone()));
        for row in &self.rows {
            push(&Record::Tick(row.clone()));
        }
        if let Some(summary) = &self.summary {
            push(&Record::Summary(summary.clone()));
        }
        out
    }

    /// Parse a log written by [`MetricsLog::to_ndjson`]. Tolerates a
    /// truncated tail (partial last line) and reports whether truncation was
    /// seen.
    pub fn from_ndjson(text: &str) -> Result<(MetricsLog, bool), serde_json::Error> {
        let mut meta: Option<RunMeta> = None;
        let mut rows = Vec::new();
        let mut summary = None;
        let mut truncated = false;
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(line) {
                Ok(Record::Meta(m)) => meta = Some(m),
                Ok(Record::Tick(r)) => rows.push(r),
                Ok(Record::Summary(s)) => summary = Some(s),
                Err(e) => {
                    if meta.is_none() {
                        return Err(e);
                    }
                    truncated = true;
                    break;
                }
            }
        }
        match meta {
            Some(meta) => {
                let truncated = truncated || summary.is_none();
                Ok((
                    MetricsLog {
                        meta,
                        rows,
                        summary,
                    },
                    truncated,
                ))
            }
            None => {
                // Force a parse error with context.
                Err(serde_json::from_str::<Record>("").unwrap_err())
            }
        }
    }

    /// All merge events with their timestamps.
    pub fn merge_events(&self) -> impl Iterator<Item = (f64, &MergeEvent)> {
        self.rows
            .iter()
            .flat_map(|row| row.events.iter().map(move |e| (row.t, e)))
    }
}

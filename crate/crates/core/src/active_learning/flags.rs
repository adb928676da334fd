use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{ALError, Result};

/// Operator annotation of a rare event. Days it touches are added to the
/// next cycle's augmentation set whatever their sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareEventFlag {
    pub id: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub note: String,
    pub actor: String,
    pub flagged_at: DateTime<Utc>,
    /// Cycle that used the flag, if any.
    pub consumed_in_cycle: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlagOutcome {
    Added(RareEventFlag),
    /// The range is already inside an existing flag; nothing changed.
    AlreadyFlagged(RareEventFlag),
}

/// `[start, end)` must lie within `[data_start, data_end)`.
pub fn flag_rare_event(
    existing: &[RareEventFlag],
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    note: &str,
    actor: &str,
    data_span: (DateTime<Utc>, DateTime<Utc>),
    at: DateTime<Utc>,
) -> Result<FlagOutcome> {
    if end <= start {
        return Err(ALError::Domain(format!(
            "empty or reversed range {start} .. {end}"
        )));
    }
    if end > data_span.1 {
        return Err(ALError::Domain(format!(
            "range ends at {end}, after the last stored data at {}",
            data_span.1
        )));
    }
    if start < data_span.0 {
        return Err(ALError::Domain(format!(
            "range starts before stored data at {}",
            data_span.0
        )));
    }
    if let Some(f) = existing.iter().find(|f| f.start <= start && end <= f.end) {
        return Ok(FlagOutcome::AlreadyFlagged(f.clone()));
    }
    Ok(FlagOutcome::Added(RareEventFlag {
        id: format!(
            "ev-{}-{}",
            start.format("%Y%m%dT%H"),
            end.format("%Y%m%dT%H")
        ),
        start,
        end,
        note: note.to_string(),
        actor: actor.to_string(),
        flagged_at: at,
        consumed_in_cycle: None,
    }))
}

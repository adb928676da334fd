use std::io::Read;
use std::str::FromStr;

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

use super::{DataError, Result, TimeSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub column: String,
    pub series_id: String,
    pub unit: String,
}

/// How CSV columns map onto stored series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub columns: Vec<ColumnMapping>,
    pub step_seconds: i64,
    /// Largest spacing between consecutive rows that is still repaired by
    /// linear interpolation.
    pub max_gap_seconds: i64,
}

impl CsvSchema {
    pub fn new(columns: Vec<ColumnMapping>) -> Self {
        Self {
            columns,
            step_seconds: 3600,
            max_gap_seconds: 3 * 3600,
        }
    }

    pub fn with_max_gap(mut self, gap: TimeDelta) -> Self {
        self.max_gap_seconds = gap.num_seconds();
        self
    }
}

/// `column:series_id:unit` entries separated by commas; `series_id` and
/// `unit` default to the column name and an empty unit.
impl FromStr for CsvSchema {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for entry in s.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let mut parts = entry.split(':');
            let column = parts.next().unwrap_or_default().to_string();
            let series_id = parts
                .next()
                .map(str::to_string)
                .unwrap_or_else(|| column.clone());
            let unit = parts.next().unwrap_or_default().to_string();
            if parts.next().is_some() || column.is_empty() {
                return Err(DataError::Schema(format!("bad schema entry '{entry}'")));
            }
            columns.push(ColumnMapping {
                column,
                series_id,
                unit,
            });
        }
        if columns.is_empty() {
            return Err(DataError::Schema("schema maps no columns".into()));
        }
        Ok(CsvSchema::new(columns))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub series_ids: Vec<String>,
    pub rows: usize,
    pub stored_points: usize,
    /// Grid slots filled by interpolation.
    pub interpolated: Vec<DateTime<Utc>>,
}

/// Parses CSV into uniformly spaced series. Rows are sorted by timestamp;
/// gaps up to the schema's `max_gap` are linearly interpolated.
pub fn parse_csv<R: Read>(
    source: R,
    schema: &CsvSchema,
) -> Result<(Vec<TimeSeries>, IngestReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let ts_col = headers
        .iter()
        .position(|h| h == "timestamp")
        .ok_or_else(|| DataError::Schema("missing 'timestamp' column".into()))?;
    let mut col_idx = Vec::with_capacity(schema.columns.len());
    for m in &schema.columns {
        let i = headers
            .iter()
            .position(|h| h == m.column)
            .ok_or_else(|| DataError::Schema(format!("column '{}' not in header", m.column)))?;
        col_idx.push(i);
    }

    let mut rows: Vec<(DateTime<Utc>, Vec<f64>)> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = line + 2;
        let ts = DateTime::parse_from_rfc3339(&rec[ts_col])
            .map_err(|e| DataError::Parse {
                line,
                message: format!("timestamp '{}': {e}", &rec[ts_col]),
            })?
            .with_timezone(&Utc);
        let mut vals = Vec::with_capacity(col_idx.len());
        for &i in &col_idx {
            let v: f64 = rec[i].parse().map_err(|_| DataError::Parse {
                line,
                message: format!("'{}' is not a number", &rec[i]),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    message: format!("non-finite value '{}'", &rec[i]),
                });
            }
            vals.push(v);
        }
        rows.push((ts, vals));
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(DataError::DuplicateTimestamp(w[0].0));
    }

    let step = schema.step_seconds;
    let start = rows[0].0;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); col_idx.len()];
    let mut interpolated = Vec::new();
    for (k, (ts, vals)) in rows.iter().enumerate() {
        if k > 0 {
            let (prev_ts, prev) = &rows[k - 1];
            let gap = (*ts - *prev_ts).num_seconds();
            if gap % step != 0 {
                return Err(DataError::Alignment(format!(
                    "{ts} is off the {step}s grid"
                )));
            }
            if gap > schema.max_gap_seconds {
                return Err(DataError::GapTooLarge {
                    from: *prev_ts,
                    to: *ts,
                });
            }
            let missing = gap / step - 1;
            for m in 1..=missing {
                let frac = m as f64 / (missing + 1) as f64;
                for (c, col) in columns.iter_mut().enumerate() {
                    col.push(prev[c] + frac * (vals[c] - prev[c]));
                }
                interpolated.push(*prev_ts + TimeDelta::seconds(m * step));
            }
        }
        for (c, col) in columns.iter_mut().enumerate() {
            col.push(vals[c]);
        }
    }

    let stored_points = columns[0].len();
    let series = schema
        .columns
        .iter()
        .zip(columns)
        .map(|(m, values)| {
            TimeSeries::new(
                m.series_id.clone(),
                start,
                TimeDelta::seconds(step),
                m.unit.clone(),
                values,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let report = IngestReport {
        series_ids: schema.columns.iter().map(|m| m.series_id.clone()).collect(),
        rows: rows.len(),
        stored_points,
        interpolated,
    };
    Ok((series, report))
}

/// Writes series sharing one grid as CSV with a `timestamp` column.
pub fn write_csv<W: std::io::Write>(series: &[&TimeSeries], out: W) -> Result<()> {
    let Some(first) = series.first() else {
        return Err(DataError::Empty);
    };
    if series.iter().any(|s| {
        s.start != first.start || s.step_seconds != first.step_seconds || s.len() != first.len()
    }) {
        return Err(DataError::Alignment(
            "exported series must share a grid".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string()];
    header.extend(series.iter().map(|s| s.series_id.clone()));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..first.len() {
        let mut rec = vec![first
            .timestamp(i)
            .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)];
        rec.extend(series.iter().map(|s| s.values[i].to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))?;
    Ok(())
}

fn csv_err(e: csv::Error) -> DataError {
    DataError::Csv(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> CsvSchema {
        "load:load:MW".parse().unwrap()
    }

    #[test]
    fn three_hourly_rows() {
        let csv = "timestamp,load\n2023-01-01T00:00:00Z,100\n2023-01-01T01:00:00Z,110\n2023-01-01T02:00:00Z,105\n";
        let (series, rep) = parse_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].values, vec![100.0, 110.0, 105.0]);
        assert_eq!(rep.rows, 3);
        assert!(rep.interpolated.is_empty());
    }

    #[test]
    fn missing_hour_interpolated_within_max_gap() {
        let csv = "timestamp,load\n2023-01-01T02:00:00Z,120\n2023-01-01T00:00:00Z,100\n";
        let schema = schema().with_max_gap(TimeDelta::hours(2));
        let (series, rep) = parse_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(series[0].values, vec![100.0, 110.0, 120.0]);
        assert_eq!(rep.interpolated.len(), 1);
        assert_eq!(rep.stored_points, 3);
    }

    #[test]
    fn gap_beyond_max_rejected() {
        let csv = "timestamp,load\n2023-01-01T00:00:00Z,100\n2023-01-01T05:00:00Z,120\n";
        assert!(matches!(
            parse_csv(csv.as_bytes(), &schema()),
            Err(DataError::GapTooLarge { .. })
        ));
    }

    #[test]
    fn duplicate_timestamp_rejected() {
        let csv = "timestamp,load\n2023-01-01T00:00:00Z,100\n2023-01-01T00:00:00Z,101\n";
        assert!(matches!(
            parse_csv(csv.as_bytes(), &schema()),
            Err(DataError::DuplicateTimestamp(_))
        ));
    }

    #[test]
    fn schema_parsing() {
        let s: CsvSchema = "load:load:MW, temp:temperature:degC".parse().unwrap();
        assert_eq!(s.columns[1].series_id, "temperature");
        assert!("".parse::<CsvSchema>().is_err());
        assert!("a:b:c:d".parse::<CsvSchema>().is_err());
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::ingest::{parse_csv, write_csv};
use super::series::validate_id;
use super::{
    Covariate, CsvSchema, DataError, DatasetBundle, IngestReport, RareEvent, Result, TimeSeries,
};

const SERIES_DIR: &str = "series";
const DOCS_DIR: &str = "docs";

/// File-backed series repository plus a keyed document area used by the
/// forecaster and the active-learning loop for archives and reports.
///
/// Layout under the root directory:
/// `series/<id>.json` holds one series; `docs/<kind>/<key>` holds opaque
/// documents. Files are replaced atomically (write then rename).
pub struct Store {
    root: PathBuf,
    series: RwLock<BTreeMap<String, TimeSeries>>,
    docs: Mutex<()>,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    load: String,
    covariates: Vec<(Covariate, String)>,
    calendar_origin: DateTime<Utc>,
    events: Vec<RareEvent>,
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join(SERIES_DIR))?;
        fs::create_dir_all(root.join(DOCS_DIR))?;
        let mut series = BTreeMap::new();
        let mut entries: Vec<_> =
            fs::read_dir(root.join(SERIES_DIR))?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let s: TimeSeries = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
            series.insert(s.series_id.clone(), s);
        }
        Ok(Self {
            root,
            series: RwLock::new(series),
            docs: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn series_ids(&self) -> Vec<String> {
        self.series.read().keys().cloned().collect()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.series.read().contains_key(id)
    }

    pub fn series(&self, id: &str) -> Result<TimeSeries> {
        self.series
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| DataError::NotFound(id.to_string()))
    }

    /// Creates or replaces a series.
    pub fn put_series(&self, series: TimeSeries) -> Result<()> {
        validate_id(&series.series_id)?;
        let mut map = self.series.write();
        self.persist_series(&series)?;
        map.insert(series.series_id.clone(), series);
        Ok(())
    }

    /// Ingests CSV. New series are created; existing ones are extended with
    /// the same overlap rules as [`Store::append`].
    pub fn ingest_csv<R: Read>(&self, source: R, schema: &CsvSchema) -> Result<IngestReport> {
        let (parsed, report) = parse_csv(source, schema)?;
        for s in parsed {
            if self.contains(&s.series_id) {
                let points: Vec<_> = s.iter().collect();
                self.append(&s.series_id, &points)?;
            } else {
                self.put_series(s)?;
            }
        }
        Ok(report)
    }

    /// Points with `start <= t < end`.
    pub fn query_range(
        &self,
        id: &str,
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    ) -> Result<TimeSeries> {
        let map = self.series.read();
        let s = map
            .get(id)
            .ok_or_else(|| DataError::NotFound(id.to_string()))?;
        s.slice(start, end)
    }

    /// Extends a series with points continuing from its tail. Re-sending
    /// points that are already stored with identical values is a no-op.
    pub fn append(&self, id: &str, points: &[(DateTime<Utc>, f64)]) -> Result<usize> {
        let mut map = self.series.write();
        let current = map
            .get(id)
            .ok_or_else(|| DataError::NotFound(id.to_string()))?;
        let mut next = current.clone();
        let mut changed = false;
        for &(ts, v) in points {
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    series_id: id.to_string(),
                    index: next.len(),
                });
            }
            let off = next.grid_offset(ts)?;
            if off < 0 {
                return Err(DataError::Alignment(format!(
                    "{ts} precedes the start of {id}"
                )));
            }
            let off = off as usize;
            if off < next.len() {
                let stored = next.values[off];
                if stored.to_bits() != v.to_bits() {
                    return Err(DataError::Conflict {
                        series_id: id.to_string(),
                        timestamp: ts,
                        stored,
                        incoming: v,
                    });
                }
            } else if off == next.len() {
                next.values.push(v);
                changed = true;
            } else {
                return Err(DataError::Alignment(format!(
                    "{ts} leaves a hole after the tail of {id} at {}",
                    next.end()
                )));
            }
        }
        let len = next.len();
        if changed {
            self.persist_series(&next)?;
            map.insert(id.to_string(), next);
        }
        Ok(len)
    }

    pub fn export_csv<W: Write>(&self, ids: &[&str], out: W) -> Result<()> {
        let snapshot: Vec<TimeSeries> = ids
            .iter()
            .map(|id| self.series(id))
            .collect::<Result<_>>()?;
        let refs: Vec<&TimeSeries> = snapshot.iter().collect();
        write_csv(&refs, out)
    }

    /// Stores every member of a bundle plus its metadata under `name`.
    pub fn save_bundle(&self, name: &str, bundle: &DatasetBundle) -> Result<()> {
        self.put_series(bundle.load.clone())?;
        for s in bundle.covariates.values() {
            self.put_series(s.clone())?;
        }
        let meta = BundleMeta {
            load: bundle.load.series_id.clone(),
            covariates: bundle
                .covariates
                .iter()
                .map(|(c, s)| (*c, s.series_id.clone()))
                .collect(),
            calendar_origin: bundle.calendar_origin,
            events: bundle.events.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&meta).map_err(|e| DataError::Io(e.to_string()))?;
        self.put_document("bundles", name, &bytes)
    }

    pub fn load_bundle(&self, name: &str) -> Result<DatasetBundle> {
        let bytes = self
            .get_document("bundles", name)?
            .ok_or_else(|| DataError::NotFound(format!("bundle {name}")))?;
        let meta: BundleMeta =
            serde_json::from_slice(&bytes).map_err(|e| DataError::Io(e.to_string()))?;
        let load = self.series(&meta.load)?;
        let covariates = meta
            .covariates
            .iter()
            .map(|(c, id)| Ok((*c, self.series(id)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        // members may have grown by different amounts; trim to the common span
        let len = covariates
            .values()
            .map(TimeSeries::len)
            .chain([load.len()])
            .min()
            .unwrap_or(0);
        let end = load.timestamp(len);
        let mut bundle = DatasetBundle::new(load.slice(load.start, end)?, {
            covariates
                .into_iter()
                .map(|(c, s)| Ok((c, s.slice(s.start, end)?)))
                .collect::<Result<_>>()?
        })?;
        bundle.calendar_origin = meta.calendar_origin;
        bundle.events = meta.events;
        Ok(bundle)
    }

    pub fn put_document(&self, kind: &str, key: &str, bytes: &[u8]) -> Result<()> {
        validate_id(kind)?;
        validate_id(key)?;
        let _guard = self.docs.lock();
        let dir = self.root.join(DOCS_DIR).join(kind);
        fs::create_dir_all(&dir)?;
        atomic_write(&dir.join(key), bytes)
    }

    pub fn get_document(&self, kind: &str, key: &str) -> Result<Option<Vec<u8>>> {
        validate_id(kind)?;
        validate_id(key)?;
        let path = self.root.join(DOCS_DIR).join(kind).join(key);
        match fs::read(path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Document keys of one kind, sorted.
    pub fn list_documents(&self, kind: &str) -> Result<Vec<String>> {
        validate_id(kind)?;
        let dir = self.root.join(DOCS_DIR).join(kind);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut keys: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|k| !k.starts_with('.'))
            .collect();
        keys.sort();
        Ok(keys)
    }

    fn persist_series(&self, s: &TimeSeries) -> Result<()> {
        let bytes = serde_json::to_vec(s).map_err(|e| DataError::Io(e.to_string()))?;
        atomic_write(
            &self
                .root
                .join(SERIES_DIR)
                .join(format!("{}.json", s.series_id)),
            &bytes,
        )
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("doc");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeDelta, TimeZone};

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2023, 3, 1, 0, 0, 0).unwrap()
    }

    fn store_with_day() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let s = TimeSeries::hourly("load", t0(), "MW", (0..24).map(f64::from).collect()).unwrap();
        store.put_series(s).unwrap();
        (dir, store)
    }

    fn next_day() -> Vec<(DateTime<Utc>, f64)> {
        (24..48)
            .map(|h| (t0() + TimeDelta::hours(h), h as f64))
            .collect()
    }

    #[test]
    fn append_then_idempotent_reappend() {
        let (_d, store) = store_with_day();
        assert_eq!(store.append("load", &next_day()).unwrap(), 48);
        assert_eq!(store.append("load", &next_day()).unwrap(), 48);
    }

    #[test]
    fn conflicting_append_rejected() {
        let (_d, store) = store_with_day();
        let err = store
            .append("load", &[(t0() + TimeDelta::hours(3), 99.0)])
            .unwrap_err();
        assert!(matches!(err, DataError::Conflict { .. }));
        assert_eq!(store.series("load").unwrap().len(), 24);
    }

    #[test]
    fn append_with_hole_rejected() {
        let (_d, store) = store_with_day();
        let err = store
            .append("load", &[(t0() + TimeDelta::hours(30), 1.0)])
            .unwrap_err();
        assert!(matches!(err, DataError::Alignment(_)));
    }

    #[test]
    fn query_unknown_series() {
        let (_d, store) = store_with_day();
        assert!(matches!(
            store.query_range("nope", t0(), t0() + TimeDelta::hours(1)),
            Err(DataError::NotFound(_))
        ));
    }

    #[test]
    fn survives_reopen() {
        let (dir, store) = store_with_day();
        store.append("load", &next_day()).unwrap();
        store.put_document("reports", "r1", b"hello").unwrap();
        drop(store);
        let reopened = Store::open(dir.path()).unwrap();
        assert_eq!(reopened.series("load").unwrap().len(), 48);
        assert_eq!(
            reopened.get_document("reports", "r1").unwrap().unwrap(),
            b"hello"
        );
        assert_eq!(
            reopened.list_documents("reports").unwrap(),
            vec!["r1".to_string()]
        );
        assert_eq!(reopened.get_document("reports", "missing").unwrap(), None);
    }
}

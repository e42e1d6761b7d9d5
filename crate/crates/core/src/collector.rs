//! KPI ingestion, windowed storage and heartbeat failure statistics.
//!
//! Each (metric, service) pair is a series kept sorted by timestamp in a
//! bounded buffer. Out-of-order samples are accepted up to the lateness
//! bound behind the series high-water mark. Acked samples can be mirrored to
//! a newline-delimited JSON trace that [`Collector::replay`] reads back.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MonitoringModel, Statistic};

/// Raw heartbeat channel: 1 = alive, 0 = dead.
pub const HEARTBEAT_METRIC: &str = "heartbeat";
pub const HEARTBEAT_UNIT: &str = "bool";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiSample {
    pub probe_id: String,
    pub service_id: String,
    pub metric_id: String,
    /// Milliseconds.
    pub ts: u64,
    pub value: f64,
    pub unit: String,
}

impl KpiSample {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("sample serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CollectorError {
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("unknown probe `{0}`")]
    UnknownProbe(String),
    #[error("sample at {ts} for {metric_id}/{service_id} is behind high-water mark {high_water} by more than the lateness bound")]
    StaleSample {
        metric_id: String,
        service_id: String,
        ts: u64,
        high_water: u64,
    },
    #[error("metric `{metric_id}` is measured in `{expected}`, sample uses `{got}`")]
    UnitMismatch {
        metric_id: String,
        expected: String,
        got: String,
    },
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("empty or inverted window [{from}, {to})")]
    InvalidWindow { from: u64, to: u64 },
    #[error("heartbeat value {value} at {ts} is neither 0 nor 1")]
    NonBooleanSeries { ts: u64, value: f64 },
    #[error("trace i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectorConfig {
    pub lateness_ms: u64,
    pub retention_ms: u64,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            lateness_ms: 30_000,
            retention_ms: 3_600_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub ts: u64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub count: usize,
    /// `None` for an empty window.
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub sum: f64,
}

impl WindowStats {
    pub fn of(points: &[Point]) -> Self {
        if points.is_empty() {
            return WindowStats::default();
        }
        let sum: f64 = points.iter().map(|p| p.value).sum();
        let min = points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
        let max = points
            .iter()
            .map(|p| p.value)
            .fold(f64::NEG_INFINITY, f64::max);
        WindowStats {
            count: points.len(),
            mean: Some(sum / points.len() as f64),
            min: Some(min),
            max: Some(max),
            sum,
        }
    }

    /// The requested statistic, undefined when the window holds no samples.
    pub fn statistic(&self, stat: Statistic) -> Option<f64> {
        if self.count == 0 {
            return None;
        }
        match stat {
            Statistic::Mean => self.mean,
            Statistic::Max => self.max,
            Statistic::Min => self.min,
            Statistic::Sum => Some(self.sum),
            Statistic::Count => Some(self.count as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesWindow {
    pub metric_id: String,
    pub service_id: String,
    pub from: u64,
    pub to: u64,
    pub samples: Vec<Point>,
    pub stats: WindowStats,
}

impl SeriesWindow {
    pub fn new(metric_id: &str, service_id: &str, from: u64, to: u64, samples: Vec<Point>) -> Self {
        SeriesWindow {
            metric_id: metric_id.to_string(),
            service_id: service_id.to_string(),
            from,
            to,
            stats: WindowStats::of(&samples),
            samples,
        }
    }
}

/// Read access to stored series, as needed by the aggregator.
pub trait SeriesSource {
    fn window(
        &self,
        metric_id: &str,
        service_id: &str,
        from: u64,
        to: u64,
    ) -> Result<SeriesWindow, CollectorError>;
}

#[derive(Debug, Default)]
struct Series {
    points: VecDeque<Point>,
    high_water: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub error: String,
}

type SeriesMap = HashMap<(String, String), Arc<Mutex<Series>>>;

pub struct Collector {
    config: CollectorConfig,
    units: RwLock<HashMap<String, String>>,
    probes: RwLock<HashSet<String>>,
    any_probe: bool,
    series: RwLock<SeriesMap>,
    trace: Option<Mutex<BufWriter<File>>>,
}

impl std::fmt::Debug for Collector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Collector")
            .field("config", &self.config)
            .field("series", &self.series.read().len())
            .finish()
    }
}

impl Collector {
    pub fn new(config: CollectorConfig) -> Self {
        let mut units = HashMap::new();
        units.insert(HEARTBEAT_METRIC.to_string(), HEARTBEAT_UNIT.to_string());
        Collector {
            config,
            units: RwLock::new(units),
            probes: RwLock::new(HashSet::new()),
            any_probe: false,
            series: RwLock::new(HashMap::new()),
            trace: None,
        }
    }

    /// A collector that knows every metric of `model`.
    pub fn for_model(model: &MonitoringModel, config: CollectorConfig) -> Self {
        let c = Collector::new(config);
        c.set_metrics(model);
        c
    }

    /// Mirrors every acked sample to `path` (appending).
    pub fn with_trace_file(mut self, path: &Path) -> Result<Self, CollectorError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CollectorError::Io(e.to_string()))?;
        self.trace = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    /// Rebuilds a store from trace lines. Probe ids are not checked.
    /// Returns the collector and the lines that failed to ingest.
    pub fn replay(
        model: &MonitoringModel,
        config: CollectorConfig,
        trace: &str,
    ) -> (Self, Vec<LineError>) {
        let mut c = Collector::for_model(model, config);
        c.any_probe = true;
        let errors = c.ingest_ndjson(trace);
        (c, errors)
    }

    pub fn config(&self) -> CollectorConfig {
        self.config
    }

    /// Replaces the metric registry with the metrics of `model` (plus the
    /// raw heartbeat channel).
    pub fn set_metrics(&self, model: &MonitoringModel) {
        let mut units = self.units.write();
        units.clear();
        units.insert(HEARTBEAT_METRIC.to_string(), HEARTBEAT_UNIT.to_string());
        for def in model.metrics() {
            units.insert(def.id.clone(), def.unit.clone());
        }
    }

    pub fn knows_metric(&self, metric_id: &str) -> bool {
        self.units.read().contains_key(metric_id)
    }

    pub fn register_probe(&self, probe_id: &str) {
        self.probes.write().insert(probe_id.to_string());
    }

    pub fn unregister_probe(&self, probe_id: &str) {
        self.probes.write().remove(probe_id);
    }

    pub fn ingest(&self, sample: &KpiSample) -> Result<(), CollectorError> {
        if sample.ts == 0 {
            return Err(CollectorError::InvalidSample("ts must be positive".into()));
        }
        if !sample.value.is_finite() {
            return Err(CollectorError::InvalidSample("value must be finite".into()));
        }
        match self.units.read().get(&sample.metric_id) {
            None => return Err(CollectorError::UnknownMetric(sample.metric_id.clone())),
            Some(unit) if *unit != sample.unit => {
                return Err(CollectorError::UnitMismatch {
                    metric_id: sample.metric_id.clone(),
                    expected: unit.clone(),
                    got: sample.unit.clone(),
                })
            }
            Some(_) => {}
        }
        if !self.any_probe && !self.probes.read().contains(&sample.probe_id) {
            return Err(CollectorError::UnknownProbe(sample.probe_id.clone()));
        }

        let key = (sample.metric_id.clone(), sample.service_id.clone());
        let series = {
            let existing = self.series.read().get(&key).cloned();
            match existing {
                Some(s) => s,
                None => self.series.write().entry(key).or_default().clone(),
            }
        };
        let mut series = series.lock();
        if sample.ts + self.config.lateness_ms < series.high_water {
            return Err(CollectorError::StaleSample {
                metric_id: sample.metric_id.clone(),
                service_id: sample.service_id.clone(),
                ts: sample.ts,
                high_water: series.high_water,
            });
        }
        let at = series.points.partition_point(|p| p.ts <= sample.ts);
        series.points.insert(
            at,
            Point {
                ts: sample.ts,
                value: sample.value,
            },
        );
        series.high_water = series.high_water.max(sample.ts);
        let horizon = series.high_water.saturating_sub(self.config.retention_ms);
        while series.points.front().is_some_and(|p| p.ts < horizon) {
            series.points.pop_front();
        }
        drop(series);

        if let Some(trace) = &self.trace {
            let mut w = trace.lock();
            writeln!(w, "{}", sample.to_line()).map_err(|e| CollectorError::Io(e.to_string()))?;
        }
        Ok(())
    }

    /// Ingests a newline-delimited JSON body. Valid lines are stored even
    /// when others fail; the failures are returned with 1-based line numbers.
    pub fn ingest_ndjson(&self, body: &str) -> Vec<LineError> {
        let mut errors = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let result = serde_json::from_str::<KpiSample>(line)
                .map_err(|e| e.to_string())
                .and_then(|s| self.ingest(&s).map_err(|e| e.to_string()));
            if let Err(error) = result {
                errors.push(LineError { line: i + 1, error });
            }
        }
        self.flush();
        errors
    }

    pub fn flush(&self) {
        if let Some(trace) = &self.trace {
            if let Err(e) = trace.lock().flush() {
                tracing::warn!("trace flush failed: {e}");
            }
        }
    }

    pub fn query(
        &self,
        metric_id: &str,
        service_id: &str,
        from: u64,
        to: u64,
    ) -> Result<SeriesWindow, CollectorError> {
        if from >= to {
            return Err(CollectorError::InvalidWindow { from, to });
        }
        if !self.knows_metric(metric_id) {
            return Err(CollectorError::UnknownMetric(metric_id.to_string()));
        }
        let series = self
            .series
            .read()
            .get(&(metric_id.to_string(), service_id.to_string()))
            .cloned();
        let samples = match series {
            None => Vec::new(),
            Some(s) => {
                let s = s.lock();
                let lo = s.points.partition_point(|p| p.ts < from);
                let hi = s.points.partition_point(|p| p.ts < to);
                s.points.range(lo..hi).copied().collect()
            }
        };
        Ok(SeriesWindow::new(metric_id, service_id, from, to, samples))
    }

    /// Total stored samples across all series.
    pub fn len(&self) -> usize {
        self.series
            .read()
            .values()
            .map(|s| s.lock().points.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every (metric, service) pair that has a series, sorted.
    pub fn series_keys(&self) -> BTreeSet<(String, String)> {
        self.series.read().keys().cloned().collect()
    }

    /// Most recent point of a series.
    pub fn latest(&self, metric_id: &str, service_id: &str) -> Option<Point> {
        let key = (metric_id.to_string(), service_id.to_string());
        let series = self.series.read().get(&key).cloned()?;
        let last = series.lock().points.back().copied();
        last
    }

    /// Every stored sample as (metric, service, point), in key then time
    /// order. Used to compare stores.
    pub fn dump(&self) -> Vec<(String, String, Point)> {
        let map = self.series.read();
        let mut keys: Vec<_> = map.keys().cloned().collect();
        keys.sort();
        let mut out = Vec::new();
        for key in keys {
            for p in map[&key].lock().points.iter() {
                out.push((key.0.clone(), key.1.clone(), *p));
            }
        }
        out
    }
}

impl SeriesSource for Collector {
    fn window(
        &self,
        metric_id: &str,
        service_id: &str,
        from: u64,
        to: u64,
    ) -> Result<SeriesWindow, CollectorError> {
        self.query(metric_id, service_id, from, to)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureStats {
    pub service_id: String,
    pub from: u64,
    pub to: u64,
    pub num_failures: usize,
    /// Milliseconds.
    pub total_downtime: u64,
    /// Milliseconds, one per closed outage.
    pub recovery_times: Vec<u64>,
    /// Mean recovery time in milliseconds, 0 when nothing recovered.
    pub mttr: f64,
}

/// Outage accounting over a heartbeat series.
///
/// An outage is a maximal run of dead beats. A closed run contributes
/// `first alive after − first dead` to the downtime and
/// `first alive after − last alive before` as its recovery time; when the
/// window opens mid-outage the beat before the run is assumed one interval
/// earlier. A run still open at the window end adds downtime up to one
/// interval past its last dead beat (clipped to the window) and no recovery.
pub fn derive_failure_stats(
    series: &SeriesWindow,
    interval_ms: u64,
) -> Result<FailureStats, CollectorError> {
    let mut stats = FailureStats {
        service_id: series.service_id.clone(),
        from: series.from,
        to: series.to,
        num_failures: 0,
        total_downtime: 0,
        recovery_times: Vec::new(),
        mttr: 0.0,
    };
    let mut last_alive: Option<u64> = None;
    let mut run: Option<(u64, u64)> = None; // (first dead, last dead)

    for p in &series.samples {
        if p.value == 0.0 {
            run = Some(match run {
                None => (p.ts, p.ts),
                Some((first, _)) => (first, p.ts),
            });
        } else if p.value == 1.0 {
            if let Some((first, _)) = run.take() {
                let before = last_alive.unwrap_or_else(|| first.saturating_sub(interval_ms));
                stats.num_failures += 1;
                stats.total_downtime += p.ts - first;
                stats.recovery_times.push(p.ts - before);
            }
            last_alive = Some(p.ts);
        } else {
            return Err(CollectorError::NonBooleanSeries {
                ts: p.ts,
                value: p.value,
            });
        }
    }
    if let Some((first, last)) = run {
        let end = (last + interval_ms).min(series.to).max(first);
        stats.total_downtime += end - first;
    }
    if !stats.recovery_times.is_empty() {
        stats.mttr =
            stats.recovery_times.iter().sum::<u64>() as f64 / stats.recovery_times.len() as f64;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_model;

    fn sample(metric: &str, ts: u64, value: f64, unit: &str) -> KpiSample {
        KpiSample {
            probe_id: "p1".into(),
            service_id: "s1".into(),
            metric_id: metric.into(),
            ts,
            value,
            unit: unit.into(),
        }
    }

    fn collector() -> Collector {
        let c = Collector::for_model(&default_model(), CollectorConfig::default());
        c.register_probe("p1");
        c
    }

    fn beats(values: &[(u64, f64)]) -> SeriesWindow {
        let pts = values
            .iter()
            .map(|&(ts, value)| Point { ts, value })
            .collect();
        SeriesWindow::new(
            HEARTBEAT_METRIC,
            "s1",
            0,
            values.last().map_or(1, |v| v.0 + 1),
            pts,
        )
    }

    #[test]
    fn happy_path_ingest() {
        let c = collector();
        c.ingest(&sample("latency", 1000, 42.0, "ms")).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn rejects_wrong_unit_metric_and_probe() {
        let c = collector();
        assert!(matches!(
            c.ingest(&sample("latency", 1000, 0.042, "s")),
            Err(CollectorError::UnitMismatch { .. })
        ));
        assert!(matches!(
            c.ingest(&sample("nope", 1000, 1.0, "ms")),
            Err(CollectorError::UnknownMetric(_))
        ));
        let mut s = sample("latency", 1000, 1.0, "ms");
        s.probe_id = "ghost".into();
        assert!(matches!(c.ingest(&s), Err(CollectorError::UnknownProbe(_))));
        assert!(c.is_empty());
    }

    #[test]
    fn lateness_bound() {
        let c = collector();
        c.ingest(&sample("latency", 100_000, 1.0, "ms")).unwrap();
        // exactly 30 s behind is still accepted, 31 s is not
        c.ingest(&sample("latency", 70_000, 1.0, "ms")).unwrap();
        assert!(matches!(
            c.ingest(&sample("latency", 69_000, 1.0, "ms")),
            Err(CollectorError::StaleSample {
                high_water: 100_000,
                ..
            })
        ));
        // late samples land in time order
        let w = c.query("latency", "s1", 1, 200_000).unwrap();
        assert_eq!(
            w.samples.iter().map(|p| p.ts).collect::<Vec<_>>(),
            [70_000, 100_000]
        );
    }

    #[test]
    fn retention_drops_old_samples() {
        let c = Collector::for_model(
            &default_model(),
            CollectorConfig {
                lateness_ms: 30_000,
                retention_ms: 10_000,
            },
        );
        c.register_probe("p1");
        for ts in (1000..=30_000).step_by(1000) {
            c.ingest(&sample("latency", ts, 1.0, "ms")).unwrap();
        }
        let w = c.query("latency", "s1", 1, 100_000).unwrap();
        assert_eq!(w.samples.first().unwrap().ts, 20_000);
    }

    #[test]
    fn window_stats() {
        let c = collector();
        for (ts, v) in [(1000, 10.0), (2000, 20.0), (3000, 30.0)] {
            c.ingest(&sample("latency", ts, v, "ms")).unwrap();
        }
        let w = c.query("latency", "s1", 1000, 4000).unwrap();
        assert_eq!(w.stats.count, 3);
        assert_eq!(w.stats.mean, Some(20.0));
        assert_eq!(w.stats.sum, 60.0);

        let empty = c.query("latency", "s1", 5000, 9000).unwrap();
        assert_eq!(empty.stats.count, 0);
        assert_eq!(empty.stats.mean, None);
        assert_eq!(empty.stats.statistic(Statistic::Sum), None);

        // half-open window
        assert_eq!(c.query("latency", "s1", 1000, 3000).unwrap().stats.count, 2);
        assert!(matches!(
            c.query("latency", "s1", 5, 5),
            Err(CollectorError::InvalidWindow { .. })
        ));
        assert!(matches!(
            c.query("nope", "s1", 1, 5),
            Err(CollectorError::UnknownMetric(_))
        ));
    }

    #[test]
    fn ndjson_reports_bad_lines() {
        let c = collector();
        let good = sample("latency", 1000, 1.0, "ms").to_line();
        let bad_unit = sample("latency", 2000, 1.0, "s").to_line();
        let body = format!("{good}\n\n{{oops\n{bad_unit}\n");
        let errors = c.ingest_ndjson(&body);
        assert_eq!(errors.iter().map(|e| e.line).collect::<Vec<_>>(), [3, 4]);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn trace_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.ndjson");
        let c = collector().with_trace_file(&path).unwrap();
        c.register_probe("p1");
        c.ingest(&sample("latency", 1000, 1.5, "ms")).unwrap();
        c.ingest(&sample("cpu_utilization", 1000, 12.0, "percent"))
            .unwrap();
        c.flush();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"probe_id":"p1","service_id":"s1","metric_id":"latency","ts":1000,"value":1.5,"unit":"ms"}"#));
        let (replayed, errors) =
            Collector::replay(&default_model(), CollectorConfig::default(), &text);
        assert!(errors.is_empty());
        assert_eq!(replayed.dump(), c.dump());
    }

    #[test]
    fn all_alive_has_no_failures() {
        let w = beats(&[(0, 1.0), (1000, 1.0), (2000, 1.0)]);
        let s = derive_failure_stats(&w, 1000).unwrap();
        assert_eq!((s.num_failures, s.total_downtime, s.mttr), (0, 0, 0.0));
    }

    #[test]
    fn three_second_outage_timeline() {
        // alive 0..=9 s, dead 10..=12 s, alive from 13 s
        let pts: Vec<(u64, f64)> = (0..20)
            .map(|s| (s * 1000, if (10..=12).contains(&s) { 0.0 } else { 1.0 }))
            .collect();
        let s = derive_failure_stats(&beats(&pts), 1000).unwrap();
        assert_eq!(s.num_failures, 1);
        assert_eq!(s.recovery_times, [4000]);
        assert_eq!(s.total_downtime, 3000);
        assert_eq!(s.mttr, 4000.0);
    }

    #[test]
    fn alternating_beats_count_two_failures() {
        let pts: Vec<(u64, f64)> = [1.0, 0.0, 1.0, 0.0, 1.0]
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u64 * 1000, *v))
            .collect();
        let s = derive_failure_stats(&beats(&pts), 1000).unwrap();
        assert_eq!(s.num_failures, 2);
        assert_eq!(s.recovery_times, [2000, 2000]);
        assert_eq!(s.total_downtime, 2000);
    }

    #[test]
    fn open_outage_counts_downtime_only() {
        let w = SeriesWindow::new(
            HEARTBEAT_METRIC,
            "s1",
            0,
            5500,
            [
                (1000, 1.0),
                (2000, 1.0),
                (3000, 0.0),
                (4000, 0.0),
                (5000, 0.0),
            ]
            .iter()
            .map(|&(ts, value)| Point { ts, value })
            .collect(),
        );
        let s = derive_failure_stats(&w, 1000).unwrap();
        assert_eq!(s.num_failures, 0);
        assert!(s.recovery_times.is_empty());
        // 3000..5500, clipped at the window end
        assert_eq!(s.total_downtime, 2500);
    }

    #[test]
    fn non_boolean_values_are_rejected() {
        let w = beats(&[(0, 1.0), (1000, 0.5)]);
        assert_eq!(
            derive_failure_stats(&w, 1000),
            Err(CollectorError::NonBooleanSeries {
                ts: 1000,
                value: 0.5
            })
        );
    }
}

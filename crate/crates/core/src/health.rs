//! Track Health Index.
//!
//! Per frame, `THI = 1 - min(1, sum over classes of confidence * weight)`,
//! where a class seen several times in one frame contributes its highest
//! confidence. Category-1 (safety critical) defects are additionally flagged
//! the moment they are ingested; segment health is the mean per-frame THI.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::GeoPoint;
use crate::signalstate::AssetRecord;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GEOJSON_FILE: &str = "map.geojson";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Category {
    /// Safety critical: flagged immediately.
    One,
    /// Maintenance priority: averaged per segment.
    Two,
}

impl From<Category> for u8 {
    fn from(c: Category) -> u8 {
        match c {
            Category::One => 1,
            Category::Two => 2,
        }
    }
}

impl TryFrom<u8> for Category {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Category::One),
            2 => Ok(Category::Two),
            _ => Err(format!("defect category must be 1 or 2, got {v}")),
        }
    }
}

/// Defect classes the health index knows about, with their severity category.
pub const DEFECT_CATEGORIES: &[(&str, Category)] = &[
    ("sunkink", Category::One),
    ("broken_rail", Category::One),
    ("loose_ballast", Category::Two),
    ("missing_crosstie", Category::Two),
    ("vegetation_overgrowth", Category::Two),
];

pub fn defect_category(class_name: &str) -> Option<Category> {
    DEFECT_CATEGORIES
        .iter()
        .find(|(n, _)| *n == class_name)
        .map(|&(_, c)| c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeight {
    pub weight: f64,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeightTable {
    classes: BTreeMap<String, ClassWeight>,
}

impl Default for ClassWeightTable {
    fn default() -> Self {
        let mut weights = BTreeMap::new();
        weights.insert("sunkink".to_string(), 1.0);
        weights.insert("loose_ballast".to_string(), 0.5);
        Self::from_weights(&weights).expect("default weights are valid")
    }
}

impl ClassWeightTable {
    /// Build from `class -> weight`; categories come from [`DEFECT_CATEGORIES`].
    pub fn from_weights(weights: &BTreeMap<String, f64>) -> Result<Self> {
        let mut classes = BTreeMap::new();
        for (name, &weight) in weights {
            let category = defect_category(name)
                .ok_or_else(|| Error::Config(format!("thi_weights: unknown defect class {name:?}")))?;
            if !(weight > 0.0 && weight <= 1.0) {
                return Err(Error::Config(format!(
                    "thi_weights: weight for {name:?} must lie in (0, 1], got {weight}"
                )));
            }
            classes.insert(name.clone(), ClassWeight { weight, category });
        }
        Ok(Self { classes })
    }

    pub fn get(&self, class_name: &str) -> Option<ClassWeight> {
        self.classes.get(class_name).copied()
    }

    pub fn contains(&self, class_name: &str) -> bool {
        self.classes.contains_key(class_name)
    }

    pub fn weights(&self) -> BTreeMap<String, f64> {
        self.classes.iter().map(|(k, v)| (k.clone(), v.weight)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ClassWeight)> {
        self.classes.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Where a defect came from: the classical scanner or a named plugin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Origin(pub String);

impl Origin {
    pub fn trackscan() -> Self {
        Origin("trackscan".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectEvent {
    pub frame_index: u64,
    pub class_name: String,
    pub confidence: f64,
    pub category: Category,
    pub geo: Option<GeoPoint>,
    pub origin: Origin,
}

impl DefectEvent {
    pub fn new(
        frame_index: u64,
        class_name: &str,
        confidence: f64,
        geo: Option<GeoPoint>,
        origin: Origin,
        weights: &ClassWeightTable,
    ) -> Result<Self> {
        let cw = weights
            .get(class_name)
            .ok_or_else(|| Error::Config(format!("defect class {class_name:?} has no THI weight")))?;
        Ok(Self {
            frame_index,
            class_name: class_name.to_string(),
            confidence,
            category: cw.category,
            geo,
            origin,
        })
    }
}

/// Per-frame THI from `(class, confidence)` pairs.
pub fn compute_thi<'a, I>(events: I, weights: &ClassWeightTable) -> Result<f64>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut strongest: BTreeMap<&str, f64> = BTreeMap::new();
    for (class, conf) in events {
        if !(0.0..=1.0).contains(&conf) {
            return Err(Error::Config(format!(
                "confidence {conf} for {class:?} outside [0, 1]"
            )));
        }
        if !weights.contains(class) {
            return Err(Error::Config(format!("unknown defect class {class:?}")));
        }
        let e = strongest.entry(class).or_insert(0.0);
        *e = e.max(conf);
    }
    let sum: f64 = strongest
        .iter()
        .map(|(c, conf)| conf * weights.get(c).unwrap().weight)
        .sum();
    Ok(1.0 - sum.min(1.0))
}

/// Same as [`compute_thi`] over defect events.
pub fn frame_thi(events: &[DefectEvent], weights: &ClassWeightTable) -> Result<f64> {
    compute_thi(events.iter().map(|e| (e.class_name.as_str(), e.confidence)), weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagRecord {
    pub frame_index: u64,
    pub class_name: String,
    pub confidence: f64,
    pub geo: Option<GeoPoint>,
    pub origin: Origin,
}

/// Immediate flag for a category-1 event at or above the threshold.
pub fn flag_category1(event: &DefectEvent, threshold: f64) -> Option<FlagRecord> {
    (event.category == Category::One && event.confidence >= threshold).then(|| FlagRecord {
        frame_index: event.frame_index,
        class_name: event.class_name.clone(),
        confidence: event.confidence,
        geo: event.geo,
        origin: event.origin.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFlag {
    pub frame_index: u64,
    pub class_name: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentHealth {
    pub segment_id: u64,
    pub first_frame: u64,
    pub last_frame: u64,
    pub start: Option<GeoPoint>,
    pub end: Option<GeoPoint>,
    pub mean_thi: f64,
    pub frame_count: u64,
    pub category1_flags: Vec<SegmentFlag>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segmentation {
    DistanceM(f64),
    Frames(u64),
}

/// Per-frame input to segment aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameHealth {
    pub frame_index: u64,
    pub geo: Option<GeoPoint>,
    pub thi: f64,
    /// Category-1 events of this frame, flagged or not.
    pub category1: Vec<SegmentFlag>,
}

#[derive(Debug)]
struct OpenSegment {
    bucket: u64,
    seg: SegmentHealth,
    thi_sum: f64,
}

/// Streaming segment builder: consecutive, non-overlapping segments by
/// travelled distance (haversine between fixes) or by frame count.
#[derive(Debug)]
pub struct SegmentAggregator {
    mode: Segmentation,
    open: Option<OpenSegment>,
    next_id: u64,
    ordinal: u64,
    travelled_m: f64,
    last_geo: Option<GeoPoint>,
}

impl SegmentAggregator {
    pub fn new(mode: Segmentation) -> Self {
        Self {
            mode,
            open: None,
            next_id: 0,
            ordinal: 0,
            travelled_m: 0.0,
            last_geo: None,
        }
    }

    /// Add one frame; returns the segment it closed, if any.
    pub fn push(&mut self, f: &FrameHealth) -> Option<SegmentHealth> {
        if let (Some(prev), Some(cur)) = (self.last_geo, f.geo) {
            self.travelled_m += prev.haversine_m(&cur);
        }
        if f.geo.is_some() {
            self.last_geo = f.geo;
        }
        let bucket = match self.mode {
            Segmentation::DistanceM(len) => (self.travelled_m / len).floor() as u64,
            Segmentation::Frames(n) => self.ordinal / n,
        };
        self.ordinal += 1;

        let mut closed = None;
        if self.open.as_ref().is_some_and(|o| o.bucket != bucket) {
            closed = self.close();
        }
        let next_id = &mut self.next_id;
        let open = self.open.get_or_insert_with(|| {
            let id = *next_id;
            *next_id += 1;
            OpenSegment {
                bucket,
                thi_sum: 0.0,
                seg: SegmentHealth {
                    segment_id: id,
                    first_frame: f.frame_index,
                    last_frame: f.frame_index,
                    start: None,
                    end: None,
                    mean_thi: 0.0,
                    frame_count: 0,
                    category1_flags: Vec::new(),
                },
            }
        });
        open.thi_sum += f.thi;
        open.seg.frame_count += 1;
        open.seg.last_frame = f.frame_index;
        if f.geo.is_some() {
            open.seg.start = open.seg.start.or(f.geo);
            open.seg.end = f.geo;
        }
        open.seg.category1_flags.extend(f.category1.iter().cloned());
        closed
    }

    fn close(&mut self) -> Option<SegmentHealth> {
        self.open.take().map(|o| {
            let mut seg = o.seg;
            seg.mean_thi = o.thi_sum / seg.frame_count as f64;
            seg
        })
    }

    /// Close the trailing (possibly partial) segment.
    pub fn finish(mut self) -> Option<SegmentHealth> {
        self.close()
    }
}

/// Batch segmentation. Distance mode is used when any frame carries GPS.
pub fn aggregate_segments(
    frames: &[FrameHealth],
    segment_length_m: f64,
    segment_length_frames: u64,
) -> Vec<SegmentHealth> {
    let mode = if frames.iter().any(|f| f.geo.is_some()) {
        Segmentation::DistanceM(segment_length_m)
    } else {
        Segmentation::Frames(segment_length_frames)
    };
    let mut agg = SegmentAggregator::new(mode);
    let mut out: Vec<SegmentHealth> = frames.iter().filter_map(|f| agg.push(f)).collect();
    out.extend(agg.finish());
    out
}

/// One line of the events file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EventRecord {
    Defect(DefectEvent),
    Flag(FlagRecord),
    Asset(AssetRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub error: Option<String>,
    pub config_hash: String,
    pub frame_count: u64,
    pub skipped_frames: u64,
    pub plugin_warnings: u64,
    pub defect_count: u64,
    pub flag_count: u64,
    pub asset_count: u64,
    pub segment_count: u64,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        Self {
            status: RunStatus::Complete,
            error: None,
            config_hash,
            frame_count: 0,
            skipped_frames: 0,
            plugin_warnings: 0,
            defect_count: 0,
            flag_count: 0,
            asset_count: 0,
            segment_count: 0,
        }
    }
}

/// Line-delimited report sink. Flags are flushed as soon as they are written.
pub struct ReportWriter {
    dir: PathBuf,
    events: BufWriter<File>,
    segments: BufWriter<File>,
}

impl ReportWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            events: open(EVENTS_FILE)?,
            segments: open(SEGMENTS_FILE)?,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: PathBuf, rec: &T) -> Result<()> {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_event(&mut self, rec: &EventRecord) -> Result<()> {
        Self::write_line(&mut self.events, self.dir.join(EVENTS_FILE), rec)?;
        if matches!(rec, EventRecord::Flag(_)) {
            self.events.flush().map_err(|e| Error::io(self.dir.join(EVENTS_FILE), e))?;
        }
        Ok(())
    }

    pub fn write_segment(&mut self, seg: &SegmentHealth) -> Result<()> {
        Self::write_line(&mut self.segments, self.dir.join(SEGMENTS_FILE), seg)
    }

    pub fn finish(mut self, manifest: &RunManifest) -> Result<()> {
        self.events.flush().map_err(|e| Error::io(self.dir.join(EVENTS_FILE), e))?;
        self.segments.flush().map_err(|e| Error::io(self.dir.join(SEGMENTS_FILE), e))?;
        write_manifest(&self.dir, manifest)
    }
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let p = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&p, text).map_err(|e| Error::io(p, e))
}

/// Everything a finished run produced, for one-shot report emission.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunResults {
    pub events: Vec<EventRecord>,
    pub segments: Vec<SegmentHealth>,
}

/// Write events, segments and manifest files for a completed run.
pub fn emit_report(results: &RunResults, manifest: &RunManifest, out_dir: &Path) -> Result<()> {
    let mut w = ReportWriter::create(out_dir)?;
    for e in &results.events {
        w.write_event(e)?;
    }
    for s in &results.segments {
        w.write_segment(s)?;
    }
    w.finish(manifest)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    read_jsonl(path)
}

pub fn read_segments(path: &Path) -> Result<Vec<SegmentHealth>> {
    read_jsonl(path)
}

/// Load a report directory written by [`ReportWriter`].
pub fn read_report(dir: &Path) -> Result<RunResults> {
    Ok(RunResults {
        events: read_events(&dir.join(EVENTS_FILE))?,
        segments: read_segments(&dir.join(SEGMENTS_FILE))?,
    })
}

#[derive(Serialize)]
struct FeatureCollection {
    #[serde(rename = "type")]
    kind: &'static str,
    features: Vec<Feature>,
}

#[derive(Serialize)]
struct Feature {
    #[serde(rename = "type")]
    kind: &'static str,
    geometry: Geometry,
    properties: Properties,
}

#[derive(Serialize)]
#[serde(tag = "type")]
enum Geometry {
    LineString { coordinates: Vec<[f64; 2]> },
    Point { coordinates: [f64; 2] },
}

#[derive(Serialize)]
#[serde(untagged)]
enum Properties {
    Segment {
        kind: &'static str,
        segment_id: u64,
        mean_thi: f64,
        frame_count: u64,
        first_frame: u64,
        last_frame: u64,
        flags: Vec<SegmentFlag>,
    },
    Asset {
        kind: &'static str,
        asset_id: String,
        asset_type: crate::signalstate::AssetType,
        state: Option<crate::signalstate::SignalState>,
        peak_confidence: f64,
    },
}

fn lon_lat(g: &GeoPoint) -> [f64; 2] {
    [g.lon, g.lat]
}

/// Render segments and assets as a GeoJSON FeatureCollection string.
pub fn geojson_string(segments: &[SegmentHealth], assets: &[AssetRecord]) -> Result<String> {
    let mut features = Vec::new();
    for s in segments {
        let (Some(a), Some(b)) = (s.start, s.end) else {
            continue;
        };
        features.push(Feature {
            kind: "Feature",
            geometry: Geometry::LineString {
                coordinates: vec![lon_lat(&a), lon_lat(&b)],
            },
            properties: Properties::Segment {
                kind: "segment",
                segment_id: s.segment_id,
                mean_thi: s.mean_thi,
                frame_count: s.frame_count,
                first_frame: s.first_frame,
                last_frame: s.last_frame,
                flags: s.category1_flags.clone(),
            },
        });
    }
    for a in assets {
        let Some(g) = a.geo else {
            continue;
        };
        features.push(Feature {
            kind: "Feature",
            geometry: Geometry::Point {
                coordinates: lon_lat(&g),
            },
            properties: Properties::Asset {
                kind: "asset",
                asset_id: a.asset_id.clone(),
                asset_type: a.asset_type,
                state: a.state,
                peak_confidence: a.peak_confidence,
            },
        });
    }
    if features.is_empty() {
        return Err(Error::NoGeoData);
    }
    let mut s = serde_json::to_string_pretty(&FeatureCollection {
        kind: "FeatureCollection",
        features,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn export_geojson(segments: &[SegmentHealth], assets: &[AssetRecord], out: &Path) -> Result<()> {
    let text = geojson_string(segments, assets)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))
}

/// Assets recorded in an events list.
pub fn assets_of(events: &[EventRecord]) -> Vec<AssetRecord> {
    events
        .iter()
        .filter_map(|e| match e {
            EventRecord::Asset(a) => Some(a.clone()),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w() -> ClassWeightTable {
        ClassWeightTable::default()
    }

    #[test]
    fn worked_example() {
        let thi = compute_thi([("loose_ballast", 0.8)], &w()).unwrap();
        assert!((thi - 0.60).abs() < 1e-9);
    }

    #[test]
    fn empty_and_saturated() {
        assert_eq!(compute_thi([], &w()).unwrap(), 1.0);
        assert_eq!(compute_thi([("sunkink", 0.9), ("loose_ballast", 0.6)], &w()).unwrap(), 0.0);
    }

    #[test]
    fn duplicate_class_takes_max() {
        let a = compute_thi([("loose_ballast", 0.2), ("loose_ballast", 0.8)], &w()).unwrap();
        assert!((a - 0.6).abs() < 1e-12);
    }

    #[test]
    fn unknown_class_rejected() {
        assert!(compute_thi([("switch", 0.5)], &w()).is_err());
        assert!(compute_thi([("sunkink", 1.5)], &w()).is_err());
    }

    #[test]
    fn weight_table_validation() {
        let mut m = BTreeMap::new();
        m.insert("sunkink".to_string(), 0.0);
        let e = ClassWeightTable::from_weights(&m).unwrap_err().to_string();
        assert!(e.contains("sunkink"), "{e}");
        m.insert("sunkink".to_string(), 1.0);
        m.insert("pothole".to_string(), 0.5);
        assert!(ClassWeightTable::from_weights(&m).is_err());
    }

    fn event(class: &str, conf: f64) -> DefectEvent {
        DefectEvent::new(4, class, conf, None, Origin::trackscan(), &w()).unwrap()
    }

    #[test]
    fn category1_flag_threshold() {
        assert!(flag_category1(&event("sunkink", 0.9), 0.5).is_some());
        let weak = event("sunkink", 0.3);
        assert!(flag_category1(&weak, 0.5).is_none());
        let thi = frame_thi(&[weak], &w()).unwrap();
        assert!((thi - 0.7).abs() < 1e-12);
        assert!(flag_category1(&event("loose_ballast", 1.0), 0.0).is_none());
    }

    fn fh(i: u64, thi: f64) -> FrameHealth {
        FrameHealth {
            frame_index: i,
            geo: None,
            thi,
            category1: vec![],
        }
    }

    #[test]
    fn single_segment_mean() {
        let frames = [fh(0, 1.0), fh(1, 0.6), fh(2, 0.8)];
        let segs = aggregate_segments(&frames, 100.0, 1000);
        assert_eq!(segs.len(), 1);
        assert!((segs[0].mean_thi - 0.8).abs() < 1e-12);
        assert_eq!(segs[0].frame_count, 3);
    }

    #[test]
    fn frame_partition() {
        let frames: Vec<FrameHealth> = (0..2500).map(|i| fh(i, 1.0)).collect();
        let segs = aggregate_segments(&frames, 100.0, 1000);
        assert_eq!(segs.iter().map(|s| s.frame_count).collect::<Vec<_>>(), vec![1000, 1000, 500]);
        assert!(segs.iter().all(|s| s.mean_thi == 1.0));
        assert_eq!(segs[2].first_frame, 2000);
        assert_eq!(segs[2].last_frame, 2499);
    }

    #[test]
    fn distance_partition() {
        // ~11.1 m per frame northward: 100 m segments hold 9 or 10 frames
        let frames: Vec<FrameHealth> = (0..30)
            .map(|i| FrameHealth {
                geo: Some(GeoPoint::new(10.0 + i as f64 * 1e-4, 20.0).unwrap()),
                ..fh(i, 0.5)
            })
            .collect();
        let segs = aggregate_segments(&frames, 100.0, 1000);
        assert_eq!(segs.iter().map(|s| s.frame_count).sum::<u64>(), 30);
        assert!(segs.len() >= 3);
        for s in &segs {
            let (a, b) = (s.start.unwrap(), s.end.unwrap());
            assert!(a.haversine_m(&b) < 100.0);
        }
    }

    #[test]
    fn geojson_requires_geo() {
        let seg = SegmentHealth {
            segment_id: 0,
            first_frame: 0,
            last_frame: 3,
            start: None,
            end: None,
            mean_thi: 1.0,
            frame_count: 4,
            category1_flags: vec![],
        };
        assert!(matches!(geojson_string(&[seg], &[]), Err(Error::NoGeoData)));
    }

    #[test]
    fn event_record_tagging() {
        let rec = EventRecord::Defect(event("loose_ballast", 0.25));
        let s = serde_json::to_string(&rec).unwrap();
        assert!(s.starts_with(r#"{"kind":"defect","frame_index":4,"class_name":"loose_ballast""#), "{s}");
        let back: EventRecord = serde_json::from_str(&s).unwrap();
        assert_eq!(back, rec);
    }
}

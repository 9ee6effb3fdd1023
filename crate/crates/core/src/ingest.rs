//! Frame sources: a directory of numbered images or a frame manifest.
//!
//! Manifest format, one frame per line (`#` starts a comment line):
//!
//! ```text
//! <index> <relative-image-path> <timestamp_ms> [<lat> <lon>]
//! ```
//!
//! Image paths are relative to the manifest's directory.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::raster::RgbRaster;

/// Frame period assumed for bare image directories (25 fps).
pub const DEFAULT_FRAME_INTERVAL_MS: u64 = 40;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Config(format!("geo fix out of range: lat {lat}, lon {lon}")));
        }
        Ok(Self { lat, lon })
    }

    /// Great-circle distance in meters.
    pub fn haversine_m(&self, other: &GeoPoint) -> f64 {
        const EARTH_RADIUS_M: f64 = 6_371_008.8;
        let (p1, p2) = (self.lat.to_radians(), other.lat.to_radians());
        let dp = p2 - p1;
        let dl = (other.lon - self.lon).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: u64,
    pub timestamp_ms: u64,
    pub image: RgbRaster,
    pub geo: Option<GeoPoint>,
    /// File the frame was decoded from, when it came from disk.
    pub source: Option<PathBuf>,
}

impl Frame {
    pub fn new(index: u64, timestamp_ms: u64, image: RgbRaster) -> Self {
        Self {
            index,
            timestamp_ms,
            image,
            geo: None,
            source: None,
        }
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub index: u64,
    pub path: PathBuf,
    pub timestamp_ms: u64,
    pub geo: Option<GeoPoint>,
}

/// A frame that could not be decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedFrame {
    pub index: u64,
    pub path: PathBuf,
    pub reason: String,
}

/// Parse a frame manifest; entries come back sorted by index.
pub fn parse_manifest(path: &Path) -> Result<Vec<FrameEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 3 && tok.len() != 5 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 3 or 5 fields, found {}", tok.len()),
            ));
        }
        let index: u64 = tok[0]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad frame index {:?}", tok[0])))?;
        let timestamp_ms: u64 = tok[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad timestamp {:?}", tok[2])))?;
        let geo = if tok.len() == 5 {
            let lat: f64 = tok[3]
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad latitude {:?}", tok[3])))?;
            let lon: f64 = tok[4]
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad longitude {:?}", tok[4])))?;
            Some(GeoPoint::new(lat, lon).map_err(|e| Error::parse(path, lineno, e.to_string()))?)
        } else {
            None
        };
        entries.push(FrameEntry {
            index,
            path: base.join(tok[1]),
            timestamp_ms,
            geo,
        });
    }
    entries.sort_by_key(|e| e.index);
    for w in entries.windows(2) {
        if w[0].index == w[1].index {
            return Err(Error::parse(path, 0, format!("duplicate frame index {}", w[0].index)));
        }
        if w[1].timestamp_ms < w[0].timestamp_ms {
            return Err(Error::parse(
                path,
                0,
                format!("timestamp decreases at frame {}", w[1].index),
            ));
        }
    }
    Ok(entries)
}

/// Frame number at the end of a file stem: `000012` and `frame_12` are both 12.
fn trailing_number(stem: &str) -> Option<u64> {
    let digits = stem.len() - stem.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    stem[stem.len() - digits..].parse().ok()
}

fn scan_directory(dir: &Path) -> Result<Vec<FrameEntry>> {
    let mut entries = Vec::new();
    for ent in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let ent = ent.map_err(|e| Error::io(dir, e))?;
        let path = ent.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        let index = path.file_stem().and_then(|s| s.to_str()).and_then(trailing_number);
        if let (true, Some(index)) = (ext_ok, index) {
            entries.push(FrameEntry {
                index,
                timestamp_ms: index * DEFAULT_FRAME_INTERVAL_MS,
                path,
                geo: None,
            });
        }
    }
    entries.sort_by_key(|e| e.index);
    if let Some(w) = entries.windows(2).find(|w| w[0].index == w[1].index) {
        return Err(Error::Config(format!(
            "two images share frame index {} ({} and {})",
            w[0].index,
            w[0].path.display(),
            w[1].path.display()
        )));
    }
    Ok(entries)
}

/// Enumerate frame entries from a directory or manifest file.
pub fn list_frames(source: &Path) -> Result<Vec<FrameEntry>> {
    let meta = fs::metadata(source).map_err(|e| Error::io(source, e))?;
    if meta.is_dir() {
        scan_directory(source)
    } else {
        parse_manifest(source)
    }
}

/// Ordered frame iterator. Upcoming frames are decoded in batches ahead of
/// consumption; delivery is always in index order. Undecodable images are
/// skipped and recorded.
pub struct FrameStream {
    pending: VecDeque<FrameEntry>,
    ready: VecDeque<Frame>,
    skipped: Vec<SkippedFrame>,
    batch: usize,
    mode: ExecMode,
    total: usize,
}

impl FrameStream {
    pub fn from_entries(entries: Vec<FrameEntry>) -> Self {
        Self {
            total: entries.len(),
            pending: entries.into(),
            ready: VecDeque::new(),
            skipped: Vec::new(),
            batch: 8,
            mode: ExecMode::default(),
        }
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch.max(1);
        self
    }

    /// Number of entries the source listed.
    pub fn total_entries(&self) -> usize {
        self.total
    }

    pub fn skipped(&self) -> &[SkippedFrame] {
        &self.skipped
    }

    fn refill(&mut self) {
        while self.ready.is_empty() && !self.pending.is_empty() {
            let n = self.batch.min(self.pending.len());
            let chunk: Vec<FrameEntry> = self.pending.drain(..n).collect();
            let decoded = par::map(self.mode, &chunk, |e| RgbRaster::load(&e.path));
            for (entry, res) in chunk.into_iter().zip(decoded) {
                match res {
                    Ok(image) => self.ready.push_back(Frame {
                        index: entry.index,
                        timestamp_ms: entry.timestamp_ms,
                        image,
                        geo: entry.geo,
                        source: Some(entry.path),
                    }),
                    Err(e) => {
                        log::warn!("skipping frame {}: {}", entry.index, e);
                        self.skipped.push(SkippedFrame {
                            index: entry.index,
                            path: entry.path,
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }
    }
}

impl Iterator for FrameStream {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        self.refill();
        self.ready.pop_front()
    }
}

/// Open a directory of numbered images or a frame manifest.
pub fn open_frame_stream(source: &Path) -> Result<FrameStream> {
    Ok(FrameStream::from_entries(list_frames(source)?))
}

//! Synthetic track scenes with exact ground truth.
//!
//! Scene content is defined in warped (bird's-eye) coordinates and
//! rendered into the camera view through the calibration homography, so
//! every geometric quantity in the ground truth is known analytically.
//! Frames are plain RGB rasters; [`render_scene`] writes them out together
//! with a frame manifest, the truth file, a replayable signal-detection
//! file and a run config that analyzes the scene as rendered.

pub mod corpus;
pub mod eval;

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::detecthub::{augment, AugmentOp};
use crate::error::{Error, Result};
use crate::ingest::{Frame, GeoPoint, DEFAULT_FRAME_INTERVAL_MS};
use crate::par::{self, ExecMode};
use crate::railgeom::{CalibrationProfile, Point2};
use crate::raster::RgbRaster;
use crate::signalstate::{AssetType, BBox, SignalState};

pub use eval::{evaluate, evaluate_records, format_accuracy, Counts, EvalParams, EvalReport};

pub const TRUTH_FILE: &str = "truth.jsonl";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SIGNALS_FILE: &str = "signals.det";
pub const CONFIG_FILE: &str = "config.toml";

/// Loose-ballast truth cut: scenes below this gravel density are defective.
pub const LOOSE_BALLAST_DENSITY: f64 = 0.3;

const RAIL_GRAY: f64 = 220.0;
const BARE_GRAY: f64 = 75.0;
const TIE_GRAY: f64 = 90.0;
const GRAVEL_LO: f64 = 40.0;
const GRAVEL_SPAN: f64 = 70.0;
const GRAVEL_CELL_PX: f64 = 2.0;
const TIE_PERIOD_ROWS: f64 = 24.0;
const TIE_ROWS: f64 = 8.0;
const OBJECT_GRAY: f64 = 235.0;
const BACKGROUND_RGB: [u8; 3] = [150, 160, 170];
const HOUSING_RGB: [u8; 3] = [30, 30, 30];
const RED_LAMP: [u8; 3] = [255, 0, 0];
const GREEN_LAMP: [u8; 3] = [0, 200, 40];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RailSpec {
    /// Rail centers in warped columns.
    pub left_x: f64,
    pub right_x: f64,
    pub half_width_px: f64,
}

impl Default for RailSpec {
    fn default() -> Self {
        Self {
            left_x: 90.0,
            right_x: 150.0,
            half_width_px: 4.5,
        }
    }
}

/// Lateral buckle: three alternating lobes whose net offset and tilt are
/// zero, so the straight-line fit of the rail is unaffected and the peak
/// residual equals `amplitude_px`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinkSpec {
    pub start_frame: u64,
    pub duration: u64,
    pub amplitude_px: f64,
    #[serde(default = "default_kink_center")]
    pub center_row: f64,
    #[serde(default = "default_kink_length")]
    pub length_rows: f64,
}

fn default_kink_center() -> f64 {
    120.0
}

fn default_kink_length() -> f64 {
    120.0
}

impl KinkSpec {
    pub fn active(&self, frame: u64) -> bool {
        self.amplitude_px > 0.0 && frame >= self.start_frame && frame < self.start_frame + self.duration
    }

    /// Lateral rail offset at warped row `v`.
    pub fn displacement(&self, v: f64) -> f64 {
        let t = (v - (self.center_row - self.length_rows / 2.0)) / self.length_rows;
        if !(0.0..=1.0).contains(&t) {
            return 0.0;
        }
        let s = (PI * t).sin();
        self.amplitude_px * (3.0 * s * s * s - 2.0 * s)
    }
}

/// A diverging rail leaving one main rail toward the far end of the view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSpec {
    /// Warped row where the diverging rail meets the main rail.
    pub diverge_row: f64,
    pub angle_deg: f64,
    #[serde(default = "default_switch_side")]
    pub side: Side,
}

fn default_switch_side() -> Side {
    Side::Right
}

impl SwitchSpec {
    /// Center of the diverging rail at row `v`, given the main rail center.
    fn center(&self, main: f64, v: f64) -> Option<f64> {
        if v >= self.diverge_row {
            return None;
        }
        let off = self.angle_deg.to_radians().tan() * (self.diverge_row - v);
        Some(match self.side {
            Side::Left => main - off,
            Side::Right => main + off,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LampColor {
    Red,
    Green,
}

impl LampColor {
    pub fn state(self) -> SignalState {
        match self {
            LampColor::Red => SignalState::Red,
            LampColor::Green => SignalState::Green,
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            LampColor::Red => RED_LAMP,
            LampColor::Green => GREEN_LAMP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub first_frame: u64,
    pub last_frame: u64,
    /// Camera box `[x, y, w, h]` on the first frame.
    pub bbox_start: [f64; 4],
    /// Box on the last frame; linear in between. Defaults to `bbox_start`.
    #[serde(default)]
    pub bbox_end: Option<[f64; 4]>,
    pub color: LampColor,
    #[serde(default = "default_lamp_fraction")]
    pub lamp_fraction: f64,
    /// Frames where the signal is drawn but the detector misses it.
    #[serde(default)]
    pub dropout_frames: Vec<u64>,
    #[serde(default = "default_detector_confidence")]
    pub detector_confidence: f64,
}

fn default_lamp_fraction() -> f64 {
    0.2
}

fn default_detector_confidence() -> f64 {
    0.9
}

impl SignalSpec {
    pub fn visible(&self, frame: u64) -> bool {
        (self.first_frame..=self.last_frame).contains(&frame)
    }

    pub fn detected(&self, frame: u64) -> bool {
        self.visible(frame) && !self.dropout_frames.contains(&frame)
    }

    pub fn bbox_at(&self, frame: u64) -> BBox {
        let a = self.bbox_start;
        let b = self.bbox_end.unwrap_or(a);
        let span = (self.last_frame - self.first_frame) as f64;
        let t = if span > 0.0 {
            (frame.saturating_sub(self.first_frame) as f64 / span).min(1.0)
        } else {
            0.0
        };
        let l = |i: usize| a[i] + (b[i] - a[i]) * t;
        BBox::new(l(0), l(1), l(2), l(3))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportRailSpec {
    /// Which running rail it accompanies; it lies inside the gauge.
    pub side: Side,
    /// Center-to-center distance from that rail.
    pub offset_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrightObjectSpec {
    /// Which rail it runs beside, outside the track.
    pub side: Side,
    /// Distance from that rail's center to the object's near edge.
    pub offset_px: f64,
    pub width_px: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistractorSpec {
    pub support_rail: Option<SupportRailSpec>,
    pub bright_object: Option<BrightObjectSpec>,
}

/// Straight-line GPS track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpsSpec {
    pub lat: f64,
    pub lon: f64,
    pub meters_per_frame: f64,
    #[serde(default)]
    pub bearing_deg: f64,
}

impl GpsSpec {
    pub fn at(&self, frame: u64) -> GeoPoint {
        const EARTH_RADIUS_M: f64 = 6_371_008.8;
        let d = self.meters_per_frame * frame as f64 / EARTH_RADIUS_M;
        let (p1, l1, th) = (self.lat.to_radians(), self.lon.to_radians(), self.bearing_deg.to_radians());
        let p2 = (p1.sin() * d.cos() + p1.cos() * d.sin() * th.cos()).asin();
        let l2 = l1 + (th.sin() * d.sin() * p1.cos()).atan2(d.cos() - p1.sin() * p2.sin());
        let mut lon = l2.to_degrees();
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        GeoPoint {
            lat: p2.to_degrees(),
            lon,
        }
    }
}

fn default_frames() -> u64 {
    30
}

fn default_width() -> usize {
    640
}

fn default_height() -> usize {
    360
}

fn default_density() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Mandatory: every random choice derives from it.
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub frames: u64,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default)]
    pub calibration: CalibrationProfile,
    #[serde(default)]
    pub rails: RailSpec,
    #[serde(default)]
    pub kink: Option<KinkSpec>,
    #[serde(default = "default_density")]
    pub ballast_density: f64,
    #[serde(default)]
    pub switch: Option<SwitchSpec>,
    #[serde(default)]
    pub signals: Vec<SignalSpec>,
    #[serde(default)]
    pub distractors: DistractorSpec,
    /// Gaussian noise sigma in gray levels.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Lighting: added to every channel, saturating.
    #[serde(default)]
    pub brightness_offset: i16,
    /// Horizontal flip of the whole frame (truth boxes follow).
    #[serde(default)]
    pub mirror: bool,
    #[serde(default)]
    pub gps: Option<GpsSpec>,
}

impl SceneSpec {
    /// Defaults everywhere except the seed.
    pub fn new(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("defaults deserialize")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Config(format!("scene spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene spec: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        self.calibration.validate()?;
        if !self.calibration.roi.fits_within(self.width, self.height) {
            return bad(format!("roi {:?} exceeds the {}x{} image", self.calibration.roi, self.width, self.height));
        }
        let r = &self.rails;
        if !(r.half_width_px > 0.0 && r.left_x < r.right_x) {
            return bad("rails need left_x < right_x and a positive half width".into());
        }
        if !(0.0..=1.0).contains(&self.ballast_density) {
            return bad(format!("ballast_density {} outside [0, 1]", self.ballast_density));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be nonnegative".into());
        }
        if let Some(k) = &self.kink {
            if !(k.amplitude_px >= 0.0 && k.length_rows > 0.0) {
                return bad("kink needs amplitude_px >= 0 and length_rows > 0".into());
            }
        }
        if let Some(s) = &self.switch {
            if !(s.angle_deg > 0.0 && s.angle_deg < 45.0) {
                return bad(format!("switch angle {} outside (0, 45) degrees", s.angle_deg));
            }
        }
        if self.signals.len() > 2 {
            return bad("at most two signals per scene".into());
        }
        for (i, s) in self.signals.iter().enumerate() {
            if s.first_frame > s.last_frame {
                return bad(format!("signal {i}: first_frame after last_frame"));
            }
            if !(s.lamp_fraction > 0.0 && s.lamp_fraction <= 1.0) || !(0.0..=1.0).contains(&s.detector_confidence) {
                return bad(format!("signal {i}: lamp_fraction must lie in (0, 1], confidence in [0, 1]"));
            }
            for f in s.first_frame..=s.last_frame {
                if !s.bbox_at(f).within(self.width, self.height) {
                    return bad(format!("signal {i}: box leaves the image at frame {f}"));
                }
            }
        }
        if let Some(g) = &self.gps {
            GeoPoint::new(g.lat, g.lon)?;
            if !(g.meters_per_frame >= 0.0) {
                return bad("gps meters_per_frame must be nonnegative".into());
            }
        }
        Ok(())
    }

    pub fn loose_ballast(&self) -> bool {
        self.ballast_density < LOOSE_BALLAST_DENSITY
    }

    /// Box actually visible in the output image (after mirroring).
    pub fn image_bbox(&self, s: &SignalSpec, frame: u64) -> BBox {
        let b = s.bbox_at(frame);
        if self.mirror {
            BBox::new(self.width as f64 - b.x - b.w, b.y, b.w, b.h)
        } else {
            b
        }
    }

    /// Run config that analyzes this scene as rendered by [`render_scene`].
    pub fn run_config(&self) -> RunConfig {
        let mut cfg = RunConfig {
            calibration: self.calibration.clone(),
            ..RunConfig::default()
        };
        if !self.signals.is_empty() {
            cfg.plugins.insert("signal".into(), format!("replay:{SIGNALS_FILE}"));
        }
        cfg
    }
}

// splitmix64 finalizer; used as a stateless per-cell hash
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Renders frames of one scene.
#[derive(Debug, Clone)]
pub struct SceneRenderer {
    spec: SceneSpec,
    to_warped: [[f64; 3]; 3],
    mode: ExecMode,
}

/// Per-frame geometry evaluated at warped coordinates.
struct FrameScene<'a> {
    spec: &'a SceneSpec,
    kink: Option<&'a KinkSpec>,
}

impl FrameScene<'_> {
    fn ground(&self, u: f64, v: f64) -> f64 {
        let (cx, cy) = ((u / GRAVEL_CELL_PX).floor() as i64, (v / GRAVEL_CELL_PX).floor() as i64);
        let h = mix(self.spec.seed ^ mix((cx as u64).wrapping_mul(0x1000_0000_01b3) ^ (cy as u64)));
        if unit(h) < self.spec.ballast_density {
            return GRAVEL_LO + GRAVEL_SPAN * unit(mix(h));
        }
        if v.rem_euclid(TIE_PERIOD_ROWS) < TIE_ROWS {
            TIE_GRAY
        } else {
            BARE_GRAY
        }
    }

    fn gray(&self, u: f64, v: f64) -> f64 {
        let spec = self.spec;
        let r = &spec.rails;
        let d = self.kink.map_or(0.0, |k| k.displacement(v));
        let (left, right) = (r.left_x + d, r.right_x + d);
        let mut g = self.ground(u, v);
        let mut band = |center: f64, half: f64, level: f64| {
            let cover = (half + 0.5 - (u - center).abs()).clamp(0.0, 1.0);
            g += (level - g) * cover;
        };
        band(left, r.half_width_px, RAIL_GRAY);
        band(right, r.half_width_px, RAIL_GRAY);
        if let Some(s) = &spec.distractors.support_rail {
            let c = match s.side {
                Side::Left => left + s.offset_px,
                Side::Right => right - s.offset_px,
            };
            band(c, r.half_width_px, RAIL_GRAY);
        }
        if let Some(o) = &spec.distractors.bright_object {
            let half = o.width_px / 2.0;
            let c = match o.side {
                Side::Left => r.left_x - o.offset_px - half,
                Side::Right => r.right_x + o.offset_px + half,
            };
            band(c, half - 0.5, OBJECT_GRAY);
        }
        if let Some(sw) = &spec.switch {
            let main = match sw.side {
                Side::Left => left,
                Side::Right => right,
            };
            if let Some(c) = sw.center(main, v) {
                band(c, r.half_width_px, RAIL_GRAY);
            }
        }
        g
    }
}

impl SceneRenderer {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let to_warped = spec.calibration.homography()?.matrix();
        Ok(Self {
            spec: spec.clone(),
            to_warped,
            mode: ExecMode::default(),
        })
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    fn warped_of(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.to_warped;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        ((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w)
    }

    pub fn render(&self, frame: u64) -> RgbRaster {
        let spec = &self.spec;
        let scene = FrameScene {
            spec,
            kink: spec.kink.as_ref().filter(|k| k.active(frame)),
        };
        let roi = spec.calibration.roi;
        let boxes: Vec<(BBox, LampColor, f64)> = spec
            .signals
            .iter()
            .filter(|s| s.visible(frame))
            .map(|s| (s.bbox_at(frame), s.color, s.lamp_fraction))
            .collect();
        let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("finite sigma"));
        let frame_seed = mix(spec.seed ^ mix(frame.wrapping_add(0x5eed)));
        let (w, h) = (spec.width, spec.height);
        let mut img = RgbRaster::new(w, h);
        par::fill_rows(self.mode, &mut img.data, w * 3, |y, row| {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
            rng.set_stream(y as u64);
            let in_roi_row = y >= roi.y && y < roi.y + roi.h;
            for x in 0..w {
                let mut rgb = if in_roi_row && x >= roi.x && x < roi.x + roi.w {
                    let mut acc = 0.0;
                    for (dx, dy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                        let (u, v) = self.warped_of(x as f64 + dx, y as f64 + dy);
                        acc += scene.gray(u, v);
                    }
                    let g = (acc / 4.0).round().clamp(0.0, 255.0) as u8;
                    [g, g, g]
                } else {
                    BACKGROUND_RGB
                };
                for (b, color, frac) in &boxes {
                    if let Some(c) = signal_pixel(b, *color, *frac, x, y) {
                        rgb = c;
                    }
                }
                if let Some(n) = &noise {
                    let e = n.sample(&mut rng);
                    for c in rgb.iter_mut() {
                        *c = (*c as f64 + e).round().clamp(0.0, 255.0) as u8;
                    }
                }
                row[x * 3..x * 3 + 3].copy_from_slice(&rgb);
            }
        });
        if spec.brightness_offset != 0 {
            img = augment(&img, AugmentOp::Brightness { delta: spec.brightness_offset });
        }
        if spec.mirror {
            img = augment(&img, AugmentOp::Mirror);
        }
        img
    }

    pub fn frame(&self, index: u64) -> Frame {
        let mut f = Frame::new(index, index * DEFAULT_FRAME_INTERVAL_MS, self.render(index));
        f.geo = self.spec.gps.as_ref().map(|g| g.at(index));
        f
    }

    pub fn frames(&self) -> Vec<Frame> {
        (0..self.spec.frames).map(|i| self.frame(i)).collect()
    }
}

/// Housing or lamp color of pixel `(x, y)` if it falls inside the box.
fn signal_pixel(b: &BBox, color: LampColor, frac: f64, x: usize, y: usize) -> Option<[u8; 3]> {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    if px < b.x || py < b.y || px >= b.x + b.w || py >= b.y + b.h {
        return None;
    }
    let k = frac.sqrt();
    let (lw, lh) = (b.w * k, b.h * k);
    let (lx, ly) = (b.x + (b.w - lw) / 2.0, b.y + (b.h - lh) / 2.0);
    Some(if px >= lx && px < lx + lw && py >= ly && py < ly + lh {
        color.rgb()
    } else {
        HOUSING_RGB
    })
}

/// Render every frame of a scene in memory.
pub fn render_frames(spec: &SceneSpec) -> Result<Vec<Frame>> {
    Ok(SceneRenderer::new(spec)?.frames())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTruth {
    pub asset_id: String,
    pub bbox: BBox,
    pub color: LampColor,
    /// False on dropout frames, where the detector replay omits it.
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame_index: u64,
    pub timestamp_ms: u64,
    pub geo: Option<GeoPoint>,
    pub kink_present: bool,
    pub kink_amplitude_px: f64,
    pub loose_ballast: bool,
    pub switch_present: bool,
    pub signals: Vec<SignalTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetTruth {
    pub asset_id: String,
    pub asset_type: AssetType,
    pub first_frame: u64,
    pub last_frame: u64,
    pub state: Option<SignalState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TruthRecord {
    Frame(FrameTruth),
    Asset(AssetTruth),
}

/// Analytic ground truth of a scene.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub frames: Vec<FrameTruth>,
    pub assets: Vec<AssetTruth>,
}

impl GroundTruth {
    pub fn asset_count(&self, t: AssetType) -> usize {
        self.assets.iter().filter(|a| a.asset_type == t).count()
    }

    pub fn records(&self) -> impl Iterator<Item = TruthRecord> + '_ {
        self.frames
            .iter()
            .cloned()
            .map(TruthRecord::Frame)
            .chain(self.assets.iter().cloned().map(TruthRecord::Asset))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for r in self.records() {
            text.push_str(&serde_json::to_string(&r)?);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut gt = GroundTruth::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))? {
                TruthRecord::Frame(f) => gt.frames.push(f),
                TruthRecord::Asset(a) => gt.assets.push(a),
            }
        }
        Ok(gt)
    }
}

pub fn signal_asset_id(i: usize) -> String {
    format!("signal-{i}")
}

/// Ground truth straight from the spec parameters.
pub fn ground_truth(spec: &SceneSpec) -> GroundTruth {
    let frames = (0..spec.frames)
        .map(|i| {
            let kink = spec.kink.as_ref().filter(|k| k.active(i));
            FrameTruth {
                frame_index: i,
                timestamp_ms: i * DEFAULT_FRAME_INTERVAL_MS,
                geo: spec.gps.as_ref().map(|g| g.at(i)),
                kink_present: kink.is_some(),
                kink_amplitude_px: kink.map_or(0.0, |k| k.amplitude_px),
                loose_ballast: spec.loose_ballast(),
                switch_present: spec.switch.is_some(),
                signals: spec
                    .signals
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.visible(i))
                    .map(|(n, s)| SignalTruth {
                        asset_id: signal_asset_id(n),
                        bbox: spec.image_bbox(s, i),
                        color: s.color,
                        detected: s.detected(i),
                    })
                    .collect(),
            }
        })
        .collect();
    let mut assets: Vec<AssetTruth> = spec
        .signals
        .iter()
        .enumerate()
        .map(|(n, s)| AssetTruth {
            asset_id: signal_asset_id(n),
            asset_type: AssetType::Signal,
            first_frame: s.first_frame,
            last_frame: s.last_frame,
            state: Some(s.color.state()),
        })
        .collect();
    if spec.switch.is_some() && spec.frames > 0 {
        assets.push(AssetTruth {
            asset_id: "switch-0".into(),
            asset_type: AssetType::Switch,
            first_frame: 0,
            last_frame: spec.frames - 1,
            state: None,
        });
    }
    GroundTruth { frames, assets }
}

/// Replayable detector output for the scene's signals, frame-major.
pub fn signal_detections(spec: &SceneSpec) -> String {
    let mut out = String::new();
    for f in 0..spec.frames {
        for s in spec.signals.iter().filter(|s| s.detected(f)) {
            let b = spec.image_bbox(s, f);
            out.push_str(&format!("{f} signal {} {} {} {} {}\n", s.detector_confidence, b.x, b.y, b.w, b.h));
        }
    }
    out
}

/// Write frames, manifest, truth, signal replay and run config to `out`.
pub fn render_scene(spec: &SceneSpec, out: &Path) -> Result<GroundTruth> {
    let renderer = SceneRenderer::new(spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let truth = ground_truth(spec);

    const BATCH: u64 = 16;
    let mut manifest = String::from("# index path timestamp_ms [lat lon]\n");
    let mut start = 0;
    while start < spec.frames {
        let end = (start + BATCH).min(spec.frames);
        let idx: Vec<u64> = (start..end).collect();
        let frames = par::map(ExecMode::default(), &idx, |&i| renderer.frame(i));
        for f in &frames {
            let name = format!("{:06}.png", f.index);
            f.image.save(&out.join(&name))?;
            manifest.push_str(&format!("{} {} {}", f.index, name, f.timestamp_ms));
            if let Some(g) = f.geo {
                manifest.push_str(&format!(" {} {}", g.lat, g.lon));
            }
            manifest.push('\n');
        }
        start = end;
    }
    let write = |name: &str, text: &str| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write(MANIFEST_FILE, &manifest)?;
    truth.write(&out.join(TRUTH_FILE))?;
    if !spec.signals.is_empty() {
        write(SIGNALS_FILE, &signal_detections(spec))?;
    }
    write(CONFIG_FILE, &spec.run_config().to_toml_string())?;
    write("scene.toml", &spec.to_toml_string())?;
    Ok(truth)
}

/// Camera-space rail center for warped row `v` (test and tooling aid).
pub fn camera_point(spec: &SceneSpec, u: f64, v: f64) -> Result<Point2> {
    spec.calibration.homography()?.inverse()?.project(Point2::new(u, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kink_shape_is_balanced() {
        let k = KinkSpec {
            start_frame: 0,
            duration: 1,
            amplitude_px: 12.0,
            center_row: 120.0,
            length_rows: 120.0,
        };
        assert!((k.displacement(120.0) - 12.0).abs() < 1e-12);
        assert_eq!(k.displacement(59.0), 0.0);
        assert_eq!(k.displacement(181.0), 0.0);
        let n = 240;
        let (mut s0, mut s1) = (0.0, 0.0);
        for y in 0..n {
            let d = k.displacement(y as f64);
            s0 += d;
            s1 += d * (y as f64 - 120.0);
        }
        assert!(s0.abs() / n as f64 <= 0.01, "mean {}", s0 / n as f64);
        assert!(s1.abs() < 1e-6 * 240.0 * 240.0);
    }

    #[test]
    fn zero_amplitude_kink_is_absent() {
        let mut s = SceneSpec::new(1);
        s.frames = 3;
        s.kink = Some(KinkSpec {
            start_frame: 0,
            duration: 3,
            amplitude_px: 0.0,
            center_row: 120.0,
            length_rows: 120.0,
        });
        assert!(ground_truth(&s).frames.iter().all(|f| !f.kink_present));
    }

    #[test]
    fn density_sets_ballast_truth() {
        let mut s = SceneSpec::new(1);
        s.frames = 2;
        s.ballast_density = 0.0;
        assert!(ground_truth(&s).frames.iter().all(|f| f.loose_ballast));
        s.ballast_density = 0.3;
        assert!(ground_truth(&s).frames.iter().all(|f| !f.loose_ballast));
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let mut s = SceneSpec::new(9);
        s.noise_sigma = 2.0;
        let a = SceneRenderer::new(&s).unwrap().with_mode(ExecMode::Sequential).render(4);
        let b = SceneRenderer::new(&s).unwrap().with_mode(ExecMode::Parallel).render(4);
        assert_eq!(a, b);
        assert_ne!(a, SceneRenderer::new(&s).unwrap().render(5));
    }

    #[test]
    fn spec_requires_seed_and_rejects_typos() {
        assert!(SceneSpec::from_toml_str("frames = 3").is_err());
        assert!(SceneSpec::from_toml_str("seed = 1\nframe = 3").is_err());
        let s = SceneSpec::from_toml_str("seed = 4\n[kink]\nstart_frame = 1\nduration = 2\namplitude_px = 12.0\n").unwrap();
        assert_eq!(SceneSpec::from_toml_str(&s.to_toml_string()).unwrap(), s);
    }

    #[test]
    fn gps_track_spacing() {
        let g = GpsSpec {
            lat: 12.97,
            lon: 77.59,
            meters_per_frame: 5.0,
            bearing_deg: 30.0,
        };
        let d = g.at(0).haversine_m(&g.at(20));
        assert!((d - 100.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn signal_lamp_fraction() {
        let b = BBox::new(10.0, 10.0, 20.0, 40.0);
        let (mut lamp, mut all) = (0, 0);
        for y in 0..60 {
            for x in 0..40 {
                match signal_pixel(&b, LampColor::Red, 0.25, x, y) {
                    Some(RED_LAMP) => {
                        lamp += 1;
                        all += 1
                    }
                    Some(_) => all += 1,
                    None => {}
                }
            }
        }
        assert_eq!(all, 800);
        assert_eq!(lamp, 200);
    }
}

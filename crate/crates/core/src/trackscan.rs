//! Classical sunkink detector.
//!
//! The warped ROI is binarized, each scan row is searched for bright runs
//! of rail width, and a left/right pair is picked either near last frame's
//! prediction or by closeness to the nominal gauge. A kink is flagged when
//! a rail's per-row positions zig-zag around their least-squares line.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Frame;
use crate::par::{self, ExecMode};
use crate::railgeom::{measure_gauge, CalibrationProfile, Warper};
use crate::raster::GrayRaster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BinarizeParams {
    /// `out = pixel >= threshold`
    Fixed { threshold: u8 },
    /// `out = pixel >= mean(window x window, clamped at borders) + offset`
    AdaptiveMean { window: usize, offset: f64 },
}

impl Default for BinarizeParams {
    fn default() -> Self {
        BinarizeParams::Fixed { threshold: 150 }
    }
}

impl BinarizeParams {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BinarizeParams::Fixed { .. } => Ok(()),
            BinarizeParams::AdaptiveMean { window, offset } => {
                if window == 0 || window % 2 == 0 {
                    return Err(Error::Config(format!(
                        "adaptive-mean window must be odd and positive, got {window}"
                    )));
                }
                if !offset.is_finite() {
                    return Err(Error::Config("adaptive-mean offset must be finite".into()));
                }
                Ok(())
            }
        }
    }
}

/// Thresholded raster. `strength` holds how far each true pixel sits above
/// its threshold and is used to weight run centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryRaster {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub strength: Vec<f32>,
}

impl BinaryRaster {
    /// Unweighted raster from a plain mask.
    pub fn from_mask(width: usize, height: usize, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), width * height);
        let strength = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Self {
            width,
            height,
            mask,
            strength,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count_true(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn binarize(warped: &GrayRaster, params: &BinarizeParams) -> Result<BinaryRaster> {
    binarize_with(warped, params, ExecMode::default())
}

pub fn binarize_with(warped: &GrayRaster, params: &BinarizeParams, mode: ExecMode) -> Result<BinaryRaster> {
    params.validate()?;
    let (w, h) = (warped.width, warped.height);
    let mut out = BinaryRaster {
        width: w,
        height: h,
        mask: vec![false; w * h],
        strength: vec![0.0; w * h],
    };
    match *params {
        BinarizeParams::Fixed { threshold } => {
            let t = threshold as f32;
            for ((m, s), &v) in out.mask.iter_mut().zip(out.strength.iter_mut()).zip(&warped.data) {
                if v >= threshold {
                    *m = true;
                    *s = v as f32 - t;
                }
            }
        }
        BinarizeParams::AdaptiveMean { window, offset } => {
            let integral = integral_image(warped);
            let r = window / 2;
            let stride = w + 1;
            let mut cells = vec![(false, 0.0f32); w * h];
            par::fill_rows(mode, &mut cells, w, |y, row| {
                let y0 = y.saturating_sub(r);
                let y1 = (y + r).min(h - 1) + 1;
                for (x, cell) in row.iter_mut().enumerate() {
                    let x0 = x.saturating_sub(r);
                    let x1 = (x + r).min(w - 1) + 1;
                    let sum = integral[y1 * stride + x1] + integral[y0 * stride + x0]
                        - integral[y0 * stride + x1]
                        - integral[y1 * stride + x0];
                    let n = ((x1 - x0) * (y1 - y0)) as f64;
                    let v = warped.data[y * w + x] as f64;
                    // v >= sum / n + offset, scaled by n so that v == mean is exact
                    let scaled = v * n - sum as f64 - offset * n;
                    if scaled >= 0.0 {
                        *cell = (true, (scaled / n) as f32);
                    }
                }
            });
            for (i, (m, s)) in cells.into_iter().enumerate() {
                out.mask[i] = m;
                out.strength[i] = s;
            }
        }
    }
    Ok(out)
}

fn integral_image(img: &GrayRaster) -> Vec<u64> {
    let (w, h) = (img.width, img.height);
    let stride = w + 1;
    let mut s = vec![0u64; stride * (h + 1)];
    for y in 0..h {
        let mut row_sum = 0u64;
        for x in 0..w {
            row_sum += img.data[y * w + x] as u64;
            s[(y + 1) * stride + x + 1] = s[y * stride + x + 1] + row_sum;
        }
    }
    s
}

/// Tunables of the classical detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanParams {
    pub kink_threshold_px: f64,
    pub noise_floor_px: f64,
    pub min_alternations: usize,
    pub min_support_rows: usize,
    pub search_halfwidth_px: f64,
    /// Blend factor for the per-row position prediction.
    pub alpha: f64,
    pub max_prediction_age: u32,
    pub min_valid_fraction: f64,
    pub min_rail_width_px: usize,
    pub max_rail_width_px: usize,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            kink_threshold_px: 6.0,
            noise_floor_px: 1.0,
            min_alternations: 2,
            min_support_rows: 20,
            search_halfwidth_px: 15.0,
            alpha: 0.5,
            max_prediction_age: 5,
            min_valid_fraction: 0.5,
            min_rail_width_px: 4,
            max_rail_width_px: 20,
        }
    }
}

impl ScanParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("trackscan: {m}")));
        if !(self.kink_threshold_px > 0.0) {
            return bad("kink_threshold_px must be positive");
        }
        if !(self.noise_floor_px >= 0.0) {
            return bad("noise_floor_px must be nonnegative");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.search_halfwidth_px > 0.0) {
            return bad("search_halfwidth_px must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return bad("min_valid_fraction must lie in [0, 1]");
        }
        if self.min_rail_width_px == 0 || self.min_rail_width_px > self.max_rail_width_px {
            return bad("rail width range must satisfy 0 < min <= max");
        }
        if self.min_support_rows < 2 {
            return bad("min_support_rows must be at least 2");
        }
        Ok(())
    }
}

/// A maximal run of true pixels in one row, `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Run {
    pub start: usize,
    pub end: usize,
    pub centroid: f64,
}

impl Run {
    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

/// Rail-width runs of row `y`, left to right.
pub fn rail_runs(binary: &BinaryRaster, y: usize, params: &ScanParams) -> Vec<Run> {
    let w = binary.width;
    let mask = &binary.mask[y * w..(y + 1) * w];
    let strength = &binary.strength[y * w..(y + 1) * w];
    let mut runs = Vec::new();
    let mut x = 0;
    while x < w {
        if !mask[x] {
            x += 1;
            continue;
        }
        let start = x;
        while x < w && mask[x] {
            x += 1;
        }
        let width = x - start;
        if width >= params.min_rail_width_px && width <= params.max_rail_width_px {
            let (mut sw, mut swx) = (0.0f64, 0.0f64);
            for (i, &s) in strength[start..x].iter().enumerate() {
                sw += s as f64;
                swx += s as f64 * (start + i) as f64;
            }
            let centroid = if sw > 0.0 {
                swx / sw
            } else {
                (start + x - 1) as f64 / 2.0
            };
            runs.push(Run {
                start,
                end: x,
                centroid,
            });
        }
    }
    runs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RailRow {
    pub y: usize,
    pub left_x: Option<f64>,
    pub right_x: Option<f64>,
    pub gauge_px: Option<f64>,
    pub valid: bool,
}

impl RailRow {
    pub fn invalid(y: usize) -> Self {
        Self {
            y,
            left_x: None,
            right_x: None,
            gauge_px: None,
            valid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RailObservation {
    pub frame_index: u64,
    pub rows: Vec<RailRow>,
}

impl RailObservation {
    pub fn valid_rows(&self) -> impl Iterator<Item = &RailRow> {
        self.rows.iter().filter(|r| r.valid)
    }

    pub fn valid_count(&self) -> usize {
        self.valid_rows().count()
    }
}

/// Temporal prior: last frame's per-row rail positions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackState {
    /// Per-row predictions; empty when absent.
    pub last_left: Vec<Option<f64>>,
    pub last_right: Vec<Option<f64>>,
    pub age_frames: u32,
    pub search_halfwidth_px: f64,
    pub last_frame_index: Option<u64>,
}

impl TrackState {
    pub fn new(params: &ScanParams) -> Self {
        Self {
            search_halfwidth_px: params.search_halfwidth_px,
            ..Default::default()
        }
    }

    pub fn has_prediction(&self) -> bool {
        self.last_left.iter().any(Option::is_some) || self.last_right.iter().any(Option::is_some)
    }

    fn clear(&mut self) {
        self.last_left.clear();
        self.last_right.clear();
        self.age_frames = 0;
    }

    fn predicted(&self, y: usize) -> Option<(f64, f64)> {
        match (self.last_left.get(y).copied().flatten(), self.last_right.get(y).copied().flatten()) {
            (Some(l), Some(r)) => Some((l, r)),
            _ => None,
        }
    }
}

fn nearest_within(runs: &[Run], target: f64, halfwidth: f64) -> Option<usize> {
    runs.iter()
        .enumerate()
        .map(|(i, r)| (i, (r.centroid - target).abs()))
        .filter(|&(_, d)| d <= halfwidth)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

fn pick_row(runs: &[Run], y: usize, prior: Option<&TrackState>, calib: &CalibrationProfile) -> RailRow {
    let gauge_row = |l: f64, r: f64| {
        let g = measure_gauge(l, r, calib.nominal_gauge_px, calib.gauge_tolerance_px);
        RailRow {
            y,
            left_x: Some(l),
            right_x: Some(r),
            gauge_px: g.gauge_px,
            valid: g.valid,
        }
    };

    let mut guided = None;
    if let Some((pl, pr)) = prior.and_then(|s| s.predicted(y).map(|p| (p, s.search_halfwidth_px))).map(|(p, hw)| {
        (
            nearest_within(runs, p.0, hw),
            nearest_within(runs, p.1, hw),
        )
    }) {
        if let (Some(li), Some(ri)) = (pl, pr) {
            if li != ri {
                let row = gauge_row(runs[li].centroid, runs[ri].centroid);
                if row.valid {
                    return row;
                }
                guided = Some(row);
            }
        }
    }

    // Unguided: the ordered pair whose gauge is closest to nominal; the
    // leftmost pair wins ties.
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let d = (runs[j].centroid - runs[i].centroid - calib.nominal_gauge_px).abs();
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, i, j));
            }
        }
    }
    match best {
        Some((_, i, j)) => gauge_row(runs[i].centroid, runs[j].centroid),
        None => guided.unwrap_or_else(|| RailRow::invalid(y)),
    }
}

/// Find the rail pair on every scan row.
pub fn extract_rails(
    binary: &BinaryRaster,
    prior: Option<&TrackState>,
    calib: &CalibrationProfile,
    params: &ScanParams,
    frame_index: u64,
) -> RailObservation {
    let prior = prior.filter(|s| s.has_prediction());
    let rows = par::map_range(ExecMode::Sequential, binary.height, |y| {
        let runs = rail_runs(binary, y, params);
        pick_row(&runs, y, prior, calib)
    });
    RailObservation { frame_index, rows }
}

/// Blend the observation into the per-row prediction and age the state.
pub fn update_state(prev: &TrackState, obs: &RailObservation, params: &ScanParams) -> TrackState {
    let n = obs.rows.len();
    let mut next = prev.clone();
    next.search_halfwidth_px = params.search_halfwidth_px;
    next.last_left.resize(n.max(next.last_left.len()), None);
    next.last_right.resize(n.max(next.last_right.len()), None);
    let blend = |p: Option<f64>, o: f64| match p {
        Some(p) => (1.0 - params.alpha) * p + params.alpha * o,
        None => o,
    };
    for row in obs.rows.iter().filter(|r| r.valid) {
        let (l, r) = (row.left_x.unwrap(), row.right_x.unwrap());
        next.last_left[row.y] = Some(blend(next.last_left[row.y], l));
        next.last_right[row.y] = Some(blend(next.last_right[row.y], r));
    }
    let valid_fraction = if n == 0 {
        0.0
    } else {
        obs.valid_count() as f64 / n as f64
    };
    if n > 0 && valid_fraction >= params.min_valid_fraction {
        next.age_frames = 0;
    } else {
        next.age_frames = prev.age_frames.saturating_add(1);
    }
    if next.age_frames > params.max_prediction_age {
        next.clear();
    }
    next.last_frame_index = Some(obs.frame_index);
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KinkSide {
    Left,
    Right,
    Both,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinkVerdict {
    pub frame_index: u64,
    pub flagged: bool,
    pub amplitude_px: f64,
    pub side: KinkSide,
    pub affected_rows: Option<(usize, usize)>,
    pub confidence: f64,
    /// Fewer than `min_support_rows` valid rows.
    pub data_insufficient: bool,
}

/// Least-squares line fit and zig-zag statistics for one rail.
#[derive(Debug, Clone, PartialEq)]
pub struct SideFit {
    pub slope: f64,
    pub intercept: f64,
    pub amplitude_px: f64,
    pub alternations: usize,
    pub support_rows: usize,
    /// Rows whose residual exceeds the noise floor.
    pub deviating_rows: Option<(usize, usize)>,
}

pub fn fit_side(points: &[(usize, f64)], noise_floor_px: f64) -> Option<SideFit> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let my = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mx = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut syy, mut sxy) = (0.0, 0.0);
    for &(y, x) in points {
        let dy = y as f64 - my;
        syy += dy * dy;
        sxy += dy * (x - mx);
    }
    let slope = if syy > 0.0 { sxy / syy } else { 0.0 };
    let intercept = mx - slope * my;

    let mut amplitude: f64 = 0.0;
    let mut alternations = 0;
    let mut last_sign = 0i8;
    let mut deviating: Option<(usize, usize)> = None;
    for &(y, x) in points {
        let r = x - (slope * y as f64 + intercept);
        amplitude = amplitude.max(r.abs());
        if r.abs() > noise_floor_px {
            let s = if r > 0.0 { 1 } else { -1 };
            if last_sign != 0 && s != last_sign {
                alternations += 1;
            }
            last_sign = s;
            deviating = Some(match deviating {
                Some((lo, hi)) => (lo.min(y), hi.max(y)),
                None => (y, y),
            });
        }
    }
    Some(SideFit {
        slope,
        intercept,
        amplitude_px: amplitude,
        alternations,
        support_rows: points.len(),
        deviating_rows: deviating,
    })
}

/// Zig-zag test on both rails; the worse side is reported.
pub fn detect_kink(obs: &RailObservation, params: &ScanParams) -> KinkVerdict {
    let left: Vec<(usize, f64)> = obs.valid_rows().map(|r| (r.y, r.left_x.unwrap())).collect();
    let right: Vec<(usize, f64)> = obs.valid_rows().map(|r| (r.y, r.right_x.unwrap())).collect();

    if left.len() < params.min_support_rows {
        return KinkVerdict {
            frame_index: obs.frame_index,
            flagged: false,
            amplitude_px: 0.0,
            side: KinkSide::None,
            affected_rows: None,
            confidence: 0.0,
            data_insufficient: true,
        };
    }

    let fits = [
        fit_side(&left, params.noise_floor_px).unwrap(),
        fit_side(&right, params.noise_floor_px).unwrap(),
    ];
    let side_flagged = |f: &SideFit| {
        f.amplitude_px >= params.kink_threshold_px
            && f.alternations >= params.min_alternations
            && f.support_rows >= params.min_support_rows
    };
    let flags = [side_flagged(&fits[0]), side_flagged(&fits[1])];
    let side = match flags {
        [true, true] => KinkSide::Both,
        [true, false] => KinkSide::Left,
        [false, true] => KinkSide::Right,
        [false, false] => KinkSide::None,
    };
    let flagged = flags[0] || flags[1];
    let considered: Vec<&SideFit> = if flagged {
        fits.iter().zip(flags).filter(|(_, f)| *f).map(|(s, _)| s).collect()
    } else {
        fits.iter().collect()
    };
    let amplitude = considered.iter().map(|f| f.amplitude_px).fold(0.0, f64::max);
    let affected_rows = if flagged {
        considered
            .iter()
            .filter_map(|f| f.deviating_rows)
            .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
    } else {
        None
    };
    KinkVerdict {
        frame_index: obs.frame_index,
        flagged,
        amplitude_px: amplitude,
        side,
        affected_rows,
        confidence: (amplitude / (2.0 * params.kink_threshold_px)).clamp(0.0, 1.0),
        data_insufficient: false,
    }
}

/// Everything produced while scanning one frame.
#[derive(Debug, Clone)]
pub struct ScanOutput {
    pub verdict: KinkVerdict,
    pub observation: RailObservation,
    pub warped: GrayRaster,
    pub binary: BinaryRaster,
}

/// Calibrated scanner with a cached inverse warp.
#[derive(Debug, Clone)]
pub struct TrackScanner {
    calib: CalibrationProfile,
    params: ScanParams,
    warper: Warper,
    mode: ExecMode,
}

impl TrackScanner {
    pub fn new(calib: &CalibrationProfile, params: &ScanParams) -> Result<Self> {
        calib.validate()?;
        params.validate()?;
        Ok(Self {
            calib: calib.clone(),
            params: params.clone(),
            warper: Warper::new(calib)?,
            mode: ExecMode::default(),
        })
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn calibration(&self) -> &CalibrationProfile {
        &self.calib
    }

    pub fn params(&self) -> &ScanParams {
        &self.params
    }

    pub fn warper(&self) -> &Warper {
        &self.warper
    }

    pub fn initial_state(&self) -> TrackState {
        TrackState::new(&self.params)
    }

    /// Warp and binarize; pure, so it may run ahead on many frames.
    pub fn prepare(&self, frame: &Frame) -> Result<(GrayRaster, BinaryRaster)> {
        let warped = self.warper.warp(&frame.image, self.mode)?;
        let binary = binarize_with(&warped, &self.calib.binarize, self.mode)?;
        Ok((warped, binary))
    }

    /// Temporal half of the scan on a prepared frame.
    pub fn scan_prepared(
        &self,
        frame_index: u64,
        warped: GrayRaster,
        binary: BinaryRaster,
        state: &TrackState,
    ) -> (ScanOutput, TrackState) {
        let mut prior = state.clone();
        if let Some(last) = prior.last_frame_index {
            if frame_index > last + 1 {
                let gap = (frame_index - last - 1).min(u32::MAX as u64) as u32;
                prior.age_frames = prior.age_frames.saturating_add(gap);
                if prior.age_frames > self.params.max_prediction_age {
                    prior.clear();
                }
            }
        }
        let observation = extract_rails(&binary, Some(&prior), &self.calib, &self.params, frame_index);
        let verdict = detect_kink(&observation, &self.params);
        let next = update_state(&prior, &observation, &self.params);
        (
            ScanOutput {
                verdict,
                observation,
                warped,
                binary,
            },
            next,
        )
    }

    pub fn scan(&self, frame: &Frame, state: &TrackState) -> Result<(ScanOutput, TrackState)> {
        let (warped, binary) = self.prepare(frame)?;
        Ok(self.scan_prepared(frame.index, warped, binary, state))
    }
}

/// One-shot scan: warp, binarize, extract with prior, detect, update.
pub fn scan_frame(
    frame: &Frame,
    calib: &CalibrationProfile,
    params: &ScanParams,
    state: &TrackState,
) -> Result<(KinkVerdict, RailObservation, TrackState)> {
    let scanner = TrackScanner::new(calib, params)?;
    let (out, next) = scanner.scan(frame, state)?;
    Ok((out.verdict, out.observation, next))
}

//! Deterministic reference detectors for loose ballast and switches.
//!
//! Both work in the warped bird's-eye view on top of a rail observation, so
//! the whole pipeline (health index included) runs without any trained
//! model.

use serde::{Deserialize, Serialize};

use super::{Detection, DetectorPlugin};
use crate::error::{Error, Result};
use crate::ingest::Frame;
use crate::railgeom::{CalibrationProfile, Warper};
use crate::raster::{GrayRaster, Rect};
use crate::signalstate::BBox;
use crate::trackscan::{binarize, extract_rails, rail_runs, BinaryRaster, RailObservation, Run, ScanParams};

pub const LOOSE_BALLAST: &str = "loose_ballast";
pub const SWITCH: &str = "switch";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BallastParams {
    /// A pixel is textured when its 3×3 gray range exceeds this.
    pub texture_delta: u8,
    /// Coverage at or above which confidence reaches zero.
    pub coverage_ref: f64,
    /// Pixels excluded next to each rail centroid.
    pub rail_margin_px: f64,
}

impl Default for BallastParams {
    fn default() -> Self {
        Self {
            texture_delta: 20,
            coverage_ref: 0.5,
            rail_margin_px: 11.0,
        }
    }
}

impl BallastParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.coverage_ref > 0.0 && self.coverage_ref <= 1.0) {
            return Err(Error::Config("heuristics: coverage_ref must lie in (0, 1]".into()));
        }
        if !(self.rail_margin_px >= 0.0) {
            return Err(Error::Config("heuristics: rail_margin_px must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchParams {
    /// Tolerated growth of the gap between consecutive rows.
    pub noise_floor_px: f64,
    pub min_support_rows: usize,
    /// Edge-to-edge gap at which the extra rail counts as merged.
    pub merge_distance_px: f64,
    /// Minimum total narrowing of the gap; rejects parallel rails.
    pub min_convergence_px: f64,
}

impl Default for SwitchParams {
    fn default() -> Self {
        Self {
            noise_floor_px: 1.0,
            min_support_rows: 20,
            merge_distance_px: 6.0,
            min_convergence_px: 10.0,
        }
    }
}

impl SwitchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_floor_px >= 0.0 && self.merge_distance_px >= 0.0 && self.min_convergence_px >= 0.0) {
            return Err(Error::Config("heuristics: switch distances must be nonnegative".into()));
        }
        if self.min_support_rows < 2 {
            return Err(Error::Config("heuristics: switch min_support_rows must be at least 2".into()));
        }
        Ok(())
    }
}

fn range3x3(img: &GrayRaster, x: usize, y: usize) -> u8 {
    let (x0, x1) = (x.saturating_sub(1), (x + 1).min(img.width - 1));
    let (y0, y1) = (y.saturating_sub(1), (y + 1).min(img.height - 1));
    let (mut lo, mut hi) = (u8::MAX, u8::MIN);
    for yy in y0..=y1 {
        for &v in &img.row(yy)[x0..=x1] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    hi - lo
}

/// Textured fraction of the inter-rail region and the resulting
/// confidence, or `None` when no row has a valid rail pair.
pub fn ballast_coverage(warped: &GrayRaster, obs: &RailObservation, params: &BallastParams) -> Option<(f64, f64)> {
    let (mut total, mut textured) = (0usize, 0usize);
    for row in obs.valid_rows() {
        let (Some(l), Some(r)) = (row.left_x, row.right_x) else {
            continue;
        };
        if row.y >= warped.height {
            continue;
        }
        let lo = (l + params.rail_margin_px).ceil().max(0.0) as usize;
        let hi = ((r - params.rail_margin_px).floor().max(-1.0) + 1.0) as usize;
        for x in lo..hi.min(warped.width) {
            total += 1;
            if range3x3(warped, x, row.y) > params.texture_delta {
                textured += 1;
            }
        }
    }
    if obs.valid_count() == 0 {
        return None;
    }
    let coverage = if total == 0 {
        0.0
    } else {
        textured as f64 / total as f64
    };
    let confidence = ((params.coverage_ref - coverage) / params.coverage_ref).clamp(0.0, 1.0);
    Some((coverage, confidence))
}

fn roi_bbox(roi: &Rect) -> BBox {
    BBox::new(roi.x as f64, roi.y as f64, roi.w as f64, roi.h as f64)
}

/// One extra-rail sample: the row, its centroid, and its edge gap to the
/// nearer main rail.
#[derive(Debug, Clone, Copy)]
struct ExtraRun {
    y: usize,
    centroid: f64,
    gap: f64,
}

fn extra_run(runs: &[Run], y: usize, left: f64, right: f64) -> Option<ExtraRun> {
    let is_main = |r: &Run| (r.centroid - left).abs() < 0.5 || (r.centroid - right).abs() < 0.5;
    let main: Vec<&Run> = runs.iter().filter(|r| is_main(r)).collect();
    if main.len() < 2 {
        return None;
    }
    runs.iter()
        .filter(|r| !is_main(r))
        .map(|r| {
            let gap = main
                .iter()
                .map(|m| {
                    if r.start >= m.end {
                        (r.start - m.end) as f64
                    } else if m.start >= r.end {
                        (m.start - r.end) as f64
                    } else {
                        0.0
                    }
                })
                .fold(f64::INFINITY, f64::min);
            ExtraRun {
                y,
                centroid: r.centroid,
                gap,
            }
        })
        .min_by(|a, b| a.gap.total_cmp(&b.gap))
}

/// Longest row-contiguous chains of extra runs with continuous centroids.
fn chains(samples: &[ExtraRun]) -> Vec<Vec<ExtraRun>> {
    const MAX_ROW_STEP: usize = 3;
    const MAX_SHIFT_PX: f64 = 3.0;
    let mut out: Vec<Vec<ExtraRun>> = Vec::new();
    for &s in samples {
        match out.last_mut() {
            Some(c)
                if {
                    let p = c.last().expect("chains are nonempty");
                    s.y - p.y <= MAX_ROW_STEP && (s.centroid - p.centroid).abs() <= MAX_SHIFT_PX
                } =>
            {
                c.push(s)
            }
            _ => out.push(vec![s]),
        }
    }
    out
}

/// Look for a third rail run converging onto a main rail. Returns the
/// fraction of chain steps that narrow the gap (within the noise floor).
pub fn detect_switch(
    binary: &BinaryRaster,
    obs: &RailObservation,
    scan: &ScanParams,
    params: &SwitchParams,
) -> Option<f64> {
    let samples: Vec<ExtraRun> = obs
        .valid_rows()
        .filter(|r| r.y < binary.height)
        .filter_map(|r| {
            let runs = rail_runs(binary, r.y, scan);
            extra_run(&runs, r.y, r.left_x?, r.right_x?)
        })
        .collect();

    let mut best: Option<f64> = None;
    for mut chain in chains(&samples) {
        if chain.len() < params.min_support_rows {
            continue;
        }
        // walk toward the merging end
        if chain.first().map(|s| s.gap) < chain.last().map(|s| s.gap) {
            chain.reverse();
        }
        let (far, near) = (chain[0].gap, chain[chain.len() - 1].gap);
        if near > params.merge_distance_px || far - near < params.min_convergence_px {
            continue;
        }
        let qualifying = chain.windows(2).filter(|w| w[1].gap <= w[0].gap + params.noise_floor_px).count() + 1;
        if qualifying < params.min_support_rows {
            continue;
        }
        let confidence = qualifying as f64 / chain.len() as f64;
        if best.is_none_or(|b| confidence > b) {
            best = Some(confidence);
        }
    }
    best
}

fn unguided_observation(
    frame: &Frame,
    warper: &Warper,
    calib: &CalibrationProfile,
    scan: &ScanParams,
) -> Result<(GrayRaster, BinaryRaster, RailObservation)> {
    let warped = warper.warp(&frame.image, Default::default())?;
    let binary = binarize(&warped, &calib.binarize)?;
    let obs = extract_rails(&binary, None, calib, scan, frame.index);
    Ok((warped, binary, obs))
}

/// Single-frame loose-ballast check; `None` without a valid rail pair.
pub fn ballast_heuristic(frame: &Frame, calib: &CalibrationProfile) -> Result<Option<Detection>> {
    BallastHeuristic::new(calib.clone(), ScanParams::default(), BallastParams::default())?.detect_frame(frame)
}

/// Switch check for a frame whose rail observation is already known.
pub fn switch_heuristic(frame: &Frame, calib: &CalibrationProfile, obs: &RailObservation) -> Result<Option<Detection>> {
    let warped = Warper::new(calib)?.warp(&frame.image, Default::default())?;
    let binary = binarize(&warped, &calib.binarize)?;
    Ok(detect_switch(&binary, obs, &ScanParams::default(), &SwitchParams::default())
        .map(|c| switch_detection(c, &calib.roi)))
}

fn switch_detection(confidence: f64, roi: &Rect) -> Detection {
    Detection {
        class_name: SWITCH.into(),
        bbox: Some(roi_bbox(roi)),
        confidence,
        source: "heuristic:switch".into(),
    }
}

/// Loose-ballast reference detector as a plugin.
#[derive(Debug, Clone)]
pub struct BallastHeuristic {
    calib: CalibrationProfile,
    scan: ScanParams,
    params: BallastParams,
    warper: Warper,
    classes: Vec<String>,
}

impl BallastHeuristic {
    pub fn new(calib: CalibrationProfile, scan: ScanParams, params: BallastParams) -> Result<Self> {
        params.validate()?;
        let warper = Warper::new(&calib)?;
        Ok(Self {
            calib,
            scan,
            params,
            warper,
            classes: vec![LOOSE_BALLAST.into()],
        })
    }

    /// Score an already warped frame.
    pub fn detect(&self, warped: &GrayRaster, obs: &RailObservation) -> Option<Detection> {
        ballast_coverage(warped, obs, &self.params).map(|(_, confidence)| Detection {
            class_name: LOOSE_BALLAST.into(),
            bbox: Some(roi_bbox(&self.calib.roi)),
            confidence,
            source: self.id().into(),
        })
    }

    pub fn detect_frame(&self, frame: &Frame) -> Result<Option<Detection>> {
        let (warped, _, obs) = unguided_observation(frame, &self.warper, &self.calib, &self.scan)?;
        Ok(self.detect(&warped, &obs))
    }
}

impl DetectorPlugin for BallastHeuristic {
    fn id(&self) -> &str {
        "heuristic:loose_ballast"
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn evaluate(&self, frame: &Frame) -> Result<Vec<Detection>> {
        Ok(self.detect_frame(frame)?.into_iter().collect())
    }
}

/// Switch reference detector as a plugin.
#[derive(Debug, Clone)]
pub struct SwitchHeuristic {
    calib: CalibrationProfile,
    scan: ScanParams,
    params: SwitchParams,
    warper: Warper,
    classes: Vec<String>,
}

impl SwitchHeuristic {
    pub fn new(calib: CalibrationProfile, scan: ScanParams, params: SwitchParams) -> Result<Self> {
        params.validate()?;
        let warper = Warper::new(&calib)?;
        Ok(Self {
            calib,
            scan,
            params,
            warper,
            classes: vec![SWITCH.into()],
        })
    }

    pub fn detect(&self, binary: &BinaryRaster, obs: &RailObservation) -> Option<Detection> {
        detect_switch(binary, obs, &self.scan, &self.params).map(|c| switch_detection(c, &self.calib.roi))
    }
}

impl DetectorPlugin for SwitchHeuristic {
    fn id(&self) -> &str {
        "heuristic:switch"
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn evaluate(&self, frame: &Frame) -> Result<Vec<Detection>> {
        let (_, binary, obs) = unguided_observation(frame, &self.warper, &self.calib, &self.scan)?;
        Ok(self.detect(&binary, &obs).into_iter().collect())
    }
}

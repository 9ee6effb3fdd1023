//! Signal aspect by color masking inside detection boxes, and association
//! of per-frame detections into physical assets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Frame, GeoPoint};

/// Box in source-frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let ix = ((self.x + self.w).min(o.x + o.w) - self.x.max(o.x)).max(0.0);
        let iy = ((self.y + self.h).min(o.y + o.h) - self.y.max(o.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.w >= 0.0
            && self.h >= 0.0
            && self.x + self.w <= width as f64
            && self.y + self.h <= height as f64
    }

    /// Covered pixel range `[x0, x1) x [y0, y1)`, clipped to the image.
    fn pixel_span(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let clip = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        (
            clip(self.x.floor(), width),
            clip((self.x + self.w).ceil(), width),
            clip(self.y.floor(), height),
            clip((self.y + self.h).ceil(), height),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalState {
    Red,
    Green,
    Unknown,
}

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h.rem_euclid(360.0), s, max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorMaskParams {
    /// Red when hue < `red_hue_below` or hue > `red_hue_above`.
    pub red_hue_below: f64,
    pub red_hue_above: f64,
    pub red_min_saturation: f64,
    pub red_min_value: f64,
    pub green_hue_min: f64,
    pub green_hue_max: f64,
    pub green_min_saturation: f64,
    pub green_min_value: f64,
    pub min_color_fraction: f64,
}

impl Default for ColorMaskParams {
    fn default() -> Self {
        Self {
            red_hue_below: 20.0,
            red_hue_above: 340.0,
            red_min_saturation: 0.5,
            red_min_value: 0.3,
            green_hue_min: 90.0,
            green_hue_max: 160.0,
            green_min_saturation: 0.4,
            green_min_value: 0.3,
            min_color_fraction: 0.05,
        }
    }
}

impl ColorMaskParams {
    pub fn validate(&self) -> Result<()> {
        let red_overlaps_green = self.green_hue_min < self.red_hue_below || self.green_hue_max > self.red_hue_above;
        if red_overlaps_green || self.green_hue_min > self.green_hue_max {
            return Err(Error::Config("signal hue ranges must be disjoint and ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.min_color_fraction) {
            return Err(Error::Config("min_color_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_red(&self, h: f64, s: f64, v: f64) -> bool {
        (h < self.red_hue_below || h > self.red_hue_above) && s > self.red_min_saturation && v > self.red_min_value
    }

    pub fn is_green(&self, h: f64, s: f64, v: f64) -> bool {
        (self.green_hue_min..=self.green_hue_max).contains(&h)
            && s > self.green_min_saturation
            && v > self.green_min_value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalObservation {
    pub frame_index: u64,
    pub bbox: BBox,
    pub state: SignalState,
    pub red_fraction: f64,
    pub green_fraction: f64,
}

/// Apply the red and green masks inside `bbox`.
pub fn classify_signal_color(frame: &Frame, bbox: &BBox, params: &ColorMaskParams) -> SignalObservation {
    let (x0, x1, y0, y1) = bbox.pixel_span(frame.width(), frame.height());
    let total = (x1 - x0) * (y1 - y0);
    let mut obs = SignalObservation {
        frame_index: frame.index,
        bbox: *bbox,
        state: SignalState::Unknown,
        red_fraction: 0.0,
        green_fraction: 0.0,
    };
    if total == 0 {
        return obs;
    }
    let (mut red, mut green) = (0usize, 0usize);
    for y in y0..y1 {
        for x in x0..x1 {
            let [r, g, b] = frame.image.get(x, y);
            let (h, s, v) = rgb_to_hsv(r, g, b);
            if params.is_red(h, s, v) {
                red += 1;
            } else if params.is_green(h, s, v) {
                green += 1;
            }
        }
    }
    obs.red_fraction = red as f64 / total as f64;
    obs.green_fraction = green as f64 / total as f64;
    obs.state = if obs.red_fraction >= params.min_color_fraction && obs.red_fraction > obs.green_fraction {
        SignalState::Red
    } else if obs.green_fraction >= params.min_color_fraction && obs.green_fraction > obs.red_fraction {
        SignalState::Green
    } else {
        SignalState::Unknown
    };
    obs
}

/// Drop detections where no color could be established.
pub fn filter_colorless(observations: Vec<SignalObservation>) -> Vec<SignalObservation> {
    observations
        .into_iter()
        .filter(|o| o.state != SignalState::Unknown)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetType {
    Signal,
    Switch,
}

impl AssetType {
    pub fn from_class(class_name: &str) -> Option<Self> {
        match class_name {
            "signal" => Some(AssetType::Signal),
            "switch" => Some(AssetType::Switch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetRecord {
    pub asset_id: String,
    pub asset_type: AssetType,
    pub first_frame: u64,
    pub last_frame: u64,
    pub geo: Option<GeoPoint>,
    pub peak_confidence: f64,
    /// Majority color for signals; absent for other assets.
    pub state: Option<SignalState>,
    pub observations: u64,
}

/// One per-frame sighting fed to association.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetObservation {
    pub frame_index: u64,
    pub asset_type: AssetType,
    pub bbox: Option<BBox>,
    pub confidence: f64,
    /// Signals only.
    pub state: Option<SignalState>,
    pub geo: Option<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationParams {
    pub iou_min: f64,
    pub max_gap_frames: u64,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self {
            iou_min: 0.3,
            max_gap_frames: 3,
        }
    }
}

#[derive(Debug)]
struct OpenTrack {
    id: u64,
    asset_type: AssetType,
    first_frame: u64,
    last_frame: u64,
    last_bbox: Option<BBox>,
    geo: Option<GeoPoint>,
    peak_confidence: f64,
    red: u64,
    green: u64,
    qualifying: u64,
    observations: u64,
}

impl OpenTrack {
    fn into_record(self) -> Option<AssetRecord> {
        if self.qualifying == 0 {
            return None;
        }
        let state = match self.asset_type {
            AssetType::Signal if self.green > self.red => Some(SignalState::Green),
            AssetType::Signal => Some(SignalState::Red),
            AssetType::Switch => None,
        };
        let prefix = match self.asset_type {
            AssetType::Signal => "signal",
            AssetType::Switch => "switch",
        };
        Some(AssetRecord {
            asset_id: format!("{prefix}-{:05}", self.id),
            asset_type: self.asset_type,
            first_frame: self.first_frame,
            last_frame: self.last_frame,
            geo: self.geo,
            peak_confidence: self.peak_confidence,
            state,
            observations: self.observations,
        })
    }
}

/// Greedy overlap chaining over a frame-ordered observation stream.
#[derive(Debug)]
pub struct AssetAssociator {
    params: AssociationParams,
    open: Vec<OpenTrack>,
    next_id: u64,
}

impl AssetAssociator {
    pub fn new(params: AssociationParams) -> Self {
        Self {
            params,
            open: Vec::new(),
            next_id: 0,
        }
    }

    /// Close tracks that can no longer be extended at `frame_index`.
    pub fn advance_to(&mut self, frame_index: u64) -> Vec<AssetRecord> {
        let gap = self.params.max_gap_frames;
        let (stale, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.open)
            .into_iter()
            .partition(|t| frame_index > t.last_frame + gap);
        self.open = keep;
        stale.into_iter().filter_map(OpenTrack::into_record).collect()
    }

    pub fn push(&mut self, obs: &AssetObservation) -> Vec<AssetRecord> {
        let closed = self.advance_to(obs.frame_index);
        let best = self
            .open
            .iter()
            .enumerate()
            .filter(|(_, t)| t.asset_type == obs.asset_type && t.last_frame < obs.frame_index)
            .map(|(i, t)| {
                let iou = match (&t.last_bbox, &obs.bbox) {
                    (Some(a), Some(b)) => a.iou(b),
                    (None, None) => 1.0,
                    _ => 0.0,
                };
                (i, iou)
            })
            .filter(|&(_, iou)| iou >= self.params.iou_min)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);

        let idx = match best {
            Some(i) => i,
            None => {
                self.open.push(OpenTrack {
                    id: self.next_id,
                    asset_type: obs.asset_type,
                    first_frame: obs.frame_index,
                    last_frame: obs.frame_index,
                    last_bbox: obs.bbox,
                    geo: None,
                    peak_confidence: 0.0,
                    red: 0,
                    green: 0,
                    qualifying: 0,
                    observations: 0,
                });
                self.next_id += 1;
                self.open.len() - 1
            }
        };
        let t = &mut self.open[idx];
        t.last_frame = obs.frame_index;
        t.last_bbox = obs.bbox;
        t.observations += 1;
        t.peak_confidence = t.peak_confidence.max(obs.confidence);
        if t.geo.is_none() {
            t.geo = obs.geo;
        }
        let qualifies = match obs.asset_type {
            AssetType::Signal => matches!(obs.state, Some(SignalState::Red | SignalState::Green)),
            AssetType::Switch => true,
        };
        if qualifies {
            t.qualifying += 1;
        }
        match obs.state {
            Some(SignalState::Red) => t.red += 1,
            Some(SignalState::Green) => t.green += 1,
            _ => {}
        }
        closed
    }

    pub fn finish(mut self) -> Vec<AssetRecord> {
        self.open.sort_by_key(|t| t.id);
        self.open.drain(..).filter_map(OpenTrack::into_record).collect()
    }
}

/// Batch association; `observations` must be sorted by frame index.
pub fn associate_assets(observations: &[AssetObservation], params: &AssociationParams) -> Vec<AssetRecord> {
    let mut a = AssetAssociator::new(params.clone());
    let mut out = Vec::new();
    for o in observations {
        out.extend(a.push(o));
    }
    out.extend(a.finish());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RgbRaster;

    fn frame_with(fill: [u8; 3]) -> Frame {
        Frame::new(0, 0, RgbRaster::filled(20, 20, fill))
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(rgb_to_hsv(255, 0, 0), (0.0, 1.0, 1.0));
        let (h, s, v) = rgb_to_hsv(0, 255, 0);
        assert_eq!((h, s, v), (120.0, 1.0, 1.0));
        let (h, _, _) = rgb_to_hsv(255, 0, 1);
        assert!(h > 359.0 && h < 360.0);
        assert_eq!(rgb_to_hsv(128, 128, 128).1, 0.0);
    }

    #[test]
    fn pure_red_box() {
        let o = classify_signal_color(&frame_with([255, 0, 0]), &BBox::new(2.0, 2.0, 10.0, 10.0), &ColorMaskParams::default());
        assert_eq!(o.red_fraction, 1.0);
        assert_eq!(o.state, SignalState::Red);
    }

    #[test]
    fn gray_box_unknown() {
        let o = classify_signal_color(&frame_with([128, 128, 128]), &BBox::new(0.0, 0.0, 20.0, 20.0), &ColorMaskParams::default());
        assert_eq!((o.red_fraction, o.green_fraction), (0.0, 0.0));
        assert_eq!(o.state, SignalState::Unknown);
    }

    #[test]
    fn zero_area_unknown() {
        let o = classify_signal_color(&frame_with([255, 0, 0]), &BBox::new(3.0, 3.0, 0.0, 5.0), &ColorMaskParams::default());
        assert_eq!(o.state, SignalState::Unknown);
        assert_eq!(o.red_fraction, 0.0);
    }

    #[test]
    fn filter_keeps_order() {
        let mk = |state| SignalObservation {
            frame_index: 0,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            state,
            red_fraction: 0.0,
            green_fraction: 0.0,
        };
        let out = filter_colorless(vec![mk(SignalState::Red), mk(SignalState::Unknown), mk(SignalState::Green)]);
        assert_eq!(out.iter().map(|o| o.state).collect::<Vec<_>>(), vec![SignalState::Red, SignalState::Green]);
        assert!(filter_colorless(vec![mk(SignalState::Unknown)]).is_empty());
    }

    fn sig(frame: u64, x: f64, state: SignalState) -> AssetObservation {
        AssetObservation {
            frame_index: frame,
            asset_type: AssetType::Signal,
            bbox: Some(BBox::new(x, 50.0, 16.0, 40.0)),
            confidence: 0.9,
            state: Some(state),
            geo: None,
        }
    }

    #[test]
    fn static_box_one_record() {
        let obs: Vec<_> = (10..=14).map(|f| sig(f, 300.0, SignalState::Green)).collect();
        let recs = associate_assets(&obs, &AssociationParams::default());
        assert_eq!(recs.len(), 1);
        assert_eq!((recs[0].first_frame, recs[0].last_frame), (10, 14));
        assert_eq!(recs[0].state, Some(SignalState::Green));
    }

    #[test]
    fn empty_input() {
        assert!(associate_assets(&[], &AssociationParams::default()).is_empty());
    }

    #[test]
    fn two_disjoint_signals() {
        let mut obs = vec![];
        for f in 0..5 {
            obs.push(sig(f, 100.0, SignalState::Red));
            obs.push(sig(f, 400.0, SignalState::Green));
        }
        let recs = associate_assets(&obs, &AssociationParams::default());
        assert_eq!(recs.len(), 2);
    }

    #[test]
    fn gap_rules() {
        let p = AssociationParams::default();
        let joined = associate_assets(&[sig(0, 100.0, SignalState::Red), sig(3, 100.0, SignalState::Red)], &p);
        assert_eq!(joined.len(), 1);
        let split = associate_assets(&[sig(0, 100.0, SignalState::Red), sig(4, 100.0, SignalState::Red)], &p);
        assert_eq!(split.len(), 2);
    }

    #[test]
    fn tie_vote_is_red() {
        let obs = vec![sig(0, 100.0, SignalState::Green), sig(1, 100.0, SignalState::Red)];
        let recs = associate_assets(&obs, &AssociationParams::default());
        assert_eq!(recs[0].state, Some(SignalState::Red));
    }

    #[test]
    fn unknown_only_track_emits_nothing() {
        let obs = vec![sig(0, 100.0, SignalState::Unknown), sig(1, 100.0, SignalState::Unknown)];
        assert!(associate_assets(&obs, &AssociationParams::default()).is_empty());
    }
}

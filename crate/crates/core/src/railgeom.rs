//! Camera-to-bird's-eye geometry: homography estimation and application,
//! ROI warping to a grayscale top-down raster, and gauge measurement.
//!
//! Pixel coordinates put pixel `(i, j)` at the point `(i, j)`; a homography
//! maps camera coordinates to warped coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Frame;
use crate::par::{self, ExecMode};
use crate::raster::{luma, GrayRaster, Rect, RgbRaster};
use crate::trackscan::BinarizeParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

const DEGENERATE_EPS: f64 = 1e-12;

/// Projective transform normalized so that `m[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalize and validate a raw matrix.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if s.abs() <= DEGENERATE_EPS || !s.is_finite() {
            return Err(Error::Geometry(format!(
                "cannot normalize homography with m[2][2] = {s:e}"
            )));
        }
        let mut n = m;
        for row in n.iter_mut() {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        n[2][2] = 1.0;
        let h = Self { m: n };
        if h.det().abs() <= DEGENERATE_EPS {
            return Err(Error::Geometry("homography is singular".into()));
        }
        Ok(h)
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = self.det();
        if det.abs() <= DEGENERATE_EPS {
            return Err(Error::Geometry("homography is singular".into()));
        }
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        Self::from_matrix(adj)
    }

    /// Apply to a point; errors when the point lands at infinity.
    #[inline]
    pub fn project(&self, p: Point2) -> Result<Point2> {
        let m = &self.m;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if w.abs() <= DEGENERATE_EPS {
            return Err(Error::PointAtInfinity(w));
        }
        Ok(Point2::new(
            (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
            (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
        ))
    }

    /// Homogeneous third component for `p`.
    #[inline]
    pub fn w(&self, p: Point2) -> f64 {
        self.m[2][0] * p.x + self.m[2][1] * p.y + self.m[2][2]
    }
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// True when no three of the four points are collinear.
pub fn in_general_position(pts: &[Point2; 4]) -> bool {
    let scale = pts
        .iter()
        .flat_map(|p| [p.x.abs(), p.y.abs()])
        .fold(1.0f64, f64::max);
    let tol = 1e-9 * scale * scale;
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .all(|t| cross(pts[t[0]], pts[t[1]], pts[t[2]]).abs() > tol)
}

/// Solve the 8 unknowns of `H` (with `m[2][2] = 1`) from exactly four
/// correspondences `src[i] -> dst[i]`.
pub fn estimate_homography(src: &[Point2; 4], dst: &[Point2; 4]) -> Result<Homography> {
    if !in_general_position(src) {
        return Err(Error::Geometry(
            "source points are degenerate (three are collinear)".into(),
        ));
    }
    if !in_general_position(dst) {
        return Err(Error::Geometry(
            "destination points are degenerate (three are collinear)".into(),
        ));
    }

    // Condition both point sets (translate to centroid, scale to unit mean
    // distance) before the solve, then undo the conditioning.
    let (ts, src_n) = condition(src);
    let (td, dst_n) = condition(dst);

    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = (src_n[i].x, src_n[i].y);
        let (u, v) = (dst_n[i].x, dst_n[i].y);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    let h = solve8(a).ok_or_else(|| Error::Geometry("correspondence system is singular".into()))?;
    let hn = [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]];

    // H = Td^-1 * Hn * Ts
    let td_inv = [
        [1.0 / td[0][0], 0.0, -td[0][2] / td[0][0]],
        [0.0, 1.0 / td[1][1], -td[1][2] / td[1][1]],
        [0.0, 0.0, 1.0],
    ];
    Homography::from_matrix(matmul(&matmul(&td_inv, &hn), &ts))
}

fn condition(pts: &[Point2; 4]) -> ([[f64; 3]; 3], [Point2; 4]) {
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let mean_dist = pts
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / 4.0;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = [[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]];
    let out = pts.map(|p| Point2::new(s * (p.x - cx), s * (p.y - cy)));
    (t, out)
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Gaussian elimination with partial pivoting on an 8x8 augmented system.
fn solve8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        for r in col + 1..8 {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..9 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut x = [0.0; 8];
    for r in (0..8).rev() {
        let s: f64 = (r + 1..8).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][8] - s) / a[r][r];
    }
    Some(x)
}

/// Camera calibration for one locomotive mounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationProfile {
    /// Camera-image corners of the track patch: top-left, top-right,
    /// bottom-right, bottom-left.
    pub src_quad: [Point2; 4],
    /// Matching corners of the warped rectangle, same order.
    pub dst_rect: [Point2; 4],
    pub roi: Rect,
    /// (width, height) of the warped raster.
    pub warped_size: [usize; 2],
    pub nominal_gauge_px: f64,
    pub gauge_tolerance_px: f64,
    #[serde(default)]
    pub binarize: BinarizeParams,
}

impl Default for CalibrationProfile {
    /// Matches the default synthetic camera (640x360).
    fn default() -> Self {
        Self {
            src_quad: [
                Point2::new(220.0, 170.0),
                Point2::new(420.0, 170.0),
                Point2::new(600.0, 350.0),
                Point2::new(40.0, 350.0),
            ],
            dst_rect: [
                Point2::new(0.0, 0.0),
                Point2::new(240.0, 0.0),
                Point2::new(240.0, 240.0),
                Point2::new(0.0, 240.0),
            ],
            roi: Rect::new(30, 160, 580, 200),
            warped_size: [240, 240],
            nominal_gauge_px: 60.0,
            gauge_tolerance_px: 10.0,
            binarize: BinarizeParams::default(),
        }
    }
}

impl CalibrationProfile {
    pub fn validate(&self) -> Result<()> {
        if !in_general_position(&self.src_quad) {
            return Err(Error::Config(
                "calibration src_quad has three collinear points".into(),
            ));
        }
        let d = &self.dst_rect;
        let axis_aligned = d[0].y == d[1].y && d[2].y == d[3].y && d[0].x == d[3].x && d[1].x == d[2].x;
        if !axis_aligned || !in_general_position(d) {
            return Err(Error::Config(
                "calibration dst_rect must be an axis-aligned rectangle (TL, TR, BR, BL)".into(),
            ));
        }
        let orient = |q: &[Point2; 4]| cross(q[0], q[1], q[2]).signum();
        if orient(&self.src_quad) != orient(&self.dst_rect) {
            return Err(Error::Config(
                "calibration src_quad and dst_rect corners are ordered inconsistently".into(),
            ));
        }
        if self.warped_size[0] == 0 || self.warped_size[1] == 0 {
            return Err(Error::Config("warped_size must be positive".into()));
        }
        if self.roi.w == 0 || self.roi.h == 0 {
            return Err(Error::Config("roi must have positive area".into()));
        }
        if !(self.nominal_gauge_px > 0.0 && self.gauge_tolerance_px > 0.0)
            || self.nominal_gauge_px - self.gauge_tolerance_px <= 0.0
        {
            return Err(Error::Config(format!(
                "gauge limits invalid: nominal {} tolerance {} (need nominal - tolerance > 0)",
                self.nominal_gauge_px, self.gauge_tolerance_px
            )));
        }
        self.binarize.validate()?;
        Ok(())
    }

    /// Camera -> warped homography.
    pub fn homography(&self) -> Result<Homography> {
        estimate_homography(&self.src_quad, &self.dst_rect)
    }

    /// Scale every pixel quantity for a camera `k` times larger (warped
    /// space is unchanged).
    pub fn scaled_camera(&self, k: f64) -> Self {
        let mut c = self.clone();
        for p in c.src_quad.iter_mut() {
            p.x *= k;
            p.y *= k;
        }
        let r = self.roi;
        c.roi = Rect::new(
            (r.x as f64 * k).floor() as usize,
            (r.y as f64 * k).floor() as usize,
            (r.w as f64 * k).ceil() as usize,
            (r.h as f64 * k).ceil() as usize,
        );
        c
    }
}

/// Precomputed inverse mapping from warped pixels back into the camera ROI.
#[derive(Debug, Clone)]
pub struct Warper {
    inv: Homography,
    roi: Rect,
    width: usize,
    height: usize,
}

impl Warper {
    pub fn new(calib: &CalibrationProfile) -> Result<Self> {
        let h = calib.homography()?;
        Self::from_homography(&h, calib.roi, calib.warped_size)
    }

    pub fn from_homography(h: &Homography, roi: Rect, warped_size: [usize; 2]) -> Result<Self> {
        Ok(Self {
            inv: h.inverse()?,
            roi,
            width: warped_size[0],
            height: warped_size[1],
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Camera position sampled for warped pixel `(x, y)`, if finite.
    #[inline]
    pub fn source_of(&self, x: usize, y: usize) -> Option<Point2> {
        self.inv.project(Point2::new(x as f64, y as f64)).ok()
    }

    pub fn warp(&self, img: &RgbRaster, mode: ExecMode) -> Result<GrayRaster> {
        if !self.roi.fits_within(img.width, img.height) {
            return Err(Error::Config(format!(
                "roi {:?} exceeds frame bounds {}x{}",
                self.roi, img.width, img.height
            )));
        }
        let mut out = GrayRaster::new(self.width, self.height);
        let width = self.width;
        par::fill_rows(mode, &mut out.data, width, |y, row| {
            for (x, px) in row.iter_mut().enumerate() {
                *px = match self.source_of(x, y) {
                    Some(p) => sample_bilinear(img, &self.roi, p),
                    None => 0,
                };
            }
        });
        Ok(out)
    }
}

/// Bilinear RGB sample converted to gray; zero outside the ROI.
#[inline]
fn sample_bilinear(img: &RgbRaster, roi: &Rect, p: Point2) -> u8 {
    let (x_lo, y_lo) = (roi.x as f64, roi.y as f64);
    let (x_hi, y_hi) = ((roi.x + roi.w - 1) as f64, (roi.y + roi.h - 1) as f64);
    if !(p.x >= x_lo && p.x <= x_hi && p.y >= y_lo && p.y <= y_hi) {
        return 0;
    }
    let x0 = p.x.floor() as usize;
    let y0 = p.y.floor() as usize;
    let fx = p.x - x0 as f64;
    let fy = p.y - y0 as f64;
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    let a = img.get(x0, y0);
    let b = img.get(x1, y0);
    let c = img.get(x0, y1);
    let d = img.get(x1, y1);
    let mut rgb = [0.0f64; 3];
    for k in 0..3 {
        let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
        let bot = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
        rgb[k] = top * (1.0 - fy) + bot * fy;
    }
    luma(rgb[0], rgb[1], rgb[2])
}

/// Warp the frame's ROI into the bird's-eye grayscale raster.
pub fn warp_roi(frame: &Frame, calib: &CalibrationProfile) -> Result<GrayRaster> {
    Warper::new(calib)?.warp(&frame.image, ExecMode::default())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaugeReading {
    /// `right - left`, absent when the pair is not ordered.
    pub gauge_px: Option<f64>,
    pub valid: bool,
}

/// Gauge of one scan row against `nominal ± tolerance`.
pub fn measure_gauge(left_x: f64, right_x: f64, nominal_px: f64, tolerance_px: f64) -> GaugeReading {
    if !(left_x < right_x) {
        return GaugeReading {
            gauge_px: None,
            valid: false,
        };
    }
    let g = right_x - left_x;
    GaugeReading {
        gauge_px: Some(g),
        valid: (g - nominal_px).abs() <= tolerance_px,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    const SQUARE: [Point2; 4] = [
        Point2::new(0.0, 0.0),
        Point2::new(1.0, 0.0),
        Point2::new(1.0, 1.0),
        Point2::new(0.0, 1.0),
    ];

    #[test]
    fn identity_pairs() {
        let src = [p(3.0, 4.0), p(50.0, 7.0), p(45.0, 60.0), p(1.0, 40.0)];
        let h = estimate_homography(&src, &src).unwrap();
        let id = Homography::identity().matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert!((h.matrix()[i][j] - id[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn translation_pairs() {
        let src = [p(0.0, 0.0), p(10.0, 0.0), p(10.0, 10.0), p(0.0, 10.0)];
        let dst = src.map(|q| p(q.x + 5.0, q.y - 3.0));
        let h = estimate_homography(&src, &dst).unwrap();
        let want = [[1.0, 0.0, 5.0], [0.0, 1.0, -3.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((h.matrix()[i][j] - want[i][j]).abs() < 1e-9, "{:?}", h);
            }
        }
        let q = h.project(p(0.0, 0.0)).unwrap();
        assert!((q.x - 5.0).abs() < 1e-12 && (q.y + 3.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_source_rejected() {
        let src = [p(0.0, 0.0), p(1.0, 1.0), p(2.0, 2.0), p(0.0, 5.0)];
        let dst = SQUARE;
        assert!(matches!(
            estimate_homography(&src, &dst),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn point_at_infinity() {
        let h = Homography::from_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(h.project(p(-1.0, 3.0)), Err(Error::PointAtInfinity(_))));
    }

    #[test]
    fn inverse_roundtrip() {
        let dst = [p(0.0, 0.0), p(2.0, 0.0), p(2.5, 1.0), p(-0.5, 1.0)];
        let h = estimate_homography(&SQUARE, &dst).unwrap();
        let hi = h.inverse().unwrap();
        for &(x, y) in &[(0.2, 0.3), (0.9, 0.1), (0.5, 0.5)] {
            let q = h.project(hi.project(p(x, y)).unwrap()).unwrap();
            assert!((q.x - x).abs() < 1e-9 && (q.y - y).abs() < 1e-9);
        }
    }

    #[test]
    fn gauge_examples() {
        let g = measure_gauge(100.0, 160.0, 60.0, 10.0);
        assert_eq!(g.gauge_px, Some(60.0));
        assert!(g.valid);
        let g = measure_gauge(100.0, 180.0, 60.0, 10.0);
        assert_eq!(g.gauge_px, Some(80.0));
        assert!(!g.valid);
        let g = measure_gauge(160.0, 100.0, 60.0, 10.0);
        assert_eq!(g.gauge_px, None);
        assert!(!g.valid);
        assert!(!measure_gauge(5.0, 5.0, 60.0, 10.0).valid);
    }

    #[test]
    fn default_calibration_validates() {
        CalibrationProfile::default().validate().unwrap();
    }

    #[test]
    fn calibration_rejects_bad_gauge_and_order() {
        let mut c = CalibrationProfile::default();
        c.gauge_tolerance_px = 60.0;
        assert!(c.validate().is_err());
        let mut c = CalibrationProfile::default();
        c.dst_rect.reverse();
        assert!(c.validate().is_err());
    }

    #[test]
    fn roi_outside_frame_is_config_error() {
        let c = CalibrationProfile::default();
        let w = Warper::new(&c).unwrap();
        let small = RgbRaster::new(100, 100);
        assert!(matches!(w.warp(&small, ExecMode::Sequential), Err(Error::Config(_))));
    }

    #[test]
    fn identity_warp_is_exact_gray() {
        let mut img = RgbRaster::new(16, 9);
        for y in 0..9 {
            for x in 0..16 {
                img.put(x, y, [(x * 13) as u8, (y * 27) as u8, ((x * y) % 256) as u8]);
            }
        }
        let w = Warper::from_homography(&Homography::identity(), Rect::new(0, 0, 16, 9), [16, 9]).unwrap();
        assert_eq!(w.warp(&img, ExecMode::Sequential).unwrap(), img.to_gray());
    }

    #[test]
    fn constant_frame_warps_to_constant() {
        let c = CalibrationProfile::default();
        let img = RgbRaster::filled(640, 360, [128, 128, 128]);
        let w = Warper::new(&c).unwrap();
        let out = w.warp(&img, ExecMode::Parallel).unwrap();
        assert!(out.data.iter().all(|&v| v == 128));
        assert_eq!(out, w.warp(&img, ExecMode::Sequential).unwrap());
    }
}

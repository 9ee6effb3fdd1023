//! Detector boundary. Frame classifiers and object detectors (trained
//! networks, external tools, or the built-in reference heuristics) all sit
//! behind [`DetectorPlugin`] and emit [`Detection`]s.

pub mod augment;
pub mod heuristics;
pub mod plugins;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::Frame;
use crate::signalstate::BBox;

pub use augment::{augment, AugmentOp};
pub use heuristics::{
    ballast_coverage, ballast_heuristic, detect_switch, switch_heuristic, BallastHeuristic, BallastParams,
    SwitchHeuristic, SwitchParams,
};
pub use plugins::{parse_detection_line, ExternalProcessPlugin, FileReplayPlugin};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_name: String,
    /// Source-frame box; classifier-style plugins report their ROI.
    pub bbox: Option<BBox>,
    pub confidence: f64,
    /// Identifier of the emitting plugin.
    pub source: String,
}

/// Contract every detector honors: output depends on the frame only, and
/// only declared classes are emitted.
pub trait DetectorPlugin: Send + Sync {
    fn id(&self) -> &str;

    fn classes(&self) -> &[String];

    fn evaluate(&self, frame: &Frame) -> Result<Vec<Detection>>;

    /// Whether calls for different frames may run concurrently.
    fn parallel_safe(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityWarning {
    pub frame_index: u64,
    pub plugin: String,
    pub reason: String,
}

/// Check one plugin's output for one frame against the contract.
pub fn validate_output(
    frame: &Frame,
    plugin: &dyn DetectorPlugin,
    detections: &[Detection],
) -> std::result::Result<(), String> {
    for d in detections {
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(format!("confidence {} outside [0, 1]", d.confidence));
        }
        if !plugin.classes().contains(&d.class_name) {
            return Err(format!("undeclared class {:?}", d.class_name));
        }
        if let Some(b) = &d.bbox {
            if !b.within(frame.width(), frame.height()) {
                return Err(format!("box {b:?} outside the {}x{} frame", frame.width(), frame.height()));
            }
        }
    }
    Ok(())
}

/// Run one plugin and enforce the contract; a violating output is dropped
/// whole and reported.
pub fn evaluate_plugin(
    frame: &Frame,
    plugin: &dyn DetectorPlugin,
) -> Result<std::result::Result<Vec<Detection>, IntegrityWarning>> {
    let dets = plugin.evaluate(frame)?;
    Ok(match validate_output(frame, plugin, &dets) {
        Ok(()) => Ok(dets),
        Err(reason) => {
            log::warn!("plugin {} frame {}: {}; output dropped", plugin.id(), frame.index, reason);
            Err(IntegrityWarning {
                frame_index: frame.index,
                plugin: plugin.id().to_string(),
                reason,
            })
        }
    })
}

/// Concatenate every plugin's validated output, in registration order.
pub fn evaluate_detectors(
    frame: &Frame,
    plugins: &[Box<dyn DetectorPlugin>],
    warnings: &mut Vec<IntegrityWarning>,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for p in plugins {
        match evaluate_plugin(frame, p.as_ref())? {
            Ok(d) => out.extend(d),
            Err(w) => warnings.push(w),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RgbRaster;

    struct Fixed {
        classes: Vec<String>,
        out: Vec<Detection>,
    }

    impl DetectorPlugin for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }
        fn classes(&self) -> &[String] {
            &self.classes
        }
        fn evaluate(&self, _: &Frame) -> Result<Vec<Detection>> {
            Ok(self.out.clone())
        }
    }

    fn det(class: &str, conf: f64) -> Detection {
        Detection {
            class_name: class.into(),
            bbox: None,
            confidence: conf,
            source: "fixed".into(),
        }
    }

    fn frame() -> Frame {
        Frame::new(7, 0, RgbRaster::new(32, 32))
    }

    #[test]
    fn no_plugins() {
        let mut w = vec![];
        assert!(evaluate_detectors(&frame(), &[], &mut w).unwrap().is_empty());
        assert!(w.is_empty());
    }

    #[test]
    fn bad_confidence_dropped() {
        let plugins: Vec<Box<dyn DetectorPlugin>> = vec![
            Box::new(Fixed {
                classes: vec!["switch".into()],
                out: vec![det("switch", 1.2), det("switch", 0.5)],
            }),
            Box::new(Fixed {
                classes: vec!["signal".into()],
                out: vec![det("signal", 0.7)],
            }),
        ];
        let mut w = vec![];
        let got = evaluate_detectors(&frame(), &plugins, &mut w).unwrap();
        assert_eq!(got, vec![det("signal", 0.7)]);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn undeclared_class_and_bad_box_dropped() {
        let mut boxed = det("signal", 0.5);
        boxed.bbox = Some(BBox::new(30.0, 0.0, 5.0, 5.0));
        for out in [vec![det("switch", 0.5)], vec![boxed]] {
            let p: Vec<Box<dyn DetectorPlugin>> = vec![Box::new(Fixed {
                classes: vec!["signal".into()],
                out,
            })];
            let mut w = vec![];
            assert!(evaluate_detectors(&frame(), &p, &mut w).unwrap().is_empty());
            assert_eq!(w.len(), 1);
        }
    }
}

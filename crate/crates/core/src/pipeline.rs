//! End-to-end analysis: frames → rail scan + detectors → signal/switch
//! association → track health → report files.
//!
//! Per-frame work that depends on the frame alone (warp, binarize, stateless
//! plugins) runs ahead on a batch of frames in parallel; everything temporal
//! (rail prior, association, segments, report lines) runs sequentially in
//! frame order, so reports are byte-identical whatever the parallelism.

use std::path::Path;

use crate::config::{PluginSource, RunConfig};
use crate::detecthub::{
    validate_output, BallastHeuristic, Detection, DetectorPlugin, ExternalProcessPlugin, FileReplayPlugin,
    IntegrityWarning, SwitchHeuristic,
};
use crate::error::Result;
use crate::health::{
    defect_category, flag_category1, frame_thi, Category, ClassWeightTable, DefectEvent, EventRecord, FrameHealth,
    Origin, ReportWriter, RunManifest, RunStatus, SegmentAggregator, SegmentFlag, Segmentation,
};
use crate::ingest::{list_frames, Frame, FrameStream};
use crate::par::{self, ExecMode};
use crate::raster::GrayRaster;
use crate::signalstate::{
    classify_signal_color, AssetAssociator, AssetObservation, AssetRecord, AssetType, SignalState,
};
use crate::trackscan::{BinaryRaster, ScanOutput, TrackScanner, TrackState};

/// A configured detector.
enum Bound {
    Ballast(BallastHeuristic),
    Switch(SwitchHeuristic),
    External(Box<dyn DetectorPlugin>),
}

impl Bound {
    fn plugin(&self) -> &dyn DetectorPlugin {
        match self {
            Bound::Ballast(p) => p,
            Bound::Switch(p) => p,
            Bound::External(p) => p.as_ref(),
        }
    }
}

/// Instantiate the configured plugins in registration order.
fn build_plugins(cfg: &RunConfig) -> Result<Vec<Bound>> {
    let mut out = Vec::new();
    for (source, classes) in cfg.plugin_bindings()? {
        let bound = match source {
            PluginSource::Heuristic => match classes[0].as_str() {
                "loose_ballast" => Bound::Ballast(BallastHeuristic::new(
                    cfg.calibration.clone(),
                    cfg.trackscan.clone(),
                    cfg.heuristics.ballast.clone(),
                )?),
                _ => Bound::Switch(SwitchHeuristic::new(
                    cfg.calibration.clone(),
                    cfg.trackscan.clone(),
                    cfg.heuristics.switch.clone(),
                )?),
            },
            PluginSource::Replay(path) => Bound::External(Box::new(FileReplayPlugin::load(&path, classes)?)),
            PluginSource::Exec(cmd) => Bound::External(Box::new(ExternalProcessPlugin::spawn(&cmd, classes)?)),
        };
        out.push(bound);
    }
    Ok(out)
}

/// Frame-only results computed ahead of the sequential stage.
struct Prepared {
    frame: Frame,
    warped: GrayRaster,
    binary: BinaryRaster,
    /// Per plugin, `None` for heuristics (they need the rail observation).
    external: Vec<Option<Vec<Detection>>>,
}

/// What a run produced, besides the files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub warnings: Vec<IntegrityWarning>,
}

impl RunSummary {
    pub fn has_flags(&self) -> bool {
        self.manifest.flag_count > 0
    }
}

/// Sequential half of the run.
struct Analyzer<'a> {
    cfg: &'a RunConfig,
    weights: ClassWeightTable,
    scanner: &'a TrackScanner,
    plugins: &'a [Bound],
    state: TrackState,
    assoc: AssetAssociator,
    segments: SegmentAggregator,
    writer: ReportWriter,
    manifest: RunManifest,
    warnings: Vec<IntegrityWarning>,
}

impl Analyzer<'_> {
    fn emit(&mut self, rec: EventRecord) -> Result<()> {
        match &rec {
            EventRecord::Defect(_) => self.manifest.defect_count += 1,
            EventRecord::Flag(_) => self.manifest.flag_count += 1,
            EventRecord::Asset(_) => self.manifest.asset_count += 1,
        }
        self.writer.write_event(&rec)
    }

    fn emit_assets(&mut self, recs: Vec<AssetRecord>) -> Result<()> {
        for a in recs {
            self.emit(EventRecord::Asset(a))?;
        }
        Ok(())
    }

    fn checked(&mut self, frame: &Frame, plugin: &dyn DetectorPlugin, dets: Vec<Detection>) -> Vec<Detection> {
        match validate_output(frame, plugin, &dets) {
            Ok(()) => dets,
            Err(reason) => {
                log::warn!("plugin {} frame {}: {}; output dropped", plugin.id(), frame.index, reason);
                self.manifest.plugin_warnings += 1;
                self.warnings.push(IntegrityWarning {
                    frame_index: frame.index,
                    plugin: plugin.id().to_string(),
                    reason,
                });
                Vec::new()
            }
        }
    }

    fn detections(
        &mut self,
        frame: &Frame,
        scan: &ScanOutput,
        external: Vec<Option<Vec<Detection>>>,
    ) -> Vec<(String, Detection)> {
        let mut out = Vec::new();
        for (bound, pre) in self.plugins.iter().zip(external) {
            let dets = match (bound, pre) {
                (Bound::Ballast(h), _) => h.detect(&scan.warped, &scan.observation).into_iter().collect(),
                (Bound::Switch(h), _) => h.detect(&scan.binary, &scan.observation).into_iter().collect(),
                (Bound::External(_), Some(d)) => d,
                (Bound::External(_), None) => unreachable!("external plugins run in the prepare stage"),
            };
            let plugin = bound.plugin();
            let dets = self.checked(frame, plugin, dets);
            out.extend(dets.into_iter().map(|d| (plugin.id().to_string(), d)));
        }
        out
    }

    fn process(&mut self, p: Prepared) -> Result<()> {
        let Prepared {
            frame,
            warped,
            binary,
            external,
        } = p;
        let index = frame.index;
        let (scan, next) = self.scanner.scan_prepared(index, warped, binary, &self.state);
        self.state = next;
        let detections = self.detections(&frame, &scan, external);
        let geo = frame.geo;

        let mut defects = Vec::new();
        let v = &scan.verdict;
        if v.flagged && v.confidence > 0.0 {
            defects.push(DefectEvent::new(index, "sunkink", v.confidence, geo, Origin::trackscan(), &self.weights)?);
        }
        let mut observations = Vec::new();
        for (source, d) in detections {
            if let Some(t) = AssetType::from_class(&d.class_name) {
                let state = match t {
                    AssetType::Signal => {
                        let state = d
                            .bbox
                            .map(|b| classify_signal_color(&frame, &b, &self.cfg.signal_colors).state)
                            .unwrap_or(SignalState::Unknown);
                        if state == SignalState::Unknown {
                            log::debug!("frame {index}: colorless signal detection ignored");
                            continue;
                        }
                        Some(state)
                    }
                    AssetType::Switch => None,
                };
                observations.push(AssetObservation {
                    frame_index: index,
                    asset_type: t,
                    bbox: d.bbox,
                    confidence: d.confidence,
                    state,
                    geo,
                });
            } else if defect_category(&d.class_name).is_some() && d.confidence > 0.0 {
                defects.push(DefectEvent::new(index, &d.class_name, d.confidence, geo, Origin(source), &self.weights)?);
            }
        }

        let mut category1 = Vec::new();
        for e in &defects {
            self.emit(EventRecord::Defect(e.clone()))?;
            if e.category == Category::One {
                category1.push(SegmentFlag {
                    frame_index: index,
                    class_name: e.class_name.clone(),
                    confidence: e.confidence,
                });
                if let Some(flag) = flag_category1(e, self.cfg.cat1_flag_threshold) {
                    self.emit(EventRecord::Flag(flag))?;
                }
            }
        }

        let closed = self.assoc.advance_to(index);
        self.emit_assets(closed)?;
        for o in &observations {
            let closed = self.assoc.push(o);
            self.emit_assets(closed)?;
        }

        let health = FrameHealth {
            frame_index: index,
            geo,
            thi: frame_thi(&defects, &self.weights)?,
            category1,
        };
        if let Some(seg) = self.segments.push(&health) {
            self.manifest.segment_count += 1;
            self.writer.write_segment(&seg)?;
        }
        self.manifest.frame_count += 1;
        Ok(())
    }

    fn finish(mut self) -> Result<RunSummary> {
        let assoc = std::mem::replace(&mut self.assoc, AssetAssociator::new(Default::default()));
        let rest = assoc.finish();
        self.emit_assets(rest)?;
        let segments = std::mem::replace(&mut self.segments, SegmentAggregator::new(Segmentation::Frames(1)));
        if let Some(seg) = segments.finish() {
            self.manifest.segment_count += 1;
            self.writer.write_segment(&seg)?;
        }
        self.writer.finish(&self.manifest)?;
        Ok(RunSummary {
            manifest: self.manifest,
            warnings: self.warnings,
        })
    }
}

fn prepare(scanner: &TrackScanner, plugins: &[Bound], frames: Vec<Frame>, mode: ExecMode) -> Result<Vec<Prepared>> {
    let parallel_ok: Vec<bool> = plugins
        .iter()
        .map(|b| matches!(b, Bound::External(p) if p.parallel_safe()))
        .collect();
    let staged = par::map(mode, &frames, |f| -> Result<_> {
        let (warped, binary) = scanner.prepare(f)?;
        let mut ext = Vec::with_capacity(plugins.len());
        for (b, &ok) in plugins.iter().zip(&parallel_ok) {
            ext.push(if ok { Some(b.plugin().evaluate(f)?) } else { None });
        }
        Ok((warped, binary, ext))
    });
    let mut out = Vec::with_capacity(frames.len());
    for (frame, res) in frames.into_iter().zip(staged) {
        let (warped, binary, mut external) = res?;
        // stateful external plugins run here, one frame at a time, in order
        for (slot, b) in external.iter_mut().zip(plugins) {
            if let (None, Bound::External(p)) = (&slot, b) {
                *slot = Some(p.evaluate(&frame)?);
            }
        }
        out.push(Prepared {
            frame,
            warped,
            binary,
            external,
        });
    }
    Ok(out)
}

/// Options beyond the config file.
#[derive(Debug, Clone, Copy)]
pub struct AnalyzeOptions {
    pub mode: ExecMode,
    /// Frames prepared per parallel batch.
    pub batch: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            mode: ExecMode::default(),
            batch: 16,
        }
    }
}

/// Analyze an ordered frame sequence and write the report into `out`.
///
/// On a fatal error a manifest marked partial (with the error text and the
/// counts so far) is still written before the error is returned.
pub fn analyze_frames<I>(
    cfg: &RunConfig,
    frames: I,
    segmentation: Segmentation,
    out: &Path,
    opts: AnalyzeOptions,
) -> Result<RunSummary>
where
    I: IntoIterator<Item = Frame>,
{
    let mut manifest = RunManifest::new(cfg.hash());
    let writer = ReportWriter::create(out)?;
    let setup = || -> Result<_> {
        cfg.validate()?;
        let scanner = TrackScanner::new(&cfg.calibration, &cfg.trackscan)?.with_mode(opts.mode);
        let plugins = build_plugins(cfg)?;
        Ok((cfg.weight_table()?, scanner, plugins))
    };
    let (weights, scanner, plugins) = match setup() {
        Ok(s) => s,
        Err(e) => {
            manifest.status = RunStatus::Partial;
            manifest.error = Some(e.to_string());
            writer.finish(&manifest)?;
            return Err(e);
        }
    };
    let mut a = Analyzer {
        cfg,
        weights,
        scanner: &scanner,
        plugins: &plugins,
        state: scanner.initial_state(),
        assoc: AssetAssociator::new(cfg.association.clone()),
        segments: SegmentAggregator::new(segmentation),
        writer,
        manifest,
        warnings: Vec::new(),
    };

    let mut frames = frames.into_iter();
    let mut run = |a: &mut Analyzer| -> Result<()> {
        loop {
            let batch: Vec<Frame> = frames.by_ref().take(opts.batch.max(1)).collect();
            if batch.is_empty() {
                return Ok(());
            }
            for p in prepare(&scanner, &plugins, batch, opts.mode)? {
                a.process(p)?;
            }
        }
    };
    if let Err(e) = run(&mut a) {
        a.manifest.status = RunStatus::Partial;
        a.manifest.error = Some(e.to_string());
        let Analyzer { writer, manifest, .. } = a;
        writer.finish(&manifest)?;
        return Err(e);
    }
    a.finish()
}

/// Analyze a frame directory or manifest. Segments are by distance when any
/// frame carries GPS, else by frame count.
pub fn analyze(cfg: &RunConfig, source: &Path, out: &Path, opts: AnalyzeOptions) -> Result<RunSummary> {
    let entries = match list_frames(source) {
        Ok(e) => e,
        Err(e) => {
            let mut m = RunManifest::new(cfg.hash());
            m.status = RunStatus::Partial;
            m.error = Some(e.to_string());
            ReportWriter::create(out)?.finish(&m)?;
            return Err(e);
        }
    };
    let segmentation = if entries.iter().any(|e| e.geo.is_some()) {
        Segmentation::DistanceM(cfg.segment_length_m)
    } else {
        Segmentation::Frames(cfg.segment_length_frames)
    };
    let mut stream = FrameStream::from_entries(entries).with_mode(opts.mode).with_batch(opts.batch);
    let frames = std::iter::from_fn(|| stream.next());
    // the stream is borrowed by the iterator; count skips afterwards
    let mut summary = analyze_frames(cfg, frames, segmentation, out, opts)?;
    summary.manifest.skipped_frames = stream.skipped().len() as u64;
    crate::health::write_manifest(out, &summary.manifest)?;
    Ok(summary)
}

//! Command-line front end. Exit status: 0 success, 1 error, 2 when
//! `analyze` ran cleanly but raised at least one category-1 flag.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::error::{Error, Result};
use crate::health::{assets_of, export_geojson, read_report, write_manifest, RunManifest, RunStatus};
use crate::pipeline::{analyze, AnalyzeOptions};
use crate::synth::{self, EvalParams, SceneSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FLAGGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "railwatch", version, about = "Track monitoring from locomotive camera frames")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analyze a frame sequence and write the report (events, segments, manifest).
    Analyze {
        /// Directory of numbered images, or a frame manifest file.
        #[arg(long)]
        frames: PathBuf,
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Report directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plugin bindings overriding the config: class=source[,class=source]
        /// with source one of heuristic, replay:<path>, exec:<command>, none.
        #[arg(long)]
        plugins: Option<String>,
    },
    /// Render a synthetic scene with ground truth.
    Synth {
        /// Scene specification (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for frames, manifest, truth and config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a report directory against a ground-truth file.
    Eval {
        /// Report directory written by analyze.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth file written by synth.
        #[arg(long)]
        truth: PathBuf,
        /// Where to write the evaluation report (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a report's segments and assets as GeoJSON.
    MapExport {
        /// Report directory written by analyze.
        #[arg(long)]
        report: PathBuf,
        /// GeoJSON output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Load and validate a run configuration.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run_analyze(frames: &Path, config: &Path, out: Option<&Path>, plugins: Option<&str>) -> Result<i32> {
    let loaded = load_config(config).and_then(|mut cfg| {
        if let Some(spec) = plugins {
            cfg.apply_plugin_overrides(spec)?;
        }
        Ok(cfg)
    });
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| loaded.as_ref().ok().and_then(|c| c.output_dir.as_ref().map(|d| c.resolve(d))));
    let cfg: RunConfig = match loaded {
        Ok(c) => c,
        Err(e) => {
            if let Some(dir) = &out_dir {
                let mut m = RunManifest::new(String::new());
                m.status = RunStatus::Partial;
                m.error = Some(e.to_string());
                if fs::create_dir_all(dir).is_ok() {
                    let _ = write_manifest(dir, &m);
                }
            }
            return Err(e);
        }
    };
    let out_dir = out_dir.ok_or_else(|| Error::Config("no --out given and the config sets no output_dir".into()))?;
    let summary = analyze(&cfg, frames, &out_dir, AnalyzeOptions::default())?;
    let m = &summary.manifest;
    println!(
        "analyzed {} frames ({} skipped): {} defects, {} flags, {} assets, {} segments -> {}",
        m.frame_count,
        m.skipped_frames,
        m.defect_count,
        m.flag_count,
        m.asset_count,
        m.segment_count,
        out_dir.display()
    );
    Ok(if summary.has_flags() { EXIT_FLAGGED } else { EXIT_OK })
}

fn run_command(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Analyze {
            frames,
            config,
            out,
            plugins,
        } => run_analyze(&frames, &config, out.as_deref(), plugins.as_deref()),
        Command::Synth { spec, out } => {
            let spec = SceneSpec::load(&spec)?;
            let truth = synth::render_scene(&spec, &out)?;
            println!("rendered {} frames -> {}", truth.frames.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Eval { pred, truth, out } => {
            let report = synth::evaluate(&pred, &truth, &EvalParams::default())?;
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            fs::write(&out, text).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            print!("{report}");
            Ok(EXIT_OK)
        }
        Command::MapExport { report, out } => {
            let r = read_report(&report)?;
            export_geojson(&r.segments, &assets_of(&r.events), &out)?;
            println!("wrote {}", out.display());
            Ok(EXIT_OK)
        }
        Command::ValidateConfig { config } => {
            let cfg = load_config(&config)?;
            println!("{}: ok (hash {})", config.display(), cfg.hash());
            Ok(EXIT_OK)
        }
    }
}

/// Parse `args` (program name first) and run; returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match run_command(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

//! Out-of-process detectors.
//!
//! Both plugins speak the same detection record, one per line:
//!
//! ```text
//! <frame_index> <class_name> <confidence> [<x> <y> <w> <h>]
//! ```
//!
//! A replay plugin reads these from a file keyed by frame index. An external
//! process receives `<frame_index> <image-path>` on stdin and answers with
//! zero or more records followed by a blank line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use super::{Detection, DetectorPlugin};
use crate::error::{Error, Result};
use crate::ingest::Frame;
use crate::signalstate::BBox;

/// Parse one detection record into `(frame_index, detection)`.
pub fn parse_detection_line(line: &str, source: &str) -> std::result::Result<(u64, Detection), String> {
    let tok: Vec<&str> = line.split_whitespace().collect();
    if tok.len() != 3 && tok.len() != 7 {
        return Err(format!("expected 3 or 7 fields, found {}", tok.len()));
    }
    let frame: u64 = tok[0].parse().map_err(|_| format!("bad frame index {:?}", tok[0]))?;
    let confidence: f64 = tok[2].parse().map_err(|_| format!("bad confidence {:?}", tok[2]))?;
    let bbox = if tok.len() == 7 {
        let v: Vec<f64> = tok[3..7]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| format!("bad box coordinate {t:?}")))
            .collect::<std::result::Result<_, _>>()?;
        Some(BBox::new(v[0], v[1], v[2], v[3]))
    } else {
        None
    };
    Ok((
        frame,
        Detection {
            class_name: tok[1].to_string(),
            bbox,
            confidence,
            source: source.to_string(),
        },
    ))
}

/// Replays recorded detections from a file.
#[derive(Debug, Clone)]
pub struct FileReplayPlugin {
    id: String,
    classes: Vec<String>,
    by_frame: BTreeMap<u64, Vec<Detection>>,
}

impl FileReplayPlugin {
    pub fn load(path: &Path, classes: Vec<String>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = format!("replay:{}", path.display());
        let mut by_frame: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (frame, det) = parse_detection_line(line, &id).map_err(|m| Error::parse(path, i + 1, m))?;
            by_frame.entry(frame).or_default().push(det);
        }
        Ok(Self { id, classes, by_frame })
    }

    pub fn frames(&self) -> impl Iterator<Item = u64> + '_ {
        self.by_frame.keys().copied()
    }
}

impl DetectorPlugin for FileReplayPlugin {
    fn id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn evaluate(&self, frame: &Frame) -> Result<Vec<Detection>> {
        Ok(self.by_frame.get(&frame.index).cloned().unwrap_or_default())
    }
}

struct ProcessIo {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
}

/// Detector running in a child process, driven over stdin/stdout.
pub struct ExternalProcessPlugin {
    id: String,
    classes: Vec<String>,
    io: Mutex<ProcessIo>,
    scratch_dir: PathBuf,
}

impl ExternalProcessPlugin {
    /// Spawn `command` through the shell.
    pub fn spawn(command: &str, classes: Vec<String>) -> Result<Self> {
        let id = format!("exec:{command}");
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Plugin {
                plugin: id.clone(),
                msg: format!("spawn failed: {e}"),
            })?;
        let stdin = child.stdin.take().map(BufWriter::new);
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            id,
            classes,
            io: Mutex::new(ProcessIo { child, stdin, stdout }),
            scratch_dir: std::env::temp_dir().join(format!("railwatch-plugin-{}", std::process::id())),
        })
    }

    fn plugin_err(&self, msg: impl Into<String>) -> Error {
        Error::Plugin {
            plugin: self.id.clone(),
            msg: msg.into(),
        }
    }

    /// Path the child can read the frame from, writing a scratch copy for
    /// in-memory frames.
    fn image_path(&self, frame: &Frame) -> Result<(PathBuf, bool)> {
        if let Some(p) = &frame.source {
            return Ok((p.clone(), false));
        }
        fs::create_dir_all(&self.scratch_dir).map_err(|e| Error::io(&self.scratch_dir, e))?;
        let p = self.scratch_dir.join(format!("{:06}.png", frame.index));
        frame.image.save(&p)?;
        Ok((p, true))
    }
}

impl DetectorPlugin for ExternalProcessPlugin {
    fn id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn parallel_safe(&self) -> bool {
        false
    }

    fn evaluate(&self, frame: &Frame) -> Result<Vec<Detection>> {
        let (path, scratch) = self.image_path(frame)?;
        let mut io = self.io.lock().map_err(|_| self.plugin_err("process handle poisoned"))?;
        let io = &mut *io;
        let stdin = io.stdin.as_mut().ok_or_else(|| self.plugin_err("stdin closed"))?;
        writeln!(stdin, "{} {}", frame.index, path.display())
            .and_then(|_| stdin.flush())
            .map_err(|e| self.plugin_err(format!("write failed: {e}")))?;

        let mut out = Vec::new();
        loop {
            let mut line = String::new();
            let n = io
                .stdout
                .read_line(&mut line)
                .map_err(|e| self.plugin_err(format!("read failed: {e}")))?;
            if n == 0 {
                return Err(self.plugin_err(format!("process exited before answering frame {}", frame.index)));
            }
            let line = line.trim();
            if line.is_empty() {
                break;
            }
            let (idx, det) = parse_detection_line(line, &self.id)
                .map_err(|m| self.plugin_err(format!("frame {}: {m}", frame.index)))?;
            if idx != frame.index {
                return Err(self.plugin_err(format!("answered frame {idx} while frame {} was pending", frame.index)));
            }
            out.push(det);
        }
        if scratch {
            let _ = fs::remove_file(&path);
        }
        Ok(out)
    }
}

impl Drop for ExternalProcessPlugin {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            drop(io.stdin.take());
            let _ = io.child.wait();
        }
        let _ = fs::remove_dir(&self.scratch_dir);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RgbRaster;

    #[test]
    fn parse_records() {
        let (f, d) = parse_detection_line("7 signal 0.9 10 20 30 40", "t").unwrap();
        assert_eq!(f, 7);
        assert_eq!(d.bbox, Some(BBox::new(10.0, 20.0, 30.0, 40.0)));
        let (_, d) = parse_detection_line("3 loose_ballast 0.25", "t").unwrap();
        assert!(d.bbox.is_none());
        assert!(parse_detection_line("3 x", "t").is_err());
        assert!(parse_detection_line("3 x 0.1 1 2", "t").is_err());
    }

    #[test]
    fn replay_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        fs::write(&p, "# recorded\n7 signal 0.9 1 2 3 4\n2 switch 0.5\n7 switch 0.4\n").unwrap();
        let plugin = FileReplayPlugin::load(&p, vec!["signal".into(), "switch".into()]).unwrap();
        let frame = Frame::new(7, 0, RgbRaster::new(10, 10));
        let got = plugin.evaluate(&frame).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].class_name, "signal");
        assert_eq!(got[1].class_name, "switch");
        assert!(plugin.evaluate(&Frame::new(8, 0, RgbRaster::new(1, 1))).unwrap().is_empty());
    }

    #[test]
    fn replay_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        fs::write(&p, "1 signal 0.5\n2 signal nope\n").unwrap();
        match FileReplayPlugin::load(&p, vec![]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn external_process_protocol() {
        // answers one switch detection per frame, echoing the index
        let cmd = r#"while read idx path; do echo "$idx switch 0.75"; echo; done"#;
        let plugin = ExternalProcessPlugin::spawn(cmd, vec!["switch".into()]).unwrap();
        for i in [3u64, 4, 9] {
            let frame = Frame::new(i, 0, RgbRaster::new(4, 4));
            let got = plugin.evaluate(&frame).unwrap();
            assert_eq!(got.len(), 1);
            assert_eq!(got[0].confidence, 0.75);
        }
    }

    #[test]
    fn external_process_dead() {
        let plugin = ExternalProcessPlugin::spawn("exit 0", vec![]).unwrap();
        let frame = Frame::new(0, 0, RgbRaster::new(2, 2));
        assert!(plugin.evaluate(&frame).is_err());
    }
}

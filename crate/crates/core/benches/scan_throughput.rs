//! Classical track-scan throughput at 1280x720: warp, binarize, rail
//! extraction and kink test per frame, sequential versus data-parallel.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use railwatch::synth::{corpus, render_frames};
use railwatch::trackscan::TrackScanner;
use railwatch::ExecMode;

fn scan_throughput(c: &mut Criterion) {
    let spec = corpus::throughput_scene(7);
    let frames = render_frames(&spec).expect("scene renders");
    let mut group = c.benchmark_group("scan_1280x720");
    group.throughput(Throughput::Elements(frames.len() as u64));
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        let scanner = TrackScanner::new(&spec.calibration, &Default::default())
            .expect("calibration is valid")
            .with_mode(mode);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &frames, |b, frames| {
            b.iter(|| {
                let mut state = scanner.initial_state();
                let mut flagged = 0;
                for f in frames {
                    let (out, next) = scanner.scan(f, &state).expect("scan succeeds");
                    state = next;
                    flagged += out.verdict.flagged as usize;
                }
                flagged
            })
        });
    }
    group.finish();
}

criterion_group!(benches, scan_throughput);
criterion_main!(benches);

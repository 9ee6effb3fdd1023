//! Seeded scene families used by the test corpora and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    BrightObjectSpec, KinkSpec, LampColor, SceneSpec, Side, SignalSpec, SupportRailSpec, SwitchSpec,
};

fn rng(seed: u64, family: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(family);
    r
}

fn side(r: &mut ChaCha8Rng) -> Side {
    if r.random_bool(0.5) {
        Side::Left
    } else {
        Side::Right
    }
}

fn base(seed: u64, r: &mut ChaCha8Rng, frames: u64) -> SceneSpec {
    let mut s = SceneSpec::new(seed);
    s.frames = frames;
    s.noise_sigma = r.random_range(0.0..=2.0);
    s.brightness_offset = r.random_range(-15..=15);
    s.ballast_density = r.random_range(0.3..=1.0);
    s
}

/// Straight track with noise and, by seed, one of: no distractor, a
/// support rail inside the gauge, a narrow bright object (pipe) or a wide
/// one (platform edge) beside the track.
pub fn straight_scene(seed: u64) -> SceneSpec {
    let mut r = rng(seed, 1);
    let mut s = base(seed, &mut r, 4);
    match seed % 4 {
        1 => {
            s.distractors.support_rail = Some(SupportRailSpec {
                side: side(&mut r),
                offset_px: r.random_range(12.0..=20.0),
            })
        }
        2 => {
            s.distractors.bright_object = Some(BrightObjectSpec {
                side: side(&mut r),
                offset_px: r.random_range(20.0..=45.0),
                width_px: r.random_range(4.0..=8.0),
            })
        }
        3 => {
            s.distractors.bright_object = Some(BrightObjectSpec {
                side: side(&mut r),
                offset_px: r.random_range(20.0..=35.0),
                width_px: r.random_range(25.0..=40.0),
            })
        }
        _ => {}
    }
    s
}

/// Six frames; frames 2..=4 carry a kink of amplitude in
/// `[min_amplitude_px, min_amplitude_px + 6]`.
pub fn kinked_scene(seed: u64, min_amplitude_px: f64) -> SceneSpec {
    let mut r = rng(seed, 2);
    let mut s = base(seed, &mut r, 6);
    s.kink = Some(KinkSpec {
        start_frame: 2,
        duration: 3,
        amplitude_px: r.random_range(min_amplitude_px..=min_amplitude_px + 6.0),
        center_row: r.random_range(100.0..=140.0),
        length_rows: r.random_range(100.0..=140.0),
    });
    s
}

/// Diverging switch on one side of the track.
pub fn switch_scene(seed: u64) -> SceneSpec {
    let mut r = rng(seed, 3);
    let mut s = base(seed, &mut r, 6);
    s.switch = Some(SwitchSpec {
        diverge_row: r.random_range(190.0..=220.0),
        angle_deg: r.random_range(9.0..=12.0),
        side: side(&mut r),
    });
    s
}

fn signal(r: &mut ChaCha8Rng, frames: u64, x_range: std::ops::RangeInclusive<f64>, max_gap: u64) -> SignalSpec {
    let first = r.random_range(0..=frames / 4);
    let last = r.random_range(first + frames / 2..frames);
    let (x, y) = (r.random_range(x_range), r.random_range(10.0..=80.0));
    let (w, h) = (r.random_range(12.0..=20.0), r.random_range(30.0..=45.0));
    let end = [
        x + r.random_range(-8.0..=8.0),
        y + r.random_range(-6.0..=6.0),
        w * r.random_range(1.0..=1.2),
        h * r.random_range(1.0..=1.2),
    ];
    // interior dropouts, each run leaving a frame gap of at most `max_gap`
    let mut dropout = Vec::new();
    let mut f = first + 1;
    while f + max_gap < last {
        if r.random_bool(0.3) {
            let run = r.random_range(1..max_gap.max(2));
            dropout.extend(f..f + run);
            f += run + 1;
        } else {
            f += 1;
        }
    }
    SignalSpec {
        first_frame: first,
        last_frame: last,
        bbox_start: [x, y, w, h],
        bbox_end: Some(end),
        color: if r.random_bool(0.5) { LampColor::Red } else { LampColor::Green },
        lamp_fraction: r.random_range(0.15..=0.3),
        dropout_frames: dropout,
        detector_confidence: r.random_range(0.6..=0.99),
    }
}

/// One or two signals with detector dropouts no longer than `max_gap`
/// frames between consecutive detections.
pub fn signal_scene(seed: u64, max_gap: u64) -> SceneSpec {
    let mut r = rng(seed, 4);
    let frames = r.random_range(20..=40);
    let mut s = base(seed, &mut r, frames);
    s.signals.push(signal(&mut r, frames, 360.0..=420.0, max_gap));
    if r.random_bool(0.5) {
        s.signals.push(signal(&mut r, frames, 520.0..=580.0, max_gap));
    }
    s
}

/// HD (1280x720) straight-track scene with a kink and noise; the fixed
/// workload of the throughput benchmark.
pub fn throughput_scene(seed: u64) -> SceneSpec {
    let mut s = SceneSpec::new(seed);
    s.frames = 8;
    s.width = 1280;
    s.height = 720;
    s.calibration = s.calibration.scaled_camera(2.0);
    s.noise_sigma = 2.0;
    s.kink = Some(KinkSpec {
        start_frame: 2,
        duration: 3,
        amplitude_px: 12.0,
        center_row: 120.0,
        length_rows: 120.0,
    });
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_validate() {
        for seed in 0..40 {
            straight_scene(seed).validate().unwrap();
            kinked_scene(seed, 12.0).validate().unwrap();
            switch_scene(seed).validate().unwrap();
            signal_scene(seed, 3).validate().unwrap();
        }
        throughput_scene(0).validate().unwrap();
    }

    #[test]
    fn signal_gaps_bounded() {
        for seed in 0..50 {
            for s in signal_scene(seed, 3).signals {
                let hits: Vec<u64> = (s.first_frame..=s.last_frame).filter(|&f| s.detected(f)).collect();
                assert_eq!(hits.first(), Some(&s.first_frame));
                assert_eq!(hits.last(), Some(&s.last_frame));
                assert!(hits.windows(2).all(|w| w[1] - w[0] <= 3));
            }
        }
    }
}

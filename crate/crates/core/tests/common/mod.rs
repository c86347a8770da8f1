#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use soundscape_core::edge::{build_payload, SourceSpec};
use soundscape_core::inference::write_masker_bank;
use soundscape_core::{AudioClip, LogMelAnalyzer, RasterCodec, SpectralParams};

pub const FS: u32 = 44_100;

/// Mono sine maskers `m00..`, 3 s each, one frequency per masker.
pub fn toy_maskers(n: usize) -> Vec<(String, AudioClip)> {
    (0..n)
        .map(|i| {
            let s = soundscape_core::edge::sine(3 * FS as usize, 150.0 * (i + 1) as f64, 0.3, FS);
            (format!("m{i:02}"), AudioClip::new(vec![s], FS).unwrap())
        })
        .collect()
}

pub fn toy_bank(dir: &Path, n: usize) {
    write_masker_bank(dir, &toy_maskers(n), &SpectralParams::default()).unwrap();
}

pub fn sine_payload(device: &str, ts: &str, freq: f64) -> Vec<u8> {
    let clip = SourceSpec::Sine { seconds: 30.0, frequency_hz: freq, amplitude: 0.5 }.load(FS).unwrap();
    let an = LogMelAnalyzer::new(SpectralParams::default()).unwrap();
    build_payload(&an, &clip, device, ts, RasterCodec::Png).unwrap()
}

pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    cond()
}

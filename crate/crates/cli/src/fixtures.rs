//! Deterministic synthetic maskers and soundscapes.

use soundscape_core::edge::{pink_noise, sine, SourceSpec};
use soundscape_core::AudioClip;

/// `n` mono maskers of `seconds` each. Even indices are pink noise, odd
/// indices are two-tone chords; levels vary with the index.
pub fn synthetic_maskers(n: usize, seconds: f64, seed: u64, sample_rate: u32) -> Vec<(String, AudioClip)> {
    let len = (seconds * f64::from(sample_rate)).round() as usize;
    (0..n)
        .map(|i| {
            let level = 0.15 + 0.05 * (i % 5) as f64;
            let (id, samples) = if i % 2 == 0 {
                (format!("pink-{i:03}"), pink_noise(len, seed.wrapping_add(i as u64), level))
            } else {
                let f = 110.0 * (1.0 + (i % 12) as f64 / 2.0);
                let a = sine(len, f, level * 0.6, sample_rate);
                let b = sine(len, f * 1.5, level * 0.4, sample_rate);
                (format!("tone-{i:03}"), a.iter().zip(&b).map(|(x, y)| x + y).collect())
            };
            (id, AudioClip::new(vec![samples], sample_rate).expect("one non-empty channel"))
        })
        .collect()
}

/// The three 30 s payload-budget fixtures.
pub fn budget_fixtures() -> [(&'static str, SourceSpec); 3] {
    [
        ("silence", SourceSpec::Silence { seconds: 30.0 }),
        ("sine", SourceSpec::Sine { seconds: 30.0, frequency_hz: 1000.0, amplitude: 0.5 }),
        ("pink-noise", SourceSpec::PinkNoise { seconds: 30.0, seed: 7, amplitude: 0.5 }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maskers_are_deterministic_and_named() {
        let a = synthetic_maskers(4, 0.5, 7, 8000);
        let b = synthetic_maskers(4, 0.5, 7, 8000);
        assert_eq!(a, b);
        let ids: Vec<&str> = a.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["pink-000", "tone-001", "pink-002", "tone-003"]);
        assert_eq!(a[0].1.n_samples(), 4000);
        assert!(a.iter().all(|(_, c)| c.channel(0).iter().all(|x| x.abs() <= 1.0)));
    }
}

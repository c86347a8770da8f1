//! Data acquisition unit: audio sources, fixed-length analysis windows and
//! the agent that turns each window into an upstream payload.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::codec::{self, CodecError, RasterCodec, SpectralPayload};
use crate::log::EventLog;
use crate::spectral::{self, Analyzer, SpectralError, SpectralParams};
use crate::transport::{Backoff, IngestClient, IngestOutcome};
use crate::AudioClip;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid edge config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EdgeError> = std::result::Result<T, E>;

/// Where the edge unit's audio comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceSpec {
    /// PCM WAV file; channels beyond the first two are ignored.
    File { path: PathBuf },
    Silence { seconds: f64 },
    Sine {
        seconds: f64,
        frequency_hz: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// Independent pink noise per channel from a fixed seed.
    PinkNoise {
        seconds: f64,
        seed: u64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
}

fn default_amplitude() -> f64 {
    0.5
}

impl SourceSpec {
    /// Materializes a 2-channel clip at `sample_rate`.
    pub fn load(&self, sample_rate: u32) -> Result<AudioClip> {
        let n = |secs: f64| (secs * f64::from(sample_rate)).round() as usize;
        let clip = match self {
            SourceSpec::File { path } => {
                let clip = spectral::read_wav(path)?.stereo()?;
                if clip.sample_rate() != sample_rate {
                    return Err(SpectralError::ParamMismatch(format!(
                        "{} is {} Hz, pipeline runs at {sample_rate} Hz",
                        path.display(),
                        clip.sample_rate()
                    ))
                    .into());
                }
                clip
            }
            SourceSpec::Silence { seconds } => AudioClip::silence(2, n(*seconds), sample_rate)?,
            SourceSpec::Sine { seconds, frequency_hz, amplitude } => {
                let s = sine(n(*seconds), *frequency_hz, *amplitude, sample_rate);
                AudioClip::new(vec![s.clone(), s], sample_rate)?
            }
            SourceSpec::PinkNoise { seconds, seed, amplitude } => {
                let channels = (0..2u64)
                    .map(|c| pink_noise(n(*seconds), seed.wrapping_add(c), *amplitude))
                    .collect();
                AudioClip::new(channels, sample_rate)?
            }
        };
        Ok(clip)
    }
}

pub fn sine(n_samples: usize, frequency_hz: f64, amplitude: f64, sample_rate: u32) -> Vec<f32> {
    let w = 2.0 * std::f64::consts::PI * frequency_hz / f64::from(sample_rate);
    (0..n_samples)
        .map(|i| (amplitude * (w * i as f64).sin()) as f32)
        .collect()
}

/// Pink (1/f) noise from Paul Kellet's refined filter over seeded white noise.
pub fn pink_noise(n_samples: usize, seed: u64, amplitude: f64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = [0.0f64; 7];
    (0..n_samples)
        .map(|_| {
            let white: f64 = rng.random_range(-1.0..1.0);
            b[0] = 0.99886 * b[0] + white * 0.0555179;
            b[1] = 0.99332 * b[1] + white * 0.0750759;
            b[2] = 0.96900 * b[2] + white * 0.1538520;
            b[3] = 0.86650 * b[3] + white * 0.3104856;
            b[4] = 0.55000 * b[4] + white * 0.5329522;
            b[5] = -0.7616 * b[5] - white * 0.0168980;
            let pink = b[..6].iter().sum::<f64>() + b[6] + white * 0.5362;
            b[6] = white * 0.115926;
            (pink * 0.11 * amplitude).clamp(-1.0, 1.0) as f32
        })
        .collect()
}

/// One analysis window cut from a longer clip.
#[derive(Debug, Clone)]
pub struct AudioWindow {
    pub index: usize,
    pub start_sample: usize,
    pub clip: AudioClip,
}

impl AudioWindow {
    /// Seconds from the start of the source to the end of this window.
    pub fn end_offset_secs(&self) -> f64 {
        (self.start_sample + self.clip.n_samples()) as f64 / f64::from(self.clip.sample_rate())
    }
}

/// Consecutive full windows of `window_seconds`, advancing by
/// `stride_seconds`; a trailing partial window is dropped.
pub fn window_stream(clip: &AudioClip, window_seconds: f64, stride_seconds: f64) -> Result<Vec<AudioWindow>> {
    if !(stride_seconds > 0.0 && stride_seconds <= window_seconds) {
        return Err(EdgeError::Config(format!(
            "stride must satisfy 0 < stride <= window (stride={stride_seconds}, window={window_seconds})"
        )));
    }
    let fs = f64::from(clip.sample_rate());
    let win = (window_seconds * fs).round() as usize;
    let stride = (stride_seconds * fs).round() as usize;
    if win == 0 || stride == 0 {
        return Err(EdgeError::Config("window shorter than one sample".into()));
    }
    if clip.n_samples() < win {
        return Err(SpectralError::InsufficientAudio {
            needed: win,
            got: clip.n_samples(),
        }
        .into());
    }
    let count = (clip.n_samples() - win) / stride + 1;
    (0..count)
        .map(|index| {
            let start = index * stride;
            Ok(AudioWindow {
                index,
                start_sample: start,
                clip: clip.slice(start, win)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    pub device_id: String,
    pub source: SourceSpec,
    #[serde(default = "default_window")]
    pub window_seconds: f64,
    #[serde(default = "default_window")]
    pub stride_seconds: f64,
    pub endpoint_url: String,
    #[serde(default)]
    pub raster_codec: RasterCodec,
    #[serde(default)]
    pub spectral: SpectralParams,
    /// Pace windows against the wall clock as a live capture would.
    #[serde(default)]
    pub realtime: bool,
    /// RFC 3339 instant for the source's first sample. When set, payload
    /// timestamps are derived from it instead of the wall clock.
    #[serde(default)]
    pub timestamp_origin: Option<String>,
    #[serde(default = "default_attempts")]
    pub retry_attempts: u32,
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    /// Optional directory receiving a copy of every encoded payload.
    #[serde(default)]
    pub payload_dir: Option<PathBuf>,
}

fn default_window() -> f64 {
    30.0
}

fn default_attempts() -> u32 {
    3
}

fn default_retry_base_ms() -> u64 {
    500
}

impl EdgeConfig {
    pub fn new(device_id: impl Into<String>, source: SourceSpec, endpoint_url: impl Into<String>) -> Self {
        Self {
            device_id: device_id.into(),
            source,
            window_seconds: default_window(),
            stride_seconds: default_window(),
            endpoint_url: endpoint_url.into(),
            raster_codec: RasterCodec::default(),
            spectral: SpectralParams::default(),
            realtime: false,
            timestamp_origin: None,
            retry_attempts: default_attempts(),
            retry_base_ms: default_retry_base_ms(),
            payload_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| EdgeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.spectral.validate()?;
        if !(self.stride_seconds > 0.0 && self.stride_seconds <= self.window_seconds) {
            return Err(EdgeError::Config("0 < stride_seconds <= window_seconds required".into()));
        }
        if self.window_seconds * f64::from(self.spectral.sample_rate) < self.spectral.frame_size as f64 {
            return Err(EdgeError::Config("window shorter than one STFT frame".into()));
        }
        if self.device_id.is_empty() {
            return Err(EdgeError::Config("device_id must not be empty".into()));
        }
        if let Some(origin) = &self.timestamp_origin {
            DateTime::parse_from_rfc3339(origin)
                .map_err(|e| EdgeError::Config(format!("timestamp_origin: {e}")))?;
        }
        Ok(())
    }

    pub fn backoff(&self) -> Backoff {
        Backoff {
            attempts: self.retry_attempts,
            base: Duration::from_millis(self.retry_base_ms),
        }
    }
}

/// Formats an instant the way payloads and predictions carry it.
pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Encodes one window into wire bytes.
pub fn build_payload(
    analyzer: &Analyzer<f64>,
    window: &AudioClip,
    device_id: &str,
    timestamp_utc: &str,
    codec: RasterCodec,
) -> Result<Vec<u8>> {
    let spec = analyzer.analyze_stereo(window)?;
    let payload = SpectralPayload::from_spectrogram(&spec, device_id, timestamp_utc, codec)?;
    Ok(codec::encode_payload(&payload)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EdgeSummary {
    pub windows: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub dropped: usize,
    pub failed: usize,
}

/// Runs the acquisition loop over the configured source until it is
/// exhausted. Individual windows that fail are logged and skipped.
pub fn run_edge(config: &EdgeConfig, log: &EventLog) -> Result<EdgeSummary> {
    config.validate()?;
    let clip = config.source.load(config.spectral.sample_rate)?;
    let windows = window_stream(&clip, config.window_seconds, config.stride_seconds)?;
    let analyzer = Analyzer::<f64>::new(config.spectral)?;
    let client = IngestClient::new(config.endpoint_url.clone(), config.backoff());
    let origin = config
        .timestamp_origin
        .as_deref()
        .map(|s| DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc)))
        .transpose()
        .map_err(|e| EdgeError::Config(e.to_string()))?;
    if let Some(dir) = &config.payload_dir {
        std::fs::create_dir_all(dir)?;
    }

    log.info("edge_started", json!({"device_id": config.device_id, "windows": windows.len(), "endpoint": config.endpoint_url}));
    let started = Instant::now();
    let mut summary = EdgeSummary { windows: windows.len(), ..Default::default() };

    for w in &windows {
        if config.realtime {
            let due = Duration::from_secs_f64(w.end_offset_secs());
            if let Some(wait) = due.checked_sub(started.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        let timestamp = match origin {
            Some(o) => format_timestamp(o + chrono::Duration::milliseconds((w.end_offset_secs() * 1000.0).round() as i64)),
            None => format_timestamp(Utc::now()),
        };
        let t0 = Instant::now();
        let bytes = match build_payload(&analyzer, &w.clip, &config.device_id, &timestamp, config.raster_codec) {
            Ok(b) => b,
            Err(e) => {
                summary.failed += 1;
                log.error("window_failed", json!({"index": w.index, "error": e.to_string()}));
                continue;
            }
        };
        let encode_ms = t0.elapsed().as_secs_f64() * 1e3;
        if let Some(dir) = &config.payload_dir {
            let path = dir.join(format!("{}-{:05}.payload", config.device_id, w.index));
            if let Err(e) = std::fs::write(&path, &bytes) {
                log.warn("payload_save_failed", json!({"path": path.display().to_string(), "error": e.to_string()}));
            }
        }
        let t1 = Instant::now();
        match client.post(&bytes) {
            IngestOutcome::Responded { status, attempts } => {
                let ok = status == 202;
                if ok {
                    summary.accepted += 1;
                } else {
                    summary.rejected += 1;
                }
                log.emit(
                    if ok { "info" } else { "warn" },
                    "window",
                    json!({
                        "index": w.index,
                        "timestamp_utc": timestamp,
                        "payload_bytes": bytes.len(),
                        "status": status,
                        "attempts": attempts,
                        "encode_ms": encode_ms,
                        "latency_ms": t1.elapsed().as_secs_f64() * 1e3,
                    }),
                );
            }
            IngestOutcome::Dropped { attempts, error } => {
                summary.dropped += 1;
                log.warn(
                    "dropped_window",
                    json!({"index": w.index, "timestamp_utc": timestamp, "payload_bytes": bytes.len(), "attempts": attempts, "error": error}),
                );
            }
        }
    }
    log.info("edge_finished", json!({"summary": summary}));
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_of(secs: f64) -> AudioClip {
        AudioClip::silence(2, (secs * 44_100.0) as usize, 44_100).unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_stream(&clip_of(90.0), 30.0, 30.0).unwrap().len(), 3);
        assert_eq!(window_stream(&clip_of(89.0), 30.0, 30.0).unwrap().len(), 2);
        let ws = window_stream(&clip_of(60.0), 30.0, 15.0).unwrap();
        let starts: Vec<f64> = ws.iter().map(|w| w.start_sample as f64 / 44_100.0).collect();
        assert_eq!(starts, vec![0.0, 15.0, 30.0]);
        assert!(matches!(window_stream(&clip_of(29.0), 30.0, 30.0), Err(EdgeError::Spectral(SpectralError::InsufficientAudio { .. }))));
        assert!(window_stream(&clip_of(60.0), 30.0, 31.0).is_err());
        assert!(window_stream(&clip_of(60.0), 30.0, 0.0).is_err());
    }

    #[test]
    fn synthetic_sources_are_deterministic() {
        let spec = SourceSpec::PinkNoise { seconds: 1.0, seed: 9, amplitude: 0.5 };
        let a = spec.load(44_100).unwrap();
        let b = spec.load(44_100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.channel(0), a.channel(1));
        assert!(a.channel(0).iter().all(|x| x.abs() <= 1.0));
        let s = SourceSpec::Sine { seconds: 0.5, frequency_hz: 1000.0, amplitude: 1.0 }.load(44_100).unwrap();
        assert_eq!(s.n_samples(), 22_050);
    }

    #[test]
    fn config_parses_and_validates() {
        let cfg = EdgeConfig::from_toml(
            r#"
            device_id = "edge-01"
            endpoint_url = "http://127.0.0.1:9/v1/ingest"
            stride_seconds = 15.0
            raster_codec = "webp-lossless"
            [source]
            kind = "pink-noise"
            seconds = 60.0
            seed = 3
            [spectral]
            n_mels = 64
            "#,
        )
        .unwrap();
        assert_eq!(cfg.window_seconds, 30.0);
        assert_eq!(cfg.raster_codec, RasterCodec::WebpLossless);
        assert_eq!(cfg.spectral.frame_size, 4096);
        assert!(EdgeConfig::from_toml("device_id = \"x\"\nendpoint_url = \"u\"\nstride_seconds = 40.0\n[source]\nkind = \"silence\"\nseconds = 1.0\n").is_err());
        assert!(EdgeConfig::from_toml("device_id = \"x\"\nendpoint_url = \"u\"\nwindow_seconds = 0.01\nstride_seconds = 0.01\n[source]\nkind = \"silence\"\nseconds = 1.0\n").is_err());
    }

    #[test]
    fn silence_payload_is_small() {
        let analyzer = Analyzer::<f64>::new(SpectralParams::default()).unwrap();
        let clip = clip_of(30.0);
        for codec in RasterCodec::ALL {
            let bytes = build_payload(&analyzer, &clip, "edge-01", "2022-06-01T00:00:30.000Z", codec).unwrap();
            assert!(bytes.len() < 2 * 1024, "{codec}: {} bytes", bytes.len());
        }
    }
}

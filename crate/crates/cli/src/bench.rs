//! Local latency and payload-size benchmark.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use soundscape_core::codec::{self, egress_table, EgressRow, RasterCodec, SpectralPayload, PAYLOAD_VERSION};
use soundscape_core::edge::SourceSpec;
use soundscape_core::inference::{
    bank_from_clips, EngineConfig, InferenceEngine, InferenceService, MemorySink, SpectralMatchPredictor,
};
use soundscape_core::log::EventLog;
use soundscape_core::transport::{Backoff, IngestClient, IngestOutcome, Relay, RelayClient, RelayConfig, TopicName};
use soundscape_core::{LogMelAnalyzer, SpectralParams, MAX_PAYLOAD_BYTES};
use thiserror::Error;

use crate::fixtures::{budget_fixtures, synthetic_maskers};

pub const STAGES: [&str; 7] = ["spectral", "pack", "compress", "encode", "ingest", "inference", "publish"];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench setup: {0}")]
    Setup(String),
    #[error("bench stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub runs: usize,
    pub bank_size: usize,
    pub masker_seconds: f64,
    pub codec: RasterCodec,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { runs: 20, bank_size: 200, masker_seconds: 1.0, codec: RasterCodec::Png, seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageStats {
    pub stage: &'static str,
    pub samples_ms: Vec<f64>,
}

impl StageStats {
    pub fn mean(&self) -> f64 {
        self.samples_ms.iter().sum::<f64>() / self.samples_ms.len().max(1) as f64
    }

    /// Nearest-rank 95th percentile.
    pub fn p95(&self) -> f64 {
        let mut v = self.samples_ms.clone();
        v.sort_by(f64::total_cmp);
        let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len().max(1));
        v.get(rank - 1).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FixtureSize {
    pub fixture: &'static str,
    pub codec: RasterCodec,
    pub raw_bytes: usize,
    pub image_bytes: usize,
    pub payload_bytes: usize,
}

impl FixtureSize {
    pub fn ratio(&self) -> f64 {
        self.raw_bytes as f64 / self.image_bytes as f64
    }

    pub fn within_limit(&self) -> bool {
        self.payload_bytes <= MAX_PAYLOAD_BYTES
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub stages: Vec<StageStats>,
    pub payload_sizes: Vec<usize>,
    pub rate_table: Vec<EgressRow>,
    pub fixtures: Vec<FixtureSize>,
}

impl BenchReport {
    pub fn stage(&self, name: &str) -> Option<&StageStats> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// Sanity of the numbers themselves: one sample per run and stage,
    /// strictly positive timings, p95 not below the mean.
    pub fn check_consistency(&self) -> Result<(), String> {
        for s in &self.stages {
            if s.samples_ms.len() != self.config.runs {
                return Err(format!("{}: {} samples for {} runs", s.stage, s.samples_ms.len(), self.config.runs));
            }
            if s.samples_ms.iter().any(|&x| !(x > 0.0)) {
                return Err(format!("{}: non-positive timing", s.stage));
            }
            if s.p95() < s.mean() {
                return Err(format!("{}: p95 {:.3} ms below mean {:.3} ms", s.stage, s.p95(), s.mean()));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "runs: {}  bank: {} maskers  codec: {}", self.config.runs, self.config.bank_size, self.config.codec);
        let _ = writeln!(s, "\nstage latency (ms)");
        let _ = writeln!(s, "{:<10} {:>6} {:>10} {:>10}", "stage", "n", "mean", "p95");
        for st in &self.stages {
            let _ = writeln!(s, "{:<10} {:>6} {:>10.3} {:>10.3}", st.stage, st.samples_ms.len(), st.mean(), st.p95());
        }
        let (min, max) = (
            self.payload_sizes.iter().min().copied().unwrap_or(0),
            self.payload_sizes.iter().max().copied().unwrap_or(0),
        );
        let mean = self.payload_sizes.iter().sum::<usize>() as f64 / self.payload_sizes.len().max(1) as f64;
        let _ = writeln!(s, "\npayload bytes: min {min}  mean {mean:.0}  max {max}  limit {MAX_PAYLOAD_BYTES}");
        let _ = writeln!(s, "\negress rates (uncompressed, 1 kB = 1024 B)");
        let _ = writeln!(s, "{:<12} {:>3} {:>8} {:>8} {:>6}", "repr", "bit", "kHz", "kB/s", "kB/30s");
        for row in &self.rate_table {
            let _ = writeln!(s, "{row}");
        }
        let _ = writeln!(s, "\n30 s fixtures");
        let _ = writeln!(s, "{:<11} {:<14} {:>8} {:>8} {:>8} {:>7}  fits", "fixture", "codec", "raw", "image", "payload", "ratio");
        for f in &self.fixtures {
            let _ = writeln!(
                s,
                "{:<11} {:<14} {:>8} {:>8} {:>8} {:>7.2}  {}",
                f.fixture,
                f.codec.as_str(),
                f.raw_bytes,
                f.image_bytes,
                f.payload_bytes,
                f.ratio(),
                if f.within_limit() { "yes" } else { "no" }
            );
        }
        s
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Sizes of the three budget fixtures under every codec.
pub fn measure_fixtures(params: &SpectralParams) -> Result<Vec<FixtureSize>, BenchError> {
    let analyzer = LogMelAnalyzer::new(*params).map_err(|e| BenchError::Setup(e.to_string()))?;
    let mut out = Vec::new();
    for (name, source) in budget_fixtures() {
        let clip = source.load(params.sample_rate).map_err(|e| BenchError::Setup(e.to_string()))?;
        let spec = analyzer.analyze_stereo(&clip).map_err(|e| BenchError::Setup(e.to_string()))?;
        for codec in RasterCodec::ALL {
            let payload = SpectralPayload::from_spectrogram(&spec, "bench", "2022-06-01T00:00:30.000Z", codec)
                .map_err(|e| BenchError::Setup(e.to_string()))?;
            let bytes = codec::encode_payload_with_limit(&payload, None).map_err(|e| BenchError::Setup(e.to_string()))?;
            out.push(FixtureSize {
                fixture: name,
                codec,
                raw_bytes: spec.values().len() * 2,
                image_bytes: payload.image.len(),
                payload_bytes: bytes.len(),
            });
        }
    }
    Ok(out)
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    let setup = |e: &dyn std::fmt::Display| BenchError::Setup(e.to_string());
    let params = SpectralParams::default();
    let analyzer = LogMelAnalyzer::new(params).map_err(|e| setup(&e))?;
    let maskers = synthetic_maskers(config.bank_size, config.masker_seconds, config.seed, params.sample_rate);
    let bank = Arc::new(bank_from_clips(&maskers, &params).map_err(|e| setup(&e))?);
    let engine_config = EngineConfig { seed: config.seed, ..Default::default() };
    let engine = InferenceEngine::new(Arc::clone(&bank), Arc::new(SpectralMatchPredictor), engine_config.clone());

    let service = InferenceService::start("127.0.0.1:0", 2, Arc::new(MemorySink::default()), EventLog::null()).map_err(|e| setup(&e))?;
    service.warm(Arc::new(InferenceEngine::new(Arc::clone(&bank), Arc::new(SpectralMatchPredictor), engine_config)));
    let ingest = IngestClient::new(service.ingest_url(), Backoff { attempts: 1, base: Duration::from_millis(10) });

    let relay = Relay::bind("127.0.0.1:0", RelayConfig::default(), EventLog::null()).map_err(|e| setup(&e))?;
    let topic = TopicName::predictions("bench").map_err(|e| setup(&e))?;
    let publisher = RelayClient::connect(relay.local_addr()).map_err(|e| setup(&e))?;
    let mut subscriber = RelayClient::connect(relay.local_addr()).map_err(|e| setup(&e))?;
    subscriber.subscribe(&topic).map_err(|e| setup(&e))?;
    let deadline = Instant::now() + Duration::from_secs(5);
    while relay.subscriber_count(topic.as_str()) == 0 {
        if Instant::now() > deadline {
            return Err(BenchError::Setup("bench subscriber never registered".into()));
        }
        std::thread::sleep(Duration::from_millis(5));
    }

    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(config.runs); STAGES.len()];
    let mut payload_sizes = Vec::with_capacity(config.runs);
    let stage_err = |stage: &'static str| move |e: &dyn std::fmt::Display| BenchError::Stage { stage, message: e.to_string() };

    // Run 0 warms caches and is not recorded.
    for run in 0..=config.runs {
        let source = SourceSpec::Sine { seconds: 30.0, frequency_hz: 200.0 * 1.2f64.powi(run as i32 % 16), amplitude: 0.3 };
        let clip = source.load(params.sample_rate).map_err(|e| setup(&e))?;
        let timestamp = format!("2022-06-01T00:{:02}:{:02}.000Z", (run * 30) / 60 % 60, (run * 30) % 60);
        let mut t = [0.0f64; 7];

        let t0 = Instant::now();
        let spec = analyzer.analyze_stereo(&clip).map_err(|e| stage_err("spectral")(&e))?;
        t[0] = ms(t0);
        let t0 = Instant::now();
        let raster = codec::pack_rgba(&spec).map_err(|e| stage_err("pack")(&e))?;
        t[1] = ms(t0);
        let t0 = Instant::now();
        let image = codec::compress_raster(&raster, config.codec).map_err(|e| stage_err("compress")(&e))?;
        t[2] = ms(t0);
        let t0 = Instant::now();
        let payload = SpectralPayload {
            version: PAYLOAD_VERSION.into(),
            device_id: "bench".into(),
            timestamp_utc: timestamp,
            sample_rate: params.sample_rate,
            n_channels: spec.n_channels(),
            frame_size: params.frame_size,
            hop: params.hop,
            n_frames: spec.n_frames(),
            n_mels: spec.n_mels(),
            raster_codec: config.codec,
            image,
        };
        let bytes = codec::encode_payload(&payload).map_err(|e| stage_err("encode")(&e))?;
        t[3] = ms(t0);
        let t0 = Instant::now();
        match ingest.post(&bytes) {
            IngestOutcome::Responded { status: 202, .. } => {}
            other => return Err(BenchError::Stage { stage: "ingest", message: format!("{other:?}") }),
        }
        t[4] = ms(t0);
        let t0 = Instant::now();
        let set = engine.predict(&payload, &spec).map_err(|e| stage_err("inference")(&e))?;
        t[5] = ms(t0);
        let json = set.to_json();
        let t0 = Instant::now();
        publisher.publish(&topic, &json).map_err(|e| stage_err("publish")(&e))?;
        match subscriber.recv_timeout(Duration::from_secs(5)) {
            Ok(Some(m)) if m.body == json => {}
            other => return Err(BenchError::Stage { stage: "publish", message: format!("round trip failed: {other:?}") }),
        }
        t[6] = ms(t0);

        if run > 0 {
            for (s, v) in samples.iter_mut().zip(t) {
                s.push(v);
            }
            payload_sizes.push(bytes.len());
        }
    }

    Ok(BenchReport {
        config: config.clone(),
        stages: STAGES.iter().zip(samples).map(|(&stage, samples_ms)| StageStats { stage, samples_ms }).collect(),
        payload_sizes,
        rate_table: egress_table(&params, 2),
        fixtures: measure_fixtures(&params)?,
    })
}

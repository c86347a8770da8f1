//! End-to-end demo: relay, inference service, edge agent and playback on
//! one machine, producing payload files, a prediction trace and a WAV.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use soundscape_core::edge::{run_edge, EdgeConfig, SourceSpec};
use soundscape_core::inference::{write_masker_bank, EngineConfig, InferenceService, RelaySink, SpectralMatchPredictor};
use soundscape_core::log::EventLog;
use soundscape_core::playback::{render_trace, AudioSink, MaskerStore, SwitchPolicy, WavSink};
use soundscape_core::trace::{save_trace, sort_trace, TraceRecord};
use soundscape_core::transport::{Backoff, Relay, RelayClient, RelayConfig, TopicName};
use soundscape_core::{PredictionSet, RasterCodec, Renderer, SpectralParams};
use thiserror::Error;

use crate::fixtures::synthetic_maskers;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Setup,
    Bank,
    Relay,
    Inference,
    Edge,
    Trace,
    Playback,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Setup => 10,
            Stage::Bank => 11,
            Stage::Relay => 12,
            Stage::Inference => 13,
            Stage::Edge => 14,
            Stage::Trace => 15,
            Stage::Playback => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Setup => "setup",
            Stage::Bank => "bank",
            Stage::Relay => "relay",
            Stage::Inference => "inference",
            Stage::Edge => "edge",
            Stage::Trace => "trace",
            Stage::Playback => "playback",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct DemoError {
    pub stage: Stage,
    pub message: String,
}

fn at(stage: Stage) -> impl Fn(&dyn fmt::Display) -> DemoError {
    move |e| DemoError { stage, message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoScenario {
    pub source: SourceSpec,
    /// Existing bank; when absent a synthetic bank is written to the output directory.
    pub bank: Option<PathBuf>,
    pub synthetic_maskers: usize,
    pub masker_seconds: f64,
    pub seed: u64,
    pub duration_seconds: f64,
    /// Extra audio rendered after the last window so its prediction is heard.
    pub tail_seconds: f64,
    pub site: String,
    pub device_id: String,
    pub raster_codec: RasterCodec,
    pub timestamp_origin: String,
    pub realtime: bool,
    pub policy: SwitchPolicy,
}

impl Default for DemoScenario {
    fn default() -> Self {
        Self {
            source: SourceSpec::Sine { seconds: 90.0, frequency_hz: 440.0, amplitude: 0.3 },
            bank: None,
            synthetic_maskers: 8,
            masker_seconds: 10.0,
            seed: 7,
            duration_seconds: 90.0,
            tail_seconds: 10.0,
            site: "site0".into(),
            device_id: "edge-01".into(),
            raster_codec: RasterCodec::Png,
            timestamp_origin: "2022-06-01T00:00:00Z".into(),
            realtime: false,
            policy: SwitchPolicy::default(),
        }
    }
}

impl DemoScenario {
    pub fn from_toml(text: &str) -> Result<Self, DemoError> {
        toml::from_str(text).map_err(|e| at(Stage::Setup)(&e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DemoError> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| at(Stage::Setup)(&e))?)
    }

    /// The source trimmed to `duration_seconds`.
    fn clipped_source(&self) -> SourceSpec {
        let d = self.duration_seconds;
        match self.source.clone() {
            SourceSpec::Silence { seconds } => SourceSpec::Silence { seconds: seconds.min(d) },
            SourceSpec::Sine { seconds, frequency_hz, amplitude } => SourceSpec::Sine { seconds: seconds.min(d), frequency_hz, amplitude },
            SourceSpec::PinkNoise { seconds, seed, amplitude } => SourceSpec::PinkNoise { seconds: seconds.min(d), seed, amplitude },
            file @ SourceSpec::File { .. } => file,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoReport {
    pub windows: usize,
    pub payloads: usize,
    pub predictions: usize,
    pub payload_dir: PathBuf,
    pub trace_path: PathBuf,
    pub wav_path: PathBuf,
    pub rendered_samples: usize,
}

pub fn run_demo(scenario: &DemoScenario, out_dir: &Path, log: &EventLog) -> Result<DemoReport, DemoError> {
    let params = SpectralParams::default();
    std::fs::create_dir_all(out_dir).map_err(|e| at(Stage::Setup)(&e))?;
    let origin: DateTime<Utc> = DateTime::parse_from_rfc3339(&scenario.timestamp_origin)
        .map_err(|e| at(Stage::Setup)(&e))?
        .with_timezone(&Utc);

    let bank_dir = match &scenario.bank {
        Some(dir) => dir.clone(),
        None => {
            let dir = out_dir.join("bank");
            let maskers = synthetic_maskers(scenario.synthetic_maskers, scenario.masker_seconds, scenario.seed, params.sample_rate);
            write_masker_bank(&dir, &maskers, &params).map_err(|e| at(Stage::Bank)(&e))?;
            dir
        }
    };

    let relay = Relay::bind("127.0.0.1:0", RelayConfig::default(), log.clone()).map_err(|e| at(Stage::Relay)(&e))?;
    let topic = TopicName::predictions(&scenario.site).map_err(|e| at(Stage::Relay)(&e))?;

    let sink = Arc::new(RelaySink::new(relay.local_addr(), topic.clone(), Backoff::default()));
    let service = InferenceService::start("127.0.0.1:0", 2, sink, log.clone()).map_err(|e| at(Stage::Inference)(&e))?;
    let engine_config = EngineConfig { seed: scenario.seed, site: scenario.site.clone(), ..Default::default() };
    service
        .warm_from_dir(&bank_dir, &params, Arc::new(SpectralMatchPredictor), engine_config)
        .map_err(|e| at(Stage::Inference)(&e))?;

    // Trace recorder subscribes before any payload is sent.
    let mut recorder = RelayClient::connect(relay.local_addr()).map_err(|e| at(Stage::Trace)(&e))?;
    recorder.subscribe(&topic).map_err(|e| at(Stage::Trace)(&e))?;
    let registered = Instant::now();
    while relay.subscriber_count(topic.as_str()) == 0 {
        if registered.elapsed() > Duration::from_secs(5) {
            return Err(DemoError { stage: Stage::Trace, message: "trace recorder did not register".into() });
        }
        thread::sleep(Duration::from_millis(5));
    }
    let received: Arc<Mutex<Vec<PredictionSet>>> = Arc::default();
    let stop = Arc::new(AtomicBool::new(false));
    let recorder_thread = {
        let received = Arc::clone(&received);
        let stop = Arc::clone(&stop);
        let log = log.clone();
        thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match recorder.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(m)) => match PredictionSet::from_json(&m.body) {
                        Ok(set) => received.lock().expect("trace lock").push(set),
                        Err(e) => log.warn("malformed_prediction", json!({"error": e.to_string()})),
                    },
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        })
    };

    let payload_dir = out_dir.join("payloads");
    let mut edge = EdgeConfig::new(scenario.device_id.clone(), scenario.clipped_source(), service.ingest_url());
    edge.raster_codec = scenario.raster_codec;
    edge.realtime = scenario.realtime;
    edge.timestamp_origin = Some(scenario.timestamp_origin.clone());
    edge.payload_dir = Some(payload_dir.clone());
    let summary = run_edge(&edge, log).map_err(|e| at(Stage::Edge)(&e))?;
    if summary.accepted == 0 {
        stop.store(true, Ordering::Relaxed);
        let _ = recorder_thread.join();
        return Err(DemoError { stage: Stage::Edge, message: format!("no window was accepted ({summary:?})") });
    }

    let deadline = Instant::now() + Duration::from_secs(60);
    while received.lock().expect("trace lock").len() < summary.accepted && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(10));
    }
    stop.store(true, Ordering::Relaxed);
    let _ = recorder_thread.join();
    let sets = std::mem::take(&mut *received.lock().expect("trace lock"));
    if sets.is_empty() {
        return Err(DemoError { stage: Stage::Inference, message: "no prediction reached the relay".into() });
    }

    let mut trace: Vec<TraceRecord> = sets
        .into_iter()
        .map(|prediction| {
            let offset_seconds = DateTime::parse_from_rfc3339(&prediction.timestamp_utc)
                .map(|t| (t.with_timezone(&Utc) - origin).num_milliseconds() as f64 / 1e3)
                .unwrap_or(0.0);
            TraceRecord { offset_seconds, prediction }
        })
        .collect();
    sort_trace(&mut trace);
    let trace_path = out_dir.join("trace.jsonl");
    save_trace(&trace_path, &trace).map_err(|e| at(Stage::Trace)(&e))?;

    let wav_path = out_dir.join("render.wav");
    let rendered_samples = render_to_wav(&bank_dir, &trace, scenario, &wav_path, log)?;
    if rendered_samples == 0 {
        return Err(DemoError { stage: Stage::Playback, message: "rendered WAV is empty".into() });
    }

    let report = DemoReport {
        windows: summary.windows,
        payloads: std::fs::read_dir(&payload_dir).map(|d| d.count()).unwrap_or(0),
        predictions: trace.len(),
        payload_dir,
        trace_path,
        wav_path,
        rendered_samples,
    };
    log.info("demo_finished", json!({"report": report}));
    Ok(report)
}

/// Offline, sample-accurate render of a trace into a mono WAV.
pub fn render_to_wav(
    bank_dir: &Path,
    trace: &[TraceRecord],
    scenario: &DemoScenario,
    wav_path: &Path,
    log: &EventLog,
) -> Result<usize, DemoError> {
    let fs = SpectralParams::default().sample_rate;
    let store = MaskerStore::<f32>::load_bank_dir(bank_dir, fs).map_err(|e| at(Stage::Playback)(&e))?;
    let mut renderer = Renderer::new(Arc::new(store), scenario.policy)
        .map_err(|e| at(Stage::Playback)(&e))?
        .with_log(log.clone());
    let n = ((scenario.duration_seconds + scenario.tail_seconds) * f64::from(fs)).round() as usize;
    let audio = render_trace(&mut renderer, trace, n);
    let mut sink = WavSink::create(wav_path, fs).map_err(|e| at(Stage::Playback)(&e))?;
    sink.write(&audio).map_err(|e| at(Stage::Playback)(&e))?;
    sink.finish().map_err(|e| at(Stage::Playback)(&e))?;
    Ok(audio.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_toml_defaults() {
        let s = DemoScenario::from_toml("seed = 3\n[source]\nkind = \"silence\"\nseconds = 60.0\n").unwrap();
        assert_eq!(s.seed, 3);
        assert_eq!(s.duration_seconds, 90.0);
        assert!(matches!(s.clipped_source(), SourceSpec::Silence { seconds } if seconds == 60.0));
        assert!(DemoScenario::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn stage_codes_are_distinct() {
        let stages = [Stage::Setup, Stage::Bank, Stage::Relay, Stage::Inference, Stage::Edge, Stage::Trace, Stage::Playback];
        let mut codes: Vec<i32> = stages.iter().map(|s| s.exit_code()).collect();
        codes.dedup();
        assert_eq!(codes.len(), stages.len());
    }
}

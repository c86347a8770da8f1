mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{toy_bank, wait_until, FS};
use soundscape_core::codec::decode_payload;
use soundscape_core::edge::{run_edge, window_stream, EdgeConfig, SourceSpec};
use soundscape_core::inference::{EngineConfig, InferenceService, MemorySink, SpectralMatchPredictor};
use soundscape_core::log::EventLog;
use soundscape_core::{LogMelAnalyzer, RasterCodec, SpectralParams};

fn config(endpoint: String, seconds: f64) -> EdgeConfig {
    let mut cfg = EdgeConfig::new("edge-01", SourceSpec::Sine { seconds, frequency_hz: 700.0, amplitude: 0.4 }, endpoint);
    cfg.timestamp_origin = Some("2022-06-01T00:00:00Z".into());
    cfg.raster_codec = RasterCodec::Png;
    cfg
}

#[test]
fn ninety_seconds_against_a_healthy_service() {
    let bank = tempfile::tempdir().unwrap();
    toy_bank(bank.path(), 3);
    let sink = Arc::new(MemorySink::default());
    let svc = InferenceService::start("127.0.0.1:0", 2, sink.clone(), EventLog::null()).unwrap();
    svc.warm_from_dir(bank.path(), &SpectralParams::default(), Arc::new(SpectralMatchPredictor), EngineConfig::default())
        .unwrap();

    let saved = tempfile::tempdir().unwrap();
    let mut cfg = config(svc.ingest_url(), 90.0);
    cfg.payload_dir = Some(saved.path().to_path_buf());
    let (log, mem) = EventLog::memory();
    let summary = run_edge(&cfg, &log).unwrap();
    assert_eq!((summary.windows, summary.accepted), (3, 3));
    let windows = mem.events("window");
    assert_eq!(windows.len(), 3);
    assert!(windows.iter().all(|w| w["status"] == 202 && w["payload_bytes"].as_u64().unwrap() > 0));
    assert_eq!(windows[2]["timestamp_utc"], "2022-06-01T00:01:30.000Z");
    assert!(wait_until(Duration::from_secs(20), || sink.messages().len() == 3));

    // Every shipped payload decodes to exactly the locally recomputed spectrogram.
    let clip = cfg.source.load(FS).unwrap();
    let an = LogMelAnalyzer::new(SpectralParams::default()).unwrap();
    for w in window_stream(&clip, 30.0, 30.0).unwrap() {
        let bytes = std::fs::read(saved.path().join(format!("edge-01-{:05}.payload", w.index))).unwrap();
        let decoded = decode_payload(&bytes).unwrap().to_spectrogram().unwrap();
        assert_eq!(decoded, an.analyze_stereo(&w.clip).unwrap());
    }
}

#[test]
fn service_down_drops_every_window() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/ingest", listener.local_addr().unwrap());
    drop(listener);
    let mut cfg = config(url, 90.0);
    cfg.retry_base_ms = 5;
    let (log, mem) = EventLog::memory();
    let summary = run_edge(&cfg, &log).unwrap();
    assert_eq!(summary.dropped, 3);
    let dropped = mem.events("dropped_window");
    assert_eq!(dropped.len(), 3);
    assert!(dropped.iter().all(|d| d["attempts"] == 3));
}

#[test]
fn oversize_window_is_skipped_not_fatal() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/ingest", listener.local_addr().unwrap());
    drop(listener);
    let mut cfg = EdgeConfig::new("edge-01", SourceSpec::PinkNoise { seconds: 30.0, seed: 7, amplitude: 0.5 }, url);
    cfg.retry_attempts = 1;
    let (log, mem) = EventLog::memory();
    let summary = run_edge(&cfg, &log).unwrap();
    assert_eq!(summary.failed + summary.dropped, 1);
    assert_eq!(mem.events("edge_finished").len(), 1);
}

#[test]
fn silence_compresses_far_below_budget() {
    let clip = SourceSpec::Silence { seconds: 30.0 }.load(FS).unwrap();
    let an = LogMelAnalyzer::new(SpectralParams::default()).unwrap();
    for codec in RasterCodec::ALL {
        let bytes = soundscape_core::edge::build_payload(&an, &clip, "edge-01", "2022-06-01T00:00:30.000Z", codec).unwrap();
        assert!(bytes.len() < 4096, "{codec}: {}", bytes.len());
    }
}

mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{sine_payload, toy_bank, wait_until};
use soundscape_core::inference::{
    load_masker_bank, BankLoadError, EngineConfig, InferenceEngine, InferenceService, MemorySink, SpectralMatchPredictor,
};
use soundscape_core::log::{EventLog, MemoryLog};
use soundscape_core::transport::{Backoff, IngestClient, IngestOutcome};
use soundscape_core::{PredictionSet, SpectralParams, MAX_PAYLOAD_BYTES};

const T: Duration = Duration::from_secs(20);

fn once() -> Backoff {
    Backoff { attempts: 1, base: Duration::from_millis(10) }
}

fn status(url: &str, body: &[u8]) -> u16 {
    match IngestClient::new(url, once()).post(body) {
        IngestOutcome::Responded { status, .. } => status,
        other => panic!("{other:?}"),
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    svc: InferenceService,
    sink: Arc<MemorySink>,
    mem: MemoryLog,
}

fn warm_service(n_maskers: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    toy_bank(dir.path(), n_maskers);
    let (log, mem) = EventLog::memory();
    let sink = Arc::new(MemorySink::default());
    let svc = InferenceService::start("127.0.0.1:0", 4, sink.clone(), log).unwrap();
    svc.warm_from_dir(dir.path(), &SpectralParams::default(), Arc::new(SpectralMatchPredictor), EngineConfig::default())
        .unwrap();
    Fixture { _dir: dir, svc, sink, mem }
}

#[test]
fn bank_loading() {
    let dir = tempfile::tempdir().unwrap();
    toy_bank(dir.path(), 10);
    let bank = load_masker_bank(dir.path(), &SpectralParams::default()).unwrap();
    assert_eq!(bank.len(), 10);

    let small = SpectralParams { n_mels: 32, ..Default::default() };
    let other = tempfile::tempdir().unwrap();
    soundscape_core::inference::write_masker_bank(other.path(), &common::toy_maskers(1), &small).unwrap();
    let src = other.path();
    std::fs::copy(src.join("m00.spec.json"), dir.path().join("masker_x.spec.json")).unwrap();
    std::fs::copy(src.join("m00.wav"), dir.path().join("masker_x.wav")).unwrap();
    let mut manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    manifest.push_str(r#"{"masker_id":"masker_x","spectrogram_file":"masker_x.spec.json","audio_file":"masker_x.wav"}"#);
    std::fs::write(dir.path().join("manifest.jsonl"), manifest).unwrap();
    match load_masker_bank(dir.path(), &SpectralParams::default()) {
        Err(BankLoadError::Masker { masker_id, .. }) => assert_eq!(masker_id, "masker_x"),
        other => panic!("{other:?}"),
    }
    let empty = tempfile::tempdir().unwrap();
    std::fs::write(empty.path().join("manifest.jsonl"), "").unwrap();
    assert!(matches!(load_masker_bank(empty.path(), &SpectralParams::default()), Err(BankLoadError::Empty(_))));
}

#[test]
fn cold_service_answers_503_then_serves() {
    let dir = tempfile::tempdir().unwrap();
    toy_bank(dir.path(), 3);
    let (log, mem) = EventLog::memory();
    let sink = Arc::new(MemorySink::default());
    let svc = InferenceService::start("127.0.0.1:0", 2, sink.clone(), log).unwrap();
    let payload = sine_payload("edge-01", "2022-06-01T00:00:30.000Z", 440.0);
    assert_eq!(status(&svc.ingest_url(), &payload), 503);
    assert_eq!(ureq::get(&format!("http://{}/v1/health", svc.local_addr())).call().unwrap().status(), 200);

    svc.warm_from_dir(dir.path(), &SpectralParams::default(), Arc::new(SpectralMatchPredictor), EngineConfig::default())
        .unwrap();
    for _ in 0..5 {
        assert_eq!(status(&svc.ingest_url(), &payload), 202);
    }
    assert!(wait_until(T, || sink.messages().len() == 5));
    assert_eq!(mem.events("bank_loaded").len(), 1);

    let text = ureq::get(&format!("http://{}/v1/bank", svc.local_addr())).call().unwrap().into_string().unwrap();
    let bank: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(bank["count"], 3);
    assert_eq!(bank["masker_ids"][0], "m00");
}

#[test]
fn ingest_status_codes() {
    let f = warm_service(2);
    let url = f.svc.ingest_url();
    assert_eq!(status(&url, &vec![b'x'; MAX_PAYLOAD_BYTES + 1]), 413);
    assert_eq!(status(&url, b"{not json"), 400);
    assert_eq!(status(&url, &[0xff, 0xfe, 0x00]), 400);
    assert_eq!(status(&url, br#"{"version":"1"}"#), 400);
    std::thread::sleep(Duration::from_millis(200));
    assert!(f.sink.messages().is_empty());
    assert_eq!(f.mem.events("request_rejected").len(), 3);
    let wrong = ureq::get(&url).call();
    assert!(matches!(wrong, Err(ureq::Error::Status(405, _))));
}

#[test]
fn repeated_requests_publish_identical_bytes() {
    let f = warm_service(4);
    let payload = sine_payload("edge-01", "2022-06-01T00:00:30.000Z", 440.0);
    assert_eq!(status(&f.svc.ingest_url(), &payload), 202);
    assert_eq!(status(&f.svc.ingest_url(), &payload), 202);
    assert!(wait_until(T, || f.sink.messages().len() == 2));
    let msgs = f.sink.messages();
    assert_eq!(msgs[0], msgs[1]);
    let set = PredictionSet::from_json(&msgs[0]).unwrap();
    assert_eq!(set.ranked.len(), 5);
    assert_eq!(set.device_id, "edge-01");
}

#[test]
fn concurrent_devices_do_not_interfere() {
    let f = warm_service(4);
    let a = sine_payload("edge-a", "2022-06-01T00:00:30.000Z", 300.0);
    let b = sine_payload("edge-b", "2022-06-01T00:00:30.000Z", 1200.0);
    let url = f.svc.ingest_url();
    std::thread::scope(|s| {
        for body in [&a, &b, &a, &b] {
            let url = url.clone();
            s.spawn(move || assert_eq!(status(&url, body), 202));
        }
    });
    assert!(wait_until(T, || f.sink.messages().len() == 4));

    // Reference results straight from the engine, one request at a time.
    let dir = tempfile::tempdir().unwrap();
    toy_bank(dir.path(), 4);
    let bank = load_masker_bank(dir.path(), &SpectralParams::default()).unwrap();
    let engine = InferenceEngine::new(Arc::new(bank), Arc::new(SpectralMatchPredictor), EngineConfig::default());
    let ra = engine.handle_request(&a).unwrap().to_json();
    let rb = engine.handle_request(&b).unwrap().to_json();
    let msgs = f.sink.messages();
    assert_eq!(msgs.iter().filter(|m| **m == ra).count(), 2);
    assert_eq!(msgs.iter().filter(|m| **m == rb).count(), 2);
}

#[test]
fn unreachable_endpoint_retries_then_drops() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = IngestClient::new(format!("http://{addr}/v1/ingest"), Backoff { attempts: 3, base: Duration::from_millis(5) });
    match client.post(b"{}") {
        IngestOutcome::Dropped { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
}

//! Playback unit: decides when the top prediction warrants a change and
//! renders a continuous, looping, crossfaded masker stream.

use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::inference::{self, BankLoadError, PredictionSet, RankedPair};
use crate::log::EventLog;
use crate::spectral::{self, SpectralError};
use crate::trace::TraceRecord;
use crate::transport::{Backoff, ResilientSubscriber, TopicName, TransportError};
use crate::{AudioClip, Scalar};

#[derive(Debug, Error)]
pub enum PlaybackError {
    #[error("invalid switch policy: {0}")]
    Policy(String),
    #[error("masker {0:?} has no audio")]
    EmptyTrack(String),
    #[error("masker {id:?} is {got} Hz, playback runs at {expected} Hz")]
    SampleRate { id: String, expected: u32, got: u32 },
    #[error(transparent)]
    Bank(#[from] BankLoadError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("audio sink: {0}")]
    Sink(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PlaybackError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchPolicy {
    pub gain_threshold_db: f64,
    pub crossfade_seconds: f64,
}

impl Default for SwitchPolicy {
    fn default() -> Self {
        Self { gain_threshold_db: 3.0, crossfade_seconds: 2.0 }
    }
}

impl SwitchPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain_threshold_db >= 0.0 && self.gain_threshold_db.is_finite()) {
            return Err(PlaybackError::Policy("gain_threshold_db must be >= 0".into()));
        }
        if !(self.crossfade_seconds > 0.0 && self.crossfade_seconds.is_finite()) {
            return Err(PlaybackError::Policy("crossfade_seconds must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| PlaybackError::Policy(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn crossfade_samples(&self, sample_rate: u32) -> usize {
        ((self.crossfade_seconds * f64::from(sample_rate)).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FadeState {
    pub from_id: Option<String>,
    pub to_id: String,
    pub progress: f64,
}

/// Snapshot of what is playing. During a fade `current_*` describe the
/// incoming masker.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PlaybackState {
    pub current_masker_id: Option<String>,
    pub current_gain: f64,
    pub position: usize,
    pub fade: Option<FadeState>,
}

/// Level change in dB going from `old` to `new` linear gain.
pub fn gain_change_db(old: f64, new: f64) -> f64 {
    20.0 * (new / old).log10()
}

pub fn should_switch(state: &PlaybackState, incoming: &RankedPair, policy: &SwitchPolicy) -> bool {
    match &state.current_masker_id {
        None => true,
        Some(id) if *id != incoming.masker_id => true,
        Some(_) => gain_change_db(state.current_gain, incoming.gain).abs() > policy.gain_threshold_db,
    }
}

/// Equal-power law: `(cos(p·π/2), sin(p·π/2))`.
pub fn crossfade_gains<S: Scalar>(progress: S) -> (S, S) {
    let p = progress.max(S::zero()).min(S::one());
    let theta = p * S::FRAC_PI_2();
    (theta.cos(), theta.sin())
}

/// Mono masker audio keyed by masker id.
#[derive(Debug, Clone)]
pub struct MaskerStore<S> {
    sample_rate: u32,
    tracks: BTreeMap<String, Arc<[S]>>,
}

impl<S: Scalar> MaskerStore<S> {
    pub fn new(sample_rate: u32) -> Self {
        Self { sample_rate, tracks: BTreeMap::new() }
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn insert(&mut self, id: impl Into<String>, samples: Vec<S>) -> Result<()> {
        let id = id.into();
        if samples.is_empty() {
            return Err(PlaybackError::EmptyTrack(id));
        }
        self.tracks.insert(id, samples.into());
        Ok(())
    }

    /// Adds a clip, downmixing to mono.
    pub fn insert_clip(&mut self, id: impl Into<String>, clip: &AudioClip) -> Result<()> {
        let id = id.into();
        if clip.sample_rate() != self.sample_rate {
            return Err(PlaybackError::SampleRate { id, expected: self.sample_rate, got: clip.sample_rate() });
        }
        let mono = clip.mono_mix().into_iter().map(|x| S::from_f64_lossy(f64::from(x))).collect();
        self.insert(id, mono)
    }

    /// Loads every audio file named in a bank manifest.
    pub fn load_bank_dir(dir: impl AsRef<Path>, sample_rate: u32) -> Result<Self> {
        let dir = dir.as_ref();
        let mut store = Self::new(sample_rate);
        for entry in inference::read_manifest(dir)? {
            let clip = spectral::read_wav(dir.join(&entry.audio_file)).map_err(|e| BankLoadError::Masker {
                masker_id: entry.masker_id.clone(),
                reason: e.to_string(),
            })?;
            store.insert_clip(entry.masker_id, &clip)?;
        }
        Ok(store)
    }

    pub fn get(&self, id: &str) -> Option<&Arc<[S]>> {
        self.tracks.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.tracks.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.tracks.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Largest absolute step between consecutive samples of a track played
    /// in a loop, including the wrap from the last sample to the first.
    pub fn max_jump(&self, id: &str) -> Option<S> {
        let t = self.tracks.get(id)?;
        let inner = t.windows(2).map(|w| (w[1] - w[0]).abs()).fold(S::zero(), S::max);
        Some(inner.max((t[0] - t[t.len() - 1]).abs()))
    }
}

#[derive(Debug, Clone)]
struct Voice<S> {
    id: String,
    gain: S,
    track: Arc<[S]>,
    pos: usize,
}

impl<S: Scalar> Voice<S> {
    fn next(&mut self) -> S {
        let x = self.track[self.pos];
        self.pos += 1;
        if self.pos == self.track.len() {
            self.pos = 0;
        }
        self.gain * x
    }
}

#[derive(Debug, Clone)]
struct ActiveFade<S> {
    from: Option<Voice<S>>,
    elapsed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitOutcome {
    Switched,
    Unchanged,
    /// Held until the running fade completes.
    Deferred,
    UnknownMasker,
    InvalidGain,
    Empty,
}

/// One output sample and, during a fade, the `(out, in)` fade gains used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedSample<S> {
    pub value: S,
    pub fade_gains: Option<(S, S)>,
}

/// Sample-accurate masker renderer driven by prediction sets.
pub struct Renderer<S: Scalar> {
    store: Arc<MaskerStore<S>>,
    policy: SwitchPolicy,
    fade_len: usize,
    current: Option<Voice<S>>,
    fade: Option<ActiveFade<S>>,
    pending: Option<RankedPair>,
    log: EventLog,
    rendered: u64,
}

impl<S: Scalar> Renderer<S> {
    pub fn new(store: Arc<MaskerStore<S>>, policy: SwitchPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            fade_len: policy.crossfade_samples(store.sample_rate()),
            store,
            policy,
            current: None,
            fade: None,
            pending: None,
            log: EventLog::null(),
            rendered: 0,
        })
    }

    pub fn with_log(mut self, log: EventLog) -> Self {
        self.log = log;
        self
    }

    pub fn sample_rate(&self) -> u32 {
        self.store.sample_rate()
    }

    pub fn policy(&self) -> &SwitchPolicy {
        &self.policy
    }

    pub fn samples_rendered(&self) -> u64 {
        self.rendered
    }

    pub fn is_fading(&self) -> bool {
        self.fade.is_some()
    }

    pub fn state(&self) -> PlaybackState {
        let Some(cur) = &self.current else {
            return PlaybackState::default();
        };
        PlaybackState {
            current_masker_id: Some(cur.id.clone()),
            current_gain: cur.gain.as_f64(),
            position: cur.pos,
            fade: self.fade.as_ref().map(|f| FadeState {
                from_id: f.from.as_ref().map(|v| v.id.clone()),
                to_id: cur.id.clone(),
                progress: f.elapsed as f64 / self.fade_len as f64,
            }),
        }
    }

    /// Applies the top-ranked pair of a prediction set.
    pub fn submit(&mut self, set: &PredictionSet) -> SubmitOutcome {
        match set.top() {
            Some(top) => self.submit_pair(top),
            None => SubmitOutcome::Empty,
        }
    }

    pub fn submit_pair(&mut self, pair: &RankedPair) -> SubmitOutcome {
        if !(pair.gain > 0.0 && pair.gain.is_finite()) {
            self.log.warn("invalid_gain", json!({"masker_id": pair.masker_id, "gain": pair.gain}));
            return SubmitOutcome::InvalidGain;
        }
        if !self.store.contains(&pair.masker_id) {
            self.log.warn("unknown_masker", json!({"masker_id": pair.masker_id}));
            return SubmitOutcome::UnknownMasker;
        }
        if self.fade.is_some() {
            self.pending = Some(pair.clone());
            return SubmitOutcome::Deferred;
        }
        self.evaluate(pair)
    }

    fn evaluate(&mut self, pair: &RankedPair) -> SubmitOutcome {
        if !should_switch(&self.state(), pair, &self.policy) {
            return SubmitOutcome::Unchanged;
        }
        let from = self.current.take();
        let track = Arc::clone(self.store.get(&pair.masker_id).expect("checked on submit"));
        let pos = match &from {
            Some(v) if v.id == pair.masker_id => v.pos,
            _ => 0,
        };
        self.log.info(
            "switch",
            json!({
                "sample": self.rendered,
                "from": from.as_ref().map(|v| v.id.clone()),
                "to": pair.masker_id,
                "gain": pair.gain,
            }),
        );
        self.current = Some(Voice { id: pair.masker_id.clone(), gain: S::from_f64_lossy(pair.gain), track, pos });
        self.fade = Some(ActiveFade { from, elapsed: 0 });
        SubmitOutcome::Switched
    }

    pub fn next_sample(&mut self) -> RenderedSample<S> {
        self.rendered += 1;
        let Some(cur) = self.current.as_mut() else {
            return RenderedSample { value: S::zero(), fade_gains: None };
        };
        let Some(fade) = self.fade.as_mut() else {
            return RenderedSample { value: cur.next(), fade_gains: None };
        };
        let p = S::from_usize(fade.elapsed).unwrap_or_else(S::zero) / S::from_usize(self.fade_len).unwrap_or_else(S::one);
        let (g_out, g_in) = crossfade_gains(p);
        let old = fade.from.as_mut().map_or(S::zero(), Voice::next);
        let value = g_out * old + g_in * cur.next();
        fade.elapsed += 1;
        if fade.elapsed >= self.fade_len {
            self.fade = None;
            if let Some(pending) = self.pending.take() {
                self.evaluate(&pending);
            }
        }
        RenderedSample { value, fade_gains: Some((g_out, g_in)) }
    }

    pub fn render(&mut self, out: &mut [S]) {
        for o in out {
            *o = self.next_sample().value;
        }
    }
}

/// Renders `n_samples` offline, applying each trace record at the sample
/// nearest its offset. Records must be in offset order.
pub fn render_trace<S: Scalar>(renderer: &mut Renderer<S>, trace: &[TraceRecord], n_samples: usize) -> Vec<S> {
    let fs = f64::from(renderer.sample_rate());
    let mut out = vec![S::zero(); n_samples];
    let mut cursor = 0usize;
    for rec in trace {
        let at = ((rec.offset_seconds * fs).round().max(0.0) as usize).min(n_samples);
        if at > cursor {
            renderer.render(&mut out[cursor..at]);
            cursor = at;
        }
        if at < n_samples {
            renderer.submit(&rec.prediction);
        }
    }
    renderer.render(&mut out[cursor..]);
    out
}

/// Bounded FIFO of incoming predictions; a full queue drops its oldest entry.
#[derive(Debug)]
pub struct PredictionQueue {
    inner: Mutex<VecDeque<PredictionSet>>,
    capacity: usize,
    dropped: AtomicUsize,
}

pub const QUEUE_CAPACITY: usize = 8;

impl Default for PredictionQueue {
    fn default() -> Self {
        Self::new(QUEUE_CAPACITY)
    }
}

impl PredictionQueue {
    pub fn new(capacity: usize) -> Self {
        Self { inner: Mutex::new(VecDeque::with_capacity(capacity)), capacity: capacity.max(1), dropped: AtomicUsize::new(0) }
    }

    /// Returns true when an older entry had to be discarded.
    pub fn push(&self, set: PredictionSet) -> bool {
        let mut q = self.inner.lock().expect("queue lock");
        let overflow = q.len() >= self.capacity;
        if overflow {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(set);
        overflow
    }

    pub fn drain(&self) -> Vec<PredictionSet> {
        self.inner.lock().expect("queue lock").drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("queue lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> usize {
        self.dropped.load(Ordering::Relaxed)
    }
}

pub trait AudioSink: Send {
    fn write(&mut self, block: &[f32]) -> Result<()>;
    fn finish(&mut self) -> Result<()>;
}

/// Discards audio, counting samples.
#[derive(Debug, Default)]
pub struct NullSink {
    pub samples: u64,
}

impl AudioSink for NullSink {
    fn write(&mut self, block: &[f32]) -> Result<()> {
        self.samples += block.len() as u64;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Mono 32-bit float WAV writer.
pub struct WavSink {
    writer: Option<hound::WavWriter<std::io::BufWriter<std::fs::File>>>,
}

impl WavSink {
    pub fn create(path: impl AsRef<Path>, sample_rate: u32) -> Result<Self> {
        let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
        let writer = hound::WavWriter::create(path, spec).map_err(|e| PlaybackError::Sink(e.to_string()))?;
        Ok(Self { writer: Some(writer) })
    }
}

impl AudioSink for WavSink {
    fn write(&mut self, block: &[f32]) -> Result<()> {
        let w = self.writer.as_mut().ok_or_else(|| PlaybackError::Sink("sink already finished".into()))?;
        for &s in block {
            w.write_sample(s).map_err(|e| PlaybackError::Sink(e.to_string()))?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(w) = self.writer.take() {
            w.finalize().map_err(|e| PlaybackError::Sink(e.to_string()))?;
        }
        Ok(())
    }
}

/// `--out` target: `null` or a WAV path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SinkSpec {
    Null,
    Wav(PathBuf),
}

impl std::str::FromStr for SinkSpec {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(if s == "null" { SinkSpec::Null } else { SinkSpec::Wav(PathBuf::from(s)) })
    }
}

impl SinkSpec {
    pub fn open(&self, sample_rate: u32) -> Result<Box<dyn AudioSink>> {
        Ok(match self {
            SinkSpec::Null => Box::new(NullSink::default()),
            SinkSpec::Wav(p) => Box::new(WavSink::create(p, sample_rate)?),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub relay: SocketAddr,
    pub topic: TopicName,
    pub block_seconds: f64,
    /// Pace rendering against the wall clock.
    pub realtime: bool,
    /// Stop after this much rendered audio.
    pub duration_seconds: Option<f64>,
    pub backoff: Backoff,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LiveSummary {
    pub samples: u64,
    pub received: usize,
    pub switches: usize,
    pub dropped: usize,
}

/// Subscribes to predictions and renders into `sink` until `stop` is set
/// or the configured duration has been produced.
pub fn run_live(
    renderer: &mut Renderer<f32>,
    sink: &mut dyn AudioSink,
    config: &LiveConfig,
    stop: &AtomicBool,
    log: &EventLog,
) -> Result<LiveSummary> {
    let queue = Arc::new(PredictionQueue::default());
    let done = Arc::new(AtomicBool::new(false));
    let feeder = {
        let queue = Arc::clone(&queue);
        let done = Arc::clone(&done);
        let log = log.clone();
        let mut sub = ResilientSubscriber::new(config.relay, vec![config.topic.clone()], config.backoff);
        thread::Builder::new().name("playback-feed".into()).spawn(move || {
            let mut received = 0usize;
            while !done.load(Ordering::Relaxed) {
                match sub.recv_timeout(Duration::from_millis(100)) {
                    Ok(Some(msg)) => match PredictionSet::from_json(&msg.body) {
                        Ok(set) => {
                            received += 1;
                            if queue.push(set) {
                                log.warn("prediction_dropped", json!({"reason": "queue full"}));
                            }
                        }
                        Err(e) => log.warn("malformed_prediction", json!({"error": e.to_string()})),
                    },
                    Ok(None) => {}
                    Err(e) => {
                        log.warn("subscription_error", json!({"error": e.to_string()}));
                        thread::sleep(Duration::from_millis(100));
                    }
                }
            }
            received
        })?
    };

    let fs = renderer.sample_rate();
    let block = ((config.block_seconds * f64::from(fs)).round() as usize).max(1);
    let limit = config.duration_seconds.map(|d| (d * f64::from(fs)).round() as u64);
    let mut buf = vec![0.0f32; block];
    let started = Instant::now();
    let mut summary = LiveSummary::default();
    let result = (|| {
        while !stop.load(Ordering::Relaxed) && limit.is_none_or(|l| summary.samples < l) {
            for set in queue.drain() {
                if renderer.submit(&set) == SubmitOutcome::Switched {
                    summary.switches += 1;
                }
            }
            let n = limit.map_or(block, |l| block.min((l - summary.samples) as usize));
            renderer.render(&mut buf[..n]);
            sink.write(&buf[..n])?;
            summary.samples += n as u64;
            if config.realtime {
                let due = Duration::from_secs_f64(summary.samples as f64 / f64::from(fs));
                if let Some(wait) = due.checked_sub(started.elapsed()) {
                    thread::sleep(wait);
                }
            }
        }
        sink.finish()
    })();
    done.store(true, Ordering::Relaxed);
    summary.received = feeder.join().unwrap_or(0);
    summary.dropped = queue.dropped();
    log.info("playback_finished", json!({"summary": summary}));
    result.map(|_| summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, gain: f64) -> RankedPair {
        RankedPair { masker_id: id.into(), gain, mean: 0.0, log_std: -1.0 }
    }

    fn set(id: &str, gain: f64) -> PredictionSet {
        PredictionSet { request_id: "r".into(), device_id: "d".into(), timestamp_utc: "t".into(), ranked: vec![pair(id, gain)] }
    }

    fn state(id: &str, gain: f64) -> PlaybackState {
        PlaybackState { current_masker_id: Some(id.into()), current_gain: gain, ..Default::default() }
    }

    #[test]
    fn switch_rule() {
        let p = SwitchPolicy::default();
        assert!(!should_switch(&state("a", 0.2), &pair("a", 0.2), &p));
        assert!(should_switch(&state("a", 0.2), &pair("b", 0.2), &p));
        assert!(should_switch(&PlaybackState::default(), &pair("a", 0.2), &p));
        assert!((gain_change_db(0.10, 0.15) - 3.5218).abs() < 1e-4);
        assert!(should_switch(&state("a", 0.10), &pair("a", 0.15), &p));
        assert!(should_switch(&state("a", 0.15), &pair("a", 0.10), &p));
        assert!(!should_switch(&state("a", 0.10), &pair("a", 0.14), &p));
    }

    #[test]
    fn crossfade_law() {
        assert_eq!(crossfade_gains(0.0f64), (1.0, 0.0));
        let (o, i) = crossfade_gains(1.0f64);
        assert!(o.abs() < 1e-15 && (i - 1.0).abs() < 1e-15);
        let (o, i) = crossfade_gains(0.5f64);
        assert!((o - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((i - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        for k in 0..=1000 {
            let (o, i) = crossfade_gains(k as f32 / 1000.0);
            assert!(((o * o + i * i) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn policy_validation() {
        assert!(SwitchPolicy { gain_threshold_db: -1.0, ..Default::default() }.validate().is_err());
        assert!(SwitchPolicy { crossfade_seconds: 0.0, ..Default::default() }.validate().is_err());
        let p = SwitchPolicy::from_toml("gain_threshold_db = 6.0").unwrap();
        assert_eq!(p.crossfade_seconds, 2.0);
        assert_eq!(p.crossfade_samples(44_100), 88_200);
    }

    fn store() -> Arc<MaskerStore<f64>> {
        let mut s = MaskerStore::new(100);
        s.insert("ramp", (0..1000).map(|i| i as f64 / 1000.0).collect()).unwrap();
        s.insert("flat", vec![0.5; 300]).unwrap();
        Arc::new(s)
    }

    #[test]
    fn loops_from_sample_zero() {
        let policy = SwitchPolicy { crossfade_seconds: 0.01, ..Default::default() };
        let mut r = Renderer::new(store(), policy).unwrap();
        assert_eq!(r.submit(&set("ramp", 1.0)), SubmitOutcome::Switched);
        let mut out = vec![0.0; 2500];
        r.render(&mut out);
        assert_eq!(out[1000], 0.0);
        assert_eq!(out[2000], 0.0);
        assert_eq!(out[1001], out[2001]);
        assert_eq!(out[999], 0.999);
    }

    #[test]
    fn duplicates_change_nothing() {
        let run = |dup: bool| {
            let mut r = Renderer::new(store(), SwitchPolicy::default()).unwrap();
            r.submit(&set("ramp", 0.3));
            let mut out = vec![0.0; 700];
            r.render(&mut out[..350]);
            if dup {
                assert_eq!(r.submit(&set("ramp", 0.3)), SubmitOutcome::Unchanged);
            }
            r.render(&mut out[350..]);
            out
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn fade_completes_before_next_switch() {
        let mut r = Renderer::new(store(), SwitchPolicy::default()).unwrap();
        let fade = SwitchPolicy::default().crossfade_samples(100);
        r.submit(&set("ramp", 0.5));
        for _ in 0..fade {
            assert!(r.next_sample().fade_gains.is_some());
        }
        assert!(!r.is_fading());
        assert_eq!(r.submit(&set("flat", 0.5)), SubmitOutcome::Switched);
        for _ in 0..10 {
            r.next_sample();
        }
        assert_eq!(r.submit(&set("ramp", 0.1)), SubmitOutcome::Deferred);
        assert_eq!(r.submit(&set("ramp", 0.5)), SubmitOutcome::Deferred);
        let mut gains = Vec::new();
        for _ in 10..fade {
            let s = r.next_sample();
            gains.push(s.fade_gains.unwrap());
        }
        assert!(gains.iter().all(|(o, i)| ((o * o + i * i) - 1.0).abs() < 1e-12));
        let st = r.state();
        assert_eq!(st.current_masker_id.as_deref(), Some("ramp"));
        assert_eq!(st.current_gain, 0.5);
        assert_eq!(st.fade.unwrap().from_id.as_deref(), Some("flat"));
    }

    #[test]
    fn unknown_masker_ignored() {
        let (log, mem) = EventLog::memory();
        let mut r = Renderer::new(store(), SwitchPolicy::default()).unwrap().with_log(log);
        assert_eq!(r.submit(&set("nope", 0.5)), SubmitOutcome::UnknownMasker);
        assert_eq!(r.submit(&set("ramp", 0.0)), SubmitOutcome::InvalidGain);
        assert_eq!(r.state(), PlaybackState::default());
        assert_eq!(mem.events("unknown_masker").len(), 1);
        assert_eq!(r.next_sample().value, 0.0);
    }

    #[test]
    fn queue_drops_oldest() {
        let q = PredictionQueue::default();
        for i in 0..10 {
            q.push(set(&format!("m{i}"), 0.1));
        }
        let got: Vec<String> = q.drain().into_iter().map(|s| s.ranked[0].masker_id.clone()).collect();
        assert_eq!(got.len(), 8);
        assert_eq!(got[0], "m2");
        assert_eq!(q.dropped(), 2);
    }

    #[test]
    fn circular_max_jump() {
        let mut s = MaskerStore::<f32>::new(10);
        s.insert("x", vec![0.0, 0.1, 0.2, 0.9]).unwrap();
        assert!((s.max_jump("x").unwrap() - 0.9).abs() < 1e-6);
        assert!(s.insert("e", vec![]).is_err());
    }
}

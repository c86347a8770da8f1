//! Masker-gain inference.
//!
//! For every request the soundscape spectrogram is paired with each masker
//! in the bank at a handful of gains drawn from a log-normal distribution,
//! every pair is scored by a [`PleasantnessPredictor`], and the best pairs
//! by predicted mean pleasantness are published downstream.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read};
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{self, CodecError, RasterCodec, SpectralPayload};
use crate::log::EventLog;
use crate::spectral::{self, Analyzer, LogMelSpectrogram, SpectralError, SpectralParams};
use crate::transport::{Backoff, RelayClient, TopicName};
use crate::{AudioClip, Scalar, MAX_PAYLOAD_BYTES};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("invalid gain distribution: {0}")]
    InvalidGainDistribution(String),
    #[error("masker bank is empty")]
    EmptyBank,
    #[error("predictor failed: {0}")]
    Predictor(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Error)]
pub enum BankLoadError {
    #[error("masker bank manifest: {0}")]
    Manifest(String),
    #[error("masker {masker_id:?}: {reason}")]
    Masker { masker_id: String, reason: String },
    #[error("masker bank at {0} has no records")]
    Empty(PathBuf),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

/// One line of the bank manifest; paths are relative to the bank directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub masker_id: String,
    pub spectrogram_file: String,
    pub audio_file: String,
}

#[derive(Debug, Clone)]
pub struct MaskerRecord {
    pub masker_id: String,
    pub spectrogram: LogMelSpectrogram,
    pub audio_path: PathBuf,
}

/// Immutable set of masker candidates with precomputed spectrograms.
#[derive(Debug, Clone)]
pub struct MaskerBank {
    records: Vec<MaskerRecord>,
    params: SpectralParams,
}

impl MaskerBank {
    pub fn new(records: Vec<MaskerRecord>, params: SpectralParams) -> Result<Self, BankLoadError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.masker_id.as_str()) {
                return Err(BankLoadError::Masker {
                    masker_id: r.masker_id.clone(),
                    reason: "duplicate masker_id".into(),
                });
            }
            if !r.spectrogram.params().compatible_with(&params) {
                return Err(BankLoadError::Masker {
                    masker_id: r.masker_id.clone(),
                    reason: format!(
                        "spectrogram params (L={}, R={}, M={}, fs={}) do not match service params (L={}, R={}, M={}, fs={})",
                        r.spectrogram.params().frame_size,
                        r.spectrogram.params().hop,
                        r.spectrogram.params().n_mels,
                        r.spectrogram.params().sample_rate,
                        params.frame_size,
                        params.hop,
                        params.n_mels,
                        params.sample_rate
                    ),
                });
            }
        }
        Ok(Self { records, params })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MaskerRecord] {
        &self.records
    }

    pub fn params(&self) -> &SpectralParams {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.masker_id.as_str())
    }

    pub fn get(&self, masker_id: &str) -> Option<&MaskerRecord> {
        self.records.iter().find(|r| r.masker_id == masker_id)
    }
}

/// Reads `manifest.jsonl` in `dir`, returning one entry per masker.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, BankLoadError> {
    let path = dir.join(MANIFEST_FILE);
    let file = std::fs::File::open(&path)
        .map_err(|e| BankLoadError::Manifest(format!("{}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| BankLoadError::Manifest(format!("line {}: {e}", n + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads a masker bank, checking every spectrogram against `params`.
pub fn load_masker_bank(dir: impl AsRef<Path>, params: &SpectralParams) -> Result<MaskerBank, BankLoadError> {
    let dir = dir.as_ref();
    let entries = read_manifest(dir)?;
    if entries.is_empty() {
        return Err(BankLoadError::Empty(dir.to_path_buf()));
    }
    let mut records = Vec::with_capacity(entries.len());
    for e in entries {
        let fail = |reason: String| BankLoadError::Masker { masker_id: e.masker_id.clone(), reason };
        let bytes = std::fs::read(dir.join(&e.spectrogram_file))
            .map_err(|err| fail(format!("{}: {err}", e.spectrogram_file)))?;
        let spectrogram = codec::decode_payload_with_limit(&bytes, None)
            .and_then(|p| p.to_spectrogram())
            .map_err(|err| fail(err.to_string()))?;
        let audio_path = dir.join(&e.audio_file);
        if !audio_path.is_file() {
            return Err(fail(format!("audio file {} not found", audio_path.display())));
        }
        records.push(MaskerRecord {
            masker_id: e.masker_id,
            spectrogram,
            audio_path,
        });
    }
    MaskerBank::new(records, *params)
}

/// Masker spectrogram; mono clips are duplicated onto two channels.
pub fn analyze_masker(analyzer: &Analyzer<f64>, clip: &AudioClip) -> Result<LogMelSpectrogram, SpectralError> {
    if clip.n_channels() == 1 {
        let mono = clip.channel(0).to_vec();
        analyzer.analyze_stereo(&AudioClip::new(vec![mono.clone(), mono], clip.sample_rate())?)
    } else {
        analyzer.analyze_stereo(&clip.stereo()?)
    }
}

/// Analyzes clips into an in-memory bank without touching disk.
pub fn bank_from_clips(maskers: &[(String, AudioClip)], params: &SpectralParams) -> Result<MaskerBank, BankLoadError> {
    let analyzer = Analyzer::<f64>::new(*params).map_err(|e| BankLoadError::Manifest(e.to_string()))?;
    let records = maskers
        .iter()
        .map(|(id, clip)| {
            analyze_masker(&analyzer, clip)
                .map(|spectrogram| MaskerRecord { masker_id: id.clone(), spectrogram, audio_path: PathBuf::new() })
                .map_err(|e| BankLoadError::Masker { masker_id: id.clone(), reason: e.to_string() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    MaskerBank::new(records, *params)
}

/// Writes masker audio, spectrograms and manifest into `dir`. Mono clips
/// are duplicated onto two channels before analysis.
pub fn write_masker_bank(
    dir: impl AsRef<Path>,
    maskers: &[(String, AudioClip)],
    params: &SpectralParams,
) -> Result<(), BankLoadError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let analyzer = Analyzer::<f64>::new(*params).map_err(|e| BankLoadError::Manifest(e.to_string()))?;
    let mut manifest = String::new();
    for (id, clip) in maskers {
        let fail = |reason: String| BankLoadError::Masker { masker_id: id.clone(), reason };
        let spec = analyze_masker(&analyzer, clip).map_err(|e| fail(e.to_string()))?;
        let payload = SpectralPayload::from_spectrogram(&spec, "masker-bank", "", RasterCodec::Png)
            .map_err(|e| fail(e.to_string()))?;
        let bytes = codec::encode_payload_with_limit(&payload, None).map_err(|e| fail(e.to_string()))?;
        let entry = ManifestEntry {
            masker_id: id.clone(),
            spectrogram_file: format!("{id}.spec.json"),
            audio_file: format!("{id}.wav"),
        };
        std::fs::write(dir.join(&entry.spectrogram_file), bytes)?;
        spectral::write_wav(dir.join(&entry.audio_file), clip).map_err(|e| fail(e.to_string()))?;
        manifest.push_str(&serde_json::to_string(&entry).expect("manifest entry serializes"));
        manifest.push('\n');
    }
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Linear amplitude multiplier and its natural log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSample {
    pub gain: f64,
    pub log_gain: f64,
}

impl GainSample {
    pub fn from_log(log_gain: f64) -> Self {
        Self { gain: log_gain.exp(), log_gain }
    }
}

/// Log-normal gain distribution, parameterized by the underlying normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainDistribution {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for GainDistribution {
    fn default() -> Self {
        Self { mu: -2.0, sigma: 1.5 }
    }
}

/// Draws `k` gains with `ln(gain) ~ Normal(mu, sigma)`.
pub fn sample_gains<R: Rng + ?Sized>(rng: &mut R, k: usize, mu: f64, sigma: f64) -> Result<Vec<GainSample>> {
    if k == 0 {
        return Err(InferenceError::InvalidGainDistribution("k must be >= 1".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
        return Err(InferenceError::InvalidGainDistribution(format!("mu={mu}, sigma={sigma}")));
    }
    let normal = Normal::new(mu, sigma).map_err(|e| InferenceError::InvalidGainDistribution(e.to_string()))?;
    Ok((0..k).map(|_| GainSample::from_log(normal.sample(rng))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PleasantnessDistribution {
    pub mean: f64,
    pub log_std: f64,
}

/// Scores one soundscape-masker-gain triple.
pub trait PleasantnessPredictor: Send + Sync {
    fn predict(
        &self,
        soundscape: &LogMelSpectrogram,
        masker: &LogMelSpectrogram,
        log_gain: f64,
    ) -> Result<PleasantnessDistribution>;

    /// Scores several gains for one masker.
    fn predict_gains(
        &self,
        soundscape: &LogMelSpectrogram,
        masker: &LogMelSpectrogram,
        log_gains: &[f64],
    ) -> Result<Vec<PleasantnessDistribution>> {
        log_gains
            .iter()
            .map(|&g| self.predict(soundscape, masker, g))
            .collect()
    }
}

/// Channel- and time-averaged log-mel vector (length `n_mels`).
pub fn mean_log_mel<S: Scalar>(spec: &LogMelSpectrogram) -> Vec<S> {
    let m = spec.n_mels();
    let mut acc = vec![0.0f64; m];
    for frame in spec.values().chunks_exact(m) {
        for (a, v) in acc.iter_mut().zip(frame) {
            *a += v.to_f64();
        }
    }
    let n = (spec.n_channels() * spec.n_frames()) as f64;
    acc.into_iter().map(|a| S::from_f64_lossy(a / n)).collect()
}

/// `-(1/M) Σ_b |s_b - (m_b + log_gain)|`
pub fn spectral_match<S: Scalar>(soundscape_mean: &[S], masker_mean: &[S], log_gain: S) -> S {
    let sum = soundscape_mean
        .iter()
        .zip(masker_mean)
        .fold(S::zero(), |acc, (&s, &m)| acc + (s - (m + log_gain)).abs());
    -sum / S::from_usize(soundscape_mean.len()).unwrap_or_else(S::one)
}

/// Log-std reported by the baseline predictor.
pub const BASELINE_LOG_STD: f64 = -1.0;

/// Deterministic stand-in predictor: mean pleasantness is the negated mean
/// absolute log-spectral distance between the averaged soundscape and the
/// gain-shifted averaged masker.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpectralMatchPredictor;

impl SpectralMatchPredictor {
    fn check(soundscape: &LogMelSpectrogram, masker: &LogMelSpectrogram) -> Result<()> {
        if soundscape.n_mels() != masker.n_mels() {
            return Err(InferenceError::ParamMismatch(format!(
                "soundscape has {} mel bins, masker has {}",
                soundscape.n_mels(),
                masker.n_mels()
            )));
        }
        Ok(())
    }
}

impl PleasantnessPredictor for SpectralMatchPredictor {
    fn predict(&self, soundscape: &LogMelSpectrogram, masker: &LogMelSpectrogram, log_gain: f64) -> Result<PleasantnessDistribution> {
        Ok(self.predict_gains(soundscape, masker, &[log_gain])?[0])
    }

    fn predict_gains(&self, soundscape: &LogMelSpectrogram, masker: &LogMelSpectrogram, log_gains: &[f64]) -> Result<Vec<PleasantnessDistribution>> {
        Self::check(soundscape, masker)?;
        let s = mean_log_mel::<f64>(soundscape);
        let m = mean_log_mel::<f64>(masker);
        Ok(log_gains
            .iter()
            .map(|&g| PleasantnessDistribution { mean: spectral_match(&s, &m, g), log_std: BASELINE_LOG_STD })
            .collect())
    }
}

/// Baseline predictor as a free function.
pub fn baseline_predict(soundscape: &LogMelSpectrogram, masker: &LogMelSpectrogram, log_gain: f64) -> Result<PleasantnessDistribution> {
    SpectralMatchPredictor.predict(soundscape, masker, log_gain)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub masker_id: String,
    pub gain: GainSample,
    pub prediction: PleasantnessDistribution,
}

/// Scores every masker at `gains_per_masker` sampled gains; maskers are
/// visited in bank order and each draws its gains in turn from `rng`.
pub fn score_candidates<R: Rng + ?Sized>(
    soundscape: &LogMelSpectrogram,
    bank: &MaskerBank,
    gains_per_masker: usize,
    distribution: GainDistribution,
    rng: &mut R,
    predictor: &dyn PleasantnessPredictor,
) -> Result<Vec<ScoredPair>> {
    if bank.is_empty() {
        return Err(InferenceError::EmptyBank);
    }
    let mut out = Vec::with_capacity(bank.len() * gains_per_masker);
    for record in bank.records() {
        let gains = sample_gains(rng, gains_per_masker, distribution.mu, distribution.sigma)?;
        let logs: Vec<f64> = gains.iter().map(|g| g.log_gain).collect();
        let preds = predictor.predict_gains(soundscape, &record.spectrogram, &logs)?;
        if preds.len() != gains.len() {
            return Err(InferenceError::Predictor(format!(
                "predictor returned {} scores for {} gains",
                preds.len(),
                gains.len()
            )));
        }
        for (gain, prediction) in gains.into_iter().zip(preds) {
            if !(prediction.mean.is_finite() && prediction.log_std.is_finite()) {
                return Err(InferenceError::Predictor(format!("non-finite prediction for {}", record.masker_id)));
            }
            out.push(ScoredPair { masker_id: record.masker_id.clone(), gain, prediction });
        }
    }
    Ok(out)
}

/// One entry of the downstream ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub masker_id: String,
    pub gain: f64,
    pub mean: f64,
    pub log_std: f64,
}

impl From<&ScoredPair> for RankedPair {
    fn from(p: &ScoredPair) -> Self {
        Self {
            masker_id: p.masker_id.clone(),
            gain: p.gain.gain,
            mean: p.prediction.mean,
            log_std: p.prediction.log_std,
        }
    }
}

/// Ranking order: mean descending, then masker_id, then gain ascending.
pub fn rank_order(a: &RankedPair, b: &RankedPair) -> Ordering {
    b.mean
        .total_cmp(&a.mean)
        .then_with(|| a.masker_id.cmp(&b.masker_id))
        .then_with(|| a.gain.total_cmp(&b.gain))
}

/// The `k` best pairs in ranking order.
pub fn select_top_k(pairs: &[ScoredPair], k: usize) -> Vec<RankedPair> {
    let mut ranked: Vec<RankedPair> = pairs.iter().map(RankedPair::from).collect();
    if k == 0 {
        return Vec::new();
    }
    if ranked.len() > k {
        ranked.select_nth_unstable_by(k - 1, rank_order);
        ranked.truncate(k);
    }
    ranked.sort_by(rank_order);
    ranked
}

/// Downstream wire object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub request_id: String,
    pub device_id: String,
    pub timestamp_utc: String,
    pub ranked: Vec<RankedPair>,
}

impl PredictionSet {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("prediction set serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    pub fn top(&self) -> Option<&RankedPair> {
        self.ranked.first()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub gains_per_masker: usize,
    pub gain_distribution: GainDistribution,
    pub top_k: usize,
    /// Mixed into every per-request seed.
    pub seed: u64,
    pub site: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            gains_per_masker: 5,
            gain_distribution: GainDistribution::default(),
            top_k: 5,
            seed: 0,
            site: "site0".into(),
        }
    }
}

/// A failed request with its HTTP status.
#[derive(Debug, Error)]
#[error("{status}: {message}")]
pub struct RequestError {
    pub status: u16,
    pub message: String,
}

impl RequestError {
    fn new(status: u16, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

/// Stateless request handler over an immutable bank.
pub struct InferenceEngine {
    bank: Arc<MaskerBank>,
    predictor: Arc<dyn PleasantnessPredictor>,
    config: EngineConfig,
}

impl InferenceEngine {
    pub fn new(bank: Arc<MaskerBank>, predictor: Arc<dyn PleasantnessPredictor>, config: EngineConfig) -> Self {
        Self { bank, predictor, config }
    }

    pub fn bank(&self) -> &MaskerBank {
        &self.bank
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn identity_digest(&self, device_id: &str, timestamp_utc: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(device_id.as_bytes());
        h.update([0u8]);
        h.update(timestamp_utc.as_bytes());
        h.finalize().into()
    }

    /// RNG seed derived from the request identity and the engine seed.
    pub fn request_seed(&self, device_id: &str, timestamp_utc: &str) -> u64 {
        let d = self.identity_digest(device_id, timestamp_utc);
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    pub fn request_id(&self, device_id: &str, timestamp_utc: &str) -> String {
        self.identity_digest(device_id, timestamp_utc)[8..16]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Decodes and validates a wire payload (the part that decides 400).
    pub fn decode(&self, bytes: &[u8]) -> Result<(SpectralPayload, LogMelSpectrogram), RequestError> {
        let payload = codec::decode_payload(bytes).map_err(|e| match e {
            CodecError::PayloadTooLarge { .. } => RequestError::new(413, e.to_string()),
            _ => RequestError::new(400, e.to_string()),
        })?;
        let spec = payload.to_spectrogram().map_err(|e| RequestError::new(400, e.to_string()))?;
        if !spec.params().compatible_with(self.bank.params()) {
            return Err(RequestError::new(400, "payload spectral parameters do not match the masker bank"));
        }
        Ok((payload, spec))
    }

    /// Scores and ranks one decoded soundscape.
    pub fn predict(&self, payload: &SpectralPayload, soundscape: &LogMelSpectrogram) -> Result<PredictionSet> {
        let seed = self.request_seed(&payload.device_id, &payload.timestamp_utc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = score_candidates(
            soundscape,
            &self.bank,
            self.config.gains_per_masker,
            self.config.gain_distribution,
            &mut rng,
            self.predictor.as_ref(),
        )?;
        Ok(PredictionSet {
            request_id: self.request_id(&payload.device_id, &payload.timestamp_utc),
            device_id: payload.device_id.clone(),
            timestamp_utc: payload.timestamp_utc.clone(),
            ranked: select_top_k(&pairs, self.config.top_k),
        })
    }

    /// Full request path minus transport: decode, score, rank.
    pub fn handle_request(&self, bytes: &[u8]) -> Result<PredictionSet, RequestError> {
        if self.bank.is_empty() {
            return Err(RequestError::new(503, "masker bank is empty"));
        }
        let (payload, spec) = self.decode(bytes)?;
        self.predict(&payload, &spec).map_err(|e| RequestError::new(500, e.to_string()))
    }

    pub fn topic(&self) -> TopicName {
        TopicName::predictions(&self.config.site).unwrap_or_else(|_| TopicName::new("site0/playback/predictions").expect("valid topic"))
    }
}

/// Destination of serialized prediction sets.
pub trait PredictionSink: Send + Sync {
    fn publish(&self, set: &PredictionSet, json: &[u8]) -> Result<(), String>;
}

/// Keeps published predictions in memory.
#[derive(Debug, Default)]
pub struct MemorySink(Mutex<Vec<Vec<u8>>>);

impl MemorySink {
    pub fn messages(&self) -> Vec<Vec<u8>> {
        self.0.lock().map(|m| m.clone()).unwrap_or_default()
    }
}

impl PredictionSink for MemorySink {
    fn publish(&self, _set: &PredictionSet, json: &[u8]) -> Result<(), String> {
        self.0.lock().map_err(|e| e.to_string())?.push(json.to_vec());
        Ok(())
    }
}

/// Publishes to the relay over a single guarded client, reconnecting on failure.
pub struct RelaySink {
    addr: SocketAddr,
    topic: TopicName,
    backoff: Backoff,
    client: Mutex<Option<RelayClient>>,
}

impl RelaySink {
    pub fn new(addr: SocketAddr, topic: TopicName, backoff: Backoff) -> Self {
        Self { addr, topic, backoff, client: Mutex::new(None) }
    }
}

impl PredictionSink for RelaySink {
    fn publish(&self, _set: &PredictionSet, json: &[u8]) -> Result<(), String> {
        let mut guard = self.client.lock().map_err(|e| e.to_string())?;
        for _ in 0..2 {
            if guard.is_none() {
                *guard = Some(RelayClient::connect_with_backoff(self.addr, &self.backoff).map_err(|e| e.to_string())?);
            }
            match guard.as_ref().expect("connected").publish(&self.topic, json) {
                Ok(()) => return Ok(()),
                Err(_) => *guard = None,
            }
        }
        Err(format!("publish to {} failed", self.addr))
    }
}

/// HTTP front of the inference engine.
///
/// The listener comes up cold; [`InferenceService::warm`] installs the
/// engine once. Until then ingest and bank queries answer 503.
pub struct InferenceService {
    local_addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    engine: Arc<OnceLock<Arc<InferenceEngine>>>,
    workers: Vec<JoinHandle<()>>,
    log: EventLog,
}

impl InferenceService {
    pub fn start(bind: impl ToSocketAddrs, workers: usize, sink: Arc<dyn PredictionSink>, log: EventLog) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(bind).map_err(|e| std::io::Error::other(e.to_string()))?;
        let local_addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let engine: Arc<OnceLock<Arc<InferenceEngine>>> = Arc::new(OnceLock::new());
        let workers = (0..workers.max(1))
            .map(|i| {
                let server = Arc::clone(&server);
                let engine = Arc::clone(&engine);
                let sink = Arc::clone(&sink);
                let log = log.clone();
                thread::Builder::new()
                    .name(format!("infer-worker-{i}"))
                    .spawn(move || {
                        while let Ok(req) = server.recv() {
                            handle_http(req, &engine, sink.as_ref(), &log);
                        }
                    })
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        log.info("service_listening", json!({"addr": local_addr.to_string()}));
        Ok(Self { local_addr, server, engine, workers, log })
    }

    /// Cold start: loads the bank once and installs the engine.
    pub fn warm_from_dir(
        &self,
        bank_dir: &Path,
        params: &SpectralParams,
        predictor: Arc<dyn PleasantnessPredictor>,
        config: EngineConfig,
    ) -> Result<(), BankLoadError> {
        let t0 = Instant::now();
        let bank = load_masker_bank(bank_dir, params)?;
        self.log.info(
            "bank_loaded",
            json!({"maskers": bank.len(), "dir": bank_dir.display().to_string(), "duration_ms": t0.elapsed().as_secs_f64() * 1e3}),
        );
        self.warm(Arc::new(InferenceEngine::new(Arc::new(bank), predictor, config)));
        Ok(())
    }

    /// Installs the engine; later calls are ignored.
    pub fn warm(&self, engine: Arc<InferenceEngine>) -> bool {
        self.engine.set(engine).is_ok()
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn ingest_url(&self) -> String {
        format!("http://{}/v1/ingest", self.local_addr)
    }

    pub fn shutdown(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    /// Serves until the process is stopped.
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for InferenceService {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn json_response(status: u16, body: serde_json::Value) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    tiny_http::Response::from_data(body.to_string().into_bytes())
        .with_status_code(status)
        .with_header(header)
}

fn handle_http(mut req: tiny_http::Request, engine: &OnceLock<Arc<InferenceEngine>>, sink: &dyn PredictionSink, log: &EventLog) {
    use tiny_http::Method;
    let path = req.url().split('?').next().unwrap_or("").to_string();
    let method = req.method().clone();
    let respond = |req: tiny_http::Request, status: u16, body: serde_json::Value| {
        let _ = req.respond(json_response(status, body));
    };
    match (method, path.as_str()) {
        (Method::Get, "/v1/health") => {
            respond(req, 200, json!({"status": "ok", "warm": engine.get().is_some()}));
        }
        (Method::Get, "/v1/bank") => match engine.get() {
            Some(e) => respond(req, 200, json!({"count": e.bank().len(), "masker_ids": e.bank().ids().collect::<Vec<_>>()})),
            None => respond(req, 503, json!({"error": "service is cold"})),
        },
        (Method::Post, "/v1/ingest") => {
            let t0 = Instant::now();
            if req.body_length().is_some_and(|n| n > MAX_PAYLOAD_BYTES) {
                return respond(req, 413, json!({"error": "payload exceeds 131072 bytes"}));
            }
            let mut body = Vec::new();
            if let Err(e) = req.as_reader().take(MAX_PAYLOAD_BYTES as u64 + 1).read_to_end(&mut body) {
                return respond(req, 400, json!({"error": e.to_string()}));
            }
            if body.len() > MAX_PAYLOAD_BYTES {
                return respond(req, 413, json!({"error": "payload exceeds 131072 bytes"}));
            }
            let Some(engine) = engine.get() else {
                return respond(req, 503, json!({"error": "service is cold"}));
            };
            if engine.bank().is_empty() {
                return respond(req, 503, json!({"error": "masker bank is empty"}));
            }
            let (payload, spec) = match engine.decode(&body) {
                Ok(v) => v,
                Err(e) => {
                    log.warn("request_rejected", json!({"status": e.status, "error": e.message}));
                    return respond(req, e.status, json!({"error": e.message}));
                }
            };
            let request_id = engine.request_id(&payload.device_id, &payload.timestamp_utc);
            respond(req, 202, json!({"request_id": request_id}));

            let t_infer = Instant::now();
            match engine.predict(&payload, &spec) {
                Ok(set) => {
                    let infer_ms = t_infer.elapsed().as_secs_f64() * 1e3;
                    let t_pub = Instant::now();
                    let published = sink.publish(&set, &set.to_json());
                    log.emit(
                        if published.is_ok() { "info" } else { "error" },
                        "request_handled",
                        json!({
                            "request_id": set.request_id,
                            "device_id": set.device_id,
                            "candidates": engine.bank().len() * engine.config().gains_per_masker,
                            "infer_ms": infer_ms,
                            "publish_ms": t_pub.elapsed().as_secs_f64() * 1e3,
                            "total_ms": t0.elapsed().as_secs_f64() * 1e3,
                            "publish_error": published.err(),
                        }),
                    );
                }
                Err(e) => log.error("inference_failed", json!({"request_id": request_id, "error": e.to_string()})),
            }
        }
        (_, "/v1/health" | "/v1/bank" | "/v1/ingest") => respond(req, 405, json!({"error": "method not allowed"})),
        _ => respond(req, 404, json!({"error": "not found"})),
    }
}

/// Waits until `url` answers `GET /v1/health` or `timeout` passes.
pub fn wait_for_health(base: &str, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if ureq::get(&format!("{base}/v1/health")).call().is_ok() {
            return true;
        }
        thread::sleep(Duration::from_millis(20));
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use half::f16;

    fn spec_with(means: &[f64], frames: usize) -> LogMelSpectrogram {
        let m = means.len();
        let params = SpectralParams { n_mels: m, ..Default::default() };
        let values: Vec<f16> = (0..2 * frames).flat_map(|_| means.iter().map(|&v| f16::from_f64(v))).collect();
        LogMelSpectrogram::from_values(2, frames, m, values, params).unwrap()
    }

    #[test]
    fn degenerate_sigma_pins_the_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in sample_gains(&mut rng, 5, -2.0, 1e-12).unwrap() {
            assert!((g.gain - (-2.0f64).exp()).abs() < 1e-9);
            assert_eq!(g.gain, g.log_gain.exp());
        }
    }

    #[test]
    fn seeded_gains_repeat() {
        let draw = || sample_gains(&mut ChaCha8Rng::seed_from_u64(42), 5, -2.0, 1.5).unwrap();
        assert_eq!(draw(), draw());
        assert!(draw().iter().all(|g| g.gain > 0.0));
    }

    #[test]
    fn invalid_gain_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_gains(&mut rng, 0, -2.0, 1.5).is_err());
        assert!(sample_gains(&mut rng, 5, -2.0, 0.0).is_err());
        assert!(sample_gains(&mut rng, 5, -2.0, -1.0).is_err());
    }

    #[test]
    fn perfect_match_scores_zero() {
        let s = spec_with(&[-3.0, -1.0, 0.5, 2.0], 3);
        let d = baseline_predict(&s, &s, 0.0).unwrap();
        assert_eq!(d.mean, 0.0);
        assert_eq!(d.log_std, -1.0);
        let shifted = baseline_predict(&s, &s, 0.75).unwrap();
        assert!((shifted.mean + 0.75).abs() < 1e-12);
    }

    #[test]
    fn baseline_matches_reference_evaluation() {
        // Reference values computed in plain f64 from the same f16 inputs.
        let s_vals = [-4.25, -2.5, 0.125, 1.75, 3.0];
        let m_vals = [-1.0, -3.5, 0.5, 0.0, 2.25];
        let s = spec_with(&s_vals, 4);
        let m = spec_with(&m_vals, 7);
        let g = -0.3;
        let expect = -s_vals.iter().zip(&m_vals).map(|(a, b)| (a - (b + g)).abs()).sum::<f64>() / 5.0;
        assert!((baseline_predict(&s, &m, g).unwrap().mean - expect).abs() < 1e-6);
    }

    #[test]
    fn mel_mismatch() {
        let s = spec_with(&[0.0; 4], 2);
        let m = spec_with(&[0.0; 8], 2);
        assert!(matches!(baseline_predict(&s, &m, 0.0), Err(InferenceError::ParamMismatch(_))));
    }

    #[test]
    fn closer_masker_never_ranks_lower() {
        let s = spec_with(&[1.0, 2.0, 3.0], 2);
        let near = spec_with(&[1.25, 1.75, 3.25], 2);
        let far = spec_with(&[1.5, 1.5, 3.5], 2);
        let a = baseline_predict(&s, &near, 0.0).unwrap().mean;
        let b = baseline_predict(&s, &far, 0.0).unwrap().mean;
        assert!(a > b);
    }

    fn pair(id: &str, gain: f64, mean: f64) -> ScoredPair {
        ScoredPair {
            masker_id: id.into(),
            gain: GainSample::from_log(gain.ln()),
            prediction: PleasantnessDistribution { mean, log_std: -1.0 },
        }
    }

    #[test]
    fn top_k_short_list_and_ties() {
        let pairs = vec![pair("b", 0.2, 1.0), pair("a", 0.3, 1.0), pair("c", 0.1, 2.0)];
        let top = select_top_k(&pairs, 5);
        let ids: Vec<&str> = top.iter().map(|p| p.masker_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        let pairs = vec![pair("a", 0.3, 1.0), pair("a", 0.1, 1.0)];
        let top = select_top_k(&pairs, 1);
        assert_eq!(top[0].gain, GainSample::from_log(0.1f64.ln()).gain);
        assert!(select_top_k(&pairs, 0).is_empty());
    }

    #[test]
    fn candidate_count_and_determinism() {
        let params = SpectralParams { n_mels: 3, ..Default::default() };
        let recs = (0..4)
            .map(|i| MaskerRecord {
                masker_id: format!("m{i}"),
                spectrogram: spec_with(&[i as f64, 0.0, -1.0], 2),
                audio_path: PathBuf::new(),
            })
            .collect();
        let bank = MaskerBank::new(recs, params).unwrap();
        let soundscape = spec_with(&[1.0, 0.5, -0.5], 5);
        let run = || score_candidates(&soundscape, &bank, 5, GainDistribution::default(), &mut ChaCha8Rng::seed_from_u64(3), &SpectralMatchPredictor).unwrap();
        let a = run();
        assert_eq!(a.len(), 20);
        assert_eq!(a, run());
        let one = MaskerBank::new(vec![bank.records()[0].clone()], params).unwrap();
        let b = score_candidates(&soundscape, &one, 5, GainDistribution::default(), &mut ChaCha8Rng::seed_from_u64(3), &SpectralMatchPredictor).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b.iter().all(|p| p.masker_id == "m0"));
        let empty = MaskerBank::new(vec![], params).unwrap();
        assert!(matches!(
            score_candidates(&soundscape, &empty, 5, GainDistribution::default(), &mut ChaCha8Rng::seed_from_u64(3), &SpectralMatchPredictor),
            Err(InferenceError::EmptyBank)
        ));
    }

    #[test]
    fn bank_rejects_duplicates_and_mismatched_params() {
        let params = SpectralParams { n_mels: 3, ..Default::default() };
        let rec = |id: &str, m: usize| MaskerRecord {
            masker_id: id.into(),
            spectrogram: spec_with(&vec![0.0; m], 1),
            audio_path: PathBuf::new(),
        };
        assert!(MaskerBank::new(vec![rec("a", 3), rec("a", 3)], params).is_err());
        match MaskerBank::new(vec![rec("a", 3), rec("masker_x", 2)], params) {
            Err(BankLoadError::Masker { masker_id, .. }) => assert_eq!(masker_id, "masker_x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn request_identity_is_stable_and_salted() {
        let params = SpectralParams { n_mels: 3, ..Default::default() };
        let bank = Arc::new(MaskerBank::new(vec![], params).unwrap());
        let e = InferenceEngine::new(Arc::clone(&bank), Arc::new(SpectralMatchPredictor), EngineConfig::default());
        let e2 = InferenceEngine::new(bank, Arc::new(SpectralMatchPredictor), EngineConfig { seed: 7, ..Default::default() });
        assert_eq!(e.request_seed("a", "t"), e.request_seed("a", "t"));
        assert_ne!(e.request_seed("a", "t"), e.request_seed("b", "t"));
        assert_ne!(e.request_seed("a", "t"), e2.request_seed("a", "t"));
        assert_eq!(e.request_id("a", "t").len(), 16);
        assert_eq!(e.handle_request(b"{}").unwrap_err().status, 503);
    }
}

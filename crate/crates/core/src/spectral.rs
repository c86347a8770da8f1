//! Log-mel analysis of 2-channel audio.
//!
//! Frames start at sample 0 and only full frames are analysed (no centering,
//! no padding). Each frame is Hann-windowed (periodic), transformed, projected
//! onto a Slaney-scale triangular filterbank with unit-peak filters, floored,
//! log-transformed (natural log) and stored as IEEE 754 binary16.

use std::path::Path;
use std::sync::Arc;

use half::f16;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlannerScalar};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("insufficient audio: need at least {needed} samples, got {got}")]
    InsufficientAudio { needed: usize, got: usize },
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("degenerate filterbank: {0}")]
    DegenerateFilterbank(String),
    #[error("invalid spectral parameters: {0}")]
    InvalidParams(String),
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("non-finite value in spectrogram")]
    NonFinite,
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = SpectralError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    /// Periodic Hann window.
    #[default]
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MelScale {
    /// Linear below 1 kHz, logarithmic above.
    #[default]
    Slaney,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralParams {
    pub frame_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub window: Window,
    pub mel_scale: MelScale,
    pub log_floor: f64,
}

impl Default for SpectralParams {
    fn default() -> Self {
        Self {
            frame_size: 4096,
            hop: 2048,
            n_mels: 64,
            sample_rate: 44_100,
            window: Window::Hann,
            mel_scale: MelScale::Slaney,
            log_floor: 1e-10,
        }
    }
}

impl SpectralParams {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.frame_size {
            return Err(SpectralError::InvalidParams(format!(
                "hop must satisfy 0 < hop <= frame_size (hop={}, frame_size={})",
                self.hop, self.frame_size
            )));
        }
        if self.n_mels == 0 {
            return Err(SpectralError::InvalidParams("n_mels must be >= 1".into()));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(SpectralError::InvalidParams(format!(
                "log_floor must be positive, got {}",
                self.log_floor
            )));
        }
        if self.sample_rate == 0 {
            return Err(SpectralError::InvalidParams("sample_rate must be > 0".into()));
        }
        Ok(())
    }

    /// Number of one-sided STFT bins, `L/2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    /// True when spectrograms produced under `self` and `other` are comparable.
    pub fn compatible_with(&self, other: &SpectralParams) -> bool {
        self.frame_size == other.frame_size
            && self.hop == other.hop
            && self.n_mels == other.n_mels
            && self.sample_rate == other.sample_rate
            && self.window == other.window
            && self.mel_scale == other.mel_scale
    }
}

/// Number of full STFT frames in `n_samples` samples.
pub fn frame_count(n_samples: usize, frame_size: usize, hop: usize) -> Result<usize> {
    if hop == 0 {
        return Err(SpectralError::InvalidParams("hop must be > 0".into()));
    }
    if n_samples < frame_size {
        return Err(SpectralError::InsufficientAudio {
            needed: frame_size,
            got: n_samples,
        });
    }
    Ok((n_samples - frame_size) / hop + 1)
}

/// Multichannel PCM audio with equal-length channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip<S> {
    channels: Vec<Vec<S>>,
    sample_rate: u32,
}

impl<S: Scalar> Clip<S> {
    pub fn new(channels: Vec<Vec<S>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(SpectralError::InvalidClip("sample_rate must be > 0".into()));
        }
        if channels.is_empty() {
            return Err(SpectralError::InvalidClip("clip has no channels".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(SpectralError::InvalidClip(
                "channels have different lengths".into(),
            ));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    /// `n_channels` channels of silence.
    pub fn silence(n_channels: usize, n_samples: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![S::zero(); n_samples]; n_channels], sample_rate)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn duration_secs(&self) -> f64 {
        self.n_samples() as f64 / f64::from(self.sample_rate)
    }

    pub fn channel(&self, index: usize) -> &[S] {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[Vec<S>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<S>> {
        self.channels
    }

    /// Copy of samples `[start, start + len)` on every channel.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_samples() {
            return Err(SpectralError::InsufficientAudio {
                needed: start + len,
                got: self.n_samples(),
            });
        }
        let channels = self
            .channels
            .iter()
            .map(|c| c[start..start + len].to_vec())
            .collect();
        Self::new(channels, self.sample_rate)
    }

    /// The first two channels; sources with more channels (e.g. a
    /// microphone array) contribute channels 0 and 1 only.
    pub fn stereo(&self) -> Result<Self> {
        if self.n_channels() < 2 {
            return Err(SpectralError::ChannelMismatch {
                expected: 2,
                got: self.n_channels(),
            });
        }
        Self::new(self.channels[..2].to_vec(), self.sample_rate)
    }

    pub fn scaled(&self, factor: S) -> Self {
        Self {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|&x| x * factor).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Average of all channels.
    pub fn mono_mix(&self) -> Vec<S> {
        let n = S::from_usize(self.n_channels()).unwrap_or_else(S::one);
        (0..self.n_samples())
            .map(|i| self.channels.iter().fold(S::zero(), |acc, c| acc + c[i]) / n)
            .collect()
    }
}

/// Reads a 16-bit integer or 32-bit float PCM WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Clip<f32>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let n_channels = usize::from(spec.channels);
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>()?,
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(SpectralError::InvalidClip(format!(
                "unsupported WAV sample format {fmt:?}/{bits} bit"
            )))
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_channels); n_channels];
    for frame in interleaved.chunks_exact(n_channels) {
        for (ch, &s) in channels.iter_mut().zip(frame) {
            ch.push(s);
        }
    }
    Clip::new(channels, spec.sample_rate)
}

/// Writes a clip as 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, clip: &Clip<f32>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: clip.n_channels() as u16,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for i in 0..clip.n_samples() {
        for ch in clip.channels() {
            writer.write_sample(ch[i])?;
        }
    }
    writer.finalize()?;
    Ok(())
}

const SLANEY_F_SP: f64 = 200.0 / 3.0;
const SLANEY_MIN_LOG_HZ: f64 = 1000.0;
const SLANEY_MIN_LOG_MEL: f64 = 15.0;

fn slaney_logstep() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < SLANEY_MIN_LOG_HZ {
        hz / SLANEY_F_SP
    } else {
        SLANEY_MIN_LOG_MEL + (hz / SLANEY_MIN_LOG_HZ).ln() / slaney_logstep()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < SLANEY_MIN_LOG_MEL {
        mel * SLANEY_F_SP
    } else {
        SLANEY_MIN_LOG_HZ * ((mel - SLANEY_MIN_LOG_MEL) * slaney_logstep()).exp()
    }
}

/// Triangular mel filterbank, `n_mels × n_bins`, row-major.
#[derive(Debug, Clone)]
pub struct Filterbank<S> {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<S>,
    /// Nonzero column range of each row.
    spans: Vec<(usize, usize)>,
    centers_hz: Vec<f64>,
}

impl<S: Scalar> Filterbank<S> {
    pub fn new(params: &SpectralParams) -> Result<Self> {
        params.validate()?;
        let n_bins = params.n_bins();
        let n_mels = params.n_mels;
        if n_mels > n_bins {
            return Err(SpectralError::DegenerateFilterbank(format!(
                "{n_mels} mel bands exceed {n_bins} STFT bins"
            )));
        }
        let fs = f64::from(params.sample_rate);
        let mel_lo = hz_to_mel(0.0);
        let mel_hi = hz_to_mel(fs / 2.0);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = fs / params.frame_size as f64;

        let mut weights = vec![S::zero(); n_mels * n_bins];
        let mut spans = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            let mut span: Option<(usize, usize)> = None;
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let rising = (f - lo) / (center - lo);
                let falling = (hi - f) / (hi - center);
                let v = rising.min(falling).max(0.0);
                if v > 0.0 {
                    *w = S::from_f64_lossy(v);
                    span = Some(match span {
                        None => (k, k + 1),
                        Some((a, _)) => (a, k + 1),
                    });
                }
            }
            match span {
                Some(s) => spans.push(s),
                None => {
                    return Err(SpectralError::DegenerateFilterbank(format!(
                        "mel band {m} ({lo:.2}-{hi:.2} Hz) covers no STFT bin"
                    )))
                }
            }
        }
        Ok(Self {
            n_mels,
            n_bins,
            weights,
            spans,
            centers_hz: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[S] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Projects a one-sided power spectrum onto the mel bands.
    pub fn apply(&self, power: &[S], out: &mut [S]) {
        debug_assert_eq!(power.len(), self.n_bins);
        for (m, slot) in out.iter_mut().enumerate().take(self.n_mels) {
            let (a, b) = self.spans[m];
            let row = self.row(m);
            *slot = (a..b).fold(S::zero(), |acc, k| acc + row[k] * power[k]);
        }
    }
}

/// Builds the filterbank for `params`.
pub fn mel_filterbank<S: Scalar>(params: &SpectralParams) -> Result<Filterbank<S>> {
    Filterbank::new(params)
}

/// Rounds to binary16 (nearest, ties to even), clamping to the finite range.
pub fn quantize_f16(v: f64) -> f16 {
    f16::from_f64(v.clamp(f64::from(f16::MIN), f64::from(f16::MAX)))
}

/// Time × mel grid of natural-log mel energies stored as binary16.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    n_channels: usize,
    n_frames: usize,
    n_mels: usize,
    /// Layout `[channel][frame][mel]`.
    values: Vec<f16>,
    params: SpectralParams,
}

impl LogMelSpectrogram {
    pub fn from_values(
        n_channels: usize,
        n_frames: usize,
        n_mels: usize,
        values: Vec<f16>,
        params: SpectralParams,
    ) -> Result<Self> {
        if values.len() != n_channels * n_frames * n_mels {
            return Err(SpectralError::InvalidClip(format!(
                "grid of {} values does not match {n_channels}x{n_frames}x{n_mels}",
                values.len()
            )));
        }
        if n_mels != params.n_mels {
            return Err(SpectralError::ParamMismatch(format!(
                "grid has {n_mels} mel bins but params say {}",
                params.n_mels
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::NonFinite);
        }
        Ok(Self {
            n_channels,
            n_frames,
            n_mels,
            values,
            params,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn params(&self) -> &SpectralParams {
        &self.params
    }

    pub fn values(&self) -> &[f16] {
        &self.values
    }

    pub fn get(&self, channel: usize, frame: usize, mel: usize) -> f16 {
        self.values[(channel * self.n_frames + frame) * self.n_mels + mel]
    }

    /// All frames of one channel, `[frame][mel]`.
    pub fn channel(&self, channel: usize) -> &[f16] {
        let len = self.n_frames * self.n_mels;
        &self.values[channel * len..(channel + 1) * len]
    }
}

/// Reusable log-mel analyzer: window, filterbank and FFT plan are built once.
pub struct Analyzer<S: Scalar> {
    params: SpectralParams,
    window: Vec<S>,
    filterbank: Filterbank<S>,
    fft: Arc<dyn Fft<S>>,
}

impl<S: Scalar> std::fmt::Debug for Analyzer<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Analyzer").field("params", &self.params).finish()
    }
}

impl<S: Scalar> Analyzer<S> {
    pub fn new(params: SpectralParams) -> Result<Self> {
        let filterbank = Filterbank::new(&params)?;
        let n = params.frame_size;
        let window = match params.window {
            Window::Hann => (0..n)
                .map(|i| {
                    let phase = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    S::from_f64_lossy(0.5 - 0.5 * phase.cos())
                })
                .collect(),
        };
        // The scalar planner keeps results independent of the host's SIMD level.
        let fft = FftPlannerScalar::new().plan_fft_forward(n);
        Ok(Self {
            params,
            window,
            filterbank,
            fft,
        })
    }

    pub fn params(&self) -> &SpectralParams {
        &self.params
    }

    pub fn filterbank(&self) -> &Filterbank<S> {
        &self.filterbank
    }

    /// Analyses every channel of `clip`.
    pub fn analyze<T: Scalar>(&self, clip: &Clip<T>) -> Result<LogMelSpectrogram> {
        let p = &self.params;
        if clip.sample_rate() != p.sample_rate {
            return Err(SpectralError::ParamMismatch(format!(
                "clip sample rate {} Hz, analyzer expects {} Hz",
                clip.sample_rate(),
                p.sample_rate
            )));
        }
        let n_frames = frame_count(clip.n_samples(), p.frame_size, p.hop)?;
        let n_bins = p.n_bins();
        let floor = p.log_floor;

        let mut values = Vec::with_capacity(clip.n_channels() * n_frames * p.n_mels);
        let mut buf = vec![Complex::new(S::zero(), S::zero()); p.frame_size];
        let mut scratch = vec![Complex::new(S::zero(), S::zero()); self.fft.get_inplace_scratch_len()];
        let mut power = vec![S::zero(); n_bins];
        let mut mel = vec![S::zero(); p.n_mels];

        for ch in clip.channels() {
            for t in 0..n_frames {
                let frame = &ch[t * p.hop..t * p.hop + p.frame_size];
                for ((slot, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                    *slot = Complex::new(S::from_f64_lossy(x.as_f64()) * w, S::zero());
                }
                self.fft.process_with_scratch(&mut buf, &mut scratch);
                for (pw, c) in power.iter_mut().zip(&buf[..n_bins]) {
                    *pw = c.norm_sqr();
                }
                self.filterbank.apply(&power, &mut mel);
                for &e in &mel {
                    let e = e.as_f64();
                    if !e.is_finite() {
                        return Err(SpectralError::NonFinite);
                    }
                    values.push(quantize_f16(e.max(floor).ln()));
                }
            }
        }
        LogMelSpectrogram::from_values(clip.n_channels(), n_frames, p.n_mels, values, *p)
    }

    /// Analyses a clip that must have exactly two channels.
    pub fn analyze_stereo<T: Scalar>(&self, clip: &Clip<T>) -> Result<LogMelSpectrogram> {
        if clip.n_channels() != 2 {
            return Err(SpectralError::ChannelMismatch {
                expected: 2,
                got: clip.n_channels(),
            });
        }
        self.analyze(clip)
    }
}

/// One-shot log-mel analysis of a 2-channel clip at double precision.
pub fn compute_log_mel<T: Scalar>(clip: &Clip<T>, params: &SpectralParams) -> Result<LogMelSpectrogram> {
    Analyzer::<f64>::new(*params)?.analyze_stereo(clip)
}

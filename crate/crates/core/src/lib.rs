//! Adaptive soundscape augmentation pipeline.
//!
//! The crate covers every stage between a microphone-side edge unit and a
//! loudspeaker-side playback unit:
//!
//! * [`spectral`]: 2-channel audio to half-precision log-mel spectrograms.
//! * [`codec`]: lossless RGBA packing of spectrograms, PNG / lossless WebP
//!   raster compression, latin-1 JSON payload framing and egress-rate math.
//! * [`transport`]: a small length-prefixed pub/sub relay over TCP and the
//!   HTTP ingest client with retry and backoff.
//! * [`edge`]: windowing of audio sources and the upstream agent.
//! * [`inference`]: masker bank, log-normal gain sampling, pluggable
//!   pleasantness predictor, top-k selection and the HTTP ingest service.
//! * [`playback`]: switching policy, equal-power crossfades and a
//!   sample-accurate looping renderer.
//! * [`trace`]: JSON-lines prediction traces for record and replay.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the precisions the pipeline uses by default.

pub mod codec;
pub mod edge;
pub mod inference;
pub mod log;
pub mod playback;
pub mod spectral;
pub mod trace;
pub mod transport;

use std::fmt::Debug;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating-point type usable by the DSP and mixing kernels.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + rustfft::FftNum + Debug + Default + Send + Sync + 'static
{
    /// Lossless for `f64`, rounding for `f32`.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// 32-bit float PCM clip, the pipeline's audio interchange type.
pub type AudioClip = spectral::Clip<f32>;

/// Mel filterbank at analysis precision.
pub type MelFilterbank = spectral::Filterbank<f64>;

/// Log-mel analyzer running its STFT in double precision.
pub type LogMelAnalyzer = spectral::Analyzer<f64>;

/// Renderer mixing `f32` masker audio.
pub type Renderer = playback::Renderer<f32>;

pub use codec::{RasterCodec, RgbaRaster, SpectralPayload};
pub use inference::{MaskerBank, PredictionSet, RankedPair};
pub use spectral::{LogMelSpectrogram, SpectralParams};

/// Largest payload accepted by the broker and the ingest endpoint (128 KiB).
pub const MAX_PAYLOAD_BYTES: usize = 131_072;

//! Lossless spectrogram payloads.
//!
//! A 2-channel binary16 spectrogram has 32 bits per time-frequency bin, the
//! same as one 8-bit RGBA pixel. Bin `(t, m)` becomes pixel `(x = t, y = m)`
//! with `R, G` = big-endian bytes of channel 0 and `B, A` = big-endian bytes
//! of channel 1. The raster is compressed with a lossless image codec and
//! shipped inside a JSON object whose `image` field carries one code point
//! per compressed byte; the document is then serialized as latin-1.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{LogMelSpectrogram, SpectralError, SpectralParams};
use crate::MAX_PAYLOAD_BYTES;

pub const PAYLOAD_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("expected 2 spectrogram channels, got {0}")]
    ChannelMismatch(usize),
    #[error("malformed raster: {0}")]
    MalformedRaster(String),
    #[error("unsupported raster codec {0:?}")]
    UnsupportedCodec(String),
    #[error("raster decode failed: {0}")]
    DecodeError(String),
    #[error("raster encode failed: {0}")]
    EncodeError(String),
    #[error("payload of {size} bytes exceeds the {limit}-byte limit")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("payload schema error: {0}")]
    PayloadSchemaError(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

pub type Result<T, E = CodecError> = std::result::Result<T, E>;

/// 8-bit RGBA image, row-major, `width × height × 4` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbaRaster {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RgbaRaster {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 4;
        if pixels.len() != expected {
            return Err(CodecError::MalformedRaster(format!(
                "{} bytes for a {width}x{height} RGBA raster (expected {expected})",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn byte_len(&self) -> usize {
        self.pixels.len()
    }
}

/// Packs a 2-channel spectrogram into an RGBA raster (x = frame, y = mel).
pub fn pack_rgba(spec: &LogMelSpectrogram) -> Result<RgbaRaster> {
    if spec.n_channels() != 2 {
        return Err(CodecError::ChannelMismatch(spec.n_channels()));
    }
    let (w, h) = (spec.n_frames(), spec.n_mels());
    let mut pixels = vec![0u8; w * h * 4];
    for t in 0..w {
        for m in 0..h {
            let i = (m * w + t) * 4;
            pixels[i..i + 2].copy_from_slice(&spec.get(0, t, m).to_be_bytes());
            pixels[i + 2..i + 4].copy_from_slice(&spec.get(1, t, m).to_be_bytes());
        }
    }
    RgbaRaster::new(w as u32, h as u32, pixels)
}

/// Inverse of [`pack_rgba`]. `params` supplies the analysis settings the
/// raster itself does not carry; its `n_mels` must equal the raster height.
pub fn unpack_rgba(raster: &RgbaRaster, params: &SpectralParams) -> Result<LogMelSpectrogram> {
    let (w, h) = (raster.width as usize, raster.height as usize);
    if h != params.n_mels {
        return Err(CodecError::MalformedRaster(format!(
            "raster height {h} does not match n_mels {}",
            params.n_mels
        )));
    }
    let mut values = vec![f16::ZERO; 2 * w * h];
    let (ch0, ch1) = values.split_at_mut(w * h);
    for m in 0..h {
        for t in 0..w {
            let px = &raster.pixels[(m * w + t) * 4..(m * w + t) * 4 + 4];
            ch0[t * h + m] = f16::from_be_bytes([px[0], px[1]]);
            ch1[t * h + m] = f16::from_be_bytes([px[2], px[3]]);
        }
    }
    LogMelSpectrogram::from_values(2, w, h, values, *params).map_err(|e| match e {
        SpectralError::NonFinite => {
            CodecError::MalformedRaster("raster encodes a non-finite binary16 value".into())
        }
        other => other.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum RasterCodec {
    #[default]
    #[serde(rename = "png")]
    Png,
    #[serde(rename = "webp-lossless")]
    WebpLossless,
}

impl RasterCodec {
    pub const ALL: [RasterCodec; 2] = [RasterCodec::Png, RasterCodec::WebpLossless];

    pub fn as_str(self) -> &'static str {
        match self {
            RasterCodec::Png => "png",
            RasterCodec::WebpLossless => "webp-lossless",
        }
    }
}

impl fmt::Display for RasterCodec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RasterCodec {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(RasterCodec::Png),
            "webp-lossless" => Ok(RasterCodec::WebpLossless),
            other => Err(CodecError::UnsupportedCodec(other.to_string())),
        }
    }
}

/// Compresses `raster` into a standalone PNG or lossless WebP file.
pub fn compress_raster(raster: &RgbaRaster, codec: RasterCodec) -> Result<Vec<u8>> {
    if raster.width == 0 || raster.height == 0 {
        return Err(CodecError::MalformedRaster("empty raster".into()));
    }
    let mut out = Vec::new();
    match codec {
        RasterCodec::Png => {
            let mut enc = png::Encoder::new(&mut out, raster.width, raster.height);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_compression(png::Compression::Best);
            enc.set_adaptive_filter(png::AdaptiveFilterType::Adaptive);
            let mut writer = enc
                .write_header()
                .map_err(|e| CodecError::EncodeError(e.to_string()))?;
            writer
                .write_image_data(&raster.pixels)
                .map_err(|e| CodecError::EncodeError(e.to_string()))?;
            writer
                .finish()
                .map_err(|e| CodecError::EncodeError(e.to_string()))?;
        }
        RasterCodec::WebpLossless => {
            let mut config = webp::WebPConfig::new()
                .map_err(|_| CodecError::EncodeError("libwebp config".into()))?;
            config.lossless = 1;
            config.quality = 75.0;
            config.method = 4;
            config.exact = 1;
            let encoded = webp::Encoder::from_rgba(&raster.pixels, raster.width, raster.height)
                .encode_advanced(&config)
                .map_err(|e| CodecError::EncodeError(format!("{e:?}")))?;
            out.extend_from_slice(&encoded);
        }
    }
    Ok(out)
}

/// Same as [`compress_raster`] with the codec given by name.
pub fn compress_raster_named(raster: &RgbaRaster, codec: &str) -> Result<Vec<u8>> {
    compress_raster(raster, codec.parse()?)
}

pub fn decompress_raster(bytes: &[u8], codec: RasterCodec) -> Result<RgbaRaster> {
    let decode_err = |e: &dyn fmt::Display| CodecError::DecodeError(e.to_string());
    match codec {
        RasterCodec::Png => {
            let mut dec = png::Decoder::new(Cursor::new(bytes));
            dec.set_transformations(png::Transformations::IDENTITY);
            let mut reader = dec.read_info().map_err(|e| decode_err(&e))?;
            let mut buf = vec![0u8; reader.output_buffer_size()];
            let info = reader.next_frame(&mut buf).map_err(|e| decode_err(&e))?;
            if info.color_type != png::ColorType::Rgba || info.bit_depth != png::BitDepth::Eight {
                return Err(CodecError::DecodeError(format!(
                    "expected 8-bit RGBA PNG, found {:?}/{:?}",
                    info.color_type, info.bit_depth
                )));
            }
            buf.truncate(info.buffer_size());
            RgbaRaster::new(info.width, info.height, buf)
        }
        RasterCodec::WebpLossless => {
            let mut dec =
                image_webp::WebPDecoder::new(Cursor::new(bytes)).map_err(|e| decode_err(&e))?;
            if dec.is_lossy() {
                return Err(CodecError::DecodeError("WebP stream is lossy".into()));
            }
            let (w, h) = dec.dimensions();
            let size = dec
                .output_buffer_size()
                .ok_or_else(|| CodecError::DecodeError("WebP image too large".into()))?;
            let mut buf = vec![0u8; size];
            dec.read_image(&mut buf).map_err(|e| decode_err(&e))?;
            let pixels = if dec.has_alpha() {
                buf
            } else {
                // Opaque images decode as RGB.
                buf.chunks_exact(3)
                    .flat_map(|p| [p[0], p[1], p[2], 0xFF])
                    .collect()
            };
            RgbaRaster::new(w, h, pixels)
        }
    }
}

pub fn decompress_raster_named(bytes: &[u8], codec: &str) -> Result<RgbaRaster> {
    decompress_raster(bytes, codec.parse()?)
}

/// Upstream wire object: analysis metadata plus the compressed raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectralPayload {
    pub version: String,
    pub device_id: String,
    pub timestamp_utc: String,
    pub sample_rate: u32,
    pub n_channels: usize,
    pub frame_size: usize,
    pub hop: usize,
    pub n_frames: usize,
    pub n_mels: usize,
    pub raster_codec: RasterCodec,
    #[serde(with = "latin1_string")]
    pub image: Vec<u8>,
}

mod latin1_string {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        let text: String = bytes.iter().map(|&b| char::from(b)).collect();
        s.serialize_str(&text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        text.chars()
            .map(|c| u8::try_from(u32::from(c)).map_err(|_| D::Error::custom(format!("code point U+{:04X} in image is not a byte", u32::from(c)))))
            .collect()
    }
}

impl SpectralPayload {
    /// Packs and compresses `spec` into a payload.
    pub fn from_spectrogram(
        spec: &LogMelSpectrogram,
        device_id: impl Into<String>,
        timestamp_utc: impl Into<String>,
        codec: RasterCodec,
    ) -> Result<Self> {
        let raster = pack_rgba(spec)?;
        let p = spec.params();
        Ok(Self {
            version: PAYLOAD_VERSION.to_string(),
            device_id: device_id.into(),
            timestamp_utc: timestamp_utc.into(),
            sample_rate: p.sample_rate,
            n_channels: spec.n_channels(),
            frame_size: p.frame_size,
            hop: p.hop,
            n_frames: spec.n_frames(),
            n_mels: spec.n_mels(),
            raster_codec: codec,
            image: compress_raster(&raster, codec)?,
        })
    }

    /// Analysis parameters implied by the metadata; unlisted settings take
    /// their defaults.
    pub fn params(&self) -> SpectralParams {
        SpectralParams {
            frame_size: self.frame_size,
            hop: self.hop,
            n_mels: self.n_mels,
            sample_rate: self.sample_rate,
            ..SpectralParams::default()
        }
    }

    /// Decompresses and unpacks the carried spectrogram.
    pub fn to_spectrogram(&self) -> Result<LogMelSpectrogram> {
        let raster = decompress_raster(&self.image, self.raster_codec)?;
        if raster.width() as usize != self.n_frames || raster.height() as usize != self.n_mels {
            return Err(CodecError::PayloadSchemaError(format!(
                "raster is {}x{} but metadata says {}x{}",
                raster.width(),
                raster.height(),
                self.n_frames,
                self.n_mels
            )));
        }
        unpack_rgba(&raster, &self.params())
    }

    fn validate(&self) -> Result<()> {
        if self.version != PAYLOAD_VERSION {
            return Err(CodecError::PayloadSchemaError(format!(
                "unsupported payload version {:?}",
                self.version
            )));
        }
        if self.n_channels != 2 {
            return Err(CodecError::PayloadSchemaError(format!(
                "n_channels must be 2, got {}",
                self.n_channels
            )));
        }
        Ok(())
    }
}

/// Serializes a payload to latin-1 JSON, rejecting results over 128 KiB.
pub fn encode_payload(payload: &SpectralPayload) -> Result<Vec<u8>> {
    encode_payload_with_limit(payload, Some(MAX_PAYLOAD_BYTES))
}

pub fn encode_payload_with_limit(payload: &SpectralPayload, limit: Option<usize>) -> Result<Vec<u8>> {
    payload.validate()?;
    let json = serde_json::to_string(payload)
        .map_err(|e| CodecError::PayloadSchemaError(e.to_string()))?;
    let bytes = json
        .chars()
        .map(|c| {
            u8::try_from(u32::from(c)).map_err(|_| {
                CodecError::PayloadSchemaError(format!(
                    "character {c:?} is not representable in latin-1"
                ))
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    check_size(bytes.len(), limit)?;
    Ok(bytes)
}

pub fn decode_payload(bytes: &[u8]) -> Result<SpectralPayload> {
    decode_payload_with_limit(bytes, Some(MAX_PAYLOAD_BYTES))
}

pub fn decode_payload_with_limit(bytes: &[u8], limit: Option<usize>) -> Result<SpectralPayload> {
    check_size(bytes.len(), limit)?;
    let text: String = bytes.iter().map(|&b| char::from(b)).collect();
    let payload: SpectralPayload = serde_json::from_str(&text)
        .map_err(|e| CodecError::PayloadSchemaError(e.to_string()))?;
    payload.validate()?;
    Ok(payload)
}

fn check_size(size: usize, limit: Option<usize>) -> Result<()> {
    match limit {
        Some(limit) if size > limit => Err(CodecError::PayloadTooLarge { size, limit }),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Raw,
    LinearSpec,
    MelSpec,
}

impl Representation {
    pub fn label(self) -> &'static str {
        match self {
            Representation::Raw => "raw",
            Representation::LinearSpec => "linear_spec",
            Representation::MelSpec => "mel_spec",
        }
    }
}

impl FromStr for Representation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "raw" => Ok(Representation::Raw),
            "linear_spec" | "linear" => Ok(Representation::LinearSpec),
            "mel_spec" | "mel" => Ok(Representation::MelSpec),
            other => Err(format!("unknown representation {other:?}")),
        }
    }
}

/// One row of the uncompressed egress-rate table (1 kB = 1024 B).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EgressRow {
    pub representation: Representation,
    pub bit_depth: u32,
    /// Values per second, in kHz, rounded half-up to 2 decimals.
    pub value_rate_khz: f64,
    /// kB/s rounded half-up to 2 decimals.
    pub byte_rate_kbps: f64,
    /// kB per 30 s, from the unrounded byte rate.
    pub kb_per_30s: u64,
}

impl fmt::Display for EgressRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<12} {:>3} {:>8.2} {:>8.2} {:>6}",
            self.representation.label(),
            self.bit_depth,
            self.value_rate_khz,
            self.byte_rate_kbps,
            self.kb_per_30s
        )
    }
}

fn round2_half_up(x: f64) -> f64 {
    (x * 100.0 + 0.5).floor() / 100.0
}

/// Sustained uncompressed egress for a representation.
pub fn egress_rate(
    representation: Representation,
    bit_depth: u32,
    params: &SpectralParams,
    n_channels: usize,
) -> EgressRow {
    let fs = f64::from(params.sample_rate);
    let c = n_channels as f64;
    let frames_per_sec = fs / params.hop as f64;
    let value_rate = match representation {
        Representation::Raw => fs * c,
        Representation::LinearSpec => params.n_bins() as f64 * c * frames_per_sec,
        Representation::MelSpec => params.n_mels as f64 * c * frames_per_sec,
    };
    let byte_rate = value_rate * f64::from(bit_depth) / 8.0 / 1024.0;
    EgressRow {
        representation,
        bit_depth,
        value_rate_khz: round2_half_up(value_rate / 1000.0),
        byte_rate_kbps: round2_half_up(byte_rate),
        kb_per_30s: (byte_rate * 30.0).round() as u64,
    }
}

/// The five printed rows: raw/16, linear/32, linear/16, mel/32, mel/16.
pub fn egress_table(params: &SpectralParams, n_channels: usize) -> Vec<EgressRow> {
    [
        (Representation::Raw, 16),
        (Representation::LinearSpec, 32),
        (Representation::LinearSpec, 16),
        (Representation::MelSpec, 32),
        (Representation::MelSpec, 16),
    ]
    .into_iter()
    .map(|(r, b)| egress_rate(r, b, params, n_channels))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec_from_bits(frames: usize, mels: usize, bits: &[u16]) -> LogMelSpectrogram {
        let params = SpectralParams { n_mels: mels, ..Default::default() };
        let values = bits.iter().map(|&b| f16::from_bits(b)).collect();
        LogMelSpectrogram::from_values(2, frames, mels, values, params).unwrap()
    }

    fn finite_bits() -> impl Strategy<Value = u16> {
        any::<u16>().prop_filter("finite", |b| f16::from_bits(*b).is_finite())
    }

    #[test]
    fn zero_spectrogram_packs_to_zero_bytes() {
        let spec = spec_from_bits(5, 64, &vec![0; 2 * 5 * 64]);
        let r = pack_rgba(&spec).unwrap();
        assert!(r.pixels().iter().all(|&b| b == 0));
        assert_eq!(unpack_rgba(&r, spec.params()).unwrap(), spec);
    }

    #[test]
    fn one_in_channel_zero() {
        let mut bits = vec![0u16; 2 * 64];
        bits[0] = f16::ONE.to_bits();
        let spec = spec_from_bits(1, 64, &bits);
        let r = pack_rgba(&spec).unwrap();
        assert_eq!(&r.pixels()[..4], &[0x3C, 0x00, 0x00, 0x00]);
    }

    #[test]
    fn pixel_layout_is_time_by_mel() {
        // frames=3, mels=2: pixel (x=t, y=m) at byte offset (m*3+t)*4
        let mut bits = vec![0u16; 2 * 3 * 2];
        bits[2 * 2 + 1] = 0x1234; // ch0, t=2, m=1
        bits[3 * 2 + 1] = 0xABCD; // ch1, t=0, m=1
        let spec = spec_from_bits(3, 2, &bits);
        let r = pack_rgba(&spec).unwrap();
        assert_eq!((r.width(), r.height()), (3, 2));
        assert_eq!(&r.pixels()[(3 + 2) * 4..(3 + 2) * 4 + 2], &[0x12, 0x34]);
        assert_eq!(&r.pixels()[3 * 4 + 2..3 * 4 + 4], &[0xAB, 0xCD]);
    }

    #[test]
    fn full_size_raster() {
        let spec = spec_from_bits(644, 64, &vec![0; 2 * 644 * 64]);
        let r = pack_rgba(&spec).unwrap();
        assert_eq!((r.width(), r.height(), r.byte_len()), (644, 64, 164_864));
    }

    #[test]
    fn mono_spectrogram_is_rejected() {
        let params = SpectralParams { n_mels: 4, ..Default::default() };
        let s = LogMelSpectrogram::from_values(1, 2, 4, vec![f16::ZERO; 8], params).unwrap();
        assert!(matches!(pack_rgba(&s), Err(CodecError::ChannelMismatch(1))));
    }

    #[test]
    fn malformed_raster() {
        assert!(RgbaRaster::new(2, 2, vec![0; 15]).is_err());
        let r = RgbaRaster::new(2, 3, vec![0; 24]).unwrap();
        assert!(unpack_rgba(&r, &SpectralParams::default()).is_err());
        // NaN bit pattern in a pixel.
        let params = SpectralParams { n_mels: 1, ..Default::default() };
        let r = RgbaRaster::new(1, 1, vec![0x7E, 0x00, 0, 0]).unwrap();
        assert!(matches!(unpack_rgba(&r, &params), Err(CodecError::MalformedRaster(_))));
    }

    #[test]
    fn constant_raster_compresses() {
        let r = RgbaRaster::new(644, 64, [0xCB, 0x3A, 0xCB, 0x3A].repeat(644 * 64)).unwrap();
        for codec in RasterCodec::ALL {
            let bytes = compress_raster(&r, codec).unwrap();
            assert!(bytes.len() < r.byte_len(), "{codec}: {}", bytes.len());
            assert_eq!(decompress_raster(&bytes, codec).unwrap(), r);
        }
    }

    #[test]
    fn compressed_bytes_are_standard_files() {
        let r = RgbaRaster::new(4, 4, (0..64).collect()).unwrap();
        let png = compress_raster(&r, RasterCodec::Png).unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
        let webp = compress_raster(&r, RasterCodec::WebpLossless).unwrap();
        assert_eq!(&webp[..4], b"RIFF");
        assert_eq!(&webp[8..16], b"WEBPVP8L");
    }

    #[test]
    fn transparent_pixels_keep_their_colour() {
        // Alpha = 0 with nonzero RGB must survive (no premultiplication).
        let r = RgbaRaster::new(3, 1, vec![0xFF, 0x10, 0x20, 0x00, 0x01, 0x02, 0x03, 0x00, 0xAA, 0xBB, 0xCC, 0x00]).unwrap();
        for codec in RasterCodec::ALL {
            let bytes = compress_raster(&r, codec).unwrap();
            assert_eq!(decompress_raster(&bytes, codec).unwrap(), r, "{codec}");
        }
    }

    #[test]
    fn corrupt_and_unknown_codec() {
        let r = RgbaRaster::new(8, 8, vec![7; 256]).unwrap();
        for codec in RasterCodec::ALL {
            let mut bytes = compress_raster(&r, codec).unwrap();
            bytes.truncate(bytes.len() / 2);
            assert!(matches!(decompress_raster(&bytes, codec), Err(CodecError::DecodeError(_))));
        }
        assert!(matches!(compress_raster_named(&r, "jpeg"), Err(CodecError::UnsupportedCodec(_))));
        assert!(matches!(decompress_raster_named(&[], "gif"), Err(CodecError::UnsupportedCodec(_))));
    }

    fn payload_with_image(image: Vec<u8>) -> SpectralPayload {
        SpectralPayload {
            version: "1".into(),
            device_id: "edge-01".into(),
            timestamp_utc: "2022-06-01T00:00:00Z".into(),
            sample_rate: 44_100,
            n_channels: 2,
            frame_size: 4096,
            hop: 2048,
            n_frames: 644,
            n_mels: 64,
            raster_codec: RasterCodec::Png,
            image,
        }
    }

    #[test]
    fn every_byte_value_survives_latin1() {
        let p = payload_with_image((0..=255u8).collect());
        let wire = encode_payload(&p).unwrap();
        let back = decode_payload(&wire).unwrap();
        assert_eq!(back.image, (0..=255u8).collect::<Vec<_>>());
        assert_eq!(back, p);
    }

    #[test]
    fn empty_image_roundtrips() {
        let p = payload_with_image(vec![]);
        let back = decode_payload(&encode_payload(&p).unwrap()).unwrap();
        assert!(back.image.is_empty());
    }

    #[test]
    fn size_limit_is_inclusive() {
        let base = encode_payload(&payload_with_image(vec![])).unwrap().len();
        let at_limit = payload_with_image(vec![b'A'; MAX_PAYLOAD_BYTES - base]);
        assert_eq!(encode_payload(&at_limit).unwrap().len(), MAX_PAYLOAD_BYTES);
        let over = payload_with_image(vec![b'A'; MAX_PAYLOAD_BYTES + 1 - base]);
        assert_eq!(encode_payload_with_limit(&over, None).unwrap().len(), 131_073);
        assert!(matches!(
            encode_payload(&over),
            Err(CodecError::PayloadTooLarge { size: 131_073, limit: 131_072 })
        ));
        let wire = encode_payload_with_limit(&over, None).unwrap();
        assert!(matches!(decode_payload(&wire), Err(CodecError::PayloadTooLarge { .. })));
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(decode_payload(b"{not json"), Err(CodecError::PayloadSchemaError(_))));
        assert!(matches!(decode_payload(b"{\"version\":\"1\"}"), Err(CodecError::PayloadSchemaError(_))));
        let mut p = payload_with_image(vec![1, 2]);
        p.version = "2".into();
        assert!(matches!(encode_payload(&p), Err(CodecError::PayloadSchemaError(_))));
        let mut p = payload_with_image(vec![1, 2]);
        p.device_id = "edge-\u{4e2d}".into();
        assert!(matches!(encode_payload(&p), Err(CodecError::PayloadSchemaError(_))));
        // A code point above U+00FF inside the image string.
        let wire = String::from_utf8(encode_payload(&payload_with_image(vec![b'x'])).unwrap()).unwrap();
        let tampered = wire.replace("\"image\":\"x\"", "\"image\":\"\\u0100\"");
        assert!(matches!(decode_payload(tampered.as_bytes()), Err(CodecError::PayloadSchemaError(_))));
        let tampered = wire.replace("\"png\"", "\"bmp\"");
        assert!(matches!(decode_payload(tampered.as_bytes()), Err(CodecError::PayloadSchemaError(_))));
    }

    #[test]
    fn table_rows() {
        let rows = egress_table(&SpectralParams::default(), 2);
        let printed: Vec<(String, String, u64)> = rows
            .iter()
            .map(|r| (format!("{:.2}", r.value_rate_khz), format!("{:.2}", r.byte_rate_kbps), r.kb_per_30s))
            .collect();
        let expected = [
            ("88.20", "172.27", 5168),
            ("88.24", "344.70", 10341),
            ("88.24", "172.35", 5170),
            ("2.76", "10.77", 323),
            ("2.76", "5.38", 161),
        ];
        for (got, want) in printed.iter().zip(expected) {
            assert_eq!((got.0.as_str(), got.1.as_str(), got.2), want);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pack_unpack_is_identity(frames in 1usize..40, mels in 1usize..24, seed in any::<u64>()) {
            let n = 2 * frames * mels;
            let bits: Vec<u16> = (0..n as u64)
                .map(|i| {
                    let b = (seed.wrapping_mul(6364136223846793005).wrapping_add(i.wrapping_mul(1442695040888963407)) >> 17) as u16;
                    if f16::from_bits(b).is_finite() { b } else { b & 0x83FF }
                })
                .collect();
            let spec = spec_from_bits(frames, mels, &bits);
            let back = unpack_rgba(&pack_rgba(&spec).unwrap(), spec.params()).unwrap();
            prop_assert_eq!(back, spec);
        }

        #[test]
        fn raster_codecs_are_lossless(w in 1u32..48, h in 1u32..24, bits in proptest::collection::vec(finite_bits(), 2 * 48 * 24)) {
            let pixels: Vec<u8> = bits.iter().flat_map(|b| b.to_be_bytes()).take((w * h * 4) as usize).collect();
            let r = RgbaRaster::new(w, h, pixels).unwrap();
            for codec in RasterCodec::ALL {
                let bytes = compress_raster(&r, codec).unwrap();
                prop_assert!(bytes.len() <= r.byte_len() + 1024);
                prop_assert_eq!(&decompress_raster(&bytes, codec).unwrap(), &r);
            }
        }
    }
}

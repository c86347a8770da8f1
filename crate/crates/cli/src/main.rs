use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use soundscape_cli::{bench, demo, fixtures, monitor};
use soundscape_core::codec::{self, egress_table, RasterCodec, SpectralPayload};
use soundscape_core::edge::{format_timestamp, run_edge, EdgeConfig};
use soundscape_core::inference::{write_masker_bank, EngineConfig, InferenceService, RelaySink, SpectralMatchPredictor};
use soundscape_core::log::EventLog;
use soundscape_core::playback::{render_trace, run_live, LiveConfig, MaskerStore, SinkSpec, SwitchPolicy};
use soundscape_core::spectral::{read_wav, Clip};
use soundscape_core::trace::load_trace;
use soundscape_core::transport::{Backoff, Relay, RelayConfig, TopicName, DEFAULT_MAX_FRAME};
use soundscape_core::{LogMelAnalyzer, Renderer, SpectralParams};

#[derive(Parser)]
#[command(name = "soundaug", version, about = "Adaptive soundscape augmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Payload encoding, decoding and egress-rate table.
    #[command(subcommand)]
    Codec(CodecCmd),
    /// Run the pub/sub relay.
    Relay {
        #[arg(long, default_value = "127.0.0.1:7070")]
        bind: String,
        #[arg(long, default_value_t = DEFAULT_MAX_FRAME)]
        max_frame: usize,
        #[arg(long, default_value_t = 30.0)]
        keepalive_seconds: f64,
    },
    /// Edge acquisition agent.
    #[command(subcommand)]
    Edge(EdgeCmd),
    /// Inference service and masker bank tools.
    #[command(subcommand)]
    Infer(InferCmd),
    /// Playback unit.
    #[command(subcommand)]
    Playback(PlaybackCmd),
    /// Print prediction tables from the relay or a recorded trace.
    Monitor {
        #[arg(long, required_unless_present = "replay")]
        relay: Option<SocketAddr>,
        #[arg(long, default_value = "site0/playback/predictions")]
        topic: String,
        #[arg(long, default_value_t = 60.0)]
        heartbeat_seconds: f64,
        /// Replay a trace file instead of subscribing.
        #[arg(long, conflicts_with = "relay")]
        replay: Option<PathBuf>,
    },
    /// Per-stage latency and payload-size report.
    Bench {
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 200)]
        bank_size: usize,
        #[arg(long, default_value = "png")]
        codec: RasterCodec,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also write the raw report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run relay, service, edge and playback locally end to end.
    Demo {
        /// Scenario file (TOML); defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "demo-out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Pace the edge agent in real time.
        #[arg(long)]
        realtime: bool,
    },
}

#[derive(Subcommand)]
enum CodecCmd {
    /// Encode the first window of a WAV file into a payload.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "edge-01")]
        device_id: String,
        #[arg(long)]
        timestamp: Option<String>,
        #[arg(long, default_value = "png")]
        codec: RasterCodec,
        #[arg(long, default_value_t = 30.0)]
        window_seconds: f64,
    },
    /// Decode a payload and describe it; optionally dump the raster file.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        raster_out: Option<PathBuf>,
    },
    /// Uncompressed egress rates for the analysis parameters.
    RateTable {
        #[arg(long, default_value_t = 2)]
        channels: usize,
    },
}

#[derive(Subcommand)]
enum EdgeCmd {
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum InferCmd {
    Serve {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        relay: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "site0")]
        site: String,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Write a deterministic synthetic masker bank.
    BuildBank {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct PlaybackCommon {
    /// Masker bank directory (manifest + WAV files).
    #[arg(long)]
    maskers: PathBuf,
    /// `null` or a WAV path.
    #[arg(long, default_value = "null")]
    out: SinkSpec,
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PlaybackCmd {
    Run {
        #[arg(long)]
        relay: SocketAddr,
        #[arg(long, default_value = "site0/playback/predictions")]
        topic: String,
        #[command(flatten)]
        common: PlaybackCommon,
        /// Stop after this many seconds of audio.
        #[arg(long)]
        duration: Option<f64>,
        /// Render as fast as possible instead of in real time.
        #[arg(long)]
        unpaced: bool,
    },
    /// Render a recorded trace offline.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        common: PlaybackCommon,
        #[arg(long)]
        duration: f64,
    },
}

type CmdResult = Result<(), Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log = EventLog::stderr();
    if let Command::Demo { config, out, seed, duration, bank, realtime } = cli.command {
        return run_demo(config, out, seed, duration, bank, realtime, &log);
    }
    match dispatch(cli.command, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_demo(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    duration: Option<f64>,
    bank: Option<PathBuf>,
    realtime: bool,
    log: &EventLog,
) -> ExitCode {
    let scenario = config.map(demo::DemoScenario::load).transpose().map(|s| {
        let mut s = s.unwrap_or_default();
        if let Some(seed) = seed {
            s.seed = seed;
        }
        if let Some(d) = duration {
            s.duration_seconds = d;
        }
        if bank.is_some() {
            s.bank = bank;
        }
        s.realtime |= realtime;
        s
    });
    match scenario.and_then(|s| demo::run_demo(&s, &out, log)) {
        Ok(r) => {
            println!("windows:     {}", r.windows);
            println!("payloads:    {} in {}", r.payloads, r.payload_dir.display());
            println!("predictions: {} in {}", r.predictions, r.trace_path.display());
            println!("render:      {} samples in {}", r.rendered_samples, r.wav_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command, log: &EventLog) -> CmdResult {
    match command {
        Command::Codec(cmd) => codec_cmd(cmd),
        Command::Relay { bind, max_frame, keepalive_seconds } => {
            let config = RelayConfig { max_frame, keepalive: Duration::from_secs_f64(keepalive_seconds), ..Default::default() };
            let relay = Relay::bind(bind.as_str(), config, log.clone())?;
            println!("relay listening on {}", relay.local_addr());
            relay.wait();
            Ok(())
        }
        Command::Edge(EdgeCmd::Run { config }) => {
            let cfg = EdgeConfig::load(config)?;
            let summary = run_edge(&cfg, log)?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(())
        }
        Command::Infer(InferCmd::Serve { bank, relay, bind, seed, site, workers }) => {
            let topic = TopicName::predictions(&site)?;
            let sink = Arc::new(RelaySink::new(relay, topic, Backoff::default()));
            let service = InferenceService::start(bind.as_str(), workers, sink, log.clone())?;
            println!("inference service on http://{}", service.local_addr());
            let config = EngineConfig { seed, site, ..Default::default() };
            service.warm_from_dir(&bank, &SpectralParams::default(), Arc::new(SpectralMatchPredictor), config)?;
            service.wait();
            Ok(())
        }
        Command::Infer(InferCmd::BuildBank { out, count, seconds, seed }) => {
            let params = SpectralParams::default();
            let maskers = fixtures::synthetic_maskers(count, seconds, seed, params.sample_rate);
            write_masker_bank(&out, &maskers, &params)?;
            println!("wrote {count} maskers to {}", out.display());
            Ok(())
        }
        Command::Playback(cmd) => playback_cmd(cmd, log),
        Command::Monitor { relay, topic, heartbeat_seconds, replay } => {
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            if let Some(path) = replay {
                monitor::replay_monitor(&load_trace(path)?, &mut out)?;
                return Ok(());
            }
            let relay = relay.ok_or("--relay is required")?;
            let stop = AtomicBool::new(false);
            monitor::run_monitor(relay, TopicName::new(topic)?, Duration::from_secs_f64(heartbeat_seconds), &mut out, &stop)?;
            Ok(())
        }
        Command::Bench { runs, bank_size, codec, seed, json } => {
            if runs == 0 {
                return Err("--runs must be >= 1".into());
            }
            let report = bench::run_bench(&bench::BenchConfig { runs, bank_size, codec, seed, ..Default::default() })?;
            print!("{}", report.render());
            match report.check_consistency() {
                Ok(()) => println!("\nconsistency: ok"),
                Err(e) => println!("\nconsistency: {e}"),
            }
            if let Some(path) = json {
                std::fs::write(path, serde_json::to_vec_pretty(&report)?)?;
            }
            Ok(())
        }
        Command::Demo { .. } => unreachable!("handled in main"),
    }
}

fn codec_cmd(cmd: CodecCmd) -> CmdResult {
    match cmd {
        CodecCmd::Encode { input, output, device_id, timestamp, codec, window_seconds } => {
            let params = SpectralParams::default();
            let clip = read_wav(&input)?;
            // Mono files are duplicated onto both channels.
            let clip = match clip.n_channels() {
                1 => Clip::new(vec![clip.channel(0).to_vec(); 2], clip.sample_rate())?,
                _ => clip.stereo()?,
            };
            let n = ((window_seconds * f64::from(clip.sample_rate())).round() as usize).min(clip.n_samples());
            let spec = LogMelAnalyzer::new(params)?.analyze_stereo(&clip.slice(0, n)?)?;
            let ts = timestamp.unwrap_or_else(|| format_timestamp(chrono::Utc::now()));
            let payload = SpectralPayload::from_spectrogram(&spec, device_id, ts, codec)?;
            let bytes = codec::encode_payload(&payload)?;
            std::fs::write(&output, &bytes)?;
            println!("{} bytes ({} frames x {} mels, {} raster {} bytes)", bytes.len(), spec.n_frames(), spec.n_mels(), codec, payload.image.len());
            Ok(())
        }
        CodecCmd::Decode { input, raster_out } => {
            let payload = codec::decode_payload(&std::fs::read(input)?)?;
            let spec = payload.to_spectrogram()?;
            let (lo, hi) = spec
                .values()
                .iter()
                .map(|v| v.to_f64())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            println!(
                "{}",
                json!({
                    "device_id": payload.device_id,
                    "timestamp_utc": payload.timestamp_utc,
                    "raster_codec": payload.raster_codec,
                    "image_bytes": payload.image.len(),
                    "shape": [spec.n_channels(), spec.n_frames(), spec.n_mels()],
                    "min": lo,
                    "max": hi,
                })
            );
            if let Some(path) = raster_out {
                std::fs::write(path, &payload.image)?;
            }
            Ok(())
        }
        CodecCmd::RateTable { channels } => {
            println!("{:<12} {:>3} {:>8} {:>8} {:>6}", "repr", "bit", "kHz", "kB/s", "kB/30s");
            for row in egress_table(&SpectralParams::default(), channels) {
                println!("{row}");
            }
            Ok(())
        }
    }
}

fn playback_cmd(cmd: PlaybackCmd, log: &EventLog) -> CmdResult {
    let (common, fs) = match &cmd {
        PlaybackCmd::Run { common, .. } | PlaybackCmd::Replay { common, .. } => (common, SpectralParams::default().sample_rate),
    };
    let policy = common.policy.as_ref().map(SwitchPolicy::load).transpose()?.unwrap_or_default();
    let store = Arc::new(MaskerStore::<f32>::load_bank_dir(&common.maskers, fs)?);
    let mut renderer = Renderer::new(store, policy)?.with_log(log.clone());
    let mut sink = common.out.open(fs)?;
    match cmd {
        PlaybackCmd::Run { relay, topic, duration, unpaced, .. } => {
            let config = LiveConfig {
                relay,
                topic: TopicName::new(topic)?,
                block_seconds: 0.1,
                realtime: !unpaced,
                duration_seconds: duration,
                backoff: Backoff::default(),
            };
            let stop = AtomicBool::new(false);
            let summary = run_live(&mut renderer, sink.as_mut(), &config, &stop, log)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        PlaybackCmd::Replay { trace, duration, .. } => {
            let trace = load_trace(trace)?;
            let audio = render_trace(&mut renderer, &trace, (duration * f64::from(fs)).round() as usize);
            sink.write(&audio)?;
            sink.finish()?;
            let mut out = std::io::stdout();
            writeln!(out, "rendered {} samples from {} predictions", audio.len(), trace.len())?;
        }
    }
    Ok(())
}

//! Text monitor for the predictions topic.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::Write;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use soundscape_core::trace::TraceRecord;
use soundscape_core::transport::{Backoff, ResilientSubscriber, TopicName};
use soundscape_core::PredictionSet;

/// One table per prediction set, best pair first.
pub fn format_table(set: &PredictionSet) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "prediction {} device={} at={}", set.request_id, set.device_id, set.timestamp_utc);
    let _ = writeln!(s, "{:>4}  {:<24} {:>10} {:>9} {:>10} {:>8}", "rank", "masker_id", "gain", "gain_db", "mean", "log_std");
    for (i, p) in set.ranked.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:>4}  {:<24} {:>10.5} {:>9.2} {:>10.4} {:>8.3}",
            i + 1,
            p.masker_id,
            p.gain,
            20.0 * p.gain.log10(),
            p.mean,
            p.log_std
        );
    }
    s
}

/// Rolling end-to-end latency over the most recent predictions.
#[derive(Debug, Clone)]
pub struct LatencyWindow {
    samples: VecDeque<f64>,
    capacity: usize,
}

impl LatencyWindow {
    pub fn new(capacity: usize) -> Self {
        Self { samples: VecDeque::with_capacity(capacity), capacity: capacity.max(1) }
    }

    pub fn push(&mut self, seconds: f64) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(seconds);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.samples.is_empty()).then(|| self.samples.iter().sum::<f64>() / self.samples.len() as f64)
    }

    pub fn max(&self) -> Option<f64> {
        self.samples.iter().copied().reduce(f64::max)
    }
}

/// Stateful formatter; produces the lines the monitor prints.
pub struct Monitor {
    latency: LatencyWindow,
    heartbeat: Duration,
    last_activity: Instant,
    received: usize,
}

impl Monitor {
    pub fn new(heartbeat: Duration) -> Self {
        Self { latency: LatencyWindow::new(32), heartbeat, last_activity: Instant::now(), received: 0 }
    }

    pub fn received(&self) -> usize {
        self.received
    }

    /// Lines for one message body received at `now`.
    pub fn on_message(&mut self, body: &[u8], now: DateTime<Utc>) -> String {
        self.last_activity = Instant::now();
        let set = match PredictionSet::from_json(body) {
            Ok(s) => s,
            Err(e) => return format!("warning: malformed prediction ({} bytes): {e}\n", body.len()),
        };
        self.received += 1;
        let mut out = format_table(&set);
        if let Ok(t) = DateTime::parse_from_rfc3339(&set.timestamp_utc) {
            let secs = (now - t.with_timezone(&Utc)).num_milliseconds() as f64 / 1e3;
            self.latency.push(secs);
            let _ = writeln!(
                out,
                "latency: last {secs:.3} s, mean {:.3} s, max {:.3} s over {}",
                self.latency.mean().unwrap_or(0.0),
                self.latency.max().unwrap_or(0.0),
                self.latency.len()
            );
        }
        out
    }

    /// Heartbeat line once `heartbeat` has passed without traffic.
    pub fn on_idle(&mut self) -> Option<String> {
        let idle = self.last_activity.elapsed();
        if idle < self.heartbeat {
            return None;
        }
        self.last_activity = Instant::now();
        Some(format!("heartbeat: no predictions for {:.0} s ({} received so far)\n", idle.as_secs_f64(), self.received))
    }
}

/// Streams tables for every prediction until `stop` is set.
pub fn run_monitor(
    relay: SocketAddr,
    topic: TopicName,
    heartbeat: Duration,
    out: &mut dyn Write,
    stop: &AtomicBool,
) -> std::io::Result<usize> {
    let mut sub = ResilientSubscriber::new(relay, vec![topic.clone()], Backoff { attempts: 5, base: Duration::from_millis(500) });
    let mut monitor = Monitor::new(heartbeat);
    writeln!(out, "monitoring {topic} on {relay}", topic = topic.as_str())?;
    let mut was_connected = true;
    while !stop.load(Ordering::Relaxed) {
        match sub.recv_timeout(Duration::from_millis(200)) {
            Ok(Some(msg)) => {
                if !was_connected {
                    writeln!(out, "status: reconnected to {relay}")?;
                    was_connected = true;
                }
                out.write_all(monitor.on_message(&msg.body, Utc::now()).as_bytes())?;
            }
            Ok(None) => {
                if let Some(line) = monitor.on_idle() {
                    out.write_all(line.as_bytes())?;
                }
            }
            Err(e) => {
                if was_connected {
                    writeln!(out, "status: relay unavailable ({e}), retrying")?;
                    was_connected = false;
                }
                std::thread::sleep(Duration::from_millis(200));
            }
        }
        out.flush()?;
    }
    Ok(monitor.received())
}

/// Prints a recorded trace as the live monitor would have.
pub fn replay_monitor(trace: &[TraceRecord], out: &mut dyn Write) -> std::io::Result<()> {
    for rec in trace {
        writeln!(out, "t+{:.3} s", rec.offset_seconds)?;
        out.write_all(format_table(&rec.prediction).as_bytes())?;
    }
    Ok(())
}

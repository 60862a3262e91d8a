//! Two-way protocol timing and synthetic time-tag generation.
//!
//! A pass starts at a protocol period boundary. Pulses leave the ground every
//! `pulse_period` while the transmit shutter is open; a pulse counts as a
//! potential signal photon only when its expected return falls inside the
//! receive window of the protocol period.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link_budget::{detection_probability, receiver_transmittance};
use crate::scenario::Scenario;
use crate::units::{fwhm_to_sigma, PS_PER_MS, PS_PER_NS, PS_PER_S, SPEED_OF_LIGHT};

/// Shutter and pulse timing of the communication protocol, integer picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleMs", into = "ScheduleMs")]
pub struct ProtocolSchedule {
    pub period_ps: i64,
    /// Transmit shutter open `[start, end)`, relative to the period start.
    pub tx_window_ps: (i64, i64),
    pub slr_fire_ps: i64,
    /// Receive shutter open `[start, end)`.
    pub rx_window_ps: (i64, i64),
    pub pulse_period_ps: i64,
    /// Duty cycle used to convert window counts to rates.
    pub duty_cycle: f64,
}

impl Default for ProtocolSchedule {
    /// 200 ms period, transmit 0-100 ms, SLR shot at 100 ms, receive 105-180 ms,
    /// 100 MHz pulses, duty cycle 0.3.
    fn default() -> Self {
        ProtocolSchedule {
            period_ps: 200 * PS_PER_MS,
            tx_window_ps: (0, 100 * PS_PER_MS),
            slr_fire_ps: 100 * PS_PER_MS,
            rx_window_ps: (105 * PS_PER_MS, 180 * PS_PER_MS),
            pulse_period_ps: 10 * PS_PER_NS,
            duty_cycle: 0.3,
        }
    }
}

impl ProtocolSchedule {
    pub fn validate(&self) -> Result<()> {
        let within = |(a, b): (i64, i64)| 0 <= a && a < b && b <= self.period_ps;
        if self.period_ps <= 0 {
            return Err(Error::domain("protocol period_ms must be > 0"));
        }
        if !within(self.tx_window_ps) {
            return Err(Error::domain("protocol tx_window_ms must be a non-empty range within the period"));
        }
        if !within(self.rx_window_ps) {
            return Err(Error::domain("protocol rx_window_ms must be a non-empty range within the period"));
        }
        let (ta, tb) = self.tx_window_ps;
        let (ra, rb) = self.rx_window_ps;
        if ta < rb && ra < tb {
            return Err(Error::domain("protocol tx_window_ms and rx_window_ms overlap"));
        }
        if !(0..self.period_ps).contains(&self.slr_fire_ps) {
            return Err(Error::domain("protocol slr_fire_ms must lie within the period"));
        }
        if self.pulse_period_ps <= 0 || self.period_ps % self.pulse_period_ps != 0 {
            return Err(Error::domain(
                "protocol pulse_period_ns must be > 0 and divide the protocol period",
            ));
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return Err(Error::domain("protocol duty_cycle must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn phase(&self, t_ps: i64) -> i64 {
        t_ps.rem_euclid(self.period_ps)
    }

    pub fn in_tx_window(&self, t_ps: i64) -> bool {
        let p = self.phase(t_ps);
        (self.tx_window_ps.0..self.tx_window_ps.1).contains(&p)
    }

    pub fn in_rx_window(&self, t_ps: i64) -> bool {
        let p = self.phase(t_ps);
        (self.rx_window_ps.0..self.rx_window_ps.1).contains(&p)
    }

    /// Fraction of the period during which returns of transmitted pulses reach an open receiver,
    /// `|[rtt + tx_start, rtt + tx_end] ∩ rx_window| / period`.
    pub fn effective_duty_cycle(&self, rtt_ms: f64) -> Result<f64> {
        let period_ms = self.period_ps as f64 / PS_PER_MS as f64;
        if !(rtt_ms > 0.0 && rtt_ms < period_ms) {
            return Err(Error::domain(format!(
                "round-trip time {rtt_ms} ms must lie in (0, {period_ms}) ms"
            )));
        }
        let ms = |ps: i64| ps as f64 / PS_PER_MS as f64;
        let a = (ms(self.tx_window_ps.0) + rtt_ms).max(ms(self.rx_window_ps.0));
        let b = (ms(self.tx_window_ps.1) + rtt_ms).min(ms(self.rx_window_ps.1));
        Ok(((b - a).max(0.0)) / period_ms)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleMs {
    period_ms: f64,
    tx_window_ms: [f64; 2],
    slr_fire_ms: f64,
    rx_window_ms: [f64; 2],
    pulse_period_ns: f64,
    duty_cycle: f64,
}

impl TryFrom<ScheduleMs> for ProtocolSchedule {
    type Error = Error;

    fn try_from(s: ScheduleMs) -> Result<Self> {
        let ms = |v: f64| (v * PS_PER_MS as f64).round() as i64;
        let sched = ProtocolSchedule {
            period_ps: ms(s.period_ms),
            tx_window_ps: (ms(s.tx_window_ms[0]), ms(s.tx_window_ms[1])),
            slr_fire_ps: ms(s.slr_fire_ms),
            rx_window_ps: (ms(s.rx_window_ms[0]), ms(s.rx_window_ms[1])),
            pulse_period_ps: (s.pulse_period_ns * PS_PER_NS as f64).round() as i64,
            duty_cycle: s.duty_cycle,
        };
        sched.validate()?;
        Ok(sched)
    }
}

impl From<ProtocolSchedule> for ScheduleMs {
    fn from(s: ProtocolSchedule) -> Self {
        let ms = |v: i64| v as f64 / PS_PER_MS as f64;
        ScheduleMs {
            period_ms: ms(s.period_ps),
            tx_window_ms: [ms(s.tx_window_ps.0), ms(s.tx_window_ps.1)],
            slr_fire_ms: ms(s.slr_fire_ps),
            rx_window_ms: [ms(s.rx_window_ps.0), ms(s.rx_window_ps.1)],
            pulse_period_ns: s.pulse_period_ps as f64 / PS_PER_NS as f64,
            duty_cycle: s.duty_cycle,
        }
    }
}

/// Slant range sampled over elapsed pass time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeProfile {
    /// `(elapsed seconds, slant range in metres)`, strictly increasing in time.
    samples: Vec<(f64, f64)>,
}

impl RangeProfile {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::domain("range profile needs at least 2 samples"));
        }
        if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::domain("range profile times must be strictly increasing"));
        }
        if samples
            .iter()
            .any(|(t, r)| !t.is_finite() || !(r.is_finite() && *r > 0.0))
        {
            return Err(Error::domain("range profile values must be finite and ranges > 0"));
        }
        Ok(RangeProfile { samples })
    }

    /// Reads `t_s,range_m` rows.
    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            t_s: f64,
            range_m: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut samples = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::data(format!("range profile row {}: {e}", i + 1)))?;
            samples.push((row.t_s, row.range_m));
        }
        Self::new(samples).map_err(|e| Error::data(e.to_string()))
    }

    /// Constant range held over `[0, duration_s]`.
    pub fn constant(range_m: f64, duration_s: f64) -> Result<Self> {
        Self::new(vec![(0.0, range_m), (duration_s.max(1.0), range_m)])
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn start_s(&self) -> f64 {
        self.samples[0].0
    }

    pub fn end_s(&self) -> f64 {
        self.samples[self.samples.len() - 1].0
    }

    /// Linear interpolation, held constant outside the sampled span.
    pub fn range_at(&self, t_s: f64) -> f64 {
        let s = &self.samples;
        if t_s <= s[0].0 {
            return s[0].1;
        }
        if t_s >= s[s.len() - 1].0 {
            return s[s.len() - 1].1;
        }
        let i = s.partition_point(|(t, _)| *t <= t_s);
        let (t0, r0) = s[i - 1];
        let (t1, r1) = s[i];
        r0 + (r1 - r0) * (t_s - t0) / (t1 - t0)
    }

    pub fn min_range(&self) -> f64 {
        self.samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min)
    }

    pub fn max_range(&self) -> f64 {
        self.samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Time-weighted mean range over the sampled span.
    pub fn mean_range(&self) -> f64 {
        let s = &self.samples;
        let area: f64 = s
            .windows(2)
            .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
            .sum();
        area / (self.end_s() - self.start_s())
    }

    /// Checks the GNSS altitude band 19 000 - 26 000 km.
    pub fn validate_gnss(&self) -> Result<()> {
        if self.min_range() < 19_000e3 || self.max_range() > 26_000e3 {
            return Err(Error::domain(format!(
                "slant range {:.0}-{:.0} km outside the GNSS band 19000-26000 km",
                self.min_range() / 1e3,
                self.max_range() / 1e3
            )));
        }
        Ok(())
    }

    /// Round-trip time `2 R(t) / c` for a pulse leaving at `t_emit_ps`, rounded to 1 ps.
    pub fn rtt_ps(&self, t_emit_ps: i64) -> i64 {
        let r = self.range_at(t_emit_ps as f64 / PS_PER_S);
        (2.0 * r / SPEED_OF_LIGHT * PS_PER_S).round() as i64
    }
}

/// Source of expected arrival times for residual computation.
pub trait ExpectedArrivals {
    fn pulse_period_ps(&self) -> i64;

    /// Expected arrival of the pulse nearest to a detection at `t_meas_ps`,
    /// or `None` when no valid return lies within half a pulse period.
    fn nearest(&self, t_meas_ps: i64) -> Option<i64>;
}

/// Expected arrivals on an unbounded regular grid `offset + n P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularGrid {
    pub offset_ps: i64,
    pub pulse_period_ps: i64,
}

impl ExpectedArrivals for RegularGrid {
    fn pulse_period_ps(&self) -> i64 {
        self.pulse_period_ps
    }

    fn nearest(&self, t_meas_ps: i64) -> Option<i64> {
        let p = self.pulse_period_ps;
        let n = (t_meas_ps - self.offset_ps + p / 2).div_euclid(p);
        Some(self.offset_ps + n * p)
    }
}

/// Expected arrivals predicted from the range profile and protocol timing.
#[derive(Debug, Clone, PartialEq)]
pub struct PassEphemeris {
    pub profile: RangeProfile,
    pub schedule: ProtocolSchedule,
}

impl PassEphemeris {
    pub fn new(profile: RangeProfile, schedule: ProtocolSchedule) -> Self {
        PassEphemeris { profile, schedule }
    }

    pub fn expected_arrival(&self, pulse_index: i64) -> Result<i64> {
        expected_arrival(pulse_index, &self.profile, &self.schedule)
    }

    /// Expected arrival of pulse `n` if it leaves during a transmit window and returns
    /// while the receiver is open.
    fn valid_return(&self, n: i64) -> Option<i64> {
        let e = n.checked_mul(self.schedule.pulse_period_ps)?;
        if e < 0 || !self.schedule.in_tx_window(e) {
            return None;
        }
        let t_ref = e + self.profile.rtt_ps(e);
        self.schedule.in_rx_window(t_ref).then_some(t_ref)
    }

    /// Whether `t_ps` lies in the part of the receive window that can hold returns.
    pub fn in_signal_region(&self, t_ps: i64) -> bool {
        self.nearest(t_ps).is_some()
    }
}

impl ExpectedArrivals for PassEphemeris {
    fn pulse_period_ps(&self) -> i64 {
        self.schedule.pulse_period_ps
    }

    fn nearest(&self, t_meas_ps: i64) -> Option<i64> {
        let p = self.schedule.pulse_period_ps;
        // Two fixed-point steps of e = t - rtt(e).
        let e0 = t_meas_ps - self.profile.rtt_ps(t_meas_ps);
        let e1 = t_meas_ps - self.profile.rtt_ps(e0);
        let n = (e1 + p / 2).div_euclid(p);
        self.valid_return(n)
    }
}

/// `t_ref = n P + 2 R(n P) / c` for a pulse emitted inside a transmit window.
pub fn expected_arrival(
    pulse_index: i64,
    profile: &RangeProfile,
    schedule: &ProtocolSchedule,
) -> Result<i64> {
    let e = pulse_index
        .checked_mul(schedule.pulse_period_ps)
        .filter(|e| *e >= 0 && schedule.in_tx_window(*e))
        .ok_or_else(|| {
            Error::usage(format!(
                "pulse {pulse_index} is not emitted inside a transmit window"
            ))
        })?;
    Ok(e + profile.rtt_ps(e))
}

/// Background rates seen by one detection channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Detector dark counts, present whether or not the shutter is open.
    pub dark_rate_hz: f64,
    /// Mean fluorescence rate over the signal region of the receive window.
    pub fluorescence_hz: f64,
    pub fluorescence_half_life_ms: f64,
    /// Satellite albedo and sky background while the receive shutter is open.
    pub albedo_hz: f64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dark_rate_hz", self.dark_rate_hz),
            ("fluorescence_hz", self.fluorescence_hz),
            ("fluorescence_half_life_ms", self.fluorescence_half_life_ms),
            ("albedo_hz", self.albedo_hz),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("noise {name} must be >= 0, got {v}")));
            }
        }
        if self.fluorescence_hz > 0.0 && self.fluorescence_half_life_ms <= 0.0 {
            return Err(Error::domain(
                "noise fluorescence_half_life_ms must be > 0 when fluorescence is present",
            ));
        }
        Ok(())
    }
}

/// Origin of a simulated detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Signal,
    Dark,
    Fluorescence,
    Albedo,
}

impl Truth {
    pub const ALL: [Truth; 4] = [Truth::Signal, Truth::Dark, Truth::Fluorescence, Truth::Albedo];

    pub fn as_str(&self) -> &'static str {
        match self {
            Truth::Signal => "signal",
            Truth::Dark => "dark",
            Truth::Fluorescence => "fluorescence",
            Truth::Albedo => "albedo",
        }
    }

    fn stream(&self) -> u64 {
        *self as u64
    }
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Truth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Truth::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::data(format!("unknown truth class '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TagEvent {
    pub time_ps: i64,
    pub channel: u16,
    pub truth: Option<Truth>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamMetadata {
    pub scenario_hash: String,
    pub seed: Option<u64>,
    /// Acquisition length; events lie in `[0, duration_ps)`.
    pub duration_ps: Option<i64>,
    pub channels: Vec<u16>,
    pub counts: BTreeMap<Truth, u64>,
}

/// Time-ordered detection events.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TagStream {
    events: Vec<TagEvent>,
    pub metadata: StreamMetadata,
}

impl TagStream {
    /// Sorts events by time and drops exact repeats of `(time, channel)`.
    pub fn new(mut events: Vec<TagEvent>, metadata: StreamMetadata) -> Self {
        events.sort_unstable();
        events.dedup_by(|b, a| a.time_ps == b.time_ps && a.channel == b.channel);
        TagStream { events, metadata }
    }

    pub fn events(&self) -> &[TagEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn channel(&self, channel: u16) -> impl Iterator<Item = &TagEvent> + '_ {
        self.events.iter().filter(move |e| e.channel == channel)
    }

    pub fn channels(&self) -> Vec<u16> {
        let mut ch: Vec<u16> = self.events.iter().map(|e| e.channel).collect();
        ch.extend(&self.metadata.channels);
        ch.sort_unstable();
        ch.dedup();
        ch
    }

    pub fn count(&self, truth: Truth) -> usize {
        self.events.iter().filter(|e| e.truth == Some(truth)).count()
    }

    /// Declared duration, or the last event time plus one picosecond.
    pub fn duration_ps(&self) -> i64 {
        self.metadata
            .duration_ps
            .unwrap_or_else(|| self.events.last().map_or(0, |e| e.time_ps + 1))
    }

    fn recount(&mut self) {
        let mut counts = BTreeMap::new();
        for e in &self.events {
            if let Some(t) = e.truth {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        self.metadata.counts = counts;
    }

    /// Writes `time_ps,channel[,truth]` preceded by `#` provenance lines.
    pub fn write_csv<W: Write>(&self, mut out: W, with_truth: bool) -> Result<()> {
        writeln!(out, "# scenario_hash={}", self.metadata.scenario_hash)?;
        if let Some(seed) = self.metadata.seed {
            writeln!(out, "# seed={seed}")?;
        }
        if let Some(d) = self.metadata.duration_ps {
            writeln!(out, "# duration_ps={d}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        if with_truth {
            w.write_record(["time_ps", "channel", "truth"])?;
        } else {
            w.write_record(["time_ps", "channel"])?;
        }
        for e in &self.events {
            let t = e.time_ps.to_string();
            let c = e.channel.to_string();
            if with_truth {
                w.write_record([t.as_str(), c.as_str(), e.truth.map_or("", |x| x.as_str())])?;
            } else {
                w.write_record([t.as_str(), c.as_str()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parses the CSV written by [`TagStream::write_csv`]; the truth column is optional.
    pub fn read_csv<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let mut meta = StreamMetadata::default();
        for line in text.lines().filter_map(|l| l.strip_prefix('#')) {
            let Some((k, v)) = line.trim().split_once('=') else {
                continue;
            };
            let bad = |k: &str| Error::data(format!("malformed header value for {k}"));
            match k.trim() {
                "scenario_hash" => meta.scenario_hash = v.trim().to_string(),
                "seed" => meta.seed = Some(v.trim().parse().map_err(|_| bad(k))?),
                "duration_ps" => meta.duration_ps = Some(v.trim().parse().map_err(|_| bad(k))?),
                _ => {}
            }
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (Some(ti), Some(ci)) = (col("time_ps"), col("channel")) else {
            return Err(Error::data(
                "tag file must have time_ps and channel columns",
            ));
        };
        let truth_col = col("truth");
        let mut events = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let time_ps = field(ti)
                .parse()
                .map_err(|_| Error::data(format!("row {}: bad time_ps '{}'", line + 1, field(ti))))?;
            let channel = field(ci)
                .parse()
                .map_err(|_| Error::data(format!("row {}: bad channel '{}'", line + 1, field(ci))))?;
            let truth = match truth_col.map(field) {
                None | Some("") => None,
                Some(s) => Some(s.parse()?),
            };
            events.push(TagEvent {
                time_ps,
                channel,
                truth,
            });
        }
        let mut stream = TagStream::new(events, meta);
        stream.metadata.channels = stream.channels();
        stream.recount();
        Ok(stream)
    }

    pub fn write_metadata<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.metadata)?;
        Ok(())
    }
}

/// Independent generator for one `(channel, truth class)` pair.
fn class_rng(seed: u64, channel_index: usize, truth: Truth) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel_index as u64 * 8 + truth.stream());
    rng
}

/// Homogeneous Poisson arrivals on `[a, b)` appended to `out`.
fn poisson_uniform(rng: &mut ChaCha8Rng, rate_hz: f64, a: i64, b: i64, out: &mut Vec<i64>) {
    if rate_hz <= 0.0 || b <= a {
        return;
    }
    let mean = rate_hz * (b - a) as f64 / PS_PER_S;
    let n = sample_poisson(rng, mean);
    let start = out.len();
    for _ in 0..n {
        out.push(a + (rng.random::<f64>() * (b - a) as f64) as i64);
    }
    out[start..].sort_unstable();
}

fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Open-shutter spans `[a, b)` of every protocol period intersecting `[0, duration)`.
fn rx_spans(schedule: &ProtocolSchedule, duration_ps: i64) -> impl Iterator<Item = (i64, i64)> + '_ {
    let periods = (duration_ps + schedule.period_ps - 1) / schedule.period_ps;
    (0..periods).filter_map(move |k| {
        let base = k * schedule.period_ps;
        let a = base + schedule.rx_window_ps.0;
        let b = (base + schedule.rx_window_ps.1).min(duration_ps);
        (a < b).then_some((a, b))
    })
}

/// Exponentially decaying fluorescence in each open-shutter span; `peak_hz` is the
/// rate at the SLR shot.
fn fluorescence_events(
    rng: &mut ChaCha8Rng,
    schedule: &ProtocolSchedule,
    duration_ps: i64,
    peak_hz: f64,
    half_life_ps: f64,
    out: &mut Vec<i64>,
) {
    if peak_hz <= 0.0 {
        return;
    }
    let k = std::f64::consts::LN_2 / half_life_ps;
    for (a, b) in rx_spans(schedule, duration_ps) {
        let fire = a - schedule.rx_window_ps.0 + schedule.slr_fire_ps;
        let a = a.max(fire);
        if b <= a {
            continue;
        }
        let (xa, xb) = ((a - fire) as f64, (b - fire) as f64);
        // integral of peak * exp(-k x) over [xa, xb]
        let ea = (-k * xa).exp();
        let span = -(-k * (xb - xa)).exp_m1();
        let mean = peak_hz / PS_PER_S * ea * span / k;
        let n = sample_poisson(rng, mean);
        let start = out.len();
        for _ in 0..n {
            let u: f64 = rng.random();
            let dx = -(-u * span).ln_1p() / k;
            out.push((a + dx as i64).min(b - 1));
        }
        out[start..].sort_unstable();
    }
}

/// Rate at the SLR shot that makes the mean over `[region_a, region_b)` equal `mean_hz`.
pub fn fluorescence_peak_rate(
    schedule: &ProtocolSchedule,
    mean_hz: f64,
    half_life_ps: f64,
    region: (i64, i64),
) -> f64 {
    let (ra, rb) = region;
    if mean_hz <= 0.0 || rb <= ra {
        return 0.0;
    }
    let k = std::f64::consts::LN_2 / half_life_ps;
    let xa = (ra - schedule.slr_fire_ps).max(0) as f64;
    let xb = (rb - schedule.slr_fire_ps).max(0) as f64;
    let avg = ((-k * xa).exp() - (-k * xb).exp()) / (k * (rb - ra) as f64);
    if avg > 0.0 {
        mean_hz / avg
    } else {
        0.0
    }
}

/// Signal region (phase within the period) for returns of the given round-trip time.
pub fn signal_region(schedule: &ProtocolSchedule, rtt_ps: i64) -> (i64, i64) {
    let a = (schedule.tx_window_ps.0 + rtt_ps).max(schedule.rx_window_ps.0);
    let b = (schedule.tx_window_ps.1 + rtt_ps).min(schedule.rx_window_ps.1);
    if a < b {
        (a, b)
    } else {
        schedule.rx_window_ps
    }
}

/// Monte Carlo time tags for one pass of `scenario` lasting `duration_s`.
///
/// Signal: each pulse whose return reaches an open receiver is detected with
/// probability `1 - exp(-mu t_down t_rx)` at most once, at `t_ref` plus a draw from
/// the array response plus detector jitter. Background: dark counts over the whole
/// acquisition, albedo and fluorescence while the receive shutter is open.
pub fn simulate_pass(scenario: &Scenario, duration_s: f64, seed: u64) -> Result<TagStream> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::usage(format!(
            "simulation duration must be > 0 s, got {duration_s}"
        )));
    }
    scenario.validate()?;
    let duration_ps = (duration_s * PS_PER_S).round() as i64;
    let schedule = scenario.protocol;
    let ephemeris = scenario.ephemeris()?;
    let profile = &ephemeris.profile;
    let response = scenario.array_response()?;
    let rtt0 = profile.rtt_ps(0);
    let region = signal_region(&schedule, rtt0);

    let mut events = Vec::new();
    for (ci, rx) in scenario.receivers.iter().enumerate() {
        let t_rx = receiver_transmittance(rx)?;
        let jitter_sigma = fwhm_to_sigma(rx.jitter_fwhm_ps)?;
        let noise = scenario.channel_noise(ci)?;
        let push = |events: &mut Vec<TagEvent>, times: Vec<i64>, truth: Truth| {
            events.extend(times.into_iter().map(|time_ps| TagEvent {
                time_ps,
                channel: rx.channel_id,
                truth: Some(truth),
            }));
        };

        // signal
        let mu = scenario.satellite.mu_sat;
        if mu > 0.0 {
            let mut rng = class_rng(seed, ci, Truth::Signal);
            let p_at = |e_ps: i64| -> Result<f64> {
                let t_down = scenario.downlink_at(profile.range_at(e_ps as f64 / PS_PER_S))?.t_down;
                Ok(detection_probability(mu, t_down, t_rx))
            };
            let p_max = scenario
                .downlink_at(profile.min_range())
                .map(|b| detection_probability(mu, b.t_down, t_rx))?;
            let geometric = Geometric::new(p_max)
                .map_err(|e| Error::domain(format!("detection probability {p_max}: {e}")))?;
            let pp = schedule.pulse_period_ps;
            let mut times = Vec::new();
            let periods = (duration_ps + schedule.period_ps - 1) / schedule.period_ps;
            for k in 0..periods {
                let base = k * schedule.period_ps;
                let n_end = (base + schedule.tx_window_ps.1).min(duration_ps);
                let n_end = (n_end + pp - 1) / pp;
                let mut n = (base + schedule.tx_window_ps.0 + pp - 1) / pp;
                loop {
                    n = n.saturating_add(geometric.sample(&mut rng).min(i64::MAX as u64) as i64);
                    if n >= n_end {
                        break;
                    }
                    let e = n * pp;
                    let accept = rng.random::<f64>() * p_max < p_at(e)?;
                    let delay = response.sample(&mut rng);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    n += 1;
                    if !accept {
                        continue;
                    }
                    let t_ref = e + profile.rtt_ps(e);
                    if !schedule.in_rx_window(t_ref) {
                        continue;
                    }
                    let t = t_ref + (delay + z * jitter_sigma).round() as i64;
                    if (0..duration_ps).contains(&t) {
                        times.push(t);
                    }
                }
            }
            push(&mut events, times, Truth::Signal);
        }

        // dark counts: whole acquisition
        if noise.dark_rate_hz > 0.0 {
            let mut rng = class_rng(seed, ci, Truth::Dark);
            let gap = Exp::new(noise.dark_rate_hz / PS_PER_S)
                .map_err(|e| Error::domain(format!("dark rate: {e}")))?;
            let mut times = Vec::new();
            let mut t = 0.0f64;
            loop {
                t += gap.sample(&mut rng);
                if t >= duration_ps as f64 {
                    break;
                }
                times.push(t as i64);
            }
            push(&mut events, times, Truth::Dark);
        }

        // albedo: open shutter only
        {
            let mut rng = class_rng(seed, ci, Truth::Albedo);
            let mut times = Vec::new();
            for (a, b) in rx_spans(&schedule, duration_ps) {
                poisson_uniform(&mut rng, noise.albedo_hz, a, b, &mut times);
            }
            push(&mut events, times, Truth::Albedo);
        }

        // fluorescence after each SLR shot
        if noise.fluorescence_hz > 0.0 {
            let mut rng = class_rng(seed, ci, Truth::Fluorescence);
            let half_life_ps = noise.fluorescence_half_life_ms * PS_PER_MS as f64;
            let peak = fluorescence_peak_rate(&schedule, noise.fluorescence_hz, half_life_ps, region);
            let mut times = Vec::new();
            fluorescence_events(&mut rng, &schedule, duration_ps, peak, half_life_ps, &mut times);
            push(&mut events, times, Truth::Fluorescence);
        }
    }

    let mut stream = TagStream::new(
        events,
        StreamMetadata {
            scenario_hash: scenario.hash(),
            seed: Some(seed),
            duration_ps: Some(duration_ps),
            channels: scenario.receivers.iter().map(|r| r.channel_id).collect(),
            counts: BTreeMap::new(),
        },
    );
    if let Some(dead) = scenario.dead_times() {
        stream.apply_dead_time(&dead);
    }
    stream.recount();
    Ok(stream)
}

impl TagStream {
    /// Drops events arriving within a channel's dead time after its previous kept event.
    pub fn apply_dead_time(&mut self, dead_time_ps: &BTreeMap<u16, i64>) {
        let mut last: BTreeMap<u16, i64> = BTreeMap::new();
        self.events.retain(|e| {
            let Some(&dead) = dead_time_ps.get(&e.channel) else {
                return true;
            };
            match last.get(&e.channel) {
                Some(&prev) if e.time_ps - prev < dead => false,
                _ => {
                    last.insert(e.channel, e.time_ps);
                    true
                }
            }
        });
    }
}

//! Residuals, per-interval rates with background subtraction, histograms and
//! pass summaries for time-tag streams.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ccr_response::{peak_to_peak, TemporalProfile, DEFAULT_MIN_SEPARATION_PS};
use crate::channel_sim::{ExpectedArrivals, PassEphemeris, ProtocolSchedule, TagStream, Truth};
use crate::error::{Error, Result};
use crate::link_budget::{estimate_mu_sat, LinkBudget};
use crate::units::{PS_PER_MS, PS_PER_S};

/// Settings of the detection-statistics pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisParams {
    /// Interval length τ.
    pub interval_s: f64,
    /// Full width of the signal window centred on the expected arrival.
    pub window_ps: i64,
    pub duty_cycle: f64,
    /// Intervals with a lower detection rate are discarded.
    pub threshold_hz: f64,
    #[serde(default = "default_bin_width")]
    pub bin_width_ps: i64,
    /// Background is estimated from residuals farther than this from zero.
    #[serde(default = "default_exclusion")]
    pub exclusion_ps: i64,
    /// Bin width of the histogram used to read the array signature.
    #[serde(default = "default_signature_bin")]
    pub signature_bin_ps: i64,
}

fn default_bin_width() -> i64 {
    100
}

fn default_exclusion() -> i64 {
    1_000
}

fn default_signature_bin() -> i64 {
    20
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            interval_s: 5.0,
            window_ps: 400,
            duty_cycle: 0.3,
            threshold_hz: 30.0,
            bin_width_ps: default_bin_width(),
            exclusion_ps: default_exclusion(),
            signature_bin_ps: default_signature_bin(),
        }
    }
}

impl AnalysisParams {
    pub fn validate(&self, pulse_period_ps: i64) -> Result<()> {
        if !(self.interval_s > 0.0 && self.interval_s.is_finite()) {
            return Err(Error::domain("analysis interval_s must be > 0"));
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return Err(Error::domain("analysis duty_cycle must lie in (0, 1]"));
        }
        if self.threshold_hz.is_nan() {
            return Err(Error::domain("analysis threshold_hz must be a number"));
        }
        if self.bin_width_ps < 1 {
            return Err(Error::domain("analysis bin_width_ps must be >= 1"));
        }
        if self.signature_bin_ps < 1 {
            return Err(Error::domain("analysis signature_bin_ps must be >= 1"));
        }
        check_windows(self.window_ps, self.exclusion_ps, pulse_period_ps)
    }

    pub fn interval_ps(&self) -> i64 {
        (self.interval_s * PS_PER_S).round() as i64
    }
}

fn check_windows(window_ps: i64, exclusion_ps: i64, pulse_period_ps: i64) -> Result<()> {
    if window_ps <= 0 {
        return Err(Error::usage(format!("window_ps must be > 0, got {window_ps}")));
    }
    if window_ps >= 2 * exclusion_ps {
        return Err(Error::usage(format!(
            "window_ps {window_ps} must be smaller than twice exclusion_ps {exclusion_ps}"
        )));
    }
    if 2 * exclusion_ps >= pulse_period_ps {
        return Err(Error::usage(format!(
            "exclusion_ps {exclusion_ps} must be below half the pulse period {pulse_period_ps} ps"
        )));
    }
    Ok(())
}

/// `t - t_ref` folded into `(-P/2, P/2]`.
pub fn wrap_residual(diff_ps: i64, pulse_period_ps: i64) -> i64 {
    let half = pulse_period_ps / 2;
    half - (half - diff_ps).rem_euclid(pulse_period_ps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub time_ps: i64,
    pub channel: u16,
    pub residual_ps: i64,
    pub truth: Option<Truth>,
}

/// Residuals of the detections that have a valid expected arrival.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualSet {
    pub pulse_period_ps: i64,
    pub items: Vec<Residual>,
}

impl ResidualSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = i64> + '_ {
        self.items.iter().map(|r| r.residual_ps)
    }

    pub fn with_truth(&self, truth: Truth) -> Vec<i64> {
        self.items
            .iter()
            .filter(|r| r.truth == Some(truth))
            .map(|r| r.residual_ps)
            .collect()
    }

    /// Residuals of detections in `[start, end)`.
    pub fn between(&self, start_ps: i64, end_ps: i64) -> impl Iterator<Item = &Residual> + '_ {
        let lo = self.items.partition_point(|r| r.time_ps < start_ps);
        let hi = self.items.partition_point(|r| r.time_ps < end_ps);
        self.items[lo..hi].iter()
    }
}

/// Matches every detection of `channel` (all channels when `None`) to its nearest
/// expected arrival. Detections without one (closed shutter, outside the return
/// region) are dropped.
pub fn residuals(
    tags: &TagStream,
    refs: &dyn ExpectedArrivals,
    channel: Option<u16>,
) -> ResidualSet {
    let p = refs.pulse_period_ps();
    let items = tags
        .events()
        .iter()
        .filter(|e| channel.is_none_or(|c| c == e.channel))
        .filter_map(|e| {
            let t_ref = refs.nearest(e.time_ps)?;
            Some(Residual {
                time_ps: e.time_ps,
                channel: e.channel,
                residual_ps: wrap_residual(e.time_ps - t_ref, p),
                truth: e.truth,
            })
        })
        .collect();
    ResidualSet {
        pulse_period_ps: p,
        items,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowCounts {
    /// Residuals with `|r| <= w/2`.
    pub n_tot_w: u64,
    /// Residuals with `|r| > exclusion`.
    pub n_out: u64,
    /// Background expected inside the window, scaled from `n_out`.
    pub n_bkg_w: f64,
}

impl WindowCounts {
    pub fn n_det(&self) -> f64 {
        self.n_tot_w as f64 - self.n_bkg_w
    }
}

/// Window and side-band counts. Residuals are integers in `(-P/2, P/2]`, so the
/// window holds `2 floor(w/2) + 1` values and the side bands `P - 2 e - 1`; the
/// background scale is their ratio.
pub fn windowed_counts(
    residuals: impl IntoIterator<Item = i64>,
    pulse_period_ps: i64,
    window_ps: i64,
    exclusion_ps: i64,
) -> Result<WindowCounts> {
    check_windows(window_ps, exclusion_ps, pulse_period_ps)?;
    let half = window_ps / 2;
    let (mut n_tot_w, mut n_out) = (0u64, 0u64);
    for r in residuals {
        if r.abs() <= half {
            n_tot_w += 1;
        } else if r.abs() > exclusion_ps {
            n_out += 1;
        }
    }
    Ok(WindowCounts {
        n_tot_w,
        n_out,
        n_bkg_w: n_out as f64 * background_scale(pulse_period_ps, window_ps, exclusion_ps),
    })
}

/// Ratio of window width to side-band width in integer picoseconds.
pub fn background_scale(pulse_period_ps: i64, window_ps: i64, exclusion_ps: i64) -> f64 {
    (2 * (window_ps / 2) + 1) as f64 / (pulse_period_ps - 2 * exclusion_ps - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub k: usize,
    pub channel: u16,
    pub tau_s: f64,
    pub n_tot_w: u64,
    pub n_out: u64,
    pub n_bkg_w: f64,
    pub n_det: f64,
    pub r_det_hz: f64,
    pub bkg_rate_w_hz: f64,
    pub snr: f64,
    pub selected: bool,
}

/// Statistics for every complete interval `[k τ, (k+1) τ)` of the acquisition.
/// `selected` marks intervals at or above `params.threshold_hz`.
pub fn interval_stats(
    rs: &ResidualSet,
    channel: u16,
    duration_ps: i64,
    params: &AnalysisParams,
) -> Result<Vec<IntervalStats>> {
    params.validate(rs.pulse_period_ps)?;
    let tau = params.interval_ps();
    let n = (duration_ps / tau).max(0) as usize;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let start = k as i64 * tau;
        let counts = windowed_counts(
            rs.between(start, start + tau)
                .filter(|r| r.channel == channel)
                .map(|r| r.residual_ps),
            rs.pulse_period_ps,
            params.window_ps,
            params.exclusion_ps,
        )?;
        let n_det = counts.n_det();
        let exposure = params.interval_s * params.duty_cycle;
        let r_det_hz = n_det / exposure;
        out.push(IntervalStats {
            k,
            channel,
            tau_s: params.interval_s,
            n_tot_w: counts.n_tot_w,
            n_out: counts.n_out,
            n_bkg_w: counts.n_bkg_w,
            n_det,
            r_det_hz,
            bkg_rate_w_hz: counts.n_bkg_w / exposure,
            snr: ratio(n_det, counts.n_bkg_w),
            selected: r_det_hz >= params.threshold_hz,
        });
    }
    Ok(out)
}

fn ratio(signal: f64, background: f64) -> f64 {
    if background > 0.0 {
        signal / background
    } else if signal > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Intervals with `r_det_hz >= threshold_hz`.
pub fn filter_intervals(stats: &[IntervalStats], threshold_hz: f64) -> Vec<IntervalStats> {
    stats
        .iter()
        .filter(|s| s.r_det_hz >= threshold_hz)
        .map(|s| IntervalStats {
            selected: true,
            ..*s
        })
        .collect()
}

/// Averages over the selected intervals with Poisson standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum PassSummary {
    Signal {
        channel: u16,
        intervals_selected: usize,
        r_det_hz: f64,
        r_det_sigma_hz: f64,
        /// Ratio of summed detections to summed in-window background.
        snr: f64,
        snr_sigma: f64,
        mu_sat: f64,
        mu_sat_sigma: f64,
    },
    NoSignal {
        channel: u16,
        intervals_total: usize,
    },
}

impl PassSummary {
    pub fn is_signal(&self) -> bool {
        matches!(self, PassSummary::Signal { .. })
    }

    pub fn r_det_hz(&self) -> Option<f64> {
        match self {
            PassSummary::Signal { r_det_hz, .. } => Some(*r_det_hz),
            PassSummary::NoSignal { .. } => None,
        }
    }
}

/// Pass-level rate, SNR and μ_sat from the selected intervals. `bkg_scale` is the
/// window to side-band ratio from [`background_scale`].
pub fn estimate_pass_summary(
    selected: &[IntervalStats],
    budget: &LinkBudget,
    rep_rate_hz: f64,
    duty_cycle: f64,
    bkg_scale: f64,
) -> Result<PassSummary> {
    let chosen: Vec<&IntervalStats> = selected.iter().filter(|s| s.selected).collect();
    let channel = selected.first().map_or(0, |s| s.channel);
    let n_tot: f64 = chosen.iter().map(|s| s.n_tot_w as f64).sum();
    let n_bkg: f64 = chosen.iter().map(|s| s.n_bkg_w).sum();
    let n_det = n_tot - n_bkg;
    if chosen.is_empty() || !(n_det > 0.0) {
        return Ok(PassSummary::NoSignal {
            channel,
            intervals_total: selected.len(),
        });
    }
    let exposure: f64 = chosen.iter().map(|s| s.tau_s).sum::<f64>() * duty_cycle;
    let r_det_hz = n_det / exposure;
    // Var(n_bkg) = scale^2 n_out = scale n_bkg
    let var_bkg = bkg_scale * n_bkg;
    let var_det = n_tot + var_bkg;
    let r_det_sigma_hz = var_det.sqrt() / exposure;
    let snr = ratio(n_det, n_bkg);
    let snr_sigma = if n_bkg > 0.0 {
        snr * (var_det / (n_det * n_det) + var_bkg / (n_bkg * n_bkg)).sqrt()
    } else {
        f64::INFINITY
    };
    let mu_sat = estimate_mu_sat(r_det_hz, rep_rate_hz, budget.t_down, budget.t_rx)?;
    Ok(PassSummary::Signal {
        channel,
        intervals_selected: chosen.len(),
        r_det_hz,
        r_det_sigma_hz,
        snr,
        snr_sigma,
        mu_sat,
        mu_sat_sigma: mu_sat * r_det_sigma_hz / r_det_hz,
    })
}

/// Residual histogram with bins `(e_i, e_{i+1}]`; edges are multiples of the bin
/// width, so one edge sits at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width_ps: i64,
    pub edges: Vec<i64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Empty histogram covering `(-P/2, P/2]`.
    pub fn new(pulse_period_ps: i64, bin_width_ps: i64) -> Result<Self> {
        if bin_width_ps < 1 || pulse_period_ps < 2 {
            return Err(Error::domain(format!(
                "histogram needs bin width >= 1 ps and period >= 2 ps, got {bin_width_ps} and {pulse_period_ps}"
            )));
        }
        let half = pulse_period_ps / 2;
        let lo = -((half + bin_width_ps - 1) / bin_width_ps);
        let hi = (half + bin_width_ps - 1) / bin_width_ps;
        let edges: Vec<i64> = (lo..=hi).map(|j| j * bin_width_ps).collect();
        let counts = vec![0; edges.len() - 1];
        Ok(Histogram {
            bin_width_ps,
            edges,
            counts,
        })
    }

    pub fn from_residuals(
        residuals: impl IntoIterator<Item = i64>,
        pulse_period_ps: i64,
        bin_width_ps: i64,
    ) -> Result<Self> {
        let mut h = Histogram::new(pulse_period_ps, bin_width_ps)?;
        for r in residuals {
            h.add(r)?;
        }
        Ok(h)
    }

    pub fn add(&mut self, residual_ps: i64) -> Result<()> {
        let i = self
            .bin_index(residual_ps)
            .ok_or_else(|| Error::data(format!("residual {residual_ps} ps outside histogram range")))?;
        self.counts[i] += 1;
        Ok(())
    }

    pub fn bin_index(&self, r: i64) -> Option<usize> {
        let bw = self.bin_width_ps;
        // r in (j bw, (j+1) bw]  <=>  j = ceil(r / bw) - 1
        let j = (r + bw - 1).div_euclid(bw) - 1;
        let i = j - self.edges[0] / bw;
        (0..self.counts.len() as i64).contains(&i).then_some(i as usize)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        self.edges
            .windows(2)
            .map(|e| 0.5 * (e[0] + e[1]) as f64)
    }

    /// Background-subtracted signal shape within `|r| <= exclusion`, normalised to
    /// unit area. The background level per bin comes from bins entirely beyond the
    /// exclusion distance.
    pub fn signal_profile(&self, exclusion_ps: i64) -> Result<TemporalProfile> {
        let bins: Vec<(i64, i64, f64)> = self
            .edges
            .windows(2)
            .zip(&self.counts)
            .map(|(e, c)| (e[0], e[1], *c as f64))
            .collect();
        let side: Vec<f64> = bins
            .iter()
            .filter(|(a, b, _)| a.abs() >= exclusion_ps && b.abs() >= exclusion_ps && a.signum() == b.signum())
            .map(|b| b.2)
            .collect();
        let floor = if side.is_empty() {
            0.0
        } else {
            side.iter().sum::<f64>() / side.len() as f64
        };
        let core: Vec<&(i64, i64, f64)> = bins
            .iter()
            .filter(|(a, b, _)| *a >= -exclusion_ps && *b <= exclusion_ps)
            .collect();
        let Some(first) = core.first() else {
            return Err(Error::usage("exclusion distance is narrower than one histogram bin"));
        };
        let densities: Vec<f64> = core.iter().map(|b| (b.2 - floor).max(0.0)).collect();
        let total: f64 = densities.iter().sum();
        if !(total > 0.0) {
            return Err(Error::data("no signal above background in histogram"));
        }
        let bw = self.bin_width_ps as f64;
        Ok(TemporalProfile {
            bin_width_ps: self.bin_width_ps,
            origin_ps: first.0,
            densities: densities.iter().map(|d| d / (total * bw)).collect(),
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["left_ps", "right_ps", "center_ps", "count"])?;
        for (e, c) in self.edges.windows(2).zip(&self.counts) {
            w.write_record([
                e[0].to_string(),
                e[1].to_string(),
                (0.5 * (e[0] + e[1]) as f64).to_string(),
                c.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Histogram of the residuals that fall inside selected intervals.
pub fn integrated_histogram(
    rs: &ResidualSet,
    stats: &[IntervalStats],
    bin_width_ps: i64,
) -> Result<Histogram> {
    let mut h = Histogram::new(rs.pulse_period_ps, bin_width_ps)?;
    for s in stats.iter().filter(|s| s.selected) {
        let tau = (s.tau_s * PS_PER_S).round() as i64;
        let start = s.k as i64 * tau;
        for r in rs.between(start, start + tau).filter(|r| r.channel == s.channel) {
            h.add(r.residual_ps)?;
        }
    }
    Ok(h)
}

pub fn write_interval_csv<W: Write>(stats: &[IntervalStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Full per-channel pipeline output.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAnalysis {
    pub channel: u16,
    pub stats: Vec<IntervalStats>,
    pub histogram: Histogram,
    pub summary: PassSummary,
    /// Lobe separation of the background-subtracted signature, when there is one.
    pub peak_to_peak_ps: Option<f64>,
}

/// Residuals, interval statistics, integrated histogram and summary for one channel.
pub fn analyze_channel(
    tags: &TagStream,
    ephemeris: &PassEphemeris,
    channel: u16,
    params: &AnalysisParams,
    budget: &LinkBudget,
    rep_rate_hz: f64,
) -> Result<ChannelAnalysis> {
    let rs = residuals(tags, ephemeris, Some(channel));
    let stats = interval_stats(&rs, channel, tags.duration_ps(), params)?;
    let histogram = integrated_histogram(&rs, &stats, params.bin_width_ps)?;
    let scale = background_scale(rs.pulse_period_ps, params.window_ps, params.exclusion_ps);
    let mut summary = estimate_pass_summary(&stats, budget, rep_rate_hz, params.duty_cycle, scale)?;
    if let PassSummary::NoSignal { channel: c, .. } = &mut summary {
        *c = channel;
    }
    let peak_to_peak_ps = if summary.is_signal() {
        signature_peak_to_peak(&rs, &stats, params)
    } else {
        None
    };
    Ok(ChannelAnalysis {
        channel,
        stats,
        histogram,
        summary,
        peak_to_peak_ps,
    })
}

/// Peak-to-peak of the integrated signal shape on the fine signature grid.
pub fn signature_peak_to_peak(
    rs: &ResidualSet,
    stats: &[IntervalStats],
    params: &AnalysisParams,
) -> Option<f64> {
    let h = integrated_histogram(rs, stats, params.signature_bin_ps).ok()?;
    let profile = h.signal_profile(params.exclusion_ps).ok()?;
    Some(peak_to_peak(&profile, DEFAULT_MIN_SEPARATION_PS))
}

/// Detections folded onto the protocol period, split by shutter state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodOccupancy {
    pub bin_width_ps: i64,
    pub period_ps: i64,
    /// Receive shutter closed.
    pub closed: Vec<u64>,
    /// Shutter open and inside the region where returns arrive.
    pub open_signal: Vec<u64>,
    /// Shutter open, outside the return region.
    pub open_other: Vec<u64>,
}

impl PeriodOccupancy {
    pub fn len(&self) -> usize {
        self.closed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn total(&self) -> u64 {
        self.closed.iter().chain(&self.open_signal).chain(&self.open_other).sum()
    }

    pub fn bin_start(&self, i: usize) -> i64 {
        i as i64 * self.bin_width_ps
    }

    /// Summed counts per bin.
    pub fn stacked(&self) -> Vec<u64> {
        (0..self.len())
            .map(|i| self.closed[i] + self.open_signal[i] + self.open_other[i])
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["phase_start_ms", "closed", "open_signal", "open_other"])?;
        for i in 0..self.len() {
            w.write_record([
                (self.bin_start(i) as f64 / PS_PER_MS as f64).to_string(),
                self.closed[i].to_string(),
                self.open_signal[i].to_string(),
                self.open_other[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stacked histogram of `t mod period`.
pub fn period_occupancy(
    tags: &TagStream,
    schedule: &ProtocolSchedule,
    ephemeris: Option<&PassEphemeris>,
    bin_width_ps: i64,
) -> Result<PeriodOccupancy> {
    if bin_width_ps < 1 || bin_width_ps > schedule.period_ps {
        return Err(Error::domain(format!(
            "occupancy bin width must lie in [1, period] ps, got {bin_width_ps}"
        )));
    }
    let n = ((schedule.period_ps + bin_width_ps - 1) / bin_width_ps) as usize;
    let mut occ = PeriodOccupancy {
        bin_width_ps,
        period_ps: schedule.period_ps,
        closed: vec![0; n],
        open_signal: vec![0; n],
        open_other: vec![0; n],
    };
    for e in tags.events() {
        let i = (schedule.phase(e.time_ps) / bin_width_ps) as usize;
        let class = if !schedule.in_rx_window(e.time_ps) {
            &mut occ.closed
        } else if ephemeris.is_some_and(|eph| eph.in_signal_region(e.time_ps)) {
            &mut occ.open_signal
        } else {
            &mut occ.open_other
        };
        class[i] += 1;
    }
    Ok(occ)
}

/// Maximum-likelihood half-life of an exponential decay observed in the phase range
/// `[from_ps, to_ps)` of the stacked occupancy, in milliseconds.
pub fn fit_half_life(occ: &PeriodOccupancy, from_ps: i64, to_ps: i64) -> Result<f64> {
    let counts = occ.stacked();
    let mut n = 0.0;
    let mut sum_x = 0.0;
    for (i, c) in counts.iter().enumerate() {
        let a = occ.bin_start(i);
        if a >= from_ps && a + occ.bin_width_ps <= to_ps && *c > 0 {
            let x = (a - from_ps) as f64 + 0.5 * occ.bin_width_ps as f64;
            n += *c as f64;
            sum_x += *c as f64 * x;
        }
    }
    if n < 2.0 {
        return Err(Error::data("too few events to fit a decay"));
    }
    let mean = sum_x / n;
    let span = (to_ps - from_ps) as f64;
    // mean of an exponential truncated to [0, L]: 1/k - L / (e^{kL} - 1), decreasing in k
    let trunc_mean = |k: f64| 1.0 / k - span / (k * span).exp_m1();
    if mean >= span / 2.0 {
        return Err(Error::data("occupancy does not decay over the fitted range"));
    }
    let (mut lo, mut hi) = (1e-6 / span, 1e3 / span);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if trunc_mean(mid) > mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k = (lo * hi).sqrt();
    Ok(std::f64::consts::LN_2 / k / PS_PER_MS as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_sim::{RegularGrid, StreamMetadata, TagEvent};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const P: i64 = 10_000;

    fn stream(times: impl IntoIterator<Item = i64>) -> TagStream {
        TagStream::new(
            times
                .into_iter()
                .map(|t| TagEvent { time_ps: t, channel: 0, truth: None })
                .collect(),
            StreamMetadata::default(),
        )
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_residual(0, P), 0);
        assert_eq!(wrap_residual(P, P), 0);
        assert_eq!(wrap_residual(5_000, P), 5_000);
        assert_eq!(wrap_residual(-5_000, P), 5_000);
        assert_eq!(wrap_residual(5_001, P), -4_999);
        assert_eq!(wrap_residual(-4_999, P), -4_999);
        assert_eq!(wrap_residual(3 * P + 17, P), 17);
    }

    #[test]
    fn residuals_of_grid_hits() {
        let grid = RegularGrid { offset_ps: 250, pulse_period_ps: P };
        let s = stream([250, 250 + P, 250 + 7 * P + 33]);
        let rs = residuals(&s, &grid, None);
        assert_eq!(rs.values().collect::<Vec<_>>(), vec![0, 0, 33]);
        assert!(residuals(&stream([]), &grid, None).is_empty());
    }

    #[test]
    fn window_geometry_checked() {
        assert!(matches!(windowed_counts([], P, 2_000, 1_000), Err(Error::Usage(_))));
        assert!(matches!(windowed_counts([], P, 400, 5_000), Err(Error::Usage(_))));
        assert!(windowed_counts([], P, 400, 1_000).is_ok());
    }

    #[test]
    fn all_at_zero() {
        let c = windowed_counts(vec![0; 1000], P, 400, 1_000).unwrap();
        assert_eq!(c.n_tot_w, 1000);
        assert_eq!(c.n_bkg_w, 0.0);
    }

    #[test]
    fn uniform_background_window_matches_side_bands() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = RegularGrid { offset_ps: 0, pulse_period_ps: P };
        let times: Vec<i64> = (0..100_000).map(|_| rng.random_range(0..1_000_000_000_000i64)).collect();
        let rs = residuals(&stream(times), &grid, None);
        let c = windowed_counts(rs.values(), P, 400, 1_000).unwrap();
        let sigma = c.n_bkg_w.sqrt();
        assert!((c.n_tot_w as f64 - c.n_bkg_w).abs() < 3.0 * sigma, "{c:?}");
    }

    #[test]
    fn measured_noise_decomposition_snr() {
        // 700 + 195 + 1900 Hz over a 400 ps window of a 10 ns period
        let in_window = (700.0 + 195.0 + 1900.0) * 400.0 / 10_000.0;
        assert!((in_window - 111.8f64).abs() < 1e-9);
        assert!((58.0 / in_window - 0.52).abs() < 0.03);
    }

    #[test]
    fn filter_thresholds() {
        let mk = |k, r| IntervalStats {
            k,
            channel: 0,
            tau_s: 5.0,
            n_tot_w: 0,
            n_out: 0,
            n_bkg_w: 0.0,
            n_det: 0.0,
            r_det_hz: r,
            bkg_rate_w_hz: 0.0,
            snr: 0.0,
            selected: false,
        };
        let stats = vec![mk(0, 10.0), mk(1, 45.0), mk(2, -3.0)];
        assert_eq!(filter_intervals(&stats, 30.0).len(), 1);
        assert_eq!(filter_intervals(&stats, f64::NEG_INFINITY).len(), 3);
        assert_eq!(filter_intervals(&stats, f64::INFINITY).len(), 0);
        assert_eq!(filter_intervals(&stats[..2], 0.0).len(), 2);
    }

    #[test]
    fn empty_selection_is_no_signal() {
        use crate::link_budget::DiffractionModel;
        use crate::units::{LossDb, Transmittance};
        let budget = LinkBudget {
            model: DiffractionModel::Ffdp,
            t_diff: Transmittance::ONE,
            t_a: Transmittance::ONE,
            t_down: Transmittance::ONE,
            t_rx: Transmittance::ONE,
            l_down: LossDb::ZERO,
        };
        let s = estimate_pass_summary(&[], &budget, 1e8, 0.3, 0.05).unwrap();
        assert!(!s.is_signal());
    }

    #[test]
    fn histogram_edges_and_membership() {
        let h = Histogram::from_residuals([0, 1, 100, 101, -100, 5_000, -4_999], P, 100).unwrap();
        assert_eq!(h.edges[0], -5_000);
        assert_eq!(*h.edges.last().unwrap(), 5_000);
        assert!(h.edges.contains(&0));
        assert_eq!(h.total(), 7);
        // 0 lies in (-100, 0], 1 and 100 in (0, 100]
        assert_eq!(h.counts[h.bin_index(0).unwrap()], 1);
        assert_eq!(h.counts[h.bin_index(1).unwrap()], 2);
        assert_eq!(h.bin_index(1), h.bin_index(100));
        assert_ne!(h.bin_index(100), h.bin_index(101));
    }

    #[test]
    fn fluorescence_like_decay_fit() {
        let sched = ProtocolSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 5.0 * PS_PER_MS as f64;
        let k = std::f64::consts::LN_2 / h;
        let (a, b) = sched.rx_window_ps;
        let offset = (a - sched.slr_fire_ps) as f64;
        let mut times = Vec::new();
        for period in 0..2_000i64 {
            for _ in 0..10 {
                let x = -(rng.random::<f64>()).ln() / k + offset;
                let t = sched.slr_fire_ps + x as i64;
                if t < b {
                    times.push(period * sched.period_ps + t);
                }
            }
        }
        let occ = period_occupancy(&stream(times), &sched, None, PS_PER_MS / 10).unwrap();
        let fitted = fit_half_life(&occ, a, b).unwrap();
        assert!((fitted / 5.0 - 1.0).abs() < 0.1, "{fitted}");
        assert_eq!(occ.closed.iter().sum::<u64>(), 0);
    }

    #[test]
    fn empty_occupancy() {
        let occ = period_occupancy(&stream([]), &ProtocolSchedule::default(), None, PS_PER_MS).unwrap();
        assert!(occ.is_empty());
        assert_eq!(occ.len(), 200);
    }

    proptest! {
        #[test]
        fn wrap_range_and_congruence(d in -1_000_000_000i64..1_000_000_000, p in 2i64..100_000) {
            let p = p * 2;
            let r = wrap_residual(d, p);
            prop_assert!(r > -p / 2 && r <= p / 2);
            prop_assert_eq!((d - r).rem_euclid(p), 0);
        }

        #[test]
        fn histogram_exhaustive(rs in proptest::collection::vec(-4_999i64..=5_000, 0..500), bw in 1i64..700) {
            let h = Histogram::from_residuals(rs.iter().copied(), P, bw).unwrap();
            prop_assert_eq!(h.total(), rs.len() as u64);
            for r in rs {
                let i = h.bin_index(r).unwrap();
                prop_assert!(h.edges[i] < r && r <= h.edges[i + 1]);
            }
        }
    }
}

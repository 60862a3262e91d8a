use std::path::{Path, PathBuf};

use gnss_qc::analysis::{analyze_channel, fit_half_life, period_occupancy, residuals, PassSummary};
use gnss_qc::channel_sim::{simulate_pass, ExpectedArrivals, Truth};
use gnss_qc::units::{fwhm_to_sigma, PS_PER_MS};
use gnss_qc::{Error, Scenario};

fn scenario(name: &str) -> Scenario {
    let dir: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    Scenario::from_path(dir.join(format!("{name}.json"))).unwrap()
}

fn quiet(mut s: Scenario) -> Scenario {
    for rx in &mut s.receivers {
        rx.dark_rate_hz = 0.0;
    }
    s.noise.albedo_hz = 0.0;
    s.noise.fluorescence_hz = 0.0;
    s
}

#[test]
fn baseline_signal_count_matches_forward_rate() {
    let s = scenario("glonass134_19500");
    let tags = simulate_pass(&s, 60.0, 1).unwrap();
    let n = tags.count(Truth::Signal) as f64;

    // oracle: mu nu t_down t_rx times the time returns reach an open receiver
    let rate = s.expected_signal_rate_hz(0).unwrap();
    let rtt_ms = s.range_profile().unwrap().rtt_ps(0) as f64 / PS_PER_MS as f64;
    let duty = s.protocol.effective_duty_cycle(rtt_ms).unwrap();
    let expected = rate * duty * 60.0;
    assert!((n - expected).abs() < 3.0 * expected.sqrt(), "n={n} expected={expected}");
}

#[test]
fn zero_mu_gives_background_only() {
    let mut s = scenario("glonass134_19500");
    s.satellite.mu_sat = 0.0;
    let tags = simulate_pass(&s, 10.0, 5).unwrap();
    assert_eq!(tags.count(Truth::Signal), 0);
    assert!(tags.count(Truth::Dark) > 0);
}

#[test]
fn zero_duration_is_usage_error() {
    let s = scenario("glonass134_19500");
    assert!(matches!(simulate_pass(&s, 0.0, 1), Err(Error::Usage(_))));
}

#[test]
fn same_seed_same_stream() {
    let s = scenario("glonass131_20250");
    let a = simulate_pass(&s, 5.0, 77).unwrap();
    let b = simulate_pass(&s, 5.0, 77).unwrap();
    let c = simulate_pass(&s, 5.0, 78).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn class_rates_converge() {
    let s = scenario("glonass134_19500");
    let dur = 60.0;
    let tags = simulate_pass(&s, dur, 9).unwrap();
    let open_s = dur * (s.protocol.rx_window_ps.1 - s.protocol.rx_window_ps.0) as f64
        / s.protocol.period_ps as f64;
    let noise = s.channel_noise(0).unwrap();
    for (truth, expected) in [
        (Truth::Dark, noise.dark_rate_hz * dur),
        (Truth::Albedo, noise.albedo_hz * open_s),
    ] {
        let n = tags.count(truth) as f64;
        assert!((n - expected).abs() < 3.0 * expected.sqrt(), "{truth}: {n} vs {expected}");
    }
    // fluorescence is calibrated on the signal region of the receive window
    let eph = s.ephemeris().unwrap();
    let in_region = tags
        .events()
        .iter()
        .filter(|e| e.truth == Some(Truth::Fluorescence) && eph.in_signal_region(e.time_ps))
        .count() as f64;
    let rtt_ms = eph.profile.rtt_ps(0) as f64 / PS_PER_MS as f64;
    let region_s = dur * s.protocol.effective_duty_cycle(rtt_ms).unwrap();
    let expected = noise.fluorescence_hz * region_s;
    assert!(
        (in_region - expected).abs() < 3.0 * expected.sqrt(),
        "fluorescence {in_region} vs {expected}"
    );
}

#[test]
fn photons_only_while_shutter_open() {
    let s = scenario("glonass131_20250");
    let tags = simulate_pass(&s, 20.0, 4).unwrap();
    for e in tags.events() {
        if e.truth != Some(Truth::Dark) {
            assert!(s.protocol.in_rx_window(e.time_ps), "{e:?}");
        }
    }
    for ch in tags.channels() {
        let times: Vec<i64> = tags.channel(ch).map(|e| e.time_ps).collect();
        assert!(times.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn signal_residuals_follow_array_response() {
    let mut s = quiet(scenario("glonass134_20200"));
    s.satellite.mu_sat = 2_000.0;
    let tags = simulate_pass(&s, 60.0, 21).unwrap();
    let eph = s.ephemeris().unwrap();
    let mut rs: Vec<i64> = residuals(&tags, &eph, Some(0)).with_truth(Truth::Signal);
    assert!(rs.len() >= 100_000, "{}", rs.len());
    rs.truncate(100_000);
    rs.sort_unstable();
    let response = s.array_response().unwrap();
    let jitter = fwhm_to_sigma(s.receivers[0].jitter_fwhm_ps).unwrap();
    let n = rs.len() as f64;
    let mut ks: f64 = 0.0;
    let mut i = 0;
    while i < rs.len() {
        let r = rs[i];
        let mut j = i;
        while j < rs.len() && rs[j] == r {
            j += 1;
        }
        // integer residual r collects continuous delays in (r - 1/2, r + 1/2]
        let lo = response.cdf(r as f64 - 0.5, jitter);
        let hi = response.cdf(r as f64 + 0.5, jitter);
        ks = ks.max((i as f64 / n - lo).abs()).max((j as f64 / n - hi).abs());
        i = j;
    }
    assert!(ks < 0.02, "KS distance {ks}");
    assert_eq!(eph.pulse_period_ps(), 10_000);
}

#[test]
fn closed_shutter_holds_dark_counts_only() {
    let s = scenario("glonass134_19500");
    let tags = simulate_pass(&s, 60.0, 12).unwrap();
    let eph = s.ephemeris().unwrap();
    let occ = period_occupancy(&tags, &s.protocol, Some(&eph), PS_PER_MS).unwrap();
    let closed: u64 = occ.closed.iter().sum();
    let closed_s = 60.0
        * (1.0
            - (s.protocol.rx_window_ps.1 - s.protocol.rx_window_ps.0) as f64
                / s.protocol.period_ps as f64);
    let expected = s.receivers[0].dark_rate_hz * closed_s;
    assert!((closed as f64 - expected).abs() < 3.0 * expected.sqrt());
    assert_eq!(occ.total() as usize, tags.len());
    assert!(occ.open_signal.iter().sum::<u64>() > 0);
}

#[test]
fn fluorescence_decay_recovers_half_life() {
    let mut s = quiet(scenario("glonass134_19500"));
    s.satellite.mu_sat = 0.0;
    s.noise.fluorescence_hz = 5_000.0;
    let tags = simulate_pass(&s, 60.0, 8).unwrap();
    let occ = period_occupancy(&tags, &s.protocol, None, PS_PER_MS / 4).unwrap();
    let (a, b) = s.protocol.rx_window_ps;
    let h = fit_half_life(&occ, a.max(s.protocol.slr_fire_ps), b).unwrap();
    assert!((h / s.noise.fluorescence_half_life_ms - 1.0).abs() < 0.1, "half-life {h}");
}

#[test]
fn noise_only_pass_reports_no_signal() {
    let mut s = scenario("glonass134_19500");
    s.satellite.mu_sat = 0.0;
    let tags = simulate_pass(&s, 60.0, 2).unwrap();
    let eph = s.ephemeris().unwrap();
    let out = analyze_channel(
        &tags,
        &eph,
        0,
        &s.analysis,
        &s.channel_budget(0).unwrap(),
        s.transmitter.rep_rate_hz,
    )
    .unwrap();
    assert!(matches!(out.summary, PassSummary::NoSignal { .. }), "{:?}", out.summary);
    let n_det: f64 = out.stats.iter().map(|st| st.n_det).sum();
    let var: f64 = out.stats.iter().map(|st| st.n_tot_w as f64 + st.n_bkg_w * 0.05).sum();
    assert!(n_det.abs() < 3.0 * var.sqrt());
}

#[test]
fn spad_rate_is_about_five_times_pmt() {
    let s = scenario("glonass131_20250");
    let tags = simulate_pass(&s, 300.0, 3).unwrap();
    let eph = s.ephemeris().unwrap();
    let rate = |ch: u16| {
        analyze_channel(
            &tags,
            &eph,
            ch,
            &s.analysis,
            &s.channel_budget(ch).unwrap(),
            s.transmitter.rep_rate_hz,
        )
        .unwrap()
        .summary
        .r_det_hz()
        .unwrap()
    };
    let (spad, pmt) = (rate(0), rate(1));
    let ratio = spad / pmt;
    assert!((3.5..=7.0).contains(&ratio), "SPAD {spad} PMT {pmt}");
    assert!((spad - 27.0).abs() < 4.0, "SPAD {spad}");
}

#[test]
fn integrated_histogram_shows_ring_signature_at_nine_degrees() {
    let s = scenario("glonass134_20200");
    let tags = simulate_pass(&s, 300.0, 7).unwrap();
    let eph = s.ephemeris().unwrap();
    let out = analyze_channel(
        &tags,
        &eph,
        0,
        &s.analysis,
        &s.channel_budget(0).unwrap(),
        s.transmitter.rep_rate_hz,
    )
    .unwrap();
    let pp = out.peak_to_peak_ps.expect("signal pass has a signature");
    assert!((pp - 430.0).abs() <= 100.0, "peak-to-peak {pp}");
}

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gnss_qc::analysis::{analyze_channel, write_interval_csv, PassSummary};
use gnss_qc::ccr_response::{peak_to_peak, TemporalProfile, DEFAULT_MIN_SEPARATION_PS};
use gnss_qc::channel_sim::{simulate_pass, TagStream};
use gnss_qc::link_budget::{project_upgraded_link, DiffractionModel, LinkBudget, UpgradePlan};
use gnss_qc::{Error, Scenario};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gnss-qc", version, about = "Single-photon GNSS retro-reflector link tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Down-link and receiver losses for both diffraction models.
    Budget {
        #[arg(long)]
        scenario: PathBuf,
        /// Model marked as active in the report; defaults to the scenario's.
        #[arg(long)]
        model: Option<DiffractionModel>,
        /// Override the atmospheric loss.
        #[arg(long)]
        atmosphere_loss_db: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Simulate a tagged detection stream.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        duration_s: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tag CSV; the metadata sidecar goes next to it with a `.meta.json` suffix.
        #[arg(long)]
        out: PathBuf,
        /// Leave out the ground-truth column.
        #[arg(long)]
        no_truth: bool,
        #[arg(long)]
        model: Option<DiffractionModel>,
    },
    /// Interval statistics, integrated histograms and pass summary from a tag file.
    Analyze {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        tags: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Only this channel; all configured receivers otherwise.
        #[arg(long)]
        channel: Option<u16>,
        #[arg(long)]
        model: Option<DiffractionModel>,
    },
    /// Array temporal response and peak-to-peak table.
    Response {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        incidence_deg: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        bin_ps: i64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Scale the configured link to an upgraded transmitter and receiver.
    Project {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value_t = 0)]
        channel: u16,
        /// Measured detection rate; the forward model rate otherwise.
        #[arg(long)]
        r_det_hz: Option<f64>,
        #[arg(long)]
        model: Option<DiffractionModel>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gnss-qc: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data(_) | Error::Csv(_) => 3,
        Error::Domain(_) | Error::Usage(_) | Error::Io(_) | Error::Json(_) => 2,
    }
}

fn run(cmd: Command) -> gnss_qc::Result<()> {
    match cmd {
        Command::Budget {
            scenario,
            model,
            atmosphere_loss_db,
            json,
        } => {
            let mut s = load(&scenario, model)?;
            if let Some(db) = atmosphere_loss_db {
                s.geometry.atmosphere_loss_db = db;
                s.validate()?;
            }
            budget(&s, json)
        }
        Command::Simulate {
            scenario,
            duration_s,
            seed,
            out,
            no_truth,
            model,
        } => {
            let s = load(&scenario, model)?;
            let tags = simulate_pass(&s, duration_s, seed)?;
            create_parent(&out)?;
            let mut w = BufWriter::new(File::create(&out)?);
            tags.write_csv(&mut w, !no_truth)?;
            w.flush()?;
            let mut m = BufWriter::new(File::create(sidecar(&out))?);
            tags.write_metadata(&mut m)?;
            m.flush()?;
            println!("{} events written to {}", tags.len(), out.display());
            Ok(())
        }
        Command::Analyze {
            scenario,
            tags,
            out,
            channel,
            model,
        } => {
            let s = load(&scenario, model)?;
            let stream = TagStream::read_csv(BufReader::new(open(&tags)?))?;
            analyze(&s, &stream, &out, channel)
        }
        Command::Response {
            scenario,
            incidence_deg,
            bin_ps,
            out,
        } => {
            let s = load(&scenario, None)?;
            response(&s, &incidence_deg, bin_ps, &out)
        }
        Command::Project {
            scenario,
            plan,
            channel,
            r_det_hz,
            model,
            out,
        } => {
            let s = load(&scenario, model)?;
            let text = fs::read_to_string(&plan)
                .map_err(|e| Error::Usage(format!("{}: {e}", plan.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let plan: UpgradePlan = serde_path_to_error::deserialize(de).map_err(|e| {
                Error::Usage(format!("{}: {}: {}", plan.display(), e.path(), e.inner()))
            })?;
            project(&s, &plan, channel, r_det_hz, out.as_deref())
        }
    }
}

fn load(path: &Path, model: Option<DiffractionModel>) -> gnss_qc::Result<Scenario> {
    let mut s = Scenario::from_path(path)?;
    if let Some(m) = model {
        s.model = m;
    }
    Ok(s)
}

fn open(path: &Path) -> gnss_qc::Result<File> {
    File::open(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

fn create_parent(path: &Path) -> gnss_qc::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn provenance(w: &mut impl Write, hash: &str, seed: Option<u64>) -> gnss_qc::Result<()> {
    writeln!(w, "# scenario_hash={hash}")?;
    if let Some(seed) = seed {
        writeln!(w, "# seed={seed}")?;
    }
    Ok(())
}

fn csv_file(
    path: &Path,
    hash: &str,
    seed: Option<u64>,
    body: impl FnOnce(&mut BufWriter<File>) -> gnss_qc::Result<()>,
) -> gnss_qc::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    provenance(&mut w, hash, seed)?;
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BudgetRow {
    model: DiffractionModel,
    active: bool,
    range_km: f64,
    l_diff_db: f64,
    l_a_db: f64,
    l_down_db: f64,
    t_down: f64,
    receivers: Vec<ReceiverRow>,
}

#[derive(Serialize)]
struct ReceiverRow {
    channel: u16,
    l_rx_db: f64,
    t_rx: f64,
    expected_rate_hz: f64,
}

fn budget(s: &Scenario, json: bool) -> gnss_qc::Result<()> {
    let range = s.mean_range_m()?;
    let mut rows = Vec::new();
    for model in [DiffractionModel::Ffdp, DiffractionModel::CrossSection] {
        let b: LinkBudget = s.downlink_with(range, model)?;
        let mut receivers = Vec::new();
        for rx in &s.receivers {
            let rb = b.with_receiver(rx)?;
            receivers.push(ReceiverRow {
                channel: rx.channel_id,
                l_rx_db: rb.l_rx().value(),
                t_rx: rb.t_rx.value(),
                expected_rate_hz: gnss_qc::link_budget::signal_rate_hz(
                    s.satellite.mu_sat,
                    s.transmitter.rep_rate_hz,
                    rb.t_down,
                    rb.t_rx,
                ),
            });
        }
        rows.push(BudgetRow {
            model,
            active: model == s.model,
            range_km: range / 1e3,
            l_diff_db: b.t_diff.to_db().value(),
            l_a_db: b.t_a.to_db().value() + 0.0,
            l_down_db: b.l_down.value(),
            t_down: b.t_down.value(),
            receivers,
        });
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!("scenario {} ({})  range {:.1} km", s.name, s.hash(), range / 1e3);
    for r in &rows {
        let mark = if r.active { "*" } else { " " };
        println!(
            "{mark} {:<13} l_diff {:>6.2} dB  l_a {:>4.2} dB  l_down {:>6.2} dB  t_down {:.3e}",
            r.model.as_str(),
            r.l_diff_db,
            r.l_a_db,
            r.l_down_db,
            r.t_down
        );
        for rx in &r.receivers {
            println!(
                "    channel {:<3} l_rx {:>6.2} dB  t_rx {:.4}  R {:.1} Hz",
                rx.channel, rx.l_rx_db, rx.t_rx, rx.expected_rate_hz
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ChannelReport {
    peak_to_peak_ps: Option<f64>,
    #[serde(flatten)]
    summary: PassSummary,
}

#[derive(Serialize)]
struct AnalysisReport {
    scenario_hash: String,
    tags_scenario_hash: String,
    seed: Option<u64>,
    channels: Vec<ChannelReport>,
}

fn analyze(s: &Scenario, tags: &TagStream, out: &Path, only: Option<u16>) -> gnss_qc::Result<()> {
    let eph = s.ephemeris()?;
    let hash = s.hash();
    let seed = tags.metadata.seed;
    let channels: Vec<u16> = match only {
        Some(c) => {
            s.receiver(c)?;
            vec![c]
        }
        None => s.receivers.iter().map(|r| r.channel_id).collect(),
    };
    fs::create_dir_all(out)?;
    let mut reports = Vec::new();
    for ch in channels {
        let budget = s.channel_budget(ch)?;
        let a = analyze_channel(tags, &eph, ch, &s.analysis, &budget, s.transmitter.rep_rate_hz)?;
        csv_file(&out.join(format!("intervals_ch{ch}.csv")), &hash, seed, |w| {
            write_interval_csv(&a.stats, w)
        })?;
        csv_file(&out.join(format!("histogram_ch{ch}.csv")), &hash, seed, |w| {
            a.histogram.write_csv(w)
        })?;
        match &a.summary {
            PassSummary::Signal {
                r_det_hz,
                r_det_sigma_hz,
                snr,
                snr_sigma,
                mu_sat,
                mu_sat_sigma,
                intervals_selected,
                ..
            } => println!(
                "channel {ch}: R_det {r_det_hz:.2} +- {r_det_sigma_hz:.2} Hz  SNR {snr:.3} +- {snr_sigma:.3}  mu_sat {mu_sat:.2} +- {mu_sat_sigma:.2}  ({intervals_selected} intervals)"
            ),
            PassSummary::NoSignal { intervals_total, .. } => {
                println!("channel {ch}: no-signal ({intervals_total} intervals)")
            }
        }
        reports.push(ChannelReport {
            peak_to_peak_ps: a.peak_to_peak_ps,
            summary: a.summary,
        });
    }
    let report = AnalysisReport {
        scenario_hash: hash,
        tags_scenario_hash: tags.metadata.scenario_hash.clone(),
        seed,
        channels: reports,
    };
    let mut w = BufWriter::new(File::create(out.join("summary.json"))?);
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_profile(w: &mut impl Write, p: &TemporalProfile) -> gnss_qc::Result<()> {
    writeln!(w, "center_ps,density_per_ps")?;
    for (i, d) in p.densities.iter().enumerate() {
        writeln!(w, "{},{}", p.bin_center(i), d)?;
    }
    Ok(())
}

fn response(s: &Scenario, incidence_deg: &[f64], bin_ps: i64, out: &Path) -> gnss_qc::Result<()> {
    fs::create_dir_all(out)?;
    let hash = s.hash();
    let mut table = Vec::new();
    for &deg in incidence_deg {
        if !(deg.is_finite() && (0.0..90.0).contains(&deg)) {
            return Err(Error::Usage(format!("incidence {deg} deg must lie in [0, 90)")));
        }
        let profile = s.array_response_at(deg.to_radians())?.profile(bin_ps)?;
        let pp = peak_to_peak(&profile, DEFAULT_MIN_SEPARATION_PS);
        csv_file(&out.join(format!("profile_{deg}deg.csv")), &hash, None, |w| {
            write_profile(w, &profile)
        })?;
        println!("{deg:>6} deg  peak-to-peak {pp:>6.1} ps  fwhm {:>6.1} ps", profile.fwhm());
        table.push((deg, pp, profile.fwhm()));
    }
    csv_file(&out.join("peak_to_peak.csv"), &hash, None, |w| {
        writeln!(w, "incidence_deg,peak_to_peak_ps,fwhm_ps")?;
        for (deg, pp, fwhm) in &table {
            writeln!(w, "{deg},{pp},{fwhm}")?;
        }
        Ok(())
    })
}

#[derive(Serialize)]
struct ProjectionReport {
    scenario_hash: String,
    channel: u16,
    baseline: gnss_qc::link_budget::BaselineDecomposition,
    baseline_snr: f64,
    plan: UpgradePlan,
    projection: gnss_qc::link_budget::Projection,
}

fn project(
    s: &Scenario,
    plan: &UpgradePlan,
    channel: u16,
    r_det_hz: Option<f64>,
    out: Option<&Path>,
) -> gnss_qc::Result<()> {
    let baseline = s.baseline(channel, r_det_hz)?;
    let projection = project_upgraded_link(&baseline, plan)?;
    let report = ProjectionReport {
        scenario_hash: s.hash(),
        channel,
        baseline,
        baseline_snr: baseline.snr(),
        plan: *plan,
        projection,
    };
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => {
            create_parent(path)?;
            fs::write(path, text + "\n")?;
            println!(
                "R_det {:.4e} Hz  SNR {:.4e}",
                projection.r_det_hz, projection.snr
            );
        }
        None => println!("{text}"),
    }
    Ok(())
}

//! Pass description read from JSON. Keys carry their unit as a suffix.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::AnalysisParams;
use crate::ccr_response::{ArrayGeometry, ArrayResponse};
use crate::channel_sim::{NoiseModel, PassEphemeris, ProtocolSchedule, RangeProfile};
use crate::error::{Error, Result};
use crate::link_budget::{
    downlink_budget, receiver_transmittance, signal_rate_hz, ArrayShape, BaselineDecomposition,
    CcrArraySpec, DiffractionModel, LinkBudget, LinkGeometry, ReceiverSpec, Telescope,
};
use crate::units::{GaussianPulse, LossDb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub wavelength_nm: f64,
    pub telescope_diameter_m: f64,
    #[serde(default)]
    pub atmosphere_loss_db: f64,
    /// Constant slant range; exclusive with `range_profile_csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slant_range_km: Option<f64>,
    /// `t_s,range_m` table, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_profile_csv: Option<PathBuf>,
    /// Angle between the line of sight and the array normal.
    pub incidence_deg: f64,
    /// In-plane direction of the line of sight; maximum spread when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatelliteConfig {
    pub name: String,
    pub mu_sat: f64,
    pub array: CcrArraySpec,
    /// `x_m,y_m` cube positions, relative to the scenario file. Without it the
    /// cubes are laid out from the array shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmitterConfig {
    pub rep_rate_hz: f64,
    pub pulse_fwhm_ps: f64,
}

/// Background seen by the first receiver; other channels scale it by their
/// relative transmittance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkyNoise {
    pub fluorescence_hz: f64,
    #[serde(default = "default_half_life")]
    pub fluorescence_half_life_ms: f64,
    pub albedo_hz: f64,
}

fn default_half_life() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub geometry: GeometryConfig,
    pub satellite: SatelliteConfig,
    pub transmitter: TransmitterConfig,
    pub receivers: Vec<ReceiverSpec>,
    pub protocol: ProtocolSchedule,
    pub noise: SkyNoise,
    pub analysis: AnalysisParams,
    #[serde(default)]
    pub model: DiffractionModel,
    #[serde(skip)]
    resolved: Resolved,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Resolved {
    profile: Option<RangeProfile>,
    geometry: Option<ArrayGeometry>,
}

fn at<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Domain(m) | Error::Usage(m) => Error::Usage(format!("{key}: {m}")),
        other => other,
    })
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::usage(format!("{key} must be > 0, got {v}")))
    }
}

impl Scenario {
    /// Parses, resolves referenced CSV files against `base_dir` and validates.
    pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Usage(format!("{path}: {}", e.inner()))
        })?;
        s.resolve(base_dir.unwrap_or(Path::new(".")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read scenario {}: {e}", path.display())))?;
        Self::from_json_str(&text, path.parent())
    }

    fn resolve(&mut self, base: &Path) -> Result<()> {
        let open = |key: &str, rel: &Path| {
            let p = base.join(rel);
            File::open(&p).map_err(|e| Error::Usage(format!("{key}: cannot open {}: {e}", p.display())))
        };
        let profile = match (&self.geometry.slant_range_km, &self.geometry.range_profile_csv) {
            (Some(km), None) => {
                at("geometry.slant_range_km", RangeProfile::constant(km * 1e3, 1.0))?
            }
            (None, Some(rel)) => {
                let f = open("geometry.range_profile_csv", rel)?;
                RangeProfile::from_csv(f).map_err(|e| {
                    Error::Usage(format!("geometry.range_profile_csv: {e}"))
                })?
            }
            _ => {
                return Err(Error::usage(
                    "geometry: exactly one of slant_range_km and range_profile_csv is required",
                ))
            }
        };
        let array = &self.satellite.array;
        at("satellite.array", array.validate())?;
        let geometry = match &self.satellite.geometry_csv {
            Some(rel) => {
                let f = open("satellite.geometry_csv", rel)?;
                ArrayGeometry::from_csv(f, array.shape)
                    .map_err(|e| Error::Usage(format!("satellite.geometry_csv: {e}")))?
            }
            None => at("satellite.array.shape", default_geometry(array))?,
        };
        self.resolved = Resolved {
            profile: Some(profile),
            geometry: Some(geometry),
        };
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        positive("geometry.wavelength_nm", g.wavelength_nm)?;
        positive("geometry.telescope_diameter_m", g.telescope_diameter_m)?;
        at("geometry.atmosphere_loss_db", LossDb::new(g.atmosphere_loss_db).map(|_| ()))?;
        if !(0.0..90.0).contains(&g.incidence_deg) {
            return Err(Error::usage(format!(
                "geometry.incidence_deg must lie in [0, 90), got {}",
                g.incidence_deg
            )));
        }
        if g.azimuth_deg.is_some_and(|a| !a.is_finite()) {
            return Err(Error::usage("geometry.azimuth_deg must be finite"));
        }
        if !(self.satellite.mu_sat >= 0.0 && self.satellite.mu_sat.is_finite()) {
            return Err(Error::usage("satellite.mu_sat must be >= 0"));
        }
        at("satellite.array", self.satellite.array.validate())?;
        positive("transmitter.rep_rate_hz", self.transmitter.rep_rate_hz)?;
        positive("transmitter.pulse_fwhm_ps", self.transmitter.pulse_fwhm_ps)?;
        if self.receivers.is_empty() {
            return Err(Error::usage("receivers: at least one receiver is required"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for (i, rx) in self.receivers.iter().enumerate() {
            at(&format!("receivers[{i}]"), rx.validate())?;
            if !ids.insert(rx.channel_id) {
                return Err(Error::usage(format!(
                    "receivers[{i}].channel: duplicate channel {}",
                    rx.channel_id
                )));
            }
        }
        at("protocol", self.protocol.validate())?;
        let pulse_hz = 1e12 / self.protocol.pulse_period_ps as f64;
        if ((pulse_hz - self.transmitter.rep_rate_hz) / pulse_hz).abs() > 1e-9 {
            return Err(Error::usage(format!(
                "transmitter.rep_rate_hz {} disagrees with protocol.pulse_period_ns",
                self.transmitter.rep_rate_hz
            )));
        }
        at(
            "noise",
            NoiseModel {
                dark_rate_hz: 0.0,
                fluorescence_hz: self.noise.fluorescence_hz,
                fluorescence_half_life_ms: self.noise.fluorescence_half_life_ms,
                albedo_hz: self.noise.albedo_hz,
            }
            .validate(),
        )?;
        at("analysis", self.analysis.validate(self.protocol.pulse_period_ps))?;
        let profile = self.range_profile()?;
        at("geometry", profile.validate_gnss())?;
        let rtt_ms = profile.rtt_ps(0) as f64 / 1e9;
        if rtt_ms >= self.protocol.period_ps as f64 / 1e9 {
            return Err(Error::usage(format!(
                "geometry: round-trip time {rtt_ms:.3} ms exceeds the protocol period"
            )));
        }
        Ok(())
    }

    pub fn range_profile(&self) -> Result<&RangeProfile> {
        self.resolved
            .profile
            .as_ref()
            .ok_or_else(|| Error::usage("scenario range profile not resolved"))
    }

    pub fn array_geometry(&self) -> Result<&ArrayGeometry> {
        self.resolved
            .geometry
            .as_ref()
            .ok_or_else(|| Error::usage("scenario array geometry not resolved"))
    }

    /// Replaces the range profile (e.g. for a synthetic pass).
    pub fn set_range_profile(&mut self, profile: RangeProfile) {
        self.resolved.profile = Some(profile);
    }

    pub fn set_array_geometry(&mut self, geometry: ArrayGeometry) {
        self.resolved.geometry = Some(geometry);
    }

    pub fn ephemeris(&self) -> Result<PassEphemeris> {
        Ok(PassEphemeris::new(self.range_profile()?.clone(), self.protocol))
    }

    pub fn mean_range_m(&self) -> Result<f64> {
        Ok(self.range_profile()?.mean_range())
    }

    pub fn incidence_rad(&self) -> f64 {
        self.geometry.incidence_deg.to_radians()
    }

    pub fn azimuth_rad(&self) -> Option<f64> {
        self.geometry.azimuth_deg.map(f64::to_radians)
    }

    pub fn pulse(&self) -> Result<GaussianPulse> {
        GaussianPulse::centered(self.transmitter.pulse_fwhm_ps)
    }

    pub fn array_response(&self) -> Result<ArrayResponse> {
        self.array_response_at(self.incidence_rad())
    }

    pub fn array_response_at(&self, incidence_rad: f64) -> Result<ArrayResponse> {
        ArrayResponse::new(self.array_geometry()?, incidence_rad, self.azimuth_rad(), self.pulse()?)
    }

    pub fn link_geometry(&self, range_m: f64) -> Result<LinkGeometry> {
        Ok(LinkGeometry {
            wavelength_m: self.geometry.wavelength_nm * 1e-9,
            telescope: Telescope::new(self.geometry.telescope_diameter_m)?,
            range_m,
            array: self.satellite.array,
        })
    }

    pub fn atmosphere(&self) -> Result<LossDb> {
        LossDb::new(self.geometry.atmosphere_loss_db)
    }

    /// Down-link budget with the scenario's model at `range_m`.
    pub fn downlink_at(&self, range_m: f64) -> Result<LinkBudget> {
        self.downlink_with(range_m, self.model)
    }

    pub fn downlink_with(&self, range_m: f64, model: DiffractionModel) -> Result<LinkBudget> {
        downlink_budget(&self.link_geometry(range_m)?, model, self.atmosphere()?)
    }

    pub fn receiver(&self, channel: u16) -> Result<(usize, &ReceiverSpec)> {
        self.receivers
            .iter()
            .enumerate()
            .find(|(_, r)| r.channel_id == channel)
            .ok_or_else(|| Error::usage(format!("scenario has no receiver on channel {channel}")))
    }

    /// Budget at the mean range including the receiver of `channel`.
    pub fn channel_budget(&self, channel: u16) -> Result<LinkBudget> {
        let (_, rx) = self.receiver(channel)?;
        self.downlink_at(self.mean_range_m()?)?.with_receiver(rx)
    }

    /// Background of receiver `index`: own dark rate, sky terms scaled by
    /// `t_rx / t_rx(first receiver)`.
    pub fn channel_noise(&self, index: usize) -> Result<NoiseModel> {
        let rx = self
            .receivers
            .get(index)
            .ok_or_else(|| Error::usage(format!("no receiver at index {index}")))?;
        let scale =
            receiver_transmittance(rx)?.value() / receiver_transmittance(&self.receivers[0])?.value();
        Ok(NoiseModel {
            dark_rate_hz: rx.dark_rate_hz,
            fluorescence_hz: self.noise.fluorescence_hz * scale,
            fluorescence_half_life_ms: self.noise.fluorescence_half_life_ms,
            albedo_hz: self.noise.albedo_hz * scale,
        })
    }

    pub fn dead_times(&self) -> Option<BTreeMap<u16, i64>> {
        let m: BTreeMap<u16, i64> = self
            .receivers
            .iter()
            .filter_map(|r| r.dead_time_ps.map(|d| (r.channel_id, d)))
            .collect();
        (!m.is_empty()).then_some(m)
    }

    /// Forward signal rate `mu nu t_down t_rx` of `channel` at the mean range.
    pub fn expected_signal_rate_hz(&self, channel: u16) -> Result<f64> {
        let b = self.channel_budget(channel)?;
        Ok(signal_rate_hz(
            self.satellite.mu_sat,
            self.transmitter.rep_rate_hz,
            b.t_down,
            b.t_rx,
        ))
    }

    /// Signal and noise decomposition of `channel` as configured.
    pub fn baseline(&self, channel: u16, r_det_hz: Option<f64>) -> Result<BaselineDecomposition> {
        let (index, rx) = self.receiver(channel)?;
        let noise = self.channel_noise(index)?;
        Ok(BaselineDecomposition {
            r_det_hz: match r_det_hz {
                Some(r) => r,
                None => self.expected_signal_rate_hz(channel)?,
            },
            mu_sat: self.satellite.mu_sat,
            dark_hz: noise.dark_rate_hz,
            fluorescence_hz: noise.fluorescence_hz,
            albedo_hz: noise.albedo_hz,
            window_ps: self.analysis.window_ps as f64,
            rep_rate_hz: self.transmitter.rep_rate_hz,
            filter_band_nm: rx.filter_band_nm,
        })
    }

    /// Short SHA-256 over the canonical JSON and the resolved external tables.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).unwrap_or_default());
        if let Some(p) = &self.resolved.profile {
            h.update(serde_json::to_vec(p.samples()).unwrap_or_default());
        }
        if let Some(g) = &self.resolved.geometry {
            h.update(serde_json::to_vec(g.positions()).unwrap_or_default());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Cube layout implied by the declared outline and count.
pub fn default_geometry(array: &CcrArraySpec) -> Result<ArrayGeometry> {
    let n = array.count as usize;
    match array.shape {
        ArrayShape::Ring {
            outer_diameter_m, ..
        } => ArrayGeometry::ring(outer_diameter_m, n).map(|g| {
            // keep the declared outline (inner diameter included) when it admits the ring
            ArrayGeometry::new(g.positions().to_vec(), array.shape).unwrap_or(g)
        }),
        ArrayShape::Rectangle { width_m, height_m } => {
            ArrayGeometry::rectangle_count(width_m, height_m, n)
        }
        ArrayShape::Disk { diameter_m } => ArrayGeometry::filled_annulus(diameter_m, 0.0, n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
    }

    fn baseline() -> Scenario {
        Scenario::from_path(scenario_dir().join("glonass134_19500.json")).unwrap()
    }

    #[test]
    fn shipped_scenarios_load() {
        for name in ["glonass134_19500", "glonass134_20200", "glonass131_20250"] {
            let s = Scenario::from_path(scenario_dir().join(format!("{name}.json"))).unwrap();
            assert_eq!(s.name, name);
        }
    }

    #[test]
    fn baseline_budget() {
        let s = baseline();
        let b = s.channel_budget(0).unwrap();
        assert!((b.l_down.value() - 62.1).abs() < 0.01);
        assert!((b.l_rx().value() - 11.8).abs() < 0.02);
        assert_eq!(s.array_geometry().unwrap().len(), 50);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = baseline();
        assert_eq!(a.hash(), baseline().hash());
        let mut b = baseline();
        b.satellite.mu_sat = 14.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn bad_key_is_named() {
        let text = std::fs::read_to_string(scenario_dir().join("glonass134_19500.json")).unwrap();
        let broken = text.replace("\"rep_rate_hz\"", "\"rep_rate_mhz\"");
        let err = Scenario::from_json_str(&broken, Some(&scenario_dir())).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(err.to_string().contains("rep_rate_mhz"), "{err}");

        let negative = text.replace("\"detector_efficiency\": 0.5", "\"detector_efficiency\": -0.5");
        let err = Scenario::from_json_str(&negative, Some(&scenario_dir())).unwrap_err();
        assert!(err.to_string().contains("receivers[0]"), "{err}");
    }

    #[test]
    fn pmt_noise_scales_with_transmittance() {
        let s = Scenario::from_path(scenario_dir().join("glonass131_20250.json")).unwrap();
        let spad = s.channel_noise(0).unwrap();
        let pmt = s.channel_noise(1).unwrap();
        assert!((pmt.albedo_hz / spad.albedo_hz - 0.2).abs() < 1e-9);
    }

    #[test]
    fn rectangle_layout_fits() {
        let g = ArrayGeometry::rectangle_count(0.4, 0.3, 108).unwrap();
        assert_eq!(g.len(), 108);
    }
}

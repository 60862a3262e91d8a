//! Down-link and receiver budgets for a retroreflected single-photon channel.
//!
//! Two independent estimates of the diffraction transmittance are provided:
//! the far-field-diffraction-pattern (FFDP) model of an uncoated TIR corner
//! cube, and a top-hat model whose solid angle follows from the array's
//! optical cross-section. Both scale exactly as `1/R^2`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{LossDb, Transmittance};

/// Central intensity of a TIR corner cube relative to a circular aperture of equal area.
pub const TIR_CENTRAL_PEAK_FACTOR: f64 = 0.264;

/// Intensity of a lateral FFDP lobe relative to the central peak.
pub const LATERAL_LOBE_FACTOR: f64 = 0.3;

/// Below this mean detected photon number the Poisson detection probability
/// is replaced by its first-order expansion.
pub const LINEARIZATION_THRESHOLD: f64 = 1e-3;

/// A single corner-cube retroreflector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcrSpec {
    pub diameter_m: f64,
    pub reflectivity: f64,
    #[serde(default)]
    pub coated: bool,
}

impl CcrSpec {
    pub fn new(diameter_m: f64, reflectivity: f64, coated: bool) -> Result<Self> {
        let spec = CcrSpec {
            diameter_m,
            reflectivity,
            coated,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Uncoated 26 mm fused-silica cube with 0.93 reflectivity.
    pub fn glonass() -> Self {
        CcrSpec {
            diameter_m: 0.026,
            reflectivity: 0.93,
            coated: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.diameter_m > 0.0 && self.diameter_m < 0.2) {
            return Err(Error::domain(format!(
                "ccr diameter_m must lie in (0, 0.2) m, got {}",
                self.diameter_m
            )));
        }
        if !(self.reflectivity > 0.0 && self.reflectivity <= 1.0) {
            return Err(Error::domain(format!(
                "reflectivity must lie in (0, 1], got {}",
                self.reflectivity
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        PI * (self.diameter_m / 2.0).powi(2)
    }
}

/// Outline of a planar retroreflector array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrayShape {
    Ring {
        outer_diameter_m: f64,
        #[serde(default)]
        inner_diameter_m: f64,
    },
    Rectangle {
        width_m: f64,
        height_m: f64,
    },
    Disk {
        diameter_m: f64,
    },
}

impl ArrayShape {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ArrayShape::Ring {
                outer_diameter_m,
                inner_diameter_m,
            } => outer_diameter_m > 0.0 && (0.0..outer_diameter_m).contains(&inner_diameter_m),
            ArrayShape::Rectangle { width_m, height_m } => width_m > 0.0 && height_m > 0.0,
            ArrayShape::Disk { diameter_m } => diameter_m > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid array shape {self:?}")))
        }
    }

    /// Whether a point in the array plane lies inside the outline (boundary included).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        const EPS: f64 = 1e-9;
        match *self {
            ArrayShape::Ring {
                outer_diameter_m,
                inner_diameter_m,
            } => {
                let r = x.hypot(y);
                r <= outer_diameter_m / 2.0 + EPS && r >= inner_diameter_m / 2.0 - EPS
            }
            ArrayShape::Rectangle { width_m, height_m } => {
                x.abs() <= width_m / 2.0 + EPS && y.abs() <= height_m / 2.0 + EPS
            }
            ArrayShape::Disk { diameter_m } => x.hypot(y) <= diameter_m / 2.0 + EPS,
        }
    }
}

/// Retroreflector array as seen by the link budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcrArraySpec {
    pub ccr: CcrSpec,
    #[serde(rename = "ccr_count")]
    pub count: u32,
    /// Effective array area `A_RRA`, m^2.
    pub effective_area_m2: f64,
    /// Optical cross-section `Sigma`, m^2.
    pub cross_section_m2: f64,
    pub shape: ArrayShape,
}

impl CcrArraySpec {
    pub fn validate(&self) -> Result<()> {
        self.ccr.validate()?;
        self.shape.validate()?;
        if self.count == 0 {
            return Err(Error::domain("ccr_count must be > 0"));
        }
        let max_area = self.count as f64 * self.ccr.area();
        if !(self.effective_area_m2 > 0.0 && self.effective_area_m2 <= max_area * (1.0 + 1e-12)) {
            return Err(Error::domain(format!(
                "effective_area_m2 must lie in (0, {max_area:.6}] for {} CCRs, got {}",
                self.count, self.effective_area_m2
            )));
        }
        if !(self.cross_section_m2 > 0.0 && self.cross_section_m2.is_finite()) {
            return Err(Error::domain(format!(
                "cross_section_m2 must be > 0, got {}",
                self.cross_section_m2
            )));
        }
        Ok(())
    }

    /// Solid angle of the equivalent top-hat far-field pattern, `4 pi rho A_RRA / Sigma`.
    pub fn top_hat_solid_angle(&self) -> f64 {
        4.0 * PI * self.ccr.reflectivity * self.effective_area_m2 / self.cross_section_m2
    }
}

/// Ground receiving telescope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Telescope {
    #[serde(rename = "telescope_diameter_m")]
    pub diameter_m: f64,
}

impl Telescope {
    pub fn new(diameter_m: f64) -> Result<Self> {
        if diameter_m > 0.0 && diameter_m.is_finite() {
            Ok(Telescope { diameter_m })
        } else {
            Err(Error::domain(format!(
                "telescope_diameter_m must be > 0, got {diameter_m}"
            )))
        }
    }

    pub fn area(&self) -> f64 {
        PI * (self.diameter_m / 2.0).powi(2)
    }
}

fn default_filter_band() -> f64 {
    3.0
}

/// One detection channel of the ground receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverSpec {
    #[serde(rename = "channel")]
    pub channel_id: u16,
    #[serde(rename = "optics_loss_db")]
    pub optics_loss: LossDb,
    pub detector_efficiency: f64,
    pub dark_rate_hz: f64,
    pub jitter_fwhm_ps: f64,
    #[serde(default = "default_filter_band")]
    pub filter_band_nm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dead_time_ps: Option<i64>,
}

impl ReceiverSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.detector_efficiency > 0.0 && self.detector_efficiency <= 1.0) {
            return Err(Error::domain(format!(
                "detector_efficiency must lie in (0, 1], got {}",
                self.detector_efficiency
            )));
        }
        if !(self.dark_rate_hz >= 0.0 && self.dark_rate_hz.is_finite()) {
            return Err(Error::domain(format!(
                "dark_rate_hz must be >= 0, got {}",
                self.dark_rate_hz
            )));
        }
        if !(self.jitter_fwhm_ps > 0.0 && self.jitter_fwhm_ps.is_finite()) {
            return Err(Error::domain(format!(
                "jitter_fwhm_ps must be > 0, got {}",
                self.jitter_fwhm_ps
            )));
        }
        if !(self.filter_band_nm > 0.0) {
            return Err(Error::domain("filter_band_nm must be > 0"));
        }
        if matches!(self.dead_time_ps, Some(d) if d < 0) {
            return Err(Error::domain("dead_time_ps must be >= 0"));
        }
        Ok(())
    }
}

/// Which diffraction estimate drives the down-link budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffractionModel {
    #[default]
    Ffdp,
    CrossSection,
}

impl DiffractionModel {
    pub const ALL: [DiffractionModel; 2] = [DiffractionModel::Ffdp, DiffractionModel::CrossSection];

    pub fn as_str(&self) -> &'static str {
        match self {
            DiffractionModel::Ffdp => "ffdp",
            DiffractionModel::CrossSection => "cross-section",
        }
    }
}

impl FromStr for DiffractionModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffdp" => Ok(DiffractionModel::Ffdp),
            "cross-section" | "cross_section" => Ok(DiffractionModel::CrossSection),
            other => Err(Error::usage(format!(
                "unknown diffraction model '{other}' (expected ffdp or cross-section)"
            ))),
        }
    }
}

impl fmt::Display for DiffractionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Geometry needed to evaluate the down-link at one slant range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGeometry {
    pub wavelength_m: f64,
    pub telescope: Telescope,
    pub range_m: f64,
    pub array: CcrArraySpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkBudget {
    pub model: DiffractionModel,
    pub t_diff: Transmittance,
    pub t_a: Transmittance,
    pub t_down: Transmittance,
    pub t_rx: Transmittance,
    pub l_down: LossDb,
}

impl LinkBudget {
    pub fn with_receiver(mut self, rx: &ReceiverSpec) -> Result<Self> {
        self.t_rx = receiver_transmittance(rx)?;
        Ok(self)
    }

    pub fn l_rx(&self) -> LossDb {
        self.t_rx.to_db()
    }
}

/// Diffraction transmittance of a single uncoated corner cube received on a lateral lobe.
///
/// `t = 0.264 * 0.3 * A_ccr * A_tel / (lambda^2 R^2)`, clamped to 1 where the far-field
/// expression exceeds unity.
pub fn diffraction_ffdp(
    ccr: &CcrSpec,
    tel: &Telescope,
    wavelength_m: f64,
    range_m: f64,
) -> Result<Transmittance> {
    diffraction_ffdp_scaled(ccr, tel, wavelength_m, range_m, 1)
}

/// As [`diffraction_ffdp`] with the single-cube result multiplied by `illuminated` cubes.
pub fn diffraction_ffdp_scaled(
    ccr: &CcrSpec,
    tel: &Telescope,
    wavelength_m: f64,
    range_m: f64,
    illuminated: u32,
) -> Result<Transmittance> {
    ccr.validate()?;
    if ccr.coated {
        return Err(Error::domain(
            "FFDP model applies to uncoated (TIR) corner cubes only",
        ));
    }
    if !(range_m > 0.0 && range_m.is_finite()) {
        return Err(Error::domain(format!("range must be > 0, got {range_m}")));
    }
    if !(wavelength_m > 0.0 && wavelength_m.is_finite()) {
        return Err(Error::domain(format!(
            "wavelength must be > 0, got {wavelength_m}"
        )));
    }
    if illuminated == 0 {
        return Err(Error::domain("illuminated CCR count must be > 0"));
    }
    let t = TIR_CENTRAL_PEAK_FACTOR * LATERAL_LOBE_FACTOR * ccr.area() * tel.area()
        / (wavelength_m * wavelength_m * range_m * range_m)
        * illuminated as f64;
    Transmittance::clamped(t)
}

/// Top-hat diffraction transmittance from the array cross-section,
/// `t = Sigma / (4 pi rho A_RRA) * A_tel / R^2`.
pub fn diffraction_cross_section(
    array: &CcrArraySpec,
    tel: &Telescope,
    range_m: f64,
) -> Result<Transmittance> {
    if !(range_m > 0.0 && range_m.is_finite()) {
        return Err(Error::domain(format!("range must be > 0, got {range_m}")));
    }
    let omega = array.top_hat_solid_angle();
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::domain(
            "cross-section model needs positive rho, A_RRA and Sigma",
        ));
    }
    Transmittance::clamped(tel.area() / (omega * range_m * range_m))
}

/// Cross-section that makes [`diffraction_cross_section`] return `target` at `range_m`.
pub fn matching_cross_section(
    target: Transmittance,
    array: &CcrArraySpec,
    tel: &Telescope,
    range_m: f64,
) -> f64 {
    target.value() * 4.0 * PI * array.ccr.reflectivity * array.effective_area_m2 * range_m * range_m
        / tel.area()
}

pub fn downlink_budget(
    geometry: &LinkGeometry,
    model: DiffractionModel,
    atmosphere: LossDb,
) -> Result<LinkBudget> {
    if !(geometry.wavelength_m > 0.0) {
        return Err(Error::domain("wavelength must be > 0"));
    }
    let t_diff = match model {
        DiffractionModel::Ffdp => diffraction_ffdp(
            &geometry.array.ccr,
            &geometry.telescope,
            geometry.wavelength_m,
            geometry.range_m,
        )?,
        DiffractionModel::CrossSection => {
            geometry.array.validate()?;
            diffraction_cross_section(&geometry.array, &geometry.telescope, geometry.range_m)?
        }
    };
    let t_a = atmosphere.to_transmittance();
    let t_down = t_diff * t_a;
    Ok(LinkBudget {
        model,
        t_diff,
        t_a,
        t_down,
        t_rx: Transmittance::ONE,
        l_down: t_down.to_db(),
    })
}

/// `t_rx = 10^(-optics/10) * eta`.
pub fn receiver_transmittance(rx: &ReceiverSpec) -> Result<Transmittance> {
    rx.validate()?;
    Transmittance::new(rx.optics_loss.to_transmittance().value() * rx.detector_efficiency)
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::domain(format!("{name} must be > 0, got {v}")))
    }
}

/// Mean photon number per pulse at the satellite, `R_det / (nu t_down t_rx)`.
///
/// Negative rates are passed through: background-subtracted estimates may
/// legitimately fluctuate below zero.
pub fn estimate_mu_sat(
    r_det_hz: f64,
    rep_rate_hz: f64,
    t_down: Transmittance,
    t_rx: Transmittance,
) -> Result<f64> {
    if !r_det_hz.is_finite() {
        return Err(Error::domain("detection rate must be finite"));
    }
    positive("repetition rate", rep_rate_hz)?;
    Ok(r_det_hz / (rep_rate_hz * t_down.value() * t_rx.value()))
}

/// Forward signal rate `mu nu t_down t_rx` (linear regime).
pub fn signal_rate_hz(mu_sat: f64, rep_rate_hz: f64, t_down: Transmittance, t_rx: Transmittance) -> f64 {
    mu_sat * rep_rate_hz * t_down.value() * t_rx.value()
}

/// Probability that a pulse yields at least one detection, `1 - exp(-mu t_down t_rx)`.
pub fn detection_probability(mu_sat: f64, t_down: Transmittance, t_rx: Transmittance) -> f64 {
    let mean = mu_sat * t_down.value() * t_rx.value();
    if mean < LINEARIZATION_THRESHOLD {
        mean
    } else {
        -(-mean).exp_m1()
    }
}

/// Measured signal and noise decomposition of an existing link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineDecomposition {
    pub r_det_hz: f64,
    pub mu_sat: f64,
    pub dark_hz: f64,
    pub fluorescence_hz: f64,
    pub albedo_hz: f64,
    pub window_ps: f64,
    pub rep_rate_hz: f64,
    pub filter_band_nm: f64,
}

impl BaselineDecomposition {
    pub fn background_hz(&self) -> f64 {
        self.dark_hz + self.fluorescence_hz + self.albedo_hz
    }

    /// In-window signal-to-background ratio, the background being uniform over one pulse period.
    pub fn snr(&self) -> f64 {
        self.r_det_hz / (self.background_hz() * self.window_ps * 1e-12 * self.rep_rate_hz)
    }

    fn validate(&self) -> Result<()> {
        positive("baseline mu_sat", self.mu_sat)?;
        positive("baseline window_ps", self.window_ps)?;
        positive("baseline rep_rate_hz", self.rep_rate_hz)?;
        positive("baseline filter_band_nm", self.filter_band_nm)?;
        for (name, v) in [
            ("baseline r_det_hz", self.r_det_hz),
            ("baseline dark_hz", self.dark_hz),
            ("baseline fluorescence_hz", self.fluorescence_hz),
            ("baseline albedo_hz", self.albedo_hz),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Transmitter and receiver upgrades applied on top of a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpgradePlan {
    pub source_mu: f64,
    /// Down-going beam semi-angle; informational, its effect enters through `diffraction_gain_db`.
    pub tx_divergence_semi_angle_rad: f64,
    #[serde(rename = "diffraction_gain_db")]
    pub diffraction_gain: LossDb,
    pub bs_removal_signal_factor: f64,
    pub filter_band_nm: f64,
    #[serde(default = "one")]
    pub albedo_scale: f64,
    pub fluorescence_removed: bool,
    pub dark_rate_hz: f64,
    pub window_ps: f64,
    pub rep_rate_hz: f64,
}

fn one() -> f64 {
    1.0
}

impl UpgradePlan {
    /// Plan that reproduces `baseline` unchanged.
    pub fn identity(baseline: &BaselineDecomposition) -> Self {
        UpgradePlan {
            source_mu: baseline.mu_sat,
            tx_divergence_semi_angle_rad: 0.0,
            diffraction_gain: LossDb::ZERO,
            bs_removal_signal_factor: 1.0,
            filter_band_nm: baseline.filter_band_nm,
            albedo_scale: 1.0,
            fluorescence_removed: false,
            dark_rate_hz: baseline.dark_hz,
            window_ps: baseline.window_ps,
            rep_rate_hz: baseline.rep_rate_hz,
        }
    }

    /// Active source with mu = 1, a 10 urad down-going beam (+20 dB), no beam-splitter
    /// losses (x4 signal), a 0.3 nm filter, no fluorescence, 400 Hz dark counts,
    /// a 40 ps window and a 1 GHz repetition rate.
    pub fn active_source_1ghz() -> Self {
        UpgradePlan {
            source_mu: 1.0,
            tx_divergence_semi_angle_rad: 10e-6,
            diffraction_gain: LossDb(20.0),
            bs_removal_signal_factor: 4.0,
            filter_band_nm: 0.3,
            albedo_scale: 1.0,
            fluorescence_removed: true,
            dark_rate_hz: 400.0,
            window_ps: 40.0,
            rep_rate_hz: 1e9,
        }
    }

    fn validate(&self) -> Result<()> {
        positive("source_mu", self.source_mu)?;
        positive("bs_removal_signal_factor", self.bs_removal_signal_factor)?;
        positive("filter_band_nm", self.filter_band_nm)?;
        positive("albedo_scale", self.albedo_scale)?;
        positive("window_ps", self.window_ps)?;
        positive("rep_rate_hz", self.rep_rate_hz)?;
        if !(self.dark_rate_hz >= 0.0) {
            return Err(Error::domain("dark_rate_hz must be >= 0"));
        }
        if !(self.tx_divergence_semi_angle_rad >= 0.0) {
            return Err(Error::domain("tx_divergence_semi_angle_rad must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Projection {
    pub r_det_hz: f64,
    pub snr: f64,
    /// Total background rate while the signal can arrive.
    pub background_hz: f64,
    /// Background rate falling inside the detection window.
    pub in_window_background_hz: f64,
    pub signal_gain: f64,
    pub albedo_factor: f64,
}

/// Scales a measured link to an upgraded transmitter/receiver.
///
/// Signal: `R * (mu'/mu) * 10^(gain/10) * k_bs * (nu'/nu)`. Background: the plan's
/// dark rate, fluorescence kept or dropped, albedo scaled by the filter-band ratio,
/// `k_bs` and `albedo_scale`. The SNR uses the in-window fraction `w * nu'`.
pub fn project_upgraded_link(
    baseline: &BaselineDecomposition,
    plan: &UpgradePlan,
) -> Result<Projection> {
    baseline.validate()?;
    plan.validate()?;
    let period_ps = 1e12 / plan.rep_rate_hz;
    if plan.window_ps > period_ps {
        return Err(Error::usage(format!(
            "window {} ps exceeds the pulse period {period_ps} ps",
            plan.window_ps
        )));
    }
    let signal_gain = (plan.source_mu / baseline.mu_sat)
        * 10f64.powf(plan.diffraction_gain.value() / 10.0)
        * plan.bs_removal_signal_factor
        * (plan.rep_rate_hz / baseline.rep_rate_hz);
    let r_det_hz = baseline.r_det_hz * signal_gain;

    let albedo_factor = (plan.filter_band_nm / baseline.filter_band_nm)
        * plan.bs_removal_signal_factor
        * plan.albedo_scale;
    let fluorescence = if plan.fluorescence_removed {
        0.0
    } else {
        baseline.fluorescence_hz
    };
    let background_hz = plan.dark_rate_hz + fluorescence + baseline.albedo_hz * albedo_factor;
    let in_window_background_hz = background_hz * plan.window_ps / period_ps;
    let snr = if in_window_background_hz > 0.0 {
        r_det_hz / in_window_background_hz
    } else {
        f64::INFINITY
    };
    Ok(Projection {
        r_det_hz,
        snr,
        background_hz,
        in_window_background_hz,
        signal_gain,
        albedo_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::db_from_transmittance;
    use proptest::prelude::*;

    fn tel() -> Telescope {
        Telescope::new(1.5).unwrap()
    }

    fn ring_array() -> CcrArraySpec {
        let ccr = CcrSpec::glonass();
        CcrArraySpec {
            ccr,
            count: 50,
            effective_area_m2: 50.0 * ccr.area(),
            cross_section_m2: 4.6e7,
            shape: ArrayShape::Ring {
                outer_diameter_m: 0.42,
                inner_diameter_m: 0.0,
            },
        }
    }

    fn spad() -> ReceiverSpec {
        ReceiverSpec {
            channel_id: 0,
            optics_loss: LossDb::new(8.8).unwrap(),
            detector_efficiency: 0.5,
            dark_rate_hz: 400.0,
            jitter_fwhm_ps: 40.0,
            filter_band_nm: 3.0,
            dead_time_ps: None,
        }
    }

    #[test]
    fn telescope_area() {
        let t = tel();
        assert!((t.area() / (PI * 0.75 * 0.75) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ffdp_at_19500_km() {
        let t = diffraction_ffdp(&CcrSpec::glonass(), &tel(), 532e-9, 19_500e3).unwrap();
        assert!((t.value() / 6.905e-7 - 1.0).abs() < 1e-3, "{}", t.value());
        assert!((t.to_db().value() - 61.61).abs() < 0.01);
    }

    #[test]
    fn ffdp_at_20200_km() {
        let t = diffraction_ffdp(&CcrSpec::glonass(), &tel(), 532e-9, 20_200e3).unwrap();
        assert!((t.value() / 6.434e-7 - 1.0).abs() < 1e-3, "{}", t.value());
        assert!((t.to_db().value() - 61.92).abs() < 0.01);
    }

    #[test]
    fn ffdp_inverse_square() {
        let a = diffraction_ffdp(&CcrSpec::glonass(), &tel(), 532e-9, 2e6).unwrap();
        let b = diffraction_ffdp(&CcrSpec::glonass(), &tel(), 532e-9, 2e7).unwrap();
        assert!((b.value() / a.value() - 1e-2).abs() < 1e-14);
    }

    #[test]
    fn ffdp_clamps_near_field() {
        let t = diffraction_ffdp(&CcrSpec::glonass(), &tel(), 532e-9, 10.0).unwrap();
        assert_eq!(t.value(), 1.0);
    }

    #[test]
    fn ffdp_rejects_bad_inputs() {
        let ccr = CcrSpec::glonass();
        assert!(matches!(diffraction_ffdp(&ccr, &tel(), 532e-9, 0.0), Err(Error::Domain(_))));
        assert!(diffraction_ffdp(&ccr, &tel(), 0.0, 1e7).is_err());
        let coated = CcrSpec { coated: true, ..ccr };
        assert!(diffraction_ffdp(&coated, &tel(), 532e-9, 1e7).is_err());
    }

    #[test]
    fn ffdp_count_multiplier_is_opt_in() {
        let ccr = CcrSpec::glonass();
        let one = diffraction_ffdp(&ccr, &tel(), 532e-9, 2e7).unwrap();
        let three = diffraction_ffdp_scaled(&ccr, &tel(), 532e-9, 2e7, 3).unwrap();
        assert!((three.value() / one.value() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_section_matches_ffdp_when_sigma_derived() {
        let mut array = ring_array();
        let target = Transmittance::new(6.9e-7).unwrap();
        array.cross_section_m2 = matching_cross_section(target, &array, &tel(), 19_500e3);
        let t = diffraction_cross_section(&array, &tel(), 19_500e3).unwrap();
        assert!((t.value() / 6.9e-7 - 1.0).abs() < 1e-12);
        // Omega is the implied top-hat solid angle
        let omega = array.top_hat_solid_angle();
        assert!((tel().area() / (omega * 19_500e3f64.powi(2)) / t.value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_section_linear_in_sigma_and_inverse_square() {
        let array = ring_array();
        let a = diffraction_cross_section(&array, &tel(), 2e7).unwrap();
        let doubled = CcrArraySpec {
            cross_section_m2: 2.0 * array.cross_section_m2,
            ..array
        };
        let b = diffraction_cross_section(&doubled, &tel(), 2e7).unwrap();
        assert!((b.value() / a.value() - 2.0).abs() < 1e-12);
        let c = diffraction_cross_section(&array, &tel(), 4e7).unwrap();
        assert!((a.value() / c.value() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cross_section_rejects_degenerate() {
        let mut array = ring_array();
        array.effective_area_m2 = 0.0;
        assert!(diffraction_cross_section(&array, &tel(), 2e7).is_err());
        assert!(diffraction_cross_section(&ring_array(), &tel(), 0.0).is_err());
    }

    #[test]
    fn array_validation() {
        let mut a = ring_array();
        assert!(a.validate().is_ok());
        a.effective_area_m2 = 51.0 * a.ccr.area();
        assert!(a.validate().is_err());
        let mut b = ring_array();
        b.count = 0;
        assert!(b.validate().is_err());
    }

    fn geometry(range_m: f64) -> LinkGeometry {
        LinkGeometry {
            wavelength_m: 532e-9,
            telescope: tel(),
            range_m,
            array: ring_array(),
        }
    }

    #[test]
    fn downlink_examples() {
        let l_a = LossDb::new(0.4).unwrap();
        let b = downlink_budget(&geometry(19_500e3), DiffractionModel::Ffdp, l_a).unwrap();
        assert!((b.l_down.value() - 62.01).abs() < 0.01);
        assert!((b.t_down.value() - b.t_diff.value() * b.t_a.value()).abs() < 1e-20);
        let b = downlink_budget(&geometry(20_200e3), DiffractionModel::Ffdp, l_a).unwrap();
        assert!((b.l_down.value() - 62.32).abs() < 0.01);
        let b0 = downlink_budget(&geometry(19_500e3), DiffractionModel::Ffdp, LossDb::ZERO).unwrap();
        assert_eq!(b0.l_down, b0.t_diff.to_db());
    }

    #[test]
    fn model_tags_parse() {
        assert_eq!("ffdp".parse::<DiffractionModel>().unwrap(), DiffractionModel::Ffdp);
        assert_eq!(
            "cross-section".parse::<DiffractionModel>().unwrap(),
            DiffractionModel::CrossSection
        );
        assert!(matches!("airy".parse::<DiffractionModel>(), Err(Error::Usage(_))));
    }

    #[test]
    fn receiver_examples() {
        let t = receiver_transmittance(&spad()).unwrap();
        assert!((t.value() - 0.0659).abs() < 1e-4);
        assert!((t.to_db().value() - 11.8).abs() < 0.02);

        let ideal = ReceiverSpec {
            optics_loss: LossDb::ZERO,
            detector_efficiency: 1.0,
            ..spad()
        };
        assert_eq!(receiver_transmittance(&ideal).unwrap().value(), 1.0);

        let split = ReceiverSpec {
            optics_loss: LossDb::new(8.8).unwrap() + LossDb::new(3.0).unwrap(),
            ..spad()
        };
        let l = receiver_transmittance(&split).unwrap().to_db().value();
        assert!((l - 14.8).abs() < 0.02, "{l}");
    }

    #[test]
    fn mu_sat_examples() {
        let t = |db: f64| LossDb::new(db).unwrap().to_transmittance();
        let mu = estimate_mu_sat(58.0, 1e8, t(62.1), t(11.8)).unwrap();
        assert!((mu - 14.24).abs() < 0.01, "{mu}");
        assert!((mu / 15.0 - 1.0).abs() < 0.06);
        let mu = estimate_mu_sat(27.0, 1e8, t(62.6), t(14.8)).unwrap();
        assert!((mu - 14.8).abs() < 0.05, "{mu}");
        assert_eq!(estimate_mu_sat(0.0, 1e8, t(62.1), t(11.8)).unwrap(), 0.0);
        assert!(estimate_mu_sat(58.0, 0.0, t(62.1), t(11.8)).is_err());
    }

    #[test]
    fn detection_probability_regimes() {
        let t = |db: f64| LossDb::new(db).unwrap().to_transmittance();
        let p = detection_probability(15.0, t(62.0), t(11.8));
        assert!((p - 15.0 * t(62.0).value() * t(11.8).value()).abs() < 1e-20);
        let p = detection_probability(1.0, Transmittance::ONE, Transmittance::ONE);
        assert!((p - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert_eq!(detection_probability(0.0, Transmittance::ONE, Transmittance::ONE), 0.0);
    }

    fn measured_baseline() -> BaselineDecomposition {
        BaselineDecomposition {
            r_det_hz: 58.0,
            mu_sat: 15.0,
            dark_hz: 700.0,
            fluorescence_hz: 195.0,
            albedo_hz: 1900.0,
            window_ps: 400.0,
            rep_rate_hz: 1e8,
            filter_band_nm: 3.0,
        }
    }

    #[test]
    fn baseline_snr_from_noise_decomposition() {
        let snr = measured_baseline().snr();
        assert!((snr - 58.0 / 111.8).abs() < 1e-9);
        assert!((snr - 0.52).abs() < 0.01);
    }

    #[test]
    fn projection_of_active_source() {
        let p = project_upgraded_link(&measured_baseline(), &UpgradePlan::active_source_1ghz()).unwrap();
        // 58 * (1/15) * 100 * 4 * 10
        assert!((p.r_det_hz - 58.0 * 4000.0 / 15.0).abs() < 1e-6);
        // 400 Hz dark + 1900 * 0.1 * 4 albedo, 4 % in window
        assert!((p.background_hz - 1160.0).abs() < 1e-9);
        assert!((p.in_window_background_hz - 46.4).abs() < 1e-9);
        assert!((p.snr - p.r_det_hz / 46.4).abs() < 1e-9);
        assert!(p.r_det_hz > 1.4e4 && p.r_det_hz < 1.6e4);
        assert!(p.snr > 300.0 && p.snr < 350.0);
    }

    #[test]
    fn projection_identity_is_fixed_point() {
        let b = measured_baseline();
        let p = project_upgraded_link(&b, &UpgradePlan::identity(&b)).unwrap();
        assert!((p.r_det_hz - b.r_det_hz).abs() < 1e-12);
        assert!((p.snr - b.snr()).abs() < 1e-12);
        assert!((p.background_hz - b.background_hz()).abs() < 1e-9);
    }

    #[test]
    fn projection_rejects_window_longer_than_period() {
        let mut plan = UpgradePlan::active_source_1ghz();
        plan.window_ps = 1500.0;
        assert!(matches!(
            project_upgraded_link(&measured_baseline(), &plan),
            Err(Error::Usage(_))
        ));
        plan.window_ps = 40.0;
        plan.source_mu = 0.0;
        assert!(project_upgraded_link(&measured_baseline(), &plan).is_err());
    }

    #[test]
    fn projection_linear_in_source_mu() {
        let b = measured_baseline();
        let plan = UpgradePlan::active_source_1ghz();
        let half = UpgradePlan {
            source_mu: 0.5,
            ..plan
        };
        let p1 = project_upgraded_link(&b, &plan).unwrap();
        let p2 = project_upgraded_link(&b, &half).unwrap();
        assert!((p2.r_det_hz / p1.r_det_hz - 0.5).abs() < 1e-12);
        assert!((p2.snr / p1.snr - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn both_models_scale_inverse_square(r in 1e6f64..5e7, k in 1.1f64..10.0) {
            let ccr = CcrSpec::glonass();
            let a = diffraction_ffdp(&ccr, &tel(), 532e-9, r).unwrap().value();
            let b = diffraction_ffdp(&ccr, &tel(), 532e-9, r * k).unwrap().value();
            prop_assert!(b < a);
            prop_assert!((a / b / (k * k) - 1.0).abs() < 1e-12);
            let arr = ring_array();
            let a = diffraction_cross_section(&arr, &tel(), r).unwrap().value();
            let b = diffraction_cross_section(&arr, &tel(), r * k).unwrap().value();
            prop_assert!(b < a);
            prop_assert!((a / b / (k * k) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn mu_inversion_round_trip(mu in 0.01f64..100.0, l_down in 40.0f64..80.0, l_rx in 0.0f64..25.0) {
            let t_down = LossDb::new(l_down).unwrap().to_transmittance();
            let t_rx = LossDb::new(l_rx).unwrap().to_transmittance();
            let rate = signal_rate_hz(mu, 1e8, t_down, t_rx);
            let back = estimate_mu_sat(rate, 1e8, t_down, t_rx).unwrap();
            prop_assert!((back / mu - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn models_agree_at_20000_km_with_matched_sigma() {
        let mut array = ring_array();
        let t_ffdp = diffraction_ffdp(&array.ccr, &tel(), 532e-9, 19_500e3).unwrap();
        array.cross_section_m2 = matching_cross_section(t_ffdp, &array, &tel(), 19_500e3);
        let a = diffraction_ffdp(&array.ccr, &tel(), 532e-9, 20_000e3).unwrap();
        let b = diffraction_cross_section(&array, &tel(), 20_000e3).unwrap();
        let gap = (db_from_transmittance(a.value()).unwrap().value()
            - db_from_transmittance(b.value()).unwrap().value())
        .abs();
        assert!(gap < 1.0);
    }
}

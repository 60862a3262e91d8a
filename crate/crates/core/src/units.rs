//! Physical constants, dB bookkeeping and the Gaussian pulse primitive.
//!
//! Times are carried as integer picoseconds wherever they label events
//! (tags, expected arrivals, schedule edges). Widths and offsets that are
//! only ever used inside continuous densities stay `f64` picoseconds.

use std::fmt;
use std::ops::{Add, Mul};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Picoseconds per second.
pub const PS_PER_S: f64 = 1e12;

/// Integer picoseconds per millisecond.
pub const PS_PER_MS: i64 = 1_000_000_000;

/// Integer picoseconds per nanosecond.
pub const PS_PER_NS: i64 = 1_000;

/// `2 * sqrt(2 ln 2)`: ratio between a Gaussian's FWHM and its standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Power transmittance of an optical element or channel, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Transmittance(f64);

impl Transmittance {
    pub const ONE: Transmittance = Transmittance(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 && value <= 1.0 {
            Ok(Transmittance(value))
        } else {
            Err(Error::domain(format!(
                "transmittance must lie in (0, 1], got {value}"
            )))
        }
    }

    /// Clamps `value` into `(0, 1]`; values `<= 0` are rejected.
    pub fn clamped(value: f64) -> Result<Self> {
        if value.is_nan() || value <= 0.0 {
            return Err(Error::domain(format!(
                "transmittance must be positive, got {value}"
            )));
        }
        Ok(Transmittance(value.min(1.0)))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn to_db(self) -> LossDb {
        LossDb(-10.0 * self.0.log10())
    }
}

impl Mul for Transmittance {
    type Output = Transmittance;

    fn mul(self, rhs: Transmittance) -> Transmittance {
        // Product of two values in (0, 1] stays in (0, 1] barring underflow.
        Transmittance((self.0 * rhs.0).max(f64::MIN_POSITIVE))
    }
}

impl TryFrom<f64> for Transmittance {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Transmittance::new(value)
    }
}

impl From<Transmittance> for f64 {
    fn from(t: Transmittance) -> f64 {
        t.0
    }
}

impl fmt::Display for Transmittance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4e}", self.0)
    }
}

/// Loss in decibels, `l = -10 log10(t)`; never negative.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct LossDb(pub(crate) f64);

impl LossDb {
    pub const ZERO: LossDb = LossDb(0.0);

    pub fn new(db: f64) -> Result<Self> {
        if db.is_finite() && db >= 0.0 {
            Ok(LossDb(db))
        } else {
            Err(Error::domain(format!("loss must be a finite dB value >= 0, got {db}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn to_transmittance(self) -> Transmittance {
        Transmittance(10f64.powf(-self.0 / 10.0).max(f64::MIN_POSITIVE))
    }
}

impl Add for LossDb {
    type Output = LossDb;

    fn add(self, rhs: LossDb) -> LossDb {
        LossDb(self.0 + rhs.0)
    }
}

impl TryFrom<f64> for LossDb {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        LossDb::new(value)
    }
}

impl From<LossDb> for f64 {
    fn from(l: LossDb) -> f64 {
        l.0
    }
}

impl fmt::Display for LossDb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} dB", self.0)
    }
}

pub fn db_from_transmittance(t: f64) -> Result<LossDb> {
    Ok(Transmittance::new(t)?.to_db())
}

pub fn transmittance_from_db(l: f64) -> Result<Transmittance> {
    Ok(LossDb::new(l)?.to_transmittance())
}

pub fn fwhm_to_sigma(fwhm_ps: f64) -> Result<f64> {
    if fwhm_ps.is_finite() && fwhm_ps > 0.0 {
        Ok(fwhm_ps / FWHM_PER_SIGMA)
    } else {
        Err(Error::domain(format!("FWHM must be positive, got {fwhm_ps}")))
    }
}

/// Standard normal cumulative distribution.
pub(crate) fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Gaussian temporal pulse parameterised by its FWHM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPulse {
    fwhm_ps: f64,
    center_ps: f64,
}

impl GaussianPulse {
    pub fn new(fwhm_ps: f64, center_ps: f64) -> Result<Self> {
        fwhm_to_sigma(fwhm_ps)?;
        if !center_ps.is_finite() {
            return Err(Error::domain("pulse center must be finite"));
        }
        Ok(GaussianPulse { fwhm_ps, center_ps })
    }

    pub fn centered(fwhm_ps: f64) -> Result<Self> {
        Self::new(fwhm_ps, 0.0)
    }

    pub fn fwhm(&self) -> f64 {
        self.fwhm_ps
    }

    pub fn center(&self) -> f64 {
        self.center_ps
    }

    pub fn sigma(&self) -> f64 {
        self.fwhm_ps / FWHM_PER_SIGMA
    }

    pub fn shifted(&self, by_ps: f64) -> Self {
        GaussianPulse {
            fwhm_ps: self.fwhm_ps,
            center_ps: self.center_ps + by_ps,
        }
    }

    /// Probability density per picosecond.
    pub fn density(&self, t_ps: f64) -> f64 {
        let s = self.sigma();
        let z = (t_ps - self.center_ps) / s;
        (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    pub fn cdf(&self, t_ps: f64) -> f64 {
        std_normal_cdf((t_ps - self.center_ps) / self.sigma())
    }

    /// Probability mass in `[a, b)`.
    pub fn mass(&self, a_ps: f64, b_ps: f64) -> f64 {
        self.cdf(b_ps) - self.cdf(a_ps)
    }

    /// Gaussian whose variance is the sum of both (convolution of the densities).
    pub fn convolve(&self, other: &GaussianPulse) -> GaussianPulse {
        let sigma = self.sigma().hypot(other.sigma());
        GaussianPulse {
            fwhm_ps: sigma * FWHM_PER_SIGMA,
            center_ps: self.center_ps + other.center_ps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_transmittance_is_zero_db() {
        assert_eq!(db_from_transmittance(1.0).unwrap().value(), 0.0);
    }

    #[test]
    fn table_down_link_loss() {
        let l = db_from_transmittance(10f64.powf(-6.21)).unwrap();
        assert!((l.value() - 62.1).abs() < 1e-12);
    }

    #[test]
    fn half_is_three_db() {
        let l = db_from_transmittance(0.5).unwrap();
        assert!((l.value() - 3.0103).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_transmittance_rejected() {
        for bad in [0.0, -0.1, 1.000001, f64::NAN, f64::INFINITY] {
            assert!(matches!(db_from_transmittance(bad), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn db_to_transmittance_examples() {
        assert_eq!(transmittance_from_db(0.0).unwrap().value(), 1.0);
        assert!((transmittance_from_db(3.0).unwrap().value() - 0.50119).abs() < 1e-5);
        assert!((transmittance_from_db(11.8).unwrap().value() - 0.06607).abs() < 1e-5);
        assert!(matches!(transmittance_from_db(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn fwhm_sigma_examples() {
        assert!((fwhm_to_sigma(100.0).unwrap() - 42.466).abs() < 1e-3);
        assert!((fwhm_to_sigma(40.0).unwrap() - 16.986).abs() < 1e-3);
        assert!((fwhm_to_sigma(2.3548).unwrap() - 1.0).abs() < 1e-4);
        assert!(fwhm_to_sigma(0.0).is_err());
        assert!(fwhm_to_sigma(-5.0).is_err());
    }

    #[test]
    fn fwhm_constant_matches_definition() {
        assert!((FWHM_PER_SIGMA - 2.0 * (2.0 * 2f64.ln()).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pulse_density_integrates_to_one() {
        let p = GaussianPulse::new(100.0, 37.0).unwrap();
        // trapezoid over +-10 sigma
        let s = p.sigma();
        let n = 20_000;
        let (a, b) = (37.0 - 10.0 * s, 37.0 + 10.0 * s);
        let h = (b - a) / n as f64;
        let mut acc = 0.5 * (p.density(a) + p.density(b));
        for i in 1..n {
            acc += p.density(a + i as f64 * h);
        }
        assert!((acc * h - 1.0).abs() < 1e-9);
        assert!((p.mass(a, b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_at_half_max_matches_fwhm() {
        let p = GaussianPulse::centered(100.0).unwrap();
        let ratio = p.density(50.0) / p.density(0.0);
        assert!((ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn convolution_adds_variances() {
        let a = GaussianPulse::centered(100.0).unwrap();
        let b = GaussianPulse::centered(40.0).unwrap();
        let c = a.convolve(&b);
        assert!((c.fwhm() - (100f64.powi(2) + 40f64.powi(2)).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn round_trip_million_samples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1_000_000 {
            // log-uniform over (1e-12, 1]
            let t = 10f64.powf(-12.0 * rng.random::<f64>());
            let l = db_from_transmittance(t).unwrap();
            let back = l.to_transmittance().value();
            assert!(((back - t) / t).abs() < 1e-12, "t={t} back={back}");
        }
    }

    proptest! {
        #[test]
        fn db_is_additive(e1 in 0.0f64..12.0, e2 in 0.0f64..12.0) {
            let t1 = Transmittance::new(10f64.powf(-e1)).unwrap();
            let t2 = Transmittance::new(10f64.powf(-e2)).unwrap();
            let lhs = (t1 * t2).to_db().value();
            let rhs = t1.to_db().value() + t2.to_db().value();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn db_round_trip(l in 0.0f64..120.0) {
            let back = LossDb::new(l).unwrap().to_transmittance().to_db().value();
            prop_assert!((back - l).abs() <= 1e-12 * l.max(1.0));
        }
    }
}

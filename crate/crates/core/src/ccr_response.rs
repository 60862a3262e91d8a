//! Far-field lobe offset and temporal signature of a flat retroreflector array.
//!
//! Under oblique incidence each cube returns the pulse with a delay set by its
//! position along the projected line of sight. The array response is the
//! equal-weight sum of identical pulses shifted by those delays.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link_budget::ArrayShape;
use crate::units::{std_normal_cdf, GaussianPulse, SPEED_OF_LIGHT, PS_PER_S};

/// Angular offset of the lateral FFDP lobes in units of `lambda / D_ccr`.
pub const LOBE_OFFSET_FACTOR: f64 = 1.4;

/// Default minimum separation between the two peaks reported by [`peak_to_peak`].
pub const DEFAULT_MIN_SEPARATION_PS: f64 = 150.0;

/// Default boxcar width (bins) applied before peak search.
pub const DEFAULT_SMOOTHING_BINS: usize = 3;

/// Positions of the cube centres in the array plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    positions: Vec<[f64; 2]>,
    shape: ArrayShape,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<[f64; 2]>, shape: ArrayShape) -> Result<Self> {
        shape.validate()?;
        if positions.is_empty() {
            return Err(Error::usage("array geometry needs at least one CCR"));
        }
        if let Some(p) = positions
            .iter()
            .find(|p| !p[0].is_finite() || !p[1].is_finite() || !shape.contains(p[0], p[1]))
        {
            return Err(Error::domain(format!(
                "CCR at ({}, {}) lies outside the declared {shape:?}",
                p[0], p[1]
            )));
        }
        Ok(ArrayGeometry { positions, shape })
    }

    /// `count` cube centres spaced uniformly in angle on a circle of diameter `outer_diameter_m`.
    pub fn ring(outer_diameter_m: f64, count: usize) -> Result<Self> {
        let r = outer_diameter_m / 2.0;
        let positions = (0..count)
            .map(|k| {
                let phi = 2.0 * PI * k as f64 / count as f64;
                [r * phi.cos(), r * phi.sin()]
            })
            .collect();
        Self::new(
            positions,
            ArrayShape::Ring {
                outer_diameter_m,
                inner_diameter_m: 0.0,
            },
        )
    }

    /// Densest single ring of non-overlapping cubes of diameter `ccr_diameter_m`.
    pub fn packed_ring(outer_diameter_m: f64, ccr_diameter_m: f64) -> Result<Self> {
        if !(ccr_diameter_m > 0.0) {
            return Err(Error::domain("ccr diameter must be > 0"));
        }
        let count = (PI * outer_diameter_m / ccr_diameter_m).floor() as usize;
        Self::ring(outer_diameter_m, count.max(1))
    }

    /// Rectangular grid of cubes at `pitch_m`, centred on the origin.
    pub fn rectangle_grid(width_m: f64, height_m: f64, pitch_m: f64) -> Result<Self> {
        if !(pitch_m > 0.0) {
            return Err(Error::domain("grid pitch must be > 0"));
        }
        let nx = ((width_m / pitch_m).floor() as usize).max(1);
        let ny = ((height_m / pitch_m).floor() as usize).max(1);
        let mut positions = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                positions.push([
                    (ix as f64 - (nx - 1) as f64 / 2.0) * pitch_m,
                    (iy as f64 - (ny - 1) as f64 / 2.0) * pitch_m,
                ]);
            }
        }
        Self::new(positions, ArrayShape::Rectangle { width_m, height_m })
    }

    /// First `count` cell centres of a near-square grid filling the rectangle.
    pub fn rectangle_count(width_m: f64, height_m: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::usage("array geometry needs at least one CCR"));
        }
        let nx = ((count as f64 * width_m / height_m).sqrt().ceil() as usize).clamp(1, count);
        let ny = count.div_ceil(nx);
        let (dx, dy) = (width_m / nx as f64, height_m / ny as f64);
        let positions = (0..count)
            .map(|k| {
                let (ix, iy) = (k % nx, k / nx);
                [
                    (ix as f64 + 0.5) * dx - width_m / 2.0,
                    (iy as f64 + 0.5) * dy - height_m / 2.0,
                ]
            })
            .collect();
        Self::new(positions, ArrayShape::Rectangle { width_m, height_m })
    }

    /// `count` cubes on a sunflower spiral filling a disk, or an annulus when
    /// `inner_diameter_m > 0`.
    pub fn filled_annulus(outer_diameter_m: f64, inner_diameter_m: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::usage("array geometry needs at least one CCR"));
        }
        let golden = PI * (3.0 - 5f64.sqrt());
        let (r_in, r_out) = (inner_diameter_m / 2.0, outer_diameter_m / 2.0);
        let positions = (0..count)
            .map(|k| {
                let f = (k as f64 + 0.5) / count as f64;
                let r = (r_in * r_in + f * (r_out * r_out - r_in * r_in)).sqrt();
                let phi = golden * k as f64;
                [r * phi.cos(), r * phi.sin()]
            })
            .collect();
        let shape = if inner_diameter_m > 0.0 {
            ArrayShape::Ring {
                outer_diameter_m,
                inner_diameter_m,
            }
        } else {
            ArrayShape::Disk {
                diameter_m: outer_diameter_m,
            }
        };
        Self::new(positions, shape)
    }

    /// Reads `x_m,y_m` rows.
    pub fn from_csv<R: std::io::Read>(input: R, shape: ArrayShape) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            x_m: f64,
            y_m: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut positions = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::data(format!("geometry row {}: {e}", i + 1)))?;
            positions.push([row.x_m, row.y_m]);
        }
        Self::new(positions, shape)
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn shape(&self) -> ArrayShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// In-plane azimuth along which the projected extent of the array is largest.
    pub fn max_spread_azimuth(&self) -> f64 {
        let mut best = (0.0, 0.0);
        for (i, a) in self.positions.iter().enumerate() {
            for b in &self.positions[i + 1..] {
                let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
                if d2 > best.0 + 1e-18 {
                    best = (d2, (b[1] - a[1]).atan2(b[0] - a[0]));
                }
            }
        }
        best.1.rem_euclid(PI)
    }
}

/// Angle between the FFDP centre and its lateral lobes, `1.4 lambda / D`.
pub fn lobe_displacement(wavelength_m: f64, ccr_diameter_m: f64) -> Result<f64> {
    if !(ccr_diameter_m > 0.0) {
        return Err(Error::domain(format!(
            "ccr diameter must be > 0, got {ccr_diameter_m}"
        )));
    }
    if !(wavelength_m > 0.0) {
        return Err(Error::domain(format!(
            "wavelength must be > 0, got {wavelength_m}"
        )));
    }
    Ok(LOBE_OFFSET_FACTOR * wavelength_m / ccr_diameter_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AberrationCheck {
    /// Receiver sits on a lateral lobe.
    pub on_lateral_lobe: bool,
    /// `|theta_d - v_ab|`, radians.
    pub gap_rad: f64,
}

pub fn velocity_aberration_check(
    lobe_offset_rad: f64,
    aberration_rad: f64,
    tolerance_rad: f64,
) -> AberrationCheck {
    let gap_rad = (lobe_offset_rad - aberration_rad).abs();
    AberrationCheck {
        on_lateral_lobe: gap_rad <= tolerance_rad,
        gap_rad,
    }
}

fn check_incidence(incidence_rad: f64) -> Result<()> {
    if (0.0..PI / 2.0).contains(&incidence_rad) {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "incidence must lie in [0, pi/2), got {incidence_rad}"
        )))
    }
}

/// Two-way delay of each cube, `2 (p . u) sin(incidence) / c`, in picoseconds (not re-centred).
pub fn ccr_path_delays(
    geom: &ArrayGeometry,
    incidence_rad: f64,
    azimuth_rad: f64,
) -> Result<Vec<f64>> {
    check_incidence(incidence_rad)?;
    let (uy, ux) = azimuth_rad.sin_cos();
    let scale = 2.0 * incidence_rad.sin() / SPEED_OF_LIGHT * PS_PER_S;
    Ok(geom
        .positions
        .iter()
        .map(|p| (p[0] * ux + p[1] * uy) * scale)
        .collect())
}

/// Per-cube delays re-centred to zero mean.
pub fn ccr_time_offsets(
    geom: &ArrayGeometry,
    incidence_rad: f64,
    azimuth_rad: f64,
) -> Result<Vec<f64>> {
    let mut delays = ccr_path_delays(geom, incidence_rad, azimuth_rad)?;
    let mean = delays.iter().sum::<f64>() / delays.len() as f64;
    for d in &mut delays {
        *d -= mean;
    }
    Ok(delays)
}

/// Binned probability density over residual time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalProfile {
    pub bin_width_ps: i64,
    /// Left edge of bin 0.
    pub origin_ps: i64,
    pub densities: Vec<f64>,
}

impl TemporalProfile {
    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.origin_ps as f64 + (i as f64 + 0.5) * self.bin_width_ps as f64
    }

    /// Sum of densities times the bin width.
    pub fn area(&self) -> f64 {
        self.densities.iter().sum::<f64>() * self.bin_width_ps as f64
    }

    pub fn mean(&self) -> f64 {
        let w: f64 = self.densities.iter().sum();
        self.densities
            .iter()
            .enumerate()
            .map(|(i, d)| d * self.bin_center(i))
            .sum::<f64>()
            / w
    }

    /// Profile with a uniform floor added to every bin (no renormalisation).
    pub fn with_floor(&self, floor: f64) -> TemporalProfile {
        TemporalProfile {
            densities: self.densities.iter().map(|d| d + floor).collect(),
            ..self.clone()
        }
    }

    /// Centred boxcar average over `width` bins; edges average over the bins available.
    pub fn smoothed(&self, width: usize) -> TemporalProfile {
        TemporalProfile {
            densities: boxcar(&self.densities, width),
            ..self.clone()
        }
    }

    /// Full width at half maximum, linearly interpolated between bin centres.
    pub fn fwhm(&self) -> f64 {
        let Some((imax, &max)) = self
            .densities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
        else {
            return 0.0;
        };
        let half = max / 2.0;
        let cross = |i: usize, j: usize| {
            let (a, b) = (self.densities[i], self.densities[j]);
            let f = (half - a) / (b - a);
            self.bin_center(i) + f * (self.bin_center(j) - self.bin_center(i))
        };
        let left = (1..=imax)
            .rev()
            .find(|&i| self.densities[i - 1] < half)
            .map(|i| cross(i - 1, i))
            .unwrap_or(self.bin_center(0));
        let right = (imax..self.len() - 1)
            .find(|&i| self.densities[i + 1] < half)
            .map(|i| cross(i, i + 1))
            .unwrap_or(self.bin_center(self.len() - 1));
        right - left
    }
}

pub(crate) fn boxcar(values: &[f64], width: usize) -> Vec<f64> {
    if width <= 1 || values.is_empty() {
        return values.to_vec();
    }
    let half_lo = (width - 1) / 2;
    let half_hi = width / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half_lo);
            let hi = (i + half_hi).min(values.len() - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Mixture of shifted copies of one Gaussian pulse, one per cube.
#[derive(Debug, Clone)]
pub struct ArrayResponse {
    offsets_ps: Vec<f64>,
    weights: Vec<f64>,
    pulse: GaussianPulse,
    picker: WeightedIndex<f64>,
}

impl ArrayResponse {
    /// Equal-weight response; `azimuth_rad = None` selects the maximum-spread direction.
    pub fn new(
        geom: &ArrayGeometry,
        incidence_rad: f64,
        azimuth_rad: Option<f64>,
        pulse: GaussianPulse,
    ) -> Result<Self> {
        Self::weighted(geom, incidence_rad, azimuth_rad, pulse, None)
    }

    /// Response with optional per-cube weights (e.g. effective-area factors).
    pub fn weighted(
        geom: &ArrayGeometry,
        incidence_rad: f64,
        azimuth_rad: Option<f64>,
        pulse: GaussianPulse,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        if geom.is_empty() {
            return Err(Error::usage("array geometry is empty"));
        }
        let azimuth = azimuth_rad.unwrap_or_else(|| geom.max_spread_azimuth());
        let offsets_ps = ccr_time_offsets(geom, incidence_rad, azimuth)?;
        let weights = match weights {
            None => vec![1.0 / offsets_ps.len() as f64; offsets_ps.len()],
            Some(w) => {
                if w.len() != offsets_ps.len() {
                    return Err(Error::usage(format!(
                        "{} weights given for {} CCRs",
                        w.len(),
                        offsets_ps.len()
                    )));
                }
                if w.iter().any(|x| !(*x >= 0.0)) {
                    return Err(Error::domain("CCR weights must be >= 0"));
                }
                let total: f64 = w.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::domain("CCR weights sum to zero"));
                }
                w.iter().map(|x| x / total).collect()
            }
        };
        let picker = WeightedIndex::new(&weights)
            .map_err(|e| Error::domain(format!("invalid CCR weights: {e}")))?;
        Ok(ArrayResponse {
            offsets_ps,
            weights,
            pulse,
            picker,
        })
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets_ps
    }

    pub fn pulse(&self) -> GaussianPulse {
        self.pulse
    }

    /// Cumulative distribution of the response after convolving with an extra
    /// zero-mean Gaussian of standard deviation `extra_sigma_ps`.
    pub fn cdf(&self, t_ps: f64, extra_sigma_ps: f64) -> f64 {
        let sigma = self.pulse.sigma().hypot(extra_sigma_ps);
        let c = self.pulse.center();
        self.offsets_ps
            .iter()
            .zip(&self.weights)
            .map(|(o, w)| w * std_normal_cdf((t_ps - c - o) / sigma))
            .sum()
    }

    /// Draws one delay from the response (cube chosen by weight, then the pulse shape).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = self.picker.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        self.pulse.center() + self.offsets_ps[k] + z * self.pulse.sigma()
    }

    /// Bin-integrated density normalised to unit area.
    pub fn profile(&self, bin_width_ps: i64) -> Result<TemporalProfile> {
        if bin_width_ps < 1 || bin_width_ps as f64 > self.pulse.fwhm() / 4.0 {
            return Err(Error::usage(format!(
                "bin width {bin_width_ps} ps must lie in [1, FWHM/4 = {}] ps",
                self.pulse.fwhm() / 4.0
            )));
        }
        let sigma = self.pulse.sigma();
        let c = self.pulse.center();
        let lo = self.offsets_ps.iter().cloned().fold(f64::INFINITY, f64::min) + c - 6.0 * sigma;
        let hi = self
            .offsets_ps
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            + c
            + 6.0 * sigma;
        let bw = bin_width_ps as f64;
        let origin_ps = (lo / bw).floor() as i64 * bin_width_ps;
        let n = ((hi - origin_ps as f64) / bw).ceil() as usize;
        let mut densities = vec![0.0; n];
        for (o, w) in self.offsets_ps.iter().zip(&self.weights) {
            let g = self.pulse.shifted(*o);
            for (i, d) in densities.iter_mut().enumerate() {
                let a = origin_ps as f64 + i as f64 * bw;
                *d += w * g.mass(a, a + bw);
            }
        }
        let total: f64 = densities.iter().sum();
        for d in &mut densities {
            *d /= total * bw;
        }
        Ok(TemporalProfile {
            bin_width_ps,
            origin_ps,
            densities,
        })
    }
}

/// Summed equal-weight impulse response of the array at one incidence.
pub fn array_impulse_response(
    geom: &ArrayGeometry,
    incidence_rad: f64,
    azimuth_rad: f64,
    pulse: GaussianPulse,
    bin_width_ps: i64,
) -> Result<TemporalProfile> {
    ArrayResponse::new(geom, incidence_rad, Some(azimuth_rad), pulse)?.profile(bin_width_ps)
}

/// Distance between the two highest local maxima at least `min_separation_ps` apart,
/// after the default 3-bin boxcar. Zero when only one peak exists.
pub fn peak_to_peak(profile: &TemporalProfile, min_separation_ps: f64) -> f64 {
    peak_to_peak_with(profile, min_separation_ps, DEFAULT_SMOOTHING_BINS)
}

/// As [`peak_to_peak`] with an explicit boxcar width. Peak positions are refined
/// by a parabola through the maximum bin and its neighbours.
pub fn peak_to_peak_with(
    profile: &TemporalProfile,
    min_separation_ps: f64,
    smoothing_bins: usize,
) -> f64 {
    let d = boxcar(&profile.densities, smoothing_bins);
    let peaks = local_maxima(&d);
    let Some(&first) = peaks.first() else {
        return 0.0;
    };
    let bw = profile.bin_width_ps as f64;
    let pos = |i: usize| {
        let (a, b, c) = (d[i - 1], d[i], d[i + 1]);
        let curv = a - 2.0 * b + c;
        let shift = if curv < 0.0 { 0.5 * (a - c) / curv } else { 0.0 };
        (i as f64 + shift.clamp(-0.5, 0.5)) * bw
    };
    let x0 = pos(first);
    peaks
        .iter()
        .skip(1)
        .map(|&i| (pos(i) - x0).abs())
        .find(|sep| *sep >= min_separation_ps)
        .unwrap_or(0.0)
}

/// Indices `i` with `d[i-1] < d[i] >= d[i+1]`, highest first.
fn local_maxima(d: &[f64]) -> Vec<usize> {
    let mut peaks: Vec<usize> = (1..d.len().saturating_sub(1))
        .filter(|&i| d[i] > d[i - 1] && d[i] >= d[i + 1])
        .collect();
    peaks.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    peaks
}

//! Water-equivalent accumulation rates from traced layer depths.
//!
//! A density profile ρ(z) comes either from piecewise-linear interpolation
//! of measured samples (constant extrapolation past the ends) or from a
//! least-squares line clamped into (0, 917] kg/m³. Internally both compile
//! to a breakpoint polyline with precomputed prefix integrals, so the water
//! equivalent of a depth interval is an exact trapezoid sum:
//! w.e.(z1→z2) = (F(z2) − F(z1)) / ρ_water. Tracing error propagates to
//! first order: δ = mae·metersPerRow·ρ(depth)/ρ_water.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::LayerSet;
use crate::error::{Error, Result};

pub const WATER_DENSITY: f64 = 1000.0;
pub const ICE_DENSITY: f64 = 917.0;
/// Lower clamp for fitted densities, keeping them strictly positive.
const DENSITY_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileMode {
    PiecewiseLinear,
    LinearFit,
}

/// Density as a piecewise-linear function of depth, constant beyond the
/// first/last breakpoint, with prefix integrals F(z) = ∫₀ᶻ ρ.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityProfile {
    breaks: Vec<(f64, f64)>,
    prefix: Vec<f64>,
}

fn validate_samples(samples: &[(f64, f64)]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Domain("density profile needs at least one sample".into()));
    }
    let mut prev = f64::NEG_INFINITY;
    for &(z, rho) in samples {
        if !z.is_finite() || !rho.is_finite() {
            return Err(Error::Domain(format!("non-finite density sample ({z}, {rho})")));
        }
        if z < 0.0 {
            return Err(Error::Domain(format!("negative sample depth {z}")));
        }
        if z <= prev {
            return Err(Error::Domain(format!(
                "sample depths must increase strictly; {z} after {prev}"
            )));
        }
        if rho <= 0.0 || rho > ICE_DENSITY {
            return Err(Error::Domain(format!(
                "density {rho} outside (0, {ICE_DENSITY}]"
            )));
        }
        prev = z;
    }
    Ok(())
}

/// Builds a profile from (depth m, density kg/m³) samples.
pub fn fit_density_profile(samples: &[(f64, f64)], mode: ProfileMode) -> Result<DensityProfile> {
    validate_samples(samples)?;
    let breaks = match mode {
        ProfileMode::PiecewiseLinear => samples.to_vec(),
        ProfileMode::LinearFit => {
            if samples.len() < 2 {
                return Err(Error::Domain(
                    "linear-fit mode needs at least two samples".into(),
                ));
            }
            let n = samples.len() as f64;
            let zm = samples.iter().map(|s| s.0).sum::<f64>() / n;
            let rm = samples.iter().map(|s| s.1).sum::<f64>() / n;
            let sxx: f64 = samples.iter().map(|s| (s.0 - zm) * (s.0 - zm)).sum();
            let sxy: f64 = samples.iter().map(|s| (s.0 - zm) * (s.1 - rm)).sum();
            let b = sxy / sxx;
            let a = rm - b * zm;
            let line = |z: f64| (a + b * z).clamp(DENSITY_FLOOR, ICE_DENSITY);
            // the clamped line is piecewise linear: breakpoints at depth 0
            // and wherever the raw line crosses a clamp bound
            let mut zs = vec![0.0];
            if b != 0.0 {
                for bound in [DENSITY_FLOOR, ICE_DENSITY] {
                    let z = (bound - a) / b;
                    if z > 0.0 && z.is_finite() {
                        zs.push(z);
                    }
                }
            }
            zs.sort_by(f64::total_cmp);
            zs.dedup();
            zs.into_iter().map(|z| (z, line(z))).collect()
        }
    };
    let mut prefix = Vec::with_capacity(breaks.len());
    // constant density above the first breakpoint
    prefix.push(breaks[0].0 * breaks[0].1);
    for i in 1..breaks.len() {
        let (z0, r0) = breaks[i - 1];
        let (z1, r1) = breaks[i];
        prefix.push(prefix[i - 1] + (z1 - z0) * (r0 + r1) / 2.0);
    }
    Ok(DensityProfile { breaks, prefix })
}

impl DensityProfile {
    /// ρ at depth z (z ≤ 0 reads the shallowest value).
    pub fn density(&self, z: f64) -> f64 {
        let n = self.breaks.len();
        if z <= self.breaks[0].0 {
            return self.breaks[0].1;
        }
        if z >= self.breaks[n - 1].0 {
            return self.breaks[n - 1].1;
        }
        let i = self.breaks.partition_point(|&(bz, _)| bz <= z);
        let (z0, r0) = self.breaks[i - 1];
        let (z1, r1) = self.breaks[i];
        r0 + (r1 - r0) * (z - z0) / (z1 - z0)
    }

    /// F(z) = ∫₀ᶻ ρ(s) ds, exact on the polyline.
    pub fn cumulative(&self, z: f64) -> Result<f64> {
        if !(z >= 0.0) {
            return Err(Error::Domain(format!("depth {z} must be >= 0")));
        }
        let n = self.breaks.len();
        if z <= self.breaks[0].0 {
            return Ok(z * self.breaks[0].1);
        }
        if z >= self.breaks[n - 1].0 {
            return Ok(self.prefix[n - 1] + (z - self.breaks[n - 1].0) * self.breaks[n - 1].1);
        }
        let i = self.breaks.partition_point(|&(bz, _)| bz <= z);
        let (z0, r0) = self.breaks[i - 1];
        Ok(self.prefix[i - 1] + (z - z0) * (r0 + self.density(z)) / 2.0)
    }

    /// Water-equivalent thickness of [z1, z2] in meters.
    pub fn water_equivalent(&self, z1: f64, z2: f64) -> Result<f64> {
        if z2 < z1 {
            return Err(Error::Domain(format!("interval [{z1}, {z2}] is reversed")));
        }
        Ok((self.cumulative(z2)? - self.cumulative(z1)?) / WATER_DENSITY)
    }
}

/// Depth below the surface for a (sub-pixel) row index.
pub fn depth_from_row(row: f64, meters_per_row: f64) -> Result<f64> {
    if !(meters_per_row > 0.0) {
        return Err(Error::Domain(format!(
            "meters_per_row {meters_per_row} must be > 0"
        )));
    }
    if !(row >= 0.0) {
        return Err(Error::Domain(format!("row {row} must be >= 0")));
    }
    Ok(row * meters_per_row)
}

/// First-order propagation of a tracing error (pixels) into accumulation
/// rate: δ = mae·metersPerRow·ρ(depth)/ρ_water, per year traced.
pub fn mae_propagation(
    mae_pixels: f64,
    meters_per_row: f64,
    profile: &DensityProfile,
    depth: f64,
) -> f64 {
    mae_pixels * meters_per_row * profile.density(depth) / WATER_DENSITY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccumRow {
    pub depth_m: f64,
    pub we_m: f64,
    pub rate_m_we_per_a: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uncertainty_m_we_per_a: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccumReport {
    pub meters_per_row: f64,
    pub years_per_layer: f64,
    pub layers: Vec<AccumRow>,
}

/// Annual accumulation per traced layer: each layer's water equivalent is
/// integrated from the previous layer's depth (the surface for the first)
/// down to its own, divided by the years separating layers. When a tracing
/// MAE is given, its propagated uncertainty is attached per layer.
pub fn water_equivalent_rates(
    layers: &LayerSet,
    profile: &DensityProfile,
    meters_per_row: f64,
    years_per_layer: f64,
    mae_pixels: Option<f64>,
) -> Result<AccumReport> {
    if !(years_per_layer > 0.0) {
        return Err(Error::Domain(format!(
            "years_per_layer {years_per_layer} must be > 0"
        )));
    }
    let mut depths = Vec::with_capacity(layers.layers.len());
    for layer in &layers.layers {
        let mean = layer.mean_row();
        if !mean.is_finite() {
            return Err(Error::Domain("layer without traced columns".into()));
        }
        depths.push(depth_from_row(mean, meters_per_row)?);
    }
    for pair in depths.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Domain(format!(
                "layer depths must increase strictly; {} after {}",
                pair[1], pair[0]
            )));
        }
    }
    let mut rows = Vec::with_capacity(depths.len());
    let mut prev = 0.0;
    for &z in &depths {
        let we = profile.water_equivalent(prev, z)?;
        rows.push(AccumRow {
            depth_m: z,
            we_m: we,
            rate_m_we_per_a: we / years_per_layer,
            uncertainty_m_we_per_a: mae_pixels
                .map(|mae| mae_propagation(mae, meters_per_row, profile, z) / years_per_layer),
        });
        prev = z;
    }
    Ok(AccumReport {
        meters_per_row,
        years_per_layer,
        layers: rows,
    })
}

/// Reads `depth_m,density_kgm3` CSV samples.
pub fn read_density_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("depth_m,density_kgm3") => {}
        other => {
            return Err(Error::format(
                path,
                format!("expected header \"depth_m,density_kgm3\", got {other:?}"),
            ))
        }
    }
    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut take = || -> Result<f64> {
            fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::format(path, format!("line {}: bad number: {line:?}", idx + 2)))
        };
        let z = take()?;
        let rho = take()?;
        if fields.next().is_some() {
            return Err(Error::format(
                path,
                format!("line {}: expected 2 fields: {line:?}", idx + 2),
            ));
        }
        samples.push((z, rho));
    }
    Ok(samples)
}

pub fn write_density_csv(path: impl AsRef<Path>, samples: &[(f64, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("depth_m,density_kgm3\n");
    for &(z, rho) in samples {
        out.push_str(&format!("{z},{rho}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

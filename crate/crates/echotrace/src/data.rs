//! Echogram and label I/O, dataset augmentation, and a deterministic
//! synthetic echogram generator.
//!
//! Images travel as `EGM1` binary files (float32, channel planes row-major).
//! Labels are never stored as masks: a [`LayerSet`] maps columns to sub-pixel
//! row indices per layer, serialized as CSV, and is rasterized on demand.
//! Augmentation therefore transforms labels analytically (scale rows by the
//! factor, scale/mirror columns) instead of resampling 1-pixel-thin masks,
//! which bilinear filtering would destroy.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::scalar::Scalar;

const EGM_MAGIC: &[u8; 4] = b"EGM1";

/// Reads an `EGM1` echogram: magic, rows/cols/channels as u32 LE, then
/// float32 LE payload, one row-major plane per channel.
pub fn read_egm<T: Scalar>(path: impl AsRef<Path>) -> Result<Grid<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != EGM_MAGIC {
        return Err(Error::format(
            path,
            "bad magic at byte 0: expected \"EGM1\"".to_string(),
        ));
    }
    if bytes.len() < 16 {
        return Err(Error::format(
            path,
            format!("truncated header: {} bytes, need 16", bytes.len()),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (rows, cols, channels) = (word(4), word(8), word(12));
    if rows == 0 || cols == 0 || channels == 0 {
        return Err(Error::format(path, "zero dimension in header".to_string()));
    }
    let count = rows * cols * channels;
    let want = 16 + 4 * count;
    if bytes.len() != want {
        return Err(Error::format(
            path,
            format!(
                "payload truncated at byte {}: expected {want} bytes total",
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = 16 + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                path,
                format!("non-finite value at byte {off}"),
            ));
        }
        data.push(T::from_f32(v));
    }
    Grid::from_vec(Shape::new(1, channels, rows, cols), data)
}

/// Writes a single-image grid (batch 1) as `EGM1`. Values are narrowed to
/// float32, so a write/read round trip is exact at float32 precision.
pub fn write_egm<T: Scalar>(path: impl AsRef<Path>, grid: &Grid<T>) -> Result<()> {
    let path = path.as_ref();
    let s = grid.shape();
    if s.batch != 1 {
        return Err(Error::shape(
            "write_egm",
            format!("expected batch 1, got {}", s.batch),
        ));
    }
    if s.len() == 0 {
        return Err(Error::shape("write_egm", "empty grid"));
    }
    grid.ensure_finite("write_egm")?;
    let mut bytes = Vec::with_capacity(16 + 4 * s.len());
    bytes.extend_from_slice(EGM_MAGIC);
    for dim in [s.rows, s.cols, s.channels] {
        let v = u32::try_from(dim)
            .map_err(|_| Error::shape("write_egm", format!("dimension {dim} exceeds u32")))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &v in grid.data() {
        bytes.extend_from_slice(&v.to_f32().to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One traced layer: column → sub-pixel row index, at most one row per
/// column.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layer {
    pub points: BTreeMap<usize, f64>,
}

impl Layer {
    pub fn mean_row(&self) -> f64 {
        if self.points.is_empty() {
            return f64::NAN;
        }
        self.points.values().sum::<f64>() / self.points.len() as f64
    }

    /// Row at a fractional column via linear interpolation between the
    /// neighbouring traced columns; `None` when either neighbour is absent.
    pub fn row_at(&self, col: f64) -> Option<f64> {
        if !col.is_finite() || col < 0.0 {
            return None;
        }
        let lo = col.floor() as usize;
        let hi = col.ceil() as usize;
        let a = *self.points.get(&lo)?;
        if lo == hi {
            return Some(a);
        }
        let b = *self.points.get(&hi)?;
        Some(a + (b - a) * (col - lo as f64))
    }
}

/// Ordered stack of layers, shallowest (smallest mean row) first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerSet {
    pub layers: Vec<Layer>,
}

impl LayerSet {
    pub fn sort_by_depth(&mut self) {
        self.layers
            .sort_by(|a, b| a.mean_row().total_cmp(&b.mean_row()));
    }

    /// CSV with header `layer_id,column,row`; layer ids are the depth-order
    /// indices.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("layer_id,column,row\n");
        for (id, layer) in self.layers.iter().enumerate() {
            for (&col, &row) in &layer.points {
                out.push_str(&format!("{id},{col},{row}\n"));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<LayerSet> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("layer_id,column,row") => {}
            other => {
                return Err(Error::format(
                    path,
                    format!("expected header \"layer_id,column,row\", got {other:?}"),
                ))
            }
        }
        let mut by_id: BTreeMap<usize, Layer> = BTreeMap::new();
        for (idx, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let parse_err = |what: &str| {
                Error::format(path, format!("line {}: bad {what}: {line:?}", idx + 2))
            };
            let id: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| parse_err("layer_id"))?;
            let col: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| parse_err("column"))?;
            let row: f64 = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| parse_err("row"))?;
            if fields.next().is_some() {
                return Err(parse_err("field count"));
            }
            if !row.is_finite() {
                return Err(parse_err("row (non-finite)"));
            }
            if by_id.entry(id).or_default().points.insert(col, row).is_some() {
                return Err(Error::format(
                    path,
                    format!("line {}: duplicate column {col} in layer {id}", idx + 2),
                ));
            }
        }
        let mut set = LayerSet {
            layers: by_id.into_values().collect(),
        };
        set.sort_by_depth();
        Ok(set)
    }

    /// 0/1 mask with one positive pixel per traced (layer, column) at the
    /// rounded row. Distinct layers rounding onto the same pixel collapse
    /// into one positive.
    pub fn rasterize<T: Scalar>(&self, rows: usize, cols: usize) -> Result<Grid<T>> {
        let mut mask = Grid::zeros(Shape::new(1, 1, rows, cols));
        for (id, layer) in self.layers.iter().enumerate() {
            for (&col, &row) in &layer.points {
                let r = row.round();
                if !(row >= 0.0 && r >= 0.0 && (r as usize) < rows) || col >= cols {
                    return Err(Error::Domain(format!(
                        "layer {id} column {col} row {row} outside {rows}x{cols} mask"
                    )));
                }
                mask.set(0, 0, r as usize, col, T::one());
            }
        }
        Ok(mask)
    }

    /// Analytic rescale onto a `new_rows` × `new_cols` canvas: rows scale by
    /// the row ratio, and each new column reads the layer at the
    /// corresponding source column (linear interpolation).
    pub fn scaled(&self, rows: usize, cols: usize, new_rows: usize, new_cols: usize) -> LayerSet {
        let row_f = new_rows as f64 / rows as f64;
        let col_inv = cols as f64 / new_cols as f64;
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let mut points = BTreeMap::new();
                for c in 0..new_cols {
                    if let Some(row) = layer.row_at(c as f64 * col_inv) {
                        points.insert(c, row * row_f);
                    }
                }
                Layer { points }
            })
            .collect();
        LayerSet { layers }
    }

    /// Mirror columns: column c maps to cols−1−c, rows unchanged.
    pub fn hflipped(&self, cols: usize) -> LayerSet {
        let layers = self
            .layers
            .iter()
            .map(|layer| Layer {
                points: layer
                    .points
                    .iter()
                    .map(|(&c, &r)| (cols - 1 - c, r))
                    .collect(),
            })
            .collect();
        LayerSet { layers }
    }
}

/// Bilinear resample of every (batch, channel) plane onto new dimensions,
/// sampling source position `dst · (in/out)` with edge clamping, so content
/// stays aligned with analytically scaled labels.
pub fn scale_image<T: Scalar>(image: &Grid<T>, new_rows: usize, new_cols: usize) -> Result<Grid<T>> {
    let s = image.shape();
    if new_rows == 0 || new_cols == 0 {
        return Err(Error::shape("scale_image", "zero output dimension"));
    }
    let rr = s.rows as f64 / new_rows as f64;
    let cr = s.cols as f64 / new_cols as f64;
    let mut out = Grid::zeros(Shape::new(s.batch, s.channels, new_rows, new_cols));
    for b in 0..s.batch {
        for ch in 0..s.channels {
            for r in 0..new_rows {
                let sr = r as f64 * rr;
                let r0 = (sr.floor() as usize).min(s.rows - 1);
                let r1 = (r0 + 1).min(s.rows - 1);
                let tr = T::from_f64(sr - r0 as f64);
                for c in 0..new_cols {
                    let sc = c as f64 * cr;
                    let c0 = (sc.floor() as usize).min(s.cols - 1);
                    let c1 = (c0 + 1).min(s.cols - 1);
                    let tc = T::from_f64(sc - c0 as f64);
                    let top = image.at(b, ch, r0, c0)
                        + (image.at(b, ch, r0, c1) - image.at(b, ch, r0, c0)) * tc;
                    let bot = image.at(b, ch, r1, c0)
                        + (image.at(b, ch, r1, c1) - image.at(b, ch, r1, c0)) * tc;
                    out.set(b, ch, r, c, top + (bot - top) * tr);
                }
            }
        }
    }
    Ok(out)
}

/// Mirror every plane left-to-right.
pub fn hflip_image<T: Scalar>(image: &Grid<T>) -> Grid<T> {
    let s = image.shape();
    let mut out = Grid::zeros(s);
    for b in 0..s.batch {
        for ch in 0..s.channels {
            for r in 0..s.rows {
                for c in 0..s.cols {
                    out.set(b, ch, r, c, image.at(b, ch, r, s.cols - 1 - c));
                }
            }
        }
    }
    out
}

pub const AUGMENT_SCALES: [f64; 3] = [0.25, 0.5, 0.75];

/// The five training views of one item: identity, the three down-scales,
/// and the horizontal flip. Rejects inputs whose scaled dimensions would
/// leave the 16-divisible domain.
pub fn augment<T: Scalar>(
    image: &Grid<T>,
    labels: &LayerSet,
) -> Result<Vec<(Grid<T>, LayerSet)>> {
    let s = image.shape();
    let mut out = Vec::with_capacity(5);
    out.push((image.clone(), labels.clone()));
    for f in AUGMENT_SCALES {
        let nr = (s.rows as f64 * f).round() as usize;
        let nc = (s.cols as f64 * f).round() as usize;
        if nr == 0 || nc == 0 || nr % 16 != 0 || nc % 16 != 0 {
            return Err(Error::Domain(format!(
                "scale {f} of {}x{} gives {nr}x{nc}, not divisible by 16",
                s.rows, s.cols
            )));
        }
        out.push((
            scale_image(image, nr, nc)?,
            labels.scaled(s.rows, s.cols, nr, nc),
        ));
    }
    out.push((hflip_image(image), labels.hflipped(s.cols)));
    Ok(out)
}

/// Sidecar metadata: vertical resolution and along-track spacing in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    #[serde(default = "Meta::default_meters_per_row")]
    pub meters_per_row: f64,
    #[serde(default = "Meta::default_along_track_m")]
    pub along_track_m: f64,
}

impl Meta {
    fn default_meters_per_row() -> f64 {
        0.025
    }

    fn default_along_track_m() -> f64 {
        14.5
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Meta> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("meta serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl Default for Meta {
    fn default() -> Self {
        Meta {
            meters_per_row: Self::default_meters_per_row(),
            along_track_m: Self::default_along_track_m(),
        }
    }
}

/// One dataset item in a manifest; paths are relative to the manifest file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub layers: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<String>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A fully loaded manifest entry.
#[derive(Clone, Debug)]
pub struct DatasetItem<T> {
    pub image: Grid<T>,
    pub layers: LayerSet,
    pub meta: Meta,
}

/// Resolves a manifest entry against the manifest's directory and loads it.
pub fn load_item<T: Scalar>(manifest_dir: &Path, entry: &ManifestEntry) -> Result<DatasetItem<T>> {
    let resolve = |p: &str| -> PathBuf { manifest_dir.join(p) };
    let image = read_egm(resolve(&entry.image))?;
    let layers = LayerSet::read_csv(resolve(&entry.layers))?;
    let meta = match &entry.meta {
        Some(p) => Meta::read(resolve(p))?,
        None => Meta::default(),
    };
    Ok(DatasetItem {
        image,
        layers,
        meta,
    })
}

pub fn load_dataset<T: Scalar>(manifest_path: impl AsRef<Path>) -> Result<Vec<DatasetItem<T>>> {
    let path = manifest_path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(path)?
        .iter()
        .map(|e| load_item(dir, e))
        .collect()
}

/// Knobs for the synthetic echogram generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub layer_count: usize,
    /// Sinusoidal undulation amplitude range, pixels.
    pub amplitude: (f64, f64),
    /// Undulation frequency range, cycles per image width.
    pub frequency: (f64, f64),
    /// Exponential brightness decay per normalized depth; 0 = none.
    pub decay: f64,
    /// Multiplicative exponential speckle mix in [0, 1]; 0 = none.
    pub speckle: f64,
    /// Std dev of the vertical Gaussian blur, pixels; 0 = none.
    pub blur_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 0,
            rows: 64,
            cols: 64,
            layer_count: 5,
            amplitude: (1.0, 3.0),
            frequency: (0.5, 2.0),
            decay: 1.0,
            speckle: 0.3,
            blur_sigma: 0.8,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.rows % 16 != 0 || self.cols % 16 != 0 {
            return Err(Error::Config(format!(
                "synthetic dims {}x{} must be nonzero and divisible by 16",
                self.rows, self.cols
            )));
        }
        if self.layer_count < 1 {
            return Err(Error::Config("layer_count must be >= 1".into()));
        }
        for (name, (lo, hi)) in [("amplitude", self.amplitude), ("frequency", self.frequency)] {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi < lo {
                return Err(Error::Config(format!("bad {name} range ({lo}, {hi})")));
            }
        }
        if !(0.0..=1.0).contains(&self.speckle) {
            return Err(Error::Config("speckle must lie in [0, 1]".into()));
        }
        if !self.decay.is_finite() || self.decay < 0.0 || !self.blur_sigma.is_finite() || self.blur_sigma < 0.0 {
            return Err(Error::Config("decay and blur_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

const MIN_LAYER_GAP: f64 = 3.5;

/// Deterministic synthetic echogram: non-crossing undulating layers, a
/// bright band below each layer top whose brightness decays with depth,
/// multiplicative exponential speckle, and a vertical Gaussian blur.
///
/// Layers live in disjoint horizontal slots separated by at least
/// [`MIN_LAYER_GAP`] pixels, and their per-column slope stays below one
/// pixel, so the rasterized mask is a stack of clean 8-connected curves.
pub fn synthesize<T: Scalar>(params: &SynthParams) -> Result<(Grid<T>, LayerSet)> {
    use rand::{Rng, SeedableRng};
    use rand_distr::Distribution;
    params.validate()?;
    let (rows, cols, n) = (params.rows, params.cols, params.layer_count);
    let margin = rows as f64 / 8.0;
    let usable = rows as f64 - 2.0 * margin;
    let slot = usable / n as f64;
    let room = slot / 2.0 - MIN_LAYER_GAP / 2.0;
    if room < 0.5 {
        return Err(Error::Config(format!(
            "{n} layers cannot fit {rows} rows without crossing (slot {slot:.2}px)"
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(params.seed);

    let mut curves: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut brightness: Vec<f64> = Vec::with_capacity(n);
    for j in 0..n {
        let center = margin + slot * (j as f64 + 0.5);
        let amp = rng.gen_range(params.amplitude.0..=params.amplitude.1).min(0.6 * room);
        let freq = {
            let f = rng.gen_range(params.frequency.0..=params.frequency.1);
            // keep the per-column slope below ~0.6px so rounded rows of
            // neighbouring columns stay 8-adjacent
            if amp > 0.0 {
                f.min(0.6 * cols as f64 / (2.0 * std::f64::consts::PI * amp))
            } else {
                f
            }
        };
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let walk_bound = 0.35 * room;
        let mut walk = 0.0f64;
        let mut curve = Vec::with_capacity(cols);
        for c in 0..cols {
            let osc = amp * (std::f64::consts::TAU * freq * c as f64 / cols as f64 + phase).sin();
            curve.push(center + osc + walk);
            let step = rng.gen_range(-0.3..=0.3);
            walk = (walk + step).clamp(-walk_bound, walk_bound);
        }
        curves.push(curve);
        brightness.push(rng.gen_range(0.7..=1.0));
    }

    let mut image = Grid::zeros(Shape::new(1, 1, rows, cols));
    let bg = 0.05;
    let mut column = vec![0.0f64; rows];
    let exp = rand_distr::Exp1;
    let mut blur_taps = Vec::new();
    if params.blur_sigma > 0.0 {
        let radius = (3.0 * params.blur_sigma).ceil() as i64;
        let mut total = 0.0;
        for i in -radius..=radius {
            let w = (-0.5 * (i as f64 / params.blur_sigma).powi(2)).exp();
            blur_taps.push(w);
            total += w;
        }
        for w in &mut blur_taps {
            *w /= total;
        }
    }
    for c in 0..cols {
        column.iter_mut().for_each(|v| *v = bg);
        for j in 0..n {
            let top = curves[j][c];
            let gap = if j + 1 < n {
                curves[j + 1][c] - top
            } else {
                rows as f64 - top
            };
            let thickness = (0.35 * gap).clamp(1.5, 6.0).min(gap - 2.0).max(1.0);
            let start = top.round() as usize;
            let end = ((top + thickness).round() as usize).max(start + 1).min(rows);
            for (r, v) in column.iter_mut().enumerate().take(end).skip(start) {
                *v = brightness[j] * (-params.decay * r as f64 / rows as f64).exp();
            }
        }
        if params.speckle > 0.0 {
            for v in column.iter_mut() {
                let e: f64 = exp.sample(&mut rng);
                *v *= 1.0 - params.speckle + params.speckle * e;
            }
        }
        if blur_taps.is_empty() {
            for (r, &v) in column.iter().enumerate() {
                image.set(0, 0, r, c, T::from_f64(v));
            }
        } else {
            let radius = (blur_taps.len() / 2) as i64;
            for r in 0..rows as i64 {
                let mut acc = 0.0;
                for (i, &w) in blur_taps.iter().enumerate() {
                    let src = (r + i as i64 - radius).clamp(0, rows as i64 - 1);
                    acc += w * column[src as usize];
                }
                image.set(0, 0, r as usize, c, T::from_f64(acc));
            }
        }
    }

    let layers = LayerSet {
        layers: curves
            .into_iter()
            .map(|curve| Layer {
                points: curve.into_iter().enumerate().collect(),
            })
            .collect(),
    };
    Ok((image, layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn seeded_image(rows: usize, cols: usize, seed: u64) -> Grid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_vec(
            Shape::new(1, 1, rows, cols),
            (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn ladder(rows: &[f64], cols: usize) -> LayerSet {
        LayerSet {
            layers: rows
                .iter()
                .map(|&r| Layer {
                    points: (0..cols).map(|c| (c, r)).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn egm_round_trip_is_exact_at_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.egm");
        let img = seeded_image(16, 16, 9);
        write_egm(&path, &img).unwrap();
        let back: Grid<f64> = read_egm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, f64::from(*a as f32));
        }
    }

    #[test]
    fn egm_rejects_bad_magic_truncation_and_empties() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.egm");
        let img = seeded_image(16, 16, 1);
        write_egm(&path, &img).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = read_egm::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("EGM1"), "{err}");

        bytes[0] = b'E';
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_egm::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("byte"), "{err}");

        let empty = Grid::<f64>::zeros(Shape::new(1, 1, 0, 0));
        assert!(write_egm(dir.path().join("e.egm"), &empty).is_err());
    }

    #[test]
    fn layer_csv_round_trips_and_orders_by_depth() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("layers.csv");
        // deliberately stored deep-first; read must re-order
        let mut set = ladder(&[40.25, 10.5], 4);
        set.layers[0].points.remove(&2);
        set.write_csv(&path).unwrap();
        let back = LayerSet::read_csv(&path).unwrap();
        assert_eq!(back.layers.len(), 2);
        assert!(back.layers[0].mean_row() < back.layers[1].mean_row());
        assert_eq!(back.layers[0].points[&0], 10.5);
        assert_eq!(back.layers[1].points.len(), 3);
        assert_eq!(back.layers[1].points[&3], 40.25);

        std::fs::write(&path, "layer_id,column,row\n0,1,5.0\n0,1,6.0\n").unwrap();
        assert!(LayerSet::read_csv(&path).unwrap_err().to_string().contains("duplicate"));
        std::fs::write(&path, "id,col,row\n").unwrap();
        assert!(LayerSet::read_csv(&path).is_err());
    }

    #[test]
    fn rasterize_places_one_pixel_per_column_and_collapses_collisions() {
        let empty = LayerSet::default();
        let mask: Grid<f64> = empty.rasterize(8, 8).unwrap();
        assert_eq!(mask.sum(), 0.0);

        let two = ladder(&[10.3, 40.7], 64);
        let mask: Grid<f64> = two.rasterize(64, 64).unwrap();
        assert_eq!(mask.sum(), 128.0);
        assert_eq!(mask.at(0, 0, 10, 5), 1.0);
        assert_eq!(mask.at(0, 0, 41, 5), 1.0);

        let colliding = ladder(&[10.3, 10.4], 8);
        let mask: Grid<f64> = colliding.rasterize(16, 8).unwrap();
        assert_eq!(mask.sum(), 8.0, "two layers on one pixel collapse");

        let out = ladder(&[15.6], 4);
        assert!(out.rasterize::<f64>(16, 4).is_err(), "rounds to row 16");
    }

    #[test]
    fn augment_produces_the_five_contracted_views() {
        let img = seeded_image(64, 64, 3);
        let labels = ladder(&[40.0, 20.0], 64);
        let views = augment(&img, &labels).unwrap();
        assert_eq!(views.len(), 5);
        let dims: Vec<(usize, usize)> = views
            .iter()
            .map(|(g, _)| (g.shape().rows, g.shape().cols))
            .collect();
        assert_eq!(dims, [(64, 64), (16, 16), (32, 32), (48, 48), (64, 64)]);
        // scale 0.5: row 40 → 20
        let half = &views[2].1;
        assert_eq!(half.layers[0].points[&0], 20.0);
        assert_eq!(half.layers[0].points.len(), 32);
        // the identity view is untouched
        assert_eq!(views[0].0.data(), img.data());
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = seeded_image(32, 64, 4);
        let labels = ladder(&[7.25], 64);
        let flipped = hflip_image(&img);
        assert_ne!(flipped.data(), img.data());
        assert_eq!(hflip_image(&flipped).data(), img.data());
        let fl = labels.hflipped(64);
        assert_eq!(fl.layers[0].points[&63], 7.25);
        assert_eq!(labels.hflipped(64).hflipped(64), labels);
    }

    #[test]
    fn augment_rejects_dims_that_leave_the_grid_domain()
    {
        let img = seeded_image(32, 32, 5); // 32·0.25 = 8, not divisible by 16
        let labels = ladder(&[10.0], 32);
        assert!(augment(&img, &labels).is_err());
    }

    #[test]
    fn scaling_a_constant_image_stays_constant() {
        let img = Grid::filled(Shape::new(1, 1, 64, 64), 0.37);
        let out = scale_image(&img, 48, 48).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.37_f64).abs() < 1e-12));
    }

    #[test]
    fn meta_and_manifest_round_trip_with_defaults() {
        let dir = tempdir().unwrap();
        let mpath = dir.path().join("meta.json");
        std::fs::write(&mpath, "{}").unwrap();
        let meta = Meta::read(&mpath).unwrap();
        assert_eq!(meta.meters_per_row, 0.025);
        assert_eq!(meta.along_track_m, 14.5);

        let entries = vec![ManifestEntry {
            image: "a.egm".into(),
            layers: "a.csv".into(),
            meta: None,
        }];
        let man = dir.path().join("manifest.json");
        write_manifest(&man, &entries).unwrap();
        let img = seeded_image(16, 16, 2);
        write_egm(dir.path().join("a.egm"), &img).unwrap();
        ladder(&[4.0], 16).write_csv(dir.path().join("a.csv")).unwrap();
        let items: Vec<DatasetItem<f64>> = load_dataset(&man).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].meta, Meta::default());
        assert_eq!(items[0].layers.layers.len(), 1);
    }

    #[test]
    fn synthesis_is_seed_deterministic() {
        let params = SynthParams::default();
        let (img1, set1): (Grid<f64>, _) = synthesize(&params).unwrap();
        let (img2, set2): (Grid<f64>, _) = synthesize(&params).unwrap();
        assert_eq!(img1.data(), img2.data());
        assert_eq!(set1, set2);
        let other = SynthParams {
            seed: 1,
            ..SynthParams::default()
        };
        let (img3, _): (Grid<f64>, _) = synthesize(&other).unwrap();
        assert_ne!(img1.data(), img3.data());
    }

    #[test]
    fn noiseless_synthesis_is_piecewise_constant_with_tops_on_label_rows() {
        let params = SynthParams {
            decay: 0.0,
            speckle: 0.0,
            blur_sigma: 0.0,
            ..SynthParams::default()
        };
        let (img, set): (Grid<f64>, _) = synthesize(&params).unwrap();
        let mask: Grid<f64> = set.rasterize(params.rows, params.cols).unwrap();
        for c in 0..params.cols {
            for r in 1..params.rows {
                let prev = img.at(0, 0, r - 1, c);
                let cur = img.at(0, 0, r, c);
                // upward discontinuity = a layer top = a label pixel
                if cur > prev {
                    assert_eq!(mask.at(0, 0, r, c), 1.0, "row {r} col {c}");
                }
            }
            // every label pixel sits on an upward discontinuity
            for r in 0..params.rows {
                if mask.at(0, 0, r, c) == 1.0 {
                    let above = if r == 0 { 0.05 } else { img.at(0, 0, r - 1, c) };
                    assert!(img.at(0, 0, r, c) > above, "row {r} col {c}");
                }
            }
        }
    }

    #[test]
    fn synthetic_layers_never_cross_and_always_rasterize() {
        for seed in 0..1000 {
            let params = SynthParams {
                seed,
                rows: 32,
                cols: 32,
                layer_count: 3,
                ..SynthParams::default()
            };
            let (_, set): (Grid<f64>, _) = synthesize(&params).unwrap();
            set.rasterize::<f64>(params.rows, params.cols).unwrap();
            for c in 0..params.cols {
                for j in 1..set.layers.len() {
                    let upper = set.layers[j - 1].points[&c];
                    let lower = set.layers[j].points[&c];
                    assert!(
                        lower - upper >= MIN_LAYER_GAP - 1e-9,
                        "seed {seed} col {c}: gap {}",
                        lower - upper
                    );
                }
            }
        }
    }

    #[test]
    fn synthesis_rejects_impossible_layer_counts() {
        let params = SynthParams {
            rows: 32,
            layer_count: 12,
            ..SynthParams::default()
        };
        assert!(synthesize::<f64>(&params).is_err());
    }

    #[test]
    fn synthetic_curves_move_less_than_a_pixel_per_column() {
        for seed in [0, 7, 99] {
            let params = SynthParams {
                seed,
                ..SynthParams::default()
            };
            let (_, set): (Grid<f64>, _) = synthesize(&params).unwrap();
            for layer in &set.layers {
                for c in 1..params.cols {
                    let d = (layer.points[&c] - layer.points[&(c - 1)]).abs();
                    assert!(d < 1.0, "seed {seed}: step {d}");
                }
            }
        }
    }
}

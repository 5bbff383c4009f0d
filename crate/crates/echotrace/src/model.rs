//! The three layer-tracing network variants, assembled as graphs.
//!
//! All variants share a five-stage VGG-style trunk (3×3 convs + relu,
//! widths [w, 2w, 4w, 8w, 8w], max-pool between stages 1–4) with deeply
//! supervised side branches: a 1×1 conv produces a stage-resolution logit,
//! which a bilinear-initialized transposed conv upsamples back to input
//! resolution (center-cropped), and a 1×1 fuse conv combines the upsampled
//! side logits.
//!
//! `wavenet` concatenates the level-(k−1) wavelet detail subbands of the
//! input to stage k's features before its side conv; `skipwavenet` instead
//! concatenates the level-1 details of the previous side's stage-resolution
//! logit, so each side output feeds structure to the next. Wavelet nodes
//! are fixed transforms: the filter taps are never trainable parameters,
//! but gradients flow through the transform to earlier layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::grid::{Grid, Shape};
use crate::scalar::Scalar;
use crate::wavelet::WaveletKind;

pub const STAGES: usize = 5;
pub const CONVS_PER_STAGE: [usize; STAGES] = [2, 2, 3, 3, 3];

/// Channel widths per stage for base width `w`.
pub fn stage_widths(width: usize) -> [usize; STAGES] {
    [width, 2 * width, 4 * width, 8 * width, 8 * width]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mscnn,
    Wavenet,
    Skipwavenet,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mscnn" => Ok(Variant::Mscnn),
            "wavenet" => Ok(Variant::Wavenet),
            "skipwavenet" => Ok(Variant::Skipwavenet),
            _ => Err(Error::Config(format!(
                "unknown model variant {name:?}; valid: mscnn, wavenet, skipwavenet"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mscnn => "mscnn",
            Variant::Wavenet => "wavenet",
            Variant::Skipwavenet => "skipwavenet",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub wavelet: WaveletKind,
    /// Base channel width `w`; 64 reproduces the full-scale channel plan,
    /// 4 is the desk-scale default.
    pub width: usize,
    /// Stages with a supervised side output, ascending, subset of 1..=5.
    pub active_sides: Vec<usize>,
}

impl ModelConfig {
    /// Default side-output sets: stages 1–4 for the baseline, all five for
    /// the wavelet variants.
    pub fn new(variant: Variant, wavelet: WaveletKind, width: usize) -> Self {
        let active_sides = match variant {
            Variant::Mscnn => vec![1, 2, 3, 4],
            _ => vec![1, 2, 3, 4, 5],
        };
        ModelConfig {
            variant,
            wavelet,
            width,
            active_sides,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("model width must be >= 1".into()));
        }
        if self.active_sides.is_empty() {
            return Err(Error::Config("at least one active side output required".into()));
        }
        let mut prev = 0;
        for &s in &self.active_sides {
            if s < 1 || s > STAGES {
                return Err(Error::Config(format!(
                    "active side {s} outside stages 1..={STAGES}"
                )));
            }
            if s <= prev {
                return Err(Error::Config(
                    "active sides must be strictly ascending".into(),
                ));
            }
            prev = s;
        }
        if self.variant != Variant::Mscnn && self.active_sides != [1, 2, 3, 4, 5] {
            return Err(Error::Config(format!(
                "{} requires all five side outputs active, got {:?}",
                self.variant, self.active_sides
            )));
        }
        Ok(())
    }

    fn is_active(&self, stage: usize) -> bool {
        self.active_sides.contains(&stage)
    }

    /// Whether stage `k`'s side conv also sees 3 wavelet detail channels.
    fn fused(&self, stage: usize) -> bool {
        self.variant != Variant::Mscnn && stage >= 2
    }
}

enum ParamKind {
    TrunkWeight { fan_in: usize },
    SideWeight,
    FuseWeight { active: usize },
    Upsample { stride: usize },
    Bias,
}

struct ParamSpec {
    name: String,
    shape: Shape,
    kind: ParamKind,
}

fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let widths = stage_widths(config.width);
    let mut specs = Vec::new();
    let mut in_c = 1usize;
    for k in 1..=STAGES {
        let out_c = widths[k - 1];
        for i in 1..=CONVS_PER_STAGE[k - 1] {
            specs.push(ParamSpec {
                name: format!("trunk.s{k}.c{i}.weight"),
                shape: Shape::new(out_c, in_c, 3, 3),
                kind: ParamKind::TrunkWeight { fan_in: in_c * 9 },
            });
            specs.push(ParamSpec {
                name: format!("trunk.s{k}.c{i}.bias"),
                shape: Shape::new(1, out_c, 1, 1),
                kind: ParamKind::Bias,
            });
            in_c = out_c;
        }
    }
    for &k in &config.active_sides {
        let fan = widths[k - 1] + if config.fused(k) { 3 } else { 0 };
        specs.push(ParamSpec {
            name: format!("side.s{k}.weight"),
            shape: Shape::new(1, fan, 1, 1),
            kind: ParamKind::SideWeight,
        });
        specs.push(ParamSpec {
            name: format!("side.s{k}.bias"),
            shape: Shape::new(1, 1, 1, 1),
            kind: ParamKind::Bias,
        });
        if k >= 2 {
            let stride = 1usize << (k - 1);
            specs.push(ParamSpec {
                name: format!("side.s{k}.up"),
                shape: Shape::new(1, 1, 2 * stride, 2 * stride),
                kind: ParamKind::Upsample { stride },
            });
        }
    }
    specs.push(ParamSpec {
        name: "fuse.weight".into(),
        shape: Shape::new(1, config.active_sides.len(), 1, 1),
        kind: ParamKind::FuseWeight {
            active: config.active_sides.len(),
        },
    });
    specs.push(ParamSpec {
        name: "fuse.bias".into(),
        shape: Shape::new(1, 1, 1, 1),
        kind: ParamKind::Bias,
    });
    specs
}

/// Exact number of trainable scalars for a config. Wavelet taps are not
/// parameters and contribute nothing.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    Ok(param_specs(config).iter().map(|s| s.shape.len()).sum())
}

/// Parameter names and shapes in store order (the order checkpoints use).
pub fn param_shapes(config: &ModelConfig) -> Result<Vec<(String, Shape)>> {
    config.validate()?;
    Ok(param_specs(config)
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect())
}

/// Separable bilinear-interpolation kernel for a transposed conv of the
/// given stride: taps `1 − |i − (s − 0.5)|/s` so opposing contributions of
/// interior outputs sum to one.
pub fn bilinear_kernel<T: Scalar>(stride: usize) -> Grid<T> {
    let size = 2 * stride;
    let s = stride as f64;
    let center = s - 0.5;
    let taps: Vec<f64> = (0..size)
        .map(|i| 1.0 - (i as f64 - center).abs() / s)
        .collect();
    let mut out = Grid::zeros(Shape::new(1, 1, size, size));
    for r in 0..size {
        for c in 0..size {
            out.set(0, 0, r, c, T::from_f64(taps[r] * taps[c]));
        }
    }
    out
}

/// Fresh parameters: He-normal trunk weights, zero side convs and biases,
/// bilinear upsamplers, fuse weights 1/K. A freshly initialized model
/// therefore outputs 0.5 everywhere.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(config) {
        let grid = match spec.kind {
            ParamKind::TrunkWeight { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = rand_distr::Normal::new(0.0, std).expect("std is finite");
                let data = (0..spec.shape.len())
                    .map(|_| T::from_f64(normal.sample(&mut rng)))
                    .collect();
                Grid::from_vec(spec.shape, data)?
            }
            ParamKind::SideWeight | ParamKind::Bias => Grid::zeros(spec.shape),
            ParamKind::FuseWeight { active } => {
                Grid::filled(spec.shape, T::from_f64(1.0 / active as f64))
            }
            ParamKind::Upsample { stride } => bilinear_kernel(stride),
        };
        store.insert(spec.name, grid);
    }
    Ok(store)
}

/// Activation maps from one forward pass, every grid at input resolution.
/// Entries follow `active_sides` order; the fused map is separate.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub side_logits: Vec<Grid<T>>,
    pub side_activations: Vec<Grid<T>>,
    pub fuse_logit: Grid<T>,
    pub fuse_activation: Grid<T>,
}

pub struct Model<T> {
    config: ModelConfig,
    graph: Graph<T>,
    batch_shape: Shape,
    labels: Option<NodeId>,
    loss: Option<NodeId>,
    side_logits: Vec<NodeId>,
    side_acts: Vec<NodeId>,
    fuse_logit: NodeId,
    fuse_act: NodeId,
}

impl<T: Scalar> Model<T> {
    /// Inference graph for a fixed batch shape.
    pub fn build(config: &ModelConfig, batch_shape: Shape) -> Result<Self> {
        Self::build_inner(config, batch_shape, None)
    }

    /// Training graph: adds a label input and the deep-supervision loss
    /// (per-map class-balanced BCE, summed over active sides plus fuse).
    pub fn build_training(config: &ModelConfig, batch_shape: Shape, lambda: f64) -> Result<Self> {
        Self::build_inner(config, batch_shape, Some(lambda))
    }

    fn build_inner(config: &ModelConfig, batch_shape: Shape, lambda: Option<f64>) -> Result<Self> {
        config.validate()?;
        if batch_shape.channels != 1 {
            return Err(Error::shape(
                "model",
                format!("input must have 1 channel, got {}", batch_shape.channels),
            ));
        }
        if batch_shape.rows % 16 != 0 || batch_shape.cols % 16 != 0 {
            return Err(Error::shape(
                "model",
                format!(
                    "input dims must be divisible by 16, got {}x{}",
                    batch_shape.rows, batch_shape.cols
                ),
            ));
        }
        if batch_shape.batch == 0 || batch_shape.rows == 0 || batch_shape.cols == 0 {
            return Err(Error::shape("model", "empty batch"));
        }
        let widths = stage_widths(config.width);
        let mut g: Graph<T> = Graph::new();
        let input = g.input(batch_shape);

        // Input detail pyramid for the wavenet variant: level l details are
        // the detail subbands of the level-(l-1) approximation.
        let mut input_details: Vec<NodeId> = Vec::new();
        if config.variant == Variant::Wavenet {
            let mut approx = input;
            for _ in 1..STAGES {
                input_details.push(g.dwt_details(approx, config.wavelet)?);
                approx = g.dwt_approx(approx, config.wavelet)?;
            }
        }

        let mut feat = input;
        let mut stage_feats = Vec::with_capacity(STAGES);
        for k in 1..=STAGES {
            for i in 1..=CONVS_PER_STAGE[k - 1] {
                let w = g.param(
                    format!("trunk.s{k}.c{i}.weight"),
                    Shape::new(
                        widths[k - 1],
                        g.shape(feat).channels,
                        3,
                        3,
                    ),
                );
                let b = g.param(
                    format!("trunk.s{k}.c{i}.bias"),
                    Shape::new(1, widths[k - 1], 1, 1),
                );
                let conv = g.conv2d(feat, w, b, 1, 1)?;
                feat = g.relu(conv);
            }
            stage_feats.push(feat);
            if k < STAGES {
                feat = g.maxpool2(feat)?;
            }
        }

        let mut side_logits = Vec::new();
        let mut side_acts = Vec::new();
        let mut prev_raw_logit: Option<NodeId> = None;
        for k in 1..=STAGES {
            if !config.is_active(k) {
                continue;
            }
            let mut side_in = stage_feats[k - 1];
            if config.fused(k) {
                let details = match config.variant {
                    Variant::Wavenet => input_details[k - 2],
                    Variant::Skipwavenet => {
                        let prev = prev_raw_logit.expect("side k-1 built before side k");
                        g.dwt_details(prev, config.wavelet)?
                    }
                    Variant::Mscnn => unreachable!(),
                };
                side_in = g.concat(&[side_in, details])?;
            }
            let w = g.param(
                format!("side.s{k}.weight"),
                Shape::new(1, g.shape(side_in).channels, 1, 1),
            );
            let b = g.param(format!("side.s{k}.bias"), Shape::new(1, 1, 1, 1));
            let raw = g.conv2d(side_in, w, b, 0, 1)?;
            prev_raw_logit = Some(raw);
            let logit = if k == 1 {
                raw
            } else {
                let stride = 1usize << (k - 1);
                let up = g.param(
                    format!("side.s{k}.up"),
                    Shape::new(1, 1, 2 * stride, 2 * stride),
                );
                let upsampled = g.tconv2d(raw, up, stride)?;
                g.crop_center(upsampled, batch_shape.rows, batch_shape.cols)?
            };
            side_logits.push(logit);
            side_acts.push(g.sigmoid(logit));
        }

        let fuse_in = g.concat(&side_logits)?;
        let fw = g.param(
            "fuse.weight",
            Shape::new(1, side_logits.len(), 1, 1),
        );
        let fb = g.param("fuse.bias", Shape::new(1, 1, 1, 1));
        let fuse_logit = g.conv2d(fuse_in, fw, fb, 0, 1)?;
        let fuse_act = g.sigmoid(fuse_logit);

        let mut labels = None;
        let mut loss = None;
        if let Some(lambda) = lambda {
            let lab = g.input(batch_shape);
            let mut total = g.balanced_bce(side_acts[0], lab, lambda)?;
            for &act in &side_acts[1..] {
                let term = g.balanced_bce(act, lab, lambda)?;
                total = g.add(total, term)?;
            }
            let fuse_term = g.balanced_bce(fuse_act, lab, lambda)?;
            total = g.add(total, fuse_term)?;
            labels = Some(lab);
            loss = Some(total);
        }

        Ok(Model {
            config: config.clone(),
            graph: g,
            batch_shape,
            labels,
            loss,
            side_logits,
            side_acts,
            fuse_logit,
            fuse_act,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn batch_shape(&self) -> Shape {
        self.batch_shape
    }

    /// Inference pass (also valid on a training-built model, with labels of
    /// the batch shape required in that case via [`Model::train_step`]).
    pub fn forward(&mut self, batch: &Grid<T>, params: &ParamStore<T>) -> Result<ForwardOutput<T>> {
        if self.labels.is_some() {
            return Err(Error::Graph(
                "training graph requires labels; use train_forward".into(),
            ));
        }
        self.graph.forward(&[batch], params)?;
        self.output()
    }

    /// Forward pass of a training graph; returns the total loss.
    pub fn train_forward(
        &mut self,
        batch: &Grid<T>,
        labels: &Grid<T>,
        params: &ParamStore<T>,
    ) -> Result<T> {
        if self.labels.is_none() {
            return Err(Error::Graph("model was built without a loss".into()));
        }
        self.graph.forward(&[batch, labels], params)?;
        let loss = self.loss.expect("training graph has a loss node");
        Ok(self.graph.value(loss)?.data()[0])
    }

    /// Gradients of the most recent `train_forward` loss for every
    /// parameter in the store.
    pub fn backward(&self, params: &ParamStore<T>) -> Result<ParamStore<T>> {
        let loss = self
            .loss
            .ok_or_else(|| Error::Graph("model was built without a loss".into()))?;
        self.graph.backward(loss, params)
    }

    /// Collects maps from the most recent forward pass.
    pub fn output(&self) -> Result<ForwardOutput<T>> {
        let mut side_logits = Vec::with_capacity(self.side_logits.len());
        let mut side_activations = Vec::with_capacity(self.side_acts.len());
        for (&l, &a) in self.side_logits.iter().zip(&self.side_acts) {
            side_logits.push(self.graph.value(l)?.clone());
            side_activations.push(self.graph.value(a)?.clone());
        }
        Ok(ForwardOutput {
            side_logits,
            side_activations,
            fuse_logit: self.graph.value(self.fuse_logit)?.clone(),
            fuse_activation: self.graph.value(self.fuse_act)?.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk(variant: Variant) -> ModelConfig {
        ModelConfig::new(variant, WaveletKind::Haar, 4)
    }

    fn rnd_labels(shape: Shape, rng: &mut ChaCha8Rng) -> Grid<f64> {
        Grid::from_vec(
            shape,
            (0..shape.len())
                .map(|_| f64::from(rng.gen_range(0..=1)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(desk(Variant::Mscnn).validate().is_ok());
        let mut bad = desk(Variant::Wavenet);
        bad.active_sides = vec![1, 2, 3, 4];
        assert!(bad.validate().is_err());
        let mut zero_w = desk(Variant::Mscnn);
        zero_w.width = 0;
        assert!(zero_w.validate().is_err());
        let mut oob = desk(Variant::Mscnn);
        oob.active_sides = vec![1, 6];
        assert!(oob.validate().is_err());
    }

    #[test]
    fn parameter_count_deltas_between_variants() {
        let mut mscnn5 = desk(Variant::Mscnn);
        mscnn5.active_sides = vec![1, 2, 3, 4, 5];
        let base = parameter_count(&mscnn5).unwrap();
        let skip = parameter_count(&desk(Variant::Skipwavenet)).unwrap();
        let wave = parameter_count(&desk(Variant::Wavenet)).unwrap();
        assert_eq!(skip - base, 12, "3 extra channels on 4 fused side convs");
        assert_eq!(wave, skip);
    }

    #[test]
    fn fresh_model_outputs_half_everywhere() {
        let config = desk(Variant::Skipwavenet);
        let shape = Shape::new(1, 1, 32, 32);
        let params = init_params::<f64>(&config, 7).unwrap();
        let mut model = Model::build(&config, shape).unwrap();
        let batch = Grid::filled(shape, 0.25);
        let out = model.forward(&batch, &params).unwrap();
        for g in out
            .side_activations
            .iter()
            .chain(std::iter::once(&out.fuse_activation))
        {
            assert_eq!(g.shape(), shape);
            assert!(g.data().iter().all(|&v| v == 0.5));
        }
        assert_eq!(out.side_logits.len(), 5);
    }

    #[test]
    fn output_dims_match_input_for_non_square_grids() {
        for variant in [Variant::Mscnn, Variant::Wavenet, Variant::Skipwavenet] {
            let config = desk(variant);
            let shape = Shape::new(2, 1, 32, 48);
            let params = init_params::<f64>(&config, 3).unwrap();
            let mut model = Model::build(&config, shape).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let batch = Grid::from_vec(
                shape,
                (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let out = model.forward(&batch, &params).unwrap();
            assert_eq!(out.fuse_activation.shape(), shape);
            for g in &out.side_logits {
                assert_eq!(g.shape(), shape);
            }
        }
    }

    #[test]
    fn indivisible_input_dims_are_rejected() {
        let config = desk(Variant::Mscnn);
        assert!(Model::<f64>::build(&config, Shape::new(1, 1, 24, 32)).is_err());
        assert!(Model::<f64>::build(&config, Shape::new(1, 3, 32, 32)).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let config = desk(Variant::Mscnn);
        let a = init_params::<f64>(&config, 42).unwrap();
        let b = init_params::<f64>(&config, 42).unwrap();
        let c = init_params::<f64>(&config, 43).unwrap();
        for (name, grid) in a.iter() {
            assert_eq!(grid.data(), b.get(name).unwrap().data());
        }
        let w = "trunk.s1.c1.weight";
        assert_ne!(a.get(w).unwrap().data(), c.get(w).unwrap().data());
        // fuse weight = 1/K
        assert!(a.get("fuse.weight").unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn bilinear_upsampling_preserves_constants_in_the_interior() {
        let kernel = bilinear_kernel::<f64>(4);
        let x = Grid::filled(Shape::new(1, 1, 4, 4), 3.0);
        let up = crate::ops::tconv2d(&x, &kernel, 4).unwrap();
        let us = up.shape();
        // Interior: positions where the bilinear support is fully covered.
        for r in 4..us.rows - 4 {
            for c in 4..us.cols - 4 {
                assert!((up.at(0, 0, r, c) - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_loss_matches_standalone_total_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = desk(Variant::Skipwavenet);
        let shape = Shape::new(2, 1, 32, 32);
        let mut params = init_params::<f64>(&config, 1).unwrap();
        // random side weights so the maps are not all 0.5
        for name in ["side.s1.weight", "side.s2.weight", "side.s3.weight"] {
            for v in params.get_mut(name).unwrap().data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let batch = Grid::from_vec(
            shape,
            (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let labels = rnd_labels(shape, &mut rng);
        let mut train = Model::build_training(&config, shape, 1.1).unwrap();
        let loss = train.train_forward(&batch, &labels, &params).unwrap();

        let mut infer = Model::build(&config, shape).unwrap();
        let out = infer.forward(&batch, &params).unwrap();
        let maps: Vec<&Grid<f64>> = out
            .side_activations
            .iter()
            .chain(std::iter::once(&out.fuse_activation))
            .collect();
        let oracle = crate::loss::total_loss(&maps, &labels, 1.1).unwrap();
        assert!(
            (loss - oracle).abs() <= 1e-9 * oracle.abs().max(1.0),
            "{loss} vs {oracle}"
        );
    }

    #[test]
    fn skip_wiring_couples_successive_side_outputs() {
        // In skipwavenet, stage 2's side conv consumes the details of side
        // 1's logit, so side 1's gradient depends on side 2's weights. The
        // baseline has no such path once the fuse conv (which couples all
        // sides) is silenced with zero weights.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let shape = Shape::new(1, 1, 32, 32);
        let batch = Grid::from_vec(
            shape,
            (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let labels = rnd_labels(shape, &mut rng);

        let grad_s1 = |variant: Variant, bump_s2: bool| {
            let mut config = desk(variant);
            config.active_sides = vec![1, 2, 3, 4, 5];
            let mut params = init_params::<f64>(&config, 2).unwrap();
            let mut draw = ChaCha8Rng::seed_from_u64(99);
            for name in ["side.s1.weight", "side.s2.weight"] {
                for v in params.get_mut(name).unwrap().data_mut() {
                    *v = draw.gen_range(-0.5..0.5);
                }
            }
            for v in params.get_mut("fuse.weight").unwrap().data_mut() {
                *v = 0.0;
            }
            if bump_s2 {
                params.get_mut("side.s2.weight").unwrap().data_mut()[0] += 0.25;
            }
            let mut model = Model::build_training(&config, shape, 1.0).unwrap();
            model.train_forward(&batch, &labels, &params).unwrap();
            let grads = model.backward(&params).unwrap();
            grads.get("side.s1.weight").unwrap().clone()
        };

        let skip_a = grad_s1(Variant::Skipwavenet, false);
        let skip_b = grad_s1(Variant::Skipwavenet, true);
        assert_ne!(skip_a.data(), skip_b.data());

        let base_a = grad_s1(Variant::Mscnn, false);
        let base_b = grad_s1(Variant::Mscnn, true);
        assert_eq!(base_a.data(), base_b.data());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let config = desk(Variant::Wavenet);
        let shape = Shape::new(1, 1, 32, 32);
        let params = init_params::<f64>(&config, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch = Grid::from_vec(
            shape,
            (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let mut m1 = Model::build(&config, shape).unwrap();
        let mut m2 = Model::build(&config, shape).unwrap();
        let o1 = m1.forward(&batch, &params).unwrap();
        let o2 = m2.forward(&batch, &params).unwrap();
        assert_eq!(o1.fuse_activation.data(), o2.fuse_activation.data());
        for (a, b) in o1.side_logits.iter().zip(&o2.side_logits) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn param_names_enumerate_exactly_the_trainables() {
        let config = desk(Variant::Skipwavenet);
        let params = init_params::<f64>(&config, 0).unwrap();
        let names: Vec<&str> = params.names().collect();
        assert!(names.contains(&"trunk.s1.c1.weight"));
        assert!(names.contains(&"side.s5.up"));
        assert!(names.contains(&"fuse.bias"));
        assert!(!names.iter().any(|n| n.contains("wavelet") || n.contains("dwt")));
        let total: usize = params.iter().map(|(_, g)| g.shape().len()).sum();
        assert_eq!(total, parameter_count(&config).unwrap());
        // side conv fan-in: stage 1 unfused, stages >= 2 fused (+3)
        assert_eq!(params.get("side.s1.weight").unwrap().shape().channels, 4);
        assert_eq!(params.get("side.s2.weight").unwrap().shape().channels, 11);
    }
}

//! Optimization loop, optimizers, and checkpointing.
//!
//! Training is deterministic for a fixed seed in single-threaded mode: one
//! ChaCha8 stream drives the epoch shuffles, graphs are cached per batch
//! shape, and at every epoch boundary the live parameters and optimizer
//! state are rounded through float32 — the checkpoint precision — so a run
//! resumed from any epoch's checkpoint continues bitwise identically to the
//! uninterrupted run.
//!
//! Checkpoints are `CKPT` | u32 LE header length | JSON header | float32 LE
//! parameter blobs in header order | float32 LE optimizer slot blobs per
//! parameter, slots consecutive.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::grid::{Grid, Shape};
use crate::model::{self, Model, ModelConfig};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!(
                "unknown optimizer {name:?}; valid: sgd-momentum, adam"
            ))),
        }
    }

    fn slot_count(self) -> usize {
        match self {
            OptimizerKind::SgdMomentum => 1,
            OptimizerKind::Adam => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PaperFaithful,
    DeskScale,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "paper-faithful" => Ok(Preset::PaperFaithful),
            "desk-scale" => Ok(Preset::DeskScale),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?}; valid: paper-faithful, desk-scale"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum coefficient, doubling as Adam's β1.
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Class-balance scale for the background BCE term.
    pub lambda: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// The hyperparameters the full-scale experiments inherit: SGD with
    /// momentum at a learning rate far too small to train a fresh tiny net.
    pub fn paper_faithful() -> Self {
        TrainConfig {
            preset: Preset::PaperFaithful,
            epochs: 15,
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: 1e-6,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 10,
            lambda: 1.1,
            seed: 0,
        }
    }

    /// Settings that converge on desk-scale synthetic data in minutes.
    pub fn desk_scale() -> Self {
        TrainConfig {
            preset: Preset::DeskScale,
            epochs: 15,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 4,
            lambda: 1.1,
            seed: 0,
        }
    }

    pub fn preset(kind: Preset) -> Self {
        match kind {
            Preset::PaperFaithful => Self::paper_faithful(),
            Preset::DeskScale => Self::desk_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-parameter optimizer slots: one velocity grid for SGD-momentum, first
/// and second moments for Adam.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    /// Completed steps (drives Adam's bias correction).
    pub t: u64,
    pub slots: IndexMap<String, Vec<Grid<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, params: &ParamStore<T>) -> Self {
        let slots = params
            .iter()
            .map(|(name, grid)| {
                (
                    name.to_string(),
                    (0..kind.slot_count())
                        .map(|_| Grid::zeros(grid.shape()))
                        .collect(),
                )
            })
            .collect();
        OptimizerState { kind, t: 0, slots }
    }
}

/// One optimizer update over every parameter.
///
/// SGD-momentum: v ← μv − η(g + wd·p); p ← p + v.
/// Adam: moment recursions on g + wd·p with bias correction,
/// p ← p − η·m̂/(√v̂ + ε).
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
) -> Result<()> {
    if state.kind != config.optimizer {
        return Err(Error::Config(format!(
            "optimizer state is {:?} but config wants {:?}",
            state.kind, config.optimizer
        )));
    }
    state.t += 1;
    let eta = T::from_f64(config.learning_rate);
    let mu = T::from_f64(config.momentum);
    let wd = T::from_f64(config.weight_decay);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("gradient shape {} != param {} for {name}", g.shape(), p.shape()),
            ));
        }
        let slots = state.slots.get_mut(name).expect("state covers every param");
        match state.kind {
            OptimizerKind::SgdMomentum => {
                let v = &mut slots[0];
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = mu * *vv - eta * (*gv + wd * *pv);
                    *pv += *vv;
                }
            }
            OptimizerKind::Adam => {
                let beta1 = mu;
                let beta2 = T::from_f64(ADAM_BETA2);
                let eps = T::from_f64(ADAM_EPS);
                let one = T::one();
                let bc1 = one - beta1.powi(state.t as i32);
                let bc2 = one - beta2.powi(state.t as i32);
                let (m, v) = slots.split_at_mut(1);
                let (m, v) = (&mut m[0], &mut v[0]);
                for (((pv, mv), vv), gv) in p
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(g.data())
                {
                    let grad = *gv + wd * *pv;
                    *mv = beta1 * *mv + (one - beta1) * grad;
                    *vv = beta2 * *vv + (one - beta2) * grad * grad;
                    let m_hat = *mv / bc1;
                    let v_hat = *vv / bc2;
                    *pv -= eta * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// A full training snapshot.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub params: ParamStore<T>,
    pub opt: OptimizerState<T>,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    kind: OptimizerKind,
    t: u64,
    slots: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    iteration: u64,
    rng_seed: u64,
    rng_word_pos: [u64; 2],
    params: Vec<ParamMeta>,
    opt: OptMeta,
}

fn push_blob<T: Scalar>(bytes: &mut Vec<u8>, grid: &Grid<T>) {
    for &v in grid.data() {
        bytes.extend_from_slice(&v.to_f32().to_le_bytes());
    }
}

/// Rounds every value through float32, the checkpoint precision.
pub fn quantize_f32<T: Scalar>(grid: &mut Grid<T>) {
    for v in grid.data_mut() {
        *v = T::from_f32(v.to_f32());
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            iteration: self.iteration,
            rng_seed: self.rng_seed,
            rng_word_pos: [self.rng_word_pos as u64, (self.rng_word_pos >> 64) as u64],
            params: self
                .params
                .iter()
                .map(|(name, g)| {
                    let s = g.shape();
                    ParamMeta {
                        name: name.to_string(),
                        shape: [s.batch, s.channels, s.rows, s.cols],
                    }
                })
                .collect(),
            opt: OptMeta {
                kind: self.opt.kind,
                t: self.opt.t,
                slots: self.opt.kind.slot_count(),
            },
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CKPT_MAGIC);
        bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for (_, grid) in self.params.iter() {
            push_blob(&mut bytes, grid);
        }
        for (name, _) in self.params.iter() {
            for slot in &self.opt.slots[name] {
                push_blob(&mut bytes, slot);
            }
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 || &bytes[..4] != CKPT_MAGIC {
            return Err(Error::format(path, "bad magic: expected \"CKPT\""));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + header_len {
            return Err(Error::format(path, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
            .map_err(|e| Error::format(path, format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!(
                    "version: expected {CHECKPOINT_VERSION}, found {}",
                    header.version
                ),
            ));
        }
        if header.opt.slots != header.opt.kind.slot_count() {
            return Err(Error::format(
                path,
                format!("opt.slots: {} does not match {:?}", header.opt.slots, header.opt.kind),
            ));
        }
        let mut offset = 8 + header_len;
        let mut read_grid = |shape: Shape, what: &str| -> Result<Grid<T>> {
            let n = shape.len();
            let end = offset + 4 * n;
            if bytes.len() < end {
                return Err(Error::format(
                    path,
                    format!("{what}: blob truncated at byte {offset}"),
                ));
            }
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let at = offset + 4 * i;
                data.push(T::from_f32(f32::from_le_bytes(
                    bytes[at..at + 4].try_into().unwrap(),
                )));
            }
            offset = end;
            Grid::from_vec(shape, data)
        };
        let mut params = ParamStore::new();
        for meta in &header.params {
            let shape = Shape::new(meta.shape[0], meta.shape[1], meta.shape[2], meta.shape[3]);
            params.insert(
                meta.name.clone(),
                read_grid(shape, &format!("params[{}]", meta.name))?,
            );
        }
        let mut slots = IndexMap::new();
        for meta in &header.params {
            let shape = Shape::new(meta.shape[0], meta.shape[1], meta.shape[2], meta.shape[3]);
            let grids = (0..header.opt.slots)
                .map(|s| read_grid(shape, &format!("opt[{}][{s}]", meta.name)))
                .collect::<Result<Vec<_>>>()?;
            slots.insert(meta.name.clone(), grids);
        }
        if offset != bytes.len() {
            return Err(Error::format(
                path,
                format!("{} trailing bytes after blobs", bytes.len() - offset),
            ));
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            iteration: header.iteration,
            params,
            opt: OptimizerState {
                kind: header.opt.kind,
                t: header.opt.t,
                slots,
            },
            rng_seed: header.rng_seed,
            rng_word_pos: (header.rng_word_pos[0] as u128)
                | ((header.rng_word_pos[1] as u128) << 64),
        })
    }

    /// Verifies that the stored tensors fit `config`, naming the first
    /// parameter that does not.
    pub fn ensure_matches(&self, config: &ModelConfig) -> Result<()> {
        let want = model::param_shapes(config)?;
        if want.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, config wants {}",
                self.params.len(),
                want.len()
            )));
        }
        for ((want_name, want_shape), (name, grid)) in want.iter().zip(self.params.iter()) {
            if want_name != name {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} where config wants {want_name}"
                )));
            }
            if grid.shape() != *want_shape {
                return Err(Error::Config(format!(
                    "shape mismatch for {name}: checkpoint {} vs config {want_shape}",
                    grid.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub epoch: usize,
    pub iteration: u64,
    pub loss: f64,
}

/// Stateful training driver with graphs cached per batch shape.
pub struct Trainer<T: Scalar> {
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    params: ParamStore<T>,
    opt: OptimizerState<T>,
    rng: ChaCha8Rng,
    epoch: usize,
    iteration: u64,
    graphs: HashMap<Shape, Model<T>>,
}

fn stack_batch<T: Scalar>(grids: &[&Grid<T>]) -> Grid<T> {
    let s = grids[0].shape();
    let out_shape = Shape::new(
        grids.iter().map(|g| g.shape().batch).sum(),
        s.channels,
        s.rows,
        s.cols,
    );
    let mut data = Vec::with_capacity(out_shape.len());
    for g in grids {
        data.extend_from_slice(g.data());
    }
    Grid::from_vec(out_shape, data).expect("stacked dims agree")
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        let params = model::init_params(&model_cfg, train_cfg.seed)?;
        let opt = OptimizerState::new(train_cfg.optimizer, &params);
        let rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        Ok(Trainer {
            model_cfg,
            train_cfg,
            params,
            opt,
            rng,
            epoch: 0,
            iteration: 0,
            graphs: HashMap::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        ckpt.model.validate()?;
        ckpt.train.validate()?;
        ckpt.ensure_matches(&ckpt.model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.rng_seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        Ok(Trainer {
            model_cfg: ckpt.model,
            train_cfg: ckpt.train,
            params: ckpt.params,
            opt: ckpt.opt,
            rng,
            epoch: ckpt.epoch,
            iteration: ckpt.iteration,
            graphs: HashMap::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.train_cfg
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model_cfg.clone(),
            train: self.train_cfg.clone(),
            epoch: self.epoch,
            iteration: self.iteration,
            params: self.params.clone(),
            opt: self.opt.clone(),
            rng_seed: self.train_cfg.seed,
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// Rounds live parameters and optimizer state through float32 so the
    /// in-memory run matches what a resume would load.
    pub fn quantize(&mut self) {
        for (_, g) in self.params.iter_mut() {
            quantize_f32(g);
        }
        for slots in self.opt.slots.values_mut() {
            for g in slots {
                quantize_f32(g);
            }
        }
    }

    /// One shuffled pass over the dataset. Items are grouped into batches
    /// of identical dimensions in shuffle order (undersized tail batches
    /// flush at the end). Aborts on a non-finite loss.
    pub fn run_epoch(&mut self, items: &[(Grid<T>, Grid<T>)]) -> Result<Vec<LossEntry>> {
        if items.is_empty() {
            return Err(Error::Domain("empty training dataset".into()));
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        // Fisher-Yates on the trainer's stream
        for i in (1..order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            order.swap(i, j);
        }
        self.epoch += 1;
        let mut entries = Vec::new();
        let mut pending: Vec<(Shape, Vec<usize>)> = Vec::new();
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for &idx in &order {
            let shape = items[idx].0.shape();
            let slot = match pending.iter_mut().find(|(s, _)| *s == shape) {
                Some((_, v)) => v,
                None => {
                    pending.push((shape, Vec::new()));
                    &mut pending.last_mut().unwrap().1
                }
            };
            slot.push(idx);
            if slot.len() == self.train_cfg.batch_size {
                batches.push(std::mem::take(slot));
            }
        }
        for (_, leftover) in pending {
            if !leftover.is_empty() {
                batches.push(leftover);
            }
        }
        for batch in batches {
            let images: Vec<&Grid<T>> = batch.iter().map(|&i| &items[i].0).collect();
            let labels: Vec<&Grid<T>> = batch.iter().map(|&i| &items[i].1).collect();
            let x = stack_batch(&images);
            let y = stack_batch(&labels);
            let shape = x.shape();
            if !self.graphs.contains_key(&shape) {
                let model = Model::build_training(&self.model_cfg, shape, self.train_cfg.lambda)?;
                self.graphs.insert(shape, model);
            }
            let model = self.graphs.get_mut(&shape).expect("just inserted");
            let loss = model.train_forward(&x, &y, &self.params)?.to_f64();
            if !loss.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite loss {loss} at epoch {} iteration {}",
                    self.epoch,
                    self.iteration + 1
                )));
            }
            let grads = model.backward(&self.params)?;
            optimizer_step(&mut self.params, &grads, &mut self.opt, &self.train_cfg)?;
            self.iteration += 1;
            entries.push(LossEntry {
                epoch: self.epoch,
                iteration: self.iteration,
                loss,
            });
        }
        Ok(entries)
    }
}

/// Full training run: `epochs` passes with a checkpoint written (and the
/// live state float32-rounded) at every epoch boundary. `resume` continues
/// from a saved checkpoint; on a non-finite loss the error propagates and
/// the last epoch's checkpoint file survives untouched.
pub fn train_loop<T: Scalar>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    items: &[(Grid<T>, Grid<T>)],
    checkpoint_path: impl AsRef<Path>,
    resume: Option<Checkpoint<T>>,
    mut on_entry: impl FnMut(&LossEntry),
) -> Result<Checkpoint<T>> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::from_checkpoint(ckpt)?,
        None => Trainer::new(model_cfg.clone(), train_cfg.clone())?,
    };
    while trainer.epoch() < trainer.config().epochs {
        let entries = trainer.run_epoch(items)?;
        for e in &entries {
            on_entry(e);
        }
        trainer.checkpoint().save(&checkpoint_path)?;
        trainer.quantize();
    }
    Ok(trainer.checkpoint())
}

//! AdamW with cosine decay, weighted multi-dataset batching, checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelInstance, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{batch_stats, batch_weights, instance_terms, weighted_terms, BatchStats, Model, ModelConfig};
use crate::similarity::WeightTable;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub max_grad_norm: Option<f64>,
    /// Probability that a sampled instance has every question and passage
    /// token of its pivot replaced by `[UNK]`, so the span must be located
    /// through the auxiliary translations alone. 0 disables it.
    pub pivot_unk_rate: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 4e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 1000,
            batch_size: 16,
            seed: 0,
            max_grad_norm: None,
            pivot_unk_rate: 0.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.total_steps < 1 {
            return bad("total_steps must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight_decay must be >= 0 and eps > 0");
        }
        if !(0.0..=1.0).contains(&self.pivot_unk_rate) {
            return bad("pivot_unk_rate must lie in [0, 1]");
        }
        if self.model.max_answer_len < 1 {
            return bad("max_answer_len must be at least 1");
        }
        Ok(())
    }
}

/// `lr0 · ½(1 + cos(π·step/T))`, held at 0 past `T`.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let t = config.total_steps.max(1) as f64;
    let x = (step as f64).min(t) / t;
    config.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// First and second moments, aligned with [`Model::named`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(|(r, c)| Tensor::zeros(r, c)).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(model.named().iter().map(|(_, t)| t.shape()))
    }
}

/// One bias-corrected Adam update with decoupled weight decay. Rejects the
/// step without touching anything when a gradient is non-finite.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || grads.len() != state.m.len() {
        return Err(Error::Config(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = g.data()[j];
            let mj = b1 * m.data()[j] + (1.0 - b1) * gj;
            let vj = b2 * v.data()[j] + (1.0 - b2) * gj * gj;
            m.data_mut()[j] = mj;
            v.data_mut()[j] = vj;
            let update = (mj / c1) / ((vj / c2).sqrt() + config.eps);
            pd[j] -= lr * (update + config.weight_decay * pd[j]);
        }
    }
    Ok(())
}

pub type Corpora = BTreeMap<String, Vec<ParallelInstance>>;

/// Draws `batch_size` instances: dataset by weight, then uniformly within
/// it. Returns `(dataset, index)` pairs.
pub fn sample_batch<R: Rng>(
    corpora: &Corpora,
    weights: &WeightTable,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(String, usize)>> {
    if corpora.is_empty() {
        return Err(Error::EmptyDataset("no training corpora".into()));
    }
    let mut ids = Vec::new();
    let mut ws = Vec::new();
    for (id, insts) in corpora {
        let w = weights.get(id)?;
        if w > 0.0 && insts.is_empty() {
            return Err(Error::EmptyDataset(format!("{id} has weight {w} but no instances")));
        }
        ids.push(id);
        ws.push(w);
    }
    let dist = WeightedIndex::new(&ws).map_err(|_| Error::DegenerateWeights)?;
    Ok((0..batch_size)
        .map(|_| {
            let id = ids[dist.sample(rng)];
            (id.clone(), rng.gen_range(0..corpora[id].len()))
        })
        .collect())
}

/// One row of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub stats: BatchStats,
}

fn aux_label(i: usize) -> String {
    match i {
        0 => "M".into(),
        1 => "N".into(),
        _ => format!("X{i}"),
    }
}

/// CSV with columns `step,lr,total,L_s,alpha_M,alpha_N,L_M,L_N`.
pub fn trace_csv(rows: &[TraceRow], auxiliaries: usize) -> String {
    let mut out = String::from("step,lr,total,L_s");
    for i in 0..auxiliaries {
        out += &format!(",alpha_{}", aux_label(i));
    }
    for i in 0..auxiliaries {
        out += &format!(",L_{}", aux_label(i));
    }
    out.push('\n');
    for r in rows {
        out += &format!("{},{},{},{}", r.step, r.lr, r.stats.total, r.stats.source);
        for i in 0..auxiliaries {
            match r.stats.alpha.get(i) {
                Some(a) => out += &format!(",{a}"),
                None => out += ",",
            }
        }
        for i in 0..auxiliaries {
            match r.stats.aux.get(i) {
                Some(l) => out += &format!(",{l}"),
                None => out += ",",
            }
        }
        out.push('\n');
    }
    out
}

/// Objective value and summed gradients (aligned with [`Model::named`]) of
/// one batch. Instances run in parallel; the reduction is in batch order.
pub fn batch_gradients(
    model: &Model,
    batch: &[&ParallelInstance],
    weights: &WeightTable,
) -> Result<(BatchStats, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let config = &model.config;
    let mut forwards = batch
        .par_iter()
        .map(|inst| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let terms = instance_terms(&mut tape, &vars, config, inst)?;
            Ok((tape, vars, terms))
        })
        .collect::<Result<Vec<_>>>()?;
    let datasets: Vec<&str> = batch.iter().map(|b| b.source_dataset.as_str()).collect();
    let alphas: Vec<Vec<f64>> = forwards.iter().map(|(_, _, t)| t.alphas.clone()).collect();
    let bw = batch_weights(&datasets, &alphas, weights)?;
    let sources: Vec<f64> = forwards.iter().map(|(tp, _, t)| tp.scalar(t.source)).collect();
    let auxes: Vec<Vec<f64>> = forwards
        .iter()
        .map(|(tp, _, t)| t.aux.iter().map(|&v| tp.scalar(v)).collect())
        .collect();
    let stats = batch_stats(&sources, &auxes, &bw);
    let shapes: Vec<(usize, usize)> = model.named().iter().map(|(_, t)| t.shape()).collect();
    let per_instance = forwards
        .par_iter_mut()
        .enumerate()
        .map(|(i, (tape, vars, terms))| {
            let loss = weighted_terms(tape, terms, &bw, i)?;
            let mut grads = tape.backward(loss)?;
            Ok(vars
                .flatten()
                .into_iter()
                .zip(&shapes)
                .map(|(v, &(r, c))| grads.take(v).unwrap_or_else(|| Tensor::zeros(r, c)))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = per_instance.into_iter();
    let mut total = iter.next().expect("nonempty batch");
    for g in iter {
        for (acc, x) in total.iter_mut().zip(&g) {
            acc.add_assign(x);
        }
    }
    Ok((stats, total))
}

/// Copy of `inst` whose pivot question and passage tokens are all `[UNK]`.
pub fn mask_pivot(inst: &ParallelInstance) -> ParallelInstance {
    let mut out = inst.clone();
    for id in &mut out.pivot.input_ids {
        if ![Vocabulary::CLS_ID, Vocabulary::SEP_ID].contains(id) {
            *id = Vocabulary::UNK_ID;
        }
    }
    out
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in grads {
            g.scale_in_place(c);
        }
    }
}

/// Training state: everything needed to continue bit-exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub weights: WeightTable,
    pub trace: Vec<TraceRow>,
}

impl Trainer {
    /// Fresh model from `config.seed`.
    pub fn new(config: TrainConfig, weights: WeightTable) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(config.model.clone(), &mut rng)?;
        let adam = AdamState::for_model(&model);
        Ok(Trainer {
            config,
            model,
            adam,
            rng,
            weights,
            trace: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn is_done(&self) -> bool {
        self.adam.step >= self.config.total_steps
    }

    /// One sampled batch, backward pass and update.
    pub fn train_step(&mut self, corpora: &Corpora) -> Result<&TraceRow> {
        let picks = sample_batch(corpora, &self.weights, self.config.batch_size, &mut self.rng)?;
        let rate = self.config.pivot_unk_rate;
        let owned: Vec<Option<ParallelInstance>> = picks
            .iter()
            .map(|(d, i)| {
                (rate > 0.0 && self.rng.gen_bool(rate)).then(|| mask_pivot(&corpora[d][*i]))
            })
            .collect();
        let batch: Vec<&ParallelInstance> = picks
            .iter()
            .zip(&owned)
            .map(|((d, i), m)| m.as_ref().unwrap_or(&corpora[d][*i]))
            .collect();
        let (stats, mut grads) = batch_gradients(&self.model, &batch, &self.weights)?;
        if !stats.total.is_finite() {
            return Err(Error::NonFinite(format!("objective at step {}", self.adam.step)));
        }
        if let Some(max) = self.config.max_grad_norm {
            clip(&mut grads, max);
        }
        let lr = lr_schedule(self.adam.step, &self.config);
        let mut params: Vec<&mut Tensor> =
            self.model.named_mut().into_iter().map(|(_, t)| t).collect();
        adamw_step(&mut params, &grads, &mut self.adam, &self.config, lr)?;
        self.trace.push(TraceRow {
            step: self.adam.step,
            lr,
            stats,
        });
        Ok(self.trace.last().expect("row just pushed"))
    }

    /// Runs until `total_steps` or until `stop` is raised.
    pub fn run(&mut self, corpora: &Corpora, stop: Option<&AtomicBool>) -> Result<()> {
        while !self.is_done() {
            if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                log::warn!("interrupted at step {}", self.adam.step);
                break;
            }
            let total_steps = self.config.total_steps;
            let row = self.train_step(corpora)?;
            if row.step % 50 == 0 || row.step == total_steps {
                log::info!(
                    "step {} lr {:.3e} total {:.4} L_s {:.4}",
                    row.step,
                    row.lr,
                    row.stats.total,
                    row.stats.source
                );
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Trainer {
            config: ckpt.config,
            model: ckpt.model,
            adam: ckpt.adam,
            rng: ckpt.rng,
            weights: ckpt.weights,
            trace: Vec::new(),
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XLTTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Dataset weights the model was trained with; the keys are the
    /// training dataset ids.
    pub weights: WeightTable,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset from the start of the data section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    step: u64,
    config: TrainConfig,
    weights: WeightTable,
    rng: RngState,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let named = self.model.named();
        let mut out = Vec::with_capacity(3 * named.len());
        for (name, t) in &named {
            out.push((format!("param/{name}"), *t));
        }
        for ((name, _), m) in named.iter().zip(&self.adam.m) {
            out.push((format!("adam_m/{name}"), m));
        }
        for ((name, _), v) in named.iter().zip(&self.adam.v) {
            out.push((format!("adam_v/{name}"), v));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.arrays();
        let mut offset = 0u64;
        let entries = arrays
            .iter()
            .map(|(name, t)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            step: self.adam.step,
            config: self.config.clone(),
            weights: self.weights.clone(),
            rng: RngState {
                seed: self.rng.get_seed().to_vec(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            arrays: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(json.len() + offset as usize + 20);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in arrays {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(20..20 + len)
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        let data = &bytes[20 + len..];

        let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
        for e in &manifest.arrays {
            let start = e.offset as usize;
            let end = start + 8 * e.rows * e.cols;
            let raw = data
                .get(start..end)
                .ok_or_else(|| bad(format!("array {} out of bounds", e.name)))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(e.name.clone(), Tensor::new(e.rows, e.cols, values)?);
        }

        let mut model = Model::init(manifest.config.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut take = |key: String, shape: (usize, usize)| -> Result<Tensor> {
            let t = arrays
                .remove(&key)
                .ok_or_else(|| bad(format!("missing array {key}")))?;
            if t.shape() != shape {
                return Err(bad(format!("array {key} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, slot) in model.named_mut() {
            let shape = slot.shape();
            *slot = take(format!("param/{name}"), shape)?;
            m.push(take(format!("adam_m/{name}"), shape)?);
            v.push(take(format!("adam_v/{name}"), shape)?);
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(bad(format!("unexpected array {extra}")));
        }
        let seed: [u8; 32] = manifest
            .rng
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| bad("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(manifest.rng.stream);
        rng.set_word_pos(
            manifest
                .rng
                .word_pos
                .parse()
                .map_err(|_| bad("bad rng position".into()))?,
        );
        Ok(Checkpoint {
            config: manifest.config,
            model,
            adam: AdamState {
                m,
                v,
                step: manifest.step,
            },
            rng,
            weights: manifest.weights,
        })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::file(&tmp, e))?;
        f.sync_all().map_err(|e| Error::file(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

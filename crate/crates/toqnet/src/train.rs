//! Optimizer, schedules, sampling, metrics, and the experiment
//! protocols (standard, few-shot, and the generalization sweeps driven
//! from the CLI).
//!
//! Determinism contract: a fixed seed yields bit-identical histories,
//! checkpoints, and reports, and a run resumed from a saved state equals
//! the uninterrupted run bitwise. Per-example gradients inside a batch
//! may be computed in parallel but are always reduced in index order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, Extractor, ModelError, ModelInput, ModelParams};
use crate::synth::LabeledTrajectory;
use crate::tensor::{Tape, Tensor, TensorError};

pub const TRAINSTATE_SCHEMA: &str = "toqnet-trainstate-v1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; grad norms {grad_norms:?}")]
    NanLoss {
        epoch: usize,
        batch: usize,
        grad_norms: Vec<f64>,
    },
    #[error("class {0} has no examples")]
    EmptyClass(usize),
    #[error("few-shot budget {k} exceeds the {available} available examples of class {class}")]
    FewshotBudget {
        class: usize,
        k: usize,
        available: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("state file: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Configuration and schedules

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta0: f64,
    pub beta_final: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.002,
            plateau_factor: 0.9,
            plateau_patience: 6,
            batch_size: 32,
            epochs: 60,
            beta0: 1.0,
            beta_final: 0.001,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(TrainError::Config("plateau factor must be in (0,1)".into()));
        }
        if self.plateau_patience < 1 {
            return Err(TrainError::Config("plateau patience must be >= 1".into()));
        }
        if !(self.beta0 > self.beta_final && self.beta_final > 0.0) {
            return Err(TrainError::Config("need beta0 > beta_final > 0".into()));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(TrainError::Config("batch size and epochs must be >= 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(TrainError::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }

    /// First epoch at which plateau decay may trigger: 50 for full-length
    /// runs, scaled to a quarter of the run for shorter ones.
    pub fn plateau_start(&self) -> usize {
        if self.epochs >= 100 {
            50
        } else {
            (self.epochs / 4).max(1)
        }
    }

    /// Geometric anneal with exact endpoints: beta(0)=beta0,
    /// beta(epochs-1)=beta_final.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.beta_final;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.beta0 * (self.beta_final / self.beta0).powf(frac)
    }

    /// Plateau decision for one epoch boundary. Returns the new learning
    /// rate and whether a decay fired (staleness resets on decay).
    pub fn schedule_step(&self, epoch: usize, best_age: usize, lr: f64) -> (f64, bool) {
        if epoch >= self.plateau_start() && best_age >= self.plateau_patience {
            (lr * self.plateau_factor, true)
        } else {
            (lr, false)
        }
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .param_tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction over the canonical parameter
/// tensor list.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut tensors = params.param_tensors_mut();
    if tensors.len() != grads.len() || tensors.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "parameter/gradient count mismatch: {} params, {} grads, {} moments",
            tensors.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (i, p) in tensors.iter_mut().enumerate() {
        if p.shape() != grads[i].shape() {
            return Err(TrainError::Config(format!(
                "gradient {} shape {:?} does not match parameter shape {:?}",
                i,
                grads[i].shape(),
                p.shape()
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        for (k, pk) in p.data_mut().iter_mut().enumerate() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *pk -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sampling and splits

/// Draws `batch_size` dataset indices: uniform class, then uniform member
/// of that class.
pub fn balanced_batch(
    ds: &[LabeledTrajectory],
    batch_size: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in ds.iter().enumerate() {
        by_class.entry(item.label).or_default().push(i);
    }
    if by_class.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let c = classes[rng.gen_range(0..classes.len())];
        let members = &by_class[&c];
        out.push(members[rng.gen_range(0..members.len())]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    /// Labels withheld to K examples during training.
    pub fewshot_classes: Vec<usize>,
    pub fewshot_k: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.62,
            val_frac: 0.15,
            test_frac: 0.23,
            fewshot_classes: vec![],
            fewshot_k: 1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.train_frac + self.val_frac + self.test_frac;
        if (s - 1.0).abs() > 1e-9 {
            return Err(TrainError::Config(format!("split fractions sum to {s}, not 1")));
        }
        if self.fewshot_k < 1 {
            return Err(TrainError::Config("few-shot K must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: per class, shuffled with a seed-derived permutation,
/// then cut by the configured fractions (floor for train/val, remainder
/// to test).
pub fn split_dataset(ds: &[LabeledTrajectory], spec: &SplitSpec, seed: u64) -> Result<SplitManifest> {
    spec.validate()?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in ds.iter().enumerate() {
        by_class.entry(item.label).or_default().push(i);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut manifest = SplitManifest {
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for (_, mut members) in by_class {
        // Fisher-Yates with the shared stream keeps the manifest a pure
        // function of (dataset order, seed).
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        let n = members.len();
        let n_train = ((n as f64) * spec.train_frac).floor() as usize;
        let n_val = ((n as f64) * spec.val_frac).floor() as usize;
        manifest.train.extend(&members[..n_train]);
        manifest.val.extend(&members[n_train..n_train + n_val]);
        manifest.test.extend(&members[n_train + n_val..]);
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Unweighted mean of per-class recalls over classes present.
    pub macro_acc: f64,
    /// Recall per class; None where the class is absent from the data.
    pub per_class: Vec<Option<f64>>,
    /// confusion[true][pred].
    pub confusion: Vec<Vec<usize>>,
    /// Classes with no examples, excluded from the macro average.
    pub absent_classes: Vec<usize>,
    pub n_examples: usize,
}

/// Metrics from parallel label/prediction lists.
pub fn evaluate_predictions(labels: &[usize], preds: &[usize], n_classes: usize) -> EvalReport {
    assert_eq!(labels.len(), preds.len());
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&y, &p) in labels.iter().zip(preds) {
        confusion[y][p] += 1;
    }
    let mut per_class = vec![None; n_classes];
    let mut absent = Vec::new();
    let (mut sum, mut present) = (0.0, 0usize);
    for c in 0..n_classes {
        let total: usize = confusion[c].iter().sum();
        if total == 0 {
            absent.push(c);
        } else {
            let recall = confusion[c][c] as f64 / total as f64;
            per_class[c] = Some(recall);
            sum += recall;
            present += 1;
        }
    }
    EvalReport {
        macro_acc: if present == 0 { 0.0 } else { sum / present as f64 },
        per_class,
        confusion,
        absent_classes: absent,
        n_examples: labels.len(),
    }
}

pub fn evaluate(m: &ModelParams, ds: &[LabeledTrajectory]) -> Result<EvalReport> {
    let preds: Vec<usize> = ds
        .par_iter()
        .map(|item| model::predict(m, &ModelInput::Trajectory(&item.traj)))
        .collect::<std::result::Result<_, _>>()?;
    let labels: Vec<usize> = ds.iter().map(|i| i.label).collect();
    Ok(evaluate_predictions(&labels, &preds, m.config.classes))
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro: f64,
    pub lr: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub schema: String,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub lr: f64,
    /// Epochs since the validation loss last improved.
    pub stale: usize,
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub best_params: ModelParams,
    pub rng: ChaCha12Rng,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        let adam = AdamState::new(&params);
        let rng = ChaCha12Rng::seed_from_u64(config.seed);
        Ok(TrainState {
            schema: TRAINSTATE_SCHEMA.to_string(),
            best_params: params.clone(),
            params,
            adam,
            epoch: 0,
            lr: config.lr0,
            stale: 0,
            best_val_loss: f64::INFINITY,
            best_epoch: None,
            rng,
            history: vec![],
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| TrainError::State(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let st: TrainState =
            serde_json::from_str(&text).map_err(|e| TrainError::State(e.to_string()))?;
        if st.schema != TRAINSTATE_SCHEMA {
            return Err(TrainError::State(format!("unknown schema `{}`", st.schema)));
        }
        Ok(st)
    }
}

fn set_beta(params: &mut ModelParams, beta: f64) {
    if let Extractor::Kinematic(k) = &mut params.extractor {
        k.beta = beta;
    }
}

/// Mean cross-entropy loss and summed gradients over the given examples.
/// Per-example work runs in parallel; the reduction is a plain sum in
/// index order.
pub fn batch_gradients(
    params: &ModelParams,
    ds: &[LabeledTrajectory],
    batch: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let per: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|&i| -> Result<(f64, Vec<Tensor>)> {
            let item = &ds[i];
            let mut tape = Tape::new();
            let fwd = params.forward(&mut tape, &ModelInput::Trajectory(&item.traj))?;
            let loss = tape.softmax_cross_entropy(fwd.logits, item.label)?;
            let lv = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            let gs: Vec<Tensor> = fwd
                .param_ids
                .iter()
                .map(|&id| grads.get(id, &tape))
                .collect();
            Ok((lv, gs))
        })
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for (lv, gs) in per {
        loss += lv;
        match &mut acc {
            None => acc = Some(gs),
            Some(a) => {
                for (t, g) in a.iter_mut().zip(&gs) {
                    for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }
    let mut acc = acc.ok_or_else(|| TrainError::Config("empty batch".into()))?;
    for t in &mut acc {
        for x in t.data_mut() {
            *x /= n;
        }
    }
    Ok((loss / n, acc))
}

fn mean_loss(params: &ModelParams, ds: &[LabeledTrajectory], idx: &[usize]) -> Result<f64> {
    let losses: Vec<f64> = idx
        .par_iter()
        .map(|&i| -> Result<f64> {
            let item = &ds[i];
            let mut tape = Tape::new();
            let fwd = params.forward(&mut tape, &ModelInput::Trajectory(&item.traj))?;
            let loss = tape.softmax_cross_entropy(fwd.logits, item.label)?;
            Ok(tape.value(loss).data()[0])
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Runs epochs `state.epoch .. config.epochs`, mutating `state` in place.
/// Resuming a saved state reproduces the uninterrupted run bitwise.
pub fn run_epochs(
    state: &mut TrainState,
    ds: &[LabeledTrajectory],
    train_idx: &[usize],
    val_idx: &[usize],
) -> Result<()> {
    let until = state.config.epochs;
    run_epochs_until(state, ds, train_idx, val_idx, until)
}

/// Like `run_epochs` but stops before `until`; schedules still follow the
/// full-length config, so an interrupted run can be resumed exactly.
pub fn run_epochs_until(
    state: &mut TrainState,
    ds: &[LabeledTrajectory],
    train_idx: &[usize],
    val_idx: &[usize],
    until: usize,
) -> Result<()> {
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(TrainError::Config("train and val splits must be non-empty".into()));
    }
    let train_view: Vec<LabeledTrajectory> = train_idx.iter().map(|&i| ds[i].clone()).collect();
    let batches_per_epoch = train_idx.len().div_ceil(state.config.batch_size).max(1);
    while state.epoch < until.min(state.config.epochs) {
        let epoch = state.epoch;
        let beta = state.config.beta_at(epoch);
        set_beta(&mut state.params, beta);
        let mut train_loss = 0.0;
        for b in 0..batches_per_epoch {
            let batch_local = balanced_batch(&train_view, state.config.batch_size, &mut state.rng)?;
            let batch: Vec<usize> = batch_local.iter().map(|&i| train_idx[i]).collect();
            let (loss, grads) = batch_gradients(&state.params, ds, &batch)?;
            if !loss.is_finite() {
                let norms = grads
                    .iter()
                    .map(|g| g.data().iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect();
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: b,
                    grad_norms: norms,
                });
            }
            adam_step(&mut state.params, &grads, &mut state.adam, state.lr)?;
            train_loss += loss;
        }
        train_loss /= batches_per_epoch as f64;

        let val_loss = mean_loss(&state.params, ds, val_idx)?;
        let val_items: Vec<LabeledTrajectory> = val_idx.iter().map(|&i| ds[i].clone()).collect();
        let val_macro = evaluate(&state.params, &val_items)?.macro_acc;
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            state.best_epoch = Some(epoch);
            state.best_params = state.params.clone();
            state.stale = 0;
        } else {
            state.stale += 1;
        }
        let (lr, decayed) = state.config.schedule_step(epoch, state.stale, state.lr);
        state.lr = lr;
        if decayed {
            state.stale = 0;
        }
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_macro,
            lr: state.lr,
            beta,
        });
        state.epoch += 1;
    }
    Ok(())
}

/// Standard protocol: split, train, return the final state (best-val
/// parameters inside).
pub fn train(
    params: ModelParams,
    ds: &[LabeledTrajectory],
    split: &SplitManifest,
    cfg: TrainConfig,
) -> Result<TrainState> {
    let mut state = TrainState::new(params, cfg)?;
    run_epochs(&mut state, ds, &split.train, &split.val)?;
    Ok(state)
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_macro,lr,beta\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_macro, r.lr, r.beta
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Few-shot protocol

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotReport {
    /// Macro accuracy over the classes trained with full data.
    pub regular_macro: f64,
    /// Macro accuracy over the K-example classes.
    pub fewshot_macro: f64,
    /// Macro accuracy over all classes.
    pub full_macro: f64,
    pub manifest: SplitManifest,
    /// Training indices actually used (regular + K per held-out class).
    pub train_used: Vec<usize>,
    pub history: Vec<EpochRecord>,
}

/// Trains with held-out classes restricted to K examples each and
/// reports test macro accuracy over the regular, few-shot, and full
/// action sets.
pub fn fewshot_protocol(
    ds: &[LabeledTrajectory],
    spec: &SplitSpec,
    params: ModelParams,
    cfg: TrainConfig,
) -> Result<(FewshotReport, TrainState)> {
    spec.validate()?;
    let manifest = split_dataset(ds, spec, cfg.seed)?;
    let mut train_used = Vec::new();
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &manifest.train {
        let label = ds[i].label;
        if spec.fewshot_classes.contains(&label) {
            let c = seen.entry(label).or_insert(0);
            if *c < spec.fewshot_k {
                *c += 1;
                train_used.push(i);
            }
        } else {
            train_used.push(i);
        }
    }
    for &c in &spec.fewshot_classes {
        let available = manifest.train.iter().filter(|&&i| ds[i].label == c).count();
        if available < spec.fewshot_k {
            return Err(TrainError::FewshotBudget {
                class: c,
                k: spec.fewshot_k,
                available,
            });
        }
    }
    let mut state = TrainState::new(params, cfg)?;
    run_epochs(&mut state, ds, &train_used, &manifest.val)?;

    let test_items: Vec<LabeledTrajectory> = manifest.test.iter().map(|&i| ds[i].clone()).collect();
    let full = evaluate(&state.best_params, &test_items)?;
    let macro_over = |classes: &dyn Fn(usize) -> bool| -> f64 {
        let vals: Vec<f64> = full
            .per_class
            .iter()
            .enumerate()
            .filter_map(|(c, r)| if classes(c) { *r } else { None })
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let report = FewshotReport {
        regular_macro: macro_over(&|c| !spec.fewshot_classes.contains(&c)),
        fewshot_macro: macro_over(&|c| spec.fewshot_classes.contains(&c)),
        full_macro: full.macro_acc,
        manifest,
        train_used,
        history: state.history.clone(),
    };
    Ok((report, state))
}

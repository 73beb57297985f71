//! Mini-batch AdamW training with early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ensemble::Ensemble;
use super::loss::{record_loss, LossBreakdown, LossSample, LossWeights};
use super::model::{feature_row, FeatureScaler, PaaiModel};
use crate::error::{Error, Result};
use crate::ingest::{DatasetSplit, Trajectory};
use crate::neural::{adamw_step, AdamWConfig, AdamWState, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Step between consecutive training windows, in samples.
    pub stride: usize,
    pub optimizer: AdamWConfig,
    /// Seed for batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 15,
            batch_size: 64,
            stride: 1,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::invalid("batch size and stride must be positive"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub config: Option<TrainConfig>,
}

#[derive(Debug, Clone, Copy)]
struct SampleSpec {
    t: usize,
    a_base: f64,
    w_phase: f64,
    loss: LossSample,
}

/// Normalised feature rows and per-step targets for one trajectory.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    rows: Vec<Vec<f64>>,
    samples: Vec<SampleSpec>,
    seq_len: usize,
    dt: f64,
}

impl TrainingSet {
    /// One sample per `stride` steps, each predicting the forward-difference
    /// acceleration `(v[t+1] − v[t]) / dt` from the window ending at `t`.
    pub fn build(model: &PaaiModel, traj: &Trajectory, stride: usize) -> Result<Self> {
        if traj.len() < 2 || stride == 0 {
            return Err(Error::invalid("training needs at least two samples and a positive stride"));
        }
        let base = model.base.as_ref();
        let mut rows = Vec::with_capacity(traj.len());
        let mut samples = Vec::new();
        for (t, st) in traj.states().enumerate() {
            let raw = feature_row(&st, base, &model.phase)?;
            if t + 1 < traj.len() && t % stride == 0 {
                samples.push(SampleSpec {
                    t,
                    a_base: if base.is_some() { raw[4] } else { 0.0 },
                    w_phase: if model.kind.is_residual() { model.phase_weight_for(&st) } else { 1.0 },
                    loss: LossSample {
                        a_true: (traj.v[t + 1] - traj.v[t]) / traj.dt,
                        v: st.v,
                        v_l: st.v_l,
                        s: st.s,
                    },
                });
            }
            rows.push(model.scaler.apply(&raw));
        }
        Ok(Self {
            rows,
            samples,
            seq_len: model.network.seq_len,
            dt: traj.dt,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.loss.a_true).collect()
    }

    fn window(&self, t: usize) -> Vec<&[f64]> {
        let start = (t + 1).saturating_sub(self.seq_len);
        let pad = self.seq_len - (t + 1 - start);
        let mut out = Vec::with_capacity(self.seq_len);
        out.extend(std::iter::repeat(self.rows[0].as_slice()).take(pad));
        out.extend(self.rows[start..=t].iter().map(Vec::as_slice));
        out
    }
}

fn check_indices(set: &TrainingSet, idx: &[usize]) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::invalid("loss needs a non-empty batch"));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= set.len()) {
        return Err(Error::invalid(format!("sample index {bad} out of range")));
    }
    Ok(())
}

impl PaaiModel {
    /// Unclamped `(â, a_nn)` for each listed sample.
    pub fn network_outputs(&self, set: &TrainingSet, idx: &[usize]) -> Result<Vec<(f64, f64)>> {
        idx.par_iter()
            .map(|&i| {
                let sp = &set.samples[i];
                let mut g = Graph::new();
                let out = self.record(&mut g, &set.window(sp.t), sp.a_base, sp.w_phase)?;
                Ok((g.value(out.a_hat).item(), g.value(out.a_nn).item()))
            })
            .collect()
    }

    fn loss_graph<'p>(
        &'p self,
        g: &mut Graph<'p>,
        set: &TrainingSet,
        idx: &[usize],
        outputs: &[(f64, f64)],
        w: LossWeights,
    ) -> Result<(super::loss::LossVars, crate::neural::Var, crate::neural::Var)> {
        let a_hat = g.input(Tensor::vector(outputs.iter().map(|o| o.0).collect()))?;
        let a_nn = g.input(Tensor::vector(outputs.iter().map(|o| o.1).collect()))?;
        let params = self
            .params()
            .iter()
            .enumerate()
            .map(|(k, t)| g.param(t, k))
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<LossSample> = idx.iter().map(|&i| set.samples[i].loss).collect();
        let vars = record_loss(g, &self.loss, w, a_hat, a_nn, &params, &samples, set.dt)?;
        Ok((vars, a_hat, a_nn))
    }

    /// Composite loss over the listed samples treated as one batch.
    pub fn batch_loss(&self, set: &TrainingSet, idx: &[usize], w: LossWeights) -> Result<LossBreakdown> {
        check_indices(set, idx)?;
        let outputs = self.network_outputs(set, idx)?;
        let mut g = Graph::new();
        let (vars, _, _) = self.loss_graph(&mut g, set, idx, &outputs, w)?;
        Ok(vars.breakdown(&g))
    }

    /// Composite loss and its gradient with respect to every parameter.
    pub fn batch_gradients(&self, set: &TrainingSet, idx: &[usize], w: LossWeights) -> Result<(LossBreakdown, Vec<Tensor>)> {
        check_indices(set, idx)?;
        let tapes = idx
            .par_iter()
            .map(|&i| {
                let sp = &set.samples[i];
                let mut g = Graph::new();
                let out = self.record(&mut g, &set.window(sp.t), sp.a_base, sp.w_phase)?;
                Ok((g, out))
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs: Vec<(f64, f64)> = tapes
            .iter()
            .map(|(g, o)| (g.value(o.a_hat).item(), g.value(o.a_nn).item()))
            .collect();

        let mut bg = Graph::new();
        let (vars, a_hat, a_nn) = self.loss_graph(&mut bg, set, idx, &outputs, w)?;
        let top = bg.backward(vars.total, 1.0)?;
        let mut grads: Vec<Tensor> = self.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        top.accumulate_params(&mut grads);
        let zeros = vec![0.0; idx.len()];
        let d_hat = top.wrt(a_hat).unwrap_or(&zeros).to_vec();
        let d_nn = top.wrt(a_nn).unwrap_or(&zeros).to_vec();

        let per_sample = tapes
            .par_iter()
            .enumerate()
            .map(|(k, (g, o))| {
                let back = g.backward_many(&[(o.a_hat, d_hat[k]), (o.a_nn, d_nn[k])])?;
                let mut acc: Vec<Tensor> = self.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
                back.accumulate_params(&mut acc);
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        for sample in &per_sample {
            for (gsum, gs) in grads.iter_mut().zip(sample) {
                gsum.axpy(1.0, gs);
            }
        }
        Ok((vars.breakdown(&bg), grads))
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Trains `model` on `split.train` with early stopping on `split.validation`
/// and returns the best-validation parameters.
///
/// The feature scaler is refitted on the training split first. With
/// `max_epochs == 0` the model is returned unchanged.
pub fn train(model: &PaaiModel, split: &DatasetSplit, cfg: &TrainConfig) -> Result<PaaiModel> {
    cfg.validate()?;
    model.validate()?;
    if cfg.max_epochs == 0 {
        return Ok(model.clone());
    }
    let mut m = model.clone();
    let raw: Vec<Vec<f64>> = split
        .train
        .states()
        .map(|st| feature_row(&st, m.base.as_ref(), &m.phase))
        .collect::<Result<_>>()?;
    m.scaler = FeatureScaler::fit(&raw)?;
    let train_set = TrainingSet::build(&m, &split.train, cfg.stride)?;
    let val_set = TrainingSet::build(&m, &split.validation, cfg.stride)?;
    let val_idx: Vec<usize> = (0..val_set.len()).collect();
    let val_w = m.loss.validation_weights();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamWState::new(m.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory {
        config: Some(*cfg),
        ..TrainHistory::default()
    };
    let mut best_params = m.params().to_vec();
    let mut best_val = f64::INFINITY;
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        let progress = if cfg.max_epochs > 1 {
            epoch as f64 / (cfg.max_epochs - 1) as f64
        } else {
            0.0
        };
        let w = m.loss.weights_at(progress);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = m.batch_gradients(&train_set, batch, w).map_err(|e| diverged(epoch, e))?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch, loss: loss.total });
            }
            adamw_step(&cfg.optimizer, &mut opt, m.params_mut(), &grads)?;
            sum += loss.total;
            batches += 1;
        }
        let val = m.batch_loss(&val_set, &val_idx, val_w).map_err(|e| diverged(epoch, e))?.total;
        if !val.is_finite() {
            return Err(Error::Diverged { epoch, loss: val });
        }
        if val < best_val {
            best_val = val;
            best_params = m.params().to_vec();
            history.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / batches as f64,
            val_loss: val,
            best_val_loss: best_val,
        });
        if stale >= cfg.patience {
            history.stopped_early = true;
            break;
        }
    }
    let mut out = m.with_params(best_params)?;
    out.history = Some(history);
    Ok(out)
}

/// Trains `members` independently seeded copies; member `i` uses seed
/// `base_seed + i` for both initialisation and shuffling.
pub fn train_ensemble(
    template: &PaaiModel,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    members: usize,
    base_seed: u64,
) -> Result<Ensemble> {
    if members == 0 {
        return Err(Error::invalid("an ensemble needs at least one member"));
    }
    let trained = (0..members)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed.wrapping_add(i as u64);
            let mut init = PaaiModel::new(template.kind, template.base, template.network, seed)?;
            init.phase = template.phase;
            init.loss = template.loss;
            train(&init, split, &TrainConfig { seed, ..*cfg })
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(trained)
}

//! Mini-batch training with Adam.

mod adam;
mod checkpoint;
mod loss;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, StoredTensor, FORMAT_VERSION};
pub use loss::{
    duration_weights, intent_loss, item_loss, sequence_loss, target_durations, total_loss, LossVars,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use seqintent_tensor::{Gradients, Graph};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{Interaction, UserSequence};
use crate::error::{Error, Result};
use crate::model::{Model, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub item: f64,
    pub intents: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub heads: Vec<String>,
    pub epochs: Vec<EpochLoss>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,item");
        for h in &self.heads {
            out.push_str(&format!(",intent_{h}"));
        }
        out.push_str(",total\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{}", e.epoch, e.item));
            for v in &e.intents {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", e.total));
        }
        out
    }

    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }
}

/// Loss values and gradient of one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub grads: Gradients,
    pub item: f64,
    pub intents: Vec<f64>,
    pub total: f64,
    /// Number of target positions in the batch.
    pub positions: usize,
}

struct UserResult {
    grads: Gradients,
    item: f64,
    intents: Vec<f64>,
    total: f64,
}

fn user_pass(
    model: &Model,
    seq: &[Interaction],
    weights: &[f64],
    norm: f64,
    lambda: f64,
    user_id: u64,
) -> Result<UserResult> {
    let mut g = Graph::with_params(&model.params);
    let out = model.net.forward(&mut g, seq)?;
    let l = sequence_loss(&mut g, &out, &model.net.heads, seq, weights, norm, lambda)?;
    let total = g.value(l.total).data()[0];
    if !total.is_finite() {
        let at = g
            .first_non_finite()
            .map(|nf| nf.to_string())
            .unwrap_or_else(|| "loss".to_string());
        return Err(Error::Numeric(format!(
            "non-finite loss for user {user_id}; first non-finite tensor: {at}"
        )));
    }
    let grads = g.backward(l.total)?;
    Ok(UserResult {
        grads,
        item: g.value(l.item).data()[0],
        intents: l.intents.iter().map(|&v| g.value(v).data()[0]).collect(),
        total,
    })
}

/// Gradient of the mean batch loss. Users are processed in parallel when
/// `pool` is given; their gradients are always summed in batch order.
pub fn batch_gradients(
    model: &Model,
    batch: &[&UserSequence],
    pool: Option<&rayon::ThreadPool>,
) -> Result<BatchResult> {
    let cfg = model.config();
    let max_len = cfg.features.max_len;
    let seqs: Vec<&[Interaction]> = batch.iter().map(|u| u.truncated(max_len)).collect();
    let durations: Vec<f64> = seqs.iter().flat_map(|s| target_durations(s)).collect();
    let positions = durations.len();
    if positions == 0 {
        return Err(Error::validation(
            "interactions",
            "batch has no target positions",
        ));
    }
    let weights = duration_weights(&durations, cfg.training.duration_weighting);
    let norm = 1.0 / positions as f64;
    let lambda = cfg.training.lambda;

    let mut offsets = Vec::with_capacity(seqs.len());
    let mut at = 0;
    for s in &seqs {
        offsets.push(at);
        at += s.len() - 1;
    }
    let run = |i: usize| {
        let s = seqs[i];
        let w = &weights[offsets[i]..offsets[i] + s.len() - 1];
        user_pass(model, s, w, norm, lambda, batch[i].user_id)
    };
    let results: Vec<Result<UserResult>> = match pool {
        Some(pool) => pool.install(|| (0..seqs.len()).into_par_iter().map(run).collect()),
        None => (0..seqs.len()).map(run).collect(),
    };

    let mut out = BatchResult {
        grads: Gradients::default(),
        item: 0.0,
        intents: vec![0.0; model.net.heads.len()],
        total: 0.0,
        positions,
    };
    for r in results {
        let r = r?;
        out.grads.add_assign(&r.grads);
        out.item += r.item;
        out.intents
            .iter_mut()
            .zip(&r.intents)
            .for_each(|(a, b)| *a += b);
        out.total += r.total;
    }
    Ok(out)
}

/// Model, optimizer state and loss history of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub trace: LossTrace,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        Ok(Self::from_model(Model::new(config)?))
    }

    pub fn from_model(model: Model) -> Self {
        let adam = Adam::new(model.config().training.lr, &model.params);
        let heads = model.net.heads.iter().map(|h| h.name.clone()).collect();
        Self {
            model,
            adam,
            trace: LossTrace {
                heads,
                epochs: Vec::new(),
            },
        }
    }

    /// Resumes from a checkpoint; a checkpoint without optimizer state
    /// restarts Adam's moments.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.to_model()?;
        let mut t = Self::from_model(model);
        if let Some(adam) = &ckpt.optimizer {
            adam.check_compatible(&t.model.params)?;
            t.adam = adam.clone();
        }
        if let Some(trace) = &ckpt.trace {
            t.trace = trace.clone();
        }
        if t.trace.epochs.len() != ckpt.epochs_completed {
            return Err(Error::validation(
                "trace",
                format!(
                    "{} trace rows for {} completed epochs",
                    t.trace.epochs.len(),
                    ckpt.epochs_completed
                ),
            ));
        }
        Ok(t)
    }

    pub fn epochs_completed(&self) -> usize {
        self.trace.epochs.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model, self.epochs_completed());
        c.optimizer = Some(self.adam.clone());
        c.trace = Some(self.trace.clone());
        c
    }

    /// Replaces the training section, e.g. to extend the epoch budget on
    /// resume. Shape-determining sections must not change.
    pub fn set_training(&mut self, training: crate::config::TrainConfig) -> Result<()> {
        let mut cfg = self.model.config().clone();
        cfg.training = training;
        cfg.validate()?;
        self.adam.lr = cfg.training.lr;
        self.model.net = Network::new(&cfg)?;
        Ok(())
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config().training.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `users` in a seeded shuffled order.
    pub fn run_epoch(&mut self, users: &[UserSequence]) -> Result<EpochLoss> {
        let usable: Vec<&UserSequence> = users.iter().filter(|u| u.len() >= 2).collect();
        if usable.is_empty() {
            return Err(Error::validation(
                "train",
                "no user has two or more interactions",
            ));
        }
        let tc = self.model.config().training.clone();
        let pool = if tc.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(tc.threads)
                    .build()
                    .map_err(|e| Error::config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        let epoch = self.epochs_completed();
        let order = self.epoch_order(usable.len(), epoch);
        let mut acc = EpochLoss {
            epoch: epoch + 1,
            item: 0.0,
            intents: vec![0.0; self.model.net.heads.len()],
            total: 0.0,
        };
        let mut positions = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&UserSequence> = chunk.iter().map(|&i| usable[i]).collect();
            let r = batch_gradients(&self.model, &batch, pool.as_ref())?;
            self.adam.update(&mut self.model.params, &r.grads);
            let p = r.positions as f64;
            acc.item += r.item * p;
            acc.intents
                .iter_mut()
                .zip(&r.intents)
                .for_each(|(a, b)| *a += b * p);
            acc.total += r.total * p;
            positions += r.positions;
        }
        let p = positions as f64;
        acc.item /= p;
        acc.intents.iter_mut().for_each(|v| *v /= p);
        acc.total /= p;
        log::debug!("epoch {} total loss {:.5}", acc.epoch, acc.total);
        self.trace.epochs.push(acc.clone());
        Ok(acc)
    }

    /// Trains until `training.epochs` epochs have completed in total.
    pub fn fit(&mut self, users: &[UserSequence]) -> Result<&LossTrace> {
        while self.epochs_completed() < self.model.config().training.epochs {
            self.run_epoch(users)?;
        }
        Ok(&self.trace)
    }
}

/// Trains a fresh model for `config.training.epochs` epochs.
pub fn train(users: &[UserSequence], config: &Config) -> Result<Trainer> {
    let mut t = Trainer::new(config)?;
    t.fit(users)?;
    Ok(t)
}

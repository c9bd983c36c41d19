//! Epoch loop: seeded shuffling, joint loss and gradients per batch, Adam
//! updates, validation Recall@50 for model selection, early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::checkpoint::{Checkpoint, Progress};
use crate::config::TrainConfig;
use crate::corpus::{Corpus, EvalCase, Split, TrainSample};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions, MetricsReport};
use crate::graphs::Graphs;
use crate::model::{ForwardOptions, ModelParams};
use crate::objectives::{joint_loss_and_grads, Hyper};
use crate::optim::{adam_step, OptimizerState};
use crate::rng::{substream, Stream};

/// Cutoff used for model selection.
pub const SELECTION_CUTOFF: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-averaged prediction loss.
    pub loss_p: f64,
    pub loss_il: f64,
    pub loss_fl: f64,
    pub val_recall50: f64,
    /// Batch-averaged joint objective.
    pub joint: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_p,loss_il,loss_fl,val_recall50\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.loss_p, r.loss_il, r.loss_fl, r.val_recall50
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_params: ModelParams,
    pub history: History,
    /// State after the last completed epoch, suitable for resuming.
    pub last: Checkpoint,
}

/// Holds everything that stays fixed during a run: the graphs (built once
/// from training users), the training samples and the validation cases.
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    config: TrainConfig,
    hyper: Hyper,
    graphs: Graphs,
    samples: Vec<TrainSample>,
    val_cases: Vec<EvalCase>,
    val_skipped: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let samples = corpus.make_train_samples();
        if samples.is_empty() {
            return Err(Error::Precondition("no training samples".into()));
        }
        let (val_cases, val_skipped) = corpus.make_eval_cases(Split::Val);
        if val_cases.is_empty() {
            return Err(Error::Precondition("validation split has no evaluable users".into()));
        }
        let graphs = Graphs::build(corpus, config.graph_options())?;
        Ok(Trainer {
            corpus,
            hyper: config.hyper(),
            config,
            graphs,
            samples,
            val_cases,
            val_skipped,
        })
    }

    pub fn graphs(&self) -> &Graphs {
        &self.graphs
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn samples(&self) -> &[TrainSample] {
        &self.samples
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            cutoffs: vec![20, 50],
            allow_repeats: self.config.allow_repeats,
            forward: ForwardOptions {
                attend_positioned: self.config.attend_positioned,
            },
        }
    }

    /// Fresh parameters from the run's init stream.
    pub fn initial_state(&self) -> Checkpoint {
        let mut rng = substream(self.config.seed, Stream::Init, 0);
        let params = ModelParams::init(
            self.corpus.num_users(),
            self.corpus.num_items(),
            self.config.dim,
            &mut rng,
        );
        Checkpoint {
            config: self.config.clone(),
            epoch: 0,
            progress: Progress::default(),
            optimizer: OptimizerState::new(&params),
            params,
            best_params: None,
        }
    }

    pub fn validate(&self, params: &ModelParams) -> Result<MetricsReport> {
        evaluate(params, &self.val_cases, self.val_skipped, &self.eval_options())
    }

    /// One pass over the shuffled training samples. Returns batch-averaged
    /// losses; `val_recall50` is left at zero.
    pub fn train_epoch(&self, state: &mut Checkpoint) -> Result<EpochRecord> {
        let epoch = state.epoch as u64;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut substream(seed, Stream::Shuffle, epoch));

        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.config.batch).enumerate() {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| self.samples[i].clone()).collect();
            let mut rng = substream(seed, Stream::Negatives, (epoch << 32) | b as u64);
            let bundle = joint_loss_and_grads(&state.params, &batch, &self.graphs, &self.hyper, &mut rng)?;
            adam_step(&mut state.params, &bundle.grads, &mut state.optimizer, self.config.lr)?;
            if let Some(name) = state.params.first_non_finite() {
                return Err(Error::Numerical(format!("parameter {name} after update")));
            }
            sums[0] += bundle.lp;
            sums[1] += bundle.lil;
            sums[2] += bundle.lfl;
            sums[3] += bundle.joint;
            batches += 1;
        }
        state.epoch += 1;
        let n = batches as f64;
        Ok(EpochRecord {
            epoch: state.epoch,
            loss_p: sums[0] / n,
            loss_il: sums[1] / n,
            loss_fl: sums[2] / n,
            val_recall50: 0.0,
            joint: sums[3] / n,
        })
    }

    /// Trains from `state` until `max_epochs` or early stopping. `on_epoch`
    /// sees the state and record after each epoch (for checkpointing).
    pub fn run(
        &self,
        mut state: Checkpoint,
        mut on_epoch: impl FnMut(&Checkpoint, &EpochRecord) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let mut history = History::default();
        while state.epoch < self.config.max_epochs {
            if self.config.patience > 0 && state.progress.stale_epochs >= self.config.patience {
                break;
            }
            let mut record = self.train_epoch(&mut state)?;
            record.val_recall50 = self.validate(&state.params)?.recall(SELECTION_CUTOFF);
            if record.val_recall50 > state.progress.best_recall {
                state.progress.best_recall = record.val_recall50;
                state.progress.best_epoch = state.epoch;
                state.progress.stale_epochs = 0;
                state.best_params = Some(state.params.clone());
            } else {
                state.progress.stale_epochs += 1;
            }
            history.records.push(record);
            on_epoch(&state, &record)?;
        }
        let best_params = state.best_params.clone().unwrap_or_else(|| state.params.clone());
        Ok(TrainOutcome {
            best_params,
            history,
            last: state,
        })
    }
}

/// Builds graphs, trains from scratch and returns the best parameters.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    let trainer = Trainer::new(corpus, config.clone())?;
    trainer.run(trainer.initial_state(), |_, _| Ok(()))
}

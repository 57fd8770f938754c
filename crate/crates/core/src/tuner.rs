//! Hyperparameter study: random search over the documented intervals, trials
//! run through the trainer, and median-rule pruning with an append-only
//! journal for crash-safe resumption.

use crate::error::{Error, Result};
use crate::loss::LossParams;
use crate::numeric::mix_key;
use crate::preprocess::TileSet;
use crate::trainer::{train_with_callback, TrainConfig};
use crate::unet::{UNetConfig, UNetModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

// rng stream tags, mixed with (seed, trial)
const TAG_SAMPLE: u64 = 0x5341_4D50;
const TAG_MODEL: u64 = 0x4D4F_444C;
const TAG_TRAIN: u64 = 0x5452_4149;

/// The first trials run without pruning, as do the first epochs of every
/// trial.
pub const PRUNE_WARMUP_TRIALS: u64 = 10;
pub const PRUNE_WARMUP_EPOCHS: usize = 30;

/// Search intervals. Defaults reproduce the published study space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub base_filters: (usize, usize),
    pub filter_sizes: Vec<usize>,
    pub learning_rate: (f64, f64),
    pub dropout_rate: (f64, f64),
    pub alpha: (f64, f64),
    pub gamma: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            base_filters: (8, 32),
            filter_sizes: vec![3, 5, 7],
            learning_rate: (1e-5, 1e-3),
            dropout_rate: (0.0, 0.5),
            alpha: (0.3, 0.7),
            gamma: (1.0, 3.0),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.base_filters.0 == 0 || self.base_filters.0 > self.base_filters.1 {
            return Err(Error::Config(format!(
                "base_filters interval {:?} is empty or zero",
                self.base_filters
            )));
        }
        if self.filter_sizes.is_empty() || self.filter_sizes.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "filter_sizes must be a nonempty odd set, got {:?}",
                self.filter_sizes
            )));
        }
        for (name, (lo, hi)) in [
            ("learning_rate", self.learning_rate),
            ("dropout_rate", self.dropout_rate),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::Config(format!("{name} interval [{lo}, {hi}] is invalid")));
            }
        }
        if self.learning_rate.0 <= 0.0 {
            return Err(Error::Config(
                "learning_rate interval must be strictly positive for log-uniform sampling".into(),
            ));
        }
        Ok(())
    }
}

/// One trial's hyperparameter draw. `beta` is always 1 − alpha, never
/// sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledParams {
    pub base_filters: usize,
    pub filter_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Independent draws, deterministic in (seed, trial).
pub fn sample_params(space: &SearchSpace, trial: u64, seed: u64) -> Result<SampledParams> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_key(&[seed, trial, TAG_SAMPLE]));
    let base_filters = rng.random_range(space.base_filters.0..=space.base_filters.1);
    let filter_size = space.filter_sizes[rng.random_range(0..space.filter_sizes.len())];
    let learning_rate = 10f64.powf(
        rng.random_range(space.learning_rate.0.log10()..=space.learning_rate.1.log10()),
    );
    let dropout_rate = rng.random_range(space.dropout_rate.0..=space.dropout_rate.1);
    let alpha = rng.random_range(space.alpha.0..=space.alpha.1);
    let gamma = rng.random_range(space.gamma.0..=space.gamma.1);
    Ok(SampledParams {
        base_filters,
        filter_size,
        learning_rate,
        dropout_rate,
        alpha,
        beta: 1.0 - alpha,
        gamma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Running,
    Complete,
    Pruned,
    Failed,
}

/// Replayed state of one trial.
#[derive(Debug, Clone, Serialize)]
pub struct TrialState {
    pub index: u64,
    pub params: SampledParams,
    /// (epoch, val_mmcc) reports, ordered by epoch.
    pub intermediates: Vec<(usize, f64)>,
    pub status: TrialStatus,
    /// Final best reported by the trainer (complete trials only).
    pub best_val_mmcc: Option<f64>,
    /// Epoch at which the trial was pruned, if it was.
    pub pruned_epoch: Option<usize>,
}

/// One line of journal.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    Start { trial: u64, params: SampledParams },
    Report { trial: u64, epoch: usize, val_mmcc: f64 },
    Complete { trial: u64, best_val_mmcc: f64 },
    Pruned { trial: u64, epoch: usize },
    Failed { trial: u64, message: String },
}

impl JournalEvent {
    fn trial(&self) -> u64 {
        match self {
            JournalEvent::Start { trial, .. }
            | JournalEvent::Report { trial, .. }
            | JournalEvent::Complete { trial, .. }
            | JournalEvent::Pruned { trial, .. }
            | JournalEvent::Failed { trial, .. } => *trial,
        }
    }
}

/// Append-only study journal: each appended event is applied in memory and,
/// when backed by a file, written out immediately. Reopening a journal
/// replays the file; a `start` event for a known trial resets it, so
/// interrupted trials rerun cleanly.
#[derive(Debug)]
pub struct TrialJournal {
    path: Option<PathBuf>,
    trials: BTreeMap<u64, TrialState>,
}

impl TrialJournal {
    pub fn in_memory() -> Self {
        Self { path: None, trials: BTreeMap::new() }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut journal = Self { path: Some(path.to_path_buf()), trials: BTreeMap::new() };
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let event: JournalEvent = serde_json::from_str(line)
                    .map_err(|e| Error::Format(format!("journal line {}: {e}", i + 1)))?;
                journal.apply(event)?;
            }
        }
        Ok(journal)
    }

    fn apply(&mut self, event: JournalEvent) -> Result<()> {
        let trial = event.trial();
        match event {
            JournalEvent::Start { params, .. } => {
                self.trials.insert(
                    trial,
                    TrialState {
                        index: trial,
                        params,
                        intermediates: Vec::new(),
                        status: TrialStatus::Running,
                        best_val_mmcc: None,
                        pruned_epoch: None,
                    },
                );
                return Ok(());
            }
            _ => {}
        }
        let state = self
            .trials
            .get_mut(&trial)
            .ok_or_else(|| Error::Format(format!("journal event for unknown trial {trial}")))?;
        match event {
            JournalEvent::Report { epoch, val_mmcc, .. } => {
                state.intermediates.push((epoch, val_mmcc));
            }
            JournalEvent::Complete { best_val_mmcc, .. } => {
                state.status = TrialStatus::Complete;
                state.best_val_mmcc = Some(best_val_mmcc);
            }
            JournalEvent::Pruned { epoch, .. } => {
                state.status = TrialStatus::Pruned;
                state.pruned_epoch = Some(epoch);
            }
            JournalEvent::Failed { .. } => state.status = TrialStatus::Failed,
            JournalEvent::Start { .. } => unreachable!(),
        }
        Ok(())
    }

    pub fn append(&mut self, event: JournalEvent) -> Result<()> {
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&event)
                .map_err(|e| Error::Format(format!("journal serialization: {e}")))?;
            let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(file, "{line}")?;
        }
        self.apply(event)
    }

    pub fn trial(&self, index: u64) -> Option<&TrialState> {
        self.trials.get(&index)
    }

    pub fn trials(&self) -> impl Iterator<Item = &TrialState> {
        self.trials.values()
    }

    /// val_mmcc values reported at `epoch` by trials with a smaller index.
    pub fn prior_reports_at(&self, trial: u64, epoch: usize) -> Vec<f64> {
        self.trials
            .range(..trial)
            .filter_map(|(_, state)| {
                state.intermediates.iter().find(|(e, _)| *e == epoch).map(|(_, v)| *v)
            })
            .collect()
    }

    /// Best complete trial: (index, value), where value is the maximum over
    /// all of the trial's recorded intermediate values.
    pub fn best_complete(&self) -> Option<(u64, f64)> {
        self.trials
            .values()
            .filter(|s| s.status == TrialStatus::Complete)
            .filter_map(|s| {
                s.intermediates
                    .iter()
                    .map(|(_, v)| *v)
                    .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
                    .map(|v| (s.index, v))
            })
            .fold(None, |acc: Option<(u64, f64)>, (i, v)| match acc {
                Some((_, best)) if best >= v => acc,
                _ => Some((i, v)),
            })
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// The median pruning rule. The first `PRUNE_WARMUP_TRIALS` trials (0-based
/// index) and the first `PRUNE_WARMUP_EPOCHS` epochs (1-based) of every
/// trial are never pruned; afterwards a trial is pruned iff its value falls
/// strictly below the median of the values prior trials reported at the same
/// epoch.
pub fn should_prune(journal: &TrialJournal, trial: u64, epoch: usize, value: f64) -> bool {
    if trial < PRUNE_WARMUP_TRIALS || epoch <= PRUNE_WARMUP_EPOCHS {
        return false;
    }
    let prior = journal.prior_reports_at(trial, epoch);
    if prior.is_empty() {
        return false;
    }
    value < median(prior)
}

/// Runs a single trial: report each epoch's val_mmcc through `report` and
/// stop early when it returns `Break`. Returns the trial's best val_mmcc.
pub trait TrialRunner {
    fn run(
        &mut self,
        trial: u64,
        params: &SampledParams,
        report: &mut dyn FnMut(usize, f64) -> Result<ControlFlow<()>>,
    ) -> Result<f64>;
}

/// The production runner: builds a model from the sampled params and trains
/// it on the tileset.
pub struct UnetTrialRunner<'a> {
    pub tileset: &'a TileSet,
    pub base_model: UNetConfig,
    pub base_train: TrainConfig,
    pub seed: u64,
}

impl TrialRunner for UnetTrialRunner<'_> {
    fn run(
        &mut self,
        trial: u64,
        params: &SampledParams,
        report: &mut dyn FnMut(usize, f64) -> Result<ControlFlow<()>>,
    ) -> Result<f64> {
        let model_config = UNetConfig {
            base_filters: params.base_filters,
            filter_size: params.filter_size,
            dropout_rate: params.dropout_rate,
            ..self.base_model
        };
        let train_config = TrainConfig {
            learning_rate: params.learning_rate,
            loss: LossParams::new(params.alpha, params.gamma)?,
            checkpoint_dir: self.base_train.checkpoint_dir.join(format!("trial-{trial:03}")),
            seed: mix_key(&[self.seed, trial, TAG_TRAIN]),
            ..self.base_train.clone()
        };
        let model = UNetModel::build(model_config, mix_key(&[self.seed, trial, TAG_MODEL]))?;
        let mut callback_error = None;
        let outcome = train_with_callback(model, self.tileset, &train_config, |record| {
            match report(record.epoch, record.val_mmcc) {
                Ok(flow) => flow,
                Err(e) => {
                    callback_error = Some(e);
                    ControlFlow::Break(())
                }
            }
        })?;
        if let Some(e) = callback_error {
            return Err(e);
        }
        Ok(outcome.best_val_mmcc)
    }
}

/// Run (or resume) a study of `n_trials` trials. Trials already terminal in
/// the journal are skipped; interrupted trials restart from scratch. Trial
/// failures with numeric causes are recorded and the study continues.
pub fn run_study(
    journal: &mut TrialJournal,
    space: &SearchSpace,
    n_trials: u64,
    seed: u64,
    runner: &mut dyn TrialRunner,
) -> Result<()> {
    space.validate()?;
    for trial in 0..n_trials {
        if journal
            .trial(trial)
            .is_some_and(|s| s.status != TrialStatus::Running)
        {
            continue; // already finished in a previous run
        }
        let params = sample_params(space, trial, seed)?;
        journal.append(JournalEvent::Start { trial, params })?;
        let result = {
            // appends must go through the journal so prune decisions always
            // see the freshest state
            let journal_cell = std::cell::RefCell::new(&mut *journal);
            let mut report = |epoch: usize, val_mmcc: f64| -> Result<ControlFlow<()>> {
                let mut j = journal_cell.borrow_mut();
                j.append(JournalEvent::Report { trial, epoch, val_mmcc })?;
                if should_prune(&j, trial, epoch, val_mmcc) {
                    j.append(JournalEvent::Pruned { trial, epoch })?;
                    return Ok(ControlFlow::Break(()));
                }
                Ok(ControlFlow::Continue(()))
            };
            runner.run(trial, &params, &mut report)
        };
        match result {
            Ok(best_val_mmcc) => {
                if journal.trial(trial).map(|s| s.status) != Some(TrialStatus::Pruned) {
                    journal.append(JournalEvent::Complete { trial, best_val_mmcc })?;
                }
            }
            Err(Error::Training(message)) | Err(Error::Numeric(message)) => {
                journal.append(JournalEvent::Failed { trial, message })?;
            }
            Err(other) => return Err(other),
        }
    }
    Ok(())
}

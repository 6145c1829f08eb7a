//! Joint training of the question policy and the rating head.
//!
//! Each epoch shuffles the training users and processes them in batches.
//! Within a batch the interviews run in parallel against a frozen model.
//! Then the head is updated on the terminal states. Rewards come from the
//! updated head, and the DQN is fitted to the resulting return targets.
//!
//! When test RMSE has not improved for `retrain_patience` evaluations, the
//! best bundle is restored, the DQN learning rate drops to
//! `restart_dqn_lr` and the exploration schedule starts over.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{Head, ModelBundle, ModelKind, PolicyKind};
use crate::dataset::{hex, EvaluationSplit, RatingsDataset};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::heads::{HeadConfig, RatingSample};
use crate::interview::{run_interview, AnswerMode, RandomPolicy, SimulatedUser, Trajectory, DEFAULT_ACTION_COUNT};
use crate::numerics::{derive_seed, seeded_rng, SeededRng};
use crate::qnet::{build_targets, DqnConfig, DqnPolicy, EpsilonSchedule, QTarget};

/// Reward RMSE is floored here before inversion.
pub const RMSE_FLOOR: f64 = 1e-6;

pub const METRICS_HEADER: &str = "epoch,test_rmse,train_reward_mean,epsilon,dqn_lr,wall_seconds";

const TAG_EPOCH: u64 = 0xE9;
const TAG_ROLLOUT: u64 = 0x20;

/// Which of a user's observed ratings enter the training reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardRatings {
    /// Every observed rating except those asked in the interview.
    #[default]
    NonInterviewed,
    AllObserved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub policy: PolicyKind,
    /// Questions per interview.
    pub questions: usize,
    pub epochs: usize,
    pub users_per_batch: usize,
    pub gamma: f64,
    pub epsilon: EpsilonSchedule,
    pub dqn: DqnConfig,
    /// DQN learning rate after a restart.
    pub restart_dqn_lr: f64,
    pub head: HeadConfig,
    /// Non-improving evaluations tolerated before a restart.
    pub retrain_patience: usize,
    /// Evaluate test RMSE every this many epochs (the last epoch is always evaluated).
    pub eval_stride: usize,
    pub checkpoint_every: usize,
    pub reward_ratings: RewardRatings,
    pub action_count: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::QRating,
            policy: PolicyKind::Dqn,
            questions: 3,
            epochs: 600,
            users_per_batch: 100,
            gamma: 1.0,
            epsilon: EpsilonSchedule::default(),
            dqn: DqnConfig::default(),
            restart_dqn_lr: 1e-5,
            head: HeadConfig::default(),
            retrain_patience: 50,
            eval_stride: 1,
            checkpoint_every: 25,
            reward_ratings: RewardRatings::NonInterviewed,
            action_count: DEFAULT_ACTION_COUNT,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.questions == 0 || self.questions > self.action_count {
            return fail(format!(
                "questions must be in 1..={}, got {}",
                self.action_count, self.questions
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if self.users_per_batch == 0 || self.eval_stride == 0 || self.checkpoint_every == 0 {
            return fail("users_per_batch, eval_stride and checkpoint_every must be positive".into());
        }
        if self.dqn.minibatch == 0 || self.head.minibatch == 0 || self.head.ratings_per_user == 0 {
            return fail("minibatch sizes and ratings_per_user must be positive".into());
        }
        for (name, p) in [("dqn.dropout", self.dqn.dropout), ("head.dropout", self.head.dropout)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        for (name, lr) in [
            ("dqn.learning_rate", self.dqn.learning_rate),
            ("head.learning_rate", self.head.learning_rate),
            ("restart_dqn_lr", self.restart_dqn_lr),
        ] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return fail(format!("{name} must be a non-negative number, got {lr}"));
            }
        }
        Ok(())
    }

    /// Short stable digest of the configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))[..12].to_string()
    }
}

/// RMSE of the bundle's predictions for `user` after `trajectory`, floored
/// at [`RMSE_FLOOR`]. `None` when the user has no eligible ratings.
pub fn training_rmse(
    bundle: &ModelBundle,
    dataset: &RatingsDataset,
    user: u32,
    trajectory: &Trajectory,
    set: RewardRatings,
) -> Result<Option<f64>> {
    let asked: HashSet<u32> = trajectory.movies().into_iter().collect();
    let (movies, truth): (Vec<u32>, Vec<f64>) = dataset
        .user_ratings(user)?
        .iter()
        .filter(|r| set == RewardRatings::AllObserved || !asked.contains(&r.movie))
        .map(|r| (r.movie, f64::from(r.value)))
        .unzip();
    if movies.is_empty() {
        return Ok(None);
    }
    let predicted = bundle.predict_ratings(&trajectory.terminal, &movies)?;
    Ok(Some(rmse(&predicted, &truth).max(RMSE_FLOOR)))
}

/// Inverse RMSE with the floor applied.
pub fn reward_from_rmse(rmse: f64) -> f64 {
    1.0 / rmse.max(RMSE_FLOOR)
}

pub(crate) fn rmse(predicted: &[f64], truth: &[f64]) -> f64 {
    let sq: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    (sq / truth.len() as f64).sqrt()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochStats {
    pub interviews: usize,
    pub skipped_users: usize,
    pub reward_mean: f64,
    pub head_loss: f64,
    pub dqn_loss: f64,
}

struct Rollout {
    user: u32,
    trajectory: Trajectory,
    seen_q: Vec<Vec<f64>>,
}

/// One pass over the training users with exploration rate `epsilon`.
pub fn train_epoch(
    bundle: &mut ModelBundle,
    dataset: &RatingsDataset,
    split: &EvaluationSplit,
    epoch: usize,
    epsilon: f64,
) -> Result<EpochStats> {
    let config = bundle.config.clone();
    let mut rng = seeded_rng(derive_seed(config.seed, &[TAG_EPOCH, epoch as u64]));
    let mut users = split.train_users().to_vec();
    users.shuffle(&mut rng);

    let mut stats = EpochStats::default();
    let (mut reward_sum, mut head_losses, mut dqn_losses) = (0.0, Vec::new(), Vec::new());
    for batch in users.chunks(config.users_per_batch) {
        let rollouts: Vec<Rollout> = batch
            .par_iter()
            .map(|&user| rollout(bundle, dataset, split, user, epoch, epsilon))
            .collect::<Result<_>>()?;
        stats.interviews += rollouts.len();

        head_losses.extend(update_head(bundle, dataset, &rollouts, &mut rng)?);

        let shared: &ModelBundle = bundle;
        let errors: Vec<Option<f64>> = rollouts
            .par_iter()
            .map(|r| training_rmse(shared, dataset, r.user, &r.trajectory, config.reward_ratings))
            .collect::<Result<_>>()?;

        let mut examples: Vec<(&[f64], QTarget)> = Vec::new();
        for (r, e) in rollouts.iter().zip(&errors) {
            let Some(e) = *e else {
                stats.skipped_users += 1;
                log::debug!("user {} has no eligible ratings; skipped", r.user);
                continue;
            };
            reward_sum += reward_from_rmse(e);
            if config.policy == PolicyKind::Dqn {
                let targets = build_targets(&r.trajectory, e, config.gamma, &r.seen_q)?;
                for (step, target) in r.trajectory.steps.iter().zip(targets) {
                    examples.push((step.before.values(), target));
                }
            }
        }
        examples.shuffle(&mut rng);
        for chunk in examples.chunks(config.dqn.minibatch) {
            let batch: Vec<(&[f64], &QTarget)> = chunk.iter().map(|(s, t)| (*s, t)).collect();
            let loss = bundle.dqn.update(&batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("dqn loss"));
            }
            dqn_losses.push(loss);
        }
    }
    let rewarded = stats.interviews - stats.skipped_users;
    stats.reward_mean = if rewarded > 0 {
        reward_sum / rewarded as f64
    } else {
        0.0
    };
    stats.head_loss = mean(&head_losses);
    stats.dqn_loss = mean(&dqn_losses);
    Ok(stats)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn rollout(
    bundle: &ModelBundle,
    dataset: &RatingsDataset,
    split: &EvaluationSplit,
    user: u32,
    epoch: usize,
    epsilon: f64,
) -> Result<Rollout> {
    let rng = seeded_rng(derive_seed(
        bundle.config.seed,
        &[TAG_ROLLOUT, epoch as u64, u64::from(user)],
    ));
    let mut answers = SimulatedUser {
        dataset,
        split,
        user,
        mode: AnswerMode::Train,
    };
    let k = bundle.config.questions;
    match bundle.policy {
        PolicyKind::Dqn => {
            let mut policy = DqnPolicy::new(&bundle.dqn, epsilon, rng);
            let trajectory = run_interview(&bundle.action_space, &mut policy, &mut answers, k)?;
            Ok(Rollout {
                user,
                trajectory,
                seen_q: policy.seen_q,
            })
        }
        PolicyKind::Random => {
            let trajectory = run_interview(&bundle.action_space, &mut RandomPolicy { rng }, &mut answers, k)?;
            Ok(Rollout {
                user,
                trajectory,
                seen_q: Vec::new(),
            })
        }
    }
}

/// Supervised head updates on the batch's terminal states; returns minibatch losses.
fn update_head(
    bundle: &mut ModelBundle,
    dataset: &RatingsDataset,
    rollouts: &[Rollout],
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let minibatch = bundle.config.head.minibatch;
    let mut losses = Vec::new();
    match &mut bundle.head {
        Head::Embedding(head) => {
            let targets: Vec<Vec<f64>> = rollouts
                .iter()
                .map(|r| bundle.factors.scaled_user_target(r.user))
                .collect::<Result<_>>()?;
            let mut pairs: Vec<(&[f64], &[f64])> = rollouts
                .iter()
                .zip(&targets)
                .map(|(r, t)| (r.trajectory.terminal.values(), t.as_slice()))
                .collect();
            pairs.shuffle(rng);
            for chunk in pairs.chunks(minibatch) {
                losses.push(head.update(chunk, rng)?);
            }
        }
        Head::Rating(head) => {
            let per_user = bundle.config.head.ratings_per_user;
            let mut samples = Vec::new();
            for r in rollouts {
                let asked: HashSet<u32> = r.trajectory.movies().into_iter().collect();
                let eligible: Vec<_> = dataset
                    .user_ratings(r.user)?
                    .iter()
                    .filter(|x| !asked.contains(&x.movie))
                    .collect();
                let take = per_user.min(eligible.len());
                for i in index::sample(rng, eligible.len(), take) {
                    samples.push(RatingSample {
                        state: r.trajectory.terminal.values(),
                        movie: eligible[i].movie,
                        rating: f64::from(eligible[i].value),
                    });
                }
            }
            samples.shuffle(rng);
            for chunk in samples.chunks(minibatch) {
                losses.push(head.update(chunk, rng)?);
            }
        }
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("head loss"));
    }
    Ok(losses)
}

/// Counters that let an interrupted run resume where it stopped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epochs_completed: usize,
    /// Epoch at which the exploration schedule last started.
    pub schedule_start: usize,
    pub stale_evaluations: usize,
    pub restarts: usize,
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `None` on epochs skipped by the evaluation stride.
    pub test_rmse: Option<f64>,
    pub train_reward_mean: f64,
    pub epsilon: f64,
    pub dqn_lr: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch,
            self.test_rmse.map(|r| r.to_string()).unwrap_or_default(),
            self.train_reward_mean,
            self.epsilon,
            self.dqn_lr,
            self.wall_seconds
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(EpochRecord {
            epoch: f[0].parse().ok()?,
            test_rmse: if f[1].is_empty() {
                None
            } else {
                Some(f[1].parse().ok()?)
            },
            train_reward_mean: f[2].parse().ok()?,
            epsilon: f[3].parse().ok()?,
            dqn_lr: f[4].parse().ok()?,
            wall_seconds: f[5].parse().ok()?,
        })
    }
}

/// Append-only metrics file; every row is flushed as it is written.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates the file with a header, or appends when `append` and it exists.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            out: BufWriter::new(file),
        };
        if !(append && exists) {
            w.line(METRICS_HEADER, path)?;
        }
        Ok(w)
    }

    pub fn write(&mut self, record: &EpochRecord) -> Result<()> {
        self.line(&record.to_csv_row(), Path::new("metrics"))
    }

    fn line(&mut self, text: &str, path: &Path) -> Result<()> {
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(Error::format(path, "missing metrics header")),
    }
    let mut records: Vec<EpochRecord> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = EpochRecord::parse_csv_row(&line)
            .ok_or_else(|| Error::format(path, format!("bad metrics row {}", i + 2)))?;
        if records.last().is_some_and(|p| p.epoch >= r.epoch) {
            return Err(Error::format(path, format!("epochs not increasing at row {}", i + 2)));
        }
        records.push(r);
    }
    Ok(records)
}

pub type EpochHook<'a> = Box<dyn FnMut(&EpochRecord, &ModelBundle) + 'a>;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where `best.bin`, `latest.bin` and `metrics.csv` go.
    pub out_dir: Option<PathBuf>,
    /// Previous best bundle when resuming.
    pub best: Option<ModelBundle>,
    /// Called after every epoch, after any restart has been applied.
    pub on_epoch: Option<EpochHook<'a>>,
}

pub struct TrainOutcome {
    pub best: ModelBundle,
    pub last: ModelBundle,
    pub metrics: Vec<EpochRecord>,
    /// Epochs after which a restart happened.
    pub restarts: Vec<usize>,
}

pub const BEST_FILE: &str = "best.bin";
pub const LATEST_FILE: &str = "latest.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains until `config.epochs` epochs have completed in total.
pub fn train(
    mut bundle: ModelBundle,
    dataset: &RatingsDataset,
    split: &EvaluationSplit,
    progress: TrainProgress,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    bundle.config.validate()?;
    bundle.check_dataset(dataset)?;
    if !split.matches(dataset) {
        return Err(Error::invalid("split does not match the dataset"));
    }
    let config = bundle.config.clone();
    let mut progress = progress;
    let mut best = options.best.take();
    let mut writer = match &options.out_dir {
        Some(dir) => Some(MetricsWriter::open(
            &dir.join(METRICS_FILE),
            progress.epochs_completed > 0,
        )?),
        None => None,
    };
    let save = |b: &ModelBundle, name: &str| -> Result<()> {
        match &options.out_dir {
            Some(dir) => b.save(&dir.join(name)),
            None => Ok(()),
        }
    };

    let started = Instant::now();
    let mut metrics = Vec::new();
    let mut restarts = Vec::new();
    for epoch in progress.epochs_completed..config.epochs {
        let epsilon = config.epsilon.value(epoch - progress.schedule_start);
        let dqn_lr = bundle.dqn.learning_rate();
        let stats = train_epoch(&mut bundle, dataset, split, epoch, epsilon)?;
        if !bundle.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }

        let evaluate_now = (epoch + 1) % config.eval_stride == 0 || epoch + 1 == config.epochs;
        let test_rmse = if evaluate_now {
            Some(evaluate(&bundle, dataset, split, config.questions)?.pooled_rmse)
        } else {
            None
        };
        if let Some(r) = test_rmse {
            if best.is_none() || bundle.best_test_rmse.is_none_or(|b| r < b) {
                bundle.best_test_rmse = Some(r);
                bundle.epoch_of_best = Some(epoch);
                progress.stale_evaluations = 0;
                save(&bundle, BEST_FILE)?;
                best = Some(bundle.clone());
            } else {
                progress.stale_evaluations += 1;
            }
        }
        progress.epochs_completed = epoch + 1;
        if progress.stale_evaluations > config.retrain_patience {
            if let Some(b) = &best {
                log::info!(
                    "epoch {epoch}: no improvement for {} evaluations; restarting from epoch {:?}",
                    progress.stale_evaluations,
                    b.epoch_of_best
                );
                bundle = b.clone();
                bundle.dqn.set_learning_rate(config.restart_dqn_lr);
                progress.schedule_start = epoch + 1;
                progress.stale_evaluations = 0;
                progress.restarts += 1;
                restarts.push(epoch);
            }
        }
        bundle.progress = progress;
        if progress.epochs_completed % config.checkpoint_every == 0 {
            save(&bundle, LATEST_FILE)?;
        }

        let record = EpochRecord {
            epoch,
            test_rmse,
            train_reward_mean: stats.reward_mean,
            epsilon,
            dqn_lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: eps {epsilon:.2} reward {:.4} head loss {:.4} dqn loss {:.4} test rmse {}{}",
            stats.reward_mean,
            stats.head_loss,
            stats.dqn_loss,
            test_rmse.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".into()),
            if stats.skipped_users > 0 {
                format!(" ({} users skipped)", stats.skipped_users)
            } else {
                String::new()
            }
        );
        if let Some(w) = &mut writer {
            w.write(&record)?;
        }
        if let Some(f) = &mut options.on_epoch {
            f(&record, &bundle);
        }
        metrics.push(record);
    }
    save(&bundle, LATEST_FILE)?;
    let best = best.unwrap_or_else(|| bundle.clone());
    Ok(TrainOutcome {
        best,
        last: bundle,
        metrics,
        restarts,
    })
}

//! Test-user evaluation: greedy interviews answered from interview-set
//! movies only, then rating prediction on the held-out test movies.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::dataset::{EvaluationSplit, RatingsDataset};
use crate::error::{Error, Result};
use crate::interview::{run_interview, ActionSpace, AnswerMode, InterviewState, Policy, SimulatedUser};

/// Published RMSE for 3 and 4 question interviews.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceResult {
    pub model: &'static str,
    pub questions_3: f64,
    pub questions_4: f64,
}

impl ReferenceResult {
    pub fn at(&self, k: usize) -> Option<f64> {
        match k {
            3 => Some(self.questions_3),
            4 => Some(self.questions_4),
            _ => None,
        }
    }
}

/// Decision-tree and functional-MF baselines, never recomputed.
pub const BASELINES: [ReferenceResult; 3] = [
    ReferenceResult {
        model: "Tree",
        questions_3: 0.9767,
        questions_4: 0.9683,
    },
    ReferenceResult {
        model: "TreeU",
        questions_3: 0.9913,
        questions_4: 0.9887,
    },
    ReferenceResult {
        model: "fMF",
        questions_3: 0.9509,
        questions_4: 0.9480,
    },
];

/// Published figures for the two models implemented here.
pub const PUBLISHED: [ReferenceResult; 2] = [
    ReferenceResult {
        model: "q-embedding",
        questions_3: 0.9507,
        questions_4: 0.9486,
    },
    ReferenceResult {
        model: "q-rating",
        questions_3: 0.9472,
        questions_4: 0.9469,
    },
];

pub fn published_rmse(model: &str, k: usize) -> Option<f64> {
    PUBLISHED.iter().find(|r| r.model == model).and_then(|r| r.at(k))
}

/// Rating predictions from a terminal interview state.
pub trait Predictor: Sync {
    fn predict(&self, user: u32, terminal: &InterviewState, movies: &[u32]) -> Result<Vec<f64>>;
}

impl Predictor for ModelBundle {
    fn predict(&self, _user: u32, terminal: &InterviewState, movies: &[u32]) -> Result<Vec<f64>> {
        self.predict_ratings(terminal, movies)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Pooled over all test pairs.
    #[default]
    Micro,
    /// Mean of per-user RMSE.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub model: String,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub turn: usize,
    pub movie_id: u32,
    pub title: String,
    pub genres: Vec<String>,
    pub rating: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInterview {
    /// Original MovieLens user id.
    pub user_id: u32,
    pub rows: Vec<SampleRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub questions: usize,
    pub pooled_rmse: f64,
    pub mean_user_rmse: f64,
    pub median_user_rmse: f64,
    pub n_test_pairs: usize,
    pub n_test_users: usize,
    /// Test users without any test-movie rating.
    pub excluded_users: usize,
    pub baselines: Vec<BaselineRow>,
    pub sample_interviews: Vec<SampleInterview>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub model: String,
    pub questions: usize,
    pub metric: String,
    pub value: f64,
}

impl EvalReport {
    pub fn headline(&self, averaging: Averaging) -> f64 {
        match averaging {
            Averaging::Micro => self.pooled_rmse,
            Averaging::Macro => self.mean_user_rmse,
        }
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        let rec = |metric: &str, value: f64| MetricRecord {
            model: self.model.clone(),
            questions: self.questions,
            metric: metric.to_string(),
            value,
        };
        let mut out = vec![
            rec("pooled_rmse", self.pooled_rmse),
            rec("mean_user_rmse", self.mean_user_rmse),
            rec("median_user_rmse", self.median_user_rmse),
            rec("n_test_pairs", self.n_test_pairs as f64),
            rec("n_test_users", self.n_test_users as f64),
            rec("excluded_users", self.excluded_users as f64),
        ];
        out.extend(self.baselines.iter().map(|b| MetricRecord {
            model: b.model.clone(),
            questions: self.questions,
            metric: "reference_rmse".into(),
            value: b.rmse,
        }));
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model             {}", self.model);
        let _ = writeln!(s, "questions         {}", self.questions);
        let _ = writeln!(s, "pooled RMSE       {:.4}", self.pooled_rmse);
        let _ = writeln!(
            s,
            "per-user RMSE     mean {:.4}, median {:.4}",
            self.mean_user_rmse, self.median_user_rmse
        );
        let _ = writeln!(
            s,
            "test pairs        {} over {} users ({} excluded, no test ratings)",
            self.n_test_pairs, self.n_test_users, self.excluded_users
        );
        if !self.baselines.is_empty() {
            let _ = writeln!(s, "\nreference RMSE at {} questions", self.questions);
            for b in &self.baselines {
                let _ = writeln!(s, "  {:<12} {:.4}", b.model, b.rmse);
            }
        }
        for interview in &self.sample_interviews {
            let _ = writeln!(s, "\nuser {}", interview.user_id);
            let _ = writeln!(s, "  {:<5} {:<48} {:<24} Rating", "Turn", "Movie", "Genre");
            for r in &interview.rows {
                let _ = writeln!(
                    s,
                    "  {:<5} {:<48} {:<24} {}",
                    r.turn,
                    r.title,
                    r.genres.join("|"),
                    r.rating
                );
            }
        }
        s
    }
}

struct UserOutcome {
    squared_error: f64,
    pairs: usize,
}

/// Evaluates an arbitrary policy/predictor pair. `policy_for` builds a fresh
/// policy per test user.
pub fn evaluate_with<'a, F, P>(
    model: &str,
    dataset: &RatingsDataset,
    split: &EvaluationSplit,
    space: &ActionSpace,
    k: usize,
    policy_for: F,
    predictor: &P,
) -> Result<EvalReport>
where
    F: Fn(u32) -> Box<dyn Policy + 'a> + Sync,
    P: Predictor + ?Sized,
{
    if k == 0 {
        return Err(Error::invalid("evaluation needs at least one question"));
    }
    let outcomes: Vec<Option<UserOutcome>> = split
        .test_users()
        .par_iter()
        .map(|&user| {
            let test = dataset.ratings_of(user, Some(split.test_set()))?;
            if test.is_empty() {
                return Ok(None);
            }
            let mut answers = SimulatedUser {
                dataset,
                split,
                user,
                mode: AnswerMode::Test,
            };
            let trajectory = run_interview(space, policy_for(user).as_mut(), &mut answers, k)?;
            let movies: Vec<u32> = test.iter().map(|t| t.0).collect();
            let predicted = predictor.predict(user, &trajectory.terminal, &movies)?;
            if predicted.len() != movies.len() {
                return Err(Error::DimensionMismatch {
                    expected: movies.len(),
                    actual: predicted.len(),
                });
            }
            let squared_error = predicted
                .iter()
                .zip(&test)
                .map(|(p, t)| (p - f64::from(t.1)).powi(2))
                .sum();
            Ok(Some(UserOutcome {
                squared_error,
                pairs: test.len(),
            }))
        })
        .collect::<Result<_>>()?;

    let mut total = 0.0;
    let mut pairs = 0;
    let mut per_user = Vec::new();
    for o in outcomes.iter().flatten() {
        total += o.squared_error;
        pairs += o.pairs;
        per_user.push((o.squared_error / o.pairs as f64).sqrt());
    }
    if pairs == 0 {
        return Err(Error::invalid("no test user has a rating on a test movie"));
    }
    let mean_user_rmse = per_user.iter().sum::<f64>() / per_user.len() as f64;
    per_user.sort_by(f64::total_cmp);
    let mid = per_user.len() / 2;
    let median_user_rmse = if per_user.len() % 2 == 1 {
        per_user[mid]
    } else {
        0.5 * (per_user[mid - 1] + per_user[mid])
    };
    Ok(EvalReport {
        model: model.to_string(),
        questions: k,
        pooled_rmse: (total / pairs as f64).sqrt(),
        mean_user_rmse,
        median_user_rmse,
        n_test_pairs: pairs,
        n_test_users: per_user.len(),
        excluded_users: outcomes.iter().filter(|o| o.is_none()).count(),
        baselines: BASELINES
            .iter()
            .filter_map(|b| {
                b.at(k).map(|rmse| BaselineRow {
                    model: b.model.to_string(),
                    rmse,
                })
            })
            .collect(),
        sample_interviews: Vec::new(),
    })
}

/// Greedy `k`-question evaluation of a trained bundle. No parameters change.
pub fn evaluate(
    bundle: &ModelBundle,
    dataset: &RatingsDataset,
    split: &EvaluationSplit,
    k: usize,
) -> Result<EvalReport> {
    evaluate_with(
        bundle.kind.name(),
        dataset,
        split,
        &bundle.action_space,
        k,
        |user| bundle.policy_for(user),
        bundle,
    )
}

/// Interviews the given users (dense indices) with the bundle's policy and
/// reports each question with its title, genres and simulated answer.
pub fn sample_interviews(
    bundle: &ModelBundle,
    dataset: &RatingsDataset,
    split: &EvaluationSplit,
    users: &[u32],
    k: usize,
) -> Result<Vec<SampleInterview>> {
    users
        .iter()
        .map(|&user| {
            let mut answers = SimulatedUser {
                dataset,
                split,
                user,
                mode: AnswerMode::Test,
            };
            let trajectory = run_interview(&bundle.action_space, bundle.policy_for(user).as_mut(), &mut answers, k)?;
            let rows = trajectory
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let entry = &bundle.catalog[s.movie as usize];
                    SampleRow {
                        turn: i + 1,
                        movie_id: entry.movie_id,
                        title: entry.title.clone(),
                        genres: entry.genres.clone(),
                        rating: s.rating,
                    }
                })
                .collect();
            Ok(SampleInterview {
                user_id: dataset.user_id(user).ok_or(Error::UnknownUser(user))?,
                rows,
            })
        })
        .collect()
}

/// Fraction of interviews whose questions all have different primary genres.
/// Movies without genre tags count as one shared "unknown" genre.
pub fn genre_diversity(interviews: &[SampleInterview]) -> f64 {
    if interviews.is_empty() {
        return 0.0;
    }
    let distinct = interviews
        .iter()
        .filter(|i| {
            let genres: HashSet<&str> = i
                .rows
                .iter()
                .map(|r| r.genres.first().map_or("", String::as_str))
                .collect();
            genres.len() == i.rows.len()
        })
        .count();
    distinct as f64 / interviews.len() as f64
}

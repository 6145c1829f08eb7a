//! Interview environment: the fixed action space, the question-answer state
//! vector, and simulated users.
//!
//! The state for an action space of size `n` has `2n` entries. Entry `2i` is
//! 1 once slot `i` has been asked and entry `2i + 1` holds `rating / 5`, so an
//! "unseen" answer (0) stays distinguishable from every real rating.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EvaluationSplit, RatingsDataset};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seeded_rng};

/// Default number of candidate questions.
pub const DEFAULT_ACTION_COUNT: usize = 100;
pub const MAX_RATING: u8 = 5;

/// The most-rated movies, ordered by descending rating count with ties
/// broken by ascending movie index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpace {
    movies: Vec<u32>,
    position_of: HashMap<u32, usize>,
}

impl ActionSpace {
    pub fn build(dataset: &RatingsDataset, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("action space size must be positive"));
        }
        if dataset.movie_count() < size {
            return Err(Error::invalid(format!(
                "action space needs {size} movies, dataset has {}",
                dataset.movie_count()
            )));
        }
        let counts = dataset.rating_counts_per_movie();
        let mut order: Vec<u32> = (0..dataset.movie_count() as u32).collect();
        order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
        order.truncate(size);
        Self::from_movies(order, dataset.movie_count())
    }

    /// Rebuilds a stored action space, checking indices and distinctness.
    pub fn from_movies(movies: Vec<u32>, movie_count: usize) -> Result<Self> {
        if movies.is_empty() {
            return Err(Error::invalid("action space is empty"));
        }
        let mut position_of = HashMap::with_capacity(movies.len());
        for (slot, &m) in movies.iter().enumerate() {
            if m as usize >= movie_count {
                return Err(Error::UnknownMovie(m));
            }
            if position_of.insert(m, slot).is_some() {
                return Err(Error::invalid(format!("movie {m} appears twice in the action space")));
            }
        }
        Ok(ActionSpace { movies, position_of })
    }

    pub fn len(&self) -> usize {
        self.movies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.movies.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.movies.len()
    }

    pub fn movies(&self) -> &[u32] {
        &self.movies
    }

    pub fn movie(&self, slot: usize) -> Option<u32> {
        self.movies.get(slot).copied()
    }

    pub fn slot_of(&self, movie: u32) -> Option<usize> {
        self.position_of.get(&movie).copied()
    }

    pub fn initial_state(&self) -> InterviewState {
        InterviewState::initial(self.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterviewState {
    values: Vec<f64>,
}

impl InterviewState {
    pub fn initial(action_count: usize) -> Self {
        InterviewState {
            values: vec![0.0; 2 * action_count],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn action_count(&self) -> usize {
        self.values.len() / 2
    }

    pub fn is_asked(&self, slot: usize) -> bool {
        self.values.get(2 * slot).is_some_and(|&v| v != 0.0)
    }

    pub fn asked_count(&self) -> usize {
        (0..self.action_count()).filter(|&s| self.is_asked(s)).count()
    }

    pub fn asked_mask(&self) -> Vec<bool> {
        (0..self.action_count()).map(|s| self.is_asked(s)).collect()
    }

    /// Recorded answer for an asked slot.
    pub fn answer(&self, slot: usize) -> Option<u8> {
        self.is_asked(slot)
            .then(|| (self.values[2 * slot + 1] * f64::from(MAX_RATING)).round() as u8)
    }

    /// Returns a copy with `slot` marked asked and `rating` recorded.
    pub fn step(&self, slot: usize, rating: u8) -> Result<Self> {
        if slot >= self.action_count() {
            return Err(Error::invalid(format!(
                "slot {slot} outside action space of {}",
                self.action_count()
            )));
        }
        if rating > MAX_RATING {
            return Err(Error::InvalidRating(rating));
        }
        if self.is_asked(slot) {
            return Err(Error::RepeatedQuestion(slot));
        }
        let mut next = self.clone();
        next.values[2 * slot] = 1.0;
        next.values[2 * slot + 1] = f64::from(rating) / f64::from(MAX_RATING);
        Ok(next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    /// Any observed rating is revealed.
    Train,
    /// Ratings of test-set movies are reported as unseen.
    Test,
}

/// The rating a simulated user gives when asked about `movie`; 0 means unseen.
pub fn simulate_answer(
    dataset: &RatingsDataset,
    split: &EvaluationSplit,
    user: u32,
    movie: u32,
    mode: AnswerMode,
) -> u8 {
    if mode == AnswerMode::Test && split.is_test_movie(movie) {
        return 0;
    }
    dataset.rating(user, movie).unwrap_or(0)
}

/// Chooses the next question slot.
pub trait Policy {
    fn choose(&mut self, state: &InterviewState) -> Result<usize>;
}

/// Supplies the answer to a question about `movie` (in slot `slot`).
pub trait AnswerSource {
    fn answer(&mut self, slot: usize, movie: u32) -> Result<u8>;
}

/// A dataset user answering from their observed ratings.
#[derive(Debug, Clone, Copy)]
pub struct SimulatedUser<'a> {
    pub dataset: &'a RatingsDataset,
    pub split: &'a EvaluationSplit,
    pub user: u32,
    pub mode: AnswerMode,
}

impl AnswerSource for SimulatedUser<'_> {
    fn answer(&mut self, _slot: usize, movie: u32) -> Result<u8> {
        Ok(simulate_answer(self.dataset, self.split, self.user, movie, self.mode))
    }
}

impl<F: FnMut(usize, u32) -> Result<u8>> AnswerSource for F {
    fn answer(&mut self, slot: usize, movie: u32) -> Result<u8> {
        self(slot, movie)
    }
}

/// Uniform choice among unasked slots.
#[derive(Debug, Clone)]
pub struct RandomPolicy<R> {
    pub rng: R,
}

impl<R: Rng> Policy for RandomPolicy<R> {
    fn choose(&mut self, state: &InterviewState) -> Result<usize> {
        let open: Vec<usize> = (0..state.action_count()).filter(|&s| !state.is_asked(s)).collect();
        if open.is_empty() {
            return Err(Error::AllActionsMasked);
        }
        Ok(open[self.rng.random_range(0..open.len())])
    }
}

/// Random policy whose draws depend only on `(seed, user, questions asked)`,
/// so evaluation stays deterministic regardless of scheduling.
pub fn keyed_random_policy(seed: u64, user: u32) -> impl Policy {
    struct Keyed {
        seed: u64,
        user: u32,
    }
    impl Policy for Keyed {
        fn choose(&mut self, state: &InterviewState) -> Result<usize> {
            let key = derive_seed(self.seed, &[u64::from(self.user), state.asked_count() as u64]);
            RandomPolicy { rng: seeded_rng(key) }.choose(state)
        }
    }
    Keyed { seed, user }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub before: InterviewState,
    pub slot: usize,
    pub movie: u32,
    pub rating: u8,
    pub after: InterviewState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub terminal: InterviewState,
}

impl Trajectory {
    pub fn k(&self) -> usize {
        self.steps.len()
    }

    pub fn slots(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.slot).collect()
    }

    pub fn movies(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.movie).collect()
    }
}

/// Asks `k` questions. A policy answer that names an already-asked slot is
/// replaced by the lowest unasked slot, so questions never repeat.
pub fn run_interview(
    space: &ActionSpace,
    policy: &mut (impl Policy + ?Sized),
    answers: &mut (impl AnswerSource + ?Sized),
    k: usize,
) -> Result<Trajectory> {
    if k > space.len() {
        return Err(Error::invalid(format!(
            "interview length {k} exceeds action space of {}",
            space.len()
        )));
    }
    let mut state = space.initial_state();
    let mut steps = Vec::with_capacity(k);
    for _ in 0..k {
        let mut slot = policy.choose(&state)?;
        if slot >= space.len() {
            return Err(Error::invalid(format!(
                "policy chose slot {slot} outside the action space"
            )));
        }
        if state.is_asked(slot) {
            slot = (0..space.len())
                .find(|&s| !state.is_asked(s))
                .ok_or(Error::AllActionsMasked)?;
        }
        let movie = space.movies[slot];
        let rating = answers.answer(slot, movie)?;
        let after = state.step(slot, rating)?;
        steps.push(Step {
            before: state,
            slot,
            movie,
            rating,
            after: after.clone(),
        });
        state = after;
    }
    Ok(Trajectory { steps, terminal: state })
}

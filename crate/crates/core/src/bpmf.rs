//! Bayesian probabilistic matrix factorisation by Gibbs sampling.
//!
//! Ratings are modelled as `r ~ N(uᵀv, 1/alpha)` with Gaussian user and movie
//! factors whose means and precisions carry Normal-Wishart hyperpriors. Each
//! sweep resamples both hyperparameter sets and then every user and movie
//! factor from its Gaussian conditional. Point estimates are the average of
//! the post-burn-in samples.
//!
//! Predictions depend on the factors only through `U·Vᵀ`, which is unchanged
//! by `U → U·R, V → V·R⁻ᵀ` for any invertible `R`. The chain drifts along
//! that family, so each kept sample is first mapped into the gauge of the
//! first kept sample (least-squares fit of `R` on the user side). Averaging
//! raw samples instead shrinks or inflates products whenever the drift is
//! large relative to the posterior spread.
//!
//! Per-entity draws use a generator derived from `(seed, sweep, entity)`, so
//! the parallel sampler is bitwise reproducible.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Artifact;
use crate::dataset::{EvaluationSplit, RatingsDataset};
use crate::error::{Error, Result};
use crate::numerics::{
    axpy, cholesky, cholesky_solve, derive_seed, dot, general_inverse, sample_mvn_precision, sample_wishart,
    seeded_rng, spd_inverse, Matrix, SeededRng,
};

pub const FACTORS_KIND: &str = "bpmf-factors";
pub const FACTORS_VERSION: u32 = 1;
/// Latent dimension shared with the interview heads.
pub const EMBEDDING_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", deny_unknown_fields)]
pub enum BpmfInit {
    /// Independent `N(0, sd²)` entries.
    Noise { sd: f64 },
    /// MAP estimate of plain PMF via alternating ridge regressions,
    /// started from `N(0, 0.1²)` noise. `regularization` is scaled by each
    /// entity's rating count.
    Pmf { sweeps: usize, regularization: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpmfConfig {
    pub dim: usize,
    pub gibbs_iterations: usize,
    pub burn_in: usize,
    /// Observation precision.
    pub alpha: f64,
    pub beta0: f64,
    /// Wishart degrees of freedom; defaults to `dim` when unset.
    pub nu0: Option<f64>,
    /// Diagonal of the Wishart scale `W0`.
    pub w0_diag: f64,
    pub mu0: f64,
    pub init: BpmfInit,
    pub seed: u64,
}

impl Default for BpmfConfig {
    fn default() -> Self {
        BpmfConfig {
            dim: EMBEDDING_DIM,
            gibbs_iterations: 200,
            burn_in: 50,
            alpha: 2.0,
            beta0: 2.0,
            nu0: None,
            w0_diag: 1.0,
            mu0: 0.0,
            init: BpmfInit::Pmf {
                sweeps: 10,
                regularization: 0.05,
            },
            seed: 0,
        }
    }
}

impl BpmfConfig {
    pub fn nu0(&self) -> f64 {
        self.nu0.unwrap_or(self.dim as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("bpmf dim must be positive"));
        }
        if self.burn_in >= self.gibbs_iterations {
            return Err(Error::invalid(format!(
                "burn_in {} must be below gibbs_iterations {}",
                self.burn_in, self.gibbs_iterations
            )));
        }
        if self.nu0() < self.dim as f64 {
            return Err(Error::invalid("nu0 must be at least dim"));
        }
        if !(self.alpha > 0.0 && self.beta0 > 0.0 && self.w0_diag > 0.0) {
            return Err(Error::invalid("alpha, beta0 and w0_diag must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BpmfDiagnostics {
    /// Conditional draws whose precision needed diagonal regularisation.
    pub regularized_draws: usize,
    /// Training RMSE of the running sample average, one entry per kept sweep.
    pub train_rmse: Vec<f64>,
}

/// Posterior-mean user and movie factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    pub user_factors: Matrix,
    pub movie_factors: Matrix,
    /// Largest absolute entry over trained users' factors.
    pub user_scale: f64,
    trained_users: Vec<bool>,
    trained_movies: Vec<bool>,
    pub config: BpmfConfig,
    pub diagnostics: BpmfDiagnostics,
}

#[derive(Serialize, Deserialize)]
struct FactorsHeader {
    dim: usize,
    user_count: usize,
    movie_count: usize,
    user_scale: f64,
    trained_users: Vec<u32>,
    trained_movies: Vec<u32>,
    config: BpmfConfig,
    diagnostics: BpmfDiagnostics,
}

/// Sparse ratings in both orientations, indexed by entity.
struct Observations {
    by_user: Vec<Vec<(u32, f64)>>,
    by_movie: Vec<Vec<(u32, f64)>>,
}

impl Observations {
    fn build(dataset: &RatingsDataset, users: &[u32]) -> Result<Self> {
        let mut by_user = vec![Vec::new(); dataset.user_count()];
        let mut by_movie = vec![Vec::new(); dataset.movie_count()];
        for &u in users {
            for r in dataset.user_ratings(u)? {
                by_user[u as usize].push((r.movie, f64::from(r.value)));
                by_movie[r.movie as usize].push((u, f64::from(r.value)));
            }
        }
        Ok(Observations { by_user, by_movie })
    }

    fn rmse(&self, users: &Matrix, movies: &Matrix) -> f64 {
        let (sum, n) = self
            .by_user
            .par_iter()
            .enumerate()
            .map(|(u, obs)| {
                let mut s = 0.0;
                for &(m, r) in obs {
                    let p = predict(users.row(u), movies.row(m as usize));
                    s += (p - r) * (p - r);
                }
                (s, obs.len())
            })
            .reduce(|| (0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }
}

#[inline]
fn predict(user: &[f64], movie: &[f64]) -> f64 {
    dot(user, movie).clamp(1.0, 5.0)
}

struct Hyper {
    mean: Vec<f64>,
    precision: Matrix,
}

/// Trains on the ratings of the split's train users (all movies).
pub fn train_bpmf_for_split(
    dataset: &RatingsDataset,
    split: &EvaluationSplit,
    config: &BpmfConfig,
) -> Result<FactorSet> {
    train_bpmf(dataset, split.train_users(), config)
}

/// Runs the Gibbs sampler on the ratings of `users`.
///
/// Users outside `users` and movies without any retained rating keep the
/// zero vector (the prior mean) and are excluded from hyperparameter updates.
pub fn train_bpmf(dataset: &RatingsDataset, users: &[u32], config: &BpmfConfig) -> Result<FactorSet> {
    config.validate()?;
    let d = config.dim;
    let obs = Observations::build(dataset, users)?;
    let trained_users: Vec<bool> = obs.by_user.iter().map(|o| !o.is_empty()).collect();
    let trained_movies: Vec<bool> = obs.by_movie.iter().map(|o| !o.is_empty()).collect();
    if !trained_users.iter().any(|&t| t) {
        return Err(Error::invalid("bpmf needs at least one rating"));
    }

    let mut rng = seeded_rng(config.seed);
    let (mut u_mat, mut v_mat) = initialise(&obs, &trained_users, &trained_movies, config, &mut rng)?;

    let mut u_sum = Matrix::zeros(u_mat.rows(), d);
    let mut v_sum = Matrix::zeros(v_mat.rows(), d);
    let mut kept = 0usize;
    let mut reference: Option<Matrix> = None;
    let mut diagnostics = BpmfDiagnostics::default();

    for sweep in 0..config.gibbs_iterations {
        let sweep_id = sweep as u64;
        let mut hyper_rng = seeded_rng(derive_seed(config.seed, &[sweep_id, 2]));
        let movie_hyper = sample_hyper(&v_mat, &trained_movies, config, &mut hyper_rng)?;
        let user_hyper = sample_hyper(&u_mat, &trained_users, config, &mut hyper_rng)?;

        let (new_u, reg_u) = sample_side(&obs.by_user, &v_mat, &user_hyper, config, sweep_id, 0)?;
        u_mat = new_u;
        let (new_v, reg_v) = sample_side(&obs.by_movie, &u_mat, &movie_hyper, config, sweep_id, 1)?;
        v_mat = new_v;
        diagnostics.regularized_draws += reg_u + reg_v;

        if sweep >= config.burn_in {
            let reference = reference.get_or_insert_with(|| u_mat.clone());
            let (u_aligned, v_aligned) = align_gauge(&u_mat, &v_mat, reference)?;
            u_sum.add_assign(&u_aligned);
            v_sum.add_assign(&v_aligned);
            kept += 1;
            let mut u_avg = u_sum.clone();
            u_avg.scale(1.0 / kept as f64);
            let mut v_avg = v_sum.clone();
            v_avg.scale(1.0 / kept as f64);
            diagnostics.train_rmse.push(obs.rmse(&u_avg, &v_avg));
        }
    }
    if diagnostics.regularized_draws > 0 {
        log::warn!(
            "bpmf: {} conditional precisions required diagonal regularisation",
            diagnostics.regularized_draws
        );
    }

    u_sum.scale(1.0 / kept as f64);
    v_sum.scale(1.0 / kept as f64);
    let user_scale = user_scale_of(&u_sum, &trained_users);
    Ok(FactorSet {
        user_factors: u_sum,
        movie_factors: v_sum,
        user_scale,
        trained_users,
        trained_movies,
        config: config.clone(),
        diagnostics,
    })
}

/// Maps `(U, V)` to `(U·R, V·R⁻ᵀ)` with `R` the least-squares solution of
/// `U·R ≈ reference`. Returns the sample unchanged when `R` is degenerate.
fn align_gauge(u: &Matrix, v: &Matrix, reference: &Matrix) -> Result<(Matrix, Matrix)> {
    let gram = u.transpose().matmul(u)?;
    let Ok(l) = cholesky(&gram) else {
        return Ok((u.clone(), v.clone()));
    };
    let cross = u.transpose().matmul(reference)?;
    let d = u.cols();
    let mut r = Matrix::zeros(d, d);
    let mut column = vec![0.0; d];
    for c in 0..d {
        for k in 0..d {
            column[k] = cross[(k, c)];
        }
        let solved = cholesky_solve(&l, &column);
        for k in 0..d {
            r[(k, c)] = solved[k];
        }
    }
    let Some(r_inv) = general_inverse(&r, 1e-10).filter(Matrix::is_finite) else {
        return Ok((u.clone(), v.clone()));
    };
    Ok((u.matmul(&r)?, v.matmul(&r_inv.transpose())?))
}

fn user_scale_of(users: &Matrix, trained: &[bool]) -> f64 {
    let scale = (0..users.rows())
        .filter(|&u| trained[u])
        .flat_map(|u| users.row(u).iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale > 0.0 {
        scale
    } else {
        1.0
    }
}

fn initialise(
    obs: &Observations,
    trained_users: &[bool],
    trained_movies: &[bool],
    config: &BpmfConfig,
    rng: &mut SeededRng,
) -> Result<(Matrix, Matrix)> {
    let d = config.dim;
    let noise = |rows: usize, trained: &[bool], sd: f64, rng: &mut SeededRng| {
        let mut m = Matrix::zeros(rows, d);
        let z = crate::numerics::sampling::standard_normal_vec(rows * d, rng);
        for r in 0..rows {
            if trained[r] {
                for c in 0..d {
                    m[(r, c)] = sd * z[r * d + c];
                }
            }
        }
        m
    };
    match config.init {
        BpmfInit::Noise { sd } => Ok((
            noise(obs.by_user.len(), trained_users, sd, rng),
            noise(obs.by_movie.len(), trained_movies, sd, rng),
        )),
        BpmfInit::Pmf { sweeps, regularization } => {
            let mut u = noise(obs.by_user.len(), trained_users, 0.1, rng);
            let mut v = noise(obs.by_movie.len(), trained_movies, 0.1, rng);
            for _ in 0..sweeps {
                u = ridge_side(&obs.by_user, &v, regularization)?;
                v = ridge_side(&obs.by_movie, &u, regularization)?;
            }
            Ok((u, v))
        }
    }
}

/// Exact ridge solve for every entity given the opposite side's factors.
fn ridge_side(rows: &[Vec<(u32, f64)>], other: &Matrix, lambda: f64) -> Result<Matrix> {
    let d = other.cols();
    let solved: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|entries| {
            if entries.is_empty() {
                return Ok(vec![0.0; d]);
            }
            let mut a = Matrix::identity(d);
            a.scale(lambda * entries.len() as f64 + 1e-8);
            let mut b = vec![0.0; d];
            for &(j, r) in entries {
                let x = other.row(j as usize);
                a.add_outer(1.0, x, x);
                axpy(r, x, &mut b);
            }
            let l = cholesky(&a)?;
            Ok(cholesky_solve(&l, &b))
        })
        .collect::<Result<_>>()?;
    Ok(Matrix::from_rows(&solved))
}

fn sample_hyper(factors: &Matrix, trained: &[bool], config: &BpmfConfig, rng: &mut SeededRng) -> Result<Hyper> {
    let d = config.dim;
    let rows: Vec<&[f64]> = (0..factors.rows())
        .filter(|&r| trained[r])
        .map(|r| factors.row(r))
        .collect();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for row in &rows {
        axpy(1.0 / n, row, &mut mean);
    }
    let mut scatter = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in &rows {
        for c in 0..d {
            centered[c] = row[c] - mean[c];
        }
        scatter.add_outer(1.0, &centered, &centered);
    }
    let beta_post = config.beta0 + n;
    let nu_post = config.nu0() + n;
    let mu_post: Vec<f64> = mean
        .iter()
        .map(|&m| (config.beta0 * config.mu0 + n * m) / beta_post)
        .collect();
    // W*⁻¹ = W0⁻¹ + N·S + (β0·N/β*)(μ0 − x̄)(μ0 − x̄)ᵀ
    let mut w_inv = Matrix::identity(d);
    w_inv.scale(1.0 / config.w0_diag);
    w_inv.add_assign(&scatter);
    let diff: Vec<f64> = mean.iter().map(|&m| config.mu0 - m).collect();
    w_inv.add_outer(config.beta0 * n / beta_post, &diff, &diff);
    w_inv.symmetrize();
    let w_post = spd_inverse(&w_inv)?;
    let precision = sample_wishart(&w_post, nu_post, rng)?;
    let mut mean_precision = precision.clone();
    mean_precision.scale(beta_post);
    let mean = sample_mvn_precision(&mu_post, &mean_precision, rng)?;
    Ok(Hyper { mean, precision })
}

/// Draws every entity on one side from its Gaussian conditional.
fn sample_side(
    rows: &[Vec<(u32, f64)>],
    other: &Matrix,
    hyper: &Hyper,
    config: &BpmfConfig,
    sweep: u64,
    side: u64,
) -> Result<(Matrix, usize)> {
    let d = config.dim;
    let prior_rhs = hyper.precision.matvec(&hyper.mean)?;
    let draws: Vec<(Vec<f64>, bool)> = rows
        .par_iter()
        .enumerate()
        .map(|(i, entries)| {
            if entries.is_empty() {
                return Ok((vec![0.0; d], false));
            }
            let mut precision = hyper.precision.clone();
            let mut rhs = prior_rhs.clone();
            for &(j, r) in entries {
                let x = other.row(j as usize);
                precision.add_outer(config.alpha, x, x);
                axpy(config.alpha * r, x, &mut rhs);
            }
            precision.symmetrize();
            let (l, regularized) = match cholesky(&precision) {
                Ok(l) => (l, false),
                Err(_) => {
                    for k in 0..d {
                        precision[(k, k)] += 1e-8;
                    }
                    (cholesky(&precision)?, true)
                }
            };
            let mean = cholesky_solve(&l, &rhs);
            let mut rng = seeded_rng(derive_seed(config.seed, &[sweep, side, i as u64]));
            let draw = sample_mvn_precision(&mean, &precision, &mut rng)?;
            Ok((draw, regularized))
        })
        .collect::<Result<_>>()?;
    let regularized = draws.iter().filter(|(_, r)| *r).count();
    let mut out = Matrix::zeros(rows.len(), d);
    for (i, (draw, _)) in draws.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&draw);
    }
    Ok((out, regularized))
}

impl FactorSet {
    pub fn dim(&self) -> usize {
        self.movie_factors.cols()
    }

    pub fn user_count(&self) -> usize {
        self.user_factors.rows()
    }

    pub fn movie_count(&self) -> usize {
        self.movie_factors.rows()
    }

    pub fn is_trained_user(&self, user: u32) -> bool {
        self.trained_users.get(user as usize).copied().unwrap_or(false)
    }

    pub fn is_trained_movie(&self, movie: u32) -> bool {
        self.trained_movies.get(movie as usize).copied().unwrap_or(false)
    }

    /// `clip(user_vector · movie_factor, 1, 5)`.
    pub fn predict_rating(&self, user_vector: &[f64], movie: u32) -> Result<f64> {
        if movie as usize >= self.movie_count() {
            return Err(Error::UnknownMovie(movie));
        }
        if user_vector.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: user_vector.len(),
            });
        }
        Ok(predict(user_vector, self.movie_factors.row(movie as usize)))
    }

    /// Prediction for a user the sampler saw.
    pub fn predict_for_user(&self, user: u32, movie: u32) -> Result<f64> {
        if user as usize >= self.user_count() {
            return Err(Error::UnknownUser(user));
        }
        self.predict_rating(self.user_factors.row(user as usize), movie)
    }

    /// User factor divided by `user_scale`, so every entry lies in [-1, 1].
    pub fn scaled_user_target(&self, user: u32) -> Result<Vec<f64>> {
        if !self.is_trained_user(user) {
            return Err(Error::UnknownUser(user));
        }
        Ok(self
            .user_factors
            .row(user as usize)
            .iter()
            .map(|v| v / self.user_scale)
            .collect())
    }

    /// Inverse of [`FactorSet::scaled_user_target`].
    pub fn unscale(&self, scaled: &[f64]) -> Vec<f64> {
        scaled.iter().map(|v| v * self.user_scale).collect()
    }

    pub fn to_artifact(&self) -> Result<Artifact> {
        let header = FactorsHeader {
            dim: self.dim(),
            user_count: self.user_count(),
            movie_count: self.movie_count(),
            user_scale: self.user_scale,
            trained_users: indices(&self.trained_users),
            trained_movies: indices(&self.trained_movies),
            config: self.config.clone(),
            diagnostics: self.diagnostics.clone(),
        };
        let mut a = Artifact::new(FACTORS_KIND, FACTORS_VERSION, &header)?;
        a.insert("user_factors", self.user_factors.clone());
        a.insert("movie_factors", self.movie_factors.clone());
        Ok(a)
    }

    pub fn from_artifact(mut a: Artifact, path: &Path) -> Result<Self> {
        let h: FactorsHeader = a.header_as(path)?;
        let user_factors = a.take("user_factors", path)?;
        let movie_factors = a.take("movie_factors", path)?;
        if (user_factors.rows(), user_factors.cols()) != (h.user_count, h.dim)
            || (movie_factors.rows(), movie_factors.cols()) != (h.movie_count, h.dim)
        {
            return Err(Error::format(path, "factor shapes disagree with header"));
        }
        if !(h.user_scale > 0.0) {
            return Err(Error::format(path, "user_scale must be positive"));
        }
        Ok(FactorSet {
            user_factors,
            movie_factors,
            user_scale: h.user_scale,
            trained_users: mask(h.user_count, &h.trained_users),
            trained_movies: mask(h.movie_count, &h.trained_movies),
            config: h.config,
            diagnostics: h.diagnostics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_artifact()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_artifact(Artifact::load(path, FACTORS_KIND, FACTORS_VERSION)?, path)
    }

    /// Builds a factor set directly (used by tests and tooling).
    pub fn from_parts(user_factors: Matrix, movie_factors: Matrix, config: BpmfConfig) -> Result<Self> {
        if user_factors.cols() != movie_factors.cols() {
            return Err(Error::DimensionMismatch {
                expected: movie_factors.cols(),
                actual: user_factors.cols(),
            });
        }
        let trained_users = vec![true; user_factors.rows()];
        let trained_movies = vec![true; movie_factors.rows()];
        let user_scale = user_scale_of(&user_factors, &trained_users);
        Ok(FactorSet {
            user_factors,
            movie_factors,
            user_scale,
            trained_users,
            trained_movies,
            config,
            diagnostics: BpmfDiagnostics::default(),
        })
    }
}

fn indices(mask: &[bool]) -> Vec<u32> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i as u32)
        .collect()
}

fn mask(n: usize, idx: &[u32]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in idx {
        if let Some(slot) = m.get_mut(i as usize) {
            *slot = true;
        }
    }
    m
}

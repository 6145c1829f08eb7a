//! Supervised heads that turn a terminal interview state into predictions.
//!
//! Both heads share the user tower `state → 32 relu → 32 relu → 10 tanh`.
//! [`EmbeddingHead`] regresses the tower output onto the scaled BPMF user
//! factor. [`RatingHead`] adds a trainable movie embedding table (initialised
//! from the BPMF movie factors) and predicts `mean + ⟨user, movie⟩`, trained
//! with a squared error on the prediction clipped to [1, 5].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bpmf::FactorSet;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Activation, AdamConfig, AdamState, DenseLayer, LayerCache, LayerGradients, Matrix};

pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Samples per Adam step.
    pub minibatch: usize,
    /// (movie, rating) pairs drawn per interviewed user for the rating head.
    pub ratings_per_user: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        HeadConfig {
            hidden: 32,
            dropout: 0.5,
            learning_rate: 1e-4,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            minibatch: 32,
            ratings_per_user: 32,
        }
    }
}

impl HeadConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// The state-to-embedding stream shared by both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct UserTower {
    pub layers: [DenseLayer; 3],
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct TowerCache {
    caches: [LayerCache; 3],
}

impl UserTower {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, dim: usize, config: &HeadConfig, rng: &mut R) -> Self {
        UserTower {
            layers: [
                DenseLayer::glorot(state_dim, config.hidden, Activation::Relu, rng),
                DenseLayer::glorot(config.hidden, config.hidden, Activation::Relu, rng),
                DenseLayer::glorot(config.hidden, dim, Activation::Tanh, rng),
            ],
            dropout: config.dropout,
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[2].outputs()
    }

    pub fn state_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn infer(&self, state: &[f64]) -> Result<Vec<f64>> {
        let h1 = self.layers[0].infer(state)?;
        let h2 = self.layers[1].infer(&h1)?;
        self.layers[2].infer(&h2)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        training: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, TowerCache)> {
        let (h1, c1) = self.layers[0].forward(state, 0.0, training, rng)?;
        let (h2, c2) = self.layers[1].forward(&h1, self.dropout, training, rng)?;
        let (out, c3) = self.layers[2].forward(&h2, self.dropout, training, rng)?;
        Ok((out, TowerCache { caches: [c1, c2, c3] }))
    }

    fn backward(&self, cache: &TowerCache, grad: &[f64], into: &mut [LayerGradients; 3]) -> Result<()> {
        let g3 = self.layers[2].backward(&cache.caches[2], grad)?;
        let g2 = self.layers[1].backward(&cache.caches[1], &g3.input)?;
        let g1 = self.layers[0].backward(&cache.caches[0], &g2.input)?;
        for (acc, g) in into.iter_mut().zip([&g1, &g2, &g3]) {
            acc.accumulate(g);
        }
        Ok(())
    }

    fn zero_gradients(&self) -> [LayerGradients; 3] {
        self.layers.each_ref().map(LayerGradients::zeros_like)
    }

    /// Parameter tensors in optimiser order: weights and bias per layer.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let [a, b, c] = &mut self.layers;
        [a, b, c].into_iter().flat_map(|l| l.parameters_mut()).collect()
    }

    fn shapes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.rows() * l.weights.cols(), l.bias.len()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }
}

/// Mean of squared componentwise differences.
pub fn embedding_loss(predicted: &[f64], target: &[f64]) -> f64 {
    let n = predicted.len().max(1) as f64;
    predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// `(clip(predicted, 1, 5) − truth)²` and its derivative in `predicted`,
/// which is zero wherever the clip is active.
pub fn clipped_rating_loss(predicted: f64, truth: f64) -> (f64, f64) {
    let clipped = predicted.clamp(MIN_RATING, MAX_RATING);
    let diff = clipped - truth;
    let grad = if predicted > MIN_RATING && predicted < MAX_RATING {
        2.0 * diff
    } else {
        0.0
    };
    (diff * diff, grad)
}

/// Rating from a Q-Embedding output: the tower output is unscaled back to
/// BPMF units and scored against the BPMF movie factor.
pub fn predict_rating_qembedding(output: &[f64], factors: &FactorSet, movie: u32) -> Result<f64> {
    factors.predict_rating(&factors.unscale(output), movie)
}

/// Regresses the tower output onto scaled BPMF user factors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    pub tower: UserTower,
    pub adam: AdamState,
}

impl EmbeddingHead {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, dim: usize, config: &HeadConfig, rng: &mut R) -> Self {
        Self::from_tower(UserTower::new(state_dim, dim, config, rng), config.adam())
    }

    pub fn from_tower(tower: UserTower, adam: AdamConfig) -> Self {
        let shapes = tower.shapes();
        EmbeddingHead {
            tower,
            adam: AdamState::new(adam, &shapes),
        }
    }

    pub fn embed_user<R: Rng + ?Sized>(&self, state: &[f64], training: bool, rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.tower.forward(state, training, rng)?.0)
    }

    pub fn embed(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.tower.infer(state)
    }

    /// Mean [`embedding_loss`] over `(state, target)` pairs.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        batch: &[(&[f64], &[f64])],
        training: bool,
        rng: &mut R,
    ) -> Result<(f64, [LayerGradients; 3])> {
        if batch.is_empty() {
            return Err(Error::invalid("embedding head update needs a non-empty batch"));
        }
        let mut grads = self.tower.zero_gradients();
        let mut total = 0.0;
        let dim = self.tower.dim();
        for &(state, target) in batch {
            if target.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: target.len(),
                });
            }
            let (out, cache) = self.tower.forward(state, training, rng)?;
            total += embedding_loss(&out, target);
            let grad: Vec<f64> = out
                .iter()
                .zip(target)
                .map(|(p, t)| 2.0 * (p - t) / dim as f64)
                .collect();
            self.tower.backward(&cache, &grad, &mut grads)?;
        }
        let scale = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|g| g.scale(scale));
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("embedding head loss"));
        }
        Ok((loss, grads))
    }

    pub fn update<R: Rng + ?Sized>(&mut self, batch: &[(&[f64], &[f64])], rng: &mut R) -> Result<f64> {
        let (loss, grads) = self.loss_and_gradients(batch, true, rng)?;
        let grad_slices: Vec<&[f64]> = grads.iter().flat_map(|g| g.slices()).collect();
        self.adam.step(&mut self.tower.parameters_mut(), &grad_slices)?;
        Ok(loss)
    }

    pub fn is_finite(&self) -> bool {
        self.tower.is_finite()
    }
}

/// One supervised example for the rating head.
#[derive(Debug, Clone, Copy)]
pub struct RatingSample<'a> {
    pub state: &'a [f64],
    pub movie: u32,
    pub rating: f64,
}

#[derive(Debug, Clone)]
pub struct RatingGradients {
    pub tower: [LayerGradients; 3],
    pub movie_table: Matrix,
}

/// `mean_rating + ⟨tower(state), movie_table[movie]⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingHead {
    pub tower: UserTower,
    pub movie_table: Matrix,
    pub mean_rating: f64,
    pub adam: AdamState,
}

impl RatingHead {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        factors: &FactorSet,
        mean_rating: f64,
        config: &HeadConfig,
        rng: &mut R,
    ) -> Self {
        let tower = UserTower::new(state_dim, factors.dim(), config, rng);
        Self::from_parts(tower, factors.movie_factors.clone(), mean_rating, config.adam())
    }

    pub fn from_parts(tower: UserTower, movie_table: Matrix, mean_rating: f64, adam: AdamConfig) -> Self {
        let mut shapes = tower.shapes();
        shapes.push(movie_table.rows() * movie_table.cols());
        RatingHead {
            tower,
            movie_table,
            mean_rating,
            adam: AdamState::new(adam, &shapes),
        }
    }

    pub fn movie_count(&self) -> usize {
        self.movie_table.rows()
    }

    fn movie_row(&self, movie: u32) -> Result<&[f64]> {
        if movie as usize >= self.movie_count() {
            return Err(Error::UnknownMovie(movie));
        }
        Ok(self.movie_table.row(movie as usize))
    }

    pub fn user_embedding(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.tower.infer(state)
    }

    /// Unclipped prediction from an already computed user embedding.
    pub fn predict_from_embedding(&self, embedding: &[f64], movie: u32) -> Result<f64> {
        Ok(self.mean_rating + dot(embedding, self.movie_row(movie)?))
    }

    /// Unclipped prediction.
    pub fn predict<R: Rng + ?Sized>(&self, state: &[f64], movie: u32, training: bool, rng: &mut R) -> Result<f64> {
        let row = self.movie_row(movie)?;
        let (emb, _) = self.tower.forward(state, training, rng)?;
        Ok(self.mean_rating + dot(&emb, row))
    }

    /// Mean [`clipped_rating_loss`] over `batch`.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        batch: &[RatingSample<'_>],
        training: bool,
        rng: &mut R,
    ) -> Result<(f64, RatingGradients)> {
        if batch.is_empty() {
            return Err(Error::invalid("rating head update needs a non-empty batch"));
        }
        let mut tower = self.tower.zero_gradients();
        let mut table = Matrix::zeros(self.movie_table.rows(), self.movie_table.cols());
        let mut total = 0.0;
        for sample in batch {
            let row = self.movie_row(sample.movie)?;
            let (emb, cache) = self.tower.forward(sample.state, training, rng)?;
            let predicted = self.mean_rating + dot(&emb, row);
            let (loss, d_pred) = clipped_rating_loss(predicted, sample.rating);
            total += loss;
            if d_pred != 0.0 {
                let d_emb: Vec<f64> = row.iter().map(|v| v * d_pred).collect();
                self.tower.backward(&cache, &d_emb, &mut tower)?;
                axpy(d_pred, &emb, table.row_mut(sample.movie as usize));
            }
        }
        let scale = 1.0 / batch.len() as f64;
        tower.iter_mut().for_each(|g| g.scale(scale));
        table.scale(scale);
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("rating head loss"));
        }
        Ok((
            loss,
            RatingGradients {
                tower,
                movie_table: table,
            },
        ))
    }

    pub fn update<R: Rng + ?Sized>(&mut self, batch: &[RatingSample<'_>], rng: &mut R) -> Result<f64> {
        let (loss, grads) = self.loss_and_gradients(batch, true, rng)?;
        let mut grad_slices: Vec<&[f64]> = grads.tower.iter().flat_map(|g| g.slices()).collect();
        grad_slices.push(grads.movie_table.as_slice());
        let mut params = self.tower.parameters_mut();
        params.push(self.movie_table.as_mut_slice());
        self.adam.step(&mut params, &grad_slices)?;
        Ok(loss)
    }

    /// Tower tensors followed by the movie table.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut params = self.tower.parameters_mut();
        params.push(self.movie_table.as_mut_slice());
        params
    }

    pub fn is_finite(&self) -> bool {
        self.tower.is_finite() && self.movie_table.is_finite()
    }
}

//! Trained model bundle: DQN, head, BPMF factors, action space and movie
//! catalogue, persisted as one checkpoint artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bpmf::{FactorSet, FACTORS_KIND, FACTORS_VERSION};
use crate::checkpoint::Artifact;
use crate::dataset::{hex, RatingsDataset};
use crate::error::{Error, Result};
use crate::heads::{EmbeddingHead, RatingHead, UserTower, MAX_RATING, MIN_RATING};
use crate::interview::{keyed_random_policy, ActionSpace, InterviewState, Policy};
use crate::numerics::{seeded_rng, Activation, AdamConfig, AdamState, DenseLayer, Matrix};
use crate::qnet::{greedy_action, Dqn, GreedyPolicy, QLoss};
use crate::trainer::{TrainConfig, TrainProgress};

pub const BUNDLE_KIND: &str = "model-bundle";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Head regresses the BPMF user factor; ratings come from BPMF movie factors.
    QEmbedding,
    /// Head predicts ratings directly with its own movie table.
    QRating,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::QEmbedding => "q-embedding",
            ModelKind::QRating => "q-rating",
        }
    }

    /// Hidden activation of the DQN paired with this head.
    pub fn dqn_activation(self) -> Activation {
        match self {
            ModelKind::QEmbedding => Activation::Relu,
            ModelKind::QRating => Activation::Tanh,
        }
    }
}

/// How questions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Dqn,
    /// Uniform random questions; the DQN is never updated. Used as a baseline.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Embedding(EmbeddingHead),
    Rating(RatingHead),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub movie_id: u32,
    pub title: String,
    pub genres: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub kind: ModelKind,
    pub policy: PolicyKind,
    pub dqn: Dqn,
    pub head: Head,
    pub factors: FactorSet,
    pub action_space: ActionSpace,
    pub catalog: Vec<CatalogEntry>,
    pub config: TrainConfig,
    pub dataset_hash: String,
    pub best_test_rmse: Option<f64>,
    pub epoch_of_best: Option<usize>,
    pub progress: TrainProgress,
}

impl ModelBundle {
    /// Freshly initialised networks for `config`.
    pub fn initialise(config: &TrainConfig, dataset: &RatingsDataset, factors: &FactorSet) -> Result<Self> {
        config.validate()?;
        if factors.movie_count() != dataset.movie_count() {
            return Err(Error::DimensionMismatch {
                expected: dataset.movie_count(),
                actual: factors.movie_count(),
            });
        }
        let action_space = ActionSpace::build(dataset, config.action_count)?;
        let mut rng = seeded_rng(crate::numerics::derive_seed(config.seed, &[0x1_717]));
        let dqn = Dqn::new(
            action_space.state_dim(),
            action_space.len(),
            config.model.dqn_activation(),
            &config.dqn,
            &mut rng,
        );
        let head = match config.model {
            ModelKind::QEmbedding => Head::Embedding(EmbeddingHead::new(
                action_space.state_dim(),
                factors.dim(),
                &config.head,
                &mut rng,
            )),
            ModelKind::QRating => Head::Rating(RatingHead::new(
                action_space.state_dim(),
                factors,
                dataset.global_mean(),
                &config.head,
                &mut rng,
            )),
        };
        let catalog = (0..dataset.movie_count() as u32)
            .map(|m| {
                let info = dataset.movie(m).cloned().unwrap_or_default();
                CatalogEntry {
                    movie_id: dataset.movie_id(m).unwrap_or(m),
                    title: info.title,
                    genres: info.genres,
                }
            })
            .collect();
        Ok(ModelBundle {
            kind: config.model,
            policy: config.policy,
            dqn,
            head,
            factors: factors.clone(),
            action_space,
            catalog,
            config: config.clone(),
            dataset_hash: dataset.content_hash(),
            best_test_rmse: None,
            epoch_of_best: None,
            progress: TrainProgress::default(),
        })
    }

    pub fn movie_count(&self) -> usize {
        self.catalog.len()
    }

    pub fn q_values(&self, state: &InterviewState) -> Result<Vec<f64>> {
        self.dqn.q_values(state.values())
    }

    /// Greedy question for `state` according to the DQN.
    pub fn next_question(&self, state: &InterviewState) -> Result<usize> {
        greedy_action(&self.q_values(state)?, &state.asked_mask())
    }

    /// The evaluation-time question policy for `user`.
    pub fn policy_for(&self, user: u32) -> Box<dyn Policy + '_> {
        match self.policy {
            PolicyKind::Dqn => Box::new(GreedyPolicy(&self.dqn)),
            PolicyKind::Random => Box::new(keyed_random_policy(self.config.seed, user)),
        }
    }

    /// Ratings in [1, 5] predicted from a terminal state.
    pub fn predict_ratings(&self, terminal: &InterviewState, movies: &[u32]) -> Result<Vec<f64>> {
        match &self.head {
            Head::Embedding(head) => {
                let user = self.factors.unscale(&head.embed(terminal.values())?);
                movies.iter().map(|&m| self.factors.predict_rating(&user, m)).collect()
            }
            Head::Rating(head) => {
                let emb = head.user_embedding(terminal.values())?;
                movies
                    .iter()
                    .map(|&m| Ok(head.predict_from_embedding(&emb, m)?.clamp(MIN_RATING, MAX_RATING)))
                    .collect()
            }
        }
    }

    pub fn predict_all(&self, terminal: &InterviewState) -> Result<Vec<f64>> {
        let movies: Vec<u32> = (0..self.movie_count() as u32).collect();
        self.predict_ratings(terminal, &movies)
    }

    /// SHA-256 over every network parameter (DQN and head).
    pub fn parameter_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |values: &[f64]| {
            for v in values {
                h.update(v.to_le_bytes());
            }
        };
        for layer in &self.dqn.layers {
            layer.parameters().iter().for_each(|p| feed(p));
        }
        match &self.head {
            Head::Embedding(head) => head
                .tower
                .layers
                .iter()
                .for_each(|l| l.parameters().iter().for_each(|p| feed(p))),
            Head::Rating(head) => {
                head.tower
                    .layers
                    .iter()
                    .for_each(|l| l.parameters().iter().for_each(|p| feed(p)));
                feed(head.movie_table.as_slice());
            }
        }
        hex(&h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.dqn.is_finite()
            && match &self.head {
                Head::Embedding(h) => h.is_finite(),
                Head::Rating(h) => h.is_finite(),
            }
    }

    /// Checks that a dataset is the one this bundle was trained on.
    pub fn check_dataset(&self, dataset: &RatingsDataset) -> Result<()> {
        if dataset.content_hash() != self.dataset_hash {
            return Err(Error::invalid(
                "dataset does not match the one the model bundle was trained on",
            ));
        }
        Ok(())
    }

    pub fn to_artifact(&self) -> Result<Artifact> {
        let factors = self.factors.to_artifact()?;
        let mut tensors = Vec::new();
        let dqn = NetworkHeader::capture("dqn", &self.dqn.layers, self.dqn.dropout, &self.dqn.adam, &mut tensors);
        let (head, mean_rating) = match &self.head {
            Head::Embedding(h) => (
                NetworkHeader::capture("head", &h.tower.layers, h.tower.dropout, &h.adam, &mut tensors),
                None,
            ),
            Head::Rating(h) => {
                tensors.push(("head.movie_table".to_string(), h.movie_table.clone()));
                (
                    NetworkHeader::capture("head", &h.tower.layers, h.tower.dropout, &h.adam, &mut tensors),
                    Some(h.mean_rating),
                )
            }
        };
        let header = BundleHeader {
            kind: self.kind,
            policy: self.policy,
            config: self.config.clone(),
            dataset_hash: self.dataset_hash.clone(),
            best_test_rmse: self.best_test_rmse,
            epoch_of_best: self.epoch_of_best,
            progress: self.progress,
            action_space: self.action_space.movies().to_vec(),
            catalog: self.catalog.clone(),
            dqn_loss: self.dqn.loss,
            dqn,
            head,
            mean_rating,
            factors: factors.header,
        };
        let mut a = Artifact::new(BUNDLE_KIND, BUNDLE_VERSION, &header)?;
        for (name, t) in tensors {
            a.insert(name, t);
        }
        for (name, t) in factors.tensors {
            a.insert(format!("factors.{name}"), t);
        }
        Ok(a)
    }

    pub fn from_artifact(mut a: Artifact, path: &Path) -> Result<Self> {
        let h: BundleHeader = a.header_as(path)?;
        let factor_names: Vec<String> = a
            .tensors
            .keys()
            .filter(|k| k.starts_with("factors."))
            .cloned()
            .collect();
        let mut factors = Artifact {
            kind: FACTORS_KIND.to_string(),
            kind_version: FACTORS_VERSION,
            header: h.factors.clone(),
            tensors: Default::default(),
        };
        for name in factor_names {
            let t = a.take(&name, path)?;
            factors.tensors.insert(name["factors.".len()..].to_string(), t);
        }
        let factors = FactorSet::from_artifact(factors, path)?;
        let movie_count = factors.movie_count();
        if h.catalog.len() != movie_count {
            return Err(Error::format(path, "catalogue size disagrees with factor matrices"));
        }
        let action_space = ActionSpace::from_movies(h.action_space.clone(), movie_count)?;

        let (dqn_layers, dqn_adam) = h.dqn.restore("dqn", &mut a, path)?;
        let mut dqn = Dqn::from_layers(dqn_layers, h.dqn.dropout, h.dqn_loss, dqn_adam.config);
        dqn.adam = dqn_adam;
        if dqn.state_dim() != action_space.state_dim() || dqn.action_count() != action_space.len() {
            return Err(Error::format(path, "dqn shape disagrees with the action space"));
        }

        let (tower_layers, head_adam) = h.head.restore("head", &mut a, path)?;
        let tower = UserTower {
            layers: tower_layers,
            dropout: h.head.dropout,
        };
        let head = match (h.kind, h.mean_rating) {
            (ModelKind::QEmbedding, None) => {
                let mut head = EmbeddingHead::from_tower(tower, head_adam.config);
                head.adam = head_adam;
                Head::Embedding(head)
            }
            (ModelKind::QRating, Some(mean)) => {
                let table = a.take("head.movie_table", path)?;
                if table.rows() != movie_count {
                    return Err(Error::format(path, "movie table size disagrees with catalogue"));
                }
                let mut head = RatingHead::from_parts(tower, table, mean, head_adam.config);
                head.adam = head_adam;
                Head::Rating(head)
            }
            _ => return Err(Error::format(path, "head type disagrees with model kind")),
        };
        Ok(ModelBundle {
            kind: h.kind,
            policy: h.policy,
            dqn,
            head,
            factors,
            action_space,
            catalog: h.catalog,
            config: h.config,
            dataset_hash: h.dataset_hash,
            best_test_rmse: h.best_test_rmse,
            epoch_of_best: h.epoch_of_best,
            progress: h.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_artifact()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_artifact(Artifact::load(path, BUNDLE_KIND, BUNDLE_VERSION)?, path)
    }
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    kind: ModelKind,
    policy: PolicyKind,
    config: TrainConfig,
    dataset_hash: String,
    best_test_rmse: Option<f64>,
    epoch_of_best: Option<usize>,
    progress: TrainProgress,
    action_space: Vec<u32>,
    catalog: Vec<CatalogEntry>,
    dqn_loss: QLoss,
    dqn: NetworkHeader,
    head: NetworkHeader,
    mean_rating: Option<f64>,
    factors: serde_json::Value,
}

/// Per-network metadata; the tensors live beside it in the artifact.
#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    activations: [Activation; 3],
    dropout: f64,
    adam: AdamConfig,
    adam_steps: u64,
    adam_tensors: usize,
}

impl NetworkHeader {
    fn capture(
        prefix: &str,
        layers: &[DenseLayer; 3],
        dropout: f64,
        adam: &AdamState,
        tensors: &mut Vec<(String, Matrix)>,
    ) -> Self {
        for (i, l) in layers.iter().enumerate() {
            tensors.push((format!("{prefix}.l{i}.w"), l.weights.clone()));
            tensors.push((format!("{prefix}.l{i}.b"), row(&l.bias)));
        }
        for (j, (m, v)) in adam.first_moment.iter().zip(&adam.second_moment).enumerate() {
            tensors.push((format!("{prefix}.adam.m{j}"), row(m)));
            tensors.push((format!("{prefix}.adam.v{j}"), row(v)));
        }
        NetworkHeader {
            activations: layers.each_ref().map(|l| l.activation),
            dropout,
            adam: adam.config,
            adam_steps: adam.step_count,
            adam_tensors: adam.first_moment.len(),
        }
    }

    fn restore(&self, prefix: &str, a: &mut Artifact, path: &Path) -> Result<([DenseLayer; 3], AdamState)> {
        let mut layers = Vec::with_capacity(3);
        for (i, &activation) in self.activations.iter().enumerate() {
            let w = a.take(&format!("{prefix}.l{i}.w"), path)?;
            let b = a.take_vec(&format!("{prefix}.l{i}.b"), path)?;
            let layer = DenseLayer::new(w, b, activation).map_err(|e| Error::format(path, e.to_string()))?;
            if let Some(prev) = layers.last().map(|l: &DenseLayer| l.outputs()) {
                if prev != layer.inputs() {
                    return Err(Error::format(path, format!("{prefix} layer {i} shape mismatch")));
                }
            }
            layers.push(layer);
        }
        let mut first_moment = Vec::with_capacity(self.adam_tensors);
        let mut second_moment = Vec::with_capacity(self.adam_tensors);
        for j in 0..self.adam_tensors {
            first_moment.push(a.take_vec(&format!("{prefix}.adam.m{j}"), path)?);
            second_moment.push(a.take_vec(&format!("{prefix}.adam.v{j}"), path)?);
        }
        let layers: [DenseLayer; 3] = layers.try_into().expect("three layers");
        Ok((
            layers,
            AdamState {
                config: self.adam,
                step_count: self.adam_steps,
                first_moment,
                second_moment,
            },
        ))
    }
}

fn row(values: &[f64]) -> Matrix {
    Matrix::from_vec(1, values.len(), values.to_vec()).expect("row vector")
}

/// Embedding of a terminal state in BPMF units, for diagnostics.
pub fn user_profile(bundle: &ModelBundle, terminal: &InterviewState) -> Result<Vec<f64>> {
    match &bundle.head {
        Head::Embedding(h) => Ok(bundle.factors.unscale(&h.embed(terminal.values())?)),
        Head::Rating(h) => h.user_embedding(terminal.values()),
    }
}

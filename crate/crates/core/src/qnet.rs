//! Deep Q-network over interview states.
//!
//! Targets are Monte-Carlo returns: the action taken at step `t` of a
//! `k`-question interview is regressed onto `γ^(k−t) / RMSE`, slots asked
//! earlier in the same interview onto 0, and every other output is left
//! unsupervised so it receives no gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interview::{InterviewState, Policy, Trajectory};
use crate::numerics::{Activation, AdamConfig, AdamState, DenseLayer, LayerCache, LayerGradients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QLoss {
    /// Mean squared error over the action outputs.
    Mse,
    /// Cross-entropy between `softmax(q)` and the normalised target vector.
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub loss: QLoss,
    /// Samples per Adam step when updating from a batch of interviews.
    pub minibatch: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        DqnConfig {
            hidden1: 64,
            hidden2: 32,
            dropout: 0.5,
            learning_rate: 5e-4,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            loss: QLoss::Mse,
            minibatch: 32,
        }
    }
}

impl DqnConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// `ε(e) = max(floor, start − decrement·e)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub decrement: f64,
    pub floor: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            start: 1.0,
            decrement: 0.05,
            floor: 0.2,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, epoch: usize) -> f64 {
        (self.start - self.decrement * epoch as f64).max(self.floor)
    }
}

/// Regression target for one state: only `supervised` entries carry loss.
#[derive(Debug, Clone, PartialEq)]
pub struct QTarget {
    pub values: Vec<f64>,
    pub supervised: Vec<bool>,
}

/// Three dense layers `state → hidden1 → hidden2 → actions`, relu output.
#[derive(Debug, Clone, PartialEq)]
pub struct Dqn {
    pub layers: [DenseLayer; 3],
    pub dropout: f64,
    pub loss: QLoss,
    pub adam: AdamState,
}

/// Forward intermediates for one state.
#[derive(Debug, Clone)]
pub struct DqnCache {
    caches: [LayerCache; 3],
}

impl Dqn {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_count: usize,
        hidden_activation: Activation,
        config: &DqnConfig,
        rng: &mut R,
    ) -> Self {
        let layers = [
            DenseLayer::glorot(state_dim, config.hidden1, hidden_activation, rng),
            DenseLayer::glorot(config.hidden1, config.hidden2, hidden_activation, rng),
            DenseLayer::glorot(config.hidden2, action_count, Activation::Relu, rng),
        ];
        Self::from_layers(layers, config.dropout, config.loss, config.adam())
    }

    pub fn from_layers(layers: [DenseLayer; 3], dropout: f64, loss: QLoss, adam: AdamConfig) -> Self {
        let shapes: Vec<usize> = layers
            .iter()
            .flat_map(|l| [l.weights.rows() * l.weights.cols(), l.bias.len()])
            .collect();
        Dqn {
            layers,
            dropout,
            loss,
            adam: AdamState::new(adam, &shapes),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn action_count(&self) -> usize {
        self.layers[2].outputs()
    }

    /// Inference q-values (no dropout).
    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        let h1 = self.layers[0].infer(state)?;
        let h2 = self.layers[1].infer(&h1)?;
        self.layers[2].infer(&h2)
    }

    /// Forward pass keeping the caches; dropout acts on the inputs of the
    /// second and third layers when `training` is set.
    pub fn forward<R: Rng + ?Sized>(&self, state: &[f64], training: bool, rng: &mut R) -> Result<(Vec<f64>, DqnCache)> {
        let (h1, c1) = self.layers[0].forward(state, 0.0, training, rng)?;
        let (h2, c2) = self.layers[1].forward(&h1, self.dropout, training, rng)?;
        let (q, c3) = self.layers[2].forward(&h2, self.dropout, training, rng)?;
        Ok((q, DqnCache { caches: [c1, c2, c3] }))
    }

    /// Mean loss over `batch` and its parameter gradients.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        batch: &[(&[f64], &QTarget)],
        training: bool,
        rng: &mut R,
    ) -> Result<(f64, [LayerGradients; 3])> {
        if batch.is_empty() {
            return Err(Error::invalid("dqn update needs a non-empty batch"));
        }
        let mut grads = self.layers.each_ref().map(LayerGradients::zeros_like);
        let mut total = 0.0;
        for &(state, target) in batch {
            let n = self.action_count();
            if target.values.len() != n || target.supervised.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: target.values.len(),
                });
            }
            let (q, cache) = self.forward(state, training, rng)?;
            let (loss, dq) = q_loss(self.loss, &q, target);
            total += loss;
            let g3 = self.layers[2].backward(&cache.caches[2], &dq)?;
            let g2 = self.layers[1].backward(&cache.caches[1], &g3.input)?;
            let g1 = self.layers[0].backward(&cache.caches[0], &g2.input)?;
            for (acc, g) in grads.iter_mut().zip([&g1, &g2, &g3]) {
                acc.accumulate(g);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|g| g.scale(scale));
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("dqn loss"));
        }
        Ok((loss, grads))
    }

    /// One Adam step on `batch`; returns the pre-update loss.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &[(&[f64], &QTarget)], rng: &mut R) -> Result<f64> {
        let (loss, grads) = self.loss_and_gradients(batch, true, rng)?;
        let grad_slices: Vec<&[f64]> = grads.iter().flat_map(|g| g.slices()).collect();
        let mut params = layer_parameters(&mut self.layers);
        self.adam.step(&mut params, &grad_slices)?;
        Ok(loss)
    }

    /// Parameter tensors in optimiser order: weights and bias per layer.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        layer_parameters(&mut self.layers)
    }

    pub fn learning_rate(&self) -> f64 {
        self.adam.learning_rate()
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.adam.set_learning_rate(lr);
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }
}

fn layer_parameters(layers: &mut [DenseLayer; 3]) -> Vec<&mut [f64]> {
    let [l1, l2, l3] = layers;
    [l1, l2, l3].into_iter().flat_map(|l| l.parameters_mut()).collect()
}

/// Loss for one state and its gradient with respect to the q-values.
fn q_loss(kind: QLoss, q: &[f64], target: &QTarget) -> (f64, Vec<f64>) {
    let n = q.len() as f64;
    match kind {
        QLoss::Mse => {
            let mut loss = 0.0;
            let grad = q
                .iter()
                .zip(&target.values)
                .zip(&target.supervised)
                .map(|((&qi, &ti), &s)| {
                    if s {
                        let d = qi - ti;
                        loss += d * d / n;
                        2.0 * d / n
                    } else {
                        0.0
                    }
                })
                .collect();
            (loss, grad)
        }
        QLoss::SoftmaxCrossEntropy => {
            // Unsupervised entries borrow the current prediction as target.
            let t: Vec<f64> = q
                .iter()
                .zip(&target.values)
                .zip(&target.supervised)
                .map(|((&qi, &ti), &s)| if s { ti } else { qi }.max(0.0))
                .collect();
            let mass: f64 = t.iter().sum();
            if mass <= 0.0 {
                return (0.0, vec![0.0; q.len()]);
            }
            let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = q.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            let mut loss = 0.0;
            let grad = exp
                .iter()
                .zip(&t)
                .map(|(&e, &ti)| {
                    let p = ti / mass;
                    let log_soft = (e / z).ln();
                    loss -= p * log_soft;
                    e / z - p
                })
                .collect();
            (loss, grad)
        }
    }
}

/// ε-greedy choice over unasked slots; greedy ties go to the lowest slot.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], asked: &[bool], epsilon: f64, rng: &mut R) -> Result<usize> {
    if q.len() != asked.len() {
        return Err(Error::DimensionMismatch {
            expected: asked.len(),
            actual: q.len(),
        });
    }
    let open: Vec<usize> = (0..q.len()).filter(|&s| !asked[s]).collect();
    if open.is_empty() {
        return Err(Error::AllActionsMasked);
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(open[rng.random_range(0..open.len())]);
    }
    greedy_action(q, asked)
}

/// Highest q-value among unasked slots, ties to the lowest slot.
pub fn greedy_action(q: &[f64], asked: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for s in (0..q.len()).filter(|&s| !asked[s]) {
        if best.is_none_or(|b| q[s] > q[b]) {
            best = Some(s);
        }
    }
    best.ok_or(Error::AllActionsMasked)
}

/// Per-step targets for a finished interview.
///
/// `current_q[t]` is the network's prediction for the state before step `t`.
pub fn build_targets(trajectory: &Trajectory, rmse: f64, gamma: f64, current_q: &[Vec<f64>]) -> Result<Vec<QTarget>> {
    if !(rmse > 0.0) || !rmse.is_finite() {
        return Err(Error::invalid(format!("rmse must be positive, got {rmse}")));
    }
    if current_q.len() != trajectory.k() {
        return Err(Error::DimensionMismatch {
            expected: trajectory.k(),
            actual: current_q.len(),
        });
    }
    let k = trajectory.k();
    let mut targets = Vec::with_capacity(k);
    for (t, (step, q)) in trajectory.steps.iter().zip(current_q).enumerate() {
        let mut values = q.clone();
        let mut supervised = vec![false; q.len()];
        for earlier in &trajectory.steps[..t] {
            values[earlier.slot] = 0.0;
            supervised[earlier.slot] = true;
        }
        // 1-based step index t + 1, so the exponent is k − (t + 1).
        values[step.slot] = gamma.powi((k - t - 1) as i32) / rmse;
        supervised[step.slot] = true;
        targets.push(QTarget { values, supervised });
    }
    Ok(targets)
}

/// ε-greedy policy driven by a DQN; records the q-values it saw.
pub struct DqnPolicy<'a, R> {
    pub dqn: &'a Dqn,
    pub epsilon: f64,
    pub rng: R,
    pub seen_q: Vec<Vec<f64>>,
}

impl<'a, R: Rng> DqnPolicy<'a, R> {
    pub fn new(dqn: &'a Dqn, epsilon: f64, rng: R) -> Self {
        DqnPolicy {
            dqn,
            epsilon,
            rng,
            seen_q: Vec::new(),
        }
    }
}

impl<R: Rng> Policy for DqnPolicy<'_, R> {
    fn choose(&mut self, state: &InterviewState) -> Result<usize> {
        let q = self.dqn.q_values(state.values())?;
        let slot = select_action(&q, &state.asked_mask(), self.epsilon, &mut self.rng)?;
        self.seen_q.push(q);
        Ok(slot)
    }
}

/// Greedy policy without bookkeeping, for evaluation and serving.
pub struct GreedyPolicy<'a>(pub &'a Dqn);

impl Policy for GreedyPolicy<'_> {
    fn choose(&mut self, state: &InterviewState) -> Result<usize> {
        let q = self.0.q_values(state.values())?;
        greedy_action(&q, &state.asked_mask())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interview::Step;
    use crate::numerics::seeded_rng;

    fn small_dqn(seed: u64) -> Dqn {
        let cfg = DqnConfig {
            hidden1: 8,
            hidden2: 6,
            dropout: 0.0,
            ..DqnConfig::default()
        };
        Dqn::new(10, 5, Activation::Relu, &cfg, &mut seeded_rng(seed))
    }

    fn trajectory(slots: &[usize]) -> Trajectory {
        let mut state = InterviewState::initial(10);
        let mut steps = Vec::new();
        for &slot in slots {
            let after = state.step(slot, 3).unwrap();
            steps.push(Step {
                before: state,
                slot,
                movie: slot as u32,
                rating: 3,
                after: after.clone(),
            });
            state = after;
        }
        Trajectory { steps, terminal: state }
    }

    #[test]
    fn q_values_are_nonnegative_and_deterministic() {
        let dqn = Dqn::new(200, 100, Activation::Tanh, &DqnConfig::default(), &mut seeded_rng(3));
        let state = InterviewState::initial(100).step(4, 5).unwrap();
        let q = dqn.q_values(state.values()).unwrap();
        assert_eq!(q.len(), 100);
        assert!(q.iter().all(|&v| v >= 0.0));
        assert_eq!(q, dqn.q_values(state.values()).unwrap());
        assert!(dqn.q_values(&[0.0; 10]).is_err());

        let zeros = [
            DenseLayer::zeros(200, 64, Activation::Relu),
            DenseLayer::zeros(64, 32, Activation::Relu),
            DenseLayer::zeros(32, 100, Activation::Relu),
        ];
        let flat = Dqn::from_layers(zeros, 0.5, QLoss::Mse, AdamConfig::default());
        assert!(flat.q_values(state.values()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn epsilon_schedule_matches_protocol() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(5) - 0.75).abs() < 1e-12);
        assert_eq!(s.value(16), 0.2);
        assert_eq!(s.value(100), 0.2);
    }

    #[test]
    fn greedy_selection_respects_mask_and_ties() {
        let mut rng = seeded_rng(0);
        let q = [0.1, 0.9, 0.3, 0.3];
        assert_eq!(
            select_action(&q, &[false, true, false, false], 0.0, &mut rng).unwrap(),
            2
        );
        let mut tie = vec![0.0; 12];
        tie[4] = 1.0;
        tie[9] = 1.0;
        assert_eq!(select_action(&tie, &[false; 12], 0.0, &mut rng).unwrap(), 4);
        assert!(matches!(
            select_action(&q, &[true; 4], 0.5, &mut rng),
            Err(Error::AllActionsMasked)
        ));
    }

    #[test]
    fn targets_follow_discounted_return() {
        let t = trajectory(&[0, 7, 3]);
        let q = vec![vec![0.5; 10]; 3];
        let targets = build_targets(&t, 0.95, 1.0, &q).unwrap();
        for (step, target) in t.steps.iter().zip(&targets) {
            assert_eq!(target.values[step.slot], 1.0 / 0.95);
        }
        assert_eq!(targets[2].values[0], 0.0);
        assert_eq!(targets[2].values[7], 0.0);
        assert!(targets[2].supervised[0] && targets[2].supervised[7]);
        assert_eq!(targets[2].values[5], 0.5);
        assert!(!targets[2].supervised[5]);
        assert!(!targets[0].supervised[7]);

        let discounted = build_targets(&t, 0.95, 0.9, &q).unwrap();
        assert!((discounted[0].values[0] - 0.81 / 0.95).abs() < 1e-15);
        assert!(build_targets(&t, 0.0, 1.0, &q).is_err());
    }

    #[test]
    fn mse_counts_only_supervised_entries() {
        let q = vec![1.0; 100];
        let mut target = QTarget {
            values: q.clone(),
            supervised: vec![true; 100],
        };
        assert_eq!(q_loss(QLoss::Mse, &q, &target).0, 0.0);
        target.values[3] += 0.3;
        let (loss, grad) = q_loss(QLoss::Mse, &q, &target);
        assert!((loss - 0.09 / 100.0).abs() < 1e-15);
        assert_eq!(grad.iter().filter(|g| **g != 0.0).count(), 1);
    }

    #[test]
    fn update_at_optimum_leaves_parameters() {
        let mut dqn = small_dqn(5);
        let state = vec![0.0, 1.0, 0.4, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let q = dqn.q_values(&state).unwrap();
        let target = QTarget {
            values: q,
            supervised: vec![true; 5],
        };
        let before = dqn.layers.clone();
        let loss = dqn.update(&[(&state, &target)], &mut seeded_rng(1)).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(dqn.layers, before);
    }

    #[test]
    fn repeated_updates_reduce_loss() {
        for loss_kind in [QLoss::Mse, QLoss::SoftmaxCrossEntropy] {
            let mut dqn = small_dqn(9);
            dqn.loss = loss_kind;
            // Biases keep every relu output active at the start.
            dqn.layers[2].bias = vec![0.5; 5];
            let state = vec![1.0, 0.8, 0.0, 0.0, 1.0, 0.2, 0.0, 0.0, 0.0, 0.0];
            let target = QTarget {
                values: vec![0.0, 1.2, 0.0, 0.3, 0.0],
                supervised: vec![true; 5],
            };
            let mut rng = seeded_rng(2);
            let mut last = f64::INFINITY;
            for _ in 0..100 {
                let loss = dqn.update(&[(&state, &target)], &mut rng).unwrap();
                assert!(loss < last, "{loss_kind:?}: {loss} !< {last}");
                last = loss;
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(11);
        for instance in 0..10 {
            let mut dqn = small_dqn(100 + instance);
            for layer in &mut dqn.layers {
                layer.bias.iter_mut().for_each(|b| *b = rng.random_range(0.05..0.5));
            }
            let state: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
            let target = QTarget {
                values: (0..5).map(|_| rng.random_range(0.0..2.0)).collect(),
                supervised: (0..5).map(|i| i != 2).collect(),
            };
            let batch = [(state.as_slice(), &target)];
            let (_, grads) = dqn.loss_and_gradients(&batch, false, &mut rng).unwrap();
            let loss_at = |d: &Dqn| d.loss_and_gradients(&batch, false, &mut seeded_rng(0)).unwrap().0;
            for (l, g) in grads.iter().enumerate() {
                let analytic: Vec<f64> = g.slices().concat();
                let mut probe = dqn.clone();
                let n_w = probe.layers[l].weights.as_slice().len();
                for (j, &a) in analytic.iter().enumerate() {
                    let numeric = central_difference(&mut probe, l, j, n_w, &loss_at);
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                    assert!(rel < 1e-4, "layer {l} param {j}: {a} vs {numeric}");
                }
            }
        }
    }

    fn param(d: &mut Dqn, layer: usize, j: usize, n_w: usize) -> &mut f64 {
        if j < n_w {
            &mut d.layers[layer].weights.as_mut_slice()[j]
        } else {
            &mut d.layers[layer].bias[j - n_w]
        }
    }

    fn central_difference(d: &mut Dqn, layer: usize, j: usize, n_w: usize, f: &impl Fn(&Dqn) -> f64) -> f64 {
        let h = 1e-5;
        let original = *param(d, layer, j, n_w);
        *param(d, layer, j, n_w) = original + h;
        let up = f(d);
        *param(d, layer, j, n_w) = original - h;
        let down = f(d);
        *param(d, layer, j, n_w) = original;
        (up - down) / (2.0 * h)
    }
}

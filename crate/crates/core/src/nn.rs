//! Dueling Q-network: a two-layer rectifier trunk feeding a scalar value head
//! and a per-action advantage head, combined as
//! `Q(s,a) = V(s) + A(s,a) − mean_a' A(s,a')`.
//!
//! All parameters live in one flat vector so the optimizer, the target copy
//! and checkpointing treat them uniformly. Gradients are hand-derived for
//! this fixed architecture.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

use crate::env::{ActionId, AgentView, Policy, NUM_ACTIONS, OBS_DIM};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub inputs: usize,
    /// Width of both hidden layers.
    pub hidden: usize,
    pub actions: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { inputs: OBS_DIM, hidden: 64, actions: NUM_ACTIONS }
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wv: usize,
    bv: usize,
    wa: usize,
    ba: usize,
    len: usize,
}

impl Layout {
    fn new(a: Architecture) -> Self {
        let w1 = 0;
        let b1 = w1 + a.hidden * a.inputs;
        let w2 = b1 + a.hidden;
        let b2 = w2 + a.hidden * a.hidden;
        let wv = b2 + a.hidden;
        let bv = wv + a.hidden;
        let wa = bv + 1;
        let ba = wa + a.actions * a.hidden;
        let len = ba + a.actions;
        Self { w1, b1, w2, b2, wv, bv, wa, ba, len }
    }
}

/// Intermediate activations of one forward pass, reused by `backward`.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub pre1: Vec<f64>,
    pub hidden1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub hidden2: Vec<f64>,
    pub value: f64,
    pub advantages: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    arch: Architecture,
    layout: Layout,
    /// Fixed (untrained) factor applied to raw observations; meters → O(1).
    input_scale: f64,
    params: Vec<f64>,
}

impl QNetwork {
    /// Fan-in-scaled uniform initialization; biases start at zero.
    pub fn new(arch: Architecture, input_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let layout = Layout::new(arch);
        let mut params = vec![0.0; layout.len];
        let mut fill = |range: std::ops::Range<usize>, bound: f64| {
            for p in &mut params[range] {
                *p = rng.gen_range(-bound..bound);
            }
        };
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let lecun = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        fill(layout.w1..layout.b1, he(arch.inputs));
        fill(layout.w2..layout.b2, he(arch.hidden));
        fill(layout.wv..layout.bv, lecun(arch.hidden));
        fill(layout.wa..layout.ba, lecun(arch.hidden));
        Self { arch, layout, input_scale, params }
    }

    pub fn from_params(arch: Architecture, input_scale: f64, params: Vec<f64>) -> Result<Self, NnError> {
        let layout = Layout::new(arch);
        if params.len() != layout.len {
            return Err(NnError::Shape(format!("expected {} parameters, got {}", layout.len, params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NnError::Shape("non-finite parameter".into()));
        }
        Ok(Self { arch, layout, input_scale, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    pub fn zero_gradients(&self) -> Vec<f64> {
        vec![0.0; self.layout.len]
    }

    /// Named row-major blocks: `(name, shape, data)`.
    pub fn layers(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let l = self.layout;
        let a = self.arch;
        let p = &self.params;
        vec![
            ("trunk.0.weight", vec![a.hidden, a.inputs], &p[l.w1..l.b1]),
            ("trunk.0.bias", vec![a.hidden], &p[l.b1..l.w2]),
            ("trunk.1.weight", vec![a.hidden, a.hidden], &p[l.w2..l.b2]),
            ("trunk.1.bias", vec![a.hidden], &p[l.b2..l.wv]),
            ("value.weight", vec![1, a.hidden], &p[l.wv..l.bv]),
            ("value.bias", vec![1], &p[l.bv..l.wa]),
            ("advantage.weight", vec![a.actions, a.hidden], &p[l.wa..l.ba]),
            ("advantage.bias", vec![a.actions], &p[l.ba..l.len]),
        ]
    }

    pub fn forward(&self, observation: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut cache = ForwardCache::default();
        self.forward_cached(observation, &mut cache)?;
        Ok(cache.q)
    }

    pub fn forward_cached(&self, observation: &[f64], cache: &mut ForwardCache) -> Result<(), NnError> {
        let a = self.arch;
        if observation.len() != a.inputs {
            return Err(NnError::Shape(format!("expected {} inputs, got {}", a.inputs, observation.len())));
        }
        let l = self.layout;
        let p = &self.params;

        cache.input.clear();
        cache.input.extend(observation.iter().map(|x| x * self.input_scale));
        dense(&p[l.w1..l.b1], &p[l.b1..l.w2], &cache.input, &mut cache.pre1);
        relu(&cache.pre1, &mut cache.hidden1);
        dense(&p[l.w2..l.b2], &p[l.b2..l.wv], &cache.hidden1, &mut cache.pre2);
        relu(&cache.pre2, &mut cache.hidden2);

        cache.value = p[l.bv] + dot(&p[l.wv..l.bv], &cache.hidden2);
        dense(&p[l.wa..l.ba], &p[l.ba..l.len], &cache.hidden2, &mut cache.advantages);
        let mean = cache.advantages.iter().sum::<f64>() / a.actions as f64;
        cache.q.clear();
        cache.q.extend(cache.advantages.iter().map(|adv| cache.value + adv - mean));
        Ok(())
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂Q` for the cached pass.
    pub fn backward(&self, cache: &ForwardCache, grad_q: &[f64], grads: &mut [f64]) -> Result<(), NnError> {
        let a = self.arch;
        if grad_q.len() != a.actions || grads.len() != self.layout.len {
            return Err(NnError::Shape("gradient buffer does not match architecture".into()));
        }
        let l = self.layout;
        let p = &self.params;
        let h = a.hidden;

        let grad_value: f64 = grad_q.iter().sum();
        let mean_grad = grad_value / a.actions as f64;

        let mut grad_h2 = vec![0.0; h];
        grads[l.bv] += grad_value;
        for j in 0..h {
            grads[l.wv + j] += grad_value * cache.hidden2[j];
            grad_h2[j] += grad_value * p[l.wv + j];
        }
        for (k, gq) in grad_q.iter().enumerate() {
            let grad_adv = gq - mean_grad;
            if grad_adv == 0.0 {
                continue;
            }
            grads[l.ba + k] += grad_adv;
            let row = l.wa + k * h;
            for j in 0..h {
                grads[row + j] += grad_adv * cache.hidden2[j];
                grad_h2[j] += grad_adv * p[row + j];
            }
        }

        let mut grad_h1 = vec![0.0; h];
        for i in 0..h {
            if cache.pre2[i] <= 0.0 {
                continue;
            }
            let g = grad_h2[i];
            grads[l.b2 + i] += g;
            let row = l.w2 + i * h;
            for j in 0..h {
                grads[row + j] += g * cache.hidden1[j];
                grad_h1[j] += g * p[row + j];
            }
        }

        for i in 0..h {
            if cache.pre1[i] <= 0.0 {
                continue;
            }
            let g = grad_h1[i];
            grads[l.b1 + i] += g;
            let row = l.w1 + i * a.inputs;
            for (j, x) in cache.input.iter().enumerate() {
                grads[row + j] += g * x;
            }
        }
        Ok(())
    }

    /// Greedy action; ties resolve to the lowest action index.
    pub fn greedy_action(&self, observation: &[f64]) -> Result<ActionId, NnError> {
        let q = self.forward(observation)?;
        Ok(ActionId::from_index(argmax(&q)).expect("two-action network"))
    }
}

fn dense(weights: &[f64], bias: &[f64], input: &[f64], out: &mut Vec<f64>) {
    let n_in = input.len();
    out.clear();
    out.extend(bias.iter().enumerate().map(|(i, b)| b + dot(&weights[i * n_in..(i + 1) * n_in], input)));
}

fn relu(pre: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(pre.iter().map(|z| z.max(0.0)));
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest value; first wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Frozen copy of the online network used for bootstrap evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNetwork(QNetwork);

impl TargetNetwork {
    pub fn network(&self) -> &QNetwork {
        &self.0
    }

    pub fn forward(&self, observation: &[f64]) -> Result<Vec<f64>, NnError> {
        self.0.forward(observation)
    }
}

pub fn sync_target(online: &QNetwork) -> TargetNetwork {
    TargetNetwork(online.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], state: &mut AdamState, grads: &[f64]) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(NnError::Shape("adam buffers do not match parameter count".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        let v = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        let update = state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        if update.is_finite() {
            params[i] -= update;
        }
    }
    Ok(())
}

/// Acts greedily with a snapshot of the network.
#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    pub network: QNetwork,
}

impl Policy for GreedyPolicy {
    fn act(&mut self, views: &[AgentView<'_>]) -> Vec<ActionId> {
        views
            .iter()
            .map(|v| self.network.greedy_action(&v.observation.features).expect("observation width matches"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub episodes: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub epsilon: f64,
    pub seed: u64,
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub demo_source: Option<String>,
}

/// Self-describing JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub input_scale: f64,
    pub layers: Vec<LayerRecord>,
    pub optimizer: Option<AdamState>,
    pub metadata: TrainingMetadata,
}

pub const CHECKPOINT_FORMAT: &str = "skyguard-dueling-q";

impl Checkpoint {
    pub fn new(network: &QNetwork, optimizer: Option<&AdamState>, metadata: TrainingMetadata) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            architecture: network.architecture(),
            input_scale: network.input_scale(),
            layers: network
                .layers()
                .into_iter()
                .map(|(name, shape, data)| LayerRecord { name: name.into(), shape, data: data.to_vec() })
                .collect(),
            optimizer: optimizer.cloned(),
            metadata,
        }
    }

    pub fn network(&self) -> Result<QNetwork, NnError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(NnError::Format(format!("unexpected format tag `{}`", self.format)));
        }
        let template =
            QNetwork::from_params(self.architecture, self.input_scale, vec![0.0; Layout::new(self.architecture).len])?;
        let expected = template.layers();
        if expected.len() != self.layers.len() {
            return Err(NnError::Format("layer count mismatch".into()));
        }
        let mut params = Vec::with_capacity(template.num_params());
        for ((name, shape, _), rec) in expected.iter().zip(&self.layers) {
            if *name != rec.name || *shape != rec.shape || rec.data.len() != shape.iter().product::<usize>() {
                return Err(NnError::Format(format!("layer `{}` does not match `{name}` {shape:?}", rec.name)));
            }
            params.extend_from_slice(&rec.data);
        }
        QNetwork::from_params(self.architecture, self.input_scale, params)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let text = serde_json::to_string(self).map_err(|e| NnError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| NnError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn net() -> QNetwork {
        QNetwork::new(Architecture::default(), 0.01, &mut seed::rng(3, seed::stream::INIT))
    }

    /// Network whose heads read V=1 and A=(2,4) regardless of input.
    fn fixed_heads(v: f64, a0: f64, a1: f64) -> QNetwork {
        let mut n = net();
        let l = n.layout;
        for p in &mut n.params[l.wv..l.len] {
            *p = 0.0;
        }
        n.params[l.bv] = v;
        n.params[l.ba] = a0;
        n.params[l.ba + 1] = a1;
        n
    }

    #[test]
    fn dueling_combination() {
        let q = fixed_heads(1.0, 2.0, 4.0).forward(&[0.5; 12]).unwrap();
        assert_eq!(q, vec![0.0, 2.0]);
        let q = fixed_heads(1.5, 3.0, 3.0).forward(&[0.5; 12]).unwrap();
        assert_eq!(q, vec![1.5, 1.5]);
    }

    #[test]
    fn advantage_shift_invariance() {
        let base = net();
        let mut shifted = base.clone();
        let l = shifted.layout;
        shifted.params[l.ba] += 7.0;
        shifted.params[l.ba + 1] += 7.0;
        let x: Vec<f64> = (0..12).map(|i| (i as f64 - 5.0) * 13.0).collect();
        let a = base.forward(&x).unwrap();
        let b = shifted.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_wrong_width() {
        assert!(matches!(net().forward(&[0.0; 11]), Err(NnError::Shape(_))));
    }

    #[test]
    fn zero_upstream_gradient() {
        let n = net();
        let mut cache = ForwardCache::default();
        n.forward_cached(&[10.0; 12], &mut cache).unwrap();
        let mut g = n.zero_gradients();
        n.backward(&cache, &[0.0, 0.0], &mut g).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dead_unit_has_no_incoming_gradient() {
        let mut n = net();
        let l = n.layout;
        // Unit 0 of the first layer: zero weights, negative bias ⇒ always dead.
        for j in 0..12 {
            n.params[l.w1 + j] = 0.0;
        }
        n.params[l.b1] = -1.0;
        let mut cache = ForwardCache::default();
        n.forward_cached(&[30.0; 12], &mut cache).unwrap();
        let mut g = n.zero_gradients();
        n.backward(&cache, &[1.0, -0.5], &mut g).unwrap();
        assert!(g[l.w1..l.w1 + 12].iter().all(|v| *v == 0.0));
        assert_eq!(g[l.b1], 0.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut n = net();
        let before = n.params.clone();
        let mut st = AdamState::new(n.num_params(), 4e-4);
        let zeros = n.zero_gradients();
        adam_step(n.params_mut(), &mut st, &zeros).unwrap();
        assert_eq!(n.params, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_learning_rate() {
        let mut params = vec![0.0; 3];
        let mut st = AdamState::new(3, 4e-4);
        let g = vec![0.5, -2.0, 1e-3];
        let mut prev = params.clone();
        for _ in 0..2000 {
            prev.copy_from_slice(&params);
            adam_step(&mut params, &mut st, &g).unwrap();
        }
        for i in 0..3 {
            let step = (params[i] - prev[i]).abs();
            assert!((step - 4e-4).abs() < 4e-4 * 1e-3, "step {step}");
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let mut a = vec![0.1, 0.2];
        let mut b = a.clone();
        let mut sa = AdamState::new(2, 1e-3);
        let mut sb = sa.clone();
        adam_step(&mut a, &mut sa, &[0.3, -0.1]).unwrap();
        adam_step(&mut b, &mut sb, &[0.3, -0.1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn target_is_a_frozen_copy() {
        let mut online = net();
        let target = sync_target(&online);
        let x = [25.0; 12];
        assert_eq!(target.forward(&x).unwrap(), online.forward(&x).unwrap());
        assert_eq!(sync_target(&online), sync_target(&online));
        let before = target.clone();
        let mut st = AdamState::new(online.num_params(), 1e-2);
        let g = vec![1.0; online.num_params()];
        adam_step(online.params_mut(), &mut st, &g).unwrap();
        assert_eq!(target, before);
        assert_ne!(target.network(), &online);
    }

    #[test]
    fn checkpoint_round_trip() {
        let n = net();
        let st = AdamState::new(n.num_params(), 4e-4);
        let ck = Checkpoint::new(&n, Some(&st), TrainingMetadata { episodes: 3, seed: 9, ..Default::default() });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.network().unwrap(), n);
        assert_eq!(back.layers[0].shape, vec![64, 12]);
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 1.0]), 1);
    }
}

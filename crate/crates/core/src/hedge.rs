//! Capital allocation across clusters with a deterministic-policy hedger.
//!
//! Each cluster is condensed into 25 daily change-ratio indices (one per
//! indicator), giving a (records x 25 x clusters) aggregate tensor. A
//! deterministic actor maps a 64-record window of that tensor to a
//! simplex weight vector over clusters; a critic scores (window, weight)
//! pairs. Both train off-policy from a FIFO replay buffer with target
//! networks, soft updates, and Ornstein-Uhlenbeck exploration noise, the
//! reward being the log growth of the hedged portfolio for the period.
//!
//! Indicator values are exponentiated before forming change ratios:
//! several indicators cross zero (oscillators, signed momentum), where a
//! raw value quotient is undefined or sign-flipping, while exp maps the
//! value difference into a strictly positive ratio that is 1 exactly
//! when the series is flat. Feed the normalized panels so the scale is
//! comparable across indices.
//!
//! The actor network emits pre-softmax logits; exploration noise is
//! added there, and the softmax afterwards keeps every explored action
//! on the simplex.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::diffcomp::{
    backward, forward, init_params, Activation, Adam, LayerSpec, NetworkSpec, ParamSet,
};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tensor3};
use crate::market::{IndicatorPanel, INDICATOR_COUNT, INDICATOR_NAMES};
use crate::math;
use crate::rng;

/// Per-cluster daily change-ratio indices: (records x 25 x clusters),
/// entries finite and strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAggregateTensor {
    pub data: Tensor3,
}

impl ClusterAggregateTensor {
    pub fn records(&self) -> usize {
        self.data.d0
    }

    pub fn clusters(&self) -> usize {
        self.data.d2
    }

    /// The records [lo, hi) rearranged for the hedger networks:
    /// (clusters x steps x 25).
    pub fn window(&self, lo: usize, hi: usize) -> Tensor3 {
        let n_c = self.clusters();
        let steps = hi - lo;
        let mut out = Tensor3::zeros(n_c, steps, INDICATOR_COUNT);
        for c in 0..n_c {
            for t in 0..steps {
                for f in 0..INDICATOR_COUNT {
                    out.set(c, t, f, self.data.get(lo + t, f, c));
                }
            }
        }
        out
    }
}

/// Condenses each cluster's indicator panels into daily change-ratio
/// indices: per stock and indicator, day 0 maps to 1 and day t to
/// exp(v_t) / exp(v_{t-1}); the cluster's index is the mean over its
/// stocks.
pub fn aggregate_cluster_indices(
    clusters: &[Vec<&IndicatorPanel>],
) -> Result<ClusterAggregateTensor> {
    if clusters.is_empty() {
        return Err(Error::Parameter("no clusters to aggregate".into()));
    }
    let records = clusters
        .first()
        .and_then(|c| c.first())
        .map(|p| p.records())
        .ok_or_else(|| Error::Parameter("cluster 0 has no stocks".into()))?;
    for (i, cluster) in clusters.iter().enumerate() {
        if cluster.is_empty() {
            return Err(Error::Parameter(format!("cluster {i} has no stocks")));
        }
        for panel in cluster {
            if panel.records() != records {
                return Err(Error::Shape(format!(
                    "panel {} has {} records, expected {}",
                    panel.symbol,
                    panel.records(),
                    records
                )));
            }
        }
    }
    if records == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }

    let mut data = Tensor3::zeros(records, INDICATOR_COUNT, clusters.len());
    for (ci, cluster) in clusters.iter().enumerate() {
        let scale = 1.0 / cluster.len() as f64;
        for panel in cluster {
            for f in 0..INDICATOR_COUNT {
                let mut prev = math::exp(panel.values.get(0, f));
                for t in 0..records {
                    let ratio = if t == 0 {
                        1.0
                    } else {
                        let cur = math::exp(panel.values.get(t, f));
                        if prev == 0.0 {
                            return Err(Error::Numeric(format!(
                                "zero denominator in change ratio of {} index {} at day {t}",
                                panel.symbol, INDICATOR_NAMES[f]
                            )));
                        }
                        let r = cur / prev;
                        if !r.is_finite() || r <= 0.0 {
                            return Err(Error::Numeric(format!(
                                "change ratio {r} of {} index {} at day {t}",
                                panel.symbol, INDICATOR_NAMES[f]
                            )));
                        }
                        prev = cur;
                        r
                    };
                    let acc = data.get(t, f, ci);
                    data.set(t, f, ci, acc + scale * ratio);
                }
            }
        }
    }
    Ok(ClusterAggregateTensor { data })
}

/// Per-record mean close ratio of each cluster: column i averages the
/// member columns of `ratios` listed in `members[i]`.
pub fn cluster_return_matrix(ratios: &Matrix, members: &[Vec<usize>]) -> Result<Matrix> {
    if members.is_empty() {
        return Err(Error::Parameter("no clusters".into()));
    }
    let mut out = Matrix::zeros(ratios.rows, members.len());
    for (ci, ids) in members.iter().enumerate() {
        if ids.is_empty() {
            return Err(Error::Parameter(format!("cluster {ci} has no stocks")));
        }
        for &j in ids {
            if j >= ratios.cols {
                return Err(Error::Validation(format!(
                    "cluster {ci} references stock column {j} of a {}-column ratio matrix",
                    ratios.cols
                )));
            }
        }
        for r in 0..ratios.rows {
            let mean = ids.iter().map(|&j| ratios.get(r, j)).sum::<f64>() / ids.len() as f64;
            if !(mean > 0.0) || !mean.is_finite() {
                return Err(Error::Numeric(format!(
                    "cluster {ci} return {mean} at record {r}"
                )));
            }
            out.set(r, ci, mean);
        }
    }
    Ok(out)
}

/// Ornstein-Uhlenbeck exploration noise, one component per cluster:
/// x += theta * (mu - x) * dt + sigma * sqrt(dt) * z.
#[derive(Debug, Clone)]
pub struct OuNoise {
    pub x: Vec<f64>,
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub dt: f64,
}

impl OuNoise {
    pub fn new(dim: usize, theta: f64, mu: f64, sigma: f64, dt: f64) -> Result<Self> {
        if theta < 0.0 || sigma < 0.0 || !(dt > 0.0) {
            return Err(Error::Parameter(format!(
                "OU parameters theta {theta}, sigma {sigma}, dt {dt}"
            )));
        }
        Ok(OuNoise { x: vec![mu; dim], theta, mu, sigma, dt })
    }

    /// Advances the process once and returns the new value.
    pub fn step(&mut self, stream: &mut rng::Stream) -> Vec<f64> {
        let root_dt = math::sqrt(self.dt);
        for v in &mut self.x {
            *v += self.theta * (self.mu - *v) * self.dt
                + self.sigma * root_dt * rng::normal(stream);
        }
        self.x.clone()
    }
}

/// One stored interaction. States are windows into the aggregate
/// tensor, which actions never alter, so the buffer keeps record
/// indices instead of copies of the windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub t: usize,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_t: usize,
    pub terminal: bool,
}

/// Fixed-capacity FIFO store of transitions: once full, each push
/// evicts the oldest entry.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Parameter("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer { items: Vec::with_capacity(capacity.min(4096)), capacity, cursor: 0 })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, item: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Stored transitions in ring order (not insertion order once the
    /// buffer has wrapped).
    pub fn as_slice(&self) -> &[Transition] {
        &self.items
    }

    /// A uniform minibatch of distinct stored transitions.
    pub fn sample(&self, stream: &mut rng::Stream, n: usize) -> Result<Vec<&Transition>> {
        if n == 0 || n > self.items.len() {
            return Err(Error::Parameter(format!(
                "minibatch of {n} from a buffer holding {}",
                self.items.len()
            )));
        }
        Ok(rng::sample_distinct(stream, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

/// Target-network tracking update: every target entry moves to
/// tau * source + (1 - tau) * target.
pub fn soft_update(target: &mut ParamSet, source: &ParamSet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Parameter(format!("tau {tau} outside [0,1]")));
    }
    for (name, array) in &mut target.arrays {
        let src = source
            .arrays
            .get(name)
            .ok_or_else(|| Error::Shape(format!("source lacks parameter array {name}")))?;
        if src.data.len() != array.data.len() {
            return Err(Error::Shape(format!(
                "array {name}: target has {} entries, source {}",
                array.data.len(),
                src.data.len()
            )));
        }
        for (t, &s) in array.data.iter_mut().zip(&src.data) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }
    Ok(())
}

/// Bootstrap target y = r + gamma * q_next, with the bootstrap term
/// dropped on terminal transitions.
pub fn critic_target(r: f64, gamma: f64, q_next: f64, terminal: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma {gamma} outside [0,1]")));
    }
    Ok(if terminal { r } else { r + gamma * q_next })
}

/// Numerically stable softmax of a logit slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&z| math::exp(z - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Pullback of a gradient through softmax: given w = softmax(z) and
/// g = dL/dw, returns dL/dz = w .* (g - w . g).
fn softmax_pullback(w: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = w.iter().zip(g).map(|(&a, &b)| a * b).sum();
    w.iter().zip(g).map(|(&wi, &gi)| wi * (gi - dot)).collect()
}

/// Training settings. Table-pinned values: window 64, discount 0.99,
/// target blend 0.02, Adam at 1e-4, minibatch 32, replay 10000, at most
/// 100000 environment steps. Network widths and the episode count are
/// free parameters; OU noise uses the customary 0.15/0.2 with the scale
/// annealed linearly to 0.02 over the run.
#[derive(Debug, Clone, Copy)]
pub struct DdpgConfig {
    pub window: usize,
    /// Recurrent width of the per-cluster encoders.
    pub encoder: usize,
    /// Width of the cross-cluster mixing layer.
    pub mixer: usize,
    /// Width of the critic's joint (state, action) layer.
    pub head: usize,
    pub episodes: usize,
    pub gamma: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch: usize,
    pub replay: usize,
    pub max_steps: usize,
    pub ou_theta: f64,
    pub ou_mu: f64,
    pub ou_sigma: f64,
    pub ou_sigma_final: f64,
    pub ou_dt: f64,
    pub seed: u64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            window: 64,
            encoder: 16,
            mixer: 32,
            head: 32,
            episodes: 30,
            gamma: 0.99,
            tau: 0.02,
            learning_rate: 1e-4,
            batch: 32,
            replay: 10000,
            max_steps: 100_000,
            ou_theta: 0.15,
            ou_mu: 0.0,
            ou_sigma: 0.2,
            ou_sigma_final: 0.02,
            ou_dt: 1.0,
            seed: 0,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.batch == 0 || self.episodes == 0 || self.max_steps == 0 {
            return Err(Error::Parameter(
                "window, batch, episodes and max_steps must be positive".into(),
            ));
        }
        if self.encoder == 0 || self.mixer == 0 || self.head == 0 {
            return Err(Error::Parameter("network sizes must be positive".into()));
        }
        if self.replay < self.batch {
            return Err(Error::Parameter(format!(
                "replay capacity {} below batch size {}",
                self.replay, self.batch
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Parameter(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Parameter(format!("tau {} outside [0,1]", self.tau)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if self.ou_theta < 0.0 || self.ou_sigma < 0.0 || self.ou_sigma_final < 0.0 || !(self.ou_dt > 0.0)
        {
            return Err(Error::Parameter("OU parameters out of range".into()));
        }
        Ok(())
    }
}

/// Hedger policy: per-cluster recurrent encoders, one mixing layer over
/// all clusters, then a zero-started logit per cluster. Softmax is
/// applied outside the network so exploration noise can perturb logits.
pub fn hedge_actor_spec(cfg: &DdpgConfig, clusters: usize) -> Result<NetworkSpec> {
    NetworkSpec::new(vec![
        LayerSpec::Recurrent { input: INDICATOR_COUNT, hidden: cfg.encoder, return_sequence: false },
        LayerSpec::Dense {
            input: clusters * cfg.encoder,
            output: cfg.mixer,
            activation: Activation::Relu,
            flatten: true,
            zero_init: false,
        },
        LayerSpec::Dense {
            input: cfg.mixer,
            output: clusters,
            activation: Activation::Linear,
            flatten: false,
            zero_init: true,
        },
    ])
}

/// Critic state encoder: same shape as the actor body, producing the
/// state code that is concatenated with the action.
pub fn hedge_encoder_spec(cfg: &DdpgConfig, clusters: usize) -> Result<NetworkSpec> {
    NetworkSpec::new(vec![
        LayerSpec::Recurrent { input: INDICATOR_COUNT, hidden: cfg.encoder, return_sequence: false },
        LayerSpec::Dense {
            input: clusters * cfg.encoder,
            output: cfg.mixer,
            activation: Activation::Relu,
            flatten: true,
            zero_init: false,
        },
    ])
}

/// Critic head over the concatenated (state code, action) vector,
/// ending in a zero-started scalar score.
pub fn hedge_head_spec(cfg: &DdpgConfig, clusters: usize) -> Result<NetworkSpec> {
    NetworkSpec::new(vec![
        LayerSpec::Dense {
            input: cfg.mixer + clusters,
            output: cfg.head,
            activation: Activation::Relu,
            flatten: false,
            zero_init: false,
        },
        LayerSpec::Dense {
            input: cfg.head,
            output: 1,
            activation: Activation::Linear,
            flatten: false,
            zero_init: true,
        },
    ])
}

/// The deterministic policy's weight vector for one state window.
pub fn actor_weights(spec: &NetworkSpec, params: &ParamSet, state: &Tensor3) -> Result<Vec<f64>> {
    let (logits, _) = forward(spec, params, state)?;
    if logits.d0 != 1 || logits.d1 != 1 || logits.d2 != state.d0 {
        return Err(Error::Shape(format!(
            "hedger logits {}x{}x{} for {} clusters",
            logits.d0, logits.d1, logits.d2, state.d0
        )));
    }
    Ok(softmax(&logits.data))
}

fn concat_code_action(code: &Tensor3, action: &[f64]) -> Tensor3 {
    let mut joint = Tensor3::zeros(1, 1, code.data.len() + action.len());
    joint.data[..code.data.len()].copy_from_slice(&code.data);
    joint.data[code.data.len()..].copy_from_slice(action);
    joint
}

/// Critic score of one (state window, action) pair.
pub fn critic_q(nets: &CriticNets, params: &CriticParams, state: &Tensor3, action: &[f64]) -> Result<f64> {
    let (code, _) = forward(&nets.encoder, &params.encoder, state)?;
    let (q, _) = forward(&nets.head, &params.head, &concat_code_action(&code, action))?;
    Ok(q.data[0])
}

/// The critic's two stages: a state encoder and a joint head.
#[derive(Debug, Clone)]
pub struct CriticNets {
    pub encoder: NetworkSpec,
    pub head: NetworkSpec,
}

/// Parameters for the two critic stages.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub encoder: ParamSet,
    pub head: ParamSet,
}

/// One environment step of the reward trace; `critic_loss` is NaN for
/// steps taken before the replay buffer could fill a minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HedgeStepTrace {
    pub step: usize,
    pub reward: f64,
    pub critic_loss: f64,
}

/// The last minibatch's targets, critic scores, and loss, kept so the
/// reported loss can be recomputed independently.
#[derive(Debug, Clone, PartialEq)]
pub struct MinibatchAudit {
    pub ys: Vec<f64>,
    pub qs: Vec<f64>,
    pub loss: f64,
}

/// Training output. `diverged` marks an abort on a non-finite loss; the
/// trace then covers the steps that completed.
#[derive(Debug, Clone)]
pub struct DdpgTrained {
    pub actor: ParamSet,
    pub critic: CriticParams,
    pub trace: Vec<HedgeStepTrace>,
    pub audit: Option<MinibatchAudit>,
    pub diverged: bool,
}

/// Trains the hedger on the training range of the aggregate tensor.
/// `returns` holds one growth ratio per record and cluster; the reward
/// for playing weights w at record t is ln(w . returns[t]).
pub fn ddpg_train(
    s_new: &ClusterAggregateTensor,
    returns: &Matrix,
    train: Range<usize>,
    cfg: &DdpgConfig,
) -> Result<DdpgTrained> {
    cfg.validate()?;
    let n_c = s_new.clusters();
    if returns.rows != s_new.records() || returns.cols != n_c {
        return Err(Error::Shape(format!(
            "returns {}x{} against aggregate tensor {}x{}",
            returns.rows,
            returns.cols,
            s_new.records(),
            n_c
        )));
    }
    if train.end > s_new.records() {
        return Err(Error::Validation(format!(
            "range ends at {} but the tensor has {} records",
            train.end,
            s_new.records()
        )));
    }
    if train.len() < cfg.window {
        return Err(Error::InsufficientData { needed: cfg.window, got: train.len() });
    }
    let first = train.start.max(cfg.window);
    let steps: Vec<usize> = (first..train.end).collect();
    if steps.is_empty() {
        return Err(Error::InsufficientData { needed: cfg.window + 1, got: train.len() });
    }

    let actor_spec = hedge_actor_spec(cfg, n_c)?;
    let nets = CriticNets { encoder: hedge_encoder_spec(cfg, n_c)?, head: hedge_head_spec(cfg, n_c)? };
    let mut actor = init_params(&actor_spec, &mut rng::substream(cfg.seed, "ddpg-actor-init"));
    let mut critic = CriticParams {
        encoder: init_params(&nets.encoder, &mut rng::substream(cfg.seed, "ddpg-encoder-init")),
        head: init_params(&nets.head, &mut rng::substream(cfg.seed, "ddpg-head-init")),
    };
    let mut actor_target = actor.clone();
    let mut critic_target_params = critic.clone();
    let mut actor_opt = Adam::new(&actor, cfg.learning_rate);
    let mut encoder_opt = Adam::new(&critic.encoder, cfg.learning_rate);
    let mut head_opt = Adam::new(&critic.head, cfg.learning_rate);
    let mut buffer = ReplayBuffer::new(cfg.replay)?;
    let mut replay_stream = rng::substream(cfg.seed, "ddpg-replay");

    let total_planned = (cfg.episodes * steps.len()).min(cfg.max_steps);
    let anneal_span = (total_planned.saturating_sub(1)).max(1) as f64;
    let mut trace = Vec::with_capacity(total_planned);
    let mut audit = None;
    let mut diverged = false;
    let mut global = 0usize;

    'episodes: for episode in 0..cfg.episodes {
        let mut noise = OuNoise::new(n_c, cfg.ou_theta, cfg.ou_mu, cfg.ou_sigma, cfg.ou_dt)?;
        let mut noise_stream = rng::substream(cfg.seed, &format!("ddpg-ou-{episode}"));
        for (si, &t) in steps.iter().enumerate() {
            if global >= cfg.max_steps {
                break 'episodes;
            }
            noise.sigma = cfg.ou_sigma
                + (cfg.ou_sigma_final - cfg.ou_sigma) * (global as f64 / anneal_span);

            let state = s_new.window(t - cfg.window, t);
            let (logits, _) = forward(&actor_spec, &actor, &state)?;
            let p = noise.step(&mut noise_stream);
            let noisy: Vec<f64> = logits.data.iter().zip(&p).map(|(&z, &e)| z + e).collect();
            let action = softmax(&noisy);
            let growth: f64 = action.iter().zip(returns.row(t)).map(|(&w, &x)| w * x).sum();
            if !(growth > 0.0) {
                return Err(Error::Numeric(format!(
                    "hedged growth {growth} at record {t}"
                )));
            }
            let reward = math::ln(growth);
            let terminal = si + 1 == steps.len();
            buffer.push(Transition { t, action, reward, next_t: t + 1, terminal });

            let mut step_loss = f64::NAN;
            if buffer.len() >= cfg.batch {
                let batch = buffer.sample(&mut replay_stream, cfg.batch)?;

                // Targets from the frozen networks.
                let mut ys = Vec::with_capacity(cfg.batch);
                for tr in &batch {
                    let y = if tr.terminal {
                        critic_target(tr.reward, cfg.gamma, 0.0, true)?
                    } else {
                        let s_next = s_new.window(tr.next_t - cfg.window, tr.next_t);
                        let w_next = actor_weights(&actor_spec, &actor_target, &s_next)?;
                        let q_next = critic_q(&nets, &critic_target_params, &s_next, &w_next)?;
                        critic_target(tr.reward, cfg.gamma, q_next, false)?
                    };
                    ys.push(y);
                }

                // Critic descent on the mean squared residual, and actor
                // ascent on the critic's score of its own action; both
                // accumulate per-sample gradients at 1/N weight.
                let inv_n = 1.0 / cfg.batch as f64;
                let mut qs = Vec::with_capacity(cfg.batch);
                let mut enc_grads = critic.encoder.zeros_like();
                let mut head_grads = critic.head.zeros_like();
                let mut actor_grads = actor.zeros_like();
                for (tr, &y) in batch.iter().zip(&ys) {
                    let s = s_new.window(tr.t - cfg.window, tr.t);
                    let (code, enc_cache) = forward(&nets.encoder, &critic.encoder, &s)?;
                    let (q_out, head_cache) =
                        forward(&nets.head, &critic.head, &concat_code_action(&code, &tr.action))?;
                    let q = q_out.data[0];
                    qs.push(q);

                    let mut dq = Tensor3::zeros(1, 1, 1);
                    dq.data[0] = -2.0 * (y - q) * inv_n;
                    let (hg, joint_grad) = backward(&nets.head, &critic.head, &head_cache, &dq)?;
                    head_grads.add_scaled(&hg, 1.0)?;
                    let mut code_grad = Tensor3::zeros(1, 1, cfg.mixer);
                    code_grad.data.copy_from_slice(&joint_grad.data[..cfg.mixer]);
                    let (eg, _) = backward(&nets.encoder, &critic.encoder, &enc_cache, &code_grad)?;
                    enc_grads.add_scaled(&eg, 1.0)?;

                    // Policy action at s, scored by the online critic; the
                    // encoder pass is reused since the action enters only
                    // at the head.
                    let (a_logits, a_cache) = forward(&actor_spec, &actor, &s)?;
                    let w = softmax(&a_logits.data);
                    let (_, mu_head_cache) =
                        forward(&nets.head, &critic.head, &concat_code_action(&code, &w))?;
                    let mut dq_da = Tensor3::zeros(1, 1, 1);
                    dq_da.data[0] = 1.0;
                    let (_, joint_in_grad) =
                        backward(&nets.head, &critic.head, &mu_head_cache, &dq_da)?;
                    let grad_action = &joint_in_grad.data[cfg.mixer..];
                    let dz = softmax_pullback(&w, grad_action);
                    let mut logit_grad = Tensor3::zeros(1, 1, n_c);
                    for (slot, &g) in logit_grad.data.iter_mut().zip(&dz) {
                        *slot = -g * inv_n;
                    }
                    let (ag, _) = backward(&actor_spec, &actor, &a_cache, &logit_grad)?;
                    actor_grads.add_scaled(&ag, 1.0)?;
                }

                let loss = ys
                    .iter()
                    .zip(&qs)
                    .map(|(&y, &q)| (y - q) * (y - q))
                    .sum::<f64>()
                    * inv_n;
                step_loss = loss;
                if !loss.is_finite() {
                    diverged = true;
                    trace.push(HedgeStepTrace { step: global, reward, critic_loss: loss });
                    audit = Some(MinibatchAudit { ys, qs, loss });
                    break 'episodes;
                }
                audit = Some(MinibatchAudit { ys, qs, loss });

                encoder_opt.apply(&mut critic.encoder, &enc_grads)?;
                head_opt.apply(&mut critic.head, &head_grads)?;
                actor_opt.apply(&mut actor, &actor_grads)?;
                soft_update(&mut critic_target_params.encoder, &critic.encoder, cfg.tau)?;
                soft_update(&mut critic_target_params.head, &critic.head, cfg.tau)?;
                soft_update(&mut actor_target, &actor, cfg.tau)?;
            }
            trace.push(HedgeStepTrace { step: global, reward, critic_loss: step_loss });
            global += 1;
        }
    }

    Ok(DdpgTrained { actor, critic, trace, audit, diverged })
}

/// Algorithm-4 combination: each cluster's simplex portfolio scaled by
/// its hedger weight and concatenated. Both factor families must sum to
/// one, so the result does too.
pub fn combine_portfolios(weights: &[f64], books: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != books.len() || weights.is_empty() {
        return Err(Error::Shape(format!(
            "{} cluster weights against {} books",
            weights.len(),
            books.len()
        )));
    }
    check_simplex("cluster weights", weights)?;
    for (i, b) in books.iter().enumerate() {
        check_simplex(&format!("cluster {i} book"), b)?;
    }
    let mut out = Vec::with_capacity(books.iter().map(|b| b.len()).sum());
    for (&w, b) in weights.iter().zip(books) {
        out.extend(b.iter().map(|&x| w * x));
    }
    Ok(out)
}

fn check_simplex(what: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Validation(format!("{what} is empty")));
    }
    let sum: f64 = v.iter().sum();
    if v.iter().any(|&x| !(x >= -1e-12) || !x.is_finite()) || math::abs(sum - 1.0) > 1e-9 {
        return Err(Error::Validation(format!(
            "{what} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::Date;
    use crate::rng::substream;
    use alloc::collections::BTreeMap;
    use alloc::string::ToString;
    use crate::diffcomp::Array;
    use rand::Rng;

    fn panel(symbol: &str, records: usize, fill: f64) -> IndicatorPanel {
        let mut values = Matrix::zeros(records, INDICATOR_COUNT);
        for r in 0..records {
            for c in 0..INDICATOR_COUNT {
                values.set(r, c, fill);
            }
        }
        let dates = (0..records)
            .map(|i| Date::new(2020, 1, 1 + i as u8).unwrap())
            .collect();
        IndicatorPanel { symbol: symbol.to_string(), dates, values }
    }

    #[test]
    fn constant_series_aggregate_to_unit_ratios() {
        // exp of a flat series cancels in every quotient, whatever the
        // level, including negative ones.
        let a = panel("AAA", 6, -3.25);
        let b = panel("BBB", 6, -3.25);
        let c = panel("CCC", 6, 0.5);
        let s = aggregate_cluster_indices(&[vec![&a, &b], vec![&c]]).unwrap();
        assert_eq!((s.records(), s.data.d1, s.clusters()), (6, INDICATOR_COUNT, 2));
        for t in 0..6 {
            for f in 0..INDICATOR_COUNT {
                for ci in 0..2 {
                    assert!(math::abs(s.data.get(t, f, ci) - 1.0) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn aggregate_is_the_mean_of_member_ratios() {
        // Stock A moves index 7 by ln(1.1), stock B by ln(0.9): the
        // cluster index must read (1.1 + 0.9) / 2 = 1 on that day.
        let mut a = panel("AAA", 3, 0.0);
        let mut b = panel("BBB", 3, 0.0);
        a.values.set(1, 7, math::ln(1.1));
        a.values.set(2, 7, math::ln(1.1));
        b.values.set(1, 7, math::ln(0.9));
        b.values.set(2, 7, math::ln(0.9));
        let s = aggregate_cluster_indices(&[vec![&a, &b]]).unwrap();
        assert_eq!(s.data.get(0, 7, 0), 1.0);
        assert!(math::abs(s.data.get(1, 7, 0) - 1.0) < 1e-12);
        assert!(math::abs(s.data.get(2, 7, 0) - 1.0) < 1e-12);
        let single = aggregate_cluster_indices(&[vec![&a]]).unwrap();
        assert!(math::abs(single.data.get(1, 7, 0) - 1.1) < 1e-12);
    }

    #[test]
    fn aggregate_rejects_bad_inputs() {
        assert!(matches!(aggregate_cluster_indices(&[]), Err(Error::Parameter(_))));
        let a = panel("AAA", 4, 0.0);
        assert!(matches!(
            aggregate_cluster_indices(&[vec![&a], vec![]]),
            Err(Error::Parameter(_))
        ));
        let short = panel("SHRT", 3, 0.0);
        let err = aggregate_cluster_indices(&[vec![&a, &short]]).unwrap_err();
        assert!(matches!(&err, Error::Shape(m) if m.contains("SHRT")));

        // A day-0 level of -800 underflows exp to zero, so day 1 has a
        // zero denominator.
        let mut under = panel("UNDR", 3, 0.0);
        under.values.set(0, 4, -800.0);
        let err = aggregate_cluster_indices(&[vec![&under]]).unwrap_err();
        match err {
            Error::Numeric(m) => {
                assert!(m.contains("UNDR") && m.contains(INDICATOR_NAMES[4]) && m.contains("day 1"), "{m}");
            }
            other => panic!("unexpected {other:?}"),
        }
        // An overflow on day 2 yields an infinite ratio.
        let mut over = panel("OVER", 3, 0.0);
        over.values.set(2, 9, 800.0);
        let err = aggregate_cluster_indices(&[vec![&over]]).unwrap_err();
        match err {
            Error::Numeric(m) => {
                assert!(m.contains("OVER") && m.contains(INDICATOR_NAMES[9]) && m.contains("day 2"), "{m}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn window_rearranges_records_to_cluster_rows() {
        let mut data = Tensor3::zeros(5, INDICATOR_COUNT, 2);
        for t in 0..5 {
            for f in 0..INDICATOR_COUNT {
                for c in 0..2 {
                    data.set(t, f, c, (t * 1000 + f * 10 + c) as f64 + 1.0);
                }
            }
        }
        let s = ClusterAggregateTensor { data };
        let w = s.window(1, 4);
        assert_eq!((w.d0, w.d1, w.d2), (2, 3, INDICATOR_COUNT));
        for c in 0..2 {
            for t in 0..3 {
                for f in 0..INDICATOR_COUNT {
                    assert_eq!(w.get(c, t, f), s.data.get(1 + t, f, c));
                }
            }
        }
    }

    #[test]
    fn cluster_returns_average_member_columns() {
        let ratios = Matrix::from_vec(2, 3, vec![1.1, 1.0, 0.9, 1.2, 0.8, 1.0]);
        let out = cluster_return_matrix(&ratios, &[vec![0, 2], vec![1]]).unwrap();
        assert!(math::abs(out.get(0, 0) - 1.0) < 1e-12);
        assert!(math::abs(out.get(1, 0) - 1.1) < 1e-12);
        assert_eq!(out.get(0, 1), 1.0);
        assert_eq!(out.get(1, 1), 0.8);
        assert!(matches!(cluster_return_matrix(&ratios, &[]), Err(Error::Parameter(_))));
        assert!(matches!(
            cluster_return_matrix(&ratios, &[vec![]]),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            cluster_return_matrix(&ratios, &[vec![5]]),
            Err(Error::Validation(_))
        ));
        let negative = Matrix::from_vec(1, 2, vec![-1.0, 1.0]);
        assert!(matches!(
            cluster_return_matrix(&negative, &[vec![0, 1]]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn ou_decays_toward_the_mean_without_diffusion() {
        let mut ou = OuNoise::new(1, 0.15, 0.0, 0.0, 1.0).unwrap();
        ou.x[0] = 1.0;
        let mut stream = substream(0, "ou-decay");
        let v = ou.step(&mut stream);
        assert!(math::abs(v[0] - 0.85) < 1e-15);
        let mut frozen = OuNoise::new(3, 0.0, 0.4, 0.0, 1.0).unwrap();
        frozen.x = vec![0.3, -0.2, 0.9];
        let before = frozen.x.clone();
        let v = frozen.step(&mut stream);
        assert_eq!(v, before);
        assert!(OuNoise::new(1, -0.1, 0.0, 0.2, 1.0).is_err());
        assert!(OuNoise::new(1, 0.1, 0.0, 0.2, 0.0).is_err());
    }

    #[test]
    fn ou_long_run_mean_matches_target() {
        // AR(1) with phi = 0.85: stationary variance sigma^2/(1-phi^2)
        // = 0.1441; the mean of 10,000 autocorrelated draws has standard
        // error sqrt(0.1441/10000 * (1+phi)/(1-phi)) ~ 0.0133.
        let mut ou = OuNoise::new(1, 0.15, 0.0, 0.2, 1.0).unwrap();
        let mut stream = substream(77, "ou-stationary");
        let mut sum = 0.0;
        for _ in 0..10_000 {
            sum += ou.step(&mut stream)[0];
        }
        let mean = sum / 10_000.0;
        assert!(math::abs(mean) < 0.04, "mean {mean}");
    }

    fn transition(t: usize) -> Transition {
        Transition { t, action: vec![1.0], reward: 0.0, next_t: t + 1, terminal: false }
    }

    #[test]
    fn replay_buffer_evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(8).unwrap();
        assert!(buf.is_empty());
        for t in 0..11 {
            buf.push(transition(t));
        }
        assert_eq!(buf.len(), 8);
        assert_eq!(buf.capacity(), 8);
        let stored: Vec<usize> = buf.as_slice().iter().map(|tr| tr.t).collect();
        for t in 0..3 {
            assert!(!stored.contains(&t), "evicted item {t} still present");
        }
        for t in 3..11 {
            assert!(stored.contains(&t), "item {t} missing");
        }
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn replay_sampling_draws_distinct_stored_items() {
        let mut buf = ReplayBuffer::new(16).unwrap();
        for t in 0..10 {
            buf.push(transition(t));
        }
        let mut stream = substream(5, "replay-sample");
        let batch = buf.sample(&mut stream, 6).unwrap();
        assert_eq!(batch.len(), 6);
        let mut ts: Vec<usize> = batch.iter().map(|tr| tr.t).collect();
        ts.sort_unstable();
        ts.dedup();
        assert_eq!(ts.len(), 6, "sample repeated an item");
        assert!(buf.sample(&mut stream, 11).is_err());
        assert!(buf.sample(&mut stream, 0).is_err());
    }

    fn param_pair() -> (ParamSet, ParamSet) {
        let mut target = BTreeMap::new();
        target.insert("l0.w".to_string(), Array { shape: vec![2], data: vec![0.0, 2.0] });
        let mut source = BTreeMap::new();
        source.insert("l0.w".to_string(), Array { shape: vec![2], data: vec![1.0, -2.0] });
        (ParamSet { arrays: target }, ParamSet { arrays: source })
    }

    #[test]
    fn soft_update_blends_toward_source() {
        let (mut t, s) = param_pair();
        soft_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, s);

        let (mut t, s) = param_pair();
        let before = t.clone();
        soft_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, before);

        let (mut t, s) = param_pair();
        soft_update(&mut t, &s, 0.02).unwrap();
        assert!(math::abs(t.arrays["l0.w"].data[0] - 0.02) < 1e-15);

        // Contraction: the gap to the source shrinks by exactly 1 - tau.
        // tau = 0.25 keeps the arithmetic exact in binary.
        let (mut t, s) = param_pair();
        soft_update(&mut t, &s, 0.25).unwrap();
        assert_eq!(t.arrays["l0.w"].data[0], 0.25);
        assert_eq!(t.arrays["l0.w"].data[1], 1.0);
        assert!(matches!(soft_update(&mut t, &s, 1.5), Err(Error::Parameter(_))));

        let (mut t, _) = param_pair();
        let empty = ParamSet::default();
        assert!(matches!(soft_update(&mut t, &empty, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn bootstrap_target_formula() {
        assert_eq!(critic_target(0.4, 0.99, 123.0, true).unwrap(), 0.4);
        let y = critic_target(1.0, 0.99, 2.0, false).unwrap();
        assert!(math::abs(y - 2.98) < 1e-12);
        assert_eq!(critic_target(0.7, 0.0, 55.0, false).unwrap(), 0.7);
        assert!(critic_target(0.0, 1.0 + 1e-9, 0.0, false).is_err());
    }

    #[test]
    fn softmax_is_a_stable_simplex_map() {
        let w = softmax(&[0.0, 0.0, 0.0]);
        assert_eq!(w, vec![1.0 / 3.0; 3]);
        assert_eq!(softmax(&[42.0]), vec![1.0]);
        let w = softmax(&[1000.0, 0.0, -1000.0]);
        assert!(w.iter().all(|&x| x.is_finite() && x >= 0.0));
        assert!(math::abs(w.iter().sum::<f64>() - 1.0) < 1e-12);
    }

    #[test]
    fn softmax_pullback_matches_finite_differences() {
        let z = [0.3, -0.7, 1.2, 0.1];
        let g = [0.5, -1.0, 0.25, 2.0];
        let w = softmax(&z);
        let dz = softmax_pullback(&w, &g);
        let h = 1e-6;
        for k in 0..z.len() {
            let mut zp = z;
            zp[k] += h;
            let mut zm = z;
            zm[k] -= h;
            let (wp, wm) = (softmax(&zp), softmax(&zm));
            let fd: f64 = (0..z.len()).map(|j| g[j] * (wp[j] - wm[j]) / (2.0 * h)).sum();
            assert!(math::abs(fd - dz[k]) < 1e-6, "slot {k}: {fd} vs {}", dz[k]);
        }
    }

    fn small_cfg() -> DdpgConfig {
        DdpgConfig {
            window: 6,
            encoder: 3,
            mixer: 4,
            head: 4,
            episodes: 2,
            batch: 4,
            replay: 32,
            max_steps: 1000,
            learning_rate: 1e-3,
            seed: 5,
            ..DdpgConfig::default()
        }
    }

    /// Aggregate tensor with mild positive wiggle and a matching
    /// returns matrix: cluster 0 compounds, cluster 1 bleeds.
    fn market(records: usize, seed: u64) -> (ClusterAggregateTensor, Matrix) {
        let mut stream = substream(seed, "hedge-fixture");
        let mut data = Tensor3::zeros(records, INDICATOR_COUNT, 2);
        for t in 0..records {
            for f in 0..INDICATOR_COUNT {
                for c in 0..2 {
                    data.set(t, f, c, 1.0 + 0.05 * stream.gen_range(-1.0..1.0));
                }
            }
        }
        let mut returns = Matrix::zeros(records, 2);
        for t in 0..records {
            returns.set(t, 0, 1.01);
            returns.set(t, 1, 0.995);
        }
        (ClusterAggregateTensor { data }, returns)
    }

    #[test]
    fn hedger_weights_start_uniform() {
        let cfg = small_cfg();
        let (s, _) = market(10, 1);
        let spec = hedge_actor_spec(&cfg, 2).unwrap();
        let params = init_params(&spec, &mut substream(3, "hedge-uniform"));
        let w = actor_weights(&spec, &params, &s.window(0, 6)).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn training_is_deterministic_and_audited() {
        let (s, returns) = market(30, 9);
        let cfg = small_cfg();
        let a = ddpg_train(&s, &returns, 0..30, &cfg).unwrap();
        let b = ddpg_train(&s, &returns, 0..30, &cfg).unwrap();
        assert_eq!(a.actor, b.actor);
        assert_eq!(a.critic, b.critic);
        // Bitwise comparison: the pre-minibatch rows hold NaN losses,
        // which PartialEq would treat as unequal.
        assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.reward.to_bits(), y.reward.to_bits());
            assert_eq!(x.critic_loss.to_bits(), y.critic_loss.to_bits());
        }
        assert!(!a.diverged);

        // Two episodes over 24 decision steps each.
        assert_eq!(a.trace.len(), 48);
        for (i, row) in a.trace.iter().enumerate() {
            assert_eq!(row.step, i);
            assert!(row.reward.is_finite());
        }
        // Before the buffer holds a full minibatch no update can run.
        assert!(a.trace[..3].iter().all(|r| r.critic_loss.is_nan()));
        assert!(a.trace[3..].iter().all(|r| r.critic_loss.is_finite()));

        let audit = a.audit.expect("updates ran");
        let recomputed = audit
            .ys
            .iter()
            .zip(&audit.qs)
            .map(|(&y, &q)| (y - q) * (y - q))
            .sum::<f64>()
            / audit.ys.len() as f64;
        assert!(math::abs(recomputed - audit.loss) < 1e-10);
    }

    #[test]
    fn training_respects_the_step_budget() {
        let (s, returns) = market(30, 9);
        let cfg = DdpgConfig { max_steps: 10, ..small_cfg() };
        let out = ddpg_train(&s, &returns, 0..30, &cfg).unwrap();
        assert_eq!(out.trace.len(), 10);
    }

    #[test]
    fn training_needs_a_full_window() {
        let (s, returns) = market(30, 2);
        let cfg = DdpgConfig { window: 64, ..small_cfg() };
        assert!(matches!(
            ddpg_train(&s, &returns, 0..30, &cfg),
            Err(Error::InsufficientData { needed: 64, got: 30 })
        ));
        let bad = Matrix::zeros(30, 3);
        assert!(matches!(
            ddpg_train(&s, &bad, 0..30, &small_cfg()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn hedger_shifts_weight_to_the_compounding_cluster() {
        // Constant returns make the optimum all-in on cluster 0; after a
        // few hundred updates the policy should clearly lean that way.
        let (s, returns) = market(50, 13);
        let cfg = DdpgConfig {
            episodes: 8,
            learning_rate: 1e-2,
            replay: 128,
            batch: 8,
            ..small_cfg()
        };
        let out = ddpg_train(&s, &returns, 0..50, &cfg).unwrap();
        assert!(!out.diverged);
        let spec = hedge_actor_spec(&cfg, 2).unwrap();
        let w = actor_weights(&spec, &out.actor, &s.window(44, 50)).unwrap();
        assert!(w[0] > 0.6, "weight on the growing cluster is {}", w[0]);
    }

    #[test]
    fn combination_concatenates_scaled_books() {
        let w = combine_portfolios(&[0.6, 0.4], &[vec![0.5, 0.5], vec![1.0]]).unwrap();
        assert_eq!(w.len(), 3);
        assert!(math::abs(w[0] - 0.3) < 1e-15);
        assert!(math::abs(w[1] - 0.3) < 1e-15);
        assert!(math::abs(w[2] - 0.4) < 1e-15);

        let b = vec![0.25, 0.75];
        assert_eq!(combine_portfolios(&[1.0], core::slice::from_ref(&b)).unwrap(), b);

        assert!(matches!(
            combine_portfolios(&[0.5, 0.5], &[vec![1.0]]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            combine_portfolios(&[0.9, 0.2], &[vec![1.0], vec![1.0]]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            combine_portfolios(&[0.5, 0.5], &[vec![0.9, 0.2], vec![1.0]]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn combination_lands_on_the_simplex() {
        let mut stream = substream(19, "combine-simplex");
        for _ in 0..50 {
            let n_c = stream.gen_range(1..5usize);
            let mut weights: Vec<f64> = (0..n_c).map(|_| stream.gen_range(0.01..1.0)).collect();
            let wsum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= wsum);
            let books: Vec<Vec<f64>> = (0..n_c)
                .map(|_| {
                    let k = stream.gen_range(1..6usize);
                    let mut b: Vec<f64> = (0..k).map(|_| stream.gen_range(0.01..1.0)).collect();
                    let s: f64 = b.iter().sum();
                    b.iter_mut().for_each(|x| *x /= s);
                    b
                })
                .collect();
            let combined = combine_portfolios(&weights, &books).unwrap();
            assert!(math::abs(combined.iter().sum::<f64>() - 1.0) < 1e-9);
            assert!(combined.iter().all(|&x| x >= 0.0));

            // Rescaling one cluster weight and renormalizing first, or
            // scaling that block of the output and renormalizing after,
            // must agree.
            let mut scaled = weights.clone();
            scaled[0] *= 3.0;
            let ssum: f64 = scaled.iter().sum();
            scaled.iter_mut().for_each(|w| *w /= ssum);
            let via_weights = combine_portfolios(&scaled, &books).unwrap();
            let mut via_output = combined.clone();
            via_output[..books[0].len()].iter_mut().for_each(|x| *x *= 3.0);
            let osum: f64 = via_output.iter().sum();
            via_output.iter_mut().for_each(|x| *x /= osum);
            for (a, b) in via_weights.iter().zip(&via_output) {
                assert!(math::abs(a - b) < 1e-9);
            }
        }
    }
}

//! Per-cluster actor-critic trading agent.
//!
//! The actor reads a 64-record observation window (25 normalized
//! indicators plus the holdings proportion per stock) and emits one
//! SELL/HOLD/BUY distribution per stock; the critic scores the same
//! window with a scalar value. Training is advantage actor-critic:
//! sampled actions drive the trading rule, rewards are log returns of
//! the resulting cash-ledger portfolio, the policy gradient weights
//! log-probabilities by one-step TD advantages, and the critic descends
//! the squared discounted-segment residual. L1 regularization applies
//! to the weight arrays of both networks.
//!
//! Workers are logical: each owns its episodes, action stream, and
//! portfolio, gradients are computed on the parameters as of the batch
//! start, and application is serialized through one optimizer pair, so
//! any worker count is bit-reproducible for a fixed seed.
//!
//! Conventions fixed here: signals computed from the window ending at
//! record t-1 are applied at record t, whose close/close ratio then
//! marks the portfolio; episode boundaries are terminal (bootstrap
//! value 0) and each episode restarts from all cash; policy rows order
//! actions SELL, HOLD, BUY.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::diffcomp::{
    backward, forward, init_params, l1_penalty, Activation, Adam, LayerSpec, NetworkSpec, ParamSet,
};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tensor3};
use crate::market::{StateTensor, INDICATOR_COUNT, STATE_CHANNELS};
use crate::math;
use crate::rng;
use crate::trading::{apply_market, update_portfolio, Portfolio, Signal};

/// Index of each action in a policy row.
pub const ACTION_SELL: usize = 0;
pub const ACTION_HOLD: usize = 1;
pub const ACTION_BUY: usize = 2;

/// Price-ratio threshold above which a BUY counts as correct and below
/// which a SELL counts as correct.
pub const SIGNAL_THRESHOLD: f64 = 1.00005;

/// Probability floor applied before taking logarithms.
const LOG_FLOOR: f64 = 1e-12;

/// Training settings. Defaults follow the published experiment: window
/// 64, two recurrent layers of 32 and 64 units, Adam at 1e-4, batch 16,
/// L1 weight 1e-3, 50 epochs, discount 0.99.
#[derive(Debug, Clone, Copy)]
pub struct A3cConfig {
    pub window: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    /// Channels of the cross-stock convolution in the actor.
    pub conv_channels: usize,
    /// Width of the critic's pooling layer.
    pub critic_head: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub gamma: f64,
    pub workers: usize,
    pub commission: f64,
    pub seed: u64,
}

impl Default for A3cConfig {
    fn default() -> Self {
        A3cConfig {
            window: 64,
            hidden1: 32,
            hidden2: 64,
            conv_channels: 32,
            critic_head: 64,
            learning_rate: 1e-4,
            batch: 16,
            lambda: 1e-3,
            epochs: 50,
            gamma: 0.99,
            workers: 2,
            commission: 5e-4,
            seed: 0,
        }
    }
}

impl A3cConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.batch == 0 || self.epochs == 0 || self.workers == 0 {
            return Err(Error::Parameter(
                "window, batch, epochs and workers must be positive".into(),
            ));
        }
        if self.hidden1 == 0 || self.hidden2 == 0 || self.conv_channels == 0 || self.critic_head == 0
        {
            return Err(Error::Parameter("network sizes must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return Err(Error::Parameter(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Parameter("lambda must be non-negative".into()));
        }
        if !(0.0..=0.01).contains(&self.commission) {
            return Err(Error::Parameter(format!(
                "commission rate {} outside [0, 0.01]",
                self.commission
            )));
        }
        Ok(())
    }
}

/// Policy network: two recurrent layers over time, a convolution across
/// the stock axis, a per-stock linear head, softmax. The zero-started
/// head makes the untrained policy uniform.
pub fn actor_spec(cfg: &A3cConfig) -> Result<NetworkSpec> {
    NetworkSpec::new(vec![
        LayerSpec::Recurrent { input: STATE_CHANNELS, hidden: cfg.hidden1, return_sequence: true },
        LayerSpec::Recurrent { input: cfg.hidden1, hidden: cfg.hidden2, return_sequence: false },
        LayerSpec::Conv1d {
            input: cfg.hidden2,
            output: cfg.conv_channels,
            kernel: 3,
            activation: Activation::Relu,
        },
        LayerSpec::Dense {
            input: cfg.conv_channels,
            output: 3,
            activation: Activation::Linear,
            flatten: false,
            zero_init: true,
        },
        LayerSpec::Softmax,
    ])
}

/// Value network: the same recurrent stack, pooled across stocks by a
/// flattening layer, ending in a zero-started scalar head.
pub fn critic_spec(cfg: &A3cConfig, stocks: usize) -> Result<NetworkSpec> {
    NetworkSpec::new(vec![
        LayerSpec::Recurrent { input: STATE_CHANNELS, hidden: cfg.hidden1, return_sequence: true },
        LayerSpec::Recurrent { input: cfg.hidden1, hidden: cfg.hidden2, return_sequence: false },
        LayerSpec::Dense {
            input: stocks * cfg.hidden2,
            output: cfg.critic_head,
            activation: Activation::Relu,
            flatten: true,
            zero_init: false,
        },
        LayerSpec::Dense {
            input: cfg.critic_head,
            output: 1,
            activation: Activation::Linear,
            flatten: false,
            zero_init: true,
        },
    ])
}

/// Runs the actor and validates the policy-output contract: one row per
/// stock, each a distribution over (SELL, HOLD, BUY).
pub fn actor_forward(spec: &NetworkSpec, params: &ParamSet, state: &Tensor3) -> Result<Tensor3> {
    let (out, _) = forward(spec, params, state)?;
    if out.d2 != 3 || out.d0 != state.d0 {
        return Err(Error::Shape(format!(
            "policy output {}x{} for {} stocks",
            out.d0, out.d2, state.d0
        )));
    }
    for r in 0..out.d0 {
        let sum: f64 = out.plane(r).iter().sum();
        if math::abs(sum - 1.0) > 1e-9 {
            return Err(Error::Numeric(format!("policy row {r} sums to {sum}")));
        }
    }
    Ok(out)
}

/// Runs the critic and returns its scalar state value.
pub fn critic_value(spec: &NetworkSpec, params: &ParamSet, state: &Tensor3) -> Result<f64> {
    let (out, _) = forward(spec, params, state)?;
    if out.data.len() != 1 {
        return Err(Error::Shape(format!("value output has {} entries", out.data.len())));
    }
    Ok(out.data[0])
}

/// Per-stock argmax over (SELL, HOLD, BUY); any exact tie for the
/// maximum resolves to HOLD.
pub fn select_signals(policy: &Tensor3) -> Vec<Signal> {
    let mut signals = Vec::with_capacity(policy.d0);
    for r in 0..policy.d0 {
        let row = policy.plane(r);
        let mut best = row[0];
        for &v in &row[1..] {
            if v > best {
                best = v;
            }
        }
        let ties = row.iter().filter(|&&v| v == best).count();
        let action = if ties > 1 {
            ACTION_HOLD
        } else {
            row.iter().position(|&v| v == best).expect("max exists")
        };
        signals.push(match action {
            ACTION_SELL => Signal::Sell,
            ACTION_BUY => Signal::Buy,
            _ => Signal::Hold,
        });
    }
    signals
}

/// One-step temporal-difference error r + gamma*V(s_t) - V(s_{t-1}).
pub fn td_error(r: f64, gamma: f64, v_t: f64, v_prev: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma {gamma} outside [0,1]")));
    }
    Ok(r + gamma * v_t - v_prev)
}

/// Policy loss -(1/n) * sum T_i * ln pi_i over a batch of (advantage,
/// action probability) pairs. Probabilities at or below zero are
/// errors; positive ones are floored at 1e-12 before the logarithm.
pub fn policy_loss(batch: &[(f64, f64)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Parameter("policy loss over an empty batch".into()));
    }
    let mut sum = 0.0;
    for &(t, p) in batch {
        if p <= 0.0 {
            return Err(Error::Numeric(format!("action probability {p} is not positive")));
        }
        if p > 1.0 + 1e-12 {
            return Err(Error::Validation(format!("action probability {p} exceeds 1")));
        }
        sum += t * math::ln(p.max(LOG_FLOOR));
    }
    Ok(-sum / batch.len() as f64)
}

/// Discounted-segment residual e = sum gamma^k r_k + gamma^n V(s_n) -
/// V(s_0), returned together with e^2, the quantity training minimizes.
pub fn critic_loss(rewards: &[f64], gamma: f64, v_end: f64, v_start: f64) -> Result<(f64, f64)> {
    if rewards.is_empty() {
        return Err(Error::Parameter("critic loss over an empty segment".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma {gamma} outside [0,1]")));
    }
    let mut e = 0.0;
    let mut discount = 1.0;
    for &r in rewards {
        e += discount * r;
        discount *= gamma;
    }
    e += discount * v_end - v_start;
    Ok((e, e * e))
}

/// Log return of the portfolio across one period: the new book (already
/// net of trading commissions) is marked by the price ratios and
/// compared against the previous value. The commission rate is the one
/// the trade used; it is validated for range only, since the book
/// already reflects it.
pub fn step_reward(
    b_prev: &Portfolio,
    b_new: &Portfolio,
    ratios: &[f64],
    commission_rate: f64,
) -> Result<f64> {
    if !(0.0..=0.01).contains(&commission_rate) {
        return Err(Error::Parameter(format!(
            "commission rate {commission_rate} outside [0, 0.01]"
        )));
    }
    let before = b_prev.value();
    let after = apply_market(b_new, ratios)?.value();
    if !(before > 0.0) || !(after > 0.0) {
        return Err(Error::Numeric(format!(
            "non-positive portfolio value in reward: before {before}, after {after}"
        )));
    }
    Ok(math::ln(after / before))
}

/// Fraction of signals that called their price ratio correctly: BUY
/// needs the ratio above 1.00005, SELL below it, HOLD above 1.
pub fn signal_accuracy(signals: &[Vec<Signal>], ratios: &[&[f64]]) -> Result<f64> {
    if signals.len() != ratios.len() {
        return Err(Error::Shape(format!(
            "{} signal vectors for {} ratio rows",
            signals.len(),
            ratios.len()
        )));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (h, x) in signals.iter().zip(ratios) {
        if h.len() != x.len() {
            return Err(Error::Shape(format!(
                "signal vector of {} entries against {} ratios",
                h.len(),
                x.len()
            )));
        }
        for (&sig, &pr) in h.iter().zip(x.iter()) {
            total += 1;
            let ok = match sig {
                Signal::Buy => pr > SIGNAL_THRESHOLD,
                Signal::Sell => pr < SIGNAL_THRESHOLD,
                Signal::Hold => pr > 1.0,
            };
            if ok {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("signal accuracy over an empty sequence".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Observation window for a decision at record `t`: records [t-window,
/// t) transposed to (stocks x steps x channels), with the holdings
/// channel overwritten by the current proportions at every step.
fn window_state(states: &StateTensor, lo: usize, hi: usize, proportions: &[f64]) -> Tensor3 {
    let n = states.stocks();
    let steps = hi - lo;
    let mut out = Tensor3::zeros(n, steps, STATE_CHANNELS);
    for s in 0..n {
        for t in 0..steps {
            for c in 0..INDICATOR_COUNT {
                out.set(s, t, c, states.data.get(lo + t, s, c));
            }
            out.set(s, t, INDICATOR_COUNT, proportions[s]);
        }
    }
    out
}

/// Decision records for a range: every t with a full window of history
/// before it. Errors if the range itself is shorter than the window.
fn decision_steps(states: &StateTensor, range: &Range<usize>, window: usize) -> Result<Vec<usize>> {
    if range.end > states.records() {
        return Err(Error::Validation(format!(
            "range ends at {} but the tensor has {} records",
            range.end,
            states.records()
        )));
    }
    if range.len() < window {
        return Err(Error::InsufficientData { needed: window, got: range.len() });
    }
    let first = range.start.max(window);
    let steps: Vec<usize> = (first..range.end).collect();
    if steps.is_empty() {
        return Err(Error::InsufficientData { needed: window + 1, got: range.len() });
    }
    Ok(steps)
}

/// Per-epoch training diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub accuracy: f64,
}

/// Training output: final parameters, the per-epoch trace, and whether
/// training aborted on a non-finite loss (the trace then covers the
/// epochs that completed).
#[derive(Debug, Clone)]
pub struct A3cTrained {
    pub actor: ParamSet,
    pub critic: ParamSet,
    pub trace: Vec<EpochStats>,
    pub diverged: bool,
}

struct StepRecord {
    cache: crate::diffcomp::Cache,
    chosen: Vec<usize>,
    probs: Vec<f64>,
    reward: f64,
    value: f64,
}

/// Trains one cluster's agent over the training range of `states`.
/// `ratios` must align row-for-row with the tensor's records.
pub fn a3c_train(
    states: &StateTensor,
    ratios: &Matrix,
    train: Range<usize>,
    cfg: &A3cConfig,
) -> Result<A3cTrained> {
    cfg.validate()?;
    let n = states.stocks();
    if ratios.rows != states.records() || ratios.cols != n {
        return Err(Error::Shape(format!(
            "ratio matrix {}x{} against tensor {}x{}",
            ratios.rows,
            ratios.cols,
            states.records(),
            n
        )));
    }
    let steps = decision_steps(states, &train, cfg.window)?;
    let episodes: Vec<&[usize]> = steps.chunks(cfg.window).collect();

    let a_spec = actor_spec(cfg)?;
    let c_spec = critic_spec(cfg, n)?;
    let mut actor = init_params(&a_spec, &mut rng::substream(cfg.seed, "a3c-actor-init"));
    let mut critic = init_params(&c_spec, &mut rng::substream(cfg.seed, "a3c-critic-init"));
    let mut actor_opt = Adam::new(&actor, cfg.learning_rate);
    let mut critic_opt = Adam::new(&critic, cfg.learning_rate);
    let mut worker_streams: Vec<rng::Stream> = (0..cfg.workers)
        .map(|w| rng::substream(cfg.seed, &format!("a3c-worker-{w}")))
        .collect();

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut diverged = false;

    'epochs: for epoch in 0..cfg.epochs {
        let mut policy_sum = 0.0;
        let mut critic_sum = 0.0;
        let mut batches = 0usize;
        for (ei, episode) in episodes.iter().enumerate() {
            let stream = &mut worker_streams[ei % cfg.workers];
            let mut portfolio = Portfolio::all_cash(n, 1.0);
            let episode_len = episode.len();
            for (bi, batch) in episode.chunks(cfg.batch).enumerate() {
                let mut records: Vec<StepRecord> = Vec::with_capacity(batch.len());
                let mut first_state: Option<Tensor3> = None;
                for &t in batch {
                    let state = window_state(states, t - cfg.window, t, &portfolio.proportions());
                    if first_state.is_none() {
                        first_state = Some(state.clone());
                    }
                    let (policy, cache) = forward(&a_spec, &actor, &state)?;
                    let value = critic_value(&c_spec, &critic, &state)?;
                    let mut chosen = Vec::with_capacity(n);
                    let mut probs = Vec::with_capacity(n);
                    let mut signals = Vec::with_capacity(n);
                    for s in 0..n {
                        let row = policy.plane(s);
                        let a = rng::categorical(stream, row);
                        chosen.push(a);
                        probs.push(row[a]);
                        signals.push(match a {
                            ACTION_SELL => Signal::Sell,
                            ACTION_BUY => Signal::Buy,
                            _ => Signal::Hold,
                        });
                    }
                    let (b_new, _) = update_portfolio(&portfolio, &signals, cfg.commission)?;
                    let x = ratios.row(t);
                    let reward = step_reward(&portfolio, &b_new, x, cfg.commission)?;
                    portfolio = apply_market(&b_new, x)?;
                    records.push(StepRecord { cache, chosen, probs, reward, value });
                }

                // Bootstrap value: zero at the episode boundary, else the
                // critic's estimate of the next window.
                let batch_end_is_terminal = (bi + 1) * cfg.batch >= episode_len;
                let v_end = if batch_end_is_terminal {
                    0.0
                } else {
                    let t_next = episode[(bi + 1) * cfg.batch];
                    let state =
                        window_state(states, t_next - cfg.window, t_next, &portfolio.proportions());
                    critic_value(&c_spec, &critic, &state)?
                };

                // Advantages: one-step TD errors against the stored values.
                let b_len = records.len();
                let mut adv = Vec::with_capacity(b_len);
                let mut loss_items = Vec::with_capacity(b_len);
                for i in 0..b_len {
                    let v_next = if i + 1 < b_len { records[i + 1].value } else { v_end };
                    let t_i = td_error(records[i].reward, cfg.gamma, v_next, records[i].value)?;
                    adv.push(t_i);
                    let joint: f64 =
                        records[i].probs.iter().map(|&p| p.max(LOG_FLOOR)).product();
                    loss_items.push((t_i, joint.min(1.0)));
                }
                let p_loss = policy_loss(&loss_items)?;

                let mut actor_grads = actor.zeros_like();
                for (i, rec) in records.iter().enumerate() {
                    let mut grad_out = Tensor3::zeros(n, 1, 3);
                    for s in 0..n {
                        let p = rec.probs[s].max(LOG_FLOOR);
                        grad_out.set(s, 0, rec.chosen[s], -adv[i] / (b_len as f64 * p));
                    }
                    let (g, _) = backward(&a_spec, &actor, &rec.cache, &grad_out)?;
                    actor_grads.add_scaled(&g, 1.0)?;
                }
                let (_, actor_l1) = l1_penalty(&actor, cfg.lambda)?;
                actor_grads.add_scaled(&actor_l1, 1.0)?;

                // The critic descends e^2 through V(s_0) only; the
                // discounted tail acts as a frozen target. Rerun the
                // forward on the saved first state to get a cache.
                let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
                let (e, e_sq) = critic_loss(&rewards, cfg.gamma, v_end, records[0].value)?;
                let s0 = first_state.expect("batch is non-empty");
                let (_, v0_cache) = forward(&c_spec, &critic, &s0)?;
                let mut c_grad = Tensor3::zeros(1, 1, 1);
                c_grad.data[0] = -2.0 * e;
                let (mut critic_grads, _) = backward(&c_spec, &critic, &v0_cache, &c_grad)?;
                let (_, critic_l1) = l1_penalty(&critic, cfg.lambda)?;
                critic_grads.add_scaled(&critic_l1, 1.0)?;

                if !p_loss.is_finite() || !e_sq.is_finite() {
                    diverged = true;
                    trace.push(EpochStats {
                        epoch,
                        policy_loss: p_loss,
                        critic_loss: e_sq,
                        accuracy: f64::NAN,
                    });
                    break 'epochs;
                }
                actor_opt.apply(&mut actor, &actor_grads)?;
                critic_opt.apply(&mut critic, &critic_grads)?;
                policy_sum += p_loss;
                critic_sum += e_sq;
                batches += 1;
            }
        }
        let run = run_signals(states, ratios, train.clone(), cfg.window, cfg.commission, &a_spec, &actor)?;
        trace.push(EpochStats {
            epoch,
            policy_loss: policy_sum / batches as f64,
            critic_loss: critic_sum / batches as f64,
            accuracy: run.accuracy,
        });
    }

    Ok(A3cTrained { actor, critic, trace, diverged })
}

/// A deterministic (argmax) pass of a trained actor over a range:
/// signals, the post-trade books, per-step marked values, and the
/// signal accuracy.
#[derive(Debug, Clone)]
pub struct SignalRun {
    /// Record index of each decision.
    pub steps: Vec<usize>,
    pub signals: Vec<Vec<Signal>>,
    /// Book right after each update, before that record's price move.
    pub post_trade: Vec<Portfolio>,
    /// Portfolio value after each record's price move.
    pub values: Vec<f64>,
    pub accuracy: f64,
    pub final_value: f64,
}

/// Replays the trading rule with argmax signals across `range`,
/// starting from `initial`.
pub fn run_signals(
    states: &StateTensor,
    ratios: &Matrix,
    range: Range<usize>,
    window: usize,
    commission: f64,
    spec: &NetworkSpec,
    actor: &ParamSet,
) -> Result<SignalRun> {
    let n = states.stocks();
    let steps = decision_steps(states, &range, window)?;
    let mut portfolio = Portfolio::all_cash(n, 1.0);
    let mut signals = Vec::with_capacity(steps.len());
    let mut post_trade = Vec::with_capacity(steps.len());
    let mut values = Vec::with_capacity(steps.len());
    let mut rows: Vec<&[f64]> = Vec::with_capacity(steps.len());
    for &t in &steps {
        let state = window_state(states, t - window, t, &portfolio.proportions());
        let policy = actor_forward(spec, actor, &state)?;
        let h = select_signals(&policy);
        let (b_new, _) = update_portfolio(&portfolio, &h, commission)?;
        portfolio = apply_market(&b_new, ratios.row(t))?;
        signals.push(h);
        post_trade.push(b_new);
        values.push(portfolio.value());
        rows.push(ratios.row(t));
    }
    let accuracy = signal_accuracy(&signals, &rows)?;
    let final_value = *values.last().expect("at least one step");
    Ok(SignalRun { steps, signals, post_trade, values, accuracy, final_value })
}

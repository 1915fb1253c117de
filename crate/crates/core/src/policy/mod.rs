//! The two learners. A Double DQN master policy chooses between asking and
//! guessing from the full dialog state; a DRRN scores each remaining question
//! against the vision context with separate state and action towers joined by
//! a dot product.

mod mlp;
pub mod replay;

pub use mlp::Mlp;
pub use replay::{PrioritizedReplay, ReplayConfig, Sample};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tensor::{self as k, Tensor};
use crate::numcore::{Gradients, ParamSet, RmsProp, Tape, Var};
use crate::rng::Rng;

pub const DQN_PREFIX: &str = "dqn";
pub const DRRN_STATE_PREFIX: &str = "drrn.state";
pub const DRRN_ACTION_PREFIX: &str = "drrn.action";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MasterAction {
    Ask,
    Guess,
}

impl MasterAction {
    pub fn index(self) -> usize {
        match self {
            MasterAction::Ask => 0,
            MasterAction::Guess => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub dqn_hidden: Vec<usize>,
    /// Layer sizes of each DRRN tower; the last one is the interaction width.
    pub drrn_hidden: Vec<usize>,
    pub optimizer: RmsProp,
    pub batch_size: usize,
    /// Environment steps between updates.
    pub update_every: usize,
    /// Updates between target-network syncs.
    pub target_sync_every: usize,
    pub dqn_capacity: usize,
    pub drrn_capacity: usize,
    pub replay: ReplayConfig,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which epsilon falls from start to end.
    pub epsilon_anneal: usize,
    pub softmax_temperature: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            dqn_hidden: vec![128, 64, 32],
            drrn_hidden: vec![64, 32],
            optimizer: RmsProp::default(),
            batch_size: 64,
            update_every: 5,
            target_sync_every: 500,
            dqn_capacity: 25_000,
            drrn_capacity: 50_000,
            replay: ReplayConfig::default(),
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_anneal: 10_000,
            softmax_temperature: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dqn_hidden.is_empty() || self.drrn_hidden.is_empty() {
            return Err(Error::config("policy: hidden layer lists must be non-empty"));
        }
        if self.dqn_hidden.iter().chain(&self.drrn_hidden).any(|&h| h == 0) {
            return Err(Error::config("policy: hidden sizes must be positive"));
        }
        if self.batch_size == 0 || self.update_every == 0 || self.target_sync_every == 0 {
            return Err(Error::config(
                "policy: batch_size, update_every and target_sync_every must be positive",
            ));
        }
        if self.dqn_capacity < self.batch_size || self.drrn_capacity < self.batch_size {
            return Err(Error::config("policy: replay capacities must hold at least one batch"));
        }
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !eps_ok(self.epsilon_start) || !eps_ok(self.epsilon_end) {
            return Err(Error::config("policy: epsilon values must lie in [0, 1]"));
        }
        if !(self.softmax_temperature > 0.0) {
            return Err(Error::config("policy: softmax_temperature must be positive"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config("policy: learning rate must be positive"));
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over `epsilon_anneal`
    /// episodes, flat afterwards.
    pub fn epsilon(&self, episode: usize) -> f64 {
        epsilon_schedule(
            episode,
            self.epsilon_anneal,
            self.epsilon_start,
            self.epsilon_end,
        )
    }
}

/// `max(end, start - (start - end) * iter / anneal)`
pub fn epsilon_schedule(iter: usize, anneal: usize, start: f64, end: f64) -> f64 {
    if anneal == 0 {
        return end;
    }
    let frac = (iter as f64 / anneal as f64).min(1.0);
    (start - (start - end) * frac).max(end)
}

/// Online and target copies of the master network.
#[derive(Clone, Debug, PartialEq)]
pub struct DqnParams {
    pub net: Mlp,
    pub online: ParamSet,
    pub target: ParamSet,
}

impl DqnParams {
    pub fn init(state_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut layers = hidden.to_vec();
        layers.push(2);
        let net = Mlp::new(DQN_PREFIX, state_dim, &layers, false);
        let mut online = ParamSet::new();
        net.init(&mut online, rng)?;
        let target = online.snapshot();
        Ok(DqnParams {
            net,
            online,
            target,
        })
    }

    pub fn from_parts(net: Mlp, online: ParamSet, target: ParamSet) -> Result<Self> {
        net.check(&online)?;
        net.check(&target)?;
        if net.output_dim() != 2 {
            return Err(Error::format("dqn parameters", "output layer must have 2 units"));
        }
        Ok(DqnParams {
            net,
            online,
            target,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// `[q_ask, q_guess]` under the online weights.
    pub fn q(&self, s: &[f64]) -> Result<[f64; 2]> {
        dqn_q(&self.net, &self.online, s)
    }

    pub fn q_target(&self, s: &[f64]) -> Result<[f64; 2]> {
        dqn_q(&self.net, &self.target, s)
    }

    /// `theta_minus <- theta`
    pub fn sync_target(&mut self) {
        self.target = self.online.snapshot();
    }
}

pub fn dqn_q(net: &Mlp, params: &ParamSet, s: &[f64]) -> Result<[f64; 2]> {
    let out = net.forward(params, &Tensor::vector(s.to_vec()))?;
    Ok([out.get(0, 0), out.get(0, 1)])
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrrnParams {
    pub state_net: Mlp,
    pub action_net: Mlp,
    pub params: ParamSet,
}

impl DrrnParams {
    pub fn init(vc_dim: usize, question_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let state_net = Mlp::new(DRRN_STATE_PREFIX, vc_dim, hidden, true);
        let action_net = Mlp::new(DRRN_ACTION_PREFIX, question_dim, hidden, true);
        let mut params = ParamSet::new();
        state_net.init(&mut params, rng)?;
        action_net.init(&mut params, rng)?;
        Ok(DrrnParams {
            state_net,
            action_net,
            params,
        })
    }

    pub fn from_parts(state_net: Mlp, action_net: Mlp, params: ParamSet) -> Result<Self> {
        state_net.check(&params)?;
        action_net.check(&params)?;
        if state_net.output_dim() != action_net.output_dim() {
            return Err(Error::format(
                "drrn parameters",
                "state and action towers must end in the same width",
            ));
        }
        Ok(DrrnParams {
            state_net,
            action_net,
            params,
        })
    }

    pub fn state_embedding(&self, vcs: &Tensor) -> Result<Tensor> {
        self.state_net.forward(&self.params, vcs)
    }

    pub fn action_embedding(&self, questions: &Tensor) -> Result<Tensor> {
        self.action_net.forward(&self.params, questions)
    }

    /// `dot(state_tower(vc), action_tower(q))`
    pub fn q(&self, vc: &[f64], question: &[f64]) -> Result<f64> {
        Ok(self.q_pool(vc, &Tensor::vector(question.to_vec()))?[0])
    }

    /// Scores every row of `pool` against `vc`.
    pub fn q_pool(&self, vc: &[f64], pool: &Tensor) -> Result<Vec<f64>> {
        let s = self.state_embedding(&Tensor::vector(vc.to_vec()))?;
        let a = self.action_embedding(pool)?;
        Ok(k::matmul_nt(&a, &s)?.into_data())
    }
}

/// Epsilon-greedy master choice. Ties go to asking; an empty question pool
/// forces a guess.
pub fn select_master(
    dqn: &DqnParams,
    s: &[f64],
    epsilon: f64,
    ask_allowed: bool,
    rng: &mut Rng,
) -> Result<MasterAction> {
    if !ask_allowed {
        return Ok(MasterAction::Guess);
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(if rng.gen::<bool>() {
            MasterAction::Ask
        } else {
            MasterAction::Guess
        });
    }
    let [q_ask, q_guess] = dqn.q(s)?;
    Ok(if q_guess > q_ask {
        MasterAction::Guess
    } else {
        MasterAction::Ask
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Softmax { temperature: f64 },
    Greedy,
}

/// Index into `scores` chosen by `mode`. Greedy ties go to the lowest index.
pub fn choose_index(scores: &[f64], mode: SelectMode, rng: &mut Rng) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidAction("question pool is empty".into()));
    }
    match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for (i, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        SelectMode::Softmax { temperature } => {
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores
                .iter()
                .map(|v| ((v - max) / temperature).exp())
                .collect();
            let total: f64 = w.iter().sum();
            if !total.is_finite() {
                return Err(Error::Numeric("non-finite question scores".into()));
            }
            let mut u = rng.gen::<f64>() * total;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    return Ok(i);
                }
                u -= wi;
            }
            Ok(w.len() - 1)
        }
    }
}

/// Picks a row of `pool` for context `vc`.
pub fn select_question(
    drrn: &DrrnParams,
    vc: &[f64],
    pool: &Tensor,
    mode: SelectMode,
    rng: &mut Rng,
) -> Result<usize> {
    if pool.rows() == 0 {
        return Err(Error::InvalidAction("question pool is empty".into()));
    }
    choose_index(&drrn.q_pool(vc, pool)?, mode, rng)
}

/// Master-policy replay record.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub action: MasterAction,
    pub next_s: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    /// False when no question remains at `next_s`, which masks asking out of
    /// the bootstrap argmax.
    pub next_ask_allowed: bool,
}

/// Question-selector replay record. Questions are rows of a shared question
/// bank so the remaining pool is stored as indices.
#[derive(Clone, Debug, PartialEq)]
pub struct QTransition {
    pub vc: Vec<f64>,
    pub question: usize,
    pub next_vc: Vec<f64>,
    pub reward: f64,
    pub next_pool: Vec<usize>,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    /// `Q - y` per batch item; NaN for dropped items.
    pub td_errors: Vec<f64>,
    pub dropped: usize,
}

/// Double-DQN targets: the online net picks the next action, the target net
/// values it.
pub fn dqn_targets(dqn: &DqnParams, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>> {
    let live: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].terminal).collect();
    let mut y: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    if live.is_empty() || gamma == 0.0 {
        return Ok(y);
    }
    let rows: Vec<&[f64]> = live.iter().map(|&i| batch[i].next_s.as_slice()).collect();
    let next = Tensor::from_rows(&rows)?;
    let q_online = dqn.net.forward(&dqn.online, &next)?;
    let q_target = dqn.net.forward(&dqn.target, &next)?;
    for (r, &i) in live.iter().enumerate() {
        let a = if !batch[i].next_ask_allowed || q_online.get(r, 1) > q_online.get(r, 0) {
            1
        } else {
            0
        };
        y[i] += gamma * q_target.get(r, a);
    }
    Ok(y)
}

/// DRRN targets: reward plus the discounted best score over the remaining pool.
pub fn drrn_targets(
    drrn: &DrrnParams,
    batch: &[&QTransition],
    bank: &Tensor,
    gamma: f64,
) -> Result<Vec<f64>> {
    let live: Vec<usize> = (0..batch.len())
        .filter(|&i| !batch[i].terminal && !batch[i].next_pool.is_empty())
        .collect();
    let mut y: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    if live.is_empty() || gamma == 0.0 {
        return Ok(y);
    }
    let vcs: Vec<&[f64]> = live.iter().map(|&i| batch[i].next_vc.as_slice()).collect();
    let s_emb = drrn.state_embedding(&Tensor::from_rows(&vcs)?)?;
    let mut q_rows: Vec<&[f64]> = Vec::new();
    for &i in &live {
        for &j in &batch[i].next_pool {
            if j >= bank.rows() {
                return Err(Error::InvalidAction(format!("question id {j} outside bank")));
            }
            q_rows.push(bank.row(j));
        }
    }
    let a_emb = drrn.action_embedding(&Tensor::from_rows(&q_rows)?)?;
    let mut offset = 0;
    for (r, &i) in live.iter().enumerate() {
        let n = batch[i].next_pool.len();
        let best = (offset..offset + n)
            .map(|row| k::dot_slices(s_emb.row(r), a_emb.row(row)))
            .fold(f64::NEG_INFINITY, f64::max);
        offset += n;
        y[i] += gamma * best;
    }
    Ok(y)
}

fn keep_finite(y: &[f64], weights: &[f64]) -> (Vec<usize>, usize) {
    let keep: Vec<usize> = (0..y.len())
        .filter(|&i| y[i].is_finite() && weights[i].is_finite())
        .collect();
    let dropped = y.len() - keep.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} replay item(s) with non-finite targets");
    }
    (keep, dropped)
}

fn check_batch(n: usize, weights: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidAction("update on an empty batch".into()));
    }
    if weights.len() != n {
        return Err(Error::Shape {
            op: "importance weights",
            lhs: (weights.len(), 1),
            rhs: (n, 1),
        });
    }
    Ok(())
}

/// Weighted squared TD loss against fixed targets, with its gradients.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Gradients,
    /// `Q - y` per batch item; NaN for dropped items.
    pub td_errors: Vec<f64>,
    pub dropped: usize,
}

impl LossGrad {
    fn empty(n: usize, dropped: usize) -> Self {
        LossGrad {
            loss: 0.0,
            grads: Gradients::new(),
            td_errors: vec![f64::NAN; n],
            dropped,
        }
    }
}

/// Loss `sum_i w_i (Q(s_i, a_i) - y_i)^2 / n` of the online master network
/// over the items whose target and weight are finite.
pub fn dqn_loss(dqn: &DqnParams, batch: &[&Transition], y: &[f64], weights: &[f64]) -> Result<LossGrad> {
    check_batch(batch.len(), weights)?;
    check_batch(batch.len(), y)?;
    let (keep, dropped) = keep_finite(y, weights);
    if keep.is_empty() {
        return Ok(LossGrad::empty(batch.len(), dropped));
    }
    let rows: Vec<&[f64]> = keep.iter().map(|&i| batch[i].s.as_slice()).collect();
    let actions: Vec<usize> = keep.iter().map(|&i| batch[i].action.index()).collect();
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_rows(&rows)?);
    let q_all = dqn.net.on_tape(&dqn.online, &mut tape, s)?;
    let q = tape.pick_cols(q_all, &actions)?;
    finish_loss(tape, q, &keep, y, weights, batch.len(), dropped)
}

/// The same loss for the DRRN, with `Q = state(vc) . action(bank[question])`.
pub fn drrn_loss(
    drrn: &DrrnParams,
    batch: &[&QTransition],
    y: &[f64],
    weights: &[f64],
    bank: &Tensor,
) -> Result<LossGrad> {
    check_batch(batch.len(), weights)?;
    check_batch(batch.len(), y)?;
    let (keep, dropped) = keep_finite(y, weights);
    if keep.is_empty() {
        return Ok(LossGrad::empty(batch.len(), dropped));
    }
    let vcs: Vec<&[f64]> = keep.iter().map(|&i| batch[i].vc.as_slice()).collect();
    let mut qs: Vec<&[f64]> = Vec::with_capacity(keep.len());
    for &i in &keep {
        let j = batch[i].question;
        if j >= bank.rows() {
            return Err(Error::InvalidAction(format!("question id {j} outside bank")));
        }
        qs.push(bank.row(j));
    }
    let mut tape = Tape::new();
    let vc = tape.constant(Tensor::from_rows(&vcs)?);
    let qv = tape.constant(Tensor::from_rows(&qs)?);
    let s_emb = drrn.state_net.on_tape(&drrn.params, &mut tape, vc)?;
    let a_emb = drrn.action_net.on_tape(&drrn.params, &mut tape, qv)?;
    let q = tape.row_dot(s_emb, a_emb)?;
    finish_loss(tape, q, &keep, y, weights, batch.len(), dropped)
}

fn finish_loss(
    mut tape: Tape,
    q: Var,
    keep: &[usize],
    y: &[f64],
    weights: &[f64],
    n: usize,
    dropped: usize,
) -> Result<LossGrad> {
    let loss = weighted_sq_loss(&mut tape, q, keep, y, weights)?;
    let mut td_errors = vec![f64::NAN; n];
    for (r, &i) in keep.iter().enumerate() {
        td_errors[i] = tape.value(q).get(r, 0) - y[i];
    }
    Ok(LossGrad {
        loss: tape.value(loss).item(),
        grads: tape.backward(loss)?,
        td_errors,
        dropped,
    })
}

/// One RMSProp step on the online master network against Double-DQN targets.
pub fn dqn_update(
    dqn: &mut DqnParams,
    opt: &RmsProp,
    batch: &[&Transition],
    weights: &[f64],
    gamma: f64,
) -> Result<UpdateStats> {
    check_batch(batch.len(), weights)?;
    let y = dqn_targets(dqn, batch, gamma)?;
    let lg = dqn_loss(dqn, batch, &y, weights)?;
    opt.step(&mut dqn.online, &lg.grads)?;
    Ok(UpdateStats {
        loss: lg.loss,
        td_errors: lg.td_errors,
        dropped: lg.dropped,
    })
}

/// One RMSProp step on the DRRN towers.
pub fn drrn_update(
    drrn: &mut DrrnParams,
    opt: &RmsProp,
    batch: &[&QTransition],
    weights: &[f64],
    bank: &Tensor,
    gamma: f64,
) -> Result<UpdateStats> {
    check_batch(batch.len(), weights)?;
    let y = drrn_targets(drrn, batch, bank, gamma)?;
    let lg = drrn_loss(drrn, batch, &y, weights, bank)?;
    opt.step(&mut drrn.params, &lg.grads)?;
    Ok(UpdateStats {
        loss: lg.loss,
        td_errors: lg.td_errors,
        dropped: lg.dropped,
    })
}

fn weighted_sq_loss(
    tape: &mut Tape,
    q: crate::numcore::Var,
    keep: &[usize],
    y: &[f64],
    weights: &[f64],
) -> Result<crate::numcore::Var> {
    let n = keep.len();
    let yt = tape.constant(Tensor::new(n, 1, keep.iter().map(|&i| y[i]).collect())?);
    let wt = tape.constant(Tensor::new(n, 1, keep.iter().map(|&i| weights[i]).collect())?);
    let diff = tape.sub(q, yt)?;
    let sq = tape.square(diff);
    let weighted = tape.mul(sq, wt)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Samples a batch from `replay`, runs one master update and refreshes the
/// sampled priorities.
pub fn replay_dqn_update(
    dqn: &mut DqnParams,
    replay: &mut PrioritizedReplay<Transition>,
    opt: &RmsProp,
    batch_size: usize,
    beta: f64,
    gamma: f64,
    rng: &mut Rng,
) -> Result<UpdateStats> {
    let sample = replay.sample(batch_size, beta, rng)?;
    let batch: Vec<&Transition> = sample.indices.iter().map(|&i| replay.get(i)).collect();
    let stats = dqn_update(dqn, opt, &batch, &sample.weights, gamma)?;
    refresh(replay, &sample, &stats)?;
    Ok(stats)
}

/// As [`replay_dqn_update`] for the question selector.
#[allow(clippy::too_many_arguments)]
pub fn replay_drrn_update(
    drrn: &mut DrrnParams,
    replay: &mut PrioritizedReplay<QTransition>,
    opt: &RmsProp,
    bank: &Tensor,
    batch_size: usize,
    beta: f64,
    gamma: f64,
    rng: &mut Rng,
) -> Result<UpdateStats> {
    let sample = replay.sample(batch_size, beta, rng)?;
    let batch: Vec<&QTransition> = sample.indices.iter().map(|&i| replay.get(i)).collect();
    let stats = drrn_update(drrn, opt, &batch, &sample.weights, bank, gamma)?;
    refresh(replay, &sample, &stats)?;
    Ok(stats)
}

fn refresh<T>(replay: &mut PrioritizedReplay<T>, sample: &Sample, stats: &UpdateStats) -> Result<()> {
    if !stats.loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", stats.loss)));
    }
    for (&i, &td) in sample.indices.iter().zip(&stats.td_errors) {
        if td.is_finite() {
            replay.update_priority(i, td);
        }
    }
    Ok(())
}

//! Training loop, greedy evaluation, oracle baselines and significance tests.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embed::EncoderParams;
use crate::env::{ActionType, EnvConfig, Episode, StepLog, StepOutcome};
use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;
use crate::policy::{
    choose_index, replay_dqn_update, replay_drrn_update, select_master, DqnParams, DrrnParams,
    MasterAction, PolicyConfig, PrioritizedReplay, QTransition, SelectMode, Transition,
};
use crate::rng::{self, Rng};
use crate::state::{retrieve_image, EncodedWorld, META_DIM};
use crate::worldgen::GameWorld;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "rnd")]
    Rnd,
    #[serde(rename = "rnd_dqn")]
    RndDqn,
    #[serde(rename = "hrl")]
    Hrl,
    #[serde(rename = "hrl_sa")]
    HrlSa,
    #[serde(rename = "hrl_sar")]
    HrlSar,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Rnd,
        Variant::RndDqn,
        Variant::Hrl,
        Variant::HrlSa,
        Variant::HrlSar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rnd => "rnd",
            Variant::RndDqn => "rnd_dqn",
            Variant::Hrl => "hrl",
            Variant::HrlSa => "hrl_sa",
            Variant::HrlSar => "hrl_sar",
        }
    }

    pub fn learns_master(self) -> bool {
        self != Variant::Rnd
    }

    pub fn learns_questions(self) -> bool {
        matches!(self, Variant::Hrl | Variant::HrlSa | Variant::HrlSar)
    }

    pub fn adapts_context(self) -> bool {
        matches!(self, Variant::HrlSa | Variant::HrlSar)
    }

    pub fn shapes_reward(self) -> bool {
        self == Variant::HrlSar
    }

    /// `base` with shaping switched to match the variant.
    pub fn env_config(self, base: &EnvConfig) -> EnvConfig {
        EnvConfig {
            shaping_enabled: self.shapes_reward(),
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant `{s}` (expected rnd, rnd_dqn, hrl, hrl_sa or hrl_sar)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Training episodes.
    pub episodes: usize,
    pub eval_every: usize,
    pub eval_games: usize,
    /// Games in the closing evaluation; 0 plays every held-out world once.
    pub final_eval_games: usize,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::HrlSar,
            seed: 0,
            episodes: 20_000,
            eval_every: 1000,
            eval_games: 100,
            final_eval_games: 0,
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy.validate()?;
        if self.eval_every == 0 || self.eval_games == 0 {
            return Err(Error::config("run: eval_every and eval_games must be positive"));
        }
        if self.episodes < self.eval_every {
            return Err(Error::config("run: episodes must be at least eval_every"));
        }
        Ok(())
    }
}

/// Learned networks plus the variant that decides how they are used.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub variant: Variant,
    pub dqn: DqnParams,
    pub drrn: DrrnParams,
}

impl Agent {
    pub fn init(variant: Variant, embed_dim: usize, question_dim: usize, cfg: &PolicyConfig, seed: u64) -> Result<Self> {
        let mut init = rng::substream(seed, "init");
        let dqn = DqnParams::init(META_DIM + 2 * embed_dim, &cfg.dqn_hidden, &mut init)?;
        let drrn = DrrnParams::init(embed_dim, question_dim, &cfg.drrn_hidden, &mut init)?;
        Ok(Agent { variant, dqn, drrn })
    }

    fn master(&self, ep: &Episode<'_>, epsilon: f64, rng: &mut Rng) -> Result<MasterAction> {
        let ask_allowed = !ep.state().remaining_questions().is_empty();
        if !self.variant.learns_master() {
            if ask_allowed && rng.gen::<bool>() {
                return Ok(MasterAction::Ask);
            }
            return Ok(MasterAction::Guess);
        }
        select_master(&self.dqn, &ep.feature_vector(), epsilon, ask_allowed, rng)
    }

    /// Chooses among the remaining questions; returns the question index.
    fn question(&self, ep: &Episode<'_>, remaining: &[usize], explore: Option<f64>, rng: &mut Rng) -> Result<usize> {
        if remaining.is_empty() {
            return Err(Error::InvalidAction("question pool is empty".into()));
        }
        if !self.variant.learns_questions() {
            return Ok(remaining[rng.gen_range(0..remaining.len())]);
        }
        let world = ep.game().world;
        let rows: Vec<&[f64]> = remaining.iter().map(|&j| world.questions[j].q.as_slice()).collect();
        let scores = self.drrn.q_pool(&ep.state().vc, &Tensor::from_rows(&rows)?)?;
        let mode = match explore {
            Some(temperature) => SelectMode::Softmax { temperature },
            None => SelectMode::Greedy,
        };
        Ok(remaining[choose_index(&scores, mode, rng)?])
    }
}

fn guess_target(ep: &Episode<'_>) -> Result<usize> {
    let st = ep.state();
    retrieve_image(&st.vb, &ep.game().images, &st.excluded)
        .ok_or_else(|| Error::InvalidAction("every image is excluded".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    pub game_idx: usize,
    pub world_id: u64,
    pub won: bool,
    pub turns: usize,
    pub total_reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub iteration: usize,
    pub variant: String,
    pub win_rate: f64,
    pub avg_turns: f64,
    pub mean_reward: f64,
    pub n_games: usize,
    pub games: Vec<GameRecord>,
}

impl EvalReport {
    pub fn from_games(iteration: usize, variant: &str, games: Vec<GameRecord>) -> Result<Self> {
        if games.is_empty() {
            return Err(Error::config("an evaluation needs at least one game"));
        }
        let n = games.len() as f64;
        Ok(EvalReport {
            iteration,
            variant: variant.to_string(),
            win_rate: games.iter().filter(|g| g.won).count() as f64 / n,
            avg_turns: games.iter().map(|g| g.turns as f64).sum::<f64>() / n,
            mean_reward: games.iter().map(|g| g.total_reward).sum::<f64>() / n,
            n_games: games.len(),
            games,
        })
    }

    pub fn metrics_row(&self) -> MetricsRow {
        MetricsRow {
            iteration: self.iteration,
            variant: self.variant.clone(),
            win_rate: self.win_rate,
            avg_turns: self.avg_turns,
            mean_reward: self.mean_reward,
            n_games: self.n_games,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub variant: String,
    pub win_rate: f64,
    pub avg_turns: f64,
    pub mean_reward: f64,
    pub n_games: usize,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn write_games_csv(path: &Path, games: &[GameRecord]) -> Result<()> {
    write_csv(path, games)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path.display().to_string(), e.to_string())
    }
}

pub fn read_games_csv(path: &Path) -> Result<Vec<GameRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let rec: GameRecord = rec.map_err(|e| {
            Error::format(path.display().to_string(), format!("record {}: {e}", i + 1))
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::format(path.display().to_string(), "no game records"));
    }
    Ok(out)
}

pub fn encode_worlds<'w>(worlds: &'w [GameWorld], encoder: &EncoderParams) -> Result<Vec<EncodedWorld<'w>>> {
    worlds.iter().map(|w| EncodedWorld::new(w, encoder)).collect()
}

/// Plays `n_games` greedy games; game `i` uses `games[i % games.len()]`.
/// Only the random variants consume randomness, from a per-game substream.
pub fn evaluate(
    agent: &Agent,
    encoder: &EncoderParams,
    games: &[EncodedWorld<'_>],
    env: &EnvConfig,
    n_games: usize,
    seed: u64,
    iteration: usize,
) -> Result<EvalReport> {
    if n_games == 0 || games.is_empty() {
        return Err(Error::config("an evaluation needs at least one game and one world"));
    }
    let env = agent.variant.env_config(env);
    let adapt = agent.variant.adapts_context();
    let round_seed = rng::mix_seed(seed, iteration as u64);
    let mut records = Vec::with_capacity(n_games);
    for i in 0..n_games {
        let game = &games[i % games.len()];
        let mut r = rng::indexed(round_seed, "eval", i as u64);
        let mut ep = Episode::reset(game, encoder, &env, adapt)?;
        let mut total = 0.0;
        while !ep.is_done() {
            let out = match agent.master(&ep, 0.0, &mut r)? {
                MasterAction::Ask => {
                    let remaining = ep.state().remaining_questions();
                    let q = agent.question(&ep, &remaining, None, &mut r)?;
                    ep.step_question(q)?
                }
                MasterAction::Guess => {
                    let img = guess_target(&ep)?;
                    ep.step_guess(img)?
                }
            };
            total += out.reward;
        }
        records.push(GameRecord {
            game_idx: i,
            world_id: game.world.world_id,
            won: ep.won(),
            turns: ep.state().turn,
            total_reward: total,
        });
    }
    EvalReport::from_games(iteration, agent.variant.name(), records)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub steps: usize,
    pub dqn_updates: usize,
    pub drrn_updates: usize,
    pub target_syncs: usize,
    pub dropped_items: usize,
    pub last_dqn_loss: Option<f64>,
    pub last_drrn_loss: Option<f64>,
    pub train_wins: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub agent: Agent,
    /// One report per `eval_every` episodes.
    pub curve: Vec<EvalReport>,
    pub final_report: EvalReport,
    pub stats: TrainStats,
}

pub struct TrainInputs<'a> {
    pub train_worlds: &'a [GameWorld],
    pub eval_worlds: &'a [GameWorld],
    pub encoder: &'a EncoderParams,
}

/// Global question id for question `j` of training world `w`.
fn bank_id(pool: usize, w: usize, j: usize) -> usize {
    w * pool + j
}

/// Runs the hierarchical policy-learning loop. `episode_log` receives one
/// JSON line per environment step.
pub fn train(cfg: &RunConfig, inputs: &TrainInputs<'_>, mut episode_log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let TrainInputs {
        train_worlds,
        eval_worlds,
        encoder,
    } = *inputs;
    if train_worlds.is_empty() || eval_worlds.is_empty() {
        return Err(Error::config("training needs non-empty train and eval world pools"));
    }
    let pool = train_worlds[0].pool_size();
    if train_worlds.iter().any(|w| w.pool_size() != pool) {
        return Err(Error::config("training worlds must share one question-pool size"));
    }
    let k = encoder.dims.embed_dim;
    let qdim = train_worlds[0].questions.first().map_or(k, |q| q.q.len());
    let train_games = encode_worlds(train_worlds, encoder)?;
    let eval_games = encode_worlds(eval_worlds, encoder)?;
    let bank_rows: Vec<&[f64]> = train_worlds
        .iter()
        .flat_map(|w| w.questions.iter().map(|q| q.q.as_slice()))
        .collect();
    let bank = if bank_rows.is_empty() {
        Tensor::zeros(0, qdim)
    } else {
        Tensor::from_rows(&bank_rows)?
    };

    let variant = cfg.variant;
    let env = variant.env_config(&cfg.env);
    let adapt = variant.adapts_context();
    let pcfg = &cfg.policy;
    let mut agent = Agent::init(variant, k, qdim, pcfg, cfg.seed)?;
    let mut dqn_replay = PrioritizedReplay::new(pcfg.dqn_capacity, pcfg.replay.clone())?;
    let mut drrn_replay = PrioritizedReplay::new(pcfg.drrn_capacity, pcfg.replay.clone())?;
    let mut world_rng = rng::substream(cfg.seed, "worlds");
    let mut explore_rng = rng::substream(cfg.seed, "exploration");
    let mut replay_rng = rng::substream(cfg.seed, "replay");
    let softmax = Some(pcfg.softmax_temperature);

    let mut stats = TrainStats::default();
    let mut curve = Vec::with_capacity(cfg.episodes / cfg.eval_every);
    for episode in 0..cfg.episodes {
        let epsilon = pcfg.epsilon(episode);
        let beta = pcfg.replay.beta(episode as f64 / cfg.episodes as f64);
        let wi = world_rng.gen_range(0..train_games.len());
        let game = &train_games[wi];
        let mut ep = Episode::reset(game, encoder, &env, adapt)?;
        while !ep.is_done() {
            let s = ep.feature_vector();
            let action = agent.master(&ep, epsilon, &mut explore_rng)?;
            let (out, index): (StepOutcome, usize) = match action {
                MasterAction::Ask => {
                    let remaining = ep.state().remaining_questions();
                    let q = agent.question(&ep, &remaining, softmax, &mut explore_rng)?;
                    let vc = ep.state().vc.clone();
                    let out = ep.step_question(q)?;
                    if variant.learns_questions() {
                        drrn_replay.push(QTransition {
                            vc,
                            question: bank_id(pool, wi, q),
                            next_vc: ep.state().vc.clone(),
                            reward: out.reward,
                            next_pool: ep
                                .state()
                                .remaining_questions()
                                .into_iter()
                                .map(|j| bank_id(pool, wi, j))
                                .collect(),
                            terminal: out.terminal,
                        });
                    }
                    (out, q)
                }
                MasterAction::Guess => {
                    let img = guess_target(&ep)?;
                    (ep.step_guess(img)?, img)
                }
            };
            if variant.learns_master() {
                dqn_replay.push(Transition {
                    s,
                    action,
                    next_s: ep.feature_vector(),
                    reward: out.reward,
                    terminal: out.terminal,
                    next_ask_allowed: !ep.state().remaining_questions().is_empty(),
                });
            }
            if let Some(log) = episode_log.as_deref_mut() {
                let line = StepLog {
                    episode: episode as u64,
                    turn: ep.state().turn,
                    action_type: match action {
                        MasterAction::Ask => ActionType::Question,
                        MasterAction::Guess => ActionType::Guess,
                    },
                    action_index: index,
                    reward_parts: out.parts,
                    affinity: out.affinity,
                    terminal: out.terminal,
                    won: out.won,
                };
                serde_json::to_writer(&mut *log, &line)
                    .map_err(|e| Error::format("episode log", e.to_string()))?;
                log.write_all(b"\n").map_err(|e| Error::io("episode log", e))?;
            }
            stats.steps += 1;
            if stats.steps % pcfg.update_every == 0 {
                if variant.learns_master() && dqn_replay.len() >= pcfg.batch_size {
                    let u = replay_dqn_update(
                        &mut agent.dqn,
                        &mut dqn_replay,
                        &pcfg.optimizer,
                        pcfg.batch_size,
                        beta,
                        env.gamma,
                        &mut replay_rng,
                    )
                    .map_err(|e| diagnose(e, "master", episode))?;
                    stats.dqn_updates += 1;
                    stats.dropped_items += u.dropped;
                    stats.last_dqn_loss = Some(u.loss);
                    if stats.dqn_updates % pcfg.target_sync_every == 0 {
                        agent.dqn.sync_target();
                        stats.target_syncs += 1;
                    }
                }
                if variant.learns_questions() && drrn_replay.len() >= pcfg.batch_size {
                    let u = replay_drrn_update(
                        &mut agent.drrn,
                        &mut drrn_replay,
                        &pcfg.optimizer,
                        &bank,
                        pcfg.batch_size,
                        beta,
                        env.gamma,
                        &mut replay_rng,
                    )
                    .map_err(|e| diagnose(e, "question selector", episode))?;
                    stats.drrn_updates += 1;
                    stats.dropped_items += u.dropped;
                    stats.last_drrn_loss = Some(u.loss);
                }
            }
        }
        if ep.won() {
            stats.train_wins += 1;
        }
        if (episode + 1) % cfg.eval_every == 0 {
            let report = evaluate(&agent, encoder, &eval_games, &env, cfg.eval_games, cfg.seed, episode + 1)?;
            log::info!(
                "{variant} episode {}: win rate {:.3}, avg turns {:.2}, epsilon {epsilon:.3}",
                episode + 1,
                report.win_rate,
                report.avg_turns
            );
            curve.push(report);
        }
    }
    let n_final = if cfg.final_eval_games == 0 {
        eval_games.len()
    } else {
        cfg.final_eval_games
    };
    let final_report = evaluate(
        &agent,
        encoder,
        &eval_games,
        &env,
        n_final,
        final_eval_seed(cfg.seed),
        cfg.episodes,
    )?;
    Ok(TrainOutcome {
        agent,
        curve,
        final_report,
        stats,
    })
}

/// Seed of the closing evaluation of a run with seed `seed`.
pub fn final_eval_seed(seed: u64) -> u64 {
    rng::mix_seed(seed, 0x66696e616c)
}

fn diagnose(e: Error, net: &str, episode: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{net} update in episode {episode}: {msg}")),
        other => other,
    }
}

/// Asks the first `n_rounds` questions in world order, then guesses once.
pub fn oracle_baseline(
    worlds: &[GameWorld],
    encoder: &EncoderParams,
    n_rounds: usize,
    env: &EnvConfig,
) -> Result<EvalReport> {
    if worlds.is_empty() {
        return Err(Error::config("oracle evaluation needs at least one world"));
    }
    let env = EnvConfig {
        max_turns: n_rounds + 1,
        max_guesses: 1,
        shaping_enabled: false,
        ..env.clone()
    };
    let mut records = Vec::with_capacity(worlds.len());
    for (i, w) in worlds.iter().enumerate() {
        if n_rounds > w.pool_size() {
            return Err(Error::config(format!(
                "oracle rounds {n_rounds} exceed the pool size {} of world {}",
                w.pool_size(),
                w.world_id
            )));
        }
        let game = EncodedWorld::new(w, encoder)?;
        let mut ep = Episode::reset(&game, encoder, &env, false)?;
        let mut total = 0.0;
        for q in 0..n_rounds {
            total += ep.step_question(q)?.reward;
        }
        let img = guess_target(&ep)?;
        total += ep.step_guess(img)?.reward;
        records.push(GameRecord {
            game_idx: i,
            world_id: w.world_id,
            won: ep.won(),
            turns: ep.state().turn,
            total_reward: total,
        });
    }
    EvalReport::from_games(0, &format!("oracle@{n_rounds}"), records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    WinRate,
    AvgTurns,
}

impl Statistic {
    pub fn values(self, games: &[GameRecord]) -> Vec<f64> {
        games
            .iter()
            .map(|g| match self {
                Statistic::WinRate => g.won as u8 as f64,
                Statistic::AvgTurns => g.turns as f64,
            })
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-sided resampling test on the difference of means. Both samples are
/// resampled with replacement; the p-value is twice the fraction of resamples
/// whose difference has the opposite sign to the observed one (zero counts
/// half), clamped to 1.
pub fn bootstrap_test(a: &[f64], b: &[f64], n_resamples: usize, rng: &mut Rng) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("bootstrap test needs two non-empty samples"));
    }
    if n_resamples == 0 {
        return Err(Error::config("bootstrap test needs at least one resample"));
    }
    let observed = mean(a) - mean(b);
    if observed == 0.0 {
        return Ok(1.0);
    }
    let draw = |v: &[f64], rng: &mut Rng| -> f64 {
        (0..v.len()).map(|_| v[rng.gen_range(0..v.len())]).sum::<f64>() / v.len() as f64
    };
    let mut flips = 0.0;
    for _ in 0..n_resamples {
        let d = draw(a, rng) - draw(b, rng);
        if d == 0.0 {
            flips += 0.5;
        } else if d.signum() != observed.signum() {
            flips += 1.0;
        }
    }
    Ok((2.0 * flips / n_resamples as f64).min(1.0))
}

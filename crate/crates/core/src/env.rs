//! The guessing-game simulator.
//!
//! An episode ends on a correct guess, on the last allowed wrong guess, or
//! when the turn budget runs out. Questions and guesses both consume a turn.
//! The reward of every step is `r_g + r_q + r_i`: the game outcome, the
//! shaped affinity gain of a question, and the wrong-guess penalty.

use serde::{Deserialize, Serialize};

use crate::embed::EncoderParams;
use crate::error::{Error, Result};
use crate::numcore::tensor::{dot_slices, sigmoid_scalar};
use crate::state::{DialogState, EncodedWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub max_turns: usize,
    pub max_guesses: usize,
    pub r_win: f64,
    pub r_loss: f64,
    pub r_wrong_guess: f64,
    pub shaping_enabled: bool,
    pub gamma: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            max_turns: 10,
            max_guesses: 3,
            r_win: 10.0,
            r_loss: -10.0,
            r_wrong_guess: -3.0,
            shaping_enabled: false,
            gamma: 0.99,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_turns < 1 || self.max_guesses < 1 {
            return Err(Error::config("env: max_turns and max_guesses must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("env: gamma must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub r_g: f64,
    pub r_q: f64,
    pub r_i: f64,
}

impl RewardParts {
    pub fn total(&self) -> f64 {
        self.r_g + self.r_q + self.r_i
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    CorrectGuess,
    GuessesExhausted,
    TurnsExhausted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub parts: RewardParts,
    pub terminal: bool,
    pub won: bool,
    pub end: Option<EndReason>,
    pub revealed_answer: Option<Vec<f64>>,
    pub guess_correct: Option<bool>,
    /// Target affinity after the step.
    pub affinity: f64,
}

/// `sigmoid(vb . target)`
pub fn affinity(vb: &[f64], target: &[f64]) -> f64 {
    sigmoid_scalar(dot_slices(vb, target))
}

/// One running game.
#[derive(Clone, Debug)]
pub struct Episode<'a> {
    game: &'a EncodedWorld<'a>,
    encoder: &'a EncoderParams,
    cfg: &'a EnvConfig,
    adapt: bool,
    state: DialogState,
    initial_affinity: f64,
    affinity: f64,
    end: Option<EndReason>,
}

impl<'a> Episode<'a> {
    /// Starts a game. With `adapt` the vision context follows the belief and
    /// wrong guesses; without it the context stays at the image mean.
    pub fn reset(
        game: &'a EncodedWorld<'a>,
        encoder: &'a EncoderParams,
        cfg: &'a EnvConfig,
        adapt: bool,
    ) -> Result<Self> {
        let mut state = DialogState::init(game, encoder)?;
        if adapt {
            state.adapt_context(&game.images)?;
        }
        let a0 = affinity(&state.vb, game.target());
        Ok(Episode {
            game,
            encoder,
            cfg,
            adapt,
            state,
            initial_affinity: a0,
            affinity: a0,
            end: None,
        })
    }

    pub fn state(&self) -> &DialogState {
        &self.state
    }

    pub fn game(&self) -> &EncodedWorld<'a> {
        self.game
    }

    pub fn config(&self) -> &EnvConfig {
        self.cfg
    }

    pub fn initial_affinity(&self) -> f64 {
        self.initial_affinity
    }

    pub fn affinity(&self) -> f64 {
        self.affinity
    }

    pub fn is_done(&self) -> bool {
        self.end.is_some()
    }

    pub fn end_reason(&self) -> Option<EndReason> {
        self.end
    }

    pub fn won(&self) -> bool {
        self.end == Some(EndReason::CorrectGuess)
    }

    pub fn feature_vector(&self) -> Vec<f64> {
        self.state
            .to_feature_vector(self.cfg.max_turns, self.cfg.max_guesses)
    }

    fn ensure_live(&self) -> Result<()> {
        if self.end.is_some() {
            return Err(Error::InvalidAction("episode already finished".into()));
        }
        Ok(())
    }

    fn finish(&mut self, parts: RewardParts, end: Option<EndReason>) -> StepOutcome {
        self.end = end;
        StepOutcome {
            reward: parts.total(),
            parts,
            terminal: end.is_some(),
            won: end == Some(EndReason::CorrectGuess),
            end,
            revealed_answer: None,
            guess_correct: None,
            affinity: self.affinity,
        }
    }

    pub fn step_question(&mut self, q_idx: usize) -> Result<StepOutcome> {
        self.ensure_live()?;
        let pool = self.game.world.pool_size();
        if q_idx >= pool {
            return Err(Error::InvalidAction(format!(
                "question {q_idx} outside pool of {pool}"
            )));
        }
        if self.state.asked[q_idx] {
            return Err(Error::InvalidAction(format!("question {q_idx} already asked")));
        }
        self.state.record_question(q_idx);
        self.state.update_belief(self.game, self.encoder)?;
        if self.adapt {
            self.state.adapt_context(&self.game.images)?;
        }
        let prev = self.affinity;
        self.affinity = affinity(&self.state.vb, self.game.target());

        let mut parts = RewardParts::default();
        if self.cfg.shaping_enabled {
            parts.r_q = self.affinity - prev;
        }
        let mut end = None;
        if self.state.turn >= self.cfg.max_turns {
            parts.r_g = self.cfg.r_loss;
            end = Some(EndReason::TurnsExhausted);
        }
        let mut out = self.finish(parts, end);
        out.revealed_answer = Some(self.game.world.questions[q_idx].a.clone());
        Ok(out)
    }

    pub fn step_guess(&mut self, img_idx: usize) -> Result<StepOutcome> {
        self.ensure_live()?;
        let n = self.game.n_images();
        if img_idx >= n {
            return Err(Error::InvalidAction(format!(
                "image {img_idx} outside set of {n}"
            )));
        }
        if self.state.excluded[img_idx] {
            return Err(Error::InvalidAction(format!(
                "image {img_idx} was already ruled out"
            )));
        }
        let correct = img_idx == self.game.world.target_idx;
        self.state.record_guess(img_idx, correct);

        let mut parts = RewardParts::default();
        let end = if correct {
            parts.r_g = self.cfg.r_win;
            Some(EndReason::CorrectGuess)
        } else {
            parts.r_i = self.cfg.r_wrong_guess;
            if self.adapt {
                self.state.adapt_context(&self.game.images)?;
            }
            if self.state.n_guesses_made >= self.cfg.max_guesses {
                parts.r_g = self.cfg.r_loss;
                Some(EndReason::GuessesExhausted)
            } else if self.state.turn >= self.cfg.max_turns {
                parts.r_g = self.cfg.r_loss;
                Some(EndReason::TurnsExhausted)
            } else {
                None
            }
        };
        let mut out = self.finish(parts, end);
        out.guess_correct = Some(correct);
        Ok(out)
    }
}

/// One line of the per-step episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub episode: u64,
    pub turn: usize,
    pub action_type: ActionType,
    pub action_index: usize,
    pub reward_parts: RewardParts,
    pub affinity: f64,
    pub terminal: bool,
    pub won: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Question,
    Guess,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{EncoderDims, IMG_B, IMG_W};
    use crate::numcore::Tensor;
    use crate::rng;
    use crate::worldgen::{generate_world, GameWorld, WorldConfig};

    fn encoder(k: usize) -> EncoderParams {
        let mut p = EncoderParams::init(EncoderDims::for_embedding(k), &mut rng::substream(2, "env")).unwrap();
        *p.params.get_mut(IMG_W).unwrap() = Tensor::identity(k);
        *p.params.get_mut(IMG_B).unwrap() = Tensor::zeros(1, k);
        p
    }

    fn world() -> GameWorld {
        generate_world(&WorldConfig::default(), 42).unwrap()
    }

    fn wrong_images(w: &GameWorld) -> Vec<usize> {
        (0..w.n_images()).filter(|&i| i != w.target_idx).collect()
    }

    #[test]
    fn affinity_examples() {
        assert_eq!(affinity(&[1.0, 0.0], &[0.0, 1.0]), 0.5);
        assert!((affinity(&[0.6, 0.8], &[0.6, 0.8]) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(affinity(&[0.5, 0.0], &[1.0, 0.0]) < affinity(&[0.6, 0.0], &[1.0, 0.0]));
    }

    #[test]
    fn reset_starts_at_turn_zero_with_cached_affinity() {
        let w = world();
        let enc = encoder(64);
        let cfg = EnvConfig::default();
        let game = EncodedWorld::new(&w, &enc).unwrap();
        let ep = Episode::reset(&game, &enc, &cfg, true).unwrap();
        assert_eq!(ep.state().turn, 0);
        assert_eq!(ep.initial_affinity(), affinity(&ep.state().vb, game.target()));
        let again = Episode::reset(&game, &enc, &cfg, true).unwrap();
        assert_eq!(ep.initial_affinity(), again.initial_affinity());
    }

    #[test]
    fn correct_first_guess_wins() {
        let w = world();
        let enc = encoder(64);
        let cfg = EnvConfig::default();
        let game = EncodedWorld::new(&w, &enc).unwrap();
        let mut ep = Episode::reset(&game, &enc, &cfg, true).unwrap();
        let out = ep.step_guess(w.target_idx).unwrap();
        assert_eq!(out.reward, 10.0);
        assert!(out.terminal && out.won);
        assert!(ep.step_question(0).is_err());
    }

    #[test]
    fn wrong_guesses_penalize_then_lose() {
        let w = world();
        let enc = encoder(64);
        let cfg = EnvConfig::default();
        let game = EncodedWorld::new(&w, &enc).unwrap();
        let mut ep = Episode::reset(&game, &enc, &cfg, true).unwrap();
        let wrong = wrong_images(&w);
        let o1 = ep.step_guess(wrong[0]).unwrap();
        assert_eq!(o1.reward, -3.0);
        assert!(!o1.terminal);
        assert!(ep.state().excluded[wrong[0]]);
        assert_eq!(ep.state().context_weights[wrong[0]], 0.0);
        assert!(ep.step_guess(wrong[0]).is_err());
        let o2 = ep.step_guess(wrong[1]).unwrap();
        assert_eq!(o2.reward, -3.0);
        let o3 = ep.step_guess(wrong[2]).unwrap();
        assert_eq!(o3.reward, -13.0);
        assert!(o3.terminal && !o3.won);
        assert_eq!(o3.end, Some(EndReason::GuessesExhausted));
    }

    #[test]
    fn question_turns_time_out_with_loss() {
        let w = world();
        let enc = encoder(64);
        let cfg = EnvConfig {
            max_turns: 3,
            ..Default::default()
        };
        let game = EncodedWorld::new(&w, &enc).unwrap();
        let mut ep = Episode::reset(&game, &enc, &cfg, true).unwrap();
        assert_eq!(ep.step_question(0).unwrap().reward, 0.0);
        assert!(ep.step_question(0).is_err());
        assert_eq!(ep.step_question(1).unwrap().reward, 0.0);
        let last = ep.step_question(2).unwrap();
        assert!(last.terminal);
        assert_eq!(last.reward, -10.0);
        assert_eq!(last.end, Some(EndReason::TurnsExhausted));
    }

    #[test]
    fn guess_on_last_turn_times_out() {
        let w = world();
        let enc = encoder(64);
        let cfg = EnvConfig {
            max_turns: 2,
            ..Default::default()
        };
        let game = EncodedWorld::new(&w, &enc).unwrap();
        let mut ep = Episode::reset(&game, &enc, &cfg, false).unwrap();
        ep.step_question(4).unwrap();
        let out = ep.step_guess(wrong_images(&w)[0]).unwrap();
        assert_eq!(out.parts, RewardParts { r_g: -10.0, r_q: 0.0, r_i: -3.0 });
        assert_eq!(out.end, Some(EndReason::TurnsExhausted));
    }

    #[test]
    fn shaping_telescopes() {
        let w = world();
        let enc = encoder(64);
        let cfg = EnvConfig {
            shaping_enabled: true,
            ..Default::default()
        };
        let game = EncodedWorld::new(&w, &enc).unwrap();
        let mut ep = Episode::reset(&game, &enc, &cfg, true).unwrap();
        let mut sum = 0.0;
        for q in 0..5 {
            let out = ep.step_question(q).unwrap();
            assert_eq!(out.reward, out.parts.total());
            sum += out.parts.r_q;
        }
        assert!((sum - (ep.affinity() - ep.initial_affinity())).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_actions_are_rejected() {
        let w = world();
        let enc = encoder(64);
        let cfg = EnvConfig::default();
        let game = EncodedWorld::new(&w, &enc).unwrap();
        let mut ep = Episode::reset(&game, &enc, &cfg, true).unwrap();
        assert!(ep.step_question(99).is_err());
        assert!(ep.step_guess(99).is_err());
    }
}

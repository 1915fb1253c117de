//! Dialog state tracking: META counters, the vision belief (VB), the vision
//! context (VC) and the wrong-guess exclusion mask.

use serde::{Deserialize, Serialize};

use crate::embed::EncoderParams;
use crate::error::{Error, Result};
use crate::numcore::tensor::{dot_slices, sigmoid_scalar, Tensor};
use crate::worldgen::GameWorld;

/// Number of META features in [`DialogState::to_feature_vector`].
pub const META_DIM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LastAction {
    None,
    Question,
    Guess,
}

/// A world together with its frozen image embeddings.
#[derive(Clone, Debug)]
pub struct EncodedWorld<'w> {
    pub world: &'w GameWorld,
    /// Row `i` embeds `world.images[i]`.
    pub images: Tensor,
}

impl<'w> EncodedWorld<'w> {
    pub fn new(world: &'w GameWorld, encoder: &EncoderParams) -> Result<Self> {
        Ok(EncodedWorld {
            world,
            images: encoder.encode_images(&world.images)?,
        })
    }

    pub fn n_images(&self) -> usize {
        self.images.rows()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn target(&self) -> &[f64] {
        self.images.row(self.world.target_idx)
    }

    pub fn mean_image(&self) -> Vec<f64> {
        let n = self.n_images();
        let mut out = vec![0.0; self.images.cols()];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(self.image(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialogState {
    pub n_questions_asked: usize,
    pub n_guesses_made: usize,
    pub last_action: LastAction,
    /// Vision belief, a unit vector.
    pub vb: Vec<f64>,
    /// Vision context.
    pub vc: Vec<f64>,
    /// Convex weights with `vc = sum_i weights[i] * image_i`.
    pub context_weights: Vec<f64>,
    pub excluded: Vec<bool>,
    pub asked: Vec<bool>,
    /// Asked question indices in ask order.
    pub history: Vec<usize>,
    pub turn: usize,
}

impl DialogState {
    /// Belief from the caption alone, context at the unweighted image mean.
    pub fn init(game: &EncodedWorld<'_>, encoder: &EncoderParams) -> Result<Self> {
        let (vb, _) = encoder.encode_history(&game.world.caption, &[])?;
        let n = game.n_images();
        Ok(DialogState {
            n_questions_asked: 0,
            n_guesses_made: 0,
            last_action: LastAction::None,
            vb,
            vc: game.mean_image(),
            context_weights: vec![1.0 / n as f64; n],
            excluded: vec![false; n],
            asked: vec![false; game.world.pool_size()],
            history: Vec::new(),
            turn: 0,
        })
    }

    /// Re-encodes the belief from the caption and every answer received so far.
    pub fn update_belief(&mut self, game: &EncodedWorld<'_>, encoder: &EncoderParams) -> Result<()> {
        let answers: Vec<&[f64]> = self
            .history
            .iter()
            .map(|&j| game.world.questions[j].a.as_slice())
            .collect();
        let (vb, _) = encoder.encode_history(&game.world.caption, &answers)?;
        self.vb = vb;
        Ok(())
    }

    /// Sigmoid affinity of the belief to every image; zero for excluded images.
    pub fn attention_scores(&self, images: &Tensor) -> Vec<f64> {
        (0..images.rows())
            .map(|i| {
                if self.excluded[i] {
                    0.0
                } else {
                    sigmoid_scalar(dot_slices(&self.vb, images.row(i)))
                }
            })
            .collect()
    }

    /// State adaptation: re-weights the context by the belief's affinity to
    /// each image, with wrongly guessed images weighted zero.
    pub fn adapt_context(&mut self, images: &Tensor) -> Result<()> {
        let alpha = self.attention_scores(images);
        let total: f64 = alpha.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidAction(
                "every image is excluded; the context is undefined".into(),
            ));
        }
        let mut vc = vec![0.0; images.cols()];
        let mut weights = Vec::with_capacity(alpha.len());
        for (i, a) in alpha.iter().enumerate() {
            let w = a / total;
            for (o, v) in vc.iter_mut().zip(images.row(i)) {
                *o += w * v;
            }
            weights.push(w);
        }
        self.vc = vc;
        self.context_weights = weights;
        Ok(())
    }

    pub fn record_question(&mut self, q_idx: usize) {
        self.asked[q_idx] = true;
        self.history.push(q_idx);
        self.n_questions_asked += 1;
        self.last_action = LastAction::Question;
        self.turn += 1;
    }

    pub fn record_guess(&mut self, img_idx: usize, correct: bool) {
        if !correct {
            self.excluded[img_idx] = true;
        }
        self.n_guesses_made += 1;
        self.last_action = LastAction::Guess;
        self.turn += 1;
    }

    /// Indices of questions not yet asked.
    pub fn remaining_questions(&self) -> Vec<usize> {
        (0..self.asked.len()).filter(|&j| !self.asked[j]).collect()
    }

    /// `[META | VB | VC]` with META = `[questions/max_turns,
    /// guesses/max_guesses, one-hot(last action: none, question, guess)]`.
    pub fn to_feature_vector(&self, max_turns: usize, max_guesses: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(META_DIM + self.vb.len() + self.vc.len());
        out.push(self.n_questions_asked as f64 / max_turns as f64);
        out.push(self.n_guesses_made as f64 / max_guesses as f64);
        out.extend_from_slice(match self.last_action {
            LastAction::None => &[1.0, 0.0, 0.0],
            LastAction::Question => &[0.0, 1.0, 0.0],
            LastAction::Guess => &[0.0, 0.0, 1.0],
        });
        out.extend_from_slice(&self.vb);
        out.extend_from_slice(&self.vc);
        out
    }
}

/// Index of the non-excluded image closest in cosine to `vb`; ties go to the
/// lowest index.
pub fn retrieve_image(vb: &[f64], images: &Tensor, excluded: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..images.rows() {
        if excluded[i] {
            continue;
        }
        let row = images.row(i);
        let c = dot_slices(vb, row) / dot_slices(row, row).sqrt();
        if best.map_or(true, |(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i)
}

//! Joint text/image embedding.
//!
//! The text side attends over the dialog history conditioned on the caption,
//! concatenates the attended history with the caption and maps the result
//! through an MLP followed by l2 normalization. The image side is an MLP with
//! l2 normalization. Both are pretrained with a pairwise hinge loss on cosine
//! similarities so that the text embedding ranks the target image first.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tensor::{self as k, Tensor};
use crate::numcore::{ParamSet, RmsProp, Tape, Var};
use crate::rng;
use crate::worldgen::GameWorld;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderDims {
    /// Joint embedding size `k`.
    pub embed_dim: usize,
    /// Size `d` of caption and history vectors.
    pub history_dim: usize,
    /// Attention hidden size `a`.
    pub attention_dim: usize,
    /// Hidden tanh layers of the text MLP (empty for a single linear map).
    pub text_hidden: Vec<usize>,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            embed_dim: 64,
            history_dim: 64,
            attention_dim: 64,
            text_hidden: Vec::new(),
        }
    }
}

impl EncoderDims {
    pub fn for_embedding(k: usize) -> Self {
        EncoderDims {
            embed_dim: k,
            history_dim: k,
            attention_dim: k,
            text_hidden: Vec::new(),
        }
    }
}

/// Intermediate attention quantities for one encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// Unnormalized scores, one per history item.
    pub z: Vec<f64>,
    /// Softmax of `z`.
    pub alpha: Vec<f64>,
    /// `sum_j alpha_j * h_j`; the zero vector when the history is empty.
    pub attended: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub params: ParamSet,
}

pub const W_H: &str = "att.w_h";
pub const W_C: &str = "att.w_c";
pub const W_A: &str = "att.w_a";
pub const IMG_W: &str = "img.w";
pub const IMG_B: &str = "img.b";

fn text_w(i: usize) -> String {
    format!("text.w{i}")
}

fn text_b(i: usize) -> String {
    format!("text.b{i}")
}

/// Tape handles for one batch of text encodings.
struct TextEncoding {
    out: Var,
    traces: Vec<Option<(Var, Var, Var)>>,
}

impl EncoderParams {
    pub fn init(dims: EncoderDims, rng: &mut rng::Rng) -> Result<Self> {
        let (d, a, kk) = (dims.history_dim, dims.attention_dim, dims.embed_dim);
        if d == 0 || a == 0 || kk == 0 {
            return Err(Error::config("encoder dims must be >= 1"));
        }
        let mut params = ParamSet::new();
        params.insert(W_H, Tensor::glorot(d, a, rng))?;
        params.insert(W_C, Tensor::glorot(d, a, rng))?;
        params.insert(W_A, Tensor::glorot(a, 1, rng))?;
        let mut fan_in = 2 * d;
        for (i, &h) in dims.text_hidden.iter().chain(std::iter::once(&kk)).enumerate() {
            params.insert(text_w(i), Tensor::glorot(fan_in, h, rng))?;
            params.insert(text_b(i), Tensor::zeros(1, h))?;
            fan_in = h;
        }
        params.insert(IMG_W, Tensor::glorot(kk, kk, rng))?;
        params.insert(IMG_B, Tensor::zeros(1, kk))?;
        Ok(EncoderParams { dims, params })
    }

    /// Rebuilds the parameter set from stored tensors, checking names and shapes.
    pub fn from_params(dims: EncoderDims, params: ParamSet) -> Result<Self> {
        let mut rng = rng::substream(0, "shape-template");
        let template = EncoderParams::init(dims.clone(), &mut rng)?;
        if template.params.len() != params.len() {
            return Err(Error::format(
                "encoder checkpoint",
                format!("expected {} tensors, found {}", template.params.len(), params.len()),
            ));
        }
        for (name, t) in template.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::format(
                        "encoder checkpoint",
                        format!("tensor `{name}` has shape {:?}, expected {:?}", p.shape(), t.shape()),
                    ))
                }
                None => {
                    return Err(Error::format(
                        "encoder checkpoint",
                        format!("missing tensor `{name}`"),
                    ))
                }
            }
        }
        Ok(EncoderParams { dims, params })
    }

    fn n_text_layers(&self) -> usize {
        self.dims.text_hidden.len() + 1
    }

    /// Text encodings for a batch of histories sharing one caption.
    /// `caption` is `1 x d`; each history is `t x d` or `None` for `t = 0`.
    fn text_on_tape(
        &self,
        tape: &mut Tape,
        caption: Var,
        histories: &[Option<Var>],
    ) -> Result<TextEncoding> {
        let d = self.dims.history_dim;
        if tape.value(caption).shape() != (1, d) {
            return Err(Error::Shape {
                op: "encode_history caption",
                lhs: tape.value(caption).shape(),
                rhs: (1, d),
            });
        }
        let w_h = self.params.bind(tape, W_H);
        let w_c = self.params.bind(tape, W_C);
        let w_a = self.params.bind(tape, W_A);
        let cap_proj = tape.matmul(caption, w_c)?;

        let mut attended_rows = Vec::with_capacity(histories.len());
        let mut traces = Vec::with_capacity(histories.len());
        for h in histories {
            match h {
                None => {
                    attended_rows.push(tape.constant(Tensor::zeros(1, d)));
                    traces.push(None);
                }
                Some(h) => {
                    let hp = tape.matmul(*h, w_h)?;
                    let pre = tape.add_row(hp, cap_proj)?;
                    let act = tape.tanh(pre);
                    let z_col = tape.matmul(act, w_a)?;
                    let z = tape.transpose(z_col);
                    let alpha = tape.softmax(z);
                    let attended = tape.matmul(alpha, *h)?;
                    attended_rows.push(attended);
                    traces.push(Some((z, alpha, attended)));
                }
            }
        }
        let n = histories.len();
        let attended = vstack(tape, &attended_rows)?;
        let caption_rows = if n == 1 {
            caption
        } else {
            let ones = tape.constant(Tensor::filled(n, 1, 1.0));
            tape.matmul(ones, caption)?
        };
        let mut x = tape.concat(attended, caption_rows)?;
        let layers = self.n_text_layers();
        for i in 0..layers {
            let w = self.params.bind(tape, &text_w(i));
            let b = self.params.bind(tape, &text_b(i));
            let xw = tape.matmul(x, w)?;
            x = tape.add_row(xw, b)?;
            if i + 1 < layers {
                x = tape.tanh(x);
            }
        }
        let out = tape.l2_normalize(x, "text embedding")?;
        Ok(TextEncoding { out, traces })
    }

    fn images_on_tape(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let w = self.params.bind(tape, IMG_W);
        let b = self.params.bind(tape, IMG_B);
        let xw = tape.matmul(images, w)?;
        let x = tape.add_row(xw, b)?;
        tape.l2_normalize(x, "image embedding")
    }

    /// Encodes the caption and an ordered dialog history into a unit vector.
    pub fn encode_history(&self, caption: &[f64], history: &[&[f64]]) -> Result<(Vec<f64>, AttentionTrace)> {
        let d = self.dims.history_dim;
        if caption.len() != d {
            return Err(Error::Shape {
                op: "encode_history caption",
                lhs: (1, caption.len()),
                rhs: (1, d),
            });
        }
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(caption.to_vec()));
        let h = if history.is_empty() {
            None
        } else {
            Some(tape.constant(Tensor::from_rows(history)?))
        };
        let enc = self.text_on_tape(&mut tape, c, &[h])?;
        let t = tape.value(enc.out).data().to_vec();
        let trace = match enc.traces[0] {
            None => AttentionTrace {
                z: Vec::new(),
                alpha: Vec::new(),
                attended: vec![0.0; d],
            },
            Some((z, alpha, attended)) => AttentionTrace {
                z: tape.value(z).data().to_vec(),
                alpha: tape.value(alpha).data().to_vec(),
                attended: tape.value(attended).data().to_vec(),
            },
        };
        Ok((t, trace))
    }

    pub fn encode_image(&self, image: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_images(&[image])?.row(0).to_vec())
    }

    /// Encodes every image; row `i` of the result embeds `images[i]`.
    pub fn encode_images<R: AsRef<[f64]>>(&self, images: &[R]) -> Result<Tensor> {
        let m = Tensor::from_rows(images)?;
        let mut tape = Tape::new();
        let x = tape.constant(m);
        let out = self.images_on_tape(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// Mean ranking loss of one world over the history prefixes in `prefixes`,
    /// recorded on `tape`.
    pub fn world_loss_on_tape(
        &self,
        tape: &mut Tape,
        world: &GameWorld,
        prefixes: &[usize],
        margin: f64,
    ) -> Result<Var> {
        let n_img = world.n_images();
        let images = tape.constant(Tensor::from_rows(&world.images)?);
        let img_emb = self.images_on_tape(tape, images)?;
        let caption = tape.constant(Tensor::vector(world.caption.clone()));
        let histories: Vec<Option<Var>> = prefixes
            .iter()
            .map(|&t| {
                if t == 0 {
                    Ok(None)
                } else {
                    let rows: Vec<&[f64]> = world.questions[..t].iter().map(|q| q.a.as_slice()).collect();
                    Ok(Some(tape.constant(Tensor::from_rows(&rows)?)))
                }
            })
            .collect::<Result<_>>()?;
        let enc = self.text_on_tape(tape, caption, &histories)?;
        let n = prefixes.len();

        // both sides are unit rows, so dot products are cosines
        let img_t = tape.transpose(img_emb);
        let sims = tape.matmul(enc.out, img_t)?;
        let pos = tape.pick_cols(sims, &vec![world.target_idx; n])?;
        let ones = tape.constant(Tensor::filled(1, n_img, 1.0));
        let pos_b = tape.matmul(pos, ones)?;
        let diff = tape.sub(sims, pos_b)?;
        let shifted = tape.add_scalar(diff, margin);
        let hinge = tape.relu(shifted);
        let mut mask = Tensor::filled(n, n_img, 1.0);
        for r in 0..n {
            mask.data_mut()[r * n_img + world.target_idx] = 0.0;
        }
        let mask = tape.constant(mask);
        let masked = tape.mul(hinge, mask)?;
        let total = tape.sum(masked);
        Ok(tape.scale(total, 1.0 / (n * (n_img - 1)) as f64))
    }

    /// Mean loss over all worlds and all prefix lengths `0..=pool_size`.
    pub fn dataset_loss(&self, worlds: &[GameWorld], margin: f64) -> Result<f64> {
        let mut total = 0.0;
        for w in worlds {
            let prefixes: Vec<usize> = (0..=w.pool_size()).collect();
            let mut tape = Tape::new();
            let l = self.world_loss_on_tape(&mut tape, w, &prefixes, margin)?;
            total += tape.value(l).item();
        }
        Ok(total / worlds.len().max(1) as f64)
    }
}

fn vstack(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    // stack via column concatenation of transposes
    let mut acc = tape.transpose(rows[0]);
    for r in &rows[1..] {
        let rt = tape.transpose(*r);
        acc = tape.concat(acc, rt)?;
    }
    Ok(if rows.len() == 1 { rows[0] } else { tape.transpose(acc) })
}

/// `mean_neg max(0, margin - cos(t, pos) + cos(t, neg))`
pub fn ranking_loss(t: &[f64], pos: &[f64], negs: &[&[f64]], margin: f64) -> Result<f64> {
    if negs.is_empty() {
        return Err(Error::config("ranking_loss needs at least one negative"));
    }
    let cp = k::cosine_slices(t, pos);
    let sum: f64 = negs
        .iter()
        .map(|n| (margin - cp + k::cosine_slices(t, n)).max(0.0))
        .sum();
    Ok(sum / negs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub margin: f64,
    pub batch_worlds: usize,
    pub optimizer: RmsProp,
    /// Present each world under a fresh random signed coordinate permutation
    /// every epoch. World generation is invariant under that group, so this
    /// keeps the encoder from memorizing individual training worlds.
    pub augment: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 60,
            margin: 0.1,
            batch_worlds: 8,
            optimizer: RmsProp::new(1e-3),
            augment: true,
            seed: 0,
        }
    }
}

/// Epochs without a new best loss before pretraining stops.
pub const PATIENCE: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean training loss at the end of each completed epoch, preceded by the
    /// loss before training.
    pub losses: Vec<f64>,
    /// Epoch at which training stopped for lack of improvement. The returned
    /// parameters are always those with the lowest loss seen.
    pub halted_at: Option<usize>,
}

/// Trains the encoder with the pairwise ranking loss. Each world contributes
/// every history prefix length `0..=pool_size`.
pub fn pretrain(worlds: &[GameWorld], params: &mut EncoderParams, cfg: &PretrainConfig) -> Result<PretrainReport> {
    if worlds.is_empty() {
        return Err(Error::config("pretraining needs at least one world"));
    }
    let mut rng = rng::substream(cfg.seed, "pretrain");
    let mut order: Vec<usize> = (0..worlds.len()).collect();
    let mut losses = vec![params.dataset_loss(worlds, cfg.margin)?];
    let mut halted_at = None;
    let mut best = (losses[0], params.clone(), 0usize);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_worlds.max(1)) {
            let mut tape = Tape::new();
            let mut total: Option<Var> = None;
            for &wi in batch {
                let augmented;
                let w = if cfg.augment {
                    augmented = SignedPermutation::random(worlds[wi].embed_dim(), &mut rng).apply_world(&worlds[wi]);
                    &augmented
                } else {
                    &worlds[wi]
                };
                let prefixes: Vec<usize> = (0..=w.pool_size()).collect();
                let l = params.world_loss_on_tape(&mut tape, w, &prefixes, cfg.margin)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("non-empty batch");
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Numeric(format!("pretraining diverged in epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            cfg.optimizer.step(&mut params.params, &grads)?;
        }
        let loss = params.dataset_loss(worlds, cfg.margin)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("pretraining diverged in epoch {epoch}")));
        }
        losses.push(loss);
        log::info!("pretrain epoch {epoch}: loss {loss:.6}");
        if loss < best.0 {
            best = (loss, params.clone(), losses.len() - 1);
        } else if losses.len() - 1 - best.2 >= PATIENCE {
            log::warn!(
                "pretrain: no improvement over the last {PATIENCE} epochs (best {:.6}); halting at epoch {epoch}",
                best.0
            );
            halted_at = Some(epoch);
            break;
        }
    }
    if best.2 + 1 < losses.len() {
        *params = best.1;
    }
    Ok(PretrainReport { losses, halted_at })
}

/// Fraction of worlds whose target ranks within the top `k` images by cosine
/// to the encoding of the caption plus the first `n_history` answers.
pub fn recall_at_k(worlds: &[GameWorld], params: &EncoderParams, n_history: usize, top_k: usize) -> Result<f64> {
    if top_k == 0 {
        return Err(Error::config("recall@k needs k >= 1"));
    }
    if worlds.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for w in worlds {
        let n = n_history.min(w.pool_size());
        let hist: Vec<&[f64]> = w.questions[..n].iter().map(|q| q.a.as_slice()).collect();
        let (t, _) = params.encode_history(&w.caption, &hist)?;
        let emb = params.encode_images(&w.images)?;
        if target_rank(&t, &emb, w.target_idx) < top_k {
            hits += 1;
        }
    }
    Ok(hits as f64 / worlds.len() as f64)
}

/// A coordinate permutation combined with per-coordinate sign flips.
#[derive(Clone, Debug)]
pub struct SignedPermutation {
    perm: Vec<usize>,
    signs: Vec<f64>,
}

impl SignedPermutation {
    pub fn random(dim: usize, rng: &mut rng::Rng) -> Self {
        use rand::Rng;
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        let signs = (0..dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        SignedPermutation { perm, signs }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.perm.iter().zip(&self.signs).map(|(&p, s)| s * v[p]).collect()
    }

    pub fn apply_world(&self, w: &GameWorld) -> GameWorld {
        GameWorld {
            world_id: w.world_id,
            target_idx: w.target_idx,
            images: w.images.iter().map(|v| self.apply(v)).collect(),
            caption: self.apply(&w.caption),
            questions: w
                .questions
                .iter()
                .map(|q| crate::worldgen::Question {
                    q: self.apply(&q.q),
                    a: self.apply(&q.a),
                })
                .collect(),
        }
    }
}

/// Number of images scoring strictly higher than the target.
pub fn target_rank(t: &[f64], images: &Tensor, target_idx: usize) -> usize {
    let target = k::cosine_slices(t, images.row(target_idx));
    (0..images.rows())
        .filter(|&i| i != target_idx && k::cosine_slices(t, images.row(i)) > target)
        .count()
}

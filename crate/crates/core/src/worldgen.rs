//! Synthetic game worlds: a target image, similar distractors, a noisy
//! caption and a pool of questions whose hidden answers describe the target.
//!
//! All vectors live on the unit sphere of the joint embedding space. Noise
//! vectors are drawn from `N(0, I/k)` so their expected norm is about one and
//! the noise scales are comparable across embedding sizes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix_seed;

pub const WORLD_FILE_VERSION: u32 = 1;

/// Game seeds for held-out evaluation pools start here, keeping them
/// disjoint from training pools that count up from zero.
pub const EVAL_SEED_OFFSET: u64 = 1 << 40;

const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub embed_dim: usize,
    pub n_images: usize,
    pub pool_size: usize,
    pub distractor_noise: f64,
    pub caption_noise: f64,
    pub answer_noise: f64,
    pub answer_corrupt_prob: f64,
    /// Range of the fraction of coordinates a question's aspect covers.
    pub aspect_density: [f64; 2],
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            embed_dim: 64,
            n_images: 20,
            pool_size: 10,
            distractor_noise: 0.6,
            caption_noise: 3.0,
            answer_noise: 0.3,
            answer_corrupt_prob: 0.0,
            aspect_density: [0.01, 0.6],
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("world: {m}")));
        if self.embed_dim < 2 {
            return bad("embed_dim must be >= 2");
        }
        if self.n_images < 2 {
            return bad("n_images must be >= 2");
        }
        if self.pool_size < 1 {
            return bad("pool_size must be >= 1");
        }
        for (name, s) in [
            ("distractor_noise", self.distractor_noise),
            ("caption_noise", self.caption_noise),
            ("answer_noise", self.answer_noise),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(&format!("{name} must be a finite value >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.answer_corrupt_prob) {
            return bad("answer_corrupt_prob must lie in [0, 1]");
        }
        let [lo, hi] = self.aspect_density;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad("aspect_density must satisfy 0 < min <= max <= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    /// Public question embedding.
    pub q: Vec<f64>,
    /// Hidden answer embedding, revealed when the question is asked.
    pub a: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameWorld {
    pub world_id: u64,
    pub target_idx: usize,
    pub images: Vec<Vec<f64>>,
    pub caption: Vec<f64>,
    pub questions: Vec<Question>,
}

impl GameWorld {
    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn pool_size(&self) -> usize {
        self.questions.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.caption.len()
    }

    pub fn target(&self) -> &[f64] {
        &self.images[self.target_idx]
    }

    /// Checks the shape and unit-norm invariants against `cfg`.
    pub fn validate(&self, cfg: &WorldConfig) -> std::result::Result<(), String> {
        let k = cfg.embed_dim;
        if self.images.len() != cfg.n_images {
            return Err(format!(
                "expected {} images, found {}",
                cfg.n_images,
                self.images.len()
            ));
        }
        if self.target_idx >= self.images.len() {
            return Err(format!("target_idx {} out of range", self.target_idx));
        }
        if self.questions.len() != cfg.pool_size {
            return Err(format!(
                "expected {} questions, found {}",
                cfg.pool_size,
                self.questions.len()
            ));
        }
        let check = |what: String, v: &[f64]| -> std::result::Result<(), String> {
            if v.len() != k {
                return Err(format!("{what}: expected dim {k}, found {}", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(format!("{what}: non-finite entry"));
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(format!("{what}: norm {n} is not 1"));
            }
            Ok(())
        };
        for (i, img) in self.images.iter().enumerate() {
            check(format!("images[{i}]"), img)?;
        }
        check("caption".into(), &self.caption)?;
        for (j, q) in self.questions.iter().enumerate() {
            check(format!("questions[{j}].q"), &q.q)?;
            check(format!("questions[{j}].a"), &q.a)?;
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, k: usize, scale: f64) -> Vec<f64> {
    (0..k)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// `normalize(base + sigma * eps)` with `eps ~ N(0, I/k)`.
fn perturb(rng: &mut impl Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    let k = base.len();
    let eps = gaussian(rng, k, 1.0 / (k as f64).sqrt());
    let v: Vec<f64> = base.iter().zip(&eps).map(|(b, e)| b + sigma * e).collect();
    let v = normalize(v);
    if v.iter().all(|x| *x == 0.0) {
        // base + noise cancelled exactly; astronomically unlikely but keep unit norm
        return normalize(gaussian(rng, k, 1.0));
    }
    v
}

/// An aspect: a random coordinate subset and the question embedding that
/// names it. Both derive from the question's own seed.
fn aspect(seed: u64, cfg: &WorldConfig) -> (Vec<bool>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.embed_dim;
    let [lo, hi] = cfg.aspect_density;
    let density = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let mut mask: Vec<bool> = (0..k).map(|_| rng.gen_bool(density)).collect();
    if !mask.iter().any(|&m| m) {
        mask[rng.gen_range(0..k)] = true;
    }
    let q = mask
        .iter()
        .map(|&m| if m { 1.0 + 0.5 * rng.gen::<f64>() } else { 0.0 })
        .collect();
    (mask, normalize(q))
}

/// Generates one world; deterministic in `(cfg, game_seed)`.
pub fn generate_world(cfg: &WorldConfig, game_seed: u64) -> Result<GameWorld> {
    cfg.validate()?;
    let k = cfg.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, game_seed));

    let target = normalize(gaussian(&mut rng, k, 1.0));
    let target_idx = rng.gen_range(0..cfg.n_images);
    let images: Vec<Vec<f64>> = (0..cfg.n_images)
        .map(|i| {
            if i == target_idx {
                target.clone()
            } else {
                perturb(&mut rng, &target, cfg.distractor_noise)
            }
        })
        .collect();
    let caption = perturb(&mut rng, &target, cfg.caption_noise);

    let questions = (0..cfg.pool_size)
        .map(|_| {
            let (mask, q) = aspect(rng.next_u64(), cfg);
            let source = if rng.gen_bool(cfg.answer_corrupt_prob) {
                let mut d = rng.gen_range(0..cfg.n_images - 1);
                if d >= target_idx {
                    d += 1;
                }
                &images[d]
            } else {
                &target
            };
            let masked: Vec<f64> = source
                .iter()
                .zip(&mask)
                .map(|(v, &m)| if m { *v } else { 0.0 })
                .collect();
            let a = perturb(&mut rng, &masked, cfg.answer_noise);
            Question { q, a }
        })
        .collect();

    Ok(GameWorld {
        world_id: game_seed,
        target_idx,
        images,
        caption,
        questions,
    })
}

/// `count` worlds with consecutive game seeds starting at `first_seed`.
pub fn generate_pool(cfg: &WorldConfig, first_seed: u64, count: usize) -> Result<Vec<GameWorld>> {
    (0..count as u64)
        .map(|i| generate_world(cfg, first_seed + i))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    version: u32,
    config: WorldConfig,
    worlds: Vec<GameWorld>,
}

/// Emits floats with 17 significant digits.
struct Digits17;

impl serde_json::ser::Formatter for Digits17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn save_worlds(path: &Path, cfg: &WorldConfig, worlds: &[GameWorld]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let doc = WorldFile {
        version: WORLD_FILE_VERSION,
        config: cfg.clone(),
        worlds: worlds.to_vec(),
    };
    let mut ser = serde_json::Serializer::with_formatter(&mut w, Digits17);
    doc.serialize(&mut ser)
        .map_err(|e| Error::format("world file", e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads and validates a world file; the first invalid record is named in the error.
pub fn load_worlds(path: &Path) -> Result<(WorldConfig, Vec<GameWorld>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let doc: WorldFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(format!("world file {}", path.display()), e.to_string()))?;
    if doc.version != WORLD_FILE_VERSION {
        return Err(Error::format(
            "world file",
            format!("unsupported version {}", doc.version),
        ));
    }
    doc.config.validate()?;
    for (i, w) in doc.worlds.iter().enumerate() {
        w.validate(&doc.config).map_err(|msg| {
            Error::format(
                "world file",
                format!("worlds[{i}] (world_id {}): {msg}", w.world_id),
            )
        })?;
    }
    Ok((doc.config, doc.worlds))
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{EncoderDims, PretrainConfig};
use crate::error::{Error, Result};
use crate::trainer::RunConfig;
use crate::worldgen::{generate_pool, GameWorld, WorldConfig, EVAL_SEED_OFFSET};

pub const PRESETS: [(&str, &str); 4] = [
    ("exp1", include_str!("../../../../configs/exp1.toml")),
    ("exp2", include_str!("../../../../configs/exp2.toml")),
    ("exp3", include_str!("../../../../configs/exp3.toml")),
    ("full", include_str!("../../../../configs/full.toml")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_worlds: usize,
    pub eval_worlds: usize,
    /// Leading training worlds used to pretrain the encoder.
    pub pretrain_worlds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_worlds: 1000,
            eval_worlds: 200,
            pretrain_worlds: 800,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub encoder: EncoderDims,
    pub pretrain: PretrainConfig,
    pub run: RunConfig,
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file, or a built-in preset when `spec` names one and no
    /// such file exists.
    pub fn load(spec: &Path) -> Result<Self> {
        if !spec.exists() {
            if let Some((_, text)) = PRESETS.iter().find(|(name, _)| spec.as_os_str() == *name) {
                return Config::parse(text, &format!("preset {}", spec.display()));
            }
        }
        let text = fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
        Config::parse(&text, &spec.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.run.validate()?;
        if self.data.train_worlds == 0 || self.data.eval_worlds == 0 {
            return Err(Error::config("data: train_worlds and eval_worlds must be positive"));
        }
        if self.data.pretrain_worlds > self.data.train_worlds {
            return Err(Error::config("data: pretrain_worlds cannot exceed train_worlds"));
        }
        if self.encoder.embed_dim != self.world.embed_dim || self.encoder.history_dim != self.world.embed_dim {
            return Err(Error::config(
                "encoder.embed_dim and encoder.history_dim must equal world.embed_dim",
            ));
        }
        Ok(())
    }

    /// Hash of everything that fixes the worlds and the encoder's shape.
    pub fn world_hash(&self) -> String {
        hash_json(&(&self.world, &self.data, &self.encoder))
    }

    /// Hash of the whole resolved configuration.
    pub fn full_hash(&self) -> String {
        hash_json(self)
    }

    /// Training and held-out worlds generated from `world`.
    pub fn generate_worlds(&self) -> Result<(Vec<GameWorld>, Vec<GameWorld>)> {
        Ok((
            generate_pool(&self.world, 0, self.data.train_worlds)?,
            generate_pool(&self.world, EVAL_SEED_OFFSET, self.data.eval_worlds)?,
        ))
    }
}

fn hash_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Splits a world list into training and held-out worlds by id.
pub fn split_worlds(worlds: Vec<GameWorld>) -> (Vec<GameWorld>, Vec<GameWorld>) {
    worlds.into_iter().partition(|w| w.world_id < EVAL_SEED_OFFSET)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for (name, text) in PRESETS {
            Config::parse(text, name).unwrap();
        }
        let exp2 = Config::load(Path::new("exp2")).unwrap();
        assert_eq!(exp2.world.pool_size, 200);
        assert_eq!(exp2.run.env.max_turns, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::parse("[world]\nembed_dimm = 3\n", "t").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("embed_dimm"), "{err}");
        assert!(Config::parse("[run.policy]\nbatchsize = 3\n", "t").is_err());
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(Config::parse("", "t").unwrap(), Config::default());
    }

    #[test]
    fn hashes_track_content() {
        let a = Config::default();
        let mut b = a.clone();
        b.run.seed = 9;
        assert_eq!(a.world_hash(), b.world_hash());
        assert_ne!(a.full_hash(), b.full_hash());
        b.world.answer_noise = 0.5;
        assert_ne!(a.world_hash(), b.world_hash());
    }

    #[test]
    fn split_by_id() {
        let mut cfg = Config::default();
        cfg.data.train_worlds = 3;
        cfg.data.eval_worlds = 2;
        let (tr, ev) = cfg.generate_worlds().unwrap();
        let mut all = ev.clone();
        all.extend(tr.clone());
        let (tr2, ev2) = split_worlds(all);
        assert_eq!((tr2, ev2), (tr, ev));
    }
}

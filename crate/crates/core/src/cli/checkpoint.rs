//! Checkpoint files: one JSON header line naming every tensor and its shape,
//! then the tensors as raw little-endian f64 in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Tensor};
use crate::policy::{DqnParams, DrrnParams, Mlp, DRRN_ACTION_PREFIX, DRRN_STATE_PREFIX};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Encoder,
    Dqn,
    Drrn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub iteration: usize,
    pub config_hash: String,
    #[serde(default)]
    pub variant: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub kind: ModuleKind,
    pub tensors: Vec<TensorEntry>,
    pub metadata: Metadata,
    /// Architecture details that shapes alone do not pin down.
    #[serde(default)]
    pub arch: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: ModuleKind, metadata: Metadata, arch: serde_json::Value, tensors: Vec<(String, Tensor)>) -> Self {
        let entries = tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect();
        Checkpoint {
            header: Header {
                format_version: CHECKPOINT_VERSION,
                kind,
                tensors: entries,
                metadata,
                arch,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)
            .map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(what, "missing header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::format(what, format!("bad header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::format(
                what,
                format!("unsupported format version {}", header.format_version),
            ));
        }
        let payload = &bytes[nl + 1..];
        let want: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
        if payload.len() != want {
            return Err(Error::format(
                what,
                format!("payload has {} bytes, header describes {want}", payload.len()),
            ));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut off = 0;
        for e in &header.tensors {
            let n = e.rows * e.cols;
            let data = payload[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            off += 8 * n;
            tensors.push((e.name.clone(), Tensor::new(e.rows, e.cols, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }

    /// Fails unless the checkpoint was written under `config_hash`, or
    /// `force` is set.
    pub fn check_config(&self, config_hash: &str, force: bool) -> Result<()> {
        if self.header.metadata.config_hash != config_hash {
            if force {
                log::warn!(
                    "checkpoint config hash {} differs from current {config_hash}; continuing because of --force",
                    self.header.metadata.config_hash
                );
            } else {
                return Err(Error::config(format!(
                    "checkpoint was written under config {} but the current config hashes to {config_hash} (use --force to override)",
                    self.header.metadata.config_hash
                )));
            }
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ModuleKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::format(
                "checkpoint",
                format!("expected a {kind:?} checkpoint, found {:?}", self.header.kind),
            ));
        }
        Ok(())
    }

    fn param_set(&self, strip: Option<&str>) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        for (name, t) in &self.tensors {
            match strip {
                Some(prefix) => {
                    if let Some(rest) = name.strip_prefix(prefix) {
                        ps.insert(rest, t.clone())?;
                    }
                }
                None => ps.insert(name.clone(), t.clone())?,
            }
        }
        Ok(ps)
    }

    pub fn from_encoder(enc: &EncoderParams, metadata: Metadata) -> Result<Self> {
        let arch = serde_json::to_value(&enc.dims).map_err(|e| Error::format("encoder dims", e.to_string()))?;
        Ok(Checkpoint::new(ModuleKind::Encoder, metadata, arch, named(&enc.params, "")))
    }

    pub fn to_encoder(&self) -> Result<EncoderParams> {
        self.expect_kind(ModuleKind::Encoder)?;
        let dims: EncoderDims = serde_json::from_value(self.header.arch.clone())
            .map_err(|e| Error::format("encoder checkpoint", format!("bad arch: {e}")))?;
        EncoderParams::from_params(dims, self.param_set(None)?)
    }

    pub fn from_dqn(dqn: &DqnParams, metadata: Metadata) -> Self {
        let mut tensors = named(&dqn.online, "online/");
        tensors.extend(named(&dqn.target, "target/"));
        let arch = serde_json::json!({ "sizes": dqn.net.sizes });
        Checkpoint::new(ModuleKind::Dqn, metadata, arch, tensors)
    }

    pub fn to_dqn(&self) -> Result<DqnParams> {
        self.expect_kind(ModuleKind::Dqn)?;
        let sizes = arch_sizes(&self.header.arch, "sizes")?;
        if sizes.len() < 2 {
            return Err(Error::format("dqn checkpoint", "sizes needs at least two entries"));
        }
        let net = Mlp::new(crate::policy::DQN_PREFIX, sizes[0], &sizes[1..], false);
        DqnParams::from_parts(net, self.param_set(Some("online/"))?, self.param_set(Some("target/"))?)
    }

    pub fn from_drrn(drrn: &DrrnParams, metadata: Metadata) -> Self {
        let arch = serde_json::json!({
            "state_sizes": drrn.state_net.sizes,
            "action_sizes": drrn.action_net.sizes,
        });
        Checkpoint::new(ModuleKind::Drrn, metadata, arch, named(&drrn.params, ""))
    }

    pub fn to_drrn(&self) -> Result<DrrnParams> {
        self.expect_kind(ModuleKind::Drrn)?;
        let s = arch_sizes(&self.header.arch, "state_sizes")?;
        let a = arch_sizes(&self.header.arch, "action_sizes")?;
        if s.len() < 2 || a.len() < 2 {
            return Err(Error::format("drrn checkpoint", "tower sizes need at least two entries"));
        }
        DrrnParams::from_parts(
            Mlp::new(DRRN_STATE_PREFIX, s[0], &s[1..], true),
            Mlp::new(DRRN_ACTION_PREFIX, a[0], &a[1..], true),
            self.param_set(None)?,
        )
    }
}

fn named(ps: &ParamSet, prefix: &str) -> Vec<(String, Tensor)> {
    ps.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect()
}

fn arch_sizes(arch: &serde_json::Value, key: &str) -> Result<Vec<usize>> {
    serde_json::from_value(arch.get(key).cloned().unwrap_or_default())
        .map_err(|e| Error::format("checkpoint arch", format!("`{key}`: {e}")))
}

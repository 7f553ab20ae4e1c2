//! Checkpoint files: a one-line JSON header, a newline, then every parameter
//! as little-endian `f32` values in manifest order, followed by optimizer
//! moments when present.
//!
//! Files are written to a sibling temporary path and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeltError, Result};
use crate::model::{MeltConfig, MeltModel};
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::params::{ParamGroup, ParamSet};
use crate::tensor::Tensor;
use crate::word::WordSpec;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "melt-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupManifest {
    pub group: String,
    pub params: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub config: AdamWConfig,
    pub steps: u64,
    /// `(group, index)` of each parameter with stored moments, in file order.
    pub moments: Vec<(String, usize)>,
}

/// Run metadata carried alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub dev_mse: Option<f64>,
    pub epoch: usize,
    pub seed: u64,
    /// Free-form extras, e.g. the fine-tuning head layout.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: MeltConfig,
    word: WordSpec,
    meta: CheckpointMeta,
    groups: Vec<GroupManifest>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: MeltConfig,
    pub word: WordSpec,
    pub meta: CheckpointMeta,
    /// At most one set per group, written in this order.
    pub sets: Vec<ParamSet<f32>>,
    pub optimizer: Option<AdamW<f32>>,
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Melt => "melt",
        ParamGroup::Head => "head",
        ParamGroup::Word => "word",
    }
}

fn parse_group(s: &str) -> Result<ParamGroup> {
    match s {
        "melt" => Ok(ParamGroup::Melt),
        "head" => Ok(ParamGroup::Head),
        "word" => Ok(ParamGroup::Word),
        other => Err(MeltError::CheckpointManifest(format!("unknown parameter group `{other}`"))),
    }
}

impl Checkpoint {
    pub fn set(&self, group: ParamGroup) -> Option<&ParamSet<f32>> {
        self.sets.iter().find(|s| s.group() == group)
    }

    /// The message-level model stored in this checkpoint.
    pub fn melt_model(&self) -> Result<MeltModel<f32>> {
        let set = self
            .set(ParamGroup::Melt)
            .ok_or_else(|| MeltError::CheckpointManifest("no message-level parameters".into()))?;
        let mut model = MeltModel::new(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        model.load_params(set)?;
        Ok(model)
    }

    fn header(&self) -> Header {
        let groups = self
            .sets
            .iter()
            .map(|s| GroupManifest {
                group: group_name(s.group()).into(),
                params: s
                    .params()
                    .iter()
                    .map(|p| ManifestEntry {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                        trainable: p.trainable,
                    })
                    .collect(),
            })
            .collect();
        let optimizer = self.optimizer.as_ref().map(|o| OptimizerHeader {
            config: o.config,
            steps: o.steps(),
            moments: o
                .moments()
                .keys()
                .map(|k| (group_name(k.group).to_string(), k.index))
                .collect(),
        });
        Header {
            format: MAGIC.into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            word: self.word.clone(),
            meta: self.meta.clone(),
            groups,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header()).map_err(|e| MeltError::CheckpointHeader(e.to_string()))?;
        let mut out = header.into_bytes();
        out.push(b'\n');
        let mut put = |v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for s in &self.sets {
            for p in s.params() {
                put(p.value.data());
            }
        }
        if let Some(o) = &self.optimizer {
            for (key, mo) in o.moments() {
                let set = self
                    .set(key.group)
                    .ok_or_else(|| MeltError::CheckpointManifest("optimizer state for a missing group".into()))?;
                if set.params().get(key.index).map(|p| p.value.len()) != Some(mo.m.len()) {
                    return Err(MeltError::CheckpointManifest("optimizer moment shape mismatch".into()));
                }
                put(&mo.m);
                put(&mo.v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| MeltError::CheckpointHeader("missing header line".into()))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| MeltError::CheckpointHeader(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(MAGIC) {
            return Err(MeltError::CheckpointHeader("not a MeLT checkpoint".into()));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(MeltError::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(value).map_err(|e| MeltError::CheckpointHeader(e.to_string()))?;

        let payload = &bytes[nl + 1..];
        let param_floats: usize = header
            .groups
            .iter()
            .flat_map(|g| &g.params)
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        let mut expected = param_floats;
        let mut moment_sizes = Vec::new();
        if let Some(o) = &header.optimizer {
            for (g, i) in &o.moments {
                let n = header
                    .groups
                    .iter()
                    .find(|m| &m.group == g)
                    .and_then(|m| m.params.get(*i))
                    .map(|p| p.shape.iter().product::<usize>())
                    .ok_or_else(|| MeltError::CheckpointManifest(format!("moments for unknown parameter {g}[{i}]")))?;
                moment_sizes.push(n);
                expected += 2 * n;
            }
        }
        if payload.len() != expected * 4 {
            return Err(MeltError::CheckpointTruncated {
                expected: expected * 4,
                found: payload.len(),
            });
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };

        let mut sets = Vec::with_capacity(header.groups.len());
        for gm in &header.groups {
            let group = parse_group(&gm.group)?;
            if sets.iter().any(|s: &ParamSet<f32>| s.group() == group) {
                return Err(MeltError::CheckpointManifest(format!("group `{}` appears twice", gm.group)));
            }
            let mut set = ParamSet::new(group);
            for e in &gm.params {
                let n = e.shape.iter().product();
                let t = Tensor::new(e.shape.clone(), take(n))?;
                set.add(e.name.clone(), t);
                set.params_mut().last_mut().expect("just added").trainable = e.trainable;
            }
            sets.push(set);
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let mut moments = BTreeMap::new();
                for ((g, i), n) in o.moments.iter().zip(moment_sizes) {
                    let key = crate::params::ParamKey {
                        group: parse_group(g)?,
                        index: *i,
                    };
                    moments.insert(key, Moments { m: take(n), v: take(n) });
                }
                let mut opt = AdamW::new(o.config);
                opt.restore(o.steps, moments);
                Some(opt)
            }
        };
        Ok(Checkpoint {
            config: header.config,
            word: header.word,
            meta: header.meta,
            sets,
            optimizer,
        })
    }

    /// Writes atomically: a partially written file never appears at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let file_name = path
            .file_name()
            .ok_or_else(|| MeltError::Config(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            MeltError::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MeltError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

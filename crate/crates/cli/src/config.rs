//! TOML run and synth configs. Paths inside a config are resolved against
//! the directory holding the config file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use cotri::discordance::{DaSettings, Pairing, Selection, Weights};
use cotri::eval::{DiscordanceSpec, PlantedSpec};
use cotri::schema::RelationalCollection;
use cotri::trainer::Hyperparams;
use cotri::{Error, Result};
use serde::{Deserialize, Serialize};

fn config_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {}", path.display(), e))
}

pub fn read_toml(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| config_err(path, e))?;
    text.parse::<toml::Table>().map_err(|e| config_err(path, e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Entity or matrix reference, by name or by numeric id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ref {
    Id(usize),
    Name(String),
}

impl Ref {
    fn entity(&self, c: &RelationalCollection, field: &str) -> Result<usize> {
        match self {
            Ref::Id(i) if *i < c.num_entities() => Ok(*i),
            Ref::Name(n) => c
                .entity_by_name(n)
                .ok_or_else(|| Error::Config(format!("{}: unknown entity '{}'", field, n))),
            Ref::Id(i) => Err(Error::Config(format!("{}: unknown entity id {}", field, i))),
        }
    }

    fn matrix(&self, c: &RelationalCollection, field: &str) -> Result<usize> {
        match self {
            Ref::Id(i) if *i < c.num_matrices() => Ok(*i),
            Ref::Name(n) => c
                .matrix_by_name(n)
                .ok_or_else(|| Error::Config(format!("{}: unknown matrix '{}'", field, n))),
            Ref::Id(i) => Err(Error::Config(format!("{}: unknown matrix id {}", field, i))),
        }
    }
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaConfig {
    pub from: Ref,
    pub to: Ref,
    pub knowledge: Vec<Ref>,
    pub data: Vec<Ref>,
    #[serde(default = "unit")]
    pub alpha: f64,
    #[serde(default = "unit")]
    pub beta: f64,
    #[serde(default = "unit")]
    pub gamma: f64,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub pairing: Pairing,
}

impl DaConfig {
    pub fn resolve(&self, c: &RelationalCollection) -> Result<DaSettings> {
        let matrices = |refs: &[Ref], field: &str| -> Result<BTreeSet<usize>> {
            refs.iter()
                .enumerate()
                .map(|(i, r)| r.matrix(c, &format!("da.{}[{}]", field, i)))
                .collect()
        };
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !w.is_finite() {
                return Err(Error::Config(format!("da.{}: {} is not finite", name, w)));
            }
        }
        Ok(DaSettings {
            from: self.from.entity(c, "da.from")?,
            to: self.to.entity(c, "da.to")?,
            knowledge: matrices(&self.knowledge, "knowledge")?,
            data: matrices(&self.data, "data")?,
            weights: Weights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
            },
            selection: self.selection,
            pairing: self.pairing,
        })
    }
}

/// Parsed `fit`/`da` config.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub graph: PathBuf,
    pub data_dir: PathBuf,
    /// Entity name → file of true labels, one per line.
    pub truth: BTreeMap<String, PathBuf>,
    /// Hyperparameter overrides, merged onto the defaults at load time.
    pub hyper: toml::Table,
    pub seed: Option<u64>,
    pub da: Option<DaConfig>,
}

const RUN_KEYS: [&str; 6] = ["graph", "data_dir", "truth", "hyper", "seed", "da"];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let table = read_toml(path)?;
        Self::from_table(table, &base_dir(path))
    }

    pub fn from_table(mut table: toml::Table, base: &Path) -> Result<Self> {
        for key in table.keys() {
            if !RUN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("{}: unknown field", key)));
            }
        }
        let graph = match table.remove("graph") {
            Some(toml::Value::String(s)) => base.join(s),
            Some(_) => return Err(Error::Config("graph: expected a path string".into())),
            None => return Err(Error::Config("graph: missing field".into())),
        };
        let data_dir = match table.remove("data_dir") {
            Some(toml::Value::String(s)) => base.join(s),
            Some(_) => return Err(Error::Config("data_dir: expected a path string".into())),
            None => base_dir(&graph),
        };
        let mut truth = BTreeMap::new();
        match table.remove("truth") {
            Some(toml::Value::Table(t)) => {
                for (k, v) in t {
                    match v {
                        toml::Value::String(s) => {
                            truth.insert(k, base.join(s));
                        }
                        _ => return Err(Error::Config(format!("truth.{}: expected a path string", k))),
                    }
                }
            }
            Some(_) => return Err(Error::Config("truth: expected a table".into())),
            None => {}
        }
        let hyper = match table.remove("hyper") {
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(Error::Config("hyper: expected a table".into())),
            None => toml::Table::new(),
        };
        let seed = match table.remove("seed") {
            Some(toml::Value::Integer(s)) if s >= 0 => Some(s as u64),
            Some(_) => return Err(Error::Config("seed: expected a non-negative integer".into())),
            None => None,
        };
        let da = match table.remove("da") {
            Some(v) => Some(
                v.try_into::<DaConfig>()
                    .map_err(|e| Error::Config(format!("da: {}", e)))?,
            ),
            None => None,
        };
        Ok(RunConfig {
            graph,
            data_dir,
            truth,
            hyper,
            seed,
            da,
        })
    }

    /// Defaults for the collection, overlaid with the `[hyper]` table, the
    /// top-level seed and then the command-line overrides.
    pub fn hyperparams(
        &self,
        c: &RelationalCollection,
        seed: Option<u64>,
        t: Option<usize>,
    ) -> Result<Hyperparams> {
        let k = match self.hyper.get("k") {
            Some(v) => v
                .clone()
                .try_into::<Vec<usize>>()
                .map_err(|e| Error::Config(format!("hyper.k: {}", e)))?,
            None => return Err(Error::Config("hyper.k: missing field".into())),
        };
        let defaults = Hyperparams::new(k);
        let mut merged = toml::Table::try_from(&defaults)
            .map_err(|e| Error::Config(format!("hyper: {}", e)))?;
        for (key, value) in &self.hyper {
            if !merged.contains_key(key) && !OPTIONAL_HYPER.contains(&key.as_str()) {
                return Err(Error::Config(format!("hyper.{}: unknown field", key)));
            }
            merged.insert(key.clone(), value.clone());
        }
        let mut h: Hyperparams = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(format!("hyper: {}", e)))?;
        if let Some(s) = seed.or(self.seed) {
            h.seed = s;
        }
        if let Some(t) = t {
            h.t = t;
        }
        h.validate(c)?;
        Ok(h)
    }
}

/// Optional fields absent from a serialized default.
const OPTIONAL_HYPER: [&str; 4] = ["lr_relational", "lr_clustering", "lr_clustering_encoder", "sigma"];

/// Config of `synth`: exactly one of `planted` or `discordance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub seed: u64,
    pub planted: Option<PlantedSpec>,
    pub discordance: Option<DiscordanceSpec>,
}

impl SynthConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let table = read_toml(path)?;
        let cfg: SynthConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| config_err(path, e))?;
        match (&cfg.planted, &cfg.discordance) {
            (Some(_), None) | (None, Some(_)) => Ok(cfg),
            _ => Err(config_err(
                path,
                "exactly one of [planted] or [discordance] is required",
            )),
        }
    }
}

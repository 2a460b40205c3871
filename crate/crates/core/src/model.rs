//! A trained model bundle and its on-disk checkpoint.
//!
//! Checkpoint directory layout:
//!
//! - `params.json`, `params.bin`: the parameter store
//! - `config.json`: the training configuration
//! - `corpus.json`: corpus dimensions, model shape and temporal split

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::generative::GenerativeParams;
use crate::graph::{DynamicGraphCorpus, TemporalSplit};
use crate::inference::{register_params, ModelShape};
use crate::trainer::TrainingConfig;

pub const PARAMS_INDEX_FILE: &str = "params.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CORPUS_META_FILE: &str = "corpus.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub shape: ModelShape,
    pub config: TrainingConfig,
    pub num_snapshots: usize,
    pub split: TemporalSplit,
    pub store: ParamStore,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusMeta {
    #[serde(rename = "S")]
    num_subjects: usize,
    #[serde(rename = "T")]
    num_snapshots: usize,
    #[serde(rename = "V")]
    num_nodes: usize,
    split: TemporalSplit,
    shape: ModelShape,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

impl Model {
    /// Freshly initialized parameters for `corpus` under `config`.
    pub fn initialize(corpus: &DynamicGraphCorpus, config: &TrainingConfig, split: TemporalSplit) -> Result<Self> {
        let shape = config.shape_for(corpus);
        let store = register_params(&shape, &config.hyper(), config.seed)?;
        Ok(Self {
            shape,
            config: config.clone(),
            num_snapshots: corpus.num_snapshots(),
            split,
            store,
        })
    }

    pub fn generative_params(&self) -> Result<GenerativeParams> {
        GenerativeParams::from_store(&self.store)
    }

    pub fn check_corpus(&self, corpus: &DynamicGraphCorpus) -> Result<()> {
        let want = (self.shape.num_subjects, self.num_snapshots, self.shape.num_nodes);
        let got = (corpus.num_subjects(), corpus.num_snapshots(), corpus.num_nodes());
        if want != got {
            return Err(Error::invalid(format!(
                "checkpoint expects (S, T, V) = {want:?} but the corpus has {got:?}"
            )));
        }
        Ok(())
    }

    pub fn exists(dir: impl AsRef<Path>) -> bool {
        dir.as_ref().join(PARAMS_INDEX_FILE).exists()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.store.save(dir)?;
        write_json(&dir.join(CONFIG_FILE), &self.config)?;
        write_json(
            &dir.join(CORPUS_META_FILE),
            &CorpusMeta {
                num_subjects: self.shape.num_subjects,
                num_snapshots: self.num_snapshots,
                num_nodes: self.shape.num_nodes,
                split: self.split.clone(),
                shape: self.shape,
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: TrainingConfig = read_json(&dir.join(CONFIG_FILE))?;
        let meta_path = dir.join(CORPUS_META_FILE);
        let meta: CorpusMeta = read_json(&meta_path)?;
        if meta.shape.num_subjects != meta.num_subjects || meta.shape.num_nodes != meta.num_nodes {
            return Err(Error::parse(&meta_path, "shape disagrees with the corpus dimensions"));
        }
        if meta.split.num_snapshots() != meta.num_snapshots {
            return Err(Error::parse(&meta_path, "split does not cover T snapshots"));
        }
        let store = ParamStore::load(dir, config.seed)?;
        // Re-registering yields the expected layout; the loaded store must match it.
        let template = register_params(&meta.shape, &config.hyper(), config.seed)?;
        for p in template.iter() {
            let got = store.require(&p.name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::parse(
                    dir.join(PARAMS_INDEX_FILE),
                    format!("`{}` has shape {:?}, expected {:?}", p.name, got.shape(), p.value.shape()),
                ));
            }
        }
        if store.len() != template.len() {
            return Err(Error::parse(dir.join(PARAMS_INDEX_FILE), "unexpected extra parameters"));
        }
        Ok(Self {
            shape: meta.shape,
            config,
            num_snapshots: meta.num_snapshots,
            split: meta.split,
            store,
        })
    }
}

//! Flat JSON config: one object whose keys are fields of any of the
//! training, flow, generator or corpus configs. A key shared by several
//! (e.g. `seed`) sets all of them.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use dfmed_core::corpus::synth::SynthConfig;
use dfmed_core::dualflow::FlowConfig;
use dfmed_core::generator::GenConfig;
use dfmed_core::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Configs {
    pub train: TrainConfig,
    pub flow: FlowConfig,
    pub gen: GenConfig,
    pub synth: SynthConfig,
}

fn keys_of<T: Serialize>(v: &T) -> Vec<String> {
    match serde_json::to_value(v).expect("config serializes") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, flat: &Map<String, Value>, what: &str) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("config is an object");
    for (k, val) in flat {
        if obj.contains_key(k) {
            obj.insert(k.clone(), val.clone());
        }
    }
    serde_json::from_value(v).with_context(|| format!("invalid {what} field in config"))
}

impl Configs {
    pub fn from_value(v: &Value) -> Result<Self> {
        let Value::Object(flat) = v else { bail!("config must be a JSON object") };
        let d = Configs::default();
        let known: Vec<String> = [keys_of(&d.train), keys_of(&d.flow), keys_of(&d.gen), keys_of(&d.synth)].concat();
        let unknown: Vec<&String> = flat.keys().filter(|k| !known.contains(k)).collect();
        if !unknown.is_empty() {
            bail!("unknown config keys: {unknown:?}");
        }
        let c = Configs {
            train: overlay(&d.train, flat, "training")?,
            flow: overlay(&d.flow, flat, "flow")?,
            gen: overlay(&d.gen, flat, "generator")?,
            synth: overlay(&d.synth, flat, "corpus")?,
        };
        c.train.validate()?;
        c.flow.validate()?;
        c.gen.validate()?;
        c.synth.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Configs::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                Self::from_value(&v)
            }
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.flow.seed = seed;
        self.gen.seed = seed;
        self.synth.seed = seed;
    }
}

//! JSON-lines dataset files.
//!
//! Line 0 is a header `{"spec", "provenance", "seed", "n"}`; each following
//! line is one trajectory. Floats use shortest round-trip formatting, so a
//! save/load cycle reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::hmdp::{Action, HmdpSpec, OfflineDataset, Trajectory};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: HmdpSpec,
    provenance: String,
    seed: u64,
    n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    states: Vec<Vec<f64>>,
    actions: Vec<Action>,
    env_rewards: Vec<f64>,
    human_return: f64,
    behavior_probs: Option<Vec<f64>>,
}

pub fn write_dataset<W: Write>(dataset: &OfflineDataset, mut w: W) -> Result<()> {
    dataset.validate()?;
    let header = Header {
        spec: dataset.spec.clone(),
        provenance: dataset.provenance.clone(),
        seed: dataset.seed,
        n: dataset.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for t in &dataset.trajectories {
        let rec = TrajectoryRecord {
            states: t.states.clone(),
            actions: t.actions.clone(),
            env_rewards: t.env_rewards.clone(),
            human_return: t.human_return,
            behavior_probs: t.behavior_probs.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<OfflineDataset> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or(Error::Load {
        line: 0,
        msg: "empty file".into(),
    })??;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Load {
        line: 0,
        msg: format!("bad header: {e}"),
    })?;
    header.spec.validate().map_err(|e| Error::Load {
        line: 0,
        msg: e.to_string(),
    })?;
    let mut trajectories = Vec::with_capacity(header.n);
    for (k, line) in lines.enumerate() {
        let idx = k + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let load_err = |msg: String| Error::Load { line: idx, msg };
        let value: Value =
            serde_json::from_str(&line).map_err(|e| load_err(format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| load_err("trajectory is not an object".into()))?;
        if obj.contains_key("true_ihrs") {
            return Err(load_err(
                "true_ihrs is an oracle field and must not appear in a dataset".into(),
            ));
        }
        if !obj.contains_key("human_return") {
            return Err(load_err("missing field human_return".into()));
        }
        let rec: TrajectoryRecord =
            serde_json::from_value(value).map_err(|e| load_err(format!("schema mismatch: {e}")))?;
        let traj = Trajectory {
            states: rec.states,
            actions: rec.actions,
            env_rewards: rec.env_rewards,
            human_return: rec.human_return,
            behavior_probs: rec.behavior_probs,
            true_ihrs: None,
        };
        traj.validate(&header.spec)
            .map_err(|e| load_err(e.to_string()))?;
        trajectories.push(traj);
    }
    if trajectories.len() != header.n {
        return Err(Error::Load {
            line: 0,
            msg: format!(
                "header declares n = {} but {} trajectories follow",
                header.n,
                trajectories.len()
            ),
        });
    }
    let ds = OfflineDataset {
        spec: header.spec,
        trajectories,
        provenance: header.provenance,
        seed: header.seed,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(dataset: &OfflineDataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<OfflineDataset> {
    read_dataset(File::open(path)?)
}

pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

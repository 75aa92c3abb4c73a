//! Output-directory layout and stage manifests.
//!
//! Every stage writes its files into its own directory and then a
//! `manifest.json` naming the stage and the configuration fingerprint. A
//! downstream stage refuses to read a directory without a manifest, or with
//! one from a different configuration.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const ARTIFACT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Graph,
    Communities,
    Activity,
    Train,
    Rank,
    Eval,
    Robustness,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Graph => "graph",
            Stage::Communities => "communities",
            Stage::Activity => "activity",
            Stage::Train => "train",
            Stage::Rank => "rank",
            Stage::Eval => "eval",
            Stage::Robustness => "robustness",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub stage: String,
    pub fingerprint: String,
    pub summary: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
    fingerprint: String,
}

impl Layout {
    pub fn new(root: PathBuf, fingerprint: String) -> Self {
        Layout { root, fingerprint }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Directory of a stage; per-split stages live under `splits/NN`.
    pub fn dir(&self, stage: Stage, split: Option<usize>) -> PathBuf {
        match split {
            Some(i) => self.root.join("splits").join(format!("{i:02}")).join(stage.name()),
            None => self.root.join(stage.name()),
        }
    }

    /// Creates an empty directory for `stage`, dropping any previous run's
    /// manifest first so a half-written stage never looks complete.
    pub fn begin(&self, stage: Stage, split: Option<usize>) -> Result<PathBuf> {
        let dir = self.dir(stage, split);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    pub fn finish(&self, stage: Stage, split: Option<usize>, summary: &impl Serialize) -> Result<()> {
        let m = Manifest {
            schema_version: ARTIFACT_VERSION,
            stage: stage.name().into(),
            fingerprint: self.fingerprint.clone(),
            summary: serde_json::to_value(summary)?,
        };
        write_json(&self.dir(stage, split).join(MANIFEST), &m)
    }

    /// The manifest of an upstream stage, checked for presence, version and
    /// fingerprint.
    pub fn require(&self, stage: Stage, split: Option<usize>) -> Result<Manifest> {
        let dir = self.dir(stage, split);
        let path = dir.join(MANIFEST);
        if !path.exists() {
            bail!(
                "missing `{stage}` artifact in {}; run `qroute {stage}` first",
                dir.display()
            );
        }
        let m: Manifest = read_json(&path)?;
        if m.schema_version != ARTIFACT_VERSION || m.stage != stage.name() {
            bail!(
                "{} holds a `{}` artifact of version {}; re-run `qroute {stage}`",
                dir.display(),
                m.stage,
                m.schema_version
            );
        }
        if m.fingerprint != self.fingerprint {
            bail!(
                "`{stage}` artifact in {} was produced by a different configuration \
                 (fingerprint {}, current {}); re-run `qroute {stage}`",
                dir.display(),
                short(&m.fingerprint),
                short(&self.fingerprint)
            );
        }
        Ok(m)
    }

    pub fn summary<T: DeserializeOwned>(&self, stage: Stage, split: Option<usize>) -> Result<T> {
        let m = self.require(stage, split)?;
        serde_json::from_value(m.summary).with_context(|| format!("`{stage}` manifest summary"))
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

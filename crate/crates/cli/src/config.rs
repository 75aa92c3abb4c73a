//! Pipeline configuration file (TOML) and its resolution against flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qroute::communities::default_p_levels;
use qroute::eval::{fingerprint_json, ExperimentConfig};
use qroute::ingest::{rolling_quarters, SplitSpec};
use qroute::synth::SynthConfig;
use serde::{Deserialize, Serialize};

/// Where the corpus comes from: a dump (`posts` + `tags`) or the planted
/// synthetic generator (`synth`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub posts: Option<PathBuf>,
    pub tags: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
}

/// Rolling-quarter split generation, used when `experiment.splits` is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rolling {
    pub year: i32,
    pub quarter: u32,
    pub count: usize,
    #[serde(default = "one")]
    pub step: u32,
    #[serde(default = "two_years")]
    pub train_months: u32,
    #[serde(default = "five")]
    pub min_train_answers: usize,
}

fn one() -> u32 {
    1
}

fn two_years() -> u32 {
    24
}

fn five() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    /// Index of the split whose training graph is perturbed.
    pub split: usize,
    pub repeats: usize,
    pub p_levels: Vec<f64>,
    /// Whether `run-all` includes the robustness stage.
    pub in_run_all: bool,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            split: 0,
            repeats: 10,
            p_levels: default_p_levels(),
            in_run_all: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub data: DataSource,
    pub rolling: Option<Rolling>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub robustness: RobustnessConfig,
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// A configuration after flags, defaults and relative paths are applied.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub data: DataSource,
    pub experiment: ExperimentConfig,
    pub robustness: RobustnessConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Applies flags (highest precedence), then file values, then defaults.
    /// Relative paths in the file are taken relative to `base`.
    pub fn resolve(self, base: &Path, flags: &Overrides) -> Result<Resolved> {
        let seed = flags.seed.or(self.seed).unwrap_or(self.experiment.seed);
        let output_dir = match (&flags.output_dir, &self.output_dir) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => base.join(p),
            (None, None) => PathBuf::from("qroute-out"),
        };
        let threads = flags.threads.unwrap_or(self.threads);

        let mut data = self.data;
        match (&data.posts, &data.tags, &data.synth) {
            (Some(_), Some(_), None) | (None, None, Some(_)) => {}
            (None, None, None) => bail!("data: set `posts` and `tags`, or a `[data.synth]` table"),
            (_, _, Some(_)) => bail!("data: `synth` cannot be combined with `posts`/`tags`"),
            _ => bail!("data: `posts` and `tags` must both be set"),
        }
        data.posts = data.posts.map(|p| base.join(p));
        data.tags = data.tags.map(|p| base.join(p));

        let mut experiment = self.experiment;
        experiment.seed = seed;
        if experiment.splits.is_empty() {
            if let Some(r) = &self.rolling {
                if !(1..=4).contains(&r.quarter) {
                    bail!("rolling.quarter: must be 1..=4, got {}", r.quarter);
                }
                experiment.splits = rolling_quarters(r.year, r.quarter, r.count, r.step, r.train_months)
                    .into_iter()
                    .map(|s| SplitSpec { min_train_answers: r.min_train_answers, ..s })
                    .collect();
            } else if let Some(s) = &data.synth {
                experiment.splits = vec![s.split_spec()];
            } else {
                bail!("experiment.splits: at least one split is required (or a `[rolling]` table)");
            }
        } else if self.rolling.is_some() {
            bail!("rolling: cannot be combined with explicit experiment.splits");
        }
        experiment.validate().context("experiment")?;

        let robustness = self.robustness;
        if robustness.repeats == 0 {
            bail!("robustness.repeats: must be at least 1");
        }
        if robustness.split >= experiment.splits.len() {
            bail!(
                "robustness.split: index {} but only {} split(s) are configured",
                robustness.split,
                experiment.splits.len()
            );
        }
        Ok(Resolved {
            seed,
            output_dir,
            threads,
            data,
            experiment,
            robustness,
        })
    }
}

impl Resolved {
    /// Hash of everything that determines stage outputs. The output
    /// directory and thread count are excluded.
    pub fn fingerprint(&self) -> String {
        fingerprint_json(&serde_json::json!({
            "data": self.data,
            "experiment": self.experiment,
            "robustness": self.robustness,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Resolved> {
        let c: PipelineConfig = toml::from_str(s)?;
        c.resolve(Path::new("/base"), &Overrides::default())
    }

    #[test]
    fn synth_defaults_resolve() {
        let r = parse("seed = 4\n[data.synth]\ntopics = 3\n").unwrap();
        assert_eq!(r.experiment.seed, 4);
        assert_eq!(r.experiment.splits.len(), 1);
        assert_eq!(r.experiment.n_q, 5);
        assert_eq!(r.output_dir, PathBuf::from("qroute-out"));
    }

    #[test]
    fn flags_win_over_file() {
        let c: PipelineConfig = toml::from_str("seed = 4\noutput_dir = \"o\"\n[data.synth]\n").unwrap();
        let flags = Overrides {
            seed: Some(9),
            output_dir: None,
            threads: Some(1),
        };
        let r = c.resolve(Path::new("/base"), &flags).unwrap();
        assert_eq!((r.seed, r.threads), (9, 1));
        assert_eq!(r.output_dir, PathBuf::from("/base/o"));
    }

    #[test]
    fn fingerprint_tracks_outputs_only() {
        let a = parse("[data.synth]\n").unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.threads = 3;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.experiment.n_q = 2;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn field_level_errors() {
        let e = format!("{:#}", parse("[data.synth]\n[experiment]\nn_qq = 3\n").unwrap_err());
        assert!(e.contains("n_qq"), "{e}");
        let e = format!("{:#}", parse("[data]\nposts = \"p\"\n").unwrap_err());
        assert!(e.contains("tags"), "{e}");
        let e = format!("{:#}", parse("[data.synth]\n[experiment.train]\nrank = 0\n").unwrap_err());
        assert!(e.contains("rank"), "{e}");
        let e = format!("{:#}", parse("[data.synth]\n[rolling]\nyear = 2019\nquarter = 5\ncount = 2\n").unwrap_err());
        assert!(e.contains("rolling.quarter"), "{e}");
    }

    #[test]
    fn rolling_quarters_fill_splits() {
        let r = parse("[data]\nposts = \"P\"\ntags = \"T\"\n[rolling]\nyear = 2019\nquarter = 1\ncount = 3\nmin_train_answers = 2\n").unwrap();
        assert_eq!(r.experiment.splits.len(), 3);
        assert!(r.experiment.splits.iter().all(|s| s.min_train_answers == 2));
        assert_eq!(r.data.posts, Some(PathBuf::from("/base/P")));
    }
}

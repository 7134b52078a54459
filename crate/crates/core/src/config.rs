//! Strict TOML run configuration with presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{Deblurrer, ExternalBackend, ExternalConfig, Segmenter, UnsharpParams};
use crate::db::CollectConfig;
use crate::error::{Error, Result};
use crate::map::{MapConfig, NavConfig};
use crate::pipeline::WorldConfig;
use crate::retrieval::Aggregation;
use crate::train::{Preset, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmenterKind {
    Oracle,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeblurKind {
    Identity,
    Unsharp,
    External,
}

/// An external backend; an empty `command` means "not configured".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub command: String,
    pub args: Vec<String>,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            command: String::new(),
            args: Vec::new(),
            timeout_ms: 60_000,
            retries: 0,
        }
    }
}

impl BackendSection {
    fn backend(&self) -> ExternalBackend {
        ExternalBackend::new(ExternalConfig {
            command: PathBuf::from(&self.command),
            args: self.args.clone(),
            timeout_ms: self.timeout_ms,
            retries: self.retries,
            params: Default::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptersSection {
    pub segmenter: SegmenterKind,
    /// Applied to robot frames during mapping and collection.
    pub deblurrer: DeblurKind,
    pub unsharp: UnsharpParams,
    pub external_segmenter: BackendSection,
    pub external_deblurrer: BackendSection,
}

impl Default for AdaptersSection {
    fn default() -> Self {
        Self {
            segmenter: SegmenterKind::Oracle,
            deblurrer: DeblurKind::Identity,
            unsharp: UnsharpParams::default(),
            external_segmenter: BackendSection::default(),
            external_deblurrer: BackendSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSection {
    pub aggregation: Aggregation,
    pub nav: NavConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub shots_list: Vec<usize>,
    /// Also score every condition on sharpened robot crops.
    pub deblur_conditions: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            shots_list: vec![1, 3, 5],
            deblur_conditions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Seeds the world and training; `training.seed` and
    /// `training.init_seed` are derived from it.
    pub seed: u64,
    /// Parent directory of run directories.
    pub runs_dir: PathBuf,
    pub world: WorldConfig,
    pub mapping: MapConfig,
    pub adapters: AdaptersSection,
    pub database: CollectConfig,
    pub training: TrainingConfig,
    pub retrieval: RetrievalSection,
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self {
            preset,
            seed: 0,
            runs_dir: PathBuf::from("runs"),
            world: WorldConfig::default(),
            mapping: MapConfig::default(),
            adapters: AdaptersSection::default(),
            database: CollectConfig::default(),
            training: TrainingConfig::preset(preset),
            retrieval: RetrievalSection::default(),
            evaluation: EvaluationSection::default(),
        };
        c.sync_seed();
        c
    }

    /// Propagates the top-level seed into the sections that use it.
    pub fn sync_seed(&mut self) {
        self.training.seed = self.seed;
        self.training.init_seed = self.seed;
    }

    /// Parses TOML text. The preset named in the text (default `desk`)
    /// supplies every value the text leaves out.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_str_with(text, None)
    }

    /// As [`RunConfig::from_toml_str`], with `preset` overriding the file.
    pub fn from_toml_str_with(text: &str, preset: Option<Preset>) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match preset {
            Some(p) => p,
            None => match user.get("preset") {
                None => Preset::Desk,
                Some(v) => v
                    .clone()
                    .try_into()
                    .map_err(|_| Error::Config(format!("preset: expected \"desk\" or \"paper\", got {v}")))?,
            },
        };
        let base = Self::preset(preset);
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        let mut problems = Vec::new();
        let mut user = user;
        user.remove("preset");
        for key in ["seed", "init_seed"] {
            if user
                .get("training")
                .and_then(|t| t.as_table())
                .is_some_and(|t| t.contains_key(key))
            {
                problems.push(format!("training.{key}: set the top-level `seed` instead"));
            }
        }
        merge(&mut merged, &user, "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let seed_override = user.get("seed").is_some();
        let mut cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.preset = preset;
        if seed_override {
            cfg.sync_seed();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, None)
    }

    pub fn load_with(path: &Path, preset: Option<Preset>) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str_with(&text, preset)
    }

    /// Serialises without the derived training seeds, so the output
    /// parses back to the same config.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serialises");
        if let Some(training) = table.get_mut("training").and_then(|t| t.as_table_mut()) {
            training.remove("seed");
            training.remove("init_seed");
        }
        toml::to_string(&table).expect("config serialises")
    }

    /// Every problem found, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                problems.push(msg.to_string());
            }
        };
        let w = &self.world;
        check(w.n_instances >= 1, "world.n_instances must be at least 1");
        check(w.frames >= 1, "world.frames must be at least 1");
        check(w.width >= 8 && w.height >= 8, "world.width and world.height must be at least 8");
        check(w.hfov_deg > 0.0 && w.hfov_deg < 180.0, "world.hfov_deg must lie in (0, 180)");
        check(w.degradation.validate().is_ok(), "world.degradation is invalid");
        let m = &self.mapping;
        check(m.voxel_size > 0.0, "mapping.voxel_size must be positive");
        check(
            m.depth_min >= 0.0 && m.depth_min < m.depth_max,
            "mapping.depth_min must be below mapping.depth_max",
        );
        check((0.0..=1.0).contains(&m.iou_threshold), "mapping.iou_threshold must lie in [0, 1]");
        check(self.retrieval.nav.radius > 0.0, "retrieval.nav.radius must be positive");
        check(self.database.max_shots >= 1, "database.max_shots must be at least 1");
        check(
            self.training.shots <= self.database.max_shots && self.training.shots <= w.user_images,
            "training.shots exceeds the available user images",
        );
        check(!self.evaluation.shots_list.is_empty(), "evaluation.shots_list must not be empty");
        check(
            self.evaluation
                .shots_list
                .iter()
                .all(|&s| s >= 1 && s <= w.user_images && s <= self.database.max_shots),
            "evaluation.shots_list entries must lie in 1..=world.user_images",
        );
        let a = &self.adapters;
        for (used, section, name) in [
            (a.segmenter == SegmenterKind::External, &a.external_segmenter, "adapters.external_segmenter"),
            (a.deblurrer == DeblurKind::External, &a.external_deblurrer, "adapters.external_deblurrer"),
        ] {
            if used {
                if section.command.is_empty() {
                    problems.push(format!("{name}.command is required"));
                } else if !Path::new(&section.command).exists() {
                    problems.push(format!("{name}.command {} does not exist", section.command));
                }
            }
        }
        if let Err(Error::Config(msg)) = self.training.validate() {
            problems.extend(msg.split("; ").map(|m| format!("training: {m}")));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Hash of everything that determines the collected data (world,
    /// mapping, adapters, database and seed). Names the run directory.
    pub fn data_fingerprint(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "world": self.world,
            "mapping": self.mapping,
            "adapters": self.adapters,
            "database": self.database,
        });
        hex::encode(&Sha256::digest(key.to_string().as_bytes())[..8])
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(self.data_fingerprint())
    }

    pub fn segmenter(&self) -> Segmenter {
        match self.adapters.segmenter {
            SegmenterKind::Oracle => Segmenter::Oracle,
            SegmenterKind::External => Segmenter::External(self.adapters.external_segmenter.backend()),
        }
    }

    pub fn deblurrer(&self) -> Deblurrer {
        self.deblurrer_of(self.adapters.deblurrer)
    }

    pub fn deblurrer_of(&self, kind: DeblurKind) -> Deblurrer {
        match kind {
            DeblurKind::Identity => Deblurrer::Identity,
            DeblurKind::Unsharp => Deblurrer::Unsharp(self.adapters.unsharp),
            DeblurKind::External => Deblurrer::External(self.adapters.external_deblurrer.backend()),
        }
    }
}

/// Overlays `user` onto `base`, recording keys `base` does not know.
fn merge(base: &mut toml::Table, user: &toml::Table, prefix: &str, problems: &mut Vec<String>) {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match base.get_mut(key) {
            None => problems.push(format!("unknown key `{path}`")),
            Some(toml::Value::Table(b)) => match value {
                toml::Value::Table(u) => merge(b, u, &path, problems),
                other => problems.push(format!("`{path}` must be a table, got {}", other.type_str())),
            },
            Some(slot) => *slot = value.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::preset(Preset::Desk));
        assert_eq!(c.training.learning_rate, TrainingConfig::desk().learning_rate);
    }

    #[test]
    fn paper_preset() {
        let c = RunConfig::from_toml_str("preset = \"paper\"").unwrap();
        assert_eq!(
            (c.training.learning_rate, c.training.batch_pairs, c.training.epochs),
            (0.07, 256, 1000)
        );
    }

    #[test]
    fn typo_is_named() {
        let e = RunConfig::from_toml_str("[training]\nlearnig_rate = 0.1\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("training.learnig_rate")), "{e}");
    }

    #[test]
    fn problems_are_aggregated() {
        let e = RunConfig::from_toml_str("bogus = 1\n[world]\nfoo = 2\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("bogus") && msg.contains("world.foo"), "{msg}");
        let e = RunConfig::from_toml_str("[training]\nlearning_rate = -1.0\nepochs = 0\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("learning_rate") && msg.contains("epochs"), "{msg}");
    }

    #[test]
    fn type_mismatch_is_config_error() {
        assert!(matches!(
            RunConfig::from_toml_str("[training]\nepochs = \"many\"\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides_and_round_trip() {
        let c = RunConfig::from_toml_str("seed = 7\n[training]\nepochs = 3\n").unwrap();
        assert_eq!((c.seed, c.training.seed, c.training.epochs), (7, 7, 3));
        let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::from_toml_str("[training]\nseed = 3\n").is_err());
    }

    #[test]
    fn data_fingerprint_ignores_training() {
        let a = RunConfig::preset(Preset::Desk);
        let mut b = a.clone();
        b.training.epochs = 2;
        assert_eq!(a.data_fingerprint(), b.data_fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        b.world.frames = 3;
        assert_ne!(a.data_fingerprint(), b.data_fingerprint());
    }

    #[test]
    fn external_adapter_needs_existing_command() {
        let e = RunConfig::from_toml_str("[adapters]\ndeblurrer = \"external\"\n").unwrap_err();
        assert!(e.to_string().contains("external_deblurrer.command"));
    }
}

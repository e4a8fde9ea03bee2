//! Run configuration: named presets, TOML files and `key=value` overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::attribution::{SplitConfig, TrainProtocol};
use crate::error::{Error, Result};
use crate::fingerprints::CsConfig;
use crate::io::read_file;
use crate::seed::stage_seed;
use crate::victim::VictimConfig;

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "ATTACKPRINT_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperImagenette,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-imagenette" => Ok(Preset::PaperImagenette),
            _ => Err(Error::Config(format!("unknown preset '{s}' (expected desk or paper-imagenette)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    /// Source images attacked from each split (first correctly classified
    /// ones are not preferred; the first `n` of the split are used).
    pub sources_train: usize,
    pub sources_test: usize,
    /// Victim training images the universal patch is optimised over.
    pub patch_train_images: usize,
    #[serde(flatten)]
    pub attack: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintSection {
    pub cs: CsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSection {
    pub protocol: TrainProtocol,
    pub splits: SplitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub victim: VictimConfig,
    pub attacks: AttackSection,
    pub fingerprints: FingerprintSection,
    pub attribution: AttributionSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let attack = match preset {
            Preset::Desk => AttackConfig::desk(),
            Preset::PaperImagenette => AttackConfig::paper_imagenette(),
        };
        RunConfig {
            preset,
            seed: 0,
            out_dir: PathBuf::from("run"),
            data: DataConfig {
                source: DataSource::Synth,
                synth_train_per_class: 1000,
                synth_test_per_class: 200,
                train_images: None,
                train_labels: None,
                test_images: None,
                test_labels: None,
            },
            victim: VictimConfig::default(),
            attacks: AttackSection { sources_train: 400, sources_test: 150, patch_train_images: 1000, attack },
            fingerprints: FingerprintSection { cs: CsConfig::default() },
            attribution: AttributionSection { protocol: TrainProtocol::default(), splits: SplitConfig::default() },
        }
    }

    /// Preset (from the file's `preset` key, the explicit `preset`
    /// argument, or `desk`), overlaid with the TOML file and then with
    /// `key.path=value` overrides. Stage seeds are then derived from the
    /// global seed.
    pub fn load(file: Option<&Path>, preset: Option<Preset>, overrides: &[String]) -> Result<Self> {
        let mut user = toml::Table::new();
        if let Some(path) = file {
            let text = String::from_utf8(read_file(path)?).map_err(|_| Error::format(path, "config is not UTF-8"))?;
            user = text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            set_path(&mut user, key.trim(), parse_value(value.trim()))?;
        }
        let preset = match (user.get("preset"), preset) {
            (_, Some(p)) => p,
            (Some(toml::Value::String(s)), None) => s.parse()?,
            (Some(_), None) => return Err(Error::Config("preset must be a string".into())),
            (None, None) => Preset::Desk,
        };
        user.remove("preset");
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let mut cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.preset = preset;
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fill every sub-seed from the global seed so stages can run alone.
    pub fn resolve_seeds(&mut self) {
        self.victim.seed = stage_seed(self.seed, "victim");
        self.fingerprints.cs.seed = stage_seed(self.seed, "fingerprint-cs");
        self.attribution.protocol.seed = stage_seed(self.seed, "attributor");
        self.attribution.splits.seed = stage_seed(self.seed, "splits");
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }

    pub fn validate(&self) -> Result<()> {
        self.victim.adam.validate()?;
        self.attribution.protocol.validate()?;
        self.fingerprints.cs.validate()?;
        if self.data.source == DataSource::Idx {
            for (name, p) in [
                ("data.train_images", &self.data.train_images),
                ("data.train_labels", &self.data.train_labels),
                ("data.test_images", &self.data.test_images),
                ("data.test_labels", &self.data.test_labels),
            ] {
                if p.is_none() {
                    return Err(Error::Config(format!("{name} is required when data.source = \"idx\"")));
                }
            }
        } else if self.data.synth_train_per_class == 0 || self.data.synth_test_per_class == 0 {
            return Err(Error::Config("synthetic datasets need at least one image per class".into()));
        }
        let a = &self.attacks.attack;
        if a.pgd_steps == 0 || a.square_budget == 0 {
            return Err(Error::Config("attacks.pgd_steps and attacks.square_budget must be positive".into()));
        }
        if self.attacks.sources_train == 0 || self.attacks.sources_test == 0 {
            return Err(Error::Config("attacks.sources_train and attacks.sources_test must be positive".into()));
        }
        Ok(())
    }

    /// Output directory after applying [`OUT_DIR_ENV`].
    pub fn with_env_out_dir(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
        self
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key '{key}'")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_round_trips_through_toml() {
        for p in [Preset::Desk, Preset::PaperImagenette] {
            let cfg = RunConfig::load(None, Some(p), &[]).unwrap();
            let mut want = RunConfig::preset(p);
            want.resolve_seeds();
            assert_eq!(cfg, want);
        }
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = RunConfig::load(
            None,
            None,
            &[
                "seed=7".into(),
                "attacks.pgd_steps=10".into(),
                "attacks.grids.linf=[0.1, 0.2, 0.3, 0.4]".into(),
                "attribution.protocol.adam.lr=0.001".into(),
                "out_dir=somewhere".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.attacks.attack.pgd_steps, 10);
        assert_eq!(cfg.attacks.attack.grids.linf, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(cfg.attribution.protocol.adam.lr, 0.001);
        assert_eq!(cfg.out_dir, PathBuf::from("somewhere"));
        assert_eq!(cfg.victim.seed, stage_seed(7, "victim"));
    }

    #[test]
    fn bad_config_is_a_config_error() {
        assert!(matches!(RunConfig::load(None, None, &["nonsense".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, None, &["attacks.pgd_steps=\"x\"".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, None, &["preset=\"huge\"".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, None, &["data.source=\"idx\"".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, None, &["attacks.square_budget=0".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn file_preset_key_is_honoured() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "preset = \"paper-imagenette\"\nseed = 3\n[attacks]\nsquare_budget = 500\n").unwrap();
        let cfg = RunConfig::load(Some(&p), None, &[]).unwrap();
        assert_eq!(cfg.preset, Preset::PaperImagenette);
        assert_eq!(cfg.attacks.attack.pgd_steps, 250);
        assert_eq!(cfg.attacks.attack.square_budget, 500);
        assert_eq!(cfg.seed, 3);
    }
}

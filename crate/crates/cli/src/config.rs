//! Run configuration: built-in defaults, then the JSON config file, then
//! command-line flags, each layer overriding the previous one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use ui2vec::downstream::{EvalMode, FinetuneConfig, Task};
use ui2vec::encoder::ModelConfig;
use ui2vec::features::FeatureConfig;
use ui2vec::pretrain::PretrainConfig;
use ui2vec::synth::GenConfig;

use crate::failure::{CliResult, Failure, Kind};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory written by `synth`: corpus and task files.
    pub data: Option<PathBuf>,
    /// Parameter checkpoint to start from. Absent means fresh parameters.
    pub checkpoint: Option<PathBuf>,
}

/// Sizes of the generated task files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskFiles {
    pub n_candidates: usize,
    pub n_pairs: usize,
}

impl Default for TaskFiles {
    fn default() -> Self {
        TaskFiles {
            n_candidates: 10,
            n_pairs: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required. Every seed of a run derives from it, `gen.seed` included.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub gen: GenConfig,
    pub tasks: TaskFiles,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub task: Task,
    pub mode: EvalMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            paths: Paths::default(),
            model: ModelConfig::default(),
            features: FeatureConfig::default(),
            gen: GenConfig::default(),
            tasks: TaskFiles::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            task: Task::Retrieval,
            mode: EvalMode::ZeroShot,
        }
    }
}

/// Named flags, applied last.
#[derive(Clone, Debug, Default)]
pub struct Flags {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub task: Option<Task>,
    pub mode: Option<EvalMode>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn validate(&self, out: &Path) -> CliResult<()> {
        if self.seed.is_none() {
            return Err(Failure::config(
                "seed is required (--seed N or \"seed\" in the config file)",
            ));
        }
        let cfg = |e: ui2vec::Error| Failure::config(e);
        self.model.validate().map_err(cfg)?;
        self.features.validate().map_err(cfg)?;
        self.gen.validate().map_err(cfg)?;
        self.pretrain.validate().map_err(cfg)?;
        self.finetune.validate().map_err(cfg)?;
        if self.tasks.n_candidates < 2 {
            return Err(Failure::config("tasks.n_candidates must be at least 2"));
        }
        let mut seen: Vec<(&str, &Path)> = vec![("--out", out)];
        for (name, p) in [
            ("paths.data", &self.paths.data),
            ("paths.checkpoint", &self.paths.checkpoint),
        ] {
            if let Some(p) = p {
                if let Some((other, _)) = seen.iter().find(|(_, q)| *q == p.as_path()) {
                    return Err(Failure::config(format!(
                        "{name} and {other} name the same path {}",
                        p.display()
                    )));
                }
                seen.push((name, p));
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the command and the resolved
    /// configuration.
    pub fn hash(&self, command: &str) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(format!("{command}\n{json}").as_bytes());
        format!("{digest:x}")[..16].to_string()
    }
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c` inside `root`. The value is read as JSON when it parses,
/// otherwise as a plain string.
fn set_dotted(root: &mut Value, key: &str, raw: &str) -> CliResult<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Failure::config(format!(
                "--{key}: {} is not a section",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub fn resolve(file: Option<&Path>, overrides: &[(String, String)], flags: &Flags) -> CliResult<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| {
            let kind = if e.kind() == std::io::ErrorKind::NotFound {
                Kind::Missing
            } else {
                Kind::Other
            };
            Failure::new(kind, format!("config {}: {e}", path.display()))
        })?;
        let layer: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::new(Kind::Parse, format!("config {}:{}: {e}", path.display(), e.line())))?;
        if !layer.is_object() {
            return Err(Failure::config(format!(
                "config {} must hold a JSON object",
                path.display()
            )));
        }
        merge(&mut root, layer);
    }
    for (k, v) in overrides {
        set_dotted(&mut root, k, v)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(Failure::config)?;
    if let Some(s) = flags.seed {
        cfg.seed = Some(s);
    }
    if let Some(n) = flags.n {
        cfg.gen.n_uis = n;
    }
    if let Some(t) = flags.task {
        cfg.task = t;
    }
    if let Some(m) = flags.mode {
        cfg.mode = m;
    }
    if let Some(d) = &flags.data {
        cfg.paths.data = Some(d.clone());
    }
    if let Some(c) = &flags.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    cfg.gen.seed = cfg.seed.unwrap_or(0);
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 3, "model": {"d": 32}, "gen": {"n_uis": 40}}"#).unwrap();
        let flags = Flags {
            seed: Some(9),
            ..Flags::default()
        };
        let cfg = resolve(
            Some(&path),
            &ov(&[("model.n_layers", "1"), ("gen.n_uis", "50")]),
            &flags,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.model.d, 32);
        assert_eq!(cfg.model.n_layers, 1);
        assert_eq!(cfg.gen.n_uis, 50);
        assert_eq!(cfg.model.n_heads, ModelConfig::default().n_heads);
        assert_eq!(cfg.gen.seed, 9);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = resolve(None, &ov(&[("model.depth", "3")]), &Flags::default()).unwrap_err();
        assert_eq!(e.kind, Kind::Config);
        let e = resolve(None, &ov(&[("pretrain.adam.learning_rate", "0.1")]), &Flags::default()).unwrap_err();
        assert_eq!(e.kind, Kind::Config);
        let e = resolve(None, &ov(&[("seed.x", "1")]), &Flags::default()).unwrap_err();
        assert_eq!(e.kind, Kind::Config);
    }

    #[test]
    fn seed_is_mandatory() {
        let cfg = resolve(None, &[], &Flags::default()).unwrap();
        assert_eq!(cfg.validate(Path::new("out")).unwrap_err().kind, Kind::Config);
    }

    #[test]
    fn paths_must_differ() {
        let flags = Flags {
            seed: Some(1),
            data: Some("x".into()),
            checkpoint: Some("x".into()),
            ..Flags::default()
        };
        let cfg = resolve(None, &[], &flags).unwrap();
        assert_eq!(cfg.validate(Path::new("out")).unwrap_err().kind, Kind::Config);
    }

    #[test]
    fn hash_tracks_command_and_config() {
        let flags = Flags {
            seed: Some(1),
            ..Flags::default()
        };
        let a = resolve(None, &[], &flags).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash("synth"), b.hash("synth"));
        assert_ne!(a.hash("synth"), a.hash("pretrain"));
        b.model.d = 32;
        assert_ne!(a.hash("synth"), b.hash("synth"));
        assert_eq!(a.hash("synth").len(), 16);
    }
}

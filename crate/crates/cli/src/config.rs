//! Run configuration: defaults, a flat `key = value` file with `[section]`
//! headers, then command-line overrides, in that order of precedence.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use patrep::baselines::{LdaConfig, TopicPooling};
use patrep::embed::{Aggregator, GloveConfig};
use patrep::pipeline::{ExperimentConfig, PreprocessConfig};
use patrep::rng::module_seed;
use patrep::seqmodel::SequenceModelConfig;
use patrep::synthgen::{GeneratorConfig, UTILIZATION_TASKS};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const CONFIG_ENV: &str = "PATREP_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepresentSection {
    pub aggregators: Vec<Aggregator>,
    pub lda_pooling: TopicPooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub tfidf_cap: usize,
    pub lsa_dim: usize,
    pub lsa_seed: u64,
    pub lda: LdaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesSection {
    pub tasks: Vec<String>,
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub prevalence: f64,
    pub folds: usize,
    pub lambda_count: usize,
    pub lambda_decades: f64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicSection {
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NotesSection {
    pub targets: usize,
    pub max_notes: usize,
    pub k_candidates: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workdir: PathBuf,
    pub generator: GeneratorConfig,
    pub preprocess: PreprocessConfig,
    pub glove: GloveConfig,
    pub rnn: SequenceModelConfig,
    pub represent: RepresentSection,
    pub baselines: BaselineSection,
    pub curves: CurvesSection,
    pub intrinsic: IntrinsicSection,
    pub notes: NotesSection,
}

/// Sections whose `seed` follows the global seed unless set explicitly.
const SEEDED: [(&str, &str); 6] = [
    ("generator.seed", "synthgen"),
    ("glove.seed", "embed"),
    ("rnn.seed", "seqmodel"),
    ("baselines.lda.seed", "baselines"),
    ("curves.seed", "evalkit"),
    ("notes.seed", "notes"),
];

impl RunConfig {
    pub fn defaults(seed: u64) -> Self {
        let exp = ExperimentConfig::with_seed(seed);
        RunConfig {
            seed,
            workdir: PathBuf::from("patrep-run"),
            generator: exp.generator,
            preprocess: exp.preprocess,
            glove: exp.glove,
            rnn: SequenceModelConfig { epochs: 100, ..exp.sequence },
            represent: RepresentSection {
                aggregators: vec![Aggregator::Min, Aggregator::Mean, Aggregator::Max],
                lda_pooling: TopicPooling::Mean,
            },
            baselines: BaselineSection {
                tfidf_cap: 15000,
                lsa_dim: 600,
                lsa_seed: module_seed(seed, "lsa"),
                lda: LdaConfig { seed: module_seed(seed, "baselines"), ..LdaConfig::default() },
            },
            curves: CurvesSection {
                tasks: UTILIZATION_TASKS.iter().map(|t| t.to_string()).collect(),
                sizes: exp.sizes,
                repeats: 20,
                prevalence: 0.2,
                folds: 5,
                lambda_count: 30,
                lambda_decades: 6.0,
                workers: 0,
                seed: module_seed(seed, "evalkit"),
            },
            intrinsic: IntrinsicSection { top_k: 40 },
            notes: NotesSection {
                targets: 6,
                max_notes: 1500,
                k_candidates: vec![1, 3, 5, 9, 15, 25],
                folds: 5,
                seed: module_seed(seed, "notes"),
            },
        }
    }

    /// Resolves defaults, then the config file, then `overrides` (`key=value`).
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut assignments = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
            assignments.extend(parse_file(&text)?);
        }
        assignments.extend(overrides.iter().cloned());

        let seed = match assignments.iter().rev().find(|(k, _)| k == "seed") {
            Some((_, v)) => v.trim().parse().map_err(|_| CliError::Usage(format!("seed must be an integer, got {v:?}")))?,
            None => 7,
        };
        let mut value = serde_json::to_value(RunConfig::defaults(seed)).expect("config serializes");
        let mut explicit = BTreeSet::new();
        for (key, raw) in &assignments {
            set_key(&mut value, key, raw)?;
            explicit.insert(key.clone());
        }
        for (key, module) in SEEDED {
            if !explicit.contains(key) {
                set_key(&mut value, key, &module_seed(seed, module).to_string())?;
            }
        }
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
    }

    /// Flat `key = value` rendering, grouped by section.
    pub fn render(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut top = String::new();
        let mut sections = String::new();
        if let Value::Object(map) = value {
            for (k, v) in map {
                match v {
                    Value::Object(inner) => {
                        let _ = writeln!(sections, "[{k}]");
                        flatten("", &Value::Object(inner), &mut sections);
                    }
                    other => {
                        let _ = writeln!(top, "{k} = {}", scalar(&other));
                    }
                }
            }
        }
        top + &sections
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (k, inner) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, inner, out);
            }
        }
        other => {
            let _ = writeln!(out, "{prefix} = {}", scalar(other));
        }
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) if items.iter().all(|i| !i.is_object() && !i.is_array()) => {
            items.iter().map(scalar).collect::<Vec<_>>().join(",")
        }
        Value::Null => "none".to_string(),
        other => other.to_string(),
    }
}

fn parse_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
        let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// `key=value` from the command line.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

/// Sets a dotted key, typing the raw text after the value it replaces.
fn set_key(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown configuration key {key:?}")))?;
    }
    *node = typed(node, raw).ok_or_else(|| CliError::Usage(format!("cannot parse {raw:?} for {key}")))?;
    Ok(())
}

fn typed(current: &Value, raw: &str) -> Option<Value> {
    let raw = raw.trim();
    match current {
        Value::Array(items) => {
            if let Ok(v @ Value::Array(_)) = serde_json::from_str(raw) {
                return Some(v);
            }
            let template = items.first().cloned().unwrap_or(Value::Null);
            let parts: Option<Vec<Value>> = raw
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| typed(&template, p))
                .collect();
            parts.map(Value::Array)
        }
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Null => {
            if raw == "none" {
                Some(Value::Null)
            } else {
                Some(serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())))
            }
        }
        _ => serde_json::from_str(raw).ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn file_then_flags_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "seed = 11\n[curves]\nsizes = 125,250 # two sizes\nrepeats = 3\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &[kv("curves.repeats", "5")]).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.curves.sizes, vec![125, 250]);
        assert_eq!(cfg.curves.repeats, 5);
        assert_eq!(cfg.glove.seed, module_seed(11, "embed"));
    }

    #[test]
    fn explicit_module_seed_wins_and_tuples_parse() {
        let cfg = RunConfig::resolve(
            None,
            &[kv("glove.seed", "3"), kv("generator.notes_per_patient_range", "2,5"), kv("baselines.lda.alpha", "0.5")],
        )
        .unwrap();
        assert_eq!(cfg.glove.seed, 3);
        assert_eq!(cfg.generator.notes_per_patient_range, (2, 5));
        assert_eq!(cfg.baselines.lda.alpha, Some(0.5));
        assert_eq!(cfg.rnn.seed, module_seed(7, "seqmodel"));
    }

    #[test]
    fn bad_keys_and_values_are_usage_errors() {
        assert!(matches!(RunConfig::resolve(None, &[kv("glove.nope", "1")]), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::resolve(None, &[kv("glove.dim", "abc")]), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::resolve(None, &[kv("rnn.cell", "tree")]), Err(CliError::Usage(_))));
    }

    #[test]
    fn rendered_config_reads_back() {
        let cfg = RunConfig::resolve(None, &[kv("seed", "5"), kv("curves.sizes", "125")]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.conf");
        std::fs::write(&path, cfg.render()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), &[]).unwrap(), cfg);
    }
}

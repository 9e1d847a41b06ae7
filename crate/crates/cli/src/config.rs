//! Experiment configuration: parsing, validation and expansion into runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use robustlab::attacks::AttackSpec;
use robustlab::data::{load_idx, synth_blobs, Dataset};
use robustlab::{mix_seed, ModelSpec, TrainSpec};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX image/label pair, shuffled once and split.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        split_seed: u64,
    },
    /// Two Gaussian blobs in the unit square.
    Blobs {
        n_train: usize,
        n_test: usize,
        margin: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSpec {
    /// Returns `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        Ok(match self {
            DatasetSpec::Idx {
                images,
                labels,
                n_train,
                n_test,
                split_seed,
            } => load_idx(images, labels)?.split(*n_train, *n_test, *split_seed)?,
            DatasetSpec::Blobs {
                n_train,
                n_test,
                margin,
                seed,
            } => synth_blobs(n_train + n_test, *margin, *seed)?.split(*n_train, *n_test, *seed)?,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSpec::Idx { images, labels, .. } = self {
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
    /// Mixed with the run seed to give the initialization seed.
    #[serde(default)]
    pub init_seed: u64,
}

fn default_eval() -> AttackSpec {
    AttackSpec::pgd(0.031, 2.0 / 255.0, 100)
}

/// Everything one training run needs besides its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default = "default_eval")]
    pub eval: AttackSpec,
}

/// A named set of overrides applied before the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub set: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Output directory under the output root; defaults to `name`.
    #[serde(default)]
    pub output_dir: Option<String>,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default = "default_eval")]
    pub eval: AttackSpec,
    /// Dotted config path to the list of values it takes.
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
    #[serde(default)]
    pub variants: Vec<Variant>,
}

/// One (variant x sweep point x seed) run, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub run_id: String,
    /// Variant name, or the strategy name when there are no variants.
    pub label: String,
    /// `path=value` pairs of this sweep point.
    pub swept: Vec<(String, String)>,
    pub seed: u64,
    pub config: RunConfig,
}

impl RunPlan {
    pub fn swept_string(&self) -> String {
        self.swept.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            layer_sizes: self.config.model.layer_sizes.clone(),
            init_seed: mix_seed(self.config.model.init_seed, self.seed),
        }
    }

    /// Training spec with the run seed applied.
    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            seed: self.seed,
            ..self.config.train.clone()
        }
    }

    pub fn eval_spec(&self) -> AttackSpec {
        AttackSpec {
            rng_seed: mix_seed(self.config.eval.rng_seed, self.seed),
            ..self.config.eval.clone()
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config. Relative data paths stay relative to
    /// the working directory.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))
    }

    /// Reads and validates a config file. Relative data paths are taken
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// The run settings before variants and sweeps are applied.
    pub fn base(&self) -> RunConfig {
        RunConfig {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn output_dir(&self) -> &str {
        self.output_dir.as_deref().unwrap_or(&self.name)
    }

    /// Every problem with the config, across all expanded runs.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.name.trim().is_empty() {
            v.push("name must not be empty".into());
        }
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".into());
        }
        let mut names: Vec<&str> = self.variants.iter().map(|x| x.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            v.push(format!("duplicate variant name {:?}", w[0]));
        }
        for (axis, values) in &self.sweep {
            if values.is_empty() {
                v.push(format!("sweep axis {axis:?} has no values"));
            }
        }
        match self.expand_points() {
            Ok(points) => {
                for (label, swept, rc) in points {
                    let at = point_name(&label, &swept);
                    v.extend(run_violations(&rc).into_iter().map(|e| format!("{at}: {e}")));
                }
            }
            Err(errs) => v.extend(errs),
        }
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            v if v.is_empty() => Ok(()),
            v => Err(CliError::Config(v)),
        }
    }

    /// All runs, ordered by variant, then sweep point, then seed.
    pub fn expand(&self) -> Result<Vec<RunPlan>> {
        self.validate()?;
        let points = self.expand_points().map_err(CliError::Config)?;
        let mut plans = Vec::new();
        for (label, swept, config) in points {
            for &seed in &self.seeds {
                plans.push(RunPlan {
                    run_id: run_id(&label, &swept, seed),
                    label: label.clone(),
                    swept: swept.clone(),
                    seed,
                    config: config.clone(),
                });
            }
        }
        Ok(plans)
    }

    #[allow(clippy::type_complexity)]
    fn expand_points(&self) -> std::result::Result<Vec<(String, Vec<(String, String)>, RunConfig)>, Vec<String>> {
        let base = toml::Value::try_from(self.base()).map_err(|e| vec![e.to_string()])?;
        let default_variant = [Variant {
            name: String::new(),
            set: BTreeMap::new(),
        }];
        let variants = if self.variants.is_empty() {
            &default_variant[..]
        } else {
            &self.variants[..]
        };
        let axes: Vec<(&String, &Vec<toml::Value>)> = self.sweep.iter().collect();
        let mut out = Vec::new();
        let mut errs = Vec::new();
        for variant in variants {
            let mut tree = base.clone();
            for (path, value) in &variant.set {
                if let Err(e) = set_path(&mut tree, path, value.clone()) {
                    errs.push(format!("variant {:?}: {e}", variant.name));
                }
            }
            for combo in cartesian(&axes) {
                let mut t = tree.clone();
                let mut swept = Vec::new();
                for (key, value) in combo {
                    if let Err(e) = set_axis(&mut t, key, value) {
                        errs.push(format!("sweep: {e}"));
                    }
                    swept.push((key.clone(), value_string(value)));
                }
                match t.try_into::<RunConfig>() {
                    Ok(rc) => {
                        let label = if variant.name.is_empty() {
                            rc.train.strategy.to_string()
                        } else {
                            variant.name.clone()
                        };
                        out.push((label, swept, rc));
                    }
                    Err(e) => errs.push(format!("{}: {e}", point_name(&variant.name, &swept))),
                }
            }
        }
        if errs.is_empty() {
            Ok(out)
        } else {
            errs.dedup();
            Err(errs)
        }
    }
}

fn run_violations(rc: &RunConfig) -> Vec<String> {
    let mut v = Vec::new();
    v.extend(rc.train.violations().into_iter().map(|e| format!("train: {e}")));
    v.extend(rc.eval.violations().into_iter().map(|e| format!("eval: {e}")));
    let spec = ModelSpec {
        layer_sizes: rc.model.layer_sizes.clone(),
        init_seed: 0,
    };
    if let Err(e) = spec.validate() {
        v.push(format!("model: {e}"));
    }
    match &rc.dataset {
        DatasetSpec::Idx { n_train, n_test, .. } | DatasetSpec::Blobs { n_train, n_test, .. } => {
            if *n_train == 0 || *n_test == 0 {
                v.push("dataset: n_train and n_test must be >= 1".into());
            }
        }
    }
    if let DatasetSpec::Blobs { margin, .. } = &rc.dataset {
        if rc.model.layer_sizes.first() != Some(&2) {
            v.push("model: blobs are 2-D, so layer_sizes must start with 2".into());
        }
        if !(*margin >= 0.0) {
            v.push(format!("dataset: margin must be >= 0 (got {margin})"));
        }
    }
    v
}

/// Sets a dotted `path` inside `tree`. Every parent must already be a
/// table; the leaf itself may be new (unknown keys are caught when the tree
/// is deserialized).
pub fn set_path(tree: &mut toml::Value, path: &str, value: toml::Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed path {path:?}"));
    }
    let (leaf, parents) = parts.split_last().expect("non-empty");
    let mut node = tree;
    for (i, p) in parents.iter().enumerate() {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*p))
            .filter(|n| n.is_table())
            .ok_or_else(|| format!("path {path:?}: no table at {:?}", parts[..=i].join(".")))?;
    }
    let table = node.as_table_mut().ok_or_else(|| format!("path {path:?}: parent is not a table"))?;
    table.insert((*leaf).to_string(), value);
    Ok(())
}

/// Applies one sweep value. A key naming several comma-separated paths is
/// a linked axis: an array value of matching length is zipped over the
/// paths, any other value is set on every path.
fn set_axis(tree: &mut toml::Value, key: &str, value: &toml::Value) -> std::result::Result<(), String> {
    let paths: Vec<&str> = key.split(',').map(str::trim).collect();
    if paths.len() == 1 {
        return set_path(tree, paths[0], value.clone());
    }
    match value {
        toml::Value::Array(items) if items.len() == paths.len() => {
            paths.iter().zip(items).try_for_each(|(p, v)| set_path(tree, p, v.clone()))
        }
        toml::Value::Array(items) => Err(format!("linked axis {key:?} has {} paths but a value of length {}", paths.len(), items.len())),
        v => paths.iter().try_for_each(|p| set_path(tree, p, v.clone())),
    }
}

fn cartesian<'a>(axes: &[(&'a String, &'a Vec<toml::Value>)]) -> Vec<Vec<(&'a String, &'a toml::Value)>> {
    axes.iter().fold(vec![Vec::new()], |acc, (path, values)| {
        acc.into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((*path, v));
                    p
                })
            })
            .collect()
    })
}

fn value_string(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn point_name(label: &str, swept: &[(String, String)]) -> String {
    let mut s = if label.is_empty() { "base".to_string() } else { label.to_string() };
    for (k, v) in swept {
        let _ = write!(s, " {k}={v}");
    }
    s
}

/// File-system-safe run identifier.
pub fn run_id(label: &str, swept: &[(String, String)], seed: u64) -> String {
    let mut id = label.to_string();
    for (k, v) in swept {
        let short = k.split(',').next().unwrap_or(k).rsplit('.').next().unwrap_or(k);
        let _ = write!(id, "__{short}={v}");
    }
    let _ = write!(id, "__seed={seed}");
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._=-".contains(c) { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
seeds = [0, 1]

[dataset]
kind = "blobs"
n_train = 40
n_test = 20
margin = 0.1

[model]
layer_sizes = [2, 4, 2]

[train]
strategy = "TRADES"
epochs = 1

[train.attack]
epsilon = 0.05
alpha = 0.02
steps = 2
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let c = ExperimentConfig::from_toml(BASE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.eval.steps, 100);
        assert_eq!(c.expand().unwrap().len(), 2);
    }

    #[test]
    fn sweep_is_cartesian_and_ordered() {
        let text = format!("{BASE}\n[sweep]\n\"train.beta\" = [2.0, 4.0, 6.0]\n\"train.attack.alpha\" = [0.01, 0.02]\n");
        let plans = ExperimentConfig::from_toml(&text).unwrap().expand().unwrap();
        assert_eq!(plans.len(), 12);
        assert_eq!(plans[0].config.train.attack.alpha, 0.01);
        assert_eq!(plans[0].config.train.beta, 2.0);
        assert_eq!(plans[2].config.train.beta, 4.0);
        assert_eq!(plans[0].seed, 0);
        assert_eq!(plans[1].seed, 1);
        let mut ids: Vec<_> = plans.iter().map(|p| p.run_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 12);
    }

    #[test]
    fn variants_override_and_label() {
        let text = format!(
            "{BASE}\n[[variants]]\nname = \"FastAT-Zero\"\nset = {{ \"train.strategy\" = \"FastAT\", \"train.attack.init\" = \"Zero\" }}\n"
        );
        let plans = ExperimentConfig::from_toml(&text).unwrap().expand().unwrap();
        assert_eq!(plans[0].label, "FastAT-Zero");
        assert_eq!(plans[0].config.train.strategy, robustlab::Strategy::FastAT);
        assert_eq!(plans[0].config.train.attack.init, robustlab::InitKind::Zero);
    }

    #[test]
    fn optional_leaves_can_be_set() {
        let text = format!("{BASE}\n[sweep]\n\"train.attack.init_alpha\" = [0.03]\n");
        let plans = ExperimentConfig::from_toml(&text).unwrap().expand().unwrap();
        assert_eq!(plans[0].config.train.attack.init_alpha, Some(0.03));
    }

    #[test]
    fn lists_every_violation() {
        let text = BASE
            .replace("seeds = [0, 1]", "seeds = []")
            .replace("epochs = 1", "epochs = 1\nbeta = -1.0\nbatch_size = 0")
            .replace("epsilon = 0.05", "epsilon = -0.05")
            + "\n[sweep]\n\"train.nope.alpha\" = [1.0]\n";
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        let CliError::Config(v) = err else { panic!() };
        assert!(v.iter().any(|e| e.contains("seeds")), "{v:?}");
        assert!(v.iter().any(|e| e.contains("train.nope")), "{v:?}");
    }

    #[test]
    fn range_errors_are_all_reported() {
        let text = BASE
            .replace("seeds = [0, 1]", "seeds = []")
            .replace("epochs = 1", "epochs = 1\nbeta = -1.0\nbatch_size = 0")
            .replace("epsilon = 0.05", "epsilon = -0.05");
        let CliError::Config(v) = ExperimentConfig::from_toml(&text).unwrap_err() else { panic!() };
        for needle in ["seeds", "beta", "batch_size", "epsilon"] {
            assert!(v.iter().any(|e| e.contains(needle)), "{needle} missing from {v:?}");
        }
    }

    #[test]
    fn linked_axes_move_together() {
        let text = format!(
            "{BASE}\n[sweep]\n\"train.attack.epsilon, eval.epsilon\" = [0.05, 0.1]\n\"train.attack.epsilon,train.attack.alpha\" = [[0.2, 0.1]]\n"
        );
        let plans = ExperimentConfig::from_toml(&text).unwrap().expand().unwrap();
        assert_eq!(plans.len(), 4);
        // keys sort so the zipped axis applies last
        assert_eq!(plans[0].config.eval.epsilon, 0.05);
        assert_eq!(plans[0].config.train.attack.epsilon, 0.2);
        assert_eq!(plans[0].config.train.attack.alpha, 0.1);
        assert_eq!(plans[2].config.eval.epsilon, 0.1);
        let bad = format!("{BASE}\n[sweep]\n\"train.attack.epsilon,eval.epsilon\" = [[0.1, 0.2, 0.3]]\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn unknown_leaf_is_rejected() {
        let text = format!("{BASE}\n[sweep]\n\"train.attack.epsilom\" = [0.1]\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn run_ids_are_path_safe() {
        let id = run_id("Fast AT/x", &[("train.attack.alpha".into(), "0.1".into())], 3);
        assert_eq!(id, "Fast_AT_x__alpha=0.1__seed=3");
    }
}

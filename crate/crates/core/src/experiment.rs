//! Experiment configuration and the three experiment drivers: the
//! expert-specific matrix, the annotation-count sweep and the expert-count
//! sweep. Every grid cell is written to a results ledger as soon as it is
//! computed; tables are rendered from the ledger alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{
    expert_combinations, load_manifest, sample_indices, starting_indices, ExpertCombination, ExpertId,
    MultiExpertDataset, SamplingPlan,
};
use crate::error::{Error, Result};
use crate::model::{CinUnet, ModelConfig, ReinitMode};
use crate::rng::derive_seed;
use crate::stats::{
    aggregate, emit_table, highlight, significantly_better, AggregatedResult, Cell, Metric, Provenance, Format, RunResult, Table,
    TableRow, TestKind,
};
use crate::synth::{default_reference_styles, generate_dataset, SynthConfig};
use crate::train::{evaluate_model, expert_samples, finetune, train, EvalSummary, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[serde(alias = "expert-matrix")]
    ExpertMatrix,
    #[serde(alias = "ann-count")]
    AnnCount,
    #[serde(alias = "expert-count")]
    ExpertCount,
}

impl ExperimentKind {
    /// Directory name inside the results root.
    pub fn slug(self) -> &'static str {
        match self {
            ExperimentKind::ExpertMatrix => "expert-matrix",
            ExperimentKind::AnnCount => "ann-count",
            ExperimentKind::ExpertCount => "expert-count",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert-matrix" | "expert_matrix" => Ok(ExperimentKind::ExpertMatrix),
            "ann-count" | "ann_count" => Ok(ExperimentKind::AnnCount),
            "expert-count" | "expert_count" => Ok(ExperimentKind::ExpertCount),
            other => Err(Error::Config(format!("unknown experiment {other:?}"))),
        }
    }
}

/// Where the dataset comes from: a directory in the on-disk layout, or a
/// synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub root: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    /// Leading cases used for training; the rest form the test set.
    pub n_train: usize,
}

impl DataSpec {
    pub fn load(&self) -> Result<(MultiExpertDataset, MultiExpertDataset)> {
        let ds = match (&self.root, &self.synth) {
            (Some(root), None) => load_manifest(root)?,
            (None, Some(synth)) => generate_dataset(synth)?,
            _ => return Err(Error::Config("data needs exactly one of `root` and `synth`".into())),
        };
        if self.n_train == 0 || self.n_train >= ds.len() {
            return Err(Error::Config(format!(
                "n_train {} leaves no training or test cases among {}",
                self.n_train,
                ds.len()
            )));
        }
        ds.split(self.n_train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub profile: Profile,
    pub data: DataSpec,
    pub new_experts: Vec<ExpertId>,
    /// Experts available for the training stage.
    pub pretrain_experts: Vec<ExpertId>,
    /// Train experts (rows) of the expert matrix.
    pub matrix_experts: Vec<ExpertId>,
    /// Repeated runs per matrix cell.
    pub matrix_runs: usize,
    pub annotation_counts: Vec<usize>,
    /// Experts per combination in the annotation-count sweep.
    pub combo_size: usize,
    /// Training-stage expert counts; 0 means training from scratch.
    pub expert_counts: Vec<usize>,
    /// Fine-tuning samples in the expert-count sweep.
    pub finetune_samples: usize,
    pub n_ways: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub alpha: f64,
    /// Test used wherever results are not paired by sampling way.
    pub unpaired_test: TestKind,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn defaults(kind: ExperimentKind, profile: Profile) -> Self {
        let ids = |r: std::ops::RangeInclusive<u32>| r.map(ExpertId).collect::<Vec<_>>();
        let (data, model, train, counts, expert_counts, runs) = match profile {
            Profile::Desk => (
                DataSpec {
                    root: None,
                    synth: Some(SynthConfig::new(50, 64, 64, default_reference_styles(), 2024)),
                    n_train: 34,
                },
                ModelConfig::desk(5),
                TrainConfig::desk(),
                vec![5, 34],
                vec![0, 1, 3, 5],
                3,
            ),
            Profile::Paper => (
                DataSpec {
                    root: None,
                    synth: Some(SynthConfig::new(39, 192, 192, default_reference_styles(), 2024)),
                    n_train: 34,
                },
                ModelConfig::paper(5),
                TrainConfig::paper(),
                vec![5, 10, 15, 20, 25, 30, 34],
                vec![0, 1, 2, 3, 4, 5],
                10,
            ),
        };
        ExperimentSpec {
            kind,
            profile,
            data,
            new_experts: ids(6..=7),
            pretrain_experts: ids(1..=5),
            matrix_experts: ids(1..=7),
            matrix_runs: runs,
            annotation_counts: counts,
            combo_size: 3,
            expert_counts,
            finetune_samples: 10,
            n_ways: 10,
            model,
            train,
            alpha: 0.05,
            unpaired_test: TestKind::Unpaired,
            out_dir: PathBuf::from("results"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shared()?;
        let n = self.data.n_train;
        match self.kind {
            ExperimentKind::AnnCount => {
                if self.annotation_counts.is_empty() {
                    return Err(Error::Config("annotation_counts is empty".into()));
                }
                if let Some(&c) = self.annotation_counts.iter().find(|&&c| c == 0 || c > n) {
                    return Err(Error::Config(format!("annotation count {c} outside 1..={n}")));
                }
                if self.combo_size == 0 || self.combo_size > self.pretrain_experts.len() {
                    return Err(Error::Config(format!("combo_size {} is not attainable", self.combo_size)));
                }
            }
            ExperimentKind::ExpertCount => {
                if self.expert_counts.is_empty() {
                    return Err(Error::Config("expert_counts is empty".into()));
                }
                if self.finetune_samples == 0 || self.finetune_samples > n {
                    return Err(Error::Config(format!(
                        "finetune_samples {} outside 1..={n}",
                        self.finetune_samples
                    )));
                }
                if let Some(&k) = self.expert_counts.iter().find(|&&k| k > self.pretrain_experts.len()) {
                    return Err(Error::Config(format!(
                        "expert count {k} exceeds the {} training-stage experts",
                        self.pretrain_experts.len()
                    )));
                }
            }
            ExperimentKind::ExpertMatrix => {
                if self.matrix_experts.is_empty() {
                    return Err(Error::Config("matrix_experts is empty".into()));
                }
                if self.matrix_runs < 2 {
                    return Err(Error::Config("matrix_runs must be at least 2 for significance tests".into()));
                }
            }
        }
        if self.n_ways == 0 || self.n_ways > n {
            return Err(Error::Config(format!("n_ways {} outside 1..={n}", self.n_ways)));
        }
        Ok(())
    }

    /// Checks everything except the fields only one experiment kind uses.
    pub fn validate_shared(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.new_experts.is_empty() {
            return Err(Error::Config("new_experts is empty".into()));
        }
        if self.pretrain_experts.iter().any(|e| self.new_experts.contains(e)) {
            return Err(Error::Config("new experts must not take part in the training stage".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        if self.unpaired_test == TestKind::Paired {
            return Err(Error::Config("unpaired_test must be `unpaired` or `welch`".into()));
        }
        if self.train.crop != [self.model.input_size.0, self.model.input_size.1] {
            return Err(Error::Config("train.crop must equal model.input_size".into()));
        }
        Ok(())
    }

    /// Hash of everything that influences results (the output location does not).
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("spec serializes");
        if let Value::Object(map) = &mut v {
            map.remove("out_dir");
        }
        hash_value(&v)
    }

    /// Directory holding the experiment's ledger, config and tables.
    pub fn experiment_dir(&self) -> PathBuf {
        self.out_dir.join(self.kind.slug())
    }

    pub fn ledger_dir(&self) -> PathBuf {
        self.experiment_dir().join("runs")
    }
}

fn hash_value(v: &Value) -> String {
    let digest = Sha256::digest(serde_json::to_vec(v).expect("json value serializes"));
    hex::encode(digest)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a config document over the defaults of its `kind` and `profile`
/// (explicit arguments take precedence over the document). Unknown keys are
/// rejected by name.
pub fn parse_config(text: &str, kind: Option<ExperimentKind>, profile: Option<Profile>) -> Result<ExperimentSpec> {
    let doc = read_doc(text)?;
    let kind = match kind {
        Some(k) => k,
        None => doc_field(&doc, "kind")?.ok_or_else(|| Error::Config("missing field `kind`".into()))?,
    };
    let profile = resolve_profile(&doc, profile)?;
    let spec = build_spec(kind, profile, doc)?;
    spec.validate()?;
    Ok(spec)
}

/// Like [`parse_config`] for commands outside the experiment grids: the kind
/// defaults to the annotation-count sweep and kind-specific fields are not checked.
pub fn parse_shared_config(text: &str, profile: Option<Profile>) -> Result<ExperimentSpec> {
    let doc = read_doc(text)?;
    let kind = doc_field(&doc, "kind")?.unwrap_or(ExperimentKind::AnnCount);
    let profile = resolve_profile(&doc, profile)?;
    let spec = build_spec(kind, profile, doc)?;
    spec.validate_shared()?;
    Ok(spec)
}

fn read_doc(text: &str) -> Result<Value> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    if !doc.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    Ok(doc)
}

fn doc_field<T: serde::de::DeserializeOwned>(doc: &Value, name: &str) -> Result<Option<T>> {
    doc.get(name)
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("{name}: {e}"))))
        .transpose()
}

fn resolve_profile(doc: &Value, profile: Option<Profile>) -> Result<Profile> {
    match profile {
        Some(p) => Ok(p),
        None => Ok(doc_field(doc, "profile")?.unwrap_or(Profile::Desk)),
    }
}

fn build_spec(kind: ExperimentKind, profile: Profile, overrides: Value) -> Result<ExperimentSpec> {
    let mut base = serde_json::to_value(ExperimentSpec::defaults(kind, profile))?;
    // a data source given explicitly replaces the default one
    if let Some(data) = overrides.get("data") {
        if data.get("root").is_some_and(|r| !r.is_null()) {
            base["data"]["synth"] = Value::Null;
        }
    }
    merge(&mut base, overrides);
    base["kind"] = serde_json::to_value(kind)?;
    base["profile"] = serde_json::to_value(profile)?;
    serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &Path, kind: Option<ExperimentKind>, profile: Option<Profile>) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, kind, profile)
}

/// Canonical JSON of a spec: every field, defaults included.
pub fn canonical_json(spec: &ExperimentSpec) -> Result<String> {
    Ok(serde_json::to_string_pretty(spec)? + "\n")
}

/// Results ledger: one JSON file per grid cell.
#[derive(Debug, Clone)]
pub struct Ledger {
    dir: PathBuf,
}

impl Ledger {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Ledger { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, run_id: &str) -> PathBuf {
        self.dir.join(format!("{run_id}.json"))
    }

    /// The stored result for `run_id` when its config hash matches.
    pub fn lookup(&self, run_id: &str, config_hash: &str) -> Result<Option<RunResult>> {
        let path = self.path(run_id);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let run: RunResult =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok((run.provenance.config_hash == config_hash).then_some(run))
    }

    pub fn record(&self, run_id: &str, run: &RunResult) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(run_id);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(run)? + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Every result in the ledger, ordered by run id.
    pub fn read_all(&self) -> Result<Vec<RunResult>> {
        let entries = fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
            })
            .collect()
    }
}

/// Drives one experiment; completed cells are reused when `resume` is set.
pub struct Runner {
    pub spec: ExperimentSpec,
    pub resume: bool,
    pub verbose: bool,
    hash: String,
    ledger: Ledger,
    train_set: MultiExpertDataset,
    test_set: MultiExpertDataset,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunResult>,
    pub tables: Vec<Table>,
}

impl Runner {
    pub fn new(spec: ExperimentSpec, resume: bool) -> Result<Self> {
        spec.validate()?;
        let (train_set, test_set) = spec.data.load()?;
        let hash = spec.config_hash();
        let ledger = Ledger::new(spec.ledger_dir());
        Ok(Runner {
            spec,
            resume,
            verbose: false,
            hash,
            ledger,
            train_set,
            test_set,
        })
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    fn log(&self, msg: impl FnOnce() -> String) {
        if self.verbose {
            eprintln!("[{}] {}", self.spec.kind.slug(), msg());
        }
    }

    fn check_experts(&self, experts: &[ExpertId]) -> Result<()> {
        for e in experts {
            if !self.train_set.roster().contains(e) {
                return Err(Error::MissingMask {
                    case: self.train_set.case_indices().first().copied().unwrap_or(0),
                    expert: e.0,
                    path: PathBuf::new(),
                });
            }
        }
        Ok(())
    }

    fn model_config(&self, n_experts: usize) -> ModelConfig {
        ModelConfig {
            n_experts,
            ..self.spec.model.clone()
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.spec.train.clone()
        }
    }

    /// A model with a single freshly initialised branch for `expert`.
    fn fresh_model(&self, expert: ExpertId, seed: u64) -> Result<CinUnet> {
        let mut model = CinUnet::build(&self.model_config(1), seed)?;
        model.retain_experts(&[]);
        model.reinit_expert_branch(expert, ReinitMode::Identity, false)?;
        Ok(model)
    }

    fn cell<F>(&self, run_id: &str, compute: F) -> Result<RunResult>
    where
        F: FnOnce() -> Result<(EvalSummary, RunResult)>,
    {
        if self.resume {
            if let Some(run) = self.ledger.lookup(run_id, &self.hash)? {
                self.log(|| format!("{run_id}: reused"));
                return Ok(run);
            }
        }
        let start = Instant::now();
        let (summary, run) = compute()?;
        self.ledger.record(run_id, &run)?;
        self.log(|| {
            format!(
                "{run_id}: dice {:.4} assd {:.3} hd95 {:.3} ({:.1} s)",
                summary.dice,
                summary.assd,
                summary.hd95,
                start.elapsed().as_secs_f64()
            )
        });
        Ok(run)
    }

    fn result(&self, row: String, arm: Option<&str>, combo: Option<ExpertCombination>, way: usize, u: ExpertId, metrics: EvalSummary, seed: u64) -> RunResult {
        RunResult {
            experiment: self.spec.kind.slug().to_string(),
            row,
            arm: arm.map(str::to_string),
            combo,
            sampling_way: way,
            new_expert: u,
            metrics,
            provenance: Provenance {
                config_hash: self.hash.clone(),
                seed,
            },
        }
    }

    /// Training-stage model for `combo`, cached on disk across experiments.
    fn pretrained(&self, combo: &ExpertCombination) -> Result<CinUnet> {
        let seed = derive_seed(&[self.spec.train.seed, 1, combo_key(combo)]);
        let key = serde_json::json!({
            "model": self.spec.model,
            "train": self.spec.train,
            "data": self.spec.data,
            "pretrain_experts": self.spec.pretrain_experts,
            "combo": combo,
        });
        let path = self
            .spec
            .out_dir
            .join("cache")
            .join(format!("pretrain-{}-{}.ckpt", combo.label(), &hash_value(&key)[..16]));
        if path.exists() {
            if let Ok(ck) = Checkpoint::load(&path) {
                self.log(|| format!("pretrained {} loaded from cache", combo.label()));
                return Ok(ck.model);
            }
        }
        let n_branches = self.spec.pretrain_experts.iter().map(|e| e.0 as usize).max().unwrap_or(1);
        let mut model = CinUnet::build(&self.model_config(n_branches), seed)?;
        model.retain_experts(combo.members());
        let cfg = self.train_config(seed);
        let start = Instant::now();
        let data = self.train_set.restrict(combo, &(1..=self.train_set.len()).collect::<Vec<_>>())?;
        let out = train(&mut model, &data, combo, &cfg)?;
        self.log(|| {
            format!(
                "pretrained {} in {:.1} s (final loss {:.4})",
                combo.label(),
                start.elapsed().as_secs_f64(),
                out.final_loss().unwrap_or(f64::NAN)
            )
        });
        Checkpoint::new(model.clone(), Some(cfg), self.spec.train.train_steps, seed).save(&path)?;
        Ok(model)
    }

    fn samples(&self, n: usize, way: usize) -> Result<Vec<usize>> {
        let starts = starting_indices(self.train_set.len(), self.spec.n_ways)?;
        sample_indices(&SamplingPlan::new(starts[way - 1], n, self.train_set.len())?)
    }

    fn adapt(&self, base: &CinUnet, u: ExpertId, n: usize, way: usize, combo: &ExpertCombination) -> Result<(EvalSummary, u64)> {
        let seed = derive_seed(&[self.spec.train.seed, 2, u.0 as u64, n as u64, way as u64, combo_key(combo)]);
        let mut model = base.clone();
        let data = expert_samples(&self.train_set, u, &self.samples(n, way)?)?;
        finetune(&mut model, &data, u, &self.train_config(seed))?;
        Ok((evaluate_model(&model, &self.test_set, u, u)?, seed))
    }

    fn scratch(&self, u: ExpertId, n: usize, way: usize) -> Result<(EvalSummary, u64)> {
        let seed = derive_seed(&[self.spec.train.seed, 3, u.0 as u64, n as u64, way as u64]);
        let mut model = self.fresh_model(u, seed)?;
        let positions = self.samples(n, way)?;
        let data = self.train_set.restrict(&ExpertCombination::single(u), &positions)?;
        train(&mut model, &data, &ExpertCombination::single(u), &self.train_config(seed))?;
        Ok((evaluate_model(&model, &self.test_set, u, u)?, seed))
    }

    pub fn run(&self) -> Result<ExperimentOutcome> {
        let runs = match self.spec.kind {
            ExperimentKind::ExpertMatrix => self.run_expert_matrix()?,
            ExperimentKind::AnnCount => self.run_ann_count()?,
            ExperimentKind::ExpertCount => self.run_expert_count()?,
        };
        let tables = build_tables(self.spec.kind, &runs, self.spec.unpaired_test, self.spec.alpha)?;
        Ok(ExperimentOutcome { runs, tables })
    }

    /// One single-expert model per (train expert, run), scored on every new expert.
    fn run_expert_matrix(&self) -> Result<Vec<RunResult>> {
        let spec = &self.spec;
        self.check_experts(&spec.matrix_experts)?;
        self.check_experts(&spec.new_experts)?;
        let mut runs = Vec::new();
        for &r in &spec.matrix_experts {
            for run in 1..=spec.matrix_runs {
                let ids: Vec<String> = spec
                    .new_experts
                    .iter()
                    .map(|u| format!("test{}-train{}-run{run:02}", u.0, r.0))
                    .collect();
                let cached: Option<Vec<RunResult>> = if self.resume {
                    ids.iter()
                        .map(|id| self.ledger.lookup(id, &self.hash))
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .collect()
                } else {
                    None
                };
                if let Some(found) = cached {
                    self.log(|| format!("train {r} run {run}: reused"));
                    runs.extend(found);
                    continue;
                }
                let seed = derive_seed(&[spec.train.seed, 4, r.0 as u64, run as u64]);
                let start = Instant::now();
                let mut model = self.fresh_model(r, seed)?;
                let combo = ExpertCombination::single(r);
                let data = self.train_set.restrict(&combo, &(1..=self.train_set.len()).collect::<Vec<_>>())?;
                train(&mut model, &data, &combo, &self.train_config(seed))?;
                for (&u, id) in spec.new_experts.iter().zip(&ids) {
                    let summary = evaluate_model(&model, &self.test_set, r, u)?;
                    let res = self.result(r.to_string(), None, Some(combo.clone()), run, u, summary, seed);
                    self.ledger.record(id, &res)?;
                    self.log(|| format!("{id}: dice {:.4} ({:.1} s)", summary.dice, start.elapsed().as_secs_f64()));
                    runs.push(res);
                }
            }
        }
        Ok(runs)
    }

    fn run_ann_count(&self) -> Result<Vec<RunResult>> {
        let spec = &self.spec;
        self.check_experts(&spec.pretrain_experts)?;
        self.check_experts(&spec.new_experts)?;
        let combos = expert_combinations(&spec.pretrain_experts.iter().copied().collect(), spec.combo_size)?;
        let mut runs = Vec::new();
        for &u in &spec.new_experts {
            for &n in &spec.annotation_counts {
                for way in 1..=spec.n_ways {
                    let id = format!("exp{}-n{n:02}-wo-way{way:02}", u.0);
                    runs.push(self.cell(&id, || {
                        let (s, seed) = self.scratch(u, n, way)?;
                        Ok((s, self.result(n.to_string(), Some("w/o"), None, way, u, s, seed)))
                    })?);
                }
            }
            for combo in &combos {
                let mut base: Option<CinUnet> = None;
                for &n in &spec.annotation_counts {
                    for way in 1..=spec.n_ways {
                        let id = format!("exp{}-n{n:02}-w-{}-way{way:02}", u.0, combo.label());
                        runs.push(self.cell(&id, || {
                            if base.is_none() {
                                base = Some(self.pretrained(combo)?);
                            }
                            let (s, seed) = self.adapt(base.as_ref().expect("loaded"), u, n, way, combo)?;
                            Ok((s, self.result(n.to_string(), Some("w/"), Some(combo.clone()), way, u, s, seed)))
                        })?);
                    }
                }
            }
        }
        Ok(runs)
    }

    fn run_expert_count(&self) -> Result<Vec<RunResult>> {
        let spec = &self.spec;
        self.check_experts(&spec.pretrain_experts)?;
        self.check_experts(&spec.new_experts)?;
        let n = spec.finetune_samples;
        let roster = spec.pretrain_experts.iter().copied().collect();
        let mut runs = Vec::new();
        for &u in &spec.new_experts {
            for &k in &spec.expert_counts {
                if k == 0 {
                    for way in 1..=spec.n_ways {
                        let id = format!("exp{}-k0-way{way:02}", u.0);
                        runs.push(self.cell(&id, || {
                            let (s, seed) = self.scratch(u, n, way)?;
                            Ok((s, self.result("0".into(), None, None, way, u, s, seed)))
                        })?);
                    }
                    continue;
                }
                for combo in expert_combinations(&roster, k)? {
                    let mut base: Option<CinUnet> = None;
                    for way in 1..=spec.n_ways {
                        let id = format!("exp{}-k{k}-{}-way{way:02}", u.0, combo.label());
                        runs.push(self.cell(&id, || {
                            if base.is_none() {
                                base = Some(self.pretrained(&combo)?);
                            }
                            let (s, seed) = self.adapt(base.as_ref().expect("loaded"), u, n, way, &combo)?;
                            Ok((s, self.result(k.to_string(), None, Some(combo.clone()), way, u, s, seed)))
                        })?);
                    }
                }
            }
        }
        Ok(runs)
    }
}

fn combo_key(combo: &ExpertCombination) -> u64 {
    combo.members().iter().fold(0u64, |acc, e| acc * 64 + e.0 as u64)
}

fn row_order(label: &str) -> (u64, String) {
    let digits: String = label.chars().filter(char::is_ascii_digit).collect();
    (digits.parse().unwrap_or(u64::MAX), label.to_string())
}

/// Aggregated rows of one (new expert, arm) slice of the ledger, in row order.
fn rows_of(runs: &[&RunResult], arm: Option<&str>) -> Result<Vec<(String, AggregatedResult)>> {
    let mut groups: BTreeMap<(u64, String), Vec<RunResult>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.arm.as_deref() == arm) {
        groups.entry(row_order(&r.row)).or_default().push((*r).clone());
    }
    groups
        .into_iter()
        .map(|((_, label), rs)| Ok((label, aggregate(&rs)?)))
        .collect()
}

fn undefined_flag(runs: &[&RunResult], row: &str, arm: Option<&str>) -> Option<String> {
    let n: usize = runs
        .iter()
        .filter(|r| r.row == row && r.arm.as_deref() == arm)
        .map(|r| r.metrics.n_undefined)
        .sum();
    (n > 0).then(|| format!("{n} undefined"))
}

/// Renders the experiment's tables (one per new expert) from ledger entries.
pub fn build_tables(kind: ExperimentKind, runs: &[RunResult], unpaired: TestKind, alpha: f64) -> Result<Vec<Table>> {
    let mut by_expert: BTreeMap<ExpertId, Vec<&RunResult>> = BTreeMap::new();
    for r in runs {
        by_expert.entry(r.new_expert).or_default().push(r);
    }
    let mut tables = Vec::new();
    for (u, rs) in by_expert {
        let table = match kind {
            ExperimentKind::ExpertMatrix => {
                simple_table(format!("Tested on {u}"), "Train".into(), &rs, unpaired, alpha)?
            }
            ExperimentKind::ExpertCount => {
                simple_table(format!("Adapt to {u}"), "# Experts".into(), &rs, TestKind::Paired, alpha)?
            }
            ExperimentKind::AnnCount => arms_table(u, &rs, alpha)?,
        };
        tables.push(table);
    }
    Ok(tables)
}

fn simple_table(title: String, row_header: String, runs: &[&RunResult], kind: TestKind, alpha: f64) -> Result<Table> {
    let rows = rows_of(runs, None)?;
    let refs: Vec<&AggregatedResult> = rows.iter().map(|(_, a)| a).collect();
    let report = if refs.len() >= 2 {
        Some(highlight(&refs, kind, alpha)?)
    } else {
        None
    };
    let table_rows = rows
        .iter()
        .enumerate()
        .map(|(i, (label, agg))| TableRow {
            label: label.clone(),
            cells: Metric::ALL
                .iter()
                .map(|&m| Cell {
                    value: m.display(agg.mean(m)),
                    bold: report.as_ref().is_some_and(|r| r.column(m).bold.contains(&i)),
                    underline: false,
                    flag: if m == Metric::Dice { None } else { undefined_flag(runs, label, None) },
                })
                .collect(),
        })
        .collect();
    Ok(Table {
        title,
        row_header,
        columns: Metric::ALL.iter().map(|m| m.label().to_string()).collect(),
        rows: table_rows,
    })
}

fn arms_table(u: ExpertId, runs: &[&RunResult], alpha: f64) -> Result<Table> {
    let with = rows_of(runs, Some("w/"))?;
    let without = rows_of(runs, Some("w/o"))?;
    let labels: Vec<&String> = with.iter().map(|(l, _)| l).collect();
    if labels != without.iter().map(|(l, _)| l).collect::<Vec<_>>() {
        return Err(Error::Data("the two arms cover different sample counts".into()));
    }
    // all (count, arm) vectors compete for bold within a metric
    let all: Vec<&AggregatedResult> = with.iter().chain(&without).map(|(_, a)| a).collect();
    let report = if all.len() >= 2 {
        Some(highlight(&all, TestKind::Paired, alpha)?)
    } else {
        None
    };
    let k = with.len();
    let mut rows = Vec::new();
    for i in 0..k {
        let mut cells = Vec::new();
        for m in Metric::ALL {
            let bold = |idx: usize| report.as_ref().is_some_and(|r| r.column(m).bold.contains(&idx));
            let under = with[i].1.ways.len() >= 2
                && significantly_better(&with[i].1, &without[i].1, m, TestKind::Paired, alpha)?;
            let flag = |arm| if m == Metric::Dice { None } else { undefined_flag(runs, &with[i].0, Some(arm)) };
            cells.push(Cell {
                value: m.display(with[i].1.mean(m)),
                bold: bold(i),
                underline: under,
                flag: flag("w/"),
            });
            cells.push(Cell {
                value: m.display(without[i].1.mean(m)),
                bold: bold(k + i),
                underline: false,
                flag: flag("w/o"),
            });
        }
        rows.push(TableRow {
            label: with[i].0.clone(),
            cells,
        });
    }
    let columns = Metric::ALL
        .iter()
        .flat_map(|m| [format!("{} w/", m.label()), format!("{} w/o", m.label())])
        .collect();
    Ok(Table {
        title: format!("Adapt to {u}"),
        row_header: "# Samples".into(),
        columns,
        rows,
    })
}

/// Renders several tables as one document.
pub fn render_tables(tables: &[Table], format: Format) -> Result<String> {
    match format {
        Format::Markdown => Ok(tables
            .iter()
            .map(|t| emit_table(t, format))
            .collect::<Result<Vec<_>>>()?
            .join("\n")),
        Format::Json => Ok(serde_json::to_string_pretty(tables)? + "\n"),
        Format::Csv => {
            let mut out = String::new();
            for (i, t) in tables.iter().enumerate() {
                let body = emit_table(t, format)?;
                for (j, line) in body.lines().enumerate() {
                    if j == 0 && i > 0 {
                        continue;
                    }
                    let first = if j == 0 { "table".to_string() } else { format!("\"{}\"", t.title.replace('"', "\"\"")) };
                    out.push_str(&format!("{first},{line}\n"));
                }
            }
            Ok(out)
        }
    }
}

const CONFIG_FILE: &str = "config.json";

/// Writes the canonical config next to the ledger.
pub fn write_config(spec: &ExperimentSpec) -> Result<()> {
    let dir = spec.experiment_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, canonical_json(spec)?).map_err(|e| Error::io(&path, e))
}

/// Writes `table.md`, `table.csv` and `table.json` into the experiment directory.
pub fn write_tables(dir: &Path, tables: &[Table]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (format, ext) in [(Format::Markdown, "md"), (Format::Csv, "csv"), (Format::Json, "json")] {
        let path = dir.join(format!("table.{ext}"));
        fs::write(&path, render_tables(tables, format)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Rebuilds the tables of an experiment directory from its config and ledger.
pub fn report_from_ledger(experiment_dir: &Path) -> Result<Vec<Table>> {
    let path = experiment_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let spec = parse_config(&text, None, None)?;
    let hash = spec.config_hash();
    let runs: Vec<RunResult> = Ledger::new(experiment_dir.join("runs"))
        .read_all()?
        .into_iter()
        .filter(|r| r.provenance.config_hash == hash)
        .collect();
    if runs.is_empty() {
        return Err(Error::Data(format!("{} holds no results for its config", experiment_dir.display())));
    }
    build_tables(spec.kind, &runs, spec.unpaired_test, spec.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let spec = parse_config(r#"{"kind": "ann_count"}"#, None, None).unwrap();
        assert_eq!(spec, ExperimentSpec::defaults(ExperimentKind::AnnCount, Profile::Desk));
        assert_eq!(spec.new_experts, vec![ExpertId(6), ExpertId(7)]);
        let spec = parse_config(r#"{"kind": "expert-count", "profile": "paper"}"#, None, None).unwrap();
        assert_eq!(spec.annotation_counts, vec![5, 10, 15, 20, 25, 30, 34]);
        assert_eq!(spec.train.batch_size, 16);
    }

    #[test]
    fn nested_overrides_merge() {
        let spec = parse_config(r#"{"kind": "ann_count", "train": {"train_steps": 7}}"#, None, None).unwrap();
        assert_eq!(spec.train.train_steps, 7);
        assert_eq!(spec.train.finetune_steps, TrainConfig::desk().finetune_steps);
    }

    #[test]
    fn validation_errors() {
        let err = parse_config(r#"{"kind": "ann_count", "annotation_counts": [50]}"#, None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = parse_config(r#"{"kind": "ann_count", "bogus": 1}"#, None, None).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = parse_config(r#"{"kind": "ann_count", "train": {"lr": 1}}"#, None, None).unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
        assert!(parse_config(r#"{"profile": "desk"}"#, None, None).is_err());
        assert!(parse_config("[1]", None, None).is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let spec = parse_config(r#"{"kind": "expert_matrix", "matrix_runs": 4}"#, None, None).unwrap();
        let canon = canonical_json(&spec).unwrap();
        let again = parse_config(&canon, None, None).unwrap();
        assert_eq!(canonical_json(&again).unwrap(), canon);
    }

    #[test]
    fn config_hash_ignores_output_location() {
        let mut a = ExperimentSpec::defaults(ExperimentKind::AnnCount, Profile::Desk);
        let h = a.config_hash();
        a.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), h);
        a.train.seed += 1;
        assert_ne!(a.config_hash(), h);
    }
}

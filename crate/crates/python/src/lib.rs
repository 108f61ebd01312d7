use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use expertadapt::checkpoint::Checkpoint;
use expertadapt::data::{self, BinaryMask, ExpertCombination, ExpertId, ImageGrid, MultiExpertDataset, SamplingPlan, Spacing};
use expertadapt::experiment::{parse_config, render_tables, report_from_ledger, write_config, write_tables, ExperimentKind, Profile, Runner};
use expertadapt::model::{CinUnet, ModelConfig};
use expertadapt::stats::{Format, TestKind};
use expertadapt::synth::{default_reference_styles, generate_dataset, SynthConfig};
use expertadapt::train::{self, TrainConfig};
use expertadapt::{metrics, objectives, stats, Error};

create_exception!(expertadapt_py, ExpertAdaptError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Invalid(_) | Error::Range(_) => PyValueError::new_err(e.to_string()),
        other => ExpertAdaptError::new_err(other.to_string()),
    }
}

type Rows<T> = Vec<Vec<T>>;

fn grid_shape<T>(rows: &Rows<T>) -> PyResult<(usize, usize)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular 2-D list"));
    }
    Ok((h, w))
}

fn image_from(rows: Rows<f32>) -> PyResult<ImageGrid> {
    let (h, w) = grid_shape(&rows)?;
    ImageGrid::new(h, w, rows.concat()).map_err(to_py)
}

fn mask_from(rows: Rows<bool>) -> PyResult<BinaryMask> {
    let (h, w) = grid_shape(&rows)?;
    BinaryMask::new(h, w, rows.concat().into_iter().map(u8::from).collect()).map_err(to_py)
}

fn mask_rows(m: &BinaryMask) -> Rows<bool> {
    m.pixels().chunks(m.width()).map(|r| r.iter().map(|&v| v != 0).collect()).collect()
}

fn expert(id: u32) -> PyResult<ExpertId> {
    ExpertId::new(id).map_err(to_py)
}

fn summary_dict<'py>(py: Python<'py>, s: &train::EvalSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("dice", s.dice)?;
    d.set_item("assd", s.assd)?;
    d.set_item("hd95", s.hd95)?;
    d.set_item("n_cases", s.n_cases)?;
    d.set_item("n_undefined", s.n_undefined)?;
    Ok(d)
}

/// Multi-expert dataset: cases ordered by index, each with one mask per expert.
#[pyclass(name = "Dataset", module = "expertadapt_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: MultiExpertDataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic dataset rendered with the reference expert styles.
    #[staticmethod]
    #[pyo3(signature = (n_cases = 50, height = 64, width = 64, seed = 2024))]
    fn synthetic(py: Python<'_>, n_cases: usize, height: usize, width: usize, seed: u64) -> PyResult<Self> {
        let cfg = SynthConfig::new(n_cases, height, width, default_reference_styles(), seed);
        let inner = py.detach(|| generate_dataset(&cfg)).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_manifest(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_dataset(&self.inner, &path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn roster(&self) -> Vec<u32> {
        self.inner.roster().iter().map(|e| e.0).collect()
    }

    fn case_indices(&self) -> Vec<usize> {
        self.inner.case_indices()
    }

    /// Image of the case at a 1-based position.
    fn image(&self, position: usize) -> PyResult<Rows<f32>> {
        let img = self.inner.nth(position).map_err(to_py)?.image();
        Ok(img.pixels().chunks(img.width()).map(<[f32]>::to_vec).collect())
    }

    fn mask(&self, position: usize, expert_id: u32) -> PyResult<Rows<bool>> {
        let case = self.inner.nth(position).map_err(to_py)?;
        Ok(mask_rows(case.mask(expert(expert_id)?).map_err(to_py)?))
    }

    /// (train, test) split after the first `n_train` cases.
    fn split(&self, n_train: usize) -> PyResult<(PyDataset, PyDataset)> {
        let (a, b) = self.inner.split(n_train).map_err(to_py)?;
        Ok((PyDataset { inner: a }, PyDataset { inner: b }))
    }

    fn __repr__(&self) -> String {
        format!("Dataset(cases={}, experts={:?})", self.inner.len(), self.roster())
    }
}

fn train_config(profile: &str, steps: Option<usize>, lr: Option<f64>, batch_size: Option<usize>, seed: u64, augment: bool, input: (usize, usize)) -> PyResult<TrainConfig> {
    let mut cfg = match profile.parse::<Profile>().map_err(to_py)? {
        Profile::Desk => TrainConfig::desk(),
        Profile::Paper => TrainConfig::paper(),
    };
    cfg.seed = seed;
    cfg.crop = [input.0, input.1];
    cfg.augment = if augment { cfg.augment.map(|a| a.with_crop(cfg.crop)) } else { None };
    if let Some(s) = steps {
        cfg.train_steps = s;
        cfg.finetune_steps = s;
    }
    if let Some(lr) = lr {
        cfg.lr0 = lr;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// CIN-conditioned U-Net with one normalisation branch per expert.
#[pyclass(name = "Model", module = "expertadapt_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: CinUnet,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (profile = "desk", n_experts = 5, seed = 0, input_size = None))]
    fn new(profile: &str, n_experts: usize, seed: u64, input_size: Option<(usize, usize)>) -> PyResult<Self> {
        let mut cfg = match profile.parse::<Profile>().map_err(to_py)? {
            Profile::Desk => ModelConfig::desk(n_experts),
            Profile::Paper => ModelConfig::paper(n_experts),
        };
        if let Some(size) = input_size {
            cfg.input_size = size;
        }
        Ok(PyModel {
            inner: CinUnet::build(&cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: Checkpoint::load(&path).map_err(to_py)?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(self.inner.clone(), None, 0, 0).save(&path).map_err(to_py)
    }

    fn experts(&self) -> Vec<u32> {
        self.inner.experts().map(|e| e.0).collect()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.inner.config().input_size
    }

    #[getter]
    fn shared_param_count(&self) -> usize {
        self.inner.shared_param_len()
    }

    #[getter]
    fn expert_param_count(&self) -> usize {
        self.inner.expert_param_len()
    }

    /// Keeps only the listed branches.
    fn retain_experts(&mut self, experts: Vec<u32>) -> PyResult<()> {
        let ids = experts.into_iter().map(expert).collect::<PyResult<Vec<_>>>()?;
        self.inner.retain_experts(&ids);
        Ok(())
    }

    fn logits(&self, py: Python<'_>, image: Rows<f32>, expert_id: u32) -> PyResult<Rows<f32>> {
        let x = image_from(image)?;
        let e = expert(expert_id)?;
        let out = py.detach(|| self.inner.forward(&x, e)).map_err(to_py)?;
        Ok(out.values.chunks(out.width).map(<[f32]>::to_vec).collect())
    }

    #[pyo3(signature = (image, expert_id, threshold = 0.5))]
    fn predict(&self, py: Python<'_>, image: Rows<f32>, expert_id: u32, threshold: f32) -> PyResult<Rows<bool>> {
        let x = image_from(image)?;
        let e = expert(expert_id)?;
        let m = py.detach(|| self.inner.predict_mask(&x, e, threshold)).map_err(to_py)?;
        Ok(mask_rows(&m))
    }

    /// Multi-expert training; returns the per-step normalised loss.
    #[pyo3(signature = (dataset, experts, steps = None, lr = None, batch_size = None, seed = 0, augment = true, profile = "desk"))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        dataset: &PyDataset,
        experts: Vec<u32>,
        steps: Option<usize>,
        lr: Option<f64>,
        batch_size: Option<usize>,
        seed: u64,
        augment: bool,
        profile: &str,
    ) -> PyResult<Vec<f64>> {
        let cfg = train_config(profile, steps, lr, batch_size, seed, augment, self.inner.config().input_size)?;
        let combo = ExpertCombination::from_ids(&experts).map_err(to_py)?;
        let model = &mut self.inner;
        let out = py.detach(|| train::train(model, &dataset.inner, &combo, &cfg)).map_err(to_py)?;
        Ok(out.log.iter().map(|r| r.normalized).collect())
    }

    /// Adapts to `expert_id` using the cases at the given 1-based positions.
    #[pyo3(signature = (dataset, expert_id, positions, steps = None, lr = None, batch_size = None, seed = 0, augment = true, expert_only = false, profile = "desk"))]
    #[allow(clippy::too_many_arguments)]
    fn finetune(
        &mut self,
        py: Python<'_>,
        dataset: &PyDataset,
        expert_id: u32,
        positions: Vec<usize>,
        steps: Option<usize>,
        lr: Option<f64>,
        batch_size: Option<usize>,
        seed: u64,
        augment: bool,
        expert_only: bool,
        profile: &str,
    ) -> PyResult<Vec<f64>> {
        let mut cfg = train_config(profile, steps, lr, batch_size, seed, augment, self.inner.config().input_size)?;
        if expert_only {
            cfg.finetune_scope = train::FinetuneScope::ExpertOnly;
        }
        let e = expert(expert_id)?;
        let samples = train::expert_samples(&dataset.inner, e, &positions).map_err(to_py)?;
        let model = &mut self.inner;
        let out = py.detach(|| train::finetune(model, &samples, e, &cfg)).map_err(to_py)?;
        Ok(out.log.iter().map(|r| r.normalized).collect())
    }

    /// Mean Dice, ASSD and HD95 of `expert_id`'s branch against `reference`'s masks.
    #[pyo3(signature = (dataset, expert_id, reference = None))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, expert_id: u32, reference: Option<u32>) -> PyResult<Bound<'py, PyDict>> {
        let branch = expert(expert_id)?;
        let reference = expert(reference.unwrap_or(expert_id))?;
        let s = py
            .detach(|| train::evaluate_model(&self.inner, &dataset.inner, branch, reference))
            .map_err(to_py)?;
        summary_dict(py, &s)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_size={:?}, experts={:?}, shared_params={}, expert_params={})",
            self.inner.config().input_size,
            self.experts(),
            self.inner.shared_param_len(),
            self.inner.expert_param_len()
        )
    }
}

#[pyfunction]
fn dice_score(a: Rows<bool>, b: Rows<bool>) -> PyResult<f64> {
    metrics::dice_score(&mask_from(a)?, &mask_from(b)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, spacing = (1.0, 1.0)))]
fn assd(a: Rows<bool>, b: Rows<bool>, spacing: (f64, f64)) -> PyResult<f64> {
    metrics::assd(&mask_from(a)?, &mask_from(b)?, Spacing { row: spacing.0, col: spacing.1 }).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, spacing = (1.0, 1.0)))]
fn hd95(a: Rows<bool>, b: Rows<bool>, spacing: (f64, f64)) -> PyResult<f64> {
    metrics::hd95(&mask_from(a)?, &mask_from(b)?, Spacing { row: spacing.0, col: spacing.1 }).map_err(to_py)
}

/// Soft Dice loss of flat logits against a flat 0/1 target and its gradient.
#[pyfunction]
#[pyo3(signature = (logits, target, smooth = 1.0))]
fn dice_loss(logits: Vec<f64>, target: Vec<u8>, smooth: f64) -> PyResult<(f64, Vec<f64>)> {
    if logits.len() != target.len() {
        return Err(PyValueError::new_err("logits and target differ in length"));
    }
    Ok(objectives::dice_loss_with_grad(&logits, &target, smooth))
}

#[pyfunction]
fn sample_indices(start: usize, count: usize, cardinality: usize) -> PyResult<Vec<usize>> {
    let plan = SamplingPlan::new(start, count, cardinality).map_err(to_py)?;
    data::sample_indices(&plan).map_err(to_py)
}

#[pyfunction]
fn starting_indices(cardinality: usize, n_ways: usize) -> PyResult<Vec<usize>> {
    data::starting_indices(cardinality, n_ways).map_err(to_py)
}

#[pyfunction]
fn expert_combinations(roster: Vec<u32>, k: usize) -> PyResult<Vec<Vec<u32>>> {
    let set = roster.into_iter().map(expert).collect::<PyResult<BTreeSet<_>>>()?;
    let combos = data::expert_combinations(&set, k).map_err(to_py)?;
    Ok(combos.iter().map(|c| c.members().iter().map(|e| e.0).collect()).collect())
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, lr0 = 0.001, power = 0.9))]
fn lr_schedule(step: usize, total_steps: usize, lr0: f64, power: f64) -> f64 {
    let cfg = TrainConfig { lr0, power, ..TrainConfig::paper() };
    train::lr_schedule(step, &cfg, total_steps)
}

/// Two-sided t-test; `kind` is "paired", "unpaired" or "welch".
#[pyfunction]
#[pyo3(signature = (x, y, kind = "paired", alpha = 0.05))]
fn t_test<'py>(py: Python<'py>, x: Vec<f64>, y: Vec<f64>, kind: &str, alpha: f64) -> PyResult<Bound<'py, PyDict>> {
    let kind = match kind {
        "paired" => TestKind::Paired,
        "unpaired" => TestKind::Unpaired,
        "welch" => TestKind::Welch,
        other => return Err(PyValueError::new_err(format!("unknown test kind {other:?}"))),
    };
    let r = stats::t_test(&x, &y, kind, alpha).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("t", r.t)?;
    d.set_item("df", r.df)?;
    d.set_item("p", r.p)?;
    d.set_item("significant", r.significant)?;
    d.set_item("degenerate", r.degenerate)?;
    Ok(d)
}

fn kind_of(kind: &str) -> PyResult<ExperimentKind> {
    kind.parse().map_err(to_py)
}

/// Runs an experiment grid; returns its tables as markdown.
#[pyfunction]
#[pyo3(signature = (kind, config = None, profile = None, out = None, resume = false, verbose = false))]
fn run_experiment(py: Python<'_>, kind: &str, config: Option<&str>, profile: Option<&str>, out: Option<PathBuf>, resume: bool, verbose: bool) -> PyResult<String> {
    let profile = profile.map(str::parse::<Profile>).transpose().map_err(to_py)?;
    let mut spec = parse_config(config.unwrap_or("{}"), Some(kind_of(kind)?), profile).map_err(to_py)?;
    if let Some(out) = out {
        spec.out_dir = out;
    }
    py.detach(|| {
        write_config(&spec)?;
        let dir = spec.experiment_dir();
        let mut runner = Runner::new(spec, resume)?;
        runner.verbose = verbose;
        let outcome = runner.run()?;
        write_tables(&dir, &outcome.tables)?;
        render_tables(&outcome.tables, Format::Markdown)
    })
    .map_err(to_py)
}

/// Re-renders an experiment's tables from its ledger.
#[pyfunction]
#[pyo3(signature = (kind, out, format = "markdown"))]
fn report(kind: &str, out: PathBuf, format: &str) -> PyResult<String> {
    let format: Format = format.parse().map_err(to_py)?;
    let tables = report_from_ledger(&out.join(kind_of(kind)?.slug())).map_err(to_py)?;
    render_tables(&tables, format).map_err(to_py)
}

#[pymodule]
fn expertadapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ExpertAdaptError", m.py().get_type::<ExpertAdaptError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(assd, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(sample_indices, m)?)?;
    m.add_function(wrap_pyfunction!(starting_indices, m)?)?;
    m.add_function(wrap_pyfunction!(expert_combinations, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(t_test, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}

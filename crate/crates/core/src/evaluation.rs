//! Retrieval metrics and experiment grids over models and variant settings.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::exec;
use crate::models::{nearest_pattern, sq_dist, ModelConfig, PreparedModel};
use crate::training::{train_kernel_with_streams, train_with_streams, EpochRecord, KernelInit, TrainConfig};
use crate::types::{
    BaseConfig, BaseKind, MemoryMatrix, SeparationKind, SquareMatrix, UMode, VariantSample, VariantSpec,
    WeightSet,
};
use crate::variants::{sample_batch, StreamAllocator, StreamRange};

/// Metrics from one evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: f64,
    /// Mean `‖T(x) - ξ‖² / d`.
    pub error: f64,
    /// Mean `‖T(x) - ξ‖²`.
    pub error_unnorm: f64,
}

/// Accuracy and error of `config` on the given samples.
pub fn evaluate_samples(config: &ModelConfig, memory: &MemoryMatrix, samples: &[VariantSample]) -> Result<RunMetrics> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    let model = PreparedModel::new(config, memory)?;
    let outcomes = exec::try_map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let y = model.retrieve(&s.query)?;
        let hit = nearest_pattern(memory, &y)? == s.origin;
        Ok::<_, Error>((hit, sq_dist(&y, memory.column(s.origin))))
    })?;
    let n = samples.len() as f64;
    let hits = outcomes.iter().filter(|(hit, _)| *hit).count();
    let sq: f64 = outcomes.iter().map(|(_, e)| e).sum();
    Ok(RunMetrics {
        accuracy: hits as f64 / n,
        error: sq / n / memory.d() as f64,
        error_unnorm: sq / n,
    })
}

/// Evaluates on one fresh sample per stream.
pub fn evaluate(config: &ModelConfig, memory: &MemoryMatrix, spec: &VariantSpec, streams: &StreamRange) -> Result<RunMetrics> {
    let samples = sample_batch(spec, memory, streams)?;
    evaluate_samples(config, memory, &samples)
}

pub fn empirical_accuracy(config: &ModelConfig, memory: &MemoryMatrix, spec: &VariantSpec, streams: &StreamRange) -> Result<f64> {
    Ok(evaluate(config, memory, spec, streams)?.accuracy)
}

/// Per-dimension mean squared distance between the retrieved vector and the origin.
pub fn retrieval_error(config: &ModelConfig, memory: &MemoryMatrix, spec: &VariantSpec, streams: &StreamRange) -> Result<f64> {
    Ok(evaluate(config, memory, spec, streams)?.error)
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// How the variant distribution of a setting is built for each run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SettingVariant {
    /// Mixed variant `(d_mask, d_noise, d_bias)`; bias signs are drawn once per run.
    Mixed([f64; 3]),
    /// A fully specified variant used as-is.
    Spec(VariantSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    pub label: String,
    pub variant: SettingVariant,
}

impl Setting {
    pub fn mixed(t: [f64; 3]) -> Self {
        let label = if t[0] == t[1] && t[1] == t[2] {
            format!("{}", t[0])
        } else {
            format!("({} {} {})", t[0], t[1], t[2])
        };
        Self {
            label,
            variant: SettingVariant::Mixed(t),
        }
    }
}

/// Initial mixing matrix of a footprint term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixInit {
    Triangular,
    Identity,
    /// Entries uniform on `[0, 1)`, drawn per run.
    Random,
}

fn default_true() -> bool {
    true
}

fn default_matrix_init() -> MatrixInit {
    MatrixInit::Triangular
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTemplate {
    pub base: BaseKind,
    #[serde(default = "default_true")]
    pub sorted: bool,
    #[serde(default = "default_matrix_init")]
    pub u_init: MatrixInit,
    #[serde(default)]
    pub learnable_u: bool,
}

impl BaseTemplate {
    pub fn new(base: BaseKind) -> Self {
        Self {
            base,
            sorted: true,
            u_init: MatrixInit::Triangular,
            learnable_u: false,
        }
    }
}

/// Starting point for adaptive-similarity training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AHopInit {
    /// One term per template with `β = 1`. Triangular and identity mixing start
    /// at the base similarity (`w = e_d` and `w = 1` respectively); random
    /// mixing starts from `w = e_d`.
    Bases(Vec<BaseTemplate>),
    /// Explicit weights.
    Weights(WeightSet),
}

impl Default for AHopInit {
    fn default() -> Self {
        AHopInit::Bases(vec![BaseTemplate::new(BaseKind::Dis), BaseTemplate::new(BaseKind::Dot)])
    }
}

impl AHopInit {
    fn build(&self, d: usize, streams: &mut StreamAllocator) -> Result<WeightSet> {
        match self {
            AHopInit::Weights(w) => {
                w.validate(d)?;
                Ok(w.clone())
            }
            AHopInit::Bases(templates) => {
                if templates.is_empty() {
                    return Err(Error::Empty("footprint bases"));
                }
                let bases = templates
                    .iter()
                    .map(|t| {
                        let mut matrix = || match t.u_init {
                            MatrixInit::Triangular => SquareMatrix::lower_triangular_ones(d),
                            MatrixInit::Identity => SquareMatrix::identity(d),
                            MatrixInit::Random => {
                                use rand::Rng;
                                let mut rng = streams.single().rng();
                                let data = (0..d * d).map(|_| rng.random::<f64>()).collect();
                                SquareMatrix::from_row_major(d, data).expect("finite entries")
                            }
                        };
                        let u_mode = match (t.learnable_u, t.u_init) {
                            (true, _) => UMode::Learnable(matrix()),
                            (false, MatrixInit::Triangular) => UMode::FixedTriangular,
                            (false, MatrixInit::Identity) => UMode::Identity,
                            (false, MatrixInit::Random) => UMode::Fixed(matrix()),
                        };
                        let start = BaseConfig::degenerate(t.base, d);
                        let w = match t.u_init {
                            MatrixInit::Identity => vec![1.0; d],
                            MatrixInit::Triangular | MatrixInit::Random => start.w.clone(),
                        };
                        BaseConfig {
                            w,
                            sorted: t.sorted,
                            u_mode,
                            ..start
                        }
                    })
                    .collect();
                Ok(WeightSet { bases })
            }
        }
    }
}

fn default_softmax() -> SeparationKind {
    SeparationKind::Softmax
}

fn default_beta() -> f64 {
    1.0
}

fn default_kernel_lr() -> f64 {
    1e-3
}

fn default_kernel_init() -> KernelInit {
    KernelInit::Gaussian
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ModelKind {
    AHop {
        #[serde(default)]
        init: AHopInit,
        #[serde(default = "default_softmax")]
        separation: SeparationKind,
        /// Replaces the grid-level training configuration.
        #[serde(default)]
        train: Option<TrainConfig>,
    },
    MHop {
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_softmax")]
        separation: SeparationKind,
    },
    UHop,
    K2Hop {
        #[serde(default = "default_beta")]
        beta: f64,
        /// Projection width; defaults to the pattern dimension.
        #[serde(default)]
        d_phi: Option<usize>,
        #[serde(default = "default_kernel_init")]
        init: KernelInit,
        #[serde(default = "default_kernel_lr")]
        learning_rate: f64,
        #[serde(default = "default_softmax")]
        separation: SeparationKind,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    /// Name in result tables; defaults to the model family name.
    #[serde(default)]
    pub label: Option<String>,
    pub model: ModelKind,
}

impl ModelEntry {
    pub fn new(model: ModelKind) -> Self {
        Self { label: None, model }
    }

    pub fn labeled(label: &str, model: ModelKind) -> Self {
        Self {
            label: Some(label.into()),
            model,
        }
    }

    pub fn name(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            match self.model {
                ModelKind::AHop { .. } => "A-Hop",
                ModelKind::MHop { .. } => "M-Hop",
                ModelKind::UHop => "U-Hop",
                ModelKind::K2Hop { .. } => "K2-Hop",
            }
            .into()
        })
    }

    pub fn a_hop() -> Self {
        Self::new(ModelKind::AHop {
            init: AHopInit::default(),
            separation: SeparationKind::Softmax,
            train: None,
        })
    }

    pub fn m_hop() -> Self {
        Self::new(ModelKind::MHop {
            beta: 1.0,
            separation: SeparationKind::Softmax,
        })
    }

    pub fn u_hop() -> Self {
        Self::new(ModelKind::UHop)
    }

    pub fn k2_hop() -> Self {
        Self::new(ModelKind::K2Hop {
            beta: 1.0,
            d_phi: None,
            init: KernelInit::Gaussian,
            learning_rate: default_kernel_lr(),
            separation: SeparationKind::Softmax,
        })
    }
}

fn default_trials() -> usize {
    2000
}

fn default_runs() -> usize {
    5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            runs: default_runs(),
        }
    }
}

/// Every model evaluated on every setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub dataset: DatasetSpec,
    pub settings: Vec<Setting>,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// One grid cell: a model on a setting.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell<'a> {
    pub index: usize,
    pub setting_index: usize,
    pub setting: &'a Setting,
    pub model: &'a ModelEntry,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.settings.is_empty() || self.models.is_empty() {
            return Err(Error::Empty("experiment grid"));
        }
        if self.eval.trials == 0 || self.eval.runs == 0 {
            return Err(Error::Config("eval trials and runs must be >= 1".into()));
        }
        if self.eval.runs > 256 || self.settings.len() > 1 << 20 {
            return Err(Error::Config("at most 256 runs and 2^20 settings are supported".into()));
        }
        for s in &self.settings {
            if let SettingVariant::Mixed(t) = &s.variant {
                if !t.iter().all(|v| (0.0..=1.0).contains(v)) {
                    return Err(Error::Config(format!("setting {}: triplet entries must lie in [0, 1]", s.label)));
                }
            }
        }
        for m in &self.models {
            match &m.model {
                ModelKind::AHop { train: Some(t), .. } => t.validate()?,
                ModelKind::MHop { beta, .. } | ModelKind::K2Hop { beta, .. } if !(*beta > 0.0 && beta.is_finite()) => {
                    return Err(Error::Config(format!("model {}: beta must be positive", m.name())));
                }
                ModelKind::K2Hop { learning_rate, .. } if !(*learning_rate > 0.0) => {
                    return Err(Error::Config(format!("model {}: learning_rate must be positive", m.name())));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Cells in setting-major order.
    pub fn cells(&self) -> Vec<Cell<'_>> {
        self.settings
            .iter()
            .enumerate()
            .flat_map(|(si, setting)| {
                self.models.iter().map(move |model| (si, setting, model))
            })
            .enumerate()
            .map(|(index, (setting_index, setting, model))| Cell {
                index,
                setting_index,
                setting,
                model,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model: String,
    pub setting: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub err_mean: f64,
    pub err_std: f64,
    pub err_unnorm_mean: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub setting: String,
    pub run: usize,
    pub accuracy: f64,
    pub error: f64,
    pub error_unnorm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub results: Vec<ExperimentResult>,
    pub runs: Vec<RunRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Record wall-clock time per cell; otherwise `wall_ms` is 0 so outputs stay byte-identical.
    pub record_timing: bool,
}

/// Stream space reserved for one (setting, run) pair.
const PAIR_STREAMS: u64 = 1 << 32;

fn pair_allocator(seed: u64, setting: usize, run: usize) -> StreamAllocator {
    let base = ((setting as u64) << 40) | ((run as u64) << 32);
    StreamAllocator::new(seed, base, PAIR_STREAMS)
}

/// Trains a model (when it has parameters) on the setting's variant distribution.
pub fn build_model(
    entry: &ModelEntry,
    memory: &MemoryMatrix,
    spec: &VariantSpec,
    grid_train: &TrainConfig,
    streams: &mut StreamAllocator,
) -> Result<ModelConfig> {
    let d = memory.d();
    Ok(match &entry.model {
        ModelKind::AHop { init, separation, train } => {
            let cfg = train.as_ref().unwrap_or(grid_train);
            let init = init.build(d, streams)?;
            let report = train_with_streams(memory, spec, &init, cfg, streams)?;
            ModelConfig::AHop {
                weights: report.params,
                separation: *separation,
            }
        }
        ModelKind::MHop { beta, separation } => ModelConfig::MHop {
            beta: *beta,
            separation: *separation,
        },
        ModelKind::UHop => ModelConfig::UHop,
        ModelKind::K2Hop {
            beta,
            d_phi,
            init,
            learning_rate,
            separation,
        } => {
            let cfg = TrainConfig {
                learning_rate: *learning_rate,
                ..grid_train.clone()
            };
            let report = train_kernel_with_streams(memory, spec, d_phi.unwrap_or(d), *beta, *init, &cfg, streams)?;
            ModelConfig::K2Hop {
                kernel: report.params,
                beta: *beta,
                separation: *separation,
            }
        }
    })
}

fn resolve_spec(variant: &SettingVariant, d: usize, streams: &mut StreamAllocator) -> Result<VariantSpec> {
    let spec = match variant {
        SettingVariant::Mixed(t) => VariantSpec::mixed(d, *t, &mut streams.single().rng()),
        SettingVariant::Spec(s) => s.clone(),
    };
    spec.validate(d)?;
    Ok(spec)
}

/// Runs every cell `eval.runs` times.
///
/// Runs of one setting share the memory, variant and held-out samples across
/// models, so model comparisons within a run are paired. Training streams are
/// allocated after the evaluation block and checked disjoint from it.
pub fn run_experiment(grid: &ExperimentGrid, seed: u64, options: RunOptions) -> Result<ExperimentOutput> {
    grid.validate()?;
    let cells = grid.cells();
    let mut per_cell: Vec<Vec<RunMetrics>> = vec![Vec::new(); cells.len()];
    let mut wall = vec![0u128; cells.len()];
    let n_models = grid.models.len();
    for (si, setting) in grid.settings.iter().enumerate() {
        for run in 0..grid.eval.runs {
            let wrap = |cell: usize, source: Error| Error::Cell {
                cell,
                label: format!("{} / {}", cells[cell].model.name(), setting.label),
                run,
                source: Box::new(source),
            };
            let first_cell = si * n_models;
            let mut streams = pair_allocator(seed, si, run);
            let memory = load_dataset(&grid.dataset, streams.single()).map_err(|e| wrap(first_cell, e))?;
            let spec = resolve_spec(&setting.variant, memory.d(), &mut streams).map_err(|e| wrap(first_cell, e))?;
            let eval_streams = streams.allocate(grid.eval.trials);
            let eval_samples = sample_batch(&spec, &memory, &eval_streams).map_err(|e| wrap(first_cell, e))?;
            for (mi, entry) in grid.models.iter().enumerate() {
                let cell = first_cell + mi;
                let start = Instant::now();
                // Every model starts from the same allocator state, so all models train on the same samples.
                let mut model_streams = streams.clone();
                let config = build_model(entry, &memory, &spec, &grid.train, &mut model_streams)
                    .map_err(|e| wrap(cell, e))?;
                assert!(model_streams.all_disjoint(), "training streams overlap evaluation streams");
                let metrics = evaluate_samples(&config, &memory, &eval_samples).map_err(|e| wrap(cell, e))?;
                wall[cell] += start.elapsed().as_millis();
                log::info!(
                    "{} / {} run {}: accuracy {:.4} error {:.4}",
                    entry.name(),
                    setting.label,
                    run,
                    metrics.accuracy,
                    metrics.error
                );
                per_cell[cell].push(metrics);
            }
        }
    }
    let mut results = Vec::with_capacity(cells.len());
    let mut runs = Vec::new();
    for (cell, metrics) in cells.iter().zip(&per_cell) {
        let acc: Vec<f64> = metrics.iter().map(|m| m.accuracy).collect();
        let err: Vec<f64> = metrics.iter().map(|m| m.error).collect();
        let unnorm: Vec<f64> = metrics.iter().map(|m| m.error_unnorm).collect();
        let (acc_mean, acc_std) = mean_std(&acc);
        let (err_mean, err_std) = mean_std(&err);
        results.push(ExperimentResult {
            model: cell.model.name(),
            setting: cell.setting.label.clone(),
            runs: metrics.len(),
            acc_mean,
            acc_std,
            err_mean,
            err_std,
            err_unnorm_mean: mean_std(&unnorm).0,
            wall_ms: if options.record_timing {
                wall[cell.index] as u64
            } else {
                0
            },
        });
        for (run, m) in metrics.iter().enumerate() {
            runs.push(RunRecord {
                model: cell.model.name(),
                setting: cell.setting.label.clone(),
                run,
                accuracy: m.accuracy,
                error: m.error,
                error_unnorm: m.error_unnorm,
            });
        }
    }
    Ok(ExperimentOutput { results, runs })
}

/// Trained weights with their training log and held-out metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub weights: WeightSet,
    pub log: Vec<EpochRecord>,
    pub held_out: RunMetrics,
}

/// Trains adaptive weights on one setting.
///
/// Random streams are laid out as for the first run of the first setting of
/// a grid, so the weights equal those an A-Hop cell learns there.
pub fn train_on_setting(
    dataset: &DatasetSpec,
    setting: &Setting,
    init: &AHopInit,
    train: &TrainConfig,
    trials: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    train.validate()?;
    if trials == 0 {
        return Err(Error::Config("eval trials must be >= 1".into()));
    }
    let mut streams = pair_allocator(seed, 0, 0);
    let memory = load_dataset(dataset, streams.single())?;
    let spec = resolve_spec(&setting.variant, memory.d(), &mut streams)?;
    let eval_samples = sample_batch(&spec, &memory, &streams.allocate(trials))?;
    let weights = init.build(memory.d(), &mut streams)?;
    let report = train_with_streams(&memory, &spec, &weights, train, &mut streams)?;
    assert!(streams.all_disjoint(), "training streams overlap evaluation streams");
    let config = ModelConfig::AHop {
        weights: report.params.clone(),
        separation: SeparationKind::Softmax,
    };
    Ok(TrainOutcome {
        held_out: evaluate_samples(&config, &memory, &eval_samples)?,
        weights: report.params,
        log: report.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_uses_n_minus_one() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn cells_are_setting_major() {
        let grid = ExperimentGrid {
            dataset: DatasetSpec::synthetic(4, 3),
            settings: vec![Setting::mixed([0.1; 3]), Setting::mixed([0.2; 3])],
            models: vec![ModelEntry::m_hop(), ModelEntry::u_hop()],
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        };
        let names: Vec<(String, String)> = grid
            .cells()
            .iter()
            .map(|c| (c.setting.label.clone(), c.model.name()))
            .collect();
        assert_eq!(names[1], ("0.1".into(), "U-Hop".into()));
        assert_eq!(names[2], ("0.2".into(), "M-Hop".into()));
    }

    #[test]
    fn trivial_setting_is_perfect() {
        let grid = ExperimentGrid {
            dataset: DatasetSpec::synthetic(16, 4),
            settings: vec![Setting::mixed([0.0; 3])],
            models: vec![ModelEntry::u_hop(), ModelEntry::m_hop()],
            train: TrainConfig::default(),
            eval: EvalConfig { trials: 50, runs: 5 },
        };
        let out = run_experiment(&grid, 3, RunOptions::default()).unwrap();
        let u = &out.results[0];
        assert_eq!((u.acc_mean, u.acc_std, u.err_mean, u.runs), (1.0, 0.0, 0.0, 5));
        assert_eq!(out.runs.len(), 10);
    }

    #[test]
    fn templates_start_at_the_base_similarity() {
        let memory = crate::data::synth_patterns(5, 4, crate::variants::RngState::new(1, 0)).unwrap();
        let x = [0.3, -0.8, 0.1, 0.6];
        for u_init in [MatrixInit::Triangular, MatrixInit::Identity] {
            for learnable_u in [false, true] {
                for sorted in [false, true] {
                    let templates = [BaseKind::Dis, BaseKind::Dot].map(|base| BaseTemplate {
                        base,
                        sorted,
                        u_init,
                        learnable_u,
                    });
                    let init = AHopInit::Bases(templates.to_vec());
                    let weights = init.build(4, &mut StreamAllocator::new(0, 0, 16)).unwrap();
                    let scores = crate::similarity::adaptive_scores(&memory, &x, &weights).unwrap();
                    for (k, col) in memory.columns().enumerate() {
                        let base: f64 = col.iter().zip(&x).map(|(p, q)| p * q - (p - q) * (p - q)).sum();
                        assert!((scores[k] - base).abs() < 1e-12, "{u_init:?} {learnable_u} {sorted}");
                    }
                }
            }
        }
    }
}

//! Reproducible experiment harness: the fixed synthetic benchmark, training
//! presets for every ablation axis, and CSV comparison tables.

use crate::aggregation::ContextMode;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::geometry::{GridConfig, NeighborScheme};
use crate::infer::{evaluate_model, infer_scenes, search_voting, SceneInference, VotingSearch};
use crate::model::{HeadMode, ModelConfig, ToyModel};
use crate::postprocess::PostprocessConfig;
use crate::scene::{generate_scenes, Scene};
use crate::train::{train, TrainConfig, TrainLog};
use crate::voting::VoteScheme;

/// The fixed benchmark: scenes generated from one seed, split train/val.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub img: usize,
    pub max_objects: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            train_count: 500,
            val_count: 100,
            img: 64,
            max_objects: 4,
        }
    }
}

pub struct Benchmark {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

pub fn make_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    let all = generate_scenes(
        spec.seed,
        spec.train_count + spec.val_count,
        spec.img,
        spec.img,
        spec.max_objects,
    )?;
    let mut train = all;
    let val = train.split_off(spec.train_count);
    Ok(Benchmark { train, val })
}

/// One training run: a named model configuration plus its training recipe.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub seed: u64,
    pub report: EvalReport,
    pub log: TrainLog,
}

/// Trains a fresh model (initialized from `spec.train.seed`) and evaluates
/// it on the validation split.
pub fn run_training(spec: &RunSpec, bench: &Benchmark, post: &PostprocessConfig) -> Result<RunOutcome> {
    let mut model = ToyModel::new(spec.model.clone(), spec.train.seed)?;
    let log = train(
        &mut model,
        &bench.train,
        &spec.train,
        None::<fn(&ToyModel) -> Result<f64>>,
    )?;
    let report = evaluate_model(&model, &bench.val, post)?;
    Ok(RunOutcome {
        name: spec.name.clone(),
        seed: spec.train.seed,
        report,
        log,
    })
}

/// Trains and returns the model itself (for voting studies).
pub fn run_training_keep_model(
    spec: &RunSpec,
    bench: &Benchmark,
    post: &PostprocessConfig,
) -> Result<(ToyModel, RunOutcome)> {
    let mut model = ToyModel::new(spec.model.clone(), spec.train.seed)?;
    let log = train(
        &mut model,
        &bench.train,
        &spec.train,
        None::<fn(&ToyModel) -> Result<f64>>,
    )?;
    let report = evaluate_model(&model, &bench.val, post)?;
    let outcome = RunOutcome {
        name: spec.name.clone(),
        seed: spec.train.seed,
        report,
        log,
    };
    Ok((model, outcome))
}

/// Grid-searched voting results for all three schemes on one trained model.
pub struct VotingStudy {
    pub baseline_ap: f64,
    pub searches: Vec<(VoteScheme, VotingSearch)>,
    pub inferences: Vec<SceneInference>,
}

pub fn voting_study(
    model: &ToyModel,
    val: &[Scene],
    post: &PostprocessConfig,
) -> Result<VotingStudy> {
    let infs = infer_scenes(model, val, post)?;
    let baseline_ap = crate::infer::eval_inferences(&infs, val).ap;
    let mut searches = Vec::new();
    for scheme in VoteScheme::ALL {
        let s = search_voting(&infs, val, scheme, post.mask_threshold)?;
        searches.push((scheme, s));
    }
    Ok(VotingStudy {
        baseline_ap,
        searches,
        inferences: infs,
    })
}

/// CSV for the per-tau voting table of every scheme.
pub fn voting_csv(study: &VotingStudy) -> String {
    let mut out = String::from("scheme,tau,ap\n");
    out.push_str(&format!("none,,{}\n", study.baseline_ap));
    for (scheme, search) in &study.searches {
        for (tau, ap) in &search.table {
            out.push_str(&format!("{},{},{}\n", scheme.name(), tau, ap));
        }
    }
    out
}

/// Ablation axes mirroring the model-analysis table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Agg,
    Neighbors,
    Context,
    Layers,
    Kernel,
    TwoStage,
    Deform,
    Grid,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "agg" => Ok(Self::Agg),
            "neighbors" => Ok(Self::Neighbors),
            "context" => Ok(Self::Context),
            "layers" => Ok(Self::Layers),
            "kernel" => Ok(Self::Kernel),
            "two-stage" => Ok(Self::TwoStage),
            "deform" => Ok(Self::Deform),
            "grid" => Ok(Self::Grid),
            other => Err(Error::invalid(format!("unknown ablation axis {other:?}"))),
        }
    }

    pub const ALL: [AblationAxis; 8] = [
        Self::Agg,
        Self::Neighbors,
        Self::Context,
        Self::Layers,
        Self::Kernel,
        Self::TwoStage,
        Self::Deform,
        Self::Grid,
    ];
}

/// The run list for one ablation axis, all sharing `base`'s training seed.
pub fn ablation_specs(axis: AblationAxis, base_model: &ModelConfig, base_train: &TrainConfig) -> Vec<RunSpec> {
    let mk = |name: &str, model: ModelConfig| RunSpec {
        name: name.to_string(),
        model,
        train: base_train.clone(),
    };
    match axis {
        AblationAxis::Agg => vec![
            mk("agg-D", ModelConfig { head: HeadMode::Dynamic, ..base_model.clone() }),
            mk("agg-S", ModelConfig { head: HeadMode::Static, ..base_model.clone() }),
        ],
        AblationAxis::Neighbors => [
            ("neighbors-0", NeighborScheme::None),
            ("neighbors-2-col", NeighborScheme::Col2),
            ("neighbors-2-row", NeighborScheme::Row2),
            ("neighbors-4", NeighborScheme::Four),
            ("neighbors-8", NeighborScheme::Eight),
        ]
        .into_iter()
        .map(|(name, scheme)| mk(name, ModelConfig { scheme, ..base_model.clone() }))
        .collect(),
        AblationAxis::Context => [
            ("context-with", ContextMode::With),
            ("context-without", ContextMode::Without),
            ("context-only", ContextMode::Only),
        ]
        .into_iter()
        .map(|(name, ctx_mode)| mk(name, ModelConfig { ctx_mode, ..base_model.clone() }))
        .collect(),
        AblationAxis::Layers => (1..=4)
            .map(|l| mk(&format!("layers-{l}"), ModelConfig { agg_layers: l, ..base_model.clone() }))
            .collect(),
        AblationAxis::Kernel => [1usize, 3]
            .into_iter()
            .map(|k| mk(&format!("kernel-{k}x{k}"), ModelConfig { agg_kernel: k, ..base_model.clone() }))
            .collect(),
        AblationAxis::TwoStage => {
            let mut with = RunSpec {
                name: "two-stage-on".into(),
                model: base_model.clone(),
                train: base_train.clone(),
            };
            with.train.loss.two_stage = true;
            let mut without = RunSpec {
                name: "two-stage-off".into(),
                model: base_model.clone(),
                train: base_train.clone(),
            };
            without.train.loss.two_stage = false;
            vec![without, with]
        }
        AblationAxis::Deform => vec![
            mk("deform-off", ModelConfig { deform: false, ..base_model.clone() }),
            mk("deform-on", ModelConfig { deform: true, ..base_model.clone() }),
        ],
        AblationAxis::Grid => {
            let g = base_model.grids.levels[0].cls;
            vec![
                mk("grid-standard", ModelConfig {
                    grids: GridConfig::single(g, g).unwrap(),
                    ..base_model.clone()
                }),
                mk("grid-plus-cls", ModelConfig {
                    grids: GridConfig::single(g + g / 4, g).unwrap(),
                    ..base_model.clone()
                }),
                mk("grid-minus-mask", ModelConfig {
                    grids: GridConfig::single(g, g.div_ceil(2)).unwrap(),
                    ..base_model.clone()
                }),
            ]
        }
    }
}

/// CSV with one row per run outcome.
pub fn outcomes_csv(outcomes: &[RunOutcome]) -> String {
    let mut out = String::from("name,seed,ap,ap50,ap75,detections\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            o.name, o.seed, o.report.ap, o.report.ap50, o.report.ap75, o.report.n_detections
        ));
    }
    out
}

//! Experiment orchestration shared by the command line and the acceptance
//! suite: dataset construction, teacher/student training runs, sampling
//! protocols, distribution metrics, the ablation grid, the guidance sweep,
//! and the multi-seed comparison study.
//!
//! Sampling protocols mirror the reference setup: the teacher samples at
//! its training guidance (`w = 0.7`); students trained with the weak-CFG
//! regularizer sample at the weak default (`w = 0.05`); baselines without a
//! trained unconditional branch (endpoint-only, progressive) sample purely
//! conditionally (`w = 1`, no additional guidance).

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};

use flowlab_core::datasets::{generate, Dataset, DatasetKind};
use flowlab_core::distill::{
    progressive_distill, student_schedule, train_student, DistillPlan, ProgressiveOutcome,
};
use flowlab_core::flow::{euler_solve, train_teacher};
use flowlab_core::metrics::{ks_statistic, radial_coords, sliced_wasserstein};
use flowlab_core::model::{CondId, CondMode, VelocityModel};
use flowlab_core::rng::SeedRng;
use flowlab_core::Tensor;

use crate::config::RunConfig;
use crate::csvio::load_csv;

/// Guidance used when sampling models whose unconditional branch was never
/// trained: pure conditional prediction, i.e. no additional guidance.
pub const W_NO_GUIDANCE: f64 = 1.0;

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.dataset_kind == DatasetKind::Csv {
        let path = cfg
            .csv_path
            .as_ref()
            .context("dataset.kind = csv requires dataset.csv_path")?;
        return load_csv(
            Path::new(path),
            cfg.dataset_d_data,
            cfg.csv_condition_column,
            cfg.csv_has_header,
            cfg.dataset_seed,
        );
    }
    Ok(generate(&cfg.dataset_spec())?)
}

/// Same distribution, disjoint seed stream: the evaluation reference.
pub fn held_out_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut spec = cfg.dataset_spec();
    spec.seed = SeedRng::derive_seed(spec.seed, "held-out");
    spec.size = cfg.eval_samples.max(2);
    Ok(generate(&spec)?)
}

pub fn train_teacher_run(cfg: &RunConfig, seed: u64) -> Result<(VelocityModel, Vec<f64>)> {
    let dataset = build_dataset(cfg)?;
    Ok(train_teacher(&cfg.teacher_config(), &dataset, &cfg.teacher_options(), seed)?)
}

/// Draws `count` noise/condition probes and rolls the model to its endpoint
/// with `steps` guided Euler steps. Conditions cycle round-robin so every
/// class is equally represented.
pub fn sample_field(
    model: &VelocityModel,
    plan: &DistillPlan,
    steps: u32,
    guidance: f64,
    count: usize,
    conditions: usize,
    seed: u64,
) -> Result<Tensor> {
    // The teacher runs on its own schedule; student step counts use the
    // teacher-knot-snapped partition they were supervised on.
    let schedule = if steps as usize == plan.teacher_steps {
        flowlab_core::flow::make_schedule(plan.teacher_schedule, plan.teacher_steps)?
    } else {
        student_schedule(plan, steps)?
    };
    let step_arg = (model.config().mode == CondMode::StepToken).then_some(steps);
    let mut rng = SeedRng::new(SeedRng::derive_seed(seed, "sample-probes"));
    let z = rng.normal_tensor(count, model.config().d_data);
    let conds: Vec<CondId> = (0..count).map(|i| CondId::Id(i % conditions)).collect();
    let traj = euler_solve(model, &z, &conds, &schedule, guidance, step_arg)?;
    Ok(traj.endpoint().clone())
}

/// Pooled sliced-Wasserstein distance between generated samples and
/// reference data.
pub fn distance_to_reference(
    samples: &Tensor,
    reference: &Tensor,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    Ok(sliced_wasserstein(samples, reference, projections, seed)?)
}

/// The full student (dual supervision + weak-CFG + step tokens).
pub fn dsflow_student(
    cfg: &RunConfig,
    teacher: &VelocityModel,
    dataset: &Dataset,
    seed: u64,
) -> Result<(VelocityModel, Vec<f64>)> {
    Ok(train_student(
        teacher,
        &cfg.student_config(),
        dataset,
        &cfg.plan(),
        &cfg.distill_options(),
        seed,
        None,
    )?)
}

/// Ablation arm: one toggle set of (dual supervision, weak CFG, step
/// tokens) on top of the run's plan.
pub fn ablation_student(
    cfg: &RunConfig,
    teacher: &VelocityModel,
    dataset: &Dataset,
    dual: bool,
    weak_cfg: bool,
    step_token: bool,
    seed: u64,
) -> Result<(VelocityModel, Vec<f64>)> {
    let plan = DistillPlan {
        alpha: if dual { cfg.plan_alpha } else { 1.0 },
        lambda: if weak_cfg { cfg.plan_lambda } else { 0.0 },
        ..cfg.plan()
    };
    let mode = if step_token { CondMode::StepToken } else { CondMode::AdaLn };
    let student_config = cfg.model_config(mode);
    Ok(train_student(teacher, &student_config, dataset, &plan, &cfg.distill_options(), seed, None)?)
}

/// Endpoint-only distillation baseline: composed 1-step endpoint matching,
/// no velocity term, no regularizer, continuous-time student.
pub fn endpoint_baseline_student(
    cfg: &RunConfig,
    teacher: &VelocityModel,
    dataset: &Dataset,
    seed: u64,
) -> Result<(VelocityModel, Vec<f64>)> {
    let plan = DistillPlan {
        supported_steps: vec![1],
        teacher_steps: cfg.plan_teacher_steps,
        teacher_schedule: cfg.plan_teacher_schedule,
        w_teacher: cfg.plan_w_teacher,
        midpoint: cfg.plan_midpoint,
        ..DistillPlan::endpoint_baseline()
    };
    let student_config = cfg.model_config(CondMode::AdaLn);
    Ok(train_student(teacher, &student_config, dataset, &plan, &cfg.distill_options(), seed, None)?)
}

/// Progressive halving baseline with the same total iteration budget spread
/// across its stages.
pub fn progressive_student(
    cfg: &RunConfig,
    teacher: &VelocityModel,
    dataset: &Dataset,
    seed: u64,
) -> Result<ProgressiveOutcome> {
    let mut stage_count = 0usize;
    let mut steps = cfg.plan_teacher_steps;
    while steps > 1 {
        steps = flowlab_core::distill::halve_steps(steps);
        stage_count += 1;
    }
    let mut options = cfg.distill_options();
    options.iterations = (options.iterations / stage_count.max(1)).max(1);
    Ok(progressive_distill(teacher, &cfg.model_config(CondMode::AdaLn), dataset, &cfg.plan(), &options, seed)?)
}

/// Distance of a guidance sweep over the given weights.
pub fn cfg_sweep_distances(
    student: &VelocityModel,
    plan: &DistillPlan,
    weights: &[f64],
    steps: u32,
    count: usize,
    conditions: usize,
    reference: &Tensor,
    projections: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(weights.len());
    for &w in weights {
        let samples = sample_field(student, plan, steps, w, count, conditions, seed)?;
        let d = distance_to_reference(&samples, reference, projections, seed)?;
        out.push((w, d));
    }
    Ok(out)
}

/// Everything the comparison criteria need from one student-training seed.
#[derive(Debug, Clone)]
pub struct SeedStudyRow {
    pub seed: u64,
    /// Step count -> pooled distance for the full student.
    pub dsflow: BTreeMap<u32, f64>,
    /// Full student with the velocity term ablated (alpha = 1).
    pub dual_off: f64,
    pub endpoint_baseline: f64,
    pub progressive: f64,
    /// KS alignment of radial coordinates against teacher samples.
    pub ks_dsflow: f64,
    pub ks_endpoint: f64,
    /// `(w, distance)` sweep for the full student.
    pub sweep: Vec<(f64, f64)>,
}

/// The guidance sweep grid.
pub const SWEEP_WEIGHTS: [f64; 5] = [0.0, 0.05, 0.10, 0.20, 0.50];

/// Runs every comparison arm for each seed against one frozen teacher.
pub fn seed_study(
    cfg: &RunConfig,
    teacher: &VelocityModel,
    dataset: &Dataset,
    reference: &Tensor,
    seeds: &[u64],
) -> Result<Vec<SeedStudyRow>> {
    let plan = cfg.plan();
    let conditions = cfg.dataset_conditions;
    let count = cfg.eval_samples;
    let projections = cfg.eval_projections;

    let teacher_samples = sample_field(
        teacher,
        &plan,
        cfg.plan_teacher_steps as u32,
        cfg.plan_w_teacher,
        count,
        conditions,
        1_000_003,
    )?;
    let teacher_radial = radial_coords(&teacher_samples);

    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let eval_seed = SeedRng::derive_seed(seed, "arm-eval");

        let (full, _) = dsflow_student(cfg, teacher, dataset, seed)?;
        let mut dsflow = BTreeMap::new();
        for &n in &cfg.model_supported_steps {
            let samples =
                sample_field(&full, &plan, n, cfg.eval_w_student, count, conditions, eval_seed)?;
            dsflow.insert(n, distance_to_reference(&samples, reference, projections, eval_seed)?);
        }
        let full_one_step =
            sample_field(&full, &plan, 1, cfg.eval_w_student, count, conditions, eval_seed)?;
        let ks_dsflow = ks_statistic(&radial_coords(&full_one_step), &teacher_radial)?;

        let (dual_off_model, _) =
            ablation_student(cfg, teacher, dataset, false, true, true, seed)?;
        let dual_off_samples = sample_field(
            &dual_off_model,
            &plan,
            1,
            cfg.eval_w_student,
            count,
            conditions,
            eval_seed,
        )?;
        let dual_off =
            distance_to_reference(&dual_off_samples, reference, projections, eval_seed)?;

        let (endpoint_model, _) = endpoint_baseline_student(cfg, teacher, dataset, seed)?;
        let endpoint_samples =
            sample_field(&endpoint_model, &plan, 1, W_NO_GUIDANCE, count, conditions, eval_seed)?;
        let endpoint_baseline =
            distance_to_reference(&endpoint_samples, reference, projections, eval_seed)?;
        let ks_endpoint = ks_statistic(&radial_coords(&endpoint_samples), &teacher_radial)?;

        let progressive_outcome = progressive_student(cfg, teacher, dataset, seed)?;
        let progressive_samples = sample_field(
            &progressive_outcome.student,
            &plan,
            1,
            W_NO_GUIDANCE,
            count,
            conditions,
            eval_seed,
        )?;
        let progressive =
            distance_to_reference(&progressive_samples, reference, projections, eval_seed)?;

        let sweep = cfg_sweep_distances(
            &full,
            &plan,
            &SWEEP_WEIGHTS,
            1,
            count,
            conditions,
            reference,
            projections,
            eval_seed,
        )?;

        rows.push(SeedStudyRow {
            seed,
            dsflow,
            dual_off,
            endpoint_baseline,
            progressive,
            ks_dsflow,
            ks_endpoint,
            sweep,
        });
    }
    Ok(rows)
}

/// Median of a slice (averages the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Counts seeds where `a < b` element-wise.
pub fn wins(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x < y).count()
}

/// One ablation grid cell.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub dual: bool,
    pub weak_cfg: bool,
    pub step_token: bool,
    pub median_distance: f64,
    pub param_count: u64,
}

/// All `2^|axes|` combinations of the requested toggles, evaluated at the
/// 1-step setting over the given seeds. Axes outside the set stay at their
/// full-model defaults.
pub fn ablate_grid(
    cfg: &RunConfig,
    teacher: &VelocityModel,
    dataset: &Dataset,
    reference: &Tensor,
    axes: &[&str],
    seeds: &[u64],
) -> Result<Vec<AblationCell>> {
    let plan = cfg.plan();
    let combos = 1usize << axes.len();
    let mut cells = Vec::with_capacity(combos);
    for mask in 0..combos {
        let mut dual = true;
        let mut weak_cfg = true;
        let mut step_token = true;
        for (bit, axis) in axes.iter().enumerate() {
            let on = mask & (1 << bit) != 0;
            match *axis {
                "dual" => dual = on,
                "weak-cfg" => weak_cfg = on,
                "step-token" => step_token = on,
                other => anyhow::bail!("unknown ablation axis '{other}'"),
            }
        }
        let mut distances = Vec::with_capacity(seeds.len());
        let mut param_count = 0;
        for &seed in seeds {
            let (student, _) =
                ablation_student(cfg, teacher, dataset, dual, weak_cfg, step_token, seed)?;
            param_count = student.total_params();
            let eval_w = if weak_cfg { cfg.eval_w_student } else { W_NO_GUIDANCE };
            let samples = sample_field(
                &student,
                &plan,
                1,
                eval_w,
                cfg.eval_samples,
                cfg.dataset_conditions,
                SeedRng::derive_seed(seed, "arm-eval"),
            )?;
            distances.push(distance_to_reference(
                &samples,
                reference,
                cfg.eval_projections,
                SeedRng::derive_seed(seed, "arm-eval"),
            )?);
        }
        cells.push(AblationCell {
            dual,
            weak_cfg,
            step_token,
            median_distance: median(&distances),
            param_count,
        });
    }
    Ok(cells)
}

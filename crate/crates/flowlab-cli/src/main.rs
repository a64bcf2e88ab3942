//! `flowlab` command line: train teachers, distill students, sample, evaluate,
//! ablate, sweep guidance, benchmark, audit gradients, and count parameters.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flowlab_core::distill::{
    build_iteration_loss, dual_loss_node, teacher_targets, DistillPlan, RolloutMode,
};
use flowlab_core::flow::make_schedule;
use flowlab_core::metrics::{histogram, nfe, radial_coords, sliced_wasserstein};
use flowlab_core::model::{
    count_conditioning_params, entropy_lower_bound_params, step_entropy_bits, uniform_prior,
    CondId, CondMode, ModelConfig, VelocityModel,
};
use flowlab_core::params::finite_diff_check;
use flowlab_core::rng::SeedRng;
use flowlab_core::CoreError;

use flowlab_cli::bench::latency_bench;
use flowlab_cli::checkpoint::{load_model, load_model_expecting, save_model};
use flowlab_cli::config::RunConfig;
use flowlab_cli::csvio::{save_samples_csv, save_trajectory_csv};
use flowlab_cli::experiments::{
    ablate_grid, build_dataset, cfg_sweep_distances, dsflow_student, endpoint_baseline_student,
    held_out_dataset, progressive_student, sample_field, train_teacher_run, SWEEP_WEIGHTS,
};
use flowlab_cli::report::{svg_line_chart, write_curve_csv, write_table_csv, MetricReport, Series};

#[derive(Parser)]
#[command(
    name = "flowlab",
    about = "Desk-scale flow-matching distillation laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RolloutArg {
    #[value(name = "teacher-forced")]
    TeacherForced,
    #[value(name = "free-rollout")]
    FreeRollout,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Svg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Dsflow,
    Endpoint,
    Progressive,
}

#[derive(Args)]
struct CommonArgs {
    /// key = value run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (default: $FLOWLAB_OUT or ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the multi-step teacher and save its checkpoint.
    TrainTeacher {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Distill a frozen teacher checkpoint into a student.
    Distill {
        #[command(flatten)]
        common: CommonArgs,
        /// Teacher checkpoint path.
        #[arg(long)]
        teacher: PathBuf,
        /// Endpoint-term supervision mode override.
        #[arg(long)]
        mode: Option<RolloutArg>,
        /// Restrict the supported step set to this single count.
        #[arg(long)]
        steps: Option<u32>,
        /// Which distillation arm to run.
        #[arg(long, value_enum, default_value_t = ArmArg::Dsflow)]
        arm: ArmArg,
    },
    /// Generate samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint path.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Inference step count.
        #[arg(long, default_value_t = 1)]
        steps: u32,
        /// Guidance weight.
        #[arg(long, default_value_t = 0.05)]
        w: f64,
        /// Number of samples.
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Also export the first probe's trajectory.
        #[arg(long)]
        trajectory: bool,
    },
    /// Distribution metrics of a student against held-out data and teacher.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: u32,
        /// Student guidance weight.
        #[arg(long, default_value_t = 0.05)]
        w: f64,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
    },
    /// Train and evaluate every toggle combination of the given axes.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Comma-separated subset of dual,weak-cfg,step-token.
        #[arg(long, default_value = "dual,weak-cfg,step-token")]
        axes: String,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Distance versus guidance weight for a trained student.
    CfgSweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: u32,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
    /// Wall-clock per-sample latency and function-evaluation count.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: u32,
        #[arg(long, default_value_t = 0.05)]
        w: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Finite-difference audit of every composite loss gradient.
    CheckGrads {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Exact conditioning-pathway parameter arithmetic.
    CountParams {
        /// Transformer-analogue layer count L.
        #[arg(long, default_value_t = 16)]
        layers: u64,
        /// Hidden width D.
        #[arg(long, default_value_t = 512)]
        hidden: u64,
        /// Number of supported discrete step counts K.
        #[arg(long, default_value_t = 3)]
        step_counts: u64,
        /// Learnable tokens per step m.
        #[arg(long, default_value_t = 1)]
        tokens_per_step: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage and parse problems are configuration errors: exit 1.
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_numeric_failure(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_numeric_failure(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        cause.downcast_ref::<CoreError>().is_some_and(|c| {
            matches!(
                c,
                CoreError::NonFinite { .. }
                    | CoreError::NonFiniteState { .. }
                    | CoreError::Diverged { .. }
                    | CoreError::NonDeterministicLoss
            )
        })
    })
}

fn out_dir(common: &CommonArgs) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os("FLOWLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::from_file(path),
        None => Ok(RunConfig::default()),
    }
}

fn curve_rows(curve: &[f64]) -> Vec<(f64, f64)> {
    curve.iter().enumerate().map(|(i, l)| (i as f64, *l)).collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainTeacher { common } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common);
            let (teacher, curve) = train_teacher_run(&cfg, common.seed)?;
            save_model(&teacher, common.seed, &out.join("teacher.json"))?;
            write_curve_csv(&out.join("teacher_loss.csv"), ("iteration", "loss"), &curve_rows(&curve))?;

            let mut report = MetricReport::new("train-teacher", vec![common.seed], &cfg.echo);
            report.put("final_loss", *curve.last().context("empty loss curve")?)?;
            report.put("iterations", curve.len() as f64)?;
            report.put("param_count", teacher.total_params() as f64)?;
            report.save(&out.join("teacher_report.json"))?;
            println!(
                "teacher trained: {} params, final loss {:.6}, checkpoint {}",
                teacher.total_params(),
                curve.last().unwrap(),
                out.join("teacher.json").display()
            );
            Ok(())
        }
        Command::Distill { common, teacher, mode, steps, arm } => {
            let mut cfg = load_config(&common)?;
            if let Some(mode) = mode {
                cfg.plan_rollout = match mode {
                    RolloutArg::TeacherForced => RolloutMode::TeacherForced,
                    RolloutArg::FreeRollout => RolloutMode::FreeRollout,
                };
            }
            if let Some(n) = steps {
                cfg.model_supported_steps = vec![n];
            }
            let out = out_dir(&common);
            let (teacher_model, _) = load_model_expecting(&teacher, &cfg.teacher_config())
                .with_context(|| format!("loading teacher checkpoint {}", teacher.display()))?;
            let dataset = build_dataset(&cfg)?;

            let (label, student, curve) = match arm {
                ArmArg::Dsflow => {
                    let (s, c) = dsflow_student(&cfg, &teacher_model, &dataset, common.seed)?;
                    ("dsflow", s, c)
                }
                ArmArg::Endpoint => {
                    let (s, c) =
                        endpoint_baseline_student(&cfg, &teacher_model, &dataset, common.seed)?;
                    ("endpoint", s, c)
                }
                ArmArg::Progressive => {
                    let outcome = progressive_student(&cfg, &teacher_model, &dataset, common.seed)?;
                    println!("halving schedule: {:?}", outcome.stages);
                    let curve = outcome.curves.into_iter().flatten().collect();
                    ("progressive", outcome.student, curve)
                }
            };
            save_model(&student, common.seed, &out.join(format!("student_{label}.json")))?;
            write_curve_csv(
                &out.join(format!("student_{label}_loss.csv")),
                ("iteration", "loss"),
                &curve_rows(&curve),
            )?;
            let mut report = MetricReport::new(&format!("distill-{label}"), vec![common.seed], &cfg.echo);
            report.put("final_loss", *curve.last().context("empty loss curve")?)?;
            report.put("param_count", student.total_params() as f64)?;
            report.put("rollout_teacher_forced", (cfg.plan_rollout == RolloutMode::TeacherForced) as u8 as f64)?;
            report.save(&out.join(format!("student_{label}_report.json")))?;
            println!(
                "{label} student trained: {} params, final loss {:.6}",
                student.total_params(),
                curve.last().unwrap()
            );
            Ok(())
        }
        Command::Sample { common, checkpoint, steps, w, count, trajectory } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common);
            let (model, _) = load_model(&checkpoint)?;
            let plan = cfg.plan();
            let samples =
                sample_field(&model, &plan, steps, w, count, model.config().conditions, common.seed)?;
            let conds: Vec<usize> = (0..count).map(|i| i % model.config().conditions).collect();
            save_samples_csv(&samples, &conds, &out.join("samples.csv"))?;
            println!(
                "wrote {count} samples ({steps} steps, w = {w}, NFE = {}) to {}",
                nfe(steps, w),
                out.join("samples.csv").display()
            );
            if trajectory {
                let schedule = flowlab_core::distill::student_schedule(&plan, steps)?;
                let mut rng = SeedRng::new(SeedRng::derive_seed(common.seed, "sample-probes"));
                let z = rng.normal_tensor(1, model.config().d_data);
                let step_arg = (model.config().mode == CondMode::StepToken).then_some(steps);
                let traj = flowlab_core::flow::euler_solve(
                    &model,
                    &z,
                    &[CondId::Id(0)],
                    &schedule,
                    w,
                    step_arg,
                )?;
                save_trajectory_csv(&traj, 0, &out.join("trajectory.csv"))?;
            }
            Ok(())
        }
        Command::Eval { common, teacher, student, steps, w, format } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common);
            let (teacher_model, _) = load_model(&teacher)?;
            let (student_model, _) = load_model(&student)?;
            let plan = cfg.plan();
            let reference = held_out_dataset(&cfg)?.data_matrix()?;
            let conditions = cfg.dataset_conditions;

            let student_samples = sample_field(
                &student_model,
                &plan,
                steps,
                w,
                cfg.eval_samples,
                conditions,
                common.seed,
            )?;
            let teacher_samples = sample_field(
                &teacher_model,
                &plan,
                cfg.plan_teacher_steps as u32,
                cfg.plan_w_teacher,
                cfg.eval_samples,
                conditions,
                common.seed,
            )?;
            let d_student =
                sliced_wasserstein(&student_samples, &reference, cfg.eval_projections, common.seed)?;
            let d_teacher =
                sliced_wasserstein(&teacher_samples, &reference, cfg.eval_projections, common.seed)?;

            // Endpoint MSE against the teacher rollout from shared probes.
            let mut rng = SeedRng::new(SeedRng::derive_seed(common.seed, "eval-probes"));
            let z = rng.normal_tensor(cfg.eval_samples.min(512), cfg.dataset_d_data);
            let conds: Vec<CondId> = (0..z.rows()).map(|i| CondId::Id(i % conditions)).collect();
            let endpoint_mse = flowlab_core::metrics::rollout_endpoint_mse(
                &student_model,
                &flowlab_core::distill::student_schedule(&plan, steps)?,
                w,
                (student_model.config().mode == CondMode::StepToken).then_some(steps),
                &teacher_model,
                &make_schedule(cfg.plan_teacher_schedule, cfg.plan_teacher_steps)?,
                cfg.plan_w_teacher,
                None,
                &z,
                &conds,
            )?;

            let student_radial = radial_coords(&student_samples);
            let teacher_radial = radial_coords(&teacher_samples);
            let ks = flowlab_core::metrics::ks_statistic(&student_radial, &teacher_radial)?;
            let radial_hi = student_radial
                .iter()
                .chain(&teacher_radial)
                .fold(1.0f64, |m, &v| m.max(v))
                .ceil();
            let h_student = histogram(&student_radial, 0.0, radial_hi)?;
            let h_teacher = histogram(&teacher_radial, 0.0, radial_hi)?;

            let mut report = MetricReport::new("eval", vec![common.seed], &cfg.echo);
            report.put("sw_student_vs_data", d_student)?;
            report.put("sw_teacher_vs_data", d_teacher)?;
            report.put("endpoint_mse_vs_teacher", endpoint_mse)?;
            report.put("ks_radial_student_vs_teacher", ks)?;
            report.put("nfe_student", nfe(steps, w) as f64)?;
            report.put("nfe_teacher", nfe(cfg.plan_teacher_steps as u32, cfg.plan_w_teacher) as f64)?;
            report.put("param_count_student", student_model.total_params() as f64)?;
            report.put("param_count_teacher", teacher_model.total_params() as f64)?;
            report.put_histogram("radial_student", &h_student);
            report.put_histogram("radial_teacher", &h_teacher);
            report.save(&out.join("eval_report.json"))?;
            println!(
                "student SW {d_student:.4} | teacher SW {d_teacher:.4} | endpoint MSE {endpoint_mse:.4} | KS {ks:.4}"
            );

            if matches!(format, FormatArg::Svg) {
                let centers = |h: &flowlab_core::metrics::Histogram| -> Vec<(f64, f64)> {
                    let width = (h.hi - h.lo) / h.counts.len() as f64;
                    h.counts
                        .iter()
                        .enumerate()
                        .map(|(i, &c)| (h.lo + (i as f64 + 0.5) * width, c as f64))
                        .collect()
                };
                svg_line_chart(
                    &out.join("radial_histogram.svg"),
                    "Radial feature histogram",
                    "radius",
                    "count",
                    &[
                        Series { label: "teacher", points: centers(&h_teacher) },
                        Series { label: "student", points: centers(&h_student) },
                    ],
                )?;
            }
            Ok(())
        }
        Command::Ablate { common, teacher, axes, seeds } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common);
            let (teacher_model, _) = load_model_expecting(&teacher, &cfg.teacher_config())?;
            let dataset = build_dataset(&cfg)?;
            let reference = held_out_dataset(&cfg)?.data_matrix()?;
            let axes: Vec<&str> = axes.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>().context("bad seed list"))
                .collect::<Result<_>>()?;
            let cells = ablate_grid(&cfg, &teacher_model, &dataset, &reference, &axes, &seeds)?;
            let rows: Vec<Vec<String>> = cells
                .iter()
                .map(|c| {
                    vec![
                        c.dual.to_string(),
                        c.weak_cfg.to_string(),
                        c.step_token.to_string(),
                        format!("{}", c.median_distance),
                        c.param_count.to_string(),
                    ]
                })
                .collect();
            write_table_csv(
                &out.join("ablation.csv"),
                &["dual", "weak_cfg", "step_token", "median_distance", "param_count"],
                &rows,
            )?;
            println!("wrote {} ablation cells to {}", cells.len(), out.join("ablation.csv").display());
            Ok(())
        }
        Command::CfgSweep { common, student, steps, format } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common);
            let (student_model, _) = load_model(&student)?;
            let plan = cfg.plan();
            let reference = held_out_dataset(&cfg)?.data_matrix()?;
            let sweep = cfg_sweep_distances(
                &student_model,
                &plan,
                &SWEEP_WEIGHTS,
                steps,
                cfg.eval_samples,
                cfg.dataset_conditions,
                &reference,
                cfg.eval_projections,
                common.seed,
            )?;
            write_curve_csv(&out.join("cfg_sweep.csv"), ("w", "distance"), &sweep)?;
            for (w, d) in &sweep {
                println!("w = {w:.2}: distance {d:.4}");
            }
            if matches!(format, FormatArg::Svg) {
                svg_line_chart(
                    &out.join("cfg_sweep.svg"),
                    "Distance vs guidance weight",
                    "w",
                    "sliced Wasserstein",
                    &[Series { label: "student", points: sweep.clone() }],
                )?;
            }
            Ok(())
        }
        Command::Bench { common, checkpoint, steps, w, batch, repeats } => {
            let cfg = load_config(&common)?;
            let (model, _) = load_model(&checkpoint)?;
            let result = latency_bench(&model, steps, w, batch, repeats, &cfg.plan())?;
            println!(
                "steps {} w {}: {:.3} ms/sample (median of {} repeats, batch {}), NFE {}",
                result.steps,
                result.guidance,
                result.seconds_per_sample * 1e3,
                result.repeats,
                result.batch,
                result.nfe
            );
            println!("note: wall-clock stands in for real-time factor; no audio duration exists here");
            Ok(())
        }
        Command::CheckGrads { common } => {
            let tolerance = 1e-4;
            let config = ModelConfig {
                layers: 2,
                hidden: 8,
                d_data: 2,
                conditions: 3,
                mode: CondMode::StepToken,
                tokens_per_step: 2,
                supported_steps: vec![1, 2],
                time_embed_dim: 8,
            };
            let teacher =
                VelocityModel::new(ModelConfig { mode: CondMode::AdaLn, ..config.clone() }, 1)?;
            let student = VelocityModel::new(config, common.seed.wrapping_add(2))?;
            let plan = DistillPlan { supported_steps: vec![1, 2], teacher_steps: 4, ..DistillPlan::default() };
            let mut rng = SeedRng::new(common.seed);
            let z = rng.normal_tensor(3, 2);
            let conds = vec![CondId::Id(0), CondId::Id(1), CondId::Id(2)];
            let targets = teacher_targets(&teacher, &z, &conds, &plan, 2)?;

            let dual = finite_diff_check(
                || dual_loss_node(&student, &targets, &conds, 2, plan.alpha, plan.rollout),
                student.store(),
                1e-5,
            )?;
            println!(
                "dual loss: max rel error {:.3e} over {} entries (worst {})",
                dual.max_rel_error, dual.entries, dual.worst_param
            );
            let lambda_free = DistillPlan { lambda: 0.0, ..plan.clone() };
            let stage = finite_diff_check(
                || build_iteration_loss(&student, &targets, &conds, &lambda_free, 2),
                student.store(),
                1e-5,
            )?;
            println!(
                "stage loss (lambda = 0): max rel error {:.3e} over {} entries (worst {})",
                stage.max_rel_error, stage.entries, stage.worst_param
            );
            if dual.max_rel_error > tolerance || stage.max_rel_error > tolerance {
                bail!(CoreError::NonFinite { op: "check-grads tolerance exceeded" });
            }
            println!("gradient checks passed at tolerance {tolerance:.0e}");
            Ok(())
        }
        Command::CountParams { layers, hidden, step_counts, tokens_per_step } => {
            let counts = count_conditioning_params(step_counts, layers, hidden, tokens_per_step);
            let entropy = step_entropy_bits(&uniform_prior(step_counts as usize))?;
            let bound = entropy_lower_bound_params(step_counts, hidden);
            println!(
                "step-token parameters: {} ({} steps x {} tokens x {} width)",
                counts.token_params, step_counts, tokens_per_step, hidden
            );
            println!("adaLN-style parameters: {} (4 x {layers} x {hidden}^2)", counts.adaln_params);
            println!(
                "ratio adaln/token: {} (exact {:.3})",
                counts.ratio_rounded(),
                counts.ratio()
            );
            println!("step entropy (uniform prior): {entropy:.6} bits");
            println!("information floor: {bound} parameters");
            Ok(())
        }
    }
}

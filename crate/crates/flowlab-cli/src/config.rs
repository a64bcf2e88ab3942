//! Plain-text `key=value` run configuration. Unknown keys are hard errors
//! so typos cannot silently fall back to defaults; the raw text is echoed
//! verbatim into every report.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use flowlab_core::datasets::{DatasetKind, DatasetSpec};
use flowlab_core::distill::{DistillPlan, DistillTrainOptions, MidpointConvention, RolloutMode};
use flowlab_core::flow::{ScheduleKind, TeacherTrainOptions};
use flowlab_core::model::{CondMode, ModelConfig};
use flowlab_core::params::AdamConfig;

/// Everything a run needs, with toy-scale defaults. Lines are `key = value`;
/// `#` starts a comment; blank lines are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_kind: DatasetKind,
    pub dataset_d_data: usize,
    pub dataset_conditions: usize,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub csv_path: Option<String>,
    pub csv_has_header: bool,
    pub csv_condition_column: Option<usize>,

    pub model_layers: usize,
    pub model_hidden: usize,
    pub model_mode: CondMode,
    pub model_tokens_per_step: usize,
    pub model_supported_steps: Vec<u32>,

    pub plan_alpha: f64,
    pub plan_lambda: f64,
    pub plan_w_teacher: f64,
    pub plan_teacher_steps: usize,
    pub plan_teacher_schedule: ScheduleKind,
    pub plan_rollout: RolloutMode,
    pub plan_midpoint: MidpointConvention,

    pub train_iterations: usize,
    pub distill_iterations: usize,
    pub train_batch_size: usize,
    pub train_lr: f64,
    pub train_weight_decay: f64,
    pub train_p_uncond: f64,
    pub train_repair_noise: bool,

    pub eval_samples: usize,
    pub eval_projections: usize,
    pub eval_w_student: f64,
    pub eval_steps: u32,

    /// Verbatim text this config was parsed from (empty for defaults).
    pub echo: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_kind: DatasetKind::GaussMixture,
            dataset_d_data: 2,
            dataset_conditions: 4,
            dataset_size: 5000,
            dataset_seed: 0,
            csv_path: None,
            csv_has_header: false,
            csv_condition_column: None,
            model_layers: 4,
            model_hidden: 64,
            model_mode: CondMode::AdaLn,
            model_tokens_per_step: 3,
            model_supported_steps: vec![1, 2, 4],
            plan_alpha: 0.7,
            plan_lambda: 0.01,
            plan_w_teacher: 0.7,
            plan_teacher_steps: 10,
            plan_teacher_schedule: ScheduleKind::Cosine,
            plan_rollout: RolloutMode::TeacherForced,
            plan_midpoint: MidpointConvention::GlobalT,
            train_iterations: 3000,
            distill_iterations: 2000,
            train_batch_size: 32,
            train_lr: 1e-3,
            train_weight_decay: 0.0,
            train_p_uncond: 0.02,
            train_repair_noise: false,
            eval_samples: 2000,
            eval_projections: 512,
            eval_w_student: 0.05,
            eval_steps: 1,
            echo: String::new(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig { echo: text.to_string(), ..RunConfig::default() };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got '{raw}'", lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value)
                .with_context(|| format!("line {}: key '{key}'", lineno + 1))?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset.kind" => self.dataset_kind = DatasetKind::parse(value)?,
            "dataset.d_data" => self.dataset_d_data = parse_num(value)?,
            "dataset.conditions" => self.dataset_conditions = parse_num(value)?,
            "dataset.size" => self.dataset_size = parse_num(value)?,
            "dataset.seed" => self.dataset_seed = parse_num(value)?,
            "dataset.csv_path" => self.csv_path = Some(value.to_string()),
            "dataset.csv_has_header" => self.csv_has_header = parse_bool(value)?,
            "dataset.csv_condition_column" => {
                self.csv_condition_column = Some(parse_num(value)?)
            }
            "model.layers" => self.model_layers = parse_num(value)?,
            "model.hidden" => self.model_hidden = parse_num(value)?,
            "model.mode" => self.model_mode = CondMode::parse(value)?,
            "model.tokens_per_step" => self.model_tokens_per_step = parse_num(value)?,
            "model.supported_steps" => self.model_supported_steps = parse_steps(value)?,
            "plan.alpha" => self.plan_alpha = parse_float(value)?,
            "plan.lambda" => self.plan_lambda = parse_float(value)?,
            "plan.w_teacher" => self.plan_w_teacher = parse_float(value)?,
            "plan.teacher_steps" => self.plan_teacher_steps = parse_num(value)?,
            "plan.teacher_schedule" => self.plan_teacher_schedule = ScheduleKind::parse(value)?,
            "plan.rollout" => self.plan_rollout = RolloutMode::parse(value)?,
            "plan.midpoint" => {
                self.plan_midpoint = match value {
                    "global-t" => MidpointConvention::GlobalT,
                    "local-half" => MidpointConvention::LocalHalf,
                    other => bail!("unknown midpoint convention '{other}'"),
                }
            }
            "train.iterations" => self.train_iterations = parse_num(value)?,
            "distill.iterations" => self.distill_iterations = parse_num(value)?,
            "train.batch_size" => self.train_batch_size = parse_num(value)?,
            "train.lr" => self.train_lr = parse_float(value)?,
            "train.weight_decay" => self.train_weight_decay = parse_float(value)?,
            "train.p_uncond" => self.train_p_uncond = parse_float(value)?,
            "train.repair_noise" => self.train_repair_noise = parse_bool(value)?,
            "eval.samples" => self.eval_samples = parse_num(value)?,
            "eval.projections" => self.eval_projections = parse_num(value)?,
            "eval.w_student" => self.eval_w_student = parse_float(value)?,
            "eval.steps" => self.eval_steps = parse_num(value)?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.dataset_kind,
            d_data: self.dataset_d_data,
            conditions: self.dataset_conditions,
            size: self.dataset_size,
            seed: self.dataset_seed,
        }
    }

    pub fn model_config(&self, mode: CondMode) -> ModelConfig {
        ModelConfig {
            layers: self.model_layers,
            hidden: self.model_hidden,
            d_data: self.dataset_d_data,
            conditions: self.dataset_conditions,
            mode,
            tokens_per_step: self.model_tokens_per_step,
            supported_steps: self.model_supported_steps.clone(),
            time_embed_dim: self.model_hidden,
        }
    }

    pub fn teacher_config(&self) -> ModelConfig {
        self.model_config(self.model_mode)
    }

    pub fn student_config(&self) -> ModelConfig {
        let mode = match self.model_mode {
            // The teacher-side default maps to the step-token student.
            CondMode::AdaLn => CondMode::StepToken,
            other => other,
        };
        self.model_config(mode)
    }

    pub fn plan(&self) -> DistillPlan {
        DistillPlan {
            supported_steps: self.model_supported_steps.clone(),
            alpha: self.plan_alpha,
            lambda: self.plan_lambda,
            w_teacher: self.plan_w_teacher,
            teacher_steps: self.plan_teacher_steps,
            teacher_schedule: self.plan_teacher_schedule,
            rollout: self.plan_rollout,
            midpoint: self.plan_midpoint,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train_lr,
            weight_decay: self.train_weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn teacher_options(&self) -> TeacherTrainOptions {
        TeacherTrainOptions {
            iterations: self.train_iterations,
            batch_size: self.train_batch_size,
            adam: self.adam(),
            p_uncond: self.train_p_uncond,
            repair_noise: self.train_repair_noise,
        }
    }

    pub fn distill_options(&self) -> DistillTrainOptions {
        DistillTrainOptions {
            iterations: self.distill_iterations,
            batch_size: self.train_batch_size,
            adam: self.adam(),
            repair_noise: self.train_repair_noise,
        }
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    value.parse::<T>().with_context(|| format!("cannot parse '{value}' as integer"))
}

fn parse_float(value: &str) -> Result<f64> {
    value.parse::<f64>().with_context(|| format!("cannot parse '{value}' as float"))
}

fn parse_bool(value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => bail!("cannot parse '{other}' as bool"),
    }
}

fn parse_steps(value: &str) -> Result<Vec<u32>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .with_context(|| format!("cannot parse step count '{s}'"))
        })
        .collect()
}

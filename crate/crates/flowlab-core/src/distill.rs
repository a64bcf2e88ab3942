//! Distillation of a multi-step guided teacher into few-step students:
//! deterministic mean-velocity targets over teacher-knot-aligned intervals,
//! dual supervision (endpoint matching + velocity alignment), weak-guidance
//! regularization through a stop-gradient, the training loop, and the
//! endpoint-only / progressive baselines.
//!
//! Loss reduction convention, applied uniformly to every term: sum over
//! feature dimensions, mean over batch and intervals.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::datasets::{BatchIter, Dataset};
use crate::error::CoreError;
use crate::flow::{euler_solve, make_schedule, Schedule, ScheduleKind, VelocityField};
use crate::graph::{backward, Node};
use crate::model::{CondId, CondMode, ModelConfig, VelocityModel};
use crate::params::AdamConfig;
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::Result;

/// How the endpoint term supervises the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Per-interval: one student Euler step from the teacher's interval-start
    /// state, matched against the teacher's interval-end state.
    TeacherForced,
    /// Composed: the student rolls its own chain from noise and only the
    /// final state is matched against the teacher endpoint.
    FreeRollout,
}

impl RolloutMode {
    pub fn name(self) -> &'static str {
        match self {
            RolloutMode::TeacherForced => "teacher-forced",
            RolloutMode::FreeRollout => "free-rollout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher-forced" => Ok(RolloutMode::TeacherForced),
            "free-rollout" => Ok(RolloutMode::FreeRollout),
            other => Err(CoreError::InvalidConfig(format!("unknown rollout mode '{other}'"))),
        }
    }
}

/// Where the intermediate evaluation state sits inside an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MidpointConvention {
    /// Literal form: `x = (1 - t_mid) x_start + t_mid x_end` with the global
    /// midpoint time. For the interval `[0, 0.5]` this puts the state a
    /// quarter of the way along the segment.
    GlobalT,
    /// Segment midpoint `(x_start + x_end) / 2`.
    LocalHalf,
}

/// All constants of one distillation configuration.
#[derive(Debug, Clone)]
pub struct DistillPlan {
    /// Supported student step counts `S`.
    pub supported_steps: Vec<u32>,
    /// Dual-supervision weight on the endpoint term.
    pub alpha: f64,
    /// Weak-guidance regularization weight.
    pub lambda: f64,
    /// Guidance applied when generating teacher targets.
    pub w_teacher: f64,
    pub teacher_steps: usize,
    pub teacher_schedule: ScheduleKind,
    pub rollout: RolloutMode,
    pub midpoint: MidpointConvention,
}

impl Default for DistillPlan {
    fn default() -> Self {
        DistillPlan {
            supported_steps: vec![1, 2, 4],
            alpha: 0.7,
            lambda: 0.01,
            w_teacher: crate::flow::DEFAULT_TEACHER_GUIDANCE,
            teacher_steps: crate::flow::DEFAULT_TEACHER_STEPS,
            teacher_schedule: ScheduleKind::Cosine,
            rollout: RolloutMode::TeacherForced,
            midpoint: MidpointConvention::GlobalT,
        }
    }
}

impl DistillPlan {
    /// Endpoint-only distillation baseline: composed single-step endpoint
    /// matching, no velocity term, no guidance-branch regularizer.
    pub fn endpoint_baseline() -> Self {
        DistillPlan {
            supported_steps: vec![1],
            alpha: 1.0,
            lambda: 0.0,
            rollout: RolloutMode::FreeRollout,
            ..DistillPlan::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.supported_steps.is_empty() {
            return Err(CoreError::InvalidConfig("supported_steps must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoreError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(CoreError::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.teacher_steps == 0 {
            return Err(CoreError::InvalidConfig("teacher_steps must be >= 1".into()));
        }
        for &n in &self.supported_steps {
            if n == 0 || n as usize > self.teacher_steps {
                return Err(CoreError::InvalidConfig(format!(
                    "student step count {n} must be in 1..=teacher_steps ({})",
                    self.teacher_steps
                )));
            }
        }
        Ok(())
    }

    pub fn teacher_knots(&self) -> Result<Schedule> {
        make_schedule(self.teacher_schedule, self.teacher_steps)
    }
}

/// Everything the student losses need about one teacher interval.
#[derive(Debug, Clone)]
pub struct IntervalTarget {
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub x_start: Tensor,
    pub x_end: Tensor,
    /// `(x_end - x_start) / (t_end - t_start)`, exact.
    pub mean_velocity: Tensor,
    pub t_mid: f64,
    pub x_mid: Tensor,
}

/// Partitions `[0, 1]` into `n` intervals whose boundaries land on existing
/// knots: each target fraction `j/n` snaps to the nearest knot, ties toward
/// the earlier knot. Errors if the snapped boundaries collapse.
pub fn snap_partition(knots: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n >= knots.len() {
        return Err(CoreError::InvalidConfig(format!(
            "cannot split {} knots into {n} intervals",
            knots.len()
        )));
    }
    let mut boundaries = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let frac = j as f64 / n as f64;
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, &k) in knots.iter().enumerate() {
            let d = crate::math::abs(k - frac);
            if d < best_dist {
                best_dist = d;
                best = i;
            }
        }
        boundaries.push(best);
    }
    if boundaries.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoreError::InvalidConfig(format!(
            "snapped boundaries {boundaries:?} are not strictly increasing"
        )));
    }
    Ok(boundaries)
}

/// Runs one guided solve of `field` over `schedule` and extracts per-interval
/// targets for an `n`-interval student partition.
pub fn interval_targets<F: VelocityField>(
    field: &F,
    z: &Tensor,
    conds: &[CondId],
    schedule: &Schedule,
    guidance: f64,
    n: usize,
    midpoint: MidpointConvention,
) -> Result<Vec<IntervalTarget>> {
    let traj = euler_solve(field, z, conds, schedule, guidance, None)?;
    let boundaries = snap_partition(&schedule.knots, n)?;
    let mut targets = Vec::with_capacity(n);
    for k in 0..n {
        let (i0, i1) = (boundaries[k], boundaries[k + 1]);
        let t_start = schedule.knots[i0];
        let t_end = schedule.knots[i1];
        let dt = t_end - t_start;
        let x_start = traj.states[i0].clone();
        let x_end = traj.states[i1].clone();
        let mean_velocity = x_end.sub(&x_start)?.scale(1.0 / dt)?;
        let t_mid = 0.5 * (t_start + t_end);
        let x_mid = match midpoint {
            MidpointConvention::GlobalT => {
                x_start.scale(1.0 - t_mid)?.add(&x_end.scale(t_mid)?)?
            }
            MidpointConvention::LocalHalf => x_start.add(&x_end)?.scale(0.5)?,
        };
        targets.push(IntervalTarget {
            index: k,
            t_start,
            t_end,
            x_start,
            x_end,
            mean_velocity,
            t_mid,
            x_mid,
        });
    }
    Ok(targets)
}

/// Teacher targets for one batch under the plan's frozen-teacher settings.
pub fn teacher_targets<F: VelocityField>(
    teacher: &F,
    z: &Tensor,
    conds: &[CondId],
    plan: &DistillPlan,
    n: u32,
) -> Result<Vec<IntervalTarget>> {
    if !plan.supported_steps.contains(&n) {
        return Err(CoreError::UnsupportedStepCount { n, supported: plan.supported_steps.clone() });
    }
    let schedule = plan.teacher_knots()?;
    interval_targets(teacher, z, conds, &schedule, plan.w_teacher, n as usize, plan.midpoint)
}

/// Node-space velocity source: the differentiable counterpart of
/// [`VelocityField`]. Implemented by [`VelocityModel`] and by test stubs.
pub trait StudentField {
    fn velocity_node(
        &self,
        x: &Node,
        ts: &[f64],
        conds: &[CondId],
        step: Option<u32>,
    ) -> Result<Node>;
}

impl StudentField for VelocityModel {
    fn velocity_node(
        &self,
        x: &Node,
        ts: &[f64],
        conds: &[CondId],
        step: Option<u32>,
    ) -> Result<Node> {
        self.forward_node(x, ts, conds, step)
    }
}

fn batch_rows(targets: &[IntervalTarget]) -> Result<usize> {
    let rows = targets.first().ok_or(CoreError::EmptyBatch)?.x_start.rows();
    if rows == 0 {
        return Err(CoreError::EmptyBatch);
    }
    Ok(rows)
}

/// Squared error `sum_features mean_batch (a - b)^2` as a scalar node.
fn sq_error_node(pred: &Node, target: &Tensor) -> Result<Node> {
    let rows = target.rows() as f64;
    pred.sub(&Node::constant(target.clone()))?.square()?.sum()?.scale(1.0 / rows)
}

/// Endpoint supervision.
///
/// Teacher-forced: for each interval, one student Euler step from the
/// teacher's start state, squared error to the teacher's end state, averaged
/// over intervals. Free-rollout: the student chains its own steps over the
/// same boundaries from the trajectory start, and only the final state is
/// matched.
pub fn endpoint_loss_node<S: StudentField>(
    student: &S,
    targets: &[IntervalTarget],
    conds: &[CondId],
    n: u32,
    mode: RolloutMode,
) -> Result<Node> {
    let rows = batch_rows(targets)?;
    match mode {
        RolloutMode::TeacherForced => {
            let mut total: Option<Node> = None;
            for target in targets {
                let dt = target.t_end - target.t_start;
                let x_start = Node::constant(target.x_start.clone());
                let v = student.velocity_node(
                    &x_start,
                    &vec![target.t_start; rows],
                    conds,
                    Some(n),
                )?;
                let pred = x_start.add(&v.scale(dt)?)?;
                let term = sq_error_node(&pred, &target.x_end)?;
                total = Some(match total {
                    Some(acc) => acc.add(&term)?,
                    None => term,
                });
            }
            total.expect("targets non-empty").scale(1.0 / targets.len() as f64)
        }
        RolloutMode::FreeRollout => {
            let mut x = Node::constant(targets[0].x_start.clone());
            for target in targets {
                let dt = target.t_end - target.t_start;
                let v = student.velocity_node(&x, &vec![target.t_start; rows], conds, Some(n))?;
                x = x.add(&v.scale(dt)?)?;
            }
            sq_error_node(&x, &targets.last().expect("non-empty").x_end)
        }
    }
}

/// Velocity alignment: mean over intervals of the squared error between the
/// student's prediction at the interval's intermediate state and the
/// teacher's mean velocity.
pub fn velocity_loss_node<S: StudentField>(
    student: &S,
    targets: &[IntervalTarget],
    conds: &[CondId],
    n: u32,
) -> Result<Node> {
    let rows = batch_rows(targets)?;
    let mut total: Option<Node> = None;
    for target in targets {
        let v = student.velocity_node(
            &Node::constant(target.x_mid.clone()),
            &vec![target.t_mid; rows],
            conds,
            Some(n),
        )?;
        let term = sq_error_node(&v, &target.mean_velocity)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    total.expect("targets non-empty").scale(1.0 / targets.len() as f64)
}

/// Dual supervision: `alpha * endpoint + (1 - alpha) * velocity`, the
/// per-interval average baked into both terms. `alpha = 1` reduces exactly
/// to the endpoint loss, `alpha = 0` exactly to the velocity loss.
pub fn dual_loss_node<S: StudentField>(
    student: &S,
    targets: &[IntervalTarget],
    conds: &[CondId],
    n: u32,
    alpha: f64,
    mode: RolloutMode,
) -> Result<Node> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    let endpoint = endpoint_loss_node(student, targets, conds, n, mode)?;
    let velocity = velocity_loss_node(student, targets, conds, n)?;
    endpoint.scale(alpha)?.add(&velocity.scale(1.0 - alpha)?)
}

/// Weak guidance-branch regularizer
/// `lambda * || v(x_t, t, null) - sg(v(x_t, t, c)) ||^2`.
///
/// Gradient flows only through the unconditional branch; the conditional
/// branch (including the condition-embedding rows) receives exactly zero.
pub fn cfg_regularizer_node<S: StudentField>(
    student: &S,
    x_t: &Tensor,
    ts: &[f64],
    conds: &[CondId],
    step: Option<u32>,
    lambda: f64,
) -> Result<Node> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(CoreError::InvalidConfig(format!("lambda {lambda} must be >= 0")));
    }
    let rows = x_t.rows();
    if rows == 0 {
        return Err(CoreError::EmptyBatch);
    }
    let x = Node::constant(x_t.clone());
    let anchored = student.velocity_node(&x, ts, conds, step)?.stop_gradient();
    let nulls = vec![CondId::Null; rows];
    let free = student.velocity_node(&x, ts, &nulls, step)?;
    free.sub(&anchored)?.square()?.sum()?.scale(lambda / rows as f64)
}

/// One full training-iteration loss: dual supervision plus the weak-guidance
/// regularizer anchored at the same interval midpoint states. With
/// `lambda = 0` the regularizer contributes nothing and is skipped.
pub fn build_iteration_loss<S: StudentField>(
    student: &S,
    targets: &[IntervalTarget],
    conds: &[CondId],
    plan: &DistillPlan,
    n: u32,
) -> Result<Node> {
    let rows = batch_rows(targets)?;
    let dual = dual_loss_node(student, targets, conds, n, plan.alpha, plan.rollout)?;
    if plan.lambda == 0.0 {
        return Ok(dual);
    }
    let mut reg: Option<Node> = None;
    for target in targets {
        let term = cfg_regularizer_node(
            student,
            &target.x_mid,
            &vec![target.t_mid; rows],
            conds,
            Some(n),
            plan.lambda,
        )?;
        reg = Some(match reg {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    dual.add(&reg.expect("targets non-empty").scale(1.0 / targets.len() as f64)?)
}

/// Optional cache for teacher targets, keyed by training iteration (the
/// iteration determines batch contents and step count under a fixed seed).
pub trait TargetCache {
    fn get(&mut self, key: u64) -> Option<Vec<IntervalTarget>>;
    fn put(&mut self, key: u64, targets: &[IntervalTarget]);
}

/// Knobs for [`train_student`] and [`progressive_distill`].
#[derive(Debug, Clone)]
pub struct DistillTrainOptions {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Redraw paired noise per batch instead of the dataset pairing.
    pub repair_noise: bool,
}

impl Default for DistillTrainOptions {
    fn default() -> Self {
        DistillTrainOptions {
            iterations: 2000,
            batch_size: 32,
            adam: AdamConfig::default(),
            repair_noise: false,
        }
    }
}

/// Distills a frozen teacher into a fresh student.
///
/// Per iteration: sample a batch and a step count uniformly from the plan's
/// supported set, build teacher targets (or fetch them from the cache), take
/// one optimizer step on dual supervision plus the weak-guidance
/// regularizer. Deterministic under `(configs, options, seed)`.
pub fn train_student(
    teacher: &VelocityModel,
    student_config: &ModelConfig,
    dataset: &Dataset,
    plan: &DistillPlan,
    options: &DistillTrainOptions,
    seed: u64,
    mut cache: Option<&mut dyn TargetCache>,
) -> Result<(VelocityModel, Vec<f64>)> {
    plan.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    if student_config.mode == CondMode::StepToken {
        for n in &plan.supported_steps {
            if !student_config.supported_steps.contains(n) {
                return Err(CoreError::UnsupportedStepCount {
                    n: *n,
                    supported: student_config.supported_steps.clone(),
                });
            }
        }
    }
    let mut student = VelocityModel::new(student_config.clone(), seed)?;
    let mut batches = BatchIter::new(
        dataset,
        options.batch_size,
        SeedRng::derive_seed(seed, "student-batches"),
    )?;
    let mut rng = SeedRng::new(SeedRng::derive_seed(seed, "student-train"));
    let mut curve = Vec::with_capacity(options.iterations);

    for iteration in 0..options.iterations {
        let idx = batches.next_batch();
        let (x1, mut z, cond_ids) = dataset.gather(&idx)?;
        if options.repair_noise {
            z = rng.normal_tensor(x1.rows(), x1.cols());
        }
        let conds: Vec<CondId> = cond_ids.iter().map(|&c| CondId::Id(c)).collect();
        let n = *rng.choose(&plan.supported_steps);

        let targets = match cache.as_mut().and_then(|c| c.get(iteration as u64)) {
            Some(hit) => hit,
            None => {
                let fresh = teacher_targets(teacher, &z, &conds, plan, n)
                    .map_err(|e| iteration_failure(e, iteration))?;
                if let Some(c) = cache.as_mut() {
                    c.put(iteration as u64, &fresh);
                }
                fresh
            }
        };

        let loss = build_iteration_loss(&student, &targets, &conds, plan, n)
            .map_err(|e| iteration_failure(e, iteration))?;
        let loss_value = loss.value().item()?;
        if !loss_value.is_finite() {
            return Err(CoreError::Diverged { iteration });
        }
        curve.push(loss_value);
        student.store().zero_grads();
        backward(&loss).map_err(|e| iteration_failure(e, iteration))?;
        student
            .store_mut()
            .adam_step(&options.adam)
            .map_err(|e| iteration_failure(e, iteration))?;
    }
    Ok((student, curve))
}

fn iteration_failure(e: CoreError, iteration: usize) -> CoreError {
    match e {
        CoreError::NonFinite { .. } | CoreError::NonFiniteState { .. } => {
            CoreError::Diverged { iteration }
        }
        other => other,
    }
}

/// Next rung of the halving ladder: the largest power of two strictly below
/// `n` when `n` is not itself a power of two, else `n / 2`.
pub fn halve_steps(n: usize) -> usize {
    debug_assert!(n > 1);
    if n.is_power_of_two() {
        n / 2
    } else {
        let mut p = 1;
        while p * 2 < n {
            p *= 2;
        }
        p
    }
}

/// Result of [`progressive_distill`].
pub struct ProgressiveOutcome {
    pub student: VelocityModel,
    /// `(from, to)` step counts of each stage.
    pub stages: Vec<(usize, usize)>,
    pub curves: Vec<Vec<f64>>,
}

/// Progressive endpoint distillation baseline: a chain of continuous-time
/// (adaln) students, each endpoint-matching the previous model's composition
/// over pair-aligned partitions, halving the step count until one step
/// remains. Stage targets after the first use pure conditional sampling
/// (guidance is already internalized by the first student).
pub fn progressive_distill(
    teacher: &VelocityModel,
    student_config: &ModelConfig,
    dataset: &Dataset,
    plan: &DistillPlan,
    options: &DistillTrainOptions,
    seed: u64,
) -> Result<ProgressiveOutcome> {
    plan.validate()?;
    let config = student_config.clone().with_mode(CondMode::AdaLn);
    let mut prev = teacher.deep_clone(SeedRng::derive_seed(seed, "progressive-clone"))?;
    let mut prev_schedule = plan.teacher_knots()?;
    let mut guidance = plan.w_teacher;
    let mut stages = Vec::new();
    let mut curves = Vec::new();
    let mut steps = plan.teacher_steps;
    let mut stage_index = 0u64;

    while steps > 1 {
        let next = halve_steps(steps);
        stages.push((steps, next));
        let stage_seed = SeedRng::derive_seed(seed, &format!("progressive-stage-{stage_index}"));
        let mut student = VelocityModel::new(config.clone(), stage_seed)?;
        // Warm start from the previous model.
        student.copy_common_params_from(&prev)?;

        let mut batches = BatchIter::new(dataset, options.batch_size, stage_seed ^ 0x9e37)?;
        let mut curve = Vec::with_capacity(options.iterations);
        for iteration in 0..options.iterations {
            let idx = batches.next_batch();
            let (_, z, cond_ids) = dataset.gather(&idx)?;
            let conds: Vec<CondId> = cond_ids.iter().map(|&c| CondId::Id(c)).collect();
            let targets = interval_targets(
                &prev,
                &z,
                &conds,
                &prev_schedule,
                guidance,
                next,
                plan.midpoint,
            )
            .map_err(|e| iteration_failure(e, iteration))?;
            let loss =
                endpoint_loss_node(&student, &targets, &conds, next as u32, RolloutMode::TeacherForced)
                    .map_err(|e| iteration_failure(e, iteration))?;
            let loss_value = loss.value().item()?;
            if !loss_value.is_finite() {
                return Err(CoreError::Diverged { iteration });
            }
            curve.push(loss_value);
            student.store().zero_grads();
            backward(&loss).map_err(|e| iteration_failure(e, iteration))?;
            student
                .store_mut()
                .adam_step(&options.adam)
                .map_err(|e| iteration_failure(e, iteration))?;
        }
        curves.push(curve);

        // The stage's snapped boundaries become the next stage's knots.
        let boundaries = snap_partition(&prev_schedule.knots, next)?;
        let knots: Vec<f64> = boundaries.iter().map(|&i| prev_schedule.knots[i]).collect();
        prev_schedule = Schedule::from_knots(ScheduleKind::Snapped, knots)?;
        prev = student;
        guidance = 1.0;
        steps = next;
        stage_index += 1;
    }

    Ok(ProgressiveOutcome { student: prev, stages, curves })
}

/// The student's inference schedule for `n` steps: the plan's teacher knots
/// snapped to an `n`-interval partition, matching the boundaries the student
/// was supervised on.
pub fn student_schedule(plan: &DistillPlan, n: u32) -> Result<Schedule> {
    let teacher = plan.teacher_knots()?;
    let boundaries = snap_partition(&teacher.knots, n as usize)?;
    let knots: Vec<f64> = boundaries.iter().map(|&i| teacher.knots[i]).collect();
    Schedule::from_knots(ScheduleKind::Snapped, knots)
}

/// `n`-step guided sampling from a student. `w = 0` short-circuits to one
/// unconditional forward per step; `w > 0` costs two forwards per step.
pub fn student_sample(
    student: &VelocityModel,
    z: &Tensor,
    conds: &[CondId],
    n: u32,
    w: f64,
    plan: &DistillPlan,
) -> Result<Tensor> {
    let schedule = student_schedule(plan, n)?;
    let step = Some(n);
    let traj = euler_solve(student, z, conds, &schedule, w, step)?;
    Ok(traj.endpoint().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::VelocityField;
    use approx::assert_relative_eq;

    /// Constant teacher: v = u everywhere.
    struct ConstField(Vec<f64>);

    impl VelocityField for ConstField {
        fn velocity(&self, x: &Tensor, _: f64, _: &[CondId], _: Option<u32>) -> Result<Tensor> {
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    out.set(r, c, self.0[c]);
                }
            }
            Ok(out)
        }
    }

    /// Student stub returning a fixed vector keyed by evaluation time.
    struct TimeTable(Vec<(f64, Vec<f64>)>);

    impl StudentField for TimeTable {
        fn velocity_node(
            &self,
            x: &Node,
            ts: &[f64],
            _: &[CondId],
            _: Option<u32>,
        ) -> Result<Node> {
            let [rows, cols] = x.shape();
            let entry = self
                .0
                .iter()
                .find(|(t, _)| *t == ts[0])
                .unwrap_or_else(|| panic!("no stub entry for t = {}", ts[0]));
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    out.set(r, c, entry.1[c]);
                }
            }
            Ok(Node::constant(out))
        }
    }

    /// Student stub that always returns zero.
    struct ZeroStudent;

    impl StudentField for ZeroStudent {
        fn velocity_node(&self, x: &Node, _: &[f64], _: &[CondId], _: Option<u32>) -> Result<Node> {
            let [r, c] = x.shape();
            Ok(Node::constant(Tensor::zeros(r, c)))
        }
    }

    fn default_plan_with(teacher_steps: usize, kind: ScheduleKind) -> DistillPlan {
        DistillPlan {
            teacher_steps,
            teacher_schedule: kind,
            ..DistillPlan::default()
        }
    }

    #[test]
    fn snap_partition_cosine_ten_into_four() {
        let s = make_schedule(ScheduleKind::Cosine, 10).unwrap();
        assert_eq!(snap_partition(&s.knots, 4).unwrap(), vec![0, 3, 5, 7, 10]);
    }

    #[test]
    fn snap_partition_uniform_ties_go_earlier() {
        let s = make_schedule(ScheduleKind::Uniform, 10).unwrap();
        assert_eq!(snap_partition(&s.knots, 4).unwrap(), vec![0, 2, 5, 7, 10]);
        assert_eq!(snap_partition(&s.knots, 1).unwrap(), vec![0, 10]);
        assert!(snap_partition(&s.knots, 11).is_err());
    }

    #[test]
    fn single_interval_target_fields() {
        let plan = default_plan_with(10, ScheduleKind::Cosine);
        let field = ConstField(vec![2.0, -1.0]);
        let z = Tensor::new(1, 2, vec![0.5, 0.5]).unwrap();
        let targets = teacher_targets(&field, &z, &[CondId::Null], &plan, 1).unwrap();
        assert_eq!(targets.len(), 1);
        let t = &targets[0];
        assert_eq!((t.t_start, t.t_end), (0.0, 1.0));
        assert_eq!(t.t_mid, 0.5);
        // v = const u: endpoint z + u, mean velocity u, midpoint halfway.
        for c in 0..2 {
            assert_relative_eq!(t.mean_velocity.get(0, c), field.0[c], epsilon = 1e-12);
            assert_relative_eq!(
                t.x_mid.get(0, c),
                0.5 * (t.x_start.get(0, c) + t.x_end.get(0, c)),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn global_t_midpoint_weighting_is_literal() {
        // Interval [0, 0.5] with a uniform 2-step teacher: the intermediate
        // state uses the global midpoint 0.25 as interpolation weight.
        let plan = DistillPlan {
            supported_steps: vec![1, 2],
            teacher_steps: 2,
            teacher_schedule: ScheduleKind::Uniform,
            ..DistillPlan::default()
        };
        let field = ConstField(vec![4.0]);
        let z = Tensor::scalar(0.0);
        let targets = teacher_targets(&field, &z, &[CondId::Null], &plan, 2).unwrap();
        let first = &targets[0];
        assert_eq!((first.t_start, first.t_end), (0.0, 0.5));
        assert_eq!(first.t_mid, 0.25);
        let expected = 0.75 * first.x_start.get(0, 0) + 0.25 * first.x_end.get(0, 0);
        assert_relative_eq!(first.x_mid.get(0, 0), expected, epsilon = 1e-15);

        // The local-fraction alternative sits at the segment midpoint.
        let local = interval_targets(
            &field,
            &z,
            &[CondId::Null],
            &plan.teacher_knots().unwrap(),
            plan.w_teacher,
            2,
            MidpointConvention::LocalHalf,
        )
        .unwrap();
        assert_relative_eq!(
            local[0].x_mid.get(0, 0),
            0.5 * (first.x_start.get(0, 0) + first.x_end.get(0, 0)),
            epsilon = 1e-15
        );
    }

    #[test]
    fn constant_teacher_mean_velocity_every_interval() {
        let plan = default_plan_with(10, ScheduleKind::Cosine);
        let field = ConstField(vec![1.5, -0.5]);
        let z = Tensor::new(2, 2, vec![0.0, 0.0, 1.0, -1.0]).unwrap();
        let conds = [CondId::Id(0), CondId::Id(1)];
        for n in [1u32, 2, 4] {
            let targets = teacher_targets(&field, &z, &conds, &plan, n).unwrap();
            for t in &targets {
                for r in 0..2 {
                    for c in 0..2 {
                        assert_relative_eq!(
                            t.mean_velocity.get(r, c),
                            field.0[c],
                            epsilon = 1e-9
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn mean_velocity_reconstructs_displacement_exactly() {
        let plan = default_plan_with(10, ScheduleKind::Cosine);
        let field = ConstField(vec![0.7, 0.3]);
        let z = Tensor::new(1, 2, vec![0.2, -0.4]).unwrap();
        let targets = teacher_targets(&field, &z, &[CondId::Null], &plan, 4).unwrap();
        for t in &targets {
            let dt = t.t_end - t.t_start;
            let rebuilt = t.x_start.axpy(dt, &t.mean_velocity).unwrap();
            for c in 0..2 {
                assert_relative_eq!(rebuilt.get(0, c), t.x_end.get(0, c), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn teacher_forced_endpoint_zero_for_mean_velocity_oracle() {
        let plan = default_plan_with(10, ScheduleKind::Cosine);
        let field = ConstField(vec![1.0, 2.0]);
        let z = Tensor::new(1, 2, vec![0.0, 0.0]).unwrap();
        let targets = teacher_targets(&field, &z, &[CondId::Null], &plan, 2).unwrap();
        let stub = TimeTable(
            targets
                .iter()
                .map(|t| (t.t_start, t.mean_velocity.row_slice(0).to_vec()))
                .collect(),
        );
        let loss = endpoint_loss_node(&stub, &targets, &[CondId::Null], 2, RolloutMode::TeacherForced)
            .unwrap();
        assert_relative_eq!(loss.value().item().unwrap(), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn teacher_forced_endpoint_zero_student_hand_value() {
        // Two uniform intervals of a constant field 4.0 from z = 0: states
        // 0, 2, 4. Zero student stays put, so the per-interval squared
        // displacement is 4 each, average 4.
        let plan = DistillPlan {
            supported_steps: vec![2],
            teacher_steps: 2,
            teacher_schedule: ScheduleKind::Uniform,
            ..DistillPlan::default()
        };
        let field = ConstField(vec![4.0]);
        let z = Tensor::scalar(0.0);
        let targets = teacher_targets(&field, &z, &[CondId::Null], &plan, 2).unwrap();
        let loss =
            endpoint_loss_node(&ZeroStudent, &targets, &[CondId::Null], 2, RolloutMode::TeacherForced)
                .unwrap();
        assert_relative_eq!(loss.value().item().unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn free_rollout_single_step_is_one_euler_step() {
        let plan = default_plan_with(10, ScheduleKind::Cosine);
        let field = ConstField(vec![3.0, -1.0]);
        let z = Tensor::new(1, 2, vec![0.5, 0.5]).unwrap();
        let targets = teacher_targets(&field, &z, &[CondId::Null], &plan, 1).unwrap();
        let stub_v = vec![1.0, 1.0];
        let stub = TimeTable(vec![(0.0, stub_v.clone())]);
        let loss =
            endpoint_loss_node(&stub, &targets, &[CondId::Null], 1, RolloutMode::FreeRollout)
                .unwrap();
        // || z + v - x_T(1) ||^2 with x_T(1) = z + (3, -1).
        let expected = (1.0f64 - 3.0).powi(2) + (1.0f64 + 1.0).powi(2);
        assert_relative_eq!(loss.value().item().unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn velocity_loss_hand_value_and_order_invariance() {
        let plan = default_plan_with(10, ScheduleKind::Cosine);
        let field = ConstField(vec![3.0, 4.0]);
        let z = Tensor::new(1, 2, vec![0.0, 0.0]).unwrap();
        let targets = teacher_targets(&field, &z, &[CondId::Null], &plan, 1).unwrap();
        let loss = velocity_loss_node(&ZeroStudent, &targets, &[CondId::Null], 1).unwrap();
        // Sum over features of (0 - (3,4))^2 = 25 with batch size 1.
        assert_relative_eq!(loss.value().item().unwrap(), 25.0, epsilon = 1e-12);

        let four = teacher_targets(&field, &z, &[CondId::Null], &plan, 4).unwrap();
        let forward = velocity_loss_node(&ZeroStudent, &four, &[CondId::Null], 4).unwrap();
        let mut reversed = four.clone();
        reversed.reverse();
        let backward_order = velocity_loss_node(&ZeroStudent, &reversed, &[CondId::Null], 4).unwrap();
        assert_relative_eq!(
            forward.value().item().unwrap(),
            backward_order.value().item().unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn dual_loss_degenerate_weights_are_exact() {
        let plan = default_plan_with(10, ScheduleKind::Cosine);
        let field = ConstField(vec![1.0, -2.0]);
        let z = Tensor::new(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let conds = [CondId::Null, CondId::Null, CondId::Null];
        let targets = teacher_targets(&field, &z, &conds, &plan, 2).unwrap();
        for mode in [RolloutMode::TeacherForced, RolloutMode::FreeRollout] {
            let e = endpoint_loss_node(&ZeroStudent, &targets, &conds, 2, mode).unwrap();
            let v = velocity_loss_node(&ZeroStudent, &targets, &conds, 2).unwrap();
            let d1 = dual_loss_node(&ZeroStudent, &targets, &conds, 2, 1.0, mode).unwrap();
            let d0 = dual_loss_node(&ZeroStudent, &targets, &conds, 2, 0.0, mode).unwrap();
            assert_eq!(d1.value().item().unwrap(), e.value().item().unwrap());
            assert_eq!(d0.value().item().unwrap(), v.value().item().unwrap());
        }
    }

    #[test]
    fn dual_loss_seven_three_mix() {
        // Interval [0,1], dt = 1, x_start = (0,0), x_end = (1,0), so the
        // mean velocity is (1,0) and x_mid = (0.5, 0). The stub answers
        // (2,1) at t = 0 (endpoint error 2) and (2,3) at t = 0.5 (velocity
        // error 10); dual(0.7) = 0.7*2 + 0.3*10 = 4.4.
        let target = IntervalTarget {
            index: 0,
            t_start: 0.0,
            t_end: 1.0,
            x_start: Tensor::new(1, 2, vec![0.0, 0.0]).unwrap(),
            x_end: Tensor::new(1, 2, vec![1.0, 0.0]).unwrap(),
            mean_velocity: Tensor::new(1, 2, vec![1.0, 0.0]).unwrap(),
            t_mid: 0.5,
            x_mid: Tensor::new(1, 2, vec![0.5, 0.0]).unwrap(),
        };
        let stub = TimeTable(vec![(0.0, vec![2.0, 1.0]), (0.5, vec![2.0, 3.0])]);
        let dual = dual_loss_node(
            &stub,
            core::slice::from_ref(&target),
            &[CondId::Null],
            1,
            0.7,
            RolloutMode::TeacherForced,
        )
        .unwrap();
        assert_relative_eq!(dual.value().item().unwrap(), 4.4, epsilon = 1e-12);
    }

    #[test]
    fn regularizer_zero_when_branches_agree() {
        // The zero student ignores conditioning entirely.
        let x = Tensor::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let reg = cfg_regularizer_node(
            &ZeroStudent,
            &x,
            &[0.5, 0.5],
            &[CondId::Id(0), CondId::Id(1)],
            None,
            0.01,
        )
        .unwrap();
        assert_eq!(reg.value().item().unwrap(), 0.0);
    }

    #[test]
    fn regularizer_blocks_conditional_gradients_exactly() {
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
        let student = VelocityModel::new(config, 21).unwrap();
        let mut rng = SeedRng::new(4);
        let x = rng.normal_tensor(4, 2);
        let conds = [CondId::Id(0), CondId::Id(1), CondId::Id(2), CondId::Id(0)];
        let reg = cfg_regularizer_node(&student, &x, &[0.25; 4], &conds, Some(2), 0.01).unwrap();
        student.store().zero_grads();
        backward(&reg).unwrap();
        let table_grad = student.store().get("cond_embed").unwrap().grad();
        // Conditional rows 0..3 only feed the stop-gradient branch.
        for r in 0..3 {
            for c in 0..table_grad.cols() {
                assert_eq!(table_grad.get(r, c), 0.0, "row {r} col {c}");
            }
        }
        // The null row drives the free branch and must receive signal.
        let null_mass: f64 = (0..table_grad.cols()).map(|c| table_grad.get(3, c).abs()).sum();
        assert!(null_mass > 0.0);
    }

    #[test]
    fn iteration_loss_with_zero_lambda_equals_dual() {
        let plan = DistillPlan { lambda: 0.0, ..default_plan_with(10, ScheduleKind::Cosine) };
        let field = ConstField(vec![1.0, 1.0]);
        let z = Tensor::new(2, 2, vec![0.0, 0.1, 0.2, 0.3]).unwrap();
        let conds = [CondId::Null, CondId::Null];
        let targets = teacher_targets(&field, &z, &conds, &plan, 2).unwrap();
        let full = build_iteration_loss(&ZeroStudent, &targets, &conds, &plan, 2).unwrap();
        let dual =
            dual_loss_node(&ZeroStudent, &targets, &conds, 2, plan.alpha, plan.rollout).unwrap();
        assert_eq!(full.value().item().unwrap(), dual.value().item().unwrap());
    }

    #[test]
    fn halving_ladder() {
        assert_eq!(halve_steps(10), 8);
        assert_eq!(halve_steps(8), 4);
        assert_eq!(halve_steps(4), 2);
        assert_eq!(halve_steps(2), 1);
        assert_eq!(halve_steps(6), 4);
    }

    #[test]
    fn student_schedule_snaps_to_teacher_knots() {
        let plan = DistillPlan::default();
        let teacher = plan.teacher_knots().unwrap();
        let s4 = student_schedule(&plan, 4).unwrap();
        assert_eq!(s4.knots.len(), 5);
        assert_eq!(s4.knots[0], 0.0);
        assert_eq!(*s4.knots.last().unwrap(), 1.0);
        for k in &s4.knots {
            assert!(teacher.knots.contains(k));
        }
        let s1 = student_schedule(&plan, 1).unwrap();
        assert_eq!(s1.knots, vec![0.0, 1.0]);
    }
}

//! Flow-matching primitives: the interpolation path, time schedules, the
//! guided Euler solver, and conditional teacher training with unconditional
//! dropout.
//!
//! Path convention, fixed repo-wide: the state at `t = 0` is noise `z`, the
//! state at `t = 1` is data `x1`, the path is `x_t = (1-t) z + t x1`, the
//! regression target is `u = x1 - z`, and the ODE integrates `t: 0 -> 1`.
//! A flipped variant would only need this module's `interp_state` and
//! target construction changed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::datasets::Dataset;
use crate::error::CoreError;
use crate::graph::Node;
use crate::math;
use crate::model::{CondId, ModelConfig, VelocityModel};
use crate::params::AdamConfig;
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::Result;

/// Unconditional dropout rate used for teacher training.
pub const DEFAULT_P_UNCOND: f64 = 0.02;
/// Guidance weight the teacher samples with.
pub const DEFAULT_TEACHER_GUIDANCE: f64 = 0.7;
/// Teacher inference step count.
pub const DEFAULT_TEACHER_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Uniform,
    Cosine,
    /// Knots inherited from another schedule (interval snapping).
    Snapped,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Uniform => "uniform",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Snapped => "snapped",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScheduleKind::Uniform),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(CoreError::InvalidConfig(format!("unknown schedule '{other}'"))),
        }
    }
}

/// Strictly increasing time knots `t_0 = 0 < ... < t_N = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub knots: Vec<f64>,
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn from_knots(kind: ScheduleKind, knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(CoreError::InvalidConfig(format!(
                "schedule knots must span exactly [0, 1], got {knots:?}"
            )));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::InvalidConfig("schedule knots must strictly increase".into()));
        }
        Ok(Schedule { kind, knots })
    }
}

/// `uniform`: `t_i = i/N`. `cosine`: `t_i = (1 - cos(pi i / N)) / 2`, the
/// half-cosine warp with exact endpoints.
pub fn make_schedule(kind: ScheduleKind, n: usize) -> Result<Schedule> {
    if n == 0 {
        return Err(CoreError::InvalidConfig("schedule needs N >= 1".into()));
    }
    let knots = (0..=n)
        .map(|i| match kind {
            ScheduleKind::Uniform => i as f64 / n as f64,
            ScheduleKind::Cosine => (1.0 - math::cos(PI * i as f64 / n as f64)) / 2.0,
            ScheduleKind::Snapped => i as f64 / n as f64,
        })
        .map(|t| t.clamp(0.0, 1.0))
        .collect::<Vec<_>>();
    let mut knots = knots;
    // cos(0) and cos(pi) are exact, but force the endpoints anyway.
    knots[0] = 0.0;
    knots[n] = 1.0;
    Schedule::from_knots(kind, knots)
}

/// Linear interpolation along the flow path: `(1-t) z + t x1`.
pub fn interp_state(z: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::TimeOutOfRange(t));
    }
    z.zip_with(x1, "interp_state", |zi, xi| (1.0 - t) * zi + t * xi)
}

/// Per-row interpolation with one time per sample.
pub fn interp_state_rows(z: &Tensor, x1: &Tensor, ts: &[f64]) -> Result<Tensor> {
    if ts.len() != z.rows() {
        return Err(CoreError::ShapeMismatch {
            op: "interp_state_rows",
            detail: format!("{} times for {} rows", ts.len(), z.rows()),
        });
    }
    let mut out = z.clone();
    for (r, &t) in ts.iter().enumerate() {
        if !(0.0..=1.0).contains(&t) {
            return Err(CoreError::TimeOutOfRange(t));
        }
        for c in 0..z.cols() {
            out.set(r, c, (1.0 - t) * z.get(r, c) + t * x1.get(r, c));
        }
    }
    Ok(out)
}

/// Anything that can produce a velocity for a batch of states at one time.
/// Implemented by [`VelocityModel`] and by test stubs.
pub trait VelocityField {
    fn velocity(
        &self,
        x: &Tensor,
        t: f64,
        conds: &[CondId],
        step: Option<u32>,
    ) -> Result<Tensor>;
}

impl VelocityField for VelocityModel {
    fn velocity(&self, x: &Tensor, t: f64, conds: &[CondId], step: Option<u32>) -> Result<Tensor> {
        self.forward_at(x, t, conds, step)
    }
}

/// Guidance-interpolated velocity: `(1-w) v(x,t,null) + w v(x,t,c)`.
///
/// `w = 0` short-circuits to a single unconditional forward; any `w > 0`
/// costs exactly one conditional and one unconditional evaluation. Weights
/// outside `[0, 1]` are legal but logged, since this interpolation form is
/// not comparable with `w >= 1` guidance-scale conventions.
pub fn cfg_velocity<F: VelocityField>(
    field: &F,
    x: &Tensor,
    t: f64,
    conds: &[CondId],
    weight: f64,
    step: Option<u32>,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&weight) {
        log::warn!("guidance weight {weight} outside [0, 1]; interpolation form is extrapolating");
    }
    let null_conds = vec![CondId::Null; conds.len()];
    if weight == 0.0 {
        return field.velocity(x, t, &null_conds, step);
    }
    let v_uncond = field.velocity(x, t, &null_conds, step)?;
    let v_cond = field.velocity(x, t, conds, step)?;
    v_uncond.zip_with(&v_cond, "cfg_velocity", |u, c| (1.0 - weight) * u + weight * c)
}

/// Forward Euler states along a schedule, guidance applied at every step.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub schedule: Schedule,
    pub states: Vec<Tensor>,
    pub conds: Vec<CondId>,
    pub guidance: f64,
}

impl Trajectory {
    pub fn endpoint(&self) -> &Tensor {
        self.states.last().expect("trajectory always holds N+1 states")
    }
}

/// Integrates `x' = v_cfg(x, t, c, w)` from `t = 0` to `t = 1`, recording all
/// `N + 1` states. Aborts with the step index if a state goes non-finite.
pub fn euler_solve<F: VelocityField>(
    field: &F,
    z: &Tensor,
    conds: &[CondId],
    schedule: &Schedule,
    weight: f64,
    step: Option<u32>,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(schedule.knots.len());
    let mut x = z.clone();
    states.push(x.clone());
    for i in 0..schedule.steps() {
        let t = schedule.knots[i];
        let dt = schedule.knots[i + 1] - schedule.knots[i];
        let v = cfg_velocity(field, &x, t, conds, weight, step)
            .map_err(|_| CoreError::NonFiniteState { step: i })?;
        x = x.axpy(dt, &v).map_err(|_| CoreError::NonFiniteState { step: i })?;
        states.push(x.clone());
    }
    Ok(Trajectory { schedule: schedule.clone(), states, conds: conds.to_vec(), guidance: weight })
}

/// Pre-sampled ingredients of one conditional flow-matching step, kept
/// explicit so losses stay deterministic functions of their inputs.
#[derive(Debug, Clone)]
pub struct FlowMatchBatch {
    pub x_t: Tensor,
    pub ts: Vec<f64>,
    pub conds: Vec<CondId>,
    /// Regression target `x1 - z`.
    pub target: Tensor,
}

/// Draws per-sample times uniformly on `[0, 1]` and applies unconditional
/// dropout with probability `p_uncond`.
pub fn sample_flow_batch(
    x1: &Tensor,
    z: &Tensor,
    conds: &[usize],
    p_uncond: f64,
    rng: &mut SeedRng,
) -> Result<FlowMatchBatch> {
    if x1.rows() == 0 {
        return Err(CoreError::EmptyBatch);
    }
    let ts: Vec<f64> = (0..x1.rows()).map(|_| rng.uniform()).collect();
    let conds: Vec<CondId> = conds
        .iter()
        .map(|&c| if rng.uniform() < p_uncond { CondId::Null } else { CondId::Id(c) })
        .collect();
    let x_t = interp_state_rows(z, x1, &ts)?;
    let target = x1.sub(z)?;
    Ok(FlowMatchBatch { x_t, ts, conds, target })
}

/// Conditional flow-matching regression loss
/// `mean_batch sum_features (v(x_t, t, c') - (x1 - z))^2` as a graph node.
pub fn fm_loss_node(model: &VelocityModel, batch: &FlowMatchBatch) -> Result<Node> {
    let batch_size = batch.x_t.rows();
    if batch_size == 0 {
        return Err(CoreError::EmptyBatch);
    }
    let pred = model.forward_node(
        &Node::constant(batch.x_t.clone()),
        &batch.ts,
        &batch.conds,
        None,
    )?;
    let diff = pred.sub(&Node::constant(batch.target.clone()))?;
    diff.square()?.sum()?.scale(1.0 / batch_size as f64)
}

/// Samples times and dropout, then builds the teacher loss node.
pub fn fm_teacher_loss(
    model: &VelocityModel,
    x1: &Tensor,
    z: &Tensor,
    conds: &[usize],
    p_uncond: f64,
    rng: &mut SeedRng,
) -> Result<Node> {
    let batch = sample_flow_batch(x1, z, conds, p_uncond, rng)?;
    fm_loss_node(model, &batch)
}

/// Knobs for [`train_teacher`].
#[derive(Debug, Clone)]
pub struct TeacherTrainOptions {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub p_uncond: f64,
    /// Redraw the paired noise every batch instead of keeping the dataset's
    /// fixed pairing.
    pub repair_noise: bool,
}

impl Default for TeacherTrainOptions {
    fn default() -> Self {
        TeacherTrainOptions {
            iterations: 3000,
            batch_size: 32,
            adam: AdamConfig::default(),
            p_uncond: DEFAULT_P_UNCOND,
            repair_noise: false,
        }
    }
}

/// Trains a conditional velocity field by flow-matching regression.
/// Deterministic under `(config, options, seed)`.
pub fn train_teacher(
    config: &ModelConfig,
    dataset: &Dataset,
    options: &TeacherTrainOptions,
    seed: u64,
) -> Result<(VelocityModel, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let mut model = VelocityModel::new(config.clone(), seed)?;
    let mut batches = crate::datasets::BatchIter::new(
        dataset,
        options.batch_size,
        SeedRng::derive_seed(seed, "teacher-batches"),
    )?;
    let mut rng = SeedRng::new(SeedRng::derive_seed(seed, "teacher-train"));
    let mut curve = Vec::with_capacity(options.iterations);
    for iteration in 0..options.iterations {
        let idx = batches.next_batch();
        let (x1, mut z, conds) = dataset.gather(&idx)?;
        if options.repair_noise {
            z = rng.normal_tensor(x1.rows(), x1.cols());
        }
        let loss = fm_teacher_loss(&model, &x1, &z, &conds, options.p_uncond, &mut rng)
            .map_err(|e| train_failure(e, iteration))?;
        let loss_value = loss.value().item()?;
        if !loss_value.is_finite() {
            return Err(CoreError::Diverged { iteration });
        }
        curve.push(loss_value);
        model.store().zero_grads();
        crate::graph::backward(&loss).map_err(|e| train_failure(e, iteration))?;
        model.store_mut().adam_step(&options.adam).map_err(|e| train_failure(e, iteration))?;
    }
    Ok((model, curve))
}

fn train_failure(e: CoreError, iteration: usize) -> CoreError {
    match e {
        CoreError::NonFinite { .. } | CoreError::NonFiniteState { .. } => {
            CoreError::Diverged { iteration }
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Constant field: `v(x, t) = u` regardless of state or condition.
    pub struct ConstantField(pub Tensor);

    impl VelocityField for ConstantField {
        fn velocity(&self, x: &Tensor, _: f64, _: &[CondId], _: Option<u32>) -> Result<Tensor> {
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    out.set(r, c, self.0.get(0, c));
                }
            }
            Ok(out)
        }
    }

    /// Linear field `v(x, t) = x`.
    struct LinearField;

    impl VelocityField for LinearField {
        fn velocity(&self, x: &Tensor, _: f64, _: &[CondId], _: Option<u32>) -> Result<Tensor> {
            Ok(x.clone())
        }
    }

    #[test]
    fn interp_endpoints_exact() {
        let z = Tensor::row(vec![0.5, -1.0]);
        let x1 = Tensor::row(vec![2.0, 4.0]);
        assert_eq!(interp_state(&z, &x1, 0.0).unwrap(), z);
        assert_eq!(interp_state(&z, &x1, 1.0).unwrap(), x1);
        let mid = interp_state(&Tensor::row(vec![0.0, 0.0]), &x1, 0.5).unwrap();
        assert_eq!(mid.data(), &[1.0, 2.0]);
    }

    #[test]
    fn cosine_schedule_knots() {
        let s = make_schedule(ScheduleKind::Cosine, 2).unwrap();
        assert_eq!(s.knots.len(), 3);
        assert_eq!(s.knots[0], 0.0);
        assert_relative_eq!(s.knots[1], 0.5, epsilon = 1e-15);
        assert_eq!(s.knots[2], 1.0);
        let s4 = make_schedule(ScheduleKind::Cosine, 4).unwrap();
        assert_relative_eq!(s4.knots[1], (1.0 - math::cos(PI / 4.0)) / 2.0, epsilon = 1e-15);
        assert_relative_eq!(s4.knots[1], 0.14644660940672624, epsilon = 1e-12);
        assert_relative_eq!(s4.knots[2], 0.5, epsilon = 1e-15);
        assert_relative_eq!(s4.knots[3], 0.8535533905932737, epsilon = 1e-12);
        assert_eq!(s4.knots[4], 1.0);
    }

    #[test]
    fn uniform_schedule_ten_steps() {
        let s = make_schedule(ScheduleKind::Uniform, 10).unwrap();
        assert_eq!(s.knots.len(), 11);
        for (i, k) in s.knots.iter().enumerate() {
            assert_relative_eq!(*k, i as f64 / 10.0, epsilon = 1e-15);
        }
        assert!(make_schedule(ScheduleKind::Uniform, 0).is_err());
    }

    #[test]
    fn cfg_endpoints_are_exact() {
        let cfg = crate::model::ModelConfig {
            layers: 2,
            hidden: 8,
            d_data: 2,
            conditions: 3,
            mode: crate::model::CondMode::AdaLn,
            tokens_per_step: 1,
            supported_steps: vec![1],
            time_embed_dim: 8,
        };
        let model = VelocityModel::new(cfg, 9).unwrap();
        let mut rng = SeedRng::new(4);
        let x = rng.normal_tensor(3, 2);
        let conds = [CondId::Id(0), CondId::Id(1), CondId::Id(2)];
        let nulls = [CondId::Null; 3];

        let v1 = cfg_velocity(&model, &x, 0.4, &conds, 1.0, None).unwrap();
        assert_eq!(v1, model.forward_at(&x, 0.4, &conds, None).unwrap());

        let v0 = cfg_velocity(&model, &x, 0.4, &conds, 0.0, None).unwrap();
        assert_eq!(v0, model.forward_at(&x, 0.4, &nulls, None).unwrap());
    }

    #[test]
    fn cfg_affine_arithmetic() {
        struct TwoBranch;
        impl VelocityField for TwoBranch {
            fn velocity(
                &self,
                x: &Tensor,
                _: f64,
                conds: &[CondId],
                _: Option<u32>,
            ) -> Result<Tensor> {
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    if matches!(conds[r], CondId::Id(_)) {
                        out.set(r, 0, 10.0);
                        out.set(r, 1, -10.0);
                    }
                }
                Ok(out)
            }
        }
        let x = Tensor::zeros(1, 2);
        let v = cfg_velocity(&TwoBranch, &x, 0.0, &[CondId::Id(0)], 0.7, None).unwrap();
        assert_relative_eq!(v.get(0, 0), 7.0, epsilon = 1e-12);
        assert_relative_eq!(v.get(0, 1), -7.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_field_endpoint_is_schedule_invariant() {
        let u = Tensor::row(vec![1.5, -2.0]);
        let field = ConstantField(u.clone());
        let z = Tensor::new(2, 2, vec![0.0, 1.0, -1.0, 0.5]).unwrap();
        let conds = [CondId::Null, CondId::Null];
        for schedule in [
            make_schedule(ScheduleKind::Uniform, 1).unwrap(),
            make_schedule(ScheduleKind::Uniform, 7).unwrap(),
            make_schedule(ScheduleKind::Cosine, 10).unwrap(),
        ] {
            let traj = euler_solve(&field, &z, &conds, &schedule, 1.0, None).unwrap();
            let expected = z.axpy(1.0, &ConstantField(u.clone()).velocity(&z, 0.0, &conds, None).unwrap()).unwrap();
            let endpoint = traj.endpoint();
            for (a, b) in endpoint.data().iter().zip(expected.data().iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
            assert_eq!(traj.states.len(), schedule.steps() + 1);
        }
    }

    #[test]
    fn linear_field_single_step_doubles() {
        let z = Tensor::row(vec![0.7, -0.3]);
        let schedule = make_schedule(ScheduleKind::Uniform, 1).unwrap();
        let traj = euler_solve(&LinearField, &z, &[CondId::Null], &schedule, 1.0, None).unwrap();
        assert_eq!(traj.endpoint().data(), &[1.4, -0.6]);
    }

    #[test]
    fn linear_field_hundred_steps_compounds() {
        let z = Tensor::row(vec![1.0, -2.0]);
        let schedule = make_schedule(ScheduleKind::Uniform, 100).unwrap();
        let traj = euler_solve(&LinearField, &z, &[CondId::Null], &schedule, 1.0, None).unwrap();
        let factor = math::powf(1.01, 100.0);
        for (a, b) in traj.endpoint().data().iter().zip(z.data().iter()) {
            assert_relative_eq!(*a, factor * b, max_relative = 1e-9);
        }
    }

    #[test]
    fn teacher_loss_zero_for_oracle_and_analytic_for_zero_model() {
        // Stub fields cannot flow through fm_loss_node (it needs a model),
        // so check the identities directly on the assembled batch.
        let mut rng = SeedRng::new(5);
        let x1 = rng.normal_tensor(6, 2);
        let z = rng.normal_tensor(6, 2);
        let conds = vec![0usize, 1, 0, 1, 0, 1];
        let batch = sample_flow_batch(&x1, &z, &conds, 0.0, &mut rng).unwrap();

        // Oracle prediction == target -> zero loss.
        let zero = batch.target.sub(&batch.target).unwrap();
        assert_eq!(zero.norm_sq(), 0.0);

        // Zero prediction -> loss equals mean_batch sum_feat target^2.
        let expected = batch.target.norm_sq() / 6.0;
        let pred = Tensor::zeros(6, 2);
        let loss = pred.sub(&batch.target).unwrap().norm_sq() / 6.0;
        assert_relative_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn full_dropout_touches_only_null_embedding_row() {
        let cfg = crate::model::ModelConfig {
            layers: 1,
            hidden: 8,
            d_data: 2,
            conditions: 3,
            mode: crate::model::CondMode::Plain,
            tokens_per_step: 1,
            supported_steps: vec![1],
            time_embed_dim: 8,
        };
        let model = VelocityModel::new(cfg, 3).unwrap();
        let mut rng = SeedRng::new(8);
        let x1 = rng.normal_tensor(5, 2);
        let z = rng.normal_tensor(5, 2);
        let conds = vec![0usize, 1, 2, 0, 1];
        let loss = fm_teacher_loss(&model, &x1, &z, &conds, 1.0, &mut rng).unwrap();
        model.store().zero_grads();
        crate::graph::backward(&loss).unwrap();
        let table_grad = model.store().get("cond_embed").unwrap().grad();
        // Rows 0..3 are dataset conditions, row 3 is the null slot.
        for r in 0..3 {
            for c in 0..table_grad.cols() {
                assert_eq!(table_grad.get(r, c), 0.0);
            }
        }
        let null_row: f64 = (0..table_grad.cols()).map(|c| table_grad.get(3, c).abs()).sum();
        assert!(null_row > 0.0);
    }
}

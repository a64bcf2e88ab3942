//! Wall-clock sampling benchmark. Timing output is inherently
//! non-deterministic and therefore never part of reproducible run reports;
//! the function-evaluation count is exact.

use std::time::Instant;

use anyhow::Result;

use flowlab_core::distill::{student_schedule, DistillPlan};
use flowlab_core::flow::{euler_solve, make_schedule, Schedule, ScheduleKind};
use flowlab_core::metrics::nfe;
use flowlab_core::model::{CondId, CondMode, VelocityModel};
use flowlab_core::rng::SeedRng;

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub steps: u32,
    pub guidance: f64,
    /// Median wall time per generated sample, in seconds.
    pub seconds_per_sample: f64,
    pub nfe: u32,
    pub batch: usize,
    pub repeats: usize,
}

/// Medians the per-sample wall time of `repeats` guided rollouts after one
/// warm-up pass. NFE counts velocity-field forwards per sample:
/// `n * (2 if w > 0 else 1)`.
pub fn latency_bench(
    model: &VelocityModel,
    steps: u32,
    guidance: f64,
    batch: usize,
    repeats: usize,
    plan: &DistillPlan,
) -> Result<BenchResult> {
    let schedule: Schedule = if model.config().mode == CondMode::StepToken {
        student_schedule(plan, steps)?
    } else {
        make_schedule(ScheduleKind::Cosine, steps as usize)?
    };
    let step_arg = (model.config().mode == CondMode::StepToken).then_some(steps);
    let mut rng = SeedRng::new(17);
    let z = rng.normal_tensor(batch, model.config().d_data);
    let conds: Vec<CondId> =
        (0..batch).map(|i| CondId::Id(i % model.config().conditions)).collect();

    // Warm-up, excluded from measurement.
    euler_solve(model, &z, &conds, &schedule, guidance, step_arg)?;

    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        euler_solve(model, &z, &conds, &schedule, guidance, step_arg)?;
        times.push(start.elapsed().as_secs_f64() / batch as f64);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let seconds_per_sample = times[times.len() / 2];
    Ok(BenchResult {
        steps,
        guidance,
        seconds_per_sample,
        nfe: nfe(steps, guidance),
        batch,
        repeats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowlab_core::model::ModelConfig;

    #[test]
    fn nfe_accounting() {
        assert_eq!(nfe(1, 0.05), 2);
        assert_eq!(nfe(10, 0.0), 10);
    }

    #[test]
    fn one_step_student_beats_ten_step_teacher() {
        let config = ModelConfig {
            layers: 2,
            hidden: 16,
            d_data: 2,
            conditions: 2,
            mode: CondMode::AdaLn,
            tokens_per_step: 1,
            supported_steps: vec![1],
            time_embed_dim: 16,
        };
        let model = VelocityModel::new(config, 3).unwrap();
        let plan = DistillPlan::default();
        let one = latency_bench(&model, 1, 0.05, 16, 5, &plan).unwrap();
        let ten = latency_bench(&model, 10, 0.7, 16, 5, &plan).unwrap();
        assert!(one.seconds_per_sample < ten.seconds_per_sample);
        assert_eq!(one.nfe, 2);
        assert_eq!(ten.nfe, 20);
    }
}

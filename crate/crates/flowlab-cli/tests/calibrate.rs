//! Calibration harness: ignored by default, run explicitly while tuning
//! experiment scales. Prints timings and metric values; makes no
//! assertions. The acceptance suite freezes what this measures.

use std::time::Instant;

use flowlab_cli::config::RunConfig;
use flowlab_cli::experiments::{
    build_dataset, dsflow_student, endpoint_baseline_student, held_out_dataset,
    progressive_student, sample_field, seed_study, train_teacher_run, SWEEP_WEIGHTS,
};
use flowlab_core::model::VelocityModel;

fn base_config() -> RunConfig {
    RunConfig::parse(
        "dataset.kind = gauss-mixture\n\
         dataset.conditions = 4\n\
         dataset.size = 5000\n\
         dataset.seed = 900\n\
         train.iterations = 3000\n\
         distill.iterations = 1500\n\
         eval.samples = 2000\n\
         eval.projections = 256\n",
    )
    .unwrap()
}

#[test]
#[ignore = "calibration only"]
fn timing_probe() {
    let cfg = base_config();
    let t0 = Instant::now();
    let dataset = build_dataset(&cfg).unwrap();
    let reference = held_out_dataset(&cfg).unwrap().data_matrix().unwrap();
    println!("dataset: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let (teacher, curve) = train_teacher_run(&cfg, 0).unwrap();
    println!(
        "teacher train ({} iters): {:?}, final loss {:.4}",
        cfg.train_iterations,
        t0.elapsed(),
        curve.last().unwrap()
    );

    let t0 = Instant::now();
    let untrained = VelocityModel::new(cfg.teacher_config(), 123_456).unwrap();
    let plan = cfg.plan();
    let teacher_samples = sample_field(&teacher, &plan, 10, 0.7, 2000, 4, 77).unwrap();
    let untrained_samples = sample_field(&untrained, &plan, 10, 0.7, 2000, 4, 77).unwrap();
    let d_teacher = flowlab_cli::experiments::distance_to_reference(
        &teacher_samples,
        &reference,
        256,
        77,
    )
    .unwrap();
    let d_untrained = flowlab_cli::experiments::distance_to_reference(
        &untrained_samples,
        &reference,
        256,
        77,
    )
    .unwrap();
    println!(
        "teacher SW {d_teacher:.4} vs untrained {d_untrained:.4} (ratio {:.3}), eval took {:?}",
        d_teacher / d_untrained,
        t0.elapsed()
    );

    let t0 = Instant::now();
    let (student, scurve) = dsflow_student(&cfg, &teacher, &dataset, 1).unwrap();
    println!(
        "dsflow distill ({} iters): {:?}, final loss {:.4}",
        cfg.distill_iterations,
        t0.elapsed(),
        scurve.last().unwrap()
    );
    for n in [1u32, 2, 4] {
        let s = sample_field(&student, &plan, n, 0.05, 2000, 4, 78).unwrap();
        let d = flowlab_cli::experiments::distance_to_reference(&s, &reference, 256, 78).unwrap();
        println!("dsflow {n}-step SW {d:.4} ({:.2}x teacher)", d / d_teacher);
    }
    for w in SWEEP_WEIGHTS {
        let s = sample_field(&student, &plan, 1, w, 2000, 4, 79).unwrap();
        let d = flowlab_cli::experiments::distance_to_reference(&s, &reference, 256, 79).unwrap();
        println!("sweep w={w:.2}: {d:.4}");
    }

    let t0 = Instant::now();
    let (endpoint, _) = endpoint_baseline_student(&cfg, &teacher, &dataset, 1).unwrap();
    println!("endpoint baseline: {:?}", t0.elapsed());
    let s = sample_field(&endpoint, &plan, 1, 1.0, 2000, 4, 78).unwrap();
    let d = flowlab_cli::experiments::distance_to_reference(&s, &reference, 256, 78).unwrap();
    println!("endpoint 1-step SW {d:.4} ({:.2}x teacher)", d / d_teacher);

    let t0 = Instant::now();
    let progressive = progressive_student(&cfg, &teacher, &dataset, 1).unwrap();
    println!("progressive ({:?} stages): {:?}", progressive.stages, t0.elapsed());
    let s = sample_field(&progressive.student, &plan, 1, 1.0, 2000, 4, 78).unwrap();
    let d = flowlab_cli::experiments::distance_to_reference(&s, &reference, 256, 78).unwrap();
    println!("progressive 1-step SW {d:.4} ({:.2}x teacher)", d / d_teacher);
}

#[test]
#[ignore = "calibration only"]
fn study_probe() {
    let cfg = base_config();
    let dataset = build_dataset(&cfg).unwrap();
    let reference = held_out_dataset(&cfg).unwrap().data_matrix().unwrap();
    let (teacher, _) = train_teacher_run(&cfg, 0).unwrap();
    let seeds: Vec<u64> = (1..=10).collect();
    let t0 = Instant::now();
    let rows = seed_study(&cfg, &teacher, &dataset, &reference, &seeds).unwrap();
    println!("seed study ({} seeds): {:?}", seeds.len(), t0.elapsed());
    for row in &rows {
        println!(
            "seed {}: ds1 {:.3} ds2 {:.3} ds4 {:.3} | dualoff {:.3} endpoint {:.3} prog {:.3} | ks {:.3}/{:.3} | sweep {:?}",
            row.seed,
            row.dsflow[&1],
            row.dsflow[&2],
            row.dsflow[&4],
            row.dual_off,
            row.endpoint_baseline,
            row.progressive,
            row.ks_dsflow,
            row.ks_endpoint,
            row.sweep.iter().map(|(w, d)| format!("{w:.2}:{d:.3}")).collect::<Vec<_>>()
        );
    }
}

//! Whole-structure step timings: the buffered batched driver against the
//! one-branch-at-a-time driver, across child counts.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use bdlo_bench::{harness, held_root, rest_state, step_config};
use bdlo_sim::dynamics::{deft_step, BatchedStepper};

fn bench_step(c: &mut Criterion) {
    // The 20-vertex, two-limb structure is the reference scenario.
    {
        let (topo, rest, params) = harness(2);
        let (grasp, targets) = held_root(&rest);
        let cfg = step_config();
        let mut stepper = BatchedStepper::new(&topo);
        let mut state = rest_state(&topo, &rest);
        c.bench_function("step/batched/20-vertex-2-limb", |b| {
            b.iter(|| {
                stepper
                    .step(
                        black_box(&mut state),
                        &grasp,
                        &targets,
                        &topo,
                        &params,
                        &cfg,
                        None,
                    )
                    .unwrap()
            })
        });
    }

    let mut group = c.benchmark_group("step/drivers");
    for children in [1usize, 2, 4, 8] {
        let (topo, rest, params) = harness(children);
        let (grasp, targets) = held_root(&rest);
        let cfg = step_config();

        let mut state = rest_state(&topo, &rest);
        group.bench_with_input(
            BenchmarkId::new("sequential", children),
            &children,
            |b, _| {
                b.iter(|| {
                    deft_step(
                        black_box(&mut state),
                        &grasp,
                        &targets,
                        &topo,
                        &params,
                        &cfg,
                        None,
                    )
                    .unwrap()
                })
            },
        );

        let mut stepper = BatchedStepper::new(&topo);
        let mut state = rest_state(&topo, &rest);
        group.bench_with_input(
            BenchmarkId::new("batched", children),
            &children,
            |b, _| {
                b.iter(|| {
                    stepper
                        .step(
                            black_box(&mut state),
                            &grasp,
                            &targets,
                            &topo,
                            &params,
                            &cfg,
                            None,
                        )
                        .unwrap()
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_step);
criterion_main!(benches);

//! Parallel vs sequential pipeline throughput.
//!
//! With the default `parallel` feature this measures each workload on the full
//! rayon pool and on a one-thread pool. `cargo bench --no-default-features`
//! measures the sequential fallback under the id `sequential`.

use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use objslam::eval::{run_scenario, ScenarioConfig};
use objslam::world_sim::simulate_trajectory;

fn scenario(name: &str) -> ScenarioConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name]
        .iter()
        .collect();
    let mut cfg = ScenarioConfig::load(&path).unwrap();
    cfg.output_dir = None;
    cfg
}

type Runner = Box<dyn Fn(&mut (dyn FnMut() + Send))>;

fn modes() -> Vec<(&'static str, Runner)> {
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        vec![
            ("parallel", Box::new(|f: &mut (dyn FnMut() + Send)| f())),
            (
                "single_thread",
                Box::new(move |f: &mut (dyn FnMut() + Send)| single.install(f)),
            ),
        ]
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![("sequential", Box::new(|f: &mut (dyn FnMut() + Send)| f()))]
    }
}

fn pipeline(c: &mut Criterion) {
    let zero = scenario("zero_noise.json");
    let looped = scenario("loop.json");
    let db = looped.database();
    let world = looped.world.build(&db).unwrap();
    let poses = looped.trajectory.poses();

    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    for (mode, run) in modes() {
        group.bench_function(BenchmarkId::new("simulate_loop", mode), |b| {
            b.iter(|| {
                run(&mut || {
                    std::hint::black_box(simulate_trajectory(&world, &poses, &looped.camera, &looped.noise).unwrap());
                })
            })
        });
        group.bench_function(BenchmarkId::new("run_zero_noise", mode), |b| {
            b.iter(|| {
                run(&mut || {
                    std::hint::black_box(run_scenario(&zero).unwrap());
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);

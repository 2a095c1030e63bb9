//! One planner iteration on the planar testbed (K = 200, T = 30) with the
//! rollouts evaluated on the rayon pool versus a single thread.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mcmppi_core::geometry::{Se2, Transform};
use mcmppi_core::kinematics::ChainModel;
use mcmppi_core::manifold_codec::{AnalyticChart, Decoder, VaeParams};
use mcmppi_core::mppi_planner::{
    plan_step, ControlSequence, Obstacle, ObstacleMotion, Parallelism, PlannerConfig, PlanningScene,
};

fn scene() -> PlanningScene {
    let mut scene = PlanningScene::new(Transform::Se2(Se2::from_xy_theta(-0.12, 0.44, 0.0)));
    scene.obstacles.push(Obstacle {
        center: [-0.1, 0.6, 0.0],
        radius: 0.03,
        motion: ObstacleMotion::Static,
    });
    scene
}

fn bench_plan_step(c: &mut Criterion) {
    let model = ChainModel::planar();
    let chart = AnalyticChart::new(&model).unwrap();
    let vae = VaeParams::init(&model, &[64, 64], 7).unwrap();
    let decoders: [(&str, &dyn Decoder, [f64; 3]); 2] =
        [("analytic", &chart, [0.12, 0.56, 0.0]), ("vae", &vae, [0.1, -0.2, 0.3])];
    let scene = scene();
    let mut group = c.benchmark_group("plan_step");
    group.sample_size(30);
    for (name, decoder, z_c) in decoders {
        for (label, parallelism) in [("parallel", Parallelism::Parallel), ("sequential", Parallelism::Sequential)] {
            let cfg = PlannerConfig {
                sigma: vec![0.01, 0.01, 0.04],
                parallelism,
                ..Default::default()
            };
            let u_nom = ControlSequence::zeros(cfg.horizon, 3);
            let mut iteration = 0;
            group.bench_function(BenchmarkId::new(name, label), |b| {
                b.iter(|| {
                    iteration += 1;
                    black_box(plan_step(&cfg, &model, decoder, &z_c, &u_nom, &scene, 3, iteration))
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_plan_step);
criterion_main!(benches);

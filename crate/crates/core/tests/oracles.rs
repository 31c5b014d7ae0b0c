//! Monte-Carlo and brute-force checks against independent computations.

use pso_core::data::{DatasetSpec, Generator, SyntheticDataset};
use pso_core::diffusion::{ddim_sample, train_teacher, TrainConfig};
use pso_core::distill::{forward_trajectory, mdp_final_step, mdp_step, sample_trajectory, TimeGrid};
use pso_core::metrics::{energy_distance_points, mode_occupancy, reward_stats_points, SampleProvenance, SampleSet};
use pso_core::nn::{Activation, Architecture};
use pso_core::pso::RewardModel;
use pso_core::{dist, Denoiser, NoiseSchedule, Point, ScheduleSpec, SeededRng};

fn sched() -> NoiseSchedule {
    NoiseSchedule::from_spec(&ScheduleSpec::default()).unwrap()
}

fn tiny_arch(k: usize) -> Architecture {
    Architecture {
        timesteps: 1000,
        n_conditions: k,
        time_frequencies: 4,
        cond_dim: 2,
        hidden: vec![32, 32],
        activation: Activation::Silu,
    }
}

fn gaussian(n: usize, mean: Point, rng: &mut SeededRng) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let z = rng.normal_point();
            [mean[0] + z[0], mean[1] + z[1]]
        })
        .collect()
}

fn var(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

#[test]
fn mdp_step_variance_with_zero_prediction() {
    let s = sched();
    let g = TimeGrid::new(4, &s).unwrap();
    let zero = Denoiser::zeros(tiny_arch(1)).unwrap();
    // eps = 0 gives f(x) = x / sqrt(ab), so start at x = 0 to get f = 0
    for n in 2..=4 {
        let mut rng = SeededRng::new(40 + n as u64);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for _ in 0..100_000 {
            let st = mdp_step(&zero, [0.0, 0.0], n, 0, &mut rng, &g, &s).unwrap();
            xs.push(st.next[0]);
            ys.push(st.next[1]);
        }
        let want = 1.0 - s.alpha_bar(g.t(n - 1));
        for v in [var(&xs), var(&ys)] {
            assert!((v / want - 1.0).abs() < 0.02, "n = {n}: {v} vs {want}");
        }
    }
}

#[test]
fn forward_trajectory_mean() {
    let s = sched();
    let g = TimeGrid::new(4, &s).unwrap();
    let x0 = [1.5, -0.5];
    let mut rng = SeededRng::new(3);
    let mut sums = vec![[0.0; 2]; 5];
    let draws = 100_000;
    for _ in 0..draws {
        let tr = forward_trajectory(x0, 0, &mut rng, &g, &s).unwrap();
        for n in 1..=4 {
            sums[n][0] += tr.states[n][0];
            sums[n][1] += tr.states[n][1];
        }
    }
    for n in 1..=4 {
        let a = s.sqrt_alpha_bar(g.t(n));
        for d in 0..2 {
            let m = sums[n][d] / draws as f64;
            assert!((m - a * x0[d]).abs() < 0.01, "n = {n}, dim {d}: {m}");
        }
    }
}

/// Independent all-pairs computation with a single running sum per term.
fn energy_distance_oracle(a: &[Point], b: &[Point]) -> f64 {
    let mean = |u: &[Point], v: &[Point]| {
        let mut acc = 0.0;
        for p in u {
            for q in v {
                acc += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            }
        }
        acc / (u.len() * v.len()) as f64
    };
    2.0 * mean(a, b) - mean(a, a) - mean(b, b)
}

#[test]
fn energy_distance_matches_brute_force() {
    let mut rng = SeededRng::new(11);
    let a = gaussian(10_000, [0.0, 0.0], &mut rng);
    let b = gaussian(10_000, [1.0, 0.0], &mut rng);
    let same = gaussian(10_000, [0.0, 0.0], &mut rng);
    let shifted = energy_distance_points(&a, &b).unwrap();
    assert!((shifted - energy_distance_oracle(&a, &b)).abs() < 1e-10);
    let null = energy_distance_points(&a, &same).unwrap();
    assert!((null - energy_distance_oracle(&a, &same)).abs() < 1e-10);
    assert!(shifted >= 10.0 * null, "{shifted} vs {null}");
}

#[test]
fn reward_mean_of_unit_gaussian() {
    let m = [2.0, -1.0];
    let rm = RewardModel::ModeDistance { targets: vec![m] };
    let pts = gaussian(10_000, m, &mut SeededRng::new(12));
    let (mean, _) = reward_stats_points(&pts, 0, &rm).unwrap();
    assert!((mean + 2.0).abs() < 0.05, "{mean}");
}

#[test]
fn balanced_two_mode_occupancy() {
    let spec = DatasetSpec {
        conditions: vec![Generator::GaussianMixture {
            means: vec![[-3.0, 0.0], [3.0, 0.0]],
            stds: vec![0.5, 0.5],
            weights: vec![1.0, 1.0],
        }],
    };
    let ds = SyntheticDataset::new(spec).unwrap();
    let mut rng = SeededRng::new(13);
    let pts: Vec<Point> = (0..10_000).map(|_| ds.sample(0, &mut rng)).collect();
    let set = SampleSet::new(
        0,
        pts,
        SampleProvenance {
            source: "data".into(),
            steps: 0,
            seed: 13,
        },
    )
    .unwrap();
    let h = mode_occupancy(&set, &ds).unwrap();
    assert!((h[0] - 0.5).abs() < 0.02 && (h[1] - 0.5).abs() < 0.02, "{h:?}");
    assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

/// A net trained to near-zero loss on the single point `target`.
fn single_point_net(target: Point) -> Denoiser {
    let spec = DatasetSpec {
        conditions: vec![Generator::GaussianMixture {
            means: vec![target],
            stds: vec![0.0],
            weights: vec![1.0],
        }],
    };
    let ds = SyntheticDataset::new(spec).unwrap();
    let cfg = TrainConfig {
        steps: 8000,
        batch_size: 128,
        lr: 1e-2,
        final_lr_fraction: 0.01,
    };
    train_teacher(&ds, tiny_arch(1), &cfg, &sched(), 5).unwrap().net
}

#[test]
fn perfect_single_point_net_samples_its_point() {
    let target = [1.0, -2.0];
    let s = sched();
    let net = single_point_net(target);
    let mut rng = SeededRng::new(14);
    for _ in 0..8 {
        let x = ddim_sample(&net, 0, 50, &mut rng, &s).unwrap().sample();
        assert!(dist(x, target) < 1e-2, "ddim sample {x:?}");
    }
    // the last conversion multiplies eps errors by sqrt((1 - ab) / ab) at
    // t_1, so keep t_1 small enough that a trained net counts as perfect
    let g = TimeGrid::from_times(vec![0, 50, 500, 999], &s).unwrap();
    for _ in 0..8 {
        let tr = sample_trajectory(&net, 0, &mut rng, &g, &s).unwrap();
        let x = mdp_final_step(&net, tr.states[1], 0, &g, &s).unwrap();
        assert!(dist(x, target) < 1e-2, "final step {x:?}");
    }
}

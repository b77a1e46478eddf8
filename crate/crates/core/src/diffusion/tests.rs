use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kinematics::presets::{one_dof, planar_3link};
use crate::kinematics::{sample_feasible_config, KinematicChain, FEASIBILITY_TOL};

fn cosine100() -> NoiseSchedule {
    make_schedule(100, ScheduleKind::SquaredCosine).unwrap()
}

/// A smooth chunk: a random configuration and small increments.
fn random_chunk(chain: &KinematicChain, steps: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, ActionChunk) {
    let n = chain.n_dof();
    let mut q = sample_feasible_config(chain, rng).0;
    let mut qs = Vec::with_capacity(steps * n);
    let mut states = Vec::with_capacity(steps);
    for i in 0..steps {
        for v in q.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        chain.clamp(&mut q);
        qs.extend_from_slice(&q);
        let mut s = chain.forward_kinematics(&crate::kinematics::JointVector(q.clone())).unwrap();
        s.gripper = i % 2 == 0;
        states.push(s);
    }
    (qs, ActionChunk::from_node_states(&states).unwrap())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn assert_feasible(chain: &KinematicChain, state: &Lifted) {
    let solver = IkSolver::with_defaults(chain);
    let errs = chunk_ik_errors(&solver, &state.chunk, &state.var).unwrap();
    for e in errs {
        assert!(e <= FEASIBILITY_TOL, "ik error {e}");
    }
}

// --- schedule ---------------------------------------------------------------

#[test]
fn zero_steps_is_an_error() {
    assert!(make_schedule(0, ScheduleKind::SquaredCosine).is_err());
}

#[test]
fn vanishing_linear_betas_keep_alpha_bar_at_one() {
    let s = make_schedule(
        100,
        ScheduleKind::Linear {
            beta_start: 1e-12,
            beta_end: 1e-12,
        },
    )
    .unwrap();
    assert!((s.alpha_bar(100) - 1.0).abs() <= 1e-9);
}

#[test]
fn squared_cosine_alpha_bar_matches_closed_form() {
    // Independent evaluation of cos^2((t + s) / (1 + s) * pi / 2) / f(0) with
    // s = 0.008; the last beta is capped at 0.999.
    let frozen = [
        (1, 0.9993687184016583),
        (10, 0.972092737113969),
        (25, 0.8470121613269047),
        (50, 0.49384359044063775),
        (75, 0.1442721023857358),
        (99, 0.00024285722793500594),
        (100, 2.4285722793500615e-07),
    ];
    let s = cosine100();
    for (k, v) in frozen {
        assert!((s.alpha_bar(k) - v).abs() <= 1e-12, "k={k}: {} vs {v}", s.alpha_bar(k));
    }
}

#[test]
fn schedule_identities_hold_for_both_kinds() {
    for s in [
        cosine100(),
        make_schedule(100, ScheduleKind::linear_default()).unwrap(),
        make_schedule(7, ScheduleKind::SquaredCosine).unwrap(),
    ] {
        assert_eq!(s.beta_tilde(1), 0.0);
        assert_eq!(s.alpha_bar(0), 1.0);
        for k in 1..=s.steps() {
            let b = s.beta(k);
            assert!(b > 0.0 && b < 1.0);
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            let lhs = s.c0(k) * (1.0 - s.alpha_bar(k));
            let rhs = s.alpha_bar(k - 1).sqrt() * b;
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0), "k={k}");
        }
    }
}

#[test]
fn linear_schedule_endpoints() {
    let s = make_schedule(100, ScheduleKind::linear_default()).unwrap();
    assert!((s.beta(1) - 1e-4).abs() < 1e-15);
    assert!((s.beta(100) - 0.02).abs() < 1e-15);
}

#[test]
fn ddim_subsequence_is_uniform_stride() {
    let s = cosine100();
    assert_eq!(s.ddim_timesteps(10).unwrap(), vec![100, 90, 80, 70, 60, 50, 40, 30, 20, 10]);
    assert!(s.ddim_timesteps(0).is_err());
    assert!(s.ddim_timesteps(101).is_err());
}

// --- forward process --------------------------------------------------------

#[test]
fn forward_noise_identity_limit_returns_the_clean_chunk() {
    let chain = planar_3link();
    let space = ExactIkSpace::with_defaults(&chain);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (qs, a0) = random_chunk(&chain, 4, &mut rng);
    let out = forward_noise(&cosine100(), &space, &a0, &qs, 0, &Noise::zeros(4, 3)).unwrap();
    assert!(max_abs_diff(&out.lifted.chunk.coords, &a0.coords) < 1e-9);
    assert_eq!(out.lifted.chunk.gripper, a0.gripper);
}

#[test]
fn forward_noise_without_noise_shrinks_toward_zero_config() {
    let chain = planar_3link();
    let space = ExactIkSpace::with_defaults(&chain);
    let s = cosine100();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (qs, a0) = random_chunk(&chain, 3, &mut rng);
    for k in [1, 30, 100] {
        let out = forward_noise_lifted(&s, &space, &qs, &a0.gripper, k, &Noise::zeros(3, 3)).unwrap();
        let a = s.alpha_bar(k).sqrt();
        for i in 0..3 {
            let q: Vec<f64> = qs[3 * i..3 * i + 3].iter().map(|v| a * v).collect();
            assert_eq!(out.lifted.chunk.step(i), chain.fk_flat(&q).as_slice());
        }
    }
}

#[test]
fn forward_noise_rejects_bad_sizes_and_steps() {
    let chain = planar_3link();
    let space = ExactIkSpace::with_defaults(&chain);
    let s = cosine100();
    let q = vec![0.0; 6];
    let g = vec![0.0; 2];
    assert!(forward_noise_lifted(&s, &space, &q, &g, 101, &Noise::zeros(2, 3)).is_err());
    assert!(forward_noise_lifted(&s, &space, &q, &g, 5, &Noise::zeros(3, 3)).is_err());
    assert!(forward_noise_lifted(&s, &space, &q[..5], &g, 5, &Noise::zeros(2, 3)).is_err());
}

/// Sample mean and covariance of rows.
fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for i in 0..d {
            mean[i] += s[i] / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    (mean, cov)
}

fn assert_gaussian_moments(samples: &[Vec<f64>], mean: &[f64], var: f64) {
    let n = samples.len() as f64;
    let (m, c) = moments(samples);
    let se_mean = (var / n).sqrt();
    let se_var = var * (2.0 / n).sqrt();
    let se_cov = var / n.sqrt();
    for i in 0..mean.len() {
        assert!((m[i] - mean[i]).abs() <= 3.0 * se_mean, "mean[{i}] {} vs {}", m[i], mean[i]);
        for j in 0..mean.len() {
            let (expect, se) = if i == j { (var, se_var) } else { (0.0, se_cov) };
            assert!((c[i][j] - expect).abs() <= 3.0 * se, "cov[{i}][{j}] {} vs {expect}", c[i][j]);
        }
    }
}

#[test]
fn forward_noise_marginal_matches_gaussian() {
    let chain = planar_3link();
    let space = ExactIkSpace::with_defaults(&chain);
    let s = cosine100();
    let q0 = vec![0.4, -0.7, 1.1];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = 40;
    let draws: Vec<Vec<f64>> = (0..10_000)
        .map(|_| {
            let noise = Noise::sample(1, 3, &mut rng);
            forward_noise_lifted(&s, &space, &q0, &[1.0], k, &noise).unwrap().pre
        })
        .collect();
    let a = s.alpha_bar(k);
    let mean: Vec<f64> = q0.iter().map(|v| a.sqrt() * v).collect();
    assert_gaussian_moments(&draws, &mean, 1.0 - a);
}

#[test]
fn stepwise_composition_matches_direct_marginal() {
    let s = cosine100();
    let q0 = vec![0.4, -0.7, 1.1];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in [1, 50, 100] {
        let draws: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let mut q = q0.clone();
                for step in 1..=k {
                    let eps: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                    q = forward_step(&s, &q, step, &eps).unwrap();
                }
                q
            })
            .collect();
        let a = s.alpha_bar(k);
        let mean: Vec<f64> = q0.iter().map(|v| a.sqrt() * v).collect();
        assert_gaussian_moments(&draws, &mean, 1.0 - a);
    }
}

// --- posterior --------------------------------------------------------------

#[test]
fn posterior_first_step_is_deterministic() {
    let (_, bt) = posterior_mean(&cosine100(), &[0.3], &[0.9], 1).unwrap();
    assert_eq!(bt, 0.0);
}

#[test]
fn posterior_of_equal_inputs_scales_by_coefficient_sum() {
    let s = cosine100();
    let q = vec![0.2, -1.3, 0.8];
    for k in [1, 17, 100] {
        let (mu, _) = posterior_mean(&s, &q, &q, k).unwrap();
        for (m, v) in mu.iter().zip(&q) {
            assert!((m - (s.c0(k) + s.ck(k)) * v).abs() < 1e-15);
        }
    }
}

#[test]
fn posterior_matches_gaussian_conditioning() {
    // Product of q(x_{k-1} | x_0) and q(x_k | x_{k-1}) in precision form.
    for s in [cosine100(), make_schedule(100, ScheduleKind::linear_default()).unwrap()] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let k = rng.random_range(2..=100);
            let x0: f64 = rng.random_range(-2.0..2.0);
            let xk: f64 = rng.random_range(-2.0..2.0);
            let prior_var = 1.0 - s.alpha_bar(k - 1);
            let prior_mean = s.alpha_bar(k - 1).sqrt() * x0;
            let a = 1.0 - s.beta(k);
            let lik_prec = a / s.beta(k);
            let prec = 1.0 / prior_var + lik_prec;
            let var = 1.0 / prec;
            let mean = var * (prior_mean / prior_var + a.sqrt() * xk / s.beta(k));
            let (mu, bt) = posterior_mean(&s, &[x0], &[xk], k).unwrap();
            assert!((mu[0] - mean).abs() <= 1e-12, "k={k}: {} vs {mean}", mu[0]);
            assert!((bt - var).abs() <= 1e-12, "k={k}: {bt} vs {var}");
        }
    }
}

// --- reverse process --------------------------------------------------------

#[test]
fn reverse_step_with_prediction_equal_to_state_collapses_linearly() {
    let chain = planar_3link();
    let space = ExactIkSpace::with_defaults(&chain);
    let s = cosine100();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (qs, a0) = random_chunk(&chain, 3, &mut rng);
    let ak = project_chunk(&space, qs.clone(), a0.gripper.clone());
    let k = 30;
    let (out, _) = reverse_step(&s, &space, &ak, &ak.chunk, &qs, k, &Noise::zeros(3, 3)).unwrap();
    let c = s.c0(k) + s.ck(k);
    for i in 0..3 {
        let mut q: Vec<f64> = qs[3 * i..3 * i + 3].iter().map(|v| c * v).collect();
        chain.clamp(&mut q);
        let expect = chain.fk_flat(&q);
        assert!(max_abs_diff(out.lifted_step(i), &expect) < 1e-9);
    }
}

trait StepView {
    fn lifted_step(&self, i: usize) -> &[f64];
}

impl StepView for Lifted {
    fn lifted_step(&self, i: usize) -> &[f64] {
        self.chunk.step(i)
    }
}

#[test]
fn final_reverse_step_ignores_noise() {
    let chain = planar_3link();
    let space = ExactIkSpace::with_defaults(&chain);
    let s = cosine100();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (qs, a0) = random_chunk(&chain, 2, &mut rng);
    let noised = forward_noise_lifted(&s, &space, &qs, &a0.gripper, 1, &Noise::sample(2, 3, &mut rng)).unwrap();
    let z1 = Noise::sample(2, 3, &mut rng);
    let z2 = Noise::sample(2, 3, &mut rng);
    let (o1, _) = reverse_step(&s, &space, &noised.lifted, &a0, &qs, 1, &z1).unwrap();
    let (o2, _) = reverse_step(&s, &space, &noised.lifted, &a0, &qs, 1, &z2).unwrap();
    assert_eq!(o1, o2);
}

#[test]
fn oracle_denoiser_recovers_the_clean_chunk() {
    let chain = planar_3link();
    let space = ExactIkSpace::with_defaults(&chain);
    let s = cosine100();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut total = 0.0;
    let trials = 20;
    for _ in 0..trials {
        let (qs, a0) = random_chunk(&chain, 4, &mut rng);
        let noise = Noise::sample(4, 3, &mut rng);
        let mut state = forward_noise_lifted(&s, &space, &qs, &a0.gripper, 100, &noise).unwrap().lifted;
        // The robot's measured configuration, near the chunk's first step.
        let measured: Vec<f64> = qs[..3].iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        let mut warm: Vec<f64> = measured.iter().cycle().take(12).copied().collect();
        for k in (1..=100).rev() {
            assert_feasible(&chain, &state);
            let z = Noise::sample(4, 3, &mut rng);
            let (next, q0) = reverse_step(&s, &space, &state, &a0, &warm, k, &z).unwrap();
            state = next;
            warm = q0;
        }
        total += state.chunk.mean_node_distance(&a0);
        assert_eq!(state.chunk.gripper, a0.gripper);
    }
    let mean = total / trials as f64;
    assert!(mean <= 2e-3, "mean per-node error {mean}");
}

// --- DDIM -------------------------------------------------------------------

#[test]
fn ddim_deterministic_step_matches_closed_form_on_one_dof() {
    let chain = one_dof();
    let space = ExactIkSpace::with_defaults(&chain);
    let s = cosine100();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let q0: f64 = rng.random_range(-1.0..1.0);
        let qk: f64 = rng.random_range(-2.0..2.0);
        let k = rng.random_range(2..=100);
        let kp = rng.random_range(0..k);
        let ak = project_chunk(&space, vec![qk], vec![0.0]);
        let a0 = project_chunk(&space, vec![q0], vec![1.0]).chunk;
        let (out, _) = ddim_step(&s, &space, &ak, &a0, &[q0], k, kp, 0.0, &Noise::zeros(1, 1)).unwrap();
        let (ab, abp) = (s.alpha_bar(k), s.alpha_bar(kp));
        let qk_set = qk.clamp(-2.5, 2.5);
        let expect = abp.sqrt() * q0 + (1.0 - abp).sqrt() * (qk_set - ab.sqrt() * q0) / (1.0 - ab).sqrt();
        let expect = expect.clamp(-2.5, 2.5);
        assert!((out.var[0] - expect).abs() < 1e-9, "{} vs {expect}", out.var[0]);
        assert!(max_abs_diff(out.chunk.step(0), &chain.fk_flat(&[expect])) < 1e-9);
    }
}

#[test]
fn ddim_full_noise_one_step_has_ancestral_mean() {
    let chain = planar_3link();
    let space = ExactIkSpace::with_defaults(&chain);
    let s = cosine100();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (qs, a0) = random_chunk(&chain, 2, &mut rng);
    let noised = forward_noise_lifted(&s, &space, &qs, &a0.gripper, 60, &Noise::sample(2, 3, &mut rng)).unwrap();
    let z = Noise::zeros(2, 3);
    let (ddim, _) = ddim_step(&s, &space, &noised.lifted, &a0, &qs, 60, 59, 1.0, &z).unwrap();
    let (ddpm, _) = reverse_step(&s, &space, &noised.lifted, &a0, &qs, 60, &z).unwrap();
    assert!(max_abs_diff(&ddim.var, &ddpm.var) < 1e-9);
    assert!(max_abs_diff(&ddim.chunk.gripper, &ddpm.chunk.gripper) < 1e-12);
}

#[test]
fn ddim_with_exact_predictor_on_identity_map_lands_on_target() {
    let space = AffineSpace::identity(3);
    let s = cosine100();
    let target = ActionChunk::new(1, 3, vec![0.3, -0.2, 0.9], vec![1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sample = sample_action(
        &s,
        &space,
        |_, _| Ok(target.clone()),
        1,
        &[0.0; 3],
        SamplerKind::Ddim { steps: 10, eta: 0.0 },
        &mut rng,
    )
    .unwrap();
    assert_eq!(sample.evaluations, 10);
    assert!(max_abs_diff(&sample.lifted.chunk.coords, &target.coords) <= 1e-10);
    assert!((sample.lifted.chunk.gripper[0] - 1.0).abs() <= 1e-10);
}

#[test]
fn ddim_rejects_non_decreasing_steps() {
    let space = AffineSpace::identity(1);
    let s = cosine100();
    let ak = project_chunk(&space, vec![0.0], vec![0.0]);
    let z = Noise::zeros(1, 1);
    assert!(ddim_step(&s, &space, &ak, &ak.chunk, &[0.0], 10, 10, 0.0, &z).is_err());
}

// --- sampling ---------------------------------------------------------------

#[test]
fn random_denoiser_still_yields_feasible_chunks() {
    let chain = planar_3link();
    let space = ExactIkSpace::with_defaults(&chain);
    let s = cosine100();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut junk = ChaCha8Rng::seed_from_u64(13);
    for sampler in [SamplerKind::Ddpm, SamplerKind::default()] {
        let out = sample_action(
            &s,
            &space,
            |ak, _| {
                let coords = (0..ak.coords.len()).map(|_| junk.random_range(-1.0..1.0)).collect();
                ActionChunk::new(ak.steps, ak.dim, coords, vec![0.5; ak.steps])
            },
            4,
            &[0.0; 12],
            sampler,
            &mut rng,
        )
        .unwrap();
        assert_feasible(&chain, &out.lifted);
        for i in 0..4 {
            let q = crate::kinematics::JointVector(out.lifted.var[3 * i..3 * i + 3].to_vec());
            assert!(chain.within_limits(&q));
        }
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let chain = planar_3link();
    let space = ExactIkSpace::with_defaults(&chain);
    let s = cosine100();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_action(&s, &space, |ak, _| Ok(ak.clone()), 2, &[0.0; 6], SamplerKind::Ddpm, &mut rng)
            .unwrap()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn interleaved_layout_round_trips() {
    let c = ActionChunk::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.0, 1.0]).unwrap();
    let flat = c.interleaved();
    assert_eq!(flat, vec![1.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0, 1.0]);
    assert_eq!(ActionChunk::from_interleaved(2, 3, &flat).unwrap(), c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_emitted_chunk_is_feasible(seed in any::<u64>(), k in 1usize..=100) {
        let chain = planar_3link();
        let space = ExactIkSpace::with_defaults(&chain);
        let s = cosine100();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (qs, a0) = random_chunk(&chain, 2, &mut rng);
        let noised = forward_noise(&s, &space, &a0, &qs, k, &Noise::sample(2, 3, &mut rng)).unwrap();
        assert_feasible(&chain, &noised.lifted);
        let z = Noise::sample(2, 3, &mut rng);
        let (_, junk) = random_chunk(&chain, 2, &mut rng);
        let mut junk = junk;
        for v in junk.coords.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let (rev, _) = reverse_step(&s, &space, &noised.lifted, &junk, &qs, k, &z).unwrap();
        assert_feasible(&chain, &rev);
        let (dd, _) = ddim_step(&s, &space, &noised.lifted, &junk, &qs, k, k / 2, 0.0, &z).unwrap();
        assert_feasible(&chain, &dd);
    }
}

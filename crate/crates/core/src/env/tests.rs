use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kinematics::{IkSolver, FEASIBILITY_TOL};

fn env(name: &str) -> Env {
    Env::new(task_preset(name).unwrap()).unwrap()
}

fn with_obstacle(shape: Shape, position: [f64; 3]) -> Env {
    let mut t = task_preset("reach").unwrap();
    t.objects.push(ObjectSpec {
        name: "block".into(),
        role: ObjectRole::Obstacle,
        shape,
        position,
        range: [[0.0; 2]; 3],
        follow: None,
        visible: true,
    });
    Env::new(t).unwrap()
}

#[test]
fn presets_validate() {
    for name in TASK_NAMES {
        let e = env(name);
        assert_eq!(e.task.id.as_str(), name);
    }
    assert!(task_preset("stack-blocks").is_err());
}

#[test]
fn zero_width_range_gives_identical_placements() {
    let mut t = task_preset("reach").unwrap();
    t.objects[0].range = [[0.1, 0.1], [-0.05, -0.05], [0.0, 0.0]];
    let e = Env::new(t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = e.reset(&mut rng).unwrap();
    for _ in 0..20 {
        assert_eq!(e.reset(&mut rng).unwrap(), first);
    }
    assert_eq!(first.objects[0], [0.575, -0.05, 0.0]);
}

#[test]
fn placements_are_uniform_over_the_range() {
    let e = env("reach");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1000;
    let bins = 10;
    let mut counts = [[0usize; 10]; 2];
    for _ in 0..n {
        let s = e.reset(&mut rng).unwrap();
        let o = &e.task.objects[0];
        for axis in 0..2 {
            let [lo, hi] = o.range[axis];
            let u = (s.objects[0][axis] - o.position[axis] - lo) / (hi - lo);
            assert!((0.0..=1.0).contains(&u));
            counts[axis][((u * bins as f64) as usize).min(bins - 1)] += 1;
        }
    }
    let p = 1.0 / bins as f64;
    let expected = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for axis in counts {
        for c in axis {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "bin count {c}");
        }
    }
}

#[test]
fn fixed_seed_gives_identical_state() {
    for name in TASK_NAMES {
        let e = env(name);
        let a = e.reset(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = e.reset(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn grid_placement_walks_the_anchors() {
    let mut t = task_preset("reach").unwrap();
    t.placement = Placement::Grid { counts: [2, 3, 1] };
    let e = Env::new(t.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = Vec::new();
    for ep in 0..6 {
        seen.push(e.reset_episode(Some(ep), &mut rng).unwrap().objects[0]);
    }
    assert_eq!(seen[0], [0.35, -0.25, 0.0]);
    assert_eq!(seen[1], [0.6, -0.25, 0.0]);
    assert_eq!(seen[5], [0.6, 0.25, 0.0]);
    assert_eq!(e.reset_episode(Some(6), &mut rng).unwrap().objects[0], seen[0]);

    t.placement = Placement::Midpoints { counts: [2, 3, 1] };
    let e = Env::new(t).unwrap();
    for _ in 0..20 {
        let p = e.reset(&mut rng).unwrap().objects[0];
        assert!((p[0] - 0.475).abs() < 1e-12);
        assert!((p[1] + 0.125).abs() < 1e-12 || (p[1] - 0.125).abs() < 1e-12);
    }
}

#[test]
fn followers_share_the_offset() {
    let e = env("obstacle-reach");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let s = e.reset(&mut rng).unwrap();
        let dy = s.objects[0][1] - 0.225;
        assert!((s.objects[1][1] - (-0.225 + dy)).abs() < 1e-12);
        assert!((s.objects[2][1] - dy).abs() < 1e-12);
    }
}

#[test]
fn node_motion_places_the_button_at_the_elbow() {
    let e = env("elbow-push");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let home = e.chain().fk_flat(&e.task.home);
    for _ in 0..10 {
        let s = e.reset(&mut rng).unwrap();
        let q = s.goal_q.clone().unwrap();
        assert!(e.chain().within_limits(&q));
        let nodes = e.chain().fk_flat(&q.0);
        let elbow = Vector3::new(nodes[9], nodes[10], nodes[11]);
        assert!((elbow - s.object_position(0)).norm() < 1e-12);
        assert!((elbow - Vector3::new(home[9], home[10], home[11])).norm() >= 0.08);
    }
}

#[test]
fn validation_rejects_bad_specs() {
    let chain = crate::kinematics::presets::planar_3link();
    let mut t = task_preset("reach").unwrap();
    t.objects[0].position = [2.0, 0.0, 0.0];
    assert!(t.validate(&chain).is_err());
    let mut t = task_preset("reach").unwrap();
    t.home = vec![0.0; 2];
    assert!(t.validate(&chain).is_err());
    let mut t = task_preset("obstacle-reach").unwrap();
    t.objects[2].follow = Some("nothing".into());
    assert!(t.validate(&chain).is_err());
    let mut t = task_preset("reach").unwrap();
    t.objects[0].range[0] = [0.1, -0.1];
    assert!(t.validate(&chain).is_err());
}

#[test]
fn task_config_round_trips_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    for name in TASK_NAMES {
        let t = task_preset(name).unwrap();
        let path = dir.path().join(format!("{name}.toml"));
        t.save(&path).unwrap();
        assert_eq!(TaskSpec::load(&path).unwrap(), t);
    }
    let path = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(dir.path().join("reach.toml")).unwrap();
    std::fs::write(&path, format!("colour = \"red\"\n{text}")).unwrap();
    let err = TaskSpec::load(&path).unwrap_err();
    assert_eq!(err.category(), "config");
}

#[test]
fn command_equal_to_current_q_changes_nothing() {
    let e = env("pick-analog");
    let s = e.reset(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let next = e.step(&s, &s.q, false).unwrap();
    assert_eq!(next.steps, 1);
    let mut same = next.clone();
    same.steps = 0;
    assert_eq!(same, s);
}

#[test]
fn out_of_limit_command_is_rejected() {
    let e = env("reach");
    let s = e.reset(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let err = e.step(&s, &JointVector(vec![3.0, 0.0, 0.0]), false).unwrap_err();
    assert_eq!(err.category(), "contract");
}

#[test]
fn sweeping_through_an_obstacle_is_detected() {
    let e = with_obstacle(Shape::Sphere { radius: 0.03 }, [0.2, 0.0, 0.0]);
    let mut s = e.reset(&mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    s.q = JointVector(vec![-0.5, 0.0, 0.0]);
    let end = JointVector(vec![0.5, 0.0, 0.0]);
    assert!(!e.in_collision(&s, &s.q.0));
    assert!(!e.in_collision(&s, &end.0));
    let next = e.step(&s, &end, false).unwrap();
    assert!(next.collision);
    // Frozen at the last substep that was still clear.
    assert!((next.q.0[0] + 0.3).abs() < 1e-12, "{:?}", next.q);
    let after = e.step(&next, &end, false).unwrap();
    assert_eq!(after.q, next.q);
}

#[test]
fn sweeping_through_a_box_is_detected() {
    let e = with_obstacle(Shape::Box { half_extents: [0.02, 0.02, 0.02] }, [0.5, 0.0, 0.0]);
    let mut s = e.reset(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    s.q = JointVector(vec![-0.4, 0.0, 0.0]);
    let end = JointVector(vec![0.4, 0.0, 0.0]);
    assert!(!e.in_collision(&s, &s.q.0));
    assert!(!e.in_collision(&s, &end.0));
    assert!(e.step(&s, &end, false).unwrap().collision);
}

#[test]
fn capsule_distances_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let (a, b, c) = (v(), v(), v());
        let cap = Capsule { a, b, radius: 0.05 };
        let half = [0.1, 0.2, 0.15];
        let shape = Shape::Box { half_extents: half };
        let brute = (0..=20_000)
            .map(|i| shape.distance(&c, &(a + (b - a) * (i as f64 / 20_000.0))))
            .fold(f64::INFINITY, f64::min);
        let got = cap.clearance(&shape, &c) + 0.05;
        assert!(got <= brute + 1e-12 && brute - got < 1e-4, "{got} vs {brute}");
        let sphere = Shape::Sphere { radius: 0.1 };
        let brute = (0..=20_000)
            .map(|i| (a + (b - a) * (i as f64 / 20_000.0) - c).norm())
            .fold(f64::INFINITY, f64::min);
        let got = cap.clearance(&sphere, &c) + 0.05 + 0.1;
        assert!((got - brute).abs() < 1e-4);
    }
}

#[test]
fn finer_substeps_never_miss_a_detected_collision() {
    let e = env("obstacle-reach");
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut detected = 0;
    for _ in 0..400 {
        let mut s = e.reset(&mut rng).unwrap();
        let lim = e.chain().limits();
        let a: Vec<f64> = lim.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)).collect();
        let b: Vec<f64> = lim.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)).collect();
        s.q = JointVector(a);
        if e.in_collision(&s, &s.q.0) {
            continue;
        }
        let coarse = e.step_with(&s, &JointVector(b.clone()), false, 10).unwrap();
        let fine = e.step_with(&s, &JointVector(b), false, 20).unwrap();
        if coarse.collision {
            detected += 1;
            assert!(fine.collision);
        }
    }
    assert!(detected > 20, "too few colliding moves ({detected}) to be meaningful");
}

#[test]
fn attached_object_moves_with_the_grasp_point() {
    let e = env("pick-analog");
    let mut s = e.reset(&mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let g = grasp_point(e.chain(), &s.q.0);
    s.objects[0] = [g.x + 0.01, g.y, g.z];
    let grasped = e.step(&s, &s.q.clone(), true).unwrap();
    assert!(grasped.attached.is_some());
    let cmd = JointVector(vec![1.2, -1.0, -0.5]);
    let moved = e.step(&grasped, &cmd, true).unwrap();
    let dg = grasp_point(e.chain(), &moved.q.0) - g;
    let dobj = moved.object_position(0) - grasped.object_position(0);
    assert!((dg - dobj).norm() < 1e-12);
    let released = e.step(&moved, &moved.q.clone(), false).unwrap();
    assert!(released.attached.is_none());
    let still = e.step(&released, &s.q, false).unwrap();
    assert_eq!(still.objects[0], released.objects[0]);
}

#[test]
fn closing_far_from_the_object_does_not_attach() {
    let e = env("pick-analog");
    let s = e.reset(&mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let next = e.step(&s, &s.q.clone(), true).unwrap();
    assert!(next.attached.is_none());
}

#[test]
fn success_predicates() {
    let e = env("reach");
    let mut s = e.reset(&mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    assert!(!e.check_success(&s));
    let g = grasp_point(e.chain(), &s.q.0);
    s.objects[0] = [g.x, g.y, g.z];
    assert!(e.check_success(&s));
    s.collision = true;
    assert!(!e.check_success(&s));

    let e = env("elbow-push");
    let s = e.reset(&mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    assert!(!e.check_success(&s));
    let mut at_goal = s.clone();
    at_goal.q = s.goal_q.clone().unwrap();
    assert!(e.check_success(&at_goal));
    at_goal.collision = true;
    assert!(!e.check_success(&at_goal));
}

#[test]
fn sphere_points_stay_within_noise_of_the_surface() {
    let e = env("reach");
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let s = e.reset(&mut rng).unwrap();
        let pts = e.render_pointcloud(&s, 256, &mut rng).unwrap();
        assert_eq!(pts.len(), 256);
        let c = s.object_position(0);
        for p in pts {
            assert!((p - c).norm() <= 0.02 + 3.0 * 1e-3 + 1e-12);
        }
    }
    let s = e.reset(&mut rng).unwrap();
    assert_eq!(e.render_pointcloud(&s, 1024, &mut rng).unwrap().len(), 1024);
}

#[test]
fn point_clouds_hold_no_robot_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for name in TASK_NAMES {
        let e = env(name);
        let s = e.reset(&mut rng).unwrap();
        let caps = e.capsules(&s.q.0);
        for p in e.render_pointcloud(&s, 128, &mut rng).unwrap() {
            let near_object = e.task.objects.iter().enumerate().any(|(i, o)| {
                let d = o.shape.distance(&s.object_position(i), &p);
                let inside_margin = match o.shape {
                    Shape::Sphere { radius } => (p - s.object_position(i)).norm() >= radius - 3e-3,
                    Shape::Box { .. } => true,
                };
                d <= 3e-3 + 1e-12 && inside_margin
            });
            assert!(near_object, "{name}: stray point {p:?}");
            // Points come from object surfaces; none sit on the arm's axis.
            assert!(caps.iter().all(|c| point_segment_distance(&p, &c.a, &c.b) > 1e-9));
        }
    }
}

/// Brute-force greedy selection from a given first point.
fn greedy_oracle(points: &[Vector3<f64>], first: usize, p: usize) -> Vec<usize> {
    let mut chosen = vec![first];
    while chosen.len() < p {
        let mut best = (f64::NEG_INFINITY, 0);
        for i in 0..points.len() {
            let d = chosen
                .iter()
                .map(|&c| (points[i] - points[c]).norm())
                .fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

#[test]
fn fps_picks_collinear_endpoints() {
    let pts = vec![
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(0.3, 0.0, 0.0),
        Vector3::new(1.0, 0.0, 0.0),
    ];
    for seed in 0..20 {
        let mut got = farthest_point_sample(&pts, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        got.sort_by(|a, b| a.x.total_cmp(&b.x));
        assert_eq!(got, vec![pts[0], pts[2]]);
    }
}

#[test]
fn fps_matches_greedy_oracle_on_a_grid() {
    let mut pts = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            pts.push(Vector3::new(i as f64 * 0.25, j as f64 * 0.25, 0.0));
        }
    }
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let got = farthest_point_sample(&pts, 4, &mut rng.clone()).unwrap();
        let s = pts[rng.random_range(0..pts.len())];
        let first = (0..pts.len())
            .max_by(|&a, &b| (pts[a] - s).norm().total_cmp(&(pts[b] - s).norm()).then(b.cmp(&a)))
            .unwrap();
        let want: Vec<Vector3<f64>> = greedy_oracle(&pts, first, 4).iter().map(|&i| pts[i]).collect();
        assert_eq!(got, want);
        // All four picks are corners of the square.
        for p in &got {
            assert!((p.x == 0.0 || p.x == 1.0) && (p.y == 0.0 || p.y == 1.0));
        }
    }
}

#[test]
fn fps_passes_small_inputs_through() {
    let pts = vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.0, 0.0, 0.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(farthest_point_sample(&pts, 2, &mut rng).unwrap(), pts);
    assert_eq!(farthest_point_sample(&pts, 5, &mut rng).unwrap(), pts);
    assert!(farthest_point_sample(&[], 5, &mut rng).is_err());
}

fn min_pairwise(pts: &[Vector3<f64>]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            m = m.min((pts[i] - pts[j]).norm());
        }
    }
    m
}

#[test]
fn fps_spreads_points_better_than_random_subsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let tasks = ["reach", "obstacle-reach", "pick-analog", "elbow-push"];
    for scene in 0..100 {
        let e = env(tasks[scene % 4]);
        let s = e.reset(&mut rng).unwrap();
        let solids: Vec<(Shape, Vector3<f64>)> = e
            .task
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (o.shape, s.object_position(i)))
            .collect();
        let raw = pointcloud::sample_surfaces(&solids, 600, 1e-3, &mut rng);
        let fps = farthest_point_sample(&raw, 64, &mut rng).unwrap();
        let mut idx: Vec<usize> = (0..raw.len()).collect();
        for i in 0..64 {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        let random: Vec<Vector3<f64>> = idx[..64].iter().map(|&i| raw[i]).collect();
        assert!(min_pairwise(&fps) >= min_pairwise(&random), "scene {scene}");
    }
}

#[test]
fn reach_expert_always_succeeds() {
    let e = env("reach");
    for ep in 0..100 {
        let demo = scripted_expert(&e, 1000 + ep as u64, ep, 16).unwrap();
        assert!(demo.success);
        assert!(demo.steps.len() <= e.task.max_steps);
    }
}

fn replay(e: &Env, demo: &Demonstration) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(demo.seed);
    let mut s = e.reset_episode(Some(demo.episode), &mut rng).unwrap();
    for st in &demo.steps {
        s = e.step(&s, &JointVector(st.command.clone()), st.action_gripper).unwrap();
    }
    s
}

#[test]
fn demonstrations_are_feasible_successful_and_reproducible() {
    for name in TASK_NAMES {
        let e = env(name);
        let solver = IkSolver::with_defaults(e.chain());
        for ep in 0..5 {
            let demo = scripted_expert(&e, 77, ep, 16).unwrap();
            assert!(demo.success, "{name}");
            for st in &demo.steps {
                let target = crate::kinematics::NodeState::from_flat(&st.action, st.action_gripper);
                let (err, _) = solver.ik_error(&target, &JointVector(st.command.clone())).unwrap();
                assert!(err <= FEASIBILITY_TOL, "{name}: {err}");
                assert!(e.chain().within_limits(&JointVector(st.command.clone())));
            }
            assert!(e.check_success(&replay(&e, &demo)), "{name} replay");
            assert_eq!(scripted_expert(&e, 77, ep, 16).unwrap(), demo);
        }
    }
}

#[test]
fn elbow_push_demos_keep_the_gripper_clear() {
    let e = env("elbow-push");
    for ep in 0..10 {
        let demo = scripted_expert(&e, 5, ep, 16).unwrap();
        let end = replay(&e, &demo);
        let nodes = e.chain().fk_flat(&end.q.0);
        let at = |k: usize| Vector3::new(nodes[3 * k], nodes[3 * k + 1], nodes[3 * k + 2]);
        let button = end.object_position(0);
        assert!((at(3) - button).norm() <= e.task.success.radius);
        for f in e.chain().finger_nodes() {
            assert!((at(f) - button).norm() >= e.task.success.clearance);
        }
    }
}

#[test]
fn unachievable_task_reports_expert_failure() {
    let mut t = task_preset("obstacle-reach").unwrap();
    // Close the slot.
    t.objects[0].shape = Shape::Box { half_extents: [0.015, 0.2, 0.05] };
    t.objects[0].position[1] = 0.19;
    let e = Env::new(t).unwrap();
    let err = scripted_expert(&e, 0, 0, 16).unwrap_err();
    assert_eq!(err.category(), "expert");
}

#[test]
fn dataset_round_trip_and_window_padding() {
    let e = env("reach");
    let demos: Vec<Demonstration> = (0..2).map(|ep| scripted_expert(&e, 3, ep, 16).unwrap()).collect();
    let ds = Dataset {
        task: e.task.clone(),
        chain_hash: e.chain().content_hash(),
        points_per_frame: 16,
        demos,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demos.json");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, ds);
    let d = &ds.demos[0];
    assert_eq!(d.obs_indices(0, 2), vec![0, 0]);
    assert_eq!(d.obs_indices(3, 2), vec![2, 3]);
    let n = d.steps.len();
    assert_eq!(d.chunk_indices(n - 2, 4), vec![n - 2, n - 1, n - 1, n - 1]);
    let pts = d.steps[0].points_f64();
    assert!(pts.iter().all(|v| ((v / POINT_QUANTUM).round() * POINT_QUANTUM - v).abs() < 1e-12));
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kadp::denoiser::TrainControl;
use kadp::env::{scripted_expert, Dataset};
use kadp::error::{Error, Result};
use kadp::eval::{
    run_grid, summary_text, write_ik_histogram_csv, write_rows_csv, write_summary_csv, CellSource, CellSpec,
    ExperimentGrid,
};
use kadp::ikmlp::{branch_region_from_configs, train_ik_mlp, MlpIkModel};
use kadp::kinematics::{forward_kinematics, sample_feasible_config, IkSolver, JointVector};
use kadp::policy::{train_policy, ActionLayout, PolicyTraining};
use kadp::seed::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Provenance, RunConfig};
use crate::run::{default_run_id, input, InputRecord, RunDir};
use crate::{Cli, Command};

const DEMO_STREAM: u64 = 11;
const IK_STREAM: u64 = 12;
const POLICY_STREAM: u64 = 13;
const BENCH_STREAM: u64 = 14;

struct Ctx {
    cfg: RunConfig,
    provenance: Provenance,
    inputs: BTreeMap<String, InputRecord>,
    out: PathBuf,
    run_id: Option<String>,
}

impl Ctx {
    fn open(&self, command: &str) -> Result<RunDir> {
        let id = match &self.run_id {
            Some(id) => id.clone(),
            None => default_run_id(command, &self.cfg, &self.inputs, ""),
        };
        RunDir::open(&self.out, &id)
    }

    fn finish(&self, run: &RunDir, command: &str) -> Result<()> {
        run.finish(command, &self.cfg, &self.provenance, &self.inputs)?;
        println!("run directory: {}", run.root.display());
        Ok(())
    }
}

fn require(path: &Path, kind: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            kind,
            path: path.to_path_buf(),
        })
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.common.overrides.clone();
    let mut inputs = BTreeMap::new();
    match &cli.command {
        Command::GenDemos { count: Some(n) } => overrides.push(format!("demos.count={n}")),
        Command::TrainPolicy {
            no_kc, representation, ..
        } => {
            if *no_kc {
                overrides.push("policy.constrained=false".into());
            }
            if let Some(r) = representation {
                overrides.push(format!("policy.representation=\"{r}\""));
            }
        }
        Command::IkBench { targets: Some(n) } => overrides.push(format!("bench.targets={n}")),
        _ => {}
    }
    let mut record = |name: String, path: &Path, kind: &'static str| -> Result<()> {
        require(path, kind)?;
        inputs.insert(name, input(path)?);
        Ok(())
    };
    match &cli.command {
        Command::TrainIk { dataset: Some(d) } => record("dataset".into(), d, "dataset")?,
        Command::TrainPolicy { dataset, ik_mlp, .. } => {
            record("dataset".into(), dataset, "dataset")?;
            if let Some(m) = ik_mlp {
                record("ik_mlp".into(), m, "IK MLP checkpoint")?;
            }
        }
        Command::Eval { checkpoints, replay } => {
            for spec in checkpoints {
                let (label, path) = parse_checkpoint(spec);
                record(format!("checkpoint:{label}"), &path, "denoiser checkpoint")?;
            }
            if let Some(r) = replay {
                record("replay".into(), r, "dataset")?;
            }
        }
        _ => {}
    }
    let (cfg, provenance) = RunConfig::resolve(&cli.common.configs, &overrides)?;
    let ctx = Ctx {
        cfg,
        provenance,
        inputs,
        out: cli.common.out.clone(),
        run_id: cli.common.run_id.clone(),
    };
    match cli.command {
        Command::GenDemos { .. } => gen_demos(&ctx),
        Command::TrainIk { dataset } => train_ik(&ctx, dataset.as_deref()),
        Command::TrainPolicy {
            dataset,
            ik_mlp,
            resume,
            stop_after_epochs,
            ..
        } => train_policy_cmd(&ctx, &dataset, ik_mlp.as_deref(), resume, stop_after_epochs),
        Command::Eval { checkpoints, replay } => eval(&ctx, &checkpoints, replay.as_deref()),
        Command::IkBench { .. } => ik_bench(&ctx),
    }
}

fn gen_demos(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    if cfg.demos.count == 0 {
        return Err(Error::Config("demos.count must be at least 1".into()));
    }
    let env = cfg.env()?;
    let points = cfg.denoiser.points;
    let seed = derive_seed(cfg.seed, DEMO_STREAM);
    let mut demos = Vec::with_capacity(cfg.demos.count);
    for ep in 0..cfg.demos.count {
        demos.push(scripted_expert(&env, seed, ep, points)?);
    }
    let ds = Dataset {
        task: env.task.clone(),
        chain_hash: env.chain().content_hash(),
        points_per_frame: points,
        demos,
    };
    let mut run = ctx.open("gen-demos")?;
    let path = run.result("dataset.json");
    ds.save(&path)?;
    run.produced(path.clone());
    println!(
        "{} demonstrations of '{}' ({} steps, all successful) -> {}",
        ds.demos.len(),
        env.task.id,
        ds.total_steps(),
        path.display()
    );
    ctx.finish(&run, "gen-demos")
}

#[derive(Serialize)]
struct IkReport<'a> {
    chain: &'a str,
    node_subset: Option<&'a [usize]>,
    samples: usize,
    n_train: usize,
    n_val: usize,
    val_rmse_rad: f64,
    val_rmse_per_joint_rad: &'a [f64],
    final_train_loss: f64,
    branch_region: Option<&'a [(f64, f64)]>,
}

fn train_ik(ctx: &Ctx, dataset: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let ds = dataset.map(Dataset::load).transpose()?;
    let task = match &ds {
        Some(d) => d.task.clone(),
        None => cfg.task_spec()?,
    };
    let chain = cfg.chain_for(&task)?;
    if let Some(d) = &ds {
        if d.chain_hash != chain.content_hash() {
            return Err(Error::Mismatch("dataset was recorded on a different chain".into()));
        }
    }
    let layout = ActionLayout::resolve(&cfg.policy, &chain)?;
    let sub = layout.sub_chain();
    let mut train_cfg = cfg.ikmlp.train.clone();
    if let Some(d) = &ds {
        let configs: Vec<JointVector> = d
            .demos
            .iter()
            .flat_map(|demo| demo.steps.iter())
            .flat_map(|s| [JointVector(s.q.clone()), JointVector(s.command.clone())])
            .collect();
        train_cfg.branch_region = Some(branch_region_from_configs(sub, &configs, cfg.ikmlp.branch_pad));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, IK_STREAM));
    let model = train_ik_mlp(sub, cfg.ikmlp.samples, &train_cfg, &mut rng)?;
    let mut run = ctx.open("train-ik")?;
    let ckpt = run.checkpoint("ik_mlp.json");
    model.save(&ckpt)?;
    run.produced(ckpt.clone());
    let meta = &model.meta;
    let report = IkReport {
        chain: sub.name(),
        node_subset: (!layout.is_full_node_set()).then_some(layout.nodes.as_slice()),
        samples: meta.n_samples,
        n_train: meta.n_train,
        n_val: meta.n_val,
        val_rmse_rad: meta.val_rmse,
        val_rmse_per_joint_rad: &meta.val_rmse_per_joint,
        final_train_loss: meta.final_train_loss,
        branch_region: train_cfg.branch_region.as_deref(),
    };
    let rp = run.result("ik_report.json");
    std::fs::write(&rp, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&rp, e))?;
    run.produced(rp);
    println!(
        "IK MLP on '{}': validation RMSE {:.4} rad over {} held-out configurations -> {}",
        sub.name(),
        meta.val_rmse,
        meta.n_val,
        ckpt.display()
    );
    ctx.finish(&run, "train-ik")
}

fn train_policy_cmd(
    ctx: &Ctx,
    dataset: &Path,
    ik_mlp: Option<&Path>,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let ds = Dataset::load(dataset)?;
    let chain = cfg.chain_for(&ds.task)?;
    let mlp = ik_mlp.map(MlpIkModel::load).transpose()?;
    let mut run = ctx.open("train-policy")?;
    let control = TrainControl {
        seed: derive_seed(cfg.seed, POLICY_STREAM),
        state_path: Some(run.checkpoint("train_state.json")),
        best_path: Some(run.checkpoint("policy_best.json")),
        log_path: Some(run.log("train.csv")),
        resume,
        max_epochs_this_run: stop_after,
    };
    let job = PolicyTraining {
        dataset: &ds,
        chain: &chain,
        ik_mlp: mlp.as_ref(),
        policy: &cfg.policy,
        diffusion: &cfg.diffusion,
        denoiser: &cfg.denoiser,
    };
    let out = train_policy(&job, &control)?;
    if !out.finished {
        println!(
            "stopped after epoch {} of {}; continue with --resume",
            out.log.len(),
            cfg.denoiser.epochs
        );
        return Ok(());
    }
    let ckpt = run.checkpoint("policy.json");
    out.last.save(&ckpt)?;
    run.produced(ckpt.clone());
    run.produced(run.checkpoint("policy_best.json"));
    let layout = ActionLayout::from_meta(&out.last.meta, &chain)?;
    if let Some(note) = &layout.note {
        println!("note: {note}");
    }
    println!(
        "{} policy ({}constrained) trained for {} epochs, final loss {:.5}, best {:.5} -> {}",
        layout.repr,
        if layout.constrained { "" } else { "un" },
        out.log.len(),
        out.log.last().map_or(f64::NAN, |l| l.loss),
        out.best_loss,
        ckpt.display()
    );
    ctx.finish(&run, "train-policy")
}

/// `label=path` or a bare path; bare checkpoints inside a run directory are
/// labelled by the run id.
fn parse_checkpoint(spec: &str) -> (String, PathBuf) {
    if let Some((l, p)) = spec.split_once('=') {
        return (l.to_string(), PathBuf::from(p));
    }
    let path = PathBuf::from(spec);
    let parent = path.parent();
    let label = match parent.and_then(|d| d.file_name()).and_then(|n| n.to_str()) {
        Some("checkpoints") => parent
            .and_then(Path::parent)
            .and_then(|d| d.file_name())
            .and_then(|n| n.to_str())
            .map(str::to_string),
        _ => None,
    }
    .or_else(|| path.file_stem().and_then(|s| s.to_str()).map(str::to_string))
    .unwrap_or_else(|| spec.to_string());
    (label, path)
}

fn eval(ctx: &Ctx, checkpoints: &[String], replay: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    if checkpoints.is_empty() && replay.is_none() {
        return Err(Error::Config("eval needs at least one --checkpoint or --replay".into()));
    }
    let env = cfg.eval_env()?;
    let chain = (cfg.chain.file.is_some() || cfg.chain.preset.is_some()).then(|| env.chain().to_config());
    let cell = |label: String, source: CellSource| CellSpec {
        label,
        task: env.task.clone(),
        chain: chain.clone(),
        source,
        policy: cfg.policy.clone(),
        diffusion: cfg.diffusion.clone(),
        eval_seeds: cfg.eval.seeds.clone(),
        episodes: cfg.eval.episodes,
    };
    let mut cells: Vec<CellSpec> = checkpoints
        .iter()
        .map(|s| {
            let (label, path) = parse_checkpoint(s);
            cell(label, CellSource::Checkpoint { path })
        })
        .collect();
    if let Some(r) = replay {
        cells.push(cell("replay".into(), CellSource::Replay { dataset: r.to_path_buf() }));
    }
    let grid = ExperimentGrid { cells };
    grid.validate()?;
    let mut run = ctx.open("eval")?;
    let res = run_grid(&grid, Some(&run.root.join("cache")))?;
    for (name, write) in [
        ("episodes.csv", 0),
        ("summary.csv", 1),
        ("ik_error_hist.csv", 2),
    ] {
        let p = run.result(name);
        match write {
            0 => write_rows_csv(&p, &res.rows)?,
            1 => write_summary_csv(&p, &res.summaries)?,
            _ => write_ik_histogram_csv(&p, &res.rows)?,
        }
        run.produced(p);
    }
    let text = summary_text(&res.summaries);
    let p = run.result("summary.txt");
    std::fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
    run.produced(p);
    print!("{text}");
    ctx.finish(&run, "eval")
}

#[derive(Debug, Serialize)]
struct BenchStats {
    mean_ms: f64,
    p50_ms: f64,
    p99_ms: f64,
    mean_iterations: f64,
    mean_residual_m: f64,
    max_residual_m: f64,
    unconverged: usize,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn stats(times: &mut [f64], iters: &[usize], residuals: &[f64], unconverged: usize) -> BenchStats {
    let n = times.len() as f64;
    let mean_ms = times.iter().sum::<f64>() / n;
    times.sort_by(f64::total_cmp);
    BenchStats {
        mean_ms,
        p50_ms: percentile(times, 0.5),
        p99_ms: percentile(times, 0.99),
        mean_iterations: iters.iter().sum::<usize>() as f64 / n,
        mean_residual_m: residuals.iter().sum::<f64>() / n,
        max_residual_m: residuals.iter().copied().fold(0.0, f64::max),
        unconverged,
    }
}

#[derive(Debug, Serialize)]
struct BenchReport {
    chain: String,
    targets: usize,
    perturbation_rad: f64,
    /// Started from the generating configuration plus uniform noise.
    warm: BenchStats,
    /// Started from the middle of the joint limits.
    cold: BenchStats,
}

fn ik_bench(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    if cfg.bench.targets == 0 {
        return Err(Error::Config("bench.targets must be at least 1".into()));
    }
    let task = cfg.task_spec()?;
    let chain = cfg.chain_for(&task)?;
    let solver = IkSolver::with_defaults(&chain);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, BENCH_STREAM));
    let mid = JointVector(chain.limits().iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect());
    let n = cfg.bench.targets;
    let p = cfg.bench.perturbation;
    let mut t = [Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut it = [Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut res = [Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut unconv = [0usize; 2];
    for i in 0..n {
        let q = sample_feasible_config(&chain, &mut rng);
        let target = forward_kinematics(&chain, &q)?;
        let mut warm = JointVector(q.0.iter().map(|x| x + rng.random_range(-p..=p)).collect());
        chain.clamp(&mut warm.0);
        // Alternate the order so neither mode always runs with a hot cache.
        let order = if i % 2 == 0 { [0, 1] } else { [1, 0] };
        for m in order {
            let init = if m == 0 { &warm } else { &mid };
            let start = Instant::now();
            let (err, rep) = solver.ik_error(&target, init)?;
            t[m].push(start.elapsed().as_secs_f64() * 1e3);
            it[m].push(rep.iterations);
            res[m].push(err);
            unconv[m] += usize::from(rep.unconverged());
        }
    }
    let [mut tw, mut tc] = t;
    let report = BenchReport {
        chain: chain.name().to_string(),
        targets: n,
        perturbation_rad: p,
        warm: stats(&mut tw, &it[0], &res[0], unconv[0]),
        cold: stats(&mut tc, &it[1], &res[1], unconv[1]),
    };
    let mut run = ctx.open("ik-bench")?;
    let path = run.result("ik_bench.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    run.produced(path);
    println!("IK solver on '{}', {} feasible targets", report.chain, n);
    println!(
        "{:<5} {:>9} {:>9} {:>9} {:>7} {:>13} {:>13} {:>11}",
        "start", "mean_ms", "p50_ms", "p99_ms", "iters", "mean_resid_m", "max_resid_m", "unconverged"
    );
    for (name, s) in [("warm", &report.warm), ("cold", &report.cold)] {
        println!(
            "{:<5} {:>9.4} {:>9.4} {:>9.4} {:>7.2} {:>13.3e} {:>13.3e} {:>11}",
            name, s.mean_ms, s.p50_ms, s.p99_ms, s.mean_iterations, s.mean_residual_m, s.max_residual_m, s.unconverged
        );
    }
    ctx.finish(&run, "ik-bench")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_labels() {
        assert_eq!(parse_checkpoint("a=x/y.json"), ("a".into(), PathBuf::from("x/y.json")));
        assert_eq!(
            parse_checkpoint("out/run-1/checkpoints/policy.json").0,
            "run-1"
        );
        assert_eq!(parse_checkpoint("models/node.json").0, "node");
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 50.0);
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&[3.0], 0.99), 3.0);
    }
}

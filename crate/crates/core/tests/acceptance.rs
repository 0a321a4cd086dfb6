//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use layerlock::analysis::{
    collapse_metrics, collapse_step, convergence_grid, final_loss_window, grid_base_config, monotonicity_report, percent_deviation,
    probe_clips, CollapsePoint,
};
use layerlock::checkpoint::{load_checkpoint, save_checkpoint};
use layerlock::cli::main_with_args;
use layerlock::config::{preset, RunConfig};
use layerlock::cost::{flops_estimate, CostSettings};
use layerlock::engine::{clip_objective, is_backbone_param, is_trainable, LossTerm, ObjectiveSpec, TargetPath, Trainer};
use layerlock::jepa::ema_update;
use layerlock::masking::keep_count;
use layerlock::model::{block_number, Backbone, ModelConfig, Target};
use layerlock::params::ParamStore;
use layerlock::readout::{train_and_eval_readout, ReadoutBudget, ReadoutTask};
use layerlock::rope::{apply_rope, build_rotation_table, GridPos, RopeConfig};
use layerlock::schedule::FreezeSchedule;
use layerlock::tensor::Tensor;

use common::{central_diff, max_rel_err, tiny_vit};

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn randomize_heads(params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().filter(|n| n.starts_with("pixel_head.") || n.starts_with("latent_heads.")).cloned().collect();
    for n in names {
        let shape = params.get(&n).unwrap().shape().to_vec();
        params.insert(n, Tensor::randn(&shape, 0.3, rng));
    }
}

fn run_losses(t: &mut Trainer, until: u64) -> Result<Vec<f64>, String> {
    let mut trace = Vec::new();
    t.run_until(until, |r| {
        trace.push(r.loss);
        Ok(())
    })
    .map_err(err)?;
    Ok(trace)
}

// 1 ---------------------------------------------------------------------

const FD_STEP: f64 = 3e-3;
const FD_FLOOR: f64 = 1e-7;
const FD_TOL: f64 = 1e-4;

fn fd_case(bb: &Backbone, params: &ParamStore, tokens: &Tensor, keep: &[usize], target: Target, k: usize) -> Result<f64, String> {
    let heads: BTreeSet<String> = [target.head_prefix()].into();
    let trainable = |n: &str| is_trainable(n, k, &heads) && !n.starts_with("pred.");
    let terms = [LossTerm { target, weight: 1.0, rows: None }];
    let spec = ObjectiveSpec { freeze_layer: k, terms: &terms, path: TargetPath::Detached, allow_unfrozen_targets: false };
    let obj = clip_objective(bb, params, &trainable, tokens, keep, &spec).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        let used = trainable(name) && (!name.starts_with("pixel_head.") && !name.starts_with("latent_heads.") || name.starts_with(&target.head_prefix()));
        if !used {
            if obj.grads.get(name).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)) {
                return Err(format!("gradient reached frozen or unused parameter {name}"));
            }
            continue;
        }
        let analytic = obj.grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut f = |x: &Tensor| {
            let mut p = params.clone();
            p.insert(name.clone(), x.clone());
            clip_objective(bb, &p, &trainable, tokens, keep, &spec).expect("objective").loss
        };
        let numeric = central_diff(&mut f, t, FD_STEP);
        worst = worst.max(max_rel_err(&analytic, &numeric, FD_FLOOR));
    }
    Ok(worst)
}

fn criterion_1() -> Check {
    let cfg = tiny_vit();
    let bb = Backbone::new(cfg.clone()).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = bb.init_params(&mut rng);
    bb.ensure_head(&mut params, Target::Layer(1));
    randomize_heads(&mut params, &mut rng);
    let n_params = params.numel();
    if n_params > 50_000 {
        return Err(format!("tiny ViT has {n_params} parameters"));
    }
    let tokens = Tensor::randn(&[cfg.n_tokens(), cfg.patch_dim()], 1.0, &mut rng);
    let keep = vec![0, 2, 5, 7];
    let pixels = fd_case(&bb, &params, &tokens, &keep, Target::Pixels, 0)?;
    let latent = fd_case(&bb, &params, &tokens, &keep, Target::Layer(1), 1)?;
    let worst = pixels.max(latent);
    Ok((worst < FD_TOL, format!("{n_params} params, max rel err pixels {pixels:.2e}, layer-1 {latent:.2e} (tol {FD_TOL:.0e})")))
}

// 2 ---------------------------------------------------------------------

fn criterion_2() -> Check {
    let mut cfg = preset("toy-mae").map_err(err)?;
    cfg.schedule = FreezeSchedule::new(200, 100, 1, cfg.model.encoder_depth());
    cfg.steps = 800;
    cfg.optim.total_steps = 800;
    let mut run = Trainer::new(cfg).map_err(err)?;
    let mut frozen: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut n_events = 0;
    let mut problems = Vec::new();
    while run.state.step < 800 {
        let before = run.state.params.clone();
        let from = run.state.frozen_prefix;
        run.train_step().map_err(err)?;
        if run.state.events.len() > n_events {
            n_events = run.state.events.len();
            let ev = run.state.events.last().unwrap().clone();
            let mut expected = 0;
            for (name, t) in before.iter() {
                let newly = match block_number(name) {
                    Some(i) => i > from && i <= ev.to,
                    None => from == 0 && is_backbone_param(name),
                };
                if newly {
                    expected += t.len();
                    frozen.insert(name.clone(), t.clone());
                }
            }
            if ev.frozen_numel != expected || ev.backbone_opt_before - ev.backbone_opt_after != expected {
                problems.push(format!(
                    "event at {}: frozen {} expected {expected}, optimizer shrank by {}",
                    ev.step,
                    ev.frozen_numel,
                    ev.backbone_opt_before - ev.backbone_opt_after
                ));
            }
        }
        for (name, t) in &frozen {
            let now = run.state.params.get(name).map_err(err)?;
            if now.data().iter().zip(t.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                problems.push(format!("{name} changed at step {}", run.state.step - 1));
            }
            if run.state.opt.contains(name) {
                problems.push(format!("{name} regained optimizer state"));
            }
        }
        if problems.len() > 5 {
            break;
        }
    }
    let pass = problems.is_empty() && n_events == 6;
    let detail = if problems.is_empty() {
        format!("{n_events} events, {} frozen tensors constant through step 799", frozen.len())
    } else {
        problems.join("; ")
    };
    Ok((pass, detail))
}

// 3 ---------------------------------------------------------------------

fn criterion_3() -> Check {
    let cfg = preset("toy-mae").map_err(err)?;
    let bb = Backbone::new(cfg.model.clone()).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = bb.init_params(&mut rng);
    for k in 1..=2 {
        bb.ensure_head(&mut params, Target::Layer(k));
    }
    randomize_heads(&mut params, &mut rng);
    let n = cfg.model.n_tokens();
    let tokens = Tensor::randn(&[n, cfg.model.patch_dim()], 1.0, &mut rng);
    let keep = layerlock::masking::random_mask(n, 0.5, &mut rng).map_err(err)?;
    let all = |_: &str| true;
    let mut worst: f64 = 0.0;
    for k in 0..=2 {
        let terms = [LossTerm { target: Target::from_layer(k), weight: 1.0, rows: None }];
        let run = |path| {
            let spec = ObjectiveSpec { freeze_layer: 0, terms: &terms, path, allow_unfrozen_targets: true };
            clip_objective(&bb, &params, &all, &tokens, &keep, &spec)
        };
        let det = run(TargetPath::Detached).map_err(err)?;
        let live = run(TargetPath::LiveStopGradient).map_err(err)?;
        let names: BTreeSet<&String> = det.grads.keys().chain(live.grads.keys()).collect();
        for name in names {
            let shape = params.get(name).map_err(err)?.shape().to_vec();
            let a = det.grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
            let b = live.grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
            worst = worst.max(a.max_abs_diff(&b));
        }
        worst = worst.max((det.loss - live.loss).abs());
    }
    Ok((worst < 1e-12, format!("max |Δ| over k ∈ {{0,1,2}}: {worst:.2e} (tol 1e-12)")))
}

// 4 ---------------------------------------------------------------------

fn criterion_4() -> Check {
    let g = preset("vitg-1b").map_err(err)?.effective_schedule();
    let b = preset("vitb-50m").map_err(err)?.effective_schedule();
    let cases: [(&FreezeSchedule, u64, usize); 8] = [
        (&g, 0, 0),
        (&g, 159_999, 0),
        (&g, 160_000, 1),
        (&g, 469_999, 31),
        (&g, 470_000, 32),
        (&g, 1_000_000_000, 32),
        (&b, 6_000, 2),
        (&b, 10_000, 4),
    ];
    let misses: Vec<String> = cases
        .iter()
        .filter(|(s, step, k)| s.frozen(*step) != *k)
        .map(|(s, step, k)| format!("step {step}: {} != {k}", s.frozen(*step)))
        .collect();
    let detail = if misses.is_empty() { "vitg-1b and vitb-50m landmarks exact".to_string() } else { misses.join("; ") };
    Ok((misses.is_empty(), detail))
}

// 5 ---------------------------------------------------------------------

/// Frozen prefix straight from the schedule definition.
fn oracle_frozen(s: &FreezeSchedule, step: u64) -> usize {
    if s.jump == 0 || s.max_frozen == 0 || step < s.start {
        return 0;
    }
    let events = 1 + (step - s.start) / s.interval;
    ((s.jump as u64).saturating_mul(events) as usize).min(s.max_frozen)
}

/// Multiply-accumulate count (×2) of every matmul in one pre-norm block.
fn oracle_block_ops(cfg: &ModelConfig, m: usize) -> f64 {
    let (d, h) = (cfg.d_model as f64, cfg.mlp_hidden() as f64);
    let m = m as f64;
    let q = 2.0 * m * d * d;
    let k = 2.0 * m * d * d;
    let v = 2.0 * m * d * d;
    let scores = 2.0 * m * m * d;
    let mix = 2.0 * m * m * d;
    let proj = 2.0 * m * d * d;
    let fc1 = 2.0 * m * d * h;
    let fc2 = 2.0 * m * h * d;
    q + k + v + scores + mix + proj + fc1 + fc2
}

/// Stored activations of one block: eight `d`-wide tensors per token, two
/// hidden-wide ones and the score and probability matrices per head.
fn oracle_block_acts(cfg: &ModelConfig, m: usize) -> f64 {
    let per_token = 8 * cfg.d_model + 2 * cfg.mlp_hidden();
    (m * per_token + 2 * cfg.n_heads * m * m) as f64
}

struct OracleModel {
    embed: usize,
    block: Vec<usize>,
    heads: BTreeMap<String, usize>,
}

/// Parameter counts read off an instantiated model.
fn oracle_model(cfg: &ModelConfig) -> OracleModel {
    let bb = Backbone::new(cfg.clone()).unwrap();
    let mut params = bb.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    for k in 1..=cfg.encoder_depth() {
        bb.ensure_head(&mut params, Target::Layer(k));
    }
    let mut embed = 0;
    let mut block = vec![0; cfg.depth];
    let mut heads = BTreeMap::new();
    for (name, t) in params.iter() {
        if let Some(i) = block_number(name) {
            block[i - 1] += t.len();
        } else if name.starts_with("embed.") || name == "pos_embed" {
            embed += t.len();
        } else if let Some((prefix, _)) = name.rsplit_once('.') {
            *heads.entry(prefix.to_string()).or_insert(0) += t.len();
        }
    }
    OracleModel { embed, block, heads }
}

/// Step-by-step cost: `(total flops, memory bytes)` for `steps` steps.
fn oracle_series(cfg: &ModelConfig, sched: &FreezeSchedule, s: &CostSettings, steps: u64) -> Vec<(f64, f64)> {
    let om = oracle_model(cfg);
    let n = cfg.n_tokens();
    let kt = s.keep_tokens;
    let (d, p) = (cfg.d_model, cfg.patch_dim());
    let b = s.batch_size as f64;
    let mut out = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let k = oracle_frozen(sched, step);
        let target = sched.target_for_prefix(k);
        let head_out = match target {
            Target::Pixels => p,
            Target::Layer(_) => d,
        };
        let mut flops = 0.0;
        let mut acts = 0.0;
        // patch embedding
        flops += 2.0 * (kt * p * d) as f64;
        if k == 0 {
            flops += 2.0 * 2.0 * (kt * p * d) as f64;
            acts += (kt * p) as f64;
        }
        for layer in 1..=cfg.encoder_depth() {
            flops += oracle_block_ops(cfg, kt);
            if layer > k {
                flops += 2.0 * oracle_block_ops(cfg, kt);
                acts += oracle_block_acts(cfg, kt);
            }
        }
        for _ in 0..cfg.decoder_blocks {
            flops += 3.0 * oracle_block_ops(cfg, kt + n);
            acts += oracle_block_acts(cfg, kt + n);
        }
        flops += 3.0 * 2.0 * (n * d * head_out) as f64;
        acts += (n * d) as f64;
        flops *= b;

        let head = om.heads[&target.head_prefix()];
        let all = om.embed + om.block.iter().sum::<usize>() + head;
        let frozen = if k > 0 { om.embed + om.block[..k].iter().sum::<usize>() } else { 0 };
        let mem = (all + 2 * (all - frozen)) as f64 + acts * b;
        out.push((flops, mem * s.bytes_per_value as f64));
    }
    out
}

fn criterion_5() -> Check {
    let cfg = preset("toy-mae").map_err(err)?;
    let model = cfg.model.clone();
    let s = CostSettings::new(cfg.data.batch_size, keep_count(model.n_tokens(), cfg.mask.mask_ratio));
    let steps = 2000;
    let schedules = [cfg.schedule.clone(), FreezeSchedule::new(200, 100, 1, 8), FreezeSchedule::new(300, 250, 2, 8)];
    let base = flops_estimate(&model, &FreezeSchedule::disabled(), &s, steps);
    let mut worst: f64 = 0.0;
    let mut problems = Vec::new();
    for (i, sched) in schedules.iter().enumerate() {
        let rep = flops_estimate(&model, sched, &s, steps);
        if rep.events.is_empty() {
            problems.push(format!("schedule {i} has no events"));
            continue;
        }
        for &e in &rep.events {
            let (prev, now) = (rep.per_step[e as usize - 1].total, rep.per_step[e as usize].total);
            if now >= prev {
                problems.push(format!("schedule {i}: step flops {now} >= {prev} at event {e}"));
            }
        }
        let oracle = oracle_series(&model, sched, &s, steps);
        let mut cum = 0.0;
        let mut peak: f64 = 0.0;
        for (t, &(f, m)) in oracle.iter().enumerate() {
            cum += f;
            peak = peak.max(m);
            let rep_peak = rep.peak_memory[..=t].iter().cloned().fold(0.0, f64::max);
            worst = worst.max((rep.cumulative[t] - cum).abs() / cum).max((rep.peak_memory[t] - m).abs() / m).max((rep_peak - peak).abs() / peak);
        }
        let first = rep.events[0] as usize;
        if let Some(t) = (first..steps as usize).find(|&t| rep.cumulative[t] >= base.cumulative[t]) {
            problems.push(format!("schedule {i}: cumulative not below baseline at step {t}"));
        }
    }
    if worst >= 1e-9 {
        problems.push(format!("oracle mismatch {worst:.2e}"));
    }
    let detail = if problems.is_empty() { format!("3 schedules, max oracle rel err {worst:.2e} (tol 1e-9)") } else { problems.join("; ") };
    Ok((problems.is_empty(), detail))
}

// 6 ---------------------------------------------------------------------

const GRID_LAYERS: [usize; 3] = [2, 4, 6];
const GRID_STEPS: [u64; 4] = [250, 500, 1000, 1500];
const GRID_TOTAL: u64 = 2000;
const GRID_WINDOW: usize = 200;
const GRID_TOLERANCE: f64 = 2.0;

fn criterion_6() -> Check {
    let t0 = Instant::now();
    let base = preset("toy-convergence").map_err(err)?;
    let mut grids = Vec::new();
    for seed in 0..3 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        grids.push(convergence_grid(&cfg, &GRID_LAYERS, &GRID_STEPS, GRID_TOTAL, GRID_WINDOW, 1).map_err(err)?);
    }
    let report = monotonicity_report(&grids, &GRID_LAYERS, &GRID_STEPS, GRID_TOLERANCE).map_err(err)?;
    for (i, layer) in GRID_LAYERS.iter().enumerate() {
        let row: Vec<String> = report.mean[i].iter().map(|v| format!("{v:6.2}")).collect();
        println!("    L={layer}: {}", row.join(" "));
    }

    let mut cfg0 = base.clone();
    cfg0.seed = 0;
    let gc = grid_base_config(&cfg0, GRID_TOTAL).map_err(err)?;
    let mut zero_arms = Vec::new();
    for sched in [FreezeSchedule::hard_freeze(GRID_STEPS[0], 0), FreezeSchedule::hard_freeze(GRID_TOTAL, 2)] {
        let mut run = Trainer::new(gc.clone()).map_err(err)?;
        run.set_schedule(sched).map_err(err)?;
        let trace = run_losses(&mut run, GRID_TOTAL)?;
        let fl = final_loss_window(&trace, GRID_WINDOW).map_err(err)?;
        zero_arms.push(percent_deviation(fl, grids[0].base_loss));
    }
    let elapsed = t0.elapsed();
    let arms_zero = zero_arms.iter().all(|&v| v == 0.0);
    let in_time = elapsed < Duration::from_secs(3600);
    let pass = report.passes() && arms_zero && in_time;
    Ok((
        pass,
        format!(
            "{} ordering breaks, {} beyond {GRID_TOLERANCE}% tolerance, seed spread {:.2}; L=0 / never-freeze deviation {:?}; {:.0}s",
            report.violations.len(),
            report.beyond_tolerance().len(),
            report.seed_spread,
            zero_arms,
            elapsed.as_secs_f64()
        ),
    ))
}

// 7 and 10 -------------------------------------------------------------

const COLLAPSE_EVERY: u64 = 100;
const COLLAPSE_PROBES: usize = 16;
const COLLAPSE_FRACTION: f64 = 0.01;
const COLLAPSE_MIN_RANK: f64 = 2.0;

fn trace_until(run: &mut Trainer, probes: &[layerlock::data::VideoClip], layer: usize, steps: u64, stop_on_collapse: bool) -> Result<Vec<CollapsePoint>, String> {
    let mut out = Vec::new();
    loop {
        let step = run.state.step;
        if step % COLLAPSE_EVERY == 0 || step == steps {
            let metrics = collapse_metrics(&run.features(probes, layer).map_err(err)?).map_err(err)?;
            out.push(CollapsePoint { step, metrics });
            if stop_on_collapse && collapse_step(&out, COLLAPSE_EVERY, COLLAPSE_FRACTION, COLLAPSE_MIN_RANK).is_some() {
                return Ok(out);
            }
        }
        if step >= steps {
            return Ok(out);
        }
        run.train_step().map_err(err)?;
    }
}

fn criterion_7(layerlock_run: &mut Option<Trainer>) -> Check {
    let ll_cfg = preset("toy-mae").map_err(err)?;
    let nf_cfg = preset("toy-latent-nofreeze").map_err(err)?;
    if ll_cfg.seed != nf_cfg.seed || ll_cfg.data != nf_cfg.data {
        return Err("runs differ in seed or data".into());
    }
    let layer = ll_cfg.model.encoder_depth();
    let probes = probe_clips(&ll_cfg, COLLAPSE_PROBES).map_err(err)?;
    let steps = ll_cfg.steps;

    let mut nf = Trainer::new(nf_cfg).map_err(err)?;
    let nf_trace = trace_until(&mut nf, &probes, layer, steps, true)?;
    let nf_collapse = collapse_step(&nf_trace, COLLAPSE_EVERY, COLLAPSE_FRACTION, COLLAPSE_MIN_RANK);

    let t0 = Instant::now();
    let mut ll = Trainer::new(ll_cfg).map_err(err)?;
    let ll_trace = trace_until(&mut ll, &probes, layer, steps, false)?;
    println!("    LayerLock run: {:.0}s", t0.elapsed().as_secs_f64());
    let ll_collapse = collapse_step(&ll_trace, COLLAPSE_EVERY, COLLAPSE_FRACTION, COLLAPSE_MIN_RANK);
    let ref_var = ll_trace.iter().find(|p| p.step == COLLAPSE_EVERY).map(|p| p.metrics.token_variance).ok_or("no step-100 point")?;
    let last = ll_trace.last().unwrap().metrics.clone();
    *layerlock_run = Some(ll);

    let ordered = match (nf_collapse, ll_collapse) {
        (Some(a), Some(b)) => a < b,
        (Some(_), None) => true,
        _ => false,
    };
    let retained = last.token_variance / ref_var;
    Ok((
        ordered && retained >= 0.5,
        format!(
            "no-freeze collapses at {nf_collapse:?}, LayerLock at {ll_collapse:?}; LayerLock keeps {:.0}% of its step-100 token variance (rank {:.2})",
            100.0 * retained,
            last.effective_rank
        ),
    ))
}

fn criterion_10(layerlock_run: Option<Trainer>) -> Check {
    let ll = match layerlock_run {
        Some(t) => t,
        None => {
            let cfg = preset("toy-mae").map_err(err)?;
            let steps = cfg.steps;
            let mut t = Trainer::new(cfg).map_err(err)?;
            run_losses(&mut t, steps)?;
            t
        }
    };
    let t0 = Instant::now();
    let rep = train_and_eval_readout(ll.backbone(), &ll.state.params, ReadoutTask::Classify, &ReadoutBudget::default()).map_err(err)?;
    let readout_time = t0.elapsed();
    let chance = 1.0 / 8.0;
    let top1 = rep.best.metric;

    let t1 = Instant::now();
    let base_cfg = preset("toy-mae-baseline").map_err(err)?;
    let steps = base_cfg.steps;
    let mut base = Trainer::new(base_cfg).map_err(err)?;
    let trace = run_losses(&mut base, steps)?;
    let base_time = t1.elapsed();
    let first: f64 = trace[..10].iter().sum::<f64>() / 10.0;
    let last = final_loss_window(&trace, 200).map_err(err)?;
    let reduction = 1.0 - last / first;
    let limit = Duration::from_secs(30 * 60);
    let pass = top1 >= 2.0 * chance && reduction >= 0.5 && steps <= 2000 && readout_time < limit && base_time < limit;
    Ok((
        pass,
        format!(
            "readout top-1 {top1:.3} at layer {} lr {:.0e} (needs {:.3}); baseline pixel loss -{:.1}% in {steps} steps; {:.0}s + {:.0}s",
            rep.best.layer,
            rep.best.lr,
            2.0 * chance,
            100.0 * reduction,
            readout_time.as_secs_f64(),
            base_time.as_secs_f64()
        ),
    ))
}

// 8 ---------------------------------------------------------------------

fn draw_pos(rng: &mut ChaCha8Rng, grid: [usize; 3]) -> GridPos {
    [rng.random_range(0..grid[0]), rng.random_range(0..grid[1]), rng.random_range(0..grid[2])]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn criterion_8() -> Check {
    let model = preset("toy-mae").map_err(err)?.model;
    let grid = model.grid();
    let d = model.d_model;
    let table = build_rotation_table(&RopeConfig::new(d), grid).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut norm, mut shift, mut lin) = (0.0f64, 0.0f64, 0.0f64);
    let mut origin_exact = true;
    let rot = |x: &Tensor, p: GridPos| apply_rope(x, &table, &[p]).expect("rope");
    for _ in 0..100 {
        let x = Tensor::randn(&[1, d], 1.0, &mut rng);
        let y = Tensor::randn(&[1, d], 1.0, &mut rng);
        let p = draw_pos(&mut rng, grid);
        let rx = rot(&x, p);
        norm = norm.max((rx.sq_norm().sqrt() - x.sq_norm().sqrt()).abs());

        let q = draw_pos(&mut rng, grid);
        let lo: Vec<usize> = (0..3).map(|a| p[a].max(q[a])).collect();
        let s: GridPos = std::array::from_fn(|a| rng.random_range(0..grid[a] - lo[a]));
        let ps: GridPos = std::array::from_fn(|a| p[a] + s[a]);
        let qs: GridPos = std::array::from_fn(|a| q[a] + s[a]);
        let before = dot(rot(&x, p).data(), rot(&y, q).data());
        let after = dot(rot(&x, ps).data(), rot(&y, qs).data());
        shift = shift.max((before - after).abs());

        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let combo = Tensor::new(vec![1, d], x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect()).map_err(err)?;
        let ry = rot(&y, p);
        let sep = Tensor::new(vec![1, d], rx.data().iter().zip(ry.data()).map(|(u, v)| a * u + b * v).collect()).map_err(err)?;
        lin = lin.max(rot(&combo, p).max_abs_diff(&sep));

        let o = rot(&x, [0, 0, 0]);
        origin_exact &= o.data().iter().zip(x.data()).all(|(u, v)| u.to_bits() == v.to_bits());
    }
    let pass = norm <= 1e-10 && shift <= 1e-10 && lin <= 1e-12 && origin_exact;
    Ok((pass, format!("grid {grid:?}, d {d}: norm {norm:.1e}, shift {shift:.1e}, linearity {lin:.1e}, origin exact {origin_exact}")))
}

// 9 ---------------------------------------------------------------------

fn store_distance(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter().map(|(n, t)| t.data().iter().zip(b.get(n).unwrap().data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sum::<f64>().sqrt()
}

fn criterion_9() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut student = ParamStore::new();
    let mut teacher0 = ParamStore::new();
    for (name, shape) in [("embed.w", vec![12, 8]), ("embed.b", vec![8]), ("blocks.0.fc1.w", vec![8, 16])] {
        student.insert(name, Tensor::randn(&shape, 1.0, &mut rng));
        teacher0.insert(name, Tensor::randn(&shape, 1.0, &mut rng));
    }
    let d0 = store_distance(&teacher0, &student);
    let mut worst: f64 = 0.0;
    for m in [0.5, 0.9, 0.996] {
        let mut teacher = teacher0.clone();
        for n in 1..=60 {
            ema_update(&mut teacher, &student, m).map_err(err)?;
            let expected = m.powi(n) * d0;
            worst = worst.max((store_distance(&teacher, &student) - expected).abs() / d0);
        }
    }
    let bitwise = |a: &ParamStore, b: &ParamStore| a.iter().all(|(n, t)| t.data().iter().zip(b.get(n).unwrap().data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let mut t0 = teacher0.clone();
    ema_update(&mut t0, &student, 0.0).map_err(err)?;
    let mut t1 = teacher0.clone();
    ema_update(&mut t1, &student, 1.0).map_err(err)?;
    let degenerate = bitwise(&t0, &student) && bitwise(&t1, &teacher0);
    Ok((worst <= 1e-12 && degenerate, format!("max relative gap {worst:.1e} (tol 1e-12); m=0 copies student, m=1 keeps teacher: {degenerate}")))
}

// 11 --------------------------------------------------------------------

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("layerlock").chain(args.iter().copied()))
}

fn criterion_11() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg: RunConfig = preset("toy-mae").map_err(err)?;
    cfg.schedule = FreezeSchedule::new(50, 20, 1, 6);
    cfg.steps = 200;
    cfg.optim.total_steps = 200;
    cfg.checkpoint_every = 100;
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, cfg.to_json().map_err(err)?).map_err(err)?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let cfg_s = cfg_path.to_string_lossy().into_owned();
    for out in ["a", "b"] {
        let code = cli(&["train", "--config", &cfg_s, "--out", &p(out)]);
        if code != 0 {
            return Err(format!("train exited with {code}"));
        }
    }
    let ja = std::fs::read(dir.path().join("a/metrics.jsonl")).map_err(err)?;
    let jb = std::fs::read(dir.path().join("b/metrics.jsonl")).map_err(err)?;
    let identical = ja == jb;

    let ckpt = p("a/checkpoints/step_00000100");
    let code = cli(&["train", "--resume", &ckpt, "--out", &p("c")]);
    if code != 0 {
        return Err(format!("resume exited with {code}"));
    }
    let jc = std::fs::read_to_string(dir.path().join("c/metrics.jsonl")).map_err(err)?;
    let ja_s = String::from_utf8(ja).map_err(err)?;
    let tail: Vec<&str> = ja_s.lines().skip(100).collect();
    let resumed: Vec<&str> = jc.lines().collect();
    let mae_resume = resumed.len() == 100 && resumed[..20] == tail[..20] && resumed == tail;
    let final_a = std::fs::read(dir.path().join("a/checkpoints/final/payload.bin")).map_err(err)?;
    let final_c = std::fs::read(dir.path().join("c/checkpoints/final/payload.bin")).map_err(err)?;
    let mae_final = final_a == final_c;

    let jepa_cfg = preset("toy-jepa").map_err(err)?;
    let mut j = Trainer::new(jepa_cfg).map_err(err)?;
    run_losses(&mut j, 100)?;
    let jdir = dir.path().join("jepa");
    save_checkpoint(&j, &jdir).map_err(err)?;
    let mut back = load_checkpoint(&jdir).map_err(err)?;
    let mut jepa_same = true;
    for _ in 0..20 {
        let a = serde_json::to_string(&j.train_step().map_err(err)?).map_err(err)?;
        let b = serde_json::to_string(&back.train_step().map_err(err)?).map_err(err)?;
        jepa_same &= a == b;
    }
    jepa_same &= j.state == back.state;

    let pass = identical && mae_resume && mae_final && jepa_same;
    Ok((
        pass,
        format!("repeat runs byte-identical: {identical}; MAE resume at 100 matches: {mae_resume} (final state {mae_final}); JEPA resume matches: {jepa_same}"),
    ))
}

// ----------------------------------------------------------------------

fn evaluate(n: usize, title: &str, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let (pass, detail) = match outcome {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => (false, format!("panic: {}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())),
    };
    println!("criterion {n:2} {title}: {} ({detail}) [{:.1}s]", if pass { "PASS" } else { "FAIL" }, t0.elapsed().as_secs_f64());
    pass
}

fn main() {
    let mut results = Vec::new();
    results.push(evaluate(1, "gradient fidelity", criterion_1));
    results.push(evaluate(2, "freeze immutability", criterion_2));
    results.push(evaluate(3, "stop-gradient correctness", criterion_3));
    results.push(evaluate(4, "schedule oracle", criterion_4));
    results.push(evaluate(5, "cost model", criterion_5));
    results.push(evaluate(6, "convergence grid", criterion_6));
    let mut ll_run = None;
    results.push(evaluate(7, "collapse A/B", || criterion_7(&mut ll_run)));
    results.push(evaluate(8, "rope suite", criterion_8));
    results.push(evaluate(9, "ema", criterion_9));
    results.push(evaluate(10, "end-to-end smoke", || criterion_10(ll_run.take())));
    results.push(evaluate(11, "reproducibility", criterion_11));
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

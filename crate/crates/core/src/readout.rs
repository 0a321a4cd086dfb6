//! Frozen-feature evaluation with cross-attention readouts.
//!
//! A readout normalizes the frozen features, lets learned queries attend to
//! them (`q = queries`, `k = f·Wk`, `v = f·Wv`, multi-head) and projects the
//! attended values with a zero-initialized linear layer. Classification
//! uses one query; the dense task uses one query per patch and predicts one
//! depth value per pixel of that patch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{synth_video, SynthKind, VideoClip, VideoDims, DEPTH_VALID_RANGE, MOTION_CLASSES};
use crate::error::{Error, Result};
use crate::model::{init_linear, Backbone};
use crate::optim::{adamw_update, cosine_lr, OptState, OptimConfig};
use crate::params::{Binder, ParamStore};
use crate::patch::{patchify, patchify_array};
use crate::tensor::Tensor;

pub const LR_SWEEP: [f64; 3] = [1e-4, 3e-4, 1e-3];
pub const DEPTH_FRACTION_SWEEP: [f64; 6] = [0.25, 0.5, 0.75, 0.85, 0.95, 1.0];
pub const ABSREL_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutTask {
    Classify,
    Dense,
}

impl std::fmt::Display for ReadoutTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReadoutTask::Classify => "classify",
            ReadoutTask::Dense => "dense",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutConfig {
    pub depth_fraction: f64,
    pub qkv_size: usize,
    pub n_heads: usize,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self { depth_fraction: 0.95, qkv_size: 32, n_heads: 4, lr: 1e-3, steps: 2000, batch_size: 16, weight_decay: 0.0 }
    }
}

impl ReadoutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_fraction > 0.0 && self.depth_fraction <= 1.0) {
            return Err(Error::config("readout.depth_fraction", "must lie in (0, 1]"));
        }
        if self.n_heads == 0 || self.qkv_size % self.n_heads != 0 {
            return Err(Error::config("readout.n_heads", "qkv_size must be a positive multiple of n_heads"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("readout.steps", "steps and batch size must be positive"));
        }
        Ok(())
    }

    /// AdamW settings: linear warmup over `min(1000, steps/10)` steps, then
    /// cosine decay to 1e-7.
    pub fn optim(&self) -> OptimConfig {
        let warmup = (self.steps / 10).min(1000);
        OptimConfig {
            end_lr: 1e-7,
            weight_decay: self.weight_decay,
            mini_warmup_steps: 0,
            ..OptimConfig::new(self.lr, warmup, self.steps.max(warmup + 1))
        }
    }
}

/// Encoder block read for a depth fraction: `max(1, round(f·depth))`.
pub fn feature_layer(depth_fraction: f64, encoder_depth: usize) -> usize {
    ((depth_fraction * encoder_depth as f64).round() as usize).clamp(1, encoder_depth)
}

/// Full-grid features of one clip at `layer`, with no gradient bookkeeping.
pub fn extract_features(bb: &Backbone, params: &ParamStore, clip: &VideoClip, layer: usize) -> Result<Tensor> {
    let tokens = patchify(&clip.frames, bb.cfg().patch_size)?.tokens;
    let mut outs = bb.layer_outputs(params, &tokens, layer)?;
    outs.pop().ok_or_else(|| Error::Range("feature layer must be >= 1".into()))
}

/// Outputs of every encoder block for each clip: `bank[clip][layer - 1]`.
pub fn feature_bank(bb: &Backbone, params: &ParamStore, clips: &[VideoClip]) -> Result<Vec<Vec<Tensor>>> {
    let depth = bb.cfg().encoder_depth();
    clips
        .iter()
        .map(|c| {
            let tokens = patchify(&c.frames, bb.cfg().patch_size)?.tokens;
            bb.layer_outputs(params, &tokens, depth)
        })
        .collect()
}

/// Readout architecture and parameters.
#[derive(Clone, Debug)]
pub struct Readout {
    pub n_queries: usize,
    pub d_in: usize,
    pub qkv: usize,
    pub n_heads: usize,
    pub out: usize,
    pub params: ParamStore,
}

impl Readout {
    pub fn new(n_queries: usize, d_in: usize, out: usize, cfg: &ReadoutConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        params.insert("norm.g", Tensor::ones(&[d_in]));
        params.insert("norm.b", Tensor::zeros(&[d_in]));
        params.insert("queries", Tensor::randn(&[n_queries, cfg.qkv_size], 0.02, rng));
        init_linear(&mut params, "k", d_in, cfg.qkv_size, rng);
        init_linear(&mut params, "v", d_in, cfg.qkv_size, rng);
        params.insert("out.w", Tensor::zeros(&[cfg.qkv_size, out]));
        params.insert("out.b", Tensor::zeros(&[out]));
        Self { n_queries, d_in, qkv: cfg.qkv_size, n_heads: cfg.n_heads, out, params }
    }

    /// Predictions (`n_queries × out`) for one clip's features.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, features: Var) -> Result<Var> {
        let ng = b.var(g, "norm.g")?;
        let nb = b.var(g, "norm.b")?;
        let f = g.layer_norm(features, ng, nb, 1e-6)?;
        let q_all = b.var(g, "queries")?;
        let (kw, kb) = (b.var(g, "k.w")?, b.var(g, "k.b")?);
        let (vw, vb) = (b.var(g, "v.w")?, b.var(g, "v.b")?);
        let k_all = g.linear(f, kw, kb)?;
        let v_all = g.linear(f, vw, vb)?;
        let dh = self.qkv / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let q = g.slice_cols(q_all, h * dh, dh)?;
            let k = g.slice_cols(k_all, h * dh, dh)?;
            let v = g.slice_cols(v_all, h * dh, dh)?;
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax_rows(s)?;
            heads.push(g.matmul(a, v)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let (ow, ob) = (b.var(g, "out.w")?, b.var(g, "out.b")?);
        g.linear(o, ow, ob)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let f = g.constant(features.clone())?;
        let y = self.forward(&mut g, &mut b, f)?;
        Ok(g.value(y).clone())
    }
}

/// Per-channel standardization with statistics from the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn fit(features: &[Tensor]) -> Result<Self> {
        let d = features.first().ok_or_else(|| Error::Contract("no features to normalize".into()))?.cols();
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for f in features {
            if f.cols() != d {
                return Err(Error::shape("FeatureNorm::fit", format!("width {} vs {d}", f.cols())));
            }
            for r in 0..f.rows() {
                for (j, &v) in f.row(r).iter().enumerate() {
                    mean[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &s)| {
                *m /= n as f64;
                (s / n as f64 - *m * *m).max(0.0).sqrt() + 1e-6
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, f: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = f.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }
}

fn normalize_splits(train: &[Tensor], test: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let norm = FeatureNorm::fit(train)?;
    Ok((train.iter().map(|f| norm.apply(f)).collect(), test.iter().map(|f| norm.apply(f)).collect()))
}

/// Trains `readout` on `(features, loss)` examples; `loss` builds the
/// scalar objective from the prediction node.
fn train_readout(
    readout: &mut Readout,
    n_examples: usize,
    cfg: &ReadoutConfig,
    rng: &mut ChaCha8Rng,
    mut example_loss: impl FnMut(&mut Graph, Var, usize) -> Result<Option<Var>>,
    features: impl Fn(usize) -> Tensor,
) -> Result<()> {
    let ocfg = cfg.optim();
    let mut opt = OptState::new();
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut cursor = n_examples;
    for step in 0..cfg.steps {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut used = 0usize;
        for _ in 0..cfg.batch_size {
            if cursor == n_examples {
                order.shuffle(rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let mut g = Graph::new();
            let mut b = Binder::new(&readout.params, |_| true);
            let f = g.constant(features(i))?;
            let y = readout.forward(&mut g, &mut b, f)?;
            let Some(loss) = example_loss(&mut g, y, i)? else { continue };
            let gr = g.backward(loss)?;
            crate::engine::accumulate(&mut grads, g.named_grads(&gr), 1.0);
            used += 1;
        }
        if used == 0 {
            continue;
        }
        for gt in grads.values_mut() {
            *gt = gt.map(|v| v / used as f64);
        }
        let lr = cosine_lr(step, &ocfg);
        adamw_update(&mut readout.params, &grads, &mut opt, lr, ocfg.weight_decay, &ocfg)?;
    }
    Ok(())
}

/// Held-out top-1 accuracy of a classification readout.
pub fn fit_classifier(
    train: (&[Tensor], &[usize]),
    test: (&[Tensor], &[usize]),
    n_classes: usize,
    cfg: &ReadoutConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if train.0.is_empty() || test.0.is_empty() || train.0.len() != train.1.len() || test.0.len() != test.1.len() {
        return Err(Error::Contract("classification readout needs matching, non-empty splits".into()));
    }
    let (tr, te) = normalize_splits(train.0, test.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = tr[0].cols();
    let mut ro = Readout::new(1, d_in, n_classes, cfg, &mut rng);
    let labels = train.1;
    train_readout(
        &mut ro,
        train.0.len(),
        cfg,
        &mut rng,
        |g, y, i| g.cross_entropy(y, &[labels[i]]).map(Some),
        |i| tr[i].clone(),
    )?;
    let mut correct = 0usize;
    for (f, &l) in te.iter().zip(test.1) {
        let p = ro.predict(f)?;
        let row = p.row(0);
        let arg = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        correct += usize::from(arg == l);
    }
    Ok(correct as f64 / test.0.len() as f64)
}

/// Validity mask of depth values: 1 inside the open valid range.
pub fn depth_mask(depth: &Tensor) -> Vec<f64> {
    depth
        .data()
        .iter()
        .map(|&d| if d > DEPTH_VALID_RANGE.0 && d < DEPTH_VALID_RANGE.1 { 1.0 } else { 0.0 })
        .collect()
}

/// Pooled `mean |pred - gt| / (gt + ε)` over valid pixels.
pub fn absrel(pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for (pred, gt) in pairs {
        if pred.len() != gt.len() {
            return Err(Error::shape("absrel", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
        }
        for ((&p, &d), m) in pred.data().iter().zip(gt.data()).zip(depth_mask(gt)) {
            if m > 0.0 {
                s += (p - d).abs() / (d + ABSREL_EPS);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Contract("no valid depth pixels".into()));
    }
    Ok(s / n as f64)
}

/// Held-out AbsRel of a dense readout; targets are per-patch depth tokens
/// (`N × t·h·w`).
pub fn fit_dense(train: (&[Tensor], &[Tensor]), test: (&[Tensor], &[Tensor]), cfg: &ReadoutConfig, seed: u64) -> Result<f64> {
    cfg.validate()?;
    if train.0.is_empty() || test.0.is_empty() {
        return Err(Error::Contract("dense readout needs non-empty splits".into()));
    }
    let (tr, te) = normalize_splits(train.0, test.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tr[0].rows();
    let out = train.1[0].cols();
    let mut ro = Readout::new(n, tr[0].cols(), out, cfg, &mut rng);
    let masks: Vec<Vec<f64>> = train.1.iter().map(depth_mask).collect();
    train_readout(
        &mut ro,
        train.0.len(),
        cfg,
        &mut rng,
        |g, y, i| {
            if masks[i].iter().all(|&m| m == 0.0) {
                return Ok(None);
            }
            let t = g.constant(train.1[i].clone())?;
            g.masked_mse(y, t, &masks[i]).map(Some)
        },
        |i| tr[i].clone(),
    )?;
    let pairs: Vec<(Tensor, Tensor)> =
        te.iter().zip(test.1).map(|(f, d)| Ok((ro.predict(f)?, d.clone()))).collect::<Result<_>>()?;
    absrel(&pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutBudget {
    pub train_clips: usize,
    pub test_clips: usize,
    pub seed: u64,
    pub shuffle_labels: bool,
    pub jobs: usize,
    pub readout: ReadoutConfig,
}

impl Default for ReadoutBudget {
    fn default() -> Self {
        Self { train_clips: 256, test_clips: 128, seed: 1_000_003, shuffle_labels: false, jobs: 1, readout: ReadoutConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub depth_fraction: f64,
    pub layer: usize,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutReport {
    pub task: ReadoutTask,
    pub rows: Vec<SweepRow>,
    pub best: SweepRow,
}

/// Best row: highest accuracy or lowest AbsRel; ties go to the lower
/// learning rate, then the lower depth fraction.
pub fn select_best(task: ReadoutTask, rows: &[SweepRow]) -> Option<SweepRow> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.lr.total_cmp(&b.lr).then(a.depth_fraction.total_cmp(&b.depth_fraction)));
    let mut best: Option<SweepRow> = None;
    for r in sorted {
        let better = match &best {
            None => true,
            Some(b) => match task {
                ReadoutTask::Classify => r.metric > b.metric,
                ReadoutTask::Dense => r.metric < b.metric,
            },
        };
        if better {
            best = Some(r);
        }
    }
    best
}

/// Evaluation clips: motion clips for classification, depth clips for the
/// dense task. Train and test seeds never overlap.
pub fn readout_clips(task: ReadoutTask, dims: VideoDims, budget: &ReadoutBudget) -> Result<(Vec<VideoClip>, Vec<VideoClip>)> {
    let kind = match task {
        ReadoutTask::Classify => SynthKind::MovingShapes,
        ReadoutTask::Dense => SynthKind::GradientField,
    };
    let base = budget.seed.wrapping_mul(0x1_0000_0000);
    let train = (0..budget.train_clips).map(|i| synth_video(kind, base + i as u64, dims)).collect::<Result<_>>()?;
    let test = (0..budget.test_clips)
        .map(|i| synth_video(kind, base + (budget.train_clips + i) as u64, dims))
        .collect::<Result<_>>()?;
    Ok((train, test))
}

fn labels_of(clips: &[VideoClip]) -> Result<Vec<usize>> {
    clips
        .iter()
        .map(|c| {
            c.label
                .and_then(|l| l.class())
                .filter(|&l| l < MOTION_CLASSES)
                .ok_or_else(|| Error::Contract("classification clip without a motion class".into()))
        })
        .collect()
}

/// Sweeps learning rate × depth fraction and reports every cell plus the
/// best one.
pub fn train_and_eval_readout(bb: &Backbone, params: &ParamStore, task: ReadoutTask, budget: &ReadoutBudget) -> Result<ReadoutReport> {
    let cfg = bb.cfg();
    let dims = VideoDims::new(cfg.input[0], cfg.input[1], cfg.input[2]);
    let (train, test) = readout_clips(task, dims, budget)?;
    let train_bank = feature_bank(bb, params, &train)?;
    let test_bank = feature_bank(bb, params, &test)?;
    let depth = cfg.encoder_depth();

    let mut train_labels = Vec::new();
    let mut test_labels = Vec::new();
    let mut train_depth = Vec::new();
    let mut test_depth = Vec::new();
    match task {
        ReadoutTask::Classify => {
            train_labels = labels_of(&train)?;
            test_labels = labels_of(&test)?;
            if budget.shuffle_labels {
                train_labels.shuffle(&mut ChaCha8Rng::seed_from_u64(budget.seed ^ 0x5eed));
            }
        }
        ReadoutTask::Dense => {
            let tokens = |c: &VideoClip| -> Result<Tensor> {
                let d = c.dense_target.as_ref().ok_or_else(|| Error::Contract("dense clip without depth".into()))?;
                patchify_array(d, cfg.patch_size)
            };
            train_depth = train.iter().map(tokens).collect::<Result<_>>()?;
            test_depth = test.iter().map(tokens).collect::<Result<_>>()?;
        }
    }

    let cells: Vec<(f64, f64)> = LR_SWEEP.iter().flat_map(|&lr| DEPTH_FRACTION_SWEEP.iter().map(move |&f| (lr, f))).collect();
    let run_cell = |&(lr, frac): &(f64, f64)| -> Result<SweepRow> {
        let layer = feature_layer(frac, depth);
        let rc = ReadoutConfig { lr, depth_fraction: frac, ..budget.readout.clone() };
        let tr: Vec<Tensor> = train_bank.iter().map(|b| b[layer - 1].clone()).collect();
        let te: Vec<Tensor> = test_bank.iter().map(|b| b[layer - 1].clone()).collect();
        let metric = match task {
            ReadoutTask::Classify => fit_classifier((&tr, &train_labels), (&te, &test_labels), MOTION_CLASSES, &rc, budget.seed)?,
            ReadoutTask::Dense => fit_dense((&tr, &train_depth), (&te, &test_depth), &rc, budget.seed)?,
        };
        Ok(SweepRow { lr, depth_fraction: frac, layer, metric })
    };
    let rows = parallel_map(&cells, budget.jobs, run_cell)?;
    let best = select_best(task, &rows).expect("non-empty sweep");
    Ok(ReadoutReport { task, rows, best })
}

/// Maps `f` over `items` on up to `jobs` scoped threads, preserving order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

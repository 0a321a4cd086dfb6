//! The training loop: freeze events, target computation, losses and the
//! MAE train step.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{RunConfig, RunMode};
use crate::cost::{step_cost, CostSettings, TargetPass};
use crate::data::{synth_video, VideoClip, VideoDims};
use crate::error::{Error, Result};
use crate::masking::{keep_count, random_mask, subsample_latent_patches};
use crate::metrics::StepRecord;
use crate::model::{block_number, Backbone, Target};
use crate::optim::{adamw_update, effective_lr, weight_decay_at, OptState};
use crate::params::{BindMode, Binder, ParamStore};
use crate::patch::patchify;
use crate::rope::grid_positions;
use crate::tensor::Tensor;

/// Record of one freeze event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeEvent {
    pub step: u64,
    pub from: usize,
    pub to: usize,
    pub target: Target,
    /// Scalars frozen by this event.
    pub frozen_numel: usize,
    /// Optimizer-state scalars over embedding and block parameters.
    pub backbone_opt_before: usize,
    pub backbone_opt_after: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub opt: OptState,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub frozen_prefix: usize,
    pub last_switch_step: Option<u64>,
    /// Targets with a live head, in activation order.
    pub active_targets: Vec<Target>,
    pub teacher: Option<ParamStore>,
    pub events: Vec<FreezeEvent>,
}

/// Embedding, positional and block parameters (heads and predictor excluded).
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("embed.") || name == "pos_embed" || name.starts_with("blocks.")
}

fn head_of(name: &str) -> Option<&str> {
    if name.starts_with("pixel_head.") || name.starts_with("latent_heads.") {
        name.rsplit_once('.').map(|(p, _)| p)
    } else {
        None
    }
}

/// Whether `name` is updated when `k` blocks are frozen and `heads` are the
/// head prefixes in use.
pub fn is_trainable(name: &str, k: usize, heads: &BTreeSet<String>) -> bool {
    if let Some(i) = block_number(name) {
        return i > k;
    }
    if name.starts_with("embed.") || name == "pos_embed" {
        return k == 0;
    }
    if let Some(h) = head_of(name) {
        return heads.contains(h);
    }
    true
}

/// Names frozen when the prefix grows from `from` to `to` blocks.
pub fn newly_frozen(params: &ParamStore, from: usize, to: usize) -> Vec<String> {
    params
        .names()
        .filter(|n| match block_number(n) {
            Some(i) => i > from && i <= to,
            None => from == 0 && to > 0 && (n.starts_with("embed.") || *n == "pos_embed"),
        })
        .cloned()
        .collect()
}

/// Targets for a prediction of layer `k` (0 = pixels) on the full token
/// grid. Layer targets come from a forward pass truncated at `k`, run
/// without gradient bookkeeping, and must lie inside the frozen prefix.
pub fn compute_targets(bb: &Backbone, params: &ParamStore, full_tokens: &Tensor, k: usize, frozen_prefix: usize) -> Result<Tensor> {
    if k > frozen_prefix {
        return Err(Error::Contract(format!("target layer {k} lies outside the frozen prefix {frozen_prefix}")));
    }
    target_stack(bb, params, full_tokens, k).map(|mut v| v.pop().expect("stack holds pixels"))
}

/// `[pixels, h_1, .., h_upto]` on the full grid.
pub fn target_stack(bb: &Backbone, params: &ParamStore, full_tokens: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
    let mut out = vec![full_tokens.clone()];
    if upto > 0 {
        out.extend(bb.layer_outputs(params, full_tokens, upto)?);
    }
    Ok(out)
}

/// Mean squared error over the selected rows and every channel.
pub fn layerlock_loss(preds: &Tensor, targets: &Tensor, indices: Option<&[usize]>) -> Result<f64> {
    if preds.shape() != targets.shape() {
        return Err(Error::shape("layerlock_loss", format!("{:?} vs {:?}", preds.shape(), targets.shape())));
    }
    let rows: Vec<usize> = match indices {
        Some(idx) if idx.is_empty() => return Err(Error::Contract("empty loss index set".into())),
        Some(idx) => idx.to_vec(),
        None => (0..preds.rows()).collect(),
    };
    let mut s = 0.0;
    for &r in &rows {
        if r >= preds.rows() {
            return Err(Error::Range(format!("loss row {r} of {}", preds.rows())));
        }
        s += preds.row(r).iter().zip(targets.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(s / (rows.len() * preds.cols()) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub target: Target,
    pub weight: f64,
    /// Subsampled token rows; all rows when `None`.
    pub rows: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetPath {
    /// Targets computed outside the graph and bound as constants.
    Detached,
    /// Targets computed inside the graph from trainable parameters, then
    /// cut with stop-gradient.
    LiveStopGradient,
}

pub struct ObjectiveSpec<'a> {
    pub freeze_layer: usize,
    pub terms: &'a [LossTerm],
    pub path: TargetPath,
    /// Permit layer targets from outside the frozen prefix.
    pub allow_unfrozen_targets: bool,
}

#[derive(Clone, Debug)]
pub struct ClipObjective {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub term_losses: Vec<f64>,
}

/// Loss and gradients for one clip given its raw tokens and visible rows.
pub fn clip_objective(
    bb: &Backbone,
    params: &ParamStore,
    trainable: &dyn Fn(&str) -> bool,
    full_tokens: &Tensor,
    keep: &[usize],
    spec: &ObjectiveSpec,
) -> Result<ClipObjective> {
    if spec.terms.is_empty() {
        return Err(Error::Contract("no loss terms".into()));
    }
    let deepest = spec.terms.iter().map(|t| t.target.layer()).max().unwrap_or(0);
    if !spec.allow_unfrozen_targets && deepest > spec.freeze_layer {
        return Err(Error::Contract(format!(
            "target layer {deepest} lies outside the frozen prefix {}",
            spec.freeze_layer
        )));
    }
    let positions = grid_positions(bb.cfg().grid());
    let mut g = Graph::new();
    let mut b = Binder::new(params, trainable);

    let ctx_pos: Vec<_> = keep.iter().map(|&i| positions[i]).collect();
    let ctx = g.constant(full_tokens.gather_rows(keep)?)?;
    let (emb, _) = bb.encode(&mut g, &mut b, ctx, &ctx_pos, spec.freeze_layer, false)?;
    let lat = g.constant(bb.decoding_tokens().clone())?;
    let out = bb.decode(&mut g, &mut b, emb, &ctx_pos, lat, &positions)?;

    let targets: Vec<Var> = match spec.path {
        TargetPath::Detached => target_stack(bb, params, full_tokens, deepest)?
            .into_iter()
            .map(|t| g.constant(t))
            .collect::<Result<_>>()?,
        TargetPath::LiveStopGradient => {
            let raw = g.constant(full_tokens.clone())?;
            let mut v = vec![raw];
            if deepest > 0 {
                let outs = bb.forward_prefix(&mut g, &mut b, raw, &positions, deepest, BindMode::Live)?;
                for o in outs {
                    v.push(g.stop_gradient(o)?);
                }
            }
            v
        }
    };

    let mut total: Option<Var> = None;
    let mut term_losses = Vec::with_capacity(spec.terms.len());
    for term in spec.terms {
        let mut pred = bb.predict(&mut g, &mut b, out, term.target)?;
        let mut targ = targets[term.target.layer()];
        if let Some(rows) = &term.rows {
            if rows.is_empty() {
                return Err(Error::Contract("empty loss index set".into()));
            }
            pred = g.gather_rows(pred, rows)?;
            targ = g.gather_rows(targ, rows)?;
        }
        let l = g.mse(pred, targ)?;
        term_losses.push(g.value(l).item());
        let l = if term.weight == 1.0 { l } else { g.scale(l, term.weight)? };
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.expect("at least one term");
    let grads = g.backward(total)?;
    Ok(ClipObjective { loss: g.value(total).item(), grads: g.named_grads(&grads), term_losses })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of clip `index` in the batch of `step`; a pure function so that all
/// runs sharing a data seed see the same data order.
pub fn clip_seed(data_seed: u64, step: u64, index: usize) -> u64 {
    splitmix64(splitmix64(data_seed) ^ splitmix64(step.wrapping_mul(1 << 20).wrapping_add(index as u64)))
}

pub struct Trainer {
    cfg: RunConfig,
    pub(crate) backbone: Backbone,
    pub(crate) predictor: Option<crate::jepa::Predictor>,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.model.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = backbone.init_params(&mut rng);
        let mut predictor = None;
        let mut teacher = None;
        let active_targets = match cfg.mode {
            RunMode::Jepa => {
                let jc = cfg.jepa.as_ref().expect("validated");
                let p = crate::jepa::Predictor::new(&cfg.model, jc.decoder_depth)?;
                p.init_params(&mut params, &mut rng);
                backbone.ensure_head(&mut params, Target::Layer(1));
                teacher = Some(crate::jepa::teacher_from(&params));
                predictor = Some(p);
                vec![Target::Layer(1)]
            }
            _ => vec![Target::Pixels],
        };
        let state = TrainState {
            params,
            opt: OptState::new(),
            step: 0,
            rng,
            frozen_prefix: 0,
            last_switch_step: None,
            active_targets,
            teacher,
            events: Vec::new(),
        };
        Ok(Self { cfg, backbone, predictor, state })
    }

    /// Rebuilds a trainer around an existing state (checkpoint restore).
    pub fn with_state(cfg: RunConfig, state: TrainState) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.state = state;
        Ok(t)
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Replaces the freeze schedule; used to branch ablation runs.
    pub fn set_schedule(&mut self, sched: crate::schedule::FreezeSchedule) -> Result<()> {
        sched.validate(self.cfg.model.encoder_depth())?;
        self.cfg.schedule = sched;
        Ok(())
    }

    pub fn clone_run(&self) -> Trainer {
        Trainer {
            cfg: self.cfg.clone(),
            backbone: self.backbone.clone(),
            predictor: self.predictor.clone(),
            state: self.state.clone(),
        }
    }

    fn dims(&self) -> VideoDims {
        let i = self.cfg.model.input;
        VideoDims::new(i[0], i[1], i[2])
    }

    pub fn batch(&self, step: u64) -> Result<Vec<VideoClip>> {
        let seed = self.cfg.seed.wrapping_add(self.cfg.data.seed_offset);
        (0..self.cfg.data.batch_size)
            .map(|b| synth_video(self.cfg.data.kind, clip_seed(seed, step, b), self.dims()))
            .collect()
    }

    /// Target for a frozen prefix of `k` under this run's mode.
    pub fn target_for(&self, k: usize) -> Target {
        let t = self.cfg.effective_schedule().target_for_prefix(k);
        match (self.cfg.mode, t) {
            (RunMode::Jepa, Target::Pixels) => Target::Layer(1),
            _ => t,
        }
    }

    /// Grows the frozen prefix to `k_new`: drops the optimizer moments of
    /// newly frozen parameters, swaps in a fresh zero head when the target
    /// changes and restarts the mini-warmup.
    pub fn freeze_event(&mut self, k_new: usize) -> Result<()> {
        let new_target = self.target_for(k_new);
        let st = &mut self.state;
        if k_new < st.frozen_prefix {
            return Err(Error::Contract(format!("frozen prefix cannot shrink from {} to {k_new}", st.frozen_prefix)));
        }
        if k_new > self.cfg.model.encoder_depth() {
            return Err(Error::Contract(format!("cannot freeze {k_new} blocks of a {}-block encoder", self.cfg.model.encoder_depth())));
        }
        let before = st.opt.numel_where(is_backbone_param);
        let names = newly_frozen(&st.params, st.frozen_prefix, k_new);
        let mut frozen_numel = 0;
        for n in &names {
            frozen_numel += st.params.get(n)?.len();
            st.opt.remove(n);
        }
        let from = st.frozen_prefix;
        st.frozen_prefix = k_new;
        let current = *st.active_targets.last().expect("one active target");
        if new_target != current {
            if !self.cfg.target.multi_target {
                for t in st.active_targets.drain(..) {
                    let p = t.head_prefix();
                    st.opt.remove(&format!("{p}.w"));
                    st.opt.remove(&format!("{p}.b"));
                }
            }
            if !st.active_targets.contains(&new_target) {
                st.active_targets.push(new_target);
            }
            self.backbone.ensure_head(&mut st.params, new_target);
            st.last_switch_step = Some(st.step);
        }
        let after = st.opt.numel_where(is_backbone_param);
        st.events.push(FreezeEvent {
            step: st.step,
            from,
            to: k_new,
            target: new_target,
            frozen_numel,
            backbone_opt_before: before,
            backbone_opt_after: after,
        });
        Ok(())
    }

    fn loss_terms(&self) -> Vec<(Target, f64)> {
        let st = &self.state;
        match self.cfg.mode {
            RunMode::LatentNoFreeze => {
                let nf = self.cfg.nofreeze.as_ref().expect("validated");
                let w = nf.weight_schedule.at(st.step, self.cfg.steps);
                let mut v = vec![(Target::Pixels, 1.0)];
                if w != 0.0 {
                    v.extend(nf.latent_layers.iter().map(|&l| (Target::Layer(l), w)));
                }
                v
            }
            _ if self.cfg.target.multi_target => {
                let mut v = vec![(Target::Pixels, 1.0)];
                v.extend(st.active_targets.iter().filter(|t| **t != Target::Pixels).map(|&t| (t, 1.0)));
                v
            }
            _ => vec![(*st.active_targets.last().expect("one active target"), 1.0)],
        }
    }

    fn cost_settings(&self, latent: bool) -> CostSettings {
        let keep = keep_count(self.cfg.model.n_tokens(), self.cfg.mask.mask_ratio);
        CostSettings {
            target_pass: if latent { TargetPass::Truncated } else { TargetPass::PixelOnly },
            ..CostSettings::new(self.cfg.data.batch_size, keep)
        }
    }

    /// One optimizer step; fires a freeze event first when the schedule
    /// asks for a longer frozen prefix.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let r = match self.cfg.mode {
            RunMode::Jepa => self.jepa_step(),
            _ => self.mae_step(),
        };
        r.map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence { step, loss: f64::NAN },
            e => e,
        })
    }

    fn mae_step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let k = self.cfg.effective_schedule().frozen(step);
        if k != self.state.frozen_prefix {
            self.freeze_event(k)?;
        }
        let terms = self.loss_terms();
        for (t, _) in &terms {
            self.backbone.ensure_head(&mut self.state.params, *t);
        }
        let heads: BTreeSet<String> = terms.iter().map(|(t, _)| t.head_prefix()).collect();
        let lr = effective_lr(step, self.state.last_switch_step, &self.cfg.optim);
        let wd = weight_decay_at(step, &self.cfg.optim);
        let clips = self.batch(step)?;
        let n = self.cfg.model.n_tokens();
        let bsz = clips.len() as f64;
        let frac = self.cfg.target.loss_patch_fraction;
        let allow_unfrozen = self.cfg.mode == RunMode::LatentNoFreeze;

        let mut loss_sum = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for clip in &clips {
            let tokens = patchify(&clip.frames, self.cfg.model.patch_size)?.tokens;
            let keep = random_mask(n, self.cfg.mask.mask_ratio, &mut self.state.rng)?;
            let mut loss_terms = Vec::with_capacity(terms.len());
            for &(target, weight) in &terms {
                let rows = match target {
                    Target::Layer(_) if frac < 1.0 => Some(subsample_latent_patches(n, frac, &mut self.state.rng)?),
                    _ => None,
                };
                loss_terms.push(LossTerm { target, weight, rows });
            }
            let spec = ObjectiveSpec {
                freeze_layer: k,
                terms: &loss_terms,
                path: TargetPath::Detached,
                allow_unfrozen_targets: allow_unfrozen,
            };
            let trainable = |name: &str| is_trainable(name, k, &heads);
            let obj = clip_objective(&self.backbone, &self.state.params, &trainable, &tokens, &keep, &spec)?;
            loss_sum += obj.loss;
            accumulate(&mut grads, obj.grads, 1.0 / bsz);
        }
        let loss = loss_sum / bsz;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        adamw_update(&mut self.state.params, &grads, &mut self.state.opt, lr, wd, &self.cfg.optim)?;
        self.state.step += 1;

        let active: Vec<Target> = terms.iter().map(|(t, _)| *t).collect();
        let latent = active.iter().any(|t| *t != Target::Pixels);
        let cost = step_cost(&self.cfg.model, k, &active, &self.cost_settings(latent));
        let mut extras = BTreeMap::new();
        if self.cfg.mode == RunMode::LatentNoFreeze {
            let nf = self.cfg.nofreeze.as_ref().expect("validated");
            extras.insert("latent_weight".to_string(), nf.weight_schedule.at(step, self.cfg.steps));
        }
        Ok(StepRecord {
            step,
            loss,
            lr,
            frozen_prefix: k,
            target: active.last().expect("terms").to_string(),
            flops_step: cost.total,
            extras,
        })
    }

    /// Runs until `state.step == until`, handing every record to `sink`.
    pub fn run_until(&mut self, until: u64, mut sink: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while self.state.step < until {
            let rec = self.train_step()?;
            sink(&rec)?;
        }
        Ok(())
    }

    /// Output of encoder block `layer` on the full grid of each clip.
    pub fn features(&self, clips: &[VideoClip], layer: usize) -> Result<Vec<Tensor>> {
        if layer == 0 || layer > self.cfg.model.encoder_depth() {
            return Err(Error::Range(format!("feature layer {layer} outside 1..={}", self.cfg.model.encoder_depth())));
        }
        clips
            .iter()
            .map(|c| {
                let tokens = patchify(&c.frames, self.cfg.model.patch_size)?.tokens;
                let mut outs = self.backbone.layer_outputs(&self.state.params, &tokens, layer)?;
                Ok(outs.pop().expect("layer >= 1"))
            })
            .collect()
    }
}

pub(crate) fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, scale: f64) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += scale * y),
            None => {
                acc.insert(name, g.map(|v| v * scale));
            }
        }
    }
}

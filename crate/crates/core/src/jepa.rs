//! Latent prediction against an EMA teacher, with a separate predictor
//! transformer and multiblock masking. Freezing applies to the student
//! encoder only.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::autodiff::Graph;
use crate::engine::{accumulate, is_backbone_param, is_trainable, Trainer};
use crate::error::{Error, Result};
use crate::masking::multiblock_mask;
use crate::metrics::StepRecord;
use crate::model::{block_forward, block_prefix, init_block, Backbone, ModelConfig};
use crate::optim::{adamw_update, effective_lr, weight_decay_at};
use crate::params::{BindMode, Binder, ParamStore};
use crate::patch::patchify;
use crate::rope::grid_positions;
use crate::tensor::Tensor;

/// Predictor transformer; parameters live under `pred.`.
#[derive(Clone, Debug)]
pub struct Predictor {
    cfg: ModelConfig,
    n_tokens: usize,
}

impl Predictor {
    pub fn new(student: &ModelConfig, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("jepa.decoder_depth", "must be positive"));
        }
        let cfg = ModelConfig { depth, decoder_blocks: 0, rope: None, learned_pos: true, ..student.clone() };
        Ok(Self { n_tokens: student.n_tokens(), cfg })
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.cfg.d_model;
        store.insert("pred.mask_token", Tensor::randn(&[1, d], 0.02, rng));
        store.insert("pred.pos_embed", Tensor::randn(&[self.n_tokens, d], 0.02, rng));
        for i in 0..self.cfg.depth {
            init_block(store, &format!("pred.{}", block_prefix(i)), d, self.cfg.mlp_hidden(), rng);
        }
    }

    /// Predictions (one row per masked token) from the context embeddings.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        context: crate::autodiff::Var,
        context_idx: &[usize],
        masked_idx: &[usize],
    ) -> Result<crate::autodiff::Var> {
        let pe = b.var(g, "pred.pos_embed")?;
        let mt = b.var(g, "pred.mask_token")?;
        let m = masked_idx.len();
        let mask_rows = g.gather_rows(mt, &vec![0; m])?;
        let mask_pe = g.gather_rows(pe, masked_idx)?;
        let queries = g.add(mask_rows, mask_pe)?;
        let ctx_pe = g.gather_rows(pe, context_idx)?;
        let ctx = g.add(context, ctx_pe)?;
        let mut x = g.concat_rows(&[queries, ctx])?;
        for i in 0..self.cfg.depth {
            x = block_forward(g, b, &self.cfg, &format!("pred.{}", block_prefix(i)), x, None, BindMode::Auto)?;
        }
        g.slice_rows(x, 0, m)
    }
}

/// Teacher initialized as a copy of the student's encoder parameters.
pub fn teacher_from(student: &ParamStore) -> ParamStore {
    let mut t = ParamStore::new();
    for (n, v) in student.iter().filter(|(n, _)| is_backbone_param(n)) {
        t.insert(n.clone(), v.clone());
    }
    t
}

/// `θ_T ← m·θ_T + (1-m)·θ_S` for every teacher parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        if s.shape() != t.shape() {
            return Err(Error::shape("ema_update", format!("{name}: {:?} vs {:?}", t.shape(), s.shape())));
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Teacher `h_k` rows at `rows` from a full-grid forward through layer `k`.
pub fn jepa_targets(bb: &Backbone, teacher: &ParamStore, full_tokens: &Tensor, k: usize, rows: &[usize]) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Contract("latent prediction needs a target layer >= 1".into()));
    }
    let mut outs = bb.layer_outputs(teacher, full_tokens, k)?;
    outs.pop().expect("k >= 1").gather_rows(rows)
}

/// Splits a multiblock mask into (context, masked) rows, keeping at least
/// one row on each side.
pub fn split_mask(masked: &[bool], rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut ctx: Vec<usize> = (0..masked.len()).filter(|&i| !masked[i]).collect();
    let mut tgt: Vec<usize> = (0..masked.len()).filter(|&i| masked[i]).collect();
    if ctx.is_empty() {
        let i = rng.random_range(0..tgt.len());
        ctx.push(tgt.remove(i));
    } else if tgt.is_empty() {
        let i = rng.random_range(0..ctx.len());
        tgt.push(ctx.remove(i));
    }
    (ctx, tgt)
}

/// Sup-norm distance between teacher and student encoder parameters.
pub fn teacher_distance(teacher: &ParamStore, student: &ParamStore) -> Result<f64> {
    let mut d: f64 = 0.0;
    for (n, t) in teacher.iter() {
        d = d.max(t.max_abs_diff(student.get(n)?));
    }
    Ok(d)
}

impl Trainer {
    pub(crate) fn jepa_step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let k = self.cfg().effective_schedule().frozen(step);
        if k != self.state.frozen_prefix {
            self.freeze_event(k)?;
        }
        let target = self.target_for(k);
        self.backbone.ensure_head(&mut self.state.params, target);
        let heads: BTreeSet<String> = [target.head_prefix()].into();
        let cfg = self.cfg().clone();
        let jc = cfg.jepa.as_ref().expect("validated");
        let lr = effective_lr(step, self.state.last_switch_step, &cfg.optim);
        let wd = weight_decay_at(step, &cfg.optim);
        let clips = self.batch(step)?;
        let bsz = clips.len() as f64;
        let positions = grid_positions(cfg.model.grid());
        let predictor = self.predictor.clone().expect("jepa trainer has a predictor");
        let teacher = self.state.teacher.clone().expect("jepa trainer has a teacher");

        let mut loss_sum = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for clip in &clips {
            let tokens = patchify(&clip.frames, cfg.model.patch_size)?.tokens;
            let mask = multiblock_mask(cfg.model.grid(), &cfg.mask.multiblock, &mut self.state.rng)?;
            let (ctx_idx, tgt_idx) = split_mask(&mask, &mut self.state.rng);
            let targets = jepa_targets(self.backbone(), &teacher, &tokens, target.layer(), &tgt_idx)?;

            let trainable = |name: &str| is_trainable(name, k, &heads);
            let mut g = Graph::new();
            let mut b = Binder::new(&self.state.params, trainable);
            let ctx_pos: Vec<_> = ctx_idx.iter().map(|&i| positions[i]).collect();
            let ctx = g.constant(tokens.gather_rows(&ctx_idx)?)?;
            let (emb, _) = self.backbone().encode(&mut g, &mut b, ctx, &ctx_pos, k, false)?;
            let out = predictor.forward(&mut g, &mut b, emb, &ctx_idx, &tgt_idx)?;
            let pred = self.backbone().predict(&mut g, &mut b, out, target)?;
            let targ = g.constant(targets)?;
            let loss = g.mse(pred, targ)?;
            let gr = g.backward(loss)?;
            loss_sum += g.value(loss).item();
            accumulate(&mut grads, g.named_grads(&gr), 1.0 / bsz);
        }
        let loss = loss_sum / bsz;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        adamw_update(&mut self.state.params, &grads, &mut self.state.opt, lr, wd, &cfg.optim)?;
        let teacher = self.state.teacher.as_mut().expect("jepa trainer has a teacher");
        ema_update(teacher, &self.state.params, jc.ema_momentum)?;
        let dist = teacher_distance(teacher, &self.state.params)?;
        self.state.step += 1;

        let mut extras = BTreeMap::new();
        extras.insert("teacher_student_distance".to_string(), dist);
        Ok(StepRecord {
            step,
            loss,
            lr,
            frozen_prefix: k,
            target: target.to_string(),
            flops_step: 0.0,
            extras,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ema_degenerate_momenta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.insert("embed.w", Tensor::randn(&[3, 2], 1.0, &mut rng));
        let mut t = ParamStore::new();
        t.insert("embed.w", Tensor::randn(&[3, 2], 1.0, &mut rng));
        let t0 = t.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, t0);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.get("embed.w").unwrap(), s.get("embed.w").unwrap());
    }

    #[test]
    fn split_mask_keeps_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, t) = split_mask(&[true; 6], &mut rng);
        assert_eq!((c.len(), t.len()), (1, 5));
        let (c, t) = split_mask(&[false; 6], &mut rng);
        assert_eq!((c.len(), t.len()), (5, 1));
    }

    #[test]
    fn zero_layer_rejected() {
        let cfg = crate::config::preset("toy-jepa").unwrap().model;
        let bb = Backbone::new(cfg).unwrap();
        assert!(jepa_targets(&bb, &ParamStore::new(), &Tensor::zeros(&[32, 96]), 0, &[0]).is_err());
    }
}

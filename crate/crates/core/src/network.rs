//! Transformer encoder over unmasked tokens, decoder with mask tokens and
//! re-added positions, and the prediction head.

use std::collections::HashMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::engine::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::Curvature;
use crate::masking::{MaskPlan, Projection};

const LN_EPS: f64 = 1e-5;
const EMBED_INIT: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

pub struct EntryMut<'a> {
    pub name: &'a str,
    pub trainable: bool,
    pub value: &'a mut Tensor,
}

/// Named parameters in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Entries with mutable values; names and shapes must not change.
    pub fn entries_mut(&mut self) -> impl Iterator<Item = EntryMut<'_>> {
        self.entries.iter_mut().map(|e| EntryMut { name: &e.name, trainable: e.trainable, value: &mut e.value })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a value by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if self.entries[i].value.shape() != value.shape() {
            return shape_err(
                "param_set",
                format!("{name}: expected {:?}, got {:?}", self.entries[i].value.shape(), value.shape()),
            );
        }
        self.entries[i].value = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and bit patterns of every value.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Parameters placed on one graph on first use.
pub struct Binding<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    frozen: bool,
}

impl<'s> Binding<'s> {
    /// `frozen` makes every parameter a constant.
    pub fn new(store: &'s ParamStore, frozen: bool) -> Self {
        Binding { store, vars: vec![None; store.len()], frozen }
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let e = &self.store.entries[id.0];
        let v = g.leaf(e.value.clone(), e.trainable && !self.frozen)?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    /// Gradients per parameter after `backward`; `None` for parameters that
    /// were never used or received nothing.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.and_then(|v| g.grad(v).cloned())).collect()
    }
}

/// Where decoder positional indices come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecoderPositions {
    /// Frame index in the pooled sequence.
    #[default]
    OriginalFrame,
    /// Frame index within the half.
    WithinHalf,
}

impl FromStr for DecoderPositions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(DecoderPositions::OriginalFrame),
            "within-half" => Ok(DecoderPositions::WithinHalf),
            _ => Err(Error::Config(format!("unknown decoder_positions `{s}` (expected original or within-half)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Limb joints after pruning (J′).
    pub joints: usize,
    /// Input frames (L).
    pub frames: usize,
    pub pool_r: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub curvature: Curvature,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 18,
            frames: 72,
            pool_r: 3,
            embed_dim: 256,
            heads: 8,
            hidden: 1024,
            enc_layers: 8,
            dec_layers: 3,
            curvature: Curvature::default(),
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pool_r == 0 || self.frames % self.pool_r != 0 {
            return bad(format!("pool_r {} does not divide frames {}", self.pool_r, self.frames));
        }
        if (self.frames / self.pool_r) % 2 != 0 {
            return bad(format!("pooled frame count {} must be even", self.frames / self.pool_r));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("heads {} must divide embed_dim {}", self.heads, self.embed_dim));
        }
        if self.joints == 0 || self.hidden == 0 {
            return bad("joints and hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Pooled frames (L′).
    pub fn pooled_frames(&self) -> usize {
        self.frames / self.pool_r
    }
}

#[derive(Clone, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
    ln2: (ParamId, ParamId),
    ff1: LinearIds,
    ff2: LinearIds,
}

#[derive(Clone, Debug)]
struct ModelIds {
    pool: LinearIds,
    pos_s: ParamId,
    pos_t: ParamId,
    enc: Vec<BlockIds>,
    enc_ln: (ParamId, ParamId),
    mask_token: ParamId,
    dec: Vec<BlockIds>,
    dec_ln: (ParamId, ParamId),
    head: LinearIds,
    psi: LinearIds,
    phi: LinearIds,
}

/// All learnable state plus the fixed criterion projections.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    ids: ModelIds,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    /// `W [fan_in × out]`, fan-in scaled uniform; zero bias `[1 × out]`.
    fn linear(&mut self, name: &str, fan_in: usize, out: usize, trainable: bool) -> LinearIds {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.store.add(&format!("{name}.w"), uniform(self.rng, &[fan_in, out], bound), trainable);
        let b = self.store.add(&format!("{name}.b"), Tensor::zeros(&[1, out]), trainable);
        LinearIds { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        let g = self.store.add(&format!("{name}.g"), Tensor::full(&[c], 1.0), true);
        let b = self.store.add(&format!("{name}.b"), Tensor::zeros(&[c]), true);
        (g, b)
    }

    fn block(&mut self, name: &str, c: usize, hidden: usize) -> BlockIds {
        BlockIds {
            ln1: self.norm(&format!("{name}.ln1"), c),
            q: self.linear(&format!("{name}.attn.q"), c, c, true),
            k: self.linear(&format!("{name}.attn.k"), c, c, true),
            v: self.linear(&format!("{name}.attn.v"), c, c, true),
            o: self.linear(&format!("{name}.attn.o"), c, c, true),
            ln2: self.norm(&format!("{name}.ln2"), c),
            ff1: self.linear(&format!("{name}.ffn.1"), c, hidden, true),
            ff2: self.linear(&format!("{name}.ffn.2"), hidden, c, true),
        }
    }
}

/// Per-forward dropout state; inactive when the rate is zero or no RNG is
/// given.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout { rate, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let (rate, Some(rng)) = (self.rate, self.rng.as_mut()) else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let m = g.constant(Tensor::new(shape, mask)?)?;
        g.mul(x, m)
    }
}

impl Model {
    /// Freshly initialized model, deterministic in `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let (c, r) = (cfg.embed_dim, cfg.pool_r);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        // pooling kernel stored as [C′ × 3r] (tap-major)
        let pool_bound = 1.0 / ((3 * r) as f64).sqrt();
        let pool_w = b.store.add("pool.w", uniform(b.rng, &[c, 3 * r], pool_bound), true);
        let pool_b = b.store.add("pool.b", Tensor::zeros(&[c]), true);
        let pos_s = b.store.add("pos.spatial", uniform(b.rng, &[1, cfg.joints, c], EMBED_INIT), true);
        let pos_t = b.store.add("pos.temporal", uniform(b.rng, &[cfg.pooled_frames(), 1, c], EMBED_INIT), true);
        let enc = (0..cfg.enc_layers).map(|i| b.block(&format!("enc.{i}"), c, cfg.hidden)).collect();
        let enc_ln = b.norm("enc.ln", c);
        let mask_token = b.store.add("mask_token", uniform(b.rng, &[1, c], EMBED_INIT), true);
        let dec = (0..cfg.dec_layers).map(|i| b.block(&format!("dec.{i}"), c, cfg.hidden)).collect();
        let dec_ln = b.norm("dec.ln", c);
        let head = b.linear("head", c, 3 * r, true);
        let psi = b.linear("gcm.psi", c, c, false);
        let phi = b.linear("gcm.phi", c, c, false);
        let ids = ModelIds {
            pool: LinearIds { w: pool_w, b: pool_b },
            pos_s,
            pos_t,
            enc,
            enc_ln,
            mask_token,
            dec,
            dec_ln,
            head,
            psi,
            phi,
        };
        Ok(Model { cfg, store, ids })
    }

    pub fn pool_ids(&self) -> (ParamId, ParamId) {
        (self.ids.pool.w, self.ids.pool.b)
    }

    pub fn positional_ids(&self) -> (ParamId, ParamId) {
        (self.ids.pos_s, self.ids.pos_t)
    }

    pub fn mask_token_id(&self) -> ParamId {
        self.ids.mask_token
    }

    /// Fixed projections used by the attention-based temporal criterion.
    pub fn criterion_projections(&self) -> (Projection, Projection) {
        let proj = |ids: &LinearIds| {
            let b = self.store.get(ids.b);
            Projection {
                weight: self.store.get(ids.w).clone(),
                bias: b.clone().reshaped(vec![b.numel()]).expect("bias"),
            }
        };
        (proj(&self.ids.psi), proj(&self.ids.phi))
    }
}

fn linear(g: &mut Graph, bind: &mut Binding, x: Var, ids: &LinearIds) -> Result<Var> {
    let w = bind.var(g, ids.w)?;
    let b = bind.var(g, ids.b)?;
    g.linear(x, w, b)
}

fn norm(g: &mut Graph, bind: &mut Binding, x: Var, ids: (ParamId, ParamId)) -> Result<Var> {
    let gamma = bind.var(g, ids.0)?;
    let beta = bind.var(g, ids.1)?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

fn attention(g: &mut Graph, bind: &mut Binding, x: Var, ids: &BlockIds, heads: usize) -> Result<Var> {
    let q = linear(g, bind, x, &ids.q)?;
    let k = linear(g, bind, x, &ids.k)?;
    let v = linear(g, bind, x, &ids.v)?;
    let cat = g.attention(q, k, v, heads)?;
    linear(g, bind, cat, &ids.o)
}

/// Pre-norm block: `x + MSA(LN(x))`, then `h + FFN(LN(h))`.
fn block(g: &mut Graph, bind: &mut Binding, x: Var, ids: &BlockIds, heads: usize, drop: &mut Dropout) -> Result<Var> {
    let n1 = norm(g, bind, x, ids.ln1)?;
    let a = attention(g, bind, n1, ids, heads)?;
    let a = drop.apply(g, a)?;
    let h = g.add(x, a)?;
    let n2 = norm(g, bind, h, ids.ln2)?;
    let f = linear(g, bind, n2, &ids.ff1)?;
    let f = g.gelu(f)?;
    let f = linear(g, bind, f, &ids.ff2)?;
    let f = drop.apply(g, f)?;
    g.add(h, f)
}

fn check_tokens(g: &Graph, x: Var, c: usize, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != c || s[0] == 0 {
        return shape_err(op, format!("expected [n × {c}] with n ≥ 1, got {s:?}"));
    }
    Ok(())
}

/// Encoder blocks and final layer norm over `[n × C′]` tokens.
pub fn encoder_forward(g: &mut Graph, bind: &mut Binding, model: &Model, x: Var, drop: &mut Dropout) -> Result<Var> {
    check_tokens(g, x, model.cfg.embed_dim, "encoder_forward")?;
    let mut h = x;
    for ids in &model.ids.enc {
        h = block(g, bind, h, ids, model.cfg.heads, drop)?;
    }
    norm(g, bind, h, model.ids.enc_ln)
}

/// `[2l × C′]` grid of mask tokens with the encoded rows scattered to
/// their canonical positions.
pub fn insert_mask_tokens(g: &mut Graph, bind: &mut Binding, model: &Model, encoded: Var, plan: &MaskPlan) -> Result<Var> {
    let c = model.cfg.embed_dim;
    check_tokens(g, encoded, c, "insert_mask_tokens")?;
    if g.shape(encoded)[0] != plan.idx_umask.len() {
        return shape_err(
            "insert_mask_tokens",
            format!("{} encoded rows for {} unmasked indices", g.shape(encoded)[0], plan.idx_umask.len()),
        );
    }
    let token = bind.var(g, model.ids.mask_token)?;
    let zeros = g.constant(Tensor::zeros(&[2 * plan.l, c]))?;
    let base = g.broadcast_add(zeros, token)?;
    g.scatter_rows(base, encoded, &plan.idx_umask)
}

/// Positional rows `(temporal, spatial)` for each canonical token.
pub fn decoder_position_rows(plan: &MaskPlan, mode: DecoderPositions) -> (Vec<usize>, Vec<usize>) {
    (0..2 * plan.l)
        .map(|q| {
            let (frame, joint) = plan.token_position(q);
            let t = match mode {
                DecoderPositions::OriginalFrame => frame,
                DecoderPositions::WithinHalf => (q % plan.l) / plan.joints,
            };
            (t, joint)
        })
        .unzip()
}

/// Adds positions to the canonical token grid, then decoder blocks and the
/// final layer norm.
pub fn decoder_forward(
    g: &mut Graph,
    bind: &mut Binding,
    model: &Model,
    ed: Var,
    plan: &MaskPlan,
    mode: DecoderPositions,
    drop: &mut Dropout,
) -> Result<Var> {
    let c = model.cfg.embed_dim;
    check_tokens(g, ed, c, "decoder_forward")?;
    if g.shape(ed)[0] != 2 * plan.l {
        return shape_err("decoder_forward", format!("expected {} tokens, got {}", 2 * plan.l, g.shape(ed)[0]));
    }
    let (t_rows, s_rows) = decoder_position_rows(plan, mode);
    let ps = bind.var(g, model.ids.pos_s)?;
    let pt = bind.var(g, model.ids.pos_t)?;
    let ps = g.reshape(ps, &[model.cfg.joints, c])?;
    let pt = g.reshape(pt, &[model.cfg.pooled_frames(), c])?;
    let ps = g.gather_rows(ps, &s_rows)?;
    let pt = g.gather_rows(pt, &t_rows)?;
    let h = g.add(ed, pt)?;
    let mut h = g.add(h, ps)?;
    for ids in &model.ids.dec {
        h = block(g, bind, h, ids, model.cfg.heads, drop)?;
    }
    norm(g, bind, h, model.ids.dec_ln)
}

/// Affine head `C′ → 3r` per token.
pub fn predict(g: &mut Graph, bind: &mut Binding, model: &Model, d: Var) -> Result<Var> {
    check_tokens(g, d, model.cfg.embed_dim, "predict")?;
    linear(g, bind, d, &model.ids.head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            joints: 3,
            frames: 8,
            pool_r: 2,
            embed_dim: 8,
            heads: 2,
            hidden: 16,
            enc_layers: 1,
            dec_layers: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_named() {
        let a = Model::new(tiny(), 3).unwrap();
        let b = Model::new(tiny(), 3).unwrap();
        assert_eq!(a.store.checksum(), b.store.checksum());
        assert_ne!(a.store.checksum(), Model::new(tiny(), 4).unwrap().store.checksum());
        assert_eq!(a.store.by_name("head.w").unwrap().shape(), &[8, 6]);
        assert!(!a.store.entries()[a.store.id("gcm.psi.w").unwrap().0].trainable);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { frames: 7, ..tiny() }.validate().is_err());
        assert!(ModelConfig { frames: 6, ..tiny() }.validate().is_err());
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn encoder_keeps_shape() {
        let model = Model::new(tiny(), 0).unwrap();
        for n in [2, 10, 44] {
            let mut g = Graph::new();
            let mut bind = Binding::new(&model.store, true);
            let x = g.constant(Tensor::full(&[n, 8], 0.1)).unwrap();
            let y = encoder_forward(&mut g, &mut bind, &model, x, &mut Dropout::off()).unwrap();
            assert_eq!(g.shape(y), &[n, 8]);
        }
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[50, 4], 1.0)).unwrap();
        let mut d = Dropout::new(0.5, 1);
        let y = d.apply(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let mut off = Dropout::off();
        assert_eq!(off.apply(&mut g, x).unwrap(), x);
    }

    #[test]
    fn position_rows_follow_mode() {
        let plan = MaskPlan::new(6, 3, vec![0], vec![5], 0.9, 0).unwrap();
        let (t, s) = decoder_position_rows(&plan, DecoderPositions::OriginalFrame);
        assert_eq!(t, vec![1, 1, 1, 3, 3, 3, 0, 0, 0, 2, 2, 2]);
        assert_eq!(s, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2]);
        let (t, _) = decoder_position_rows(&plan, DecoderPositions::WithinHalf);
        assert_eq!(t, vec![0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1]);
    }
}

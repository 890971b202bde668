//! One sample through refine → ball map → cross mask → encoder → decoder,
//! and batch losses with gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, ContrastMode, LossReport, MotionTarget, ReconNorm};
use crate::masking::{self, MaskConfig, MaskInputs, MaskOutcome, MaskPlan};
use crate::network::{self, Binding, DecoderPositions, Dropout, Model};
use crate::refine::{self, TokenGrid};
use crate::skeleton::SkeletonSequence;

/// Pipeline settings outside the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub torso: Vec<usize>,
    pub mask: MaskConfig,
    pub mu: f64,
    pub contrast: ContrastMode,
    pub recon_norm: ReconNorm,
    pub decoder_positions: DecoderPositions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            torso: crate::skeleton::BODY25_TORSO.to_vec(),
            mask: MaskConfig::default(),
            mu: 1.0,
            contrast: ContrastMode::AsWritten,
            recon_norm: ReconNorm::Masked,
            decoder_positions: DecoderPositions::OriginalFrame,
        }
    }
}

/// Per-sample randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSeeds {
    pub mask: u64,
    pub dropout: u64,
}

/// Mixes indices into a seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Where the unmask sets come from.
#[derive(Clone, Copy, Debug)]
pub enum PlanSource<'a> {
    /// Compute criteria and sample with the given seed.
    Sample,
    /// Reuse a plan already drawn for this sample.
    Fixed(&'a MaskOutcome),
}

/// Graph handles and bookkeeping for one sample.
pub struct SampleForward {
    pub outcome: MaskOutcome,
    pub encoded: Var,
    /// `(odd, even, complete)` pooled encoder outputs, each `[1 × C′]`.
    pub pooled: [Var; 3],
    pub decoded: Option<Decoded>,
}

pub struct Decoded {
    pub pred: Var,
    pub target: MotionTarget,
    pub l_r: Var,
}

/// Refinement outputs of one sample.
pub struct Refined {
    /// Ball tokens flattened frame-major, `[L′·J′ × C′]`.
    pub ball_flat: Var,
    pub ball: TokenGrid,
    pub euclid: TokenGrid,
    pub root: TokenGrid,
    pub pruned: SkeletonSequence,
}

pub fn refine_sample(g: &mut Graph, bind: &mut Binding, model: &Model, torso: &[usize], seq: &SkeletonSequence) -> Result<Refined> {
    let cfg = &model.cfg;
    if seq.frames() != cfg.frames {
        return Err(Error::Invalid(format!("sequence has {} frames, model expects {}", seq.frames(), cfg.frames)));
    }
    let (pruned, torso_seq) = refine::spatial_prune(seq, torso)?;
    if pruned.joints() != cfg.joints {
        return Err(Error::Invalid(format!("{} limb joints after pruning, model expects {}", pruned.joints(), cfg.joints)));
    }
    let (pw, pb) = model.pool_ids();
    let (w, b) = (bind.var(g, pw)?, bind.var(g, pb)?);
    let x = g.constant(refine::sequence_tensor(&pruned))?;
    let t = g.constant(refine::sequence_tensor(&torso_seq))?;
    let ee = refine::temporal_pool(g, x, w, b, cfg.pool_r)?;
    let root_e = refine::root_features(g, t, w, b, cfg.pool_r)?;
    let (ps, pt) = model.positional_ids();
    let (ps, pt) = (bind.var(g, ps)?, bind.var(g, pt)?);
    let e = refine::add_positional(g, ee, ps, pt)?;
    let ep = refine::map_to_ball(g, e, cfg.curvature)?;
    let root_p = refine::map_to_ball(g, root_e, cfg.curvature)?;
    let lp = cfg.pooled_frames();
    let ball_flat = g.reshape(ep, &[lp * cfg.joints, cfg.embed_dim])?;
    Ok(Refined {
        ball_flat,
        ball: TokenGrid::from_tensor(g.value(ep), cfg.pool_r)?,
        euclid: TokenGrid::from_tensor(g.value(e), cfg.pool_r)?,
        root: TokenGrid::from_tensor(g.value(root_p), cfg.pool_r)?,
        pruned,
    })
}

/// Criteria and unmask sets for a refined sample.
pub fn plan_for(model: &Model, pcfg: &PipelineConfig, refined: &Refined, mask_seed: u64) -> Result<MaskOutcome> {
    let (psi, phi) = model.criterion_projections();
    let inputs = MaskInputs {
        ball: &refined.ball,
        euclid: &refined.euclid,
        root: &refined.root,
        pruned: &refined.pruned,
        r: model.cfg.pool_r,
        curvature: model.cfg.curvature,
        psi: &psi,
        phi: &phi,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    masking::plan_masks(&pcfg.mask, &inputs, &mut rng, mask_seed)
}

/// Runs one sample. With `decode` false the graph stops after pooling.
#[allow(clippy::too_many_arguments)]
pub fn forward_sample(
    g: &mut Graph,
    bind: &mut Binding,
    model: &Model,
    pcfg: &PipelineConfig,
    seq: &SkeletonSequence,
    seeds: SampleSeeds,
    plan: PlanSource,
    decode: bool,
) -> Result<SampleForward> {
    let refined = refine_sample(g, bind, model, &pcfg.torso, seq)?;
    let outcome = match plan {
        PlanSource::Sample => plan_for(model, pcfg, &refined, seeds.mask)?,
        PlanSource::Fixed(o) => o.clone(),
    };
    let p: &MaskPlan = &outcome.plan;
    let mut drop = if model.cfg.dropout > 0.0 { Dropout::new(model.cfg.dropout, seeds.dropout) } else { Dropout::off() };
    let e_um = g.gather_rows(refined.ball_flat, &p.unmasked_rows())?;
    let encoded = network::encoder_forward(g, bind, model, e_um, &mut drop)?;
    let pooled = losses::pooled_features(g, encoded, p)?;
    let decoded = if decode {
        let ed = network::insert_mask_tokens(g, bind, model, encoded, p)?;
        let dd = network::decoder_forward(g, bind, model, ed, p, pcfg.decoder_positions, &mut drop)?;
        let pred = network::predict(g, bind, model, dd)?;
        let target = losses::motion_target(&refined.pruned, model.cfg.pool_r, model.cfg.curvature)?;
        let l_r = losses::recon_loss(g, pred, &target, p, pcfg.recon_norm)?;
        Some(Decoded { pred, target, l_r })
    } else {
        None
    };
    Ok(SampleForward { outcome, encoded, pooled, decoded })
}

/// Batch losses on one graph: `(total, mean L_r, L_c²)`, plus per-sample
/// forwards.
pub fn batch_loss(
    g: &mut Graph,
    bind: &mut Binding,
    model: &Model,
    pcfg: &PipelineConfig,
    seqs: &[SkeletonSequence],
    seeds: &[SampleSeeds],
) -> Result<(Var, Var, Var, Vec<SampleForward>)> {
    if seqs.len() < 2 || seqs.len() != seeds.len() {
        return Err(Error::Invalid(format!("batch of {} sequences with {} seeds; need at least 2", seqs.len(), seeds.len())));
    }
    let mut fwd = Vec::with_capacity(seqs.len());
    for (s, &sd) in seqs.iter().zip(seeds) {
        fwd.push(forward_sample(g, bind, model, pcfg, s, sd, PlanSource::Sample, true)?);
    }
    let stack = |g: &mut Graph, k: usize| g.concat(&fwd.iter().map(|f| f.pooled[k]).collect::<Vec<_>>(), 0);
    let (o, e, c) = (stack(g, 0)?, stack(g, 1)?, stack(g, 2)?);
    let l_c2 = losses::cross_contrast_loss(g, o, e, c, pcfg.contrast)?;
    let lrs: Vec<Var> = fwd.iter().map(|f| f.decoded.as_ref().expect("decoded").l_r).collect();
    let mut sum = lrs[0];
    for &v in &lrs[1..] {
        sum = g.add(sum, v)?;
    }
    let l_r = g.scale(sum, 1.0 / seqs.len() as f64)?;
    let weighted = g.scale(l_c2, pcfg.mu)?;
    let total = g.add(l_r, weighted)?;
    Ok((total, l_r, l_c2, fwd))
}

/// Loss values and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub report: LossReport,
    /// Per parameter in store order; `None` where no gradient flowed.
    pub grads: Vec<Option<Tensor>>,
    pub plans: Vec<MaskPlan>,
}

fn add_into(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (slot, gr) in acc.iter_mut().zip(grads) {
        let Some(gr) = gr else { continue };
        match slot {
            Some(t) => t.data_mut().iter_mut().zip(gr.data()).for_each(|(a, b)| *a += b),
            None => *slot = Some(gr),
        }
    }
}

/// Gradients of `mean L_r + μ·L_c²` with one graph alive at a time.
///
/// The contrast term couples samples only through the pooled encoder
/// outputs. A first pass computes them without gradients and
/// differentiates `L_c²` with respect to them; the second pass then
/// backpropagates `L_r/N + μ·⟨pooled, ∂L_c²/∂pooled⟩` per sample.
pub fn batch_gradients(model: &Model, pcfg: &PipelineConfig, seqs: &[SkeletonSequence], seeds: &[SampleSeeds]) -> Result<BatchGradients> {
    let n = seqs.len();
    if n < 2 || n != seeds.len() {
        return Err(Error::Invalid(format!("batch of {n} sequences with {} seeds; need at least 2", seeds.len())));
    }
    losses::total_loss(0.0, 0.0, pcfg.mu)?;
    let c = model.cfg.embed_dim;
    // pass 1: pooled features and plans
    let mut outcomes = Vec::with_capacity(n);
    let mut pooled = [vec![0.0; n * c], vec![0.0; n * c], vec![0.0; n * c]];
    for (i, (s, &sd)) in seqs.iter().zip(seeds).enumerate() {
        let mut g = Graph::new();
        let mut bind = Binding::new(&model.store, true);
        let f = forward_sample(&mut g, &mut bind, model, pcfg, s, sd, PlanSource::Sample, false)?;
        for k in 0..3 {
            pooled[k][i * c..(i + 1) * c].copy_from_slice(g.value(f.pooled[k]).data());
        }
        outcomes.push(f.outcome);
    }
    let mut cg = Graph::new();
    let leaves: Vec<Var> = pooled
        .iter()
        .map(|p| cg.param(Tensor::new(vec![n, c], p.clone())?))
        .collect::<Result<_>>()?;
    let l_c2 = losses::cross_contrast_loss(&mut cg, leaves[0], leaves[1], leaves[2], pcfg.contrast)?;
    let l_c2_value = cg.value(l_c2).item()?;
    cg.backward(l_c2)?;
    let seeds_grad: Vec<Tensor> = leaves.iter().map(|&v| cg.grad_or_zeros(v)).collect();

    // pass 2: per-sample surrogate
    let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
    let mut l_r_sum = 0.0;
    for (i, (s, &sd)) in seqs.iter().zip(seeds).enumerate() {
        let mut g = Graph::new();
        let mut bind = Binding::new(&model.store, false);
        let f = forward_sample(&mut g, &mut bind, model, pcfg, s, sd, PlanSource::Fixed(&outcomes[i]), true)?;
        let l_r = f.decoded.as_ref().expect("decoded").l_r;
        l_r_sum += g.value(l_r).item()?;
        let mut surrogate = g.scale(l_r, 1.0 / n as f64)?;
        if pcfg.mu > 0.0 {
            for k in 0..3 {
                let row = seeds_grad[k].data()[i * c..(i + 1) * c].iter().map(|v| v * pcfg.mu).collect();
                let w = g.constant(Tensor::new(vec![1, c], row)?)?;
                let prod = g.mul(f.pooled[k], w)?;
                let dot = g.sum(prod)?;
                surrogate = g.add(surrogate, dot)?;
            }
        }
        g.backward(surrogate)?;
        add_into(&mut acc, bind.grads(&g));
    }
    let grad_norm = acc.iter().flatten().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    let mut report = losses::total_loss(l_r_sum / n as f64, l_c2_value, pcfg.mu)?;
    report.grad_norm = grad_norm;
    Ok(BatchGradients { report, grads: acc, plans: outcomes.into_iter().map(|o| o.plan).collect() })
}

/// Frozen encoder over every token of a sequence, mean-pooled to `[C′]`.
pub fn encode_full(model: &Model, torso: &[usize], seq: &SkeletonSequence) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut bind = Binding::new(&model.store, true);
    let refined = refine_sample(&mut g, &mut bind, model, torso, seq)?;
    let enc = network::encoder_forward(&mut g, &mut bind, model, refined.ball_flat, &mut Dropout::off())?;
    let pooled = g.mean_axis(enc, 0)?;
    Ok(g.value(pooled).data().to_vec())
}

//! Motion targets, masked reconstruction loss, cross-contrast loss and the
//! AdamW optimizer.

use std::str::FromStr;

use crate::engine::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{self, Curvature};
use crate::masking::MaskPlan;
use crate::skeleton::SkeletonSequence;

/// Ball-mapped stacked frame differences in canonical token order,
/// `[2l × 3r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTarget {
    pub values: Tensor,
    pub ball_mapped: bool,
}

/// First differences of `x` (last frame zero), `r` consecutive frames
/// stacked per token, reordered odd half then even half, each row mapped
/// into the ball.
pub fn motion_target(x: &SkeletonSequence, r: usize, c: Curvature) -> Result<MotionTarget> {
    let raw = stacked_differences(x, r)?;
    let (frames, joints) = (x.frames() / r, x.joints());
    if frames % 2 != 0 {
        return Err(Error::Invalid(format!("pooled frame count {frames} must be even")));
    }
    let w = 3 * r;
    let order = (1..frames).step_by(2).chain((0..frames).step_by(2));
    let mut values = Vec::with_capacity(frames * joints * w);
    for f in order {
        for j in 0..joints {
            let o = (f * joints + j) * w;
            let mut row = raw[o..o + w].to_vec();
            geometry::map_to_ball_raw(&mut row, c.kappa());
            values.extend_from_slice(&row);
        }
    }
    Ok(MotionTarget { values: Tensor::new(vec![frames * joints, w], values)?, ball_mapped: true })
}

/// `[L/r × J × 3r]` frame-major stacked differences, before reordering.
pub fn stacked_differences(x: &SkeletonSequence, r: usize) -> Result<Vec<f64>> {
    let (nl, nj) = (x.frames(), x.joints());
    if r == 0 || nl % r != 0 {
        return Err(Error::Invalid(format!("pooling factor {r} does not divide {nl} frames")));
    }
    let w = 3 * r;
    let mut out = vec![0.0; nl * nj * 3];
    for f in 0..nl / r {
        for j in 0..nj {
            for t in 0..r {
                let frame = f * r + t;
                if frame + 1 >= nl {
                    continue;
                }
                let (a, b) = (x.joint(frame, j), x.joint(frame + 1, j));
                let o = (f * nj + j) * w + 3 * t;
                for d in 0..3 {
                    out[o + d] = b[d] - a[d];
                }
            }
        }
    }
    Ok(out)
}

/// Denominator of the reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReconNorm {
    /// Number of masked tokens, `2(l − M)`.
    #[default]
    Masked,
    /// `2M`, the unmasked count.
    AsWritten,
}

impl FromStr for ReconNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(ReconNorm::Masked),
            "as-written" => Ok(ReconNorm::AsWritten),
            _ => Err(Error::Config(format!("unknown recon_norm `{s}` (expected masked or as-written)"))),
        }
    }
}

fn recon_denominator(plan: &MaskPlan, norm: ReconNorm) -> Result<f64> {
    let masked = 2 * (plan.l - plan.m);
    if masked == 0 {
        return Err(Error::Invalid("reconstruction loss needs at least one masked token".into()));
    }
    Ok(match norm {
        ReconNorm::Masked => masked as f64,
        ReconNorm::AsWritten => (2 * plan.m) as f64,
    })
}

/// Sum of squared errors over masked tokens divided by the configured
/// count. `pred` is `[2l × 3r]`.
pub fn recon_loss(g: &mut Graph, pred: Var, target: &MotionTarget, plan: &MaskPlan, norm: ReconNorm) -> Result<Var> {
    if g.shape(pred) != target.values.shape() || target.values.shape()[0] != 2 * plan.l {
        return shape_err(
            "recon_loss",
            format!("prediction {:?}, target {:?}, {} tokens", g.shape(pred), target.values.shape(), 2 * plan.l),
        );
    }
    let denom = recon_denominator(plan, norm)?;
    let masked = plan.masked();
    let p = g.gather_rows(pred, &masked)?;
    let t = g.constant(gather(&target.values, &masked))?;
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / denom)
}

/// Value-only counterpart of [`recon_loss`].
pub fn recon_loss_value(pred: &Tensor, target: &MotionTarget, plan: &MaskPlan, norm: ReconNorm) -> Result<f64> {
    if pred.shape() != target.values.shape() {
        return shape_err("recon_loss", format!("prediction {:?}, target {:?}", pred.shape(), target.values.shape()));
    }
    let denom = recon_denominator(plan, norm)?;
    let w = pred.shape()[1];
    let mut s = 0.0;
    for q in plan.masked() {
        for k in 0..w {
            let d = pred.data()[q * w + k] - target.values.data()[q * w + k];
            s += d * d;
        }
    }
    Ok(s / denom)
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
    }
    Tensor::new(vec![rows.len(), w], data).expect("rows")
}

/// Mean-pooled `(odd, even, complete)` encoder outputs, each `[1 × C′]`.
/// `encoded` holds the odd-half rows first.
pub fn pooled_features(g: &mut Graph, encoded: Var, plan: &MaskPlan) -> Result<[Var; 3]> {
    if g.shape(encoded).first() != Some(&(2 * plan.m)) {
        return shape_err("pooled_features", format!("expected {} rows, got {:?}", 2 * plan.m, g.shape(encoded)));
    }
    let odd = g.narrow(encoded, 0, 0, plan.m)?;
    let even = g.narrow(encoded, 0, plan.m, plan.m)?;
    Ok([g.mean_axis(odd, 0)?, g.mean_axis(even, 0)?, g.mean_axis(encoded, 0)?])
}

/// Third term of the cross-contrast loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ContrastMode {
    /// `E^e · E^eᵀ`.
    #[default]
    AsWritten,
    /// `E^o · E^eᵀ`.
    Corrected,
}

impl FromStr for ContrastMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" => Ok(ContrastMode::AsWritten),
            "corrected" => Ok(ContrastMode::Corrected),
            _ => Err(Error::Config(format!("unknown contrast_mode `{s}` (expected as-written or corrected)"))),
        }
    }
}

/// Guards the row normalization against an exactly zero pooled vector.
const NORM_FLOOR: f64 = 1e-12;

fn row_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.l2_norm(x)?;
    let n = g.add_scalar(n, NORM_FLOOR)?;
    g.div(x, n)
}

fn gram_term(g: &mut Graph, a: Var, b: Var, eye: Var) -> Result<Var> {
    let gram = g.matmul_nt(a, b)?;
    let d = g.sub(gram, eye)?;
    let sq = g.mul(d, d)?;
    g.sum(sq)
}

/// `‖Eᵒ·Eᶜᵀ − I‖² + ‖Eᵉ·Eᶜᵀ − I‖² + third term`, with rows L2-normalized.
/// Inputs are `[N × C′]` pooled matrices.
pub fn cross_contrast_loss(g: &mut Graph, odd: Var, even: Var, complete: Var, mode: ContrastMode) -> Result<Var> {
    let s = g.shape(odd).to_vec();
    if s.len() != 2 || g.shape(even) != s.as_slice() || g.shape(complete) != s.as_slice() {
        return shape_err(
            "cross_contrast_loss",
            format!("pooled shapes {:?}, {:?}, {:?}", s, g.shape(even), g.shape(complete)),
        );
    }
    let n = s[0];
    if n < 2 {
        return Err(Error::Invalid(format!("cross-contrast loss needs at least 2 samples, got {n}")));
    }
    let mut eye = vec![0.0; n * n];
    (0..n).for_each(|i| eye[i * n + i] = 1.0);
    let eye = g.constant(Tensor::new(vec![n, n], eye)?)?;
    let o = row_normalize(g, odd)?;
    let e = row_normalize(g, even)?;
    let c = row_normalize(g, complete)?;
    let t1 = gram_term(g, o, c, eye)?;
    let t2 = gram_term(g, e, c, eye)?;
    let t3 = match mode {
        ContrastMode::AsWritten => gram_term(g, e, e, eye)?,
        ContrastMode::Corrected => gram_term(g, o, e, eye)?,
    };
    let s = g.add(t1, t2)?;
    g.add(s, t3)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_r: f64,
    pub l_c2: f64,
    pub total: f64,
    pub mu: f64,
    pub grad_norm: f64,
}

/// `L_r + μ·L_c²`.
pub fn total_loss(l_r: f64, l_c2: f64, mu: f64) -> Result<LossReport> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::Invalid(format!("loss weight must be non-negative, got {mu}")));
    }
    Ok(LossReport { l_r, l_c2, total: l_r + mu * l_c2, mu, grad_norm: 0.0 })
}

/// Linear warmup from 0 to `peak`, then cosine decay to `end`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub end: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let p = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.end + (self.peak - self.end) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Moment estimates for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// One parameter slot for [`AdamW::step`].
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: Option<&'a [f64]>,
    pub decay: bool,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Bias-corrected moment update with decoupled weight decay. Slots
    /// without a gradient only decay. Every gradient is checked before
    /// anything changes.
    pub fn step(&mut self, slots: &mut [ParamSlot], lr: f64) -> Result<()> {
        if slots.len() != self.m.len() {
            return Err(Error::Invalid(format!("optimizer tracks {} parameters, got {}", self.m.len(), slots.len())));
        }
        for (i, s) in slots.iter().enumerate() {
            if s.value.len() != self.m[i].len() || s.grad.is_some_and(|g| g.len() != s.value.len()) {
                return shape_err("optimizer_step", format!("parameter {} changed size", s.name));
            }
            if s.grad.is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteGrad(s.name.to_string()));
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        for (i, s) in slots.iter_mut().enumerate() {
            let decay = if s.decay { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..s.value.len() {
                let gk = s.grad.map_or(0.0, |g| g[k]);
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                s.value[k] -= lr * (update + decay * s.value[k]);
            }
        }
        Ok(())
    }
}

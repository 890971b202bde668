//! Odd/even cross grouping, mask criteria, Gumbel-Max unmask sampling and
//! index bookkeeping.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{self, Curvature};
use crate::refine::TokenGrid;
use crate::skeleton::SkeletonSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriteriaKind {
    SpatialHierarchy,
    TemporalStrategy1,
    TemporalStrategy2,
    MotionIntensity,
}

impl CriteriaKind {
    /// Whether scores are laid out `[joints × frames]` rather than
    /// `[frames × joints]`.
    pub fn joint_major(self) -> bool {
        matches!(self, CriteriaKind::TemporalStrategy1 | CriteriaKind::TemporalStrategy2)
    }
}

/// Per-token criterion scores for one half.
#[derive(Clone, Debug, PartialEq)]
pub struct CriteriaField {
    pub kind: CriteriaKind,
    frames: usize,
    joints: usize,
    scores: Vec<f64>,
}

impl CriteriaField {
    /// `scores` in the kind's native layout.
    pub fn new(kind: CriteriaKind, frames: usize, joints: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != frames * joints {
            return Err(Error::Invalid(format!(
                "criteria field of {frames} frames × {joints} joints needs {} scores, got {}",
                frames * joints,
                scores.len()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "criteria" });
        }
        Ok(CriteriaField { kind, frames, joints, scores })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Scores in native layout.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, frame: usize, joint: usize) -> f64 {
        if self.kind.joint_major() {
            self.scores[joint * self.frames + frame]
        } else {
            self.scores[frame * self.joints + joint]
        }
    }

    /// Scores flattened with index `k·J′ + i` for frame `k`, joint `i`.
    pub fn frame_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scores.len());
        for k in 0..self.frames {
            for i in 0..self.joints {
                out.push(self.get(k, i));
            }
        }
        out
    }

    /// Field restricted to `frames`, in that order.
    pub fn select_frames(&self, frames: &[usize]) -> CriteriaField {
        let mut scores = vec![0.0; frames.len() * self.joints];
        for (nk, &k) in frames.iter().enumerate() {
            for i in 0..self.joints {
                let v = self.get(k, i);
                if self.kind.joint_major() {
                    scores[i * frames.len() + nk] = v;
                } else {
                    scores[nk * self.joints + i] = v;
                }
            }
        }
        CriteriaField { kind: self.kind, frames: frames.len(), joints: self.joints, scores }
    }
}

/// Frame indices of the odd and even halves of `frames` pooled frames.
pub fn half_frames(frames: usize) -> (Vec<usize>, Vec<usize>) {
    ((1..frames).step_by(2).collect(), (0..frames).step_by(2).collect())
}

/// Splits a grid into odd-indexed and even-indexed frames.
pub fn cross_group(e: &TokenGrid) -> Result<(TokenGrid, TokenGrid)> {
    if e.frames() % 2 != 0 {
        return Err(Error::Invalid(format!("cross grouping needs an even frame count, got {}", e.frames())));
    }
    let (odd, even) = half_frames(e.frames());
    Ok((e.select_frames(&odd), e.select_frames(&even)))
}

/// Inverse of [`cross_group`].
pub fn interleave(odd: &TokenGrid, even: &TokenGrid) -> Result<TokenGrid> {
    if odd.frames() != even.frames() || odd.joints() != even.joints() || odd.channels() != even.channels() {
        return Err(Error::Invalid("halves differ in shape".into()));
    }
    let per = odd.joints() * odd.channels();
    let mut values = Vec::with_capacity(2 * odd.values().len());
    for k in 0..odd.frames() {
        values.extend_from_slice(&even.values()[k * per..(k + 1) * per]);
        values.extend_from_slice(&odd.values()[k * per..(k + 1) * per]);
    }
    TokenGrid::new(2 * odd.frames(), odd.joints(), odd.channels(), values)
}

fn check_in_ball(grid: &TokenGrid, c: Curvature) -> Result<()> {
    for tok in grid.values().chunks(grid.channels().max(1)) {
        let n = geometry::norm(tok);
        if !(n < c.radius()) {
            return Err(Error::OutsideBall { mode: "criteria", norm: n, radius: c.radius() });
        }
    }
    Ok(())
}

/// Spatial hierarchy `S_H [frames × joints]`: for each joint, its distance
/// to the frame's root token plus its distances to every joint of the same
/// frame.
pub fn hierarchy_scores(part: &TokenGrid, root: &TokenGrid, c: Curvature) -> Result<CriteriaField> {
    if root.frames() != part.frames() || root.joints() != 1 || root.channels() != part.channels() {
        return Err(Error::Invalid(format!(
            "root grid {}×{}×{} does not match part {}×{}×{}",
            root.frames(),
            root.joints(),
            root.channels(),
            part.frames(),
            part.joints(),
            part.channels()
        )));
    }
    check_in_ball(part, c)?;
    check_in_ball(root, c)?;
    let (nf, nj, kappa) = (part.frames(), part.joints(), c.kappa());
    let mut scores = vec![0.0; nf * nj];
    for k in 0..nf {
        let r = root.token(k, 0);
        let mut hdm = vec![0.0; nj * nj];
        for i in 0..nj {
            for j in i + 1..nj {
                let d = geometry::poincare_distance_raw(part.token(k, i), part.token(k, j), kappa);
                hdm[i * nj + j] = d;
                hdm[j * nj + i] = d;
            }
        }
        for i in 0..nj {
            let radial = geometry::poincare_distance_raw(r, part.token(k, i), kappa);
            scores[k * nj + i] = radial + hdm[i * nj..(i + 1) * nj].iter().sum::<f64>();
        }
    }
    CriteriaField::new(CriteriaKind::SpatialHierarchy, nf, nj, scores)
}

/// Temporal criterion from hyperbolic similarity: for each joint, the row
/// sums of its frame-by-frame similarity matrix. Layout `[joints × frames]`.
pub fn gcm_strategy1(part: &TokenGrid, c: Curvature) -> Result<CriteriaField> {
    check_in_ball(part, c)?;
    let (nf, nj, kappa) = (part.frames(), part.joints(), c.kappa());
    let mut scores = vec![0.0; nj * nf];
    for k in 0..nj {
        let mut gcm = vec![0.0; nf * nf];
        for i in 0..nf {
            for j in i + 1..nf {
                let s = geometry::hyperbolic_similarity_raw(part.token(i, k), part.token(j, k), kappa);
                gcm[i * nf + j] = s;
                gcm[j * nf + i] = s;
            }
        }
        for i in 0..nf {
            scores[k * nf + i] = gcm[i * nf..(i + 1) * nf].iter().sum();
        }
    }
    CriteriaField::new(CriteriaKind::TemporalStrategy1, nf, nj, scores)
}

/// Affine map `x·W + b` with `W [in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Projection {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let s = self.weight.shape();
        if s.len() != 2 || s[0] != x.len() || self.bias.numel() != s[1] {
            return Err(Error::Shape {
                op: "projection",
                detail: format!("weight {s:?}, bias {:?}, input width {}", self.bias.shape(), x.len()),
            });
        }
        let (n_in, n_out) = (s[0], s[1]);
        let w = self.weight.data();
        let mut out = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate().take(n_in) {
            for (o, acc) in out.iter_mut().enumerate() {
                *acc += xi * w[i * n_out + o];
            }
        }
        Ok(out)
    }
}

/// Axis of the per-joint attention matrix summed into the criterion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GcmAxis {
    /// Row sums over the softmax axis; every entry is then 1.
    #[default]
    Last,
    /// Column sums: attention each frame receives.
    First,
}

/// Temporal criterion from scaled dot-product attention over frames, per
/// joint, on Euclidean features. Layout `[joints × frames]`.
pub fn gcm_strategy2(part: &TokenGrid, psi: &Projection, phi: &Projection, axis: GcmAxis) -> Result<CriteriaField> {
    let (nf, nj) = (part.frames(), part.joints());
    let dc = psi.weight.shape().get(1).copied().unwrap_or(0);
    if dc == 0 || phi.weight.shape().get(1) != Some(&dc) {
        return Err(Error::Shape {
            op: "gcm_strategy2",
            detail: format!("projection widths {:?} and {:?}", psi.weight.shape(), phi.weight.shape()),
        });
    }
    let scale = 1.0 / (dc as f64).sqrt();
    let mut scores = vec![0.0; nj * nf];
    for k in 0..nj {
        let q: Vec<Vec<f64>> = (0..nf).map(|i| psi.apply(part.token(i, k))).collect::<Result<_>>()?;
        let kk: Vec<Vec<f64>> = (0..nf).map(|i| phi.apply(part.token(i, k))).collect::<Result<_>>()?;
        let gcm = attention_rows(&q, &kk, scale);
        for i in 0..nf {
            scores[k * nf + i] = match axis {
                GcmAxis::Last => gcm[i * nf..(i + 1) * nf].iter().sum(),
                GcmAxis::First => (0..nf).map(|j| gcm[j * nf + i]).sum(),
            };
        }
    }
    CriteriaField::new(CriteriaKind::TemporalStrategy2, nf, nj, scores)
}

/// Row-softmax of `q·kᵀ·scale`, flattened `[n × n]`.
pub fn attention_rows(q: &[Vec<f64>], k: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let n = q.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            row[j] = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Mean inter-frame displacement of each joint within each block of `r`
/// frames. Layout `[L/r × J]`.
pub fn motion_intensity_scores(x: &SkeletonSequence, r: usize) -> Result<CriteriaField> {
    let (nl, nj) = (x.frames(), x.joints());
    if nl < 2 {
        return Err(Error::Invalid(format!("motion intensity needs at least 2 frames, got {nl}")));
    }
    if r == 0 || nl % r != 0 {
        return Err(Error::Invalid(format!("pooling factor {r} does not divide {nl} frames")));
    }
    let disp = |t: usize, j: usize| {
        let (a, b) = (x.joint(t, j), x.joint(t + 1, j));
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt()
    };
    let nf = nl / r;
    let mut scores = vec![0.0; nf * nj];
    for f in 0..nf {
        // pairs (t, t+1) starting inside the block; the final block falls
        // back to the last pair when it has none
        let start = f * r;
        let end = ((f + 1) * r).min(nl - 1);
        let pairs: Vec<usize> = if start < end { (start..end).collect() } else { vec![nl - 2] };
        for j in 0..nj {
            scores[f * nj + j] = pairs.iter().map(|&t| disp(t, j)).sum::<f64>() / pairs.len() as f64;
        }
    }
    CriteriaField::new(CriteriaKind::MotionIntensity, nf, nj, scores)
}

/// `ceil((1 − ratio)·l)`, tolerant of rounding in `1 − ratio`.
pub fn unmask_count(l: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let m = (((1.0 - ratio) * l as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(m.min(l))
}

fn validate_selection(scores: &[f64], m: usize) -> Result<()> {
    if m == 0 || m > scores.len() {
        return Err(Error::Invalid(format!("cannot keep {m} of {} tokens", scores.len())));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "gumbel_unmask" });
    }
    Ok(())
}

/// Selection probabilities `softmax((s / max s) / τ)`. Scores with a
/// negative entry are first shifted by their minimum; all-zero scores give
/// the uniform distribution.
pub fn unmask_probabilities(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    Ok(log_probabilities(scores, tau)?.into_iter().map(f64::exp).collect())
}

fn log_probabilities(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let shift = if min < 0.0 { min } else { 0.0 };
    let max = scores.iter().map(|s| s - shift).fold(0.0, f64::max);
    let z: Vec<f64> = if max > 0.0 {
        scores.iter().map(|s| (s - shift) / max / tau).collect()
    } else {
        vec![0.0; scores.len()]
    };
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
    Ok(z.into_iter().map(|v| v - lse).collect())
}

/// Indices of the `m` largest keys, ascending by index. Ties prefer the
/// larger index.
fn top_m(keys: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    let mut kept = order[keys.len() - m..].to_vec();
    kept.sort_unstable();
    kept
}

/// Gumbel-Max sample of `m` indices to keep unmasked, sorted ascending.
pub fn gumbel_unmask<R: Rng + ?Sized>(scores: &[f64], m: usize, tau: f64, rng: &mut R) -> Result<Vec<usize>> {
    validate_selection(scores, m)?;
    let logp = log_probabilities(scores, tau)?;
    let keys: Vec<f64> = logp
        .iter()
        .map(|lp| {
            let eta: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            lp - (-eta.ln()).ln()
        })
        .collect();
    Ok(top_m(&keys, m))
}

/// Deterministic top-`m` selection (no Gumbel noise).
pub fn top_m_unmask(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    validate_selection(scores, m)?;
    Ok(top_m(scores, m))
}

/// Unmask index sets of one sample. Index `q < l` addresses the odd half,
/// `q ≥ l` the even half; within a half, `q = k·J′ + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub l: usize,
    pub m: usize,
    pub joints: usize,
    pub idx_odd: Vec<usize>,
    pub idx_even: Vec<usize>,
    pub idx_umask: Vec<usize>,
    pub mask_odd: Vec<u8>,
    pub mask_even: Vec<u8>,
    pub tau: f64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn new(l: usize, joints: usize, idx_odd: Vec<usize>, idx_even: Vec<usize>, tau: f64, seed: u64) -> Result<Self> {
        if joints == 0 || l % joints != 0 {
            return Err(Error::Invalid(format!("half of {l} tokens is not a whole number of {joints}-joint frames")));
        }
        if idx_odd.len() != idx_even.len() || idx_odd.is_empty() {
            return Err(Error::Invalid(format!(
                "halves keep {} and {} tokens; need the same positive count",
                idx_odd.len(),
                idx_even.len()
            )));
        }
        let to_mask = |idx: &[usize]| -> Result<Vec<u8>> {
            let mut mask = vec![0u8; l];
            for &q in idx {
                if q >= l {
                    return Err(Error::Invalid(format!("unmask index {q} out of range for {l} tokens")));
                }
                if std::mem::replace(&mut mask[q], 1) == 1 {
                    return Err(Error::Invalid(format!("duplicate unmask index {q}")));
                }
            }
            Ok(mask)
        };
        let mask_odd = to_mask(&idx_odd)?;
        let mask_even = to_mask(&idx_even)?;
        let idx_umask = idx_odd.iter().copied().chain(idx_even.iter().map(|q| q + l)).collect();
        Ok(MaskPlan { l, m: idx_odd.len(), joints, idx_odd, idx_even, idx_umask, mask_odd, mask_even, tau, seed })
    }

    /// Pooled frames per half.
    pub fn half_frames(&self) -> usize {
        self.l / self.joints
    }

    /// Canonical indices in `[0, 2l)` that are masked, ascending.
    pub fn masked(&self) -> Vec<usize> {
        let odd = (0..self.l).filter(|&q| self.mask_odd[q] == 0);
        let even = (0..self.l).filter(|&q| self.mask_even[q] == 0).map(|q| q + self.l);
        odd.chain(even).collect()
    }

    /// `(pooled frame, joint)` of canonical token `q`.
    pub fn token_position(&self, q: usize) -> (usize, usize) {
        let (half, p) = (q / self.l, q % self.l);
        let (k, i) = (p / self.joints, p % self.joints);
        let frame = if half == 0 { 2 * k + 1 } else { 2 * k };
        (frame, i)
    }

    /// Row of canonical token `q` in the frame-major flattened full grid.
    pub fn source_row(&self, q: usize) -> usize {
        let (f, i) = self.token_position(q);
        f * self.joints + i
    }

    /// Rows of the full grid in canonical order (`2l` entries).
    pub fn canonical_rows(&self) -> Vec<usize> {
        (0..2 * self.l).map(|q| self.source_row(q)).collect()
    }

    /// Rows of the full grid holding the unmasked tokens, in `idx_umask`
    /// order.
    pub fn unmasked_rows(&self) -> Vec<usize> {
        self.idx_umask.iter().map(|&q| self.source_row(q)).collect()
    }
}

/// Flattens each half frame-major and gathers the unmasked tokens, odd half
/// first. Returns `[2M × C′]` and the plan.
pub fn extract_and_concat(
    odd: &TokenGrid,
    even: &TokenGrid,
    idx_odd: &[usize],
    idx_even: &[usize],
    tau: f64,
    seed: u64,
) -> Result<(Tensor, MaskPlan)> {
    if odd.frames() != even.frames() || odd.joints() != even.joints() || odd.channels() != even.channels() {
        return Err(Error::Invalid("halves differ in shape".into()));
    }
    let l = odd.frames() * odd.joints();
    let plan = MaskPlan::new(l, odd.joints(), idx_odd.to_vec(), idx_even.to_vec(), tau, seed)?;
    let c = odd.channels();
    let mut data = Vec::with_capacity(2 * plan.m * c);
    for &q in idx_odd {
        data.extend_from_slice(&odd.values()[q * c..(q + 1) * c]);
    }
    for &q in idx_even {
        data.extend_from_slice(&even.values()[q * c..(q + 1) * c]);
    }
    Ok((Tensor::new(vec![2 * plan.m, c], data)?, plan))
}

/// Criterion assigned to a half.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    Spatial,
    Temporal,
    Motion,
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Criterion::Spatial),
            "temporal" => Ok(Criterion::Temporal),
            "motion" => Ok(Criterion::Motion),
            _ => Err(Error::Config(format!("unknown criterion `{s}` (expected spatial, temporal or motion)"))),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Spatial => "spatial",
            Criterion::Temporal => "temporal",
            Criterion::Motion => "motion",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub ratio: f64,
    pub tau: f64,
    pub odd: Criterion,
    pub even: Criterion,
    pub use_gumbel: bool,
    pub invert: bool,
    /// 1: hyperbolic similarity, 2: projected attention.
    pub gcm_strategy: u8,
    pub gcm_axis: GcmAxis,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            ratio: 0.9,
            tau: 0.9,
            odd: Criterion::Temporal,
            even: Criterion::Spatial,
            use_gumbel: true,
            invert: false,
            gcm_strategy: 1,
            gcm_axis: GcmAxis::Last,
        }
    }
}

/// Everything the criteria need for one sample.
pub struct MaskInputs<'a> {
    /// Ball-mapped tokens `[L′ × J′ × C′]`.
    pub ball: &'a TokenGrid,
    /// Tokens after positional embedding, before ball mapping.
    pub euclid: &'a TokenGrid,
    /// Ball-mapped root tokens `[L′ × 1 × C′]`.
    pub root: &'a TokenGrid,
    /// Pruned raw coordinates `[L × J′ × 3]`.
    pub pruned: &'a SkeletonSequence,
    pub r: usize,
    pub curvature: Curvature,
    pub psi: &'a Projection,
    pub phi: &'a Projection,
}

/// Criterion field of the half holding `frames`.
pub fn half_criterion(cfg: &MaskConfig, criterion: Criterion, inputs: &MaskInputs, frames: &[usize]) -> Result<CriteriaField> {
    match criterion {
        Criterion::Spatial => hierarchy_scores(
            &inputs.ball.select_frames(frames),
            &inputs.root.select_frames(frames),
            inputs.curvature,
        ),
        Criterion::Temporal => match cfg.gcm_strategy {
            1 => gcm_strategy1(&inputs.ball.select_frames(frames), inputs.curvature),
            2 => gcm_strategy2(&inputs.euclid.select_frames(frames), inputs.psi, inputs.phi, cfg.gcm_axis),
            s => Err(Error::Config(format!("gcm_strategy must be 1 or 2, got {s}"))),
        },
        Criterion::Motion => Ok(motion_intensity_scores(inputs.pruned, inputs.r)?.select_frames(frames)),
    }
}

/// Criteria of both halves plus the sampled plan.
#[derive(Clone, Debug)]
pub struct MaskOutcome {
    pub plan: MaskPlan,
    pub odd: CriteriaField,
    pub even: CriteriaField,
}

/// Computes both criteria and draws the unmask sets (odd half first) from
/// `rng`.
pub fn plan_masks<R: Rng + ?Sized>(cfg: &MaskConfig, inputs: &MaskInputs, rng: &mut R, seed: u64) -> Result<MaskOutcome> {
    let frames = inputs.ball.frames();
    if frames % 2 != 0 {
        return Err(Error::Invalid(format!("cross grouping needs an even frame count, got {frames}")));
    }
    let (odd_frames, even_frames) = half_frames(frames);
    let odd = half_criterion(cfg, cfg.odd, inputs, &odd_frames)?;
    let even = half_criterion(cfg, cfg.even, inputs, &even_frames)?;
    let l = odd_frames.len() * inputs.ball.joints();
    let m = unmask_count(l, cfg.ratio)?;
    let mut pick = |field: &CriteriaField| -> Result<Vec<usize>> {
        let mut s = field.frame_major();
        if cfg.invert {
            s.iter_mut().for_each(|v| *v = -*v);
        }
        if cfg.use_gumbel {
            gumbel_unmask(&s, m, cfg.tau, rng)
        } else {
            top_m_unmask(&s, m)
        }
    };
    let idx_odd = pick(&odd)?;
    let idx_even = pick(&even)?;
    let plan = MaskPlan::new(l, inputs.ball.joints(), idx_odd, idx_even, cfg.tau, seed)?;
    Ok(MaskOutcome { plan, odd, even })
}

/// CSV rows `sample,half,frame,joint,score,unmasked` for one outcome.
pub fn plan_csv_rows(sample: usize, outcome: &MaskOutcome, out: &mut String) {
    use std::fmt::Write;
    let plan = &outcome.plan;
    for (half, field, mask) in [("odd", &outcome.odd, &plan.mask_odd), ("even", &outcome.even, &plan.mask_even)] {
        let base = if half == "odd" { 0 } else { plan.l };
        for (p, &score) in field.frame_major().iter().enumerate() {
            let (frame, joint) = plan.token_position(base + p);
            let _ = writeln!(out, "{sample},{half},{frame},{joint},{score},{}", mask[p]);
        }
    }
}

pub const PLAN_CSV_HEADER: &str = "sample,half,frame,joint,score,unmasked";

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(frames: usize, joints: usize, channels: usize, f: impl Fn(usize) -> f64) -> TokenGrid {
        TokenGrid::new(frames, joints, channels, (0..frames * joints * channels).map(f).collect()).unwrap()
    }

    #[test]
    fn grouping_round_trip() {
        let g = grid(24, 3, 2, |i| i as f64);
        let (o, e) = cross_group(&g).unwrap();
        assert_eq!((o.frames(), e.frames()), (12, 12));
        assert_eq!(o.token(0, 0), g.token(1, 0));
        assert_eq!(interleave(&o, &e).unwrap().values(), g.values());
        assert!(cross_group(&grid(3, 1, 1, |_| 0.0)).is_err());
    }

    #[test]
    fn hierarchy_degenerate_cases() {
        let c = Curvature::default();
        let part = grid(2, 3, 2, |_| 0.0);
        let root = grid(2, 1, 2, |_| 0.0);
        assert!(hierarchy_scores(&part, &root, c).unwrap().scores().iter().all(|&v| v == 0.0));
        let part = grid(2, 3, 2, |i| if i % 2 == 0 { 0.3 } else { 0.0 });
        let s = hierarchy_scores(&part, &root, c).unwrap();
        let d = geometry::poincare_distance_raw(&[0.0, 0.0], &[0.3, 0.0], 1.0);
        assert!(s.scores().iter().all(|v| (v - d).abs() < 1e-15));
    }

    #[test]
    fn gcm1_static_joint_and_two_frames() {
        let c = Curvature::default();
        let still = grid(4, 1, 2, |i| if i % 2 == 0 { 0.2 } else { -0.1 });
        assert!(gcm_strategy1(&still, c).unwrap().scores().iter().all(|&v| v == 0.0));
        let two = TokenGrid::new(2, 1, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let s = geometry::hyperbolic_similarity_raw(&[0.1, 0.2], &[-0.3, 0.4], 1.0);
        assert_eq!(gcm_strategy1(&two, c).unwrap().scores(), &[s, s]);
    }

    #[test]
    fn gcm2_zero_maps_are_uniform() {
        let zero = Projection { weight: Tensor::zeros(&[2, 2]), bias: Tensor::zeros(&[2]) };
        let part = grid(5, 2, 2, |i| (i as f64).sin());
        for axis in [GcmAxis::Last, GcmAxis::First] {
            let f = gcm_strategy2(&part, &zero, &zero, axis).unwrap();
            assert!(f.scores().iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn motion_intensity_cases() {
        let still = SkeletonSequence::new(6, 2, vec![0.5; 36]).unwrap();
        assert!(motion_intensity_scores(&still, 3).unwrap().scores().iter().all(|&v| v == 0.0));
        let moving: Vec<f64> = (0..6).flat_map(|t| (0..2).flat_map(move |_| [t as f64 * 0.1, 0.0, 0.0])).collect();
        let f = motion_intensity_scores(&SkeletonSequence::new(6, 2, moving).unwrap(), 3).unwrap();
        assert!(f.scores().iter().all(|v| (v - 0.1).abs() < 1e-12));
        let one: Vec<f64> = (0..4).flat_map(|t| [0.0, 0.0, 0.0, t as f64, 0.0, 0.0]).collect();
        let f = motion_intensity_scores(&SkeletonSequence::new(4, 2, one).unwrap(), 1).unwrap();
        for k in 0..4 {
            assert_eq!(f.get(k, 0), 0.0);
            assert_eq!(f.get(k, 1), 1.0);
        }
        assert!(motion_intensity_scores(&SkeletonSequence::new(1, 1, vec![0.0; 3]).unwrap(), 1).is_err());
    }

    #[test]
    fn unmask_count_examples() {
        assert_eq!(unmask_count(216, 0.9).unwrap(), 22);
        assert_eq!(unmask_count(54, 0.5).unwrap(), 27);
        assert_eq!(unmask_count(10, 0.9).unwrap(), 1);
        assert!(unmask_count(10, 1.0).is_err());
    }

    #[test]
    fn gumbel_errors_and_full_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gumbel_unmask(&[1.0, 2.0], 3, 0.5, &mut rng).is_err());
        assert!(gumbel_unmask(&[1.0, 2.0], 1, 0.0, &mut rng).is_err());
        assert!(gumbel_unmask(&[1.0, 2.0], 0, 0.5, &mut rng).is_err());
        assert_eq!(gumbel_unmask(&[3.0, 1.0, 2.0], 3, 0.5, &mut rng).unwrap(), vec![0, 1, 2]);
        let p = unmask_probabilities(&[0.0, 0.0, 0.0, 0.0], 0.9).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn plan_accounting() {
        let plan = MaskPlan::new(6, 3, vec![0, 4], vec![1, 5], 0.9, 7).unwrap();
        assert_eq!(plan.idx_umask, vec![0, 4, 7, 11]);
        assert_eq!(plan.masked(), vec![1, 2, 3, 5, 6, 8, 9, 10]);
        assert_eq!(plan.token_position(4), (3, 1));
        assert_eq!(plan.token_position(7), (0, 1));
        assert_eq!(plan.source_row(4), 10);
        assert!(MaskPlan::new(6, 3, vec![0, 0], vec![1, 2], 0.9, 0).is_err());
        assert!(MaskPlan::new(6, 3, vec![0, 6], vec![1, 2], 0.9, 0).is_err());
        assert!(MaskPlan::new(6, 3, vec![0], vec![1, 2], 0.9, 0).is_err());
    }

    #[test]
    fn extraction_without_masking_preserves_order() {
        let g = grid(4, 2, 3, |i| i as f64);
        let (o, e) = cross_group(&g).unwrap();
        let all: Vec<usize> = (0..4).collect();
        let (t, plan) = extract_and_concat(&o, &e, &all, &all, 0.9, 0).unwrap();
        let mut want = o.values().to_vec();
        want.extend_from_slice(e.values());
        assert_eq!(t.data(), &want[..]);
        assert_eq!(plan.m, 4);
        // canonical rows address the same tokens in the full grid
        for (q, row) in plan.canonical_rows().into_iter().enumerate() {
            assert_eq!(&t.data()[q * 3..q * 3 + 3], &g.values()[row * 3..row * 3 + 3]);
        }
    }
}

//! Prior refinement: torso pruning, strided temporal pooling, root tokens,
//! positional embedding, and the tokenwise map into the Poincaré ball.

use crate::engine::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{self, Curvature};
use crate::skeleton::SkeletonSequence;

/// Refined per-token features `[frames × joints × channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    frames: usize,
    joints: usize,
    channels: usize,
    values: Vec<f64>,
    /// Original frame range `[start, end)` covered by each pooled frame.
    frame_origin: Vec<(usize, usize)>,
}

impl TokenGrid {
    pub fn new(frames: usize, joints: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * joints * channels {
            return shape_err(
                "token_grid",
                format!("{frames}×{joints}×{channels} grid needs {} values, got {}", frames * joints * channels, values.len()),
            );
        }
        let frame_origin = (0..frames).map(|f| (f, f + 1)).collect();
        Ok(TokenGrid { frames, joints, channels, values, frame_origin })
    }

    /// Grid from a rank-3 tensor whose frames each pooled `r` input frames.
    pub fn from_tensor(t: &Tensor, r: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return shape_err("token_grid", format!("expected rank 3, got {s:?}"));
        }
        let mut grid = Self::new(s[0], s[1], s[2], t.data().to_vec())?;
        grid.frame_origin = (0..s[0]).map(|f| (f * r, (f + 1) * r)).collect();
        Ok(grid)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame_origin(&self) -> &[(usize, usize)] {
        &self.frame_origin
    }

    pub fn token(&self, frame: usize, joint: usize) -> &[f64] {
        let o = (frame * self.joints + joint) * self.channels;
        &self.values[o..o + self.channels]
    }

    /// Sub-grid holding `frames` in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> TokenGrid {
        let per = self.joints * self.channels;
        let mut values = Vec::with_capacity(frames.len() * per);
        for &f in frames {
            values.extend_from_slice(&self.values[f * per..(f + 1) * per]);
        }
        TokenGrid {
            frames: frames.len(),
            joints: self.joints,
            channels: self.channels,
            values,
            frame_origin: frames.iter().map(|&f| self.frame_origin[f]).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.joints, self.channels], self.values.clone())
            .expect("grid invariant")
    }
}

/// Learnable positional tables: spatial `[1 × J′ × C′]`, temporal
/// `[L′ × 1 × C′]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTables {
    pub spatial: Tensor,
    pub temporal: Tensor,
}

/// Splits `x` into limb joints (ascending, torso removed) and torso joints
/// (in `torso` order).
pub fn spatial_prune(x: &SkeletonSequence, torso: &[usize]) -> Result<(SkeletonSequence, SkeletonSequence)> {
    if torso.is_empty() {
        return Err(Error::Invalid("torso joint set must not be empty".into()));
    }
    let mut seen = vec![false; x.joints()];
    for &t in torso {
        if t >= x.joints() {
            return Err(Error::Invalid(format!("torso joint {t} out of range for {} joints", x.joints())));
        }
        if std::mem::replace(&mut seen[t], true) {
            return Err(Error::Invalid(format!("torso joint {t} listed twice")));
        }
    }
    if torso.len() >= x.joints() {
        return Err(Error::Invalid("torso set covers every joint; nothing left after pruning".into()));
    }
    let limbs: Vec<usize> = (0..x.joints()).filter(|&j| !seen[j]).collect();
    Ok((x.select_joints(&limbs), x.select_joints(torso)))
}

/// Lifts 3-D coordinates `[L × J × 3]` to `[L/r × J × C′]` with a strided
/// convolution over time (kernel = stride = `r`).
pub fn temporal_pool(g: &mut Graph, x: Var, w: Var, b: Var, r: usize) -> Result<Var> {
    let l = g.shape(x).first().copied().unwrap_or(0);
    if r == 0 || l % r != 0 {
        return Err(Error::Invalid(format!("pooling factor {r} does not divide {l} frames")));
    }
    g.conv1d_strided(x, w, b, r)
}

/// One root token per pooled frame: pooled torso joints averaged over
/// joints, sharing the limb pooling weights. Output `[L′ × 1 × C′]`.
pub fn root_features(g: &mut Graph, torso: Var, w: Var, b: Var, r: usize) -> Result<Var> {
    if g.shape(torso).get(1).copied().unwrap_or(0) == 0 {
        return Err(Error::Invalid("root features need at least one torso joint".into()));
    }
    let pooled = temporal_pool(g, torso, w, b, r)?;
    g.mean_axis(pooled, 1)
}

/// `E = E_e + P_t + P_s` with broadcasting.
pub fn add_positional(g: &mut Graph, e: Var, spatial: Var, temporal: Var) -> Result<Var> {
    let (se, ss, st) = (g.shape(e).to_vec(), g.shape(spatial).to_vec(), g.shape(temporal).to_vec());
    if se.len() != 3 || ss != [1, se[1], se[2]] || st != [se[0], 1, se[2]] {
        return shape_err("add_positional", format!("grid {se:?}, spatial {ss:?}, temporal {st:?}"));
    }
    let with_t = g.broadcast_add(e, temporal)?;
    g.broadcast_add(with_t, spatial)
}

/// Exponential map at the origin followed by ball projection, per token.
pub fn map_to_ball(g: &mut Graph, e: Var, c: Curvature) -> Result<Var> {
    let h = g.exp_map_origin(e, c.kappa())?;
    g.ball_project(h, c.kappa())
}

/// Value-only counterpart of [`map_to_ball`].
pub fn map_grid_to_ball(grid: &TokenGrid, c: Curvature) -> TokenGrid {
    let mut out = grid.clone();
    for tok in out.values.chunks_mut(grid.channels.max(1)) {
        geometry::map_to_ball_raw(tok, c.kappa());
    }
    out
}

/// Refined sizes `(L′, J′)` for the given raw sizes.
pub fn refined_shape(frames: usize, joints: usize, r: usize, torso: usize) -> Result<(usize, usize)> {
    if r == 0 || frames % r != 0 {
        return Err(Error::Invalid(format!("pooling factor {r} does not divide {frames} frames")));
    }
    if torso == 0 || torso >= joints {
        return Err(Error::Invalid(format!("torso of {torso} joints invalid for {joints} joints")));
    }
    Ok((frames / r, joints - torso))
}

/// Coordinates of a sequence as a `[L × J × 3]` tensor.
pub fn sequence_tensor(x: &SkeletonSequence) -> Tensor {
    Tensor::new(vec![x.frames(), x.joints(), 3], x.coords().to_vec()).expect("sequence invariant")
}

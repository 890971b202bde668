//! Poincaré-ball operations.
//!
//! The ball for curvature `c < 0` is `{ v : ‖v‖² < −1/c }`. Internally the
//! positive magnitude `κ = −c` is used. Slice-level functions (`*_raw`) skip
//! validation and serve the per-token hot loops in masking; the
//! [`BallPoint`] API validates membership and curvature agreement.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

static ATANH_CLAMPS: AtomicUsize = AtomicUsize::new(0);

const ATANH_LIMIT: f64 = crate::engine::ATANH_LIMIT;
/// Ceiling on `tanh` in the exponential map so results stay strictly inside.
const TANH_CEIL: f64 = 1.0 - 1e-15;

/// Number of distance evaluations whose `atanh` argument was clamped.
pub fn atanh_clamp_count() -> usize {
    ATANH_CLAMPS.load(Ordering::Relaxed)
}

fn clamped_atanh(x: f64) -> f64 {
    if x > ATANH_LIMIT {
        ATANH_CLAMPS.fetch_add(1, Ordering::Relaxed);
        ATANH_LIMIT.atanh()
    } else {
        x.atanh()
    }
}

/// Curvature `c` of the ball; strictly negative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c < 0.0) {
            return Err(Error::InvalidCurvature(c));
        }
        Ok(Curvature(c))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `κ = −c`.
    pub fn kappa(self) -> f64 {
        -self.0
    }

    /// Ball radius `1/√−c`.
    pub fn radius(self) -> f64 {
        1.0 / self.kappa().sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature(-1.0)
    }
}

/// Which formula `mobius_add` evaluates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MobiusMode {
    /// Gyrovector addition with `κ = |c|`; closed on the ball.
    #[default]
    Standard,
    /// The printed form with signed `c`; may leave the ball.
    AsWritten,
}

/// A point strictly inside the Poincaré ball.
#[derive(Clone, Debug, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl BallPoint {
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "ball_point" });
        }
        let norm = norm(&coords);
        if norm >= curvature.radius() {
            return Err(Error::OutsideBall {
                mode: "construction",
                norm,
                radius: curvature.radius(),
            });
        }
        Ok(BallPoint { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        BallPoint {
            coords: vec![0.0; dim],
            curvature,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }

    /// Additive inverse `⊖u = −u`.
    pub fn negate(&self) -> BallPoint {
        BallPoint {
            coords: self.coords.iter().map(|v| -v).collect(),
            curvature: self.curvature,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn same_curvature(u: &BallPoint, v: &BallPoint) -> Result<()> {
    if u.curvature != v.curvature {
        return Err(Error::CurvatureMismatch(u.curvature.0, v.curvature.0));
    }
    if u.coords.len() != v.coords.len() {
        return Err(Error::Invalid(format!(
            "dimension mismatch: {} vs {}",
            u.coords.len(),
            v.coords.len()
        )));
    }
    Ok(())
}

/// Möbius addition with signed coefficient `s` (`s = κ` standard, `s = c`
/// as written).
fn mobius_with_coeff(u: &[f64], v: &[f64], s: f64, out: &mut [f64]) {
    let uv = dot(u, v);
    let uu = dot(u, u);
    let vv = dot(v, v);
    let a = 1.0 + 2.0 * s * uv + s * vv;
    let b = 1.0 - s * uu;
    let den = 1.0 + 2.0 * s * uv + s * s * uu * vv;
    for i in 0..out.len() {
        out[i] = (a * u[i] + b * v[i]) / den;
    }
}

/// Standard Möbius addition on raw coordinates.
pub fn mobius_add_raw(u: &[f64], v: &[f64], kappa: f64) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    mobius_with_coeff(u, v, kappa, &mut out);
    out
}

pub fn mobius_add(u: &BallPoint, v: &BallPoint) -> Result<BallPoint> {
    mobius_add_with_mode(u, v, MobiusMode::Standard)
}

pub fn mobius_add_with_mode(u: &BallPoint, v: &BallPoint, mode: MobiusMode) -> Result<BallPoint> {
    same_curvature(u, v)?;
    let c = u.curvature;
    let (coeff, name) = match mode {
        MobiusMode::Standard => (c.kappa(), "standard"),
        MobiusMode::AsWritten => (c.value(), "as-written"),
    };
    let mut out = vec![0.0; u.coords.len()];
    mobius_with_coeff(&u.coords, &v.coords, coeff, &mut out);
    let n = norm(&out);
    if !(n < c.radius()) {
        return Err(Error::OutsideBall {
            mode: name,
            norm: n,
            radius: c.radius(),
        });
    }
    Ok(BallPoint {
        coords: out,
        curvature: c,
    })
}

/// Poincaré distance on raw coordinates; `0` when `u == v`.
pub fn poincare_distance_raw(u: &[f64], v: &[f64], kappa: f64) -> f64 {
    if u == v {
        return 0.0;
    }
    let neg_u: Vec<f64> = u.iter().map(|x| -x).collect();
    let mut sum = vec![0.0; u.len()];
    mobius_with_coeff(&neg_u, v, kappa, &mut sum);
    let sk = kappa.sqrt();
    2.0 / sk * clamped_atanh(sk * norm(&sum))
}

pub fn poincare_distance(u: &BallPoint, v: &BallPoint) -> Result<f64> {
    same_curvature(u, v)?;
    Ok(poincare_distance_raw(&u.coords, &v.coords, u.curvature.kappa()))
}

/// Exponential map at the origin, in place on raw coordinates.
pub fn exp_map_origin_raw(x: &mut [f64], kappa: f64) {
    let n = norm(x);
    if n < 1e-12 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let a = kappa.sqrt() * n;
    let s = a.tanh().min(TANH_CEIL) / a;
    x.iter_mut().for_each(|v| *v *= s);
}

/// Projection `h / (1 + ‖h‖²/κ)`, in place on raw coordinates.
pub fn ball_project_raw(h: &mut [f64], kappa: f64) {
    let q = 1.0 / (1.0 + dot(h, h) / kappa);
    h.iter_mut().for_each(|v| *v *= q);
}

fn check_finite(x: &[f64], op: &'static str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

pub fn exp_map_origin(x: &[f64], c: Curvature) -> Result<BallPoint> {
    check_finite(x, "exp_map_origin")?;
    let mut coords = x.to_vec();
    exp_map_origin_raw(&mut coords, c.kappa());
    Ok(BallPoint { coords, curvature: c })
}

/// Projects `h` with `h / (1 + ‖h‖²/κ)`.
///
/// The result is inside the ball for any `h` when `κ < 2`; for stronger
/// curvature a point with `‖h‖ ≈ √κ` can land outside and is reported.
pub fn ball_project(h: &[f64], c: Curvature) -> Result<BallPoint> {
    check_finite(h, "ball_project")?;
    let mut coords = h.to_vec();
    ball_project_raw(&mut coords, c.kappa());
    let n = norm(&coords);
    if n >= c.radius() {
        return Err(Error::OutsideBall {
            mode: "projection",
            norm: n,
            radius: c.radius(),
        });
    }
    Ok(BallPoint { coords, curvature: c })
}

/// `exp_map_origin` followed by `ball_project`.
pub fn map_to_ball_raw(x: &mut [f64], kappa: f64) {
    exp_map_origin_raw(x, kappa);
    ball_project_raw(x, kappa);
}

/// `1 − cosh(d(u, v))`; zero iff `u == v`, negative otherwise.
pub fn hyperbolic_similarity_raw(u: &[f64], v: &[f64], kappa: f64) -> f64 {
    1.0 - poincare_distance_raw(u, v, kappa).cosh()
}

pub fn hyperbolic_similarity(u: &BallPoint, v: &BallPoint) -> Result<f64> {
    same_curvature(u, v)?;
    Ok(hyperbolic_similarity_raw(&u.coords, &v.coords, u.curvature.kappa()))
}

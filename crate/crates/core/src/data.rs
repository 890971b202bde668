//! Synthetic kinematic-tree actions, temporal crop augmentation, and the
//! on-disk sequence format.
//!
//! File layout (all little-endian):
//!
//! ```text
//! magic   8 bytes  "HACMSEQ1"
//! version u32      1
//! frames  u32
//! joints  u32
//! count   u32
//! payload count × frames × joints × 3 × f32
//! ```
//!
//! Labels and splits live in a JSON sidecar at `<path>.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{SkeletonSequence, Topology, BODY25_PARENTS};

pub const SEQ_MAGIC: &[u8; 8] = b"HACMSEQ1";
pub const SEQ_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub sequence: SkeletonSequence,
    pub label: usize,
    pub split: Split,
}

/// Parameters of the synthetic action generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub joints: usize,
    pub frames: usize,
    pub noise_sigma: f64,
    /// Amplitude (radians) of class-independent sway on every limb joint.
    pub idle_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 4,
            samples_per_class: 64,
            test_per_class: 16,
            joints: 25,
            frames: 96,
            noise_sigma: 0.005,
            idle_amplitude: 0.15,
            seed: 0,
        }
    }
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply3(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Rodrigues rotation about a unit `axis`.
fn rotation(axis: [f64; 3], angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Bone vector from each joint's parent in the rest pose (meters, y up).
/// The root entry is its absolute position.
const BODY25_OFFSETS: [[f64; 3]; 25] = [
    [0.0, 1.0, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, 0.08, 0.0],
    [0.0, 0.15, 0.0],
    [0.18, -0.02, 0.0],
    [0.02, -0.28, 0.0],
    [0.0, -0.25, 0.0],
    [0.0, -0.06, 0.0],
    [-0.18, -0.02, 0.0],
    [-0.02, -0.28, 0.0],
    [0.0, -0.25, 0.0],
    [0.0, -0.06, 0.0],
    [0.1, -0.02, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.40, 0.0],
    [0.0, -0.03, 0.1],
    [-0.1, -0.02, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.40, 0.0],
    [0.0, -0.03, 0.1],
    [0.0, 0.25, 0.0],
    [0.0, -0.06, 0.0],
    [0.03, -0.04, 0.02],
    [0.0, -0.06, 0.0],
    [-0.03, -0.04, 0.02],
];

const X_AXIS: [f64; 3] = [1.0, 0.0, 0.0];
const Y_AXIS: [f64; 3] = [0.0, 1.0, 0.0];
const Z_AXIS: [f64; 3] = [0.0, 0.0, 1.0];

/// One oscillating joint rotation of a motion family.
#[derive(Clone, Copy, Debug)]
struct Driver {
    joint: usize,
    axis: [f64; 3],
    /// Amplitude range, radians.
    amp: (f64, f64),
}

/// Oscillation pattern of a class: the moving joints and the frequency band
/// (cycles per sequence).
#[derive(Clone, Debug)]
struct MotionFamily {
    drivers: Vec<Driver>,
    freq: (f64, f64),
}

fn base_families() -> Vec<MotionFamily> {
    let d = |joint, axis, lo, hi| Driver { joint, axis, amp: (lo, hi) };
    vec![
        // left arm raise
        MotionFamily {
            drivers: vec![d(4, Z_AXIS, 0.6, 1.2), d(5, Z_AXIS, 0.3, 0.6)],
            freq: (1.0, 2.0),
        },
        // right arm raise
        MotionFamily {
            drivers: vec![d(8, Z_AXIS, -1.2, -0.6), d(9, Z_AXIS, -0.6, -0.3)],
            freq: (1.0, 2.0),
        },
        // left leg kick
        MotionFamily {
            drivers: vec![d(12, X_AXIS, -0.8, -0.4), d(13, X_AXIS, 0.3, 0.7)],
            freq: (1.0, 2.0),
        },
        // right leg kick
        MotionFamily {
            drivers: vec![d(16, X_AXIS, -0.8, -0.4), d(17, X_AXIS, 0.3, 0.7)],
            freq: (1.0, 2.0),
        },
        // both arms forward
        MotionFamily {
            drivers: vec![d(4, X_AXIS, -1.0, -0.5), d(8, X_AXIS, -1.0, -0.5)],
            freq: (1.0, 2.0),
        },
        // forearm twist, both sides
        MotionFamily {
            drivers: vec![d(5, Y_AXIS, 0.6, 1.2), d(9, Y_AXIS, 0.6, 1.2)],
            freq: (1.0, 2.0),
        },
    ]
}

/// Family of class `k`; classes beyond the base set reuse a family in a
/// higher, disjoint frequency band.
fn family_for(k: usize) -> MotionFamily {
    let base = base_families();
    let mut fam = base[k % base.len()].clone();
    let band = (k / base.len()) as f64;
    fam.freq = (fam.freq.0 + 2.0 * band, fam.freq.1 + 2.0 * band);
    fam
}

/// Joints in parent-before-child order.
fn topological_order(parents: &[Option<usize>]) -> Vec<usize> {
    let mut order = Vec::with_capacity(parents.len());
    let mut placed = vec![false; parents.len()];
    while order.len() < parents.len() {
        for j in 0..parents.len() {
            if !placed[j] && parents[j].map_or(true, |p| placed[p]) {
                placed[j] = true;
                order.push(j);
            }
        }
    }
    order
}

/// Generates one sequence; `family = None` yields only idle sway.
fn synthesize(spec: &SyntheticSpec, family: Option<&MotionFamily>, rng: &mut ChaCha8Rng) -> Result<SkeletonSequence> {
    let parents = &BODY25_PARENTS;
    let order = topological_order(parents);
    let n = parents.len();
    let yaw = rotation(Y_AXIS, rng.gen_range(-0.4..0.4));
    let scale = rng.gen_range(0.9..1.1);
    let shift = [rng.gen_range(-0.1..0.1), 0.0, rng.gen_range(-0.1..0.1)];

    // (joint, axis, amplitude, frequency, phase)
    let mut oscillators: Vec<(usize, [f64; 3], f64, f64, f64)> = Vec::new();
    if let Some(fam) = family {
        let freq = rng.gen_range(fam.freq.0..=fam.freq.1);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for d in &fam.drivers {
            let (lo, hi) = (d.amp.0.min(d.amp.1), d.amp.0.max(d.amp.1));
            let amp = rng.gen_range(lo..=hi);
            oscillators.push((d.joint, d.axis, amp, freq, phase));
        }
    }
    if spec.idle_amplitude > 0.0 {
        for j in [4, 5, 8, 9, 12, 13, 16, 17] {
            let axis = if rng.gen_bool(0.5) { X_AXIS } else { Z_AXIS };
            let amp = rng.gen_range(0.0..spec.idle_amplitude);
            let freq = rng.gen_range(0.5..3.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            oscillators.push((j, axis, amp, freq, phase));
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::Invalid(format!("noise sigma: {e}")))?;
    let mut coords = vec![0.0; spec.frames * n * 3];
    let mut global = vec![IDENTITY; n];
    let mut pos = vec![[0.0f64; 3]; n];
    for f in 0..spec.frames {
        let t = f as f64 / spec.frames as f64;
        for &j in &order {
            let mut local = IDENTITY;
            for &(oj, axis, amp, freq, phase) in &oscillators {
                if oj == j {
                    let angle = amp * (std::f64::consts::TAU * freq * t + phase).sin();
                    local = matmul3(&local, &rotation(axis, angle));
                }
            }
            match parents[j] {
                None => {
                    global[j] = matmul3(&yaw, &local);
                    let o = BODY25_OFFSETS[j];
                    pos[j] = [o[0] + shift[0], o[1] * scale, o[2] + shift[2]];
                }
                Some(p) => {
                    let o = BODY25_OFFSETS[j];
                    let bone = apply3(&global[p], [o[0] * scale, o[1] * scale, o[2] * scale]);
                    pos[j] = [pos[p][0] + bone[0], pos[p][1] + bone[1], pos[p][2] + bone[2]];
                    global[j] = matmul3(&global[p], &local);
                }
            }
        }
        for j in 0..n {
            for c in 0..3 {
                let mut v = pos[j][c];
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                // stored as f32 on disk; keep memory bit-identical to a reload
                coords[(f * n + j) * 3 + c] = v as f32 as f64;
            }
        }
    }
    SkeletonSequence::new(spec.frames, n, coords)
}

/// Generates `n_classes × (samples_per_class + test_per_class)` sequences,
/// class-major, train before test within a class.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<LabeledSequence>> {
    if spec.n_classes == 0 {
        return Err(Error::Invalid("synthetic spec needs at least one class".into()));
    }
    if spec.joints != 25 {
        return Err(Error::Invalid(format!(
            "the synthetic generator drives the 25-joint body tree, got joints = {}",
            spec.joints
        )));
    }
    if spec.frames < 2 {
        return Err(Error::Invalid("synthetic sequences need at least 2 frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_classes * (spec.samples_per_class + spec.test_per_class));
    for label in 0..spec.n_classes {
        let fam = family_for(label);
        for i in 0..spec.samples_per_class + spec.test_per_class {
            let sequence = synthesize(spec, Some(&fam), &mut rng)?;
            let split = if i < spec.samples_per_class { Split::Train } else { Split::Test };
            out.push(LabeledSequence { sequence, label, split });
        }
    }
    Ok(out)
}

/// A sequence with no class motion (idle sway and noise only).
pub fn generate_static(spec: &SyntheticSpec) -> Result<SkeletonSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    synthesize(spec, None, &mut rng)
}

/// Contiguous crop of `round(p·L)` frames followed by linear resampling to
/// `out_frames`. With `rng = None` the crop is centered.
pub fn crop_resample<R: Rng>(
    x: &SkeletonSequence,
    p: f64,
    out_frames: usize,
    rng: Option<&mut R>,
) -> Result<SkeletonSequence> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Invalid(format!("crop proportion must lie in (0, 1], got {p}")));
    }
    if x.frames() < 2 || out_frames < 1 {
        return Err(Error::Invalid("crop needs at least 2 input frames and 1 output frame".into()));
    }
    let len = (p * x.frames() as f64).round() as usize;
    if len < 2 {
        return Err(Error::Invalid(format!("crop of {len} frames is shorter than 2")));
    }
    let slack = x.frames() - len;
    let start = match rng {
        Some(r) => r.gen_range(0..=slack),
        None => slack / 2,
    };
    let j = x.joints();
    let src = x.coords();
    let mut coords = Vec::with_capacity(out_frames * j * 3);
    for i in 0..out_frames {
        let pos = if out_frames == 1 {
            0.0
        } else {
            (i * (len - 1)) as f64 / (out_frames - 1) as f64
        };
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let hi = (lo + 1).min(len - 1);
        let (a, b) = ((start + lo) * j * 3, (start + hi) * j * 3);
        for k in 0..j * 3 {
            let v = if frac == 0.0 {
                src[a + k]
            } else {
                src[a + k] * (1.0 - frac) + src[b + k] * frac
            };
            coords.push(v);
        }
    }
    SkeletonSequence::new(out_frames, j, coords)
}

#[derive(Serialize, Deserialize)]
struct SidecarRecord {
    label: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    records: Vec<SidecarRecord>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `sequences` to `path` and its label sidecar.
pub fn save(path: &Path, sequences: &[LabeledSequence]) -> Result<()> {
    let (frames, joints) = sequences
        .first()
        .map_or((0, 0), |s| (s.sequence.frames(), s.sequence.joints()));
    if sequences
        .iter()
        .any(|s| s.sequence.frames() != frames || s.sequence.joints() != joints)
    {
        return Err(Error::Invalid("all sequences in a file must share frames and joints".into()));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + sequences.len() * frames * joints * 12);
    buf.extend_from_slice(SEQ_MAGIC);
    for v in [SEQ_VERSION, frames as u32, joints as u32, sequences.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in sequences {
        for &v in s.sequence.coords() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    let sidecar = Sidecar {
        version: SEQ_VERSION,
        records: sequences
            .iter()
            .map(|s| SidecarRecord { label: s.label, split: s.split })
            .collect(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads a file written by [`save`].
pub fn load(path: &Path) -> Result<Vec<LabeledSequence>> {
    let bytes = fs::read(path)?;
    let header_err = |detail: &str| Error::Header {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(header_err("file shorter than header"));
    }
    if &bytes[..8] != SEQ_MAGIC {
        return Err(header_err("bad magic bytes"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != SEQ_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: SEQ_VERSION,
        });
    }
    let (frames, joints, count) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let per = frames * joints * 3;
    let expected = HEADER_LEN + count * per * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(header_err("trailing bytes after payload"));
    }
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if sidecar.version != SEQ_VERSION {
        return Err(Error::Version {
            path: sidecar_path(path),
            found: sidecar.version,
            expected: SEQ_VERSION,
        });
    }
    if sidecar.records.len() != count {
        return Err(header_err(&format!(
            "sidecar lists {} records, payload holds {count}",
            sidecar.records.len()
        )));
    }
    let payload = &bytes[HEADER_LEN..];
    let mut out = Vec::with_capacity(count);
    for (i, rec) in sidecar.records.into_iter().enumerate() {
        let coords = payload[i * per * 4..(i + 1) * per * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        out.push(LabeledSequence {
            sequence: SkeletonSequence::new(frames, joints, coords)?,
            label: rec.label,
            split: rec.split,
        });
    }
    Ok(out)
}

/// Topology used by generated data.
pub fn synthetic_topology() -> Topology {
    Topology::body25()
}

//! The quantized geometric transformation family and batch expansion.
//!
//! A transform is applied as an inverse-map resampling about the image
//! center. The forward chain is shear, then aspect ratio, then scale, then
//! rotation, then translation. Pure quarter-turn rotations bypass the
//! resampler and run as exact pixel permutations.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use rand::Rng;

/// One quantized geometric transform. Rotation is a quarter-turn count
/// (CCW on screen); translations are fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub rotation: u8,
    pub scale: f64,
    pub aspect_ratio: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub shear: f64,
}

impl TransformSpec {
    pub fn identity() -> Self {
        TransformSpec {
            rotation: 0,
            scale: 1.0,
            aspect_ratio: 1.0,
            translate_x: 0.0,
            translate_y: 0.0,
            shear: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn rotation_degrees(&self) -> u32 {
        u32::from(self.rotation) * 90
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation > 3 {
            return Err(Error::argument("rotation must be a quarter-turn count in 0..=3"));
        }
        let finite = self.scale.is_finite()
            && self.aspect_ratio.is_finite()
            && self.translate_x.is_finite()
            && self.translate_y.is_finite()
            && self.shear.is_finite();
        if !finite {
            return Err(Error::argument("transform fields must be finite"));
        }
        if self.scale <= 0.0 || self.aspect_ratio <= 0.0 {
            return Err(Error::argument("scale and aspect_ratio must be positive"));
        }
        if self.translate_x.abs() > 1.0 || self.translate_y.abs() > 1.0 {
            return Err(Error::argument("translations must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Ordered list of distinct transforms; if the identity is present it sits
/// at index 0 (it is the reference transform for the invariance loss).
#[derive(Debug, Clone)]
pub struct TransformSet {
    pub name: String,
    pub specs: Vec<TransformSpec>,
}

impl TransformSet {
    pub fn new(name: impl Into<String>, specs: Vec<TransformSpec>) -> Result<Self> {
        if specs.len() < 2 {
            return Err(Error::argument("a transform set needs at least 2 members"));
        }
        for s in &specs {
            s.validate()?;
        }
        for i in 0..specs.len() {
            for j in (i + 1)..specs.len() {
                if specs[i] == specs[j] {
                    return Err(Error::argument(format!(
                        "duplicate transform at indices {i} and {j}"
                    )));
                }
            }
        }
        if let Some(pos) = specs.iter().position(TransformSpec::is_identity) {
            if pos != 0 {
                return Err(Error::argument("identity transform must sit at index 0"));
            }
        }
        Ok(TransformSet { name: name.into(), specs })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Uniform k-subset with the identity forced to index 0. The non-identity
    /// members keep their original relative order, so k = |set| returns the
    /// set unchanged.
    pub fn sample_subset<R: Rng>(&self, k: usize, rng: &mut R) -> Result<TransformSet> {
        if k < 2 {
            return Err(Error::argument("subset size must be at least 2"));
        }
        if k > self.specs.len() {
            return Err(Error::argument(format!(
                "subset size {k} exceeds set size {}",
                self.specs.len()
            )));
        }
        let rest: Vec<TransformSpec> = self
            .specs
            .iter()
            .copied()
            .filter(|s| !s.is_identity())
            .collect();
        if k - 1 > rest.len() {
            return Err(Error::argument("not enough non-identity transforms to sample"));
        }
        let mut idx: Vec<usize> = rand::seq::index::sample(rng, rest.len(), k - 1).into_vec();
        idx.sort_unstable();
        let mut specs = Vec::with_capacity(k);
        specs.push(TransformSpec::identity());
        specs.extend(idx.into_iter().map(|i| rest[i]));
        TransformSet::new(format!("{}-sub{k}", self.name), specs)
    }
}

pub const PRESET_NAMES: [&str; 8] =
    ["m3", "m4", "m8", "m12", "m16", "m20", "m24", "affine972"];

// Axis value lists, identity value first so nested enumeration puts the
// identity spec at index 0.
const ROTS: [u8; 4] = [0, 1, 2, 3];
const ARS: [f64; 3] = [1.0, 0.67, 1.33];
const SCALES: [f64; 2] = [1.0, 0.67];

fn rs(rotation: u8, scale: f64, aspect_ratio: f64) -> TransformSpec {
    TransformSpec { rotation, scale, aspect_ratio, ..TransformSpec::identity() }
}

pub fn build_preset(name: &str) -> Result<TransformSet> {
    let key = name.to_ascii_lowercase();
    let mut specs = Vec::new();
    match key.as_str() {
        "m3" => {
            for a in ARS {
                specs.push(rs(0, 1.0, a));
            }
        }
        "m4" => {
            for r in ROTS {
                specs.push(rs(r, 1.0, 1.0));
            }
        }
        "m8" => {
            for r in ROTS {
                for s in SCALES {
                    specs.push(rs(r, s, 1.0));
                }
            }
        }
        "m12" => {
            for a in ARS {
                for r in ROTS {
                    specs.push(rs(r, 1.0, a));
                }
            }
        }
        "m16" => {
            for a in ARS {
                for r in ROTS {
                    specs.push(rs(r, 1.0, a));
                }
            }
            for r in ROTS {
                specs.push(rs(r, 0.67, 1.0));
            }
        }
        "m20" => {
            for a in ARS {
                for r in ROTS {
                    specs.push(rs(r, 1.0, a));
                }
            }
            for r in ROTS {
                for a in [0.67, 1.33] {
                    specs.push(rs(r, 0.67, a));
                }
            }
        }
        "m24" => {
            for a in ARS {
                for r in ROTS {
                    for s in SCALES {
                        specs.push(rs(r, s, a));
                    }
                }
            }
        }
        "affine972" => {
            for r in ROTS {
                for tx in [0.0, -0.2, 0.2] {
                    for ty in [0.0, -0.2, 0.2] {
                        for s in [1.0, 0.67, 1.33] {
                            for a in ARS {
                                for sh in [0.0, -20.0, 20.0] {
                                    let mut t = rs(r, s, a);
                                    t.translate_x = tx;
                                    t.translate_y = ty;
                                    t.shear = sh;
                                    specs.push(t);
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => {
            return Err(Error::config(format!(
                "unknown transform preset '{name}' (expected one of {})",
                PRESET_NAMES.join(", ")
            )))
        }
    }
    TransformSet::new(key, specs)
}

// cos/sin for k quarter turns, exact.
const QCOS: [f64; 4] = [1.0, 0.0, -1.0, 0.0];
const QSIN: [f64; 4] = [0.0, 1.0, 0.0, -1.0];

// p -> m·p + t on (x, y) pixel coordinates, y increasing downward.
#[derive(Clone, Copy)]
struct Affine {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine {
    fn linear(m: [[f64; 2]; 2]) -> Self {
        Affine { m, t: [0.0, 0.0] }
    }

    fn compose(self, inner: Affine) -> Affine {
        let a = self.m;
        let b = inner.m;
        Affine {
            m: [
                [
                    a[0][0] * b[0][0] + a[0][1] * b[1][0],
                    a[0][0] * b[0][1] + a[0][1] * b[1][1],
                ],
                [
                    a[1][0] * b[0][0] + a[1][1] * b[1][0],
                    a[1][0] * b[0][1] + a[1][1] * b[1][1],
                ],
            ],
            t: [
                a[0][0] * inner.t[0] + a[0][1] * inner.t[1] + self.t[0],
                a[1][0] * inner.t[0] + a[1][1] * inner.t[1] + self.t[1],
            ],
        }
    }

    fn inverse(self) -> Affine {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let m = [[d / det, -b / det], [-c / det, a / det]];
        Affine {
            m,
            t: [
                -(m[0][0] * self.t[0] + m[0][1] * self.t[1]),
                -(m[1][0] * self.t[0] + m[1][1] * self.t[1]),
            ],
        }
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }
}

// Forward pixel map for `spec` on an h×w canvas:
// p_out = c + t + R·S·A·Sh·(p_in − c), center c = ((w−1)/2, (h−1)/2).
fn forward_map(spec: &TransformSpec, h: usize, w: usize) -> Affine {
    let (cos, sin) = (QCOS[spec.rotation as usize], QSIN[spec.rotation as usize]);
    let rot = Affine::linear([[cos, sin], [-sin, cos]]);
    let sc = Affine::linear([[spec.scale, 0.0], [0.0, spec.scale]]);
    let sa = spec.aspect_ratio.sqrt();
    let ar = Affine::linear([[sa, 0.0], [0.0, 1.0 / sa]]);
    let tan = spec.shear.to_radians().tan();
    let sh = Affine::linear([[1.0, tan], [0.0, 1.0]]);
    let lin = rot.compose(sc).compose(ar).compose(sh);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let tx = spec.translate_x * w as f64;
    let ty = spec.translate_y * h as f64;
    let lc = lin.apply([cx, cy]);
    Affine { m: lin.m, t: [cx + tx - lc[0] + lin.t[0], cy + ty - lc[1] + lin.t[1]] }
}

fn bilinear(img: &Array3<f32>, sy: f64, sx: f64, ch: usize) -> f32 {
    let (h, w, _) = img.dim();
    let y0 = sy.floor();
    let x0 = sx.floor();
    let dy = sy - y0;
    let dx = sx - x0;
    let mut acc = 0.0f64;
    for (oy, wy) in [(0i64, 1.0 - dy), (1, dy)] {
        for (ox, wx) in [(0i64, 1.0 - dx), (1, dx)] {
            let yy = y0 as i64 + oy;
            let xx = x0 as i64 + ox;
            if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                acc += wy * wx * f64::from(img[[yy as usize, xx as usize, ch]]);
            }
        }
    }
    acc as f32
}

fn rotate_quarter(img: &Array3<f32>, k: u8) -> Array3<f32> {
    let (h, w, c) = img.dim();
    match k {
        0 => img.clone(),
        2 => Array3::from_shape_fn((h, w, c), |(i, j, ch)| img[[h - 1 - i, w - 1 - j, ch]]),
        1 => Array3::from_shape_fn((h, w, c), |(i, j, ch)| img[[j, w - 1 - i, ch]]),
        3 => Array3::from_shape_fn((h, w, c), |(i, j, ch)| img[[h - 1 - j, i, ch]]),
        _ => unreachable!(),
    }
}

/// Warp one H×W×C image. Output keeps the input shape; samples falling
/// outside the source are zero.
pub fn apply_transform(img: &Array3<f32>, spec: &TransformSpec) -> Array3<f32> {
    let (h, w, c) = img.dim();
    debug_assert!(h >= 2 && w >= 2);
    let pure_rotation = spec.scale == 1.0
        && spec.aspect_ratio == 1.0
        && spec.translate_x == 0.0
        && spec.translate_y == 0.0
        && spec.shear == 0.0;
    if pure_rotation && (spec.rotation % 2 == 0 || h == w) {
        return rotate_quarter(img, spec.rotation);
    }
    let inv = forward_map(spec, h, w).inverse();
    let mut out = Array3::zeros((h, w, c));
    for r in 0..h {
        for col in 0..w {
            let [sx, sy] = inv.apply([col as f64, r as f64]);
            for ch in 0..c {
                out[[r, col, ch]] = bilinear(img, sy, sx, ch);
            }
        }
    }
    out
}

/// B·M images in transform-major order with per-block proxy labels.
#[derive(Debug, Clone)]
pub struct ExpandedBatch {
    pub images: Array4<f32>,
    pub class_labels: Vec<usize>,
    pub proxy_labels: Vec<usize>,
    pub instance_ids: Vec<usize>,
}

pub fn expand_batch(
    images: &[Array3<f32>],
    class_labels: &[usize],
    instance_ids: &[usize],
    set: &TransformSet,
) -> Result<ExpandedBatch> {
    let b = images.len();
    if b == 0 {
        return Err(Error::argument("expand_batch needs at least one image"));
    }
    if class_labels.len() != b || instance_ids.len() != b {
        return Err(Error::argument("labels and instance ids must match the batch size"));
    }
    let (h, w, c) = images[0].dim();
    let m = set.len();
    let mut out = Array4::zeros((b * m, h, w, c));
    let mut cls = Vec::with_capacity(b * m);
    let mut proxy = Vec::with_capacity(b * m);
    let mut ids = Vec::with_capacity(b * m);
    for (mi, spec) in set.specs.iter().enumerate() {
        for (bi, img) in images.iter().enumerate() {
            if img.dim() != (h, w, c) {
                return Err(Error::argument("all batch images must share one shape"));
            }
            out.index_axis_mut(ndarray::Axis(0), mi * b + bi)
                .assign(&apply_transform(img, spec));
            cls.push(class_labels[bi]);
            proxy.push(mi);
            ids.push(instance_ids[bi]);
        }
    }
    Ok(ExpandedBatch { images: out, class_labels: cls, proxy_labels: proxy, instance_ids: ids })
}

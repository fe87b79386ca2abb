//! Dataset ingestion, splits, augmentation, and a procedural synthetic
//! corpus for fast deterministic tests.
//!
//! The CIFAR-FS class split is vendored under `assets/cifar_fs/` from the
//! benchmark's published definition (64 train / 16 val / 20 test names,
//! one per line).

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const CIFAR100_FINE_LABELS: [&str; 100] = [
    "apple", "aquarium_fish", "baby", "bear", "beaver",
    "bed", "bee", "beetle", "bicycle", "bottle",
    "bowl", "boy", "bridge", "bus", "butterfly",
    "camel", "can", "castle", "caterpillar", "cattle",
    "chair", "chimpanzee", "clock", "cloud", "cockroach",
    "couch", "crab", "crocodile", "cup", "dinosaur",
    "dolphin", "elephant", "flatfish", "forest", "fox",
    "girl", "hamster", "house", "kangaroo", "keyboard",
    "lamp", "lawn_mower", "leopard", "lion", "lizard",
    "lobster", "man", "maple_tree", "motorcycle", "mountain",
    "mouse", "mushroom", "oak_tree", "orange", "orchid",
    "otter", "palm_tree", "pear", "pickup_truck", "pine_tree",
    "plain", "plate", "poppy", "porcupine", "possum",
    "rabbit", "raccoon", "ray", "road", "rocket",
    "rose", "sea", "seal", "shark", "shrew",
    "skunk", "skyscraper", "snail", "snake", "spider",
    "squirrel", "streetcar", "sunflower", "sweet_pepper", "table",
    "tank", "telephone", "television", "tiger", "tractor",
    "train", "trout", "tulip", "turtle", "wardrobe",
    "whale", "willow_tree", "wolf", "woman", "worm",
];

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 2 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Immutable image corpus. `instance_ids` are always the 0-based range, so
/// they double as memory-bank slot indices after a split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Array4<u8>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub instance_ids: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(images: Array4<u8>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let n = images.len_of(Axis(0));
        if labels.len() != n {
            return Err(Error::argument("one label per image required"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::argument(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        let instance_ids = (0..n).collect();
        Ok(LabeledDataset { images, labels, class_names, instance_ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, u8> {
        self.images.index_axis(Axis(0), i)
    }

    /// Image as f32 in [0, 1].
    pub fn image_f32(&self, i: usize) -> Array3<f32> {
        self.image(i).mapv(|v| f32::from(v) / 255.0)
    }

    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

/// Three pairwise-disjoint class-name lists.
#[derive(Debug, Clone)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn parse_names(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

impl SplitManifest {
    /// The vendored CIFAR-FS split (64/16/20).
    pub fn cifar_fs() -> Self {
        SplitManifest {
            train: parse_names(include_str!("../assets/cifar_fs/train.txt")),
            val: parse_names(include_str!("../assets/cifar_fs/val.txt")),
            test: parse_names(include_str!("../assets/cifar_fs/test.txt")),
        }
    }

    pub fn from_files(train: &Path, val: &Path, test: &Path) -> Result<Self> {
        Ok(SplitManifest {
            train: parse_names(&std::fs::read_to_string(train)?),
            val: parse_names(&std::fs::read_to_string(val)?),
            test: parse_names(&std::fs::read_to_string(test)?),
        })
    }

    pub fn validate(&self, class_names: &[String]) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for name in self.train.iter().chain(&self.val).chain(&self.test) {
            if !class_names.iter().any(|c| c == name) {
                return Err(Error::config(format!("split class '{name}' not in the dataset")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::config(format!("class '{name}' appears in two splits")));
            }
        }
        Ok(())
    }
}

fn take_split(dataset: &LabeledDataset, names: &[String]) -> Result<LabeledDataset> {
    let mut original_of = Vec::with_capacity(names.len());
    for name in names {
        let idx = dataset
            .class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::config(format!("split class '{name}' not in the dataset")))?;
        original_of.push(idx);
    }
    let mut keep = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in dataset.labels.iter().enumerate() {
        if let Some(new_label) = original_of.iter().position(|&o| o == l) {
            keep.push(i);
            labels.push(new_label);
        }
    }
    let (_, h, w, c) = dataset.images.dim();
    let mut images = Array4::zeros((keep.len(), h, w, c));
    for (dst, &src) in keep.iter().enumerate() {
        images.index_axis_mut(Axis(0), dst).assign(&dataset.image(src));
    }
    LabeledDataset::new(images, labels, names.to_vec())
}

/// Routes images by class per the manifest; labels and instance ids are
/// re-based inside each split.
pub fn apply_split(
    dataset: &LabeledDataset,
    manifest: &SplitManifest,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    manifest.validate(&dataset.class_names)?;
    Ok((
        take_split(dataset, &manifest.train)?,
        take_split(dataset, &manifest.val)?,
        take_split(dataset, &manifest.test)?,
    ))
}

/// Parses consecutive 3074-byte records: coarse label byte (ignored), fine
/// label byte, then 3072 pixel bytes channel-planar (R, G, B), each plane
/// row-major 32x32.
pub fn load_cifar100_binary(path: &Path) -> Result<LabeledDataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            offset: (buf.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
            message: format!(
                "file length {} is not a multiple of the {CIFAR_RECORD}-byte record size",
                buf.len()
            ),
        });
    }
    let n = buf.len() / CIFAR_RECORD;
    let mut images = Array4::zeros((n, CIFAR_SIDE, CIFAR_SIDE, 3));
    let mut labels = Vec::with_capacity(n);
    for rec in 0..n {
        let base = rec * CIFAR_RECORD;
        let fine = usize::from(buf[base + 1]);
        if fine >= 100 {
            return Err(Error::Format {
                offset: (base + 1) as u64,
                message: format!("fine label {fine} out of range"),
            });
        }
        labels.push(fine);
        for ch in 0..3 {
            for r in 0..CIFAR_SIDE {
                for c in 0..CIFAR_SIDE {
                    images[[rec, r, c, ch]] =
                        buf[base + 2 + ch * CIFAR_SIDE * CIFAR_SIDE + r * CIFAR_SIDE + c];
                }
            }
        }
    }
    let names = CIFAR100_FINE_LABELS.iter().map(|s| s.to_string()).collect();
    LabeledDataset::new(images, labels, names)
}

/// Writes the same record layout; the coarse label byte is set to 0. Only
/// 32x32x3 datasets are representable.
pub fn save_cifar100_binary(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let (_, h, w, c) = dataset.images.dim();
    if (h, w, c) != (CIFAR_SIDE, CIFAR_SIDE, 3) {
        return Err(Error::argument("CIFAR binary layout requires 32x32x3 images"));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..dataset.len() {
        let mut rec = Vec::with_capacity(CIFAR_RECORD);
        rec.push(0u8);
        rec.push(dataset.labels[i] as u8);
        let img = dataset.image(i);
        for ch in 0..3 {
            for r in 0..CIFAR_SIDE {
                for col in 0..CIFAR_SIDE {
                    rec.push(img[[r, col, ch]]);
                }
            }
        }
        out.write_all(&rec)?;
    }
    Ok(())
}

// Synthetic corpus. Class identity is a (color, shape, orientation bias)
// triple; instances jitter position, size, orientation, and brightness, so
// pixel centroids separate classes by color while shape and pose carry the
// rest of the signal.

const PALETTE: [[f32; 3]; 4] = [
    [220.0, 60.0, 50.0],
    [70.0, 200.0, 80.0],
    [60.0, 90.0, 220.0],
    [230.0, 200.0, 60.0],
];

fn shape_sdf(kind: usize, dx: f32, dy: f32, r: f32) -> f32 {
    match kind {
        0 => (dx * dx + dy * dy).sqrt() - r,
        1 => (dx.abs().max(dy.abs()) - 0.8 * r).abs() - 0.25 * r,
        2 => (dx.abs() - r).max(dy.abs() - 0.35 * r),
        _ => {
            let a = (dx.abs() - r).max(dy.abs() - 0.3 * r);
            let b = (dx.abs() - 0.3 * r).max(dy.abs() - r);
            a.min(b)
        }
    }
}

/// Procedurally rendered corpus, deterministic in `seed`.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> LabeledDataset {
    assert!(num_classes >= 1 && per_class >= 1 && image_size >= 8);
    let n = num_classes * per_class;
    let mut images = Array4::zeros((n, image_size, image_size, 3));
    let mut labels = Vec::with_capacity(n);
    let size = image_size as f32;
    for class in 0..num_classes {
        let color = PALETTE[class % PALETTE.len()];
        let kind = (class / PALETTE.len()) % 4;
        let orient_bias = ((class / (PALETTE.len() * 4)) % 4) as f32
            * std::f32::consts::FRAC_PI_2;
        for inst in 0..per_class {
            let idx = class * per_class + inst;
            let mut rng = rng::derive_rng(
                seed,
                &[domain::SYNTH_DATA, class as u64, inst as u64],
            );
            let cx = size / 2.0 + rng.random_range(-size / 8.0..size / 8.0);
            let cy = size / 2.0 + rng.random_range(-size / 8.0..size / 8.0);
            let r = size * rng.random_range(0.24..0.36);
            let theta = orient_bias + rng.random_range(-0.3f32..0.3);
            let brightness = rng.random_range(0.75f32..1.1);
            let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-18.0f32..18.0));
            let bg = rng.random_range(22.0f32..40.0);
            let (sin_t, cos_t) = theta.sin_cos();
            for row in 0..image_size {
                for col in 0..image_size {
                    let px = col as f32 - cx;
                    let py = row as f32 - cy;
                    let dx = cos_t * px + sin_t * py;
                    let dy = -sin_t * px + cos_t * py;
                    let cov = (0.5 - shape_sdf(kind, dx, dy, r)).clamp(0.0, 1.0);
                    // all four shape kinds have quarter-turn or mirror
                    // symmetries, so the shape alone cannot identify an
                    // applied rotation; a shading ramp along the local x
                    // axis plus a satellite dot anchor the orientation
                    let shade = 1.0 + 0.3 * (dx / r).clamp(-1.0, 1.0);
                    let (ddx, ddy) = (dx - 0.62 * r, dy + 0.62 * r);
                    let dot =
                        (0.5 - ((ddx * ddx + ddy * ddy).sqrt() - 0.17 * r)).clamp(0.0, 1.0);
                    let noise = rng.random_range(-10.0f32..10.0);
                    for ch in 0..3 {
                        let fg = (color[ch] + tint[ch]) * brightness * shade;
                        let v = (bg + noise) * (1.0 - cov) + fg * cov;
                        let v = v * (1.0 - dot) + 235.0 * brightness * dot;
                        images[[idx, row, col, ch]] = v.clamp(0.0, 255.0) as u8;
                    }
                }
            }
            labels.push(class);
        }
    }
    let names = (0..num_classes).map(|c| format!("synth-{c:02}")).collect();
    LabeledDataset::new(images, labels, names).unwrap()
}

/// One sampled draw of the standard augmentation. `no_op` reproduces the
/// input (after the u8 -> f32 conversion).
#[derive(Debug, Clone, Copy)]
pub struct AugmentDraws {
    pub crop_y: usize,
    pub crop_x: usize,
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

const PAD: usize = 4;

impl AugmentDraws {
    pub fn no_op() -> Self {
        AugmentDraws {
            crop_y: PAD,
            crop_x: PAD,
            flip: false,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        AugmentDraws {
            crop_y: rng.random_range(0..=2 * PAD),
            crop_x: rng.random_range(0..=2 * PAD),
            flip: rng.random_bool(0.5),
            brightness: rng.random_range(0.6f32..1.4),
            contrast: rng.random_range(0.6f32..1.4),
            saturation: rng.random_range(0.6f32..1.4),
        }
    }
}

fn reflect(mut p: i64, n: i64) -> usize {
    loop {
        if p < 0 {
            p = -p;
        } else if p >= n {
            p = 2 * n - 2 - p;
        } else {
            return p as usize;
        }
    }
}

fn luma(px: &[f32; 3]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Pad-4 reflect random crop, horizontal flip, then brightness, contrast,
/// saturation jitter in that fixed order. Output is f32 in [0, 1].
pub fn augment_with(image: &ArrayView3<'_, u8>, d: &AugmentDraws) -> Array3<f32> {
    let (h, w, c) = image.dim();
    let mut out = Array3::zeros((h, w, c));
    for r in 0..h {
        for col in 0..w {
            let src_r = reflect(d.crop_y as i64 + r as i64 - PAD as i64, h as i64);
            let src_c0 = if d.flip { w - 1 - col } else { col };
            let src_c = reflect(d.crop_x as i64 + src_c0 as i64 - PAD as i64, w as i64);
            for ch in 0..c {
                out[[r, col, ch]] = f32::from(image[[src_r, src_c, ch]]) / 255.0;
            }
        }
    }
    if c == 3 {
        let mut mean_luma = 0.0f32;
        for r in 0..h {
            for col in 0..w {
                mean_luma += luma(&[out[[r, col, 0]], out[[r, col, 1]], out[[r, col, 2]]]);
            }
        }
        mean_luma /= (h * w) as f32;
        for r in 0..h {
            for col in 0..w {
                let px = [out[[r, col, 0]], out[[r, col, 1]], out[[r, col, 2]]];
                let gray = luma(&px);
                for ch in 0..3 {
                    let mut v = px[ch] * d.brightness;
                    v = v * d.contrast + mean_luma * (1.0 - d.contrast);
                    v = v * d.saturation + gray * (1.0 - d.saturation);
                    out[[r, col, ch]] = v.clamp(0.0, 1.0);
                }
            }
        }
    } else {
        out.mapv_inplace(|v| (v * d.brightness).clamp(0.0, 1.0));
    }
    out
}

pub fn standard_augment<R: Rng>(image: &ArrayView3<'_, u8>, rng: &mut R) -> Array3<f32> {
    augment_with(image, &AugmentDraws::sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cifar_round_trip_is_bit_exact() {
        let ds = synth_dataset(5, 4, 32, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.bin");
        save_cifar100_binary(&ds, &path).unwrap();
        let back = load_cifar100_binary(&path).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn crafted_two_record_file_round_trips() {
        let mut buf = vec![0u8; 2 * CIFAR_RECORD];
        buf[1] = 3;
        buf[2] = 200; // first red pixel of record 0
        buf[CIFAR_RECORD + 1] = 97;
        buf[2 * CIFAR_RECORD - 1] = 55; // last blue pixel of record 1
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.bin");
        std::fs::write(&path, &buf).unwrap();
        let ds = load_cifar100_binary(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 97]);
        assert_eq!(ds.images[[0, 0, 0, 0]], 200);
        assert_eq!(ds.images[[1, 31, 31, 2]], 55);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; CIFAR_RECORD + 10]).unwrap();
        match load_cifar100_binary(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cifar_fs_manifest_is_64_16_20_disjoint() {
        let m = SplitManifest::cifar_fs();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (64, 16, 20));
        let names: Vec<String> = CIFAR100_FINE_LABELS.iter().map(|s| s.to_string()).collect();
        m.validate(&names).unwrap();
    }

    #[test]
    fn split_routes_and_rebases() {
        let ds = synth_dataset(6, 3, 32, 1);
        let manifest = SplitManifest {
            train: vec!["synth-00".into(), "synth-03".into()],
            val: vec!["synth-01".into()],
            test: vec!["synth-02".into(), "synth-04".into(), "synth-05".into()],
        };
        let (tr, va, te) = apply_split(&ds, &manifest).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (6, 3, 9));
        assert_eq!(tr.instance_ids, (0..6).collect::<Vec<_>>());
        assert!(tr.labels.iter().all(|&l| l < 2));
        // class synth-03 got re-labeled to 1 in train
        assert_eq!(tr.labels, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn overlapping_split_rejected() {
        let ds = synth_dataset(3, 2, 32, 1);
        let manifest = SplitManifest {
            train: vec!["synth-00".into(), "synth-01".into()],
            val: vec!["synth-01".into()],
            test: vec!["synth-02".into()],
        };
        assert!(apply_split(&ds, &manifest).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_dataset(16, 5, 32, 42);
        let b = synth_dataset(16, 5, 32, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 80);
        let by_class = a.indices_by_class();
        assert!(by_class.iter().all(|v| v.len() == 5));
    }

    #[test]
    fn noop_augment_only_converts_dtype() {
        let ds = synth_dataset(2, 2, 32, 3);
        let img = ds.image(0);
        let out = augment_with(&img, &AugmentDraws::no_op());
        for ((r, c, ch), v) in out.indexed_iter() {
            assert_eq!(*v, f32::from(img[[r, c, ch]]) / 255.0);
        }
    }

    #[test]
    fn double_flip_restores() {
        let ds = synth_dataset(2, 2, 32, 3);
        let img = ds.image(1);
        let flip = AugmentDraws { flip: true, ..AugmentDraws::no_op() };
        let once = augment_with(&img, &flip);
        let back = Array3::from_shape_fn(once.dim(), |(r, c, ch)| {
            once[[r, once.dim().1 - 1 - c, ch]]
        });
        let plain = augment_with(&img, &AugmentDraws::no_op());
        assert_eq!(back, plain);
    }

    #[test]
    fn augment_stays_in_bounds() {
        let ds = synth_dataset(4, 3, 32, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..ds.len() {
            let out = standard_augment(&ds.image(i), &mut rng);
            assert_eq!(out.dim(), (32, 32, 3));
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn centroid_classifier_beats_chance_on_held_out_half() {
        let ds = synth_dataset(8, 20, 32, 11);
        let by_class = ds.indices_by_class();
        let dim = 32 * 32 * 3;
        let mut centroids = vec![vec![0.0f64; dim]; 8];
        for (c, idxs) in by_class.iter().enumerate() {
            for &i in &idxs[..10] {
                for (j, v) in ds.image(i).iter().enumerate() {
                    centroids[c][j] += f64::from(*v) / 10.0;
                }
            }
        }
        let mut hits = 0;
        let mut total = 0;
        for (c, idxs) in by_class.iter().enumerate() {
            for &i in &idxs[10..] {
                let pix: Vec<f64> = ds.image(i).iter().map(|v| f64::from(*v)).collect();
                let best = (0..8)
                    .min_by(|&a, &b| {
                        let da: f64 =
                            centroids[a].iter().zip(&pix).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 =
                            centroids[b].iter().zip(&pix).map(|(x, y)| (x - y).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                hits += usize::from(best == c);
                total += 1;
            }
        }
        let acc = hits as f64 / total as f64;
        assert!(acc > 1.0 / 8.0, "centroid accuracy {acc} not above chance");
    }
}

//! Datasets, membership splits, and ingestion.
//!
//! Pixel tensors live in one [`SampleStore`]; every other artifact (splits,
//! checkpoints, feature dumps, reports) references samples by id only, so a
//! run can be re-materialized from its manifest without copying image data.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};
use crate::rng::stream;

/// Channel-major (C,H,W) image with pixels in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Image { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn filled(c: usize, h: usize, w: usize, v: f32) -> Self {
        Image { c, h, w, data: vec![v; c * h * w] }
    }

    #[inline]
    pub fn get(&self, ch: usize, y: usize, x: usize) -> f32 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, y: usize, x: usize, v: f32) {
        self.data[(ch * self.h + y) * self.w + x] = v;
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.c * self.h * self.w {
            return Err(Error::Shape(format!(
                "image buffer holds {} values, dims say {}x{}x{}",
                self.data.len(),
                self.c,
                self.h,
                self.w
            )));
        }
        for &v in &self.data {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Numeric(format!("pixel {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// One labeled image; `label` is ground truth and is hidden from the learner
/// for samples the split treats as unlabeled.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: usize,
    pub image: Image,
    pub label: usize,
}

/// Dense id-indexed collection of samples sharing one label space.
#[derive(Debug, Clone)]
pub struct SampleStore {
    samples: Vec<ImageSample>,
    class_count: usize,
}

impl SampleStore {
    pub fn new(samples: Vec<ImageSample>, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return config_err("class_count must be positive");
        }
        for (i, s) in samples.iter().enumerate() {
            if s.id != i {
                return Err(Error::Data(format!(
                    "sample ids must be dense and ordered: slot {i} holds id {}",
                    s.id
                )));
            }
            if s.label >= class_count {
                return Err(Error::Data(format!(
                    "sample {i} labeled {} but class_count is {class_count}",
                    s.label
                )));
            }
        }
        Ok(SampleStore { samples, class_count })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn get(&self, id: usize) -> &ImageSample {
        &self.samples[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageSample> {
        self.samples.iter()
    }
}

/// Four-way disjoint membership split plus the labeled subset of the target
/// training part. `labeled_mask` runs parallel to `target_train`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitBundle {
    pub target_train: Vec<usize>,
    pub labeled_mask: Vec<bool>,
    pub target_test: Vec<usize>,
    pub shadow_train: Vec<usize>,
    pub shadow_test: Vec<usize>,
    pub class_count: usize,
}

impl SplitBundle {
    pub fn labeled_ids(&self) -> Vec<usize> {
        self.target_train
            .iter()
            .zip(&self.labeled_mask)
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn unlabeled_ids(&self) -> Vec<usize> {
        self.target_train
            .iter()
            .zip(&self.labeled_mask)
            .filter(|(_, &m)| !m)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn validate(&self, store: &SampleStore) -> Result<()> {
        if self.labeled_mask.len() != self.target_train.len() {
            return Err(Error::Data("labeled_mask length differs from target_train".into()));
        }
        let parts = [
            &self.target_train,
            &self.target_test,
            &self.shadow_train,
            &self.shadow_test,
        ];
        let total: usize = parts.iter().map(|p| p.len()).sum();
        if total != store.len() {
            return Err(Error::Data(format!(
                "split covers {total} ids, store holds {}",
                store.len()
            )));
        }
        let mut seen = vec![false; store.len()];
        for part in parts {
            for &id in part {
                if id >= store.len() || seen[id] {
                    return Err(Error::Data(format!("id {id} missing from store or duplicated")));
                }
                seen[id] = true;
            }
        }
        let max = parts.iter().map(|p| p.len()).max().unwrap_or(0);
        let min = parts.iter().map(|p| p.len()).min().unwrap_or(0);
        if max - min > 1 {
            return Err(Error::Data("split part sizes differ by more than one".into()));
        }
        let mut class_seen = vec![false; self.class_count];
        for id in self.labeled_ids() {
            class_seen[store.get(id).label] = true;
        }
        if class_seen.iter().any(|&s| !s) {
            return Err(Error::Data("some class has no labeled sample".into()));
        }
        Ok(())
    }
}

/// Split a store into target/shadow train/test quarters and pick a stratified
/// labeled subset of the target training part.
///
/// Part sizes are equal up to remainder, handed out in the order target_train,
/// target_test, shadow_train, shadow_test. The labeled subset holds exactly
/// `labeled_count` ids with per-class counts differing by at most one; classes
/// with lower index absorb the remainder.
pub fn split_dataset(store: &SampleStore, labeled_count: usize, seed: u64) -> Result<SplitBundle> {
    let n = store.len();
    if n < 4 {
        return data_err(format!("need at least 4 samples to split, got {n}"));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, "split").rng(&[0]);
    ids.shuffle(&mut rng);

    let base = n / 4;
    let rem = n % 4;
    let mut sizes = [base; 4];
    for (i, s) in sizes.iter_mut().enumerate() {
        if i < rem {
            *s += 1;
        }
    }
    let mut cursor = 0usize;
    let mut take = |len: usize| {
        let part = ids[cursor..cursor + len].to_vec();
        cursor += len;
        part
    };
    let target_train = take(sizes[0]);
    let target_test = take(sizes[1]);
    let shadow_train = take(sizes[2]);
    let shadow_test = take(sizes[3]);

    let labels: Vec<usize> = target_train.iter().map(|&id| store.get(id).label).collect();
    let mask = stratified_mask(
        &target_train,
        &labels,
        store.class_count(),
        labeled_count,
        &mut stream(seed, "split").rng(&[1]),
    )?;

    let bundle = SplitBundle {
        target_train,
        labeled_mask: mask,
        target_test,
        shadow_train,
        shadow_test,
        class_count: store.class_count(),
    };
    bundle.validate(store)?;
    Ok(bundle)
}

/// Stratified selection of `labeled_count` positions out of `ids`; used for
/// the target labeled mask and for the shadow model's own labeled subset.
pub fn stratified_mask(
    ids: &[usize],
    labels: &[usize],
    class_count: usize,
    labeled_count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<bool>> {
    if labeled_count > ids.len() {
        return config_err(format!(
            "labeled_count {labeled_count} exceeds pool of {}",
            ids.len()
        ));
    }
    if labeled_count < class_count {
        return config_err(format!(
            "labeled_count {labeled_count} cannot cover {class_count} classes"
        ));
    }
    let base = labeled_count / class_count;
    let rem = labeled_count % class_count;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (pos, &lab) in labels.iter().enumerate() {
        by_class[lab].push(pos);
    }
    // Even per-class quotas, capped by what the pool actually holds; any
    // shortfall spills to the class with the most unlabeled headroom (lowest
    // index on ties), so the call succeeds whenever labeled_count <= pool.
    let mut quota: Vec<usize> = (0..class_count)
        .map(|c| (base + usize::from(c < rem)).min(by_class[c].len()))
        .collect();
    let mut deficit = labeled_count - quota.iter().sum::<usize>();
    while deficit > 0 {
        let c = (0..class_count)
            .filter(|&c| quota[c] < by_class[c].len())
            .max_by_key(|&c| (by_class[c].len() - quota[c], std::cmp::Reverse(c)))
            .expect("spill always finds capacity while labeled_count <= pool");
        quota[c] += 1;
        deficit -= 1;
    }
    let mut mask = vec![false; ids.len()];
    for (c, positions) in by_class.iter_mut().enumerate() {
        positions.shuffle(rng);
        for &pos in positions.iter().take(quota[c]) {
            mask[pos] = true;
        }
    }
    Ok(mask)
}

/// Which side of the audit a record sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    LabeledMember,
    UnlabeledMember,
    NonMember,
}

impl Subset {
    pub fn is_member(&self) -> bool {
        *self != Subset::NonMember
    }
}

/// One scored sample in an attack evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MembershipRecord {
    pub sample_id: usize,
    pub is_member: bool,
    pub subset: Subset,
    pub score: f64,
}

impl MembershipRecord {
    pub fn new(sample_id: usize, subset: Subset, score: f64) -> Self {
        // Non-membership and the nonmember subset imply each other.
        let is_member = subset != Subset::NonMember;
        MembershipRecord { sample_id, is_member, subset, score }
    }
}

const CIFAR_DIM: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_DIM * CIFAR_DIM;

/// Load a CIFAR-10 style binary batch: records of one label byte followed by
/// 3072 pixel bytes (three 32x32 planes, row-major). Ids follow file order.
pub fn load_cifar_binary(path: &Path) -> Result<Vec<ImageSample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        let complete = bytes.len() / CIFAR_RECORD;
        return data_err(format!(
            "{}: truncated record at byte offset {} ({} complete records, {} trailing bytes)",
            path.display(),
            complete * CIFAR_RECORD,
            complete,
            bytes.len() % CIFAR_RECORD
        ));
    }
    let mut samples = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        let mut image = Image::new(3, CIFAR_DIM, CIFAR_DIM);
        for (dst, &src) in image.data.iter_mut().zip(&rec[1..]) {
            *dst = f32::from(src) / 255.0;
        }
        samples.push(ImageSample { id: i, image, label });
    }
    Ok(samples)
}

/// Shape vocabulary for the synthetic dataset.
const SHAPE_COUNT: usize = 8;
const SYNTH_DIM: usize = 16;
const SYNTH_NOISE_SIGMA: f64 = 0.25;

/// Procedurally drawn colored-shape dataset (3-channel, `SYNTH_DIM` square);
/// label = shape class,
/// classes balanced. Every sample carries its own fixed noise field and
/// color/geometry jitter, so two samples of one class are never identical.
pub fn make_synthetic_dataset(n: usize, class_count: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if class_count == 0 || class_count > SHAPE_COUNT {
        return config_err(format!(
            "synthetic class_count must be in 1..={SHAPE_COUNT}, got {class_count}"
        ));
    }
    if n < class_count {
        return config_err(format!("need at least {class_count} samples, got {n}"));
    }
    let root = stream(seed, "synth");
    let mut samples = Vec::with_capacity(n);
    for id in 0..n {
        let label = id % class_count;
        let mut rng = root.rng(&[id as u64]);
        let image = draw_shape_sample(label, &mut rng);
        samples.push(ImageSample { id, image, label });
    }
    Ok(samples)
}

fn draw_shape_sample(shape: usize, rng: &mut impl Rng) -> Image {
    let d = SYNTH_DIM as i64;
    // Geometry scales with the canvas so the dataset stays recognizable at
    // any resolution: jitter ~d/6, shape radius between ~d/5 and ~d/3.
    let jit = (d * 5 / 32).max(1);
    let (size_lo, size_hi) = ((d * 6 / 32).max(2), (d * 11 / 32).max(3));
    let cx = d / 2 + rng.gen_range(-jit..=jit);
    let cy = d / 2 + rng.gen_range(-jit..=jit);
    let size = rng.gen_range(size_lo..=size_hi);

    // Dark-ish background, bright foreground; hue carries no class signal.
    let bg: [f32; 3] = [
        rng.gen_range(0.05..0.35),
        rng.gen_range(0.05..0.35),
        rng.gen_range(0.05..0.35),
    ];
    let mut fg: [f32; 3] = [
        rng.gen_range(0.4..1.0),
        rng.gen_range(0.4..1.0),
        rng.gen_range(0.4..1.0),
    ];
    // Keep at least one strong channel so the shape never vanishes into noise.
    let kmax = (0..3).max_by(|&a, &b| fg[a].total_cmp(&fg[b])).unwrap();
    fg[kmax] = fg[kmax].max(0.85);

    let mut img = Image::new(3, SYNTH_DIM, SYNTH_DIM);
    for y in 0..d {
        for x in 0..d {
            let inside = shape_covers(shape, x - cx, y - cy, size);
            let col = if inside { &fg } else { &bg };
            for ch in 0..3 {
                img.set(ch, y as usize, x as usize, col[ch]);
            }
        }
    }

    // Per-sample noise field: the identifying fingerprint a memorizing
    // model can latch onto.
    let noise = Normal::new(0.0, SYNTH_NOISE_SIGMA).expect("valid sigma");
    for v in img.data.iter_mut() {
        let z: f64 = noise.sample(rng);
        *v = (*v + z as f32).clamp(0.0, 1.0);
    }
    img
}

fn shape_covers(shape: usize, dx: i64, dy: i64, size: i64) -> bool {
    let r2 = dx * dx + dy * dy;
    match shape {
        // circle
        0 => r2 <= size * size,
        // square
        1 => dx.abs() <= size && dy.abs() <= size,
        // upward triangle
        2 => dy >= -size && dy <= size && dx.abs() * 2 <= size - dy + size,
        // plus
        3 => (dx.abs() <= size / 3 && dy.abs() <= size) || (dy.abs() <= size / 3 && dx.abs() <= size),
        // ring
        4 => r2 <= size * size && r2 >= (size / 2) * (size / 2),
        // diamond
        5 => dx.abs() + dy.abs() <= size,
        // two horizontal bars
        6 => dx.abs() <= size && (dy.abs() <= size / 4 || (dy.abs() >= size * 2 / 3 && dy.abs() <= size)),
        // 2x2 checker
        7 => dx.abs() <= size && dy.abs() <= size && ((dx >= 0) == (dy >= 0)),
        _ => unreachable!("shape index out of vocabulary"),
    }
}

//! Concept-annotated datasets: a synthetic generator, MNIST IDX ingestion,
//! MNIST-Add construction, incompleteness transforms and persistence.
//!
//! A [`Split`] stores inputs, concepts and labels as dense row-major
//! buffers together with the concept group partition. Datasets are written
//! as a directory holding `train.csv`, `test.csv` and `meta.json`. Each CSV
//! row is `x_0..x_{n-1}, c_0..c_{k-1}, y`.

use std::fs;
use std::path::{Path, PathBuf};

use conceptlab_tensor::RngStream;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::groups::Groups;

/// One annotated example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub c: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub n_inputs: usize,
    pub n_classes: usize,
    pub groups: Groups,
    pub x: Vec<f64>,
    pub c: Vec<f64>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn new(
        n_inputs: usize,
        n_classes: usize,
        groups: Groups,
        x: Vec<f64>,
        c: Vec<f64>,
        y: Vec<usize>,
    ) -> Result<Self> {
        let n = y.len();
        let k = groups.n_concepts();
        if x.len() != n * n_inputs || c.len() != n * k {
            return Err(Error::Data(format!(
                "{n} labels but {} input values ({n_inputs} per row) and {} concept values ({k} per row)",
                x.len(),
                c.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&v| v >= n_classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{n_classes}")));
        }
        if let Some(v) = c.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("concept value {v} is not binary")));
        }
        Ok(Self {
            n_inputs,
            n_classes,
            groups,
            x,
            c,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_concepts(&self) -> usize {
        self.groups.n_concepts()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_inputs..(i + 1) * self.n_inputs]
    }

    pub fn c_row(&self, i: usize) -> &[f64] {
        let k = self.n_concepts();
        &self.c[i * k..(i + 1) * k]
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            x: self.x_row(i).to_vec(),
            c: self.c_row(i).to_vec(),
            y: self.y[i],
        }
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            n_inputs: self.n_inputs,
            n_classes: self.n_classes,
            groups: self.groups.clone(),
            x: idx.iter().flat_map(|&i| self.x_row(i).iter().copied()).collect(),
            c: idx.iter().flat_map(|&i| self.c_row(i).iter().copied()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Fraction of rows where each concept is active.
    pub fn concept_frequencies(&self) -> Vec<f64> {
        let k = self.n_concepts();
        let mut f = vec![0.0; k];
        for row in self.c.chunks(k) {
            for (a, v) in f.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = self.len().max(1) as f64;
        f.iter().map(|v| v / n).collect()
    }

    /// Every row has exactly one active concept per group.
    pub fn is_one_hot_per_group(&self) -> bool {
        (0..self.len()).all(|i| {
            let c = self.c_row(i);
            self.groups
                .all()
                .iter()
                .all(|m| m.iter().filter(|&&j| c[j] == 1.0).count() == 1)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub test: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticTaskSpec),
    MnistAdd(MnistAddSpec),
    /// A dataset directory previously written by [`save_dataset`].
    Directory { path: PathBuf },
}

impl DatasetSpec {
    pub fn build(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(s) => {
                let (train, test) = generate_synthetic(s)?;
                Ok(Dataset {
                    spec: self.clone(),
                    train,
                    test,
                })
            }
            DatasetSpec::MnistAdd(s) => {
                let (train, test) = s.build()?;
                Ok(Dataset {
                    spec: self.clone(),
                    train,
                    test,
                })
            }
            DatasetSpec::Directory { path } => load_dataset(path),
        }
    }
}

fn default_seed() -> u64 {
    0
}

/// Synthetic concept task. Each group holds one active value drawn
/// uniformly; its evidence in `x` is the one-hot of the observed value plus
/// uniform jitter, where the observed value is replaced by a different one
/// with the group's noise rate. The label thresholds a weighted concept sum
/// (binary) or buckets it into `n_classes` equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub group_sizes: Vec<usize>,
    /// Per-group probability that the evidence shows a wrong value.
    pub noise: Vec<f64>,
    /// Per-concept label weights.
    pub weights: Vec<f64>,
    pub threshold: f64,
    #[serde(default = "two")]
    pub n_classes: usize,
    /// Half-width of the uniform jitter added to every evidence entry.
    pub jitter: f64,
    pub incomplete_fraction: f64,
    /// Explicit set of unannotated groups; drawn from the seed when absent.
    #[serde(default)]
    pub dropped_groups: Option<Vec<usize>>,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn two() -> usize {
    2
}

impl Default for SyntheticTaskSpec {
    /// 8 binary groups (16 concepts), half of them annotated.
    fn default() -> Self {
        let group_weights = [1.0, 1.3, 0.7, 1.1, 0.9, 1.2, 0.8, 1.0];
        Self {
            group_sizes: vec![2; 8],
            noise: vec![0.25, 0.35, 0.3, 0.4, 0.25, 0.35, 0.3, 0.4],
            weights: group_weights.iter().flat_map(|&w| [0.0, w]).collect(),
            threshold: 4.0,
            n_classes: 2,
            jitter: 0.45,
            incomplete_fraction: 0.5,
            dropped_groups: None,
            n_train: 4000,
            n_test: 10000,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let g = self.group_sizes.len();
        let k: usize = self.group_sizes.iter().sum();
        if g == 0 || self.group_sizes.contains(&0) {
            return Err(config_err("synthetic task needs nonempty groups"));
        }
        if self.noise.len() != g {
            return Err(config_err(format!("{} noise rates for {g} groups", self.noise.len())));
        }
        if self.noise.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(config_err("noise rates must lie in [0, 1]"));
        }
        if self.weights.len() != k {
            return Err(config_err(format!("{} weights for {k} concepts", self.weights.len())));
        }
        if self.weights.iter().any(|w| !w.is_finite()) || !self.threshold.is_finite() {
            return Err(config_err("weights and threshold must be finite"));
        }
        if !(0.0..1.0).contains(&self.incomplete_fraction) {
            return Err(config_err("incomplete_fraction must lie in [0, 1)"));
        }
        if self.n_classes < 2 {
            return Err(config_err("synthetic tasks need at least 2 classes"));
        }
        if !(self.jitter >= 0.0) {
            return Err(config_err("jitter must be non-negative"));
        }
        let (lo, hi) = self.score_range();
        if self.n_classes == 2 && !(self.threshold > lo && self.threshold <= hi) {
            return Err(config_err(format!(
                "threshold {} outside the achievable score range ({lo}, {hi}]",
                self.threshold
            )));
        }
        if self.n_classes > 2 && !(hi > lo) {
            return Err(config_err("weighted score is constant; labels would be degenerate"));
        }
        if let Some(d) = &self.dropped_groups {
            if d.iter().any(|&i| i >= g) {
                return Err(config_err("dropped group index out of range"));
            }
        }
        Ok(())
    }

    fn full_groups(&self) -> Groups {
        Groups::contiguous(&self.group_sizes).expect("sizes validated")
    }

    /// Smallest and largest attainable weighted sum.
    pub fn score_range(&self) -> (f64, f64) {
        let groups = self.full_groups();
        groups.all().iter().fold((0.0, 0.0), |(lo, hi), m| {
            let ws = m.iter().map(|&i| self.weights[i]);
            let min = ws.clone().fold(f64::INFINITY, f64::min);
            let max = ws.fold(f64::NEG_INFINITY, f64::max);
            (lo + min, hi + max)
        })
    }

    pub fn label(&self, c: &[f64]) -> usize {
        let s: f64 = c.iter().zip(&self.weights).map(|(a, w)| a * w).sum();
        if self.n_classes == 2 {
            return usize::from(s >= self.threshold);
        }
        let (lo, hi) = self.score_range();
        (((s - lo) / (hi - lo) * self.n_classes as f64).floor() as usize).min(self.n_classes - 1)
    }

    /// Groups whose annotations are withheld.
    pub fn dropped(&self) -> Vec<usize> {
        if let Some(d) = &self.dropped_groups {
            let mut d = d.clone();
            d.sort_unstable();
            d.dedup();
            return d;
        }
        let g = self.group_sizes.len();
        let n_drop = (self.incomplete_fraction * g as f64).round() as usize;
        let mut all: Vec<usize> = (0..g).collect();
        all.shuffle(&mut RngStream::new(self.seed).split_named("drop-groups"));
        let mut d = all[..n_drop.min(g - 1)].to_vec();
        d.sort_unstable();
        d
    }

    fn draw(&self, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
        let k: usize = self.group_sizes.iter().sum();
        let mut c = vec![0.0; k];
        let mut x = vec![0.0; k];
        let mut start = 0;
        for (g, &s) in self.group_sizes.iter().enumerate() {
            let v = rng.gen_range(0..s);
            c[start + v] = 1.0;
            let observed = if s > 1 && rng.gen_bool(self.noise[g]) {
                (v + rng.gen_range(1..s)) % s
            } else {
                v
            };
            for j in 0..s {
                let e = if j == observed { 1.0 } else { 0.0 };
                let jitter = if self.jitter > 0.0 {
                    rng.gen_range(-self.jitter..=self.jitter)
                } else {
                    0.0
                };
                x[start + j] = e + jitter;
            }
            start += s;
        }
        (x, c)
    }
}

/// Train and test splits of a synthetic task. Each sample uses its own rng
/// stream, so generation is a pure function of the spec.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<(Split, Split)> {
    spec.validate()?;
    let full = spec.full_groups();
    let root = RngStream::new(spec.seed);
    let make = |name: &str, n: usize| -> Result<Split> {
        let stream = root.split_named(name);
        let mut x = Vec::new();
        let mut c = Vec::new();
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let (xi, ci) = spec.draw(&mut stream.split(i as u64));
            y.push(spec.label(&ci));
            x.extend(xi);
            c.extend(ci);
        }
        let n_inputs = full.n_concepts();
        let split = Split::new(n_inputs, spec.n_classes, full.clone(), x, c, y)?;
        make_incomplete(&split, &spec.dropped())
    };
    Ok((make("train", spec.n_train)?, make("test", spec.n_test)?))
}

/// Removes the concept columns of `drop` and renumbers the remaining groups.
pub fn make_incomplete(split: &Split, drop: &[usize]) -> Result<Split> {
    let (groups, kept) = split.groups.without(drop)?;
    let k = split.n_concepts();
    let c = split
        .c
        .chunks(k)
        .flat_map(|row| kept.iter().map(move |&j| row[j]))
        .collect();
    Split::new(split.n_inputs, split.n_classes, groups, split.x.clone(), c, split.y.clone())
}

/// Deterministic stratified split into `(train, validation)` with
/// `round(fraction * n)` validation rows. Both keep the input order.
pub fn split_validation(split: &Split, fraction: f64, seed: u64) -> Result<(Split, Split)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(config_err(format!("validation fraction {fraction} outside [0, 1]")));
    }
    let n = split.len();
    let n_val = (fraction * n as f64).round() as usize;
    let rng = RngStream::new(seed).split_named("validation");
    // Every class is shuffled, then positions are interleaved by their
    // relative rank so that any prefix is close to stratified.
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for class in 0..split.n_classes {
        let mut idx: Vec<usize> = (0..n).filter(|&i| split.y[i] == class).collect();
        idx.shuffle(&mut rng.split(class as u64));
        let m = idx.len() as f64;
        keyed.extend(idx.iter().enumerate().map(|(j, &i)| ((j as f64 + 0.5) / m, class, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut val: Vec<usize> = keyed[..n_val].iter().map(|t| t.2).collect();
    let mut train: Vec<usize> = keyed[n_val..].iter().map(|t| t.2).collect();
    val.sort_unstable();
    train.sort_unstable();
    Ok((split.subset(&train), split.subset(&val)))
}

/// Decoded IDX file: `dims` from the header and unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub fn parse_idx(bytes: &[u8], path: &str) -> Result<IdxArray> {
    let err = |offset: usize, msg: &str| Error::Idx {
        path: path.to_string(),
        offset,
        msg: msg.to_string(),
    };
    let word = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| err(offset, "truncated header"))
    };
    let magic = word(0)?;
    let n_dims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        _ => return Err(err(0, &format!("bad magic 0x{magic:08x}"))),
    };
    let dims = (0..n_dims)
        .map(|d| word(4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * n_dims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != expected {
        let at = start + payload.len().min(expected);
        return Err(err(
            at,
            &format!("payload holds {} bytes but the header declares {expected}", payload.len()),
        ));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

pub fn load_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path)?;
    parse_idx(&bytes, &path.display().to_string())
}

/// Digit images scaled to `[0, 1]` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitPool {
    pub side: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl DigitPool {
    pub fn from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Self> {
        if images.dims.len() != 3 || labels.dims.len() != 1 {
            return Err(Error::Data("expected an image file and a label file".into()));
        }
        let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
        if h != w {
            return Err(Error::Data(format!("images are {h}x{w}, expected square")));
        }
        if labels.dims[0] != n {
            return Err(Error::Data(format!("{n} images but {} labels", labels.dims[0])));
        }
        if let Some(&l) = labels.data.iter().find(|&&l| l > 9) {
            return Err(Error::Data(format!("digit label {l} outside 0..=9")));
        }
        let images = images
            .data
            .chunks(h * w)
            .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
            .collect();
        Ok(Self {
            side: h,
            images,
            labels: labels.data.clone(),
        })
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        Self::from_idx(&load_idx(images)?, &load_idx(labels)?)
    }
}

/// Average-pools a square image by `factor` in each direction.
pub fn average_pool(img: &[f64], side: usize, factor: usize) -> Vec<f64> {
    let out = side / factor;
    let mut v = vec![0.0; out * out];
    for r in 0..out * factor {
        for col in 0..out * factor {
            v[(r / factor) * out + col / factor] += img[r * side + col];
        }
    }
    let area = (factor * factor) as f64;
    v.iter().map(|s| s / area).collect()
}

pub const MNIST_ADD_CEILINGS: [usize; 12] = [2, 2, 2, 2, 4, 4, 4, 4, 9, 9, 9, 9];

fn default_ceilings() -> Vec<usize> {
    MNIST_ADD_CEILINGS.to_vec()
}

fn default_threshold() -> usize {
    30
}

fn default_pool() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnistAddSpec {
    #[serde(default = "default_ceilings")]
    pub ceilings: Vec<usize>,
    #[serde(default = "default_threshold")]
    pub threshold: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Directory holding the four standard MNIST IDX files.
    pub idx_dir: PathBuf,
    /// Pooling factor applied to each digit (28 / 4 = 7x7).
    #[serde(default = "default_pool")]
    pub pool: usize,
    /// Number of groups whose annotations are withheld (0 for the complete
    /// task, 4 for the incomplete one).
    #[serde(default)]
    pub drop_groups: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl MnistAddSpec {
    pub fn new(idx_dir: impl Into<PathBuf>) -> Self {
        Self {
            ceilings: default_ceilings(),
            threshold: default_threshold(),
            n_train: 12_000,
            n_test: 10_000,
            idx_dir: idx_dir.into(),
            pool: default_pool(),
            drop_groups: 0,
            seed: 0,
        }
    }

    pub fn groups(&self) -> Groups {
        let widths: Vec<usize> = self.ceilings.iter().map(|c| c + 1).collect();
        Groups::contiguous(&widths).expect("nonempty widths")
    }

    pub fn build(&self) -> Result<(Split, Split)> {
        let file = |name: &str| self.idx_dir.join(name);
        let train = DigitPool::load(&file("train-images-idx3-ubyte"), &file("train-labels-idx1-ubyte"))?;
        let test = DigitPool::load(&file("t10k-images-idx3-ubyte"), &file("t10k-labels-idx1-ubyte"))?;
        self.build_from_pools(&train, &test)
    }

    pub fn build_from_pools(&self, train: &DigitPool, test: &DigitPool) -> Result<(Split, Split)> {
        let root = RngStream::new(self.seed);
        let tr = build_mnist_add(self, train, self.n_train, &mut root.split_named("train"))?;
        let te = build_mnist_add(self, test, self.n_test, &mut root.split_named("test"))?;
        if self.drop_groups == 0 {
            return Ok((tr, te));
        }
        let drop = self.incomplete_drop_set()?;
        Ok((make_incomplete(&tr, &drop)?, make_incomplete(&te, &drop)?))
    }

    /// Seed-chosen set of `drop_groups` groups to withhold. With the
    /// standard ceilings and four dropped groups the draw is restricted to
    /// sets leaving 54 concepts.
    pub fn incomplete_drop_set(&self) -> Result<Vec<usize>> {
        let g = self.ceilings.len();
        if self.drop_groups >= g {
            return Err(config_err("cannot drop every group"));
        }
        let widths: Vec<usize> = self.ceilings.iter().map(|c| c + 1).collect();
        let total: usize = widths.iter().sum();
        let target = (self.ceilings == MNIST_ADD_CEILINGS && self.drop_groups == 4).then_some(total - 54);
        let mut rng = RngStream::new(self.seed).split_named("drop-groups");
        for _ in 0..100_000 {
            let mut all: Vec<usize> = (0..g).collect();
            all.shuffle(&mut rng);
            let mut d = all[..self.drop_groups].to_vec();
            d.sort_unstable();
            if target.map_or(true, |t| d.iter().map(|&i| widths[i]).sum::<usize>() == t) {
                return Ok(d);
            }
        }
        Err(config_err("no drop set satisfies the concept-count constraint"))
    }
}

/// Samples `n` MNIST-Add examples. Each operand image is drawn uniformly
/// from the pool images whose digit respects the slot's ceiling.
pub fn build_mnist_add(spec: &MnistAddSpec, pool: &DigitPool, n: usize, rng: &mut RngStream) -> Result<Split> {
    if spec.pool == 0 || pool.side % spec.pool != 0 {
        return Err(config_err(format!("pool factor {} does not divide {}", spec.pool, pool.side)));
    }
    let admissible: Vec<Vec<usize>> = spec
        .ceilings
        .iter()
        .map(|&ceil| (0..pool.labels.len()).filter(|&i| usize::from(pool.labels[i]) <= ceil).collect())
        .collect();
    if let Some(slot) = admissible.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("no digit images admissible for operand {slot}")));
    }
    // Pooled images are computed once per pool entry.
    let pooled: Vec<Vec<f64>> = pool
        .images
        .iter()
        .map(|img| average_pool(img, pool.side, spec.pool))
        .collect();
    let groups = spec.groups();
    let k = groups.n_concepts();
    let per = (pool.side / spec.pool).pow(2);
    let mut x = Vec::with_capacity(n * per * spec.ceilings.len());
    let mut c = vec![0.0; n * k];
    let mut y = Vec::with_capacity(n);
    for s in 0..n {
        let mut sum = 0;
        for (slot, adm) in admissible.iter().enumerate() {
            let img = adm[rng.gen_range(0..adm.len())];
            let digit = usize::from(pool.labels[img]);
            sum += digit;
            c[s * k + groups.members(slot)[digit]] = 1.0;
            x.extend_from_slice(&pooled[img]);
        }
        y.push(usize::from(sum >= spec.threshold));
    }
    Split::new(per * spec.ceilings.len(), 2, groups, x, c, y)
}

/// Digit value of every operand, recovered from the one-hot concepts.
pub fn operand_values(split: &Split, row: usize) -> Vec<usize> {
    let c = split.c_row(row);
    split
        .groups
        .all()
        .iter()
        .map(|m| m.iter().position(|&j| c[j] == 1.0).unwrap_or(0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetMeta {
    spec: DatasetSpec,
    n_inputs: usize,
    n_classes: usize,
    groups: Groups,
}

pub fn write_split_csv(split: &Split, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = split.n_concepts();
    let header: Vec<String> = (0..split.n_inputs)
        .map(|i| format!("x_{i}"))
        .chain((0..k).map(|i| format!("c_{i}")))
        .chain(std::iter::once("y".to_string()))
        .collect();
    w.write_record(&header)?;
    for i in 0..split.len() {
        let rec: Vec<String> = split
            .x_row(i)
            .iter()
            .chain(split.c_row(i))
            .map(f64::to_string)
            .chain(std::iter::once(split.y[i].to_string()))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split_csv(path: &Path, n_inputs: usize, n_classes: usize, groups: Groups) -> Result<Split> {
    let mut r = csv::Reader::from_path(path)?;
    let k = groups.n_concepts();
    let width = r.headers()?.len();
    if width != n_inputs + k + 1 {
        return Err(Error::Data(format!(
            "{}: {width} columns, expected {}",
            path.display(),
            n_inputs + k + 1
        )));
    }
    let (mut x, mut c, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |col: usize| Error::Data(format!("{}: row {}, column {col} is not numeric", path.display(), line + 1));
        for (j, field) in rec.iter().enumerate() {
            if j < n_inputs {
                x.push(field.parse::<f64>().map_err(|_| bad(j))?);
            } else if j < n_inputs + k {
                c.push(field.parse::<f64>().map_err(|_| bad(j))?);
            } else {
                y.push(field.parse::<usize>().map_err(|_| bad(j))?);
            }
        }
    }
    Split::new(n_inputs, n_classes, groups, x, c, y)
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        spec: data.spec.clone(),
        n_inputs: data.train.n_inputs,
        n_classes: data.train.n_classes,
        groups: data.train.groups.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    write_split_csv(&data.train, &dir.join("train.csv"))?;
    write_split_csv(&data.test, &dir.join("test.csv"))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let load = |name: &str| read_split_csv(&dir.join(name), meta.n_inputs, meta.n_classes, meta.groups.clone());
    Ok(Dataset {
        train: load("train.csv")?,
        test: load("test.csv")?,
        spec: meta.spec,
    })
}

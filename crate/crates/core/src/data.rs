//! Synthetic domain-shifted datasets and CSV ingestion.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    /// Ground truth; for target data only the evaluator may read it.
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Option<Vec<usize>>, domain: Domain) -> Result<Self> {
        if inputs.ndim() != 2 {
            return Err(Error::contract("dataset inputs must be a [n, dim] matrix"));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::contract(format!("{} labels for {} samples", l.len(), inputs.rows())));
            }
        }
        Ok(LabeledDataset { inputs, labels, domain })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// `max(label) + 1`, or `None` when unlabeled.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l.iter().max()).map(|m| m + 1)
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::contract("labels are required for this operation"))
    }

    /// Copy without ground truth.
    pub fn unlabeled(&self) -> LabeledDataset {
        LabeledDataset { inputs: self.inputs.clone(), labels: None, domain: self.domain }
    }

    /// Features then optional integer label; values in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.len() {
            let row: Vec<String> = self.inputs.row(i).iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&row.join(","));
            if let Some(l) = &self.labels {
                let _ = write!(s, ",{}", l[i]);
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// How the target domain differs from the source.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    /// Added after rotation; length `in_dim` (or empty for no translation).
    pub translation: Vec<f64>,
    /// Rotation of the first two coordinates about the origin, radians.
    pub rotation: f64,
    /// Target class proportions; must sum to 1.
    pub class_ratios: Vec<f64>,
}

impl DomainShift {
    pub fn none(k: usize) -> Self {
        DomainShift { translation: Vec::new(), rotation: 0.0, class_ratios: vec![1.0 / k as f64; k] }
    }
}

/// Class ratios decreasing linearly so the rarest class has `1 - imbalance`
/// times the mass of the most common one.
pub fn linear_imbalance(k: usize, imbalance: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|c| 1.0 - imbalance * if k > 1 { c as f64 / (k - 1) as f64 } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobParams {
    pub n_classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub in_dim: usize,
    /// Class means sit on a circle of this radius in the first two coordinates.
    pub radius: f64,
    /// Isotropic standard deviation of every blob.
    pub std: f64,
    pub shift: DomainShift,
}

impl BlobParams {
    pub fn desk_default() -> Self {
        BlobParams {
            n_classes: 4,
            n_source: 600,
            n_target: 600,
            in_dim: 2,
            radius: 3.0,
            std: 0.6,
            shift: DomainShift::none(4),
        }
    }

    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / self.n_classes as f64;
        let mut m = vec![0.0; self.in_dim];
        m[0] = self.radius * angle.cos();
        m[1] = self.radius * angle.sin();
        m
    }

    /// Image of a source point under the domain shift.
    pub fn apply_shift(&self, x: &mut [f64]) {
        let (s, c) = self.shift.rotation.sin_cos();
        let (a, b) = (x[0], x[1]);
        x[0] = c * a - s * b;
        x[1] = s * a + c * b;
        for (v, t) in x.iter_mut().zip(&self.shift.translation) {
            *v += t;
        }
    }
}

/// Splits `n` into per-class counts proportional to `ratios` (largest remainder).
pub fn class_counts(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = n - counts.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[c] += 1;
        missing -= 1;
    }
    counts
}

fn check_ratios(ratios: &[f64], k: usize) -> Result<()> {
    if ratios.len() != k {
        return Err(Error::config(format!("{} class ratios for {k} classes", ratios.len())));
    }
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::config("class ratios must be non-negative"));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!("class ratios sum to {total}, expected 1")));
    }
    Ok(())
}

fn shuffled_dataset(mut rows: Vec<(Vec<f64>, usize)>, dim: usize, domain: Domain, rng: &mut impl Rng) -> LabeledDataset {
    rows.shuffle(rng);
    let labels = rows.iter().map(|r| r.1).collect();
    let data = rows.into_iter().flat_map(|r| r.0).collect::<Vec<_>>();
    let n = data.len() / dim.max(1);
    LabeledDataset::new(Tensor::new(vec![n, dim], data).expect("consistent shape"), Some(labels), domain)
        .expect("labels match rows")
}

/// Source: `K` balanced Gaussian blobs. Target: fresh draws from the same
/// blobs, resampled with `shift.class_ratios` and moved by the shift.
pub fn gen_shifted_blobs(seed: u64, params: &BlobParams) -> Result<(LabeledDataset, LabeledDataset)> {
    let k = params.n_classes;
    if k < 2 {
        return Err(Error::config("blob datasets need at least two classes"));
    }
    if params.in_dim < 2 {
        return Err(Error::config("blob datasets need in_dim >= 2"));
    }
    if !params.shift.translation.is_empty() && params.shift.translation.len() != params.in_dim {
        return Err(Error::config(format!(
            "translation has {} entries, in_dim is {}",
            params.shift.translation.len(),
            params.in_dim
        )));
    }
    check_ratios(&params.shift.class_ratios, k)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut x = params.class_mean(class);
        for v in &mut x {
            let e: f64 = StandardNormal.sample(rng);
            *v += params.std * e;
        }
        x
    };

    let mut source_rows = Vec::with_capacity(params.n_source);
    for (class, count) in class_counts(params.n_source, &vec![1.0 / k as f64; k]).into_iter().enumerate() {
        for _ in 0..count {
            source_rows.push((draw(class, &mut rng), class));
        }
    }
    let mut target_rows = Vec::with_capacity(params.n_target);
    for (class, count) in class_counts(params.n_target, &params.shift.class_ratios).into_iter().enumerate() {
        for _ in 0..count {
            let mut x = draw(class, &mut rng);
            params.apply_shift(&mut x);
            target_rows.push((x, class));
        }
    }
    let source = shuffled_dataset(source_rows, params.in_dim, Domain::Source, &mut rng);
    let target = shuffled_dataset(target_rows, params.in_dim, Domain::Target, &mut rng);
    Ok((source, target))
}

/// Side length of the bar images.
pub const BAR_GRID_SIDE: usize = 8;

/// Bar prototypes as (start row, start col, row step, col step, length).
/// None of them is symmetric under a quarter or half turn, so the relative
/// rotation between an image and its rotated copy is always identifiable.
const BAR_PROTOTYPES: [(i32, i32, i32, i32, i32); 8] = [
    (1, 1, 0, 1, 5),
    (2, 6, 1, 0, 5),
    (2, 1, 1, 1, 5),
    (1, 6, 1, -1, 5),
    (5, 2, 0, 1, 5),
    (0, 2, 1, 0, 5),
    (0, 3, 1, 1, 5),
    (3, 7, 1, -1, 5),
];

pub const MAX_BAR_CLASSES: usize = BAR_PROTOTYPES.len();

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarDomain {
    /// Stroke width in pixels (>= 1).
    pub thickness: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

/// Noise-free image of a class, flattened row-major.
pub fn bar_prototype(class: usize, thickness: usize) -> Vec<f64> {
    let side = BAR_GRID_SIDE as i32;
    let (r0, c0, dr, dc, len) = BAR_PROTOTYPES[class];
    // widen perpendicular to the stroke
    let (pr, pc) = if dr == 0 { (1, 0) } else if dc == 0 { (0, -1) } else { (0, 1) };
    let mut img = vec![0.0; BAR_GRID_SIDE * BAR_GRID_SIDE];
    for step in 0..len {
        for w in 0..thickness.max(1) as i32 {
            let r = r0 + step * dr + w * pr;
            let c = c0 + step * dc + w * pc;
            if (0..side).contains(&r) && (0..side).contains(&c) {
                img[(r * side + c) as usize] = 1.0;
            }
        }
    }
    img
}

/// `n` flattened 8x8 bar images, classes balanced and shuffled.
pub fn gen_bar_images(seed: u64, n_classes: usize, n: usize, domain: BarDomain, tag: Domain) -> Result<LabeledDataset> {
    if !(2..=MAX_BAR_CLASSES).contains(&n_classes) {
        return Err(Error::config(format!("bar images support 2..={MAX_BAR_CLASSES} classes, got {n_classes}")));
    }
    if domain.thickness == 0 || domain.noise.is_nan() || domain.noise < 0.0 {
        return Err(Error::config("bar thickness must be >= 1 and noise >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..n_classes).map(|c| bar_prototype(c, domain.thickness)).collect();
    let mut rows = Vec::with_capacity(n);
    for (class, count) in class_counts(n, &vec![1.0 / n_classes as f64; n_classes]).into_iter().enumerate() {
        for _ in 0..count {
            let mut x = prototypes[class].clone();
            if domain.noise > 0.0 {
                for v in &mut x {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += domain.noise * e;
                }
            }
            rows.push((x, class));
        }
    }
    Ok(shuffled_dataset(rows, BAR_GRID_SIDE * BAR_GRID_SIDE, tag, &mut rng))
}

/// Counter-clockwise quarter turns of a square row-major grid:
/// `out[i][j] = in[j][n - 1 - i]` per turn, so `[[a, b], [c, d]]` becomes
/// `[[b, d], [a, c]]`.
pub fn rotate90(grid: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    if grid.ndim() != 2 || grid.shape()[0] != grid.shape()[1] {
        return Err(Error::contract(format!("rotate90 needs a square grid, got {:?}", grid.shape())));
    }
    let n = grid.shape()[0];
    let rotated = rotate_flat(grid.data(), n, quarter_turns);
    Tensor::new(vec![n, n], rotated)
}

/// [`rotate90`] on a flattened `side x side` grid.
pub fn rotate_flat(data: &[f64], side: usize, quarter_turns: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut next = vec![0.0; cur.len()];
        for i in 0..side {
            for j in 0..side {
                next[i * side + j] = cur[j * side + (side - 1 - i)];
            }
        }
        cur = next;
    }
    cur
}

/// Side length of a square grid with `dim` pixels, if there is one.
pub fn grid_side(dim: usize) -> Option<usize> {
    let s = (dim as f64).sqrt().round() as usize;
    (s * s == dim && s > 0).then_some(s)
}

/// Parses comma-separated float rows, optionally with a trailing integer
/// label. The row width is fixed by the first row.
pub fn parse_csv_dataset(text: &str, has_labels: bool, domain: Domain, origin: &str) -> Result<LabeledDataset> {
    let err = |line: usize, msg: String| Error::Parse { path: origin.to_string(), line, msg };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        let n_features = if has_labels { fields.len().saturating_sub(1) } else { fields.len() };
        if n_features == 0 {
            return Err(err(line, "row has no feature columns".into()));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(err(line, format!("expected {w} fields, found {}", fields.len())));
            }
            _ => {}
        }
        for f in &fields[..n_features] {
            let v: f64 = f.parse().map_err(|_| err(line, format!("non-numeric field '{f}'")))?;
            if !v.is_finite() {
                return Err(err(line, format!("non-finite field '{f}'")));
            }
            data.push(v);
        }
        if has_labels {
            let f = fields[n_features];
            labels.push(f.parse::<usize>().map_err(|_| err(line, format!("label '{f}' is not a class index")))?);
        }
        rows += 1;
    }
    let Some(w) = width else {
        return Err(err(1, "empty dataset".into()));
    };
    let dim = if has_labels { w - 1 } else { w };
    let inputs = Tensor::new(vec![rows, dim], data)?;
    LabeledDataset::new(inputs, has_labels.then_some(labels), domain)
}

pub fn load_csv_dataset(path: &Path, has_labels: bool, domain: Domain) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv_dataset(&text, has_labels, domain, &path.display().to_string())
}

/// Preset shifted-blob benchmarks.
pub mod presets {
    use super::*;

    /// Translation plus a 10% label imbalance.
    pub fn desk_blobs() -> BlobParams {
        BlobParams {
            shift: DomainShift { translation: vec![1.5, 1.0], rotation: 0.0, class_ratios: linear_imbalance(4, 0.1) },
            ..BlobParams::desk_default()
        }
    }

    /// Rotation, translation and wider blobs; enough boundary samples that
    /// a few percent of the target set holds a confident conflict at the
    /// start of adaptation.
    pub fn conflict_rich_blobs() -> BlobParams {
        BlobParams {
            std: 0.7,
            shift: DomainShift { translation: vec![1.5, 1.0], rotation: 0.45, class_ratios: linear_imbalance(4, 0.1) },
            ..BlobParams::desk_default()
        }
    }

    pub const BAR_SOURCE: BarDomain = BarDomain { thickness: 1, noise: 0.1 };
    pub const BAR_TARGET: BarDomain = BarDomain { thickness: 2, noise: 0.2 };
    /// Added to the seed of the target bars so both domains draw independent noise.
    pub const BAR_TARGET_SEED_OFFSET: u64 = 1000;

    /// Thin clean source bars and thick noisier target bars, 4 classes, 600 each.
    pub fn desk_bars(seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let source = gen_bar_images(seed, 4, 600, BAR_SOURCE, Domain::Source)?;
        let target = gen_bar_images(seed.wrapping_add(BAR_TARGET_SEED_OFFSET), 4, 600, BAR_TARGET, Domain::Target)?;
        Ok((source, target))
    }
}

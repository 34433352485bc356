//! Centroid pseudo-labels, the distance-ratio uncertainty of each label, and
//! the conflict set that flips the entropy sign.
//!
//! Pseudo-labels come from two passes: softmax-weighted class centroids give
//! provisional labels, then centroids are recomputed as plain means of the
//! provisionally labelled samples and every sample is re-assigned. The
//! uncertainty ratio of a sample is its nearest-centroid cosine distance
//! divided by the second-nearest one, measured against the refined centroids.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Added to the norm product in [`cosine_distance`].
pub const COSINE_EPS: f64 = 1e-12;

/// Floor on a class's total weight when averaging embeddings.
pub const CENTROID_WEIGHT_EPS: f64 = 1e-8;

pub const HISTOGRAM_BINS: usize = 20;

/// Distances at or below this count as exact coincidence in the uncertainty
/// ratio; the cosine epsilon otherwise leaves a residue near 1e-12.
pub const COINCIDENT_TOL: f64 = 1e-9;

/// `1 - u.v / (|u| |v| + eps)`, clamped to `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (1.0 - dot / (nu * nv + COSINE_EPS)).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidPass {
    Initial,
    Refined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    /// `[K, d]`
    pub centroids: Tensor,
    pub pass: CentroidPass,
    /// Classes whose total weight was zero; they never win an assignment.
    pub degenerate: Vec<bool>,
}

impl CentroidSet {
    pub fn n_classes(&self) -> usize {
        self.centroids.rows()
    }

    fn usable(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_classes()).filter(|&k| !self.degenerate[k])
    }
}

/// Per-sample pseudo-labels and uncertainty ratios, frozen for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelTable {
    pub labels: Vec<usize>,
    pub ratios: Vec<f64>,
    pub epoch: usize,
}

impl PseudoLabelTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn weighted_mean_centroids(embeddings: &Tensor, weight: impl Fn(usize, usize) -> f64, k: usize) -> (Tensor, Vec<bool>) {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    let mut sums = vec![0.0; k * d];
    let mut totals = vec![0.0; k];
    for i in 0..n {
        let z = embeddings.row(i);
        for c in 0..k {
            let w = weight(i, c);
            if w == 0.0 {
                continue;
            }
            totals[c] += w;
            for (s, &zv) in sums[c * d..(c + 1) * d].iter_mut().zip(z) {
                *s += w * zv;
            }
        }
    }
    let mut degenerate = vec![false; k];
    for c in 0..k {
        degenerate[c] = totals[c] == 0.0;
        let denom = totals[c].max(CENTROID_WEIGHT_EPS);
        for s in &mut sums[c * d..(c + 1) * d] {
            *s /= denom;
        }
    }
    (Tensor::new(vec![k, d], sums).expect("consistent shape"), degenerate)
}

fn check_pair(embeddings: &Tensor, probs: &Tensor) -> Result<()> {
    if embeddings.ndim() != 2 || probs.ndim() != 2 {
        return Err(Error::contract("embeddings and probabilities must be matrices"));
    }
    if embeddings.rows() != probs.rows() {
        return Err(Error::contract(format!(
            "{} embeddings but {} probability rows",
            embeddings.rows(),
            probs.rows()
        )));
    }
    if embeddings.rows() == 0 {
        return Err(Error::contract("pseudo-labeling needs at least one sample"));
    }
    Ok(())
}

/// `C_k = sum_i p_ik z_i / sum_i p_ik`.
pub fn weighted_centroids(embeddings: &Tensor, probs: &Tensor) -> Result<CentroidSet> {
    check_pair(embeddings, probs)?;
    let k = probs.cols();
    let (centroids, degenerate) = weighted_mean_centroids(embeddings, |i, c| probs.at(i, c), k);
    Ok(CentroidSet { centroids, pass: CentroidPass::Initial, degenerate })
}

/// Nearest usable centroid by cosine distance; ties go to the lowest index.
pub fn assign_nearest(embeddings: &Tensor, centroids: &CentroidSet) -> Result<Vec<usize>> {
    if embeddings.cols() != centroids.centroids.cols() {
        return Err(Error::contract(format!(
            "embedding width {} vs centroid width {}",
            embeddings.cols(),
            centroids.centroids.cols()
        )));
    }
    if centroids.usable().next().is_none() {
        return Err(Error::Clustering { epoch: None, msg: "every class centroid is degenerate".into() });
    }
    Ok((0..embeddings.rows())
        .map(|i| {
            let z = embeddings.row(i);
            let mut best: Option<(usize, f64)> = None;
            for c in centroids.usable() {
                let dist = cosine_distance(z, centroids.centroids.row(c));
                if best.is_none_or(|(_, b)| dist < b) {
                    best = Some((c, dist));
                }
            }
            best.expect("at least one usable centroid").0
        })
        .collect())
}

/// `min_k D(z, c_k) / second_min_k D(z, c_k)` over usable centroids.
///
/// Returns 1 when the second-smallest distance is zero or fewer than two
/// centroids are usable.
pub fn uncertainty_ratio(embedding: &[f64], centroids: &CentroidSet) -> Result<f64> {
    if centroids.n_classes() < 2 {
        return Err(Error::contract("uncertainty ratio needs at least two classes"));
    }
    if embedding.len() != centroids.centroids.cols() {
        return Err(Error::contract("embedding width does not match centroids"));
    }
    let mut first = f64::INFINITY;
    let mut second = f64::INFINITY;
    for c in centroids.usable() {
        let mut dist = cosine_distance(embedding, centroids.centroids.row(c));
        if dist <= COINCIDENT_TOL {
            dist = 0.0;
        }
        if dist < first {
            second = first;
            first = dist;
        } else if dist < second {
            second = dist;
        }
    }
    if !second.is_finite() || second == 0.0 {
        return Ok(1.0);
    }
    Ok(first / second)
}

/// Two-pass pseudo-labeling; returns the table (stamped with `epoch`) and
/// the refined centroids the labels and ratios were computed against.
pub fn generate_pseudo_labels(
    embeddings: &Tensor,
    probs: &Tensor,
    epoch: usize,
) -> Result<(PseudoLabelTable, CentroidSet)> {
    let initial = weighted_centroids(embeddings, probs)?;
    let provisional = assign_nearest(embeddings, &initial)?;

    let k = initial.n_classes();
    let (mut centroids, mut degenerate) =
        weighted_mean_centroids(embeddings, |i, c| if provisional[i] == c { 1.0 } else { 0.0 }, k);
    for (c, flag) in degenerate.iter_mut().enumerate() {
        if *flag {
            // empty after refinement: keep the soft centroid
            centroids.row_mut(c).copy_from_slice(initial.centroids.row(c));
            *flag = initial.degenerate[c];
        }
    }
    let refined = CentroidSet { centroids, pass: CentroidPass::Refined, degenerate };
    let labels = assign_nearest(embeddings, &refined)?;
    let ratios = (0..embeddings.rows())
        .map(|i| uncertainty_ratio(embeddings.row(i), &refined))
        .collect::<Result<Vec<_>>>()?;
    Ok((PseudoLabelTable { labels, ratios, epoch }, refined))
}

/// True where the hypothesis disagrees with the pseudo-label and the
/// pseudo-label is confident (`ratio < r_th`).
pub fn conflict_flags(pseudo_labels: &[usize], hypotheses: &[usize], ratios: &[f64], r_th: f64) -> Result<Vec<bool>> {
    if pseudo_labels.len() != hypotheses.len() || pseudo_labels.len() != ratios.len() {
        return Err(Error::contract("conflict_flags: inputs must have equal lengths"));
    }
    if !(0.0..=1.0).contains(&r_th) {
        return Err(Error::contract(format!("threshold {r_th} outside [0, 1]")));
    }
    Ok(pseudo_labels
        .iter()
        .zip(hypotheses)
        .zip(ratios)
        .map(|((pl, h), &r)| pl != h && r < r_th)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    /// Bin `i` counts ratios in `[i/20, (i+1)/20)`; the last bin also holds 1.0.
    pub histogram: [usize; HISTOGRAM_BINS],
}

pub fn histogram_bin(ratio: f64) -> usize {
    ((ratio * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

/// Mean, median and 20-bin histogram of the ratios selected by `mask`.
pub fn threshold_stats(ratios: &[f64], mask: &[bool]) -> Result<ThresholdStats> {
    if ratios.len() != mask.len() {
        return Err(Error::contract("threshold_stats: ratios and mask lengths differ"));
    }
    let mut selected: Vec<f64> = ratios.iter().zip(mask).filter(|(_, &m)| m).map(|(&r, _)| r).collect();
    if selected.is_empty() {
        return Err(Error::Statistics("no samples selected for threshold statistics".into()));
    }
    let mut histogram = [0; HISTOGRAM_BINS];
    for &r in &selected {
        histogram[histogram_bin(r)] += 1;
    }
    let count = selected.len();
    let mean = selected.iter().sum::<f64>() / count as f64;
    selected.sort_by(f64::total_cmp);
    let median = if count % 2 == 1 {
        selected[count / 2]
    } else {
        0.5 * (selected[count / 2 - 1] + selected[count / 2])
    };
    Ok(ThresholdStats { count, mean, median, histogram })
}

/// Tab-separated `sample_id pseudo_label ratio conflict_flag epoch`, with header.
pub fn pseudo_label_table_to_string(table: &PseudoLabelTable, flags: &[bool]) -> Result<String> {
    if flags.len() != table.len() {
        return Err(Error::contract("one conflict flag per table row required"));
    }
    let mut s = String::from("sample_id\tpseudo_label\tratio\tconflict_flag\tepoch\n");
    for (i, ((&label, &ratio), &flag)) in table.labels.iter().zip(&table.ratios).zip(flags).enumerate() {
        let _ = writeln!(s, "{i}\t{label}\t{}\t{}\t{}", crate::fmt_num(ratio), u8::from(flag), table.epoch);
    }
    Ok(s)
}

pub fn write_pseudo_label_table(path: &Path, table: &PseudoLabelTable, flags: &[bool]) -> Result<()> {
    std::fs::write(path, pseudo_label_table_to_string(table, flags)?).map_err(|e| Error::io(path, e))
}

//! Loss terms for source training and target adaptation. All of them are
//! batch means built from [`Graph`] primitives, so they differentiate
//! through the tape.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Tolerance on probability rows summing to one.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Per-batch values of every term of the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_ent: f64,
    pub l_info: f64,
    pub l_ce: f64,
    pub l_rot: f64,
    pub total: f64,
    pub conflict_count: usize,
    pub batch_size: usize,
}

/// `total = l_ent + l_info + alpha_ce * l_ce + beta_rot * l_rot`.
pub fn total_loss(l_ent: f64, l_info: f64, l_ce: f64, l_rot: f64, alpha_ce: f64, beta_rot: f64) -> LossBreakdown {
    LossBreakdown {
        l_ent,
        l_info,
        l_ce,
        l_rot,
        total: l_ent + l_info + alpha_ce * l_ce + beta_rot * l_rot,
        conflict_count: 0,
        batch_size: 0,
    }
}

/// Same combination on the tape. `rot` may be absent when rotation is disabled.
pub fn total_loss_graph(
    g: &mut Graph,
    ent: Var,
    info: Var,
    ce: Var,
    rot: Option<Var>,
    alpha_ce: f64,
    beta_rot: f64,
) -> Result<Var> {
    let im = g.add(ent, info)?;
    let ce = g.scale(ce, alpha_ce);
    let mut total = g.add(im, ce)?;
    if let Some(rot) = rot {
        let rot = g.scale(rot, beta_rot);
        total = g.add(total, rot)?;
    }
    Ok(total)
}

fn check_labels(labels: &[usize], n: usize, k: usize, what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::contract(format!("{what}: {} labels for a batch of {n}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!("{what}: label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// Mean over the batch of `-sum_k target_k log softmax_k(logits)`.
fn soft_target_ce(g: &mut Graph, logits: Var, targets: Tensor) -> Result<Var> {
    let n = g.value(logits).rows();
    let probs = g.softmax(logits)?;
    let log_probs = g.log(probs);
    let t = g.constant(targets);
    let weighted = g.mul(t, log_probs)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0 / n as f64))
}

fn smoothed_targets(labels: &[usize], k: usize, alpha_smooth: f64) -> Tensor {
    let mut t = Tensor::filled(&[labels.len(), k], alpha_smooth / k as f64);
    for (i, &y) in labels.iter().enumerate() {
        t.row_mut(i)[y] += 1.0 - alpha_smooth;
    }
    t
}

/// Source objective: cross-entropy against `alpha/K + (1 - alpha) * onehot`.
pub fn label_smoothing_ce(g: &mut Graph, logits: Var, labels: &[usize], alpha_smooth: f64) -> Result<Var> {
    let (n, k) = (g.value(logits).rows(), g.value(logits).cols());
    check_labels(labels, n, k, "label_smoothing_ce")?;
    if !(0.0..1.0).contains(&alpha_smooth) {
        return Err(Error::contract(format!("smoothing must lie in [0, 1), got {alpha_smooth}")));
    }
    soft_target_ce(g, logits, smoothed_targets(labels, k, alpha_smooth))
}

/// Cross-entropy against centroid pseudo-labels.
pub fn pseudo_label_ce(g: &mut Graph, logits: Var, pseudo_labels: &[usize]) -> Result<Var> {
    let (n, k) = (g.value(logits).rows(), g.value(logits).cols());
    check_labels(pseudo_labels, n, k, "pseudo_label_ce")?;
    soft_target_ce(g, logits, smoothed_targets(pseudo_labels, k, 0.0))
}

/// 4-way cross-entropy of the relative rotation head.
pub fn rotation_loss(g: &mut Graph, rot_logits: Var, rot_labels: &[usize]) -> Result<Var> {
    let (n, k) = (g.value(rot_logits).rows(), g.value(rot_logits).cols());
    if k != crate::model::ROTATION_CLASSES {
        return Err(Error::contract(format!("rotation logits need 4 columns, got {k}")));
    }
    check_labels(rot_labels, n, k, "rotation_loss")?;
    soft_target_ce(g, rot_logits, smoothed_targets(rot_labels, k, 0.0))
}

fn check_prob_rows(t: &Tensor) -> Result<()> {
    if t.ndim() != 2 {
        return Err(Error::contract("probabilities must be a [batch, K] matrix"));
    }
    for i in 0..t.rows() {
        let s: f64 = t.row(i).iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL || t.row(i).iter().any(|&p| p < 0.0) {
            return Err(Error::contract(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

/// `H_i = -sum_k p_ik log p_ik` for each row, shape `[batch]`.
pub fn conditional_entropy_per_sample(g: &mut Graph, probs: Var) -> Result<Var> {
    check_prob_rows(g.value(probs))?;
    let logp = g.log(probs);
    let plogp = g.mul(probs, logp)?;
    let s = g.sum_axis(plogp, 1)?;
    Ok(g.scale(s, -1.0))
}

/// `sum_k p_bar_k log p_bar_k` where `p_bar` is the batch-mean probability row.
/// Lies in `[-ln K, 0]`; minimizing it spreads predictions across classes.
pub fn info_entropy_loss(g: &mut Graph, probs: Var) -> Result<Var> {
    if g.value(probs).rows() == 0 {
        return Err(Error::contract("info_entropy_loss: empty batch"));
    }
    let mean = g.mean_axis(probs, 0)?;
    let logm = g.log(mean);
    let prod = g.mul(mean, logm)?;
    Ok(g.sum(prod))
}

/// Mean over the batch of `delta_i * H_i`. A `-1` sign turns entropy
/// minimization into maximization for that sample.
pub fn signed_entropy_loss(g: &mut Graph, probs: Var, delta: &[f64]) -> Result<Var> {
    let n = g.value(probs).rows();
    if delta.len() != n {
        return Err(Error::contract(format!("{} signs for a batch of {n}", delta.len())));
    }
    if let Some(bad) = delta.iter().find(|&&d| d != 1.0 && d != -1.0) {
        return Err(Error::contract(format!("sign must be +1 or -1, got {bad}")));
    }
    let h = conditional_entropy_per_sample(g, probs)?;
    let signs = g.constant(Tensor::vector(delta.to_vec()));
    let signed = g.mul(h, signs)?;
    Ok(g.mean(signed))
}

/// Plain mean conditional entropy (all signs +1).
pub fn conditional_entropy_loss(g: &mut Graph, probs: Var) -> Result<Var> {
    let n = g.value(probs).rows();
    signed_entropy_loss(g, probs, &vec![1.0; n])
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    const LN4: f64 = 1.386_294_361_119_890_6;

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g)?;
        Ok(g.value(v).data().to_vec()[0])
    }

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn smoothed_target_values() {
        let t = smoothed_targets(&[3], 10, 0.1);
        assert!((t.at(0, 3) - 0.91).abs() < 1e-15);
        assert!((t.at(0, 0) - 0.01).abs() < 1e-15);
        assert!((t.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothing_zero_is_plain_ce() {
        let logits = mat(&[&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.0]]);
        let a = eval(|g| {
            let l = g.constant(logits.clone());
            label_smoothing_ce(g, l, &[2, 0], 0.0)
        })
        .unwrap();
        let b = eval(|g| {
            let l = g.constant(logits.clone());
            pseudo_label_ce(g, l, &[2, 0])
        })
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let v = eval(|g| {
            let l = g.constant(Tensor::zeros(&[3, 4]));
            label_smoothing_ce(g, l, &[0, 1, 3], 0.1)
        })
        .unwrap();
        assert!((v - LN4).abs() < 1e-12);
        let v = eval(|g| {
            let l = g.constant(Tensor::zeros(&[2, 4]));
            pseudo_label_ce(g, l, &[2, 3])
        })
        .unwrap();
        assert!((v - LN4).abs() < 1e-12);
        let v = eval(|g| {
            let l = g.constant(Tensor::zeros(&[2, 4]));
            rotation_loss(g, l, &[0, 3])
        })
        .unwrap();
        assert!((v - LN4).abs() < 1e-12);
    }

    #[test]
    fn label_smoothing_matches_scalar_oracle() {
        // 30-digit value of -sum q_k log softmax([1, 0, -1, 0.5])_k, label 3, alpha 0.1
        let v = eval(|g| {
            let l = g.constant(mat(&[&[1.0, 0.0, -1.0, 0.5]]));
            label_smoothing_ce(g, l, &[3], 0.1)
        })
        .unwrap();
        assert!((v - 1.284_067_269_173_791_2).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_ce_values() {
        let v = eval(|g| {
            let l = g.constant(mat(&[&[2.0, 1.0, 0.0]]));
            pseudo_label_ce(g, l, &[0])
        })
        .unwrap();
        assert!((v - 0.407_605_964_444_380_3).abs() < 1e-12);
        let v = eval(|g| {
            let l = g.constant(mat(&[&[20.0, 0.0, 0.0]]));
            pseudo_label_ce(g, l, &[0])
        })
        .unwrap();
        assert!(v < 0.01);
    }

    #[test]
    fn rotation_loss_values() {
        let v = eval(|g| {
            let l = g.constant(mat(&[&[0.5, -1.0, 2.0, 0.1], &[1.0, 1.0, 0.0, -2.0]]));
            rotation_loss(g, l, &[2, 0])
        })
        .unwrap();
        assert!((v - 0.617_604_380_412_634_6).abs() < 1e-12);
        let v = eval(|g| {
            let l = g.constant(mat(&[&[0.0, 0.0, 15.0, 0.0]]));
            rotation_loss(g, l, &[2])
        })
        .unwrap();
        assert!(v < 0.01);
    }

    #[test]
    fn out_of_range_labels_rejected() {
        for r in [
            eval(|g| {
                let l = g.constant(Tensor::zeros(&[1, 3]));
                label_smoothing_ce(g, l, &[3], 0.1)
            }),
            eval(|g| {
                let l = g.constant(Tensor::zeros(&[1, 3]));
                pseudo_label_ce(g, l, &[7])
            }),
            eval(|g| {
                let l = g.constant(Tensor::zeros(&[1, 4]));
                rotation_loss(g, l, &[4])
            }),
        ] {
            assert!(matches!(r, Err(Error::Contract(_))));
        }
    }

    fn entropies(rows: &[&[f64]]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = g.constant(mat(rows));
        let h = conditional_entropy_per_sample(&mut g, p)?;
        Ok(g.value(h).data().to_vec())
    }

    #[test]
    fn conditional_entropy_extremes_and_oracle() {
        let h = entropies(&[&[0.25; 4], &[0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert!((h[0] - LN4).abs() < 1e-12);
        assert_eq!(h[1], 0.0);
        let h = entropies(&[&[0.7, 0.3]]).unwrap();
        assert!((h[0] - 0.610_864_302_054_893_5).abs() < 1e-12);
        assert!(matches!(entropies(&[&[0.5, 0.6]]), Err(Error::Contract(_))));
    }

    fn info(rows: &[&[f64]]) -> f64 {
        eval(|g| {
            let p = g.constant(mat(rows));
            info_entropy_loss(g, p)
        })
        .unwrap()
    }

    #[test]
    fn info_entropy_values() {
        assert!((info(&[&[0.25; 4], &[0.25; 4]]) + LN4).abs() < 1e-12);
        assert_eq!(info(&[&[0.0, 1.0], &[0.0, 1.0]]), 0.0);
        assert!((info(&[&[1.0, 0.0], &[0.0, 1.0]]) + std::f64::consts::LN_2).abs() < 1e-12);
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[0, 3]));
        assert!(info_entropy_loss(&mut g, p).is_err());
    }

    fn signed(rows: &[&[f64]], delta: &[f64]) -> Result<f64> {
        eval(|g| {
            let p = g.constant(mat(rows));
            signed_entropy_loss(g, p, delta)
        })
    }

    #[test]
    fn signed_entropy_reductions() {
        let rows: &[&[f64]] = &[&[0.7, 0.3], &[0.5, 0.5], &[0.9, 0.1]];
        let h = entropies(rows).unwrap();
        let mean = h.iter().sum::<f64>() / 3.0;
        let plain = eval(|g| {
            let p = g.constant(mat(rows));
            conditional_entropy_loss(g, p)
        })
        .unwrap();
        assert_eq!(signed(rows, &[1.0; 3]).unwrap(), plain);
        assert!((plain - mean).abs() < 1e-15);
        assert!((signed(rows, &[-1.0; 3]).unwrap() + mean).abs() < 1e-15);
        assert!(matches!(signed(rows, &[1.0, 0.0, 1.0]), Err(Error::Contract(_))));
        assert!(matches!(signed(rows, &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn signed_entropy_arithmetic_example() {
        // rows [p, (1-p)/2, (1-p)/2] with entropy 1.0 and 0.5, found by bisection
        fn row_with_entropy(target: f64) -> [f64; 3] {
            let h = |p: f64| {
                let q = 0.5 * (1.0 - p);
                -(p * p.ln() + 2.0 * q * q.ln())
            };
            let (mut lo, mut hi) = (1.0 / 3.0, 1.0 - 1e-15);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if h(mid) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            [lo, 0.5 * (1.0 - lo), 0.5 * (1.0 - lo)]
        }
        let a = row_with_entropy(1.0);
        let b = row_with_entropy(0.5);
        let v = signed(&[&a, &b], &[1.0, -1.0]).unwrap();
        assert!((v - 0.25).abs() < 1e-9);
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(0.5, -1.0, 1.0, 1.4, 0.3, 0.6);
        assert!((b.total - 0.64).abs() < 1e-12);
        let b = total_loss(0.5, -1.0, 9.0, 9.0, 0.0, 0.0);
        assert_eq!(b.total, -0.5);
    }
}

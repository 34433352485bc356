//! Hand-computed and high-precision reference values.

#![allow(clippy::excessive_precision)]

mod common;

use common::*;
use rand::Rng;
use rchc::autodiff::{softmax, Graph, Tensor};
use rchc::data::{Domain, LabeledDataset};
use rchc::losses::{conditional_entropy_per_sample, label_smoothing_ce, pseudo_label_ce, rotation_loss};
use rchc::model::{init_target_from_source, Architecture, ModelParams, ROTATION_HEAD_INIT_SCALE};
use rchc::pseudo_label::{assign_nearest, generate_pseudo_labels, threshold_stats, weighted_centroids};
use rchc::training::{evaluate, Evaluator};

// Reference digits computed with 30-digit arithmetic.
const SOFTMAX_123: [f64; 3] = [0.0900305731703804580, 0.244728471054797652, 0.665240955774821890];
const ENTROPY_07_03: f64 = 0.610864302054893463;
const CE_210_LABEL0: f64 = 0.407605964444380304;
const ROTATION_CE: f64 = 0.617604380412634573;
const SMOOTHED_CE: f64 = 1.28406726917379119;
const ORACLE_TOL: f64 = 1e-12;

fn scalar_loss(logits: &[&[f64]], f: impl Fn(&mut Graph, rchc::autodiff::Var) -> rchc::Result<rchc::autodiff::Var>) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(Tensor::from_rows(logits).unwrap());
    let out = f(&mut g, l).unwrap();
    g.value(out).item()
}

#[test]
fn softmax_matches_reference() {
    let p = softmax(&Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap()).unwrap();
    for (a, b) in p.row(0).iter().zip(SOFTMAX_123) {
        assert!((a - b).abs() < ORACLE_TOL, "{a} vs {b}");
    }
}

#[test]
fn binary_entropy_matches_reference() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_rows(&[[0.7, 0.3]]).unwrap());
    let h = conditional_entropy_per_sample(&mut g, p).unwrap();
    assert!((g.value(h).data()[0] - ENTROPY_07_03).abs() < ORACLE_TOL);
}

#[test]
fn cross_entropy_matches_reference() {
    let ce = scalar_loss(&[&[2.0, 1.0, 0.0]], |g, l| pseudo_label_ce(g, l, &[0]));
    assert!((ce - CE_210_LABEL0).abs() < ORACLE_TOL, "{ce}");
    let unsmoothed = scalar_loss(&[&[2.0, 1.0, 0.0]], |g, l| label_smoothing_ce(g, l, &[0], 0.0));
    assert_eq!(ce.to_bits(), unsmoothed.to_bits());
}

#[test]
fn rotation_cross_entropy_matches_reference() {
    let v = scalar_loss(&[&[0.5, -1.0, 2.0, 0.1], &[1.0, 1.0, 0.0, -2.0]], |g, l| rotation_loss(g, l, &[2, 0]));
    assert!((v - ROTATION_CE).abs() < ORACLE_TOL, "{v}");
}

#[test]
fn label_smoothing_matches_reference() {
    let v = scalar_loss(&[&[1.0, 0.0, -1.0, 0.5]], |g, l| label_smoothing_ce(g, l, &[3], 0.1));
    assert!((v - SMOOTHED_CE).abs() < ORACLE_TOL, "{v}");
}

#[test]
fn weighted_centroids_by_hand() {
    let z = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0], [2.0, 2.0]]).unwrap();
    let p = Tensor::from_rows(&[[1.0, 0.0], [0.5, 0.5], [0.25, 0.75]]).unwrap();
    let c = weighted_centroids(&z, &p).unwrap();
    // (1*[1,0] + 0.5*[0,2] + 0.25*[2,2]) / 1.75 and (0.5*[0,2] + 0.75*[2,2]) / 1.25
    let expected = [[1.5 / 1.75, 1.5 / 1.75], [1.2, 2.0]];
    for (k, row) in expected.iter().enumerate() {
        for (a, b) in c.centroids.row(k).iter().zip(row) {
            assert!((a - b).abs() < 1e-15, "centroid {k}: {a} vs {b}");
        }
    }
    assert_eq!(c.degenerate, vec![false, false]);
}

fn tiny_model() -> ModelParams {
    let arch = Architecture { in_dim: 2, hidden: vec![3], embed_dim: 2, n_classes: 2 };
    ModelParams::init(&arch, &mut rng(3))
}

#[test]
fn classifier_is_a_weight_normalized_dot_product() {
    let mut m = tiny_model();
    m.classifier.direction = Tensor::from_rows(&[[3.0, 4.0], [0.0, -2.0]]).unwrap();
    m.classifier.magnitude = Tensor::vector(vec![2.0, 0.5]);
    m.classifier.bias = Tensor::vector(vec![0.1, -0.2]);
    let logits = m.classify_embeddings(&Tensor::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]).unwrap()).unwrap();
    // g * (v . z) / |v| + b
    let expected = [[2.0 * 11.0 / 5.0 + 0.1, -0.5 * 4.0 / 2.0 - 0.2], [-2.0 / 5.0 + 0.1, -0.5 / 2.0 - 0.2]];
    for (i, row) in expected.iter().enumerate() {
        for (a, b) in logits.row(i).iter().zip(row) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }
}

#[test]
fn rotation_head_reads_the_concatenated_pair() {
    let mut m = tiny_model();
    let w: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
    m.rotation_head.weight = Tensor::new(vec![4, 4], w.clone()).unwrap();
    m.rotation_head.bias = Tensor::vector(vec![1.0, 0.0, -1.0, 0.5]);
    let a = Tensor::from_rows(&[[1.0, -2.0]]).unwrap();
    let b = Tensor::from_rows(&[[0.5, 3.0]]).unwrap();
    let out = m.rotation_classify(&a, &b).unwrap();
    let pair = [1.0, -2.0, 0.5, 3.0];
    for j in 0..4 {
        let expected: f64 = (0..4).map(|i| pair[i] * w[i * 4 + j]).sum::<f64>() + [1.0, 0.0, -1.0, 0.5][j];
        assert!((out.at(0, j) - expected).abs() < 1e-14, "logit {j}");
    }
}

#[test]
fn accuracy_of_unrelated_labels_is_chance() {
    // labels drawn independently of the inputs: any model scores about 1/K
    let arch = Architecture { in_dim: 2, hidden: vec![8], embed_dim: 4, n_classes: 4 };
    let model = ModelParams::init(&arch, &mut rng(11));
    let mut r = rng(12);
    let n = 4000;
    let x = normal(&mut r, &[n, 2], 1.0);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
    let ds = LabeledDataset::new(x, Some(labels), Domain::Target).unwrap();
    let acc = evaluate(&model, &ds).unwrap();
    assert!((acc.overall - 0.25).abs() <= 0.05, "accuracy {}", acc.overall);
}

#[test]
fn evaluator_counts_by_hand() {
    let ev = Evaluator::new(vec![0, 0, 1, 1, 2], 3).unwrap();
    let acc = ev.score(&[0, 1, 1, 1, 0]).unwrap();
    assert_eq!(acc.overall, 3.0 / 5.0);
    assert_eq!(acc.per_class, vec![Some(0.5), Some(1.0), Some(0.0)]);
    assert_eq!(acc.mean_per_class, 0.5);
}

fn clustered(seed: u64, n_per: usize, noise: f64) -> (Tensor, Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let dirs = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (k, d) in dirs.iter().enumerate() {
        for _ in 0..n_per {
            let e = normal(&mut r, &[3], 0.15);
            rows.push([d[0] + e.data()[0], d[1] + e.data()[1], d[2] + e.data()[2]]);
            truth.push(k);
        }
    }
    let z = Tensor::from_rows(&rows).unwrap();
    // noisy classifier: right class favoured, with random confusion
    let mut logits = normal(&mut r, &[truth.len(), 3], noise);
    for (i, &k) in truth.iter().enumerate() {
        logits.row_mut(i)[k] += 1.0;
    }
    (z, softmax(&logits).unwrap(), truth)
}

#[test]
fn refinement_does_not_lose_accuracy_on_separable_clusters() {
    for seed in 0..10 {
        let (z, p, truth) = clustered(seed, 50, 1.5);
        let provisional = assign_nearest(&z, &weighted_centroids(&z, &p).unwrap()).unwrap();
        let (table, _) = generate_pseudo_labels(&z, &p, 1).unwrap();
        let hits = |labels: &[usize]| labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert!(hits(&table.labels) >= hits(&provisional), "seed {seed}");
        assert_eq!(hits(&table.labels), truth.len(), "seed {seed}: clusters are separable");
    }
}

#[test]
fn median_matches_a_full_sort() {
    let mut r = rng(99);
    for n in [1000usize, 999] {
        let ratios: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let mut sorted = ratios.clone();
        sorted.sort_by(f64::total_cmp);
        let expected = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        let stats = threshold_stats(&ratios, &vec![true; n]).unwrap();
        assert_eq!(stats.median.to_bits(), expected.to_bits());
        assert_eq!(stats.count, n);
    }
}

#[test]
fn target_init_copies_source_and_freezes_the_classifier() {
    let source = tiny_model();
    let before = source.clone();
    let target = init_target_from_source(&source, &mut rng(5));
    assert_eq!(source, before);
    assert!(target.frozen_classifier);
    assert_eq!(target.feature_layers, source.feature_layers);
    assert_eq!(target.bottleneck, source.bottleneck);
    assert_eq!(target.batch_norm, source.batch_norm);
    assert_eq!(target.classifier, source.classifier);
    assert_eq!(target.rotation_head.weight.shape(), &[4, 4]);
    assert!(target.rotation_head.bias.data().iter().all(|&b| b == 0.0));
    let w = target.rotation_head.weight.data();
    assert!(w.iter().all(|v| v.abs() < 6.0 * ROTATION_HEAD_INIT_SCALE));
    assert!(w.iter().any(|&v| v != 0.0));
    assert_eq!(init_target_from_source(&source, &mut rng(5)), target);
    assert_ne!(init_target_from_source(&source, &mut rng(6)).rotation_head, target.rotation_head);
}

//! Tape gradients of every primitive against central finite differences.

mod common;

use common::*;
use rand::Rng;
use rchc::autodiff::{Graph, NormStats, Tensor, Var};
use rchc::model::{init_target_from_source, Architecture, BoundParams, ModelParams};
use rchc::Result;

const INSTANCES: u64 = 20;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn check(name: &str, make: impl Fn(&mut rand_chacha::ChaCha8Rng) -> (Vec<Tensor>, Build)) {
    for i in 0..INSTANCES {
        let mut r = rng(1000 + i);
        let (inputs, build) = make(&mut r);
        let err = max_grad_error(&*build, &inputs);
        assert!(err < FD_REL_TOL, "{name} instance {i}: relative error {err:e}");
    }
}

fn dims(r: &mut impl Rng) -> (usize, usize) {
    (r.random_range(1..6), r.random_range(2..6))
}

#[test]
fn matmul() {
    check("matmul", |r| {
        let (m, k) = dims(r);
        let n = r.random_range(1..5);
        let w = normal(r, &[m, n], 1.0);
        (
            vec![normal(r, &[m, k], 1.0), normal(r, &[k, n], 1.0)],
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, &w)
            }),
        )
    });
}

#[test]
fn add_same_shape_and_row_broadcast() {
    check("add", |r| {
        let (m, n) = dims(r);
        let w = normal(r, &[m, n], 1.0);
        (
            vec![normal(r, &[m, n], 1.0), normal(r, &[m, n], 1.0), normal(r, &[n], 1.0)],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.add(y, v[2])?;
                weighted_sum(g, y, &w)
            }),
        )
    });
}

#[test]
fn scale_and_mul() {
    check("scale/mul", |r| {
        let (m, n) = dims(r);
        let c: f64 = r.random_range(-3.0..3.0);
        let w = normal(r, &[m, n], 1.0);
        (
            vec![normal(r, &[m, n], 1.0), normal(r, &[m, n], 1.0)],
            Box::new(move |g, v| {
                let s = g.scale(v[0], c);
                let y = g.mul(s, v[1])?;
                let y = g.mul(y, v[0])?;
                weighted_sum(g, y, &w)
            }),
        )
    });
}

#[test]
fn relu() {
    check("relu", |r| {
        let (m, n) = dims(r);
        let w = normal(r, &[m, n], 1.0);
        (
            vec![away_from_zero(r, &[m, n])],
            Box::new(move |g, v| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, &w)
            }),
        )
    });
}

#[test]
fn exp_and_log() {
    check("exp/log", |r| {
        let (m, n) = dims(r);
        let w = normal(r, &[m, n], 1.0);
        (
            vec![normal(r, &[m, n], 0.7), uniform(r, &[m, n], 0.1, 3.0)],
            Box::new(move |g, v| {
                let e = g.exp(v[0]);
                let l = g.log(v[1]);
                let y = g.add(e, l)?;
                weighted_sum(g, y, &w)
            }),
        )
    });
}

#[test]
fn softmax() {
    check("softmax", |r| {
        let (m, n) = dims(r);
        let w = normal(r, &[m, n], 1.0);
        (
            vec![normal(r, &[m, n], 2.0)],
            Box::new(move |g, v| {
                let y = g.softmax(v[0])?;
                weighted_sum(g, y, &w)
            }),
        )
    });
}

#[test]
fn sum_mean_and_axis_reductions() {
    check("reductions", |r| {
        let (m, n) = dims(r);
        let w0 = normal(r, &[n], 1.0);
        let w1 = normal(r, &[m], 1.0);
        let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        (
            vec![normal(r, &[m, n], 1.0)],
            Box::new(move |g, v| {
                let s0 = g.sum_axis(v[0], 0)?;
                let m1 = g.mean_axis(v[0], 1)?;
                let s0 = weighted_sum(g, s0, &w0)?;
                let m1 = weighted_sum(g, m1, &w1)?;
                let sq = g.mul(v[0], v[0])?;
                let total = g.sum(sq);
                let mean = g.mean(sq);
                let t = g.scale(total, a);
                let u = g.scale(mean, b);
                let y = g.add(s0, m1)?;
                let y = g.add(y, t)?;
                g.add(y, u)
            }),
        )
    });
}

#[test]
fn concat_cols() {
    check("concat_cols", |r| {
        let m = r.random_range(1..5);
        let (p, q) = (r.random_range(1..4), r.random_range(1..4));
        let w = normal(r, &[m, p + q], 1.0);
        (
            vec![normal(r, &[m, p], 1.0), normal(r, &[m, q], 1.0)],
            Box::new(move |g, v| {
                let y = g.concat_cols(v[0], v[1])?;
                weighted_sum(g, y, &w)
            }),
        )
    });
}

#[test]
fn batch_norm_with_batch_statistics() {
    check("batch_norm(batch)", |r| {
        let n = r.random_range(2..7);
        let d = r.random_range(1..5);
        let w = normal(r, &[n, d], 1.0);
        (
            vec![normal(r, &[n, d], 1.5), normal(r, &[d], 1.0), normal(r, &[d], 1.0)],
            Box::new(move |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], NormStats::Batch)?;
                weighted_sum(g, y, &w)
            }),
        )
    });
}

#[test]
fn batch_norm_with_running_statistics() {
    check("batch_norm(running)", |r| {
        let n = r.random_range(1..6);
        let d = r.random_range(1..5);
        let w = normal(r, &[n, d], 1.0);
        let mean = normal(r, &[d], 1.0).into_data();
        let var = uniform(r, &[d], 0.2, 2.0).into_data();
        (
            vec![normal(r, &[n, d], 1.0), normal(r, &[d], 1.0), normal(r, &[d], 1.0)],
            Box::new(move |g, v| {
                let stats = NormStats::Running { mean: &mean, var: &var };
                let (y, _) = g.batch_norm(v[0], v[1], v[2], stats)?;
                weighted_sum(g, y, &w)
            }),
        )
    });
}

#[test]
fn weight_norm_linear() {
    check("weight_norm_linear", |r| {
        let n = r.random_range(1..5);
        let d = r.random_range(1..5);
        let k = r.random_range(2..5);
        let w = normal(r, &[n, k], 1.0);
        (
            vec![normal(r, &[n, d], 1.0), normal(r, &[k, d], 1.0), normal(r, &[k], 1.0), normal(r, &[k], 1.0)],
            Box::new(move |g, v| {
                let y = g.weight_norm_linear(v[0], v[1], v[2], v[3])?;
                weighted_sum(g, y, &w)
            }),
        )
    });
}

#[test]
fn three_layer_composition_of_matmul_relu_log_softmax() {
    check("composition", |r| {
        let n = r.random_range(1..5);
        let (a, b, c) = (r.random_range(2..5), r.random_range(2..5), r.random_range(2..5));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let mut onehot = Tensor::zeros(&[n, c]);
        for (i, &y) in labels.iter().enumerate() {
            onehot.row_mut(i)[y] = -1.0;
        }
        (
            vec![
                normal(r, &[n, a], 1.0),
                normal(r, &[a, b], 1.0),
                normal(r, &[b, b], 1.0),
                normal(r, &[b, c], 1.0),
            ],
            Box::new(move |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.relu(h);
                let h = g.matmul(h, v[2])?;
                let h = g.relu(h);
                let z = g.matmul(h, v[3])?;
                let p = g.softmax(z)?;
                let lp = g.log(p);
                weighted_sum(g, lp, &onehot)
            }),
        )
    });
}

fn model_objective(model: &ModelParams, g: &mut Graph, p: &BoundParams, x: &Tensor, w: &Tensor, wr: &Tensor) -> Result<Var> {
    let x = g.constant(x.clone());
    let (emb, _) = model.embed_graph(g, p, x, true)?;
    let logits = model.classify_graph(g, p, emb)?;
    let rot = model.rotation_graph(g, p, emb, emb)?;
    let a = weighted_sum(g, logits, w)?;
    let b = weighted_sum(g, rot, wr)?;
    g.add(a, b)
}

#[test]
fn model_parameter_gradients_through_bind() {
    for i in 0..INSTANCES {
        let mut r = rng(5000 + i);
        let arch = Architecture { in_dim: 3, hidden: vec![5, 4], embed_dim: 3, n_classes: 3 };
        let mut model = ModelParams::init(&arch, &mut r);
        // zero biases leave fully dead rows exactly on the relu kink
        for name in ["feature.0.bias", "feature.1.bias", "bottleneck.bias"] {
            let t = model.tensor_mut(name).unwrap();
            let fresh = away_from_zero(&mut r, t.shape());
            *t = fresh;
        }
        let n = r.random_range(2..6);
        let x = normal(&mut r, &[n, 3], 1.0);
        let w = normal(&mut r, &[n, 3], 1.0);
        let wr = normal(&mut r, &[n, 4], 1.0);

        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let out = model_objective(&model, &mut g, &p, &x, &w, &wr).unwrap();
        g.backward(out).unwrap();
        let grads = p.grads(&g);
        assert_eq!(grads.len(), 2 * 2 + 2 + 2 + 3 + 2, "every trainable tensor is tracked");

        let value = |m: &ModelParams| {
            let mut g = Graph::new();
            let p = m.bind(&mut g, false);
            let out = model_objective(m, &mut g, &p, &x, &w, &wr).unwrap();
            g.value(out).item()
        };
        for (name, analytic) in &grads {
            for (j, &a) in analytic.iter().enumerate() {
                let mut plus = model.clone();
                plus.tensor_mut(name).unwrap().data_mut()[j] += FD_STEP;
                let mut minus = model.clone();
                minus.tensor_mut(name).unwrap().data_mut()[j] -= FD_STEP;
                let numeric = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
                assert!(err < FD_REL_TOL, "instance {i} {name}[{j}]: {a} vs {numeric}");
            }
        }
    }
}

#[test]
fn frozen_classifier_is_not_tracked() {
    let mut r = rng(7);
    let arch = Architecture { in_dim: 3, hidden: vec![4], embed_dim: 3, n_classes: 3 };
    let model = init_target_from_source(&ModelParams::init(&arch, &mut r), &mut r);
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let x = normal(&mut r, &[4, 3], 1.0);
    let out = model_objective(&model, &mut g, &p, &x, &normal(&mut r, &[4, 3], 1.0), &normal(&mut r, &[4, 4], 1.0)).unwrap();
    g.backward(out).unwrap();
    let grads = p.grads(&g);
    assert!(grads.keys().all(|k| !k.starts_with("classifier.")));
    assert!(grads.contains_key("bn.gamma"));
}

//! Network `h(x) = argmax g(f(x))`: a relu MLP feature extractor, a linear
//! bottleneck followed by batch normalization, a weight-normalized classifier,
//! and a 4-way rotation head over concatenated embedding pairs.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{softmax, BatchMoments, Graph, NormStats, Tensor, Var};
use crate::error::{Error, Result};

/// Number of relative rotation classes (0, 90, 180, 270 degrees).
pub const ROTATION_CLASSES: usize = 4;

/// Momentum of the running normalization estimates.
pub const RUNNING_STATS_MOMENTUM: f64 = 0.1;

/// Standard deviation of the freshly initialized rotation head.
pub const ROTATION_HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub n_classes: usize,
}

impl Architecture {
    /// Two hidden layers of width 64 and a 16-wide embedding.
    pub fn desk_default(in_dim: usize, n_classes: usize) -> Self {
        Architecture { in_dim, hidden: vec![64, 64], embed_dim: 16, n_classes }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    fn random(inputs: usize, outputs: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Linear {
            weight: Tensor::new(vec![inputs, outputs], data).expect("consistent shape"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::filled(&[width], 1.0),
        }
    }

    /// Exponential update of the running estimates; variance is unbiased.
    pub fn update_running(&mut self, moments: &BatchMoments) {
        let n = moments.count as f64;
        let correction = if moments.count > 1 { n / (n - 1.0) } else { 1.0 };
        let m = RUNNING_STATS_MOMENTUM;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&moments.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&moments.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

/// Classifier with rows `magnitude[k] * direction[k] / |direction[k]|`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNormLinear {
    /// `[K, d]`
    pub direction: Tensor,
    /// `[K]`
    pub magnitude: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

impl WeightNormLinear {
    fn random(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("positive std");
        let dir: Vec<f64> = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        let magnitude = dir.chunks(inputs).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        WeightNormLinear {
            direction: Tensor::new(vec![outputs, inputs], dir).expect("consistent shape"),
            magnitude: Tensor::vector(magnitude),
            bias: Tensor::zeros(&[outputs]),
        }
    }
}

/// Optimizer treatment of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Feature extractor layers, trained at the reduced learning rate.
    Backbone,
    /// Bottleneck, normalization affine and rotation head.
    NewLayer,
    /// Classifier; frozen during adaptation.
    Classifier,
    /// Running statistics; checkpointed, never optimized.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub feature_layers: Vec<Linear>,
    pub bottleneck: Linear,
    pub batch_norm: BatchNorm,
    pub classifier: WeightNormLinear,
    pub rotation_head: Linear,
    pub frozen_classifier: bool,
}

/// Graph handles for every trainable tensor of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    feature: Vec<(Var, Var)>,
    bottleneck: (Var, Var),
    bn_gamma: Var,
    bn_beta: Var,
    cls_direction: Var,
    cls_magnitude: Var,
    cls_bias: Var,
    rotation: (Var, Var),
    named: Vec<(String, Var)>,
}

impl BoundParams {
    /// Gradients of all tracked parameters, keyed by parameter name.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.named
            .iter()
            .filter(|(_, v)| g.is_tracked(*v))
            .filter_map(|(name, v)| g.grad(*v).map(|gr| (name.clone(), gr.to_vec())))
            .collect()
    }
}

/// Embeddings with the dataset row each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Tensor,
    pub sample_ids: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Tensor, sample_ids: Vec<usize>) -> Result<Self> {
        if sample_ids.len() != embeddings.rows() {
            return Err(Error::contract("one sample id per embedding row required"));
        }
        let mut seen = HashSet::with_capacity(sample_ids.len());
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::contract(format!("duplicate sample id {dup} in batch")));
        }
        Ok(EmbeddingBatch { embeddings, sample_ids })
    }
}

impl ModelParams {
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Self {
        let mut feature_layers = Vec::with_capacity(arch.hidden.len());
        let mut width = arch.in_dim;
        for &h in &arch.hidden {
            feature_layers.push(Linear::random(width, h, (2.0 / width as f64).sqrt(), rng));
            width = h;
        }
        let bottleneck = Linear::random(width, arch.embed_dim, (1.0 / width as f64).sqrt(), rng);
        let classifier = WeightNormLinear::random(arch.embed_dim, arch.n_classes, rng);
        let rotation_head = Linear::random(2 * arch.embed_dim, ROTATION_CLASSES, ROTATION_HEAD_INIT_SCALE, rng);
        ModelParams {
            feature_layers,
            bottleneck,
            batch_norm: BatchNorm::new(arch.embed_dim),
            classifier,
            rotation_head,
            frozen_classifier: false,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            in_dim: self.feature_layers.first().unwrap_or(&self.bottleneck).inputs(),
            hidden: self.feature_layers.iter().map(Linear::outputs).collect(),
            embed_dim: self.bottleneck.outputs(),
            n_classes: self.classifier.direction.shape()[0],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.architecture().in_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.bottleneck.outputs()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.direction.shape()[0]
    }

    /// Every tensor in canonical order with its name and optimizer group.
    pub fn named_tensors(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.feature_layers.iter().enumerate() {
            out.push((format!("feature.{i}.weight"), ParamGroup::Backbone, &l.weight));
            out.push((format!("feature.{i}.bias"), ParamGroup::Backbone, &l.bias));
        }
        out.push(("bottleneck.weight".into(), ParamGroup::NewLayer, &self.bottleneck.weight));
        out.push(("bottleneck.bias".into(), ParamGroup::NewLayer, &self.bottleneck.bias));
        out.push(("bn.gamma".into(), ParamGroup::NewLayer, &self.batch_norm.gamma));
        out.push(("bn.beta".into(), ParamGroup::NewLayer, &self.batch_norm.beta));
        out.push(("bn.running_mean".into(), ParamGroup::Buffer, &self.batch_norm.running_mean));
        out.push(("bn.running_var".into(), ParamGroup::Buffer, &self.batch_norm.running_var));
        out.push(("classifier.direction".into(), ParamGroup::Classifier, &self.classifier.direction));
        out.push(("classifier.magnitude".into(), ParamGroup::Classifier, &self.classifier.magnitude));
        out.push(("classifier.bias".into(), ParamGroup::Classifier, &self.classifier.bias));
        out.push(("rotation.weight".into(), ParamGroup::NewLayer, &self.rotation_head.weight));
        out.push(("rotation.bias".into(), ParamGroup::NewLayer, &self.rotation_head.bias));
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (head, rest) = name.split_once('.')?;
        match (head, rest) {
            ("feature", rest) => {
                let (idx, field) = rest.split_once('.')?;
                let layer = self.feature_layers.get_mut(idx.parse::<usize>().ok()?)?;
                match field {
                    "weight" => Some(&mut layer.weight),
                    "bias" => Some(&mut layer.bias),
                    _ => None,
                }
            }
            ("bottleneck", "weight") => Some(&mut self.bottleneck.weight),
            ("bottleneck", "bias") => Some(&mut self.bottleneck.bias),
            ("bn", "gamma") => Some(&mut self.batch_norm.gamma),
            ("bn", "beta") => Some(&mut self.batch_norm.beta),
            ("bn", "running_mean") => Some(&mut self.batch_norm.running_mean),
            ("bn", "running_var") => Some(&mut self.batch_norm.running_var),
            ("classifier", "direction") => Some(&mut self.classifier.direction),
            ("classifier", "magnitude") => Some(&mut self.classifier.magnitude),
            ("classifier", "bias") => Some(&mut self.classifier.bias),
            ("rotation", "weight") => Some(&mut self.rotation_head.weight),
            ("rotation", "bias") => Some(&mut self.rotation_head.bias),
            _ => None,
        }
    }

    /// Whether the optimizer may touch a tensor of this group.
    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Buffer => false,
            ParamGroup::Classifier => !self.frozen_classifier,
            ParamGroup::Backbone | ParamGroup::NewLayer => true,
        }
    }

    /// Places the parameters on `g`. With `track`, every trainable tensor
    /// requires a gradient; a frozen classifier never does.
    pub fn bind(&self, g: &mut Graph, track: bool) -> BoundParams {
        let mut named = Vec::new();
        let mut put = |g: &mut Graph, name: String, t: &Tensor, trainable: bool| {
            let v = g.leaf(t.clone().with_requires_grad(track && trainable));
            named.push((name, v));
            v
        };
        let feature = self
            .feature_layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    put(g, format!("feature.{i}.weight"), &l.weight, true),
                    put(g, format!("feature.{i}.bias"), &l.bias, true),
                )
            })
            .collect();
        let bottleneck = (
            put(g, "bottleneck.weight".into(), &self.bottleneck.weight, true),
            put(g, "bottleneck.bias".into(), &self.bottleneck.bias, true),
        );
        let bn_gamma = put(g, "bn.gamma".into(), &self.batch_norm.gamma, true);
        let bn_beta = put(g, "bn.beta".into(), &self.batch_norm.beta, true);
        let cls = !self.frozen_classifier;
        let cls_direction = put(g, "classifier.direction".into(), &self.classifier.direction, cls);
        let cls_magnitude = put(g, "classifier.magnitude".into(), &self.classifier.magnitude, cls);
        let cls_bias = put(g, "classifier.bias".into(), &self.classifier.bias, cls);
        let rotation = (
            put(g, "rotation.weight".into(), &self.rotation_head.weight, true),
            put(g, "rotation.bias".into(), &self.rotation_head.bias, true),
        );
        BoundParams { feature, bottleneck, bn_gamma, bn_beta, cls_direction, cls_magnitude, cls_bias, rotation, named }
    }

    /// Bottleneck output before normalization.
    pub fn pre_norm_graph(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let width = g.value(x).cols();
        if g.value(x).ndim() != 2 || width != self.in_dim() {
            return Err(Error::contract(format!(
                "input width {width} does not match model input width {}",
                self.in_dim()
            )));
        }
        if g.value(x).rows() == 0 {
            return Err(Error::contract("empty batch"));
        }
        let mut h = x;
        for &(w, b) in &p.feature {
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            h = g.relu(z);
        }
        let z = g.matmul(h, p.bottleneck.0)?;
        g.add(z, p.bottleneck.1)
    }

    /// Normalized embedding `f(x)`. In training mode the batch statistics
    /// are used and returned so the caller can update the running estimates.
    pub fn embed_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let z = self.pre_norm_graph(g, p, x)?;
        let stats = if training {
            NormStats::Batch
        } else {
            NormStats::Running {
                mean: self.batch_norm.running_mean.data(),
                var: self.batch_norm.running_var.data(),
            }
        };
        g.batch_norm(z, p.bn_gamma, p.bn_beta, stats)
    }

    pub fn classify_graph(&self, g: &mut Graph, p: &BoundParams, emb: Var) -> Result<Var> {
        g.weight_norm_linear(emb, p.cls_direction, p.cls_magnitude, p.cls_bias)
    }

    /// Rotation logits from `[original, rotated]` embeddings.
    pub fn rotation_graph(&self, g: &mut Graph, p: &BoundParams, original: Var, rotated: Var) -> Result<Var> {
        if g.value(original).shape() != g.value(rotated).shape() {
            return Err(Error::contract(format!(
                "rotation pair shapes differ: {:?} vs {:?}",
                g.value(original).shape(),
                g.value(rotated).shape()
            )));
        }
        let pair = g.concat_cols(original, rotated)?;
        if g.value(pair).cols() != self.rotation_head.inputs() {
            return Err(Error::contract("rotation head width must be twice the embedding width"));
        }
        let z = g.matmul(pair, p.rotation.0)?;
        g.add(z, p.rotation.1)
    }

    /// Embeds `inputs`. Training mode uses and folds in batch statistics.
    pub fn feature_extract(&mut self, inputs: &Tensor, training: bool) -> Result<EmbeddingBatch> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(inputs.clone());
        let (emb, moments) = self.embed_graph(&mut g, &p, x, training)?;
        if let Some(m) = moments {
            self.batch_norm.update_running(&m);
        }
        EmbeddingBatch::new(g.value(emb).clone(), (0..inputs.rows()).collect())
    }

    /// Evaluation-mode embeddings.
    pub fn embed(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(inputs.clone());
        let (emb, _) = self.embed_graph(&mut g, &p, x, false)?;
        Ok(g.value(emb).clone())
    }

    pub fn classify(&self, emb: &EmbeddingBatch) -> Result<Tensor> {
        self.classify_embeddings(&emb.embeddings)
    }

    pub fn classify_embeddings(&self, emb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let e = g.constant(emb.clone());
        let logits = self.classify_graph(&mut g, &p, e)?;
        Ok(g.value(logits).clone())
    }

    pub fn rotation_classify(&self, original: &Tensor, rotated: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (a, b) = (g.constant(original.clone()), g.constant(rotated.clone()));
        let logits = self.rotation_graph(&mut g, &p, a, b)?;
        Ok(g.value(logits).clone())
    }

    /// Evaluation-mode embeddings and class probabilities for a whole dataset.
    pub fn embed_and_predict(&self, inputs: &Tensor) -> Result<(Tensor, Tensor)> {
        let emb = self.embed(inputs)?;
        let logits = self.classify_embeddings(&emb)?;
        Ok((emb, softmax(&logits)?))
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let (_, probs) = self.embed_and_predict(inputs)?;
        Ok(probs.argmax_rows())
    }
}

/// Copies a trained source model for adaptation: the classifier is frozen and
/// the rotation head is re-initialized with small random weights.
pub fn init_target_from_source(source: &ModelParams, rng: &mut impl Rng) -> ModelParams {
    let mut target = source.clone();
    target.frozen_classifier = true;
    target.rotation_head = Linear::random(
        2 * source.embed_dim(),
        ROTATION_CLASSES,
        ROTATION_HEAD_INIT_SCALE,
        rng,
    );
    target
}

const CHECKPOINT_MAGIC: &str = "rchc-checkpoint v1";

/// A model plus the hash of the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config_hash: String,
}

/// Plain-text checkpoint:
///
/// ```text
/// rchc-checkpoint v1
/// config_hash <hex>
/// frozen_classifier <0|1>
/// tensor <name> <ndim> <dim>...
/// <values, space separated, shortest round-trip decimal>
/// ...
/// end
/// ```
pub fn checkpoint_to_string(params: &ModelParams, config_hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(s, "config_hash {config_hash}");
    let _ = writeln!(s, "frozen_classifier {}", u8::from(params.frozen_classifier));
    for (name, _, t) in params.named_tensors() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(s, "tensor {name} {} {}", t.ndim(), dims.join(" "));
        let values: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", values.join(" "));
    }
    s.push_str("end\n");
    s
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, config_hash: &str) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, &path.display().to_string())
}

pub fn parse_checkpoint(text: &str, origin: &str) -> Result<Checkpoint> {
    let err = |line: usize, msg: String| Error::Parse { path: origin.to_string(), line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| lines.next().ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")));

    let (ln, magic) = next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(err(ln, format!("expected '{CHECKPOINT_MAGIC}'")));
    }
    let (ln, hash_line) = next("config_hash")?;
    let config_hash = hash_line
        .strip_prefix("config_hash ")
        .ok_or_else(|| err(ln, "expected 'config_hash <hex>'".into()))?
        .trim()
        .to_string();
    let (ln, frozen_line) = next("frozen_classifier")?;
    let frozen = match frozen_line.strip_prefix("frozen_classifier ").map(str::trim) {
        Some("0") => false,
        Some("1") => true,
        _ => return Err(err(ln, "expected 'frozen_classifier 0|1'".into())),
    };

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    loop {
        let (ln, head) = next("tensor or end")?;
        if head.trim() == "end" {
            break;
        }
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() < 3 || fields[0] != "tensor" {
            return Err(err(ln, "expected 'tensor <name> <ndim> <dims...>'".into()));
        }
        let name = fields[1].to_string();
        let ndim: usize = fields[2].parse().map_err(|_| err(ln, "bad ndim".into()))?;
        if fields.len() != 3 + ndim {
            return Err(err(ln, format!("expected {ndim} dimensions")));
        }
        let shape = fields[3..]
            .iter()
            .map(|d| d.parse::<usize>().map_err(|_| err(ln, format!("bad dimension '{d}'"))))
            .collect::<Result<Vec<_>>>()?;
        let (ln, body) = next("tensor values")?;
        let data = body
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| err(ln, format!("bad value '{v}'"))))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| err(ln, e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(err(ln, format!("duplicate tensor '{name}'")));
        }
    }

    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| err(0, format!("missing tensor '{name}'")))
    };
    let mut feature_layers = Vec::new();
    while let (Ok(weight), Ok(bias)) = (
        take(&format!("feature.{}.weight", feature_layers.len())),
        take(&format!("feature.{}.bias", feature_layers.len())),
    ) {
        feature_layers.push(Linear { weight, bias });
    }
    let params = ModelParams {
        feature_layers,
        bottleneck: Linear { weight: take("bottleneck.weight")?, bias: take("bottleneck.bias")? },
        batch_norm: BatchNorm {
            gamma: take("bn.gamma")?,
            beta: take("bn.beta")?,
            running_mean: take("bn.running_mean")?,
            running_var: take("bn.running_var")?,
        },
        classifier: WeightNormLinear {
            direction: take("classifier.direction")?,
            magnitude: take("classifier.magnitude")?,
            bias: take("classifier.bias")?,
        },
        rotation_head: Linear { weight: take("rotation.weight")?, bias: take("rotation.bias")? },
        frozen_classifier: frozen,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(err(0, format!("unexpected tensor '{extra}'")));
    }
    validate_shapes(&params).map_err(|e| err(0, e.to_string()))?;
    Ok(Checkpoint { params, config_hash })
}

fn validate_shapes(p: &ModelParams) -> Result<()> {
    let mut width = p.feature_layers.first().unwrap_or(&p.bottleneck).inputs();
    for l in p.feature_layers.iter().chain(std::iter::once(&p.bottleneck)) {
        if l.weight.ndim() != 2 || l.inputs() != width || l.bias.numel() != l.outputs() {
            return Err(Error::contract("inconsistent layer shapes"));
        }
        width = l.outputs();
    }
    let d = p.bottleneck.outputs();
    for t in [&p.batch_norm.gamma, &p.batch_norm.beta, &p.batch_norm.running_mean, &p.batch_norm.running_var] {
        if t.numel() != d {
            return Err(Error::contract("normalization width differs from embedding width"));
        }
    }
    let dir = &p.classifier.direction;
    if dir.ndim() != 2 || dir.shape()[1] != d {
        return Err(Error::contract("classifier width differs from embedding width"));
    }
    let k = dir.shape()[0];
    if p.classifier.magnitude.numel() != k || p.classifier.bias.numel() != k {
        return Err(Error::contract("classifier magnitude/bias size"));
    }
    let r = &p.rotation_head;
    if r.weight.ndim() != 2 || r.inputs() != 2 * d || r.outputs() != ROTATION_CLASSES || r.bias.numel() != ROTATION_CLASSES {
        return Err(Error::contract("rotation head must map 2*d inputs to 4 outputs"));
    }
    Ok(())
}

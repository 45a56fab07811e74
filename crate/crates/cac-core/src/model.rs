//! The two-stage network `z(x) = classifier(extractor(x))` with hand-derived
//! backpropagation, the SGD-momentum optimizer, and a finite-difference
//! gradient oracle used by the test suites.
//!
//! The extractor is a stack of dense layers (relu or identity activations);
//! the classifier is a single linear layer whose output width is the class
//! count. All arithmetic is f64. Parameters, gradients and optimizer
//! velocity share one shape, mirrored by [`GradientSet`].

use crate::error::{CacError, Result};
use crate::matrix::{self, Matrix};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre_activation: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre_activation > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer: `out = activation(x W + b)` with `W` of shape in x out.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(CacError::Shape(format!(
                "bias length {} does not match weight cols {}",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Weight/bias tensors shaped exactly like the model parameters. Used both
/// for gradients and for the optimizer's velocity state.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub extractor: Vec<(Matrix, Vec<f64>)>,
    pub classifier: (Matrix, Vec<f64>),
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientSet {
            extractor: params
                .extractor
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
            classifier: (
                Matrix::zeros(
                    params.classifier.weight.rows(),
                    params.classifier.weight.cols(),
                ),
                vec![0.0; params.classifier.bias.len()],
            ),
        }
    }

    pub fn shape_matches(&self, params: &ModelParams) -> bool {
        self.extractor.len() == params.extractor.len()
            && self.extractor.iter().zip(&params.extractor).all(|(g, l)| {
                g.0.rows() == l.weight.rows()
                    && g.0.cols() == l.weight.cols()
                    && g.1.len() == l.bias.len()
            })
            && self.classifier.0.rows() == params.classifier.weight.rows()
            && self.classifier.0.cols() == params.classifier.weight.cols()
            && self.classifier.1.len() == params.classifier.bias.len()
    }

    /// All entries flattened in a fixed order (extractor layers first, each
    /// weight then bias, classifier last).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (w, b) in &self.extractor {
            flat.extend_from_slice(w.data());
            flat.extend_from_slice(b);
        }
        flat.extend_from_slice(self.classifier.0.data());
        flat.extend_from_slice(&self.classifier.1);
        flat
    }
}

/// Feature extractor, classifier, and the optimizer's velocity state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: Vec<DenseLayer>,
    pub classifier: DenseLayer,
    pub velocity: GradientSet,
}

impl ModelParams {
    /// Assembles a model, validating that consecutive layer shapes compose.
    /// Velocity starts at zero.
    pub fn from_layers(extractor: Vec<DenseLayer>, classifier: DenseLayer) -> Result<Self> {
        if extractor.is_empty() {
            return Err(CacError::Shape("extractor needs at least one layer".into()));
        }
        for (i, pair) in extractor.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(CacError::Shape(format!(
                    "extractor layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        let last = extractor.last().unwrap();
        if last.output_dim() != classifier.input_dim() {
            return Err(CacError::Shape(format!(
                "extractor outputs {} but classifier expects {}",
                last.output_dim(),
                classifier.input_dim()
            )));
        }
        let mut params = ModelParams {
            extractor,
            classifier,
            velocity: GradientSet {
                extractor: Vec::new(),
                classifier: (Matrix::zeros(0, 0), Vec::new()),
            },
        };
        params.velocity = GradientSet::zeros_like(&params);
        Ok(params)
    }

    /// Standard desk-scale model: one relu hidden layer, one identity
    /// feature layer, one linear classifier. Weights are uniform in
    /// [-a, a] with a = sqrt(6 / (fan_in + fan_out)); biases start at zero.
    pub fn init(
        input_dim: usize,
        hidden_width: usize,
        feature_dim: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let hidden = init_layer(input_dim, hidden_width, Activation::Relu, &mut rng)?;
        let feature = init_layer(hidden_width, feature_dim, Activation::Identity, &mut rng)?;
        let classifier = init_layer(feature_dim, classes, Activation::Identity, &mut rng)?;
        ModelParams::from_layers(vec![hidden, feature], classifier)
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.last().unwrap().output_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn param_count(&self) -> usize {
        let ext: usize = self
            .extractor
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum();
        ext + self.classifier.weight.data().len() + self.classifier.bias.len()
    }

    /// Flattens every parameter in the same order as [`GradientSet::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for layer in &self.extractor {
            flat.extend_from_slice(layer.weight.data());
            flat.extend_from_slice(&layer.bias);
        }
        flat.extend_from_slice(self.classifier.weight.data());
        flat.extend_from_slice(&self.classifier.bias);
        flat
    }

    /// Rebuilds a model with the same shapes (and velocity) but parameter
    /// values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(CacError::Shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut out = self.clone();
        let mut cursor = 0;
        for layer in &mut out.extractor {
            cursor = fill_layer(layer, flat, cursor)?;
        }
        fill_layer(&mut out.classifier, flat, cursor)?;
        Ok(out)
    }
}

fn fill_layer(layer: &mut DenseLayer, flat: &[f64], mut cursor: usize) -> Result<usize> {
    let w_len = layer.weight.data().len();
    let weight = Matrix::from_vec(
        layer.weight.rows(),
        layer.weight.cols(),
        flat[cursor..cursor + w_len].to_vec(),
    )?;
    cursor += w_len;
    let bias = flat[cursor..cursor + layer.bias.len()].to_vec();
    cursor += layer.bias.len();
    layer.weight = weight;
    layer.bias = bias;
    Ok(cursor)
}

fn init_layer(
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
    rng: &mut Rng,
) -> Result<DenseLayer> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.uniform(-a, a)).collect();
    DenseLayer::new(
        Matrix::from_vec(fan_in, fan_out, data)?,
        vec![0.0; fan_out],
        activation,
    )
}

/// Extractor output (pre-normalization), classifier logits, and softmax
/// probabilities for a batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub features: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
}

/// Forward pass plus the intermediates backpropagation needs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each extractor layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    pub features: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
}

impl ForwardCache {
    pub fn pass(&self) -> ForwardPass {
        ForwardPass {
            features: self.features.clone(),
            logits: self.logits.clone(),
            probs: self.probs.clone(),
        }
    }
}

/// Runs the network on a batch: features, logits and softmax probabilities.
pub fn model_forward(params: &ModelParams, x: &Matrix) -> Result<ForwardPass> {
    Ok(forward_cached(params, x)?.pass())
}

/// Forward pass that also records per-layer inputs and pre-activations.
pub fn forward_cached(params: &ModelParams, x: &Matrix) -> Result<ForwardCache> {
    if x.cols() != params.input_dim() {
        return Err(CacError::Shape(format!(
            "input has {} columns but the extractor expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(params.extractor.len());
    let mut pre_activations = Vec::with_capacity(params.extractor.len());
    let mut current = x.clone();
    for layer in &params.extractor {
        let pre = current.matmul(&layer.weight)?.add_row_bias(&layer.bias)?;
        let out = pre.map(|v| layer.activation.apply(v));
        inputs.push(current);
        pre_activations.push(pre);
        current = out;
    }
    let features = current;
    let logits = features
        .matmul(&params.classifier.weight)?
        .add_row_bias(&params.classifier.bias)?;
    let probs = matrix::softmax(&logits)?;
    probs.check_finite("forward probs")?;
    Ok(ForwardCache {
        inputs,
        pre_activations,
        features,
        logits,
        probs,
    })
}

/// Backpropagates a loss gradient w.r.t. the logits into parameter space.
pub fn backward_from_logits(
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: &Matrix,
) -> Result<GradientSet> {
    if dlogits.rows() != cache.logits.rows() || dlogits.cols() != cache.logits.cols() {
        return Err(CacError::Shape("dlogits shape mismatch".into()));
    }
    let d_classifier_w = cache.features.transpose().matmul(dlogits)?;
    let d_classifier_b = dlogits.column_sums();
    let mut d_out = dlogits.matmul(&params.classifier.weight.transpose())?;

    let mut extractor_grads = vec![
        (Matrix::zeros(0, 0), Vec::new());
        params.extractor.len()
    ];
    for l in (0..params.extractor.len()).rev() {
        let layer = &params.extractor[l];
        let pre = &cache.pre_activations[l];
        let mut d_pre = d_out.clone();
        for r in 0..d_pre.rows() {
            for c in 0..d_pre.cols() {
                d_pre[(r, c)] *= layer.activation.derivative(pre[(r, c)]);
            }
        }
        let d_w = cache.inputs[l].transpose().matmul(&d_pre)?;
        let d_b = d_pre.column_sums();
        d_out = d_pre.matmul(&layer.weight.transpose())?;
        extractor_grads[l] = (d_w, d_b);
    }
    Ok(GradientSet {
        extractor: extractor_grads,
        classifier: (d_classifier_w, d_classifier_b),
    })
}

/// Chains a gradient w.r.t. softmax outputs through the softmax Jacobian:
/// `dlogits[c] = p[c] * (dprobs[c] - sum_k dprobs[k] p[k])` per row.
pub fn probs_grad_to_logits_grad(probs: &Matrix, dprobs: &Matrix) -> Result<Matrix> {
    if probs.rows() != dprobs.rows() || probs.cols() != dprobs.cols() {
        return Err(CacError::Shape("dprobs shape mismatch".into()));
    }
    let mut dlogits = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = dprobs.row(r);
        let inner = matrix::dot(dp, p);
        for c in 0..probs.cols() {
            dlogits[(r, c)] = p[c] * (dp[c] - inner);
        }
    }
    Ok(dlogits)
}

/// Backpropagates a loss gradient w.r.t. the softmax outputs.
pub fn backward_from_probs(
    params: &ModelParams,
    cache: &ForwardCache,
    dprobs: &Matrix,
) -> Result<GradientSet> {
    let dlogits = probs_grad_to_logits_grad(&cache.probs, dprobs)?;
    backward_from_logits(params, cache, &dlogits)
}

/// Mean negative log-likelihood of the true labels, with its gradient
/// w.r.t. the logits: `(probs - onehot) / batch`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != probs.rows() {
        return Err(CacError::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.rows()
        )));
    }
    let classes = probs.cols();
    let batch = probs.rows() as f64;
    let mut loss = 0.0;
    let mut dlogits = probs.scale(1.0 / batch);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(CacError::Data(format!(
                "label {label} out of range for {classes} classes (row {i})"
            )));
        }
        let p = probs[(i, label)];
        if p <= 0.0 {
            return Err(CacError::Numeric(format!(
                "zero probability for true label at row {i}"
            )));
        }
        loss -= p.ln();
        dlogits[(i, label)] -= 1.0 / batch;
    }
    loss /= batch;
    if !loss.is_finite() {
        return Err(CacError::Numeric("cross-entropy diverged".into()));
    }
    Ok((loss, dlogits))
}

/// One SGD-with-momentum update: `v <- momentum * v + g`, `p <- p - lr * v`.
/// Returns the new parameters with the velocity persisted inside.
pub fn sgd_momentum_step(
    params: &ModelParams,
    grads: &GradientSet,
    lr: f64,
    momentum: f64,
) -> Result<ModelParams> {
    sgd_momentum_step_staged(params, grads, lr, lr, momentum)
}

/// SGD-momentum with separate learning rates for the classifier and the
/// extractor layers (the staged-rate scheme used during training).
pub fn sgd_momentum_step_staged(
    params: &ModelParams,
    grads: &GradientSet,
    classifier_lr: f64,
    extractor_lr: f64,
    momentum: f64,
) -> Result<ModelParams> {
    if classifier_lr <= 0.0 || extractor_lr <= 0.0 {
        return Err(CacError::Config("learning rate must be positive".into()));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(CacError::Config("momentum must be in [0, 1)".into()));
    }
    if !grads.shape_matches(params) {
        return Err(CacError::Shape(
            "gradient shapes do not mirror the parameters".into(),
        ));
    }
    let mut next = params.clone();
    for (l, layer) in next.extractor.iter_mut().enumerate() {
        let (gw, gb) = &grads.extractor[l];
        let (vw, vb) = &mut next.velocity.extractor[l];
        update_block(
            &mut layer.weight,
            &mut layer.bias,
            gw,
            gb,
            vw,
            vb,
            extractor_lr,
            momentum,
        );
    }
    let (gw, gb) = &grads.classifier;
    let (vw, vb) = &mut next.velocity.classifier;
    update_block(
        &mut next.classifier.weight,
        &mut next.classifier.bias,
        gw,
        gb,
        vw,
        vb,
        classifier_lr,
        momentum,
    );
    Ok(next)
}

#[allow(clippy::too_many_arguments)]
fn update_block(
    weight: &mut Matrix,
    bias: &mut [f64],
    grad_w: &Matrix,
    grad_b: &[f64],
    vel_w: &mut Matrix,
    vel_b: &mut [f64],
    lr: f64,
    momentum: f64,
) {
    for r in 0..weight.rows() {
        for c in 0..weight.cols() {
            let v = momentum * vel_w[(r, c)] + grad_w[(r, c)];
            vel_w[(r, c)] = v;
            weight[(r, c)] -= lr * v;
        }
    }
    for i in 0..bias.len() {
        let v = momentum * vel_b[i] + grad_b[i];
        vel_b[i] = v;
        bias[i] -= lr * v;
    }
}

/// Central-difference gradient of `loss_fn` at `params`:
/// `(L(p + eps) - L(p - eps)) / (2 eps)` per scalar parameter.
pub fn finite_difference_grad(
    mut loss_fn: impl FnMut(&ModelParams) -> Result<f64>,
    params: &ModelParams,
    eps: f64,
) -> Result<GradientSet> {
    if eps <= 0.0 {
        return Err(CacError::Config("eps must be positive".into()));
    }
    let flat = params.to_flat();
    let mut grad_flat = vec![0.0; flat.len()];
    let mut probe = flat.clone();
    for i in 0..flat.len() {
        probe[i] = flat[i] + eps;
        let plus = loss_fn(&params.with_flat(&probe)?)?;
        probe[i] = flat[i] - eps;
        let minus = loss_fn(&params.with_flat(&probe)?)?;
        probe[i] = flat[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CacError::Numeric(format!(
                "non-finite loss while probing parameter {i}"
            )));
        }
        grad_flat[i] = (plus - minus) / (2.0 * eps);
    }
    gradient_from_flat(params, &grad_flat)
}

fn gradient_from_flat(params: &ModelParams, flat: &[f64]) -> Result<GradientSet> {
    let mut grads = GradientSet::zeros_like(params);
    let mut cursor = 0;
    for (l, layer) in params.extractor.iter().enumerate() {
        let w_len = layer.weight.data().len();
        grads.extractor[l].0 = Matrix::from_vec(
            layer.weight.rows(),
            layer.weight.cols(),
            flat[cursor..cursor + w_len].to_vec(),
        )?;
        cursor += w_len;
        grads.extractor[l].1 = flat[cursor..cursor + layer.bias.len()].to_vec();
        cursor += layer.bias.len();
    }
    let w_len = params.classifier.weight.data().len();
    grads.classifier.0 = Matrix::from_vec(
        params.classifier.weight.rows(),
        params.classifier.weight.cols(),
        flat[cursor..cursor + w_len].to_vec(),
    )?;
    cursor += w_len;
    grads.classifier.1 = flat[cursor..cursor + params.classifier.bias.len()].to_vec();
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Serialization: single JSON document, version "cac-model-v1".
// ---------------------------------------------------------------------------

pub const MODEL_FORMAT_VERSION: &str = "cac-model-v1";

#[derive(Serialize, Deserialize)]
struct LayerFile {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    /// Row-major weight entries, `in_dim * out_dim` of them.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: String,
    extractor: Vec<LayerFile>,
    classifier: LayerFile,
}

fn layer_to_file(layer: &DenseLayer) -> LayerFile {
    LayerFile {
        in_dim: layer.input_dim(),
        out_dim: layer.output_dim(),
        activation: layer.activation,
        weight: layer.weight.data().to_vec(),
        bias: layer.bias.clone(),
    }
}

fn layer_from_file(file: LayerFile) -> Result<DenseLayer> {
    DenseLayer::new(
        Matrix::from_vec(file.in_dim, file.out_dim, file.weight)?,
        file.bias,
        file.activation,
    )
}

/// Serializes shapes, activation tags and parameters. Velocity is optimizer
/// state, not part of the model, and is reset to zero on load.
pub fn model_to_json(params: &ModelParams) -> Result<String> {
    let file = ModelFile {
        version: MODEL_FORMAT_VERSION.to_string(),
        extractor: params.extractor.iter().map(layer_to_file).collect(),
        classifier: layer_to_file(&params.classifier),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn model_from_json(text: &str) -> Result<ModelParams> {
    let file: ModelFile = serde_json::from_str(text)?;
    if file.version != MODEL_FORMAT_VERSION {
        return Err(CacError::Config(format!(
            "unsupported model version {:?}, expected {MODEL_FORMAT_VERSION:?}",
            file.version
        )));
    }
    let extractor = file
        .extractor
        .into_iter()
        .map(layer_from_file)
        .collect::<Result<Vec<_>>>()?;
    let classifier = layer_from_file(file.classifier)?;
    ModelParams::from_layers(extractor, classifier)
}

pub fn save_model(params: &ModelParams, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, model_to_json(params)?)?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<ModelParams> {
    model_from_json(&std::fs::read_to_string(path)?)
}

//! Multilayer perceptron (sigmoid hidden layers, softmax output) trained by
//! mini-batch gradient descent on cross-entropy, plus the orientation
//! histogram nearest-neighbour baseline.

use std::fmt::Write as _;

use thiserror::Error;

use crate::features::{OrientationHistogram, HIST_BINS};
use crate::rng::XorShift64Star;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("input has {got} values, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid network dimensions {0:?}")]
    InvalidDims(Vec<usize>),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("exemplar database is empty")]
    EmptyDb,
    #[error("bad model magic: {0:?}")]
    BadMagic(String),
    #[error("model shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value on line {line}")]
    NonFiniteValue { line: usize },
    #[error("unparsable number {token:?} on line {line}")]
    BadNumber { line: usize, token: String },
}

/// Dense layer; `weights` is `out × in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], biases: vec![0.0; outputs] }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.biases) {
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            out.push(dot + b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Activations of one forward pass: `acts[0]` is the input, `acts[l]` the
/// output of layer `l - 1` (sigmoid), and `logits` the final pre-softmax.
struct Trace {
    acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(dims: &[usize]) -> Result<Self, ClassifierError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(ClassifierError::InvalidDims(dims.to_vec()));
        }
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self { dims: dims.to_vec(), layers })
    }

    /// Weights uniform in ±1/sqrt(fan_in) from the seeded generator, biases 0.
    pub fn random(dims: &[usize], rng: &mut XorShift64Star) -> Result<Self, ClassifierError> {
        let mut net = Self::zeros(dims)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.uniform(-bound, bound);
            }
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, ClassifierError> {
        let Some(first) = layers.first() else {
            return Err(ClassifierError::InvalidDims(vec![]));
        };
        let mut dims = vec![first.inputs];
        for l in &layers {
            if l.inputs != *dims.last().unwrap()
                || l.weights.len() != l.inputs * l.outputs
                || l.biases.len() != l.outputs
            {
                return Err(ClassifierError::ShapeMismatch(format!(
                    "layer {}x{} with {} weights, {} biases",
                    l.outputs,
                    l.inputs,
                    l.weights.len(),
                    l.biases.len()
                )));
            }
            dims.push(l.outputs);
        }
        Ok(Self { dims, layers })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_len(&self) -> usize {
        self.dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ClassifierError> {
        if x.len() != self.input_len() {
            return Err(ClassifierError::DimensionMismatch { expected: self.input_len(), got: x.len() });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(acts.last().unwrap(), &mut z);
            if i == last {
                break;
            }
            acts.push(z.iter().map(|&v| sigmoid(v)).collect());
        }
        Trace { acts, logits: z }
    }

    /// Pre-softmax output scores.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        self.check_input(x)?;
        Ok(self.trace(x).logits)
    }

    /// Class probabilities.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Most probable class and its probability; ties go to the lower id.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, f64), ClassifierError> {
        let p = self.forward(x)?;
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        Ok((best, p[best]))
    }

    /// Cross-entropy of one labelled sample.
    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64, ClassifierError> {
        self.check_input(x)?;
        self.check_label(label)?;
        let logits = self.trace(x).logits;
        Ok(log_sum_exp(&logits) - logits[label])
    }

    fn check_label(&self, label: usize) -> Result<(), ClassifierError> {
        if label >= self.classes() {
            return Err(ClassifierError::LabelOutOfRange { label, classes: self.classes() });
        }
        Ok(())
    }

    /// Backpropagation: adds d(loss)/d(param) into `grads` (same shapes as
    /// `self.layers`) and returns the loss.
    fn accumulate_gradient(&self, x: &[f64], label: usize, grads: &mut [Layer]) -> f64 {
        let tr = self.trace(x);
        let lse = log_sum_exp(&tr.logits);
        let loss = lse - tr.logits[label];
        let mut delta: Vec<f64> = tr.logits.iter().map(|z| (z - lse).exp()).collect();
        delta[label] -= 1.0;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &tr.acts[l];
            let g = &mut grads[l];
            for (o, &d) in delta.iter().enumerate() {
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, &a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            for (p, &a) in prev.iter_mut().zip(input) {
                *p *= a * (1.0 - a);
            }
            delta = prev;
        }
        loss
    }

    /// Analytic gradient of the single-sample cross-entropy, flattened in
    /// parameter order (per layer: weights row-major, then biases).
    pub fn gradient(&self, x: &[f64], label: usize) -> Result<Vec<f64>, ClassifierError> {
        self.check_input(x)?;
        self.check_label(label)?;
        let mut grads: Vec<Layer> = self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect();
        self.accumulate_gradient(x, label, &mut grads);
        Ok(grads.into_iter().flat_map(|l| l.weights.into_iter().chain(l.biases)).collect())
    }

    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            if index < layer.weights.len() {
                return &mut layer.weights[index];
            }
            index -= layer.weights.len();
            if index < layer.biases.len() {
                return &mut layer.biases[index];
            }
            index -= layer.biases.len();
        }
        panic!("parameter index out of range");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once an epoch's mean loss is at or below this.
    pub target_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, epochs: 200, batch_size: 16, seed: 1, target_loss: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Mlp,
    /// Mean cross-entropy of each completed epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh network of shape `dims`. The result depends only on
/// `data` (including its order), `dims` and `cfg`.
pub fn train<X: AsRef<[f64]>>(
    data: &[(X, usize)],
    dims: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ClassifierError> {
    if data.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    if cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ClassifierError::InvalidConfig(format!("{cfg:?}")));
    }
    let mut rng = XorShift64Star::new(cfg.seed);
    let mut net = Mlp::random(dims, &mut rng)?;
    for (x, label) in data {
        net.check_input(x.as_ref())?;
        net.check_label(*label)?;
    }
    let mut grads: Vec<Layer> = net.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for g in &mut grads {
                g.weights.iter_mut().for_each(|v| *v = 0.0);
                g.biases.iter_mut().for_each(|v| *v = 0.0);
            }
            for &i in batch {
                let (x, label) = &data[i];
                total += net.accumulate_gradient(x.as_ref(), *label, &mut grads);
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (layer, g) in net.layers.iter_mut().zip(&grads) {
                for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                    *w -= step * gw;
                }
                for (b, gb) in layer.biases.iter_mut().zip(&g.biases) {
                    *b -= step * gb;
                }
            }
        }
        let epoch_loss = total / data.len() as f64;
        epoch_losses.push(epoch_loss);
        if epoch_loss <= cfg.target_loss {
            break;
        }
    }
    Ok(TrainOutcome { net, epoch_losses })
}

/// Largest relative difference between the backpropagated gradient and a
/// central finite difference with step `h`, over every parameter. The
/// denominator is max(|analytic|, |numeric|, 1e-8).
pub fn gradient_check(net: &Mlp, x: &[f64], label: usize, h: f64) -> Result<f64, ClassifierError> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = net.gradient(x, label)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + h;
        let plus = probe.loss(x, label)?;
        *probe.param_mut(i) = orig - h;
        let minus = probe.loss(x, label)?;
        *probe.param_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Text model file. Numbers use Rust's shortest round-trip formatting, so
/// loading reproduces every parameter bit for bit.
pub fn save_model(net: &Mlp) -> String {
    let mut out = String::from("GCMLP 1\ndims");
    for d in &net.dims {
        write!(out, " {d}").unwrap();
    }
    out.push('\n');
    let line = |out: &mut String, vals: &[f64]| {
        for (i, v) in vals.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    };
    for layer in &net.layers {
        for row in layer.weights.chunks_exact(layer.inputs) {
            line(&mut out, row);
        }
        line(&mut out, &layer.biases);
    }
    out
}

pub fn load_model(text: &str) -> Result<Mlp, ClassifierError> {
    let lines: Vec<&str> = text.lines().collect();
    match lines.first() {
        Some(&"GCMLP 1") => {}
        Some(other) => return Err(ClassifierError::BadMagic(other.to_string())),
        None => return Err(ClassifierError::BadMagic(String::new())),
    }
    let dims_line = lines.get(1).ok_or_else(|| ClassifierError::ShapeMismatch("missing dims line".into()))?;
    let mut toks = dims_line.split(' ');
    if toks.next() != Some("dims") {
        return Err(ClassifierError::ShapeMismatch("expected `dims` on line 2".into()));
    }
    let dims: Vec<usize> = toks
        .map(|t| t.parse().map_err(|_| ClassifierError::BadNumber { line: 2, token: t.into() }))
        .collect::<Result<_, _>>()?;
    if dims.len() < 2 || dims.contains(&0) {
        return Err(ClassifierError::ShapeMismatch(format!("dims {dims:?}")));
    }
    let expected_lines = 2 + dims.windows(2).map(|w| w[1] + 1).sum::<usize>();
    if lines.len() != expected_lines {
        return Err(ClassifierError::ShapeMismatch(format!(
            "dims {dims:?} need {expected_lines} lines, file has {}",
            lines.len()
        )));
    }
    let parse_line = |idx: usize, n: usize| -> Result<Vec<f64>, ClassifierError> {
        let vals: Vec<f64> = lines[idx]
            .split(' ')
            .map(|t| t.parse::<f64>().map_err(|_| ClassifierError::BadNumber { line: idx + 1, token: t.into() }))
            .collect::<Result<_, _>>()?;
        if vals.len() != n {
            return Err(ClassifierError::ShapeMismatch(format!(
                "line {} has {} values, expected {n}",
                idx + 1,
                vals.len()
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(ClassifierError::NonFiniteValue { line: idx + 1 });
        }
        Ok(vals)
    };
    let mut layers = Vec::new();
    let mut idx = 2;
    for w in dims.windows(2) {
        let (inputs, outputs) = (w[0], w[1]);
        let mut weights = Vec::with_capacity(inputs * outputs);
        for _ in 0..outputs {
            weights.extend(parse_line(idx, inputs)?);
            idx += 1;
        }
        let biases = parse_line(idx, outputs)?;
        idx += 1;
        layers.push(Layer { inputs, outputs, weights, biases });
    }
    Mlp::from_layers(layers)
}

/// Stored (histogram, class) exemplars for nearest-neighbour matching.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarDb {
    pub entries: Vec<(OrientationHistogram, usize)>,
}

impl ExemplarDb {
    pub fn push(&mut self, hist: OrientationHistogram, class: usize) {
        self.entries.push((hist, class));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `GCDB 1` header, then one `<class> <36 bins>` line per exemplar.
    pub fn to_text(&self) -> String {
        let mut out = String::from("GCDB 1\n");
        for (hist, class) in &self.entries {
            write!(out, "{class}").unwrap();
            for b in &hist.bins {
                write!(out, " {b}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ClassifierError> {
        let mut lines = text.lines();
        match lines.next() {
            Some("GCDB 1") => {}
            other => return Err(ClassifierError::BadMagic(other.unwrap_or_default().to_string())),
        }
        let mut db = ExemplarDb::default();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let toks: Vec<&str> = line.split(' ').collect();
            if toks.len() != HIST_BINS + 1 {
                return Err(ClassifierError::ShapeMismatch(format!("line {lineno}: {} fields", toks.len())));
            }
            let class =
                toks[0].parse().map_err(|_| ClassifierError::BadNumber { line: lineno, token: toks[0].into() })?;
            let mut hist = OrientationHistogram::zeros();
            for (b, t) in hist.bins.iter_mut().zip(&toks[1..]) {
                *b = t.parse().map_err(|_| ClassifierError::BadNumber { line: lineno, token: t.to_string() })?;
                if !b.is_finite() {
                    return Err(ClassifierError::NonFiniteValue { line: lineno });
                }
            }
            db.push(hist, class);
        }
        Ok(db)
    }
}

/// Nearest exemplar under L1 distance. Ties: lower class id, then earlier
/// entry.
pub fn nn_match(db: &ExemplarDb, hist: &OrientationHistogram) -> Result<(usize, f64), ClassifierError> {
    let mut best: Option<(usize, f64)> = None;
    for (exemplar, class) in &db.entries {
        let d = exemplar.l1_distance(hist);
        let better = match best {
            None => true,
            Some((bc, bd)) => d < bd || (d == bd && *class < bc),
        };
        if better {
            best = Some((*class, d));
        }
    }
    best.ok_or(ClassifierError::EmptyDb)
}

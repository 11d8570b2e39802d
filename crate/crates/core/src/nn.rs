//! Bias-free ReLU multilayer perceptron.
//!
//! The victim network is `depth` hidden layers of `width` units followed by a
//! linear output layer, with no bias terms anywhere:
//!
//! ```text
//! h0 = relu(x · W0)            W0: input_dim × width
//! hi = relu(h(i-1) · Wi)       Wi: width × width, i in 1..depth
//! logits = h(depth-1) · Wd     Wd: width × num_classes
//! ```
//!
//! Every forward pass records which post-ReLU units are exactly zero. Those
//! masks are what the zero-skipping cost model consumes.
//!
//! All arithmetic is `f64`. Weight initialization draws from a ChaCha8 stream
//! (see [`crate::seed`]) uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;

use crate::seed;
use crate::util::argmax;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input contains a non-finite value at index {index}")]
    NonFiniteInput { index: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("model file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Shape of the victim network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub width: usize,
    pub depth: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(width: usize, depth: usize, input_dim: usize, num_classes: usize) -> Result<Self> {
        let spec = Self {
            width,
            depth,
            input_dim,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The scaling-table convention: square input layer and ten output classes.
    pub fn table_convention(width: usize, depth: usize) -> Self {
        Self {
            width,
            depth,
            input_dim: width,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("width", self.width),
            ("depth", self.depth),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(NnError::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each of the `depth + 1` weight matrices.
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth + 1);
        shapes.push((self.input_dim, self.width));
        for _ in 1..self.depth {
            shapes.push((self.width, self.width));
        }
        shapes.push((self.width, self.num_classes));
        shapes
    }

    pub fn param_count(&self) -> u64 {
        param_count(self)
    }

    pub fn activation_count(&self) -> u64 {
        activation_count(self)
    }
}

/// Number of scalar weights: `input_dim·w + (depth−1)·w² + w·num_classes`.
pub fn param_count(spec: &ModelSpec) -> u64 {
    let w = spec.width as u64;
    let d = spec.depth as u64;
    spec.input_dim as u64 * w + (d - 1) * w * w + w * spec.num_classes as u64
}

/// Activation count as tabulated in the scaling study: `depth·(w² + w)`.
pub fn activation_count(spec: &ModelSpec) -> u64 {
    let w = spec.width as u64;
    spec.depth as u64 * (w * w + w)
}

/// Dense row-major matrix, `rows = fan_in`, `cols = fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Panics if the rows are ragged or empty.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = a · self`, skipping zero entries of `a`.
    fn left_mul_into(&self, a: &[f64], out: &mut [f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += ai * w;
            }
        }
    }

    /// `out = self · v` (maps a fan_out gradient back to fan_in).
    fn right_mul_into(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row(r).iter().zip(v).map(|(w, x)| w * x).sum();
        }
    }

    /// `self += scale · (a ⊗ b)`.
    fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let s = scale * ai;
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (w, &bj) in row.iter_mut().zip(b) {
                *w += s * bj;
            }
        }
    }
}

/// Nonzero masks of one forward pass.
///
/// `input_mask[i]` is true when input entry `i` is nonzero and
/// `hidden_masks[l][j]` is true when unit `j` of hidden layer `l` is strictly
/// nonzero after ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationStats {
    input_mask: Vec<bool>,
    hidden_masks: Vec<Vec<bool>>,
}

impl ActivationStats {
    pub fn from_masks(input_mask: Vec<bool>, hidden_masks: Vec<Vec<bool>>) -> Self {
        Self {
            input_mask,
            hidden_masks,
        }
    }

    /// Every input and hidden unit nonzero.
    pub fn dense(spec: &ModelSpec) -> Self {
        Self {
            input_mask: vec![true; spec.input_dim],
            hidden_masks: vec![vec![true; spec.width]; spec.depth],
        }
    }

    /// Every hidden unit zero (inputs kept dense).
    pub fn silent(spec: &ModelSpec) -> Self {
        Self {
            input_mask: vec![true; spec.input_dim],
            hidden_masks: vec![vec![false; spec.width]; spec.depth],
        }
    }

    pub fn input_mask(&self) -> &[bool] {
        &self.input_mask
    }

    pub fn hidden_masks(&self) -> &[Vec<bool>] {
        &self.hidden_masks
    }

    pub fn per_layer_nonzero(&self) -> Vec<usize> {
        self.hidden_masks
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count())
            .collect()
    }

    pub fn per_layer_size(&self) -> Vec<usize> {
        self.hidden_masks.iter().map(Vec::len).collect()
    }

    /// `1 − Σ nonzero / Σ size` over the hidden layers.
    pub fn total_sparsity(&self) -> f64 {
        let nonzero: usize = self.per_layer_nonzero().iter().sum();
        let size: usize = self.per_layer_size().iter().sum();
        if size == 0 {
            return 0.0;
        }
        1.0 - nonzero as f64 / size as f64
    }

    /// Whether the masks have the layer count and sizes implied by `spec`.
    pub fn matches(&self, spec: &ModelSpec) -> bool {
        self.input_mask.len() == spec.input_dim
            && self.hidden_masks.len() == spec.depth
            && self.hidden_masks.iter().all(|m| m.len() == spec.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub stats: ActivationStats,
}

/// One supervised training example on the (already enriched) input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(NnError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy per epoch, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: ModelSpec,
    seed: u64,
    weights: Vec<Matrix>,
}

impl Mlp {
    /// Seeded uniform `±1/sqrt(fan_in)` initialization.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let weights = spec
            .weight_shapes()
            .into_iter()
            .enumerate()
            .map(|(layer, (fan_in, fan_out))| {
                let mut rng = seed::rng(seed::derive(seed, seed::stream::WEIGHTS, layer as u64));
                let limit = 1.0 / (fan_in as f64).sqrt();
                let mut m = Matrix::zeros(fan_in, fan_out);
                for w in m.as_mut_slice() {
                    *w = rng.random_range(-limit..=limit);
                }
                m
            })
            .collect();
        Ok(Self {
            spec,
            seed,
            weights,
        })
    }

    pub fn from_weights(spec: ModelSpec, weights: Vec<Matrix>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.weight_shapes();
        if weights.len() != shapes.len() {
            return Err(NnError::DimensionMismatch {
                expected: shapes.len(),
                got: weights.len(),
            });
        }
        for (m, &(r, c)) in weights.iter().zip(&shapes) {
            if m.rows() != r {
                return Err(NnError::DimensionMismatch {
                    expected: r,
                    got: m.rows(),
                });
            }
            if m.cols() != c {
                return Err(NnError::DimensionMismatch {
                    expected: c,
                    got: m.cols(),
                });
            }
        }
        Ok(Self {
            spec,
            seed: 0,
            weights,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_dim {
            return Err(NnError::DimensionMismatch {
                expected: self.spec.input_dim,
                got: input.len(),
            });
        }
        if let Some(index) = input.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput { index });
        }
        Ok(())
    }

    /// Returns the post-ReLU hidden activations and the logits.
    fn activations(&self, input: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut hidden = Vec::with_capacity(self.spec.depth);
        let mut prev: &[f64] = input;
        for w in &self.weights[..self.spec.depth] {
            let mut h = vec![0.0; w.cols()];
            w.left_mul_into(prev, &mut h);
            for v in &mut h {
                // Clamp without producing -0.0 so masks and downstream sums agree.
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
            hidden.push(h);
            prev = hidden.last().unwrap();
        }
        let out = &self.weights[self.spec.depth];
        let mut logits = vec![0.0; out.cols()];
        out.left_mul_into(prev, &mut logits);
        (hidden, logits)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Forward> {
        self.check_input(input)?;
        let (hidden, logits) = self.activations(input);
        let stats = ActivationStats {
            input_mask: input.iter().map(|&v| v != 0.0).collect(),
            hidden_masks: hidden
                .iter()
                .map(|h| h.iter().map(|&v| v != 0.0).collect())
                .collect(),
        };
        Ok(Forward { logits, stats })
    }

    /// Arg-max class, ties to the lowest index.
    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(input)?.logits))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.spec.num_classes {
            return Err(NnError::LabelOutOfRange {
                label,
                num_classes: self.spec.num_classes,
            });
        }
        Ok(())
    }

    /// Softmax cross-entropy of one example.
    pub fn loss(&self, input: &[f64], label: usize) -> Result<f64> {
        self.check_input(input)?;
        self.check_label(label)?;
        let (_, logits) = self.activations(input);
        Ok(cross_entropy(&logits, label))
    }

    /// Loss and analytic gradient with respect to every weight matrix.
    pub fn gradients(&self, input: &[f64], label: usize) -> Result<(f64, Vec<Matrix>)> {
        self.check_input(input)?;
        self.check_label(label)?;
        let mut grads: Vec<Matrix> = self
            .weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let loss = self.accumulate_gradients(input, label, &mut grads, 1.0);
        Ok((loss, grads))
    }

    /// Adds `scale · ∂loss/∂W` into `grads` and returns the loss.
    fn accumulate_gradients(&self, input: &[f64], label: usize, grads: &mut [Matrix], scale: f64) -> f64 {
        let depth = self.spec.depth;
        let (hidden, logits) = self.activations(input);
        let loss = cross_entropy(&logits, label);

        let mut delta = softmax(&logits);
        delta[label] -= 1.0;

        for layer in (0..=depth).rev() {
            let consumed: &[f64] = if layer == 0 { input } else { &hidden[layer - 1] };
            grads[layer].add_outer(consumed, &delta, scale);
            if layer == 0 {
                break;
            }
            let mut back = vec![0.0; consumed.len()];
            self.weights[layer].right_mul_into(&delta, &mut back);
            for (b, &h) in back.iter_mut().zip(consumed) {
                if h <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = back;
        }
        loss
    }

    /// Mini-batch SGD on softmax cross-entropy.
    ///
    /// Each epoch visits the examples in an order shuffled by the stream
    /// `(cfg.seed, epoch)`; the update uses the batch-mean gradient.
    pub fn train(&mut self, examples: &[Example], cfg: &TrainConfig) -> Result<TrainReport> {
        cfg.validate()?;
        if examples.is_empty() {
            return Err(NnError::EmptyDataset);
        }
        for ex in examples {
            self.check_input(&ex.input)?;
            self.check_label(ex.label)?;
        }

        let mut grads: Vec<Matrix> = self
            .weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            order.sort_unstable();
            let mut rng = seed::rng(seed::derive(cfg.seed, seed::stream::EPOCH_SHUFFLE, epoch as u64));
            order.shuffle(&mut rng);

            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                for g in &mut grads {
                    g.as_mut_slice().fill(0.0);
                }
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    total += self.accumulate_gradients(&examples[i].input, examples[i].label, &mut grads, scale);
                }
                for (w, g) in self.weights.iter_mut().zip(&grads) {
                    for (wv, gv) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *wv -= cfg.learning_rate * gv;
                    }
                }
            }
            epoch_losses.push(total / examples.len() as f64);
        }
        Ok(TrainReport { epoch_losses })
    }

    /// Maximum relative error between analytic and central-difference
    /// gradients over every parameter, with denominator
    /// `max(|analytic|, |numeric|, 1e-8)`.
    pub fn grad_check(&self, input: &[f64], label: usize, epsilon: f64) -> Result<f64> {
        if !(epsilon > 0.0 && epsilon <= 1e-2) {
            return Err(NnError::InvalidConfig("epsilon must lie in (0, 1e-2]".into()));
        }
        let (_, analytic) = self.gradients(input, label)?;
        let mut probe = self.clone();
        let mut worst: f64 = 0.0;
        for (layer, g) in analytic.iter().enumerate() {
            for idx in 0..g.as_slice().len() {
                let original = probe.weights[layer].data[idx];
                probe.weights[layer].data[idx] = original + epsilon;
                let up = probe.loss(input, label)?;
                probe.weights[layer].data[idx] = original - epsilon;
                let down = probe.loss(input, label)?;
                probe.weights[layer].data[idx] = original;

                let numeric = (up - down) / (2.0 * epsilon);
                let a = g.as_slice()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        Ok(worst)
    }

    /// Flat text serialization: a header line followed by every weight,
    /// matrix by matrix in row-major order, one value per line.
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "mlp v1 {} {} {} {} {}\n",
            s.width, s.depth, s.input_dim, s.num_classes, self.seed
        );
        for m in &self.weights {
            for v in m.as_slice() {
                // `{:?}` on f64 is the shortest representation that parses back exactly.
                writeln!(out, "{v:?}").unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(NnError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 7 || fields[0] != "mlp" || fields[1] != "v1" {
            return Err(NnError::Parse {
                line: 1,
                msg: format!("expected `mlp v1 width depth input_dim num_classes seed`, got `{header}`"),
            });
        }
        let num = |i: usize| -> Result<u64> {
            fields[i].parse::<u64>().map_err(|e| NnError::Parse {
                line: 1,
                msg: format!("field {i}: {e}"),
            })
        };
        let spec = ModelSpec::new(num(2)? as usize, num(3)? as usize, num(4)? as usize, num(5)? as usize)?;
        let seed = num(6)?;

        let mut weights = Vec::new();
        for (rows, cols) in spec.weight_shapes() {
            let mut m = Matrix::zeros(rows, cols);
            for slot in m.as_mut_slice() {
                let (n, line) = lines.next().ok_or_else(|| NnError::Parse {
                    line: text.lines().count() + 1,
                    msg: "unexpected end of weights".into(),
                })?;
                *slot = line.trim().parse::<f64>().map_err(|e| NnError::Parse {
                    line: n + 1,
                    msg: e.to_string(),
                })?;
            }
            weights.push(m);
        }
        if let Some((n, line)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(NnError::Parse {
                line: n + 1,
                msg: format!("trailing content `{line}`"),
            });
        }
        let mut model = Self::from_weights(spec, weights)?;
        model.seed = seed;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

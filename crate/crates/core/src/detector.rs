//! Fully connected attack classifier: ReLU hidden layers, two-way softmax
//! output, Adam training on clipped cross-entropy, and exact input gradients.
//!
//! Inputs are standardized per feature with statistics stored in the model,
//! so gradients with respect to raw measurements flow through the
//! standardization.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::attack::Dataset;
use crate::seed;
use crate::textio::{fmt_f64, join_f64, parse_f64_list};

pub const PROB_CLIP: f64 = 1e-7;
const MODEL_HEADER: &str = "mtdgrid-mlp 1";

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid layer sizes {0:?}")]
    Sizes(Vec<usize>),
    #[error("input has length {got}, model expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("training data: {0}")]
    Data(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("model file {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Hidden layer widths for the bundled grids; other sizes fall back to the
/// 14-bus widths.
pub fn hidden_layers_for(measurement_count: usize) -> Vec<usize> {
    match measurement_count {
        112 => vec![200, 100, 50],
        490 => vec![800, 400, 100],
        _ => vec![100, 50, 25],
    }
}

pub fn architecture_for(measurement_count: usize) -> Vec<usize> {
    let mut sizes = vec![measurement_count];
    sizes.extend(hidden_layers_for(measurement_count));
    sizes.push(2);
    sizes
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self { mean: vec![0.0; n], std: vec![1.0; n] }
    }

    /// Features with (near) zero spread keep unit scale.
    pub fn fit(rows: &[&[f64]]) -> Self {
        let n = rows[0].len();
        let k = rows.len() as f64;
        let mut mean = vec![0.0; n];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / k;
            }
        }
        let mut var = vec![0.0; n];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m) / k;
            }
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((z, m), s)| (z - m) / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// He-uniform weights `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self, DetectorError> {
        if sizes.len() < 2 || sizes.contains(&0) || *sizes.last().unwrap() != 2 {
            return Err(DetectorError::Sizes(sizes.to_vec()));
        }
        let mut rng = seed::child_rng(seed, "mlp-init", 0);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound)),
                    b: DVector::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { sizes: sizes.to_vec(), layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(&mut f);
            l.b.iter_mut().for_each(&mut f);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Output {
    pub logits: [f64; 2],
    pub probs: [f64; 2],
}

impl Output {
    pub fn label(&self) -> u8 {
        u8::from(self.logits[1] > self.logits[0])
    }
}

pub fn softmax2(l: [f64; 2]) -> [f64; 2] {
    let m = l[0].max(l[1]);
    let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of rows held out for validation accuracy.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 64, learning_rate: 1e-3, validation_fraction: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

/// A trained detector: network plus its input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub params: MlpParams,
    pub standardizer: Standardizer,
}

struct Tape {
    /// Pre-activations per layer.
    pre: Vec<DVector<f64>>,
    out: Output,
}

impl DetectorModel {
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self, DetectorError> {
        let params = MlpParams::init(sizes, seed)?;
        Ok(Self { standardizer: Standardizer::identity(sizes[0]), params })
    }

    pub fn input_size(&self) -> usize {
        self.params.sizes[0]
    }

    fn check(&self, z: &[f64]) -> Result<(), DetectorError> {
        if z.len() != self.input_size() {
            return Err(DetectorError::InputLength { expected: self.input_size(), got: z.len() });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(DetectorError::NonFinite);
        }
        Ok(())
    }

    fn tape(&self, z: &[f64]) -> Tape {
        let mut a = DVector::from_vec(self.standardizer.apply(z));
        let mut pre = Vec::with_capacity(self.params.layers.len());
        let last = self.params.layers.len() - 1;
        for (i, l) in self.params.layers.iter().enumerate() {
            let zl = &l.w * &a + &l.b;
            a = if i < last { zl.map(|v| v.max(0.0)) } else { zl.clone() };
            pre.push(zl);
        }
        let logits = [a[0], a[1]];
        Tape { pre, out: Output { logits, probs: softmax2(logits) } }
    }

    pub fn forward(&self, z: &[f64]) -> Result<Output, DetectorError> {
        self.check(z)?;
        Ok(self.tape(z).out)
    }

    pub fn predict(&self, z: &[f64]) -> Result<u8, DetectorError> {
        Ok(self.forward(z)?.label())
    }

    /// Forward pass over many rows at once.
    pub fn forward_batch(&self, rows: &[&[f64]]) -> Result<Vec<Output>, DetectorError> {
        for r in rows {
            self.check(r)?;
        }
        let x = self.standardized_matrix(rows);
        let logits = self.batch_logits(x);
        Ok((0..rows.len())
            .map(|j| {
                let l = [logits[(0, j)], logits[(1, j)]];
                Output { logits: l, probs: softmax2(l) }
            })
            .collect())
    }

    pub fn predict_batch(&self, rows: &[&[f64]]) -> Result<Vec<u8>, DetectorError> {
        Ok(self.forward_batch(rows)?.iter().map(Output::label).collect())
    }

    fn standardized_matrix(&self, rows: &[&[f64]]) -> DMatrix<f64> {
        let s = &self.standardizer;
        DMatrix::from_fn(self.input_size(), rows.len(), |i, j| (rows[j][i] - s.mean[i]) / s.std[i])
    }

    fn batch_logits(&self, mut a: DMatrix<f64>) -> DMatrix<f64> {
        let last = self.params.layers.len() - 1;
        for (i, l) in self.params.layers.iter().enumerate() {
            let mut zl = &l.w * &a;
            for mut col in zl.column_iter_mut() {
                col += &l.b;
            }
            if i < last {
                zl.apply(|v| *v = v.max(0.0));
            }
            a = zl;
        }
        a
    }

    /// Gradient of `scalar_fn` with respect to the raw input `z`.
    /// `scalar_fn` receives the forward output and returns its value and its
    /// gradient with respect to the two logits. ReLU has derivative 0 at 0.
    pub fn input_gradient(
        &self,
        z: &[f64],
        scalar_fn: impl FnOnce(&Output) -> (f64, [f64; 2]),
    ) -> Result<(f64, Vec<f64>), DetectorError> {
        self.check(z)?;
        let tape = self.tape(z);
        let (value, dl) = scalar_fn(&tape.out);
        let mut g = DVector::from_vec(dl.to_vec());
        for i in (0..self.params.layers.len()).rev() {
            if i + 1 < self.params.layers.len() {
                g.zip_apply(&tape.pre[i], |gi, p| {
                    if p <= 0.0 {
                        *gi = 0.0
                    }
                });
            }
            g = self.params.layers[i].w.tr_mul(&g);
        }
        let grad = g.iter().zip(&self.standardizer.std).map(|(g, s)| g / s).collect();
        Ok((value, grad))
    }

    /// Fraction of rows whose predicted label matches.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64, DetectorError> {
        if data.is_empty() {
            return Err(DetectorError::Data("empty dataset".into()));
        }
        let pred = self.predict_batch(&data.features())?;
        Ok(pred.iter().zip(&data.rows).filter(|(p, r)| **p == r.label).count() as f64 / data.len() as f64)
    }

    pub fn fit_standardizer(&mut self, data: &Dataset) {
        self.standardizer = Standardizer::fit(&data.features());
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MODEL_HEADER}");
        let sizes: Vec<String> = self.params.sizes.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "sizes {}", sizes.join(" "));
        let _ = writeln!(out, "mean {}", join_f64(&self.standardizer.mean, " "));
        let _ = writeln!(out, "std {}", join_f64(&self.standardizer.std, " "));
        for (i, l) in self.params.layers.iter().enumerate() {
            let _ = writeln!(out, "layer {i}");
            let w: Vec<String> = (0..l.w.nrows())
                .flat_map(|r| (0..l.w.ncols()).map(move |c| (r, c)))
                .map(|(r, c)| fmt_f64(l.w[(r, c)]))
                .collect();
            let _ = writeln!(out, "w {}", w.join(" "));
            let _ = writeln!(out, "b {}", join_f64(l.b.as_slice(), " "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DetectorError> {
        let bad = |m: String| DetectorError::Format(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |key: &str| -> Result<String, DetectorError> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}` line")))?;
            line.strip_prefix(key)
                .map(|r| r.trim().to_string())
                .ok_or_else(|| bad(format!("expected `{key}`, found `{}`", line.chars().take(30).collect::<String>())))
        };
        let header = next("mtdgrid-mlp")?;
        if header != "1" {
            return Err(bad(format!("unsupported model version `{header}`")));
        }
        let sizes: Vec<usize> = next("sizes")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad size `{t}`"))))
            .collect::<Result<_, _>>()?;
        let mut model = Self::init(&sizes, 0)?;
        let floats = |s: String, n: usize, what: &str| -> Result<Vec<f64>, DetectorError> {
            let v = parse_f64_list(&s).map_err(bad)?;
            if v.len() != n {
                return Err(bad(format!("{what}: expected {n} values, got {}", v.len())));
            }
            Ok(v)
        };
        model.standardizer.mean = floats(next("mean")?, sizes[0], "mean")?;
        model.standardizer.std = floats(next("std")?, sizes[0], "std")?;
        for i in 0..sizes.len() - 1 {
            if next("layer")? != i.to_string() {
                return Err(bad(format!("layer {i} out of order")));
            }
            let (n_in, n_out) = (sizes[i], sizes[i + 1]);
            let w = floats(next("w")?, n_in * n_out, "weights")?;
            model.params.layers[i].w = DMatrix::from_row_slice(n_out, n_in, &w);
            model.params.layers[i].b = DVector::from_vec(floats(next("b")?, n_out, "biases")?);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        std::fs::write(path, self.to_text()).map_err(|e| DetectorError::Io { path: path.display().to_string(), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let text = std::fs::read_to_string(path).map_err(|e| DetectorError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_text(&text)
    }
}

/// Clipped binary cross-entropy of the class-1 probability.
pub fn cross_entropy(prob1: f64, label: u8) -> f64 {
    let f = prob1.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    if label == 1 {
        -f.ln()
    } else {
        -(1.0 - f).ln()
    }
}

/// Mean clipped cross-entropy over a dataset.
pub fn loss(model: &DetectorModel, data: &Dataset) -> Result<f64, DetectorError> {
    if data.is_empty() {
        return Err(DetectorError::Data("empty dataset".into()));
    }
    let out = model.forward_batch(&data.features())?;
    Ok(out.iter().zip(&data.rows).map(|(o, r)| cross_entropy(o.probs[1], r.label)).sum::<f64>() / data.len() as f64)
}

struct Adam {
    m: Vec<(DMatrix<f64>, DVector<f64>)>,
    v: Vec<(DMatrix<f64>, DVector<f64>)>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &MlpParams) -> Self {
        let zeros = || p.layers.iter().map(|l| (l.w.map(|_| 0.0), l.b.map(|_| 0.0))).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, p: &mut MlpParams, grads: &[(DMatrix<f64>, DVector<f64>)], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        };
        for (k, l) in p.layers.iter_mut().enumerate() {
            let (mw, mb) = &mut self.m[k];
            let (vw, vb) = &mut self.v[k];
            upd(l.w.as_mut_slice(), grads[k].0.as_slice(), mw.as_mut_slice(), vw.as_mut_slice());
            upd(l.b.as_mut_slice(), grads[k].1.as_slice(), mb.as_mut_slice(), vb.as_mut_slice());
        }
    }
}

/// One minibatch: returns the summed loss and the mean gradients.
fn batch_gradients(model: &DetectorModel, x: DMatrix<f64>, y: &[u8]) -> (f64, Vec<(DMatrix<f64>, DVector<f64>)>) {
    let layers = &model.params.layers;
    let bsz = y.len() as f64;
    let mut acts = vec![x];
    let mut pres = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let mut zl = &l.w * acts.last().unwrap();
        for mut col in zl.column_iter_mut() {
            col += &l.b;
        }
        pres.push(zl.clone());
        if i + 1 < layers.len() {
            zl.apply(|v| *v = v.max(0.0));
            acts.push(zl);
        }
    }
    let logits = pres.last().unwrap();
    let mut delta = DMatrix::zeros(2, y.len());
    let mut total = 0.0;
    for (j, &label) in y.iter().enumerate() {
        let p = softmax2([logits[(0, j)], logits[(1, j)]]);
        total += cross_entropy(p[1], label);
        // Zero gradient where the probability is clipped.
        let f = p[1];
        if f > PROB_CLIP && f < 1.0 - PROB_CLIP {
            let d1 = f - f64::from(label);
            delta[(0, j)] = -d1 / bsz;
            delta[(1, j)] = d1 / bsz;
        }
    }
    let mut grads = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); layers.len()];
    for i in (0..layers.len()).rev() {
        let gw = &delta * acts[i].transpose();
        let gb = delta.column_sum();
        if i > 0 {
            let mut back = layers[i].w.tr_mul(&delta);
            back.zip_apply(&pres[i - 1], |g, p| {
                if p <= 0.0 {
                    *g = 0.0
                }
            });
            delta = back;
        }
        grads[i] = (gw, gb);
    }
    (total, grads)
}

/// Mean clipped cross-entropy over `data` and its gradient with respect to
/// every layer's `(W, b)`.
pub fn parameter_gradients(model: &DetectorModel, data: &Dataset) -> Result<(f64, Vec<(DMatrix<f64>, DVector<f64>)>), DetectorError> {
    if data.is_empty() {
        return Err(DetectorError::Data("empty dataset".into()));
    }
    let rows = data.features();
    for r in &rows {
        model.check(r)?;
    }
    let (total, grads) = batch_gradients(model, model.standardized_matrix(&rows), &data.labels());
    Ok((total / data.len() as f64, grads))
}

/// Trains `model` in place with Adam on clipped cross-entropy. The
/// standardizer is left untouched; fit it first for a fresh model.
pub fn train(model: &mut DetectorModel, data: &Dataset, config: &TrainConfig) -> Result<TrainReport, DetectorError> {
    if config.epochs == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(DetectorError::Config(format!("{config:?}")));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(DetectorError::Config("validation_fraction must lie in [0, 1)".into()));
    }
    if data.count_label(0) == 0 || data.count_label(1) == 0 {
        return Err(DetectorError::Data("both classes must be present".into()));
    }
    if data.dim() != model.input_size() {
        return Err(DetectorError::InputLength { expected: model.input_size(), got: data.dim() });
    }
    let (val, tr) = data.split(config.validation_fraction, seed::derive(config.seed, "val-split", 0));
    if tr.is_empty() {
        return Err(DetectorError::Data("no training rows after the validation split".into()));
    }
    let x_all = model.standardized_matrix(&tr.features());
    let y_all = tr.labels();
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::child_rng(config.seed, "epoch", epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = DMatrix::from_fn(x_all.nrows(), chunk.len(), |i, j| x_all[(i, chunk[j])]);
            let y: Vec<u8> = chunk.iter().map(|&k| y_all[k]).collect();
            let (l, grads) = batch_gradients(model, x, &y);
            total += l;
            adam.step(&mut model.params, &grads, config.learning_rate);
        }
        let mean = total / tr.len() as f64;
        if !mean.is_finite() {
            return Err(DetectorError::Diverged { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    let train_accuracy = model.accuracy(&tr)?;
    let validation_accuracy = if val.is_empty() { train_accuracy } else { model.accuracy(&val)? };
    Ok(TrainReport { epoch_losses, train_accuracy, validation_accuracy })
}

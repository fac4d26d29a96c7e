//! Synthetic testbed for the selecting, tuning and maintaining phases.
//!
//! A [`SyntheticModel`] is a short stack of weight matrices with prescribed
//! spectra. A [`ProxyTask`] is a regression problem whose teacher is that model
//! plus planted low-rank perturbations along known singular directions, so the
//! directions a full fine-tune should discover are known in advance.
//! [`run_experiment`] chains full fine-tuning, direction selection and
//! adapter-only training, and scores STM against a baseline initialization.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{merge, trainable_param_count};
use crate::error::{ensure, Error, Result};
use crate::spectral::{decompose, DirectionSet, SvdFactors};
use crate::stm::{
    initialize_adapter_with_factors, maintaining_penalty, maintaining_penalty_grad,
    protected_drift, select_directions, select_rank_from_spectrum, AdaptedLayer, ProtectionRule,
    StmConfig, StmPlan,
};
use crate::tensorio::{Record, Report, ReportKind, Value};
use crate::Matrix;

/// Nonlinearity applied between consecutive layers (never after the last one).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Identity => z.clone(),
            Activation::Tanh => z.map(f64::tanh),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    fn derivative(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Identity => Matrix::from_element(z.nrows(), z.ncols(), 1.0),
            Activation::Tanh => z.map(|v| 1.0 - v.tanh().powi(2)),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Validation(format!("unknown activation {other:?}"))),
        }
    }
}

/// How the singular values of a synthetic layer are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectrumSpec {
    /// Exactly `min(m, n)` values, descending and non-negative.
    Explicit(Vec<f64>),
    /// `σ_i = scale · ratio^i` for `i = 0..K`.
    Geometric { scale: f64, ratio: f64 },
}

impl SpectrumSpec {
    pub fn values(&self, k: usize) -> Result<Vec<f64>> {
        match self {
            SpectrumSpec::Explicit(v) => {
                ensure!(
                    v.len() == k,
                    "explicit spectrum has {} values, layer needs {k}",
                    v.len()
                );
                ensure!(
                    v.iter().all(|s| s.is_finite() && *s >= 0.0),
                    "explicit spectrum must be finite and non-negative"
                );
                ensure!(
                    v.windows(2).all(|p| p[0] >= p[1]),
                    "explicit spectrum must be descending"
                );
                Ok(v.clone())
            }
            &SpectrumSpec::Geometric { scale, ratio } => {
                ensure!(
                    scale.is_finite() && scale > 0.0,
                    "spectrum scale must be positive, got {scale}"
                );
                ensure!(
                    ratio > 0.0 && ratio <= 1.0,
                    "decay ratio must lie in (0, 1], got {ratio}"
                );
                Ok((0..k).map(|i| scale * ratio.powi(i as i32)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub rows: usize,
    pub cols: usize,
    pub spectrum: SpectrumSpec,
}

impl LayerSpec {
    pub fn new(rows: usize, cols: usize, spectrum: SpectrumSpec) -> Self {
        Self {
            rows,
            cols,
            spectrum,
        }
    }
}

/// A stack of "pretrained" weights with known spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    pub layers: Vec<Matrix>,
    /// Singular values each layer was built with.
    pub spectra: Vec<Vec<f64>>,
    pub activation: Activation,
    pub seed: u64,
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `rows × k` matrix with orthonormal columns, Haar-distributed.
fn random_orthonormal(rows: usize, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let qr = gaussian(rows, k, rng).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Builds `U·diag(σ)·Vᵀ` for each layer with seeded random orthonormal `U`, `V`.
pub fn make_synthetic_model(
    specs: &[LayerSpec],
    activation: Activation,
    seed: u64,
) -> Result<SyntheticModel> {
    ensure!(!specs.is_empty(), "a synthetic model needs at least one layer");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(specs.len());
    let mut spectra = Vec::with_capacity(specs.len());
    for (l, spec) in specs.iter().enumerate() {
        ensure!(
            spec.rows > 0 && spec.cols > 0,
            "layer {l} has empty shape {}x{}",
            spec.rows,
            spec.cols
        );
        let k = spec.rows.min(spec.cols);
        let sigma = spec.spectrum.values(k)?;
        let mut u = random_orthonormal(spec.rows, k, &mut rng);
        let v = random_orthonormal(spec.cols, k, &mut rng);
        for (j, s) in sigma.iter().enumerate() {
            u.column_mut(j).scale_mut(*s);
        }
        layers.push(u * v.transpose());
        spectra.push(sigma);
    }
    Ok(SyntheticModel {
        layers,
        spectra,
        activation,
        seed,
    })
}

impl SyntheticModel {
    pub fn input_dim(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Matrix::nrows)
    }

    /// Checks that each layer consumes the previous layer's output.
    pub fn check_chain(&self) -> Result<()> {
        check_chain(&self.layers)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        forward(&self.layers, self.activation, x)
    }
}

fn check_chain(weights: &[Matrix]) -> Result<()> {
    ensure!(!weights.is_empty(), "network has no layers");
    for (l, pair) in weights.windows(2).enumerate() {
        ensure!(
            pair[1].ncols() == pair[0].nrows(),
            "layer {} expects {} inputs but layer {l} produces {}",
            l + 1,
            pair[1].ncols(),
            pair[0].nrows()
        );
    }
    Ok(())
}

/// Pre-activations of every layer and the inputs each layer consumed.
struct Trace {
    pre: Vec<Matrix>,
    inputs: Vec<Matrix>,
}

fn trace(weights: &[Matrix], act: Activation, x: &Matrix) -> Result<Trace> {
    check_chain(weights)?;
    ensure!(
        x.nrows() == weights[0].ncols(),
        "inputs have dimension {}, network expects {}",
        x.nrows(),
        weights[0].ncols()
    );
    let mut pre = Vec::with_capacity(weights.len());
    let mut inputs = Vec::with_capacity(weights.len());
    let mut h = x.clone();
    for (l, w) in weights.iter().enumerate() {
        let z = w * &h;
        inputs.push(h);
        h = if l + 1 < weights.len() { act.apply(&z) } else { z.clone() };
        pre.push(z);
    }
    Ok(Trace { pre, inputs })
}

/// `W_L φ(… φ(W_1 x))`
pub fn forward(weights: &[Matrix], act: Activation, x: &Matrix) -> Result<Matrix> {
    Ok(trace(weights, act, x)?.pre.pop().expect("at least one layer"))
}

/// Mean squared error over every entry of the output.
pub fn mse_loss(weights: &[Matrix], act: Activation, x: &Matrix, targets: &Matrix) -> Result<f64> {
    let y = forward(weights, act, x)?;
    ensure!(
        y.shape() == targets.shape(),
        "targets {:?} do not match outputs {:?}",
        targets.shape(),
        y.shape()
    );
    Ok((y - targets).norm_squared() / targets.len() as f64)
}

/// MSE and its gradient with respect to every weight, by the chain rule.
pub fn mse_loss_and_grads(
    weights: &[Matrix],
    act: Activation,
    x: &Matrix,
    targets: &Matrix,
) -> Result<(f64, Vec<Matrix>)> {
    let Trace { pre, inputs } = trace(weights, act, x)?;
    let y = pre.last().expect("at least one layer");
    ensure!(
        y.shape() == targets.shape(),
        "targets {:?} do not match outputs {:?}",
        targets.shape(),
        y.shape()
    );
    let count = targets.len() as f64;
    let residual = y - targets;
    let loss = residual.norm_squared() / count;

    let mut grads = vec![Matrix::zeros(0, 0); weights.len()];
    let mut g = residual * (2.0 / count);
    for l in (0..weights.len()).rev() {
        grads[l] = &g * inputs[l].transpose();
        if l > 0 {
            g = (weights[l].tr_mul(&g)).component_mul(&act.derivative(&pre[l - 1]));
        }
    }
    Ok((loss, grads))
}

/// One planted perturbation `c · u_k v_kᵀ` along a singular direction of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    /// Zero-based direction index.
    pub index: usize,
    pub amplitude: f64,
}

/// Recipe for a [`ProxyTask`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// Samples used by the full fine-tune.
    pub samples: usize,
    /// Separate samples for adapter training; `None` reuses the fine-tuning samples.
    pub adapt_samples: Option<usize>,
    /// Planted perturbations, one list per layer.
    pub plants: Vec<Vec<Plant>>,
    /// Standard deviation of Gaussian noise added to the targets.
    pub noise: f64,
    /// Frobenius norm of a dense random perturbation added to every teacher layer.
    pub background: f64,
    pub seed: u64,
}

/// Regression data produced by a perturbed copy of a synthetic model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyTask {
    pub fft_inputs: Matrix,
    pub fft_targets: Matrix,
    pub adapt_inputs: Matrix,
    pub adapt_targets: Matrix,
    /// Planted index set per layer.
    pub planted: Vec<DirectionSet>,
    pub plants: Vec<Vec<Plant>>,
    pub noise: f64,
    pub teacher: Vec<Matrix>,
}

impl ProxyTask {
    pub fn generate(model: &SyntheticModel, spec: &TaskSpec) -> Result<Self> {
        model.check_chain()?;
        ensure!(spec.samples > 0, "the task needs at least one sample");
        ensure!(
            spec.adapt_samples != Some(0),
            "adapter split needs at least one sample"
        );
        ensure!(
            spec.noise.is_finite() && spec.noise >= 0.0,
            "noise level must be non-negative, got {}",
            spec.noise
        );
        ensure!(
            spec.background.is_finite() && spec.background >= 0.0,
            "background perturbation must be non-negative"
        );
        ensure!(
            spec.plants.len() == model.layers.len(),
            "plants given for {} layers, model has {}",
            spec.plants.len(),
            model.layers.len()
        );

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut teacher = Vec::with_capacity(model.layers.len());
        let mut planted = Vec::with_capacity(model.layers.len());
        for (l, (w, plants)) in model.layers.iter().zip(&spec.plants).enumerate() {
            let mut t = w.clone();
            if !plants.is_empty() {
                let f = decompose(w)?;
                for p in plants {
                    ensure!(
                        p.index < f.k(),
                        "layer {l}: planted index {} outside 0..{}",
                        p.index,
                        f.k()
                    );
                    ensure!(p.amplitude.is_finite(), "planted amplitude must be finite");
                    t += f.left(p.index) * f.right(p.index).transpose() * p.amplitude;
                }
            }
            if spec.background > 0.0 {
                let g = gaussian(w.nrows(), w.ncols(), &mut rng);
                t += &g * (spec.background / g.norm());
            }
            planted.push(DirectionSet::new(plants.iter().map(|p| p.index))?);
            teacher.push(t);
        }

        let n = model.input_dim();
        let sample = |count: usize, rng: &mut ChaCha8Rng| -> Result<(Matrix, Matrix)> {
            let x = gaussian(n, count, rng);
            let mut y = forward(&teacher, model.activation, &x)?;
            if spec.noise > 0.0 {
                y += gaussian(y.nrows(), y.ncols(), rng) * spec.noise;
            }
            Ok((x, y))
        };
        let (fft_inputs, fft_targets) = sample(spec.samples, &mut rng)?;
        let (adapt_inputs, adapt_targets) = match spec.adapt_samples {
            Some(count) => sample(count, &mut rng)?,
            None => (fft_inputs.clone(), fft_targets.clone()),
        };
        Ok(Self {
            fft_inputs,
            fft_targets,
            adapt_inputs,
            adapt_targets,
            planted,
            plants: spec.plants.clone(),
            noise: spec.noise,
            teacher,
        })
    }

    pub fn has_plants(&self) -> bool {
        self.planted.iter().any(|s| !s.is_empty())
    }
}

/// Adapter initialization being compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Selected directions, exact spectral initialization.
    #[default]
    Stm,
    /// `B = 0`, `A` Kaiming-uniform, same rank as STM.
    ZeroInitLora,
    /// Spectral initialization on a random subset of directions, same rank as STM.
    RandomSubsetLora,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Stm => "stm",
            Method::ZeroInitLora => "zero_init_lora",
            Method::RandomSubsetLora => "random_subset_lora",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stm" => Ok(Method::Stm),
            "zero_init_lora" => Ok(Method::ZeroInitLora),
            "random_subset_lora" => Ok(Method::RandomSubsetLora),
            other => Err(Error::Validation(format!(
                "unknown baseline {other:?} (expected stm, zero_init_lora or random_subset_lora)"
            ))),
        }
    }
}

/// Gradient-descent settings shared by the fine-tuning and adapter phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Columns per step; `None` is full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub baseline: Method,
    /// Weight of the maintaining penalty during adapter training.
    pub reg_weight: f64,
    /// Target task loss as a fraction of the loss at the start of adapter training.
    pub loss_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.5,
            batch_size: None,
            seed: 7,
            baseline: Method::ZeroInitLora,
            reg_weight: 1.0,
            loss_threshold: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps > 0, "steps must be positive");
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning_rate must be positive, got {}",
            self.learning_rate
        );
        ensure!(self.batch_size != Some(0), "batch_size must be positive");
        ensure!(
            self.reg_weight.is_finite() && self.reg_weight >= 0.0,
            "reg_weight must be non-negative, got {}",
            self.reg_weight
        );
        ensure!(
            self.loss_threshold > 0.0 && self.loss_threshold < 1.0,
            "loss_threshold must lie in (0, 1), got {}",
            self.loss_threshold
        );
        Ok(())
    }
}

/// Deterministic minibatch schedule: a fresh seeded permutation per epoch.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    size: Option<usize>,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(samples: usize, size: Option<usize>, seed: u64) -> Self {
        Self {
            order: (0..samples).collect(),
            cursor: samples,
            size: size.filter(|&b| b < samples),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next<'a>(&mut self, x: &'a Matrix, t: &'a Matrix) -> (std::borrow::Cow<'a, Matrix>, std::borrow::Cow<'a, Matrix>) {
        use std::borrow::Cow;
        let Some(size) = self.size else {
            return (Cow::Borrowed(x), Cow::Borrowed(t));
        };
        if self.cursor + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let cols = &self.order[self.cursor..self.cursor + size];
        self.cursor += size;
        (Cow::Owned(x.select_columns(cols)), Cow::Owned(t.select_columns(cols)))
    }
}

/// Losses below this are round-off, not progress or divergence.
const LOSS_FLOOR: f64 = 1e-12;

fn diverged(step: usize, loss: f64, initial: f64) -> Option<Error> {
    (!loss.is_finite() || loss > 10.0 * initial.max(LOSS_FLOOR)).then_some(Error::TrainingDiverged {
        step,
        loss,
        initial,
    })
}

/// Full fine-tuning on the task's fine-tuning split; returns `W′ − W` per layer.
pub fn full_finetune_proxy(
    model: &SyntheticModel,
    task: &ProxyTask,
    cfg: &TrainConfig,
) -> Result<Vec<Matrix>> {
    cfg.validate()?;
    let mut weights = model.layers.clone();
    let mut batches = Batches::new(task.fft_inputs.ncols(), cfg.batch_size, cfg.seed);
    let initial = mse_loss(&weights, model.activation, &task.fft_inputs, &task.fft_targets)?;
    for step in 0..cfg.steps {
        let (x, t) = batches.next(&task.fft_inputs, &task.fft_targets);
        let (loss, grads) = mse_loss_and_grads(&weights, model.activation, &x, &t)?;
        if let Some(e) = diverged(step, loss, initial) {
            return Err(e);
        }
        for (w, g) in weights.iter_mut().zip(&grads) {
            *w -= g * cfg.learning_rate;
        }
    }
    let last = mse_loss(&weights, model.activation, &task.fft_inputs, &task.fft_targets)?;
    if let Some(e) = diverged(cfg.steps, last, initial) {
        return Err(e);
    }
    Ok(weights
        .into_iter()
        .zip(&model.layers)
        .map(|(w, w0)| w - w0)
        .collect())
}

/// STM layers for every model layer: rank from the spectrum, directions from the residual.
pub fn stm_layers(
    model: &SyntheticModel,
    residuals: &[Matrix],
    cfg: &StmConfig,
) -> Result<Vec<AdaptedLayer>> {
    ensure!(
        residuals.len() == model.layers.len(),
        "{} residuals for {} layers",
        residuals.len(),
        model.layers.len()
    );
    model
        .layers
        .iter()
        .zip(residuals)
        .map(|(w, dw)| {
            let f = decompose(w)?;
            let r = select_rank_from_spectrum(f.sigma(), cfg)?;
            let selected = select_directions(&f, dw, r)?;
            initialize_adapter_with_factors(w, f, &selected, cfg)
        })
        .collect()
}

/// LoRA-style layer: `W0 = W`, `B = 0`, `A ~ U(−1/√n, 1/√n)`, nothing selected.
pub fn zero_init_layer(
    w: &Matrix,
    f: SvdFactors,
    rank: usize,
    cfg: &StmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptedLayer> {
    ensure!(rank >= 1 && rank <= f.k(), "rank {rank} outside 1..={}", f.k());
    let (m, n) = w.shape();
    let bound = 1.0 / (n as f64).sqrt();
    let a = Matrix::from_fn(rank, n, |_, _| rng.random_range(-bound..bound));
    let en = crate::eranks::entropy_rank(f.sigma(), cfg.gamma)?;
    let st = crate::eranks::stable_rank(f.sigma(), cfg.gamma)?;
    let cutoff = cfg.protection_rule.apply(st).min(f.k());
    let plan = StmPlan {
        r: rank,
        selected: DirectionSet::empty(),
        protected: DirectionSet::leading(cutoff),
        protect_cutoff: cutoff,
        entropy_rank: en,
        stable_rank: st,
        null_directions: DirectionSet::empty(),
        config: *cfg,
    };
    AdaptedLayer::from_parts(w.clone(), Matrix::zeros(m, rank), a, plan, f)
}

/// Layers initialized by `method`, each with the same rank as the matching STM layer.
pub fn baseline_layers(
    model: &SyntheticModel,
    stm: &[AdaptedLayer],
    method: Method,
    cfg: &StmConfig,
    seed: u64,
) -> Result<Vec<AdaptedLayer>> {
    if method == Method::Stm {
        return Ok(stm.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .layers
        .iter()
        .zip(stm)
        .map(|(w, s)| {
            let f = s.frozen().clone();
            let r = s.rank();
            match method {
                Method::ZeroInitLora => zero_init_layer(w, f, r, cfg, &mut rng),
                _ => {
                    let mut all: Vec<usize> = (0..f.k()).collect();
                    all.shuffle(&mut rng);
                    let picks = DirectionSet::new(all.into_iter().take(r))?;
                    initialize_adapter_with_factors(w, f, &picks, cfg)
                }
            }
        })
        .collect()
}

/// Task loss after each step of adapter training (index 0 is before any step).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

impl TrainTrace {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().expect("trace is never empty")
    }

    /// First step count at which the task loss is at or below `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<usize> {
        self.losses.iter().position(|&l| l <= threshold)
    }
}

/// Trains only `B` and `A` on `task MSE + reg_weight · maintaining penalty`.
pub fn train_adapters(
    layers: &mut [AdaptedLayer],
    activation: Activation,
    x: &Matrix,
    targets: &Matrix,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    ensure!(!layers.is_empty(), "no layers to train");
    let merged = |layers: &[AdaptedLayer]| layers.iter().map(merge).collect::<Vec<_>>();
    let initial = mse_loss(&merged(layers), activation, x, targets)?;
    let mut losses = vec![initial];
    let mut batches = Batches::new(x.ncols(), cfg.batch_size, cfg.seed ^ 0x5eed);
    let penalty_scale = cfg.reg_weight / layers.len() as f64;

    for step in 0..cfg.steps {
        let (bx, bt) = batches.next(x, targets);
        let (_, grads) = mse_loss_and_grads(&merged(layers), activation, &bx, &bt)?;
        for (layer, g) in layers.iter_mut().zip(&grads) {
            let mut grad_b = g * layer.a().transpose();
            let mut grad_a = layer.b().tr_mul(g);
            if penalty_scale > 0.0 {
                let (pb, pa) = maintaining_penalty_grad(layer);
                grad_b += pb * penalty_scale;
                grad_a += pa * penalty_scale;
            }
            layer.step(&grad_b, &grad_a, cfg.learning_rate)?;
        }
        let loss = mse_loss(&merged(layers), activation, x, targets)?;
        if let Some(e) = diverged(step + 1, loss, initial) {
            return Err(e);
        }
        losses.push(loss);
    }
    Ok(TrainTrace { losses })
}

/// Training objective used by [`train_adapters`], for gradient checking.
pub fn adapter_objective(
    layers: &[AdaptedLayer],
    activation: Activation,
    x: &Matrix,
    targets: &Matrix,
    reg_weight: f64,
) -> Result<f64> {
    let merged: Vec<Matrix> = layers.iter().map(merge).collect();
    let task = mse_loss(&merged, activation, x, targets)?;
    Ok(task + reg_weight * maintaining_penalty(layers)?)
}

/// Selection recall: planted directions that were selected, over all planted directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Recall {
    /// Nothing was planted.
    Undefined,
    Value(f64),
}

impl From<Recall> for Value {
    fn from(r: Recall) -> Self {
        match r {
            Recall::Undefined => Value::Text("N/A".into()),
            Recall::Value(v) => Value::Num(v),
        }
    }
}

pub fn selection_recall(layers: &[AdaptedLayer], planted: &[DirectionSet]) -> Recall {
    let total: usize = planted.iter().map(DirectionSet::len).sum();
    if total == 0 {
        return Recall::Undefined;
    }
    let hit: usize = layers
        .iter()
        .zip(planted)
        .map(|(l, p)| l.plan().selected.intersection_len(p))
        .sum();
    Recall::Value(hit as f64 / total as f64)
}

/// Metrics of one adapter-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodMetrics {
    pub method: Method,
    pub rank: usize,
    pub trainable_params: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Largest protected-direction term over all layers after training.
    pub protected_drift: f64,
    pub steps_to_threshold: Option<usize>,
    /// Present for STM only.
    pub selection_recall: Option<Recall>,
    /// `‖BA − (BA)₀‖_F` summed over layers.
    pub update_norm: f64,
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub seed: u64,
    pub reg_weight: f64,
    pub stm: MethodMetrics,
    /// `None` when the configured baseline is STM itself.
    pub baseline: Option<MethodMetrics>,
}

impl ExperimentOutcome {
    pub fn rows(&self) -> impl Iterator<Item = &MethodMetrics> {
        std::iter::once(&self.stm).chain(self.baseline.as_ref())
    }

    pub fn report(&self) -> Report {
        let mut report = Report::new(ReportKind::Metrics);
        for m in self.rows() {
            let steps: Value = match m.steps_to_threshold {
                Some(s) => Value::Int(s as i64),
                None => Value::Text("not reached".into()),
            };
            let mut rec = Record::new()
                .with("method", m.method.to_string())
                .with("seed", self.seed as i64)
                .with("reg_weight", self.reg_weight)
                .with("rank", m.rank as i64)
                .with("trainable_params", m.trainable_params as i64)
                .with("final_loss", m.final_loss)
                .with("protected_drift", m.protected_drift)
                .with("steps_to_threshold", steps);
            if let Some(r) = m.selection_recall {
                rec.set("selection_recall", r);
            }
            report.push(rec);
        }
        report
    }
}

fn adapter_products(layers: &[AdaptedLayer]) -> Vec<Matrix> {
    layers.iter().map(|l| l.b() * l.a()).collect()
}

fn train_and_score(
    mut layers: Vec<AdaptedLayer>,
    method: Method,
    model: &SyntheticModel,
    task: &ProxyTask,
    cfg: &TrainConfig,
) -> Result<MethodMetrics> {
    let start = adapter_products(&layers);
    let trace = train_adapters(
        &mut layers,
        model.activation,
        &task.adapt_inputs,
        &task.adapt_targets,
        cfg,
    )?;
    let update_norm = adapter_products(&layers)
        .iter()
        .zip(&start)
        .map(|(now, then)| (now - then).norm())
        .sum();
    Ok(MethodMetrics {
        method,
        rank: layers.iter().map(AdaptedLayer::rank).sum(),
        trainable_params: trainable_param_count(&layers),
        initial_loss: trace.initial(),
        final_loss: trace.last(),
        protected_drift: layers.iter().map(protected_drift).fold(0.0, f64::max),
        steps_to_threshold: trace.steps_to(cfg.loss_threshold * trace.initial()),
        selection_recall: (method == Method::Stm).then(|| selection_recall(&layers, &task.planted)),
        update_norm,
    })
}

/// Full fine-tune, select, initialize, then train STM and the configured baseline.
pub fn run_experiment(
    model: &SyntheticModel,
    task: &ProxyTask,
    stm_cfg: &StmConfig,
    train_cfg: &TrainConfig,
) -> Result<ExperimentOutcome> {
    stm_cfg.validate()?;
    train_cfg.validate()?;
    let residuals = full_finetune_proxy(model, task, train_cfg)?;
    let stm = stm_layers(model, &residuals, stm_cfg)?;
    let baseline = match train_cfg.baseline {
        Method::Stm => None,
        method => {
            let layers = baseline_layers(model, &stm, method, stm_cfg, train_cfg.seed)?;
            Some(train_and_score(layers, method, model, task, train_cfg)?)
        }
    };
    let stm = train_and_score(stm, Method::Stm, model, task, train_cfg)?;
    Ok(ExperimentOutcome {
        seed: train_cfg.seed,
        reg_weight: train_cfg.reg_weight,
        stm,
        baseline,
    })
}

/// [`run_experiment`] rendered as a metrics report.
pub fn run_stm_experiment(
    model: &SyntheticModel,
    task: &ProxyTask,
    stm_cfg: &StmConfig,
    train_cfg: &TrainConfig,
) -> Result<Report> {
    Ok(run_experiment(model, task, stm_cfg, train_cfg)?.report())
}

/// Default rank-budget scale of the toy experiment.
pub const TOY_ALPHA: f64 = 0.25;

/// The toy problem used by `train-toy` and the acceptance experiments.
///
/// Two tanh layers with geometric spectra (the deeper one flatter), two planted
/// directions per layer outside the protected head, light target noise and a
/// small dense shift that the adapters can only partly express.
pub fn toy_problem(seed: u64) -> Result<(SyntheticModel, ProxyTask)> {
    let model = make_synthetic_model(
        &[
            LayerSpec::new(16, 24, SpectrumSpec::Geometric { scale: 3.0, ratio: 0.75 }),
            LayerSpec::new(12, 16, SpectrumSpec::Geometric { scale: 3.0, ratio: 0.85 }),
        ],
        Activation::Tanh,
        seed,
    )?;
    let plant = |a: usize, b: usize| {
        vec![
            Plant { index: a, amplitude: 1.0 },
            Plant { index: b, amplitude: -0.8 },
        ]
    };
    let task = ProxyTask::generate(
        &model,
        &TaskSpec {
            samples: 96,
            adapt_samples: None,
            plants: vec![plant(5, 7), plant(6, 8)],
            noise: 0.01,
            background: 0.1,
            seed: seed.wrapping_add(1),
        },
    )?;
    Ok((model, task))
}

/// Default STM settings for [`toy_problem`].
pub fn toy_stm_config(alpha: f64) -> StmConfig {
    StmConfig {
        protection_rule: ProtectionRule::Ceil,
        ..StmConfig::new(alpha)
    }
}

/// Largest relative error between central differences of `f` and `analytic`.
///
/// Only entries with `|analytic| > 1e-12` are compared.
pub fn finite_difference_check(
    f: impl Fn(&Matrix) -> Result<f64>,
    analytic: &Matrix,
    point: &Matrix,
    step: f64,
) -> Result<f64> {
    ensure!(step.is_finite() && step > 0.0, "step must be positive, got {step}");
    ensure!(
        analytic.shape() == point.shape(),
        "gradient shape {:?} does not match point {:?}",
        analytic.shape(),
        point.shape()
    );
    let eval = |m: &Matrix| -> Result<f64> {
        let v = f(m)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("objective evaluated to {v}")))
        }
    };
    eval(point)?;
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for idx in 0..point.len() {
        let ana = analytic[idx];
        if ana.abs() <= 1e-12 {
            continue;
        }
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = eval(&probe)?;
        probe[idx] = orig - step;
        let down = eval(&probe)?;
        probe[idx] = orig;
        let num = (up - down) / (2.0 * step);
        worst = worst.max((num - ana).abs() / ana.abs());
    }
    Ok(worst)
}

/// Result of one property sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub name: &'static str,
    pub trials: usize,
    /// Offending seed and a description of each failure.
    pub failures: Vec<(u64, String)>,
}

impl Sweep {
    pub fn passed(&self) -> usize {
        self.trials - self.failures.len()
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Shapes cycled through by the sweeps.
pub const SWEEP_SHAPES: [(usize, usize); 4] = [(8, 8), (16, 5), (5, 16), (24, 12)];

/// Gaussian matrix with log-normal column scales, so spectra range from flat to steep.
pub fn sweep_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread: f64 = rng.random_range(0.0..3.0);
    let mut m = gaussian(rows, cols, &mut rng);
    for j in 0..cols {
        let z: f64 = StandardNormal.sample(&mut rng);
        m.column_mut(j).scale_mut((spread * z).exp());
    }
    m
}

fn sweep(name: &'static str, trials: usize, seed: u64, mut check: impl FnMut(usize, u64) -> Result<Option<String>>) -> Result<Sweep> {
    let mut failures = Vec::new();
    for t in 0..trials {
        let s = seed.wrapping_add(t as u64);
        if let Some(why) = check(t, s)? {
            failures.push((s, why));
        }
    }
    Ok(Sweep {
        name,
        trials,
        failures,
    })
}

/// Stable rank ≤ entropy rank at `γ = 1`. `inject_fault` checks the reverse inequality instead.
pub fn rank_ordering_sweep(trials: usize, seed: u64, inject_fault: bool) -> Result<Sweep> {
    sweep("rank-ordering", trials, seed, |t, s| {
        let (m, n) = SWEEP_SHAPES[t % SWEEP_SHAPES.len()];
        let r = crate::eranks::rank_report(&sweep_matrix(m, n, s), 1.0)?;
        let ok = if inject_fault {
            r.entropy_rank <= r.stable_rank + 1e-9
        } else {
            r.stable_rank <= r.entropy_rank + 1e-9
        };
        Ok((!ok).then(|| format!("stable {} vs entropy {}", r.stable_rank, r.entropy_rank)))
    })
}

/// Random `(W, I)` pair: a sweep matrix and a random non-empty selection.
pub fn sweep_pair(t: usize, seed: u64) -> Result<(Matrix, DirectionSet)> {
    let (m, n) = SWEEP_SHAPES[t % SWEEP_SHAPES.len()];
    let w = sweep_matrix(m, n, seed);
    let k = m.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ec);
    let size = rng.random_range(1..=k / 2);
    let mut all: Vec<usize> = (0..k).collect();
    all.shuffle(&mut rng);
    Ok((w, DirectionSet::new(all.into_iter().take(size))?))
}

/// `‖W0 + BA − W‖_F ≤ 1e-10 ‖W‖_F` right after initialization.
pub fn init_exactness_sweep(trials: usize, seed: u64) -> Result<Sweep> {
    sweep("init-exactness", trials, seed, |t, s| {
        let (w, sel) = sweep_pair(t, s)?;
        let layer = crate::stm::initialize_adapter(&w, &sel, &StmConfig::new(1.0))?;
        let err = (merge(&layer) - &w).norm() / w.norm();
        Ok((err > 1e-10).then(|| format!("relative reconstruction error {err:e}")))
    })
}

/// Maintaining penalty is zero (within 1e-9) right after initialization.
pub fn zero_penalty_sweep(trials: usize, seed: u64) -> Result<Sweep> {
    sweep("zero-penalty", trials, seed, |t, s| {
        let (w, sel) = sweep_pair(t, s)?;
        let layer = crate::stm::initialize_adapter(&w, &sel, &StmConfig::new(1.0))?;
        let p = maintaining_penalty(std::slice::from_ref(&layer))?;
        Ok((p.abs() > 1e-9).then(|| format!("penalty {p:e} at initialization")))
    })
}

/// Smallest `|σ_i u_iᵀ (BA) v_i|` over the protected set.
fn smallest_protected_term(layer: &AdaptedLayer) -> f64 {
    let f = layer.frozen();
    let ba = layer.b() * layer.a();
    layer
        .plan()
        .protected
        .iter()
        .map(|i| (f.sigma()[i] * f.left(i).dot(&(&ba * f.right(i)))).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Initialized layer with its adapter moved off the initialization.
///
/// The leading direction is never selected, so at least one direction is
/// protected. The move is redrawn until every protected term is at least `1e-2`
/// away from zero, keeping the penalty differentiable around the returned point.
pub fn perturbed_layer(t: usize, seed: u64) -> Result<AdaptedLayer> {
    let (w, sel) = sweep_pair(t, seed)?;
    let k = w.nrows().min(w.ncols());
    let mut sel = sel.difference(&DirectionSet::leading(1));
    if sel.is_empty() {
        sel = DirectionSet::new([k - 1])?;
    }
    let base = crate::stm::initialize_adapter(&w, &sel, &StmConfig::new(1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3);
    loop {
        let mut layer = base.clone();
        let b = layer.b() + gaussian(layer.rows(), layer.rank(), &mut rng) * 0.3;
        let a = layer.a() + gaussian(layer.rank(), layer.cols(), &mut rng) * 0.3;
        layer.set_adapter(b, a)?;
        if smallest_protected_term(&layer) >= 1e-2 {
            return Ok(layer);
        }
    }
}

/// Relative errors of the penalty gradient with respect to `B` and `A`.
pub fn penalty_gradient_error(layer: &AdaptedLayer, step: f64) -> Result<(f64, f64)> {
    let (gb, ga) = maintaining_penalty_grad(layer);
    let with = |b: &Matrix, a: &Matrix| -> Result<f64> {
        let mut l = layer.clone();
        l.set_adapter(b.clone(), a.clone())?;
        Ok(crate::stm::layer_penalty(&l))
    };
    let eb = finite_difference_check(|b| with(b, layer.a()), &gb, layer.b(), step)?;
    let ea = finite_difference_check(|a| with(layer.b(), a), &ga, layer.a(), step)?;
    Ok((eb, ea))
}

/// Maintaining-penalty gradient against central differences, tolerance 1e-4.
pub fn penalty_gradient_sweep(trials: usize, seed: u64) -> Result<Sweep> {
    sweep("penalty-gradient", trials, seed, |t, s| {
        let layer = perturbed_layer(t, s)?;
        let (eb, ea) = penalty_gradient_error(&layer, 1e-5)?;
        let err = eb.max(ea);
        Ok((err > 1e-4).then(|| format!("relative gradient error {err:e}")))
    })
}

/// Random two-layer tanh network, inputs and targets for gradient checks.
pub fn mse_check_point(seed: u64) -> (Vec<Matrix>, Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = gaussian(6, 5, &mut rng) * 0.5;
    let w2 = gaussian(4, 6, &mut rng) * 0.5;
    let x = gaussian(5, 8, &mut rng);
    let t = gaussian(4, 8, &mut rng);
    (vec![w1, w2], x, t)
}

/// Largest relative error of the chain-rule MSE gradient over both layers.
pub fn mse_gradient_error(weights: &[Matrix], act: Activation, x: &Matrix, t: &Matrix, step: f64) -> Result<f64> {
    let (_, grads) = mse_loss_and_grads(weights, act, x, t)?;
    let mut worst = 0.0f64;
    for (l, g) in grads.iter().enumerate() {
        let f = |m: &Matrix| {
            let mut ws = weights.to_vec();
            ws[l] = m.clone();
            mse_loss(&ws, act, x, t)
        };
        worst = worst.max(finite_difference_check(f, g, &weights[l], step)?);
    }
    Ok(worst)
}

/// Proxy-task MSE gradient against central differences, tolerance 1e-5.
pub fn mse_gradient_sweep(trials: usize, seed: u64) -> Result<Sweep> {
    sweep("task-gradient", trials, seed, |_, s| {
        let (weights, x, t) = mse_check_point(s);
        let err = mse_gradient_error(&weights, Activation::Tanh, &x, &t, 1e-5)?;
        Ok((err > 1e-5).then(|| format!("relative gradient error {err:e}")))
    })
}

/// Every sweep run by `stm verify`. Gradient sweeps are capped at 100 points.
pub fn verification_suite(trials: usize, seed: u64, inject_fault: bool) -> Result<Vec<Sweep>> {
    ensure!(trials > 0, "trial count must be positive");
    let grad_trials = trials.min(100);
    Ok(vec![
        rank_ordering_sweep(trials, seed, inject_fault)?,
        init_exactness_sweep(trials, seed)?,
        zero_penalty_sweep(trials, seed)?,
        penalty_gradient_sweep(grad_trials, seed)?,
        mse_gradient_sweep(grad_trials, seed)?,
    ])
}

//! Bradley-Terry reward models over observation windows.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Layer, Mlp};
use crate::types::{Label, ObservationWindow, PreferenceRecord};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub env_id: String,
    pub dim: usize,
    pub window_k: usize,
}

impl FeatureSpec {
    pub fn new(env_id: impl Into<String>, dim: usize, window_k: usize) -> Result<Self> {
        if dim == 0 || window_k == 0 {
            return Err(Error::invalid(
                "feature dim and window_k must be at least 1",
            ));
        }
        Ok(Self {
            env_id: env_id.into(),
            dim,
            window_k,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dim * self.window_k
    }
}

/// Concatenates the window's feature vectors in time order.
pub fn featurize(window: &ObservationWindow, spec: &FeatureSpec) -> Result<Vec<f64>> {
    if window.k() != spec.window_k {
        return Err(Error::invalid(format!(
            "window has k={} but the feature spec expects k={}",
            window.k(),
            spec.window_k
        )));
    }
    if window.env_id() != spec.env_id {
        return Err(Error::invalid(format!(
            "window from env {} but the feature spec is for {}",
            window.env_id(),
            spec.env_id
        )));
    }
    let mut out = Vec::with_capacity(spec.input_dim());
    for obs in window.observations() {
        if obs.features.len() != spec.dim {
            return Err(Error::DimensionMismatch {
                expected: spec.dim,
                got: obs.features.len(),
            });
        }
        out.extend_from_slice(&obs.features);
    }
    Ok(out)
}

/// Scalar-output network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    net: Mlp,
}

impl MlpParams {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::invalid(format!(
                "reward network must have one output, got {}",
                net.output_dim()
            )));
        }
        Ok(Self { net })
    }

    pub fn random(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(Mlp::new(&layer_sizes(input_dim, hidden), &mut rng)?)
    }

    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        Self::new(Mlp::zeros(&layer_sizes(input_dim, hidden))?)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }
}

fn layer_sizes(input_dim: usize, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    sizes
}

pub fn predict_reward(params: &MlpParams, x: &[f64]) -> Result<f64> {
    Ok(params.net.forward(x)?[0])
}

fn sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// P[a preferred over b] = e^{r_a} / (e^{r_a} + e^{r_b}).
pub fn bt_probability(r_a: f64, r_b: f64) -> f64 {
    sigmoid(r_a - r_b)
}

/// Per-pair loss as a function of d = r_a - r_b.
pub fn bt_pair_loss(d: f64, label: Label) -> f64 {
    match label {
        Label::A => softplus(-d),
        Label::B => softplus(d),
        Label::Tie => 0.5 * (softplus(-d) + softplus(d)),
    }
}

/// d(loss)/d(d) for [`bt_pair_loss`].
pub fn bt_pair_loss_slope(d: f64, label: Label) -> f64 {
    let s = sigmoid(d);
    match label {
        Label::A => s - 1.0,
        Label::B => s,
        Label::Tie => s - 0.5,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtExample {
    pub x_a: Vec<f64>,
    pub x_b: Vec<f64>,
    pub label: Label,
}

impl BtExample {
    pub fn new(x_a: Vec<f64>, x_b: Vec<f64>, label: Label) -> Self {
        Self { x_a, x_b, label }
    }

    pub fn swapped(&self) -> Self {
        Self {
            x_a: self.x_b.clone(),
            x_b: self.x_a.clone(),
            label: self.label.swapped(),
        }
    }
}

fn require_batch(batch: &[BtExample]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::invalid("batch is empty"))
    } else {
        Ok(())
    }
}

pub fn bt_loss(batch: &[BtExample], params: &MlpParams) -> Result<f64> {
    require_batch(batch)?;
    let mut total = 0.0;
    for ex in batch {
        let d = predict_reward(params, &ex.x_a)? - predict_reward(params, &ex.x_b)?;
        total += bt_pair_loss(d, ex.label);
    }
    Ok(total / batch.len() as f64)
}

pub fn bt_loss_grad(batch: &[BtExample], params: &MlpParams) -> Result<Mlp> {
    Ok(bt_loss_and_grad(batch, params)?.1)
}

/// Mean loss and its gradient, backpropagating through both forward passes.
pub fn bt_loss_and_grad(batch: &[BtExample], params: &MlpParams) -> Result<(f64, Mlp)> {
    require_batch(batch)?;
    let net = &params.net;
    let mut grad = net.zeros_like();
    let mut total = 0.0;
    let inv_n = 1.0 / batch.len() as f64;
    for ex in batch {
        let ca = net.forward_cached(&ex.x_a)?;
        let cb = net.forward_cached(&ex.x_b)?;
        let d = ca.output()[0] - cb.output()[0];
        total += bt_pair_loss(d, ex.label);
        let slope = bt_pair_loss_slope(d, ex.label) * inv_n;
        net.backward(&ca, &[slope], &mut grad);
        net.backward(&cb, &[-slope], &mut grad);
    }
    Ok((total * inv_n, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub rng_seed: u64,
    pub l2: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            epochs: 30,
            validation_fraction: 0.2,
            rng_seed: 0,
            l2: 0.0,
            hidden: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 0.5]".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.l2 < 0.0 {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: Vec<EpochStats>,
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_accuracy)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Affine map r -> (r - shift) / scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: f64,
    pub scale: f64,
}

impl Standardizer {
    pub fn apply(&self, r: f64) -> f64 {
        (r - self.shift) / self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub spec: FeatureSpec,
    pub params: MlpParams,
    pub standardize: Option<Standardizer>,
}

impl RewardModel {
    pub fn raw_reward(&self, window: &ObservationWindow) -> Result<f64> {
        predict_reward(&self.params, &featurize(window, &self.spec)?)
    }

    /// Reward with the standardizer (if any) applied.
    pub fn reward(&self, window: &ObservationWindow) -> Result<f64> {
        let r = self.raw_reward(window)?;
        Ok(self.standardize.map_or(r, |s| s.apply(r)))
    }

    pub fn reward_features(&self, x: &[f64]) -> Result<f64> {
        let r = predict_reward(&self.params, x)?;
        Ok(self.standardize.map_or(r, |s| s.apply(r)))
    }

    pub fn preference_accuracy(&self, records: &[PreferenceRecord]) -> Result<f64> {
        preference_accuracy(|w| self.raw_reward(w), records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = Checkpoint {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            layers: self.params.net.layers.clone(),
            standardize: self.standardize,
        };
        let text = serde_json::to_string_pretty(&doc)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Checkpoint = serde_json::from_str(&text)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                doc.version
            )));
        }
        let params = MlpParams::new(Mlp::from_layers(doc.layers)?)?;
        if params.input_dim() != doc.spec.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: doc.spec.input_dim(),
                got: params.input_dim(),
            });
        }
        Ok(Self {
            spec: doc.spec,
            params,
            standardize: doc.standardize,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    spec: FeatureSpec,
    layers: Vec<Layer>,
    standardize: Option<Standardizer>,
}

/// Fraction of non-TIE records where the scorer strictly orders the pair as
/// labelled. Equal scores count as wrong.
pub fn preference_accuracy<F>(mut score: F, records: &[PreferenceRecord]) -> Result<f64>
where
    F: FnMut(&ObservationWindow) -> Result<f64>,
{
    let mut correct = 0usize;
    let mut total = 0usize;
    for rec in records {
        if rec.label == Label::Tie {
            continue;
        }
        let ra = score(&rec.window_a)?;
        let rb = score(&rec.window_b)?;
        total += 1;
        let ok = match rec.label {
            Label::A => ra > rb,
            Label::B => rb > ra,
            Label::Tie => unreachable!(),
        };
        correct += ok as usize;
    }
    if total == 0 {
        return Err(Error::invalid("no rankable records"));
    }
    Ok(correct as f64 / total as f64)
}

fn accuracy_on(params: &MlpParams, examples: &[BtExample]) -> Result<Option<f64>> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in examples {
        if ex.label == Label::Tie {
            continue;
        }
        let d = predict_reward(params, &ex.x_a)? - predict_reward(params, &ex.x_b)?;
        total += 1;
        correct += match ex.label {
            Label::A => d > 0.0,
            _ => d < 0.0,
        } as usize;
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

pub fn records_to_examples(
    records: &[PreferenceRecord],
    spec: &FeatureSpec,
) -> Result<Vec<BtExample>> {
    records
        .iter()
        .map(|r| {
            Ok(BtExample::new(
                featurize(&r.window_a, spec)?,
                featurize(&r.window_b, spec)?,
                r.label,
            ))
        })
        .collect()
}

/// Adam minibatch training. The validation split is drawn from a seeded
/// shuffle; the rest of the run is deterministic in `config.rng_seed`.
pub fn train_reward_model(
    dataset: &[PreferenceRecord],
    spec: &FeatureSpec,
    config: &TrainConfig,
) -> Result<(RewardModel, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("preference dataset is empty"));
    }
    let examples = records_to_examples(dataset, spec)?;
    let mut warnings = Vec::new();
    if dataset.iter().all(|r| r.label == Label::Tie) {
        let msg =
            "all records are TIE; the reward is identifiable only up to a constant".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (config.validation_fraction * examples.len() as f64).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    if train_idx.is_empty() {
        return Err(Error::invalid(
            "no training records left after the validation split",
        ));
    }
    let val: Vec<BtExample> = val_idx.iter().map(|&i| examples[i].clone()).collect();
    let mut train: Vec<BtExample> = train_idx.iter().map(|&i| examples[i].clone()).collect();

    let mut params = MlpParams::new(Mlp::new(
        &layer_sizes(spec.input_dim(), &config.hidden),
        &mut rng,
    )?)?;
    let mut adam = Adam::new(&params.net, config.adam());
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        train.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in train.chunks(config.batch_size) {
            let (loss, mut grad) = bt_loss_and_grad(batch, &params)?;
            if config.l2 > 0.0 {
                params.net.add_l2_grad(&mut grad, config.l2);
            }
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            adam.step(&mut params.net, &grad);
        }
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            (Some(bt_loss(&val, &params)?), accuracy_on(&params, &val)?)
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_accuracy,
        };
        log::debug!("reward model epoch {epoch}: {stats:?}");
        epochs.push(stats);
    }

    let model = RewardModel {
        spec: spec.clone(),
        params,
        standardize: None,
    };
    let report = TrainReport {
        n_train: train.len(),
        n_val: val.len(),
        epochs,
        warnings,
    };
    Ok((model, report))
}

/// Standardizer mapping the raw outputs on `reference` to mean 0 and
/// (population) standard deviation 1.
pub fn standardize_rewards(params: &MlpParams, reference: &[Vec<f64>]) -> Result<Standardizer> {
    if reference.len() < 2 {
        return Err(Error::invalid("reference batch needs at least two inputs"));
    }
    let raw = reference
        .iter()
        .map(|x| predict_reward(params, x))
        .collect::<Result<Vec<_>>>()?;
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return Err(Error::invalid("reference rewards have zero variance"));
    }
    Ok(Standardizer {
        shift: mean,
        scale: std,
    })
}

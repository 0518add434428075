//! Building a MetaModel out of verified private models: feature
//! concatenation, a fusion head trained either free-form (Strategy I) or by
//! two-stage gradual fusion with structured initialization (Strategy II),
//! plus the federated-averaging baseline used for comparisons.

use crate::nn::{
    self, argmax, Example, LabeledDataset, Layer, LayeredModel, NnError, Optimizer, TrainConfig,
    Value,
};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no models to fuse")]
    NoModels,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// Fusion head: `h = Aᵀ·f_c`, `y = softmax(Bᵀ·h)`, with block layout metadata
/// for the gradual-fusion stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    /// (|f_c|, |h|) map from concatenated features to the hidden layer.
    pub a: Array2<f64>,
    /// (|h|, d) map from the hidden layer to class scores.
    pub b: Array2<f64>,
    /// Per-model [start, end) spans inside f_c.
    pub feature_spans: Vec<(usize, usize)>,
    /// Per-model [start, end) spans inside h (each d wide).
    pub label_spans: Vec<(usize, usize)>,
    /// Gradual-fusion stage flag: 0 trains in-block weights only, 1 trains all.
    pub stage: u8,
}

impl FusionWeights {
    pub fn hidden_len(&self) -> usize {
        self.a.ncols()
    }

    pub fn classes(&self) -> usize {
        self.b.ncols()
    }

    pub fn forward(&self, features: &Array1<f64>) -> Result<Array1<f64>> {
        if features.len() != self.a.nrows() {
            return Err(FusionError::Shape(format!(
                "feature length {} != {}",
                features.len(),
                self.a.nrows()
            )));
        }
        let hidden = self.a.t().dot(features);
        let scores = self.b.t().dot(&hidden);
        Ok(nn::softmax(&scores))
    }

    /// Block-diagonal mask of A: true where the entry belongs to model i's
    /// (feature span x label span) block.
    fn a_in_block(&self, row: usize, col: usize) -> bool {
        self.feature_spans.iter().zip(&self.label_spans).any(|(&(fs, fe), &(ls, le))| {
            row >= fs && row < fe && col >= ls && col < le
        })
    }

    /// Stacked-identity mask of B: true at `w_{p,j,j}` positions.
    fn b_on_identity(&self, row: usize, col: usize) -> bool {
        row % self.classes() == col
    }
}

/// Frozen private models plus the trained fusion head.
#[derive(Debug, Clone)]
pub struct MetaModel {
    pub extractors: Vec<LayeredModel>,
    pub head: FusionWeights,
    pub classes: usize,
}

impl MetaModel {
    pub fn forward(&self, input: &Value) -> Result<Array1<f64>> {
        let features = concat_features(&self.extractors, input)?;
        self.head.forward(&features)
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        use rayon::prelude::*;
        let features: Vec<(Array1<f64>, usize)> = examples
            .par_iter()
            .map(|ex| concat_features(&self.extractors, &ex.input).map(|f| (f, ex.label)))
            .collect::<Result<_>>()?;
        let correct = features
            .iter()
            .filter(|(f, label)| argmax(&self.head.forward(f).expect("shape-checked")) == *label)
            .count();
        Ok(correct as f64 / examples.len() as f64)
    }
}

/// Concatenation of each model's upper-layer feature vector, in model order.
pub fn concat_features(models: &[LayeredModel], input: &Value) -> Result<Array1<f64>> {
    if models.is_empty() {
        return Err(FusionError::NoModels);
    }
    let mut out = Vec::new();
    for model in models {
        out.extend(model.feature_vector(input)?.into_iter());
    }
    Ok(Array1::from_vec(out))
}

fn feature_spans(models: &[LayeredModel]) -> Result<Vec<(usize, usize)>> {
    let mut spans = Vec::with_capacity(models.len());
    let mut at = 0;
    for model in models {
        let len = model.feature_len()?;
        spans.push((at, at + len));
        at += len;
    }
    Ok(spans)
}

/// Precompute concatenated features for every example (extractors are frozen,
/// so this is done once per fusion).
fn feature_table(models: &[LayeredModel], examples: &[Example]) -> Result<Vec<(Array1<f64>, usize)>> {
    use rayon::prelude::*;
    examples
        .par_iter()
        .map(|ex| concat_features(models, &ex.input).map(|f| (f, ex.label)))
        .collect()
}

struct HeadAdam {
    ma: Array2<f64>,
    va: Array2<f64>,
    mb: Array2<f64>,
    vb: Array2<f64>,
    step: usize,
}

/// Train the head on precomputed features. `masked` restricts updates to
/// Strategy II's in-block / identity-pattern positions (the γ = 0 stage).
fn train_head(
    head: &mut FusionWeights,
    table: &[(Array1<f64>, usize)],
    cfg: &TrainConfig,
    epochs: usize,
    masked: bool,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    if table.is_empty() {
        return Err(FusionError::Shape("no fusion training data".into()));
    }
    let d = head.classes();
    let batch = cfg.batch_size.clamp(1, table.len());
    let mut adam = HeadAdam {
        ma: Array2::zeros(head.a.dim()),
        va: Array2::zeros(head.a.dim()),
        mb: Array2::zeros(head.b.dim()),
        vb: Array2::zeros(head.b.dim()),
        step: 0,
    };
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..table.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let mut da = Array2::<f64>::zeros(head.a.dim());
            let mut db = Array2::<f64>::zeros(head.b.dim());
            for &i in chunk {
                let (features, label) = &table[i];
                let hidden = head.a.t().dot(features);
                let scores = head.b.t().dot(&hidden);
                let mut delta = nn::softmax(&scores);
                delta[*label] -= 1.0;
                // dB = h ⊗ δ, dh = B·δ, dA = f ⊗ dh
                for r in 0..head.b.nrows() {
                    for c in 0..d {
                        db[[r, c]] += hidden[r] * delta[c];
                    }
                }
                let dh = head.b.dot(&delta);
                for r in 0..head.a.nrows() {
                    let f = features[r];
                    if f == 0.0 {
                        continue;
                    }
                    for c in 0..head.a.ncols() {
                        da[[r, c]] += f * dh[c];
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            da.mapv_inplace(|v| v * inv);
            db.mapv_inplace(|v| v * inv);
            if masked {
                for ((r, c), v) in da.indexed_iter_mut() {
                    if !head.a_in_block(r, c) {
                        *v = 0.0;
                    }
                }
                for ((r, c), v) in db.indexed_iter_mut() {
                    if !head.b_on_identity(r, c) {
                        *v = 0.0;
                    }
                }
            }
            adam.step += 1;
            let (b1, b2, eps) = match cfg.optimizer {
                Optimizer::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
                Optimizer::Sgd => (0.0, 0.0, 0.0),
            };
            let lr = cfg.learning_rate;
            match cfg.optimizer {
                Optimizer::Sgd => {
                    head.a.zip_mut_with(&da, |p, &g| *p -= lr * g);
                    head.b.zip_mut_with(&db, |p, &g| *p -= lr * g);
                }
                Optimizer::Adam { .. } => {
                    let bc1 = 1.0 - b1.powi(adam.step as i32);
                    let bc2 = 1.0 - b2.powi(adam.step as i32);
                    for ((p, g), (m, v)) in head
                        .a
                        .iter_mut()
                        .zip(da.iter())
                        .zip(adam.ma.iter_mut().zip(adam.va.iter_mut()))
                    {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    }
                    for ((p, g), (m, v)) in head
                        .b
                        .iter_mut()
                        .zip(db.iter())
                        .zip(adam.mb.iter_mut().zip(adam.vb.iter_mut()))
                    {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_labels(data: &LabeledDataset) -> Result<()> {
    data.validate()?;
    if data.train.is_empty() {
        return Err(FusionError::Shape("fusion training data is empty".into()));
    }
    Ok(())
}

/// Strategy I: A and B initialized randomly without constraints, optimized by
/// plain backpropagation. Private models stay frozen.
pub fn fuse_strategy1(
    models: &[LayeredModel],
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<MetaModel> {
    if models.is_empty() {
        return Err(FusionError::NoModels);
    }
    check_labels(data)?;
    let d = data.classes;
    let spans = feature_spans(models)?;
    let fc_len = spans.last().map(|&(_, e)| e).unwrap_or(0);
    let hidden = models.len() * d;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let bound_a = (6.0 / (fc_len + hidden) as f64).sqrt();
    let bound_b = (6.0 / (hidden + d) as f64).sqrt();
    let a = Array2::from_shape_fn((fc_len, hidden), |_| rng.random_range(-bound_a..bound_a));
    let b = Array2::from_shape_fn((hidden, d), |_| rng.random_range(-bound_b..bound_b));
    let mut head = FusionWeights {
        a,
        b,
        feature_spans: spans,
        label_spans: (0..models.len()).map(|i| (i * d, (i + 1) * d)).collect(),
        stage: 1,
    };
    let table = feature_table(models, &data.train)?;
    train_head(&mut head, &table, cfg, cfg.max_epochs, false, &mut rng)?;
    Ok(MetaModel { extractors: models.to_vec(), head, classes: d })
}

/// Strategy II: A starts block-diagonal (random blocks W_i), B starts as
/// stacked d x d identities; stage one (γ = 0) trains in-block weights only
/// for `stage_epochs.0` epochs, stage two (γ = 1) trains everything for
/// `stage_epochs.1` epochs.
pub fn fuse_strategy2(
    models: &[LayeredModel],
    data: &LabeledDataset,
    cfg: &TrainConfig,
    stage_epochs: (usize, usize),
) -> Result<MetaModel> {
    if models.is_empty() {
        return Err(FusionError::NoModels);
    }
    check_labels(data)?;
    let d = data.classes;
    let spans = feature_spans(models)?;
    let fc_len = spans.last().map(|&(_, e)| e).unwrap_or(0);
    let hidden = models.len() * d;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut head = FusionWeights {
        a: Array2::zeros((fc_len, hidden)),
        b: stacked_identities(models.len(), d),
        feature_spans: spans.clone(),
        label_spans: (0..models.len()).map(|i| (i * d, (i + 1) * d)).collect(),
        stage: 0,
    };
    for (i, &(fs, fe)) in spans.iter().enumerate() {
        let bound = (6.0 / ((fe - fs) + d) as f64).sqrt();
        for r in fs..fe {
            for c in i * d..(i + 1) * d {
                head.a[[r, c]] = rng.random_range(-bound..bound);
            }
        }
    }
    let table = feature_table(models, &data.train)?;
    train_head(&mut head, &table, cfg, stage_epochs.0, true, &mut rng)?;
    head.stage = 1;
    train_head(&mut head, &table, cfg, stage_epochs.1, false, &mut rng)?;
    Ok(MetaModel { extractors: models.to_vec(), head, classes: d })
}

/// `B_init`: n stacked d x d identity matrices.
pub fn stacked_identities(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n * d, d), |(r, c)| ((r % d == c) as u8) as f64)
}

/// Deterministic per-round, per-client seed for local training.
pub fn fedavg_local_seed(seed: u64, round: usize, client: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((round as u64) << 20)
        .wrapping_add(client as u64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FedAvgOutcome {
    #[serde(skip)]
    pub model: Option<LayeredModel>,
    /// Global-model accuracy on each local verify split after every round.
    pub round_local_accuracies: Vec<Vec<f64>>,
    /// Total weight bytes moved: broadcast + collection, every round.
    pub transferred_bytes: u64,
}

/// Federated averaging: broadcast the global weights, train every local copy
/// for `local_epochs`, then set the global weights to the arithmetic mean.
/// No client sampling; every contributor participates in every round.
pub fn fedavg_baseline(
    local_datasets: &[LabeledDataset],
    arch_model: &LayeredModel,
    rounds: usize,
    local_epochs: usize,
    cfg: &TrainConfig,
) -> Result<FedAvgOutcome> {
    if local_datasets.is_empty() {
        return Err(FusionError::NoModels);
    }
    let mut global = arch_model.clone();
    let weight_bytes = (global.parameter_count() * 8) as u64;
    let mut transferred = 0u64;
    let mut round_local_accuracies = Vec::new();
    for round in 0..rounds {
        let mut locals = Vec::with_capacity(local_datasets.len());
        for (client, data) in local_datasets.iter().enumerate() {
            let local_cfg = TrainConfig {
                max_epochs: local_epochs,
                stop_accuracy: f64::INFINITY, // fixed-epoch local updates
                seed: fedavg_local_seed(cfg.seed, round, client),
                ..*cfg
            };
            // broadcast + collection
            transferred += 2 * weight_bytes;
            locals.push(nn::train(&global, data, &local_cfg)?.model);
        }
        global = average_models(&locals)?;
        let mut accs = Vec::new();
        for data in local_datasets {
            let split = if data.verify.is_empty() { &data.train } else { &data.verify };
            accs.push(global.evaluate(split)?);
        }
        round_local_accuracies.push(accs);
    }
    Ok(FedAvgOutcome { model: Some(global), round_local_accuracies, transferred_bytes: transferred })
}

/// Arithmetic mean of identically shaped models.
pub fn average_models(models: &[LayeredModel]) -> Result<LayeredModel> {
    let first = models.first().ok_or(FusionError::NoModels)?;
    let mut out = first.clone();
    for other in &models[1..] {
        if other.layers.len() != out.layers.len() {
            return Err(FusionError::Shape("layer count differs".into()));
        }
        for (acc, layer) in out.layers.iter_mut().zip(&other.layers) {
            match (acc, layer) {
                (Layer::Dense { weights: aw, bias: ab }, Layer::Dense { weights: bw, bias: bb }) => {
                    if aw.dim() != bw.dim() {
                        return Err(FusionError::Shape("dense shape differs".into()));
                    }
                    *aw += bw;
                    *ab += bb;
                }
                (
                    Layer::Conv2d { kernels: ak, bias: ab, .. },
                    Layer::Conv2d { kernels: bk, bias: bb, .. },
                ) => {
                    if ak.dim() != bk.dim() {
                        return Err(FusionError::Shape("conv shape differs".into()));
                    }
                    *ak += bk;
                    *ab += bb;
                }
                (a, b) => {
                    if std::mem::discriminant(a) != std::mem::discriminant(b) {
                        return Err(FusionError::Shape("layer kinds differ".into()));
                    }
                }
            }
        }
    }
    let inv = 1.0 / models.len() as f64;
    for layer in out.layers.iter_mut() {
        match layer {
            Layer::Dense { weights, bias } => {
                weights.mapv_inplace(|v| v * inv);
                bias.mapv_inplace(|v| v * inv);
            }
            Layer::Conv2d { kernels, bias, .. } => {
                kernels.mapv_inplace(|v| v * inv);
                bias.mapv_inplace(|v| v * inv);
            }
            _ => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;

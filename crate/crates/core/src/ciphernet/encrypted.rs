//! Encrypted models and the lane-parallel cipherspace forward pass.
//!
//! Element-wise strategy: every element of one weight tensor becomes its own
//! length-2 ciphertext, giving the tensor a trailing lane axis of size 2.
//! Matrix-pair strategy: the first convolution is encrypted as vectors across
//! its filter dimension (r filters become r+1 channels) and the second
//! convolution is expanded with a zero-weight extra input channel so the pair
//! composes with no dimension mismatch.

use super::scaled::{int_argmax, int_conv2d, int_dense, int_sigmoid, int_sum_pool, IntValue, ScaledLayer, ScaledModel};
use super::{CiphernetError, Result, SigmoidApprox};
use crate::ivhe::{self, Ciphertext, HeParams, KeyId, SecretKey, SwitchKey};
use crate::nn::{Activation, InputShape, Padding, PoolKind, Value};
use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ElementWise,
    MatrixPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncryptedFirstLayer {
    /// Element-wise encrypted dense layer; `lane1`/`lane2` hold the two
    /// ciphertext digits of every weight element (shape out x in x 2 overall).
    Dense { lane1: Array2<i64>, lane2: Array2<i64>, bias: Array1<i64> },
    /// Element-wise encrypted convolution (kernel shape + lane axis of 2).
    Conv { lane1: Array4<i64>, lane2: Array4<i64>, bias: Array1<i64>, padding: Padding },
    /// Matrix-pair encrypted convolution: per kernel tap, the vector across
    /// all `filters` output channels becomes one length `filters+1`
    /// ciphertext stored along the last axis.
    ConvVector { taps: Array3<i64>, bias: Array1<i64>, padding: Padding, filters: usize },
}

impl EncryptedFirstLayer {
    /// Shape of the encrypted tensor including the lane axis.
    pub fn encrypted_shape(&self) -> Vec<usize> {
        match self {
            EncryptedFirstLayer::Dense { lane1, .. } => {
                vec![lane1.nrows(), lane1.ncols(), 2]
            }
            EncryptedFirstLayer::Conv { lane1, .. } => {
                let (o, i, kh, kw) = lane1.dim();
                vec![o, i, kh, kw, 2]
            }
            EncryptedFirstLayer::ConvVector { taps, .. } => {
                let (kh, kw, lanes) = taps.dim();
                vec![kh, kw, 1, lanes]
            }
        }
    }
}

/// A model whose designated weight tensor lives in cipherspace; all other
/// layers stay plaintext-scaled. This is the blob contributors publish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncryptedModel {
    pub strategy: Strategy,
    pub key_id: KeyId,
    pub he: HeParams,
    pub input_shape: InputShape,
    pub weight_scale: i64,
    pub input_scale: i64,
    /// Index of the encrypted weight layer among the model's weight layers.
    pub encrypted_index: usize,
    /// Plaintext-scaled layers before the encrypted one.
    pub prefix: Vec<ScaledLayer>,
    pub first: EncryptedFirstLayer,
    /// Plaintext-scaled layers after the encrypted one. For the matrix-pair
    /// strategy this still holds the original second convolution; the
    /// zero-channel expansion happens during the forward pass.
    pub suffix: Vec<ScaledLayer>,
    pub output_scale: Vec<i64>,
    pub sigmoid: SigmoidApprox,
    pub post_softmax: bool,
}

const ENC_FORMAT: &str = "encrypted-model";
const ENC_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EncDoc {
    format: String,
    version: u32,
    model: EncryptedModel,
}

impl EncryptedModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&EncDoc {
            format: ENC_FORMAT.into(),
            version: ENC_VERSION,
            model: self.clone(),
        })
        .expect("encrypted model serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<EncryptedModel> {
        let doc: EncDoc =
            serde_json::from_str(s).map_err(|e| CiphernetError::Serial(e.to_string()))?;
        if doc.format != ENC_FORMAT || doc.version != ENC_VERSION {
            return Err(CiphernetError::Serial(format!(
                "unknown container {}/{}",
                doc.format, doc.version
            )));
        }
        Ok(doc.model)
    }

    /// Expanded kernel shape of the second convolution under the matrix-pair
    /// strategy: `(filters2, r+1, kh, kw)`.
    pub fn second_conv_expanded_shape(&self) -> Option<(usize, usize, usize, usize)> {
        if self.strategy != Strategy::MatrixPair {
            return None;
        }
        let r = match &self.first {
            EncryptedFirstLayer::ConvVector { filters, .. } => *filters,
            _ => return None,
        };
        self.suffix.iter().find_map(|l| match l {
            ScaledLayer::Conv2d { kernels, .. } => {
                let (o, _, kh, kw) = kernels.dim();
                Some((o, r + 1, kh, kw))
            }
            _ => None,
        })
    }
}

fn encrypt_scalar(y: i64, swk: &SwitchKey) -> Result<(i64, i64)> {
    let ct = ivhe::encrypt(&[y], swk, swk.params())?;
    Ok((ct.digits[0], ct.digits[1]))
}

fn split_at_weight_layer(
    layers: &[ScaledLayer],
    weight_index: usize,
) -> Result<(Vec<ScaledLayer>, &ScaledLayer, Vec<ScaledLayer>)> {
    let mut seen = 0usize;
    for (i, l) in layers.iter().enumerate() {
        if matches!(l, ScaledLayer::Dense { .. } | ScaledLayer::Conv2d { .. }) {
            if seen == weight_index {
                return Ok((layers[..i].to_vec(), &layers[i], layers[i + 1..].to_vec()));
            }
            seen += 1;
        }
    }
    Err(CiphernetError::Param(format!(
        "model has {seen} weight layers, cannot encrypt layer {weight_index}"
    )))
}

/// Element-wise encryption of the first weight tensor.
pub fn encrypt_elementwise(sm: &ScaledModel, swk: &SwitchKey) -> Result<EncryptedModel> {
    encrypt_elementwise_at(sm, swk, 0)
}

/// Element-wise encryption of the `weight_index`-th weight tensor (an
/// experimentation knob; the published default is the first tensor).
pub fn encrypt_elementwise_at(
    sm: &ScaledModel,
    swk: &SwitchKey,
    weight_index: usize,
) -> Result<EncryptedModel> {
    let params = *swk.params();
    if params.n != 1 {
        return Err(CiphernetError::Mode(format!(
            "element-wise encryption needs a scalar key (n = 1), got n = {}",
            params.n
        )));
    }
    if 2 * params.fresh_noise_bound() >= params.w {
        return Err(CiphernetError::Param(format!(
            "noise bound {} cannot even decrypt a fresh ciphertext under w = {}",
            params.fresh_noise_bound(),
            params.w
        )));
    }
    let (prefix, target, suffix) = split_at_weight_layer(&sm.layers, weight_index)?;
    let first = match target {
        ScaledLayer::Dense { weights, bias } => {
            let mut lane1 = Array2::zeros(weights.dim());
            let mut lane2 = Array2::zeros(weights.dim());
            for (idx, &y) in weights.indexed_iter() {
                let (a, b) = encrypt_scalar(y, swk)?;
                lane1[idx] = a;
                lane2[idx] = b;
            }
            EncryptedFirstLayer::Dense { lane1, lane2, bias: bias.clone() }
        }
        ScaledLayer::Conv2d { kernels, bias, padding } => {
            let mut lane1 = Array4::zeros(kernels.dim());
            let mut lane2 = Array4::zeros(kernels.dim());
            for (idx, &y) in kernels.indexed_iter() {
                let (a, b) = encrypt_scalar(y, swk)?;
                lane1[idx] = a;
                lane2[idx] = b;
            }
            EncryptedFirstLayer::Conv { lane1, lane2, bias: bias.clone(), padding: *padding }
        }
        _ => unreachable!("split_at_weight_layer returns weight layers"),
    };
    Ok(EncryptedModel {
        strategy: Strategy::ElementWise,
        key_id: swk.id(),
        he: params,
        input_shape: sm.input_shape,
        weight_scale: sm.weight_scale,
        input_scale: sm.input_scale,
        encrypted_index: weight_index,
        prefix,
        first,
        suffix,
        output_scale: sm.output_scale.clone(),
        sigmoid: sm.sigmoid.clone(),
        post_softmax: sm.post_softmax,
    })
}

/// Matrix-pair encryption: the model must begin with a single-channel
/// convolution followed (possibly after activations/pools) by a second
/// convolution.
pub fn encrypt_matrixpair(sm: &ScaledModel, swk: &SwitchKey) -> Result<EncryptedModel> {
    let params = *swk.params();
    let (first_conv, suffix) = match sm.layers.split_first() {
        Some((ScaledLayer::Conv2d { kernels, bias, padding }, rest)) => {
            ((kernels, bias, padding), rest)
        }
        _ => {
            return Err(CiphernetError::Strategy(
                "matrix-pair encryption needs the model to start with a convolution".into(),
            ))
        }
    };
    if !suffix.iter().any(|l| matches!(l, ScaledLayer::Conv2d { .. })) {
        return Err(CiphernetError::Strategy(
            "matrix-pair encryption needs a second convolution layer".into(),
        ));
    }
    let (kernels, bias, padding) = first_conv;
    let (r, in_c, kh, kw) = kernels.dim();
    if in_c != 1 {
        return Err(CiphernetError::Strategy(format!(
            "matrix-pair encryption expects a single input channel, got {in_c}"
        )));
    }
    if params.n != r {
        return Err(CiphernetError::Mode(format!(
            "key vector length {} does not match filter count {r}",
            params.n
        )));
    }
    if 2 * params.fresh_noise_bound() >= params.w {
        return Err(CiphernetError::Param(format!(
            "noise bound {} cannot even decrypt a fresh ciphertext under w = {}",
            params.fresh_noise_bound(),
            params.w
        )));
    }
    let mut taps = Array3::zeros((kh, kw, r + 1));
    for ky in 0..kh {
        for kx in 0..kw {
            let filter_vec: Vec<i64> = (0..r).map(|f| kernels[[f, 0, ky, kx]]).collect();
            let ct = ivhe::encrypt(&filter_vec, swk, &params)?;
            for (lane, &d) in ct.digits.iter().enumerate() {
                taps[[ky, kx, lane]] = d;
            }
        }
    }
    Ok(EncryptedModel {
        strategy: Strategy::MatrixPair,
        key_id: swk.id(),
        he: params,
        input_shape: sm.input_shape,
        weight_scale: sm.weight_scale,
        input_scale: sm.input_scale,
        encrypted_index: 0,
        prefix: Vec::new(),
        first: EncryptedFirstLayer::ConvVector {
            taps,
            bias: bias.clone(),
            padding: *padding,
            filters: r,
        },
        suffix: suffix.to_vec(),
        output_scale: sm.output_scale.clone(),
        sigmoid: sm.sigmoid.clone(),
        post_softmax: sm.post_softmax,
    })
}

/// Decrypt the encrypted weight tensor and reassemble the scaled model.
/// Exact whenever the key pair's fresh noise stays under w/2.
pub fn decrypt_model(em: &EncryptedModel, sk: &SecretKey) -> Result<ScaledModel> {
    if sk.id() != em.key_id {
        return Err(CiphernetError::Mode("secret key does not match the encrypted model".into()));
    }
    let recovered = match &em.first {
        EncryptedFirstLayer::Dense { lane1, lane2, bias } => {
            let mut weights = Array2::zeros(lane1.dim());
            for (idx, &a) in lane1.indexed_iter() {
                let ct = Ciphertext {
                    digits: vec![a, lane2[idx]],
                    key: em.key_id,
                    params: em.he,
                    scale: Vec::new(),
                    noise_bound: em.he.fresh_noise_bound(),
                };
                weights[idx] = ivhe::decrypt(&ct, sk)?[0];
            }
            ScaledLayer::Dense { weights, bias: bias.clone() }
        }
        EncryptedFirstLayer::Conv { lane1, lane2, bias, padding } => {
            let mut kernels = Array4::zeros(lane1.dim());
            for (idx, &a) in lane1.indexed_iter() {
                let ct = Ciphertext {
                    digits: vec![a, lane2[idx]],
                    key: em.key_id,
                    params: em.he,
                    scale: Vec::new(),
                    noise_bound: em.he.fresh_noise_bound(),
                };
                kernels[idx] = ivhe::decrypt(&ct, sk)?[0];
            }
            ScaledLayer::Conv2d { kernels, bias: bias.clone(), padding: *padding }
        }
        EncryptedFirstLayer::ConvVector { taps, bias, padding, filters } => {
            let (kh, kw, lanes) = taps.dim();
            let mut kernels = Array4::zeros((*filters, 1, kh, kw));
            for ky in 0..kh {
                for kx in 0..kw {
                    let digits: Vec<i64> = (0..lanes).map(|l| taps[[ky, kx, l]]).collect();
                    let ct = Ciphertext {
                        digits,
                        key: em.key_id,
                        params: em.he,
                        scale: Vec::new(),
                        noise_bound: em.he.fresh_noise_bound(),
                    };
                    let values = ivhe::decrypt(&ct, sk)?;
                    for f in 0..*filters {
                        kernels[[f, 0, ky, kx]] = values[f];
                    }
                }
            }
            ScaledLayer::Conv2d { kernels, bias: bias.clone(), padding: *padding }
        }
    };
    let mut layers = em.prefix.clone();
    layers.push(recovered);
    layers.extend(em.suffix.iter().cloned());
    Ok(ScaledModel {
        input_shape: em.input_shape,
        weight_scale: em.weight_scale,
        input_scale: em.input_scale,
        layers,
        output_scale: em.output_scale.clone(),
        sigmoid: em.sigmoid.clone(),
        post_softmax: em.post_softmax,
    })
}

/// Output of a cipherspace forward pass: score lanes, the lane features that
/// feed the output layer (what verifiers train on), and noise bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CipherForward {
    pub lane1: Array1<i64>,
    pub lane2: Array1<i64>,
    /// Concatenated lane values entering the final dense layer.
    pub feature_lanes: Vec<i64>,
    pub output_scale: Vec<i64>,
    /// Analytic worst-case randomization magnitude at the scores (lane units).
    pub noise_bound: i64,
    /// True when the analytic bound stayed under w/2 throughout.
    pub budget_ok: bool,
}

impl CipherForward {
    pub fn total_scale(&self) -> f64 {
        self.output_scale.iter().map(|&f| f as f64).product()
    }
}

struct NoiseTracker {
    bound: i64,
    w: i64,
    strict: bool,
    ok: bool,
}

impl NoiseTracker {
    fn new(w: i64, strict: bool) -> Self {
        NoiseTracker { bound: 0, w, strict, ok: true }
    }

    fn set(&mut self, bound: i64) -> Result<()> {
        self.bound = bound;
        if 2 * bound >= self.w {
            self.ok = false;
            if self.strict {
                return Err(CiphernetError::Budget { bound, limit: self.w / 2 });
            }
        }
        Ok(())
    }

    fn scale_by(&mut self, factor: i64) -> Result<()> {
        let next = (self.bound as i128) * (factor as i128);
        self.set(i64::try_from(next).unwrap_or(i64::MAX))
    }

    fn reset_after_requantization(&mut self) {
        // a clean re-quantization absorbs in-budget noise; a busted budget
        // stays busted
        if self.ok {
            self.bound = 0;
        }
    }
}

enum LaneValue {
    Vector { a: Array1<i64>, b: Array1<i64> },
    Image { a: Array3<i64>, b: Array3<i64> },
}

fn lane_map(v: LaneValue, f: impl Fn(i64) -> i64) -> LaneValue {
    match v {
        LaneValue::Vector { a, b } => LaneValue::Vector { a: a.mapv(&f), b: b.mapv(&f) },
        LaneValue::Image { a, b } => LaneValue::Image { a: a.mapv(&f), b: b.mapv(&f) },
    }
}

fn abs_window_max(input: &Array3<i64>, kh: usize, kw: usize, padding: Padding) -> Result<i64> {
    let abs = input.mapv(i64::abs);
    let (in_c, _, _) = input.dim();
    let ones = Array4::ones((1, in_c, kh, kw));
    let sums = int_conv2d(&ones, &Array1::zeros(1), 0, padding, &abs)?;
    Ok(sums.iter().copied().max().unwrap_or(0))
}

/// Run the encrypted model on a real-valued input. `strict_noise` makes an
/// analytic budget overrun a hard error; otherwise the overrun is recorded in
/// the result and execution continues.
pub fn forward_cipher(em: &EncryptedModel, input: &Value, strict_noise: bool) -> Result<CipherForward> {
    if input.shape() != em.input_shape {
        return Err(CiphernetError::Shape("input shape".into()));
    }
    let w = em.he.w;
    let mut noise = NoiseTracker::new(w, strict_noise);

    // plaintext prefix
    let mut plain = IntValue::from_real(input, em.input_scale);
    for layer in &em.prefix {
        plain = apply_plain_layer(em, layer, plain)?;
    }

    // encrypted layer: plaintext-weighted homomorphic sums, lane-parallel
    let mut lanes = match (&em.first, &plain) {
        (EncryptedFirstLayer::Dense { lane1, lane2, bias }, IntValue::Vector(v)) => {
            let base: i64 = v.iter().map(|x| x.unsigned_abs() as i64).sum();
            noise.set(saturating_mul(base, em.he.fresh_noise_bound()))?;
            LaneValue::Vector {
                a: int_dense(lane1, bias, w, v)?,
                b: int_dense(lane2, &Array1::zeros(bias.len()), 0, v)?,
            }
        }
        (EncryptedFirstLayer::Conv { lane1, lane2, bias, padding }, IntValue::Image(m)) => {
            let (_, _, kh, kw) = lane1.dim();
            let base = abs_window_max(m, kh, kw, *padding)?;
            noise.set(saturating_mul(base, em.he.fresh_noise_bound()))?;
            LaneValue::Image {
                a: int_conv2d(lane1, bias, w, *padding, m)?,
                b: int_conv2d(lane2, &Array1::zeros(bias.len()), 0, *padding, m)?,
            }
        }
        (EncryptedFirstLayer::ConvVector { taps, bias, padding, filters }, IntValue::Image(m)) => {
            let (kh, kw, n_lanes) = taps.dim();
            let base = abs_window_max(m, kh, kw, *padding)?;
            noise.set(saturating_mul(base, em.he.fresh_noise_bound()))?;
            // build (r+1)-channel kernels: channel k's kernel is lane k of every tap
            let mut expanded = Array4::zeros((n_lanes, 1, kh, kw));
            for ky in 0..kh {
                for kx in 0..kw {
                    for lane in 0..n_lanes {
                        expanded[[lane, 0, ky, kx]] = taps[[ky, kx, lane]];
                    }
                }
            }
            let mut full_bias = Array1::zeros(n_lanes);
            for f in 0..*filters {
                full_bias[f] = bias[f];
            }
            let img = int_conv2d(&expanded, &full_bias, w, *padding, m)?;
            split_mp_channels(img)
        }
        _ => return Err(CiphernetError::Shape("encrypted layer input".into())),
    };

    // plaintext suffix, lane-parallel
    let last_dense = em
        .suffix
        .iter()
        .rposition(|l| matches!(l, ScaledLayer::Dense { .. }));
    let mut feature_lanes: Option<Vec<i64>> = None;
    let mp = em.strategy == Strategy::MatrixPair;
    for (i, layer) in em.suffix.iter().enumerate() {
        if Some(i) == last_dense {
            feature_lanes = Some(snapshot_lanes(&lanes));
        }
        lanes = apply_lane_layer(em, layer, lanes, &mut noise, mp)?;
    }
    let feature_lanes = feature_lanes.unwrap_or_else(|| snapshot_lanes(&lanes));
    let (lane1, lane2) = match lanes {
        LaneValue::Vector { a, b } => (a, b),
        LaneValue::Image { .. } => {
            return Err(CiphernetError::Shape("cipher output is not a vector".into()))
        }
    };
    Ok(CipherForward {
        lane1,
        lane2,
        feature_lanes,
        output_scale: em.output_scale.clone(),
        noise_bound: noise.bound,
        budget_ok: noise.ok,
    })
}

fn saturating_mul(a: i64, b: i64) -> i64 {
    (a as i128).checked_mul(b as i128).map_or(i64::MAX, |v| i64::try_from(v).unwrap_or(i64::MAX))
}

/// Matrix-pair images carry the randomizer as a trailing channel; split it so
/// lane arithmetic can treat it as the second lane.
fn split_mp_channels(img: Array3<i64>) -> LaneValue {
    let (c, h, w) = img.dim();
    let mut a = Array3::zeros((c - 1, h, w));
    let mut b = Array3::zeros((1, h, w));
    for ch in 0..c - 1 {
        for y in 0..h {
            for x in 0..w {
                a[[ch, y, x]] = img[[ch, y, x]];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            b[[0, y, x]] = img[[c - 1, y, x]];
        }
    }
    LaneValue::Image { a, b }
}

fn snapshot_lanes(lanes: &LaneValue) -> Vec<i64> {
    match lanes {
        LaneValue::Vector { a, b } => a.iter().chain(b.iter()).copied().collect(),
        LaneValue::Image { a, b } => a.iter().chain(b.iter()).copied().collect(),
    }
}

fn apply_plain_layer(em: &EncryptedModel, layer: &ScaledLayer, value: IntValue) -> Result<IntValue> {
    Ok(match (layer, value) {
        (ScaledLayer::Dense { weights, bias }, IntValue::Vector(v)) => {
            IntValue::Vector(int_dense(weights, bias, 1, &v)?)
        }
        (ScaledLayer::Conv2d { kernels, bias, padding }, IntValue::Image(m)) => {
            IntValue::Image(int_conv2d(kernels, bias, 1, *padding, &m)?)
        }
        (ScaledLayer::SumPool { size, .. }, IntValue::Image(m)) => {
            IntValue::Image(int_sum_pool(*size, &m)?)
        }
        (ScaledLayer::Activation { kind, in_scale, out_scale }, v) => {
            let f = |x: i64| match kind {
                Activation::Relu => x.max(0),
                Activation::Sigmoid => int_sigmoid(x, &em.sigmoid, *in_scale, *out_scale, 1),
            };
            match v {
                IntValue::Vector(v) => IntValue::Vector(v.mapv(f)),
                IntValue::Image(m) => IntValue::Image(m.mapv(f)),
            }
        }
        (ScaledLayer::Flatten, v) => IntValue::Vector(v.flatten()),
        _ => return Err(CiphernetError::Shape("plaintext prefix layer".into())),
    })
}

fn apply_lane_layer(
    em: &EncryptedModel,
    layer: &ScaledLayer,
    lanes: LaneValue,
    noise: &mut NoiseTracker,
    matrix_pair: bool,
) -> Result<LaneValue> {
    let w = em.he.w;
    Ok(match (layer, lanes) {
        (ScaledLayer::Dense { weights, bias }, LaneValue::Vector { a, b }) => {
            let factor = (0..weights.nrows())
                .map(|o| weights.row(o).iter().map(|v| v.unsigned_abs() as i64).sum::<i64>())
                .max()
                .unwrap_or(0);
            noise.scale_by(factor)?;
            let out_a = int_dense(weights, bias, w, &a)?;
            let out_b = if matrix_pair {
                // the carry lane has its own length; propagate its total
                let total: i64 = b.iter().sum();
                Array1::from_elem(weights.nrows(), total)
            } else {
                int_dense(weights, &Array1::zeros(bias.len()), 0, &b)?
            };
            LaneValue::Vector { a: out_a, b: out_b }
        }
        (ScaledLayer::Conv2d { kernels, bias, padding }, LaneValue::Image { a, b }) => {
            let (out_c, _, kh, kw) = kernels.dim();
            let factor = (0..out_c)
                .map(|o| {
                    kernels
                        .index_axis(ndarray::Axis(0), o)
                        .iter()
                        .map(|v| v.unsigned_abs() as i64)
                        .sum::<i64>()
                })
                .max()
                .unwrap_or(0);
            noise.scale_by(factor)?;
            if matrix_pair {
                // expand with a zero-weight extra channel, convolve the carry
                // channel with a ones kernel so the pair stays composable
                let (_, in_c_k, _, _) = kernels.dim();
                let joined = join_mp_channels(&a, &b);
                let (c_in, _, _) = joined.dim();
                if c_in != in_c_k + 1 {
                    return Err(CiphernetError::Shape(format!(
                        "matrix-pair conv expects {} channels, got {c_in}",
                        in_c_k + 1
                    )));
                }
                let mut expanded = Array4::zeros((out_c + 1, c_in, kh, kw));
                for o in 0..out_c {
                    for i in 0..in_c_k {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                expanded[[o, i, ky, kx]] = kernels[[o, i, ky, kx]];
                            }
                        }
                    }
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        expanded[[out_c, c_in - 1, ky, kx]] = 1;
                    }
                }
                let mut full_bias = Array1::zeros(out_c + 1);
                for o in 0..out_c {
                    full_bias[o] = bias[o];
                }
                split_mp_channels(int_conv2d(&expanded, &full_bias, w, *padding, &joined)?)
            } else {
                LaneValue::Image {
                    a: int_conv2d(kernels, bias, w, *padding, &a)?,
                    b: int_conv2d(kernels, &Array1::zeros(bias.len()), 0, *padding, &b)?,
                }
            }
        }
        (ScaledLayer::SumPool { size, .. }, LaneValue::Image { a, b }) => {
            noise.scale_by((size * size) as i64)?;
            LaneValue::Image { a: int_sum_pool(*size, &a)?, b: int_sum_pool(*size, &b)? }
        }
        (ScaledLayer::Activation { kind, in_scale, out_scale }, lanes) => match kind {
            Activation::Relu => {
                if !em.he.non_negative {
                    return Err(CiphernetError::Mode(
                        "cipherspace ReLU needs non-negative keys".into(),
                    ));
                }
                // zero a lane element exactly when it is negative
                lane_map(lanes, |x| x.max(0))
            }
            Activation::Sigmoid => {
                let approx = em.sigmoid.clone();
                let (is, os) = (*in_scale, *out_scale);
                let out = lane_map(lanes, move |x| int_sigmoid(x, &approx, is, os, w));
                noise.reset_after_requantization();
                out
            }
        },
        (ScaledLayer::Flatten, LaneValue::Image { a, b }) => LaneValue::Vector {
            a: Array1::from_iter(a.iter().copied()),
            b: Array1::from_iter(b.iter().copied()),
        },
        (ScaledLayer::Flatten, v @ LaneValue::Vector { .. }) => v,
        _ => return Err(CiphernetError::Shape("lane layer".into())),
    })
}

fn join_mp_channels(a: &Array3<i64>, b: &Array3<i64>) -> Array3<i64> {
    let (ca, h, w) = a.dim();
    let mut out = Array3::zeros((ca + 1, h, w));
    for ch in 0..ca {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = a[[ch, y, x]];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            out[[ca, y, x]] = b[[0, y, x]];
        }
    }
    out
}

/// Recombine score lanes into raw integers: `round((lane1 + T·lane2) / w)`
/// for scalar keys; matrix-pair scores read lane 1 (exact for zero secrets).
pub fn decrypt_scores_int(cf: &CipherForward, sk: &SecretKey, strategy: Strategy) -> Result<Array1<i64>> {
    let w = sk.params().w;
    match strategy {
        Strategy::ElementWise => {
            let t = sk
                .secret_column()
                .first()
                .copied()
                .ok_or_else(|| CiphernetError::Mode("identity key cannot decrypt lanes".into()))?;
            let mut out = Array1::zeros(cf.lane1.len());
            for i in 0..cf.lane1.len() {
                let acc = (cf.lane1[i] as i128) + (t as i128) * (cf.lane2[i] as i128);
                let v = i64::try_from(acc).map_err(|_| CiphernetError::Overflow("lane recombination"))?;
                out[i] = crate::ivhe::round_half_away(v, w);
            }
            Ok(out)
        }
        Strategy::MatrixPair => Ok(cf.lane1.mapv(|v| crate::ivhe::round_half_away(v, w))),
    }
}

/// Real-valued scores: recombine, divide by w and the propagated scale, and
/// apply softmax when the model declares it.
pub fn decrypt_scores(
    cf: &CipherForward,
    sk: &SecretKey,
    strategy: Strategy,
    post_softmax: bool,
) -> Result<Array1<f64>> {
    let scale = cf.total_scale();
    if scale == 0.0 {
        return Err(CiphernetError::Param("zero output scale".into()));
    }
    let ints = decrypt_scores_int(cf, sk, strategy)?;
    let raw = ints.mapv(|v| v as f64 / scale);
    Ok(if post_softmax { crate::nn::softmax(&raw) } else { raw })
}

/// Initiator-side accuracy of the cipherspace-executed model.
pub fn evaluate_cipher(
    em: &EncryptedModel,
    sk: &SecretKey,
    examples: &[crate::nn::Example],
    strict_noise: bool,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    use rayon::prelude::*;
    let correct: Vec<bool> = examples
        .par_iter()
        .map(|ex| -> Result<bool> {
            let cf = forward_cipher(em, &ex.input, strict_noise)?;
            let ints = decrypt_scores_int(&cf, sk, em.strategy)?;
            Ok(int_argmax(&ints) == ex.label)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / examples.len() as f64)
}

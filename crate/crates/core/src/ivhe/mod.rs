//! Integer-vector homomorphic encryption with bit-decomposition key switching.
//!
//! The scheme works over plain `i64` vectors. A secret key `S' = [I | T]`
//! decrypts a length `n+1` ciphertext `c` as `x = round(S'c / w)`. Fresh
//! ciphertexts are produced by switching the trivial identity-key ciphertext
//! `w·x` to `S'` through the public matrix `M = [S* - T·A + E; A]`, where
//! `S*` is the powers-of-two expansion of the identity key and `A`, `E` are
//! bounded random matrices. Supported homomorphic operations: addition and
//! integer-weighted sums. All arithmetic is checked 64-bit.

mod serial;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IvheError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("digit {value} at index {index} does not fit in {bits} bits")]
    DigitOverflow { index: usize, value: i64, bits: u32 },
    #[error("integer overflow during {0}")]
    Overflow(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("ciphertexts are incompatible: {0}")]
    Incompatible(&'static str),
    #[error("noise budget exceeded: worst-case bound {bound} >= w/2 = {limit}")]
    NoiseBudget { bound: i64, limit: i64 },
    #[error("serialization: {0}")]
    Serial(String),
}

pub type Result<T> = std::result::Result<T, IvheError>;

/// Scheme parameters. `w` separates plaintext from randomization, `l` is the
/// bit length of one ciphertext digit, and the bounds cap the magnitudes of
/// the random matrices `A`, `E` and the secret vector `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeParams {
    /// Plaintext vector length.
    pub n: usize,
    /// Plaintext-to-randomization ratio; decryption divides by this.
    pub w: i64,
    /// Bit length of each ciphertext digit; every |c_i| must stay below 2^l.
    pub l: u32,
    pub a_bound: i64,
    pub e_bound: i64,
    pub t_bound: i64,
    /// Restrict keys so that no ciphertext digit changes sign relative to its
    /// plaintext (required by cipherspace ReLU). Forces `T`, `A`, `M` entries
    /// to be non-negative and `E` entries to lie in `[0, e_bound]`.
    pub non_negative: bool,
}

impl HeParams {
    pub fn new(n: usize, w: i64, l: u32) -> Self {
        HeParams { n, w, l, a_bound: 16, e_bound: 1, t_bound: 16, non_negative: false }
    }

    /// Defaults used by the scenario configs: w = 2^10, l = 32, unit noise.
    pub fn default_signed(n: usize) -> Self {
        HeParams { n, w: 1 << 10, l: 32, a_bound: 16, e_bound: 1, t_bound: 16, non_negative: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(IvheError::InvalidParams("n must be >= 1".into()));
        }
        if self.w < 2 {
            return Err(IvheError::InvalidParams(format!("w must be >= 2, got {}", self.w)));
        }
        if self.l < 1 || self.l > 62 {
            return Err(IvheError::InvalidParams(format!("l must be in 1..=62, got {}", self.l)));
        }
        if self.a_bound < 0 || self.e_bound < 0 || self.t_bound < 0 {
            return Err(IvheError::InvalidParams("bounds must be non-negative".into()));
        }
        if self.non_negative && self.t_bound > 0 {
            // Sign preservation needs every reachable bit position of w·x to
            // carry a strictly positive public-key column; that holds when the
            // lowest set bit of w dominates 2·t_bound.
            let low_bit = 1i64 << self.w.trailing_zeros().min(62);
            if low_bit < 2 * self.t_bound {
                return Err(IvheError::InvalidParams(format!(
                    "non-negative mode needs the lowest set bit of w ({low_bit}) >= 2*t_bound ({})",
                    2 * self.t_bound
                )));
            }
        }
        Ok(())
    }

    /// Worst-case randomization introduced by one encryption: |E·c*| <= e_bound·n·l.
    pub fn fresh_noise_bound(&self) -> i64 {
        self.e_bound.saturating_mul(self.n as i64).saturating_mul(self.l as i64)
    }

    /// True when a fresh ciphertext is guaranteed to decrypt exactly.
    pub fn noise_budget_ok(&self) -> bool {
        2 * self.fresh_noise_bound() < self.w
    }
}

/// Identifier tying ciphertexts to the key pair that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyId(pub u64);

impl KeyId {
    /// The trivial identity key `S = I` (ciphertext is the w-scaled plaintext).
    pub const IDENTITY: KeyId = KeyId(0);
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h.max(1) // 0 is reserved for the identity key
}

/// Dense row-major integer matrix with checked arithmetic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        IntMat { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<i64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(rows.iter().all(|x| x.len() == c), "ragged rows");
        IntMat { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = IntMat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: i64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[i64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · v` with i128 accumulation and a final fits-in-i64 check.
    pub fn matvec(&self, v: &[i64]) -> Result<Vec<i64>> {
        if v.len() != self.cols {
            return Err(IvheError::Shape(format!(
                "matvec: matrix is {}x{}, vector has length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let mut acc: i128 = 0;
            for (m, x) in self.row(r).iter().zip(v) {
                acc += (*m as i128) * (*x as i128);
            }
            out.push(i64::try_from(acc).map_err(|_| IvheError::Overflow("matrix-vector product"))?);
        }
        Ok(out)
    }
}

/// Secret key `S' = [I | T]`. The identity key (empty `T`) decrypts length-n
/// ciphertexts; a switched key decrypts length n+1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecretKey {
    params: HeParams,
    t: Vec<i64>,
    id: KeyId,
}

impl SecretKey {
    pub fn identity(params: HeParams) -> Self {
        SecretKey { params, t: Vec::new(), id: KeyId::IDENTITY }
    }

    pub fn params(&self) -> &HeParams {
        &self.params
    }

    pub fn id(&self) -> KeyId {
        self.id
    }

    pub fn is_identity(&self) -> bool {
        self.t.is_empty()
    }

    /// The secret column `T`. Callers are responsible for confining this to
    /// the key holder; the protocol layer wraps it in a vault.
    pub fn secret_column(&self) -> &[i64] {
        &self.t
    }

    /// Expected ciphertext length under this key.
    pub fn cipher_len(&self) -> usize {
        if self.is_identity() {
            self.params.n
        } else {
            self.params.n + 1
        }
    }
}

/// Public key-switch matrix `M = [S* - T·A + E; A]` taking identity-key
/// ciphertexts of length n to ciphertexts of length n+1 under `S' = [I | T]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwitchKey {
    params: HeParams,
    m: IntMat,
    a: IntMat,
    e: IntMat,
    id: KeyId,
}

impl SwitchKey {
    pub fn params(&self) -> &HeParams {
        &self.params
    }

    pub fn matrix(&self) -> &IntMat {
        &self.m
    }

    /// Target key id: ciphertexts produced through this key carry it.
    pub fn id(&self) -> KeyId {
        self.id
    }

    /// Self-consistency: rebuild `[S* - T·A + E; A]` from the stored `A`, `E`
    /// and the secret `T` and compare with the stored matrix.
    pub fn is_consistent_with(&self, sk: &SecretKey) -> bool {
        match build_switch_matrix(&self.params, sk.secret_column(), &self.a, &self.e) {
            Ok(m) => m == self.m,
            Err(_) => false,
        }
    }
}

fn build_switch_matrix(params: &HeParams, t: &[i64], a: &IntMat, e: &IntMat) -> Result<IntMat> {
    let n = params.n;
    let cols = n * params.l as usize;
    if t.len() != n || a.rows != 1 || a.cols != cols || e.rows != n || e.cols != cols {
        return Err(IvheError::Shape("switch key component dimensions".into()));
    }
    let star = star_expand(&IntMat::identity(n), params.l);
    let mut m = IntMat::zeros(n + 1, cols);
    for r in 0..n {
        for c in 0..cols {
            let v = star
                .get(r, c)
                .checked_sub(
                    t[r].checked_mul(a.get(0, c)).ok_or(IvheError::Overflow("T·A"))?,
                )
                .and_then(|x| x.checked_add(e.get(r, c)))
                .ok_or(IvheError::Overflow("S* - T·A + E"))?;
            m.set(r, c, v);
        }
    }
    for c in 0..cols {
        m.set(n, c, a.get(0, c));
    }
    Ok(m)
}

/// Build the key pair from explicit components (used by tests and by key
/// generation). `T` has length n, `A` is 1 x n·l, `E` is n x n·l.
pub fn keys_from_parts(params: HeParams, t: Vec<i64>, a: IntMat, e: IntMat) -> Result<(SecretKey, SwitchKey)> {
    params.validate()?;
    let m = build_switch_matrix(&params, &t, &a, &e)?;
    let id = KeyId(fnv1a(&serial::matrix_bytes(&m)));
    Ok((
        SecretKey { params, t, id },
        SwitchKey { params, m, a, e, id },
    ))
}

/// Generate a key pair. Deterministic for a fixed seed.
///
/// Signed mode draws `T`, `A`, `E` uniformly inside their bounds. Non-negative
/// mode draws `T` in `[0, t_bound]`, `E` in `[0, e_bound]`, and caps each
/// column of `A` so that every entry of `M` stays non-negative (column d of
/// the identity's expansion carries the power 2^(l-1-j); the cap keeps
/// `t·a_d` at or below half of it, bumping `a_d` to at least 1 wherever the
/// cap allows so that both output digits move strictly with the plaintext).
pub fn gen_keys(params: HeParams, rng_seed: u64) -> Result<(SecretKey, SwitchKey)> {
    params.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let n = params.n;
    let l = params.l as usize;
    let cols = n * l;

    let t: Vec<i64> = if params.non_negative {
        (0..n).map(|_| rng.random_range(0..=params.t_bound)).collect()
    } else {
        (0..n).map(|_| rng.random_range(-params.t_bound..=params.t_bound)).collect()
    };

    let mut a = IntMat::zeros(1, cols);
    if params.non_negative {
        for d in 0..cols {
            let block = d / l;
            let bit = d % l;
            let power = 1i64 << (params.l - 1 - bit as u32);
            // Cap from every row with a live secret entry: in-block rows allow
            // up to half the power, off-block rows (S* entry 0) allow nothing.
            let mut cap = params.a_bound;
            for (row, &trow) in t.iter().enumerate() {
                if trow == 0 {
                    continue;
                }
                let row_cap = if row == block { (power / 2) / trow } else { 0 };
                cap = cap.min(row_cap);
            }
            a.set(0, d, if cap >= 1 { rng.random_range(1..=cap) } else { 0 });
        }
    } else {
        for d in 0..cols {
            a.set(0, d, rng.random_range(-params.a_bound..=params.a_bound));
        }
    }

    let mut e = IntMat::zeros(n, cols);
    for r in 0..n {
        for c in 0..cols {
            let v = if params.non_negative {
                rng.random_range(0..=params.e_bound)
            } else {
                rng.random_range(-params.e_bound..=params.e_bound)
            };
            e.set(r, c, v);
        }
    }

    keys_from_parts(params, t, a, e)
}

/// Signed-digit binary expansion: each value becomes the l-digit MSB-first
/// expansion of its magnitude with every digit carrying the value's sign.
pub fn bit_decompose(values: &[i64], l: u32) -> Result<Vec<i64>> {
    let limit = 1i64 << l;
    let mut out = Vec::with_capacity(values.len() * l as usize);
    for (index, &v) in values.iter().enumerate() {
        let mag = v.unsigned_abs();
        if mag >= limit as u64 {
            return Err(IvheError::DigitOverflow { index, value: v, bits: l });
        }
        let sign = if v < 0 { -1 } else { 1 };
        for bit in (0..l).rev() {
            out.push(((mag >> bit) & 1) as i64 * sign);
        }
    }
    Ok(out)
}

/// Powers-of-two expansion: each element S_ij becomes the row sub-vector
/// `[2^(l-1)·S_ij, ..., 2·S_ij, S_ij]`, so that `S*·c* = S·c`.
pub fn star_expand(s: &IntMat, l: u32) -> IntMat {
    let mut out = IntMat::zeros(s.rows, s.cols * l as usize);
    for r in 0..s.rows {
        for c in 0..s.cols {
            let v = s.get(r, c);
            for bit in 0..l {
                out.set(r, c * l as usize + bit as usize, v << (l - 1 - bit));
            }
        }
    }
    out
}

/// A ciphertext: integer digits plus the bookkeeping needed to operate on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ciphertext {
    pub digits: Vec<i64>,
    pub key: KeyId,
    pub params: HeParams,
    /// Ordered integer scaling factors applied so far; their product divides
    /// decrypted values on the caller's side.
    pub scale: Vec<i64>,
    /// Analytic worst-case randomization magnitude accumulated so far.
    pub noise_bound: i64,
}

impl Ciphertext {
    /// The trivial ciphertext of `x` under the identity key: digits are `w·x`.
    pub fn identity_of(x: &[i64], params: HeParams) -> Result<Self> {
        params.validate()?;
        if x.len() != params.n {
            return Err(IvheError::Shape(format!(
                "plaintext length {} != n = {}",
                x.len(),
                params.n
            )));
        }
        let digits = x
            .iter()
            .map(|&v| v.checked_mul(params.w).ok_or(IvheError::Overflow("w·x")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Ciphertext { digits, key: KeyId::IDENTITY, params, scale: Vec::new(), noise_bound: 0 })
    }
}

/// Switch an identity-key ciphertext to the target key: `c' = M·c*`.
/// The result has length n+1.
pub fn key_switch(ct: &Ciphertext, swk: &SwitchKey) -> Result<Ciphertext> {
    if ct.key != KeyId::IDENTITY {
        return Err(IvheError::Incompatible("key switch expects an identity-key ciphertext"));
    }
    if ct.params != swk.params {
        return Err(IvheError::Incompatible("parameter mismatch"));
    }
    let star_digits = bit_decompose(&ct.digits, ct.params.l)?;
    let digits = swk.m.matvec(&star_digits)?;
    Ok(Ciphertext {
        digits,
        key: swk.id,
        params: ct.params,
        scale: ct.scale.clone(),
        noise_bound: ct
            .noise_bound
            .checked_add(swk.params.fresh_noise_bound())
            .ok_or(IvheError::Overflow("noise bound"))?,
    })
}

/// Encrypt: scale by `w`, bit-decompose, multiply by the public matrix.
pub fn encrypt(x: &[i64], swk: &SwitchKey, params: &HeParams) -> Result<Ciphertext> {
    if *params != swk.params {
        return Err(IvheError::Incompatible("parameter mismatch"));
    }
    key_switch(&Ciphertext::identity_of(x, *params)?, swk)
}

pub(crate) fn round_half_away(num: i64, den: i64) -> i64 {
    // den > 0; round half away from zero.
    if num >= 0 {
        (num + den / 2) / den
    } else {
        -((-num + den / 2) / den)
    }
}

/// Decrypt `x = round(S'·c / w)`. Scale-ledger division is left to callers.
pub fn decrypt(ct: &Ciphertext, sk: &SecretKey) -> Result<Vec<i64>> {
    if ct.key != sk.id {
        return Err(IvheError::Incompatible("ciphertext was produced under a different key"));
    }
    if ct.digits.len() != sk.cipher_len() {
        return Err(IvheError::Shape(format!(
            "ciphertext length {} != expected {}",
            ct.digits.len(),
            sk.cipher_len()
        )));
    }
    let n = sk.params.n;
    let w = sk.params.w;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = ct.digits[i] as i128;
        if !sk.is_identity() {
            acc += (sk.t[i] as i128) * (ct.digits[n] as i128);
        }
        let y = i64::try_from(acc).map_err(|_| IvheError::Overflow("S'·c"))?;
        out.push(round_half_away(y, w));
    }
    Ok(out)
}

fn check_compatible(a: &Ciphertext, b: &Ciphertext) -> Result<()> {
    if a.key != b.key {
        return Err(IvheError::Incompatible("different keys"));
    }
    if a.params != b.params {
        return Err(IvheError::Incompatible("different parameters"));
    }
    if a.scale != b.scale {
        return Err(IvheError::Incompatible("different scale ledgers"));
    }
    if a.digits.len() != b.digits.len() {
        return Err(IvheError::Incompatible("different lengths"));
    }
    Ok(())
}

/// Digit-wise sum; decrypts to the sum of the plaintexts.
pub fn he_add(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    check_compatible(a, b)?;
    let digits = a
        .digits
        .iter()
        .zip(&b.digits)
        .map(|(&x, &y)| x.checked_add(y).ok_or(IvheError::Overflow("he_add")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ciphertext {
        digits,
        key: a.key,
        params: a.params,
        scale: a.scale.clone(),
        noise_bound: a
            .noise_bound
            .checked_add(b.noise_bound)
            .ok_or(IvheError::Overflow("noise bound"))?,
    })
}

/// Integer-weighted sum of ciphertexts. Errors when the analytic worst-case
/// randomization `Σ|w_i|·noise_i` would reach `w/2` (parameter
/// misconfiguration, not data corruption). An optional common scale factor is
/// appended to the result's scale ledger.
pub fn he_weighted_sum(
    weights: &[i64],
    cts: &[&Ciphertext],
    declared_scale: Option<i64>,
) -> Result<Ciphertext> {
    if weights.len() != cts.len() || cts.is_empty() {
        return Err(IvheError::Shape(format!(
            "{} weights against {} ciphertexts",
            weights.len(),
            cts.len()
        )));
    }
    let first = cts[0];
    for ct in &cts[1..] {
        check_compatible(first, ct)?;
    }
    let mut noise: i64 = 0;
    for (&wgt, ct) in weights.iter().zip(cts) {
        noise = wgt
            .unsigned_abs()
            .try_into()
            .ok()
            .and_then(|m: i64| m.checked_mul(ct.noise_bound))
            .and_then(|x| noise.checked_add(x))
            .ok_or(IvheError::Overflow("noise bound"))?;
    }
    let w = first.params.w;
    if 2 * noise >= w {
        return Err(IvheError::NoiseBudget { bound: noise, limit: w / 2 });
    }
    let len = first.digits.len();
    let mut digits = vec![0i128; len];
    for (&wgt, ct) in weights.iter().zip(cts) {
        for (acc, &d) in digits.iter_mut().zip(&ct.digits) {
            *acc += (wgt as i128) * (d as i128);
        }
    }
    let digits = digits
        .into_iter()
        .map(|v| i64::try_from(v).map_err(|_| IvheError::Overflow("he_weighted_sum")))
        .collect::<Result<Vec<_>>>()?;
    let mut scale = first.scale.clone();
    if let Some(s) = declared_scale {
        scale.push(s);
    }
    Ok(Ciphertext { digits, key: first.key, params: first.params, scale, noise_bound: noise })
}

#[cfg(test)]
mod tests;

//! Cipherspace execution of trained models: integer quantization with
//! propagated scaling factors, encryption of the first weight tensor
//! (element-wise or matrix-pair-wise), a lane-parallel integer forward pass,
//! and score decryption with final scale-down.

mod encrypted;
mod scaled;

pub use encrypted::{
    decrypt_model, decrypt_scores, decrypt_scores_int, encrypt_elementwise, encrypt_elementwise_at,
    encrypt_matrixpair, evaluate_cipher, forward_cipher, CipherForward, EncryptedFirstLayer,
    EncryptedModel, Strategy,
};
pub use scaled::{dequantize, quantize, IntValue, ScaledLayer, ScaledModel};

use crate::ivhe::IvheError;
use crate::nn::NnError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CiphernetError {
    #[error("max pooling is not executable in cipherspace")]
    MaxPoolUnsupported,
    #[error("encryption strategy not applicable: {0}")]
    Strategy(String),
    #[error("key mode error: {0}")]
    Mode(String),
    #[error("noise budget exceeded in cipherspace forward: bound {bound} >= w/2 = {limit}")]
    Budget { bound: i64, limit: i64 },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("integer overflow during {0}")]
    Overflow(&'static str),
    #[error("serialization: {0}")]
    Serial(String),
    #[error(transparent)]
    Ivhe(#[from] IvheError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, CiphernetError>;

/// Polynomial sigmoid substitute `1/2 + x/4 - x^3/divisor`, evaluated where
/// real sigmoids cannot run on integers. Divisor 48 is the Taylor value;
/// 348 is selectable for strict reproduction of the printed variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidApprox {
    pub order: u32,
    /// Coefficients of 1, x, x^2, x^3.
    pub coefficients: Vec<f64>,
    pub cubic_divisor: f64,
}

impl SigmoidApprox {
    pub fn new(cubic_divisor: f64) -> Self {
        SigmoidApprox {
            order: 3,
            coefficients: vec![0.5, 0.25, 0.0, -1.0 / cubic_divisor],
            cubic_divisor,
        }
    }

    pub fn taylor() -> Self {
        SigmoidApprox::new(48.0)
    }

    pub fn printed() -> Self {
        SigmoidApprox::new(348.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        // Horner over the stored coefficient list
        self.coefficients.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    /// sup over |x| <= 1 of |approx - sigmoid| on a dense grid.
    pub fn max_error_unit_interval(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let steps = 20_000;
        for i in 0..=steps {
            let x = -1.0 + 2.0 * i as f64 / steps as f64;
            let sigma = 1.0 / (1.0 + (-x).exp());
            worst = worst.max((self.eval(x) - sigma).abs());
        }
        worst
    }
}

impl Default for SigmoidApprox {
    fn default() -> Self {
        SigmoidApprox::taylor()
    }
}

#[cfg(test)]
mod tests;

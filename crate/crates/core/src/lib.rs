//! Core numerics for the decentralized learning sandbox: integer-vector
//! homomorphic encryption with key switching, a small feedforward/conv
//! network engine, cipherspace execution of quantized models, and the
//! fusion strategies that build a MetaModel out of verified private models.

pub mod ciphernet;
pub mod fusion;
pub mod ivhe;
pub mod nn;

//! Actor-level simulation of the decentralized learning protocol: an
//! application initiator, computing contributors, and verification
//! contributors exchange messages over a deterministic simulated network,
//! drive the proof-of-authority ledger and the content store, and fuse
//! verified private models into a MetaModel.

pub mod config;
pub mod data;
pub mod network;
pub mod report;
pub mod runner;
pub mod vault;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error(transparent)]
    Nn(#[from] chainfuse_core::nn::NnError),
    #[error(transparent)]
    Ivhe(#[from] chainfuse_core::ivhe::IvheError),
    #[error(transparent)]
    Cipher(#[from] chainfuse_core::ciphernet::CiphernetError),
    #[error(transparent)]
    Fusion(#[from] chainfuse_core::fusion::FusionError),
    #[error(transparent)]
    Store(#[from] chainfuse_chain::castore::StoreError),
    #[error(transparent)]
    Ledger(#[from] chainfuse_chain::ledger::LedgerError),
    #[error("serialization: {0}")]
    Serial(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

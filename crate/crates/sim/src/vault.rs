//! The initiator's key vault: the only place a secret key lives during a
//! scenario. Every access is logged with the accessor's identity and refused
//! for anyone but the owner, making the privacy boundary checkable.

use crate::{Result, SimError};
use chainfuse_core::ciphernet::{self, EncryptedModel, ScaledModel};
use chainfuse_core::ivhe::SecretKey;
use chainfuse_core::nn::Example;
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRecord {
    pub accessor: String,
    pub operation: String,
    pub granted: bool,
}

pub struct KeyVault {
    owner: String,
    secret: SecretKey,
    log: Mutex<Vec<AccessRecord>>,
}

impl KeyVault {
    pub fn new(owner: impl Into<String>, secret: SecretKey) -> Self {
        KeyVault { owner: owner.into(), secret, log: Mutex::new(Vec::new()) }
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    fn gate(&self, accessor: &str, operation: &str) -> Result<()> {
        let granted = accessor == self.owner;
        self.log.lock().expect("vault log").push(AccessRecord {
            accessor: accessor.to_string(),
            operation: operation.to_string(),
            granted,
        });
        if granted {
            Ok(())
        } else {
            Err(SimError::Protocol(format!(
                "secret key access denied: {accessor} is not {owner}",
                owner = self.owner
            )))
        }
    }

    pub fn decrypt_model(&self, accessor: &str, em: &EncryptedModel) -> Result<ScaledModel> {
        self.gate(accessor, "decrypt-model")?;
        Ok(ciphernet::decrypt_model(em, &self.secret)?)
    }

    pub fn evaluate_cipher(
        &self,
        accessor: &str,
        em: &EncryptedModel,
        examples: &[Example],
        strict_noise: bool,
    ) -> Result<f64> {
        self.gate(accessor, "evaluate-cipher")?;
        Ok(ciphernet::evaluate_cipher(em, &self.secret, examples, strict_noise)?)
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.log.lock().expect("vault log").clone()
    }
}

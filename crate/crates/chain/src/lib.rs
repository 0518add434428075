//! Blockchain middleware for the decentralized learning sandbox: a
//! content-addressed blob store standing in for a distributed file system,
//! and a hash-chained ledger sealed by round-robin proof-of-authority with an
//! escrow/vote/settlement task contract on top.

pub mod castore;
pub mod ledger;

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

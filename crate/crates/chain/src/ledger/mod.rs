//! Hash-chained blocks sealed by round-robin proof-of-authority, a small
//! transaction vocabulary, and the escrow/vote/settlement task contract.
//!
//! Every block hash is the SHA-256 of a canonical byte serialization (fixed
//! field order, length-prefixed variable fields), so any mutation of any
//! historical field is detectable by re-hashing.

mod state;

pub use state::{LedgerEvent, LedgerState, Role, TaskContract, TaskState, Verdict};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("not the scheduled sealer: expected {expected}, got {got}")]
    WrongSealer { expected: String, got: String },
    #[error("invalid transaction from {sender}: {reason}")]
    InvalidTx { sender: String, reason: String },
    #[error("unknown task {0}")]
    UnknownTask(u64),
    #[error("chain import: {0}")]
    Import(String),
    #[error("ledger needs at least one authority")]
    NoAuthorities,
}

pub type Result<T> = std::result::Result<T, LedgerError>;

pub type TaskId = u64;

/// Economic and objective parameters a task contract is deployed with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    /// Number of class labels d.
    pub classes: usize,
    /// Local-training success criterion, e.g. 0.90.
    pub accuracy_threshold: f64,
    /// 1 or 2.
    pub fusion_strategy: u8,
    /// Announcements after this tick are rejected.
    pub window_end_tick: u64,
    /// Tokens the initiator locks to fund rewards and fees.
    pub initiator_budget: u64,
    pub contributor_deposit: u64,
    pub verifier_deposit: u64,
    /// Paid to a contributor whose model is accepted.
    pub contributor_reward: u64,
    /// Flat fee paid per verification vote, accepted or not.
    pub verification_fee: u64,
    /// Verifiers sampled per announcement (capped by registrations).
    pub verifier_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoutReason {
    ContributorReward,
    VerificationFee,
    DepositRefund,
    BudgetRefund,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TxKind {
    ContractDeployed { spec: TaskSpec },
    /// Carries the content digests of the sample dataset and the public key.
    TaskPublished { task_id: TaskId, data_ref: String, key_ref: String },
    Registered { task_id: TaskId, role: Role, deposit: u64 },
    /// Carries the content digest of the announced (encrypted) model.
    ModelAnnounced { task_id: TaskId, model_ref: String },
    VoteCast { task_id: TaskId, model_ref: String, accept: bool },
    VerdictSettled { task_id: TaskId, model_ref: String, accepted: bool, yes: u32, no: u32 },
    CompensationPaid { task_id: TaskId, recipient: String, amount: u64, reason: PayoutReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: String,
    pub nonce: u64,
    #[serde(flatten)]
    pub kind: TxKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    /// Simulation tick, not wall time.
    pub timestamp: u64,
    pub prev_hash: String,
    pub sealer: String,
    pub transactions: Vec<Transaction>,
    pub hash: String,
}

pub const GENESIS_PREV_HASH: &str =
    "0000000000000000000000000000000000000000000000000000000000000000";

struct Canon(Vec<u8>);

impl Canon {
    fn new() -> Self {
        Canon(Vec::new())
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }

    fn string(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }
}

fn canon_tx(c: &mut Canon, tx: &Transaction) {
    c.string(&tx.sender);
    c.u64(tx.nonce);
    match &tx.kind {
        TxKind::ContractDeployed { spec } => {
            c.u8(1);
            c.u64(spec.task_id);
            c.u64(spec.classes as u64);
            c.f64(spec.accuracy_threshold);
            c.u8(spec.fusion_strategy);
            c.u64(spec.window_end_tick);
            c.u64(spec.initiator_budget);
            c.u64(spec.contributor_deposit);
            c.u64(spec.verifier_deposit);
            c.u64(spec.contributor_reward);
            c.u64(spec.verification_fee);
            c.u64(spec.verifier_count as u64);
        }
        TxKind::TaskPublished { task_id, data_ref, key_ref } => {
            c.u8(2);
            c.u64(*task_id);
            c.string(data_ref);
            c.string(key_ref);
        }
        TxKind::Registered { task_id, role, deposit } => {
            c.u8(3);
            c.u64(*task_id);
            c.u8(*role as u8);
            c.u64(*deposit);
        }
        TxKind::ModelAnnounced { task_id, model_ref } => {
            c.u8(4);
            c.u64(*task_id);
            c.string(model_ref);
        }
        TxKind::VoteCast { task_id, model_ref, accept } => {
            c.u8(5);
            c.u64(*task_id);
            c.string(model_ref);
            c.u8(*accept as u8);
        }
        TxKind::VerdictSettled { task_id, model_ref, accepted, yes, no } => {
            c.u8(6);
            c.u64(*task_id);
            c.string(model_ref);
            c.u8(*accepted as u8);
            c.u64(*yes as u64);
            c.u64(*no as u64);
        }
        TxKind::CompensationPaid { task_id, recipient, amount, reason } => {
            c.u8(7);
            c.u64(*task_id);
            c.string(recipient);
            c.u64(*amount);
            c.u8(*reason as u8);
        }
    }
}

/// Canonical bytes of everything a block commits to (all fields but `hash`).
pub fn block_preimage(block: &Block) -> Vec<u8> {
    let mut c = Canon::new();
    c.u8(1); // serialization version
    c.u64(block.index);
    c.u64(block.timestamp);
    c.string(&block.prev_hash);
    c.string(&block.sealer);
    c.u64(block.transactions.len() as u64);
    for tx in &block.transactions {
        canon_tx(&mut c, tx);
    }
    c.0
}

pub fn block_hash(block: &Block) -> String {
    crate::sha256_hex(&block_preimage(block))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainCheck {
    Ok,
    /// Index of the earliest inconsistent block.
    FirstBad(u64),
}

/// The block structure: hash-linked records sealed round-robin by a fixed
/// authority set.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub authorities: Vec<String>,
    pub block_interval_ticks: u64,
    blocks: Vec<Block>,
}

impl Chain {
    /// A new chain with its genesis block (index 0, zeroed previous hash).
    pub fn new(authorities: Vec<String>, block_interval_ticks: u64) -> Result<Chain> {
        if authorities.is_empty() {
            return Err(LedgerError::NoAuthorities);
        }
        let mut genesis = Block {
            index: 0,
            timestamp: 0,
            prev_hash: GENESIS_PREV_HASH.to_string(),
            sealer: authorities[0].clone(),
            transactions: Vec::new(),
            hash: String::new(),
        };
        genesis.hash = block_hash(&genesis);
        Ok(Chain { authorities, block_interval_ticks, blocks: vec![genesis] })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always has genesis")
    }

    pub fn scheduled_sealer(&self, index: u64) -> &str {
        &self.authorities[(index % self.authorities.len() as u64) as usize]
    }

    /// Seal a block with the scheduled authority.
    pub fn append(&mut self, transactions: Vec<Transaction>, tick: u64) -> &Block {
        let index = self.tip().index + 1;
        let sealer = self.scheduled_sealer(index).to_string();
        self.append_unchecked(sealer, transactions, tick)
    }

    /// Seal a block as a specific authority; refuses out-of-turn sealers.
    pub fn append_sealed_by(
        &mut self,
        sealer: &str,
        transactions: Vec<Transaction>,
        tick: u64,
    ) -> Result<&Block> {
        let index = self.tip().index + 1;
        let expected = self.scheduled_sealer(index);
        if sealer != expected {
            return Err(LedgerError::WrongSealer {
                expected: expected.to_string(),
                got: sealer.to_string(),
            });
        }
        Ok(self.append_unchecked(sealer.to_string(), transactions, tick))
    }

    fn append_unchecked(&mut self, sealer: String, transactions: Vec<Transaction>, tick: u64) -> &Block {
        let prev = self.tip();
        let mut block = Block {
            index: prev.index + 1,
            timestamp: tick,
            prev_hash: prev.hash.clone(),
            sealer,
            transactions,
            hash: String::new(),
        };
        block.hash = block_hash(&block);
        self.blocks.push(block);
        self.tip()
    }

    /// Recompute every hash and linkage; report the earliest inconsistency.
    pub fn verify(&self) -> ChainCheck {
        verify_blocks(&self.blocks)
    }

    /// One block per line, canonical struct field order.
    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for block in &self.blocks {
            out.push_str(&serde_json::to_string(block).expect("block serialization"));
            out.push('\n');
        }
        out
    }

    pub fn import_jsonl(s: &str) -> Result<Vec<Block>> {
        s.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| LedgerError::Import(e.to_string())))
            .collect()
    }
}

/// Linkage/hash verification over bare blocks (also used for imported chains).
pub fn verify_blocks(blocks: &[Block]) -> ChainCheck {
    for (i, block) in blocks.iter().enumerate() {
        if block.index != i as u64 {
            return ChainCheck::FirstBad(i as u64);
        }
        if i == 0 {
            if block.prev_hash != GENESIS_PREV_HASH {
                return ChainCheck::FirstBad(0);
            }
        } else if block.prev_hash != blocks[i - 1].hash {
            return ChainCheck::FirstBad(i as u64);
        }
        if block.hash != block_hash(block) {
            return ChainCheck::FirstBad(i as u64);
        }
    }
    ChainCheck::Ok
}

/// A chain bound to contract state: appending validates transactions against
/// the contract rules and applies them atomically.
#[derive(Debug, Clone)]
pub struct Ledger {
    pub chain: Chain,
    pub state: LedgerState,
}

impl Ledger {
    pub fn new(
        authorities: Vec<String>,
        block_interval_ticks: u64,
        genesis_accounts: Vec<(String, u64)>,
        selection_seed: u64,
    ) -> Result<Ledger> {
        Ok(Ledger {
            chain: Chain::new(authorities, block_interval_ticks)?,
            state: LedgerState::new(genesis_accounts, selection_seed),
        })
    }

    /// Validate and apply `transactions`, then seal them into a block. On any
    /// invalid transaction nothing is appended and the offender is named.
    pub fn append_block(
        &mut self,
        transactions: Vec<Transaction>,
        tick: u64,
    ) -> Result<(u64, Vec<LedgerEvent>)> {
        let mut staged = self.state.clone();
        let mut events = Vec::new();
        let next_index = self.chain.tip().index + 1;
        for tx in &transactions {
            events.extend(staged.apply(tx, tick, next_index)?);
        }
        self.state = staged;
        let block = self.chain.append(transactions, tick);
        debug_assert_eq!(block.index, next_index);
        Ok((next_index, events))
    }

    /// Replay a transaction log from genesis; the final state is a pure
    /// function of the log.
    pub fn replay(
        blocks: &[Block],
        genesis_accounts: Vec<(String, u64)>,
        selection_seed: u64,
    ) -> Result<LedgerState> {
        let mut state = LedgerState::new(genesis_accounts, selection_seed);
        for block in blocks {
            for tx in &block.transactions {
                state.apply(tx, block.timestamp, block.index)?;
            }
        }
        Ok(state)
    }
}

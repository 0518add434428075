//! The task-contract state machine: deposits, announcements, votes,
//! settlement, and compensation, with token conservation at every step.

use super::{LedgerError, PayoutReason, Result, TaskId, TaskSpec, Transaction, TxKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Computing = 1,
    Verifier = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    Verifying,
    Settled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    pub yes: u32,
    pub no: u32,
}

/// Emitted by applied transactions; the simulation turns these into follow-up
/// system transactions (verdicts, payouts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LedgerEvent {
    VoteTallied { task_id: TaskId, model_ref: String, votes: usize, quorum: usize },
    /// All selected verifiers voted; majority decides.
    VerdictReady { task_id: TaskId, model_ref: String, accepted: bool, yes: u32, no: u32 },
    /// A settled verdict obligates these payouts.
    PayoutDue { task_id: TaskId, recipient: String, amount: u64, reason: PayoutReason },
    TaskSettled { task_id: TaskId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Announcement {
    pub model_ref: String,
    pub contributor: String,
    pub announce_block: u64,
    /// Verifiers selected for this model; the quorum is the set size.
    pub verifier_set: Vec<String>,
    pub votes: BTreeMap<String, bool>,
    pub verdict: Option<Verdict>,
    /// True once the verdict's payouts have been recorded.
    pub paid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskContract {
    pub spec: TaskSpec,
    pub initiator: String,
    pub state: TaskState,
    pub escrow: BTreeMap<String, u64>,
    pub registered: BTreeMap<String, Role>,
    pub published: Option<(String, String)>,
    pub announcements: Vec<Announcement>,
}

impl TaskContract {
    pub fn announcement(&self, model_ref: &str) -> Option<&Announcement> {
        self.announcements.iter().find(|a| a.model_ref == model_ref)
    }

    fn announcement_mut(&mut self, model_ref: &str) -> Option<&mut Announcement> {
        self.announcements.iter_mut().find(|a| a.model_ref == model_ref)
    }

    /// Model refs accepted strictly before `block` (the set a verifier fuses
    /// a later candidate against).
    pub fn accepted_before(&self, block: u64) -> Vec<String> {
        self.announcements
            .iter()
            .filter(|a| {
                a.announce_block < block && a.verdict.map(|v| v.accepted).unwrap_or(false)
            })
            .map(|a| a.model_ref.clone())
            .collect()
    }

    pub fn accepted_refs(&self) -> Vec<String> {
        self.announcements
            .iter()
            .filter(|a| a.verdict.map(|v| v.accepted).unwrap_or(false))
            .map(|a| a.model_ref.clone())
            .collect()
    }

    pub fn escrow_total(&self) -> u64 {
        self.escrow.values().sum()
    }
}

/// splitmix64; enough randomness for verifier sampling without an RNG crate.
fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_without_replacement(pool: &[String], count: usize, seed: u64) -> Vec<String> {
    let mut items = pool.to_vec();
    let mut state = seed;
    let mut out = Vec::new();
    while out.len() < count && !items.is_empty() {
        let pick = (splitmix(&mut state) % items.len() as u64) as usize;
        out.push(items.swap_remove(pick));
    }
    out.sort();
    out
}

/// All balances, escrows, and task contracts; a deterministic function of the
/// applied transaction sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerState {
    pub accounts: BTreeMap<String, u64>,
    pub tasks: BTreeMap<TaskId, TaskContract>,
    pub initial_supply: u64,
    /// Seed for verifier sampling; part of the deterministic replay contract.
    pub selection_seed: u64,
}

impl LedgerState {
    pub fn new(genesis_accounts: Vec<(String, u64)>, selection_seed: u64) -> Self {
        let accounts: BTreeMap<String, u64> = genesis_accounts.into_iter().collect();
        let initial_supply = accounts.values().sum();
        LedgerState { accounts, tasks: BTreeMap::new(), initial_supply, selection_seed }
    }

    /// Total tokens across balances and escrows; constant across transitions.
    pub fn total_tokens(&self) -> u64 {
        self.accounts.values().sum::<u64>()
            + self.tasks.values().map(|t| t.escrow_total()).sum::<u64>()
    }

    pub fn conservation_holds(&self) -> bool {
        self.total_tokens() == self.initial_supply
    }

    fn reject(sender: &str, reason: impl Into<String>) -> LedgerError {
        LedgerError::InvalidTx { sender: sender.to_string(), reason: reason.into() }
    }

    fn debit(&mut self, who: &str, amount: u64) -> std::result::Result<(), String> {
        let balance = self.accounts.entry(who.to_string()).or_insert(0);
        if *balance < amount {
            return Err(format!("insufficient balance: {balance} < {amount}"));
        }
        *balance -= amount;
        Ok(())
    }

    fn credit(&mut self, who: &str, amount: u64) {
        *self.accounts.entry(who.to_string()).or_insert(0) += amount;
    }

    /// Validate and apply one transaction at the given tick/block, returning
    /// the events it triggers.
    pub fn apply(&mut self, tx: &Transaction, tick: u64, block: u64) -> Result<Vec<LedgerEvent>> {
        let sender = tx.sender.clone();
        let mut events = Vec::new();
        match &tx.kind {
            TxKind::ContractDeployed { spec } => {
                if self.tasks.contains_key(&spec.task_id) {
                    return Err(Self::reject(&sender, "task id already deployed"));
                }
                if !(0.0..=1.0).contains(&spec.accuracy_threshold) {
                    return Err(Self::reject(&sender, "accuracy threshold out of range"));
                }
                if spec.fusion_strategy != 1 && spec.fusion_strategy != 2 {
                    return Err(Self::reject(&sender, "fusion strategy must be 1 or 2"));
                }
                self.debit(&sender, spec.initiator_budget)
                    .map_err(|r| Self::reject(&sender, r))?;
                let mut escrow = BTreeMap::new();
                escrow.insert(sender.clone(), spec.initiator_budget);
                self.tasks.insert(
                    spec.task_id,
                    TaskContract {
                        spec: spec.clone(),
                        initiator: sender,
                        state: TaskState::Open,
                        escrow,
                        registered: BTreeMap::new(),
                        published: None,
                        announcements: Vec::new(),
                    },
                );
            }
            TxKind::TaskPublished { task_id, data_ref, key_ref } => {
                let task = self
                    .tasks
                    .get_mut(task_id)
                    .ok_or(LedgerError::UnknownTask(*task_id))?;
                if sender != task.initiator {
                    return Err(Self::reject(&sender, "only the initiator publishes the task"));
                }
                if task.published.is_some() {
                    return Err(Self::reject(&sender, "task already published"));
                }
                task.published = Some((data_ref.clone(), key_ref.clone()));
            }
            TxKind::Registered { task_id, role, deposit } => {
                let required = {
                    let task = self
                        .tasks
                        .get(task_id)
                        .ok_or(LedgerError::UnknownTask(*task_id))?;
                    if task.state == TaskState::Settled {
                        return Err(Self::reject(&sender, "task is settled"));
                    }
                    if task.registered.contains_key(&sender) {
                        return Err(Self::reject(&sender, "already registered"));
                    }
                    match role {
                        Role::Computing => task.spec.contributor_deposit,
                        Role::Verifier => task.spec.verifier_deposit,
                    }
                };
                if *deposit < required {
                    return Err(Self::reject(
                        &sender,
                        format!("deposit {deposit} below required {required}"),
                    ));
                }
                self.debit(&sender, *deposit).map_err(|r| Self::reject(&sender, r))?;
                let task = self.tasks.get_mut(task_id).expect("checked above");
                *task.escrow.entry(sender.clone()).or_insert(0) += *deposit;
                task.registered.insert(sender.clone(), *role);
            }
            TxKind::ModelAnnounced { task_id, model_ref } => {
                let seed = self.selection_seed;
                let task = self
                    .tasks
                    .get_mut(task_id)
                    .ok_or(LedgerError::UnknownTask(*task_id))?;
                if tick > task.spec.window_end_tick {
                    return Err(Self::reject(&sender, "announcement after the task window"));
                }
                if task.registered.get(&sender) != Some(&Role::Computing) {
                    return Err(Self::reject(&sender, "not a registered computing contributor"));
                }
                if task.announcement(model_ref).is_some() {
                    return Err(Self::reject(&sender, "model already announced"));
                }
                // quorum: verifiers registered at announcement time; later
                // joiners do not vote on earlier models
                let pool: Vec<String> = task
                    .registered
                    .iter()
                    .filter(|(_, r)| **r == Role::Verifier)
                    .map(|(n, _)| n.clone())
                    .collect();
                if pool.is_empty() {
                    return Err(Self::reject(&sender, "no registered verifiers"));
                }
                let mut mix = seed ^ *task_id;
                for b in model_ref.as_bytes() {
                    mix = mix.wrapping_mul(0x100_0000_01b3) ^ (*b as u64);
                }
                let verifier_set =
                    sample_without_replacement(&pool, task.spec.verifier_count.max(1), mix);
                task.state = TaskState::Verifying;
                task.announcements.push(Announcement {
                    model_ref: model_ref.clone(),
                    contributor: sender,
                    announce_block: block,
                    verifier_set,
                    votes: BTreeMap::new(),
                    verdict: None,
                    paid: false,
                });
            }
            TxKind::VoteCast { task_id, model_ref, accept } => {
                let task = self
                    .tasks
                    .get_mut(task_id)
                    .ok_or(LedgerError::UnknownTask(*task_id))?;
                let ann = task
                    .announcement_mut(model_ref)
                    .ok_or_else(|| Self::reject(&sender, "vote on unannounced model"))?;
                if ann.verdict.is_some() {
                    return Err(Self::reject(&sender, "verdict already settled"));
                }
                if !ann.verifier_set.contains(&sender) {
                    return Err(Self::reject(&sender, "not selected to verify this model"));
                }
                if ann.votes.contains_key(&sender) {
                    return Err(Self::reject(&sender, "double vote"));
                }
                ann.votes.insert(sender, *accept);
                let quorum = ann.verifier_set.len();
                events.push(LedgerEvent::VoteTallied {
                    task_id: *task_id,
                    model_ref: model_ref.clone(),
                    votes: ann.votes.len(),
                    quorum,
                });
                if ann.votes.len() == quorum {
                    let yes = ann.votes.values().filter(|&&v| v).count() as u32;
                    let no = quorum as u32 - yes;
                    // ties reject
                    events.push(LedgerEvent::VerdictReady {
                        task_id: *task_id,
                        model_ref: model_ref.clone(),
                        accepted: yes > no,
                        yes,
                        no,
                    });
                }
            }
            TxKind::VerdictSettled { task_id, model_ref, accepted, yes, no } => {
                let task = self
                    .tasks
                    .get_mut(task_id)
                    .ok_or(LedgerError::UnknownTask(*task_id))?;
                let initiator = task.initiator.clone();
                let (reward, fee) = (task.spec.contributor_reward, task.spec.verification_fee);
                let ann = task
                    .announcement_mut(model_ref)
                    .ok_or_else(|| Self::reject(&sender, "verdict on unannounced model"))?;
                if ann.verdict.is_some() {
                    return Err(Self::reject(&sender, "verdict already settled"));
                }
                let quorum = ann.verifier_set.len();
                if ann.votes.len() < quorum {
                    return Err(Self::reject(&sender, "verdict before quorum"));
                }
                let tallied_yes = ann.votes.values().filter(|&&v| v).count() as u32;
                let tallied_no = quorum as u32 - tallied_yes;
                if *yes != tallied_yes || *no != tallied_no || *accepted != (tallied_yes > tallied_no)
                {
                    return Err(Self::reject(&sender, "verdict does not match the recorded votes"));
                }
                ann.verdict = Some(Verdict { accepted: *accepted, yes: *yes, no: *no });
                ann.paid = true;
                // the accepted contributor is rewarded; verifiers are paid
                // for their effort either way
                if *accepted {
                    events.push(LedgerEvent::PayoutDue {
                        task_id: *task_id,
                        recipient: ann.contributor.clone(),
                        amount: reward,
                        reason: PayoutReason::ContributorReward,
                    });
                }
                for verifier in ann.verifier_set.clone() {
                    events.push(LedgerEvent::PayoutDue {
                        task_id: *task_id,
                        recipient: verifier,
                        amount: fee,
                        reason: PayoutReason::VerificationFee,
                    });
                }
                let _ = initiator;
            }
            TxKind::CompensationPaid { task_id, recipient, amount, reason } => {
                let task = self
                    .tasks
                    .get_mut(task_id)
                    .ok_or(LedgerError::UnknownTask(*task_id))?;
                let source = match reason {
                    // rewards and fees come out of the initiator's budget
                    PayoutReason::ContributorReward | PayoutReason::VerificationFee => {
                        task.initiator.clone()
                    }
                    // refunds return a participant's own escrow
                    PayoutReason::DepositRefund | PayoutReason::BudgetRefund => recipient.clone(),
                };
                let held = task.escrow.get(&source).copied().unwrap_or(0);
                if held < *amount {
                    return Err(Self::reject(
                        &sender,
                        format!("escrow of {source} holds {held} < {amount}"),
                    ));
                }
                if *amount == 0 {
                    return Err(Self::reject(&sender, "zero payout"));
                }
                if held == *amount {
                    task.escrow.remove(&source);
                } else {
                    *task.escrow.get_mut(&source).expect("checked") -= *amount;
                }
                let recipient = recipient.clone();
                let settled = task.escrow.is_empty();
                if settled {
                    task.state = TaskState::Settled;
                    events.push(LedgerEvent::TaskSettled { task_id: *task_id });
                }
                self.credit(&recipient, *amount);
            }
        }
        debug_assert!(self.conservation_holds(), "token conservation violated");
        Ok(events)
    }
}

//! Agent memories with a tamper-evident audit trail.
//!
//! Each agent (a user or an item) carries a short-term memory — the text that
//! goes into prompts — and, for user agents, a long-term store of previous
//! short-term memories that retrieval-augmented ranking draws from. Every
//! committed update appends a hash-chain entry, so a memory's history can be
//! verified after a run.

use serde::{Deserialize, Serialize};

use crate::textutil;

/// What kind of agent owns a memory. User memories push their previous
/// short-term text into long-term storage on update; item memories do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    User,
    Item,
}

/// One entry of the audit chain: the memory moved from the state hashing to
/// `old_hash` to the state hashing to `new_hash` at `timestep`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryAudit {
    pub timestep: u64,
    pub old_hash: String,
    pub new_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentMemory {
    pub owner: String,
    pub kind: AgentKind,
    pub short_term: String,
    /// Previous short-term memories, oldest first. Only user agents
    /// accumulate these.
    pub long_term: Vec<String>,
    pub version: u64,
    /// Hash of the memory the agent was created with; the audit chain is
    /// anchored here so even its first entry cannot be replaced.
    pub genesis_hash: String,
    pub audit: Vec<MemoryAudit>,
}

impl AgentMemory {
    pub fn new(owner: impl Into<String>, kind: AgentKind, initial: impl Into<String>) -> Self {
        let short_term = initial.into();
        let genesis_hash = textutil::sha256_hex(&short_term);
        AgentMemory {
            owner: owner.into(),
            kind,
            short_term,
            long_term: Vec::new(),
            version: 0,
            genesis_hash,
            audit: Vec::new(),
        }
    }

    /// Commits a new short-term memory, recording the transition. User
    /// agents archive the previous text into long-term storage.
    pub fn commit(&mut self, new_text: String, timestep: u64) {
        let old_hash = textutil::sha256_hex(&self.short_term);
        let new_hash = textutil::sha256_hex(&new_text);
        if self.kind == AgentKind::User {
            self.long_term.push(self.short_term.clone());
        }
        self.short_term = new_text;
        self.version += 1;
        self.audit.push(MemoryAudit { timestep, old_hash, new_hash });
    }

    /// Checks the audit chain: it starts at the genesis hash, entries link
    /// hash-to-hash, the tail matches the current text, and the version
    /// counts the commits.
    pub fn verify_audit(&self) -> bool {
        if self.version != self.audit.len() as u64 {
            return false;
        }
        let mut expected = self.genesis_hash.clone();
        for entry in &self.audit {
            if entry.old_hash != expected {
                return false;
            }
            expected = entry.new_hash.clone();
        }
        expected == textutil::sha256_hex(&self.short_term)
    }
}

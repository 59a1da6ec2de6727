//! The shared/per-domain parameter partition.
//!
//! Shared backbone weights are named `backbone/...` and `seqnet/...`; each
//! registered domain owns a bank named `domain/<id>/...` holding its
//! residual adapters, bottleneck adapters, every normalization layer and the
//! classifier head. A forward pass for a domain reads the shared weights and
//! that domain's bank only, and training modes decide which of those receive
//! gradients.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneDomainParams;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::ParamId;
use crate::seqnet::SeqNetDomainParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainId(pub u32);

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Domain 0 is the bank trained alongside the backbone and the source that
/// zero-identity registration copies from.
pub const SOURCE_DOMAIN: DomainId = DomainId(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Shared weights plus the source domain's norms and head.
    Backbone,
    /// One domain's bank only.
    Adapter(DomainId),
    /// Shared weights plus one domain's bank.
    Finetune(DomainId),
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Backbone => write!(f, "backbone"),
            TrainMode::Adapter(d) => write!(f, "adapter({d})"),
            TrainMode::Finetune(d) => write!(f, "finetune({d})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainInit {
    /// Copy norms and head from the source domain; adapters start at zero.
    ZeroIdentity,
    /// Unit/zero norms and a freshly drawn head; adapters start at zero.
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainParams {
    pub id: DomainId,
    pub name: String,
    pub backbone: BackboneDomainParams,
    pub seqnet: SeqNetDomainParams,
}

impl DomainParams {
    pub fn adapter_ids(&self) -> Vec<ParamId> {
        let mut v = self.backbone.adapter_ids();
        v.extend(self.seqnet.adapter_ids());
        v
    }

    /// Normalization and classifier parameters: everything in the bank that
    /// is not an adapter.
    pub fn norm_and_head_ids(&self) -> Vec<ParamId> {
        let mut v = self.backbone.norm_ids();
        v.extend(self.seqnet.norm_ids());
        v.extend(self.seqnet.head_ids());
        v
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.adapter_ids();
        v.extend(self.norm_and_head_ids());
        v.sort();
        v
    }

    pub fn prefix(&self) -> String {
        domain_prefix(self.id)
    }
}

pub fn domain_prefix(id: DomainId) -> String {
    format!("domain/{id}/")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DomainRegistry {
    banks: BTreeMap<DomainId, DomainParams>,
    next_id: u32,
}

impl DomainRegistry {
    pub fn get(&self, id: DomainId) -> Result<&DomainParams> {
        self.banks.get(&id).ok_or_else(|| {
            Error::Routing(format!(
                "domain {id} is not registered (registered: {})",
                self.describe()
            ))
        })
    }

    pub fn by_name(&self, name: &str) -> Option<&DomainParams> {
        self.banks.values().find(|d| d.name == name)
    }

    pub fn ids(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.banks.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DomainParams> {
        self.banks.values()
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn next_id(&self) -> DomainId {
        DomainId(self.next_id)
    }

    /// `id=name` pairs, for error messages and listings.
    pub fn describe(&self) -> String {
        if self.banks.is_empty() {
            return "none".into();
        }
        self.banks
            .values()
            .map(|d| format!("{}={}", d.id, d.name))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub(crate) fn insert(&mut self, params: DomainParams) {
        self.next_id = self.next_id.max(params.id.0 + 1);
        self.banks.insert(params.id, params);
    }
}

/// Parameters touched inside an audited region.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessReport {
    pub read: BTreeSet<String>,
    pub written: BTreeSet<String>,
}

impl AccessReport {
    /// Names in the report owned by a domain other than `domain`.
    pub fn foreign(&self, domain: DomainId) -> Vec<&str> {
        let own = domain_prefix(domain);
        self.read
            .iter()
            .chain(&self.written)
            .filter(|n| n.starts_with("domain/") && !n.starts_with(&own))
            .map(String::as_str)
            .collect()
    }
}

impl Model {
    /// Allocates a parameter bank for a new domain and returns its id. Ids
    /// are assigned in registration order and never reused.
    pub fn register_domain(&mut self, name: &str, init: DomainInit) -> Result<DomainId> {
        let id = self.registry.next_id();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.init_seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(id.0 as u64 + 1)));
        let backbone = BackboneDomainParams::create(&mut self.store, &self.config, id)?;
        let seqnet = SeqNetDomainParams::create(&mut self.store, &self.config, id, &mut rng)?;
        let bank = DomainParams {
            id,
            name: name.to_owned(),
            backbone,
            seqnet,
        };
        if init == DomainInit::ZeroIdentity {
            if let Ok(source) = self.registry.get(SOURCE_DOMAIN) {
                for (src, dst) in source.norm_and_head_ids().into_iter().zip(bank.norm_and_head_ids()) {
                    self.store.copy_value(src, dst)?;
                }
            }
        }
        self.registry.insert(bank);
        // New parameters start frozen; re-apply whatever mode was active.
        if let Some(mode) = self.mode {
            self.set_train_mode(mode)?;
        }
        Ok(id)
    }

    pub fn shared_ids(&self) -> Vec<ParamId> {
        let mut v = self.backbone.ids();
        v.extend(self.seqnet.ids());
        v.sort();
        v
    }

    /// The parameters a mode updates, in id order.
    pub fn trainable_set(&self, mode: TrainMode) -> Result<Vec<ParamId>> {
        let mut v = match mode {
            TrainMode::Backbone => {
                let mut v = self.shared_ids();
                v.extend(self.registry.get(SOURCE_DOMAIN)?.norm_and_head_ids());
                v
            }
            TrainMode::Adapter(d) => self.registry.get(d)?.ids(),
            TrainMode::Finetune(d) => {
                let mut v = self.shared_ids();
                v.extend(self.registry.get(d)?.ids());
                v
            }
        };
        v.sort();
        Ok(v)
    }

    /// Marks the mode's set trainable and freezes every other parameter.
    pub fn set_train_mode(&mut self, mode: TrainMode) -> Result<()> {
        let ids = self.trainable_set(mode)?;
        self.store.set_trainable(&ids);
        self.mode = Some(mode);
        Ok(())
    }

    pub fn train_mode(&self) -> Option<TrainMode> {
        self.mode
    }

    pub fn count_trainable_params(&self, mode: TrainMode) -> Result<usize> {
        Ok(self
            .trainable_set(mode)?
            .into_iter()
            .map(|id| self.store.tensor(id).len())
            .sum())
    }

    /// Runs `f` and reports every parameter it loaded into the supplied graph
    /// and every parameter whose value changed.
    pub fn audit_access<T>(&mut self, f: impl FnOnce(&mut Model, &mut Graph) -> Result<T>) -> Result<(T, AccessReport)> {
        let before: Vec<Vec<f64>> = self.store.iter().map(|(_, p)| p.value.data().to_vec()).collect();
        let mut g = Graph::new();
        let out = f(self, &mut g)?;
        let read = g.params_read().iter().map(|&id| self.store.name(id).to_owned()).collect();
        let written = self
            .store
            .iter()
            .filter(|(id, p)| before.get(id.index()).is_none_or(|b| b.as_slice() != p.value.data()))
            .map(|(_, p)| p.name.clone())
            .collect();
        Ok((out, AccessReport { read, written }))
    }
}

//! Named parameter storage shared by all network modules.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The trainable module a parameter belongs to. Training stages freeze whole modules.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    /// Hierarchical multi-scale region learning (shared trunk).
    Region,
    /// Face alignment convolutions and the landmark head.
    Align,
    /// Global feature learning.
    Global,
    /// Attention refinement and local AU feature branches.
    Attention,
    /// The AU detection head.
    Heads,
}

impl Module {
    pub const ALL: [Module; 5] = [
        Module::Region,
        Module::Align,
        Module::Global,
        Module::Attention,
        Module::Heads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Region => "region",
            Module::Align => "align",
            Module::Global => "global",
            Module::Attention => "attention",
            Module::Heads => "heads",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown module '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, not trainable parameters.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Weight decay applies to convolution and fully-connected weights and biases only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub module: Module,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        module: Module,
        kind: ParamKind,
        value: Tensor,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            module,
            kind,
            value,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of the trainable parameters, in registration order.
    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(|(_, p)| p.kind.is_trainable())
            .map(|(id, _)| id)
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.is_trainable() && p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Hash over names and bit patterns of every entry in `module`, including running statistics.
    pub fn module_hash(&self, module: Module) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params.iter().filter(|p| p.module == module) {
            p.name.hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Replaces a parameter value, checking that the shape is unchanged.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "parameter",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }
}

/// Gradients indexed like a [`ParamStore`]. Parameters that were not reached stay `None`.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    pub fn from_pairs(store: &ParamStore, pairs: Vec<(ParamId, Tensor)>) -> Self {
        let mut g = Self::new(store);
        for (id, t) in pairs {
            g.grads[id.0] = Some(t);
        }
        g
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

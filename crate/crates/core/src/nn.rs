//! Parameter registry and layer builders.
//!
//! Every learnable (or frozen) tensor lives in a [`ParamStore`] under a
//! unique dotted name and a group tag. The tag drives the optimizer (only
//! trainable parameters are updated) and the checkpoint format.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Frozen,
    Trainable,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Integrity(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "set would change shape of `{}`",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Splits every parameter into (frozen, trainable) id sets. The two sets
    /// are disjoint and exhaustive by construction; this verifies it anyway
    /// so a future refactor cannot silently break the contract.
    pub fn partition(&self) -> Result<(Vec<ParamId>, Vec<ParamId>)> {
        let mut frozen = Vec::new();
        let mut trainable = Vec::new();
        for (id, e) in self.iter() {
            match e.group {
                ParamGroup::Frozen => frozen.push(id),
                ParamGroup::Trainable => trainable.push(id),
            }
        }
        if frozen.len() + trainable.len() != self.entries.len() {
            return Err(Error::Integrity(
                "parameter partition is not exhaustive".to_string(),
            ));
        }
        Ok((frozen, trainable))
    }

    /// Total element count in a group.
    pub fn group_elems(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    /// Bit-exact snapshot of a group, keyed by name.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<(String, Vec<u64>)> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| {
                (
                    e.name.clone(),
                    e.value.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Kaiming-style normal scaled by 1/sqrt(fan_in), with an extra gain.
    Kaiming { gain: f64 },
}

fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut Rng64) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Kaiming { gain } => {
            let std = gain * (2.0 / fan_in as f64).sqrt();
            let mut t = Tensor::randn(shape, rng);
            for v in t.data_mut() {
                *v *= std;
            }
            t
        }
    }
}

/// 2-D convolution layer (square kernel, zero padding).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let w = ps.add(
            &format!("{name}.w"),
            group,
            init_tensor(&[cout, cin, k, k], cin * k * k, init, rng),
        )?;
        let b = ps.add(&format!("{name}.b"), group, Tensor::zeros(&[cout]))?;
        Ok(Conv2d { w, b, stride, pad })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut Rng64,
    ) -> Result<Self> {
        let w = ps.add(
            &format!("{name}.w"),
            group,
            init_tensor(&[dout, din], din, init, rng),
        )?;
        let b = ps.add(&format!("{name}.b"), group, Tensor::zeros(&[dout]))?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }
}

/// Group normalization with a learned per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

pub const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::parameter(
                "groupnorm_groups",
                format!("{groups} does not divide {channels} channels"),
            ));
        }
        let gamma = ps.add(&format!("{name}.g"), group, Tensor::full(&[channels], 1.0))?;
        let beta = ps.add(&format!("{name}.b"), group, Tensor::zeros(&[channels]))?;
        Ok(GroupNorm {
            gamma,
            beta,
            groups,
            eps: GN_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.group_norm(x, self.groups, self.eps);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.channel_affine(n, gamma, beta)
    }
}

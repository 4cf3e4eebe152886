use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Gradients, Graph, Tensor, Var};

/// Partition tag carried by every parameter and recorded in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamTag {
    /// AdaIN style affines of the decoder, the only set touched by adaptation.
    Phi,
    /// Every other decoder parameter.
    Other,
    /// Encoder parameters.
    Theta,
    /// Fixed parameters (feature extractor, discriminator snapshots).
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub tag: ParamTag,
}

/// Ordered, named parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, tag: ParamTag) -> usize {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value, tag });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn indices_with_tag(&self, tag: ParamTag) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].tag == tag)
            .collect()
    }

    /// Total scalar count of parameters carrying `tag`.
    pub fn scalar_count(&self, tag: ParamTag) -> usize {
        self.params
            .iter()
            .filter(|p| p.tag == tag)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on the tape; those selected by `trainable`
    /// become gradient-carrying leaves, the rest constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: impl Fn(&Param) -> bool) -> Vec<Var<'g>> {
        self.params
            .iter()
            .map(|p| {
                if trainable(p) {
                    graph.var(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Pulls the gradient of each bound trainable parameter out of `grads`.
    pub fn collect_grads(&self, vars: &[Var<'_>], grads: &mut Gradients) -> Vec<(usize, Tensor)> {
        vars.iter()
            .enumerate()
            .filter_map(|(i, v)| grads.take(*v).map(|g| (i, g)))
            .collect()
    }

    /// SHA-256 over names and raw values of the parameters selected by `filter`.
    pub fn checksum(&self, filter: impl Fn(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

//! Layer detachment, replacement, and parameter-delta arithmetic.
//!
//! [`detach_elo`] copies the embedding, head group (final norm + head matrix)
//! and the selected layers of a donor into a small standalone model whose
//! layers are renumbered `1..=|λ|`. [`replace_layers`] writes only the
//! selected layers back into the donor. [`compute_delta`] / [`apply_delta`]
//! implement the chat-vector `θ_inst − θ_pt` and its re-application.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{EloError, Result};
use crate::model::{layer_index, layer_names, layer_tensor_name, DecoderModel, ParamScope, EMBEDDING, HEAD_NORM, HEAD_W, LAYER_TENSORS};
use crate::tensor::Tensor;

/// Strictly increasing, 1-based decoder-layer indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LayerSelection(Vec<usize>);

impl LayerSelection {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(EloError::Selection("selection is empty".into()));
        }
        if indices.contains(&0) {
            return Err(EloError::Selection("layer indices are 1-based".into()));
        }
        let n = indices.len();
        indices.sort_unstable();
        indices.dedup();
        if indices.len() != n {
            return Err(EloError::Selection("duplicate layer index".into()));
        }
        Ok(LayerSelection(indices))
    }

    /// First and last layer of an `n_layers` model.
    pub fn first_last(n_layers: usize) -> Result<Self> {
        if n_layers == 1 {
            Self::new(vec![1])
        } else {
            Self::new(vec![1, n_layers])
        }
    }

    /// Parses `"1,16"`.
    pub fn parse(s: &str) -> Result<Self> {
        let indices = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| EloError::Selection(format!("bad layer index `{p}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }

    pub fn validate_for(&self, n_layers: usize) -> Result<()> {
        match self.0.last() {
            Some(&max) if max <= n_layers => Ok(()),
            Some(&max) => Err(EloError::Selection(format!(
                "layer {max} out of range for a {n_layers}-layer model"
            ))),
            None => Err(EloError::Selection("selection is empty".into())),
        }
    }
}

impl TryFrom<Vec<usize>> for LayerSelection {
    type Error = EloError;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LayerSelection> for Vec<usize> {
    fn from(s: LayerSelection) -> Self {
        s.0
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Embedding tensor names (frozen during ELO pretraining by default).
pub fn embedding_group() -> Vec<String> {
    vec![EMBEDDING.to_string()]
}

/// Head-group tensor names: the final norm belongs with the head matrix.
pub fn head_group() -> Vec<String> {
    vec![HEAD_NORM.to_string(), HEAD_W.to_string()]
}

/// The detached model `{θ^e, θ^h, θ^λ}` plus its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EloSubModel {
    model: DecoderModel,
    selection: LayerSelection,
    donor_lineage: String,
    donor_fingerprint: String,
    train_emb_head: bool,
}

impl EloSubModel {
    pub(crate) fn from_parts(
        model: DecoderModel,
        selection: LayerSelection,
        donor_lineage: String,
        donor_fingerprint: String,
        train_emb_head: bool,
    ) -> Result<Self> {
        if model.config().n_layers != selection.len() {
            return Err(EloError::shape(format!(
                "sub-model has {} layers but selection {selection} has {}",
                model.config().n_layers,
                selection.len()
            )));
        }
        Ok(EloSubModel {
            model,
            selection,
            donor_lineage,
            donor_fingerprint,
            train_emb_head,
        })
    }

    pub fn model(&self) -> &DecoderModel {
        &self.model
    }

    pub(crate) fn model_mut(&mut self) -> &mut DecoderModel {
        &mut self.model
    }

    pub fn selection(&self) -> &LayerSelection {
        &self.selection
    }

    /// Lineage (initialization fingerprint) of the donor.
    pub fn donor_lineage(&self) -> &str {
        &self.donor_lineage
    }

    /// Content fingerprint of the donor at detach time.
    pub fn donor_fingerprint(&self) -> &str {
        &self.donor_fingerprint
    }

    pub fn train_emb_head(&self) -> bool {
        self.train_emb_head
    }

    /// Allow (or forbid) gradient updates to the embedding and head group.
    pub fn set_train_emb_head(&mut self, on: bool) {
        self.train_emb_head = on;
    }

    /// Donor layer index of sub-model layer `sub_layer` (both 1-based).
    pub fn donor_layer(&self, sub_layer: usize) -> Option<usize> {
        self.selection.indices().get(sub_layer.checked_sub(1)?).copied()
    }

    /// `(sub-model name, donor name)` for every tensor.
    pub fn name_map(&self) -> Vec<(String, String)> {
        self.model
            .names()
            .map(|name| {
                let donor = match layer_index(name) {
                    Some(i) => {
                        let suffix = &name[format!("layer.{i}.").len()..];
                        layer_tensor_name(self.selection.indices()[i - 1], suffix)
                    }
                    None => name.to_string(),
                };
                (name.to_string(), donor)
            })
            .collect()
    }

    /// Tensors that are frozen (embedding + head group), unless
    /// `train_emb_head` is set.
    pub fn frozen_names(&self) -> BTreeSet<String> {
        if self.train_emb_head {
            BTreeSet::new()
        } else {
            embedding_group().into_iter().chain(head_group()).collect()
        }
    }

    /// Tensors updated by ELO pretraining: `θ^λ` (plus emb/head if enabled).
    pub fn trainable_names(&self) -> BTreeSet<String> {
        let frozen = self.frozen_names();
        self.model.names().filter(|n| !frozen.contains(*n)).map(str::to_string).collect()
    }

    pub fn count_params(&self) -> usize {
        self.model.count_params(ParamScope::All).expect("all scope")
    }

    pub fn fingerprint(&self) -> String {
        self.model.fingerprint()
    }
}

/// Content hash over sorted names, shapes, and raw bytes.
pub fn fingerprint(model: &DecoderModel) -> String {
    model.fingerprint()
}

/// Copies `θ^e`, `θ^h` and the layers in `selection` into a standalone
/// `|λ|`-layer model. The donor is not modified.
pub fn detach_elo(model: &DecoderModel, selection: &LayerSelection) -> Result<EloSubModel> {
    selection.validate_for(model.config().n_layers)?;
    let mut config = model.config().clone();
    config.n_layers = selection.len();
    let mut params = BTreeMap::new();
    for name in embedding_group().into_iter().chain(head_group()) {
        params.insert(name.clone(), model.tensor(&name)?.clone());
    }
    for (sub_i, &donor_i) in selection.indices().iter().enumerate() {
        for suffix in LAYER_TENSORS {
            let t = model.tensor(&layer_tensor_name(donor_i, suffix))?.clone();
            params.insert(layer_tensor_name(sub_i + 1, suffix), t);
        }
    }
    let sub = DecoderModel::from_parts(config, params, model.lineage().to_string())?;
    EloSubModel::from_parts(
        sub,
        selection.clone(),
        model.lineage().to_string(),
        model.fingerprint(),
        false,
    )
}

/// Writes the sub-model's layers back into a copy of `original` at their
/// donor positions. Embedding and head of `original` are kept.
pub fn replace_layers(original: &DecoderModel, sub: &EloSubModel) -> Result<DecoderModel> {
    if sub.donor_lineage != original.lineage() {
        return Err(EloError::Lineage {
            sub: sub.donor_lineage.clone(),
            target: original.lineage().to_string(),
        });
    }
    let (oc, sc) = (original.config(), sub.model.config());
    if oc.d_model != sc.d_model || oc.d_ff != sc.d_ff || oc.n_heads != sc.n_heads || oc.vocab_size != sc.vocab_size {
        return Err(EloError::shape("sub-model dimensions differ from the original".to_string()));
    }
    sub.selection.validate_for(oc.n_layers)?;
    let mut merged = original.clone();
    for (sub_i, &donor_i) in sub.selection.indices().iter().enumerate() {
        for suffix in LAYER_TENSORS {
            let src = sub.model.tensor(&layer_tensor_name(sub_i + 1, suffix))?;
            let dst = merged.tensor_mut(&layer_tensor_name(donor_i, suffix))?;
            if src.shape() != dst.shape() {
                return Err(EloError::shape(format!(
                    "layer {donor_i} {suffix}: {:?} vs {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
    }
    Ok(merged)
}

/// Names of every tensor the write-back of `selection` may touch.
pub fn write_set(selection: &LayerSelection) -> BTreeSet<String> {
    selection.indices().iter().flat_map(|&i| layer_names(i)).collect()
}

/// Per-tensor difference between two shape-compatible models.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDelta {
    entries: BTreeMap<String, Tensor<f32>>,
    minuend_fingerprint: String,
    subtrahend_fingerprint: String,
}

impl ParamDelta {
    pub(crate) fn from_parts(
        entries: BTreeMap<String, Tensor<f32>>,
        minuend_fingerprint: String,
        subtrahend_fingerprint: String,
    ) -> Self {
        ParamDelta {
            entries,
            minuend_fingerprint,
            subtrahend_fingerprint,
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.entries
    }

    pub fn minuend_fingerprint(&self) -> &str {
        &self.minuend_fingerprint
    }

    pub fn subtrahend_fingerprint(&self) -> &str {
        &self.subtrahend_fingerprint
    }

    /// Σ |d| over all entries, accumulated in f64.
    pub fn l1_norm(&self) -> f64 {
        self.entries.values().flat_map(|t| t.data()).map(|&x| (x as f64).abs()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().all(|t| t.data().iter().all(|&x| x == 0.0))
    }

    pub fn fingerprint(&self) -> String {
        crate::model::digest_tensors(&self.entries)
    }
}

/// `minuend − subtrahend` per tensor, computed in f64 and stored as f32.
pub fn compute_delta(minuend: &DecoderModel, subtrahend: &DecoderModel) -> Result<ParamDelta> {
    if minuend.config().tensor_shapes() != subtrahend.config().tensor_shapes() {
        return Err(EloError::shape("compute_delta: models have different tensor layouts"));
    }
    let mut entries = BTreeMap::new();
    for (name, a) in minuend.params() {
        let b = subtrahend.tensor(name)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64) as f32)
            .collect();
        entries.insert(name.clone(), Tensor::from_vec(a.shape(), data)?);
    }
    Ok(ParamDelta::from_parts(entries, minuend.fingerprint(), subtrahend.fingerprint()))
}

/// `w + d` for every tensor in the delta (computed in f64).
pub fn apply_delta(model: &DecoderModel, delta: &ParamDelta) -> Result<DecoderModel> {
    let mut out = model.clone();
    for (name, d) in &delta.entries {
        let w = out.tensor_mut(name)?;
        if w.shape() != d.shape() {
            return Err(EloError::shape(format!(
                "delta `{name}` {:?} vs model {:?}",
                d.shape(),
                w.shape()
            )));
        }
        for (x, &dx) in w.data_mut().iter_mut().zip(d.data()) {
            *x = (*x as f64 + dx as f64) as f32;
        }
    }
    Ok(out)
}

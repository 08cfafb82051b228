//! The four model families compared by the harness: a plain four-conv CNN,
//! a residual-block CNN, a small vision transformer, and a probability-
//! averaging ensemble of the latter two. All share one forward contract:
//! a batch of [1 x side x side] images maps to logits [N x num_classes].

mod basic_cnn;
mod ensemble;
mod io;
mod resnet;
mod vit;

pub use ensemble::build_proposed;
pub use io::{load_model, save_ensemble_wrapper, save_model, ModelIoError};
pub use resnet::residual_block;
pub use vit::{attention_block, patch_embed_and_position, patchify, unpatchify, AttentionParams, HeadParams};

use crate::tensor::{Graph, Tensor, TensorError, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("class-count mismatch between sub-models: {left} vs {right}")]
    ClassCountMismatch { left: usize, right: usize },
    #[error("input image {index} has shape {found:?}, expected {expected:?}")]
    BadInputShape {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("patchify: image side {side} not divisible by patch size {patch}")]
    PatchIndivisible { side: usize, patch: usize },
    #[error("position table has {rows} rows, expected one per patch ({patches})")]
    PositionTableMismatch { rows: usize, patches: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicCnnSpec {
    pub input_side: usize,
    pub num_classes: usize,
    /// Output channels of the four 3x3 convolutions.
    pub widths: [usize; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetSpec {
    pub input_side: usize,
    pub num_classes: usize,
    pub stem_width: usize,
    pub num_blocks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitSpec {
    pub input_side: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_layers: usize,
}

/// Declarative description of one model, including every hyperparameter
/// needed to rebuild its parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSpec {
    BasicCnn(BasicCnnSpec),
    ResNetStyle(ResNetSpec),
    ViT(VitSpec),
    ProposedEnsemble { num_classes: usize },
}

impl ModelSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::BasicCnn(s) => s.num_classes,
            ModelSpec::ResNetStyle(s) => s.num_classes,
            ModelSpec::ViT(s) => s.num_classes,
            ModelSpec::ProposedEnsemble { num_classes } => *num_classes,
        }
    }

    pub fn input_side(&self) -> Option<usize> {
        match self {
            ModelSpec::BasicCnn(s) => Some(s.input_side),
            ModelSpec::ResNetStyle(s) => Some(s.input_side),
            ModelSpec::ViT(s) => Some(s.input_side),
            ModelSpec::ProposedEnsemble { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::InvalidSpec { reason });
        if self.num_classes() < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes()));
        }
        match self {
            ModelSpec::BasicCnn(s) => {
                if s.input_side < 4 {
                    return fail(format!("basic CNN needs input_side >= 4 for two pools, got {}", s.input_side));
                }
                if s.widths.iter().any(|&w| w == 0) {
                    return fail(format!("channel widths must be positive, got {:?}", s.widths));
                }
            }
            ModelSpec::ResNetStyle(s) => {
                if s.input_side == 0 {
                    return fail("input_side must be positive".into());
                }
                if s.stem_width == 0 {
                    return fail("stem_width must be positive".into());
                }
                if s.num_blocks == 0 {
                    return fail("num_blocks must be positive".into());
                }
            }
            ModelSpec::ViT(s) => {
                if s.patch_size == 0 || s.input_side == 0 {
                    return fail("patch_size and input_side must be positive".into());
                }
                if s.input_side % s.patch_size != 0 {
                    return fail(format!(
                        "input_side {} not divisible by patch_size {}",
                        s.input_side, s.patch_size
                    ));
                }
                if s.num_heads == 0 || s.embed_dim % s.num_heads != 0 {
                    return fail(format!(
                        "embed_dim {} not divisible by num_heads {}",
                        s.embed_dim, s.num_heads
                    ));
                }
                if s.mlp_dim == 0 || s.num_layers == 0 {
                    return fail("mlp_dim and num_layers must be positive".into());
                }
            }
            ModelSpec::ProposedEnsemble { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDef {
    pub fn xavier(name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Self {
        ParamDef { name, shape, init: Init::Xavier { fan_in, fan_out } }
    }

    pub fn zeros(name: String, shape: Vec<usize>) -> Self {
        ParamDef { name, shape, init: Init::Zeros }
    }

    pub fn ones(name: String, shape: Vec<usize>) -> Self {
        ParamDef { name, shape, init: Init::Ones }
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// A realized model: spec plus its ordered parameter set. The proposed
/// ensemble holds no parameters of its own, only two sub-models.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
    subs: Vec<Model>,
}

/// Graph handles produced by one forward pass: the logits node plus the
/// parameter leaves in `Model::params` order (empty for the ensemble).
pub struct ForwardPass {
    pub logits: TensorId,
    pub param_ids: Vec<TensorId>,
}

pub(crate) struct ParamRefs<'a> {
    by_name: HashMap<&'a str, TensorId>,
}

impl<'a> ParamRefs<'a> {
    fn new(params: &'a [Param], ids: &[TensorId]) -> Self {
        let by_name = params.iter().zip(ids).map(|(p, &id)| (p.name.as_str(), id)).collect();
        ParamRefs { by_name }
    }

    pub fn get(&self, name: &str) -> TensorId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"))
    }
}

/// Fixed parameter layout (names, shapes, init rules) for a spec. Names are
/// unique and stable; the save format and the loader both derive from this.
pub(crate) fn param_layout(spec: &ModelSpec) -> Vec<ParamDef> {
    match spec {
        ModelSpec::BasicCnn(s) => basic_cnn::layout(s),
        ModelSpec::ResNetStyle(s) => resnet::layout(s),
        ModelSpec::ViT(s) => vit::layout(s),
        ModelSpec::ProposedEnsemble { .. } => Vec::new(),
    }
}

impl Model {
    /// Build a model with seed-controlled initialization. The ensemble kind
    /// is assembled from trained sub-models via [`build_proposed`] instead.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model, ModelError> {
        spec.validate()?;
        if matches!(spec, ModelSpec::ProposedEnsemble { .. }) {
            return Err(ModelError::InvalidSpec {
                reason: "the proposed ensemble is built from trained sub-models, not from scratch".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_layout(&spec)
            .into_iter()
            .map(|def| {
                let n: usize = def.shape.iter().product();
                let data = match def.init {
                    Init::Xavier { fan_in, fan_out } => {
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Param {
                    name: def.name,
                    value: Tensor::new(def.shape, data).expect("layout shapes are valid"),
                }
            })
            .collect();
        Ok(Model { spec, params, subs: Vec::new() })
    }

    pub(crate) fn from_parts(spec: ModelSpec, params: Vec<Param>, subs: Vec<Model>) -> Model {
        Model { spec, params, subs }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn subs(&self) -> &[Model] {
        &self.subs
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Run the model on a batch of per-sample image nodes already present
    /// in `graph`. When `track_grads` is set, parameter leaves are added
    /// with gradients enabled and their ids returned for the optimizer.
    pub fn forward(
        &self,
        graph: &mut Graph,
        images: &[TensorId],
        track_grads: bool,
    ) -> Result<ForwardPass, ModelError> {
        if let Some(side) = self.spec.input_side() {
            let expected = vec![1, side, side];
            for (index, &img) in images.iter().enumerate() {
                if graph.shape(img) != expected.as_slice() {
                    return Err(ModelError::BadInputShape {
                        index,
                        expected,
                        found: graph.shape(img).to_vec(),
                    });
                }
            }
        }

        if let ModelSpec::ProposedEnsemble { .. } = self.spec {
            let logits = ensemble::forward(self, graph, images)?;
            return Ok(ForwardPass { logits, param_ids: Vec::new() });
        }

        let param_ids: Vec<TensorId> = self
            .params
            .iter()
            .map(|p| {
                let t = if track_grads { p.value.clone().with_grad() } else { p.value.clone() };
                graph.leaf(t)
            })
            .collect();
        let refs = ParamRefs::new(&self.params, &param_ids);

        let mut rows = Vec::with_capacity(images.len());
        for &img in images {
            let row = match &self.spec {
                ModelSpec::BasicCnn(s) => basic_cnn::forward_one(s, graph, img, &refs)?,
                ModelSpec::ResNetStyle(s) => resnet::forward_one(s, graph, img, &refs)?,
                ModelSpec::ViT(s) => vit::forward_one(s, graph, img, &refs)?,
                ModelSpec::ProposedEnsemble { .. } => unreachable!("handled above"),
            };
            rows.push(row);
        }
        let logits = graph.concat_rows(&rows)?;
        Ok(ForwardPass { logits, param_ids })
    }

    /// Inference helper: softmax probability rows for a batch of images.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut graph = Graph::new();
        let ids: Vec<TensorId> = images.iter().map(|t| graph.leaf((*t).clone())).collect();
        let pass = self.forward(&mut graph, &ids, false)?;
        let probs = graph.softmax(pass.logits);
        let classes = self.num_classes();
        Ok(graph.data(probs).chunks(classes).map(|r| r.to_vec()).collect())
    }
}

pub(crate) fn dense(
    graph: &mut Graph,
    x: TensorId,
    weight: TensorId,
    bias: TensorId,
) -> Result<TensorId, TensorError> {
    let out = graph.matmul(x, weight)?;
    let cols = graph.shape(out)[1];
    let bias_row = graph.reshape(bias, vec![1, cols])?;
    graph.add(out, bias_row)
}

//! The proposed method: average the softmax probabilities of a trained
//! residual CNN and a trained ViT, re-logged so the output still plugs into
//! the cross-entropy/argmax pipeline as logits.

use super::{Model, ModelError, ModelSpec};
use crate::tensor::{Graph, TensorId};

/// Combine two trained sub-models into the probability-averaging ensemble.
/// Both must agree on the class count; both are expected to have been
/// trained with augmentation enabled.
pub fn build_proposed(resnet: Model, vit: Model) -> Result<Model, ModelError> {
    let (left, right) = (resnet.num_classes(), vit.num_classes());
    if left != right {
        return Err(ModelError::ClassCountMismatch { left, right });
    }
    Ok(Model::from_parts(
        ModelSpec::ProposedEnsemble { num_classes: left },
        Vec::new(),
        vec![resnet, vit],
    ))
}

// log(mean of sub-model softmax rows). Softmax of that log recovers the
// averaged probabilities (up to the underflow floor), so argmax is
// preserved. The floor keeps log finite when a probability underflows to
// exactly zero for extreme logits.
const PROB_FLOOR: f64 = 1e-300;

pub(super) fn forward(
    model: &Model,
    graph: &mut Graph,
    images: &[TensorId],
) -> Result<TensorId, ModelError> {
    let mut avg: Option<TensorId> = None;
    let weight = 1.0 / model.subs().len() as f64;
    for sub in model.subs() {
        let pass = sub.forward(graph, images, false)?;
        let probs = graph.softmax(pass.logits);
        let scaled = graph.mul_scalar(probs, weight);
        avg = Some(match avg {
            None => scaled,
            Some(acc) => graph.add(acc, scaled)?,
        });
    }
    let floored = graph.clamp_min(avg.expect("ensemble has sub-models"), PROB_FLOOR);
    Ok(graph.log(floored)?)
}

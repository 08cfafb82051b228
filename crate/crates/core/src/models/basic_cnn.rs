//! The baseline classifier: conv-relu, conv-relu, pool, conv-relu,
//! conv-relu, pool, flatten, dense. Four convolutions (3x3, padding 1),
//! two 2x2 pools, one dense layer.

use super::{dense, BasicCnnSpec, ModelError, ParamDef, ParamRefs};
use crate::tensor::{Graph, TensorId};

fn pooled_side(side: usize) -> usize {
    // Two rounds of window-2 stride-2 max pooling.
    let once = (side - 2) / 2 + 1;
    (once - 2) / 2 + 1
}

pub(super) fn flat_features(spec: &BasicCnnSpec) -> usize {
    spec.widths[3] * pooled_side(spec.input_side).pow(2)
}

pub(super) fn layout(spec: &BasicCnnSpec) -> Vec<ParamDef> {
    let mut defs = Vec::new();
    let mut c_in = 1;
    for (i, &w) in spec.widths.iter().enumerate() {
        defs.push(ParamDef::xavier(
            format!("conv{}.weight", i + 1),
            vec![w, c_in, 3, 3],
            c_in * 9,
            w * 9,
        ));
        defs.push(ParamDef::zeros(format!("conv{}.bias", i + 1), vec![w]));
        c_in = w;
    }
    let flat = flat_features(spec);
    defs.push(ParamDef::xavier("fc.weight".into(), vec![flat, spec.num_classes], flat, spec.num_classes));
    defs.push(ParamDef::zeros("fc.bias".into(), vec![spec.num_classes]));
    defs
}

pub(super) fn forward_one(
    spec: &BasicCnnSpec,
    graph: &mut Graph,
    image: TensorId,
    params: &ParamRefs,
) -> Result<TensorId, ModelError> {
    let conv = |graph: &mut Graph, x, i: usize| -> Result<TensorId, ModelError> {
        let w = params.get(&format!("conv{i}.weight"));
        let b = params.get(&format!("conv{i}.bias"));
        let y = graph.conv2d(x, w, b, 1, 1)?;
        Ok(graph.relu(y))
    };

    let mut x = conv(graph, image, 1)?;
    x = conv(graph, x, 2)?;
    x = graph.max_pool2d(x, 2, 2)?;
    x = conv(graph, x, 3)?;
    x = conv(graph, x, 4)?;
    x = graph.max_pool2d(x, 2, 2)?;
    let flat = graph.reshape(x, vec![1, flat_features(spec)])?;
    Ok(dense(graph, flat, params.get("fc.weight"), params.get("fc.bias"))?)
}

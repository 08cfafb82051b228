//! Residual-block classifier: stem conv, a stack of identity-skip residual
//! blocks, global average pooling, dense logits. Blocks preserve channel
//! count and spatial size (3x3, stride 1, padding 1).

use super::{dense, ModelError, ParamDef, ParamRefs, ResNetSpec};
use crate::tensor::{Graph, TensorError, TensorId};

pub(super) fn layout(spec: &ResNetSpec) -> Vec<ParamDef> {
    let w = spec.stem_width;
    let mut defs = vec![
        ParamDef::xavier("stem.weight".into(), vec![w, 1, 3, 3], 9, w * 9),
        ParamDef::zeros("stem.bias".into(), vec![w]),
    ];
    for b in 0..spec.num_blocks {
        for conv in 1..=2 {
            defs.push(ParamDef::xavier(
                format!("block{b}.conv{conv}.weight"),
                vec![w, w, 3, 3],
                w * 9,
                w * 9,
            ));
            defs.push(ParamDef::zeros(format!("block{b}.conv{conv}.bias"), vec![w]));
        }
    }
    defs.push(ParamDef::xavier("fc.weight".into(), vec![w, spec.num_classes], w, spec.num_classes));
    defs.push(ParamDef::zeros("fc.bias".into(), vec![spec.num_classes]));
    defs
}

/// relu(conv2(relu(conv1(x))) + x). Both convolutions are 3x3, stride 1,
/// padding 1, so the skip connection adds same-shaped tensors; a channel
/// mismatch between x and the block weights is a shape error.
pub fn residual_block(
    graph: &mut Graph,
    x: TensorId,
    conv1_weight: TensorId,
    conv1_bias: TensorId,
    conv2_weight: TensorId,
    conv2_bias: TensorId,
) -> Result<TensorId, TensorError> {
    let y = graph.conv2d(x, conv1_weight, conv1_bias, 1, 1)?;
    let y = graph.relu(y);
    let y = graph.conv2d(y, conv2_weight, conv2_bias, 1, 1)?;
    let s = graph.add(y, x)?;
    Ok(graph.relu(s))
}

pub(super) fn forward_one(
    spec: &ResNetSpec,
    graph: &mut Graph,
    image: TensorId,
    params: &ParamRefs,
) -> Result<TensorId, ModelError> {
    let stem = graph.conv2d(image, params.get("stem.weight"), params.get("stem.bias"), 1, 1)?;
    let mut x = graph.relu(stem);
    for b in 0..spec.num_blocks {
        x = residual_block(
            graph,
            x,
            params.get(&format!("block{b}.conv1.weight")),
            params.get(&format!("block{b}.conv1.bias")),
            params.get(&format!("block{b}.conv2.weight")),
            params.get(&format!("block{b}.conv2.bias")),
        )?;
    }
    let pooled = graph.channel_mean(x)?;
    Ok(dense(graph, pooled, params.get("fc.weight"), params.get("fc.bias"))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Model, ModelSpec};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(side: usize) -> ModelSpec {
        ModelSpec::ResNetStyle(ResNetSpec { input_side: side, num_classes: 5, stem_width: 4, num_blocks: 3 })
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn forward_shape_contract() {
        let model = Model::build(spec(16), 3).unwrap();
        let mut g = Graph::new();
        let imgs: Vec<_> = (0..3)
            .map(|_| g.leaf(Tensor::full(vec![1, 16, 16], 0.3).unwrap()))
            .collect();
        let pass = model.forward(&mut g, &imgs, false).unwrap();
        assert_eq!(g.shape(pass.logits), &[3, 5]);
    }

    #[test]
    fn zeroed_second_conv_keeps_identity_path() {
        // With conv2 weights and bias zero the block is relu(x); for
        // non-negative x that is x itself.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.random::<f64>()).collect();
        let x = g.leaf(Tensor::new(vec![2, 4, 4], data.clone()).unwrap());
        let c1w = g.leaf(rand_tensor(&mut rng, vec![2, 2, 3, 3]));
        let c1b = g.leaf(rand_tensor(&mut rng, vec![2]));
        let c2w = g.leaf(Tensor::zeros(vec![2, 2, 3, 3]).unwrap());
        let c2b = g.leaf(Tensor::zeros(vec![2]).unwrap());
        let out = residual_block(&mut g, x, c1w, c1b, c2w, c2b).unwrap();
        assert_eq!(g.data(out), data.as_slice());
    }

    #[test]
    fn zero_input_and_biases_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 4, 4]).unwrap());
        let c1w = g.leaf(rand_tensor(&mut rng, vec![2, 2, 3, 3]));
        let c1b = g.leaf(Tensor::zeros(vec![2]).unwrap());
        let c2w = g.leaf(rand_tensor(&mut rng, vec![2, 2, 3, 3]));
        let c2b = g.leaf(Tensor::zeros(vec![2]).unwrap());
        let out = residual_block(&mut g, x, c1w, c1b, c2w, c2b).unwrap();
        assert!(g.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_matches_hand_composed_ops() {
        // Independent composition of the same primitives.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x_t = rand_tensor(&mut rng, vec![2, 4, 4]);
        let c1w_t = rand_tensor(&mut rng, vec![2, 2, 3, 3]);
        let c1b_t = rand_tensor(&mut rng, vec![2]);
        let c2w_t = rand_tensor(&mut rng, vec![2, 2, 3, 3]);
        let c2b_t = rand_tensor(&mut rng, vec![2]);

        let mut g = Graph::new();
        let x = g.leaf(x_t.clone());
        let c1w = g.leaf(c1w_t.clone());
        let c1b = g.leaf(c1b_t.clone());
        let c2w = g.leaf(c2w_t.clone());
        let c2b = g.leaf(c2b_t.clone());
        let block = residual_block(&mut g, x, c1w, c1b, c2w, c2b).unwrap();

        let mut h = Graph::new();
        let x2 = h.leaf(x_t);
        let c1w2 = h.leaf(c1w_t);
        let c1b2 = h.leaf(c1b_t);
        let c2w2 = h.leaf(c2w_t);
        let c2b2 = h.leaf(c2b_t);
        let a = h.conv2d(x2, c1w2, c1b2, 1, 1).unwrap();
        let a = h.relu(a);
        let b = h.conv2d(a, c2w2, c2b2, 1, 1).unwrap();
        let c = h.add(b, x2).unwrap();
        let oracle = h.relu(c);

        assert_eq!(g.data(block), h.data(oracle));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![3, 4, 4]).unwrap());
        let c1w = g.leaf(rand_tensor(&mut rng, vec![2, 2, 3, 3]));
        let c1b = g.leaf(Tensor::zeros(vec![2]).unwrap());
        let c2w = g.leaf(rand_tensor(&mut rng, vec![2, 2, 3, 3]));
        let c2b = g.leaf(Tensor::zeros(vec![2]).unwrap());
        assert!(residual_block(&mut g, x, c1w, c1b, c2w, c2b).is_err());
    }

    #[test]
    fn zeroed_branches_collapse_to_stem_pool_dense() {
        let mut model = Model::build(spec(8), 11).unwrap();
        let mut collapsed = model.clone();
        for p in collapsed.params_mut() {
            if p.name.starts_with("block") {
                p.value = Tensor::zeros(p.value.shape().to_vec()).unwrap();
            }
        }
        // Reference model with zero blocks is stem + pool + dense with the
        // same stem/fc parameters.
        let img = Tensor::full(vec![1, 8, 8], 0.25).unwrap();
        let full = collapsed.predict(&[&img]).unwrap();

        for p in model.params_mut() {
            if p.name.starts_with("block") {
                p.value = Tensor::zeros(p.value.shape().to_vec()).unwrap();
            }
        }
        let mut g = Graph::new();
        let x = g.leaf(img.clone());
        let refs: Vec<_> = model.params().iter().map(|p| g.leaf(p.value.clone())).collect();
        let by_name = |name: &str| {
            let idx = model.params().iter().position(|p| p.name == name).unwrap();
            refs[idx]
        };
        let stem = g.conv2d(x, by_name("stem.weight"), by_name("stem.bias"), 1, 1).unwrap();
        let stem = g.relu(stem);
        let pooled = g.channel_mean(stem).unwrap();
        let logits = dense(&mut g, pooled, by_name("fc.weight"), by_name("fc.bias")).unwrap();
        let probs = g.softmax(logits);
        for (a, b) in full[0].iter().zip(g.data(probs)) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }
}

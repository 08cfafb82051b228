//! Mini vision transformer: patchify, linear patch embedding with learned
//! positions, pre-norm attention blocks, mean-pooled tokens, dense head.

use super::{dense, ModelError, ParamDef, ParamRefs, VitSpec};
use crate::tensor::{Graph, TensorId};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Slice a [1 x H x W] image into non-overlapping square patches, row-major
/// over patches and row-major within each patch: [num_patches x patch^2].
pub fn patchify(graph: &mut Graph, image: TensorId, patch: usize) -> Result<TensorId, ModelError> {
    let shape = graph.shape(image).to_vec();
    let (h, w) = (shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(ModelError::PatchIndivisible { side: h.max(w), patch });
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut map = Vec::with_capacity(h * w);
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..patch {
                for c in 0..patch {
                    map.push((pr * patch + r) * w + pc * patch + c);
                }
            }
        }
    }
    Ok(graph.gather(image, map, vec![ph * pw, patch * patch])?)
}

/// Inverse of [`patchify`]: reassemble patches into a [1 x side x side]
/// image. Exact (a pure permutation).
pub fn unpatchify(graph: &mut Graph, patches: TensorId, side: usize, patch: usize) -> Result<TensorId, ModelError> {
    let shape = graph.shape(patches).to_vec();
    let per_side = side / patch;
    if patch == 0 || side % patch != 0 || shape != [per_side * per_side, patch * patch] {
        return Err(ModelError::PatchIndivisible { side, patch });
    }
    let mut map = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let t = (r / patch) * per_side + c / patch;
            let j = (r % patch) * patch + c % patch;
            map.push(t * patch * patch + j);
        }
    }
    Ok(graph.gather(patches, map, vec![1, side, side])?)
}

/// patches . projection + positions (row-wise add).
pub fn patch_embed_and_position(
    graph: &mut Graph,
    patches: TensorId,
    projection: TensorId,
    positions: TensorId,
) -> Result<TensorId, ModelError> {
    let rows = graph.shape(positions)[0];
    let num_patches = graph.shape(patches)[0];
    if rows != num_patches {
        return Err(ModelError::PositionTableMismatch { rows, patches: num_patches });
    }
    let projected = graph.matmul(patches, projection)?;
    Ok(graph.add(projected, positions)?)
}

/// Per-head projection matrices: wq/wk/wv are [D x head_dim], wo is
/// [head_dim x D]. The head outputs are summed through their wo blocks,
/// which is the usual concat-then-project written per head.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub heads: Vec<HeadParams>,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
}

/// Pre-norm transformer block: x + MHSA(LN(x)), then + FFN(LN(.)).
/// Attention uses scaled dot products (1/sqrt(head_dim)); each returned
/// attention matrix is row-stochastic. Returns (output, per-head attention
/// weights).
pub fn attention_block(
    graph: &mut Graph,
    x: TensorId,
    params: &AttentionParams,
) -> Result<(TensorId, Vec<TensorId>), ModelError> {
    let normed = graph.layer_norm(x, params.ln1_gamma, params.ln1_beta, LAYER_NORM_EPS)?;

    let mut attn_weights = Vec::with_capacity(params.heads.len());
    let mut mhsa: Option<TensorId> = None;
    for head in &params.heads {
        let q = graph.matmul(normed, head.wq)?;
        let k = graph.matmul(normed, head.wk)?;
        let v = graph.matmul(normed, head.wv)?;
        let head_dim = graph.shape(q)[1];
        let kt = graph.transpose(k)?;
        let scores = graph.matmul(q, kt)?;
        let scaled = graph.mul_scalar(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = graph.softmax(scaled);
        attn_weights.push(attn);
        let ctx = graph.matmul(attn, v)?;
        let projected = graph.matmul(ctx, head.wo)?;
        mhsa = Some(match mhsa {
            None => projected,
            Some(acc) => graph.add(acc, projected)?,
        });
    }
    let mhsa = mhsa.expect("at least one head");
    let after_attn = graph.add(x, mhsa)?;

    let normed2 = graph.layer_norm(after_attn, params.ln2_gamma, params.ln2_beta, LAYER_NORM_EPS)?;
    let hidden = graph.matmul(normed2, params.ffn_w1)?;
    let hidden_cols = graph.shape(hidden)[1];
    let b1 = graph.reshape(params.ffn_b1, vec![1, hidden_cols])?;
    let hidden = graph.add(hidden, b1)?;
    let hidden = graph.relu(hidden);
    let out = graph.matmul(hidden, params.ffn_w2)?;
    let out_cols = graph.shape(out)[1];
    let b2 = graph.reshape(params.ffn_b2, vec![1, out_cols])?;
    let ffn = graph.add(out, b2)?;
    let block_out = graph.add(after_attn, ffn)?;
    Ok((block_out, attn_weights))
}

pub(super) fn num_patches(spec: &VitSpec) -> usize {
    (spec.input_side / spec.patch_size).pow(2)
}

pub(super) fn layout(spec: &VitSpec) -> Vec<ParamDef> {
    let d = spec.embed_dim;
    let patch_dim = spec.patch_size * spec.patch_size;
    let head_dim = d / spec.num_heads;
    let mut defs = vec![
        ParamDef::xavier("embed.proj".into(), vec![patch_dim, d], patch_dim, d),
        ParamDef::zeros("embed.pos".into(), vec![num_patches(spec), d]),
    ];
    for l in 0..spec.num_layers {
        defs.push(ParamDef::ones(format!("block{l}.ln1.gamma"), vec![d]));
        defs.push(ParamDef::zeros(format!("block{l}.ln1.beta"), vec![d]));
        for h in 0..spec.num_heads {
            for proj in ["wq", "wk", "wv"] {
                defs.push(ParamDef::xavier(format!("block{l}.attn.h{h}.{proj}"), vec![d, head_dim], d, head_dim));
            }
            defs.push(ParamDef::xavier(format!("block{l}.attn.h{h}.wo"), vec![head_dim, d], head_dim, d));
        }
        defs.push(ParamDef::ones(format!("block{l}.ln2.gamma"), vec![d]));
        defs.push(ParamDef::zeros(format!("block{l}.ln2.beta"), vec![d]));
        defs.push(ParamDef::xavier(format!("block{l}.ffn.w1"), vec![d, spec.mlp_dim], d, spec.mlp_dim));
        defs.push(ParamDef::zeros(format!("block{l}.ffn.b1"), vec![spec.mlp_dim]));
        defs.push(ParamDef::xavier(format!("block{l}.ffn.w2"), vec![spec.mlp_dim, d], spec.mlp_dim, d));
        defs.push(ParamDef::zeros(format!("block{l}.ffn.b2"), vec![d]));
    }
    defs.push(ParamDef::xavier("head.weight".into(), vec![d, spec.num_classes], d, spec.num_classes));
    defs.push(ParamDef::zeros("head.bias".into(), vec![spec.num_classes]));
    defs
}

pub(super) fn block_params(spec: &VitSpec, layer: usize, params: &ParamRefs) -> AttentionParams {
    AttentionParams {
        ln1_gamma: params.get(&format!("block{layer}.ln1.gamma")),
        ln1_beta: params.get(&format!("block{layer}.ln1.beta")),
        heads: (0..spec.num_heads)
            .map(|h| HeadParams {
                wq: params.get(&format!("block{layer}.attn.h{h}.wq")),
                wk: params.get(&format!("block{layer}.attn.h{h}.wk")),
                wv: params.get(&format!("block{layer}.attn.h{h}.wv")),
                wo: params.get(&format!("block{layer}.attn.h{h}.wo")),
            })
            .collect(),
        ln2_gamma: params.get(&format!("block{layer}.ln2.gamma")),
        ln2_beta: params.get(&format!("block{layer}.ln2.beta")),
        ffn_w1: params.get(&format!("block{layer}.ffn.w1")),
        ffn_b1: params.get(&format!("block{layer}.ffn.b1")),
        ffn_w2: params.get(&format!("block{layer}.ffn.w2")),
        ffn_b2: params.get(&format!("block{layer}.ffn.b2")),
    }
}

pub(super) fn forward_one(
    spec: &VitSpec,
    graph: &mut Graph,
    image: TensorId,
    params: &ParamRefs,
) -> Result<TensorId, ModelError> {
    let patches = patchify(graph, image, spec.patch_size)?;
    let mut tokens =
        patch_embed_and_position(graph, patches, params.get("embed.proj"), params.get("embed.pos"))?;
    for l in 0..spec.num_layers {
        let block = block_params(spec, l, params);
        let (out, _attn) = attention_block(graph, tokens, &block)?;
        tokens = out;
    }
    let pooled = graph.mean_rows(tokens)?;
    Ok(dense(graph, pooled, params.get("head.weight"), params.get("head.bias"))?)
}

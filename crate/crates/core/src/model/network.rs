//! Forward pass with recorded intermediates, and the matching reverse pass.

use super::layers::{
    attention, attention_backward, conv3x3, conv3x3_backward, gelu, gelu_backward, layer_norm,
    layer_norm_backward, linear, linear_backward, sigmoid, softplus, LayerNormCache,
};
use super::params::Params;
use super::ModelConfig;
use crate::resample::Resampler;

/// Added after softplus so every output pixel is strictly positive.
pub const DEPTH_FLOOR: f64 = 1e-3;

pub(crate) struct BlockTrace {
    ln1: LayerNormCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: LayerNormCache,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) struct EncoderTrace {
    patches: Vec<f64>,
    blocks: Vec<BlockTrace>,
    norm: LayerNormCache,
    /// Final normalized tokens `[tokens, dim]`.
    pub feat: Vec<f64>,
}

pub(crate) struct DecoderTrace {
    u1: Vec<f64>,
    c1: Vec<f64>,
    u2: Vec<f64>,
    c2: Vec<f64>,
    r2: Vec<f64>,
    raw: Vec<f64>,
    /// Output depth, row-major `[height, width]`.
    pub depth: Vec<f64>,
}

/// Rearranges an `[h, w, 3]` image into `[tokens, 3 * p * p]` patch rows.
fn patchify(pixels: &[f64], cfg: &ModelConfig) -> Vec<f64> {
    let p = cfg.patch_size;
    let (_, w) = cfg.input_size;
    let (gh, gw) = cfg.grid();
    let mut out = Vec::with_capacity(gh * gw * 3 * p * p);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                let y = gy * p + dy;
                let start = (y * w + gx * p) * 3;
                out.extend_from_slice(&pixels[start..start + 3 * p]);
            }
        }
    }
    out
}

pub(crate) fn encode(params: &Params, cfg: &ModelConfig, pixels: &[f64]) -> EncoderTrace {
    let d = cfg.embed_dim;
    let n = cfg.num_tokens();
    let m = cfg.mlp_hidden();
    let pdim = 3 * cfg.patch_size * cfg.patch_size;
    let patches = patchify(pixels, cfg);
    let mut t = linear(&patches, n, pdim, &params.patch_w.data, &params.patch_b.data, d);
    for (v, pe) in t.iter_mut().zip(&params.pos_embed.data) {
        *v += pe;
    }
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for bp in &params.blocks {
        let (a, ln1) = layer_norm(&t, d, &bp.ln1_g.data, &bp.ln1_b.data);
        let qkv = linear(&a, n, d, &bp.qkv_w.data, &bp.qkv_b.data, 3 * d);
        let (attn, probs) = attention(&qkv, n, d, cfg.n_heads);
        let y = linear(&attn, n, d, &bp.proj_w.data, &bp.proj_b.data, d);
        for (v, dv) in t.iter_mut().zip(&y) {
            *v += dv;
        }
        let (c, ln2) = layer_norm(&t, d, &bp.ln2_g.data, &bp.ln2_b.data);
        let u = linear(&c, n, d, &bp.fc1_w.data, &bp.fc1_b.data, m);
        let g = gelu(&u);
        let z = linear(&g, n, m, &bp.fc2_w.data, &bp.fc2_b.data, d);
        for (v, dv) in t.iter_mut().zip(&z) {
            *v += dv;
        }
        blocks.push(BlockTrace { ln1, a, qkv, probs, attn, ln2, c, u, g });
    }
    let (feat, norm) = layer_norm(&t, d, &params.norm_g.data, &params.norm_b.data);
    EncoderTrace { patches, blocks, norm, feat }
}

fn resamplers(cfg: &ModelConfig) -> (Resampler, Resampler) {
    let s1 = cfg.stage1_size();
    (Resampler::new(cfg.grid(), s1), Resampler::new(s1, cfg.input_size))
}

pub(crate) fn decode(params: &Params, cfg: &ModelConfig, feat: &[f64]) -> DecoderTrace {
    let d = cfg.embed_dim;
    let c = cfg.decoder_channels;
    let n = cfg.num_tokens();
    let (h, w) = cfg.input_size;
    let (s1h, s1w) = cfg.stage1_size();
    let (r1s, r2s) = resamplers(cfg);
    let p0 = linear(feat, n, d, &params.dec_proj_w.data, &params.dec_proj_b.data, c);
    let u1 = r1s.forward(&p0, c);
    let c1 = conv3x3(&u1, s1h, s1w, c, &params.dec1_w.data, &params.dec1_b.data, c);
    let r1 = gelu(&c1);
    let u2 = r2s.forward(&r1, c);
    let c2 = conv3x3(&u2, h, w, c, &params.dec2_w.data, &params.dec2_b.data, c);
    let r2 = gelu(&c2);
    let raw = linear(&r2, h * w, c, &params.head_w.data, &params.head_b.data, 1);
    let depth = raw.iter().map(|r| softplus(*r) + DEPTH_FLOOR).collect();
    DecoderTrace { u1, c1, u2, c2, r2, raw, depth }
}

/// Backpropagates `d_depth` through the decoder; returns the gradient with
/// respect to the encoder features.
pub(crate) fn decode_backward(
    params: &Params,
    cfg: &ModelConfig,
    feat: &[f64],
    tr: &DecoderTrace,
    d_depth: &[f64],
    grads: &mut Params,
) -> Vec<f64> {
    let d = cfg.embed_dim;
    let c = cfg.decoder_channels;
    let (h, w) = cfg.input_size;
    let (s1h, s1w) = cfg.stage1_size();
    let (r1s, r2s) = resamplers(cfg);
    let d_raw: Vec<f64> = d_depth.iter().zip(&tr.raw).map(|(g, r)| g * sigmoid(*r)).collect();
    let d_r2 = linear_backward(
        &tr.r2, c, &params.head_w.data, 1, &d_raw,
        &mut grads.head_w.data, &mut grads.head_b.data, true,
    )
    .expect("dx requested");
    let d_c2 = gelu_backward(&tr.c2, &d_r2);
    let d_u2 = conv3x3_backward(
        &tr.u2, h, w, c, &params.dec2_w.data, c, &d_c2,
        &mut grads.dec2_w.data, &mut grads.dec2_b.data,
    );
    let d_r1 = r2s.backward(&d_u2, c);
    let d_c1 = gelu_backward(&tr.c1, &d_r1);
    let d_u1 = conv3x3_backward(
        &tr.u1, s1h, s1w, c, &params.dec1_w.data, c, &d_c1,
        &mut grads.dec1_w.data, &mut grads.dec1_b.data,
    );
    let d_p0 = r1s.backward(&d_u1, c);
    linear_backward(
        feat, d, &params.dec_proj_w.data, c, &d_p0,
        &mut grads.dec_proj_w.data, &mut grads.dec_proj_b.data, true,
    )
    .expect("dx requested")
}

/// Backpropagates a feature gradient through the encoder.
pub(crate) fn encode_backward(
    params: &Params,
    cfg: &ModelConfig,
    tr: &EncoderTrace,
    d_feat: &[f64],
    grads: &mut Params,
) {
    let d = cfg.embed_dim;
    let m = cfg.mlp_hidden();
    let pdim = 3 * cfg.patch_size * cfg.patch_size;
    let mut dt = layer_norm_backward(
        &tr.norm, d, &params.norm_g.data, d_feat,
        &mut grads.norm_g.data, &mut grads.norm_b.data,
    );
    for ((bp, bt), bg) in params.blocks.iter().zip(&tr.blocks).zip(grads.blocks.iter_mut()).rev() {
        // mlp branch
        let d_g = linear_backward(
            &bt.g, m, &bp.fc2_w.data, d, &dt, &mut bg.fc2_w.data, &mut bg.fc2_b.data, true,
        )
        .expect("dx requested");
        let d_u = gelu_backward(&bt.u, &d_g);
        let d_c = linear_backward(
            &bt.c, d, &bp.fc1_w.data, m, &d_u, &mut bg.fc1_w.data, &mut bg.fc1_b.data, true,
        )
        .expect("dx requested");
        let d_t1 = layer_norm_backward(
            &bt.ln2, d, &bp.ln2_g.data, &d_c, &mut bg.ln2_g.data, &mut bg.ln2_b.data,
        );
        for (a, b) in dt.iter_mut().zip(&d_t1) {
            *a += b;
        }
        // attention branch
        let d_attn = linear_backward(
            &bt.attn, d, &bp.proj_w.data, d, &dt, &mut bg.proj_w.data, &mut bg.proj_b.data, true,
        )
        .expect("dx requested");
        let n = cfg.num_tokens();
        let d_qkv = attention_backward(&bt.qkv, &bt.probs, &d_attn, n, d, cfg.n_heads);
        let d_a = linear_backward(
            &bt.a, d, &bp.qkv_w.data, 3 * d, &d_qkv, &mut bg.qkv_w.data, &mut bg.qkv_b.data, true,
        )
        .expect("dx requested");
        let d_t0 = layer_norm_backward(
            &bt.ln1, d, &bp.ln1_g.data, &d_a, &mut bg.ln1_g.data, &mut bg.ln1_b.data,
        );
        for (a, b) in dt.iter_mut().zip(&d_t0) {
            *a += b;
        }
    }
    for (g, v) in grads.pos_embed.data.iter_mut().zip(&dt) {
        *g += v;
    }
    linear_backward(
        &tr.patches, pdim, &params.patch_w.data, d, &dt,
        &mut grads.patch_w.data, &mut grads.patch_b.data, false,
    );
}

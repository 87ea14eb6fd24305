use super::ops::{gelu, layer_norm, matmul_bias, softmax_in_place};
use super::{AttentionStack, ForwardOutput, InputSpec, Readout, TransformerParams};
use crate::error::{MimuError, Result};
use crate::real::Real;
use crate::synthdata::Features;

pub(super) struct LayerCache<F> {
    pub ln1_xhat: Vec<F>,
    pub ln1_rstd: Vec<F>,
    pub h1: Vec<F>,
    pub qkv: Vec<F>,
    /// `[head][query][key]`
    pub attn: Vec<F>,
    pub ctx: Vec<F>,
    pub ln2_xhat: Vec<F>,
    pub ln2_rstd: Vec<F>,
    pub h2: Vec<F>,
    pub ff_pre: Vec<F>,
    pub ff_act: Vec<F>,
}

pub(super) enum EmbedInput<F> {
    Tokens(Vec<usize>),
    /// `patches x patch_dim`
    Patches(Vec<F>),
}

/// Everything the backward pass needs for one example.
pub struct ForwardCache<F> {
    pub(super) input: EmbedInput<F>,
    pub(super) layers: Vec<LayerCache<F>>,
    pub(super) lnf_xhat: Vec<F>,
    pub(super) lnf_rstd: Vec<F>,
    pub(super) pooled: Vec<F>,
    pub logits: Vec<F>,
    pub probs: Vec<F>,
}

impl<F: Real> ForwardCache<F> {
    pub fn attention(&self, num_heads: usize, seq_len: usize) -> AttentionStack<F> {
        let mut data = Vec::with_capacity(self.layers.len() * num_heads * seq_len * seq_len);
        for l in &self.layers {
            data.extend_from_slice(&l.attn);
        }
        AttentionStack {
            num_layers: self.layers.len(),
            num_heads,
            seq_len,
            data,
        }
    }
}

fn embed_input<F: Real>(
    params: &TransformerParams<F>,
    features: &Features,
) -> Result<EmbedInput<F>> {
    let cfg = &params.config;
    match (cfg.input, features) {
        (InputSpec::Tokens { vocab_size }, Features::Tokens(tokens)) => {
            if tokens.len() != cfg.seq_len {
                return Err(MimuError::shape("token sequence", cfg.seq_len, tokens.len()));
            }
            if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(MimuError::InvalidInput(format!(
                    "token id {bad} outside vocabulary of {vocab_size}"
                )));
            }
            Ok(EmbedInput::Tokens(tokens.iter().map(|&t| t as usize).collect()))
        }
        (
            InputSpec::Patches {
                height,
                width,
                channels,
                patch,
            },
            Features::Image(px),
        ) => {
            let expected = height * width * channels;
            if px.len() != expected {
                return Err(MimuError::shape("image", expected, px.len()));
            }
            let gw = width / patch;
            let gh = height / patch;
            let pd = patch * patch * channels;
            let mut out = vec![F::zero(); gh * gw * pd];
            let scale = 1.0 / 127.5;
            for gy in 0..gh {
                for gx in 0..gw {
                    let base = (gy * gw + gx) * pd;
                    let mut o = 0;
                    for py in 0..patch {
                        let row = (gy * patch + py) * width + gx * patch;
                        for v in &px[row * channels..(row + patch) * channels] {
                            out[base + o] = F::c(*v as f64 * scale - 1.0);
                            o += 1;
                        }
                    }
                }
            }
            Ok(EmbedInput::Patches(out))
        }
        (InputSpec::Tokens { .. }, Features::Image(_)) => Err(MimuError::shape(
            "model input",
            "token sequence",
            "image",
        )),
        (InputSpec::Patches { .. }, Features::Tokens(_)) => Err(MimuError::shape(
            "model input",
            "image",
            "token sequence",
        )),
    }
}

/// Full forward pass of one example, keeping every intermediate.
pub fn forward_cached<F: Real>(
    params: &TransformerParams<F>,
    features: &Features,
) -> Result<ForwardCache<F>> {
    let cfg = &params.config;
    let l = cfg.seq_len;
    let d = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let nh = cfg.num_heads;
    let dh = cfg.head_dim();
    let k = cfg.num_classes;

    let input = embed_input(params, features)?;
    let mut x = vec![F::zero(); l * d];
    match &input {
        EmbedInput::Tokens(ids) => {
            for (i, &t) in ids.iter().enumerate() {
                let e = &params.embed_weight.data[t * d..(t + 1) * d];
                for c in 0..d {
                    x[i * d + c] = e[c] + params.embed_bias.data[c];
                }
            }
        }
        EmbedInput::Patches(p) => {
            let pd = cfg.input.embed_rows();
            x[..d].copy_from_slice(&params.class_token.data);
            matmul_bias(
                p,
                &params.embed_weight.data,
                &params.embed_bias.data,
                l - 1,
                pd,
                d,
                &mut x[d..],
            );
        }
    }
    for (xv, &pv) in x.iter_mut().zip(&params.pos_embed.data) {
        *xv += pv;
    }

    let scale = F::c(1.0 / (dh as f64).sqrt());
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lp in &params.layers {
        let x_in = x;
        let mut h1 = vec![F::zero(); l * d];
        let (ln1_xhat, ln1_rstd) =
            layer_norm(&x_in, &lp.ln1_gain.data, &lp.ln1_bias.data, l, d, &mut h1);
        let mut qkv = vec![F::zero(); l * 3 * d];
        matmul_bias(&h1, &lp.qkv_weight.data, &lp.qkv_bias.data, l, d, 3 * d, &mut qkv);

        let mut attn = vec![F::zero(); nh * l * l];
        let mut ctx = vec![F::zero(); l * d];
        for h in 0..nh {
            let a = &mut attn[h * l * l..(h + 1) * l * l];
            for i in 0..l {
                let q = &qkv[i * 3 * d + h * dh..i * 3 * d + (h + 1) * dh];
                let row = &mut a[i * l..(i + 1) * l];
                for (j, s) in row.iter_mut().enumerate() {
                    let kv = &qkv[j * 3 * d + d + h * dh..j * 3 * d + d + (h + 1) * dh];
                    let mut dot = F::zero();
                    for (&qa, &kb) in q.iter().zip(kv) {
                        dot += qa * kb;
                    }
                    *s = dot * scale;
                }
                softmax_in_place(row);
                let out = &mut ctx[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &w) in row.iter().enumerate() {
                    let v = &qkv[j * 3 * d + 2 * d + h * dh..j * 3 * d + 2 * d + (h + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += w * vv;
                    }
                }
            }
        }

        let mut x_mid = vec![F::zero(); l * d];
        matmul_bias(&ctx, &lp.out_weight.data, &lp.out_bias.data, l, d, d, &mut x_mid);
        for (m, &xi) in x_mid.iter_mut().zip(&x_in) {
            *m += xi;
        }

        let mut h2 = vec![F::zero(); l * d];
        let (ln2_xhat, ln2_rstd) =
            layer_norm(&x_mid, &lp.ln2_gain.data, &lp.ln2_bias.data, l, d, &mut h2);
        let mut ff_pre = vec![F::zero(); l * f];
        matmul_bias(&h2, &lp.ff1_weight.data, &lp.ff1_bias.data, l, d, f, &mut ff_pre);
        let ff_act: Vec<F> = ff_pre.iter().map(|&u| gelu(u)).collect();
        let mut x_out = vec![F::zero(); l * d];
        matmul_bias(&ff_act, &lp.ff2_weight.data, &lp.ff2_bias.data, l, f, d, &mut x_out);
        for (o, &m) in x_out.iter_mut().zip(&x_mid) {
            *o += m;
        }

        layers.push(LayerCache {
            ln1_xhat,
            ln1_rstd,
            h1,
            qkv,
            attn,
            ctx,
            ln2_xhat,
            ln2_rstd,
            h2,
            ff_pre,
            ff_act,
        });
        x = x_out;
    }

    let mut final_hidden = vec![F::zero(); l * d];
    let (lnf_xhat, lnf_rstd) =
        layer_norm(&x, &params.lnf_gain.data, &params.lnf_bias.data, l, d, &mut final_hidden);
    let pooled: Vec<F> = match cfg.readout {
        Readout::ClassToken => final_hidden[..d].to_vec(),
        Readout::MeanPool => {
            let inv = F::c(1.0 / l as f64);
            (0..d)
                .map(|c| (0..l).map(|i| final_hidden[i * d + c]).sum::<F>() * inv)
                .collect()
        }
    };
    let mut logits = vec![F::zero(); k];
    matmul_bias(
        &pooled,
        &params.head_weight.data,
        &params.head_bias.data,
        1,
        d,
        k,
        &mut logits,
    );
    let mut probs = logits.clone();
    softmax_in_place(&mut probs);

    Ok(ForwardCache {
        input,
        layers,
        lnf_xhat,
        lnf_rstd,
        pooled,
        logits,
        probs,
    })
}

/// Batched forward. With `capture`, the full attention stack of every
/// example is returned.
pub fn forward<F: Real>(
    params: &TransformerParams<F>,
    batch: &[&Features],
    capture: bool,
) -> Result<ForwardOutput<F>> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut probs = Vec::with_capacity(batch.len());
    let mut attention = capture.then(|| Vec::with_capacity(batch.len()));
    for features in batch {
        let cache = forward_cached(params, features)?;
        if let Some(att) = attention.as_mut() {
            att.push(cache.attention(params.config.num_heads, params.config.seq_len));
        }
        logits.push(cache.logits);
        probs.push(cache.probs);
    }
    Ok(ForwardOutput {
        logits,
        probs,
        attention,
    })
}

use super::forward::{EmbedInput, ForwardCache};
use super::ops::{gelu_grad, layer_norm_backward, matmul_bias_backward};
use super::{record_gradient, Readout, TransformerParams};
use crate::error::{MimuError, Result};
use crate::real::Real;

/// Upstream gradient on a reduced attention vector.
#[derive(Clone, Copy, Debug)]
pub enum AttentionGrad<'a, F> {
    None,
    /// Gradient w.r.t. the mean over all layers, heads and query rows.
    AllLayers(&'a [F]),
    /// Gradient w.r.t. the last-layer mean over heads and query rows.
    LastLayer(&'a [F]),
}

/// Accumulates parameter gradients of one example into `grads`.
///
/// `dlogits` is the loss gradient w.r.t. the logits; `attn_grad` adds a
/// gradient that enters directly at the attention probabilities.
pub fn backward<F: Real>(
    params: &TransformerParams<F>,
    cache: &ForwardCache<F>,
    dlogits: &[F],
    attn_grad: AttentionGrad<'_, F>,
    grads: &mut TransformerParams<F>,
) -> Result<()> {
    let cfg = &params.config;
    if grads.config != *cfg {
        return Err(MimuError::shape("gradient buffer", "matching config", "other config"));
    }
    let l = cfg.seq_len;
    let d = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let nh = cfg.num_heads;
    let dh = cfg.head_dim();
    let k = cfg.num_classes;
    let nl = cfg.num_layers;
    if dlogits.len() != k {
        return Err(MimuError::shape("dlogits", k, dlogits.len()));
    }
    let ext = match attn_grad {
        AttentionGrad::None => None,
        AttentionGrad::AllLayers(g) | AttentionGrad::LastLayer(g) => {
            if g.len() != l {
                return Err(MimuError::shape("attention gradient", l, g.len()));
            }
            Some(g)
        }
    };
    record_gradient(params.id());

    // classifier head
    let mut dpooled = vec![F::zero(); d];
    matmul_bias_backward(
        &cache.pooled,
        &params.head_weight.data,
        dlogits,
        1,
        d,
        k,
        &mut grads.head_weight.data,
        &mut grads.head_bias.data,
        Some(&mut dpooled),
    );

    let mut dfinal = vec![F::zero(); l * d];
    match cfg.readout {
        Readout::ClassToken => dfinal[..d].copy_from_slice(&dpooled),
        Readout::MeanPool => {
            let inv = F::c(1.0 / l as f64);
            for i in 0..l {
                for c in 0..d {
                    dfinal[i * d + c] = dpooled[c] * inv;
                }
            }
        }
    }

    let mut dx = vec![F::zero(); l * d];
    layer_norm_backward(
        &dfinal,
        &cache.lnf_xhat,
        &cache.lnf_rstd,
        &params.lnf_gain.data,
        l,
        d,
        &mut grads.lnf_gain.data,
        &mut grads.lnf_bias.data,
        &mut dx,
    );

    let scale = F::c(1.0 / (dh as f64).sqrt());
    let mut tmp_ld = vec![F::zero(); l * d];
    for li in (0..nl).rev() {
        let lp = &params.layers[li];
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // feed-forward branch: x_out = x_mid + ff2(gelu(ff1(ln2(x_mid))))
        let mut dff_act = vec![F::zero(); l * f];
        matmul_bias_backward(
            &lc.ff_act,
            &lp.ff2_weight.data,
            &dx,
            l,
            f,
            d,
            &mut lg.ff2_weight.data,
            &mut lg.ff2_bias.data,
            Some(&mut dff_act),
        );
        for (g, &u) in dff_act.iter_mut().zip(&lc.ff_pre) {
            *g *= gelu_grad(u);
        }
        let mut dh2 = vec![F::zero(); l * d];
        matmul_bias_backward(
            &lc.h2,
            &lp.ff1_weight.data,
            &dff_act,
            l,
            d,
            f,
            &mut lg.ff1_weight.data,
            &mut lg.ff1_bias.data,
            Some(&mut dh2),
        );
        layer_norm_backward(
            &dh2,
            &lc.ln2_xhat,
            &lc.ln2_rstd,
            &lp.ln2_gain.data,
            l,
            d,
            &mut lg.ln2_gain.data,
            &mut lg.ln2_bias.data,
            &mut tmp_ld,
        );
        // dx now holds d x_mid
        for (a, &b) in dx.iter_mut().zip(&tmp_ld) {
            *a += b;
        }

        // attention branch: x_mid = x_in + out(attn(qkv(ln1(x_in))))
        let mut dctx = vec![F::zero(); l * d];
        matmul_bias_backward(
            &lc.ctx,
            &lp.out_weight.data,
            &dx,
            l,
            d,
            d,
            &mut lg.out_weight.data,
            &mut lg.out_bias.data,
            Some(&mut dctx),
        );

        let ext_scale = match attn_grad {
            AttentionGrad::AllLayers(_) => Some(F::c(1.0 / (nl * nh * l) as f64)),
            AttentionGrad::LastLayer(_) if li == nl - 1 => Some(F::c(1.0 / (nh * l) as f64)),
            _ => None,
        };

        let qkv = &lc.qkv;
        let mut dqkv = vec![F::zero(); l * 3 * d];
        let mut da = vec![F::zero(); l];
        for h in 0..nh {
            let a = &lc.attn[h * l * l..(h + 1) * l * l];
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            for i in 0..l {
                let arow = &a[i * l..(i + 1) * l];
                let dc = &dctx[i * d + qo..i * d + qo + dh];
                for j in 0..l {
                    let v = &qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                    let mut s = F::zero();
                    for (&g, &vv) in dc.iter().zip(v) {
                        s += g * vv;
                    }
                    if let (Some(es), Some(g)) = (ext_scale, ext) {
                        s += g[j] * es;
                    }
                    da[j] = s;
                    // dv_j += A_ij * dctx_i
                    let w = arow[j];
                    let dv = &mut dqkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                    for (acc, &g) in dv.iter_mut().zip(dc) {
                        *acc += w * g;
                    }
                }
                let dot: F = arow.iter().zip(&da).map(|(&p, &g)| p * g).sum();
                let q = &qkv[i * 3 * d + qo..i * 3 * d + qo + dh];
                for j in 0..l {
                    let ds = arow[j] * (da[j] - dot) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    let kj = j * 3 * d + ko;
                    for c in 0..dh {
                        let kv = qkv[kj + c];
                        dqkv[i * 3 * d + qo + c] += ds * kv;
                        dqkv[kj + c] += ds * q[c];
                    }
                }
            }
        }

        let mut dh1 = vec![F::zero(); l * d];
        matmul_bias_backward(
            &lc.h1,
            &lp.qkv_weight.data,
            &dqkv,
            l,
            d,
            3 * d,
            &mut lg.qkv_weight.data,
            &mut lg.qkv_bias.data,
            Some(&mut dh1),
        );
        layer_norm_backward(
            &dh1,
            &lc.ln1_xhat,
            &lc.ln1_rstd,
            &lp.ln1_gain.data,
            l,
            d,
            &mut lg.ln1_gain.data,
            &mut lg.ln1_bias.data,
            &mut tmp_ld,
        );
        for (a, &b) in dx.iter_mut().zip(&tmp_ld) {
            *a += b;
        }
    }

    for (g, &v) in grads.pos_embed.data.iter_mut().zip(&dx) {
        *g += v;
    }
    match &cache.input {
        EmbedInput::Tokens(ids) => {
            for (i, &t) in ids.iter().enumerate() {
                let row = &mut grads.embed_weight.data[t * d..(t + 1) * d];
                for c in 0..d {
                    row[c] += dx[i * d + c];
                }
                for c in 0..d {
                    grads.embed_bias.data[c] += dx[i * d + c];
                }
            }
        }
        EmbedInput::Patches(p) => {
            for c in 0..d {
                grads.class_token.data[c] += dx[c];
            }
            let pd = cfg.input.embed_rows();
            matmul_bias_backward(
                p,
                &params.embed_weight.data,
                &dx[d..],
                l - 1,
                pd,
                d,
                &mut grads.embed_weight.data,
                &mut grads.embed_bias.data,
                None,
            );
        }
    }
    Ok(())
}

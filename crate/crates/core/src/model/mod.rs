//! Small pre-norm transformer encoder classifier with full attention capture.
//!
//! The same architecture serves as ERM baseline, source and target model.
//! Everything is written out by hand, forward and backward, so that
//! gradients can be injected directly on the averaged attention vectors.

mod backward;
mod checkpoint;
mod forward;
mod ops;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MimuError, Result};
use crate::real::Real;
use crate::synthdata::InputShape;

pub use backward::{backward, AttentionGrad};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use forward::{forward, forward_cached, ForwardCache};
pub use ops::softmax;

/// How the attention matrices are reduced to per-position vectors; recorded
/// in checkpoints so runs are comparable.
pub const ATTENTION_REDUCTION: &str = "mean over heads, then query rows, then layers";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum InputSpec {
    Tokens {
        vocab_size: usize,
    },
    Patches {
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
    },
}

impl InputSpec {
    pub fn from_shape(shape: &InputShape) -> Self {
        match *shape {
            InputShape::Image {
                height,
                width,
                channels,
                patch,
            } => InputSpec::Patches {
                height,
                width,
                channels,
                patch,
            },
            InputShape::Tokens { vocab_size, .. } => InputSpec::Tokens { vocab_size },
        }
    }

    /// Rows of the input embedding matrix.
    pub fn embed_rows(&self) -> usize {
        match *self {
            InputSpec::Tokens { vocab_size } => vocab_size,
            InputSpec::Patches {
                channels, patch, ..
            } => patch * patch * channels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Final hidden state at position 0 (class token).
    ClassToken,
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    /// Tokens, or patches plus one class token.
    pub seq_len: usize,
    pub input: InputSpec,
    pub num_classes: usize,
    pub readout: Readout,
}

/// Architecture knobs that do not depend on the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 32,
            ffn_dim: 64,
        }
    }
}

impl TransformerConfig {
    pub fn for_input(shape: &InputShape, num_classes: usize, settings: &ModelSettings) -> Self {
        let readout = match shape {
            InputShape::Image { .. } => Readout::ClassToken,
            InputShape::Tokens { .. } => Readout::MeanPool,
        };
        let seq_len = shape.seq_len();
        TransformerConfig {
            num_layers: settings.num_layers,
            num_heads: settings.num_heads,
            hidden_dim: settings.hidden_dim,
            ffn_dim: settings.ffn_dim,
            seq_len,
            input: InputSpec::from_shape(shape),
            num_classes,
            readout,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.num_layers", self.num_layers),
            ("model.num_heads", self.num_heads),
            ("model.hidden_dim", self.hidden_dim),
            ("model.ffn_dim", self.ffn_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(MimuError::config(key, "must be positive"));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(MimuError::config(
                "model.hidden_dim",
                format!("{} is not divisible by {} heads", self.hidden_dim, self.num_heads),
            ));
        }
        if self.seq_len < 2 {
            return Err(MimuError::config("model.seq_len", "must be at least 2"));
        }
        if self.num_classes < 2 {
            return Err(MimuError::config("model.num_classes", "must be at least 2"));
        }
        if let InputSpec::Patches {
            height,
            width,
            patch,
            ..
        } = self.input
        {
            if patch == 0 || height % patch != 0 || width % patch != 0 {
                return Err(MimuError::config("model.patch", "image not divisible into patches"));
            }
            if (height / patch) * (width / patch) + 1 != self.seq_len {
                return Err(MimuError::config("model.seq_len", "must equal patches + 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    fn filled(shape: &[usize], v: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    fn uniform(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let a = std * 3f64.sqrt();
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| F::c(rng.gen_range(-a..=a))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    /// `hidden x 3*hidden`, columns ordered q | k | v, heads contiguous.
    pub qkv_weight: Tensor<F>,
    pub qkv_bias: Tensor<F>,
    pub out_weight: Tensor<F>,
    pub out_bias: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub ff1_weight: Tensor<F>,
    pub ff1_bias: Tensor<F>,
    pub ff2_weight: Tensor<F>,
    pub ff2_bias: Tensor<F>,
}

static NEXT_PARAMS_ID: AtomicU64 = AtomicU64::new(1);
static GRAD_LOG: Mutex<BTreeMap<u64, usize>> = Mutex::new(BTreeMap::new());

fn fresh_id() -> u64 {
    NEXT_PARAMS_ID.fetch_add(1, Ordering::Relaxed)
}

/// Number of backward passes that produced gradients for the parameter set
/// with this id.
pub fn gradient_materializations(id: u64) -> usize {
    GRAD_LOG.lock().expect("grad log").get(&id).copied().unwrap_or(0)
}

fn record_gradient(id: u64) {
    *GRAD_LOG.lock().expect("grad log").entry(id).or_insert(0) += 1;
}

/// Weights of one encoder. Every instance (including clones) carries a
/// process-unique id used by gradient instrumentation.
#[derive(Debug)]
pub struct TransformerParams<F> {
    id: u64,
    pub config: TransformerConfig,
    pub embed_weight: Tensor<F>,
    pub embed_bias: Tensor<F>,
    /// Empty for token inputs.
    pub class_token: Tensor<F>,
    pub pos_embed: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_gain: Tensor<F>,
    pub lnf_bias: Tensor<F>,
    pub head_weight: Tensor<F>,
    pub head_bias: Tensor<F>,
}

impl<F: Clone> Clone for TransformerParams<F> {
    fn clone(&self) -> Self {
        TransformerParams {
            id: fresh_id(),
            config: self.config.clone(),
            embed_weight: self.embed_weight.clone(),
            embed_bias: self.embed_bias.clone(),
            class_token: self.class_token.clone(),
            pos_embed: self.pos_embed.clone(),
            layers: self.layers.clone(),
            lnf_gain: self.lnf_gain.clone(),
            lnf_bias: self.lnf_bias.clone(),
            head_weight: self.head_weight.clone(),
            head_bias: self.head_bias.clone(),
        }
    }
}

impl<F: PartialEq> PartialEq for TransformerParams<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embed_weight == other.embed_weight
            && self.embed_bias == other.embed_bias
            && self.class_token == other.class_token
            && self.pos_embed == other.pos_embed
            && self.layers == other.layers
            && self.lnf_gain == other.lnf_gain
            && self.lnf_bias == other.lnf_bias
            && self.head_weight == other.head_weight
            && self.head_bias == other.head_bias
    }
}

impl<F: Real> TransformerParams<F> {
    /// Parameters with every tensor zero (gains included); used for
    /// gradient accumulators.
    pub fn zeros(config: &TransformerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let layer = || LayerParams {
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            qkv_weight: Tensor::zeros(&[d, 3 * d]),
            qkv_bias: Tensor::zeros(&[3 * d]),
            out_weight: Tensor::zeros(&[d, d]),
            out_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            ff1_weight: Tensor::zeros(&[d, f]),
            ff1_bias: Tensor::zeros(&[f]),
            ff2_weight: Tensor::zeros(&[f, d]),
            ff2_bias: Tensor::zeros(&[d]),
        };
        let cls = match config.input {
            InputSpec::Patches { .. } => d,
            InputSpec::Tokens { .. } => 0,
        };
        Ok(TransformerParams {
            id: fresh_id(),
            config: config.clone(),
            embed_weight: Tensor::zeros(&[config.input.embed_rows(), d]),
            embed_bias: Tensor::zeros(&[d]),
            class_token: Tensor::zeros(&[cls]),
            pos_embed: Tensor::zeros(&[config.seq_len, d]),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            lnf_gain: Tensor::zeros(&[d]),
            lnf_bias: Tensor::zeros(&[d]),
            head_weight: Tensor::zeros(&[d, config.num_classes]),
            head_bias: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// Random initialisation: fan-in scaled uniform weights, zero biases,
    /// unit layer-norm gains.
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7A11);
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let rows = config.input.embed_rows();
        let embed_std = match config.input {
            InputSpec::Tokens { .. } => 1.0,
            InputSpec::Patches { .. } => 1.0 / (rows as f64).sqrt(),
        };
        p.embed_weight = Tensor::uniform(&[rows, d], embed_std, &mut rng);
        if !p.class_token.is_empty() {
            p.class_token = Tensor::uniform(&[d], 0.5, &mut rng);
        }
        p.pos_embed = Tensor::uniform(&[config.seq_len, d], 0.5, &mut rng);
        let wd = 1.0 / (d as f64).sqrt();
        let wf = 1.0 / (f as f64).sqrt();
        for layer in &mut p.layers {
            layer.ln1_gain = Tensor::filled(&[d], F::one());
            layer.ln2_gain = Tensor::filled(&[d], F::one());
            layer.qkv_weight = Tensor::uniform(&[d, 3 * d], wd, &mut rng);
            layer.out_weight = Tensor::uniform(&[d, d], wd, &mut rng);
            layer.ff1_weight = Tensor::uniform(&[d, f], wd, &mut rng);
            layer.ff2_weight = Tensor::uniform(&[f, d], wf, &mut rng);
        }
        p.lnf_gain = Tensor::filled(&[d], F::one());
        p.head_weight = Tensor::uniform(&[d, config.num_classes], 0.1 * wd, &mut rng);
        Ok(p)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Tensors in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("embed.weight".to_string(), &self.embed_weight),
            ("embed.bias".to_string(), &self.embed_bias),
        ];
        if !self.class_token.is_empty() {
            out.push(("class_token".to_string(), &self.class_token));
        }
        out.push(("pos_embed".to_string(), &self.pos_embed));
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1.gain", &l.ln1_gain),
                ("ln1.bias", &l.ln1_bias),
                ("qkv.weight", &l.qkv_weight),
                ("qkv.bias", &l.qkv_bias),
                ("out.weight", &l.out_weight),
                ("out.bias", &l.out_bias),
                ("ln2.gain", &l.ln2_gain),
                ("ln2.bias", &l.ln2_bias),
                ("ff1.weight", &l.ff1_weight),
                ("ff1.bias", &l.ff1_bias),
                ("ff2.weight", &l.ff2_weight),
                ("ff2.bias", &l.ff2_bias),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_ln.gain".to_string(), &self.lnf_gain));
        out.push(("final_ln.bias".to_string(), &self.lnf_bias));
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    /// Mutable tensors in the same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.embed_weight, &mut self.embed_bias];
        if !self.class_token.is_empty() {
            out.push(&mut self.class_token);
        }
        out.push(&mut self.pos_embed);
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.qkv_weight,
                &mut l.qkv_bias,
                &mut l.out_weight,
                &mut l.out_bias,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.ff1_weight,
                &mut l.ff1_bias,
                &mut l.ff2_weight,
                &mut l.ff2_bias,
            ]);
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Element-wise conversion to another precision.
    pub fn cast<G: Real>(&self) -> TransformerParams<G> {
        let conv = |t: &Tensor<F>| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| G::c(v.as_f64())).collect(),
        };
        let mut out = TransformerParams::<G>::zeros(&self.config).expect("validated config");
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.named()) {
            *dst = conv(src);
        }
        out
    }
}

/// Read-only handle to a trained model.
#[derive(Clone, Debug)]
pub struct FrozenParams<F>(Arc<TransformerParams<F>>);

impl<F> FrozenParams<F> {
    pub fn freeze(params: TransformerParams<F>) -> Self {
        FrozenParams(Arc::new(params))
    }

    pub fn params(&self) -> &TransformerParams<F> {
        &self.0
    }

    /// Always fails: frozen parameters reject updates.
    pub fn params_mut(&mut self) -> Result<&mut TransformerParams<F>> {
        Err(MimuError::Frozen)
    }
}

impl<F> std::ops::Deref for FrozenParams<F> {
    type Target = TransformerParams<F>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

/// Attention matrices of one example, laid out `[layer][head][query][key]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack<F> {
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub data: Vec<F>,
}

impl<F: Real> AttentionStack<F> {
    pub fn matrix(&self, layer: usize, head: usize) -> &[F] {
        let ll = self.seq_len * self.seq_len;
        let start = (layer * self.num_heads + head) * ll;
        &self.data[start..start + ll]
    }

    /// Mean over heads then query rows of one layer.
    pub fn layer_vector(&self, layer: usize) -> AttentionVector<F> {
        let l = self.seq_len;
        let mut v = vec![F::zero(); l];
        for h in 0..self.num_heads {
            let m = self.matrix(layer, h);
            for row in m.chunks_exact(l) {
                for (acc, &a) in v.iter_mut().zip(row) {
                    *acc += a;
                }
            }
        }
        let scale = F::c(1.0 / (self.num_heads * l) as f64);
        v.iter_mut().for_each(|x| *x *= scale);
        AttentionVector(v)
    }

    /// Last-layer vector (source model reduction).
    pub fn source_vector(&self) -> AttentionVector<F> {
        self.layer_vector(self.num_layers - 1)
    }

    /// Mean of every layer's vector (target model reduction).
    pub fn target_vector(&self) -> AttentionVector<F> {
        let l = self.seq_len;
        let mut v = vec![F::zero(); l];
        for layer in 0..self.num_layers {
            for (acc, x) in v.iter_mut().zip(self.layer_vector(layer).0) {
                *acc += x;
            }
        }
        let scale = F::c(1.0 / self.num_layers as f64);
        v.iter_mut().for_each(|x| *x *= scale);
        AttentionVector(v)
    }
}

/// One non-negative weight per key position, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVector<F>(pub Vec<F>);

impl<F> AttentionVector<F> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[F] {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    pub logits: Vec<Vec<F>>,
    pub probs: Vec<Vec<F>>,
    pub attention: Option<Vec<AttentionStack<F>>>,
}

/// Last-layer attention vector `a_s` for every example in the batch.
pub fn source_attention_vector<F: Real>(out: &ForwardOutput<F>) -> Result<Vec<AttentionVector<F>>> {
    let att = out.attention.as_ref().ok_or(MimuError::AttentionNotCaptured)?;
    Ok(att.iter().map(|a| a.source_vector()).collect())
}

/// All-layer attention vector `a_t` for every example in the batch.
pub fn target_attention_vector<F: Real>(out: &ForwardOutput<F>) -> Result<Vec<AttentionVector<F>>> {
    let att = out.attention.as_ref().ok_or(MimuError::AttentionNotCaptured)?;
    Ok(att.iter().map(|a| a.target_vector()).collect())
}

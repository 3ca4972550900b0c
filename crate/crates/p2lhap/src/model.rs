//! The channel-independent transformer.
//!
//! Each of the M sensor channels of a sequence is its own token stream:
//! patches of one channel attend only to patches of the same channel, and
//! all channels share the embedding and transformer weights. The encoder is
//! a stack of {self-attention, residual, batchnorm, feed-forward, residual,
//! batchnorm} blocks; the decoder cross-attends encoder output (queries)
//! against linear projections of the raw patches (keys/values) with a
//! temperature-scaled softmax. Heads: per-patch classification over the
//! channel-concatenated representation, future-label forecasting from the
//! fill patch, and an optional future-signal regression head.
//!
//! All weights use the row-vector convention (`y = x @ W`), so a projection
//! from `a` to `b` dimensions is stored as an `a x b` matrix.

use serde::{Deserialize, Serialize};

use crate::data::PatchBatch;
use crate::numerics::{
    tensor::Scalar, NumericsError, SplitMix64, Tape, Tensor, Var,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("non-finite values in encoder layer {layer}")]
    NonFiniteLayer { layer: usize },

    #[error("non-finite values in {stage}")]
    NonFiniteStage { stage: &'static str },

    #[error("forecasting requires horizon >= 1 (configure label-forecast mode with T_p patches)")]
    NoHorizon,

    #[error("model was trained in {expected:?} mode, requested {requested:?}")]
    ModeMismatch { expected: TaskMode, requested: TaskMode },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint io on {path}: {source}")]
    CheckpointIo { path: String, source: std::io::Error },

    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which forecasting head the model trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    /// Patch-label classification plus future-label forecasting.
    LabelForecast,
    /// Future raw-signal regression (no classification losses).
    SignalForecast,
}

impl TaskMode {
    fn to_u8(self) -> u8 {
        match self {
            TaskMode::LabelForecast => 0,
            TaskMode::SignalForecast => 1,
        }
    }

    fn from_u8(v: u8) -> Result<Self, ModelError> {
        match v {
            0 => Ok(TaskMode::LabelForecast),
            1 => Ok(TaskMode::SignalForecast),
            other => Err(ModelError::Checkpoint(format!("unknown mode byte {other}"))),
        }
    }
}

/// Architecture and task shape. `d_k` is `latent_dim / heads`; the patch
/// count N follows from (window, patch_len, stride).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub classes: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub window: usize,
    /// Future patches to forecast (T_p). Zero disables forecasting.
    pub horizon: usize,
    pub decoder_temp: f32,
    pub dropout: f64,
    pub mode: TaskMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            heads: 8,
            n_layers: 3,
            ffn_dim: 256,
            classes: 4,
            channels: 3,
            patch_len: 10,
            stride: 10,
            window: 200,
            horizon: 8,
            decoder_temp: 1.0,
            dropout: 0.1,
            mode: TaskMode::LabelForecast,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.latent_dim / self.heads
    }

    /// Patch count per window, including the trailing fill patch.
    pub fn n_patches(&self) -> usize {
        crate::data::patch_count(self.window, self.patch_len, self.stride)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.latent_dim == 0 || self.heads == 0 || self.latent_dim % self.heads != 0 {
            return fail(format!(
                "latent_dim {} must be a positive multiple of heads {}",
                self.latent_dim, self.heads
            ));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 {
            return fail("n_layers and ffn_dim must be >= 1".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.channels == 0 {
            return fail("need at least 1 channel".into());
        }
        if self.patch_len == 0 || self.stride == 0 || self.patch_len > self.window {
            return fail(format!(
                "patching requires 1 <= patch_len <= window and stride >= 1 (P={}, S={}, window={})",
                self.patch_len, self.stride, self.window
            ));
        }
        if self.decoder_temp <= 0.0 {
            return fail(format!("decoder_temp must be > 0, got {}", self.decoder_temp));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

// ── parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T: Scalar> {
    /// (D, d_k)
    pub w_q: Tensor<T>,
    /// (D, d_k)
    pub w_k: Tensor<T>,
    /// (D, D)
    pub w_v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar> {
    pub heads: Vec<HeadParams<T>>,
    /// (H*D, D)
    pub w_out: Tensor<T>,
    /// (D, ffn), (1, ffn), (ffn, D), (1, D)
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub bn1_gamma: Tensor<T>,
    pub bn1_beta: Tensor<T>,
    pub bn2_gamma: Tensor<T>,
    pub bn2_beta: Tensor<T>,
    /// Running statistics (buffers, not optimized).
    pub bn1_mean: Tensor<T>,
    pub bn1_var: Tensor<T>,
    pub bn2_mean: Tensor<T>,
    pub bn2_var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    /// (P, D) patch embedding.
    pub w_patch: Tensor<T>,
    /// (N, D) learnable positional encoding.
    pub w_pos: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    /// Decoder projections: queries from Z (D, D); keys/values from raw
    /// patches (P, D).
    pub dec_w_q: Tensor<T>,
    pub dec_w_k: Tensor<T>,
    pub dec_w_v: Tensor<T>,
    /// (M*D, C) + (1, C)
    pub cls_w: Tensor<T>,
    pub cls_b: Tensor<T>,
    /// (M*D, T_p*C) + (1, T_p*C)
    pub fore_w: Tensor<T>,
    pub fore_b: Tensor<T>,
    /// (D, T_p*P) + (1, T_p*P)
    pub sig_w: Tensor<T>,
    pub sig_b: Tensor<T>,
}

/// Whether a parameter receives optimizer updates or is a running buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters: linear weights uniform in +-1/sqrt(fan_in), biases
    /// zero, positional encoding N(0, 0.02), batchnorm affine (1, 0) with
    /// running stats (0, 1). Draw order equals canonical order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let d = cfg.latent_dim;
        let n = cfg.n_patches();
        let p = cfg.patch_len;
        let (m, c, tp) = (cfg.channels, cfg.classes, cfg.horizon);

        fn linear<T: Scalar>(rng: &mut SplitMix64, fan_in: usize, fan_out: usize) -> Tensor<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| T::c(rng.uniform(-bound, bound)))
                .collect();
            Tensor::from_vec(&[fan_in, fan_out], data).expect("init shape")
        }

        let w_patch = linear(&mut rng, p, d);
        let w_pos = {
            let data = (0..n * d).map(|_| T::c(rng.normal() * 0.02)).collect();
            Tensor::from_vec(&[n, d], data).expect("pos shape")
        };
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                heads: (0..cfg.heads)
                    .map(|_| HeadParams {
                        w_q: linear(&mut rng, d, cfg.d_k()),
                        w_k: linear(&mut rng, d, cfg.d_k()),
                        w_v: linear(&mut rng, d, d),
                    })
                    .collect(),
                w_out: linear(&mut rng, cfg.heads * d, d),
                ffn_w1: linear(&mut rng, d, cfg.ffn_dim),
                ffn_b1: Tensor::zeros(&[1, cfg.ffn_dim]),
                ffn_w2: linear(&mut rng, cfg.ffn_dim, d),
                ffn_b2: Tensor::zeros(&[1, d]),
                bn1_gamma: Tensor::full(&[1, d], T::one()),
                bn1_beta: Tensor::zeros(&[1, d]),
                bn2_gamma: Tensor::full(&[1, d], T::one()),
                bn2_beta: Tensor::zeros(&[1, d]),
                bn1_mean: Tensor::zeros(&[1, d]),
                bn1_var: Tensor::full(&[1, d], T::one()),
                bn2_mean: Tensor::zeros(&[1, d]),
                bn2_var: Tensor::full(&[1, d], T::one()),
            })
            .collect();
        let dec_w_q = linear(&mut rng, d, d);
        let dec_w_k = linear(&mut rng, p, d);
        let dec_w_v = linear(&mut rng, p, d);
        let cls_w = linear(&mut rng, m * d, c);
        let cls_b = Tensor::zeros(&[1, c]);
        let fore_w = linear(&mut rng, m * d, tp * c);
        let fore_b = Tensor::zeros(&[1, tp * c]);
        let sig_w = linear(&mut rng, d, tp * p);
        let sig_b = Tensor::zeros(&[1, tp * p]);

        Self {
            w_patch,
            w_pos,
            layers,
            dec_w_q,
            dec_w_k,
            dec_w_v,
            cls_w,
            cls_b,
            fore_w,
            fore_b,
            sig_w,
            sig_b,
        }
    }

    /// Canonical parameter walk. The visit order is the serialization
    /// order of the checkpoint format and the slot order of Adam state.
    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor<T>, ParamKind)) {
        use ParamKind::{Buffer, Trainable};
        f("embed.w_patch".into(), &self.w_patch, Trainable);
        f("embed.w_pos".into(), &self.w_pos, Trainable);
        for (i, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                f(format!("enc.{i}.head.{h}.w_q"), &head.w_q, Trainable);
                f(format!("enc.{i}.head.{h}.w_k"), &head.w_k, Trainable);
                f(format!("enc.{i}.head.{h}.w_v"), &head.w_v, Trainable);
            }
            f(format!("enc.{i}.w_out"), &layer.w_out, Trainable);
            f(format!("enc.{i}.ffn.w1"), &layer.ffn_w1, Trainable);
            f(format!("enc.{i}.ffn.b1"), &layer.ffn_b1, Trainable);
            f(format!("enc.{i}.ffn.w2"), &layer.ffn_w2, Trainable);
            f(format!("enc.{i}.ffn.b2"), &layer.ffn_b2, Trainable);
            f(format!("enc.{i}.bn1.gamma"), &layer.bn1_gamma, Trainable);
            f(format!("enc.{i}.bn1.beta"), &layer.bn1_beta, Trainable);
            f(format!("enc.{i}.bn1.running_mean"), &layer.bn1_mean, Buffer);
            f(format!("enc.{i}.bn1.running_var"), &layer.bn1_var, Buffer);
            f(format!("enc.{i}.bn2.gamma"), &layer.bn2_gamma, Trainable);
            f(format!("enc.{i}.bn2.beta"), &layer.bn2_beta, Trainable);
            f(format!("enc.{i}.bn2.running_mean"), &layer.bn2_mean, Buffer);
            f(format!("enc.{i}.bn2.running_var"), &layer.bn2_var, Buffer);
        }
        f("dec.w_q".into(), &self.dec_w_q, Trainable);
        f("dec.w_k".into(), &self.dec_w_k, Trainable);
        f("dec.w_v".into(), &self.dec_w_v, Trainable);
        f("head.cls.w".into(), &self.cls_w, Trainable);
        f("head.cls.b".into(), &self.cls_b, Trainable);
        f("head.forecast.w".into(), &self.fore_w, Trainable);
        f("head.forecast.b".into(), &self.fore_b, Trainable);
        f("head.signal.w".into(), &self.sig_w, Trainable);
        f("head.signal.b".into(), &self.sig_b, Trainable);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>, ParamKind)) {
        use ParamKind::{Buffer, Trainable};
        f("embed.w_patch".into(), &mut self.w_patch, Trainable);
        f("embed.w_pos".into(), &mut self.w_pos, Trainable);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                f(format!("enc.{i}.head.{h}.w_q"), &mut head.w_q, Trainable);
                f(format!("enc.{i}.head.{h}.w_k"), &mut head.w_k, Trainable);
                f(format!("enc.{i}.head.{h}.w_v"), &mut head.w_v, Trainable);
            }
            f(format!("enc.{i}.w_out"), &mut layer.w_out, Trainable);
            f(format!("enc.{i}.ffn.w1"), &mut layer.ffn_w1, Trainable);
            f(format!("enc.{i}.ffn.b1"), &mut layer.ffn_b1, Trainable);
            f(format!("enc.{i}.ffn.w2"), &mut layer.ffn_w2, Trainable);
            f(format!("enc.{i}.ffn.b2"), &mut layer.ffn_b2, Trainable);
            f(format!("enc.{i}.bn1.gamma"), &mut layer.bn1_gamma, Trainable);
            f(format!("enc.{i}.bn1.beta"), &mut layer.bn1_beta, Trainable);
            f(format!("enc.{i}.bn1.running_mean"), &mut layer.bn1_mean, Buffer);
            f(format!("enc.{i}.bn1.running_var"), &mut layer.bn1_var, Buffer);
            f(format!("enc.{i}.bn2.gamma"), &mut layer.bn2_gamma, Trainable);
            f(format!("enc.{i}.bn2.beta"), &mut layer.bn2_beta, Trainable);
            f(format!("enc.{i}.bn2.running_mean"), &mut layer.bn2_mean, Buffer);
            f(format!("enc.{i}.bn2.running_var"), &mut layer.bn2_var, Buffer);
        }
        f("dec.w_q".into(), &mut self.dec_w_q, Trainable);
        f("dec.w_k".into(), &mut self.dec_w_k, Trainable);
        f("dec.w_v".into(), &mut self.dec_w_v, Trainable);
        f("head.cls.w".into(), &mut self.cls_w, Trainable);
        f("head.cls.b".into(), &mut self.cls_b, Trainable);
        f("head.forecast.w".into(), &mut self.fore_w, Trainable);
        f("head.forecast.b".into(), &mut self.fore_b, Trainable);
        f("head.signal.w".into(), &mut self.sig_w, Trainable);
        f("head.signal.b".into(), &mut self.sig_b, Trainable);
    }

    pub fn trainable_lens(&self) -> Vec<usize> {
        let mut lens = Vec::new();
        self.visit(&mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                lens.push(t.len());
            }
        });
        lens
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            w_patch: self.w_patch.cast(),
            w_pos: self.w_pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadParams {
                            w_q: h.w_q.cast(),
                            w_k: h.w_k.cast(),
                            w_v: h.w_v.cast(),
                        })
                        .collect(),
                    w_out: l.w_out.cast(),
                    ffn_w1: l.ffn_w1.cast(),
                    ffn_b1: l.ffn_b1.cast(),
                    ffn_w2: l.ffn_w2.cast(),
                    ffn_b2: l.ffn_b2.cast(),
                    bn1_gamma: l.bn1_gamma.cast(),
                    bn1_beta: l.bn1_beta.cast(),
                    bn2_gamma: l.bn2_gamma.cast(),
                    bn2_beta: l.bn2_beta.cast(),
                    bn1_mean: l.bn1_mean.cast(),
                    bn1_var: l.bn1_var.cast(),
                    bn2_mean: l.bn2_mean.cast(),
                    bn2_var: l.bn2_var.cast(),
                })
                .collect(),
            dec_w_q: self.dec_w_q.cast(),
            dec_w_k: self.dec_w_k.cast(),
            dec_w_v: self.dec_w_v.cast(),
            cls_w: self.cls_w.cast(),
            cls_b: self.cls_b.cast(),
            fore_w: self.fore_w.cast(),
            fore_b: self.fore_b.cast(),
            sig_w: self.sig_w.cast(),
            sig_b: self.sig_b.cast(),
        }
    }

    /// Fold fresh batch statistics into the running buffers. `stats` must
    /// be in forward emission order: (bn1, bn2) per layer.
    pub fn update_running_stats(&mut self, stats: &[(Vec<T>, Vec<T>)]) {
        assert_eq!(stats.len(), self.layers.len() * 2, "batchnorm stat count");
        let momentum = T::c(BN_MOMENTUM as f64);
        let keep = T::one() - momentum;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let slots = [
                (&stats[2 * i], &mut layer.bn1_mean, &mut layer.bn1_var),
                (&stats[2 * i + 1], &mut layer.bn2_mean, &mut layer.bn2_var),
            ];
            for (stat, mean_buf, var_buf) in slots {
                for (dst, &src) in mean_buf.data_mut().iter_mut().zip(stat.0.iter()) {
                    *dst = keep * *dst + momentum * src;
                }
                for (dst, &src) in var_buf.data_mut().iter_mut().zip(stat.1.iter()) {
                    *dst = keep * *dst + momentum * src;
                }
            }
        }
    }
}

// ── forward pass ─────────────────────────────────────────────────────

/// Train mode draws dropout from the caller's RNG and normalizes with batch
/// statistics; eval mode uses running statistics and no dropout.
pub enum Phase<'a> {
    Train { dropout_draw: &'a mut dyn FnMut() -> f64 },
    Eval,
}

impl Phase<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Phase::Train { .. })
    }
}

/// Tape handles for one registration of the parameters.
pub struct ParamVars<T> {
    pub w_patch: Var,
    pub w_pos: Var,
    pub layers: Vec<LayerVars<T>>,
    pub dec_w_q: Var,
    pub dec_w_k: Var,
    pub dec_w_v: Var,
    pub cls_w: Var,
    pub cls_b: Var,
    pub fore_w: Var,
    pub fore_b: Var,
    pub sig_w: Var,
    pub sig_b: Var,
    /// Trainable leaves in canonical order, for gradient collection.
    pub trainables: Vec<Var>,
}

pub struct LayerVars<T> {
    pub heads: Vec<(Var, Var, Var)>,
    pub w_out: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub bn1_gamma: Var,
    pub bn1_beta: Var,
    pub bn2_gamma: Var,
    pub bn2_beta: Var,
    pub bn1_running: (Vec<T>, Vec<T>),
    pub bn2_running: (Vec<T>, Vec<T>),
}

/// Push every parameter as a leaf; leaf registration order equals the
/// canonical trainable order.
pub fn register_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> ParamVars<T> {
    let mut trainables = Vec::new();
    let mut leaf = |tape: &mut Tape<T>, t: &Tensor<T>| -> Var {
        let v = tape.leaf_tensor(t);
        trainables.push(v);
        v
    };
    let w_patch = leaf(tape, &params.w_patch);
    let w_pos = leaf(tape, &params.w_pos);
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let heads = layer
            .heads
            .iter()
            .map(|h| (leaf(tape, &h.w_q), leaf(tape, &h.w_k), leaf(tape, &h.w_v)))
            .collect();
        let w_out = leaf(tape, &layer.w_out);
        let ffn_w1 = leaf(tape, &layer.ffn_w1);
        let ffn_b1 = leaf(tape, &layer.ffn_b1);
        let ffn_w2 = leaf(tape, &layer.ffn_w2);
        let ffn_b2 = leaf(tape, &layer.ffn_b2);
        let bn1_gamma = leaf(tape, &layer.bn1_gamma);
        let bn1_beta = leaf(tape, &layer.bn1_beta);
        let bn2_gamma = leaf(tape, &layer.bn2_gamma);
        let bn2_beta = leaf(tape, &layer.bn2_beta);
        layers.push(LayerVars {
            heads,
            w_out,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            bn1_gamma,
            bn1_beta,
            bn2_gamma,
            bn2_beta,
            bn1_running: (layer.bn1_mean.data().to_vec(), layer.bn1_var.data().to_vec()),
            bn2_running: (layer.bn2_mean.data().to_vec(), layer.bn2_var.data().to_vec()),
        });
    }
    let dec_w_q = leaf(tape, &params.dec_w_q);
    let dec_w_k = leaf(tape, &params.dec_w_k);
    let dec_w_v = leaf(tape, &params.dec_w_v);
    let cls_w = leaf(tape, &params.cls_w);
    let cls_b = leaf(tape, &params.cls_b);
    let fore_w = leaf(tape, &params.fore_w);
    let fore_b = leaf(tape, &params.fore_b);
    let sig_w = leaf(tape, &params.sig_w);
    let sig_b = leaf(tape, &params.sig_b);
    ParamVars {
        w_patch,
        w_pos,
        layers,
        dec_w_q,
        dec_w_k,
        dec_w_v,
        cls_w,
        cls_b,
        fore_w,
        fore_b,
        sig_w,
        sig_b,
        trainables,
    }
}

/// Everything one forward pass produces. Heads not applicable to the mode
/// stay `None`; attention vars are row-major (sequence-row, head).
pub struct ForwardOut<T> {
    pub embedded: Var,
    pub encoded: Var,
    pub decoded: Var,
    pub class_probs: Var,
    pub forecast_probs: Option<Var>,
    pub signal_pred: Option<Var>,
    pub enc_attn: Vec<Vec<Var>>,
    pub dec_attn: Vec<Var>,
    pub bn_stats: Vec<(Vec<T>, Vec<T>)>,
}

/// Patch embedding: per patch, `x @ W_patch` plus column n of the
/// positional encoding.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars<T>,
    patches: Var,
) -> Result<Var, ModelError> {
    let x = tape.matmul(patches, pv.w_patch)?;
    Ok(tape.tile_add_rows(x, pv.w_pos)?)
}

/// Multi-head self-attention over the patch axis of each channel row.
/// Returns the projected output and the per-(row, head) attention maps.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    lv: &LayerVars<T>,
    x: Var,
    rows: usize,
    n: usize,
    phase: &mut Phase<'_>,
) -> Result<(Var, Vec<Var>), ModelError> {
    let scale = T::c(1.0 / (cfg.d_k() as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    let mut attn_maps = Vec::with_capacity(rows * cfg.heads);
    for &(w_q, w_k, w_v) in &lv.heads {
        let q = tape.matmul(x, w_q)?;
        let k = tape.matmul(x, w_k)?;
        let v = tape.matmul(x, w_v)?;
        let mut per_row = Vec::with_capacity(rows);
        for r in 0..rows {
            let q_r = tape.slice_rows(q, r * n, n);
            let k_r = tape.slice_rows(k, r * n, n);
            let scores = tape.matmul_nt(q_r, k_r)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            attn_maps.push(attn);
            let attn = match phase {
                Phase::Train { dropout_draw } => tape.dropout(attn, cfg.dropout, dropout_draw),
                Phase::Eval => attn,
            };
            let v_r = tape.slice_rows(v, r * n, n);
            per_row.push(tape.matmul(attn, v_r)?);
        }
        head_outputs.push(tape.concat_rows(&per_row)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let out = tape.matmul(concat, lv.w_out)?;
    Ok((out, attn_maps))
}

fn batchnorm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &(Vec<T>, Vec<T>),
    phase: &Phase<'_>,
    stats: &mut Vec<(Vec<T>, Vec<T>)>,
) -> Result<Var, ModelError> {
    let eps = T::c(BN_EPS);
    if phase.is_train() {
        let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, eps)?;
        stats.push((mean, var));
        Ok(y)
    } else {
        Ok(tape.batchnorm_eval(x, gamma, beta, eps, &running.0, &running.1)?)
    }
}

/// Encoder stack. Channel rows never attend across each other; batchnorm
/// statistics span every (row, patch) position per feature.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars<T>,
    embedded: Var,
    rows: usize,
    phase: &mut Phase<'_>,
    bn_stats: &mut Vec<(Vec<T>, Vec<T>)>,
    enc_attn: &mut Vec<Vec<Var>>,
) -> Result<Var, ModelError> {
    let n = cfg.n_patches();
    let mut x = embedded;
    for (layer_idx, lv) in pv.layers.iter().enumerate() {
        let (attn_out, maps) = self_attention(tape, cfg, lv, x, rows, n, phase)?;
        enc_attn.push(maps);
        let res = tape.add(x, attn_out)?;
        let normed = batchnorm(tape, res, lv.bn1_gamma, lv.bn1_beta, &lv.bn1_running, phase, bn_stats)?;

        let h = tape.matmul(normed, lv.ffn_w1)?;
        let h = tape.add_row(h, lv.ffn_b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, lv.ffn_w2)?;
        let h = tape.add_row(h, lv.ffn_b2)?;
        let h = match phase {
            Phase::Train { dropout_draw } => tape.dropout(h, cfg.dropout, dropout_draw),
            Phase::Eval => h,
        };
        let res2 = tape.add(normed, h)?;
        x = batchnorm(tape, res2, lv.bn2_gamma, lv.bn2_beta, &lv.bn2_running, phase, bn_stats)?;

        if tape.non_finite().is_some() {
            return Err(ModelError::NonFiniteLayer { layer: layer_idx });
        }
    }
    Ok(x)
}

/// Cross-attention: queries from the encoder output, keys/values from the
/// raw patches, logits divided by the decoder temperature.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars<T>,
    encoded: Var,
    raw_patches: Var,
    rows: usize,
    dec_attn: &mut Vec<Var>,
) -> Result<Var, ModelError> {
    let n = cfg.n_patches();
    let q = tape.matmul(encoded, pv.dec_w_q)?;
    let k = tape.matmul(raw_patches, pv.dec_w_k)?;
    let v = tape.matmul(raw_patches, pv.dec_w_v)?;
    let inv_temp = T::c(1.0 / cfg.decoder_temp as f64);
    let mut per_row = Vec::with_capacity(rows);
    for r in 0..rows {
        let q_r = tape.slice_rows(q, r * n, n);
        let k_r = tape.slice_rows(k, r * n, n);
        let scores = tape.matmul_nt(q_r, k_r)?;
        let scores = tape.scale(scores, inv_temp);
        let attn = tape.softmax_rows(scores);
        dec_attn.push(attn);
        let v_r = tape.slice_rows(v, r * n, n);
        per_row.push(tape.matmul(attn, v_r)?);
    }
    let out = tape.concat_rows(&per_row)?;
    if tape.non_finite().is_some() {
        return Err(ModelError::NonFiniteStage { stage: "decoder" });
    }
    Ok(out)
}

/// Concatenate the M channel vectors of every (sequence, patch) pair:
/// (B*M*N, D) -> (B*N, M*D), batch-major rows.
fn fuse_channels<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    b: usize,
    m: usize,
    n: usize,
) -> Result<Var, ModelError> {
    let mut per_seq = Vec::with_capacity(b);
    for seq in 0..b {
        let block = tape.slice_rows(x, seq * m * n, m * n);
        per_seq.push(tape.interleave_rows_to_cols(block, m)?);
    }
    Ok(tape.concat_rows(&per_seq)?)
}

/// Per-patch class probabilities from the decoded representation:
/// channel concat, linear head, softmax. Output rows are (sequence, patch).
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars<T>,
    decoded: Var,
    b: usize,
) -> Result<Var, ModelError> {
    let fused = fuse_channels(tape, decoded, b, cfg.channels, cfg.n_patches())?;
    let logits = tape.matmul(fused, pv.cls_w)?;
    let logits = tape.add_row(logits, pv.cls_b)?;
    Ok(tape.softmax_rows(logits))
}

/// Future-label probabilities from the fill-patch representation.
/// Output is (B*T_p, C), horizon-major within each sequence.
pub fn forecast_labels<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars<T>,
    decoded: Var,
    b: usize,
) -> Result<Var, ModelError> {
    if cfg.horizon == 0 {
        return Err(ModelError::NoHorizon);
    }
    let n = cfg.n_patches();
    let last = tape.stride_rows(decoded, n - 1, n); // (B*M, D)
    let fused = fuse_channels(tape, last, b, cfg.channels, 1)?; // (B, M*D)
    let logits = tape.matmul(fused, pv.fore_w)?;
    let logits = tape.add_row(logits, pv.fore_b)?;
    let logits = tape.reshape(logits, b * cfg.horizon, cfg.classes)?;
    Ok(tape.softmax_rows(logits))
}

/// Future-signal regression per channel row from the encoder's fill-patch
/// representation; output (B*M, T_p*P) in normalized units.
pub fn forecast_signal<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars<T>,
    encoded: Var,
) -> Result<Var, ModelError> {
    if cfg.horizon == 0 {
        return Err(ModelError::NoHorizon);
    }
    let n = cfg.n_patches();
    let last = tape.stride_rows(encoded, n - 1, n); // (B*M, D)
    let pred = tape.matmul(last, pv.sig_w)?;
    Ok(tape.add_row(pred, pv.sig_b)?)
}

/// Full forward pass over one batch of patch rows.
///
/// `patches` must be the (B*M*N, P) leaf for the batch; `b` is the number
/// of sequences. Forecast heads follow `cfg.mode` and `cfg.horizon`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars<T>,
    patches: Var,
    b: usize,
    mut phase: Phase<'_>,
) -> Result<ForwardOut<T>, ModelError> {
    let rows = b * cfg.channels;
    let mut bn_stats = Vec::new();
    let mut enc_attn = Vec::new();
    let mut dec_attn = Vec::new();

    let embedded = embed(tape, pv, patches)?;
    let encoded = encode(tape, cfg, pv, embedded, rows, &mut phase, &mut bn_stats, &mut enc_attn)?;
    let decoded = decode(tape, cfg, pv, encoded, patches, rows, &mut dec_attn)?;
    let class_probs = classify(tape, cfg, pv, decoded, b)?;

    let forecast_probs = if cfg.mode == TaskMode::LabelForecast && cfg.horizon > 0 {
        Some(forecast_labels(tape, cfg, pv, decoded, b)?)
    } else {
        None
    };
    let signal_pred = if cfg.mode == TaskMode::SignalForecast && cfg.horizon > 0 {
        Some(forecast_signal(tape, cfg, pv, encoded)?)
    } else {
        None
    };
    if let Some(nf) = tape.non_finite() {
        return Err(ModelError::NonFiniteStage { stage: nf.op });
    }
    Ok(ForwardOut {
        embedded,
        encoded,
        decoded,
        class_probs,
        forecast_probs,
        signal_pred,
        enc_attn,
        dec_attn,
        bn_stats,
    })
}

/// Argmax with ties resolved to the lowest class id.
pub fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ── the model proper ─────────────────────────────────────────────────

/// Config, parameters and the class vocabulary the model was trained on.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub class_names: Vec<String>,
}

/// Non-tape outputs of an inference pass over one batch.
pub struct Inference {
    /// (B*N) predicted class ids, sequence-major.
    pub patch_predictions: Vec<usize>,
    /// (B*N, C) class probabilities.
    pub class_probs: Tensor<f32>,
    /// (B*T_p) future label predictions when forecasting was requested.
    pub future_predictions: Option<Vec<usize>>,
    /// (B*T_p, C) future probabilities.
    pub future_probs: Option<Tensor<f32>>,
    /// (B*M, T_p*P) denormalized signal forecast in original units.
    pub signal_forecast: Option<Tensor<f32>>,
}

impl Model {
    pub fn init(config: ModelConfig, class_names: Vec<String>, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if class_names.len() != config.classes {
            return Err(ModelError::InvalidConfig(format!(
                "class name count {} != classes {}",
                class_names.len(),
                config.classes
            )));
        }
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params, class_names })
    }

    /// Frozen-parameter inference over one patch batch.
    pub fn infer(&self, batch: &PatchBatch) -> Result<Inference, ModelError> {
        let cfg = &self.config;
        let mut tape: Tape<f32> = Tape::new();
        let pv = register_params(&mut tape, &self.params);
        let rows = batch.b * batch.m;
        let patches = tape.leaf(rows * batch.n, batch.p, batch.patches.data().to_vec());
        let out = forward(&mut tape, cfg, &pv, patches, batch.b, Phase::Eval)?;

        let probs = tape.value_tensor(out.class_probs);
        let patch_predictions = (0..probs.rows()).map(|r| argmax_row(probs.row(r))).collect();

        let (future_predictions, future_probs) = match out.forecast_probs {
            Some(v) => {
                let fp = tape.value_tensor(v);
                let preds = (0..fp.rows()).map(|r| argmax_row(fp.row(r))).collect();
                (Some(preds), Some(fp))
            }
            None => (None, None),
        };

        let signal_forecast = match out.signal_pred {
            Some(v) => {
                let raw = tape.value_tensor(v);
                let mut denorm = raw.clone();
                let width = raw.row_len();
                for r in 0..raw.rows() {
                    let seq = r / batch.m;
                    let chan = r % batch.m;
                    let stats = &batch.norm_stats[seq];
                    for j in 0..width {
                        let v = denorm.data()[r * width + j];
                        denorm.data_mut()[r * width + j] = stats.denormalize(chan, v);
                    }
                }
                Some(denorm)
            }
            None => None,
        };

        Ok(Inference {
            patch_predictions,
            class_probs: probs,
            future_predictions,
            future_probs,
            signal_forecast,
        })
    }
}

// ── checkpoint format ────────────────────────────────────────────────
//
// magic "P2LH" | u16 version | config block | class vocab | parameter
// arrays (canonical visit order, raw little-endian f32) | u32 CRC32 of
// everything before it.
//
// Config block: u32 fields latent_dim, heads, n_layers, ffn_dim, classes,
// channels, patch_len, stride, window, horizon; f32 decoder_temp; f32
// dropout; u8 mode. Vocab: u16 count, then (u16 len, utf8 bytes) per name.

const MAGIC: &[u8; 4] = b"P2LH";
const VERSION: u16 = 1;

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = &self.config;
        for v in [
            cfg.latent_dim,
            cfg.heads,
            cfg.n_layers,
            cfg.ffn_dim,
            cfg.classes,
            cfg.channels,
            cfg.patch_len,
            cfg.stride,
            cfg.window,
            cfg.horizon,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&cfg.decoder_temp.to_le_bytes());
        out.extend_from_slice(&(cfg.dropout as f32).to_le_bytes());
        out.push(cfg.mode.to_u8());
        out.extend_from_slice(&(self.class_names.len() as u16).to_le_bytes());
        for name in &self.class_names {
            let bytes = name.as_bytes();
            out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        self.params.visit(&mut |_, t, _| {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let fail = |msg: &str| ModelError::Checkpoint(msg.to_string());
        if bytes.len() < 4 + 2 + 4 {
            return Err(fail("truncated checkpoint"));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(fail("CRC mismatch; file corrupt"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fail("bad magic; not a checkpoint"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut ints = [0usize; 10];
        for v in ints.iter_mut() {
            *v = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        }
        let decoder_temp = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let dropout = f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64;
        let mode = TaskMode::from_u8(r.take(1)?[0])?;
        let config = ModelConfig {
            latent_dim: ints[0],
            heads: ints[1],
            n_layers: ints[2],
            ffn_dim: ints[3],
            classes: ints[4],
            channels: ints[5],
            patch_len: ints[6],
            stride: ints[7],
            window: ints[8],
            horizon: ints[9],
            decoder_temp,
            dropout,
            mode,
        };
        config.validate()?;
        let n_names = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let mut class_names = Vec::with_capacity(n_names);
        for _ in 0..n_names {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| fail("class name is not UTF-8"))?;
            class_names.push(name.to_string());
        }
        if class_names.len() != config.classes {
            return Err(fail("class vocabulary does not match class count"));
        }
        // Template gives shapes; arrays stream in canonical order.
        let mut params = ModelParams::<f32>::init(&config, 0);
        let mut err = None;
        params.visit_mut(&mut |name, t, _| {
            if err.is_some() {
                return;
            }
            match r.take(t.len() * 4) {
                Ok(raw) => {
                    for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                        *dst = f32::from_le_bytes(chunk.try_into().unwrap());
                    }
                }
                Err(_) => err = Some(ModelError::Checkpoint(format!("truncated at {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if r.pos != body.len() {
            return Err(fail("trailing bytes after parameters"));
        }
        Ok(Self { config, params, class_names })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

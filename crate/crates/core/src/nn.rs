//! Layers shared by the autoencoder and the forecaster.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{xavier, zeros, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(fan_in, fan_out, rng));
        let bias = store.add(format!("{name}.bias"), zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).fill(0.0);
        store.get_mut(self.bias).fill(0.0);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, width))),
            beta: store.add(format!("{name}.beta"), zeros(1, width)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Width, head count and feed-forward width of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl BlockShape {
    pub fn new(width: usize, heads: usize, ffn: usize) -> Self {
        Self { width, heads, ffn }
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub shape: BlockShape,
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, shape: BlockShape, rng: &mut R) -> Self {
        let d = shape.width;
        assert!(
            shape.heads > 0 && d.is_multiple_of(shape.heads),
            "width {d} not divisible by {} heads",
            shape.heads
        );
        Self {
            shape,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            query: Linear::new(store, &format!("{name}.attn.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), d, d, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), d, d, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn.in"), d, shape.ffn, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.out"), shape.ffn, d, rng),
        }
    }

    /// `x` holds consecutive sequences of `seq_len` tokens.
    pub fn forward(&self, tape: &mut Tape, x: Var, seq_len: usize) -> Var {
        let h = self.ln_attn.forward(tape, x);
        let q = self.query.forward(tape, h);
        let k = self.key.forward(tape, h);
        let v = self.value.forward(tape, h);
        let a = tape.attention(q, k, v, seq_len, self.shape.heads);
        let a = self.out.forward(tape, a);
        let x = tape.add(x, a);

        let h = self.ln_ffn.forward(tape, x);
        let h = self.ffn_in.forward(tape, h);
        let h = tape.gelu(h);
        let h = self.ffn_out.forward(tape, h);
        tape.add(x, h)
    }

    /// Zero the output projections of both residual branches, turning the
    /// block into the identity map.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        self.out.zero(store);
        self.ffn_out.zero(store);
    }
}

/// Inverted dropout mask: entries are `0` or `1/(1−p)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { 0.0 } else { keep })
}

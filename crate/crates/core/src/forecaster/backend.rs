//! Spatio-temporal backends mapping recent patches and an adjacency matrix
//! to node representations.

use std::fmt::Debug;

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::nn::Linear;

/// Any module taking the most recent patch of each node plus an adjacency
/// matrix and returning one `width()`-wide row per node.
pub trait StModel: Debug + Send + Sync {
    fn width(&self) -> usize;

    /// `recent` is `[B·N, T0·C]`, `adjacency` holds `B` stacked `N × N`
    /// row-stochastic blocks. Returns `[B·N, width]`.
    fn forward(&self, tape: &mut Tape, recent: Var, adjacency: Var, nodes: usize) -> Var;
}

#[derive(Debug, Clone)]
struct GatedBlock {
    dilation: usize,
    filter: Linear,
    gate: Linear,
}

/// Reference backend: a channel lift, gated dilated temporal convolutions
/// (kernel 2) each followed by one-hop graph mixing, then a linear readout.
#[derive(Debug, Clone)]
pub struct TcnBackend {
    t0: usize,
    channels: usize,
    hidden: usize,
    width: usize,
    lift: Linear,
    blocks: Vec<GatedBlock>,
    readout: Linear,
}

impl TcnBackend {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (t0, channels): (usize, usize),
        hidden: usize,
        blocks: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let lift = Linear::new(store, &format!("{name}.lift"), channels, hidden, rng);
        let blocks = (0..blocks)
            .map(|i| GatedBlock {
                dilation: 1 << i,
                filter: Linear::new(store, &format!("{name}.block{i}.filter"), 2 * hidden, hidden, rng),
                gate: Linear::new(store, &format!("{name}.block{i}.gate"), 2 * hidden, hidden, rng),
            })
            .collect();
        let readout = Linear::new(store, &format!("{name}.readout"), t0 * hidden, width, rng);
        Self {
            t0,
            channels,
            hidden,
            width,
            lift,
            blocks,
            readout,
        }
    }
}

impl StModel for TcnBackend {
    fn width(&self) -> usize {
        self.width
    }

    fn forward(&self, tape: &mut Tape, recent: Var, adjacency: Var, nodes: usize) -> Var {
        let rows = tape.shape(recent).0;
        let (t0, h) = (self.t0, self.hidden);
        let x = tape.reshape(recent, rows * t0, self.channels);
        let mut x = self.lift.forward(tape, x);
        for block in &self.blocks {
            let past = tape.shift_rows(x, t0, block.dilation);
            let taps = tape.concat_cols(x, past);
            let f = block.filter.forward(tape, taps);
            let f = tape.tanh(f);
            let g = block.gate.forward(tape, taps);
            let g = tape.sigmoid(g);
            let y = tape.mul(f, g);
            x = tape.add(x, y);

            let wide = tape.reshape(x, rows, t0 * h);
            let mixed = tape.block_matmul(adjacency, wide, nodes);
            let wide = tape.add(wide, mixed);
            x = tape.reshape(wide, rows * t0, h);
        }
        let wide = tape.reshape(x, rows, t0 * h);
        self.readout.forward(tape, wide)
    }
}

//! Eidetic 3D-convolutional LSTM cell.
//!
//! Each step computes, for an input block `X` and previous state
//! `(H, M, C_{t-τ..t-1})`:
//!
//! ```text
//! R  = σ(W_xr*X + W_hr*H + b_r)            I  = σ(W_xi*X + W_hi*H + b_i)
//! C' = I ⊙ tanh(W_xg*X + W_hg*H + b_g) + LayerNorm(C_{t-1} + RECALL(R, C_{t-τ..t-1}))
//! I' = σ(W'_xi*X + W_mi*M + b'_i)          F' = σ(W'_xf*X + W_mf*M + b'_f)
//! M' = I' ⊙ tanh(W'_xg*X + W_mg*M + b'_g) + F' ⊙ M
//! O  = σ(W_xo*X + W_ho*H + W_co*C' + W_mo*M' + b_o)
//! H' = O ⊙ tanh(W_1×1×1 * [C', M'])
//! ```
//!
//! where `*` is a same-padded 3D convolution and RECALL is dot-product
//! attention of the recall gate over the retained temporal memories. Kernels
//! that read the same operand are concatenated along their output axis so each
//! operand is convolved once per step; gradients still reach every named
//! kernel through the concatenation.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Conv3dSpec, Graph, ParamId, ParamSet, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Where a layer reads its spatio-temporal memory `M` from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryFlow {
    /// `M` recurs along time within each layer.
    #[default]
    PerLayer,
    /// `M` climbs the stack at each time step and wraps from the top layer at
    /// `t-1` to the bottom layer at `t`.
    CrossLayer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellConfig {
    /// Number of retained temporal memories.
    pub tau: usize,
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: [usize; 3],
    /// `(segments, rows, cols)` extents of one block.
    pub segment_shape: [usize; 3],
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || self.in_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::InvalidConfig(
                "cell needs tau ≥ 1 and at least one input and hidden channel".into(),
            ));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::InvalidConfig(format!(
                "cell kernel extents must be odd, got {:?}",
                self.kernel
            )));
        }
        if self.segment_shape.contains(&0) {
            return Err(Error::InvalidConfig("cell block extents must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn block_dims(&self, batch: usize, channels: usize) -> Vec<usize> {
        let [n, i, j] = self.segment_shape;
        vec![batch, n, i, j, channels]
    }

    fn conv(&self) -> Conv3dSpec {
        Conv3dSpec::same(self.kernel)
    }
}

/// Parameter handles of one cell, stored in a shared [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellParams {
    pub w_xr: ParamId,
    pub w_hr: ParamId,
    pub w_xi: ParamId,
    pub w_hi: ParamId,
    pub w_xg: ParamId,
    pub w_hg: ParamId,
    pub w_xi_st: ParamId,
    pub w_mi: ParamId,
    pub w_xf_st: ParamId,
    pub w_mf: ParamId,
    pub w_xg_st: ParamId,
    pub w_mg: ParamId,
    pub w_xo: ParamId,
    pub w_ho: ParamId,
    pub w_co: ParamId,
    pub w_mo: ParamId,
    pub b_r: ParamId,
    pub b_i: ParamId,
    pub b_g: ParamId,
    pub b_i_st: ParamId,
    pub b_f_st: ParamId,
    pub b_g_st: ParamId,
    pub b_o: ParamId,
    pub w_out: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl CellParams {
    /// Registers a freshly initialized cell under `prefix` (e.g. `layer-1/`).
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &CellConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let [kd, kh, kw] = cfg.kernel;
        let taps = kd * kh * kw;
        let (cin, hid) = (cfg.in_channels, cfg.hidden_channels);
        let mut kernel = |name: &str, c_in: usize, rng: &mut R| {
            params.add_uniform(format!("{prefix}{name}"), vec![kd, kh, kw, c_in, hid], taps * c_in, rng)
        };
        let w_xr = kernel("w_xr", cin, rng)?;
        let w_hr = kernel("w_hr", hid, rng)?;
        let w_xi = kernel("w_xi", cin, rng)?;
        let w_hi = kernel("w_hi", hid, rng)?;
        let w_xg = kernel("w_xg", cin, rng)?;
        let w_hg = kernel("w_hg", hid, rng)?;
        let w_xi_st = kernel("w_xi_st", cin, rng)?;
        let w_mi = kernel("w_mi", hid, rng)?;
        let w_xf_st = kernel("w_xf_st", cin, rng)?;
        let w_mf = kernel("w_mf", hid, rng)?;
        let w_xg_st = kernel("w_xg_st", cin, rng)?;
        let w_mg = kernel("w_mg", hid, rng)?;
        let w_xo = kernel("w_xo", cin, rng)?;
        let w_ho = kernel("w_ho", hid, rng)?;
        let w_co = kernel("w_co", hid, rng)?;
        let w_mo = kernel("w_mo", hid, rng)?;
        let mut bias = |name: &str, rng: &mut R| {
            params.add_uniform(format!("{prefix}{name}"), vec![hid], taps * cin, rng)
        };
        let b_r = bias("b_r", rng)?;
        let b_i = bias("b_i", rng)?;
        let b_g = bias("b_g", rng)?;
        let b_i_st = bias("b_i_st", rng)?;
        let b_f_st = bias("b_f_st", rng)?;
        let b_g_st = bias("b_g_st", rng)?;
        let b_o = bias("b_o", rng)?;
        let w_out = params.add_uniform(format!("{prefix}w_out"), vec![1, 1, 1, 2 * hid, hid], 2 * hid, rng)?;
        let ln_gamma = params.add(format!("{prefix}ln_gamma"), Tensor::filled(vec![hid], 1.0)?)?;
        let ln_beta = params.add(format!("{prefix}ln_beta"), Tensor::zeros(vec![hid])?)?;
        Ok(CellParams {
            w_xr,
            w_hr,
            w_xi,
            w_hi,
            w_xg,
            w_hg,
            w_xi_st,
            w_mi,
            w_xf_st,
            w_mf,
            w_xg_st,
            w_mg,
            w_xo,
            w_ho,
            w_co,
            w_mo,
            b_r,
            b_i,
            b_g,
            b_i_st,
            b_f_st,
            b_g_st,
            b_o,
            w_out,
            ln_gamma,
            ln_beta,
        })
    }

    pub fn all(&self) -> [ParamId; 26] {
        [
            self.w_xr, self.w_hr, self.w_xi, self.w_hi, self.w_xg, self.w_hg, self.w_xi_st,
            self.w_mi, self.w_xf_st, self.w_mf, self.w_xg_st, self.w_mg, self.w_xo, self.w_ho,
            self.w_co, self.w_mo, self.b_r, self.b_i, self.b_g, self.b_i_st, self.b_f_st,
            self.b_g_st, self.b_o, self.w_out, self.ln_gamma, self.ln_beta,
        ]
    }
}

/// Recurrent state of one cell; all blocks share one shape.
#[derive(Clone, Debug)]
pub struct CellState {
    pub hidden: Var,
    pub memory: Var,
    /// Most recent temporal memories, oldest first.
    pub history: VecDeque<Var>,
}

impl CellState {
    /// Zero hidden state and memory, with the history seeded by one zero
    /// temporal memory so the first recall is defined.
    pub fn zeros(g: &mut Graph<'_>, cfg: &CellConfig, batch: usize) -> Result<Self> {
        let dims = cfg.block_dims(batch, cfg.hidden_channels);
        let hidden = g.constant(Tensor::zeros(dims.clone())?);
        let memory = g.constant(Tensor::zeros(dims.clone())?);
        let c0 = g.constant(Tensor::zeros(dims)?);
        Ok(CellState {
            hidden,
            memory,
            history: VecDeque::from([c0]),
        })
    }
}

/// Gate activations of one step, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct Gates {
    pub recall: Var,
    pub input: Var,
    pub input_st: Var,
    pub forget_st: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct CellStep {
    pub hidden: Var,
    pub temporal: Var,
    pub state: CellState,
    pub gates: Gates,
}

/// Attention of `recall` over `history`; returns the recalled block and the
/// `[B, positions, τ·positions]` weight matrix.
///
/// Queries are the gate's positions (rows) by channels; keys and values are
/// every history memory's positions stacked along one axis. No score scaling.
pub fn recall_with_weights(g: &mut Graph<'_>, recall: Var, history: &[Var]) -> Result<(Var, Var)> {
    let (query, keys, dims) = recall_operands(g, recall, history)?;
    let keys_t = g.transpose(keys)?;
    let scores = g.matmul(query, keys_t)?;
    let weights = g.softmax(scores, 2)?;
    let out = g.matmul(weights, keys)?;
    Ok((g.reshape(out, dims)?, weights))
}

/// `[B, P, C]` queries, `[B, τP, C]` stacked memories and the block shape.
fn recall_operands(g: &mut Graph<'_>, recall: Var, history: &[Var]) -> Result<(Var, Var, Vec<usize>)> {
    if history.is_empty() {
        return Err(Error::InvalidInput(
            "recall needs at least one temporal memory".into(),
        ));
    }
    let dims = g.shape(recall).dims().to_vec();
    if dims.len() < 3 {
        return Err(Error::shape(
            "recall",
            format!("expected [B, ..., channels], got {dims:?}"),
        ));
    }
    let batch = dims[0];
    let channels = dims[dims.len() - 1];
    let positions: usize = dims[1..dims.len() - 1].iter().product();
    for &m in history {
        if g.shape(m).dims() != dims.as_slice() {
            return Err(Error::shape(
                "recall",
                format!("memory {} differs from gate {}", g.shape(m), g.shape(recall)),
            ));
        }
    }
    let query = g.reshape(recall, vec![batch, positions, channels])?;
    let flat: Vec<Var> = history
        .iter()
        .map(|&m| g.reshape(m, vec![batch, positions, channels]))
        .collect::<Result<_>>()?;
    let keys = if flat.len() == 1 { flat[0] } else { g.concat(&flat, 1)? };
    Ok((query, keys, dims))
}

/// Same value as [`recall_with_weights`], through the fused attention op.
pub fn recall(g: &mut Graph<'_>, recall_gate: Var, history: &[Var]) -> Result<Var> {
    let (query, keys, dims) = recall_operands(g, recall_gate, history)?;
    let out = g.attention(query, keys)?;
    g.reshape(out, dims)
}

fn check_block(g: &Graph<'_>, what: &str, v: Var, dims: &[usize]) -> Result<()> {
    if g.shape(v).dims() != dims {
        return Err(Error::shape(
            "cell_step",
            format!("{what} has shape {}, expected {dims:?}", g.shape(v)),
        ));
    }
    Ok(())
}

/// One recurrent step. `state.memory` is the spatio-temporal memory this step
/// reads; the caller decides where it comes from (see [`MemoryFlow`]).
pub fn cell_step(
    g: &mut Graph<'_>,
    x: Var,
    state: &CellState,
    params: &CellParams,
    cfg: &CellConfig,
) -> Result<CellStep> {
    let batch = g.shape(x).dims()[0];
    let hid = cfg.hidden_channels;
    check_block(g, "input", x, &cfg.block_dims(batch, cfg.in_channels))?;
    let block = cfg.block_dims(batch, hid);
    check_block(g, "hidden state", state.hidden, &block)?;
    check_block(g, "memory", state.memory, &block)?;
    let c_prev = *state
        .history
        .back()
        .ok_or_else(|| Error::InvalidInput("cell state has an empty memory history".into()))?;
    for &c in &state.history {
        check_block(g, "temporal memory", c, &block)?;
    }
    let conv = cfg.conv();
    let p = |g: &mut Graph<'_>, id| g.param(id);

    let x_kernels = [
        params.w_xr,
        params.w_xi,
        params.w_xg,
        params.w_xi_st,
        params.w_xf_st,
        params.w_xg_st,
        params.w_xo,
    ]
    .map(|id| p(g, id))
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let wx = g.concat(&x_kernels, 4)?;
    let xs = g.conv3d(x, wx, None, conv)?;

    let h_kernels = [params.w_hr, params.w_hi, params.w_hg, params.w_ho]
        .map(|id| p(g, id))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let wh = g.concat(&h_kernels, 4)?;
    let hs = g.conv3d(state.hidden, wh, None, conv)?;

    let m_kernels = [params.w_mi, params.w_mf, params.w_mg]
        .map(|id| p(g, id))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let wm = g.concat(&m_kernels, 4)?;
    let ms = g.conv3d(state.memory, wm, None, conv)?;

    let part = |g: &mut Graph<'_>, v: Var, k: usize| g.slice(v, 4, k * hid, hid);
    let pre = |g: &mut Graph<'_>, a: Var, b: Var, bias: ParamId| -> Result<Var> {
        let s = g.add(a, b)?;
        let bias = g.param(bias)?;
        g.add_broadcast(s, bias)
    };

    // Temporal branch.
    let (xr, hr) = (part(g, xs, 0)?, part(g, hs, 0)?);
    let r_pre = pre(g, xr, hr, params.b_r)?;
    let r = g.sigmoid(r_pre);
    let (xi, hi) = (part(g, xs, 1)?, part(g, hs, 1)?);
    let i_pre = pre(g, xi, hi, params.b_i)?;
    let i = g.sigmoid(i_pre);
    let (xg, hg) = (part(g, xs, 2)?, part(g, hs, 2)?);
    let g_pre = pre(g, xg, hg, params.b_g)?;
    let cand = g.tanh(g_pre);

    let history: Vec<Var> = state.history.iter().copied().collect();
    let recalled = recall(g, r, &history)?;
    let carried = g.add(c_prev, recalled)?;
    let gamma = g.param(params.ln_gamma)?;
    let beta = g.param(params.ln_beta)?;
    let normed = g.layer_norm(carried, gamma, beta, LAYER_NORM_EPS)?;
    let written = g.mul(i, cand)?;
    let c_new = g.add(written, normed)?;

    // Spatio-temporal branch.
    let (xi2, mi) = (part(g, xs, 3)?, part(g, ms, 0)?);
    let i2_pre = pre(g, xi2, mi, params.b_i_st)?;
    let i_st = g.sigmoid(i2_pre);
    let (xf2, mf) = (part(g, xs, 4)?, part(g, ms, 1)?);
    let f2_pre = pre(g, xf2, mf, params.b_f_st)?;
    let f_st = g.sigmoid(f2_pre);
    let (xg2, mg) = (part(g, xs, 5)?, part(g, ms, 2)?);
    let g2_pre = pre(g, xg2, mg, params.b_g_st)?;
    let cand_st = g.tanh(g2_pre);
    let written_st = g.mul(i_st, cand_st)?;
    let kept = g.mul(f_st, state.memory)?;
    let m_new = g.add(written_st, kept)?;

    // Output.
    let cm = g.concat(&[c_new, m_new], 4)?;
    let (w_co, w_mo) = (g.param(params.w_co)?, g.param(params.w_mo)?);
    let w_cm = g.concat(&[w_co, w_mo], 3)?;
    let cms = g.conv3d(cm, w_cm, None, conv)?;
    let (xo, ho) = (part(g, xs, 6)?, part(g, hs, 3)?);
    let o_partial = g.add(xo, ho)?;
    let o_pre = pre(g, o_partial, cms, params.b_o)?;
    let o = g.sigmoid(o_pre);
    let w_out = g.param(params.w_out)?;
    let fused = g.conv3d(
        cm,
        w_out,
        None,
        Conv3dSpec {
            padding: [0, 0, 0],
            stride: [1, 1, 1],
        },
    )?;
    let squashed = g.tanh(fused);
    let h_new = g.mul(o, squashed)?;

    let mut history = state.history.clone();
    history.push_back(c_new);
    while history.len() > cfg.tau {
        history.pop_front();
    }
    Ok(CellStep {
        hidden: h_new,
        temporal: c_new,
        state: CellState {
            hidden: h_new,
            memory: m_new,
            history,
        },
        gates: Gates {
            recall: r,
            input: i,
            input_st: i_st,
            forget_st: f_st,
            output: o,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(tau: usize) -> CellConfig {
        CellConfig {
            tau,
            in_channels: 2,
            hidden_channels: 3,
            kernel: [3, 3, 3],
            segment_shape: [2, 3, 3],
        }
    }

    #[test]
    fn empty_history_rejected() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::zeros(vec![1, 1, 1, 1, 2]).unwrap());
        assert!(recall(&mut g, r, &[]).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let mut c = cfg(1);
        c.kernel = [2, 3, 3];
        assert!(c.validate().is_err());
    }

    #[test]
    fn history_capped_at_tau() {
        let c = cfg(2);
        let mut params = ParamSet::new();
        let cp = CellParams::init(&mut params, "l/", &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::with_params(&params);
        let mut state = CellState::zeros(&mut g, &c, 1).unwrap();
        assert_eq!(state.history.len(), 1);
        for step in 1..=5 {
            let x = g.constant(Tensor::filled(c.block_dims(1, 2), 0.1 * step as f64).unwrap());
            state = cell_step(&mut g, x, &state, &cp, &c).unwrap().state;
            assert_eq!(state.history.len(), (step + 1).min(2));
        }
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let c = cfg(1);
        let mut params = ParamSet::new();
        let cp = CellParams::init(&mut params, "l/", &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::with_params(&params);
        let state = CellState::zeros(&mut g, &c, 1).unwrap();
        let x = g.constant(Tensor::zeros(c.block_dims(1, 5)).unwrap());
        assert!(cell_step(&mut g, x, &state, &cp, &c).is_err());
    }
}

//! Pre-norm causal transformer: recorded forward pass and its reverse sweep.

use super::linalg::{add_bias, add_col_sums, gemm, View};
use super::{Head, LogitsTable, Policy};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenSeq, BOX_TOKENS, MAX_LAYOUT_BOXES, SEP, TASK_GEN, VOCAB_SIZE};

const LN_EPS: f64 = 1e-5;

/// Positional row of the `SEP` token in every generation sequence.
pub const GEN_SEP_POSITION: usize = 2 + BOX_TOKENS * MAX_LAYOUT_BOXES;

/// Maps token indices to positional-embedding rows.
///
/// In a generation sequence `SEP` and everything after it move to the rows
/// they would occupy behind a full-length layout, as if unattended padding
/// sat between the layout and `SEP`. Every image cell then keeps one row
/// whatever the layout length. Other sequences use their indices directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PositionMap {
    from: usize,
    shift: usize,
}

impl PositionMap {
    pub fn for_tokens(ids: &[TokenId]) -> Self {
        if ids.get(1) != Some(&TASK_GEN) {
            return Self::default();
        }
        match ids.iter().position(|&t| t == SEP) {
            Some(s) => Self { from: s, shift: GEN_SEP_POSITION.saturating_sub(s) },
            None => Self::default(),
        }
    }

    pub fn row(&self, i: usize) -> usize {
        if i >= self.from {
            i + self.shift
        } else {
            i
        }
    }
}
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Deliberate errors injected into the reverse sweep; used as negative
/// controls for the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the GELU derivative by 1.01.
    GeluSlope,
    /// Drops the mean-subtraction term of the layer-norm backward rule.
    LayerNormMean,
}

pub(crate) struct LnTrace {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

pub(crate) struct LayerTrace {
    ln1: LnTrace,
    h1: Vec<f64>,
    pub(crate) qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    ln2: LnTrace,
    h2: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

/// Recorded forward computation: everything the reverse sweep needs.
pub struct Forward {
    pub(crate) ids: Vec<TokenId>,
    pub(crate) layers: Vec<LayerTrace>,
    lnf: LnTrace,
    /// Final normalized hidden states, `T x d`.
    pub(crate) hidden: Vec<f64>,
    pub logits: LogitsTable,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64], y: &mut [f64]) -> LnTrace {
    let t = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            y[i * d + j] = xh * gain[j] + bias[j];
        }
    }
    LnTrace { xhat, rstd }
}

/// Accumulates the layer-norm input gradient into `dx` and parameter
/// gradients into `dgain`/`dbias`.
fn layer_norm_backward(
    dy: &[f64],
    d: usize,
    gain: &[f64],
    trace: &LnTrace,
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    fault: Option<BackwardFault>,
) {
    let t = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &trace.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        if fault == Some(BackwardFault::LayerNormMean) {
            mean_dxhat = 0.0;
        }
        let r = trace.rstd[i];
        for j in 0..d {
            dx[i * d + j] += r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// Masked causal softmax of each row of a `t x t` score block, in place.
fn causal_softmax(scores: &mut [f64], t: usize) {
    for i in 0..t {
        let row = &mut scores[i * t..(i + 1) * t];
        let max = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row[..=i].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..=i].iter_mut() {
            *v /= sum;
        }
        row[i + 1..].fill(0.0);
    }
}

impl Policy {
    /// Teacher-forced forward pass producing one logits row per target
    /// position of `seq` (row for position `p` is read from position `p-1`,
    /// scored by the head of `p`'s role).
    pub fn forward(&self, seq: &TokenSeq) -> Result<Forward> {
        if seq.ids.len() != seq.roles.len() {
            return Err(Error::Contract("token and role counts differ".into()));
        }
        let rows: Vec<(usize, Head)> = seq
            .roles
            .iter()
            .enumerate()
            .filter_map(|(p, &r)| Head::for_role(r).map(|h| (p, h)))
            .collect();
        self.forward_rows(&seq.ids, rows)
    }

    pub(crate) fn forward_rows(&self, ids: &[TokenId], rows: Vec<(usize, Head)>) -> Result<Forward> {
        let cfg = &self.arch.config;
        let off = &self.arch.offsets;
        let (t, d, f, nh) = (ids.len(), cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = cfg.head_dim();
        if t == 0 {
            return Err(Error::Contract("empty sequence".into()));
        }
        let rows_of = PositionMap::for_tokens(ids);
        if rows_of.row(t - 1) >= cfg.context {
            return Err(Error::Length { len: rows_of.row(t - 1) + 1, context: cfg.context });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= VOCAB_SIZE) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary")));
        }
        if rows.iter().any(|&(p, _)| p == 0 || p >= t) {
            return Err(Error::Contract("target rows must lie in 1..len".into()));
        }
        let p = &self.params;

        let mut x = vec![0.0; t * d];
        for (i, &id) in ids.iter().enumerate() {
            let te = &p[off.tok_emb + id as usize * d..][..d];
            let pe = &p[off.pos_emb + rows_of.row(i) * d..][..d];
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }

        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lo in &off.layers {
            let mut h1 = vec![0.0; t * d];
            let ln1 = layer_norm(&x, d, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d], &mut h1);

            let mut qkv = vec![0.0; t * 3 * d];
            gemm(t, d, 3 * d, &h1, View::rm(0, d), p, View::rm(lo.wqkv, 3 * d), 0.0, &mut qkv, View::rm(0, 3 * d));
            add_bias(&mut qkv, &p[lo.bqkv..][..3 * d]);

            let mut probs = vec![0.0; nh * t * t];
            let mut att = vec![0.0; t * d];
            for h in 0..nh {
                let block = &mut probs[h * t * t..(h + 1) * t * t];
                gemm(
                    t, dh, t,
                    &qkv, View::strided(h * dh, 3 * d),
                    &qkv, View { offset: d + h * dh, rs: 1, cs: 3 * d },
                    0.0, block, View::rm(0, t),
                );
                block.iter_mut().for_each(|s| *s *= scale);
                causal_softmax(block, t);
                gemm(
                    t, t, dh,
                    block, View::rm(0, t),
                    &qkv, View::strided(2 * d + h * dh, 3 * d),
                    0.0, &mut att, View::strided(h * dh, d),
                );
            }

            gemm(t, d, d, &att, View::rm(0, d), p, View::rm(lo.wo, d), 1.0, &mut x, View::rm(0, d));
            add_bias(&mut x, &p[lo.bo..][..d]);

            let mut h2 = vec![0.0; t * d];
            let ln2 = layer_norm(&x, d, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d], &mut h2);
            let mut u = vec![0.0; t * f];
            gemm(t, d, f, &h2, View::rm(0, d), p, View::rm(lo.w1, f), 0.0, &mut u, View::rm(0, f));
            add_bias(&mut u, &p[lo.b1..][..f]);
            let act: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
            gemm(t, f, d, &act, View::rm(0, f), p, View::rm(lo.w2, d), 1.0, &mut x, View::rm(0, d));
            add_bias(&mut x, &p[lo.b2..][..d]);

            layers.push(LayerTrace { ln1, h1, qkv, probs, att, ln2, h2, u, act });
        }

        let mut hidden = vec![0.0; t * d];
        let lnf = layer_norm(&x, d, &p[off.lnf_g..][..d], &p[off.lnf_b..][..d], &mut hidden);

        let mut logits = vec![0.0; rows.len() * VOCAB_SIZE];
        for (r, &(pos, head)) in rows.iter().enumerate() {
            let (w, b) = off.head(head);
            super::linalg::vec_mat(
                &hidden[(pos - 1) * d..pos * d],
                &p[w..w + d * VOCAB_SIZE],
                &p[b..b + VOCAB_SIZE],
                &mut logits[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE],
            );
        }
        let targets = rows.iter().map(|&(pos, _)| ids[pos]).collect();
        Ok(Forward {
            ids: ids.to_vec(),
            layers,
            lnf,
            hidden,
            logits: LogitsTable {
                positions: rows.iter().map(|&(pos, _)| pos).collect(),
                heads: rows.iter().map(|&(_, h)| h).collect(),
                targets,
                data: logits,
            },
        })
    }

    /// Reverse sweep: accumulates `d loss / d params` into `grads` given
    /// `d loss / d logits` (same layout as `fwd.logits.data`).
    pub fn backward(&self, fwd: &Forward, dlogits: &[f64], grads: &mut [f64]) {
        self.backward_with_fault(fwd, dlogits, grads, None)
    }

    pub fn backward_with_fault(
        &self,
        fwd: &Forward,
        dlogits: &[f64],
        grads: &mut [f64],
        fault: Option<BackwardFault>,
    ) {
        let cfg = &self.arch.config;
        let off = &self.arch.offsets;
        let (t, d, f, nh) = (fwd.ids.len(), cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = cfg.head_dim();
        let p = &self.params;
        assert_eq!(dlogits.len(), fwd.logits.data.len(), "dlogits shape mismatch");
        assert_eq!(grads.len(), p.len(), "gradient buffer shape mismatch");

        // Output heads.
        let mut dhidden = vec![0.0; t * d];
        for (r, (&pos, &head)) in fwd.logits.positions.iter().zip(&fwd.logits.heads).enumerate() {
            let (w, b) = off.head(head);
            let dl = &dlogits[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE];
            if dl.iter().all(|&g| g == 0.0) {
                continue;
            }
            let hrow = &fwd.hidden[(pos - 1) * d..pos * d];
            for (gb, &g) in grads[b..b + VOCAB_SIZE].iter_mut().zip(dl) {
                *gb += g;
            }
            for i in 0..d {
                let gw = &mut grads[w + i * VOCAB_SIZE..w + (i + 1) * VOCAB_SIZE];
                let wrow = &p[w + i * VOCAB_SIZE..w + (i + 1) * VOCAB_SIZE];
                let mut acc = 0.0;
                for v in 0..VOCAB_SIZE {
                    gw[v] += hrow[i] * dl[v];
                    acc += wrow[v] * dl[v];
                }
                dhidden[(pos - 1) * d + i] += acc;
            }
        }

        let mut dx = vec![0.0; t * d];
        {
            let (dg, db) = split_two(grads, off.lnf_g, off.lnf_b, d);
            layer_norm_backward(&dhidden, d, &p[off.lnf_g..][..d], &fwd.lnf, &mut dx, dg, db, fault);
        }

        let scale = 1.0 / (dh as f64).sqrt();
        for (lo, lt) in off.layers.iter().zip(&fwd.layers).rev() {
            // MLP branch: x += gelu(h2·W1 + b1)·W2 + b2.
            add_col_sums(&mut grads[lo.b2..lo.b2 + d], &dx);
            gemm(f, t, d, &lt.act, View::tr(0, f), &dx, View::rm(0, d), 1.0, grads, View::rm(lo.w2, d));
            let mut du = vec![0.0; t * f];
            gemm(t, d, f, &dx, View::rm(0, d), p, View::tr(lo.w2, d), 0.0, &mut du, View::rm(0, f));
            let slope = if fault == Some(BackwardFault::GeluSlope) { 1.01 } else { 1.0 };
            for (g, &u) in du.iter_mut().zip(&lt.u) {
                *g *= gelu_grad(u) * slope;
            }
            add_col_sums(&mut grads[lo.b1..lo.b1 + f], &du);
            gemm(d, t, f, &lt.h2, View::tr(0, d), &du, View::rm(0, f), 1.0, grads, View::rm(lo.w1, f));
            let mut dh2 = vec![0.0; t * d];
            gemm(t, f, d, &du, View::rm(0, f), p, View::tr(lo.w1, f), 0.0, &mut dh2, View::rm(0, d));
            {
                let (dg, db) = split_two(grads, lo.ln2_g, lo.ln2_b, d);
                layer_norm_backward(&dh2, d, &p[lo.ln2_g..][..d], &lt.ln2, &mut dx, dg, db, fault);
            }

            // Attention branch: x += attn(h1)·Wo + bo.
            add_col_sums(&mut grads[lo.bo..lo.bo + d], &dx);
            gemm(d, t, d, &lt.att, View::tr(0, d), &dx, View::rm(0, d), 1.0, grads, View::rm(lo.wo, d));
            let mut datt = vec![0.0; t * d];
            gemm(t, d, d, &dx, View::rm(0, d), p, View::tr(lo.wo, d), 0.0, &mut datt, View::rm(0, d));

            let mut dqkv = vec![0.0; t * 3 * d];
            let mut dscores = vec![0.0; t * t];
            for h in 0..nh {
                let probs = &lt.probs[h * t * t..(h + 1) * t * t];
                // dP = dO · V^T
                gemm(
                    t, dh, t,
                    &datt, View::strided(h * dh, d),
                    &lt.qkv, View { offset: 2 * d + h * dh, rs: 1, cs: 3 * d },
                    0.0, &mut dscores, View::rm(0, t),
                );
                // dV = P^T · dO
                gemm(
                    t, t, dh,
                    probs, View::tr(0, t),
                    &datt, View::strided(h * dh, d),
                    0.0, &mut dqkv, View::strided(2 * d + h * dh, 3 * d),
                );
                // Softmax backward, folded with the score scale.
                for i in 0..t {
                    let pr = &probs[i * t..(i + 1) * t];
                    let ds = &mut dscores[i * t..(i + 1) * t];
                    let inner: f64 = (0..=i).map(|j| pr[j] * ds[j]).sum();
                    for j in 0..=i {
                        ds[j] = pr[j] * (ds[j] - inner) * scale;
                    }
                    ds[i + 1..].fill(0.0);
                }
                // dQ = dS · K, dK = dS^T · Q
                gemm(
                    t, t, dh,
                    &dscores, View::rm(0, t),
                    &lt.qkv, View::strided(d + h * dh, 3 * d),
                    0.0, &mut dqkv, View::strided(h * dh, 3 * d),
                );
                gemm(
                    t, t, dh,
                    &dscores, View::tr(0, t),
                    &lt.qkv, View::strided(h * dh, 3 * d),
                    0.0, &mut dqkv, View::strided(d + h * dh, 3 * d),
                );
            }
            add_col_sums(&mut grads[lo.bqkv..lo.bqkv + 3 * d], &dqkv);
            gemm(d, t, 3 * d, &lt.h1, View::tr(0, d), &dqkv, View::rm(0, 3 * d), 1.0, grads, View::rm(lo.wqkv, 3 * d));
            let mut dh1 = vec![0.0; t * d];
            gemm(t, 3 * d, d, &dqkv, View::rm(0, 3 * d), p, View::tr(lo.wqkv, 3 * d), 0.0, &mut dh1, View::rm(0, d));
            {
                let (dg, db) = split_two(grads, lo.ln1_g, lo.ln1_b, d);
                layer_norm_backward(&dh1, d, &p[lo.ln1_g..][..d], &lt.ln1, &mut dx, dg, db, fault);
            }
        }

        let rows_of = PositionMap::for_tokens(&fwd.ids);
        for (i, &id) in fwd.ids.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            let te = off.tok_emb + id as usize * d;
            let pe = off.pos_emb + rows_of.row(i) * d;
            for j in 0..d {
                grads[te + j] += row[j];
                grads[pe + j] += row[j];
            }
        }
    }
}

/// Disjoint mutable views of two `len`-long tensors at offsets `a < b`.
fn split_two(buf: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a + len <= b, "tensors overlap");
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-9, "u={u}");
        }
    }

    #[test]
    fn causal_softmax_rows_sum_to_one() {
        let t = 4;
        let mut s: Vec<f64> = (0..t * t).map(|i| (i as f64).sin()).collect();
        causal_softmax(&mut s, t);
        for i in 0..t {
            let row = &s[i * t..(i + 1) * t];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }
}

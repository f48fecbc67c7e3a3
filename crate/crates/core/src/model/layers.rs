use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::graph::Edge;

/// Per-head parameters of one Res-RGAT layer.
#[derive(Clone, Copy, Debug)]
pub struct RgatLayerVars {
    /// `d_in × d_in` vertex projection.
    pub p: Var,
    /// `d_e × d_in` edge projection.
    pub q: Var,
    /// `d_in × 1` attention vectors for the destination, source and edge
    /// parts of the logit.
    pub a_dst: Var,
    pub a_src: Var,
    pub a_edge: Var,
}

/// One Res-RGAT layer. For edge `j → i` of type `r`, head `h` scores
/// `LeakyReLU(a_dstᵀ P x_i + a_srcᵀ P x_j + a_edgeᵀ Q r)`, normalizes over
/// the in-edges of `i` and sums `α (P x_j + Q r)`. Heads are averaged and
/// the result is `[H ; message] · W`.
///
/// Returns the layer output and each head's `|E| × 1` attention column.
pub fn res_rgat_layer(
    tape: &mut Tape,
    h: Var,
    r: Var,
    heads: &[RgatLayerVars],
    w: Var,
    edges: &[Edge],
    slope: f64,
) -> (Var, Vec<Var>) {
    let n = tape.value(h).rows();
    let src: Vec<usize> = edges.iter().map(|e| e.src).collect();
    let dst: Vec<usize> = edges.iter().map(|e| e.dst).collect();
    let ty: Vec<usize> = edges.iter().map(|e| e.ty).collect();
    let mut messages = Vec::with_capacity(heads.len());
    let mut alphas = Vec::with_capacity(heads.len());
    for hv in heads {
        let xp = tape.matmul(h, hv.p);
        let rq = tape.matmul(r, hv.q);
        let s_dst = tape.matmul(xp, hv.a_dst);
        let s_src = tape.matmul(xp, hv.a_src);
        let s_edge = tape.matmul(rq, hv.a_edge);
        let e_dst = tape.gather_rows(s_dst, dst.clone());
        let e_src = tape.gather_rows(s_src, src.clone());
        let e_edge = tape.gather_rows(s_edge, ty.clone());
        let sum = tape.add(e_dst, e_src);
        let sum = tape.add(sum, e_edge);
        let logit = tape.leaky_relu(sum, slope);
        let alpha = tape.segment_softmax(logit, dst.clone());
        let x_src = tape.gather_rows(xp, src.clone());
        let r_edge = tape.gather_rows(rq, ty.clone());
        let content = tape.add(x_src, r_edge);
        let weighted = tape.scale_rows(content, alpha);
        messages.push((tape.segment_sum(weighted, dst.clone(), n), 1.0 / heads.len() as f64));
        alphas.push(alpha);
    }
    let message = tape.weighted_sum(messages);
    let joined = tape.concat_cols(h, message);
    (tape.matmul(joined, w), alphas)
}

/// `F(a, b) = [a − b ; a ⊙ b]`, row-wise.
pub fn diff_compare(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let p = tape.mul(a, b);
    tape.concat_cols(d, p)
}

/// Gated recurrent cell with fused gate weights (`reset | update | new`):
///
/// ```text
/// r  = σ(x W_i[r] + b_i[r] + h W_h[r] + b_h[r])
/// z  = σ(x W_i[z] + b_i[z] + h W_h[z] + b_h[z])
/// n  = tanh(x W_i[n] + b_i[n] + r ⊙ (h W_h[n] + b_h[n]))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, w_i: Var, w_h: Var, b_i: Var, b_h: Var) -> Var {
    let d = tape.value(h).cols();
    let gi = tape.matmul(x, w_i);
    let gi = tape.add_row(gi, b_i);
    let gh = tape.matmul(h, w_h);
    let gh = tape.add_row(gh, b_h);
    let gate = |tape: &mut Tape, k: usize| {
        let a = tape.slice_cols(gi, k * d, d);
        let b = tape.slice_cols(gh, k * d, d);
        let s = tape.add(a, b);
        tape.sigmoid(s)
    };
    let r = gate(tape, 0);
    let z = gate(tape, 1);
    let in_n = tape.slice_cols(gi, 2 * d, d);
    let hn = tape.slice_cols(gh, 2 * d, d);
    let rh = tape.mul(r, hn);
    let pre = tape.add(in_n, rh);
    let nn = tape.tanh(pre);
    let keep = tape.affine(z, -1.0, 1.0);
    let a = tape.mul(keep, nn);
    let b = tape.mul(z, h);
    tape.add(a, b)
}

//! Dilated neighborhood attention: each pixel attends to a k x k window of
//! pixels within its dilation residue class, with windows shifted (never
//! shrunk) at borders so every query sees exactly k^2 keys.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::nn::{Fwd, Init, Linear, ParamRegistry};
use crate::tensor::Tensor;

/// Flat neighbor indices (k^2 per pixel) for an H x W map.
pub(crate) fn build_neighbors(
    h: usize,
    w: usize,
    kernel: usize,
    dilation: usize,
) -> Result<Vec<u32>> {
    if dilation == 0 {
        return Err(Error::config("dilation must be >= 1"));
    }
    if h / dilation < kernel || w / dilation < kernel {
        return Err(Error::config(format!(
            "{h}x{w} map cannot host a {kernel}x{kernel} window at dilation {dilation}"
        )));
    }
    let axis = |len: usize, idx: usize| -> Vec<usize> {
        let residue = idx % dilation;
        let pos = idx / dilation;
        let sub_len = (len - residue).div_ceil(dilation);
        let start = pos
            .saturating_sub(kernel / 2)
            .min(sub_len - kernel);
        (0..kernel).map(|t| residue + (start + t) * dilation).collect()
    };
    let mut out = Vec::with_capacity(h * w * kernel * kernel);
    for i in 0..h {
        let rows = axis(h, i);
        for j in 0..w {
            let cols = axis(w, j);
            for &r in &rows {
                for &c in &cols {
                    out.push((r * w + c) as u32);
                }
            }
        }
    }
    Ok(out)
}

/// Multi-head attention restricted to precomputed neighbor sets. Returns the
/// output and a copy of the attention weights laid out as
/// `[batch, pixel, head, neighbor]`.
pub(crate) fn na_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    neighbors: &[u32],
    k2: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let shape = q.shape().to_vec();
    if shape.len() != 4 || k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
        return Err(Error::Shape {
            op: "na_core",
            lhs: shape.clone(),
            rhs: k.shape().to_vec(),
        });
    }
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let p_count = h * w;
    if c % heads != 0 {
        return Err(Error::config(format!("{c} channels not divisible by {heads} heads")));
    }
    if neighbors.len() != p_count * k2 {
        return Err(Error::usage("neighbor table size mismatch"));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let mut out = vec![0.0; b * p_count * c];
    let mut weights = vec![0.0; b * p_count * heads * k2];
    let mut logits = vec![0.0; k2];

    for bi in 0..b {
        for p in 0..p_count {
            let nb = &neighbors[p * k2..(p + 1) * k2];
            for head in 0..heads {
                let off = head * dh;
                let q_vec = &qd[(bi * p_count + p) * c + off..][..dh];
                let mut max = f64::NEG_INFINITY;
                for (n, &nbp) in nb.iter().enumerate() {
                    let k_vec = &kd[(bi * p_count + nbp as usize) * c + off..][..dh];
                    let dot: f64 = q_vec.iter().zip(k_vec).map(|(a, b)| a * b).sum();
                    logits[n] = dot * scale;
                    max = max.max(logits[n]);
                }
                let mut sum = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                let w_base = ((bi * p_count + p) * heads + head) * k2;
                let out_vec = &mut out[(bi * p_count + p) * c + off..][..dh];
                for (n, &nbp) in nb.iter().enumerate() {
                    let s = logits[n] / sum;
                    weights[w_base + n] = s;
                    let v_vec = &vd[(bi * p_count + nbp as usize) * c + off..][..dh];
                    for (o, vv) in out_vec.iter_mut().zip(v_vec) {
                        *o += s * vv;
                    }
                }
            }
        }
    }

    let tape = crate::tensor::tape::common_tape(&[q, k, v])?;
    let mut result = Tensor::with_node(shape, Rc::new(out), None);
    if tape.is_some() {
        let (iq, ik, iv) = (
            crate::tensor::tape::node_id(q),
            crate::tensor::tape::node_id(k),
            crate::tensor::tape::node_id(v),
        );
        let (qd, kd, vd) = (q.share_data(), k.share_data(), v.share_data());
        let saved = Rc::new(weights.clone());
        let nbrs: Rc<Vec<u32>> = Rc::new(neighbors.to_vec());
        crate::tensor::tape::attach(tape, &mut result, move |d, sink| {
            // One pass computes all three gradients; scatter accumulation is
            // single-threaded and deterministic.
            let mut dq = vec![0.0; qd.len()];
            let mut dk = vec![0.0; kd.len()];
            let mut dv = vec![0.0; vd.len()];
            let mut d_s = vec![0.0; k2];
            for bi in 0..b {
                for p in 0..p_count {
                    let nb = &nbrs[p * k2..(p + 1) * k2];
                    for head in 0..heads {
                        let off = head * dh;
                        let d_vec = &d[(bi * p_count + p) * c + off..][..dh];
                        let q_vec = &qd[(bi * p_count + p) * c + off..][..dh];
                        let w_base = ((bi * p_count + p) * heads + head) * k2;
                        let s = &saved[w_base..w_base + k2];

                        let mut dot_ss = 0.0;
                        for (n, &nbp) in nb.iter().enumerate() {
                            let v_vec = &vd[(bi * p_count + nbp as usize) * c + off..][..dh];
                            let g: f64 = d_vec.iter().zip(v_vec).map(|(a, b)| a * b).sum();
                            d_s[n] = g;
                            dot_ss += g * s[n];
                        }
                        for (n, &nbp) in nb.iter().enumerate() {
                            let d_logit = s[n] * (d_s[n] - dot_ss);
                            let kq = d_logit * scale;
                            let k_vec = &kd[(bi * p_count + nbp as usize) * c + off..][..dh];
                            let dq_vec = &mut dq[(bi * p_count + p) * c + off..][..dh];
                            for (g, kv) in dq_vec.iter_mut().zip(k_vec) {
                                *g += kq * kv;
                            }
                            let dk_vec = &mut dk[(bi * p_count + nbp as usize) * c + off..][..dh];
                            for (g, qv) in dk_vec.iter_mut().zip(q_vec) {
                                *g += kq * qv;
                            }
                            let dv_vec = &mut dv[(bi * p_count + nbp as usize) * c + off..][..dh];
                            for (g, dd) in dv_vec.iter_mut().zip(d_vec) {
                                *g += s[n] * dd;
                            }
                        }
                    }
                }
            }
            if let Some(id) = iq {
                sink.accumulate(id, |g| {
                    for (g, v) in g.iter_mut().zip(&dq) {
                        *g += v;
                    }
                });
            }
            if let Some(id) = ik {
                sink.accumulate(id, |g| {
                    for (g, v) in g.iter_mut().zip(&dk) {
                        *g += v;
                    }
                });
            }
            if let Some(id) = iv {
                sink.accumulate(id, |g| {
                    for (g, v) in g.iter_mut().zip(&dv) {
                        *g += v;
                    }
                });
            }
        });
    }
    Ok((result, weights))
}

/// One neighborhood-attention depth with query/key/value/output projections.
pub struct NeighborhoodAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl NeighborhoodAttention {
    pub fn new(
        reg: &mut ParamRegistry,
        init: &mut Init,
        name: &str,
        channels: usize,
        heads: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<NeighborhoodAttention> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!("window kernel must be odd, got {kernel}")));
        }
        Ok(NeighborhoodAttention {
            wq: Linear::new(reg, init, &format!("{name}.wq"), channels, channels)?,
            wk: Linear::new(reg, init, &format!("{name}.wk"), channels, channels)?,
            wv: Linear::new(reg, init, &format!("{name}.wv"), channels, channels)?,
            wo: Linear::new(reg, init, &format!("{name}.wo"), channels, channels)?,
            heads,
            kernel,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let (y, _) = self.forward_with_weights(x, fwd)?;
        Ok(y)
    }

    pub fn forward_with_weights(&self, x: &Tensor, fwd: &Fwd) -> Result<(Tensor, Vec<f64>)> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::usage(format!("expected [b, h, w, c], got {s:?}")));
        }
        let neighbors = build_neighbors(s[1], s[2], self.kernel, self.dilation)?;
        let q = self.wq.forward(x, fwd)?;
        let k = self.wk.forward(x, fwd)?;
        let v = self.wv.forward(x, fwd)?;
        let (core, weights) = na_core(&q, &k, &v, self.heads, &neighbors, self.kernel * self.kernel)?;
        Ok((self.wo.forward(&core, fwd)?, weights))
    }
}

/// Stacked neighborhood-attention depths, one dilation per depth. The outer
/// residual is the caller's.
pub struct DinatBlock {
    pub depths: Vec<NeighborhoodAttention>,
}

impl DinatBlock {
    pub fn new(
        reg: &mut ParamRegistry,
        init: &mut Init,
        name: &str,
        channels: usize,
        heads: usize,
        kernel: usize,
        dilations: &[usize],
    ) -> Result<DinatBlock> {
        if dilations.is_empty() {
            return Err(Error::config("dinat needs at least one depth"));
        }
        let depths = dilations
            .iter()
            .enumerate()
            .map(|(i, &dil)| {
                NeighborhoodAttention::new(
                    reg,
                    init,
                    &format!("{name}.d{i}"),
                    channels,
                    heads,
                    kernel,
                    dil,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DinatBlock { depths })
    }

    pub fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let mut h = x.clone();
        for na in &self.depths {
            h = na.forward(&h, fwd)?;
        }
        Ok(h)
    }
}

//! Agent-wise attention: multi-head self-attention whose tokens are the L
//! agent features at each spatial location, evaluated independently per cell.

use crate::error::{Error, Result};
use crate::tensor::nn::{Fwd, Init, Linear, ParamRegistry};
use crate::tensor::Tensor;

const MASKED_LOGIT: f64 = -1e30;

pub struct AgentAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub heads: usize,
}

impl AgentAttention {
    pub fn new(
        reg: &mut ParamRegistry,
        init: &mut Init,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Result<AgentAttention> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(format!(
                "{heads} heads do not divide {channels} channels"
            )));
        }
        Ok(AgentAttention {
            wq: Linear::new(reg, init, &format!("{name}.wq"), channels, channels)?,
            wk: Linear::new(reg, init, &format!("{name}.wk"), channels, channels)?,
            wv: Linear::new(reg, init, &format!("{name}.wv"), channels, channels)?,
            wo: Linear::new(reg, init, &format!("{name}.wo"), channels, channels)?,
            heads,
        })
    }

    /// `x`: `[L, H, W, c]`; `validity`: per-cell weights `[L, H, W]`, where a
    /// cell is a usable key iff its validity is > 0. Cells with no valid key
    /// at their location produce an exact 0 (the caller's residual remains).
    ///
    /// Returns the attended features and, on request, the attention matrix
    /// averaged over heads and space (`L x L`, query-major).
    pub fn forward(
        &self,
        x: &Tensor,
        validity: &[f64],
        fwd: &Fwd,
        want_trace: bool,
    ) -> Result<(Tensor, Option<Vec<f64>>)> {
        let s = x.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::usage(format!("expected [l, h, w, c], got {s:?}")));
        }
        let (l, h, w, c) = (s[0], s[1], s[2], s[3]);
        let cells = h * w;
        if validity.len() != l * cells {
            return Err(Error::usage("validity length mismatch"));
        }
        let heads = self.heads;
        let dh = c / heads;

        let q = self.wq.forward(x, fwd)?;
        let k = self.wk.forward(x, fwd)?;
        let v = self.wv.forward(x, fwd)?;

        // [L, H, W, c] -> [cells * heads, L, dh]
        let tokens = |t: &Tensor| -> Result<Tensor> {
            t.reshape(vec![l, cells, heads, dh])?
                .permute(&[1, 2, 0, 3])?
                .reshape(vec![cells * heads, l, dh])
        };
        let qt = tokens(&q)?;
        let kt = tokens(&k)?;
        let vt = tokens(&v)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let scores = qt.bmm_t(&kt)?.scale(scale)?;

        // Additive key mask and per-location "any valid key" indicator.
        let mut mask = vec![0.0; cells * heads * l * l];
        let mut any_valid = vec![0.0; cells];
        for cell in 0..cells {
            let mut any = false;
            for key in 0..l {
                if validity[key * cells + cell] > 0.0 {
                    any = true;
                } else {
                    for head in 0..heads {
                        let base = ((cell * heads + head) * l) * l;
                        for query in 0..l {
                            mask[base + query * l + key] = MASKED_LOGIT;
                        }
                    }
                }
            }
            any_valid[cell] = if any { 1.0 } else { 0.0 };
        }
        let mask = Tensor::from_vec(vec![cells * heads, l, l], mask)?;
        let attn = scores.add(&mask)?.softmax(2)?;

        let trace = want_trace.then(|| {
            let mut mean = vec![0.0; l * l];
            let groups = (cells * heads) as f64;
            for block in attn.data().chunks_exact(l * l) {
                for (m, a) in mean.iter_mut().zip(block) {
                    *m += a / groups;
                }
            }
            mean
        });

        let mixed = attn.bmm(&vt)?;
        // [cells * heads, L, dh] -> [L, H, W, c]
        let back = mixed
            .reshape(vec![cells, heads, l, dh])?
            .permute(&[2, 0, 1, 3])?
            .reshape(vec![l, h, w, c])?;
        let projected = self.wo.forward(&back, fwd)?;

        // Zero out locations that had no valid key at all.
        let mut gate = vec![0.0; l * cells * c];
        for slot in 0..l {
            for cell in 0..cells {
                if any_valid[cell] == 1.0 {
                    let base = (slot * cells + cell) * c;
                    gate[base..base + c].fill(1.0);
                }
            }
        }
        let gate = Tensor::from_vec(vec![l, h, w, c], gate)?;
        Ok((projected.mul(&gate)?, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(channels: usize, heads: usize) -> (ParamRegistry, AgentAttention) {
        let mut reg = ParamRegistry::new();
        let mut init = Init::from_seed(23);
        let a = AgentAttention::new(&mut reg, &mut init, "aatt", channels, heads).unwrap();
        (reg, a)
    }

    #[test]
    fn single_agent_attends_to_itself_exactly() {
        let (_reg, att) = build(8, 2);
        let x = Tensor::from_vec(
            vec![1, 2, 3, 8],
            (0..48).map(|v| (v % 11) as f64 * 0.2 - 1.0).collect(),
        )
        .unwrap();
        let validity = vec![1.0; 6];
        let fwd = Fwd::inference();
        let (y, trace) = att.forward(&x, &validity, &fwd, true).unwrap();
        // Softmax over one token is exactly 1.
        for t in trace.unwrap() {
            assert_eq!(t, 1.0);
        }
        // Output equals out-projection of value-projection.
        let manual = att
            .wo
            .forward(&att.wv.forward(&x, &fwd).unwrap(), &fwd)
            .unwrap();
        for (a, b) in y.data().iter().zip(manual.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_via_trace() {
        let (_reg, att) = build(8, 2);
        let l = 3;
        let x = Tensor::from_vec(
            vec![l, 2, 2, 8],
            (0..l * 4 * 8).map(|v| ((v * 7) % 13) as f64 * 0.1).collect(),
        )
        .unwrap();
        let validity = vec![1.0; l * 4];
        let (_y, trace) = att
            .forward(&x, &validity, &Fwd::inference(), true)
            .unwrap();
        let t = trace.unwrap();
        for query in 0..l {
            let row: f64 = (0..l).map(|key| t[query * l + key]).sum();
            assert!((row - 1.0).abs() < 1e-9, "row {query} sums to {row}");
        }
    }

    #[test]
    fn masked_slots_neither_contribute_nor_receive() {
        let (_reg, att) = build(8, 1);
        let l = 3;
        let cells = 4;
        let mut data: Vec<f64> = (0..l * cells * 8)
            .map(|v| ((v * 5) % 17) as f64 * 0.1 - 0.5)
            .collect();
        let mut validity = vec![1.0; l * cells];
        // Agent 2 is entirely invalid; its features are arbitrary garbage.
        for cell in 0..cells {
            validity[2 * cells + cell] = 0.0;
        }
        let x1 = Tensor::from_vec(vec![l, 2, 2, 8], data.clone()).unwrap();
        let fwd = Fwd::inference();
        let (y1, _) = att.forward(&x1, &validity, &fwd, false).unwrap();

        for v in data[2 * cells * 8..].iter_mut() {
            *v = 1e6;
        }
        let x2 = Tensor::from_vec(vec![l, 2, 2, 8], data).unwrap();
        let (y2, _) = att.forward(&x2, &validity, &fwd, false).unwrap();

        // Valid slots' outputs are unchanged bit for bit.
        let slot = cells * 8;
        assert_eq!(y1.data()[..2 * slot], y2.data()[..2 * slot]);
    }

    #[test]
    fn all_masked_location_outputs_exact_zero() {
        let (_reg, att) = build(8, 2);
        let l = 2;
        let x = Tensor::from_vec(
            vec![l, 1, 2, 8],
            (0..l * 2 * 8).map(|v| v as f64 * 0.3).collect(),
        )
        .unwrap();
        // Location 0 has no valid keys; location 1 is fine.
        let validity = vec![0.0, 1.0, 0.0, 1.0];
        let (y, _) = att.forward(&x, &validity, &Fwd::inference(), false).unwrap();
        for slot in 0..l {
            for ch in 0..8 {
                assert_eq!(y.data()[(slot * 2) * 8 + ch], 0.0);
                assert_ne!(y.data()[(slot * 2 + 1) * 8 + ch], 0.0);
            }
        }
    }

    #[test]
    fn permuting_aux_slots_permutes_outputs() {
        let (_reg, att) = build(8, 2);
        let l = 3;
        let cells = 6;
        let data: Vec<f64> = (0..l * cells * 8)
            .map(|v| ((v * 11) % 23) as f64 * 0.07 - 0.6)
            .collect();
        let mut validity = vec![1.0; l * cells];
        validity[cells + 2] = 0.0; // make the mask nontrivial

        let x = Tensor::from_vec(vec![l, 2, 3, 8], data.clone()).unwrap();
        let fwd = Fwd::inference();
        let (y, _) = att.forward(&x, &validity, &fwd, false).unwrap();

        // Swap aux slots 1 and 2 (ego stays slot 0).
        let slot = cells * 8;
        let mut swapped = data;
        for i in 0..slot {
            swapped.swap(slot + i, 2 * slot + i);
        }
        let mut swapped_validity = validity.clone();
        for i in 0..cells {
            swapped_validity.swap(cells + i, 2 * cells + i);
        }

        let x2 = Tensor::from_vec(vec![l, 2, 3, 8], swapped).unwrap();
        let (y2, _) = att.forward(&x2, &swapped_validity, &fwd, false).unwrap();

        // Slot 0 unchanged; slots 1 and 2 exchanged. Key order changes the
        // float summation order, so equality holds to rounding noise only
        // (bit-exact presentation invariance lives in assemble's sorting).
        let close = |a: &[f64], b: &[f64]| {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        };
        close(&y.data()[..slot], &y2.data()[..slot]);
        close(&y.data()[slot..2 * slot], &y2.data()[2 * slot..3 * slot]);
        close(&y.data()[2 * slot..3 * slot], &y2.data()[slot..2 * slot]);
    }
}

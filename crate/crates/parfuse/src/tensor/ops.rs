//! Differentiable tensor operations.
//!
//! Every op computes its forward result eagerly and, when an input is taped,
//! records a backward closure that scatters the output gradient onto the
//! inputs. Backward passes are single-threaded and deterministic: repeated
//! runs with identical inputs produce bit-identical gradients.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::tape::{attach, common_tape, node_id};
use crate::tensor::{element_count, Tensor};

// ── shape helpers ────────────────────────────────────────────────────────────

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn axpy(acc: &mut [f64], scale: f64, row: &[f64]) {
    for (a, r) in acc.iter_mut().zip(row) {
        *a += scale * r;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Tensor {
    // ── elementwise binary ──────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        let tape = common_tape(&[self, other])?;
        let mut out = Tensor::with_node(self.shape().to_vec(), Rc::new(data), None);
        if tape.is_some() {
            let (ia, ib) = (node_id(self), node_id(other));
            attach(tape, &mut out, move |d, sink| {
                for id in [ia, ib].into_iter().flatten() {
                    sink.accumulate(id, |g| axpy(g, 1.0, d));
                }
            });
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        let tape = common_tape(&[self, other])?;
        let mut out = Tensor::with_node(self.shape().to_vec(), Rc::new(data), None);
        if tape.is_some() {
            let (ia, ib) = (node_id(self), node_id(other));
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| axpy(g, 1.0, d));
                }
                if let Some(id) = ib {
                    sink.accumulate(id, |g| axpy(g, -1.0, d));
                }
            });
        }
        Ok(out)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let tape = common_tape(&[self, other])?;
        let mut out = Tensor::with_node(self.shape().to_vec(), Rc::new(data), None);
        if tape.is_some() {
            let (ia, ib) = (node_id(self), node_id(other));
            let (da, db) = (self.share_data(), other.share_data());
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for ((g, d), b) in g.iter_mut().zip(d).zip(db.iter()) {
                            *g += d * b;
                        }
                    });
                }
                if let Some(id) = ib {
                    sink.accumulate(id, |g| {
                        for ((g, d), a) in g.iter_mut().zip(d).zip(da.iter()) {
                            *g += d * a;
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    // ── scalar / unary ──────────────────────────────────────────────────────

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a * factor).collect();
        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(self.shape().to_vec(), Rc::new(data), None);
        if tape.is_some() {
            let ia = node_id(self);
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| axpy(g, factor, d));
                }
            });
        }
        Ok(out)
    }

    pub fn add_scalar(&self, value: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a + value).collect();
        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(self.shape().to_vec(), Rc::new(data), None);
        if tape.is_some() {
            let ia = node_id(self);
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| axpy(g, 1.0, d));
                }
            });
        }
        Ok(out)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a.max(0.0)).collect();
        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(self.shape().to_vec(), Rc::new(data), None);
        if tape.is_some() {
            let ia = node_id(self);
            let x = self.share_data();
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for ((g, d), x) in g.iter_mut().zip(d).zip(x.iter()) {
                            if *x > 0.0 {
                                *g += d;
                            }
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|a| a.exp()).collect();
        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(self.shape().to_vec(), Rc::new(data), None);
        if tape.is_some() {
            let ia = node_id(self);
            let y = out.share_data();
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for ((g, d), y) in g.iter_mut().zip(d).zip(y.iter()) {
                            *g += d * y;
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&a| stable_sigmoid(a)).collect();
        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(self.shape().to_vec(), Rc::new(data), None);
        if tape.is_some() {
            let ia = node_id(self);
            let y = out.share_data();
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for ((g, d), y) in g.iter_mut().zip(d).zip(y.iter()) {
                            *g += d * y * (1.0 - y);
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    /// `ln(1 + e^x)`, evaluated without overflow for large |x|.
    pub fn softplus(&self) -> Result<Tensor> {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&a| a.max(0.0) + (-a.abs()).exp().ln_1p())
            .collect();
        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(self.shape().to_vec(), Rc::new(data), None);
        if tape.is_some() {
            let ia = node_id(self);
            let x = self.share_data();
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for ((g, d), &x) in g.iter_mut().zip(d).zip(x.iter()) {
                            *g += d * stable_sigmoid(x);
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    /// Elementwise Huber: `0.5 x^2 / beta` inside `|x| < beta`, `|x| - beta/2`
    /// outside. The derivative is continuous at the junction.
    pub fn huber(&self, beta: f64) -> Result<Tensor> {
        if beta <= 0.0 {
            return Err(Error::config(format!("huber beta must be > 0, got {beta}")));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| {
                if x.abs() < beta {
                    0.5 * x * x / beta
                } else {
                    x.abs() - 0.5 * beta
                }
            })
            .collect();
        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(self.shape().to_vec(), Rc::new(data), None);
        if tape.is_some() {
            let ia = node_id(self);
            let x = self.share_data();
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for ((g, d), &x) in g.iter_mut().zip(d).zip(x.iter()) {
                            *g += d * (x / beta).clamp(-1.0, 1.0);
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    // ── reductions ──────────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(vec![1], Rc::new(vec![total]), None);
        if tape.is_some() {
            let ia = node_id(self);
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    let dv = d[0];
                    sink.accumulate(id, |g| {
                        for g in g.iter_mut() {
                            *g += dv;
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::usage("mean of an empty tensor"));
        }
        let n = self.len() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    // ── shape manipulation ──────────────────────────────────────────────────

    /// Reinterprets the flat buffer under a new shape. No copy; the result
    /// shares both storage and tape node with the source.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n = element_count(&shape)?;
        if n != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        Ok(Tensor::with_node(
            shape,
            self.share_data(),
            self.node().cloned(),
        ))
    }

    /// Reorders axes. `axes` must be a permutation of `0..ndim`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.shape().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::usage(format!(
                "permute axes {:?} invalid for shape {:?}",
                axes,
                self.shape()
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(out_shape.clone(), Rc::new(data), None);
        if tape.is_some() {
            let ia = node_id(self);
            // Inverse permutation maps output axes back onto input axes.
            let mut inverse = vec![0usize; nd];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    let back = permute_data(d, &out_shape, &inverse);
                    sink.accumulate(id, |g| axpy(g, 1.0, &back));
                }
            });
        }
        Ok(out)
    }

    /// Concatenates tensors along `axis`. All other extents must match.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::usage("concat of zero tensors"));
        }
        let nd = parts[0].shape().len();
        if axis >= nd {
            return Err(Error::usage(format!("concat axis {axis} out of range")));
        }
        for p in parts.iter().skip(1) {
            if p.shape().len() != nd
                || p.shape()[..axis] != parts[0].shape()[..axis]
                || p.shape()[axis + 1..] != parts[0].shape()[axis + 1..]
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = parts[0].shape()[..axis].iter().product();
        let inner: usize = parts[0].shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_axis: usize = extents.iter().sum();
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = total_axis;

        let mut data = vec![0.0; outer * total_axis * inner];
        for o in 0..outer {
            let mut off = 0usize;
            for (p, &ext) in parts.iter().zip(&extents) {
                let src = &p.data()[o * ext * inner..(o + 1) * ext * inner];
                let dst_start = (o * total_axis + off) * inner;
                data[dst_start..dst_start + ext * inner].copy_from_slice(src);
                off += ext;
            }
        }

        let refs: Vec<&Tensor> = parts.to_vec();
        let tape = common_tape(&refs)?;
        let mut out = Tensor::with_node(out_shape, Rc::new(data), None);
        if tape.is_some() {
            let ids: Vec<Option<usize>> = parts.iter().map(|p| node_id(p)).collect();
            attach(tape, &mut out, move |d, sink| {
                for o in 0..outer {
                    let mut off = 0usize;
                    for (pi, &ext) in extents.iter().enumerate() {
                        if let Some(id) = ids[pi] {
                            let src_start = (o * total_axis + off) * inner;
                            let dst_start = o * ext * inner;
                            sink.accumulate(id, |g| {
                                axpy(
                                    &mut g[dst_start..dst_start + ext * inner],
                                    1.0,
                                    &d[src_start..src_start + ext * inner],
                                );
                            });
                        }
                        off += ext;
                    }
                }
            });
        }
        Ok(out)
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack0(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::usage("stack of zero tensors"));
        }
        let reshaped: Vec<Tensor> = parts
            .iter()
            .map(|p| {
                let mut s = vec![1usize];
                s.extend_from_slice(p.shape());
                p.reshape(s)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = reshaped.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// Extracts slice `index` along the leading axis, dropping that axis.
    pub fn select0(&self, index: usize) -> Result<Tensor> {
        if self.shape().is_empty() || index >= self.shape()[0] {
            return Err(Error::usage(format!(
                "select0 index {index} out of range for shape {:?}",
                self.shape()
            )));
        }
        let chunk = self.len() / self.shape()[0];
        let data = self.data()[index * chunk..(index + 1) * chunk].to_vec();
        let out_shape = self.shape()[1..].to_vec();
        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(out_shape, Rc::new(data), None);
        if tape.is_some() {
            let ia = node_id(self);
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        axpy(&mut g[index * chunk..(index + 1) * chunk], 1.0, d);
                    });
                }
            });
        }
        Ok(out)
    }

    // ── contractions ────────────────────────────────────────────────────────

    /// `[..., m, k] x [k, n] -> [..., m, n]`. The right operand is shared
    /// across all leading batch dimensions of the left.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ashape, bshape) = (self.shape(), rhs.shape());
        if ashape.len() < 2 || bshape.len() != 2 || ashape[ashape.len() - 1] != bshape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let k = bshape[0];
        let n = bshape[1];
        let rows = self.len() / k; // batch * m collapsed
        let a = self.data();
        let b = rhs.data();
        let mut data = vec![0.0; rows * n];
        for i in 0..rows {
            let out_row = &mut data[i * n..(i + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            for (kk, &av) in a_row.iter().enumerate() {
                axpy(out_row, av, &b[kk * n..(kk + 1) * n]);
            }
        }
        let mut out_shape = ashape.to_vec();
        *out_shape.last_mut().unwrap() = n;

        let tape = common_tape(&[self, rhs])?;
        let mut out = Tensor::with_node(out_shape, Rc::new(data), None);
        if tape.is_some() {
            let (ia, ib) = (node_id(self), node_id(rhs));
            let (a, b) = (self.share_data(), rhs.share_data());
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for i in 0..rows {
                            let d_row = &d[i * n..(i + 1) * n];
                            let g_row = &mut g[i * k..(i + 1) * k];
                            for (kk, gv) in g_row.iter_mut().enumerate() {
                                *gv += dot(d_row, &b[kk * n..(kk + 1) * n]);
                            }
                        }
                    });
                }
                if let Some(id) = ib {
                    sink.accumulate(id, |g| {
                        for i in 0..rows {
                            let d_row = &d[i * n..(i + 1) * n];
                            let a_row = &a[i * k..(i + 1) * k];
                            for (kk, &av) in a_row.iter().enumerate() {
                                axpy(&mut g[kk * n..(kk + 1) * n], av, d_row);
                            }
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    /// Fully connected layer: `[..., k] x [k, n] + bias[n]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let k = *self
            .shape()
            .last()
            .ok_or_else(|| Error::usage("linear on rank-0 tensor"))?;
        if weight.shape().len() != 2 || weight.shape()[0] != k {
            return Err(Error::Shape {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let n = weight.shape()[1];
        if bias.shape() != [n] {
            return Err(Error::Shape {
                op: "linear bias",
                lhs: vec![n],
                rhs: bias.shape().to_vec(),
            });
        }
        let rows = self.len() / k;
        let a = self.data();
        let w = weight.data();
        let mut data = vec![0.0; rows * n];
        for i in 0..rows {
            let out_row = &mut data[i * n..(i + 1) * n];
            out_row.copy_from_slice(bias.data());
            let a_row = &a[i * k..(i + 1) * k];
            for (kk, &av) in a_row.iter().enumerate() {
                axpy(out_row, av, &w[kk * n..(kk + 1) * n]);
            }
        }
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;

        let tape = common_tape(&[self, weight, bias])?;
        let mut out = Tensor::with_node(out_shape, Rc::new(data), None);
        if tape.is_some() {
            let (ia, iw, ib) = (node_id(self), node_id(weight), node_id(bias));
            let (a, w) = (self.share_data(), weight.share_data());
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for i in 0..rows {
                            let d_row = &d[i * n..(i + 1) * n];
                            let g_row = &mut g[i * k..(i + 1) * k];
                            for (kk, gv) in g_row.iter_mut().enumerate() {
                                *gv += dot(d_row, &w[kk * n..(kk + 1) * n]);
                            }
                        }
                    });
                }
                if let Some(id) = iw {
                    sink.accumulate(id, |g| {
                        for i in 0..rows {
                            let d_row = &d[i * n..(i + 1) * n];
                            let a_row = &a[i * k..(i + 1) * k];
                            for (kk, &av) in a_row.iter().enumerate() {
                                axpy(&mut g[kk * n..(kk + 1) * n], av, d_row);
                            }
                        }
                    });
                }
                if let Some(id) = ib {
                    sink.accumulate(id, |g| {
                        for i in 0..rows {
                            axpy(g, 1.0, &d[i * n..(i + 1) * n]);
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    /// Batched matmul `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (self.shape(), rhs.shape());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::Shape {
                op: "bmm",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (bt, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let a = self.data();
        let b = rhs.data();
        let mut data = vec![0.0; bt * m * n];
        for p in 0..bt {
            for i in 0..m {
                let out_row = &mut data[(p * m + i) * n..(p * m + i + 1) * n];
                let a_row = &a[(p * m + i) * k..(p * m + i + 1) * k];
                for (kk, &av) in a_row.iter().enumerate() {
                    axpy(out_row, av, &b[(p * k + kk) * n..(p * k + kk + 1) * n]);
                }
            }
        }
        let tape = common_tape(&[self, rhs])?;
        let mut out = Tensor::with_node(vec![bt, m, n], Rc::new(data), None);
        if tape.is_some() {
            let (ia, ib) = (node_id(self), node_id(rhs));
            let (a, b) = (self.share_data(), rhs.share_data());
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for p in 0..bt {
                            for i in 0..m {
                                let d_row = &d[(p * m + i) * n..(p * m + i + 1) * n];
                                let g_row = &mut g[(p * m + i) * k..(p * m + i + 1) * k];
                                for (kk, gv) in g_row.iter_mut().enumerate() {
                                    *gv +=
                                        dot(d_row, &b[(p * k + kk) * n..(p * k + kk + 1) * n]);
                                }
                            }
                        }
                    });
                }
                if let Some(id) = ib {
                    sink.accumulate(id, |g| {
                        for p in 0..bt {
                            for i in 0..m {
                                let d_row = &d[(p * m + i) * n..(p * m + i + 1) * n];
                                let a_row = &a[(p * m + i) * k..(p * m + i + 1) * k];
                                for (kk, &av) in a_row.iter().enumerate() {
                                    axpy(
                                        &mut g[(p * k + kk) * n..(p * k + kk + 1) * n],
                                        av,
                                        d_row,
                                    );
                                }
                            }
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    /// Batched matmul with transposed right operand:
    /// `[B, m, k] x [B, n, k] -> [B, m, n]`.
    pub fn bmm_t(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (self.shape(), rhs.shape());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[2] {
            return Err(Error::Shape {
                op: "bmm_t",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (bt, m, k, n) = (ash[0], ash[1], ash[2], bsh[1]);
        let a = self.data();
        let b = rhs.data();
        let mut data = vec![0.0; bt * m * n];
        for p in 0..bt {
            for i in 0..m {
                let a_row = &a[(p * m + i) * k..(p * m + i + 1) * k];
                let out_row = &mut data[(p * m + i) * n..(p * m + i + 1) * n];
                for (j, ov) in out_row.iter_mut().enumerate() {
                    *ov = dot(a_row, &b[(p * n + j) * k..(p * n + j + 1) * k]);
                }
            }
        }
        let tape = common_tape(&[self, rhs])?;
        let mut out = Tensor::with_node(vec![bt, m, n], Rc::new(data), None);
        if tape.is_some() {
            let (ia, ib) = (node_id(self), node_id(rhs));
            let (a, b) = (self.share_data(), rhs.share_data());
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for p in 0..bt {
                            for i in 0..m {
                                let d_row = &d[(p * m + i) * n..(p * m + i + 1) * n];
                                let g_row = &mut g[(p * m + i) * k..(p * m + i + 1) * k];
                                for (j, &dv) in d_row.iter().enumerate() {
                                    axpy(g_row, dv, &b[(p * n + j) * k..(p * n + j + 1) * k]);
                                }
                            }
                        }
                    });
                }
                if let Some(id) = ib {
                    sink.accumulate(id, |g| {
                        for p in 0..bt {
                            for i in 0..m {
                                let d_row = &d[(p * m + i) * n..(p * m + i + 1) * n];
                                let a_row = &a[(p * m + i) * k..(p * m + i + 1) * k];
                                for (j, &dv) in d_row.iter().enumerate() {
                                    axpy(
                                        &mut g[(p * n + j) * k..(p * n + j + 1) * k],
                                        dv,
                                        a_row,
                                    );
                                }
                            }
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    // ── softmax ─────────────────────────────────────────────────────────────

    /// Softmax along `axis`, computed with max subtraction for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::usage(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let a = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let x = self.data();
        let mut data = vec![0.0; self.len()];
        for o in 0..outer {
            for inn in 0..inner {
                let base = o * a * inner + inn;
                let mut max = f64::NEG_INFINITY;
                for i in 0..a {
                    max = max.max(x[base + i * inner]);
                }
                let mut sum = 0.0;
                for i in 0..a {
                    let e = (x[base + i * inner] - max).exp();
                    data[base + i * inner] = e;
                    sum += e;
                }
                for i in 0..a {
                    data[base + i * inner] /= sum;
                }
            }
        }
        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(self.shape().to_vec(), Rc::new(data), None);
        if tape.is_some() {
            let ia = node_id(self);
            let y = out.share_data();
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for o in 0..outer {
                            for inn in 0..inner {
                                let base = o * a * inner + inn;
                                let mut dy_dot_y = 0.0;
                                for i in 0..a {
                                    let idx = base + i * inner;
                                    dy_dot_y += d[idx] * y[idx];
                                }
                                for i in 0..a {
                                    let idx = base + i * inner;
                                    g[idx] += y[idx] * (d[idx] - dy_dot_y);
                                }
                            }
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    // ── convolution ─────────────────────────────────────────────────────────

    /// 2D cross-correlation over NHWC input with HWIO weights
    /// (`[k, k, c_in, c_out]`). Output height is `(h + 2 pad - k)/stride + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        padding: usize,
        stride: usize,
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (b, h, w, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, wci, co) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw {
            return Err(Error::config(format!(
                "conv2d kernel must be square, got {kh}x{kw}"
            )));
        }
        if kh % 2 == 0 {
            return Err(Error::config(format!("conv2d kernel must be odd, got {kh}")));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if wci != ci {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if let Some(bt) = bias {
            if bt.shape() != [co] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: vec![co],
                    rhs: bt.shape().to_vec(),
                });
            }
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::config(format!(
                "conv2d input {h}x{w} too small for kernel {k} at padding {padding}"
            )));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;

        let x = self.data();
        let wd = weight.data();
        let mut data = vec![0.0; b * oh * ow * co];
        for bi in 0..b {
            for oi in 0..oh {
                for oj in 0..ow {
                    let out_row = &mut data[((bi * oh + oi) * ow + oj) * co..][..co];
                    if let Some(bt) = bias {
                        out_row.copy_from_slice(bt.data());
                    }
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - padding as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let x_row =
                                &x[((bi * h + ii as usize) * w + jj as usize) * ci..][..ci];
                            let w_base = (ki * k + kj) * ci;
                            for (c, &xv) in x_row.iter().enumerate() {
                                if xv != 0.0 {
                                    axpy(out_row, xv, &wd[(w_base + c) * co..][..co]);
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut inputs: Vec<&Tensor> = vec![self, weight];
        if let Some(bt) = bias {
            inputs.push(bt);
        }
        let tape = common_tape(&inputs)?;
        let mut out = Tensor::with_node(vec![b, oh, ow, co], Rc::new(data), None);
        if tape.is_some() {
            let ix = node_id(self);
            let iw = node_id(weight);
            let ib = bias.and_then(node_id);
            let x = self.share_data();
            let wd = weight.share_data();
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ix {
                    sink.accumulate(id, |g| {
                        for bi in 0..b {
                            for ii in 0..h {
                                for jj in 0..w {
                                    let g_row = &mut g[((bi * h + ii) * w + jj) * ci..][..ci];
                                    for ki in 0..k {
                                        let oi_num = ii + padding;
                                        if oi_num < ki || (oi_num - ki) % stride != 0 {
                                            continue;
                                        }
                                        let oi = (oi_num - ki) / stride;
                                        if oi >= oh {
                                            continue;
                                        }
                                        for kj in 0..k {
                                            let oj_num = jj + padding;
                                            if oj_num < kj || (oj_num - kj) % stride != 0 {
                                                continue;
                                            }
                                            let oj = (oj_num - kj) / stride;
                                            if oj >= ow {
                                                continue;
                                            }
                                            let d_row =
                                                &d[((bi * oh + oi) * ow + oj) * co..][..co];
                                            let w_base = (ki * k + kj) * ci;
                                            for (c, gv) in g_row.iter_mut().enumerate() {
                                                *gv +=
                                                    dot(d_row, &wd[(w_base + c) * co..][..co]);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if let Some(id) = iw {
                    sink.accumulate(id, |g| {
                        for bi in 0..b {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    let d_row = &d[((bi * oh + oi) * ow + oj) * co..][..co];
                                    for ki in 0..k {
                                        let ii = (oi * stride + ki) as isize - padding as isize;
                                        if ii < 0 || ii >= h as isize {
                                            continue;
                                        }
                                        for kj in 0..k {
                                            let jj =
                                                (oj * stride + kj) as isize - padding as isize;
                                            if jj < 0 || jj >= w as isize {
                                                continue;
                                            }
                                            let x_row = &x[((bi * h + ii as usize) * w
                                                + jj as usize)
                                                * ci..][..ci];
                                            let w_base = (ki * k + kj) * ci;
                                            for (c, &xv) in x_row.iter().enumerate() {
                                                if xv != 0.0 {
                                                    axpy(
                                                        &mut g[(w_base + c) * co..][..co],
                                                        xv,
                                                        d_row,
                                                    );
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if let Some(id) = ib {
                    sink.accumulate(id, |g| {
                        for row in d.chunks_exact(co) {
                            axpy(g, 1.0, row);
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    // ── bilinear sampling ───────────────────────────────────────────────────

    /// Samples `self` (shape `[h, w, c]`) at fractional grid coordinates
    /// `(row, col)` per output cell, zero-filling out-of-bounds neighbors.
    /// Returns the `[out_h, out_w, c]` samples plus a coverage mask in
    /// `[0, 1]` per output cell (1 where all four neighbors were in bounds).
    pub fn bilinear_sample(
        &self,
        coords: &[(f64, f64)],
        out_h: usize,
        out_w: usize,
    ) -> Result<(Tensor, Vec<f64>)> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::usage(format!(
                "bilinear_sample expects [h, w, c], got {:?}",
                s
            )));
        }
        if coords.len() != out_h * out_w {
            return Err(Error::usage(format!(
                "bilinear_sample has {} coords for {}x{} output",
                coords.len(),
                out_h,
                out_w
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let x = self.data();
        let mut data = vec![0.0; out_h * out_w * c];
        let mut mask = vec![0.0; out_h * out_w];

        let taps = |gy: f64, gx: f64| -> [(isize, isize, f64); 4] {
            let y0 = gy.floor();
            let x0 = gx.floor();
            let fy = gy - y0;
            let fx = gx - x0;
            let (y0, x0) = (y0 as isize, x0 as isize);
            [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1, (1.0 - fy) * fx),
                (y0 + 1, x0, fy * (1.0 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ]
        };

        for (cell, &(gy, gx)) in coords.iter().enumerate() {
            if !gy.is_finite() || !gx.is_finite() {
                continue;
            }
            let out_row = &mut data[cell * c..(cell + 1) * c];
            let mut cover = 0.0;
            for (yy, xx, wgt) in taps(gy, gx) {
                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize || wgt == 0.0 {
                    continue;
                }
                cover += wgt;
                let src = &x[((yy as usize) * w + xx as usize) * c..][..c];
                axpy(out_row, wgt, src);
            }
            mask[cell] = cover;
        }

        let tape = common_tape(&[self])?;
        let mut out = Tensor::with_node(vec![out_h, out_w, c], Rc::new(data), None);
        if tape.is_some() {
            let ia = node_id(self);
            let coords = coords.to_vec();
            attach(tape, &mut out, move |d, sink| {
                if let Some(id) = ia {
                    sink.accumulate(id, |g| {
                        for (cell, &(gy, gx)) in coords.iter().enumerate() {
                            if !gy.is_finite() || !gx.is_finite() {
                                continue;
                            }
                            let d_row = &d[cell * c..(cell + 1) * c];
                            for (yy, xx, wgt) in taps(gy, gx) {
                                if yy < 0
                                    || yy >= h as isize
                                    || xx < 0
                                    || xx >= w as isize
                                    || wgt == 0.0
                                {
                                    continue;
                                }
                                axpy(
                                    &mut g[((yy as usize) * w + xx as usize) * c..][..c],
                                    wgt,
                                    d_row,
                                );
                            }
                        }
                    });
                }
            });
        }
        Ok((out, mask))
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();

    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += gather_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= gather_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_is_identity() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let out = a.matmul(&eye).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_counted() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let x = t(&[2], &[0.0, 0.0]);
        let y = x.softmax(0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let x = t(&[2], &[1000.0, 0.0]);
        let y = x.softmax(0).unwrap();
        assert!(y.is_finite());
        assert!(y.data()[0] > 1.0 - 1e-12 && y.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[7], &[-3.0, 0.5, 2.0, -1e6, 1e6, 4.0, 0.0]);
        let y = x.softmax(0).unwrap();
        let sum: f64 = y.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_stacks_rows() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2, 3], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let out = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(out.shape(), &[4, 3]);
        assert_eq!(out.data()[..6], *a.data());
        assert_eq!(out.data()[6..], *b.data());

        let bad = t(&[2, 2], &[0.0; 4]);
        assert!(Tensor::concat(&[&a, &bad], 0).is_err());
    }

    #[test]
    fn conv2d_all_ones_hand_counted() {
        // 3x3 ones input, 3x3 ones kernel, pad 1: center sees 9, corners 4.
        let x = Tensor::ones(vec![1, 3, 3, 1]);
        let w = Tensor::ones(vec![3, 3, 1, 1]);
        let out = x.conv2d(&w, None, 1, 1).unwrap();
        let d = out.data();
        assert_eq!(d[4], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[2], 4.0);
        assert_eq!(d[6], 4.0);
        assert_eq!(d[8], 4.0);
    }

    #[test]
    fn conv2d_identity_kernel_is_bit_exact() {
        let x = t(&[1, 2, 2, 2], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, 0.8]);
        // 1x1 kernel holding the channel identity matrix.
        let w = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let out = x.conv2d(&w, None, 0, 1).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn conv2d_rejects_even_kernel_and_zero_stride() {
        let x = Tensor::ones(vec![1, 4, 4, 1]);
        let w_even = Tensor::ones(vec![2, 2, 1, 1]);
        assert!(matches!(
            x.conv2d(&w_even, None, 0, 1),
            Err(Error::Config(_))
        ));
        let w = Tensor::ones(vec![3, 3, 1, 1]);
        assert!(matches!(x.conv2d(&w, None, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let back = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn select0_extracts_slice() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = x.select0(1).unwrap();
        assert_eq!(s.shape(), &[3]);
        assert_eq!(s.data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn bilinear_integer_coords_copy_exactly() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let coords = vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
        let (out, mask) = x.bilinear_sample(&coords, 2, 2).unwrap();
        assert_eq!(out.data(), x.data());
        assert_eq!(mask, vec![1.0; 4]);
    }

    #[test]
    fn bilinear_out_of_bounds_zero_fills() {
        let x = Tensor::ones(vec![2, 2, 1]);
        let (out, mask) = x.bilinear_sample(&[(5.0, 5.0)], 1, 1).unwrap();
        assert_eq!(out.data(), &[0.0]);
        assert_eq!(mask, vec![0.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = crate::tensor::Tape::new();
        let p = crate::tensor::nn::Parameter::new("p", t(&[3], &[1.0, 2.0, 3.0]));
        let x = p.leaf(Some(&tape));
        let loss = x.sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = p.grad_from(&tape, &grads);
        assert_eq!(g, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_2x() {
        let tape = crate::tensor::Tape::new();
        let p = crate::tensor::nn::Parameter::new("p", t(&[2], &[1.0, 2.0]));
        let x = p.leaf(Some(&tape));
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = p.grad_from(&tape, &grads);
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = crate::tensor::Tape::new();
        let p = crate::tensor::nn::Parameter::new("p", t(&[2], &[1.0, 2.0]));
        let x = p.leaf(Some(&tape));
        assert!(tape.backward(&x).is_err());
    }
}

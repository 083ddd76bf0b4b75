//! Trainable parameters, the model-wide registry, and basic layers.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::tape::{attach, common_tape, node_id};
use crate::tensor::{Gradients, Tape, Tensor};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// Forward-pass context: which tape (if any) records gradients, and whether
/// layers run in training mode (batchnorm statistics).
#[derive(Clone, Copy)]
pub struct Fwd<'a> {
    pub tape: Option<&'a Tape>,
    pub train: bool,
}

impl<'a> Fwd<'a> {
    pub fn inference() -> Fwd<'static> {
        Fwd {
            tape: None,
            train: false,
        }
    }

    pub fn train(tape: &'a Tape) -> Fwd<'a> {
        Fwd {
            tape: Some(tape),
            train: true,
        }
    }
}

struct ParamState {
    name: String,
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    grad: Option<Vec<f64>>,
}

/// A named trainable tensor. Cloning shares the underlying state.
#[derive(Clone)]
pub struct Parameter {
    uid: u64,
    inner: Rc<RefCell<ParamState>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Parameter {
        Parameter {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            inner: Rc::new(RefCell::new(ParamState {
                name: name.into(),
                shape: value.shape().to_vec(),
                data: value.share_data(),
                grad: None,
            })),
        }
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tensor view of the current value; taped as a leaf when a tape is given.
    pub fn leaf(&self, tape: Option<&Tape>) -> Tensor {
        let st = self.inner.borrow();
        let node = tape.map(|t| t.leaf(self.uid, st.data.len()));
        Tensor::with_node(st.shape.clone(), Rc::clone(&st.data), node)
    }

    pub fn value(&self) -> Tensor {
        self.leaf(None)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.to_vec()
    }

    /// Replaces the parameter value. Length must match.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut st = self.inner.borrow_mut();
        if data.len() != st.data.len() {
            return Err(Error::usage(format!(
                "parameter {} expects {} values, got {}",
                st.name,
                st.data.len(),
                data.len()
            )));
        }
        st.data = Rc::new(data);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub(crate) fn set_grad(&self, grad: Vec<f64>) {
        self.inner.borrow_mut().grad = Some(grad);
    }

    /// Gradient of this parameter from a finished backward pass; zeros when
    /// the parameter was not reached by the loss.
    pub fn grad_from(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        tape.leaf_node_id(self.uid)
            .and_then(|id| grads.by_node(id))
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; self.len()])
    }
}

/// Ordered collection of all parameters and buffers of a model. Names are
/// unique; registration order is the canonical walk order.
#[derive(Default)]
pub struct ParamRegistry {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    names: HashSet<String>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<Parameter> {
        if !self.names.insert(name.to_string()) {
            return Err(Error::usage(format!("duplicate parameter name {name}")));
        }
        let p = Parameter::new(name, value);
        self.params.push(p.clone());
        Ok(p)
    }

    pub fn register_buffer(&mut self, name: &str, value: Vec<f64>, shape: Vec<usize>) -> Result<Buffer> {
        if !self.names.insert(name.to_string()) {
            return Err(Error::usage(format!("duplicate buffer name {name}")));
        }
        let b = Buffer::new(name, value, shape);
        self.buffers.push(b.clone());
        Ok(b)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    /// Exhaustive walk: total trainable scalar count.
    pub fn total_params(&self) -> u64 {
        self.params.iter().map(|p| p.len() as u64).sum()
    }

    /// Writes each parameter's gradient (zeros when unreached) after backward.
    pub fn store_grads(&self, tape: &Tape, grads: &Gradients) {
        for p in &self.params {
            let g = p.grad_from(tape, grads);
            p.set_grad(g);
        }
    }
}

struct BufState {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Non-trainable named state (batchnorm running statistics).
#[derive(Clone)]
pub struct Buffer {
    inner: Rc<RefCell<BufState>>,
}

impl Buffer {
    fn new(name: &str, data: Vec<f64>, shape: Vec<usize>) -> Buffer {
        Buffer {
            inner: Rc::new(RefCell::new(BufState {
                name: name.to_string(),
                shape,
                data,
            })),
        }
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut st = self.inner.borrow_mut();
        if data.len() != st.data.len() {
            return Err(Error::usage(format!(
                "buffer {} expects {} values, got {}",
                st.name,
                st.data.len(),
                data.len()
            )));
        }
        st.data = data;
        Ok(())
    }

    fn update(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data);
    }
}

/// Deterministic weight initializer.
pub struct Init {
    rng: ChaCha12Rng,
}

impl Init {
    pub fn from_seed(seed: u64) -> Init {
        Init {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Samples N(0, std^2) entries.
    pub fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::from_vec(shape, data).expect("shape/data consistent")
    }

    pub fn uniform(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data).expect("shape/data consistent")
    }
}

// ── layers ───────────────────────────────────────────────────────────────────

pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(
        reg: &mut ParamRegistry,
        init: &mut Init,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Linear> {
        let std = (1.0 / in_features as f64).sqrt();
        let weight = reg.register(
            &format!("{name}.weight"),
            init.normal(vec![in_features, out_features], std),
        )?;
        let bias = reg.register(&format!("{name}.bias"), Tensor::zeros(vec![out_features]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        x.linear(&self.weight.leaf(fwd.tape), &self.bias.leaf(fwd.tape))
    }
}

pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2d {
    /// 3x3-style "same" convolution: padding = (k-1)/2, stride 1.
    pub fn same(
        reg: &mut ParamRegistry,
        init: &mut Init,
        name: &str,
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Conv2d> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!("conv kernel must be odd, got {kernel}")));
        }
        let fan_in = (kernel * kernel * in_ch) as f64;
        let weight = reg.register(
            &format!("{name}.weight"),
            init.normal(vec![kernel, kernel, in_ch, out_ch], (2.0 / fan_in).sqrt()),
        )?;
        let bias = reg.register(&format!("{name}.bias"), Tensor::zeros(vec![out_ch]))?;
        Ok(Conv2d {
            weight,
            bias,
            padding: (kernel - 1) / 2,
            stride: 1,
        })
    }

    pub fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        x.conv2d(
            &self.weight.leaf(fwd.tape),
            Some(&self.bias.leaf(fwd.tape)),
            self.padding,
            self.stride,
        )
    }
}

pub struct BatchNorm2d {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Result<BatchNorm2d> {
        Ok(BatchNorm2d {
            gamma: reg.register(&format!("{name}.gamma"), Tensor::ones(vec![channels]))?,
            beta: reg.register(&format!("{name}.beta"), Tensor::zeros(vec![channels]))?,
            running_mean: reg.register_buffer(
                &format!("{name}.running_mean"),
                vec![0.0; channels],
                vec![channels],
            )?,
            running_var: reg.register_buffer(
                &format!("{name}.running_var"),
                vec![1.0; channels],
                vec![channels],
            )?,
            momentum: 0.1,
            eps: 1e-5,
            channels,
        })
    }

    /// Normalizes over the (batch, height, width) extent per channel. Training
    /// mode uses batch statistics and updates the running buffers; eval mode
    /// applies the frozen running statistics.
    pub fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let c = self.channels;
        let s = x.shape();
        if s.len() != 4 || s[3] != c {
            return Err(Error::Shape {
                op: "batchnorm2d",
                lhs: s.to_vec(),
                rhs: vec![c],
            });
        }
        let n = x.len() / c;
        let gamma = self.gamma.leaf(fwd.tape);
        let beta = self.beta.leaf(fwd.tape);

        if fwd.train {
            if n < 2 {
                return Err(Error::usage("batchnorm training requires > 1 position"));
            }
            let xd = x.data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for row in xd.chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            for row in xd.chunks_exact(c) {
                for ((v, &xv), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let dlt = xv - m;
                    *v += dlt * dlt;
                }
            }
            for v in var.iter_mut() {
                *v /= n as f64;
            }
            let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

            let mom = self.momentum;
            let unbias = n as f64 / (n as f64 - 1.0);
            self.running_mean.update(|rm| {
                for (r, &m) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - mom) * *r + mom * m;
                }
            });
            self.running_var.update(|rv| {
                for (r, &v) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - mom) * *r + mom * v * unbias;
                }
            });

            let mut xhat = vec![0.0; x.len()];
            for (xrow, hrow) in xd.chunks_exact(c).zip(xhat.chunks_exact_mut(c)) {
                for (((h, &xv), &m), &is) in
                    hrow.iter_mut().zip(xrow).zip(&mean).zip(&invstd)
                {
                    *h = (xv - m) * is;
                }
            }
            let gd = gamma.data();
            let bd = beta.data();
            let mut ydata = vec![0.0; x.len()];
            for (yrow, hrow) in ydata.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
                for (((y, &h), g), b) in yrow.iter_mut().zip(hrow).zip(gd).zip(bd) {
                    *y = g * h + b;
                }
            }

            let tape = common_tape(&[x, &gamma, &beta])?;
            let mut out = Tensor::with_node(s.to_vec(), Rc::new(ydata), None);
            if tape.is_some() {
                let (ix, ig, ib) = (node_id(x), node_id(&gamma), node_id(&beta));
                let gvals = gamma.share_data();
                let xhat = Rc::new(xhat);
                attach(tape, &mut out, move |d, sink| {
                    // Per-channel sums of d and d*xhat drive all three grads.
                    let mut sum_d = vec![0.0; c];
                    let mut sum_dh = vec![0.0; c];
                    for (drow, hrow) in d.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for (((sd, sdh), &dv), &hv) in
                            sum_d.iter_mut().zip(sum_dh.iter_mut()).zip(drow).zip(hrow)
                        {
                            *sd += dv;
                            *sdh += dv * hv;
                        }
                    }
                    if let Some(id) = ib {
                        sink.accumulate(id, |g| {
                            for (g, s) in g.iter_mut().zip(&sum_d) {
                                *g += s;
                            }
                        });
                    }
                    if let Some(id) = ig {
                        sink.accumulate(id, |g| {
                            for (g, s) in g.iter_mut().zip(&sum_dh) {
                                *g += s;
                            }
                        });
                    }
                    if let Some(id) = ix {
                        let nf = n as f64;
                        sink.accumulate(id, |g| {
                            for ((grow, drow), hrow) in g
                                .chunks_exact_mut(c)
                                .zip(d.chunks_exact(c))
                                .zip(xhat.chunks_exact(c))
                            {
                                for ch in 0..c {
                                    let coef = gvals[ch] * invstd[ch] / nf;
                                    grow[ch] += coef
                                        * (nf * drow[ch]
                                            - sum_d[ch]
                                            - hrow[ch] * sum_dh[ch]);
                                }
                            }
                        });
                    }
                });
            }
            Ok(out)
        } else {
            let rm = self.running_mean.to_vec();
            let rv = self.running_var.to_vec();
            let inv: Vec<f64> = rv.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
            let gd = gamma.data().to_vec();
            let bd = beta.data().to_vec();
            let xd = x.data();
            let mut ydata = vec![0.0; x.len()];
            for (yrow, xrow) in ydata.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
                for ch in 0..c {
                    yrow[ch] = gd[ch] * (xrow[ch] - rm[ch]) * inv[ch] + bd[ch];
                }
            }
            let tape = common_tape(&[x, &gamma, &beta])?;
            let mut out = Tensor::with_node(s.to_vec(), Rc::new(ydata), None);
            if tape.is_some() {
                let (ix, ig, ib) = (node_id(x), node_id(&gamma), node_id(&beta));
                let xdat = x.share_data();
                attach(tape, &mut out, move |d, sink| {
                    if let Some(id) = ix {
                        sink.accumulate(id, |g| {
                            for (grow, drow) in g.chunks_exact_mut(c).zip(d.chunks_exact(c)) {
                                for ch in 0..c {
                                    grow[ch] += drow[ch] * gd[ch] * inv[ch];
                                }
                            }
                        });
                    }
                    if let Some(id) = ig {
                        sink.accumulate(id, |g| {
                            for (drow, xrow) in d.chunks_exact(c).zip(xdat.chunks_exact(c)) {
                                for ch in 0..c {
                                    g[ch] += drow[ch] * (xrow[ch] - rm[ch]) * inv[ch];
                                }
                            }
                        });
                    }
                    if let Some(id) = ib {
                        sink.accumulate(id, |g| {
                            for drow in d.chunks_exact(c) {
                                axpy_inline(g, drow);
                            }
                        });
                    }
                });
            }
            Ok(out)
        }
    }
}

fn axpy_inline(acc: &mut [f64], row: &[f64]) {
    for (a, r) in acc.iter_mut().zip(row) {
        *a += r;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_rejects_duplicate_names() {
        let mut reg = ParamRegistry::new();
        reg.register("w", Tensor::ones(vec![2])).unwrap();
        assert!(reg.register("w", Tensor::ones(vec![2])).is_err());
    }

    #[test]
    fn batchnorm_eval_fresh_stats_is_near_identity() {
        let mut reg = ParamRegistry::new();
        let bn = BatchNorm2d::new(&mut reg, "bn", 2).unwrap();
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let y = bn.forward(&x, &Fwd::inference()).unwrap();
        // Running mean 0, var 1, gamma 1, beta 0: y = x / sqrt(1 + eps).
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert!((yv - xv).abs() < 1e-4, "{yv} vs {xv}");
        }
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut reg = ParamRegistry::new();
        let bn = BatchNorm2d::new(&mut reg, "bn", 1).unwrap();
        let x = Tensor::from_vec(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let y = bn
            .forward(
                &x,
                &Fwd {
                    tape: Some(&tape),
                    train: true,
                },
            )
            .unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // Running stats moved toward the batch statistics.
        assert!((bn.running_mean.to_vec()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn parameter_grads_default_to_zero_when_unreached() {
        let tape = Tape::new();
        let used = Parameter::new("used", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = Parameter::new("unused", Tensor::ones(vec![3]));
        let x = used.leaf(Some(&tape));
        let _ = unused.leaf(Some(&tape));
        let loss = x.sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(used.grad_from(&tape, &grads), vec![1.0, 1.0]);
        assert_eq!(unused.grad_from(&tape, &grads), vec![0.0, 0.0, 0.0]);
    }
}

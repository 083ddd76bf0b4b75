//! Multi-agent feature fusion.
//!
//! Each depth compresses the `[L, H, W, C]` stack channel-wise (CCL), runs
//! three sub-modules over the compressed feature — agent-wise attention,
//! dilated neighborhood attention, and spatial convolution — and recombines
//! them. The parallel wiring concatenates the three intents with the
//! compressed feature and mixes them with an MLP; the sequential variant
//! chains the same sub-modules and restores the width with a single FC layer.
//! The sub-modules of a parallel depth read only the shared compressed
//! feature and their own parameters, so they are free to run concurrently.

pub mod agent_attention;
pub mod dinat;
pub mod hrpe;
pub mod sconv;

pub use agent_attention::AgentAttention;
pub use dinat::{DinatBlock, NeighborhoodAttention};
pub use hrpe::{hrpe_encode, omega, HrpeConfig, HrpeTable};
pub use sconv::SpatialConv;

use crate::error::{Error, Result};
use crate::scenario::AgentType;
use crate::tensor::nn::{Fwd, Init, Linear, ParamRegistry};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionArch {
    Parallel,
    Sequential,
}

/// Relative geometry of one connected agent as seen from the ego, feeding the
/// pose encoding.
#[derive(Debug, Clone, Copy)]
pub struct AgentRel {
    pub distance: f64,
    pub bearing: f64,
    pub agent_type: AgentType,
}

impl AgentRel {
    pub fn ego() -> AgentRel {
        AgentRel {
            distance: 0.0,
            bearing: 0.0,
            agent_type: AgentType::Vehicle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionConfig {
    pub channels: usize,
    pub depth: usize,
    pub ccl_rate: usize,
    /// 0 selects the default max(1, channels/32).
    pub heads: usize,
    pub dinat_kernel: usize,
    pub dinat_dilations: Vec<usize>,
    pub hrpe: bool,
    pub tau: f64,
    pub theta_bin_deg: f64,
    pub d_bin_m: f64,
    pub arch: FusionArch,
    pub use_agent_attention: bool,
    pub use_spatial_attention: bool,
    pub use_spatial_conv: bool,
    pub use_original: bool,
}

impl FusionConfig {
    pub fn desk_default(channels: usize) -> FusionConfig {
        FusionConfig {
            channels,
            depth: 3,
            ccl_rate: 4,
            heads: 0,
            dinat_kernel: 7,
            dinat_dilations: vec![4, 2],
            hrpe: true,
            tau: 100.0,
            theta_bin_deg: 10.0,
            d_bin_m: 5.0,
            arch: FusionArch::Parallel,
            use_agent_attention: true,
            use_spatial_attention: true,
            use_spatial_conv: true,
            use_original: true,
        }
    }

    pub fn resolved_heads(&self) -> usize {
        if self.heads != 0 {
            self.heads
        } else {
            (self.channels / 32).max(1)
        }
    }

    pub fn compressed_channels(&self) -> usize {
        self.channels / self.ccl_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels % 16 != 0 {
            return Err(Error::config(format!(
                "channels {} must be divisible by 16",
                self.channels
            )));
        }
        if ![1, 2, 4, 8].contains(&self.ccl_rate) {
            return Err(Error::config(format!(
                "ccl_rate {} must be one of 1, 2, 4, 8",
                self.ccl_rate
            )));
        }
        if self.channels % self.ccl_rate != 0 {
            return Err(Error::config("ccl_rate must divide channels"));
        }
        if self.depth == 0 {
            return Err(Error::config("fusion depth must be >= 1"));
        }
        if self.dinat_kernel % 2 == 0 {
            return Err(Error::config("dinat kernel must be odd"));
        }
        if self.dinat_dilations.is_empty() || self.dinat_dilations.iter().any(|&d| d == 0) {
            return Err(Error::config("dinat dilations must be positive"));
        }
        let cc = self.compressed_channels();
        let heads = self.resolved_heads();
        if cc % heads != 0 {
            return Err(Error::config(format!(
                "{heads} heads do not divide compressed width {cc}"
            )));
        }
        if !(self.use_agent_attention || self.use_spatial_attention || self.use_spatial_conv) {
            return Err(Error::config(
                "all three fusion sub-modules disabled: degenerate model",
            ));
        }
        if self.tau <= 1.0 {
            return Err(Error::config("tau must exceed 1"));
        }
        if self.theta_bin_deg <= 0.0 || self.d_bin_m <= 0.0 {
            return Err(Error::config("pose-encoding bins must be positive"));
        }
        Ok(())
    }

    pub fn hrpe_config(&self) -> HrpeConfig {
        HrpeConfig {
            channels: self.compressed_channels() * 4,
            tau: self.tau,
            theta_bin_deg: self.theta_bin_deg,
            d_bin_m: self.d_bin_m,
        }
    }
}

struct FusionDepth {
    ccl: Linear,
    aatt: AgentAttention,
    satt: DinatBlock,
    sconv: SpatialConv,
    /// Parallel recombination: 4*Cc -> C, ReLU, C -> C.
    mlp: Option<(Linear, Linear)>,
    /// Sequential restore: Cc -> C.
    restore: Option<Linear>,
}

/// Per-depth attention traces captured during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct FusionTrace {
    /// Mean agent-attention matrix per depth, row-major `L x L`.
    pub agent_attention: Vec<Vec<f64>>,
}

pub struct FusionModule {
    pub cfg: FusionConfig,
    depths: Vec<FusionDepth>,
    hrpe_table: HrpeTable,
}

impl FusionModule {
    /// `d_max` bounds the inter-agent distances the pose-encoding table must
    /// cover (usually the world diagonal).
    pub fn new(
        reg: &mut ParamRegistry,
        init: &mut Init,
        name: &str,
        cfg: FusionConfig,
        d_max: f64,
    ) -> Result<FusionModule> {
        cfg.validate()?;
        let c = cfg.channels;
        let cc = cfg.compressed_channels();
        let heads = cfg.resolved_heads();
        let mut depths = Vec::with_capacity(cfg.depth);
        for d in 0..cfg.depth {
            let base = format!("{name}.depth{d}");
            let ccl = Linear::new(reg, init, &format!("{base}.ccl"), c, cc)?;
            let aatt = AgentAttention::new(reg, init, &format!("{base}.aatt"), cc, heads)?;
            let satt = DinatBlock::new(
                reg,
                init,
                &format!("{base}.satt"),
                cc,
                heads,
                cfg.dinat_kernel,
                &cfg.dinat_dilations,
            )?;
            let sconv = SpatialConv::new(reg, init, &format!("{base}.sconv"), cc)?;
            let (mlp, restore) = match cfg.arch {
                FusionArch::Parallel => (
                    Some((
                        Linear::new(reg, init, &format!("{base}.mlp.fc1"), 4 * cc, c)?,
                        Linear::new(reg, init, &format!("{base}.mlp.fc2"), c, c)?,
                    )),
                    None,
                ),
                FusionArch::Sequential => (
                    None,
                    Some(Linear::new(reg, init, &format!("{base}.restore"), cc, c)?),
                ),
            };
            depths.push(FusionDepth {
                ccl,
                aatt,
                satt,
                sconv,
                mlp,
                restore,
            });
        }
        let hrpe_table = HrpeTable::build(cfg.hrpe_config(), d_max.max(1.0));
        Ok(FusionModule {
            cfg,
            depths,
            hrpe_table,
        })
    }

    pub fn hrpe_table(&self) -> &HrpeTable {
        &self.hrpe_table
    }

    /// Runs all depths over the multi-agent stack.
    ///
    /// `validity` has shape `[L, H, W]`; cells with validity 0 are zeroed on
    /// entry so their content can never reach any output, and they are masked
    /// out of agent attention. The pose encoding is injected at depth 1 only.
    pub fn forward(
        &self,
        m0: &Tensor,
        validity: &Tensor,
        agents: &[AgentRel],
        fwd: &Fwd,
        mut trace: Option<&mut FusionTrace>,
    ) -> Result<Tensor> {
        let s = m0.shape().to_vec();
        if s.len() != 4 || s[3] != self.cfg.channels {
            return Err(Error::usage(format!(
                "fusion expects [l, h, w, {}], got {s:?}",
                self.cfg.channels
            )));
        }
        let (l, h, w, c) = (s[0], s[1], s[2], s[3]);
        if validity.shape() != [l, h, w] || agents.len() != l {
            return Err(Error::usage("validity/agent metadata does not match the stack"));
        }

        // Sanitize: exactly-invalid cells hold exactly zero.
        let mut gate = vec![0.0; l * h * w * c];
        for (cell, &v) in validity.data().iter().enumerate() {
            if v > 0.0 {
                gate[cell * c..(cell + 1) * c].fill(1.0);
            }
        }
        let gate = Tensor::from_vec(vec![l, h, w, c], gate)?;
        let mut m = m0.mul(&gate)?;

        for (d, depth) in self.depths.iter().enumerate() {
            m = self.depth_forward(depth, d, &m, validity, agents, fwd, trace.as_deref_mut())?;
        }
        Ok(m)
    }

    fn depth_forward(
        &self,
        depth: &FusionDepth,
        depth_index: usize,
        m: &Tensor,
        validity: &Tensor,
        agents: &[AgentRel],
        fwd: &Fwd,
        trace: Option<&mut FusionTrace>,
    ) -> Result<Tensor> {
        let s = m.shape().to_vec();
        let (l, h, w, _c) = (s[0], s[1], s[2], s[3]);
        let cc = self.cfg.compressed_channels();
        let cells = h * w;

        let mprime = depth.ccl.forward(m, fwd)?;

        // The pose encoding enters only the first depth's attention input.
        let attn_input = if self.cfg.hrpe && depth_index == 0 {
            let mut enc = vec![0.0; l * cells * cc];
            for (slot, rel) in agents.iter().enumerate() {
                let p = self
                    .hrpe_table
                    .lookup(rel.distance, rel.bearing, rel.agent_type);
                for cell in 0..cells {
                    enc[(slot * cells + cell) * cc..(slot * cells + cell + 1) * cc]
                        .copy_from_slice(p);
                }
            }
            let enc = Tensor::from_vec(vec![l, h, w, cc], enc)?;
            mprime.add(&enc)?
        } else {
            mprime.clone()
        };

        let zeros = || Ok::<Tensor, Error>(Tensor::zeros(vec![l, h, w, cc]));

        let want_trace = trace.is_some();
        let (m_aa, attn_mean) = if self.cfg.use_agent_attention {
            let (attended, mean) =
                depth
                    .aatt
                    .forward(&attn_input, validity.data(), fwd, want_trace)?;
            (attended.add(&mprime)?, mean)
        } else {
            (zeros()?, None)
        };
        if let Some(t) = trace {
            t.agent_attention
                .push(attn_mean.unwrap_or_else(|| vec![0.0; l * l]));
        }

        let m_sa = if self.cfg.use_spatial_attention {
            depth.satt.forward(&mprime, fwd)?.add(&mprime)?
        } else {
            zeros()?
        };
        let m_sc = if self.cfg.use_spatial_conv {
            depth.sconv.forward(&mprime, fwd)?
        } else {
            zeros()?
        };

        match self.cfg.arch {
            FusionArch::Parallel => {
                let orig = if self.cfg.use_original {
                    mprime.clone()
                } else {
                    zeros()?
                };
                let m_o = Tensor::concat(&[&m_aa, &m_sa, &m_sc, &orig], 3)?;
                let (fc1, fc2) = depth.mlp.as_ref().expect("parallel depth has an MLP");
                let mixed = fc2.forward(&fc1.forward(&m_o, fwd)?.relu()?, fwd)?;
                // Residual from the concatenated block when widths line up
                // (rate 4); otherwise from the depth input.
                if m_o.shape()[3] == self.cfg.channels {
                    mixed.add(&m_o)
                } else {
                    mixed.add(m)
                }
            }
            FusionArch::Sequential => {
                // Chain the enabled stages at compressed width, mirroring each
                // sub-module's residual convention, then restore the width.
                let mut x = if self.cfg.use_agent_attention {
                    m_aa
                } else {
                    mprime.clone()
                };
                if self.cfg.use_spatial_attention {
                    x = depth.satt.forward(&x, fwd)?.add(&x)?;
                }
                if self.cfg.use_spatial_conv {
                    x = depth.sconv.forward(&x, fwd)?;
                }
                let restore = depth.restore.as_ref().expect("sequential depth restores");
                restore.forward(&x, fwd)?.add(m)
            }
        }
    }

    /// Per-depth sums of |w| over the four contiguous input sections of each
    /// CCL weight matrix (C rows split into quarters, all output columns).
    pub fn ccl_section_sums(&self) -> Vec<[f64; 4]> {
        let c = self.cfg.channels;
        let cc = self.cfg.compressed_channels();
        let quarter = c / 4;
        self.depths
            .iter()
            .map(|d| {
                let w = d.ccl.weight.to_vec();
                let mut sums = [0.0; 4];
                for (row, chunk) in w.chunks_exact(cc).enumerate() {
                    let section = (row / quarter).min(3);
                    sums[section] += chunk.iter().map(|v| v.abs()).sum::<f64>();
                }
                sums
            })
            .collect()
    }
}

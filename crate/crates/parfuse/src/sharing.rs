//! Feature sharing: per-agent extraction, channel compression for the link,
//! and alignment of received features into the ego frame.

use crate::error::{Error, Result};
use crate::geometry::{warp_feature, GridSpec, Pose2D};
use crate::scenario::AgentType;
use crate::tensor::nn::{BatchNorm2d, Conv2d, Fwd, Init, ParamRegistry};
use crate::tensor::Tensor;

/// One agent's feature map as it travels the pipeline, together with the
/// metadata the receiver needs to align it: the reported capture pose
/// (possibly noised), capture timestamp, and constant velocity.
#[derive(Clone)]
pub struct SharedFeature {
    pub agent_id: u32,
    pub agent_type: AgentType,
    pub feature: Tensor,
    pub capture_pose: Pose2D,
    pub capture_time_ms: f64,
    pub velocity: (f64, f64),
}

/// Ego-aligned multi-agent stack `[L, H, W, C]` with per-cell validity
/// `[L, H, W]` in [0, 1]. Slot 0 is always the ego.
pub struct MultiAgentFeature {
    pub tensor: Tensor,
    pub validity: Tensor,
    pub agent_ids: Vec<u32>,
}

// ── backbone-lite ────────────────────────────────────────────────────────────

/// Small dense conv backbone shared by all agents: an input block followed by
/// two residual blocks, each 3x3 conv + batchnorm + ReLU.
pub struct BackboneLite {
    conv_in: Conv2d,
    bn_in: BatchNorm2d,
    conv_r1: Conv2d,
    bn_r1: BatchNorm2d,
    conv_r2: Conv2d,
    bn_r2: BatchNorm2d,
}

impl BackboneLite {
    pub fn new(
        reg: &mut ParamRegistry,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        channels: usize,
    ) -> Result<BackboneLite> {
        Ok(BackboneLite {
            conv_in: Conv2d::same(reg, init, &format!("{name}.in.conv"), 3, in_channels, channels)?,
            bn_in: BatchNorm2d::new(reg, &format!("{name}.in.bn"), channels)?,
            conv_r1: Conv2d::same(reg, init, &format!("{name}.res1.conv"), 3, channels, channels)?,
            bn_r1: BatchNorm2d::new(reg, &format!("{name}.res1.bn"), channels)?,
            conv_r2: Conv2d::same(reg, init, &format!("{name}.res2.conv"), 3, channels, channels)?,
            bn_r2: BatchNorm2d::new(reg, &format!("{name}.res2.bn"), channels)?,
        })
    }

    /// `[B, H, W, c_in] -> [B, H, W, c]`; the batch axis carries the agents.
    pub fn forward(&self, x: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        let h0 = self
            .bn_in
            .forward(&self.conv_in.forward(x, fwd)?, fwd)?
            .relu()?;
        let r1 = self
            .bn_r1
            .forward(&self.conv_r1.forward(&h0, fwd)?, fwd)?
            .relu()?
            .add(&h0)?;
        let r2 = self
            .bn_r2
            .forward(&self.conv_r2.forward(&r1, fwd)?, fwd)?
            .relu()?
            .add(&r1)?;
        Ok(r2)
    }
}

// ── channel compression for the link ─────────────────────────────────────────

/// Encoder/decoder pair, each a single 3x3 convolution, shared by all agents.
/// The ratio divides the channel count for transmission.
pub struct FeatureCodec {
    pub encoder: Conv2d,
    pub decoder: Conv2d,
    channels: usize,
    ratio: usize,
}

impl FeatureCodec {
    pub fn new(
        reg: &mut ParamRegistry,
        init: &mut Init,
        name: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<FeatureCodec> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::config(format!(
                "compression ratio {ratio} must divide channel count {channels}"
            )));
        }
        let compressed = channels / ratio;
        Ok(FeatureCodec {
            encoder: Conv2d::same(reg, init, &format!("{name}.encoder"), 3, channels, compressed)?,
            decoder: Conv2d::same(reg, init, &format!("{name}.decoder"), 3, compressed, channels)?,
            channels,
            ratio,
        })
    }

    pub fn compressed_channels(&self) -> usize {
        self.channels / self.ratio
    }

    pub fn compress(&self, f: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        self.encoder.forward(f, fwd)
    }

    pub fn decompress(&self, f: &Tensor, fwd: &Fwd) -> Result<Tensor> {
        self.decoder.forward(f, fwd)
    }

    /// Transmitted payload for one frame: 8 bytes per compressed value.
    pub fn payload_bytes_per_frame(&self, grid: &GridSpec) -> u64 {
        (grid.h * grid.w * self.compressed_channels() * 8) as u64
    }
}

// ── alignment into the ego frame ─────────────────────────────────────────────

/// Transform, crop, and motion-correct one decompressed feature into the ego
/// frame at `ego_time_ms`.
///
/// The transform warps from the reported capture pose; when `stcm` is on, the
/// capture pose is first dead-reckoned forward by the communication delay
/// using the agent's reported velocity, compensating its own motion while the
/// payload was in flight. The crop keeps the detection-range rectangle, which
/// is exactly the output grid, and out-of-range cells carry validity 0 and
/// feature value exactly 0.
pub fn gamma(
    shared: &SharedFeature,
    ego_pose: &Pose2D,
    ego_time_ms: f64,
    grid: &GridSpec,
    stcm: bool,
) -> Result<(Tensor, Vec<f64>)> {
    let src_pose = if stcm {
        dead_reckon(
            &shared.capture_pose,
            shared.velocity,
            ego_time_ms - shared.capture_time_ms,
        )
    } else {
        shared.capture_pose
    };
    warp_feature(&shared.feature, &src_pose, ego_pose, grid)
}

/// Advances a pose along its constant velocity by `delta_ms`.
pub fn dead_reckon(pose: &Pose2D, velocity: (f64, f64), delta_ms: f64) -> Pose2D {
    if delta_ms == 0.0 {
        return *pose;
    }
    let dt = delta_ms / 1000.0;
    Pose2D {
        x: pose.x + velocity.0 * dt,
        y: pose.y + velocity.1 * dt,
        yaw: pose.yaw,
    }
}

/// Stacks ego-aligned features into the `[L, H, W, C]` multi-agent tensor.
/// The ego (id 1) occupies slot 0; aux agents follow sorted by id regardless
/// of presentation order.
pub fn assemble(parts: Vec<(u32, Tensor, Vec<f64>)>, grid: &GridSpec) -> Result<MultiAgentFeature> {
    if parts.is_empty() {
        return Err(Error::usage("assemble requires at least one agent feature"));
    }
    let mut parts = parts;
    parts.sort_by_key(|(id, _, _)| (*id != crate::scenario::EGO_ID, *id));
    if parts[0].0 != crate::scenario::EGO_ID {
        return Err(Error::usage("assemble requires the ego feature (id 1)"));
    }

    let cells = grid.h * grid.w;
    let mut agent_ids = Vec::with_capacity(parts.len());
    let mut validity = Vec::with_capacity(parts.len() * cells);
    for (id, feature, mask) in &parts {
        if feature.shape().len() != 3 || feature.shape()[0] != grid.h || feature.shape()[1] != grid.w
        {
            return Err(Error::usage(format!(
                "agent {id} feature shape {:?} does not match grid {}x{}",
                feature.shape(),
                grid.h,
                grid.w
            )));
        }
        if mask.len() != cells {
            return Err(Error::usage("validity mask size mismatch"));
        }
        agent_ids.push(*id);
        validity.extend_from_slice(mask);
    }
    let tensors: Vec<&Tensor> = parts.iter().map(|(_, t, _)| t).collect();
    let stacked = Tensor::stack0(&tensors)?;
    Ok(MultiAgentFeature {
        tensor: stacked,
        validity: Tensor::from_vec(vec![parts.len(), grid.h, grid.w], validity)?,
        agent_ids,
    })
}

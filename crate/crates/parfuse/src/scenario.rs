//! Synthetic multi-agent world: scene generation, 2D LiDAR-style ray casting
//! onto BEV pseudo-images, and the communication-noise models.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Pose2D, RotatedBox};
use crate::tensor::Tensor;

pub const SCENE_SCHEMA_VERSION: u32 = 1;

/// Raster channels: occupancy, log(1 + hit count), mean hit range fraction.
pub const RASTER_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentType {
    /// Road infrastructure: static, longer sensing range.
    Infrastructure,
    /// Vehicle.
    Vehicle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentMeta {
    /// Ego is always id 1.
    pub id: u32,
    pub agent_type: AgentType,
    pub pose: Pose2D,
    pub timestamp_ms: f64,
    /// Constant world-frame velocity, shared as metadata so receivers can
    /// compensate stale captures.
    pub velocity: (f64, f64),
}

pub const EGO_ID: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp_ms: f64,
    pub agents: Vec<AgentMeta>,
    pub objects: Vec<RotatedBox>,
}

impl Frame {
    pub fn agent(&self, id: u32) -> Option<&AgentMeta> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn ego(&self) -> &AgentMeta {
        self.agent(EGO_ID).expect("scene invariant: ego present")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub schema_version: u32,
    pub seed: u64,
    pub frame_rate_hz: f64,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn agent_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.agents.len())
    }

    pub fn frame_interval_ms(&self) -> f64 {
        1000.0 / self.frame_rate_hz
    }
}

// ── noise models ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    Perfect,
    Simple,
    Mild,
    Harsh,
}

/// Channel-noise description: maximum latency plus heading/localization
/// standard deviations applied to reported aux poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSetting {
    pub mode: NoiseMode,
    pub t_lag_ms: f64,
    pub sigma_heading_deg: f64,
    pub sigma_loc_m: f64,
}

impl NoiseSetting {
    pub fn perfect() -> NoiseSetting {
        NoiseSetting {
            mode: NoiseMode::Perfect,
            t_lag_ms: 0.0,
            sigma_heading_deg: 0.0,
            sigma_loc_m: 0.0,
        }
    }

    /// Fixed 100 ms latency with 0.2 deg / 0.2 m pose noise.
    pub fn simple() -> NoiseSetting {
        NoiseSetting {
            mode: NoiseMode::Simple,
            t_lag_ms: 100.0,
            sigma_heading_deg: 0.2,
            sigma_loc_m: 0.2,
        }
    }

    /// Latency U(0, 200 ms) with 0.2 deg / 0.2 m pose noise.
    pub fn mild() -> NoiseSetting {
        NoiseSetting {
            mode: NoiseMode::Mild,
            t_lag_ms: 200.0,
            sigma_heading_deg: 0.2,
            sigma_loc_m: 0.2,
        }
    }

    /// Sweep point: latency up to 500 ms, heading sigma up to 1.0 deg,
    /// localization sigma up to 0.5 m.
    pub fn harsh(t_lag_ms: f64, sigma_heading_deg: f64, sigma_loc_m: f64) -> Result<NoiseSetting> {
        let s = NoiseSetting {
            mode: NoiseMode::Harsh,
            t_lag_ms,
            sigma_heading_deg,
            sigma_loc_m,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_lag_ms < 0.0 || self.sigma_heading_deg < 0.0 || self.sigma_loc_m < 0.0 {
            return Err(Error::config("noise magnitudes must be nonnegative"));
        }
        match self.mode {
            NoiseMode::Perfect => {
                if self.t_lag_ms != 0.0 || self.sigma_heading_deg != 0.0 || self.sigma_loc_m != 0.0
                {
                    return Err(Error::config("perfect setting must be all-zero"));
                }
            }
            NoiseMode::Harsh => {
                if self.t_lag_ms > 500.0 {
                    return Err(Error::config("harsh latency bound is 500 ms"));
                }
                if self.sigma_heading_deg > 1.0 {
                    return Err(Error::config("harsh heading sigma bound is 1.0 deg"));
                }
                if self.sigma_loc_m > 0.5 {
                    return Err(Error::config("harsh localization sigma bound is 0.5 m"));
                }
            }
            NoiseMode::Simple | NoiseMode::Mild => {}
        }
        Ok(())
    }
}

/// Draws one latency value in milliseconds.
pub fn sample_latency(rng: &mut ChaCha12Rng, setting: &NoiseSetting) -> f64 {
    match setting.mode {
        NoiseMode::Perfect => 0.0,
        NoiseMode::Simple => setting.t_lag_ms,
        NoiseMode::Mild | NoiseMode::Harsh => {
            if setting.t_lag_ms == 0.0 {
                0.0
            } else {
                rng.gen_range(0.0..=setting.t_lag_ms)
            }
        }
    }
}

/// Perturbs a reported pose with independent Gaussian localization and heading
/// noise. Zero sigmas leave the pose bit-exact and draw nothing from the rng.
pub fn apply_pose_noise(rng: &mut ChaCha12Rng, pose: &Pose2D, setting: &NoiseSetting) -> Pose2D {
    let mut out = *pose;
    if setting.sigma_loc_m > 0.0 {
        let n = Normal::new(0.0, setting.sigma_loc_m).expect("validated sigma");
        out.x += n.sample(rng);
        out.y += n.sample(rng);
    }
    if setting.sigma_heading_deg > 0.0 {
        let sigma_rad = setting.sigma_heading_deg.to_radians();
        let n = Normal::new(0.0, sigma_rad).expect("validated sigma");
        out = Pose2D::new(out.x, out.y, out.yaw + n.sample(rng));
    }
    out
}

/// Index of the freshest frame at or below `ego_time - latency`.
pub fn delayed_frame_index(ego_frame: usize, latency_ms: f64, frame_interval_ms: f64) -> usize {
    let t = ego_frame as f64 * frame_interval_ms - latency_ms;
    if t <= 0.0 {
        0
    } else {
        (t / frame_interval_ms).floor() as usize
    }
}

/// Counter-based noise stream: one independent ChaCha stream per
/// (scene, frame, agent, purpose) tuple under a shared seed.
pub fn noise_stream(seed: u64, scene: u64, frame: u64, agent: u64, purpose: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) ^ (scene << 28) ^ (frame << 8) ^ agent);
    rng
}

// ── scene generation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub world_x: (f64, f64),
    pub world_y: (f64, f64),
    /// Connected agents beyond the ego; the first `infra_agents` of them are
    /// infrastructure, the rest vehicles.
    pub aux_agents: usize,
    pub infra_agents: usize,
    pub l_max: usize,
    /// Regular car-sized ground-truth objects.
    pub objects: usize,
    /// Additional truck-sized ground-truth objects that act as occluders.
    pub occluders: usize,
    pub frames: usize,
    pub frame_rate_hz: f64,
    pub vehicle_range_m: f64,
    pub infra_range_m: f64,
    pub rays_per_sweep: usize,
    pub max_object_speed_mps: f64,
}

impl ScenarioConfig {
    pub fn desk_default() -> ScenarioConfig {
        ScenarioConfig {
            world_x: (-36.0, 36.0),
            world_y: (-17.0, 17.0),
            aux_agents: 2,
            infra_agents: 1,
            l_max: 4,
            objects: 6,
            occluders: 1,
            frames: 20,
            frame_rate_hz: 10.0,
            vehicle_range_m: 40.0,
            infra_range_m: 60.0,
            rays_per_sweep: 360,
            max_object_speed_mps: 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aux_agents == 0 {
            return Err(Error::config("at least one aux agent required (L >= 2)"));
        }
        if self.aux_agents + 1 > self.l_max {
            return Err(Error::config(format!(
                "agent count {} exceeds l_max {}",
                self.aux_agents + 1,
                self.l_max
            )));
        }
        if self.infra_agents > self.aux_agents {
            return Err(Error::config("infra_agents exceeds aux_agents"));
        }
        if self.frames == 0 || self.frame_rate_hz <= 0.0 {
            return Err(Error::config("scene needs frames and a positive frame rate"));
        }
        if self.occluders == 0 {
            return Err(Error::config("need at least one occluder object"));
        }
        if self.rays_per_sweep < 16 {
            return Err(Error::config("rays_per_sweep too small"));
        }
        let span_x = self.world_x.1 - self.world_x.0;
        let span_y = self.world_y.1 - self.world_y.0;
        if span_x < 12.0 || span_y < 6.0 {
            return Err(Error::config("world too small"));
        }
        // Rough capacity check so rejection sampling can terminate.
        let per_object = 25.0;
        if (self.objects + self.occluders) as f64 * per_object > 0.6 * span_x * span_y {
            return Err(Error::Generation(format!(
                "{} objects cannot fit a {span_x:.0}x{span_y:.0} m world",
                self.objects + self.occluders
            )));
        }
        Ok(())
    }

    pub fn agent_range(&self, t: AgentType) -> f64 {
        match t {
            AgentType::Infrastructure => self.infra_range_m,
            AgentType::Vehicle => self.vehicle_range_m,
        }
    }
}

struct MovingBox {
    base: RotatedBox,
    velocity: (f64, f64),
}

impl MovingBox {
    fn at(&self, t_s: f64) -> RotatedBox {
        let mut b = self.base;
        b.cx += self.velocity.0 * t_s;
        b.cy += self.velocity.1 * t_s;
        b
    }
}

/// Deterministic scene generator. Guarantees at least one ground-truth object
/// that is fully occluded from the ego yet visible to some aux agent in every
/// frame, verified with the simulator's own ray cast.
pub fn generate_scene(seed: u64, cfg: &ScenarioConfig) -> Result<Scene> {
    cfg.validate()?;
    const ATTEMPTS: u64 = 48;
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        if let Some(scene) = try_generate(seed, cfg, &mut rng) {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!(
        "no valid layout after {ATTEMPTS} attempts (seed {seed})"
    )))
}

fn try_generate(seed: u64, cfg: &ScenarioConfig, rng: &mut ChaCha12Rng) -> Option<Scene> {
    let duration_s = (cfg.frames - 1) as f64 / cfg.frame_rate_hz;
    let margin_x = ((cfg.world_x.1 - cfg.world_x.0) / 10.0).clamp(1.5, 4.0);
    let margin_y = ((cfg.world_y.1 - cfg.world_y.0) / 10.0).clamp(1.5, 4.0);
    let bx = (cfg.world_x.0 + margin_x, cfg.world_x.1 - margin_x);
    let by = (cfg.world_y.0 + margin_y, cfg.world_y.1 - margin_y);

    // Ego parked near the world center, grid axes roughly world-aligned.
    let ego_pose = Pose2D::new(
        rng.gen_range(-3.0..3.0),
        rng.gen_range(-1.5..1.5),
        rng.gen_range(-0.3..0.3),
    );

    let mut objects: Vec<MovingBox> = Vec::new();
    let mut overlaps = |cand: &RotatedBox, objects: &[MovingBox]| -> bool {
        let mut inflated = *cand;
        inflated.w += 1.0;
        inflated.l += 1.0;
        objects
            .iter()
            .any(|o| crate::geometry::rotated_iou(&inflated, &o.base) > 0.0)
    };

    // Forced occlusion pair: a truck on the ray from ego to a parked car,
    // with distances scaled to however far this world reaches along the ray.
    let reach = |dir: (f64, f64)| -> f64 {
        let along = |lo: f64, hi: f64, pos: f64, d: f64| -> f64 {
            if d > 1e-9 {
                (hi - pos) / d
            } else if d < -1e-9 {
                (lo - pos) / d
            } else {
                f64::INFINITY
            }
        };
        along(bx.0, bx.1, ego_pose.x, dir.0).min(along(by.0, by.1, ego_pose.y, dir.1))
    };
    let mut pair = None;
    for _ in 0..24 {
        let alpha = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let dir = (alpha.cos(), alpha.sin());
        let t_max = reach(dir);
        if t_max < 9.5 {
            continue;
        }
        let r_target = (t_max * rng.gen_range(0.75..0.9)).min(15.0);
        let r_occ = rng.gen_range(4.2..(0.62 * r_target).max(4.3));
        pair = Some((alpha, dir, r_occ, r_target));
        break;
    }
    let (alpha, dir, r_occ, r_target) = pair?;
    let occluder = RotatedBox::new(
        ego_pose.x + dir.0 * r_occ,
        ego_pose.y + dir.1 * r_occ,
        1.4,
        3.0,
        7.0,
        2.8,
        crate::geometry::normalize_angle(alpha + std::f64::consts::FRAC_PI_2),
    )
    .ok()?;
    let target = RotatedBox::new(
        ego_pose.x + dir.0 * r_target,
        ego_pose.y + dir.1 * r_target,
        0.85,
        rng.gen_range(1.9..2.1),
        rng.gen_range(4.3..4.7),
        1.7,
        quantized_heading(rng),
    )
    .ok()?;
    for b in [&occluder, &target] {
        if b.cx < bx.0 || b.cx > bx.1 || b.cy < by.0 || b.cy > by.1 {
            return None;
        }
    }
    objects.push(MovingBox {
        base: occluder,
        velocity: (0.0, 0.0),
    });
    objects.push(MovingBox {
        base: target,
        velocity: (0.0, 0.0),
    });

    // Remaining occluder trucks (static) and cars (some moving).
    for i in 0..(cfg.occluders - 1) + cfg.objects {
        let truck = i < cfg.occluders - 1;
        let mut placed = false;
        for _ in 0..64 {
            let yaw = quantized_heading(rng);
            let (w, l, h, z) = if truck {
                (3.0, 7.0, 2.8, 1.4)
            } else {
                (
                    rng.gen_range(1.9..2.1),
                    rng.gen_range(4.3..4.7),
                    rng.gen_range(1.5..1.9),
                    0.85,
                )
            };
            let speed = if truck || rng.gen_bool(0.5) {
                0.0
            } else {
                rng.gen_range(2.0..cfg.max_object_speed_mps)
            };
            let velocity = (speed * yaw.cos(), speed * yaw.sin());
            let cx = rng.gen_range(bx.0..bx.1);
            let cy = rng.gen_range(by.0..by.1);
            // Keep the whole trajectory inside the world.
            let ex = cx + velocity.0 * duration_s;
            let ey = cy + velocity.1 * duration_s;
            if ex < bx.0 || ex > bx.1 || ey < by.0 || ey > by.1 {
                continue;
            }
            let cand = RotatedBox::new(cx, cy, z, w, l, h, yaw).ok()?;
            if overlaps(&cand, &objects) {
                continue;
            }
            // Keep spawn clear of the ego.
            if (cx - ego_pose.x).hypot(cy - ego_pose.y) < 4.0 {
                continue;
            }
            objects.push(MovingBox {
                base: cand,
                velocity,
            });
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }

    // Aux agents: infrastructure static, vehicles rolling slowly.
    let mut agents_t0: Vec<AgentMeta> = vec![AgentMeta {
        id: EGO_ID,
        agent_type: AgentType::Vehicle,
        pose: ego_pose,
        timestamp_ms: 0.0,
        velocity: (0.0, 0.0),
    }];
    for a in 0..cfg.aux_agents {
        let agent_type = if a < cfg.infra_agents {
            AgentType::Infrastructure
        } else {
            AgentType::Vehicle
        };
        let mut placed = false;
        for _ in 0..64 {
            let pose = Pose2D::new(
                rng.gen_range(bx.0..bx.1),
                rng.gen_range(by.0..by.1),
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            if (pose.x - ego_pose.x).hypot(pose.y - ego_pose.y) < 6.0 {
                continue;
            }
            let clear = objects
                .iter()
                .all(|o| !o.base.contains((pose.x, pose.y)));
            if !clear {
                continue;
            }
            let velocity = match agent_type {
                AgentType::Infrastructure => (0.0, 0.0),
                AgentType::Vehicle => {
                    let speed = rng.gen_range(1.0..4.0);
                    let end = (
                        pose.x + speed * pose.yaw.cos() * duration_s,
                        pose.y + speed * pose.yaw.sin() * duration_s,
                    );
                    if end.0 < bx.0 || end.0 > bx.1 || end.1 < by.0 || end.1 > by.1 {
                        continue;
                    }
                    (speed * pose.yaw.cos(), speed * pose.yaw.sin())
                }
            };
            agents_t0.push(AgentMeta {
                id: 2 + a as u32,
                agent_type,
                pose,
                timestamp_ms: 0.0,
                velocity,
            });
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }

    // Materialize frames by rolling every trajectory forward.
    let interval = 1000.0 / cfg.frame_rate_hz;
    let frames: Vec<Frame> = (0..cfg.frames)
        .map(|k| {
            let t_ms = k as f64 * interval;
            let t_s = t_ms / 1000.0;
            Frame {
                timestamp_ms: t_ms,
                agents: agents_t0
                    .iter()
                    .map(|a| AgentMeta {
                        pose: Pose2D::new(
                            a.pose.x + a.velocity.0 * t_s,
                            a.pose.y + a.velocity.1 * t_s,
                            a.pose.yaw,
                        ),
                        timestamp_ms: t_ms,
                        ..*a
                    })
                    .collect(),
                objects: objects.iter().map(|o| o.at(t_s)).collect(),
            }
        })
        .collect();

    // The collaboration payoff must exist in every frame: some object has no
    // ego hits but at least a few hits from one aux agent.
    for frame in &frames {
        let ego_hits = object_hit_counts(frame, frame.ego(), cfg);
        let aux_hits: Vec<Vec<usize>> = frame
            .agents
            .iter()
            .filter(|a| a.id != EGO_ID)
            .map(|a| object_hit_counts(frame, a, cfg))
            .collect();
        let payoff = (0..frame.objects.len()).any(|oi| {
            ego_hits[oi] == 0 && aux_hits.iter().any(|h| h[oi] >= 3)
        });
        if !payoff {
            return None;
        }
    }

    Some(Scene {
        schema_version: SCENE_SCHEMA_VERSION,
        seed,
        frame_rate_hz: cfg.frame_rate_hz,
        frames,
    })
}

/// Traffic-like heading: axis-aligned plus ~10 degrees of jitter.
fn quantized_heading(rng: &mut ChaCha12Rng) -> f64 {
    let quarter = rng.gen_range(0u32..4) as f64 * std::f64::consts::FRAC_PI_2;
    let jitter = Normal::new(0.0, 10f64.to_radians()).unwrap().sample(rng);
    crate::geometry::normalize_angle(quarter + jitter)
}

// ── ray casting and rasterization ────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct RayHit {
    pub object_index: usize,
    pub distance: f64,
    pub point: (f64, f64),
}

/// Nearest intersection of each sweep ray with any object footprint, within
/// the agent's sensing range. One entry per ray.
pub fn cast_rays(frame: &Frame, agent: &AgentMeta, cfg: &ScenarioConfig) -> Vec<Option<RayHit>> {
    let origin = (agent.pose.x, agent.pose.y);
    let max_range = cfg.agent_range(agent.agent_type);
    let n = cfg.rays_per_sweep;

    let edges: Vec<(usize, (f64, f64), (f64, f64))> = frame
        .objects
        .iter()
        .enumerate()
        .flat_map(|(oi, b)| {
            let c = b.corners();
            (0..4).map(move |e| (oi, c[e], c[(e + 1) % 4]))
        })
        .collect();

    (0..n)
        .map(|k| {
            let phi = agent.pose.yaw + std::f64::consts::TAU * k as f64 / n as f64;
            let dir = (phi.cos(), phi.sin());
            let mut best: Option<RayHit> = None;
            for &(oi, p, q) in &edges {
                if let Some(t) = ray_segment_intersection(origin, dir, p, q) {
                    if t > 1e-9 && t <= max_range && best.map_or(true, |b| t < b.distance) {
                        best = Some(RayHit {
                            object_index: oi,
                            distance: t,
                            point: (origin.0 + dir.0 * t, origin.1 + dir.1 * t),
                        });
                    }
                }
            }
            best
        })
        .collect()
}

/// Ray/segment intersection distance along the ray, if any.
fn ray_segment_intersection(
    origin: (f64, f64),
    dir: (f64, f64),
    p: (f64, f64),
    q: (f64, f64),
) -> Option<f64> {
    let sx = q.0 - p.0;
    let sy = q.1 - p.1;
    let denom = dir.0 * sy - dir.1 * sx;
    if denom.abs() < 1e-12 {
        return None;
    }
    let dx = p.0 - origin.0;
    let dy = p.1 - origin.1;
    let t = (dx * sy - dy * sx) / denom;
    let u = (dir.1 * dx - dir.0 * dy) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

/// Per-object count of rays whose nearest hit lands on that object.
pub fn object_hit_counts(frame: &Frame, agent: &AgentMeta, cfg: &ScenarioConfig) -> Vec<usize> {
    let mut counts = vec![0usize; frame.objects.len()];
    for hit in cast_rays(frame, agent, cfg).into_iter().flatten() {
        counts[hit.object_index] += 1;
    }
    counts
}

/// BEV pseudo-image on a grid in one agent's body frame.
#[derive(Debug, Clone)]
pub struct PseudoImage {
    pub tensor: Tensor,
    pub grid: GridSpec,
}

/// Rasterizes the agent's simulated sweep: nearest hits are binned into grid
/// cells, producing occupancy, log-density, and normalized mean-range
/// channels. Cells behind the first hit along a ray receive nothing.
pub fn rasterize(
    frame: &Frame,
    agent_id: u32,
    grid: &GridSpec,
    cfg: &ScenarioConfig,
) -> Result<PseudoImage> {
    let agent = frame
        .agent(agent_id)
        .ok_or_else(|| Error::usage(format!("agent {agent_id} not in frame")))?;
    let max_range = cfg.agent_range(agent.agent_type);

    let mut count = vec![0.0f64; grid.h * grid.w];
    let mut range_sum = vec![0.0f64; grid.h * grid.w];
    for hit in cast_rays(frame, agent, cfg).into_iter().flatten() {
        let body = agent.pose.to_body(hit.point);
        if let Some((row, col)) = grid.cell_index(body.0, body.1) {
            count[row * grid.w + col] += 1.0;
            range_sum[row * grid.w + col] += hit.distance;
        }
    }

    let mut data = vec![0.0f64; grid.h * grid.w * RASTER_CHANNELS];
    for i in 0..grid.h * grid.w {
        if count[i] > 0.0 {
            data[i * RASTER_CHANNELS] = 1.0;
            data[i * RASTER_CHANNELS + 1] = count[i].ln_1p();
            data[i * RASTER_CHANNELS + 2] = range_sum[i] / count[i] / max_range;
        }
    }
    Ok(PseudoImage {
        tensor: Tensor::from_vec(vec![grid.h, grid.w, RASTER_CHANNELS], data)?,
        grid: *grid,
    })
}

// ── persistence ──────────────────────────────────────────────────────────────

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    let text = serde_json::to_string_pretty(scene)
        .map_err(|e| Error::Parse(format!("scene serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path)?;
    let scene: Scene = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if scene.schema_version != SCENE_SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "unsupported scene schema {} (expected {SCENE_SCHEMA_VERSION})",
            scene.schema_version
        )));
    }
    Ok(scene)
}

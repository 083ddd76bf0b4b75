//! Fixed sinusoidal encoding of inter-agent distance and bearing, with
//! frequencies that depend on the sender's agent type.

use std::collections::BTreeMap;

use crate::scenario::AgentType;

/// Encoding parameters. `channels` is the fusion width C; vectors have
/// length C/4 and use C/16 frequency octaves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrpeConfig {
    pub channels: usize,
    pub tau: f64,
    pub theta_bin_deg: f64,
    pub d_bin_m: f64,
}

/// Frequency for octave `j`: vehicles use `tau^(-2j)`, infrastructure
/// `tau^(-(2j+1))`, so the infra/vehicle ratio is exactly `1/tau`.
pub fn omega(agent_type: AgentType, j: usize, tau: f64) -> f64 {
    let vehicle = tau.powi(-2 * j as i32);
    match agent_type {
        AgentType::Vehicle => vehicle,
        AgentType::Infrastructure => vehicle / tau,
    }
}

/// Quantizes a value to its bin index (floor) for table addressing.
pub fn bin_index(value: f64, bin: f64) -> i64 {
    (value / bin).floor() as i64
}

/// Center of a quantization bin.
pub fn bin_center(index: i64, bin: f64) -> f64 {
    (index as f64 + 0.5) * bin
}

/// Evaluates the encoding for already-quantized distance and bearing:
/// `p[4j..4j+4] = [sin(d w_j), cos(d w_j), sin(th w_j), cos(th w_j)]`.
pub fn encode_quantized(d: f64, theta: f64, agent_type: AgentType, cfg: &HrpeConfig) -> Vec<f64> {
    let octaves = cfg.channels / 16;
    let mut p = Vec::with_capacity(cfg.channels / 4);
    for j in 0..octaves {
        let w = omega(agent_type, j, cfg.tau);
        p.push((d * w).sin());
        p.push((d * w).cos());
        p.push((theta * w).sin());
        p.push((theta * w).cos());
    }
    p
}

/// Quantize-then-encode for raw (distance, bearing) inputs.
pub fn hrpe_encode(d: f64, theta: f64, agent_type: AgentType, cfg: &HrpeConfig) -> Vec<f64> {
    let dq = bin_center(bin_index(d, cfg.d_bin_m), cfg.d_bin_m);
    let theta_bin = cfg.theta_bin_deg.to_radians();
    let tq = bin_center(bin_index(theta, theta_bin), theta_bin);
    encode_quantized(dq, tq, agent_type, cfg)
}

/// Precomputed encoding table over all (type, distance bin, bearing bin)
/// triples reachable within `d_max`. Lookups return the cached vector, so
/// identical inputs are bit-identical by construction.
pub struct HrpeTable {
    cfg: HrpeConfig,
    d_bins: i64,
    theta_lo: i64,
    theta_hi: i64,
    entries: BTreeMap<(u8, i64, i64), Vec<f64>>,
}

fn type_key(t: AgentType) -> u8 {
    match t {
        AgentType::Infrastructure => 0,
        AgentType::Vehicle => 1,
    }
}

impl HrpeTable {
    pub fn build(cfg: HrpeConfig, d_max: f64) -> HrpeTable {
        let theta_bin = cfg.theta_bin_deg.to_radians();
        let theta_lo = bin_index(-std::f64::consts::PI, theta_bin) - 1;
        let theta_hi = bin_index(std::f64::consts::PI, theta_bin) + 1;
        let d_bins = (bin_index(d_max, cfg.d_bin_m) + 1).max(1);
        let mut entries = BTreeMap::new();
        for t in [AgentType::Infrastructure, AgentType::Vehicle] {
            for di in 0..d_bins {
                for ti in theta_lo..=theta_hi {
                    let p = encode_quantized(
                        bin_center(di, cfg.d_bin_m),
                        bin_center(ti, theta_bin),
                        t,
                        &cfg,
                    );
                    entries.insert((type_key(t), di, ti), p);
                }
            }
        }
        HrpeTable {
            cfg,
            d_bins,
            theta_lo,
            theta_hi,
            entries,
        }
    }

    pub fn config(&self) -> &HrpeConfig {
        &self.cfg
    }

    /// Encoding vector for a raw (distance, bearing, type) triple. Distances
    /// beyond the table range clamp to the outermost bin.
    pub fn lookup(&self, d: f64, theta: f64, agent_type: AgentType) -> &[f64] {
        let di = bin_index(d, self.cfg.d_bin_m).clamp(0, self.d_bins - 1);
        let ti = bin_index(theta, self.cfg.theta_bin_deg.to_radians())
            .clamp(self.theta_lo, self.theta_hi);
        self.entries
            .get(&(type_key(agent_type), di, ti))
            .expect("table covers the clamped index range")
    }
}

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

/// System and traffic parameters of the resource allocation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PraConfig {
    pub n_b: usize,
    pub k_max: usize,
    pub t_f: usize,
    /// Slots per frame.
    pub t_s: usize,
    /// Frame duration in seconds.
    pub delta: f64,
    /// Cell radius in meters; base stations sit `2·radius` apart.
    pub cell_radius: f64,
    pub n_tx: usize,
    /// Maximal transmit power in watts.
    pub p_max: f64,
    pub cell_edge_snr_db: f64,
    /// Mean residual bandwidth per base station in Hz.
    pub mean_bandwidth: Vec<f64>,
    /// Standard deviation of the bandwidth as a fraction of its mean.
    pub bandwidth_std_fraction: f64,
    /// Requested file size in bits.
    pub file_bits: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Perpendicular distance of each road from the base station line.
    pub road_offsets: Vec<f64>,
}

impl Default for PraConfig {
    fn default() -> Self {
        PraConfig {
            n_b: 4,
            k_max: 8,
            t_f: 10,
            t_s: 100,
            delta: 1.0,
            cell_radius: 250.0,
            n_tx: 8,
            p_max: 40.0,
            cell_edge_snr_db: 5.0,
            mean_bandwidth: vec![10e6, 5e6, 10e6, 5e6],
            bandwidth_std_fraction: 0.2,
            file_bits: 48e6,
            speed_min: 10.0,
            speed_max: 25.0,
            road_offsets: vec![50.0, 100.0, 150.0],
        }
    }
}

fn bad(field: &str, message: &str) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

impl PraConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_b", self.n_b as f64),
            ("k_max", self.k_max as f64),
            ("t_f", self.t_f as f64),
            ("t_s", self.t_s as f64),
            ("delta", self.delta),
            ("cell_radius", self.cell_radius),
            ("n_tx", self.n_tx as f64),
            ("p_max", self.p_max),
            ("file_bits", self.file_bits),
            ("speed_min", self.speed_min),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(field, "must be positive"));
            }
        }
        if !self.cell_edge_snr_db.is_finite() {
            return Err(bad("cell_edge_snr_db", "must be finite"));
        }
        if !(self.speed_max >= self.speed_min && self.speed_max.is_finite()) {
            return Err(bad("speed_max", "speed range is empty"));
        }
        if self.mean_bandwidth.len() != self.n_b {
            return Err(bad("mean_bandwidth", "needs one entry per base station"));
        }
        if self.mean_bandwidth.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(bad("mean_bandwidth", "must be positive"));
        }
        if !(self.bandwidth_std_fraction >= 0.0 && self.bandwidth_std_fraction.is_finite()) {
            return Err(bad("bandwidth_std_fraction", "must be non-negative"));
        }
        if self.road_offsets.is_empty() || self.road_offsets.iter().any(|&o| !(o > 0.0)) {
            return Err(bad("road_offsets", "need at least one positive offset"));
        }
        Ok(())
    }

    /// Large-scale gain `10^(-PL/10)` with `PL = 36.8 + 36.7·log10(d)`.
    pub fn path_gain(distance: f64) -> f64 {
        let pl_db = 36.8 + 36.7 * distance.max(1.0).log10();
        10f64.powf(-pl_db / 10.0)
    }

    /// Noise power such that `P_max·α(R_b)/σ₀²` equals the cell-edge SNR.
    pub fn noise_power(&self) -> f64 {
        self.p_max * Self::path_gain(self.cell_radius) / 10f64.powf(self.cell_edge_snr_db / 10.0)
    }

    pub fn bs_positions(&self) -> Vec<f64> {
        (0..self.n_b)
            .map(|i| self.cell_radius * (2 * i + 1) as f64)
            .collect()
    }

    pub fn road_length(&self) -> f64 {
        2.0 * self.cell_radius * self.n_b as f64
    }
}

/// Serving base station of every user in every frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    pub n_b: usize,
    pub t_f: usize,
    pub k: usize,
    /// `serving[j·k + user]`.
    pub serving: Vec<usize>,
}

impl Association {
    pub fn new(n_b: usize, t_f: usize, k: usize, serving: Vec<usize>) -> Result<Self> {
        if serving.len() != t_f * k || serving.iter().any(|&b| b >= n_b) {
            return Err(Error::shape(format!(
                "association needs {t_f}×{k} entries below {n_b}"
            )));
        }
        Ok(Association { n_b, t_f, k, serving })
    }

    pub fn bs(&self, frame: usize, user: usize) -> usize {
        self.serving[frame * self.k + user]
    }

    /// `M_i` as a `[t_f × k]` 0/1 matrix.
    pub fn mask(&self, i: usize) -> Tensor {
        let data = self
            .serving
            .iter()
            .map(|&b| if b == i { 1.0 } else { 0.0 })
            .collect();
        Tensor::matrix(self.t_f, self.k, data).expect("sized")
    }

    /// Reads `N_b` stacked 0/1 masks; each user-frame must belong to exactly
    /// one base station.
    pub fn from_masks(n_b: usize, t_f: usize, k: usize, m: &[f64]) -> Result<Self> {
        if m.len() != n_b * t_f * k {
            return Err(Error::shape(format!(
                "association masks hold {} values, expected {}",
                m.len(),
                n_b * t_f * k
            )));
        }
        let mut serving = vec![usize::MAX; t_f * k];
        for i in 0..n_b {
            for (idx, s) in serving.iter_mut().enumerate() {
                let v = m[i * t_f * k + idx];
                if v == 1.0 {
                    if *s != usize::MAX {
                        return Err(Error::contract("user associated to two base stations"));
                    }
                    *s = i;
                } else if v != 0.0 {
                    return Err(Error::contract("association masks must be 0/1"));
                }
            }
        }
        if serving.contains(&usize::MAX) {
            return Err(Error::contract("user without a serving base station"));
        }
        Ok(Association { n_b, t_f, k, serving })
    }

    pub fn to_masks(&self) -> Vec<f64> {
        (0..self.n_b).flat_map(|i| self.mask(i).into_data()).collect()
    }

    /// Same association with users reordered so that new user `u` is old
    /// user `perm[u]`.
    pub fn permute_users(&self, perm: &[usize]) -> Self {
        let mut serving = Vec::with_capacity(self.serving.len());
        for j in 0..self.t_f {
            for &p in perm {
                serving.push(self.bs(j, p));
            }
        }
        Association { serving, ..self.clone() }
    }
}

/// Known parameters of one prediction window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PraScenario {
    pub k: usize,
    pub t_f: usize,
    pub n_b: usize,
    /// Large-scale gain towards the serving base station, `[t_f × k]`.
    pub gain: Tensor,
    /// Mean residual bandwidth per base station and frame, `[n_b × t_f]`.
    pub bandwidth: Tensor,
    pub assoc: Association,
}

/// Position along a road of length `len` after travelling `dist` from `x0`,
/// reflecting at both ends.
fn reflect(x0: f64, dist: f64, len: f64) -> f64 {
    let period = 2.0 * len;
    let p = (x0 + dist).rem_euclid(period);
    if p <= len {
        p
    } else {
        period - p
    }
}

/// Draws `k` users on the roads and evaluates gains, association and
/// bandwidth for every frame.
///
/// Users start uniformly along a uniformly chosen road, move in a random
/// direction with uniform speed, and bounce off the road ends. Positions are
/// taken at frame midpoints.
pub fn generate_pra_scenario(cfg: &PraConfig, k: usize, rng: &mut Rng) -> Result<PraScenario> {
    cfg.validate()?;
    if k == 0 || k > cfg.k_max {
        return Err(Error::contract(format!("K = {k} outside 1..={}", cfg.k_max)));
    }
    let bs = cfg.bs_positions();
    let len = cfg.road_length();
    let mut gain = vec![0.0; cfg.t_f * k];
    let mut serving = vec![0; cfg.t_f * k];
    for user in 0..k {
        let offset = cfg.road_offsets[rng.random_range(0..cfg.road_offsets.len())];
        let x0 = rng.random_range(0.0..len);
        let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let speed = if cfg.speed_max > cfg.speed_min {
            rng.random_range(cfg.speed_min..cfg.speed_max)
        } else {
            cfg.speed_min
        };
        for j in 0..cfg.t_f {
            let t = (j as f64 + 0.5) * cfg.delta;
            let x = reflect(x0, dir * speed * t, len);
            let (best, g) = bs
                .iter()
                .enumerate()
                .map(|(i, &b)| (i, PraConfig::path_gain((x - b).hypot(offset))))
                .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
            gain[j * k + user] = g;
            serving[j * k + user] = best;
        }
    }
    let mut bandwidth = Vec::with_capacity(cfg.n_b * cfg.t_f);
    for &mean in &cfg.mean_bandwidth {
        let normal = Normal::new(mean, cfg.bandwidth_std_fraction * mean)
            .map_err(|e| bad("bandwidth_std_fraction", &e.to_string()))?;
        for _ in 0..cfg.t_f {
            bandwidth.push(normal.sample(rng).max(0.0));
        }
    }
    Ok(PraScenario {
        k,
        t_f: cfg.t_f,
        n_b: cfg.n_b,
        gain: Tensor::matrix(cfg.t_f, k, gain)?,
        bandwidth: Tensor::matrix(cfg.n_b, cfg.t_f, bandwidth)?,
        assoc: Association::new(cfg.n_b, cfg.t_f, k, serving)?,
    })
}

/// `r = W·log2(1 + α·N_tx·P_max/σ₀²) / (B·Δ)` per frame and user, `[t_f × k]`.
pub fn compute_average_rates(s: &PraScenario, cfg: &PraConfig) -> Result<Tensor> {
    let noise = cfg.noise_power();
    let mut r = vec![0.0; s.t_f * s.k];
    for j in 0..s.t_f {
        for u in 0..s.k {
            let w = s.bandwidth.at2(s.assoc.bs(j, u), j);
            let snr = s.gain.at2(j, u) * cfg.n_tx as f64 * cfg.p_max / noise;
            r[j * s.k + u] = w * (1.0 + snr).log2() / (cfg.file_bits * cfg.delta);
        }
    }
    Tensor::matrix(s.t_f, s.k, r)
}

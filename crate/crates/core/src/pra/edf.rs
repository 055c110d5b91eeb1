use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{Association, PraConfig, PraScenario};
use crate::numcore::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdfOptions {
    /// Draw an independent Rayleigh small-scale gain per slot instead of
    /// using the frame-average rate.
    pub slot_fading: bool,
    /// Frames simulated past the window before giving up on late users.
    pub max_extra_frames: usize,
}

impl Default for EdfOptions {
    fn default() -> Self {
        EdfOptions { slot_fading: false, max_extra_frames: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdfReport {
    /// Slots used per user divided by `T_s`, summed over users.
    pub total_time: f64,
    pub slots_per_user: Vec<usize>,
    /// Users still short of their file when the simulation stopped.
    pub unfinished: usize,
    /// Users finishing after the window end.
    pub late: usize,
    /// Global slot index of each user's first service.
    pub first_slot: Vec<usize>,
}

/// Non-predictive slot scheduler.
///
/// In every slot each base station serves one of its unfinished users: the
/// earliest deadline first (all users share the window end), then the most
/// remaining bits, then the lowest index. Rates beyond the window repeat the
/// last frame. Slot fading needs the `scenario` for gains and bandwidths.
pub fn edf_baseline(
    assoc: &Association,
    rates: &Tensor,
    cfg: &PraConfig,
    opts: &EdfOptions,
    scenario: Option<&PraScenario>,
    rng: &mut Rng,
) -> Result<EdfReport> {
    simulate(assoc, rates, cfg, opts, scenario, rng, vec![1.0; assoc.k])
}

/// `remaining` holds each user's outstanding share of its file.
fn simulate(
    s: &Association,
    rates: &Tensor,
    cfg: &PraConfig,
    opts: &EdfOptions,
    scenario: Option<&PraScenario>,
    rng: &mut Rng,
    mut remaining: Vec<f64>,
) -> Result<EdfReport> {
    if rates.shape() != [s.t_f, s.k] || remaining.len() != s.k {
        return Err(Error::shape(format!(
            "rates {:?} do not match the scenario",
            rates.shape()
        )));
    }
    let (k, t_s) = (s.k, cfg.t_s);
    let fading = match (opts.slot_fading, scenario) {
        (false, _) => None,
        (true, Some(sc)) => Some((
            sc,
            Gamma::new(cfg.n_tx as f64, 1.0).map_err(|e| Error::contract(e.to_string()))?,
        )),
        (true, None) => return Err(Error::contract("slot fading needs the scenario")),
    };
    let noise = cfg.noise_power();
    let mut first_slot = vec![usize::MAX; k];
    let mut clock = 0;
    let mut slots = vec![0usize; k];
    let mut finish_frame = vec![usize::MAX; k];
    let deadline = vec![s.t_f; k];
    for frame in 0..s.t_f + opts.max_extra_frames {
        if remaining.iter().all(|&r| r <= 0.0) {
            break;
        }
        let j = frame.min(s.t_f - 1);
        for _slot in 0..t_s {
            clock += 1;
            for i in 0..s.n_b {
                let pick = (0..k)
                    .filter(|&u| s.bs(j, u) == i && remaining[u] > 0.0)
                    .min_by(|&a, &b| {
                        deadline[a]
                            .cmp(&deadline[b])
                            .then(remaining[b].total_cmp(&remaining[a]))
                            .then(a.cmp(&b))
                    });
                let Some(u) = pick else { continue };
                let rate = match &fading {
                    None => rates.at2(j, u),
                    Some((sc, g)) => {
                        let w = sc.bandwidth.at2(i, j);
                        let snr = sc.gain.at2(j, u) * g.sample(rng) * cfg.p_max / noise;
                        w * (1.0 + snr).log2() / (cfg.file_bits * cfg.delta)
                    }
                };
                first_slot[u] = first_slot[u].min(clock - 1);
                remaining[u] -= rate / t_s as f64;
                slots[u] += 1;
                if remaining[u] <= 1e-12 {
                    remaining[u] = 0.0;
                    finish_frame[u] = frame;
                }
            }
        }
    }
    Ok(EdfReport {
        total_time: slots.iter().sum::<usize>() as f64 / t_s as f64,
        unfinished: remaining.iter().filter(|&&r| r > 0.0).count(),
        late: finish_frame.iter().filter(|&&f| f != usize::MAX && f >= s.t_f).count(),
        slots_per_user: slots,
        first_slot,
    })
}

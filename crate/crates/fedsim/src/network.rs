//! Per-client connection-failure processes: transient outages from a
//! path-loss/shadowing channel model, intermittent multi-round
//! disconnections, the mixed mode, and the transmit-power/bandwidth
//! resource allocators.
//!
//! Unit conventions: transmit power in dBm, noise power spectral density in
//! dBm/Hz, bandwidth in Hz, distance in km, carrier frequency in MHz. dB
//! quantities convert to linear milliwatts via `10^(dBm/10)`, so the SNR
//! `P |h|^2 / (W N0)` is formed consistently in milliwatts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::aggregation::project_simplex;
use crate::error::SimError;
use crate::Result;

/// Noise power spectral density in dBm/Hz.
pub const NOISE_PSD_DBM_PER_HZ: f64 = -174.0;
/// Path-loss exponent of the log-distance model.
pub const PATH_LOSS_EXPONENT: f64 = 3.0;
/// Shadowing standard deviation (dB) with line of sight.
pub const SHADOW_SIGMA_LOS_DB: f64 = 4.0;
/// Shadowing standard deviation (dB) without line of sight.
pub const SHADOW_SIGMA_NLOS_DB: f64 = 8.0;

/// Communication standard of a server-client link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkStandard {
    Wired,
    Wifi24,
    Wifi5,
    Cell4g,
    Cell5g,
}

impl NetworkStandard {
    pub fn is_wired(self) -> bool {
        self == NetworkStandard::Wired
    }

    /// Penetration loss applied per wall, in dB.
    pub fn wall_loss_db(self) -> f64 {
        match self {
            NetworkStandard::Wired => 0.0,
            NetworkStandard::Wifi24 => 12.0,
            NetworkStandard::Wifi5 => 18.0,
            NetworkStandard::Cell4g => 10.0,
            NetworkStandard::Cell5g => 15.0,
        }
    }

    pub const ALL: [NetworkStandard; 5] = [
        NetworkStandard::Wired,
        NetworkStandard::Wifi24,
        NetworkStandard::Wifi5,
        NetworkStandard::Cell4g,
        NetworkStandard::Cell5g,
    ];
}

/// Physical configuration of one server-client link.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinkConfig {
    pub standard: NetworkStandard,
    pub tx_power_dbm: f64,
    pub bandwidth_hz: f64,
    pub carrier_mhz: f64,
    pub distance_km: f64,
    pub wall_count: u32,
    pub line_of_sight: bool,
    /// Uploaded model size in bits.
    pub model_size_bits: f64,
    /// Transmission delay budget per round in seconds.
    pub tx_delay_s: f64,
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0) {
            return Err(SimError::parameter("bandwidth must be positive"));
        }
        if self.carrier_mhz < 0.0 {
            return Err(SimError::parameter("carrier frequency must be nonnegative"));
        }
        if !self.standard.is_wired() && !(self.distance_km > 0.0) {
            return Err(SimError::parameter(
                "wireless links need a positive distance",
            ));
        }
        if !(self.model_size_bits > 0.0) || !(self.tx_delay_s > 0.0) {
            return Err(SimError::parameter(
                "model size and transmission delay must be positive",
            ));
        }
        Ok(())
    }

    /// Required upload rate `L_i / tau_i` in bits per second.
    pub fn required_rate_bps(&self) -> f64 {
        self.model_size_bits / self.tx_delay_s
    }
}

/// Parameters of the transient-outage channel model for one link, with the
/// resulting per-round outage probability.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransientModel {
    pub epsilon: f64,
    pub path_loss_exponent: f64,
    pub shadow_sigma_db: f64,
    pub wall_loss_db: f64,
    pub noise_psd_dbm_per_hz: f64,
}

impl TransientModel {
    /// Builds the channel model for a link and evaluates its outage
    /// probability in closed form. Wired links get epsilon zero.
    pub fn for_link(link: &LinkConfig) -> Result<Self> {
        link.validate()?;
        let mut model = Self {
            epsilon: 0.0,
            path_loss_exponent: PATH_LOSS_EXPONENT,
            shadow_sigma_db: if link.line_of_sight {
                SHADOW_SIGMA_LOS_DB
            } else {
                SHADOW_SIGMA_NLOS_DB
            },
            wall_loss_db: link.standard.wall_loss_db(),
            noise_psd_dbm_per_hz: NOISE_PSD_DBM_PER_HZ,
        };
        model.epsilon = transient_failure_prob(link, &model)?;
        Ok(model)
    }
}

fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

fn to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// Shannon capacity `W log2(1 + P |h|^2 / (W N0))` in bits per second,
/// with `h2_linear` the linear channel power gain.
pub fn channel_capacity(link: &LinkConfig, h2_linear: f64) -> Result<f64> {
    if !(h2_linear > 0.0) {
        return Err(SimError::parameter("channel gain must be positive"));
    }
    link.validate()?;
    let p_mw = dbm_to_mw(link.tx_power_dbm);
    let noise_mw = link.bandwidth_hz * dbm_to_mw(NOISE_PSD_DBM_PER_HZ);
    Ok(link.bandwidth_hz * (1.0 + p_mw * h2_linear / noise_mw).log2())
}

/// Deterministic part of the channel gain in dB: free-space reference loss
/// `20 log10(d_km) + 20 log10(f_MHz) + 32.44`, the log-distance term with
/// exponent lambda, and the per-wall penetration loss. Wall values are
/// losses and are subtracted.
pub fn mean_channel_gain_db(link: &LinkConfig, model: &TransientModel) -> Result<f64> {
    if link.standard.is_wired() {
        return Err(SimError::contract(
            "wired links have no wireless channel gain",
        ));
    }
    link.validate()?;
    let reference_loss = 20.0 * link.distance_km.log10() + 20.0 * link.carrier_mhz.log10() + 32.44;
    let distance_loss = model.path_loss_exponent * to_db(link.distance_km);
    let wall_loss = link.wall_count as f64 * model.wall_loss_db;
    Ok(-reference_loss - distance_loss - wall_loss)
}

/// Draws one linear channel power gain `|h|^2` with log-normal shadowing.
pub fn sample_channel_gain(
    link: &LinkConfig,
    model: &TransientModel,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mean_db = mean_channel_gain_db(link, model)?;
    let shadow: f64 = rng.sample::<f64, _>(StandardNormal) * model.shadow_sigma_db;
    Ok(10f64.powf((mean_db + shadow) / 10.0))
}

/// Closed-form transient outage probability: the chance that the
/// instantaneous capacity falls at or below the required rate. The capacity
/// constraint inverts to a threshold gain, and the Gaussian shadowing gives
/// the probability of falling below it. Wired links never fail.
pub fn transient_failure_prob(link: &LinkConfig, model: &TransientModel) -> Result<f64> {
    if link.standard.is_wired() {
        return Ok(0.0);
    }
    link.validate()?;
    let rate = link.required_rate_bps();
    if !(rate > 0.0) {
        return Err(SimError::parameter("required rate must be positive"));
    }
    let p_mw = dbm_to_mw(link.tx_power_dbm);
    let noise_mw = link.bandwidth_hz * dbm_to_mw(model.noise_psd_dbm_per_hz);
    let threshold_gain = ((rate / link.bandwidth_hz).exp2() - 1.0) * noise_mw / p_mw;
    if !threshold_gain.is_finite() {
        return Ok(1.0); // rate far beyond any achievable capacity
    }
    let threshold_db = to_db(threshold_gain);
    let mean_db = mean_channel_gain_db(link, model)?;
    if model.shadow_sigma_db <= 0.0 {
        return Ok(if mean_db <= threshold_db { 1.0 } else { 0.0 });
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(normal.cdf((threshold_db - mean_db) / model.shadow_sigma_db))
}

/// One Bernoulli realization of a transient outage: `false` (disconnected)
/// with probability `epsilon`.
pub fn sample_transient(epsilon: f64, rng: &mut ChaCha8Rng) -> Result<bool> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(SimError::parameter("epsilon must lie in [0, 1]"));
    }
    Ok(rng.gen::<f64>() >= epsilon)
}

/// State of one client's intermittent-failure process.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntermittentState {
    /// Failure rate per round.
    pub rate_lambda: f64,
    /// Round at which the client last recovered.
    pub last_recovery_round: u64,
    /// Remaining outage rounds; positive iff currently disconnected.
    pub outage_rounds_remaining: u32,
    /// Duration parameter: outages last 1 to `floor(100 / alpha)` rounds.
    pub duration_alpha: f64,
}

impl IntermittentState {
    pub fn new(rate_lambda: f64, duration_alpha: f64) -> Result<Self> {
        if !(rate_lambda >= 0.0) {
            return Err(SimError::parameter("rate_lambda must be nonnegative"));
        }
        if !(duration_alpha > 0.0) {
            return Err(SimError::parameter("duration_alpha must be positive"));
        }
        Ok(Self {
            rate_lambda,
            last_recovery_round: 0,
            outage_rounds_remaining: 0,
            duration_alpha,
        })
    }

    /// Largest outage duration, `max(1, floor(100 / alpha))` rounds.
    pub fn max_duration(&self) -> u32 {
        ((100.0 / self.duration_alpha).floor() as u32).max(1)
    }

    pub fn is_disconnected(&self) -> bool {
        self.outage_rounds_remaining > 0
    }
}

/// Advances the intermittent process by one round and reports connectivity.
///
/// The waiting time from recovery to the next failure is exponential: the
/// probability that a failure has occurred within `t = round - r0` rounds is
/// `1 - exp(-lambda t)`. At integer rounds this law is realized exactly by a
/// constant conditional trigger probability `1 - exp(-lambda)` per connected
/// round (and zero at `round == r0`). Triggered outages last a uniform
/// integer number of rounds in `[1, max_duration]`, the trigger round
/// counting as the first.
pub fn intermittent_step(state: &mut IntermittentState, round: u64, rng: &mut ChaCha8Rng) -> bool {
    if state.outage_rounds_remaining > 0 {
        state.outage_rounds_remaining -= 1;
        if state.outage_rounds_remaining == 0 {
            state.last_recovery_round = round;
        }
        return false;
    }
    if round <= state.last_recovery_round {
        return true;
    }
    let hazard = 1.0 - (-state.rate_lambda).exp();
    if rng.gen::<f64>() < hazard {
        let duration = rng.gen_range(1..=state.max_duration());
        state.outage_rounds_remaining = duration - 1;
        if state.outage_rounds_remaining == 0 {
            state.last_recovery_round = round;
        }
        return false;
    }
    true
}

/// Mixed failure mode: connected iff the transient draw succeeds and the
/// intermittent process reports connected. Both sub-processes advance.
pub fn mixed_step(
    epsilon: f64,
    state: &mut IntermittentState,
    round: u64,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let transient_ok = sample_transient(epsilon, rng)?;
    let intermittent_ok = intermittent_step(state, round, rng);
    Ok(transient_ok && intermittent_ok)
}

// ---------------------------------------------------------------------------
// Resource allocation optimizers
// ---------------------------------------------------------------------------

/// Result of a resource optimization pass.
#[derive(Debug, Clone)]
pub struct ResourceOptOutcome {
    /// Updated link table (ineligible and wired links unchanged).
    pub links: Vec<LinkConfig>,
    /// Post-optimization physical outage probability per client.
    pub epsilons: Vec<f64>,
    /// Drop probability applied to wired uploads so wired clients match the
    /// eligible mean (joint mode only; zero otherwise).
    pub wired_drop_prob: f64,
    /// Eligibility of each client (`eps0 <= eps_th`).
    pub eligible: Vec<bool>,
    /// Variance of eligible clients' epsilon before optimization.
    pub initial_variance: f64,
    /// Variance of eligible clients' epsilon after optimization, wired
    /// clients counted at their drop probability.
    pub final_variance: f64,
    /// Objective value per accepted iterate (non-increasing).
    pub objective_trace: Vec<f64>,
}

fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
}

/// Optimization variables for the eligible wireless clients of one scope.
struct ResourceVars {
    clients: Vec<usize>,
    /// Power in dBm per variable client.
    power_dbm: Vec<f64>,
    /// Bandwidth as a fraction of the client's group budget.
    band_frac: Vec<f64>,
    /// Per-standard groups of variable indices sharing a bandwidth budget.
    groups: Vec<Vec<usize>>,
    group_budget_hz: Vec<f64>,
    power_cap_dbm: Vec<f64>,
}

const MIN_BAND_FRACTION: f64 = 1e-4;

impl ResourceVars {
    fn new(links: &[LinkConfig], members: &[usize]) -> Self {
        let mut clients = Vec::new();
        let mut power_dbm = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut group_budget_hz = Vec::new();
        let mut power_cap_dbm = Vec::new();
        let mut band_hz = Vec::new();
        for standard in NetworkStandard::ALL {
            if standard.is_wired() {
                continue;
            }
            let group_members: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| links[i].standard == standard)
                .collect();
            if group_members.is_empty() {
                continue;
            }
            let budget: f64 = group_members.iter().map(|&i| links[i].bandwidth_hz).sum();
            let cap = group_members
                .iter()
                .map(|&i| links[i].tx_power_dbm)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut group = Vec::new();
            for &i in &group_members {
                group.push(clients.len());
                clients.push(i);
                power_dbm.push(links[i].tx_power_dbm);
                band_hz.push(links[i].bandwidth_hz);
                power_cap_dbm.push(cap);
            }
            groups.push(group);
            group_budget_hz.push(budget);
        }
        let mut band_frac = vec![0.0; clients.len()];
        for (g, group) in groups.iter().enumerate() {
            for &v in group {
                band_frac[v] = band_hz[v] / group_budget_hz[g];
            }
        }
        Self {
            clients,
            power_dbm,
            band_frac,
            groups,
            group_budget_hz,
            power_cap_dbm,
        }
    }

    fn bandwidth_hz(&self, v: usize) -> f64 {
        let g = self
            .groups
            .iter()
            .position(|group| group.contains(&v))
            .expect("variable belongs to a group");
        self.band_frac[v] * self.group_budget_hz[g]
    }

    fn link_for(&self, links: &[LinkConfig], v: usize) -> LinkConfig {
        let mut link = links[self.clients[v]].clone();
        link.tx_power_dbm = self.power_dbm[v];
        link.bandwidth_hz = self.bandwidth_hz(v);
        link
    }

    /// Clamps powers to their caps and projects each group's bandwidth
    /// fractions back onto `{f >= MIN_BAND_FRACTION, sum f <= 1}`.
    fn project(&mut self) {
        for v in 0..self.clients.len() {
            if self.power_dbm[v] > self.power_cap_dbm[v] {
                self.power_dbm[v] = self.power_cap_dbm[v];
            }
        }
        for group in &self.groups {
            for &v in group {
                if self.band_frac[v] < MIN_BAND_FRACTION {
                    self.band_frac[v] = MIN_BAND_FRACTION;
                }
            }
            let total: f64 = group.iter().map(|&v| self.band_frac[v]).sum();
            if total > 1.0 {
                let shifted: Vec<f64> = group
                    .iter()
                    .map(|&v| self.band_frac[v] - MIN_BAND_FRACTION)
                    .collect();
                let budget = 1.0 - MIN_BAND_FRACTION * group.len() as f64;
                let projected = project_simplex(&shifted, budget.max(0.0));
                for (k, &v) in group.iter().enumerate() {
                    self.band_frac[v] = projected[k] + MIN_BAND_FRACTION;
                }
            }
        }
    }

    fn assert_feasible(&self) -> Result<()> {
        for v in 0..self.clients.len() {
            if self.power_dbm[v] > self.power_cap_dbm[v] + 1e-9 {
                return Err(SimError::contract("power cap violated"));
            }
        }
        for (g, group) in self.groups.iter().enumerate() {
            let total: f64 = group.iter().map(|&v| self.bandwidth_hz(v)).sum();
            if total > self.group_budget_hz[g] * (1.0 + 1e-9) {
                return Err(SimError::contract("bandwidth budget violated"));
            }
        }
        Ok(())
    }
}

/// Shared projected-gradient driver. `mean_over` lists the clients whose
/// epsilons define the equalization target (they may include wired clients
/// pinned at zero); the variance objective runs over the variable clients.
fn equalize_epsilons(
    links: &mut [LinkConfig],
    models: &[TransientModel],
    vars: &mut ResourceVars,
    extra_zero_terms: usize,
    step_size: f64,
    iterations: usize,
) -> Result<Vec<f64>> {
    let n_vars = vars.clients.len();
    let eps_of = |vars: &ResourceVars, links: &[LinkConfig], v: usize| -> Result<f64> {
        let link = vars.link_for(links, v);
        transient_failure_prob(&link, &models[vars.clients[v]])
    };
    let objective = |vars: &ResourceVars, links: &[LinkConfig]| -> Result<(f64, Vec<f64>)> {
        let eps: Vec<f64> = (0..n_vars)
            .map(|v| eps_of(vars, links, v))
            .collect::<Result<_>>()?;
        let mean = eps.iter().sum::<f64>() / (n_vars + extra_zero_terms) as f64;
        let value = 0.5 * eps.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>();
        Ok((value, eps))
    };

    vars.project();
    vars.assert_feasible()?;
    let (mut current, mut eps) = objective(vars, links)?;
    let mut trace = vec![current];

    for _ in 0..iterations {
        let mean = eps.iter().sum::<f64>() / (n_vars + extra_zero_terms) as f64;
        let centered_sum: f64 = eps.iter().map(|e| e - mean).sum();
        // dJ/deps_v for the variance objective with the mean folded in.
        let dj_deps: Vec<f64> = eps
            .iter()
            .map(|e| (e - mean) - centered_sum / (n_vars + extra_zero_terms) as f64)
            .collect();

        // Central finite differences of eps in each variable, relative step.
        let mut grad_p = vec![0.0; n_vars];
        let mut grad_f = vec![0.0; n_vars];
        for v in 0..n_vars {
            let p0 = vars.power_dbm[v];
            let hp = (p0.abs() * 1e-4).max(1e-6);
            vars.power_dbm[v] = p0 + hp;
            let hi = eps_of(vars, links, v)?;
            vars.power_dbm[v] = p0 - hp;
            let lo = eps_of(vars, links, v)?;
            vars.power_dbm[v] = p0;
            grad_p[v] = dj_deps[v] * (hi - lo) / (2.0 * hp);

            let f0 = vars.band_frac[v];
            let hf = (f0 * 1e-4).max(1e-9);
            vars.band_frac[v] = f0 + hf;
            let hi = eps_of(vars, links, v)?;
            vars.band_frac[v] = f0 - hf;
            let lo = eps_of(vars, links, v)?;
            vars.band_frac[v] = f0;
            grad_f[v] = dj_deps[v] * (hi - lo) / (2.0 * hf);
        }

        // Backtracking keeps the objective non-increasing at every iterate.
        let mut local_step = step_size;
        let mut improved = false;
        for _ in 0..40 {
            let mut trial = ResourceVars {
                clients: vars.clients.clone(),
                power_dbm: vars
                    .power_dbm
                    .iter()
                    .zip(&grad_p)
                    .map(|(&p, &g)| p - local_step * g)
                    .collect(),
                band_frac: vars
                    .band_frac
                    .iter()
                    .zip(&grad_f)
                    .map(|(&f, &g)| f - local_step * g)
                    .collect(),
                groups: vars.groups.clone(),
                group_budget_hz: vars.group_budget_hz.clone(),
                power_cap_dbm: vars.power_cap_dbm.clone(),
            };
            trial.project();
            trial.assert_feasible()?;
            let (value, trial_eps) = objective(&trial, links)?;
            if value <= current {
                *vars = trial;
                current = value;
                eps = trial_eps;
                improved = true;
                break;
            }
            local_step *= 0.5;
        }
        trace.push(current);
        if !improved {
            break;
        }
    }

    for v in 0..n_vars {
        let i = vars.clients[v];
        links[i].tx_power_dbm = vars.power_dbm[v];
        links[i].bandwidth_hz = vars.bandwidth_hz(v);
    }
    Ok(trace)
}

fn initial_epsilons(links: &[LinkConfig]) -> Result<(Vec<f64>, Vec<TransientModel>)> {
    let models: Vec<TransientModel> = links
        .iter()
        .map(TransientModel::for_link)
        .collect::<Result<_>>()?;
    let eps = models.iter().map(|m| m.epsilon).collect();
    Ok((eps, models))
}

/// Joint power/bandwidth allocation that equalizes transient failure
/// probabilities across all eligible clients. Wireless clients are
/// optimized under per-standard power caps and bandwidth budgets; wired
/// clients are afterwards aligned to the eligible mean by dropping their
/// uploads at the server with that probability.
pub fn resource_opt_joint(
    links: &[LinkConfig],
    eps_th: f64,
    step_size: f64,
    iterations: usize,
) -> Result<ResourceOptOutcome> {
    if !(0.0 < eps_th && eps_th < 1.0) {
        return Err(SimError::parameter("eps_th must lie in (0, 1)"));
    }
    let (eps0, models) = initial_epsilons(links)?;
    let eligible: Vec<bool> = eps0.iter().map(|&e| e <= eps_th).collect();
    let wireless: Vec<usize> = (0..links.len())
        .filter(|&i| eligible[i] && !links[i].standard.is_wired())
        .collect();
    let wired_count = (0..links.len())
        .filter(|&i| eligible[i] && links[i].standard.is_wired())
        .count();
    if wireless.is_empty() && wired_count == 0 {
        return Err(SimError::parameter("no eligible clients"));
    }

    let initial_variance = variance(
        &(0..links.len())
            .filter(|&i| eligible[i])
            .map(|i| eps0[i])
            .collect::<Vec<_>>(),
    );

    let mut new_links = links.to_vec();
    let mut trace = Vec::new();
    if !wireless.is_empty() {
        let mut vars = ResourceVars::new(links, &wireless);
        trace = equalize_epsilons(
            &mut new_links,
            &models,
            &mut vars,
            wired_count,
            step_size,
            iterations,
        )?;
    }

    let mut epsilons = vec![0.0; links.len()];
    for i in 0..links.len() {
        epsilons[i] = transient_failure_prob(&new_links[i], &models[i])?;
    }
    let eligible_sum: f64 = (0..links.len())
        .filter(|&i| eligible[i])
        .map(|i| epsilons[i])
        .sum();
    let eligible_count = eligible.iter().filter(|&&e| e).count();
    let wired_drop_prob = eligible_sum / eligible_count as f64;

    let final_variance = variance(
        &(0..links.len())
            .filter(|&i| eligible[i])
            .map(|i| {
                if links[i].standard.is_wired() {
                    wired_drop_prob
                } else {
                    epsilons[i]
                }
            })
            .collect::<Vec<_>>(),
    );

    Ok(ResourceOptOutcome {
        links: new_links,
        epsilons,
        wired_drop_prob,
        eligible,
        initial_variance,
        final_variance,
        objective_trace: trace,
    })
}

/// Standard-wise variant: each communication standard equalizes its own
/// eligible clients independently, with no cross-standard coupling and no
/// wired drop mechanism.
pub fn resource_opt_per_standard(
    links: &[LinkConfig],
    eps_th: f64,
    step_size: f64,
    iterations: usize,
) -> Result<ResourceOptOutcome> {
    if !(0.0 < eps_th && eps_th < 1.0) {
        return Err(SimError::parameter("eps_th must lie in (0, 1)"));
    }
    let (eps0, models) = initial_epsilons(links)?;
    let eligible: Vec<bool> = eps0.iter().map(|&e| e <= eps_th).collect();
    if !eligible.iter().any(|&e| e) {
        return Err(SimError::parameter("no eligible clients"));
    }
    let initial_variance = variance(
        &(0..links.len())
            .filter(|&i| eligible[i])
            .map(|i| eps0[i])
            .collect::<Vec<_>>(),
    );

    let mut new_links = links.to_vec();
    let mut trace = Vec::new();
    for standard in NetworkStandard::ALL {
        if standard.is_wired() {
            continue;
        }
        let members: Vec<usize> = (0..links.len())
            .filter(|&i| eligible[i] && links[i].standard == standard)
            .collect();
        if members.len() < 2 {
            continue; // a singleton group already has zero variance
        }
        let mut vars = ResourceVars::new(links, &members);
        let group_trace =
            equalize_epsilons(&mut new_links, &models, &mut vars, 0, step_size, iterations)?;
        trace.extend(group_trace);
    }

    let mut epsilons = vec![0.0; links.len()];
    for i in 0..links.len() {
        epsilons[i] = transient_failure_prob(&new_links[i], &models[i])?;
    }
    let final_variance = variance(
        &(0..links.len())
            .filter(|&i| eligible[i])
            .map(|i| epsilons[i])
            .collect::<Vec<_>>(),
    );

    Ok(ResourceOptOutcome {
        links: new_links,
        epsilons,
        wired_drop_prob: 0.0,
        eligible,
        initial_variance,
        final_variance,
        objective_trace: trace,
    })
}

/// Per-group epsilon variance over eligible clients, keyed by standard.
pub fn per_standard_variances(
    links: &[LinkConfig],
    epsilons: &[f64],
    eligible: &[bool],
) -> Vec<(NetworkStandard, f64)> {
    NetworkStandard::ALL
        .iter()
        .map(|&standard| {
            let values: Vec<f64> = (0..links.len())
                .filter(|&i| eligible[i] && links[i].standard == standard)
                .map(|i| epsilons[i])
                .collect();
            (standard, variance(&values))
        })
        .collect()
}

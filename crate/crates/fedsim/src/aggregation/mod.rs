//! Aggregation-weight strategies and the model combination step.
//!
//! Covers the heuristic dataset-size weights, the adaptive pipeline
//! (missing-class detection, compensatory model, weight optimization with a
//! fixed server weight), the failure-probability-weighted baseline, the
//! connection-history correction, the control-variate global update, and
//! the two ablation variants.

mod solver;

pub use solver::{project_simplex, solve_constrained_wls, WlsProblem, WlsSolution};

use std::collections::{BTreeMap, BTreeSet};

use crate::data::ClassDistribution;
use crate::error::SimError;
use crate::training::{ControlVariate, ModelParams};
use crate::Result;

/// Which clients a round selected (a multiset: partial participation samples
/// with replacement) and which of them reached the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityMask {
    draws: Vec<usize>,
    connected: BTreeMap<usize, bool>,
}

impl ConnectivityMask {
    /// Builds a mask from selection draws and per-client connectivity.
    /// `connected` must have exactly the distinct drawn ids as keys.
    pub fn new(mut draws: Vec<usize>, connected: BTreeMap<usize, bool>) -> Result<Self> {
        draws.sort_unstable();
        let distinct: BTreeSet<usize> = draws.iter().copied().collect();
        if distinct.len() != connected.len() || !distinct.iter().all(|i| connected.contains_key(i))
        {
            return Err(SimError::contract(
                "connectivity defined for a different set than the selected clients",
            ));
        }
        Ok(Self { draws, connected })
    }

    /// Full-participation mask over clients `0..flags.len()`.
    pub fn full(flags: &[bool]) -> Self {
        Self {
            draws: (0..flags.len()).collect(),
            connected: flags.iter().copied().enumerate().collect(),
        }
    }

    /// Selection draws (sorted, with multiplicity).
    pub fn draws(&self) -> &[usize] {
        &self.draws
    }

    pub fn multiplicity(&self, client: usize) -> usize {
        self.draws.iter().filter(|&&d| d == client).count()
    }

    pub fn is_connected(&self, client: usize) -> bool {
        self.connected.get(&client).copied().unwrap_or(false)
    }

    /// Distinct selected clients, ascending.
    pub fn selected(&self) -> Vec<usize> {
        self.connected.keys().copied().collect()
    }

    /// Distinct connected clients, ascending.
    pub fn connected_clients(&self) -> Vec<usize> {
        self.connected
            .iter()
            .filter(|(_, &ok)| ok)
            .map(|(&i, _)| i)
            .collect()
    }

    /// Number of distinct connected clients.
    pub fn connected_count(&self) -> usize {
        self.connected.values().filter(|&&ok| ok).count()
    }

    /// Connected selection draws counted with multiplicity.
    pub fn connected_draw_count(&self) -> usize {
        self.draws.iter().filter(|&&d| self.is_connected(d)).count()
    }
}

/// Aggregation weights for one round: server, compensatory model, and one
/// entry per client (zero for unselected or disconnected clients).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggregationWeights {
    pub beta_s: f64,
    pub beta_miss: f64,
    pub beta: Vec<f64>,
}

impl AggregationWeights {
    pub fn zeros(n_clients: usize) -> Self {
        Self {
            beta_s: 0.0,
            beta_miss: 0.0,
            beta: vec![0.0; n_clients],
        }
    }

    pub fn total(&self) -> f64 {
        self.beta_s + self.beta_miss + self.beta.iter().sum::<f64>()
    }

    /// Checks the normalized-weights invariants: nonnegativity, zero weight
    /// for unselected/disconnected clients, and total one. The
    /// failure-probability-weighted baseline deliberately skips this (its
    /// weights are unnormalized by construction).
    pub fn validate_normalized(&self, mask: &ConnectivityMask) -> Result<()> {
        if self.beta_s < 0.0 || self.beta_miss < 0.0 || self.beta.iter().any(|&b| b < 0.0) {
            return Err(SimError::contract(
                "aggregation weights must be nonnegative",
            ));
        }
        for (i, &b) in self.beta.iter().enumerate() {
            if b != 0.0 && !mask.is_connected(i) {
                return Err(SimError::contract(format!(
                    "client {i} carries weight {b} while disconnected"
                )));
            }
        }
        let total = self.total();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SimError::contract(format!(
                "aggregation weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Classes that no connected client covers. With nobody connected, every
/// class is missing.
pub fn detect_missing_classes(
    connected_distributions: &[&ClassDistribution],
    class_count: usize,
) -> BTreeSet<usize> {
    (0..class_count)
        .filter(|&c| connected_distributions.iter().all(|d| d[c] == 0.0))
        .collect()
}

/// Client participation regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participation {
    Full,
    Partial,
}

/// Heuristic dataset-size weights. Full participation renormalizes `p` over
/// the server and connected clients; partial participation keeps `beta_s =
/// p_s` and splits the remainder uniformly over connected draws. A round
/// with zero connected clients collapses to the server alone.
pub fn fedavg_weights(
    mask: &ConnectivityMask,
    p_s: f64,
    p: &[f64],
    participation: Participation,
) -> AggregationWeights {
    let mut weights = AggregationWeights::zeros(p.len());
    match participation {
        Participation::Full => {
            let connected = mask.connected_clients();
            if connected.len() == p.len() {
                // Everyone connected: the denominator is exactly one by the
                // partition invariant, so keep the coefficients bit-exact.
                weights.beta_s = p_s;
                weights.beta.copy_from_slice(p);
                return weights;
            }
            let denom: f64 = p_s + connected.iter().map(|&i| p[i]).sum::<f64>();
            weights.beta_s = p_s / denom;
            for i in connected {
                weights.beta[i] = p[i] / denom;
            }
        }
        Participation::Partial => {
            let m = mask.connected_draw_count();
            if m == 0 {
                weights.beta_s = 1.0;
                return weights;
            }
            weights.beta_s = p_s;
            let share = (1.0 - p_s) / m as f64;
            for i in mask.connected_clients() {
                weights.beta[i] = mask.multiplicity(i) as f64 * share;
            }
        }
    }
    weights
}

/// Default KKT tolerance for the weight optimization.
pub const WLS_TOLERANCE: f64 = 1e-10;
/// Default iteration cap for the weight optimization.
pub const WLS_MAX_ITERATIONS: usize = 10_000;

/// Builds the weight-optimization instance for the adaptive strategy: the
/// server weight is fixed at `1 / (1 + connected)`, and the remaining budget
/// is split over the compensatory model (when classes are missing) and the
/// connected clients by minimizing the chi-square mismatch between the
/// effective and global class distributions.
pub fn fedauto_weights(
    mask: &ConnectivityMask,
    alpha_g: &ClassDistribution,
    alpha_s: &ClassDistribution,
    missing: &BTreeSet<usize>,
    alpha_miss: Option<&ClassDistribution>,
    client_alphas: &[ClassDistribution],
) -> Result<AggregationWeights> {
    let mut weights = AggregationWeights::zeros(client_alphas.len());
    let connected = mask.connected_clients();
    if connected.is_empty() {
        // Degenerate round: literal fixed server weight 1/(1+0) = 1.
        weights.beta_s = 1.0;
        return Ok(weights);
    }
    weights.beta_s = 1.0 / (1.0 + connected.len() as f64);

    let use_miss = !missing.is_empty();
    if use_miss && alpha_miss.is_none() {
        return Err(SimError::contract(
            "missing classes detected but no compensatory distribution supplied",
        ));
    }

    // Classes with zero global mass carry no objective weight.
    let classes: Vec<usize> = (0..alpha_g.len()).filter(|&c| alpha_g[c] > 0.0).collect();
    let restrict = |d: &ClassDistribution| -> Vec<f64> { classes.iter().map(|&c| d[c]).collect() };

    let mut columns = Vec::new();
    if use_miss {
        columns.push(restrict(alpha_miss.unwrap()));
    }
    for &i in &connected {
        columns.push(restrict(&client_alphas[i]));
    }
    let target: Vec<f64> = classes
        .iter()
        .map(|&c| alpha_g[c] - weights.beta_s * alpha_s[c])
        .collect();
    let problem = WlsProblem {
        columns,
        target,
        denom: classes.iter().map(|&c| alpha_g[c]).collect(),
        budget: 1.0 - weights.beta_s,
    };
    let solution = solve_constrained_wls(&problem, WLS_TOLERANCE, WLS_MAX_ITERATIONS)?;

    let mut iter = solution.weights.into_iter();
    if use_miss {
        weights.beta_miss = iter.next().unwrap();
    }
    for &i in &connected {
        weights.beta[i] = iter.next().unwrap();
    }
    Ok(weights)
}

/// Closed-form selection probabilities for the failure-probability-weighted
/// baseline: `s_i` proportional to `sqrt(p_i / (1 - eps_i))` over clients
/// with `eps0 <= eps_th`; excluded clients get zero.
pub fn tf_selection_probs(p: &[f64], eps0: &[f64], eps_th: f64) -> Result<Vec<f64>> {
    if p.len() != eps0.len() {
        return Err(SimError::parameter("p and eps0 length mismatch"));
    }
    let mut s = vec![0.0; p.len()];
    let mut norm = 0.0;
    for i in 0..p.len() {
        if eps0[i] <= eps_th {
            s[i] = (p[i] / (1.0 - eps0[i])).sqrt();
            norm += s[i];
        }
    }
    if norm == 0.0 {
        return Err(SimError::parameter(
            "all clients excluded by the reliability threshold",
        ));
    }
    for v in &mut s {
        *v /= norm;
    }
    Ok(s)
}

/// Failure-probability-weighted aggregation as printed: each connected draw
/// of an eligible client contributes `p_i / (K s_i (1 - eps_i))` scaled by
/// `1/K`, with frozen initial failure probabilities. The result is
/// deliberately NOT renormalized and carries no server term.
pub fn tf_aggregation_weights(
    mask: &ConnectivityMask,
    p: &[f64],
    eps0: &[f64],
    eps_th: f64,
    s: &[f64],
    k: usize,
) -> Result<AggregationWeights> {
    if k == 0 {
        return Err(SimError::parameter("k must be positive"));
    }
    let mut weights = AggregationWeights::zeros(p.len());
    for i in mask.connected_clients() {
        if eps0[i] > eps_th || s[i] == 0.0 {
            continue;
        }
        weights.beta[i] = mask.multiplicity(i) as f64 * p[i] / (k as f64 * s[i] * (1.0 - eps0[i]));
    }
    Ok(weights)
}

/// Connection-history correction applied by a client after its local pass:
/// `w <- w - gamma_g (r - tau_i)(w_prev_global - w)`, where `tau_i` is the
/// client's last successful round.
pub fn fedawe_correct(
    local: &ModelParams,
    global_prev: &ModelParams,
    round: u64,
    last_success: u64,
    gamma_g: f64,
) -> Result<ModelParams> {
    if last_success > round.saturating_sub(1) {
        return Err(SimError::parameter(
            "last successful round must precede the current round",
        ));
    }
    if local.theta.len() != global_prev.theta.len() {
        return Err(SimError::contract("model dimension mismatch"));
    }
    let factor = gamma_g * (round - last_success) as f64;
    let theta = local
        .theta
        .iter()
        .zip(&global_prev.theta)
        .map(|(&w, &g)| w - factor * (g - w))
        .collect();
    ModelParams::new(local.arch, theta)
}

/// One connected client's upload for the control-variate global step.
pub struct ScaffoldUpload<'a> {
    pub client: usize,
    pub model: &'a ModelParams,
    pub cv_old: &'a ControlVariate,
    pub cv_new: &'a ControlVariate,
}

/// Control-variate global update:
/// `w_r = w_{r-1} + (gamma_g / m) sum (w_i - w_{r-1})` over the `m`
/// connected clients, and `c_r = c_{r-1} + (1/N) sum (c_i+ - c_i)`.
/// With zero connected clients both stay unchanged (degenerate round).
pub fn scaffold_global_update(
    global_prev: &ModelParams,
    server_cv: &ControlVariate,
    uploads: &[ScaffoldUpload<'_>],
    gamma_g: f64,
    n_clients: usize,
) -> Result<(ModelParams, ControlVariate, bool)> {
    if uploads.is_empty() {
        return Ok((global_prev.clone(), server_cv.clone(), true));
    }
    let dim = global_prev.theta.len();
    let mut model_delta = vec![0.0; dim];
    let mut cv_delta = vec![0.0; dim];
    let mut sorted: Vec<&ScaffoldUpload<'_>> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client);
    for upload in sorted {
        if upload.model.theta.len() != dim
            || upload.cv_old.c.len() != dim
            || upload.cv_new.c.len() != dim
        {
            return Err(SimError::contract("scaffold upload dimension mismatch"));
        }
        for j in 0..dim {
            model_delta[j] += upload.model.theta[j] - global_prev.theta[j];
            cv_delta[j] += upload.cv_new.c[j] - upload.cv_old.c[j];
        }
    }
    let m = uploads.len() as f64;
    let theta = global_prev
        .theta
        .iter()
        .zip(&model_delta)
        .map(|(&w, &d)| w + gamma_g * d / m)
        .collect();
    let cv = ControlVariate {
        c: server_cv
            .c
            .iter()
            .zip(&cv_delta)
            .map(|(&c, &d)| c + d / n_clients as f64)
            .collect(),
    };
    Ok((ModelParams::new(global_prev.arch, theta)?, cv, false))
}

/// Simple-averaging weights used when the weight-optimization module is
/// ablated: the server keeps its fixed weight, and the rest is spread
/// uniformly (the compensatory model joining the average only when classes
/// are missing).
pub fn ablation_no_weight_opt_weights(
    mask: &ConnectivityMask,
    missing_classes: bool,
    n_clients: usize,
) -> AggregationWeights {
    let mut weights = AggregationWeights::zeros(n_clients);
    let m = mask.connected_count() as f64;
    weights.beta_s = 1.0 / (1.0 + m);
    if m == 0.0 {
        return weights;
    }
    let share = if missing_classes {
        let share = m / ((1.0 + m) * (1.0 + m));
        weights.beta_miss = share;
        share
    } else {
        1.0 / (1.0 + m)
    };
    for i in mask.connected_clients() {
        weights.beta[i] = share;
    }
    weights
}

/// Convex combination of the server model, the optional compensatory model,
/// and the client models, summed in ascending client id for bitwise
/// reproducibility. `clients` must carry a model for every client with a
/// nonzero weight.
pub fn aggregate(
    weights: &AggregationWeights,
    server_model: &ModelParams,
    compensatory: Option<&ModelParams>,
    clients: &[(usize, &ModelParams)],
) -> Result<ModelParams> {
    if weights.beta_miss > 0.0 && compensatory.is_none() {
        return Err(SimError::contract(
            "beta_miss > 0 but no compensatory model supplied",
        ));
    }
    let dim = server_model.theta.len();
    let mut theta = vec![0.0; dim];
    for (w, &s) in theta.iter_mut().zip(&server_model.theta) {
        *w = weights.beta_s * s;
    }
    if let Some(comp) = compensatory {
        if comp.theta.len() != dim {
            return Err(SimError::contract("compensatory model dimension mismatch"));
        }
        for (w, &c) in theta.iter_mut().zip(&comp.theta) {
            *w += weights.beta_miss * c;
        }
    }
    let mut sorted: Vec<(usize, &ModelParams)> = clients.to_vec();
    sorted.sort_by_key(|(i, _)| *i);
    let mut supplied: BTreeSet<usize> = BTreeSet::new();
    for (i, model) in sorted {
        supplied.insert(i);
        let b = weights.beta[i];
        if b == 0.0 {
            continue;
        }
        if model.theta.len() != dim {
            return Err(SimError::contract(format!(
                "client {i} model dimension mismatch"
            )));
        }
        for (w, &m) in theta.iter_mut().zip(&model.theta) {
            *w += b * m;
        }
    }
    if let Some(i) =
        (0..weights.beta.len()).find(|&i| weights.beta[i] != 0.0 && !supplied.contains(&i))
    {
        return Err(SimError::contract(format!(
            "client {i} carries weight but supplied no model"
        )));
    }
    ModelParams::new(server_model.arch, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamKind};
    use crate::training::Arch;
    use proptest::prelude::*;
    use rand::Rng;

    fn dist(values: &[f64]) -> ClassDistribution {
        ClassDistribution::new(values.to_vec()).unwrap()
    }

    fn mask_full(flags: &[bool]) -> ConnectivityMask {
        ConnectivityMask::full(flags)
    }

    fn random_model(arch: Arch, tag: u64) -> ModelParams {
        ModelParams::init_scaled_uniform(arch, &mut stream(55, StreamKind::Init, 0, tag))
    }

    const ARCH: Arch = Arch::Linear {
        input_dim: 4,
        classes: 4,
    };

    #[test]
    fn missing_classes_set_complement() {
        let a = dist(&[0.5, 0.5, 0.0, 0.0]);
        let b = dist(&[0.0, 0.0, 1.0, 0.0]);
        let missing = detect_missing_classes(&[&a, &b], 4);
        assert!(!missing.is_empty());
        assert_eq!(missing.into_iter().collect::<Vec<_>>(), vec![3]);

        let ten_a = dist(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let ten_b = dist(&[0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let missing = detect_missing_classes(&[&ten_a, &ten_b], 10);
        assert_eq!(
            missing.into_iter().collect::<Vec<_>>(),
            vec![4, 5, 6, 7, 8, 9]
        );
    }

    #[test]
    fn missing_classes_trivial_cases() {
        let a = dist(&[0.25, 0.25, 0.25, 0.25]);
        assert!(detect_missing_classes(&[&a], 4).is_empty());
        let all: Vec<usize> = detect_missing_classes(&[], 4).into_iter().collect();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fedavg_full_weights_renormalize_over_connected() {
        // p_s = 0.2, two clients 0.4/0.4, second disconnected.
        let mask = mask_full(&[true, false]);
        let w = fedavg_weights(&mask, 0.2, &[0.4, 0.4], Participation::Full);
        assert!((w.beta_s - 1.0 / 3.0).abs() < 1e-12);
        assert!((w.beta[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(w.beta[1], 0.0);
        w.validate_normalized(&mask).unwrap();
    }

    #[test]
    fn fedavg_full_all_connected_gives_p() {
        let mask = mask_full(&[true, true, true]);
        let p = [0.3, 0.25, 0.25];
        let w = fedavg_weights(&mask, 0.2, &p, Participation::Full);
        assert!((w.beta_s - 0.2).abs() < 1e-12);
        for i in 0..3 {
            assert!((w.beta[i] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn fedavg_partial_uniform_over_connected() {
        // 10 selected, 4 connected, p_s = 0.2: each connected gets 0.2.
        let flags: Vec<bool> = (0..10).map(|i| i < 4).collect();
        let mask = mask_full(&flags);
        let p = vec![0.08; 10];
        let w = fedavg_weights(&mask, 0.2, &p, Participation::Partial);
        for i in 0..4 {
            assert!((w.beta[i] - 0.2).abs() < 1e-12);
        }
        for i in 4..10 {
            assert_eq!(w.beta[i], 0.0);
        }
        w.validate_normalized(&mask).unwrap();
    }

    #[test]
    fn fedavg_partial_zero_connected_collapses_to_server() {
        let mask = mask_full(&[false, false]);
        let w = fedavg_weights(&mask, 0.2, &[0.4, 0.4], Participation::Partial);
        assert_eq!(w.beta_s, 1.0);
        assert_eq!(w.total(), 1.0);
    }

    #[test]
    fn fedavg_partial_counts_draw_multiplicity() {
        let mask = ConnectivityMask::new(
            vec![0, 0, 1],
            [(0usize, true), (1usize, true)].into_iter().collect(),
        )
        .unwrap();
        let w = fedavg_weights(&mask, 0.1, &[0.45, 0.45], Participation::Partial);
        assert!((w.beta[0] - 2.0 * 0.9 / 3.0).abs() < 1e-12);
        assert!((w.beta[1] - 0.9 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fedauto_fixed_server_weight() {
        let alpha_g = dist(&[0.25, 0.25, 0.25, 0.25]);
        let alpha_s = dist(&[0.25, 0.25, 0.25, 0.25]);
        let clients = vec![
            dist(&[0.5, 0.5, 0.0, 0.0]),
            dist(&[0.5, 0.5, 0.0, 0.0]),
            dist(&[0.0, 0.0, 0.5, 0.5]),
        ];
        let mask = mask_full(&[true, true, true]);
        let w =
            fedauto_weights(&mask, &alpha_g, &alpha_s, &BTreeSet::new(), None, &clients).unwrap();
        assert!((w.beta_s - 0.25).abs() < 1e-12);
        assert_eq!(w.beta_miss, 0.0);
        w.validate_normalized(&mask).unwrap();
    }

    #[test]
    fn fedauto_exact_compensation_reaches_zero_chi_square() {
        // One connected client holding {0,1}, missing {2,3}: the
        // compensatory column makes the global mix exactly representable.
        let alpha_g = dist(&[0.25, 0.25, 0.25, 0.25]);
        let alpha_s = dist(&[0.25, 0.25, 0.25, 0.25]);
        let alpha_miss = dist(&[0.0, 0.0, 0.5, 0.5]);
        let clients = vec![dist(&[0.5, 0.5, 0.0, 0.0]), dist(&[0.0, 0.0, 0.5, 0.5])];
        let mask = ConnectivityMask::full(&[true, false]);
        let missing: BTreeSet<usize> = [2, 3].into_iter().collect();
        let w = fedauto_weights(
            &mask,
            &alpha_g,
            &alpha_s,
            &missing,
            Some(&alpha_miss),
            &clients,
        )
        .unwrap();
        assert!((w.beta_s - 0.5).abs() < 1e-12);
        // Effective distribution must equal alpha_g exactly: chi^2 ~ 0.
        let mut chi = 0.0;
        for c in 0..4 {
            let eff =
                w.beta_s * alpha_s[c] + w.beta_miss * alpha_miss[c] + w.beta[0] * clients[0][c];
            chi += (alpha_g[c] - eff) * (alpha_g[c] - eff) / alpha_g[c];
        }
        assert!(chi <= 1e-10, "chi^2 {chi}");
        w.validate_normalized(&mask).unwrap();
    }

    #[test]
    fn fedauto_zero_connected_is_server_only() {
        let alpha_g = dist(&[0.5, 0.5]);
        let alpha_s = dist(&[0.5, 0.5]);
        let mask = mask_full(&[false, false]);
        let missing: BTreeSet<usize> = [0, 1].into_iter().collect();
        let alpha_miss = dist(&[0.5, 0.5]);
        let w = fedauto_weights(
            &mask,
            &alpha_g,
            &alpha_s,
            &missing,
            Some(&alpha_miss),
            &[alpha_s.clone(), alpha_s.clone()],
        )
        .unwrap();
        assert_eq!(w.beta_s, 1.0);
        assert_eq!(w.beta_miss, 0.0);
    }

    #[test]
    fn fedauto_never_beaten_by_rescaled_fedavg_point() {
        // Optimality over the feasible set: compare against the heuristic
        // weights rescaled to the same fixed server weight.
        let mut rng = stream(1, StreamKind::Dataset, 0, 7);
        for _ in 0..20 {
            let c = 4;
            let n = 5;
            let mut cols = Vec::new();
            for _ in 0..n {
                let mut v: Vec<f64> = (0..c).map(|_| rng.gen::<f64>()).collect();
                if rng.gen::<f64>() < 0.5 {
                    v[rng.gen_range(0..c)] = 0.0;
                }
                let s: f64 = v.iter().sum();
                cols.push(dist(&v.iter().map(|x| x / s).collect::<Vec<_>>()));
            }
            let alpha_s = dist(&[0.25, 0.25, 0.25, 0.25]);
            let p = vec![0.8 / n as f64; n];
            let p_s = 0.2;
            let mut alpha_g = vec![0.0; c];
            for k in 0..c {
                alpha_g[k] =
                    p_s * alpha_s[k] + cols.iter().map(|d| d[k] * 0.8 / n as f64).sum::<f64>();
            }
            let alpha_g = dist(&alpha_g);
            let flags: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < 0.7).collect();
            if !flags.iter().any(|&f| f) {
                continue;
            }
            let mask = mask_full(&flags);
            let auto =
                fedauto_weights(&mask, &alpha_g, &alpha_s, &BTreeSet::new(), None, &cols).unwrap();
            let heuristic = fedavg_weights(&mask, p_s, &p, Participation::Full);

            let chi = |w: &AggregationWeights, beta_s: f64, scale: f64| -> f64 {
                let mut total = 0.0;
                for k in 0..c {
                    let mut eff = beta_s * alpha_s[k];
                    for (i, d) in cols.iter().enumerate() {
                        eff += w.beta[i] * scale * d[k];
                    }
                    total += (alpha_g[k] - eff) * (alpha_g[k] - eff) / alpha_g[k];
                }
                total
            };
            // Rescale the heuristic client weights to the auto budget.
            let heuristic_client_total: f64 = heuristic.beta.iter().sum();
            let scale = (1.0 - auto.beta_s) / heuristic_client_total;
            let auto_obj = chi(&auto, auto.beta_s, 1.0);
            let heuristic_obj = chi(&heuristic, auto.beta_s, scale);
            assert!(
                auto_obj <= heuristic_obj + 1e-9,
                "auto {auto_obj} heuristic {heuristic_obj}"
            );
        }
    }

    #[test]
    fn tf_selection_closed_form_matches_numerical_oracle() {
        let p = [0.3, 0.3, 0.2, 0.2];
        let eps0 = [0.1, 0.5, 0.0, 0.95];
        let s = tf_selection_probs(&p, &eps0, 0.9).unwrap();
        assert_eq!(s[3], 0.0);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let objective = |s: &[f64]| -> f64 {
            (0..4)
                .filter(|&i| eps0[i] <= 0.9)
                .map(|i| p[i] / (s[i] * (1.0 - eps0[i])))
                .sum()
        };
        let closed = objective(&s);
        // Random feasible competitors never beat the closed form.
        let mut rng = stream(3, StreamKind::Dataset, 0, 9);
        for _ in 0..2000 {
            let mut cand = vec![0.0; 4];
            let mut norm = 0.0;
            for (i, v) in cand.iter_mut().enumerate() {
                if eps0[i] <= 0.9 {
                    *v = rng.gen::<f64>().max(1e-6);
                    norm += *v;
                }
            }
            for v in &mut cand {
                *v /= norm;
            }
            assert!(objective(&cand) >= closed - 1e-9);
        }
    }

    #[test]
    fn tf_weights_direct_substitution() {
        let p = [0.5, 0.5];
        let eps0 = [0.0, 0.0];
        let s = tf_selection_probs(&p, &eps0, 0.9).unwrap();
        let mask = mask_full(&[true, true]);
        let w = tf_aggregation_weights(&mask, &p, &eps0, 0.9, &s, 2).unwrap();
        for i in 0..2 {
            let expected = p[i] / (2.0 * s[i] * (1.0 - eps0[i]));
            assert!((w.beta[i] - expected).abs() < 1e-12);
        }
        assert_eq!(w.beta_s, 0.0);
    }

    #[test]
    fn tf_single_eligible_client() {
        let p = [0.7];
        let eps0 = [0.0];
        let mask = mask_full(&[true]);
        let w = tf_aggregation_weights(&mask, &p, &eps0, 0.9, &[1.0], 1).unwrap();
        assert!((w.beta[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn fedawe_connected_every_round() {
        let local = random_model(ARCH, 1);
        let global = random_model(ARCH, 2);
        let corrected = fedawe_correct(&local, &global, 5, 4, 0.001).unwrap();
        for j in 0..local.theta.len() {
            let expected = local.theta[j] - 0.001 * (global.theta[j] - local.theta[j]);
            assert!((corrected.theta[j] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn fedawe_zero_gain_is_identity() {
        let local = random_model(ARCH, 3);
        let global = random_model(ARCH, 4);
        let corrected = fedawe_correct(&local, &global, 9, 2, 0.0).unwrap();
        assert_eq!(corrected.theta, local.theta);
    }

    #[test]
    fn fedawe_three_round_hand_trace() {
        let gamma = 0.001;
        let global = random_model(ARCH, 5);
        let local = random_model(ARCH, 6);
        // Client missed round 2; at round 3 the staleness factor is 3 - 1 = 2.
        let corrected = fedawe_correct(&local, &global, 3, 1, gamma).unwrap();
        for j in 0..local.theta.len() {
            let expected = local.theta[j] - gamma * 2.0 * (global.theta[j] - local.theta[j]);
            assert!((corrected.theta[j] - expected).abs() < 1e-12);
        }
        assert!(fedawe_correct(&local, &global, 3, 3, gamma).is_err());
    }

    #[test]
    fn scaffold_global_single_client_takes_over() {
        let global = random_model(ARCH, 7);
        let client = random_model(ARCH, 8);
        let cv = ControlVariate::zeros(global.theta.len());
        let uploads = [ScaffoldUpload {
            client: 0,
            model: &client,
            cv_old: &cv,
            cv_new: &cv,
        }];
        let (next, _, degenerate) = scaffold_global_update(&global, &cv, &uploads, 1.0, 4).unwrap();
        assert!(!degenerate);
        for (a, b) in next.theta.iter().zip(&client.theta) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn scaffold_global_zero_deltas_unchanged() {
        let global = random_model(ARCH, 9);
        let cv = ControlVariate::zeros(global.theta.len());
        let uploads = [
            ScaffoldUpload {
                client: 0,
                model: &global,
                cv_old: &cv,
                cv_new: &cv,
            },
            ScaffoldUpload {
                client: 1,
                model: &global,
                cv_old: &cv,
                cv_new: &cv,
            },
        ];
        let (next, next_cv, _) = scaffold_global_update(&global, &cv, &uploads, 1.0, 2).unwrap();
        assert_eq!(next.theta, global.theta);
        assert_eq!(next_cv.c, cv.c);
    }

    #[test]
    fn scaffold_global_two_client_hand_trace() {
        let global = random_model(ARCH, 10);
        let m0 = random_model(ARCH, 11);
        let m1 = random_model(ARCH, 12);
        let dim = global.theta.len();
        let c_server = ControlVariate {
            c: (0..dim).map(|j| 0.01 * j as f64).collect(),
        };
        let old0 = ControlVariate::zeros(dim);
        let new0 = ControlVariate { c: vec![0.5; dim] };
        let old1 = ControlVariate {
            c: vec![-0.25; dim],
        };
        let new1 = ControlVariate { c: vec![0.25; dim] };
        let gamma_g = 1.0;
        let n = 5;
        let uploads = [
            ScaffoldUpload {
                client: 0,
                model: &m0,
                cv_old: &old0,
                cv_new: &new0,
            },
            ScaffoldUpload {
                client: 1,
                model: &m1,
                cv_old: &old1,
                cv_new: &new1,
            },
        ];
        let (next, cv, _) =
            scaffold_global_update(&global, &c_server, &uploads, gamma_g, n).unwrap();
        for j in 0..dim {
            let expected = global.theta[j]
                + gamma_g / 2.0
                    * ((m0.theta[j] - global.theta[j]) + (m1.theta[j] - global.theta[j]));
            assert!((next.theta[j] - expected).abs() < 1e-12);
            let expected_cv = c_server.c[j] + (0.5 + 0.5) / n as f64;
            assert!((cv.c[j] - expected_cv).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_simple_averaging_no_missing() {
        let mask = mask_full(&[true, true, true]);
        let w = ablation_no_weight_opt_weights(&mask, false, 3);
        assert!((w.beta_s - 0.25).abs() < 1e-12);
        assert_eq!(w.beta_miss, 0.0);
        for i in 0..3 {
            assert!((w.beta[i] - 0.25).abs() < 1e-12);
        }
        assert!((w.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ablation_simple_averaging_with_missing() {
        // Three connected: beta_miss = beta_i = 3/16, beta_s = 1/4,
        // total = 1/4 + 4 * 3/16 = 1.
        let mask = mask_full(&[true, true, true]);
        let w = ablation_no_weight_opt_weights(&mask, true, 3);
        assert!((w.beta_s - 0.25).abs() < 1e-12);
        assert!((w.beta_miss - 3.0 / 16.0).abs() < 1e-12);
        for i in 0..3 {
            assert!((w.beta[i] - 3.0 / 16.0).abs() < 1e-12);
        }
        assert!((w.total() - 1.0).abs() < 1e-12);
        w.validate_normalized(&mask).unwrap();
    }

    #[test]
    fn ablation_no_compensatory_equals_full_when_nothing_missing() {
        let alpha_g = dist(&[0.25, 0.25, 0.25, 0.25]);
        let alpha_s = dist(&[0.25, 0.25, 0.25, 0.25]);
        let clients = vec![dist(&[0.5, 0.5, 0.0, 0.0]), dist(&[0.0, 0.0, 0.5, 0.5])];
        let mask = mask_full(&[true, true]);
        let with_module =
            fedauto_weights(&mask, &alpha_g, &alpha_s, &BTreeSet::new(), None, &clients).unwrap();
        // Dropping the compensatory column changes nothing when the missing
        // set is empty: identical problem, identical solution.
        assert_eq!(with_module.beta_miss, 0.0);
        let again =
            fedauto_weights(&mask, &alpha_g, &alpha_s, &BTreeSet::new(), None, &clients).unwrap();
        assert_eq!(with_module, again);
    }

    #[test]
    fn aggregate_single_contributor_identity() {
        let server = random_model(ARCH, 20);
        let mut w = AggregationWeights::zeros(2);
        w.beta_s = 1.0;
        let out = aggregate(&w, &server, None, &[]).unwrap();
        assert_eq!(out.theta, server.theta);
    }

    #[test]
    fn aggregate_identical_models_any_weights() {
        let model = random_model(ARCH, 21);
        let mut w = AggregationWeights::zeros(2);
        w.beta_s = 0.3;
        w.beta = vec![0.45, 0.25];
        let out = aggregate(&w, &model, None, &[(0, &model), (1, &model)]).unwrap();
        for (a, b) in out.theta.iter().zip(&model.theta) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_matches_elementwise_oracle() {
        let server = random_model(ARCH, 22);
        let c0 = random_model(ARCH, 23);
        let c1 = random_model(ARCH, 24);
        let mut w = AggregationWeights::zeros(2);
        w.beta_s = 0.5;
        w.beta = vec![0.3, 0.2];
        let out = aggregate(&w, &server, None, &[(0, &c0), (1, &c1)]).unwrap();
        for j in 0..server.theta.len() {
            let expected = 0.5 * server.theta[j] + 0.3 * c0.theta[j] + 0.2 * c1.theta[j];
            assert!((out.theta[j] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_requires_compensatory_model_when_weighted() {
        let server = random_model(ARCH, 25);
        let mut w = AggregationWeights::zeros(0);
        w.beta_s = 0.5;
        w.beta_miss = 0.5;
        assert!(matches!(
            aggregate(&w, &server, None, &[]),
            Err(SimError::Contract(_))
        ));
    }

    #[test]
    fn aggregate_requires_models_for_weighted_clients() {
        let server = random_model(ARCH, 26);
        let mut w = AggregationWeights::zeros(2);
        w.beta_s = 0.5;
        w.beta = vec![0.5, 0.0];
        assert!(matches!(
            aggregate(&w, &server, None, &[]),
            Err(SimError::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(perm in proptest::sample::select(vec![
            vec![0usize, 1, 2], vec![0, 2, 1], vec![1, 0, 2],
            vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0],
        ])) {
            let server = random_model(ARCH, 30);
            let models: Vec<ModelParams> = (0..3).map(|t| random_model(ARCH, 31 + t)).collect();
            let mut w = AggregationWeights::zeros(3);
            w.beta_s = 0.4;
            w.beta = vec![0.3, 0.2, 0.1];
            let base: Vec<(usize, &ModelParams)> =
                (0..3).map(|i| (i, &models[i])).collect();
            let permuted: Vec<(usize, &ModelParams)> =
                perm.iter().map(|&i| (i, &models[i])).collect();
            let a = aggregate(&w, &server, None, &base).unwrap();
            let b = aggregate(&w, &server, None, &permuted).unwrap();
            prop_assert_eq!(a.theta, b.theta);
        }
    }

    #[test]
    fn partial_sampling_is_unbiased_small() {
        // Reliable links, sampling with replacement by p_i / (1 - p_s):
        // the mask-averaged aggregate converges on the full-participation one.
        let n = 4;
        let p_s = 0.2;
        let p = [0.3, 0.25, 0.15, 0.1];
        let arch = Arch::Linear {
            input_dim: 2,
            classes: 2,
        };
        let server = random_model(arch, 40);
        let models: Vec<ModelParams> = (0..n).map(|t| random_model(arch, 41 + t as u64)).collect();
        let dim = server.theta.len();

        let mut full = vec![0.0; dim];
        for j in 0..dim {
            full[j] =
                p_s * server.theta[j] + (0..n).map(|i| p[i] * models[i].theta[j]).sum::<f64>();
        }

        let k = 3;
        let trials = 20_000;
        let mut rng = stream(77, StreamKind::Selection, 0, 0);
        let mut mean = vec![0.0; dim];
        for _ in 0..trials {
            let mut draws = Vec::with_capacity(k);
            for _ in 0..k {
                let mut u = rng.gen::<f64>() * (1.0 - p_s);
                for i in 0..n {
                    u -= p[i];
                    if u <= 0.0 {
                        draws.push(i);
                        break;
                    }
                }
            }
            let connected = draws.iter().map(|&i| (i, true)).collect();
            let mask = ConnectivityMask::new(draws, connected).unwrap();
            let w = fedavg_weights(&mask, p_s, &p, Participation::Partial);
            let refs: Vec<(usize, &ModelParams)> = mask
                .connected_clients()
                .iter()
                .map(|&i| (i, &models[i]))
                .collect();
            let agg = aggregate(&w, &server, None, &refs).unwrap();
            for j in 0..dim {
                mean[j] += agg.theta[j] / trials as f64;
            }
        }
        for j in 0..dim {
            assert!(
                (mean[j] - full[j]).abs() < 0.02,
                "coordinate {j}: {} vs {}",
                mean[j],
                full[j]
            );
        }
    }
}

//! Measurable convergence quantities: chi-square divergences between
//! distributions and weight vectors, the effective class distribution of a
//! round's aggregate, empirical heterogeneity estimates, and the per-round
//! decomposition of the convergence-bound terms.

use crate::aggregation::AggregationWeights;
use crate::data::{ClassDistribution, LabeledDataset};
use crate::error::SimError;
use crate::training::{loss_and_gradient, ModelParams};
use crate::Result;

/// A chi-square divergence value. When the target puts mass where the
/// reference has none the divergence is infinite; that case is flagged so
/// logs can encode it explicitly instead of silently propagating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub value: f64,
    pub flagged_infinite: bool,
}

/// `sum_c (q_c - p_c)^2 / p_c` with the reference `p` in the denominator.
/// Zero-reference entries are skipped when the target is also zero there.
pub fn chi_square(q: &[f64], p: &[f64]) -> Result<ChiSquare> {
    if q.len() != p.len() {
        return Err(SimError::parameter("chi-square length mismatch"));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(SimError::parameter("reference must be nonnegative"));
    }
    let mut value = 0.0;
    for (&qc, &pc) in q.iter().zip(p) {
        if pc == 0.0 {
            if qc != 0.0 {
                return Ok(ChiSquare {
                    value: f64::INFINITY,
                    flagged_infinite: true,
                });
            }
            continue;
        }
        value += (qc - pc) * (qc - pc) / pc;
    }
    Ok(ChiSquare {
        value,
        flagged_infinite: false,
    })
}

/// Effective class proportions of a round's aggregate:
/// `beta_s alpha_s + beta_miss alpha_miss + sum_i beta_i alpha_i`.
/// Sums to one whenever the weights do.
pub fn effective_distribution(
    weights: &AggregationWeights,
    alpha_s: &ClassDistribution,
    alpha_miss: Option<&ClassDistribution>,
    client_alphas: &[ClassDistribution],
) -> Result<Vec<f64>> {
    if weights.beta.len() != client_alphas.len() {
        return Err(SimError::parameter(
            "one class distribution per client required",
        ));
    }
    if weights.beta_miss > 0.0 && alpha_miss.is_none() {
        return Err(SimError::contract(
            "beta_miss > 0 but no compensatory distribution supplied",
        ));
    }
    let c = alpha_s.len();
    let mut effective = vec![0.0; c];
    for k in 0..c {
        effective[k] = weights.beta_s * alpha_s[k];
    }
    if let Some(miss) = alpha_miss {
        if miss.len() != c {
            return Err(SimError::parameter(
                "compensatory distribution length mismatch",
            ));
        }
        for k in 0..c {
            effective[k] += weights.beta_miss * miss[k];
        }
    }
    for (i, alpha) in client_alphas.iter().enumerate() {
        if weights.beta[i] == 0.0 {
            continue;
        }
        if alpha.len() != c {
            return Err(SimError::parameter("client distribution length mismatch"));
        }
        for k in 0..c {
            effective[k] += weights.beta[i] * alpha[k];
        }
    }
    Ok(effective)
}

/// Chi-square between the round's weight vector `[beta_s, beta_1..beta_N]`
/// and the objective coefficients `[p_s, p_1..p_N]`. The compensatory
/// weight has no coefficient counterpart and is not part of this measure.
pub fn chi_square_weights(weights: &AggregationWeights, p_s: f64, p: &[f64]) -> Result<ChiSquare> {
    let mut q = Vec::with_capacity(1 + weights.beta.len());
    q.push(weights.beta_s);
    q.extend_from_slice(&weights.beta);
    let mut reference = Vec::with_capacity(1 + p.len());
    reference.push(p_s);
    reference.extend_from_slice(p);
    chi_square(&q, &reference)
}

/// Empirical heterogeneity quantities evaluated at one model: per-node,
/// per-class gradient deviations from the global per-class gradient, and
/// the global gradient norm. These are point estimates at the supplied
/// model, not suprema over the parameter space.
#[derive(Debug, Clone)]
pub struct HeterogeneityEstimate {
    /// `v[j][c]`: norm of the class-`c` gradient deviation of node `j`
    /// (server first, then clients); `None` where the node has no class-`c`
    /// samples.
    pub v: Vec<Vec<Option<f64>>>,
    /// Norm of the global gradient at the model.
    pub g: f64,
    /// Class proportions per node, aligned with `v`.
    pub node_alphas: Vec<Vec<f64>>,
    /// Class proportions of the union of all node index sets.
    pub global_alpha: Vec<f64>,
}

impl HeterogeneityEstimate {
    /// `sum_c alpha_{j,c} V_{j,c}^2` for node `j`.
    pub fn feature_term(&self, j: usize) -> f64 {
        self.v[j]
            .iter()
            .zip(&self.node_alphas[j])
            .map(|(v, &a)| v.map_or(0.0, |v| a * v * v))
            .sum()
    }

    /// Label-heterogeneity divergence `chi^2` of node `j`'s class mix
    /// against the global one.
    pub fn label_divergence(&self, j: usize) -> Result<ChiSquare> {
        chi_square(&self.node_alphas[j], &self.global_alpha)
    }
}

/// Computes per-class mean gradients for every node and the global dataset
/// at `params`, and from them the deviation table and global gradient norm.
/// `node_indices` lists each node's samples, server first.
pub fn estimate_heterogeneity(
    params: &ModelParams,
    data: &LabeledDataset,
    node_indices: &[&[usize]],
) -> Result<HeterogeneityEstimate> {
    if node_indices.is_empty() {
        return Err(SimError::parameter("need at least one node"));
    }
    let classes = data.class_count();
    let union: Vec<usize> = node_indices
        .iter()
        .flat_map(|s| s.iter().copied())
        .collect();
    if union.is_empty() {
        return Err(SimError::parameter("nodes hold no samples"));
    }

    let by_class = |indices: &[usize]| -> Vec<Vec<usize>> {
        let mut split = vec![Vec::new(); classes];
        for &i in indices {
            split[data.labels()[i]].push(i);
        }
        split
    };
    let class_gradient = |subset: &[usize]| -> Result<Option<Vec<f64>>> {
        if subset.is_empty() {
            return Ok(None);
        }
        Ok(Some(loss_and_gradient(params, data, subset)?.1))
    };

    let global_split = by_class(&union);
    let mut global_class_grads = Vec::with_capacity(classes);
    for subset in &global_split {
        global_class_grads.push(class_gradient(subset)?);
    }
    let global_alpha: Vec<f64> = global_split
        .iter()
        .map(|s| s.len() as f64 / union.len() as f64)
        .collect();
    let (_, global_grad) = loss_and_gradient(params, data, &union)?;
    let g = global_grad.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut v = Vec::with_capacity(node_indices.len());
    let mut node_alphas = Vec::with_capacity(node_indices.len());
    for &indices in node_indices {
        if indices.is_empty() {
            return Err(SimError::parameter("every node needs at least one sample"));
        }
        let split = by_class(indices);
        node_alphas.push(
            split
                .iter()
                .map(|s| s.len() as f64 / indices.len() as f64)
                .collect(),
        );
        let mut row = Vec::with_capacity(classes);
        for (c, subset) in split.iter().enumerate() {
            match (class_gradient(subset)?, &global_class_grads[c]) {
                (Some(local), Some(global)) => {
                    let dev = local
                        .iter()
                        .zip(global)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    row.push(Some(dev));
                }
                _ => row.push(None),
            }
        }
        v.push(row);
    }

    Ok(HeterogeneityEstimate {
        v,
        g,
        node_alphas,
        global_alpha,
    })
}

/// Per-round log entry.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RoundRecord {
    pub round: u64,
    pub strategy: String,
    /// Selection draws (with multiplicity under partial participation).
    pub selected: Vec<usize>,
    /// Distinct clients whose upload reached the server.
    pub connected: Vec<usize>,
    pub weights: AggregationWeights,
    pub chi2_p_beta: f64,
    pub chi2_alpha_g_tilde: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub global_grad_norm_sq: f64,
    pub flags: Vec<RoundFlag>,
}

/// Noteworthy per-round conditions, recorded rather than silently handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundFlag {
    /// No selected client connected.
    DegenerateRound,
    /// The public set could not cover every missing class.
    CoverageGap,
    /// A chi-square diagnostic was infinite.
    Chi2Infinite,
}

impl RoundFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            RoundFlag::DegenerateRound => "degenerate",
            RoundFlag::CoverageGap => "coverage_gap",
            RoundFlag::Chi2Infinite => "chi2_inf",
        }
    }
}

/// Inputs shared by every round when decomposing the convergence bound.
pub struct BoundContext<'a> {
    pub estimate: &'a HeterogeneityEstimate,
    /// Dataset-size weights, server first, aligned with the estimate nodes.
    pub p: &'a [f64],
    /// Local steps per round (E).
    pub local_steps: usize,
    /// Number of clients (N).
    pub n_clients: usize,
}

/// Numeric per-round evaluation of the two bracketed terms of the
/// convergence bound: the non-i.i.d. term and the unreliability term. These
/// are plotting quantities; no claim is made of bounding the true gradient.
///
/// Conventions: the first value carries its `8 / (sqrt(T N) R)` prefactor,
/// so summing it over rounds reproduces the aggregate non-i.i.d. term; the
/// second evaluates `20 (chi2(p||beta) S_V + chi2(alpha_g||alpha~) G^2)` at
/// the round's divergences, so its mean over rounds reproduces the
/// aggregate unreliability term.
pub fn bound_terms(records: &[RoundRecord], ctx: &BoundContext<'_>) -> Result<Vec<(f64, f64)>> {
    let rounds = records.len();
    if rounds == 0 {
        return Ok(Vec::new());
    }
    let n_nodes = ctx.estimate.v.len();
    if ctx.p.len() != n_nodes {
        return Err(SimError::parameter(
            "p length does not match estimate nodes",
        ));
    }
    let total_steps = (rounds * ctx.local_steps) as f64;
    let g_sq = ctx.estimate.g * ctx.estimate.g;

    // Per-node constants reused across rounds.
    let mut node_terms = Vec::with_capacity(n_nodes);
    for j in 0..n_nodes {
        let label = ctx.estimate.label_divergence(j)?;
        node_terms.push(ctx.estimate.feature_term(j) + label.value * g_sq);
    }
    let weighted_feature: f64 = (0..n_nodes)
        .map(|j| ctx.p[j] * ctx.estimate.feature_term(j))
        .sum();

    let scale_a = 8.0 / ((total_steps * ctx.n_clients as f64).sqrt() * rounds as f64);
    let mut terms = Vec::with_capacity(rounds);
    for record in records {
        let mut beta = Vec::with_capacity(n_nodes);
        beta.push(record.weights.beta_s);
        beta.extend_from_slice(&record.weights.beta);
        if beta.len() != n_nodes {
            return Err(SimError::parameter(
                "record weights do not match estimate nodes",
            ));
        }
        let term_a = scale_a
            * beta
                .iter()
                .zip(&node_terms)
                .map(|(&b, &t)| b * t)
                .sum::<f64>();
        let term_b =
            20.0 * (record.chi2_p_beta * weighted_feature + record.chi2_alpha_g_tilde * g_sq);
        terms.push((term_a, term_b));
    }
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{fedauto_weights, ConnectivityMask, WlsProblem};
    use crate::data::{class_distribution, partition_iid, synth_gaussian_mixture};
    use crate::rng::{stream, StreamKind};
    use crate::training::Arch;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn dist(values: &[f64]) -> ClassDistribution {
        ClassDistribution::new(values.to_vec()).unwrap()
    }

    #[test]
    fn chi_square_of_identical_is_zero() {
        let x = [0.2, 0.3, 0.5];
        let r = chi_square(&x, &x).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(!r.flagged_infinite);
    }

    #[test]
    fn chi_square_direct_evaluation() {
        // (0.5, 0.5) against (0.25, 0.75): 0.25 + 0.0625/0.75 = 1/3.
        let r = chi_square(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((r.value - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn chi_square_infinity_sentinel() {
        let r = chi_square(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(r.flagged_infinite);
        assert!(r.value.is_infinite());
        // Zero-on-zero entries are fine.
        let r = chi_square(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(!r.flagged_infinite);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn effective_distribution_trivial_cases() {
        let a = dist(&[0.4, 0.6]);
        let mut w = AggregationWeights::zeros(2);
        w.beta_s = 0.5;
        w.beta = vec![0.25, 0.25];
        let eff = effective_distribution(&w, &a, None, &[a.clone(), a.clone()]).unwrap();
        for (e, &x) in eff.iter().zip(a.as_slice()) {
            assert!((e - x).abs() < 1e-15);
        }
        let mut w = AggregationWeights::zeros(1);
        w.beta = vec![1.0];
        let b = dist(&[0.9, 0.1]);
        let eff = effective_distribution(&w, &a, None, std::slice::from_ref(&b)).unwrap();
        assert_eq!(eff, b.as_slice());
    }

    #[test]
    fn effective_distribution_elementwise_oracle() {
        let alpha_s = dist(&[0.3, 0.3, 0.4]);
        let alpha_miss = dist(&[0.0, 0.5, 0.5]);
        let c0 = dist(&[1.0, 0.0, 0.0]);
        let c1 = dist(&[0.2, 0.5, 0.3]);
        let mut w = AggregationWeights::zeros(2);
        w.beta_s = 0.25;
        w.beta_miss = 0.15;
        w.beta = vec![0.35, 0.25];
        let eff =
            effective_distribution(&w, &alpha_s, Some(&alpha_miss), &[c0.clone(), c1.clone()])
                .unwrap();
        for k in 0..3 {
            let expected = 0.25 * alpha_s[k] + 0.15 * alpha_miss[k] + 0.35 * c0[k] + 0.25 * c1[k];
            assert!((eff[k] - expected).abs() < 1e-15);
        }
        let total: f64 = eff.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_opt_objective_equals_chi_square_of_effective() {
        // The optimization objective and the logged diagnostic are the same
        // number: chi^2 of the effective distribution against the global one.
        let alpha_g = dist(&[0.4, 0.3, 0.2, 0.1]);
        let alpha_s = dist(&[0.25, 0.25, 0.25, 0.25]);
        let clients = vec![
            dist(&[0.7, 0.3, 0.0, 0.0]),
            dist(&[0.0, 0.2, 0.5, 0.3]),
            dist(&[0.1, 0.1, 0.4, 0.4]),
        ];
        let mask = ConnectivityMask::full(&[true, true, true]);
        let w =
            fedauto_weights(&mask, &alpha_g, &alpha_s, &BTreeSet::new(), None, &clients).unwrap();
        let eff = effective_distribution(&w, &alpha_s, None, &clients).unwrap();
        let chi = chi_square(&eff, alpha_g.as_slice()).unwrap();

        let problem = WlsProblem {
            columns: clients.iter().map(|d| d.as_slice().to_vec()).collect(),
            target: (0..4).map(|c| alpha_g[c] - w.beta_s * alpha_s[c]).collect(),
            denom: alpha_g.as_slice().to_vec(),
            budget: 1.0 - w.beta_s,
        };
        let free: Vec<f64> = w.beta.clone();
        assert!((problem.objective(&free) - chi.value).abs() < 1e-12);
    }

    #[test]
    fn single_node_has_zero_deviation() {
        let data = synth_gaussian_mixture(3, 4, 20, 1.5, 17).unwrap();
        let model = ModelParams::init_scaled_uniform(
            Arch::Linear {
                input_dim: 4,
                classes: 3,
            },
            &mut stream(5, StreamKind::Init, 0, 0),
        );
        let all = data.all_indices();
        let est = estimate_heterogeneity(&model, &data, &[&all]).unwrap();
        for c in 0..3 {
            assert!(est.v[0][c].unwrap() < 1e-12);
        }
        assert!(est.g > 0.0);
    }

    #[test]
    fn class_decomposition_identity() {
        // The full local gradient equals the alpha-weighted mean of the
        // per-class gradients; recomputed here independently per node.
        let data = synth_gaussian_mixture(4, 5, 30, 1.0, 23).unwrap();
        let plan = partition_iid(&data, 3, 0.25, 23).unwrap();
        let model = ModelParams::init_scaled_uniform(
            Arch::Linear {
                input_dim: 5,
                classes: 4,
            },
            &mut stream(6, StreamKind::Init, 0, 0),
        );
        let union = data.all_indices();
        let mut nodes: Vec<&[usize]> = vec![&union, &plan.server_indices];
        for c in &plan.client_indices {
            nodes.push(c);
        }
        // The first entry is the global dataset itself; the identity must
        // hold there too.
        for indices in nodes {
            let (_, full) = loss_and_gradient(&model, &data, indices).unwrap();
            let mut recomposed = vec![0.0; full.len()];
            for class in 0..4 {
                let subset: Vec<usize> = indices
                    .iter()
                    .copied()
                    .filter(|&i| data.labels()[i] == class)
                    .collect();
                if subset.is_empty() {
                    continue;
                }
                let alpha = subset.len() as f64 / indices.len() as f64;
                let (_, class_grad) = loss_and_gradient(&model, &data, &subset).unwrap();
                for (r, g) in recomposed.iter_mut().zip(&class_grad) {
                    *r += alpha * g;
                }
            }
            for (a, b) in full.iter().zip(&recomposed) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn iid_partition_deviations_small_relative_to_gradient_norm() {
        // Needs enough samples per (node, class) cell that the per-class
        // gradients are estimated well; 4000 samples over 4 clients gives
        // 200 per cell.
        let data = synth_gaussian_mixture(4, 8, 1000, 2.0, 29).unwrap();
        let plan = partition_iid(&data, 4, 0.2, 29).unwrap();
        let model = ModelParams::init_scaled_uniform(
            Arch::Linear {
                input_dim: 8,
                classes: 4,
            },
            &mut stream(7, StreamKind::Init, 0, 0),
        );
        let mut nodes: Vec<&[usize]> = vec![&plan.server_indices];
        for c in &plan.client_indices {
            nodes.push(c);
        }
        let est = estimate_heterogeneity(&model, &data, &nodes).unwrap();
        let max_v = est
            .v
            .iter()
            .flatten()
            .filter_map(|v| *v)
            .fold(0.0f64, f64::max);
        assert!(
            max_v / est.g < 0.5,
            "max deviation {max_v} vs gradient norm {}",
            est.g
        );
    }

    fn record_with(
        weights: AggregationWeights,
        chi2_p_beta: f64,
        chi2_alpha_g_tilde: f64,
    ) -> RoundRecord {
        RoundRecord {
            round: 1,
            strategy: "test".into(),
            selected: vec![],
            connected: vec![],
            weights,
            chi2_p_beta,
            chi2_alpha_g_tilde,
            train_loss: 0.0,
            test_loss: 0.0,
            test_accuracy: 0.0,
            global_grad_norm_sq: 0.0,
            flags: vec![],
        }
    }

    #[test]
    fn bound_terms_vanish_under_matched_weights() {
        let data = synth_gaussian_mixture(3, 4, 40, 1.5, 31).unwrap();
        let plan = partition_iid(&data, 2, 0.25, 31).unwrap();
        let model = ModelParams::init_scaled_uniform(
            Arch::Linear {
                input_dim: 4,
                classes: 3,
            },
            &mut stream(8, StreamKind::Init, 0, 0),
        );
        let nodes: Vec<&[usize]> = vec![
            &plan.server_indices,
            &plan.client_indices[0],
            &plan.client_indices[1],
        ];
        let est = estimate_heterogeneity(&model, &data, &nodes).unwrap();
        let mut p = vec![plan.p_s];
        p.extend_from_slice(&plan.p_i);

        // Full participation with beta = p: both divergences are zero, so
        // term (b)'s first summand is exactly zero.
        let mut weights = AggregationWeights::zeros(2);
        weights.beta_s = plan.p_s;
        weights.beta = plan.p_i.clone();
        let chi_beta = chi_square_weights(&weights, plan.p_s, &plan.p_i).unwrap();
        assert_eq!(chi_beta.value, 0.0);

        let server_alpha = class_distribution(&data, &plan.server_indices).unwrap();
        let client_alphas: Vec<ClassDistribution> = plan
            .client_indices
            .iter()
            .map(|idx| class_distribution(&data, idx).unwrap())
            .collect();
        let alpha_g =
            crate::data::global_distribution(&plan, &server_alpha, &client_alphas).unwrap();
        let eff = effective_distribution(&weights, &server_alpha, None, &client_alphas).unwrap();
        let chi_eff = chi_square(&eff, alpha_g.as_slice()).unwrap();
        assert!(chi_eff.value <= 1e-10);

        let records = vec![record_with(weights, chi_beta.value, chi_eff.value)];
        let ctx = BoundContext {
            estimate: &est,
            p: &p,
            local_steps: 5,
            n_clients: 2,
        };
        let terms = bound_terms(&records, &ctx).unwrap();
        assert_eq!(terms.len(), 1);
        assert!(terms[0].1 <= 1e-9, "term b {}", terms[0].1);
        assert!(terms[0].0 > 0.0);
    }

    proptest! {
        #[test]
        fn chi_square_nonnegative(
            q in proptest::collection::vec(0.0f64..1.0, 4),
            p in proptest::collection::vec(0.01f64..1.0, 4),
        ) {
            let qs: f64 = q.iter().sum();
            let ps: f64 = p.iter().sum();
            prop_assume!(qs > 0.0);
            let qn: Vec<f64> = q.iter().map(|v| v / qs).collect();
            let pn: Vec<f64> = p.iter().map(|v| v / ps).collect();
            let r = chi_square(&qn, &pn).unwrap();
            prop_assert!(r.value >= 0.0);
        }
    }
}

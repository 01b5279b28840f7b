//! Experiment orchestration: the federated round loop, client selection,
//! RNG stream management, and metric persistence.
//!
//! A run is a deterministic function of `(config, master_seed)`. Every
//! source of randomness draws from a stream keyed by purpose, round, and
//! node, so two strategies run under the same config and seed see identical
//! connectivity realizations (the paired-mask harness).

pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

pub use config::{
    ArchSpec, DatasetSpec, ExperimentConfig, FailureMode, LinkSpec, PartitionSpec, StrategySpec,
    TrainSpec,
};

use crate::aggregation::{
    ablation_no_weight_opt_weights, aggregate, detect_missing_classes, fedauto_weights,
    fedavg_weights, fedawe_correct, scaffold_global_update, tf_aggregation_weights,
    tf_selection_probs, AggregationWeights, ConnectivityMask, Participation, ScaffoldUpload,
};
use crate::data::{
    class_distribution, global_distribution, load_idx, partition_iid, partition_shard_noniid,
    synth_gaussian_mixture, ClassDistribution, LabeledDataset, PartitionPlan,
};
use crate::diagnostics::{
    chi_square, chi_square_weights, effective_distribution, estimate_heterogeneity, RoundFlag,
    RoundRecord,
};
use crate::error::SimError;
use crate::network::{
    intermittent_step, resource_opt_joint, resource_opt_per_standard, sample_transient,
    IntermittentState, LinkConfig, ResourceOptOutcome, TransientModel,
};
use crate::rng::{stream, StreamKind, SERVER_NODE};
use crate::training::{
    compensatory_update, evaluate_on, local_update, loss_and_gradient, prox_local_update,
    scaffold_local_update, server_update, Arch, ControlVariate, ModelParams, TrainConfig,
    TrainVariant,
};
use crate::Result;

/// Fixed CSV header of the per-round metrics file.
pub const METRICS_CSV_HEADER: &str =
    "round,strategy,connected_count,chi2_p_beta,chi2_ag_tilde,train_loss,test_loss,test_acc,grad_norm_sq,flags";

/// Heterogeneity quantities sampled every `diagnostic_stride` rounds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct HeterogeneitySnapshot {
    pub round: u64,
    /// Global gradient norm at the round's model.
    pub g_norm: f64,
    /// Largest per-node, per-class gradient deviation.
    pub max_v: f64,
    /// `sum_j p_j sum_c alpha_{j,c} V_{j,c}^2`.
    pub weighted_feature_term: f64,
}

/// Outcome of the one-time resource optimization, for the log.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ResourceSummary {
    pub initial_variance: f64,
    pub final_variance: f64,
    pub wired_drop_prob: f64,
}

/// End-of-run aggregates.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunSummary {
    pub rounds: u64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_test_accuracy: f64,
    pub mean_connected_count: f64,
}

/// Full log of one run: the config snapshot, the ordered round records, the
/// periodic heterogeneity snapshots, and the final summary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunLog {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub diagnostics: Vec<HeterogeneitySnapshot>,
    pub resource: Option<ResourceSummary>,
    pub summary: RunSummary,
}

/// Multi-seed sweep result: per-seed final accuracies and their mean/std.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepSummary {
    pub seeds: Vec<u64>,
    pub final_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// One row of the per-client outage table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpsilonRow {
    pub client: usize,
    pub standard: crate::network::NetworkStandard,
    pub distance_km: f64,
    pub epsilon: f64,
    pub intermittent_lambda: f64,
}

/// Selects the round's client multiset. Full participation returns every
/// client once; partial participation draws `k` clients with replacement,
/// client `i` with probability `p_i / (1 - p_s)`.
pub fn select_clients(
    n_clients: usize,
    k: usize,
    p_s: f64,
    p: &[f64],
    participation: Participation,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    match participation {
        Participation::Full => (0..n_clients).collect(),
        Participation::Partial => {
            let total = 1.0 - p_s;
            sample_with_replacement(k, p, total, rng)
        }
    }
}

fn sample_with_replacement(
    k: usize,
    weights: &[f64],
    total: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    use rand::Rng;
    let mut draws = Vec::with_capacity(k);
    for _ in 0..k {
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                chosen = i;
                break;
            }
        }
        draws.push(chosen);
    }
    draws
}

struct Runtime {
    cfg: ExperimentConfig,
    data: LabeledDataset,
    test: LabeledDataset,
    plan: PartitionPlan,
    union: Vec<usize>,
    server_alpha: ClassDistribution,
    client_alphas: Vec<ClassDistribution>,
    alpha_g: ClassDistribution,
    /// Effective per-round transient failure probability per client (wired
    /// drop probability folded in for the joint resource optimizer).
    eps: Vec<f64>,
    /// Initial probabilities, frozen for the failure-weighted baseline.
    eps0: Vec<f64>,
    intermittent: Vec<IntermittentState>,
    tf_selection: Option<Vec<f64>>,
    scaffold_server_cv: ControlVariate,
    scaffold_client_cvs: Vec<ControlVariate>,
    fedawe_last_success: Vec<u64>,
    global: ModelParams,
    train_cfg: TrainConfig,
    resource: Option<ResourceSummary>,
}

impl Runtime {
    fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (data, test) = build_datasets(&cfg)?;
        let plan = build_partition(&cfg, &data)?;
        let union = data.all_indices();
        let server_alpha = class_distribution(&data, &plan.server_indices)?;
        let client_alphas: Vec<ClassDistribution> = plan
            .client_indices
            .iter()
            .map(|idx| class_distribution(&data, idx))
            .collect::<Result<_>>()?;
        let alpha_g = global_distribution(&plan, &server_alpha, &client_alphas)?;

        let mut links = cfg.build_links()?;
        let eps0: Vec<f64> = links
            .iter()
            .map(|l| TransientModel::for_link(l).map(|m| m.epsilon))
            .collect::<Result<_>>()?;
        let mut eps = eps0.clone();
        let mut resource = None;
        match &cfg.strategy {
            StrategySpec::ResourceOpt1FedAvg {
                step_size,
                iterations,
            } => {
                let outcome =
                    resource_opt_joint(&links, cfg.epsilon_threshold, *step_size, *iterations)?;
                apply_resource_outcome(&outcome, &mut links, &mut eps, true);
                resource = Some(summarize_resource(&outcome));
            }
            StrategySpec::ResourceOpt2FedAvg {
                step_size,
                iterations,
            } => {
                let outcome = resource_opt_per_standard(
                    &links,
                    cfg.epsilon_threshold,
                    *step_size,
                    *iterations,
                )?;
                apply_resource_outcome(&outcome, &mut links, &mut eps, false);
                resource = Some(summarize_resource(&outcome));
            }
            _ => {}
        }

        let tf_selection = match cfg.strategy {
            StrategySpec::TfAggregation => {
                Some(tf_selection_probs(&plan.p_i, &eps0, cfg.epsilon_threshold)?)
            }
            _ => None,
        };

        let intermittent = cfg
            .links
            .iter()
            .map(|spec| {
                IntermittentState::new(spec.intermittent_lambda, cfg.intermittent_duration_alpha)
            })
            .collect::<Result<_>>()?;

        let arch = match cfg.train.arch {
            ArchSpec::Linear => Arch::Linear {
                input_dim: data.n_features(),
                classes: data.class_count(),
            },
            ArchSpec::Mlp { hidden } => Arch::Mlp {
                input_dim: data.n_features(),
                hidden,
                classes: data.class_count(),
            },
        };
        let train_cfg = TrainConfig {
            learning_rate: cfg.train.learning_rate,
            local_steps: cfg.train.local_steps,
            batch_size: cfg.train.batch_size,
            variant: cfg.strategy.train_variant(),
        };

        // Pre-training: plain centralized epochs over the public dataset.
        let mut global = ModelParams::init_scaled_uniform(
            arch,
            &mut stream(cfg.master_seed, StreamKind::Init, 0, SERVER_NODE),
        );
        if cfg.pretrain_epochs > 0 {
            let steps_per_epoch = plan.server_indices.len().div_ceil(cfg.train.batch_size);
            let pretrain_cfg = TrainConfig {
                local_steps: cfg.pretrain_epochs * steps_per_epoch,
                variant: TrainVariant::Plain,
                ..train_cfg
            };
            global = local_update(
                &global,
                &data,
                &plan.server_indices,
                &pretrain_cfg,
                &mut stream(cfg.master_seed, StreamKind::Pretrain, 0, SERVER_NODE),
            )?;
        }

        let dim = global.theta.len();
        Ok(Self {
            scaffold_server_cv: ControlVariate::zeros(dim),
            scaffold_client_cvs: vec![ControlVariate::zeros(dim); cfg.clients],
            fedawe_last_success: vec![0; cfg.clients],
            intermittent,
            tf_selection,
            cfg,
            data,
            test,
            plan,
            union,
            server_alpha,
            client_alphas,
            alpha_g,
            eps,
            eps0,
            global,
            train_cfg,
            resource,
        })
    }

    fn effective_failure_mode(&self) -> FailureMode {
        match self.cfg.strategy {
            StrategySpec::FedAvgIdeal => FailureMode::None,
            _ => self.cfg.failure_mode,
        }
    }

    /// Training config for one round, with the step-drop hook applied.
    fn round_train_cfg(&self, round: u64) -> TrainConfig {
        let mut cfg = self.train_cfg;
        if let Some(drop) = self.cfg.train.lr_drop {
            if round > drop.after_round {
                cfg.learning_rate *= drop.factor;
            }
        }
        cfg
    }

    fn run_round(&mut self, round: u64) -> Result<RoundRecord> {
        let cfg = &self.cfg;
        let strategy = cfg.strategy.clone();
        let mode = self.effective_failure_mode();
        let mut flags: Vec<RoundFlag> = Vec::new();

        // Selection happens before failure realization; the failure-weighted
        // baseline samples from its own selection distribution.
        let draws: Vec<usize> = if matches!(strategy, StrategySpec::Centralized) {
            Vec::new()
        } else {
            let mut rng = stream(cfg.master_seed, StreamKind::Selection, round, 0);
            match (&strategy, cfg.participation) {
                (StrategySpec::TfAggregation, Participation::Partial) => sample_with_replacement(
                    cfg.selected_per_round,
                    self.tf_selection.as_ref().unwrap(),
                    1.0,
                    &mut rng,
                ),
                _ => select_clients(
                    cfg.clients,
                    cfg.selected_per_round,
                    self.plan.p_s,
                    &self.plan.p_i,
                    cfg.participation,
                    &mut rng,
                ),
            }
        };
        let distinct: Vec<usize> = draws
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        // The intermittent processes are background per-client processes:
        // they advance every round regardless of selection.
        let mut intermittent_up = vec![true; cfg.clients];
        if matches!(mode, FailureMode::Intermittent | FailureMode::Mixed) {
            for i in 0..cfg.clients {
                let mut rng = stream(cfg.master_seed, StreamKind::Intermittent, round, i as u64);
                intermittent_up[i] = intermittent_step(&mut self.intermittent[i], round, &mut rng);
            }
        }

        // Local updates: the server always trains; selected clients train
        // independently from the broadcast model, each on its own stream,
        // so execution order cannot change the numbers.
        let train_cfg = self.round_train_cfg(round);
        let server_model = server_update(
            &self.global,
            &self.data,
            &self.plan.server_indices,
            &TrainConfig {
                variant: TrainVariant::Plain,
                ..train_cfg
            },
            &mut stream(cfg.master_seed, StreamKind::Training, round, SERVER_NODE),
        )?;

        let mut client_models: BTreeMap<usize, ModelParams> = BTreeMap::new();
        let mut new_cvs: BTreeMap<usize, ControlVariate> = BTreeMap::new();
        for &i in &distinct {
            let indices = &self.plan.client_indices[i];
            let mut rng = stream(cfg.master_seed, StreamKind::Training, round, i as u64);
            let model = match &strategy {
                StrategySpec::FedProx { .. } => prox_local_update(
                    &self.global,
                    &self.data,
                    indices,
                    &train_cfg,
                    &self.global,
                    &mut rng,
                )?,
                StrategySpec::Scaffold => {
                    let (model, cv) = scaffold_local_update(
                        &self.global,
                        &self.data,
                        indices,
                        &train_cfg,
                        &self.scaffold_server_cv,
                        &self.scaffold_client_cvs[i],
                        cfg.selected_per_round,
                        &mut rng,
                    )?;
                    new_cvs.insert(i, cv);
                    model
                }
                StrategySpec::FedAwe { gamma_g } => {
                    let model =
                        local_update(&self.global, &self.data, indices, &train_cfg, &mut rng)?;
                    fedawe_correct(
                        &model,
                        &self.global,
                        round,
                        self.fedawe_last_success[i],
                        *gamma_g,
                    )?
                }
                _ => local_update(&self.global, &self.data, indices, &train_cfg, &mut rng)?,
            };
            client_models.insert(i, model);
        }

        // Failure realization for the selected clients.
        let mut connected = BTreeMap::new();
        for &i in &distinct {
            let ok = match mode {
                FailureMode::None => true,
                FailureMode::Transient => {
                    let mut rng = stream(cfg.master_seed, StreamKind::Transient, round, i as u64);
                    sample_transient(self.eps[i], &mut rng)?
                }
                FailureMode::Intermittent => intermittent_up[i],
                FailureMode::Mixed => {
                    let mut rng = stream(cfg.master_seed, StreamKind::Transient, round, i as u64);
                    sample_transient(self.eps[i], &mut rng)? && intermittent_up[i]
                }
            };
            connected.insert(i, ok);
        }
        let mask = ConnectivityMask::new(draws.clone(), connected)?;
        let connected_ids = mask.connected_clients();
        if connected_ids.is_empty() && !matches!(strategy, StrategySpec::Centralized) {
            flags.push(RoundFlag::DegenerateRound);
        }

        // Strategy-specific aggregation.
        let connected_refs: Vec<(usize, &ModelParams)> = connected_ids
            .iter()
            .map(|&i| (i, &client_models[&i]))
            .collect();
        let mut comp_alpha: Option<ClassDistribution> = None;
        let (new_global, weights) = match &strategy {
            StrategySpec::Centralized => {
                let mut w = AggregationWeights::zeros(cfg.clients);
                w.beta_s = 1.0;
                (server_model.clone(), w)
            }
            StrategySpec::FedAvg
            | StrategySpec::FedAvgIdeal
            | StrategySpec::FedProx { .. }
            | StrategySpec::FedAwe { .. }
            | StrategySpec::ResourceOpt1FedAvg { .. }
            | StrategySpec::ResourceOpt2FedAvg { .. } => {
                let w = fedavg_weights(&mask, self.plan.p_s, &self.plan.p_i, cfg.participation);
                w.validate_normalized(&mask)?;
                (aggregate(&w, &server_model, None, &connected_refs)?, w)
            }
            StrategySpec::Scaffold => {
                // cv_old is the pre-round variate; new ones are committed
                // below, after aggregation.
                let uploads: Vec<ScaffoldUpload<'_>> = connected_ids
                    .iter()
                    .map(|&i| ScaffoldUpload {
                        client: i,
                        model: &client_models[&i],
                        cv_old: &self.scaffold_client_cvs[i],
                        cv_new: &new_cvs[&i],
                    })
                    .collect();
                let gamma_g = 1.0;
                let (model, server_cv, degenerate) = scaffold_global_update(
                    &self.global,
                    &self.scaffold_server_cv,
                    &uploads,
                    gamma_g,
                    cfg.clients,
                )?;
                self.scaffold_server_cv = server_cv;
                let mut w = AggregationWeights::zeros(cfg.clients);
                if !degenerate {
                    let share = gamma_g / connected_ids.len() as f64;
                    for &i in &connected_ids {
                        w.beta[i] = share;
                    }
                }
                (model, w)
            }
            StrategySpec::TfAggregation => {
                let w = tf_aggregation_weights(
                    &mask,
                    &self.plan.p_i,
                    &self.eps0,
                    cfg.epsilon_threshold,
                    self.tf_selection.as_ref().unwrap(),
                    cfg.selected_per_round,
                )?;
                (aggregate(&w, &server_model, None, &connected_refs)?, w)
            }
            StrategySpec::FedAuto | StrategySpec::FedAutoNoM1 | StrategySpec::FedAutoNoM2 => {
                let connected_dists: Vec<&ClassDistribution> = connected_ids
                    .iter()
                    .map(|&i| &self.client_alphas[i])
                    .collect();
                let missing = detect_missing_classes(&connected_dists, self.data.class_count());

                let compensatory = if matches!(strategy, StrategySpec::FedAutoNoM1)
                    || missing.is_empty()
                    || connected_ids.is_empty()
                {
                    None
                } else {
                    self.train_compensatory(round, &train_cfg, &missing, &mut flags)?
                };
                if let Some((_, alpha)) = &compensatory {
                    comp_alpha = Some(alpha.clone());
                }
                let effective_missing: BTreeSet<usize> = if compensatory.is_some() {
                    missing
                } else {
                    BTreeSet::new()
                };

                let w = match strategy {
                    StrategySpec::FedAutoNoM2 => {
                        ablation_no_weight_opt_weights(&mask, compensatory.is_some(), cfg.clients)
                    }
                    _ => fedauto_weights(
                        &mask,
                        &self.alpha_g,
                        &self.server_alpha,
                        &effective_missing,
                        comp_alpha.as_ref(),
                        &self.client_alphas,
                    )?,
                };
                w.validate_normalized(&mask)?;
                let comp_model = compensatory.as_ref().map(|(m, _)| m);
                (
                    aggregate(&w, &server_model, comp_model, &connected_refs)?,
                    w,
                )
            }
        };

        // Selected clients keep the control variate they computed whether or
        // not the upload went through.
        for (i, cv) in new_cvs {
            self.scaffold_client_cvs[i] = cv;
        }
        for &i in &connected_ids {
            self.fedawe_last_success[i] = round;
        }

        // Diagnostics on the freshly aggregated model.
        let chi_beta = chi_square_weights(&weights, self.plan.p_s, &self.plan.p_i)?;
        let effective = effective_distribution(
            &weights,
            &self.server_alpha,
            comp_alpha.as_ref(),
            &self.client_alphas,
        )?;
        let chi_eff = chi_square(&effective, self.alpha_g.as_slice())?;
        if chi_beta.flagged_infinite || chi_eff.flagged_infinite {
            flags.push(RoundFlag::Chi2Infinite);
        }
        let (train_loss, _) = evaluate_on(&new_global, &self.data, &self.union)?;
        let (test_loss, test_accuracy) =
            evaluate_on(&new_global, &self.test, &self.test.all_indices())?;
        let (_, grad) = loss_and_gradient(&new_global, &self.data, &self.union)?;
        let grad_norm_sq: f64 = grad.iter().map(|g| g * g).sum();

        self.global = new_global;
        Ok(RoundRecord {
            round,
            strategy: strategy.id().to_string(),
            selected: draws,
            connected: connected_ids,
            weights,
            chi2_p_beta: chi_beta.value,
            chi2_alpha_g_tilde: chi_eff.value,
            train_loss,
            test_loss,
            test_accuracy,
            global_grad_norm_sq: grad_norm_sq,
            flags,
        })
    }

    /// Module 1: trains the compensatory model on the missing classes,
    /// falling back to the covered subset (with a flag) when the public set
    /// cannot cover them all.
    fn train_compensatory(
        &self,
        round: u64,
        train_cfg: &TrainConfig,
        missing: &BTreeSet<usize>,
        flags: &mut Vec<RoundFlag>,
    ) -> Result<Option<(ModelParams, ClassDistribution)>> {
        let cfg = TrainConfig {
            variant: TrainVariant::Plain,
            ..*train_cfg
        };
        let mut rng = stream(
            self.cfg.master_seed,
            StreamKind::Compensatory,
            round,
            SERVER_NODE,
        );
        match compensatory_update(
            &self.global,
            &self.data,
            &self.plan.server_indices,
            missing,
            &cfg,
            &mut rng,
        ) {
            Ok((model, subset)) => {
                let alpha = class_distribution(&self.data, &subset)?;
                Ok(Some((model, alpha)))
            }
            Err(SimError::CoverageGap { uncovered }) => {
                flags.push(RoundFlag::CoverageGap);
                let covered: BTreeSet<usize> = missing
                    .iter()
                    .copied()
                    .filter(|c| !uncovered.contains(c))
                    .collect();
                if covered.is_empty() {
                    return Ok(None);
                }
                let mut rng = stream(
                    self.cfg.master_seed,
                    StreamKind::Compensatory,
                    round,
                    SERVER_NODE,
                );
                let (model, subset) = compensatory_update(
                    &self.global,
                    &self.data,
                    &self.plan.server_indices,
                    &covered,
                    &cfg,
                    &mut rng,
                )?;
                let alpha = class_distribution(&self.data, &subset)?;
                Ok(Some((model, alpha)))
            }
            Err(other) => Err(other),
        }
    }

    fn heterogeneity_snapshot(&self, round: u64) -> Result<HeterogeneitySnapshot> {
        let mut nodes: Vec<&[usize]> = vec![&self.plan.server_indices];
        for c in &self.plan.client_indices {
            nodes.push(c);
        }
        let est = estimate_heterogeneity(&self.global, &self.data, &nodes)?;
        let max_v = est
            .v
            .iter()
            .flatten()
            .filter_map(|v| *v)
            .fold(0.0, f64::max);
        let mut p = vec![self.plan.p_s];
        p.extend_from_slice(&self.plan.p_i);
        let weighted_feature_term = (0..nodes.len()).map(|j| p[j] * est.feature_term(j)).sum();
        Ok(HeterogeneitySnapshot {
            round,
            g_norm: est.g,
            max_v,
            weighted_feature_term,
        })
    }
}

fn apply_resource_outcome(
    outcome: &ResourceOptOutcome,
    links: &mut Vec<LinkConfig>,
    eps: &mut [f64],
    wired_drop: bool,
) {
    *links = outcome.links.clone();
    for i in 0..links.len() {
        eps[i] = if wired_drop && links[i].standard.is_wired() && outcome.eligible[i] {
            outcome.wired_drop_prob
        } else {
            outcome.epsilons[i]
        };
    }
}

fn summarize_resource(outcome: &ResourceOptOutcome) -> ResourceSummary {
    ResourceSummary {
        initial_variance: outcome.initial_variance,
        final_variance: outcome.final_variance,
        wired_drop_prob: outcome.wired_drop_prob,
    }
}

fn build_datasets(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            features,
            per_class,
            test_per_class,
            separation,
        } => {
            // Train and test share the same class means: generate one pool
            // and split each class block.
            let seed = crate::rng::derive_seed(cfg.master_seed, StreamKind::Dataset);
            let total = per_class + test_per_class;
            let pool = synth_gaussian_mixture(*classes, *features, total, *separation, seed)?;
            let mut train_idx = Vec::new();
            let mut test_idx = Vec::new();
            for c in 0..*classes {
                let start = c * total;
                train_idx.extend(start..start + per_class);
                test_idx.extend(start + per_class..start + total);
            }
            Ok((pool.subset(&train_idx)?, pool.subset(&test_idx)?))
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            let classes = train.class_count().max(test.class_count());
            Ok((
                train.with_class_count(classes)?,
                test.with_class_count(classes)?,
            ))
        }
    }
}

fn build_partition(cfg: &ExperimentConfig, data: &LabeledDataset) -> Result<PartitionPlan> {
    let seed = crate::rng::derive_seed(cfg.master_seed, StreamKind::Partition);
    match &cfg.partition {
        PartitionSpec::Iid { public_fraction } => {
            partition_iid(data, cfg.clients, *public_fraction, seed)
        }
        PartitionSpec::ShardNonIid {
            classes_per_client,
            public_fraction,
        } => partition_shard_noniid(
            data,
            cfg.clients,
            *classes_per_client,
            *public_fraction,
            seed,
        ),
    }
}

/// Runs one experiment end to end.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<RunLog> {
    let mut runtime = Runtime::new(cfg)?;
    let rounds = runtime.cfg.rounds;
    let mut records = Vec::with_capacity(rounds as usize);
    let mut diagnostics = Vec::new();
    for round in 1..=rounds {
        let record = runtime.run_round(round)?;
        records.push(record);
        if round % runtime.cfg.diagnostic_stride == 0 || round == rounds {
            diagnostics.push(runtime.heterogeneity_snapshot(round)?);
        }
    }
    let last = records.last().expect("at least one round");
    let mean_connected_count = records
        .iter()
        .map(|r| r.connected.len() as f64)
        .sum::<f64>()
        / rounds as f64;
    let summary = RunSummary {
        rounds,
        final_train_loss: last.train_loss,
        final_test_loss: last.test_loss,
        final_test_accuracy: last.test_accuracy,
        mean_connected_count,
    };
    Ok(RunLog {
        config: runtime.cfg.clone(),
        records,
        diagnostics,
        resource: runtime.resource.clone(),
        summary,
    })
}

/// Runs `n_seeds` experiments with master seeds `base, base+1, ...` and
/// reports the mean and standard deviation of the final test accuracy.
pub fn run_sweep(cfg: &ExperimentConfig, n_seeds: u64) -> Result<(Vec<RunLog>, SweepSummary)> {
    if n_seeds == 0 {
        return Err(SimError::parameter("need at least one seed"));
    }
    let mut logs = Vec::with_capacity(n_seeds as usize);
    let mut seeds = Vec::new();
    for offset in 0..n_seeds {
        let mut seeded = cfg.clone();
        seeded.master_seed = cfg.master_seed + offset;
        seeds.push(seeded.master_seed);
        logs.push(run_experiment(seeded)?);
    }
    let accuracies: Vec<f64> = logs.iter().map(|l| l.summary.final_test_accuracy).collect();
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let var = accuracies
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / accuracies.len() as f64;
    Ok((
        logs,
        SweepSummary {
            seeds,
            final_accuracies: accuracies,
            mean_accuracy: mean,
            std_accuracy: var.sqrt(),
        },
    ))
}

/// Per-client initial outage probabilities for a config's link table.
pub fn epsilon_table(cfg: &ExperimentConfig) -> Result<Vec<EpsilonRow>> {
    cfg.validate()?;
    let links = cfg.build_links()?;
    links
        .iter()
        .enumerate()
        .map(|(i, link)| {
            let model = TransientModel::for_link(link)?;
            Ok(EpsilonRow {
                client: i,
                standard: link.standard,
                distance_km: link.distance_km,
                epsilon: model.epsilon,
                intermittent_lambda: cfg.links[i].intermittent_lambda,
            })
        })
        .collect()
}

/// Renders the per-round metrics as CSV with the fixed column set.
pub fn metrics_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let flags: Vec<&str> = r.flags.iter().map(|f| f.as_str()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.strategy,
            r.connected.len(),
            r.chi2_p_beta,
            r.chi2_alpha_g_tilde,
            r.train_loss,
            r.test_loss,
            r.test_accuracy,
            r.global_grad_norm_sq,
            flags.join(";"),
        );
    }
    out
}

/// Writes `metrics.csv` and `run.json` under `dir`.
pub fn write_outputs(log: &RunLog, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&log.records))?;
    let json = serde_json::to_string_pretty(log)
        .map_err(|e| SimError::Config(format!("serializing run log: {e}")))?;
    std::fs::write(dir.join("run.json"), json)?;
    Ok(())
}

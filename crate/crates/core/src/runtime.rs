//! Federated round and task orchestration.
//!
//! A `Simulation` owns the global classifier, the shared VAE, the client
//! states, and the bookkeeping rows (accuracy matrix, pre-training and
//! fresh-init baselines). Tasks advance one at a time: group membership is
//! re-drawn, the head grows, current-task data is partitioned, R rounds of
//! broadcast/local-train/aggregate run, and the task closes by promoting
//! summaries, fitting EWC anchors, and freezing the teacher. All randomness
//! derives from the master seed, and every client-server exchange passes
//! through the byte-level round message format, so parameters quantize to f32
//! on the wire in both directions.

use crate::aggregate::fedavg;
use crate::client::{
    client_local_train, diagonal_fisher, ClientState, ClientUpdate, FisherInfo,
    LocalTrainContext, StrategyConfig, TraceRow,
};
use crate::condense::CondensationState;
use crate::dataset::{DatasetSpec, ImageBatch, ImageShape, Origin, Sample};
use crate::error::{Error, Result};
use crate::groups::{advance_client_groups, sample_round_clients, ClientGroupAssignment, ClientId};
use crate::metrics::{compute_report, AccuracyMatrix, MetricReport};
use crate::model::{ArchSpec, Backbone, ParamVector};
use crate::partition::{dirichlet_partition, ClientPartition};
use crate::proto::{build_prototypes, FeatureBank, PrototypeSet};
use crate::rng::{self, domain};
use crate::schedule::{build_task_schedule, TaskSchedule};
use crate::tensor::Tensor;
use crate::transport::{RoundHeader, RoundMessage};
use crate::vae::{SharedVae, VaeConfig};
use crate::autodiff::Graph;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Reported when a pair of class histograms has non-overlapping support and
/// the Jeffreys divergence is infinite.
pub const KL_DIVERGENCE_SENTINEL: f64 = 1e4;

/// Header id used for server-to-client broadcasts.
pub const SERVER_ID: usize = usize::MAX;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub arch: ArchSpec,
    pub input: ImageShape,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub clients_initial: usize,
    pub clients_increment: usize,
    /// Fraction of existing clients re-drawn into the in-between group.
    pub transition_fraction: f64,
    pub round_clients: usize,
    pub rounds_per_task: usize,
    /// Extends round sampling to old-group clients (memory-only training).
    pub include_old_clients: bool,
    pub sigma: f64,
    pub memory_budget: usize,
    pub strategy: StrategyConfig,
    pub vae_hidden: usize,
    pub vae_latent: usize,
    pub vae_embed: usize,
    pub vae_beta: f64,
    pub aggregate_vae_every_round: bool,
    /// Features generated per class when building prototypes.
    pub proto_per_class: usize,
    /// Fresh initializations averaged into the forward-transfer baseline.
    pub baseline_inits: usize,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::invalid(
                "tasks/classes_per_task",
                "must be positive",
            ));
        }
        if self.clients_initial == 0 {
            return Err(Error::invalid("clients_initial", "need at least one client"));
        }
        if self.round_clients == 0 || self.rounds_per_task == 0 {
            return Err(Error::invalid(
                "round_clients/rounds_per_task",
                "must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.transition_fraction) {
            return Err(Error::invalid("transition_fraction", "must lie in [0, 1]"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("sigma", "must be positive"));
        }
        if self.strategy.method.uses_memory()
            && self.memory_budget < self.tasks * self.classes_per_task
        {
            return Err(Error::BudgetTooSmall {
                budget: self.memory_budget,
                classes: self.tasks * self.classes_per_task,
            });
        }
        if self.strategy.use_vae
            && (self.vae_hidden == 0
                || self.vae_latent == 0
                || self.vae_embed == 0
                || self.proto_per_class == 0)
        {
            return Err(Error::invalid(
                "vae_hidden/vae_latent/vae_embed/proto_per_class",
                "must be positive when the shared VAE is enabled",
            ));
        }
        if self.baseline_inits == 0 {
            return Err(Error::invalid("baseline_inits", "must be at least 1"));
        }
        self.strategy.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub task: usize,
    pub round: usize,
    pub participants: Vec<usize>,
    /// Participants that produced an update (skips excluded).
    pub trained: usize,
    pub mean_task_loss: f64,
    pub mean_memory_loss: f64,
    pub mean_total_loss: f64,
    pub classifier_norm: f64,
    pub vae_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseKl {
    pub client_a: usize,
    pub client_b: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub pairwise: Vec<PairwiseKl>,
    pub mean_kl: f64,
    /// Global cross-entropy after one rehearsal epoch under the actual
    /// exemplar partition minus the same under an IID reshuffle.
    pub delta_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutput {
    pub matrix: AccuracyMatrix,
    pub report: Option<MetricReport>,
    pub pre_training_row: Vec<f64>,
    pub baseline_row: Vec<f64>,
    pub rounds: Vec<RoundReport>,
    pub traces: BTreeMap<usize, Vec<TraceRow>>,
    pub heterogeneity: Option<HeterogeneityReport>,
    /// task -> client -> class slot -> sample count, for partition plots.
    pub partition_histograms: BTreeMap<usize, BTreeMap<usize, BTreeMap<usize, usize>>>,
}

/// Weighted mean of VAE parameter vectors. Encoder/decoder entries must agree
/// across updates; `emb.<class>` entries are averaged over the clients that
/// hold them, weighted by those clients' sample counts only.
pub fn aggregate_vae(updates: &[(&ParamVector, usize)]) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    let mut shared: Vec<(ParamVector, usize)> = Vec::with_capacity(updates.len());
    let mut by_class: BTreeMap<usize, Vec<(&Tensor, usize)>> = BTreeMap::new();
    for &(pv, n) in updates {
        let mut rest = Vec::new();
        for (name, t) in pv.iter() {
            if let Some(class) = name.strip_prefix("emb.") {
                let class: usize = class.parse().map_err(|_| {
                    Error::invalid("vae_params", format!("bad embedding name {name}"))
                })?;
                by_class.entry(class).or_default().push((t, n));
            } else {
                rest.push((name.to_string(), t.clone()));
            }
        }
        shared.push((ParamVector::new(rest), n));
    }
    let refs: Vec<(&ParamVector, usize)> = shared.iter().map(|(pv, n)| (pv, *n)).collect();
    let mut out = fedavg(&refs)?;
    for (class, holders) in by_class {
        let total: usize = holders.iter().map(|(_, n)| *n).sum();
        if total == 0 {
            return Err(Error::EmptyAggregation);
        }
        let mut mean = Tensor::zeros(holders[0].0.shape().to_vec());
        for (t, n) in &holders {
            t.check_shape(mean.shape())?;
            mean.axpy(*n as f64 / total as f64, t);
        }
        out.set(&format!("emb.{class}"), mean);
    }
    Ok(out)
}

/// Jeffreys divergence (both-ways KL, natural log) between two class-count
/// histograms. Non-overlapping support reports the documented sentinel.
pub fn symmetric_kl(p: &BTreeMap<usize, usize>, q: &BTreeMap<usize, usize>) -> f64 {
    let pt: usize = p.values().sum();
    let qt: usize = q.values().sum();
    if pt == 0 || qt == 0 {
        return KL_DIVERGENCE_SENTINEL;
    }
    let keys: std::collections::BTreeSet<usize> = p.keys().chain(q.keys()).copied().collect();
    let mut sum = 0.0;
    for k in keys {
        let pi = *p.get(&k).unwrap_or(&0) as f64 / pt as f64;
        let qi = *q.get(&k).unwrap_or(&0) as f64 / qt as f64;
        if (pi > 0.0) != (qi > 0.0) {
            return KL_DIVERGENCE_SENTINEL;
        }
        if pi > 0.0 {
            sum += pi * (pi / qi).ln() + qi * (qi / pi).ln();
        }
    }
    sum
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub struct Simulation {
    cfg: SimulationConfig,
    schedule: TaskSchedule,
    class_slot: BTreeMap<usize, usize>,
    train: DatasetSpec,
    test: DatasetSpec,
    global: Backbone,
    vae: SharedVae,
    teacher: Option<Backbone>,
    clients: BTreeMap<ClientId, ClientState>,
    assignment: Option<ClientGroupAssignment>,
    partition: ClientPartition,
    matrix: AccuracyMatrix,
    pre_row: Vec<f64>,
    base_row: Vec<f64>,
    rounds: Vec<RoundReport>,
    histograms: BTreeMap<usize, BTreeMap<usize, BTreeMap<usize, usize>>>,
    next_task: usize,
}

impl Simulation {
    pub fn new(cfg: SimulationConfig, train: DatasetSpec, test: DatasetSpec) -> Result<Self> {
        cfg.validate()?;
        if train.shape != cfg.input || test.shape != cfg.input {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", cfg.input),
                got: format!("train {:?} / test {:?}", train.shape, test.shape),
            });
        }
        if test.class_count != train.class_count {
            return Err(Error::invalid(
                "test",
                "train and test must share the class universe",
            ));
        }
        let schedule = build_task_schedule(
            train.class_count,
            cfg.tasks,
            cfg.classes_per_task,
            cfg.seed,
        )?;
        let mut class_slot = BTreeMap::new();
        let mut slot = 0;
        for t in 0..cfg.tasks {
            for &class in schedule.classes(t) {
                class_slot.insert(class, slot);
                slot += 1;
            }
        }
        let global = Backbone::init(cfg.arch, cfg.input, cfg.classes_per_task, cfg.seed)?;
        let vae = SharedVae::new(
            VaeConfig {
                feature_dim: global.feature_dim(),
                hidden: cfg.vae_hidden,
                latent_dim: cfg.vae_latent,
                embed_dim: cfg.vae_embed,
                beta: cfg.vae_beta,
            },
            cfg.seed,
        )?;
        let sigma = cfg.sigma;
        Ok(Simulation {
            cfg,
            schedule,
            class_slot,
            train,
            test,
            global,
            vae,
            teacher: None,
            clients: BTreeMap::new(),
            assignment: None,
            partition: ClientPartition::new(sigma),
            matrix: AccuracyMatrix::new(),
            pre_row: Vec::new(),
            base_row: Vec::new(),
            rounds: Vec::new(),
            histograms: BTreeMap::new(),
            next_task: 0,
        })
    }

    pub fn global(&self) -> &Backbone {
        &self.global
    }

    pub fn teacher(&self) -> Option<&Backbone> {
        self.teacher.as_ref()
    }

    pub fn client(&self, id: ClientId) -> Option<&ClientState> {
        self.clients.get(&id)
    }

    pub fn schedule(&self) -> &TaskSchedule {
        &self.schedule
    }

    pub fn completed_tasks(&self) -> usize {
        self.next_task
    }

    pub fn is_complete(&self) -> bool {
        self.next_task >= self.cfg.tasks
    }

    /// Head slot for a raw dataset class id.
    pub fn slot_of(&self, class: usize) -> Option<usize> {
        self.class_slot.get(&class).copied()
    }

    pub fn run_all(&mut self) -> Result<RunOutput> {
        while !self.is_complete() {
            self.run_next_task()?;
        }
        self.output()
    }

    /// Snapshot of everything downstream consumers need; metrics require two
    /// completed tasks and are omitted before that.
    pub fn output(&self) -> Result<RunOutput> {
        if self.matrix.tasks() == 0 {
            return Err(Error::invalid("simulation", "no completed tasks yet"));
        }
        let report = if self.matrix.tasks() >= 2 {
            Some(compute_report(&self.matrix, &self.pre_row, &self.base_row)?)
        } else {
            None
        };
        let traces = self
            .clients
            .iter()
            .filter(|(_, s)| !s.trace.is_empty())
            .map(|(id, s)| (id.0, s.trace.clone()))
            .collect();
        Ok(RunOutput {
            matrix: self.matrix.clone(),
            report,
            pre_training_row: self.pre_row.clone(),
            baseline_row: self.base_row.clone(),
            rounds: self.rounds.clone(),
            traces,
            heterogeneity: self.heterogeneity()?,
            partition_histograms: self.histograms.clone(),
        })
    }

    pub fn run_next_task(&mut self) -> Result<()> {
        if self.is_complete() {
            return Err(Error::invalid("simulation", "all tasks already completed"));
        }
        let t = self.next_task;
        self.begin_task(t)?;
        let data = self.partition_task_data(t)?;
        for r in 0..self.cfg.rounds_per_task {
            self.run_round(t, r, &data)?;
        }
        self.finish_task(t, &data)?;
        self.next_task = t + 1;
        Ok(())
    }

    fn slots_of_task(&self, t: usize) -> Vec<usize> {
        self.schedule
            .classes(t)
            .iter()
            .map(|c| self.class_slot[c])
            .collect()
    }

    fn begin_task(&mut self, t: usize) -> Result<()> {
        let assignment = advance_client_groups(
            self.assignment.as_ref(),
            t,
            self.cfg.clients_initial,
            self.cfg.clients_increment,
            self.cfg.transition_fraction,
            self.cfg.seed,
        )?;

        // Brand-new clients get fresh state; the VAE seed is shared so every
        // client starts from identical parameters and class embeddings.
        for &id in assignment.all_clients().iter() {
            if !self.clients.contains_key(&id) {
                self.clients.insert(
                    id,
                    ClientState::new(
                        id,
                        self.cfg.memory_budget,
                        self.cfg.input,
                        self.vae.config().clone(),
                        self.cfg.seed,
                    )?,
                );
            }
        }

        if t > 0 {
            self.global = self.global.expand_head(self.cfg.classes_per_task, self.cfg.seed)?;
        }

        // Forward-transfer bookkeeping: accuracy on the incoming task before
        // any training on it, and the fresh-initialization baseline.
        self.pre_row.push(self.evaluate_task(&self.global, t)?);
        let mut base = 0.0;
        for k in 0..self.cfg.baseline_inits {
            let fresh = Backbone::init(
                self.cfg.arch,
                self.cfg.input,
                self.schedule.class_count_through(t),
                rng::derive_seed(self.cfg.seed, &[domain::BASELINE_INIT, t as u64, k as u64]),
            )?;
            base += self.evaluate_task(&fresh, t)?;
        }
        self.base_row.push(base / self.cfg.baseline_inits as f64);

        let holders = assignment.current_holders();
        if self.cfg.strategy.method.uses_memory() {
            // Adjustable memory re-splits the budget over classes seen so
            // far; the fixed variant splits once over the experiment total.
            let split = if self.cfg.strategy.adjustable_memory {
                self.schedule.class_count_through(t)
            } else {
                self.cfg.tasks * self.cfg.classes_per_task
            };
            for state in self.clients.values_mut() {
                state.store.rebalance_quota(split)?;
            }
        }

        let slots = self.slots_of_task(t);
        for &id in holders.iter() {
            let state = self.clients.get_mut(&id).expect("created above");
            if self.cfg.strategy.method.uses_memory() {
                state.store.begin_task(&slots)?;
            }
            if self.cfg.strategy.method.uses_condensation() {
                state.cond = Some(CondensationState::new(
                    self.cfg.arch,
                    self.cfg.input,
                    self.schedule.class_count_through(t),
                    self.cfg.strategy.condense.eta,
                    rng::derive_seed(self.cfg.seed, &[domain::OMEGA_INIT, t as u64]),
                )?);
            }
        }

        // The server VAE learns every class introduced so far; embeddings are
        // seed-derived, so registration order does not matter.
        if self.cfg.strategy.use_vae {
            for slot in 0..self.schedule.class_count_through(t) {
                self.vae.register_class(slot);
            }
        }

        self.assignment = Some(assignment);
        Ok(())
    }

    /// Dirichlet split of the current task's training samples over holders.
    /// Returns slot-labeled samples per client and records the histograms.
    fn partition_task_data(&mut self, t: usize) -> Result<BTreeMap<ClientId, Vec<Sample>>> {
        let assignment = self.assignment.as_ref().expect("begin_task ran");
        let holders: Vec<ClientId> = assignment.current_holders().into_iter().collect();
        if holders.is_empty() {
            return Ok(BTreeMap::new());
        }
        let task_classes = self.schedule.classes(t);
        let samples: Vec<(usize, usize)> = self
            .train
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| task_classes.binary_search(&s.label).is_ok())
            .map(|(i, s)| (i, self.class_slot[&s.label]))
            .collect();
        let fragment = dirichlet_partition(&samples, &holders, self.cfg.sigma, self.cfg.seed)?;

        let mut task_hist: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
        let mut out: BTreeMap<ClientId, Vec<Sample>> = BTreeMap::new();
        for (&client, idxs) in &fragment {
            let hist = task_hist.entry(client.0).or_default();
            let data = out.entry(client).or_default();
            for &i in idxs {
                let raw = &self.train.samples[i];
                let slot = self.class_slot[&raw.label];
                *hist.entry(slot).or_insert(0) += 1;
                data.push(Sample {
                    pixels: raw.pixels.clone(),
                    label: slot,
                });
            }
        }
        self.histograms.insert(t, task_hist);
        self.partition.insert_task(t, fragment);
        Ok(out)
    }

    fn broadcast(&self, t: usize, r: usize) -> Result<(Backbone, ParamVector)> {
        let mut tensors: Vec<(String, Tensor)> = self
            .global
            .params
            .iter()
            .map(|(n, v)| (format!("clf.{n}"), v.clone()))
            .collect();
        for (n, v) in self.vae.to_param_vector().iter() {
            tensors.push((format!("vae.{n}"), v.clone()));
        }
        let msg = RoundMessage {
            header: RoundHeader {
                round: r,
                task: t,
                client_id: SERVER_ID,
                n_l: 0,
            },
            tensors,
        };
        let decoded = RoundMessage::decode(&msg.encode()?)?;
        let (clf, vae) = split_prefixed(decoded.tensors)?;
        let mut model = self.global.clone();
        model.params.check_same_architecture(&clf)?;
        model.params = clf;
        Ok((model, vae))
    }

    fn server_prototypes(&self, t: usize, r: usize) -> Result<Option<PrototypeSet>> {
        if !(self.cfg.strategy.use_vae && self.cfg.strategy.method.uses_condensation()) {
            return Ok(None);
        }
        let mut bank = FeatureBank::new(self.global.feature_dim());
        for slot in 0..self.schedule.class_count_through(t) {
            let feats = self.vae.generate(
                slot,
                self.cfg.proto_per_class,
                rng::derive_seed(self.cfg.seed, &[domain::SERVER_PROTO, t as u64, r as u64]),
            )?;
            bank.push_rows(slot, feats)?;
        }
        Ok(Some(build_prototypes(&bank)?))
    }

    fn run_round(
        &mut self,
        t: usize,
        r: usize,
        data: &BTreeMap<ClientId, Vec<Sample>>,
    ) -> Result<()> {
        let assignment = self.assignment.as_ref().expect("begin_task ran");
        let participants = sample_round_clients(
            assignment,
            self.cfg.round_clients,
            self.cfg.include_old_clients,
            rng::derive_seed(self.cfg.seed, &[domain::ROUND_SAMPLE, t as u64, r as u64]),
        );
        let (model, vae_params) = self.broadcast(t, r)?;
        let prototypes = self.server_prototypes(t, r)?;
        let old_classes = if t > 0 {
            self.schedule.class_count_through(t - 1)
        } else {
            0
        };

        let empty: Vec<Sample> = Vec::new();
        let mut collected: Vec<(ParamVector, Option<ParamVector>, usize)> = Vec::new();
        let mut report = RoundReport {
            task: t,
            round: r,
            participants: participants.iter().map(|c| c.0).collect(),
            trained: 0,
            mean_task_loss: 0.0,
            mean_memory_loss: 0.0,
            mean_total_loss: 0.0,
            classifier_norm: 0.0,
            vae_norm: 0.0,
        };

        for &id in &participants {
            let state = self.clients.get_mut(&id).expect("participant exists");
            if self.cfg.strategy.use_vae {
                state.vae.apply_param_vector(&vae_params)?;
            }
            let local: Vec<&Sample> = data.get(&id).unwrap_or(&empty).iter().collect();
            let ctx = LocalTrainContext {
                task: t,
                round: r,
                model: &model,
                teacher: self.teacher.as_ref(),
                old_classes,
                prototypes: prototypes.as_ref(),
            };
            let update =
                match client_local_train(&ctx, state, &local, &self.cfg.strategy, self.cfg.seed) {
                    Ok(u) => u,
                    Err(Error::ClientSkip { .. }) => continue,
                    Err(e) => return Err(e),
                };
            let (params, vae_update, n_l, rep) = roundtrip_update(t, r, update)?;
            report.mean_task_loss += rep.task_loss;
            report.mean_memory_loss += rep.memory_loss;
            report.mean_total_loss += rep.total_loss;
            report.trained += 1;
            collected.push((params, vae_update, n_l));
        }

        if report.trained > 0 {
            let n = report.trained as f64;
            report.mean_task_loss /= n;
            report.mean_memory_loss /= n;
            report.mean_total_loss /= n;

            let clf_updates: Vec<(&ParamVector, usize)> =
                collected.iter().map(|(p, _, n)| (p, *n)).collect();
            let aggregated = fedavg(&clf_updates)?;
            self.global.params.check_same_architecture(&aggregated)?;
            self.global.params = aggregated;

            let last_round = r + 1 == self.cfg.rounds_per_task;
            if self.cfg.strategy.use_vae && (self.cfg.aggregate_vae_every_round || last_round) {
                let vae_updates: Vec<(&ParamVector, usize)> = collected
                    .iter()
                    .filter_map(|(_, v, n)| v.as_ref().map(|pv| (pv, *n)))
                    .collect();
                if !vae_updates.is_empty() {
                    self.vae.apply_param_vector(&aggregate_vae(&vae_updates)?)?;
                }
            }
        }
        report.classifier_norm = self.global.params.l2_norm();
        report.vae_norm = self.vae.to_param_vector().l2_norm();
        self.rounds.push(report);
        Ok(())
    }

    fn finish_task(&mut self, t: usize, data: &BTreeMap<ClientId, Vec<Sample>>) -> Result<()> {
        let assignment = self.assignment.as_ref().expect("begin_task ran");
        let holders: Vec<ClientId> = assignment.current_holders().into_iter().collect();

        for &id in &holders {
            let state = self.clients.get_mut(&id).expect("holder exists");
            if self.cfg.strategy.method.uses_memory() {
                state.flush_reservoir_to_store()?;
                state.store.promote_summary()?;
            }
            if matches!(self.cfg.strategy.method, crate::client::Method::Ewc) {
                if let Some(samples) = data.get(&id) {
                    if !samples.is_empty() {
                        let refs: Vec<&Sample> = samples.iter().collect();
                        let fisher =
                            diagonal_fisher(&self.global, &refs, self.cfg.strategy.batch_n)?;
                        state.fisher = Some(FisherInfo {
                            fisher,
                            theta_star: self.global.params.clone(),
                        });
                    }
                }
            }
            state.cond = None;
        }

        self.teacher = Some(self.global.clone());

        let mut row = Vec::with_capacity(t + 1);
        for j in 0..=t {
            row.push(self.evaluate_task(&self.global, j)?);
        }
        self.matrix.push_row(row, self.test_size_of(t))?;
        Ok(())
    }

    fn test_size_of(&self, t: usize) -> usize {
        let classes = self.schedule.classes(t);
        self.test
            .samples
            .iter()
            .filter(|s| classes.binary_search(&s.label).is_ok())
            .count()
    }

    /// Accuracy of `model` on task `j`'s test samples (slot-labeled argmax).
    fn evaluate_task(&self, model: &Backbone, j: usize) -> Result<f64> {
        let classes = self.schedule.classes(j);
        let idxs: Vec<usize> = self
            .test
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| classes.binary_search(&s.label).is_ok())
            .map(|(i, _)| i)
            .collect();
        if idxs.is_empty() {
            return Err(Error::invalid(
                "test",
                format!("no test samples for task {j}"),
            ));
        }
        let mut correct = 0usize;
        for chunk in idxs.chunks(64) {
            let batch = ImageBatch::stack(
                self.test.shape,
                chunk.iter().map(|&i| {
                    let s = &self.test.samples[i];
                    (&s.pixels, self.class_slot[&s.label], Origin::Real)
                }),
            );
            let logits = model.logits(&batch)?;
            for (i, &label) in batch.labels.iter().enumerate() {
                if argmax(logits.row(i)) == label {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / idxs.len() as f64)
    }

    fn exemplar_banks(&self) -> BTreeMap<ClientId, Vec<(Tensor, usize)>> {
        self.clients
            .iter()
            .filter(|(_, s)| !s.store.cond().is_empty())
            .map(|(&id, s)| {
                (
                    id,
                    s.store
                        .cond()
                        .iter()
                        .map(|e| (e.pixels.clone(), e.label))
                        .collect(),
                )
            })
            .collect()
    }

    /// Pairwise histogram divergence plus the rehearsal-loss gap between the
    /// actual exemplar partition and an IID reshuffle of the same exemplars.
    fn heterogeneity(&self) -> Result<Option<HeterogeneityReport>> {
        let banks = self.exemplar_banks();
        if banks.len() < 2 {
            return Ok(None);
        }
        let hists: BTreeMap<ClientId, BTreeMap<usize, usize>> = banks
            .iter()
            .map(|(&id, bank)| {
                let mut h = BTreeMap::new();
                for (_, label) in bank {
                    *h.entry(*label).or_insert(0usize) += 1;
                }
                (id, h)
            })
            .collect();
        let ids: Vec<ClientId> = hists.keys().copied().collect();
        let mut pairwise = Vec::new();
        let mut sum = 0.0;
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let kl = symmetric_kl(&hists[&ids[i]], &hists[&ids[j]]);
                sum += kl;
                pairwise.push(PairwiseKl {
                    client_a: ids[i].0,
                    client_b: ids[j].0,
                    kl,
                });
            }
        }
        let mean_kl = sum / pairwise.len() as f64;

        let actual = self.rehearsal_epoch(&banks)?;
        let union: Vec<(Tensor, usize)> = banks.values().flatten().cloned().collect();
        let mut shuffled = union.clone();
        {
            let mut r = rng::rng(self.cfg.seed, &[domain::HETERO_SHUFFLE]);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rand::Rng::random_range(&mut r, 0..=i));
            }
        }
        let mut iid_banks: BTreeMap<ClientId, Vec<(Tensor, usize)>> = BTreeMap::new();
        let mut cursor = 0;
        for (&id, bank) in &banks {
            iid_banks.insert(id, shuffled[cursor..cursor + bank.len()].to_vec());
            cursor += bank.len();
        }
        let iid = self.rehearsal_epoch(&iid_banks)?;
        let union_batch = stack_bank(&union, self.cfg.input);
        let delta_loss = ce_loss(&actual, &union_batch)? - ce_loss(&iid, &union_batch)?;
        Ok(Some(HeterogeneityReport {
            pairwise,
            mean_kl,
            delta_loss,
        }))
    }

    /// Several full-bank CE steps per client, aggregated by bank size. At
    /// least two steps per client: with exactly one, the size-weighted mean
    /// of per-bank mean gradients equals the union's mean gradient, so the
    /// aggregate would be identical for every partition and the loss gap
    /// would read zero no matter how skewed the banks are.
    fn rehearsal_epoch(&self, banks: &BTreeMap<ClientId, Vec<(Tensor, usize)>>) -> Result<Backbone> {
        let steps = self.cfg.strategy.epochs.max(2);
        let mut locals: Vec<(ParamVector, usize)> = Vec::new();
        for bank in banks.values() {
            if bank.is_empty() {
                continue;
            }
            let mut model = self.global.clone();
            let batch = stack_bank(bank, self.cfg.input);
            for _ in 0..steps {
                let mut g = Graph::new();
                let bound = model.bind(&mut g);
                let px = g.leaf(batch.pixels.clone());
                let out = model.forward(&mut g, &bound, px, batch.len());
                let loss = g.cross_entropy_mean(out.logits, &batch.labels);
                let names: Vec<String> = model.params.names().map(str::to_string).collect();
                let ids: Vec<_> = names.iter().map(|n| bound.node(n)).collect();
                let grads = g.backward(loss, &ids);
                for (name, grad) in names.iter().zip(&grads) {
                    if let Some(gn) = grad {
                        let gt = g.value(*gn).clone();
                        model.params.get_mut(name).unwrap().axpy(-self.cfg.strategy.lr, &gt);
                    }
                }
            }
            locals.push((model.params, bank.len()));
        }
        let refs: Vec<(&ParamVector, usize)> = locals.iter().map(|(p, n)| (p, *n)).collect();
        let mut out = self.global.clone();
        out.params = fedavg(&refs)?;
        Ok(out)
    }
}

fn stack_bank(bank: &[(Tensor, usize)], shape: ImageShape) -> ImageBatch {
    ImageBatch::stack(
        shape,
        bank.iter().map(|(px, label)| (px, *label, Origin::Condensed)),
    )
}

fn ce_loss(model: &Backbone, batch: &ImageBatch) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let px = g.leaf(batch.pixels.clone());
    let out = model.forward(&mut g, &bound, px, batch.len());
    let loss = g.cross_entropy_mean(out.logits, &batch.labels);
    Ok(g.value(loss).item())
}

/// Splits `clf.`/`vae.`-prefixed tensors back into separate vectors.
fn split_prefixed(tensors: Vec<(String, Tensor)>) -> Result<(ParamVector, ParamVector)> {
    let mut clf = Vec::new();
    let mut vae = Vec::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("clf.") {
            clf.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("vae.") {
            vae.push((rest.to_string(), t));
        } else {
            return Err(Error::Format(format!("unprefixed tensor `{name}`")));
        }
    }
    Ok((ParamVector::new(clf), ParamVector::new(vae)))
}

/// Pushes a client update through the wire format and back, mirroring what a
/// real transport would do; parameters come back f32-quantized.
fn roundtrip_update(
    t: usize,
    r: usize,
    update: ClientUpdate,
) -> Result<(ParamVector, Option<ParamVector>, usize, crate::client::LossReport)> {
    let mut tensors: Vec<(String, Tensor)> = update
        .params
        .iter()
        .map(|(n, v)| (format!("clf.{n}"), v.clone()))
        .collect();
    if let Some(vp) = &update.vae_params {
        for (n, v) in vp.iter() {
            tensors.push((format!("vae.{n}"), v.clone()));
        }
    }
    let msg = RoundMessage {
        header: RoundHeader {
            round: r,
            task: t,
            client_id: update.client_id.0,
            n_l: update.n_l,
        },
        tensors,
    };
    let decoded = RoundMessage::decode(&msg.encode()?)?;
    let n_l = decoded.header.n_l;
    let (clf, vae) = split_prefixed(decoded.tensors)?;
    let vae = if update.vae_params.is_some() {
        Some(vae)
    } else {
        None
    };
    Ok((clf, vae, n_l, update.report))
}

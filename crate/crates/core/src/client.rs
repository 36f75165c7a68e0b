//! Client-side local training.
//!
//! One call trains a copy of the broadcast model for E epochs on the client's
//! current-task data plus replayed memory, following the selected strategy:
//! `ecoral` (condensation + distillation), `replay` (real-image rehearsal),
//! `lwf` (distillation only), or `ewc` (quadratic parameter anchoring). The
//! condensation network and the memory store live in the per-client state;
//! the classifier update is returned by value for server aggregation.

use crate::condense::{condense_step, CondensationState, CondenseConfig};
use crate::dataset::{ImageBatch, ImageShape, Origin, Sample};
use crate::error::{Error, Result};
use crate::groups::ClientId;
use crate::kd::{kd_loss, KdConfig};
use crate::memory::MemoryStore;
use crate::model::{Backbone, BoundParams, ParamVector};
use crate::proto::PrototypeSet;
use crate::rng::{self, domain};
use crate::tensor::Tensor;
use crate::vae::{SharedVae, VaeConfig};
use crate::autodiff::{Graph, NodeId};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ecoral,
    Replay,
    Lwf,
    Ewc,
}

impl Method {
    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "ecoral" => Ok(Method::Ecoral),
            "replay" => Ok(Method::Replay),
            "lwf" => Ok(Method::Lwf),
            "ewc" => Ok(Method::Ewc),
            other => Err(Error::invalid(
                "method",
                format!("unknown method `{other}`; expected ecoral|replay|lwf|ewc"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ecoral => "ecoral",
            Method::Replay => "replay",
            Method::Lwf => "lwf",
            Method::Ewc => "ewc",
        }
    }

    pub fn uses_memory(&self) -> bool {
        matches!(self, Method::Ecoral | Method::Replay)
    }

    pub fn uses_kd(&self) -> bool {
        matches!(self, Method::Ecoral | Method::Lwf)
    }

    pub fn uses_condensation(&self) -> bool {
        matches!(self, Method::Ecoral)
    }
}

/// Local-training hyperparameters. The distillation weight and the memory
/// replay weight are separate knobs that happen to share a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub method: Method,
    pub lr: f64,
    pub lambda_kd: f64,
    pub lambda_mem: f64,
    pub kd_temperature: f64,
    pub ewc_factor: f64,
    pub epochs: usize,
    pub batch_n: usize,
    pub batch_m: usize,
    pub condense: CondenseConfig,
    pub use_vae: bool,
    pub vae_lr: f64,
    /// Re-split the per-class quota as new classes arrive; when false the
    /// quota is fixed up front from the experiment's total class count.
    pub adjustable_memory: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            method: Method::Ecoral,
            lr: 0.003,
            lambda_kd: 3.0,
            lambda_mem: 3.0,
            kd_temperature: 2.0,
            ewc_factor: 300.0,
            epochs: 30,
            batch_n: 32,
            batch_m: 32,
            condense: CondenseConfig::default(),
            use_vae: true,
            vae_lr: 0.01,
            adjustable_memory: true,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(self.kd_temperature > 0.0) {
            return Err(Error::invalid("kd_temperature", "must be positive"));
        }
        for (name, v) in [
            ("lambda_kd", self.lambda_kd),
            ("lambda_mem", self.lambda_mem),
            ("ewc_factor", self.ewc_factor),
        ] {
            if !(v >= 0.0) {
                return Err(Error::invalid(name, "must be non-negative"));
            }
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_n == 0 || self.batch_m == 0 {
            return Err(Error::invalid("batch_n/batch_m", "must be at least 1"));
        }
        if self.use_vae && !(self.vae_lr > 0.0) {
            return Err(Error::invalid("vae_lr", "must be positive"));
        }
        self.condense.validate()
    }
}

/// Diagonal Fisher information plus the anchor parameters it was taken at.
#[derive(Debug, Clone)]
pub struct FisherInfo {
    pub fisher: ParamVector,
    pub theta_star: ParamVector,
}

/// Per-class reservoir of real images for the replay baseline.
#[derive(Debug, Clone, Default)]
struct ClassReservoir {
    seen: usize,
    images: Vec<Tensor>,
}

impl ClassReservoir {
    fn admit(&mut self, pixels: &Tensor, cap: usize, r: &mut impl Rng) {
        self.seen += 1;
        if self.images.len() < cap {
            self.images.push(pixels.clone());
        } else if cap > 0 {
            let j = r.random_range(0..self.seen);
            if j < cap {
                self.images[j] = pixels.clone();
            }
        }
    }
}

/// One condensation trace sample (per current-task batch).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub task: usize,
    pub round: usize,
    pub l_cond: f64,
    pub l_rel: f64,
    pub l_mkcl: f64,
    pub l_total: f64,
}

/// Mean losses over all local batches of one training call.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub task_loss: f64,
    pub memory_loss: f64,
    pub total_loss: f64,
    pub batches: usize,
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: ClientId,
    pub n_l: usize,
    pub params: ParamVector,
    pub vae_params: Option<ParamVector>,
    pub report: LossReport,
}

/// Long-lived per-client state. The classifier itself is not stored here; a
/// fresh copy arrives with every broadcast.
#[derive(Debug)]
pub struct ClientState {
    pub id: ClientId,
    pub store: MemoryStore,
    pub vae: SharedVae,
    pub fisher: Option<FisherInfo>,
    pub cond: Option<CondensationState>,
    pub trace: Vec<TraceRow>,
    reservoir: BTreeMap<usize, ClassReservoir>,
    step: usize,
}

impl ClientState {
    pub fn new(
        id: ClientId,
        memory_budget: usize,
        shape: ImageShape,
        vae_cfg: VaeConfig,
        vae_seed: u64,
    ) -> Result<Self> {
        Ok(ClientState {
            id,
            store: MemoryStore::new(memory_budget, shape)?,
            vae: SharedVae::new(vae_cfg, vae_seed)?,
            fisher: None,
            cond: None,
            trace: Vec::new(),
            reservoir: BTreeMap::new(),
            step: 0,
        })
    }

    /// Moves the replay baseline's reservoir images into the summary tier and
    /// clears the reservoir. Quota overflow drops the surplus silently.
    pub fn flush_reservoir_to_store(&mut self) -> Result<()> {
        let reservoir = std::mem::take(&mut self.reservoir);
        for (class, res) in reservoir {
            for pixels in res.images {
                if !self.store.admit_exemplar(pixels, class, Origin::Real)? {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Broadcast-side inputs for one local training call.
pub struct LocalTrainContext<'a> {
    pub task: usize,
    pub round: usize,
    /// Global classifier as decoded from the broadcast.
    pub model: &'a Backbone,
    /// Frozen snapshot from the previous task, if any.
    pub teacher: Option<&'a Backbone>,
    /// Class count through the previous task (the distilled logit slice).
    pub old_classes: usize,
    pub prototypes: Option<&'a PrototypeSet>,
}

/// Quadratic anchoring penalty Σ_i F_i (θ_i − θ*_i)², built in-graph so its
/// gradient flows to the bound parameters.
pub fn ewc_penalty_node(
    g: &mut Graph,
    model: &Backbone,
    bound: &BoundParams,
    info: &FisherInfo,
) -> Result<NodeId> {
    info.fisher.check_same_architecture(&info.theta_star)?;
    let mut acc: Option<NodeId> = None;
    for (name, star_t) in info.theta_star.iter() {
        let cur = model
            .params
            .get(name)
            .ok_or_else(|| Error::invalid("theta_star", format!("unknown parameter {name}")))?;
        // Head parameters may have grown columns since the anchor was taken;
        // only the columns that existed then are pulled back.
        let theta = bound.node(name);
        let theta = if cur.shape() == star_t.shape() {
            theta
        } else if cur.shape().len() == 2
            && star_t.shape().len() == 2
            && cur.shape()[0] == star_t.shape()[0]
            && cur.shape()[1] > star_t.shape()[1]
        {
            g.slice_cols(theta, 0, star_t.shape()[1])
        } else {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", star_t.shape()),
                got: format!("{:?}", cur.shape()),
            });
        };
        let star = g.leaf(star_t.clone());
        let star = g.stop_grad(star);
        let fisher = g.leaf(info.fisher.get(name).expect("same architecture").clone());
        let fisher = g.stop_grad(fisher);
        let d = g.sub(theta, star);
        let d2 = g.mul(d, d);
        let weighted = g.mul(fisher, d2);
        let s = g.sum_all(weighted);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s),
        });
    }
    acc.ok_or_else(|| Error::invalid("params", "model has no parameters"))
}

/// Diagonal Fisher estimate: mean over batches of the squared CE gradient.
pub fn diagonal_fisher(model: &Backbone, data: &[&Sample], batch: usize) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::invalid("data", "fisher needs at least one sample"));
    }
    if batch == 0 {
        return Err(Error::invalid("batch", "must be at least 1"));
    }
    let mut fisher = model.params.zeros_like();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut batches = 0usize;
    for chunk in data.chunks(batch) {
        let b = ImageBatch::from_samples(model.input, chunk);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let px = g.leaf(b.pixels.clone());
        let out = model.forward(&mut g, &bound, px, b.len());
        let loss = g.cross_entropy_mean(out.logits, &b.labels);
        let ids: Vec<NodeId> = names.iter().map(|n| bound.node(n)).collect();
        let grads = g.backward(loss, &ids);
        for (name, grad) in names.iter().zip(&grads) {
            if let Some(gn) = grad {
                let gt = g.value(*gn);
                let acc = fisher.get_mut(name).expect("same names");
                for (a, &v) in acc.data_mut().iter_mut().zip(gt.data()) {
                    *a += v * v;
                }
            }
        }
        batches += 1;
    }
    fisher.scale_in_place(1.0 / batches as f64);
    Ok(fisher)
}

fn image_of(batch: &ImageBatch, i: usize) -> Tensor {
    let rows = batch.shape.rows_per_image();
    Tensor::new(
        vec![rows, batch.shape.channels],
        (i * rows..(i + 1) * rows)
            .flat_map(|r| batch.pixels.row(r).to_vec())
            .collect(),
    )
}

/// Fills any unmet per-class summary quota with copies of random real images
/// from the batch; later condensation steps reshape them in place.
fn seed_summaries_from_batch(
    store: &mut MemoryStore,
    batch: &ImageBatch,
    r: &mut impl Rng,
) -> Result<()> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in batch.labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let quota = store.quota();
    for (&class, idx) in &by_class {
        let have = store.summary_indices_of_class(class).len();
        if have >= quota {
            continue;
        }
        let mut pool = idx.clone();
        pool.shuffle(r);
        for &i in pool.iter().take(quota - have) {
            if !store.admit_exemplar(image_of(batch, i), class, Origin::Condensed)? {
                break;
            }
        }
    }
    Ok(())
}

/// One SGD step of the joint objective on `model`, returning (task, memory,
/// total) loss values. `b_n` may be None for memory-only participants.
#[allow(clippy::too_many_arguments)]
fn joint_step(
    model: &mut Backbone,
    b_n: Option<&ImageBatch>,
    b_m: Option<&ImageBatch>,
    ctx: &LocalTrainContext,
    fisher: Option<&FisherInfo>,
    cfg: &StrategyConfig,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);

    let mut total: Option<NodeId> = None;
    let mut task_val = 0.0;
    let mut mem_val = 0.0;

    if let Some(b) = b_n {
        let px = g.leaf(b.pixels.clone());
        let out = model.forward(&mut g, &bound, px, b.len());
        let use_kd = cfg.method.uses_kd()
            && ctx.old_classes > 0
            && cfg.lambda_kd > 0.0
            && ctx.teacher.is_some();
        let task_loss = if use_kd {
            let teacher = ctx.teacher.expect("checked above");
            let t_logits = teacher.logits(b)?;
            let t_node = g.leaf(t_logits);
            kd_loss(
                &mut g,
                out.logits,
                t_node,
                &b.labels,
                &KdConfig {
                    lambda: cfg.lambda_kd,
                    temperature: cfg.kd_temperature,
                    old_classes: ctx.old_classes,
                },
            )?
        } else {
            g.cross_entropy_mean(out.logits, &b.labels)
        };
        task_val = g.value(task_loss).item();
        total = Some(task_loss);
    }

    if let Some(m) = b_m {
        let px = g.leaf(m.pixels.clone());
        let out = model.forward(&mut g, &bound, px, m.len());
        let mem_ce = g.cross_entropy_mean(out.logits, &m.labels);
        mem_val = g.value(mem_ce).item();
        // Memory-only participants take the replay loss unweighted.
        let node = if total.is_some() {
            g.scale(mem_ce, cfg.lambda_mem)
        } else {
            mem_ce
        };
        total = Some(match total {
            Some(t) => g.add(t, node),
            None => node,
        });
    }

    if matches!(cfg.method, Method::Ewc) {
        if let Some(info) = fisher {
            let pen = ewc_penalty_node(&mut g, model, &bound, info)?;
            let weighted = g.scale(pen, cfg.ewc_factor);
            total = Some(match total {
                Some(t) => g.add(t, weighted),
                None => weighted,
            });
        }
    }

    let total = total.ok_or(Error::ClientSkip { client: usize::MAX })?;
    let total_val = g.value(total).item();

    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let ids: Vec<NodeId> = names.iter().map(|n| bound.node(n)).collect();
    let grads = g.backward(total, &ids);
    for (name, grad) in names.iter().zip(&grads) {
        if let Some(gn) = grad {
            let gt = g.value(*gn).clone();
            model.params.get_mut(name).unwrap().axpy(-cfg.lr, &gt);
        }
    }
    if !model.params.all_finite() {
        return Err(Error::invalid("params", "non-finite after local step"));
    }
    Ok((task_val, mem_val, total_val))
}

/// Trains a copy of the broadcast classifier for `cfg.epochs` epochs and
/// returns the update. `data` holds the client's current-task samples; empty
/// data falls back to memory-only training (old-group participation).
pub fn client_local_train(
    ctx: &LocalTrainContext,
    state: &mut ClientState,
    data: &[&Sample],
    cfg: &StrategyConfig,
    seed: u64,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    if data.is_empty() && state.store.stored() == 0 {
        return Err(Error::ClientSkip {
            client: state.id.0,
        });
    }
    let mut model = ctx.model.clone();
    let mut r = rng::rng(
        seed,
        &[
            domain::CLIENT_TRAIN,
            ctx.task as u64,
            ctx.round as u64,
            state.id.0 as u64,
        ],
    );
    let shape = model.input;
    let mut report = LossReport::default();

    for _epoch in 0..cfg.epochs {
        let batches: Vec<Option<Vec<usize>>> = if data.is_empty() {
            vec![None]
        } else {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut r);
            order.chunks(cfg.batch_n).map(|c| Some(c.to_vec())).collect()
        };
        for chunk in batches {
            let b_n = chunk.map(|idx| {
                let picked: Vec<&Sample> = idx.iter().map(|&i| data[i]).collect();
                ImageBatch::from_samples(shape, &picked)
            });

            if let Some(b) = &b_n {
                if cfg.method.uses_condensation() {
                    seed_summaries_from_batch(&mut state.store, b, &mut r)?;
                    let cond = state.cond.as_mut().ok_or_else(|| {
                        Error::invalid("cond", "condensation state missing at task start")
                    })?;
                    let rep = condense_step(
                        cond,
                        &mut state.store,
                        b,
                        ctx.prototypes,
                        &cfg.condense,
                        &mut r,
                    )?;
                    state.trace.push(TraceRow {
                        step: state.step,
                        task: ctx.task,
                        round: ctx.round,
                        l_cond: rep.l_cond,
                        l_rel: rep.l_rel,
                        l_mkcl: rep.l_mkcl,
                        l_total: rep.l_total,
                    });
                }
                if matches!(cfg.method, Method::Replay) {
                    let cap = state.store.quota();
                    for (i, &label) in b.labels.iter().enumerate() {
                        let img = image_of(b, i);
                        state
                            .reservoir
                            .entry(label)
                            .or_default()
                            .admit(&img, cap, &mut r);
                    }
                }
            }

            let b_m = if cfg.method.uses_memory() {
                let drawn = state.store.sample_replay(cfg.batch_m, &mut r);
                if drawn.is_empty() {
                    None
                } else {
                    Some(ImageBatch::stack(
                        shape,
                        drawn.iter().map(|s| (&s.pixels, s.label, s.origin)),
                    ))
                }
            } else {
                None
            };

            let (task_val, mem_val, total_val) = joint_step(
                &mut model,
                b_n.as_ref(),
                b_m.as_ref(),
                ctx,
                state.fisher.as_ref(),
                cfg,
            )?;
            report.task_loss += task_val;
            report.memory_loss += mem_val;
            report.total_loss += total_val;
            report.batches += 1;
            state.step += 1;

            if cfg.method.uses_condensation() && cfg.use_vae {
                if let Some(b) = &b_n {
                    let feats = model.extract_features(b)?;
                    state.vae.train_step(&feats, &b.labels, cfg.vae_lr, &mut r)?;
                }
            }
        }
    }

    if report.batches > 0 {
        let n = report.batches as f64;
        report.task_loss /= n;
        report.memory_loss /= n;
        report.total_loss /= n;
    }
    let n_l = if data.is_empty() {
        state.store.stored()
    } else {
        data.len()
    };
    let vae_params = (cfg.method.uses_condensation() && cfg.use_vae)
        .then(|| state.vae.to_param_vector());
    Ok(ClientUpdate {
        client_id: state.id,
        n_l,
        params: model.params,
        vae_params,
        report,
    })
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::checkpoint::{named_parameters, save_checkpoint, Checkpoint, RngState};
use super::regularize::regularized_loss_graph;
use crate::data::{distinct_patches, materialize, plan_patches, Dataset, SamplerConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::net::{Network, ParamKind};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Element, Graph, NodeId, Tensor4};

/// How per-pixel squared residuals of a batch become the data loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Mean over every element of the batch.
    Mean,
    /// Sum over every element of the batch.
    Sum,
    /// Euclidean norm of the batch residual, `‖y − F(x)‖₂`.
    #[default]
    Norm,
}

impl std::fmt::Display for LossReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossReduction::Mean => "mean",
            LossReduction::Sum => "sum",
            LossReduction::Norm => "norm",
        })
    }
}

impl std::str::FromStr for LossReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum" => Ok(LossReduction::Sum),
            "norm" => Ok(LossReduction::Norm),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss reduction `{other}` (expected mean, sum or norm)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Target iteration count; a resumed run stops at the same total.
    pub iterations: u64,
    pub loss: LossReduction,
    pub l2_scale: f64,
    pub l2_biases: bool,
    pub init_std: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Distinct patches pushed through the network at once. Only affects
    /// memory use and summation order.
    pub micro_batch: usize,
    pub adam: AdamConfig,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 200_000,
            loss: LossReduction::Norm,
            l2_scale: 2.5e-5,
            l2_biases: false,
            init_std: 0.02,
            seed: 0,
            eval_every: 1_000,
            checkpoint_every: 10_000,
            micro_batch: 16,
            adam: AdamConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::InvalidArgument(format!("{field}: {why}")));
        if self.iterations == 0 {
            return bad("iterations", "must be ≥ 1".into());
        }
        if self.eval_every == 0 || self.eval_every > self.iterations {
            return bad(
                "eval_every",
                format!("{} must lie in 1..={}", self.eval_every, self.iterations),
            );
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be ≥ 1".into());
        }
        if self.micro_batch == 0 {
            return bad("micro_batch", "must be ≥ 1".into());
        }
        if self.sampler.batch_size == 0 {
            return bad("batch_size", "must be ≥ 1".into());
        }
        if !(self.l2_scale >= 0.0 && self.l2_scale.is_finite()) {
            return bad("l2_scale", format!("{} must be finite and ≥ 0", self.l2_scale));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std", format!("{} must be positive", self.init_std));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return bad("lr", format!("{} must be positive", a.lr));
        }
        for (field, beta) in [("beta1", a.beta1), ("beta2", a.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return bad(field, format!("{beta} must lie in [0, 1)"));
            }
        }
        if a.epsilon.is_nan() || a.epsilon <= 0.0 {
            return bad("epsilon", format!("{} must be positive", a.epsilon));
        }
        let s = &self.sampler;
        if !(0.0..=1.0).contains(&s.centered_fraction) {
            return bad(
                "centered_fraction",
                format!("{} must lie in [0, 1]", s.centered_fraction),
            );
        }
        if !(0.0..=1.0).contains(&s.flip_probability) {
            return bad("flip_probability", format!("{} must lie in [0, 1]", s.flip_probability));
        }
        if let Some((lo, hi)) = s.gamma_range {
            if !(lo > 0.0 && lo <= hi) {
                return bad("gamma_range", format!("{lo}..{hi} must be a positive, nonempty range"));
            }
        }
        Ok(())
    }
}

/// One row of the metric trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: u64,
    /// Regularized objective on that iteration's batch, before the update.
    pub loss: f64,
    pub val_mae: Option<f64>,
}

pub const TRACE_HEADER: &str = "iter,loss,val_mae";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::with_capacity(32 * (rows.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},", r.iter, r.loss);
        if let Some(v) = r.val_mae {
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    fs::write(path, trace_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration}.gunc"))
}

/// Resumable training state.
pub struct Trainer<T> {
    net: Network<T>,
    adam: AdamState<T>,
    iteration: u64,
    trace: Vec<TraceRow>,
    cfg: TrainConfig,
}

impl<T: Element> Trainer<T> {
    pub fn new(net: Network<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::for_network(cfg.adam, &net);
        Ok(Trainer {
            net,
            adam,
            iteration: 0,
            trace: Vec::new(),
            cfg,
        })
    }

    /// Continues from a checkpoint. The seed and optimizer settings stored
    /// in the checkpoint take precedence over `cfg`.
    pub fn resume(ckpt: Checkpoint<T>, mut cfg: TrainConfig) -> Result<Self> {
        if ckpt.rng.next_index != ckpt.iteration {
            return Err(Error::InvalidArgument(format!(
                "checkpoint at iteration {} has its sampling stream at {}",
                ckpt.iteration, ckpt.rng.next_index
            )));
        }
        cfg.seed = ckpt.rng.seed;
        cfg.adam = ckpt.adam.config;
        cfg.validate()?;
        Ok(Trainer {
            net: ckpt.network()?,
            adam: ckpt.adam,
            iteration: ckpt.iteration,
            trace: ckpt.trace,
            cfg,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            spec: self.net.spec().clone(),
            iteration: self.iteration,
            rng: RngState {
                seed: self.cfg.seed,
                next_index: self.iteration,
            },
            parameters: named_parameters(&self.net),
            adam: self.adam.clone(),
            trace: self.trace.clone(),
            train_config: Some(self.cfg.clone()),
        }
    }

    /// One optimization step; returns the objective before the update.
    ///
    /// Duplicate patches in the sampled batch are evaluated once and
    /// weighted by their multiplicity, which leaves loss and gradient
    /// unchanged.
    pub fn step(&mut self, train: &Dataset) -> Result<f64> {
        let index = self.iteration;
        let cfg = &self.cfg;
        let mut rng = stream_rng(cfg.seed, Stream::Sampling, index);
        let mut aug = stream_rng(cfg.seed, Stream::Augment, index);
        let plan = plan_patches(train, &cfg.sampler, &mut rng, &mut aug)?;
        let (unique, counts) = distinct_patches(&plan);
        let total_patches = plan.len() as f64;
        let sample_len = (cfg.sampler.patch_side * cfg.sampler.patch_side) as f64;
        let weight = |m: usize| match cfg.loss {
            LossReduction::Mean => m as f64 / total_patches,
            LossReduction::Sum | LossReduction::Norm => m as f64 * sample_len,
        };

        // data term: Σ over micro-batches, gradients accumulated in place
        let mut grads: Vec<Tensor4<T>> = Vec::new();
        let mut data = 0.0;
        for (chunk, mult) in unique.chunks(cfg.micro_batch).zip(counts.chunks(cfg.micro_batch)) {
            let batch = materialize::<T>(train, chunk, cfg.sampler.patch_side)?;
            let mut g = Graph::new();
            let x = g.leaf(batch.images);
            let target = g.leaf(batch.targets);
            let nodes = self.net.forward_graph(&mut g, x)?;
            let weights = mult.iter().map(|&m| T::of(weight(m))).collect();
            let loss = g.weighted_mse(nodes.output, target, weights)?;
            data += g.value(loss).data()[0].f64();
            if !data.is_finite() {
                return Err(Error::Diverged {
                    iteration: index + 1,
                    loss: data,
                });
            }
            g.backward(loss)?;
            accumulate(&mut grads, &g, &nodes.params);
        }
        if cfg.loss == LossReduction::Norm {
            let norm = data.sqrt();
            let factor = if norm > 0.0 { T::of(0.5 / norm) } else { T::zero() };
            grads
                .iter_mut()
                .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = *v * factor));
            data = norm;
        }

        // weight penalty on its own small tape
        let mut g = Graph::new();
        let zero = g.leaf(Tensor4::scalar(T::zero()));
        let leaves: Vec<(NodeId, ParamKind)> = self
            .net
            .parameters()
            .into_iter()
            .map(|p| (g.leaf(p.value.clone()), p.kind))
            .collect();
        let penalty = regularized_loss_graph(&mut g, zero, &leaves, cfg.l2_scale, cfg.l2_biases)?;
        let objective = data + g.value(penalty).data()[0].f64();
        if !objective.is_finite() {
            return Err(Error::Diverged {
                iteration: index + 1,
                loss: objective,
            });
        }
        if penalty != zero {
            g.backward(penalty)?;
            let ids: Vec<NodeId> = leaves.iter().map(|&(id, _)| id).collect();
            accumulate(&mut grads, &g, &ids);
        }

        adam_step(&mut self.net, &grads, &mut self.adam)?;
        self.iteration += 1;
        Ok(objective)
    }

    /// Runs until `cfg.iterations`, validating every `eval_every` steps and,
    /// when `out_dir` is given, writing `ckpt_<iter>.gunc` every
    /// `checkpoint_every` steps and at the end, plus `trace.csv`.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        out_dir: Option<&Path>,
        mut progress: impl FnMut(&TraceRow),
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("training split has no images".into()));
        }
        let val = val.filter(|v| !v.is_empty());
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let eval_opts = EvalOptions {
            game_max: 0,
            ..EvalOptions::default()
        };
        while self.iteration < self.cfg.iterations {
            let loss = match self.step(train) {
                Ok(loss) => loss,
                Err(e) => {
                    if let Some(dir) = out_dir {
                        write_trace_csv(&dir.join("trace.csv"), &self.trace)?;
                    }
                    return Err(e);
                }
            };
            let iter = self.iteration;
            let val_mae = match val {
                Some(v) if iter.is_multiple_of(self.cfg.eval_every) => {
                    Some(evaluate(&mut self.net, v, &eval_opts)?.mae)
                }
                _ => None,
            };
            let row = TraceRow { iter, loss, val_mae };
            progress(&row);
            self.trace.push(row);
            if let Some(dir) = out_dir {
                if iter.is_multiple_of(self.cfg.checkpoint_every) || iter == self.cfg.iterations {
                    save_checkpoint(&checkpoint_path(dir, iter), &self.checkpoint())?;
                    write_trace_csv(&dir.join("trace.csv"), &self.trace)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(acc: &mut Vec<Tensor4<T>>, g: &Graph<T>, leaves: &[NodeId]) {
    for (i, &id) in leaves.iter().enumerate() {
        let grad = g.grad(id).expect("backward fills every leaf gradient");
        match acc.get_mut(i) {
            None => acc.push(grad.clone()),
            Some(a) => a.data_mut().iter_mut().zip(grad.data()).for_each(|(x, &y)| *x = *x + y),
        }
    }
}

pub struct TrainOutcome<T> {
    pub net: Network<T>,
    pub trace: Vec<TraceRow>,
}

/// Trains `net` from scratch on `train`.
pub fn train<T: Element>(
    net: Network<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(net, cfg.clone())?;
    trainer.run(train, val, out_dir, |_| {})?;
    let trace = trainer.trace.clone();
    Ok(TrainOutcome {
        net: trainer.into_network(),
        trace,
    })
}

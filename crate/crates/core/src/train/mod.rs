//! Training loops: global BP, plain layer-wise, layer-wise with reforward,
//! and layer-wise with gradient reconciliation, plus a staged pipeline.

mod config;
mod pipeline;

pub use config::{HeadMode, Mode, Schedule, TrainConfig};
pub use pipeline::{pipeline_train, PipelineMode, StageSpan};

use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::dataio::Dataset;
use crate::diff::{softmax_ce_value, DiffError, Tape, Tensor};
use crate::localnet::{module_local_step, HeadSpec, LocalModule, NetError, Network, SgrSettings};
use crate::rng::{derive, seeded};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("pipeline: {0}")]
    Pipeline(String),
}

/// `v <- momentum v + (g + wd p)`, `p <- p - lr v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), DiffError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        p.same_shape(g)?;
        p.same_shape(v)?;
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *pi);
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

pub fn zero_velocity(m: &LocalModule) -> Vec<Tensor> {
    m.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
}

/// Mean cross-entropy and accuracy using the backbone and the last head.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64), TrainError> {
    const CHUNK: usize = 1024;
    let n = data.len();
    let (mut loss, mut correct) = (0.0, 0usize);
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let (x, y) = data.batch(&idx);
        let z = net.logits(&x)?;
        loss += softmax_ce_value(&z, &y)? * idx.len() as f64;
        for (i, &yi) in y.iter().enumerate() {
            let row = z.row(i);
            let arg = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            correct += (arg == yi) as usize;
        }
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Builds the network a config describes for `input_dim` features.
pub fn build_network(cfg: &TrainConfig, input_dim: usize, classes: usize) -> Result<Network, TrainError> {
    cfg.validate()?;
    let mut dims = vec![input_dim];
    dims.extend(std::iter::repeat_n(cfg.width, cfg.modules));
    let head = match cfg.head_mode {
        HeadMode::BpFree => HeadSpec::Etf,
        HeadMode::LocalBp => HeadSpec::Mlp {
            hidden: cfg.head_hidden,
        },
    };
    Ok(Network::build(&dims, cfg.layers_per_module, classes, head, cfg.seed)?)
}

/// What a module reports for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageRecord {
    pub local: f64,
    pub sgr: Option<f64>,
}

/// One module's share of a layer-wise sweep: local step, parameter update,
/// and the activation handed to the successor. Shared by the sequential
/// and pipelined loops so both perform identical arithmetic.
pub(crate) fn stage_step(
    module: &mut LocalModule,
    velocity: &mut [Tensor],
    x: &Tensor,
    y: &[usize],
    delta_pre: Option<&Tensor>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(Tensor, Tensor, StageRecord), TrainError> {
    let settings = SgrSettings {
        lambda: if cfg.mode == Mode::Sgr { cfg.lambda } else { 0.0 },
        normalize: cfg.normalize_deltas,
    };
    let step = module_local_step(module, x, y, delta_pre, settings)?;
    if lr != 0.0 {
        sgd_step(
            &mut module.params_mut(),
            &step.grads,
            velocity,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
    }
    module.delta_out = Some(step.delta_out.clone());
    let next = if cfg.mode == Mode::Reforward {
        module.forward(x)?
    } else {
        step.output
    };
    Ok((
        next,
        step.delta_out,
        StageRecord {
            local: step.record.local,
            sgr: step.record.sgr,
        },
    ))
}

/// One forward sweep of a batch through every module with per-module
/// updates. Modules with index `< frozen_below` are stepped with `lr = 0`.
pub fn local_sweep(
    net: &mut Network,
    velocity: &mut [Vec<Tensor>],
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    frozen_below: usize,
) -> Result<Vec<StageRecord>, TrainError> {
    Ok(sweep(net, velocity, x, y, cfg, lr, frozen_below, false)?.0)
}

/// [`local_sweep`], optionally returning the input each module trained on.
#[allow(clippy::too_many_arguments)]
fn sweep(
    net: &mut Network,
    velocity: &mut [Vec<Tensor>],
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    frozen_below: usize,
    keep_inputs: bool,
) -> Result<(Vec<StageRecord>, Vec<Tensor>), TrainError> {
    let mut h = x.clone();
    let mut delta: Option<Tensor> = None;
    let mut recs = Vec::with_capacity(net.len());
    let mut inputs = Vec::new();
    for (k, (m, v)) in net.modules.iter_mut().zip(velocity.iter_mut()).enumerate() {
        let rate = if k < frozen_below { 0.0 } else { lr };
        let (next, d, rec) = stage_step(m, v, &h, y, delta.as_ref(), cfg, rate)?;
        if keep_inputs {
            inputs.push(std::mem::replace(&mut h, next));
        } else {
            h = next;
        }
        delta = Some(d);
        recs.push(rec);
    }
    Ok((recs, inputs))
}

/// End-to-end backpropagation through every block into the last head.
pub fn global_step(
    net: &mut Network,
    velocity: &mut [Vec<Tensor>],
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64, TrainError> {
    let tape = Tape::new();
    let mut h = tape.leaf(x.clone());
    let bound: Vec<_> = net.modules.iter().map(|m| m.bind(&tape)).collect();
    for (m, p) in net.modules.iter().zip(&bound) {
        m.check_input(&h.value())?;
        h = m.block_forward_var(h, p)?;
    }
    let last = net.modules.last().unwrap();
    let loss = last
        .head_forward_var(h, bound.last().unwrap())?
        .softmax_cross_entropy(y)?;
    let value = loss.value().item();
    let k = net.len();
    // the last module's head parameters take part; earlier heads do not
    let wrt: Vec<_> = bound
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            let n = if i + 1 == k { p.vars.len() } else { 2 * net.modules[i].block.layers.len() };
            p.vars[..n].iter().copied()
        })
        .collect();
    let grads = tape.grad(loss, &wrt)?;
    if lr != 0.0 {
        let mut off = 0;
        for (i, (m, v)) in net.modules.iter_mut().zip(velocity.iter_mut()).enumerate() {
            let n = if i + 1 == k { v.len() } else { 2 * m.block.layers.len() };
            let mut ps = m.params_mut();
            sgd_step(&mut ps[..n], &grads[off..off + n], &mut v[..n], lr, cfg.momentum, cfg.weight_decay)?;
            off += n;
        }
    }
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Mean reconciliation loss of modules `2..=K` over the epoch's batches;
    /// empty in global-BP mode.
    pub sgr_per_layer: Vec<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn sgr_mean(&self) -> Option<f64> {
        (!self.sgr_per_layer.is_empty())
            .then(|| self.sgr_per_layer.iter().sum::<f64>() / self.sgr_per_layer.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub network: Network,
    /// Per-layer input-change probe series (layers `2..=K`), when requested.
    pub delta_probe: Option<Vec<Vec<f64>>>,
    /// Stage occupancy intervals of a pipelined run.
    pub stage_trace: Vec<StageSpan>,
}

impl TrainReport {
    pub fn final_test_acc(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.test_acc)
    }

    /// Mean of the layer-averaged reconciliation loss over the last quarter
    /// of epochs (at least one).
    pub fn late_sgr_mean(&self) -> Option<f64> {
        let n = self.epochs.len();
        let tail = &self.epochs[n - (n / 4).max(1).min(n)..];
        let v: Option<Vec<f64>> = tail.iter().map(|e| e.sgr_mean()).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Record the input-change probe `L_k(x'_{k-1}) - L_k(x_{k-1})`.
    pub probe: bool,
    /// Modules below this index never update.
    pub frozen_below: usize,
}

pub(crate) fn check_data(net: &Network, train: &Dataset, test: &Dataset) -> Result<(), TrainError> {
    if train.classes != net.classes() || test.classes != net.classes() {
        return Err(TrainError::Config(format!(
            "dataset has {} classes, heads have {}",
            train.classes,
            net.classes()
        )));
    }
    if train.dim() != net.modules[0].d_in() || test.dim() != train.dim() {
        return Err(TrainError::Config(format!(
            "dataset width {} vs network input {}",
            train.dim(),
            net.modules[0].d_in()
        )));
    }
    Ok(())
}

pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(derive(seed, 10_000 + epoch as u64)));
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Accumulates per-module batch records in batch order.
#[derive(Clone, Debug, Default)]
pub(crate) struct SgrTally {
    sum: Vec<f64>,
    count: Vec<usize>,
}

impl SgrTally {
    pub(crate) fn new(modules: usize) -> Self {
        Self {
            sum: vec![0.0; modules],
            count: vec![0; modules],
        }
    }

    pub(crate) fn add(&mut self, k: usize, r: &StageRecord) {
        if let Some(s) = r.sgr {
            self.sum[k] += s;
            self.count[k] += 1;
        }
    }

    pub(crate) fn merge(&mut self, k: usize, other: &SgrTally) {
        self.sum[k] += other.sum[k];
        self.count[k] += other.count[k];
    }

    pub(crate) fn per_layer(&self) -> Vec<f64> {
        self.sum
            .iter()
            .zip(&self.count)
            .skip(1)
            .filter(|(_, &c)| c > 0)
            .map(|(s, &c)| s / c as f64)
            .collect()
    }
}

pub(crate) fn finish_epoch(
    net: &Network,
    train: &Dataset,
    test: &Dataset,
    epoch: usize,
    lr: f64,
    tally: &SgrTally,
    started: Instant,
) -> Result<EpochRecord, TrainError> {
    let (train_loss, train_acc) = evaluate(net, train)?;
    let (test_loss, test_acc) = evaluate(net, test)?;
    Ok(EpochRecord {
        epoch,
        lr,
        train_loss,
        train_acc,
        test_loss,
        test_acc,
        sgr_per_layer: tally.per_layer(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// For every module `k >= 1`: its local loss on the input it would receive
/// now minus its loss on the input it trained on, both at its post-update
/// parameters.
fn probe_batch(net: &Network, inputs: &[Tensor], y: &[usize]) -> Result<Vec<f64>, TrainError> {
    let mut h = inputs[0].clone();
    let mut out = Vec::with_capacity(net.len() - 1);
    for k in 1..net.len() {
        h = net.modules[k - 1].forward(&h)?;
        let m = &net.modules[k];
        let after = softmax_ce_value(&m.head.logits(&m.forward(&h)?)?, y)?;
        let before = softmax_ce_value(&m.head.logits(&m.forward(&inputs[k])?)?, y)?;
        out.push(after - before);
    }
    Ok(out)
}

pub fn train(net: Network, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    train_with(net, train, test, cfg, TrainOptions::default())
}

pub fn train_with(
    mut net: Network,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    check_data(&net, train, test)?;
    let mut velocity: Vec<Vec<Tensor>> = net.modules.iter().map(zero_velocity).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut probe = (opts.probe && net.len() > 1).then(|| vec![Vec::new(); net.len() - 1]);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut tally = SgrTally::new(net.len());
        for idx in epoch_order(train.len(), cfg.seed, epoch, cfg.batch_size) {
            let (x, y) = train.batch(&idx);
            if cfg.mode == Mode::GlobalBp {
                global_step(&mut net, &mut velocity, &x, &y, cfg, lr)?;
                continue;
            }
            let (recs, inputs) = sweep(
                &mut net,
                &mut velocity,
                &x,
                &y,
                cfg,
                lr,
                opts.frozen_below,
                probe.is_some(),
            )?;
            for (k, r) in recs.iter().enumerate() {
                tally.add(k, r);
            }
            if let Some(p) = probe.as_mut() {
                for (series, d) in p.iter_mut().zip(probe_batch(&net, &inputs, &y)?) {
                    series.push(d);
                }
            }
        }
        epochs.push(finish_epoch(&net, train, test, epoch, lr, &tally, started)?);
    }
    Ok(TrainReport {
        config: cfg.clone(),
        epochs,
        network: net,
        delta_probe: probe,
        stage_trace: Vec::new(),
    })
}

/// Final test accuracy per `(lambda, seed)` with `mode = sgr`.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub lambda: f64,
    pub accs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn ablate_lambda(
    template: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<Vec<AblationRow>, TrainError> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config("ablation needs lambdas and seeds".into()));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let accs = seeds
                .iter()
                .map(|&seed| {
                    let cfg = TrainConfig {
                        mode: Mode::Sgr,
                        lambda,
                        seed,
                        ..template.clone()
                    };
                    let net = build_network(&cfg, train_set.dim(), train_set.classes)?;
                    Ok(train(net, train_set, test_set, &cfg)?.final_test_acc())
                })
                .collect::<Result<Vec<f64>, TrainError>>()?;
            let (mean, std) = mean_std(&accs);
            Ok(AblationRow {
                lambda,
                accs,
                mean,
                std,
            })
        })
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

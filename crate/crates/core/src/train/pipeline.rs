//! Staged execution: module `k` runs on its own thread and exchanges
//! activations with its neighbours through bounded queues.
//!
//! Each stage consumes batches strictly in order and owns its module, so
//! both modes perform exactly the sequential arithmetic; they differ only
//! in how far stages may run ahead of each other.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Barrier;
use std::thread;
use std::time::Instant;

use super::{
    check_data, epoch_order, finish_epoch, stage_step, zero_velocity, Mode, SgrTally, TrainConfig,
    TrainError, TrainReport,
};
use crate::dataio::Dataset;
use crate::diff::Tensor;
use crate::localnet::{LocalModule, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineMode {
    /// Queue depth 1 and a barrier after every tick: stage `k` handles batch
    /// `t - k` at tick `t`.
    Lockstep,
    /// Stages run freely, blocked only by full or empty queues.
    Async,
}

/// When a stage was busy with a batch, in seconds since the epoch started.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSpan {
    pub epoch: usize,
    pub stage: usize,
    pub batch: usize,
    pub start: f64,
    pub end: f64,
}

enum Msg {
    Batch {
        t: usize,
        x: Tensor,
        y: Vec<usize>,
        /// Upstream module's output gradient for this batch.
        delta: Option<Tensor>,
    },
    /// Upstream failed; forward and stop working.
    Abort,
    /// End of epoch.
    Done,
}

struct Stage<'a> {
    k: usize,
    epoch: usize,
    lr: f64,
    cfg: &'a TrainConfig,
    module: &'a mut LocalModule,
    velocity: &'a mut Vec<Tensor>,
    tx: Option<SyncSender<Msg>>,
    tally: SgrTally,
    spans: Vec<StageSpan>,
    error: Option<TrainError>,
    clock: Instant,
}

impl Stage<'_> {
    fn send(&self, m: Msg) {
        if let Some(tx) = &self.tx {
            // a closed receiver means the downstream stage already failed
            let _ = tx.send(m);
        }
    }

    /// Returns false once the stage should stop receiving.
    fn handle(&mut self, msg: Msg) -> bool {
        match msg {
            Msg::Batch { t, x, y, delta } => {
                if self.error.is_some() {
                    self.send(Msg::Abort);
                    return true;
                }
                let start = self.clock.elapsed().as_secs_f64();
                match stage_step(self.module, self.velocity, &x, &y, delta.as_ref(), self.cfg, self.lr) {
                    Ok((next, d, rec)) => {
                        self.tally.add(self.k, &rec);
                        self.spans.push(StageSpan {
                            epoch: self.epoch,
                            stage: self.k,
                            batch: t,
                            start,
                            end: self.clock.elapsed().as_secs_f64(),
                        });
                        self.send(Msg::Batch {
                            t,
                            x: next,
                            y,
                            delta: Some(d),
                        });
                    }
                    Err(e) => {
                        self.error = Some(e);
                        self.send(Msg::Abort);
                    }
                }
                true
            }
            Msg::Abort => {
                if self.error.is_none() {
                    self.error = Some(TrainError::Pipeline(format!(
                        "stage {} aborted by upstream failure",
                        self.k
                    )));
                }
                self.send(Msg::Abort);
                true
            }
            Msg::Done => {
                self.send(Msg::Done);
                false
            }
        }
    }
}

/// Layer-wise training with one thread per module. `queue_depth` bounds
/// the async queues; lockstep always uses depth 1.
pub fn pipeline_train(
    mut net: Network,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mode: PipelineMode,
    queue_depth: usize,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    check_data(&net, train, test)?;
    if cfg.mode == Mode::GlobalBp {
        return Err(TrainError::Config("global BP cannot be pipelined".into()));
    }
    if queue_depth == 0 {
        return Err(TrainError::Config("queue depth must be >= 1".into()));
    }
    let depth = match mode {
        PipelineMode::Lockstep => 1,
        PipelineMode::Async => queue_depth,
    };
    let k = net.len();
    let mut velocity: Vec<Vec<Tensor>> = net.modules.iter().map(zero_velocity).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let batches = epoch_order(train.len(), cfg.seed, epoch, cfg.batch_size);
        let nb = batches.len();
        let ticks = nb + k - 1;
        let barrier = Barrier::new(k + 1);
        let mut tally = SgrTally::new(k);

        let (mut txs, mut rxs): (Vec<_>, Vec<_>) = (0..k).map(|_| sync_channel::<Msg>(depth)).unzip();
        let feeder = txs.remove(0);
        let mut downstream: Vec<Option<SyncSender<Msg>>> = txs.into_iter().map(Some).collect();
        downstream.push(None);

        let results = thread::scope(|s| {
            let handles: Vec<_> = net
                .modules
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(rxs.drain(..).zip(downstream.drain(..)))
                .enumerate()
                .map(|(i, ((module, vel), (rx, tx)))| {
                    let barrier = &barrier;
                    let stage = Stage {
                        k: i,
                        epoch,
                        lr,
                        cfg,
                        module,
                        velocity: vel,
                        tx,
                        tally: SgrTally::new(k),
                        spans: Vec::new(),
                        error: None,
                        clock: started,
                    };
                    s.spawn(move || run_stage(stage, rx, mode, barrier, nb, ticks))
                })
                .collect();

            for (t, idx) in batches.iter().enumerate() {
                let (x, y) = train.batch(idx);
                let _ = feeder.send(Msg::Batch { t, x, y, delta: None });
                if mode == PipelineMode::Lockstep {
                    barrier.wait();
                }
            }
            if mode == PipelineMode::Lockstep {
                // drain ticks while the wavefront leaves the pipe
                for _ in nb..ticks {
                    barrier.wait();
                }
            }
            let _ = feeder.send(Msg::Done);
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| TrainError::Pipeline("stage panicked".into())))
                .collect::<Vec<_>>()
        });

        for (i, r) in results.into_iter().enumerate() {
            let (st, spans, err) = r?;
            if let Some(e) = err {
                return Err(e);
            }
            tally.merge(i, &st);
            trace.extend(spans);
        }
        epochs.push(finish_epoch(&net, train, test, epoch, lr, &tally, started)?);
    }
    Ok(TrainReport {
        config: cfg.clone(),
        epochs,
        network: net,
        delta_probe: None,
        stage_trace: trace,
    })
}

type StageResult = (SgrTally, Vec<StageSpan>, Option<TrainError>);

fn run_stage(
    mut st: Stage<'_>,
    rx: Receiver<Msg>,
    mode: PipelineMode,
    barrier: &Barrier,
    nb: usize,
    ticks: usize,
) -> StageResult {
    match mode {
        PipelineMode::Lockstep => {
            for t in 0..ticks {
                if t >= st.k && t - st.k < nb {
                    match rx.recv() {
                        Ok(m) => {
                            st.handle(m);
                        }
                        Err(_) => st.error = Some(TrainError::Pipeline("upstream hung up".into())),
                    }
                }
                barrier.wait();
            }
            // the closing token
            if let Ok(m) = rx.recv() {
                st.handle(m);
            }
        }
        PipelineMode::Async => loop {
            match rx.recv() {
                Ok(m) => {
                    if !st.handle(m) {
                        break;
                    }
                }
                Err(_) => {
                    st.error.get_or_insert(TrainError::Pipeline("upstream hung up".into()));
                    break;
                }
            }
        },
    }
    (st.tally, st.spans, st.error)
}

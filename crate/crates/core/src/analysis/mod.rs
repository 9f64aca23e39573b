//! Input-change probe, activation memory model, and report emission.

mod plot;
mod report;

pub use plot::{render_line_plot, svg_from_table, PlotSpec};
pub use report::{read_table, report_header, write_csv, Table};

use nalgebra::DVector;
use thiserror::Error;

use crate::dataio::Dataset;
use crate::localnet::Network;
use crate::theory::QuadraticTestbed;
use crate::train::{train_with, Mode, TrainConfig, TrainError, TrainOptions, TrainReport};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("no data to plot")]
    Empty,
    #[error("bad value `{value}` in column `{column}`")]
    BadValue { column: String, value: String },
    #[error("inconsistent partition: {0}")]
    Partition(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// `ΔL_k(t)` per batch for layers `2..=K`; negative values mean upstream
/// updates lowered layer `k`'s loss.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaProbe {
    /// 1-based layer index of each series.
    pub layers: Vec<usize>,
    pub series: Vec<Vec<f64>>,
}

impl DeltaProbe {
    pub fn mean(&self, i: usize) -> f64 {
        let s = &self.series[i];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    /// Mean over training of the top layer's series.
    pub fn last_layer_mean(&self) -> Option<f64> {
        (!self.series.is_empty()).then(|| self.mean(self.series.len() - 1))
    }
}

/// Trains with the probe enabled. `frozen_below` keeps the first modules at
/// their initial parameters.
pub fn delta_loss_probe(
    net: Network,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    frozen_below: usize,
) -> Result<(DeltaProbe, TrainReport), AnalysisError> {
    if cfg.mode == Mode::GlobalBp {
        return Err(TrainError::Config("the probe needs a layer-wise mode".into()).into());
    }
    let rep = train_with(net, train, test, cfg, TrainOptions { probe: true, frozen_below })?;
    let series = rep.delta_probe.clone().unwrap_or_default();
    let probe = DeltaProbe {
        layers: (2..series.len() + 2).collect(),
        series,
    };
    Ok((probe, rep))
}

/// The probe on the two-layer quadratic testbed: after one layer-wise
/// iteration from `(u, v)`, the change in `L₂` caused by `θ₁`'s update
/// alone, with `θ₂` at its new value.
pub fn quadratic_delta(tb: &QuadraticTestbed, eta1: f64, eta2: f64, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let (u1, v1) = crate::theory::quadratic::layerwise_iteration(tb, eta1, eta2, u, v);
    tb.loss2(&u1, &v1) - tb.loss2(u, &v1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorySpec {
    /// `[d_in, w_1, ..., w_L]`
    pub widths: Vec<usize>,
    pub batch: usize,
    /// Layers per module, summing to `L`.
    pub partition: Vec<usize>,
    /// Per-sample stored units of one auxiliary head: `[K]` for a fixed
    /// ETF head, `[hidden, K]` for a two-layer head.
    pub head_widths: Vec<usize>,
}

/// Stored activation scalars. A layer stores its output; the raw input is
/// resident in every mode and not counted.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryCounts {
    /// Every layer plus the final head.
    pub global: u64,
    /// Each module's layers plus its head.
    pub per_module: Vec<u64>,
    /// Largest module: earlier modules' buffers are released once they
    /// have updated.
    pub local: u64,
    pub ratio: f64,
    /// Predecessor output gradient a reconciling module keeps, largest over
    /// modules; not part of `local`.
    pub delta_buffer: u64,
}

impl MemoryCounts {
    /// Ratio when the reconciliation buffer is charged to each module.
    pub fn ratio_with_deltas(&self, spec: &MemorySpec) -> f64 {
        let head: usize = spec.head_widths.iter().sum();
        let mut at = 1;
        let mut worst = 0;
        for (k, &n) in spec.partition.iter().enumerate() {
            let acts: usize = spec.widths[at..at + n].iter().sum();
            let delta = if k == 0 { 0 } else { spec.widths[at - 1] };
            worst = worst.max(spec.batch * (acts + head + delta));
            at += n;
        }
        worst as f64 / self.global as f64
    }
}

/// `K` modules over `layers` layers, as equal as possible.
pub fn equal_partition(layers: usize, modules: usize) -> Result<Vec<usize>, AnalysisError> {
    if modules == 0 || modules > layers {
        return Err(AnalysisError::Partition(format!("{modules} modules over {layers} layers")));
    }
    Ok((0..modules).map(|k| layers / modules + usize::from(k < layers % modules)).collect())
}

pub fn memory_model(spec: &MemorySpec) -> Result<MemoryCounts, AnalysisError> {
    let layers = spec.widths.len().saturating_sub(1);
    if layers == 0 || spec.widths.contains(&0) || spec.batch == 0 {
        return Err(AnalysisError::Partition(format!("widths {:?}, batch {}", spec.widths, spec.batch)));
    }
    if spec.partition.contains(&0) || spec.partition.iter().sum::<usize>() != layers {
        return Err(AnalysisError::Partition(format!(
            "{:?} does not cover {layers} layers",
            spec.partition
        )));
    }
    let b = spec.batch as u64;
    let head: u64 = spec.head_widths.iter().map(|&w| w as u64).sum();
    let global = b * (spec.widths[1..].iter().map(|&w| w as u64).sum::<u64>() + head);
    let mut per_module = Vec::with_capacity(spec.partition.len());
    let mut delta_buffer = 0;
    let mut at = 1;
    for (k, &n) in spec.partition.iter().enumerate() {
        let acts: u64 = spec.widths[at..at + n].iter().map(|&w| w as u64).sum();
        per_module.push(b * (acts + head));
        if k > 0 {
            delta_buffer = delta_buffer.max(b * spec.widths[at - 1] as u64);
        }
        at += n;
    }
    let local = per_module.iter().copied().max().unwrap_or(0);
    Ok(MemoryCounts {
        global,
        ratio: if spec.partition.len() == 1 { 1.0 } else { local as f64 / global as f64 },
        per_module,
        local,
        delta_buffer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::estimate_constants;

    fn spec(widths: &[usize], k: usize, head: &[usize]) -> MemorySpec {
        MemorySpec {
            widths: widths.to_vec(),
            batch: 128,
            partition: equal_partition(widths.len() - 1, k).unwrap(),
            head_widths: head.to_vec(),
        }
    }

    #[test]
    fn single_module_ratio_is_one() {
        let c = memory_model(&spec(&[784, 256, 256, 256], 1, &[10])).unwrap();
        assert_eq!(c.ratio, 1.0);
        assert_eq!(c.local, c.global);
    }

    #[test]
    fn equal_modules_tend_to_inverse_k() {
        let c = memory_model(&spec(&[64; 13], 4, &[0])).unwrap();
        assert!((c.ratio - 0.25).abs() < 1e-12);
    }

    #[test]
    fn hand_ledger() {
        // global: 128 * (256 + 256 + 256 + 10) = 99_584
        // module: 128 * (256 + 10)             = 34_048
        let s = spec(&[784, 256, 256, 256], 3, &[10]);
        let c = memory_model(&s).unwrap();
        assert_eq!(c.global, 99_584);
        assert_eq!(c.per_module, vec![34_048; 3]);
        assert_eq!(c.local, 34_048);
        assert_eq!(c.ratio, 34_048.0 / 99_584.0);
        assert!(c.ratio <= 0.60);
        // with the 128 x 256 reconciliation buffer: 128 * 522
        assert_eq!(c.delta_buffer, 32_768);
        assert_eq!(c.ratio_with_deltas(&s), 66_816.0 / 99_584.0);
    }

    #[test]
    fn bad_partitions_are_rejected() {
        let mut s = spec(&[8, 8, 8], 2, &[3]);
        s.partition = vec![1, 2];
        assert!(memory_model(&s).is_err());
        assert!(equal_partition(2, 3).is_err());
        assert_eq!(equal_partition(5, 2).unwrap(), vec![3, 2]);
    }

    #[test]
    fn quadratic_probe_sign_follows_first_order_term() {
        let mut agree = 0;
        let mut total = 0;
        for seed in 0..20 {
            let tb = QuadraticTestbed::linearized(3, 3, 3, seed).unwrap();
            let k = estimate_constants(&tb).unwrap();
            let (eta1, eta2) = (1e-4 * k.eta1, k.eta2);
            let (_, v1) = crate::theory::quadratic::layerwise_iteration(&tb, eta1, eta2, &tb.u0, &tb.v0);
            let g1 = tb.grad1_loss1(&tb.u0);
            let first_order = -eta1 * tb.grad_loss2(&tb.u0, &v1).0.dot(&g1);
            let curvature = 0.5 * eta1 * eta1 * (&tb.j1 * &g1).norm_squared();
            let d = quadratic_delta(&tb, eta1, eta2, &tb.u0, &tb.v0);
            // a quadratic's expansion stops at second order
            assert!((d - first_order - curvature).abs() <= 1e-9 * (first_order.abs() + curvature));
            if first_order.abs() < 10.0 * curvature {
                continue;
            }
            total += 1;
            agree += (d.signum() == first_order.signum()) as usize;
        }
        assert!(total >= 15);
        assert_eq!(agree, total);
    }
}

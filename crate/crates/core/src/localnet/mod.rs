//! Gradient-isolated modules and the per-module reconciliation step.

mod checkpoint;
mod step;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use step::{module_local_step, sgr_value, LossRecord, SgrSettings, StepOutput, NORM_EPS};

use rand::RngExt;
use thiserror::Error;

use crate::diff::{matmul_t, DiffError, Tensor, Var};
use crate::etf::{EtfClassifier, EtfError};
use crate::rng::{derive, seeded};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Etf(#[from] EtfError),
    #[error("inconsistent widths: {0}")]
    Widths(String),
    #[error("input width {got} does not match module input width {want}")]
    WidthMismatch { want: usize, got: usize },
    #[error("module {module} needs the predecessor's delta")]
    MissingDelta { module: usize },
    #[error("the first module takes no predecessor delta")]
    UnexpectedDelta,
    #[error("delta shape {got:?} does not match input shape {want:?}")]
    DeltaShape { want: Vec<usize>, got: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `d_out x d_in`
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    /// Weights uniform in `±sqrt(6/d_in)`, zero bias.
    pub fn init(d_in: usize, d_out: usize, activation: Activation, seed: u64) -> Self {
        let a = (6.0 / d_in as f64).sqrt();
        let mut rng = seeded(seed);
        let w = (0..d_in * d_out)
            .map(|_| rng.random_range(-a..=a))
            .collect();
        Self {
            weight: Tensor::matrix(d_out, d_in, w),
            bias: Tensor::zeros(&[d_out]),
            activation,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, DiffError> {
        let mut y = matmul_t(x, false, &self.weight, true)?;
        let d = self.d_out();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.bias.data()[i % d];
            if self.activation == Activation::Relu && *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(y)
    }

    fn forward_var<'t>(&self, x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>, DiffError> {
        let z = x.matmul_t(false, w, true)?.add_bias(b)?;
        match self.activation {
            Activation::Relu => z.relu(),
            Activation::Identity => Ok(z),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub layers: Vec<Layer>,
}

impl Block {
    /// Chain of linear+ReLU layers over `dims` (`dims.len() - 1` layers).
    pub fn init(dims: &[usize], seed: u64) -> Result<Self, NetError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NetError::Widths(format!("block dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::init(w[0], w[1], Activation::Relu, derive(seed, i as u64)))
            .collect();
        Ok(Self { layers })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, DiffError> {
        let mut h = self.layers[0].forward(x)?;
        for l in &self.layers[1..] {
            h = l.forward(&h)?;
        }
        Ok(h)
    }
}

/// Two-layer learnable head: linear+ReLU then a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub hidden: Layer,
    pub classifier: Layer,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AuxHead {
    EtfFixed(EtfClassifier),
    LearnableMlp(MlpHead),
}

impl AuxHead {
    pub fn classes(&self) -> usize {
        match self {
            AuxHead::EtfFixed(e) => e.classes(),
            AuxHead::LearnableMlp(m) => m.classifier.d_out(),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            AuxHead::EtfFixed(e) => e.dim(),
            AuxHead::LearnableMlp(m) => m.hidden.d_in(),
        }
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor, DiffError> {
        match self {
            AuxHead::EtfFixed(e) => matmul_t(features, false, e.matrix(), true),
            AuxHead::LearnableMlp(m) => m.classifier.forward(&m.hidden.forward(features)?),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadSpec {
    Etf,
    Mlp { hidden: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalModule {
    pub block: Block,
    pub head: AuxHead,
    /// Gradient of this module's local loss with respect to its most recent
    /// output, kept for the successor.
    pub delta_out: Option<Tensor>,
}

/// Parameters of a module bound as leaves on a tape, block first.
pub(crate) struct BoundParams<'t> {
    pub vars: Vec<Var<'t>>,
    n_block: usize,
}

impl LocalModule {
    pub fn new(block: Block, head: AuxHead) -> Result<Self, NetError> {
        if block.d_out() != head.d_in() {
            return Err(NetError::Widths(format!(
                "block output {} vs head input {}",
                block.d_out(),
                head.d_in()
            )));
        }
        Ok(Self {
            block,
            head,
            delta_out: None,
        })
    }

    pub fn d_in(&self) -> usize {
        self.block.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.block.d_out()
    }

    /// Trainable tensors in declaration order: block layers `(W, b)`, then a
    /// learnable head's `(W, b)` pairs. ETF heads contribute nothing.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.block.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        if let AuxHead::LearnableMlp(m) = &self.head {
            for l in [&m.hidden, &m.classifier] {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.block.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let AuxHead::LearnableMlp(m) = &mut self.head {
            for l in [&mut m.hidden, &mut m.classifier] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn check_input(&self, input: &Tensor) -> Result<(), NetError> {
        let got = input.dims2()?.1;
        if got != self.d_in() {
            return Err(NetError::WidthMismatch {
                want: self.d_in(),
                got,
            });
        }
        Ok(())
    }

    /// Block output for a batch; a pure function of parameters and input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NetError> {
        self.check_input(input)?;
        Ok(self.block.forward(input)?)
    }

    pub(crate) fn bind<'t>(&self, tape: &'t crate::diff::Tape) -> BoundParams<'t> {
        let n_block = 2 * self.block.layers.len();
        let vars = self.params().into_iter().map(|p| tape.leaf(p.clone())).collect();
        BoundParams { vars, n_block }
    }

    /// Like [`LocalModule::bind`] but every parameter is a constant.
    pub(crate) fn bind_frozen<'t>(&self, tape: &'t crate::diff::Tape) -> BoundParams<'t> {
        let n_block = 2 * self.block.layers.len();
        let vars = self.params().into_iter().map(|p| tape.constant(p.clone())).collect();
        BoundParams { vars, n_block }
    }

    pub(crate) fn block_forward_var<'t>(
        &self,
        x: Var<'t>,
        p: &BoundParams<'t>,
    ) -> Result<Var<'t>, DiffError> {
        let mut h = x;
        for (i, l) in self.block.layers.iter().enumerate() {
            h = l.forward_var(h, p.vars[2 * i], p.vars[2 * i + 1])?;
        }
        Ok(h)
    }

    pub(crate) fn head_forward_var<'t>(
        &self,
        features: Var<'t>,
        p: &BoundParams<'t>,
    ) -> Result<Var<'t>, DiffError> {
        match &self.head {
            AuxHead::EtfFixed(e) => {
                let m = features.tape().constant(e.matrix().clone());
                features.matmul_t(false, m, true)
            }
            AuxHead::LearnableMlp(m) => {
                let v = &p.vars[p.n_block..];
                let h = m.hidden.forward_var(features, v[0], v[1])?;
                m.classifier.forward_var(h, v[2], v[3])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub modules: Vec<LocalModule>,
}

impl Network {
    /// `dims = [d_in, w_1, ..., w_K]` gives `K` modules; module `k` maps
    /// `w_{k-1} -> w_k` through `layers_per_module` linear+ReLU layers and
    /// carries its own auxiliary head.
    pub fn build(
        dims: &[usize],
        layers_per_module: usize,
        classes: usize,
        head: HeadSpec,
        seed: u64,
    ) -> Result<Self, NetError> {
        if dims.len() < 2 {
            return Err(NetError::Widths(format!(
                "need an input width and at least one module width, got {dims:?}"
            )));
        }
        if dims.contains(&0) || layers_per_module == 0 {
            return Err(NetError::Widths(format!("zero width or depth in {dims:?}")));
        }
        let mut modules = Vec::with_capacity(dims.len() - 1);
        for (k, w) in dims.windows(2).enumerate() {
            let mut chain = vec![w[0]];
            chain.extend(std::iter::repeat_n(w[1], layers_per_module));
            let mseed = derive(seed, 1000 + k as u64);
            let block = Block::init(&chain, mseed)?;
            let aux = match head {
                HeadSpec::Etf => AuxHead::EtfFixed(EtfClassifier::new(
                    classes,
                    w[1],
                    derive(seed, 2000 + k as u64),
                )?),
                HeadSpec::Mlp { hidden } => AuxHead::LearnableMlp(MlpHead {
                    hidden: Layer::init(w[1], hidden, Activation::Relu, derive(mseed, 77)),
                    classifier: Layer::init(hidden, classes, Activation::Identity, derive(mseed, 78)),
                }),
            };
            modules.push(LocalModule::new(block, aux)?);
        }
        Ok(Self { modules })
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.modules.last().unwrap().head.classes()
    }

    pub fn param_count(&self) -> usize {
        self.modules.iter().map(|m| m.param_count()).sum()
    }

    /// Backbone features after every module.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>, NetError> {
        let mut out = Vec::with_capacity(self.len());
        let mut h = x.clone();
        for m in &self.modules {
            h = m.forward(&h)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Inference logits: backbone plus the last module's head.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut h = x.clone();
        for m in &self.modules {
            h = m.forward(&h)?;
        }
        Ok(self.modules.last().unwrap().head.logits(&h)?)
    }

    /// Flat copy of every trainable parameter, module by module.
    pub fn flat_params(&self) -> Vec<f64> {
        self.modules
            .iter()
            .flat_map(|m| m.params().into_iter().flat_map(|t| t.data().to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Layer::init(6, 5, Activation::Relu, 11);
        let b = Layer::init(6, 5, Activation::Relu, 11);
        assert_eq!(a, b);
        assert!(a.weight.data().iter().all(|v| v.abs() <= 1.0));
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
        let c = Layer::init(6, 5, Activation::Relu, 12);
        assert_ne!(a.weight, c.weight);
    }

    #[test]
    fn init_variance_matches_uniform() {
        let d_in = 50;
        let l = Layer::init(d_in, 2000, Activation::Relu, 3);
        let n = l.weight.len() as f64;
        let mean = l.weight.sum() / n;
        let var = l.weight.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // uniform(±a) has variance a²/3 = 2/d_in
        let want = 2.0 / d_in as f64;
        assert!((var / want - 1.0).abs() < 0.05, "var {var} want {want}");
    }

    #[test]
    fn zero_and_identity_layers() {
        let mut l = Layer::init(3, 3, Activation::Relu, 0);
        l.weight = Tensor::zeros(&[3, 3]);
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, -0.5]);
        assert_eq!(l.forward(&x).unwrap().max_abs(), 0.0);
        l.weight = Tensor::eye(3);
        assert_eq!(l.forward(&x).unwrap(), x.map(|v| v.max(0.0)));
    }

    #[test]
    fn forward_matches_tape_composition() {
        let net = Network::build(&[5, 7, 6], 2, 3, HeadSpec::Mlp { hidden: 4 }, 9).unwrap();
        let x = Tensor::from_fn(4, 5, |i, j| ((i * 5 + j) as f64 * 0.61).cos());
        for m in &net.modules {
            let tape = Tape::new();
            let p = m.bind(&tape);
            let xv = tape.constant(if m.d_in() == 5 { x.clone() } else { net.modules[0].forward(&x).unwrap() });
            let inp = xv.value();
            let via_tape = m.block_forward_var(xv, &p).unwrap().value();
            assert_eq!(via_tape, m.forward(&inp).unwrap());
            let lt = m.head_forward_var(tape.constant(via_tape.clone()), &p).unwrap().value();
            assert_eq!(lt, m.head.logits(&via_tape).unwrap());
        }
    }

    #[test]
    fn build_counts_and_errors() {
        let net = Network::build(&[784, 256, 256, 256], 1, 10, HeadSpec::Etf, 0).unwrap();
        assert_eq!(net.len(), 3);
        let want = (256 * 784 + 256) + 2 * (256 * 256 + 256);
        assert_eq!(net.param_count(), want);

        let one = Network::build(&[10, 12], 1, 3, HeadSpec::Etf, 0).unwrap();
        assert_eq!(one.len(), 1);

        assert!(Network::build(&[10], 1, 3, HeadSpec::Etf, 0).is_err());
        assert!(Network::build(&[10, 0, 4], 1, 3, HeadSpec::Etf, 0).is_err());
        // ETF head narrower than the class count
        assert!(Network::build(&[10, 4], 1, 5, HeadSpec::Etf, 0).is_err());

        let mlp = Network::build(&[4, 6], 2, 3, HeadSpec::Mlp { hidden: 5 }, 0).unwrap();
        let want = (6 * 4 + 6) + (6 * 6 + 6) + (5 * 6 + 5) + (3 * 5 + 3);
        assert_eq!(mlp.param_count(), want);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let net = Network::build(&[4, 6], 1, 3, HeadSpec::Etf, 0).unwrap();
        let err = net.modules[0].forward(&Tensor::zeros(&[2, 5])).unwrap_err();
        assert!(matches!(err, NetError::WidthMismatch { want: 4, got: 5 }));
    }
}

use std::fmt;
use std::str::FromStr;

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// End-to-end backpropagation through every module; only the last head
    /// is used.
    GlobalBp,
    /// Gradient-isolated modules, one forward sweep per batch.
    Layerwise,
    /// Like `Layerwise`, but each module's output is recomputed after its
    /// update before feeding the successor.
    Reforward,
    /// `Layerwise` plus the gradient-reconciliation term.
    Sgr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// One linear+ReLU layer per module, fixed ETF heads.
    BpFree,
    /// Multi-layer modules with learnable MLP heads.
    LocalBp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

macro_rules! keyword_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(format!("unknown {} `{s}`", $what)),
                }
            }
        }
    };
}

keyword_enum!(Mode, "mode", Mode::GlobalBp => "globalbp", Mode::Layerwise => "layerwise",
    Mode::Reforward => "reforward", Mode::Sgr => "sgr");
keyword_enum!(HeadMode, "head mode", HeadMode::BpFree => "bpfree", HeadMode::LocalBp => "localbp");
keyword_enum!(Schedule, "schedule", Schedule::Constant => "constant", Schedule::Cosine => "cosine");

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub head_mode: HeadMode,
    pub lambda: f64,
    pub normalize_deltas: bool,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Number of gradient-isolated modules `K`.
    pub modules: usize,
    /// Hidden width of every module.
    pub width: usize,
    pub layers_per_module: usize,
    /// Hidden width of learnable auxiliary heads.
    pub head_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sgr,
            head_mode: HeadMode::BpFree,
            lambda: 1.0,
            normalize_deltas: true,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            epochs: 30,
            batch_size: 128,
            seed: 0,
            modules: 3,
            width: 256,
            layers_per_module: 1,
            head_hidden: 128,
        }
    }
}

impl TrainConfig {
    /// Checks everything except `lr > 0`, which only config files must
    /// satisfy; a zero rate is a legal programmatic no-op.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.modules == 0 || self.width == 0 {
            return bad("batch_size, modules and width must be >= 1".into());
        }
        if self.layers_per_module == 0 || self.head_hidden == 0 {
            return bad("layers_per_module and head_hidden must be >= 1".into());
        }
        if self.head_mode == HeadMode::BpFree && self.layers_per_module != 1 {
            return bad("bpfree modules have exactly one layer".into());
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based), stepped once per epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

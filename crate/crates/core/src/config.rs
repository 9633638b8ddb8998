//! Flat `key = value` configuration covering the model, solver, trainer,
//! noise and gradient-check settings. Blank lines and `#` comments are
//! ignored; unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{DecscError, Result};
use crate::layers::ModelConfig;
use crate::noise::{NoisePattern, NoiseSpec};
use crate::solver::{SolverConfig, SolverMethod};
use crate::train::TrainConfig;

/// Tiny-problem settings for the phantom-vs-finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub unroll: usize,
    pub eps: f64,
    pub seed: u64,
    pub tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            height: 4,
            width: 4,
            bands: 3,
            unroll: 5,
            eps: 1e-6,
            seed: 0,
            tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub noise: NoiseSpec,
    pub gradcheck: GradCheckConfig,
}

impl Default for ExperimentConfig {
    /// The desk-scale toy setup.
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(8),
            train: TrainConfig::toy(),
            noise: NoiseSpec::noniid(0.0, 55.0, 0),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| DecscError::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x:?}"))
}

/// Splits `text` into `(key, value)` pairs in file order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DecscError::Config(format!("line {}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(DecscError::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(DecscError::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl ModelConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "atoms2d" => self.atoms2d = parse(key, v)?,
            "ksize2d" => self.ksize2d = parse(key, v)?,
            "atoms3d" => self.atoms3d = parse(key, v)?,
            "ksize3d" => self.ksize3d = parse(key, v)?,
            "kbands3d" => self.kbands3d = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "stages" => self.stages = parse(key, v)?,
            "use_net1" => self.use_net1 = parse(key, v)?,
            "use_net2" => self.use_net2 = parse(key, v)?,
            "theta_init" => self.theta_init = parse(key, v)?,
            "prior_init_std" => self.prior_init_std = parse(key, v)?,
            "attention_init_std" => self.attention_init_std = parse_opt(key, v)?,
            "prior_zero_out" => self.prior_zero_out = parse(key, v)?,
            "init_op_norm" => self.init_op_norm = parse_opt(key, v)?,
            "bands" => self.bands = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `model.*` lines, including the band count.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model.bands = {}", self.bands);
        let _ = writeln!(s, "model.atoms2d = {}", self.atoms2d);
        let _ = writeln!(s, "model.ksize2d = {}", self.ksize2d);
        let _ = writeln!(s, "model.atoms3d = {}", self.atoms3d);
        let _ = writeln!(s, "model.ksize3d = {}", self.ksize3d);
        let _ = writeln!(s, "model.kbands3d = {}", self.kbands3d);
        let _ = writeln!(s, "model.heads = {}", self.heads);
        let _ = writeln!(s, "model.window = {}", self.window);
        let _ = writeln!(s, "model.stages = {}", self.stages);
        let _ = writeln!(s, "model.use_net1 = {}", self.use_net1);
        let _ = writeln!(s, "model.use_net2 = {}", self.use_net2);
        let _ = writeln!(s, "model.theta_init = {:?}", self.theta_init);
        let _ = writeln!(s, "model.prior_init_std = {:?}", self.prior_init_std);
        let _ = writeln!(s, "model.attention_init_std = {}", fmt_opt(self.attention_init_std));
        let _ = writeln!(s, "model.prior_zero_out = {}", self.prior_zero_out);
        let _ = writeln!(s, "model.init_op_norm = {}", fmt_opt(self.init_op_norm));
        s
    }

    /// Reads a block written by `to_kv`; every key must be a `model.*` key.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut m = ModelConfig::toy(1);
        for (k, v) in parse_kv(text)? {
            let known = k.strip_prefix("model.").map(|f| m.set(f, &v)).transpose()?;
            if known != Some(true) {
                return Err(DecscError::Config(format!("unknown key {k}")));
            }
        }
        m.validate()?;
        Ok(m)
    }
}

impl SolverConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "method" => self.method = SolverMethod::from_str(v)?,
            "tol" => self.tol = parse(key, v)?,
            "max_iter" => self.max_iter = parse(key, v)?,
            "memory" => self.memory = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "ridge" => self.ridge = parse(key, v)?,
            "divergence_factor" => self.divergence_factor = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr_period" => self.lr_period = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "unroll" => self.unroll = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "crop" => self.crop = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse_opt(key, v)?,
            "val_every" => self.val_every = parse(key, v)?,
            "fp_weight" => self.fp_weight = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl NoiseSpec {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "pattern" => self.pattern = NoisePattern::from_str(v)?,
            "lo" => self.lo = parse(key, v)?,
            "hi" => self.hi = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "eta" => self.eta = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl GradCheckConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "bands" => self.bands = parse(key, v)?,
            "unroll" => self.unroll = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "tol" => self.tol = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl ExperimentConfig {
    /// The tiny model used by `grad-check`: 4x4x3 cube, M = 4, J = 2, L = 5.
    pub fn grad_check_default() -> Self {
        let gradcheck = GradCheckConfig::default();
        Self {
            model: ModelConfig::gradcheck(gradcheck.bands),
            gradcheck,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let known = match key.split_once('.') {
            Some(("model", f)) => self.model.set(f, v)?,
            Some(("solver", f)) => self.train.solver.set(f, v)?,
            Some(("train", f)) => self.train.set(f, v)?,
            Some(("noise", f)) => self.noise.set(f, v)?,
            Some(("gradcheck", f)) => self.gradcheck.set(f, v)?,
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(DecscError::Config(format!("unknown key {key}")))
        }
    }

    /// Applies every line of `text` on top of `self`, then validates.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let g = &self.gradcheck;
        if g.height == 0 || g.width == 0 || g.bands == 0 || g.unroll == 0 || !(g.eps > 0.0) || !(g.tol > 0.0) {
            return Err(DecscError::Config("gradcheck sizes, unroll, eps and tol must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = self.model.to_kv();
        let sv = &self.train.solver;
        let method = match sv.method {
            SolverMethod::Naive => "naive",
            SolverMethod::Anderson => "anderson",
        };
        let _ = writeln!(s, "solver.method = {method}");
        let _ = writeln!(s, "solver.tol = {:?}", sv.tol);
        let _ = writeln!(s, "solver.max_iter = {}", sv.max_iter);
        let _ = writeln!(s, "solver.memory = {}", sv.memory);
        let _ = writeln!(s, "solver.beta = {:?}", sv.beta);
        let _ = writeln!(s, "solver.ridge = {:?}", sv.ridge);
        let _ = writeln!(s, "solver.divergence_factor = {:?}", sv.divergence_factor);
        let t = &self.train;
        let _ = writeln!(s, "train.lr = {:?}", t.lr);
        let _ = writeln!(s, "train.batch = {}", t.batch);
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.lr_period = {}", t.lr_period);
        let _ = writeln!(s, "train.beta1 = {:?}", t.beta1);
        let _ = writeln!(s, "train.beta2 = {:?}", t.beta2);
        let _ = writeln!(s, "train.eps = {:?}", t.eps);
        let _ = writeln!(s, "train.unroll = {}", t.unroll);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.crop = {}", t.crop);
        let _ = writeln!(s, "train.max_steps = {}", t.max_steps);
        let _ = writeln!(s, "train.clip_norm = {}", fmt_opt(t.clip_norm));
        let _ = writeln!(s, "train.val_every = {}", t.val_every);
        let _ = writeln!(s, "train.fp_weight = {:?}", t.fp_weight);
        let n = &self.noise;
        let pattern = match n.pattern {
            NoisePattern::NonIid => "noniid",
            NoisePattern::Mixture => "mixture",
            NoisePattern::Corr => "corr",
        };
        let _ = writeln!(s, "noise.pattern = {pattern}");
        let _ = writeln!(s, "noise.lo = {:?}", n.lo);
        let _ = writeln!(s, "noise.hi = {:?}", n.hi);
        let _ = writeln!(s, "noise.beta = {:?}", n.beta);
        let _ = writeln!(s, "noise.eta = {:?}", n.eta);
        let _ = writeln!(s, "noise.seed = {}", n.seed);
        let g = &self.gradcheck;
        let _ = writeln!(s, "gradcheck.height = {}", g.height);
        let _ = writeln!(s, "gradcheck.width = {}", g.width);
        let _ = writeln!(s, "gradcheck.bands = {}", g.bands);
        let _ = writeln!(s, "gradcheck.unroll = {}", g.unroll);
        let _ = writeln!(s, "gradcheck.eps = {:?}", g.eps);
        let _ = writeln!(s, "gradcheck.seed = {}", g.seed);
        let _ = writeln!(s, "gradcheck.tol = {:?}", g.tol);
        s
    }
}

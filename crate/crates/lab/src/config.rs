//! INI-style experiment configuration.
//!
//! ```ini
//! [experiment]
//! mode = t1t2            # t1t2 | fixed | grid | hypercheck
//!
//! [data]
//! source = idx
//! images = ../data/mnist-10k/images-idx3-ubyte.gz
//! labels = ../data/mnist-10k/labels-idx1-ubyte.gz
//!
//! [model]
//! hidden = 256, 256
//! ```
//!
//! Every other key has a default; see [`ExperimentConfig::to_ini`] for the
//! full list. Unknown keys and sections are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use t1t2_core::optim::{HyperOptConfig, OptimizerKind};
use t1t2_core::trainer::{Seeds, TrainConfig, TrainMode};
use t1t2_core::{Families, HyperParams, InitScheme, Layout, NoiseRoute};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    T1T2,
    Fixed,
    Grid,
    Hypercheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preprocess {
    None,
    Center,
    Gcn,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Paths as written; relative ones resolve against the config file.
    Idx {
        images: String,
        labels: String,
        /// Use only the first `limit` samples.
        limit: Option<usize>,
    },
    Synth {
        samples: usize,
        dims: usize,
        noise: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    /// Held out once from the pool with `test_seed`, before splitting.
    pub test_size: usize,
    pub t2_size: usize,
    /// Keep only the first `t1_size` T1 samples after splitting.
    pub t1_size: Option<usize>,
    pub preprocessing: Preprocess,
    pub split_seed: u64,
    pub test_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub init: InitScheme,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegConfig {
    pub layout: Layout,
    /// Initial noise levels; a single value is broadcast.
    pub noise: Vec<f64>,
    /// Initial L2 strengths; a single value is broadcast.
    pub l2: Vec<f64>,
    pub tune: Families,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub anneal_start: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperoptConfig {
    pub optimizer: OptimizerKind,
    pub noise_lr: f64,
    pub l2_lr: f64,
    pub interval: u64,
    pub scale_lr_by_interval: bool,
    pub route: NoiseRoute,
    pub t2_batch_stats: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPolicy {
    /// Cell `i` adds `i` to every training seed.
    Derived,
    /// Every cell uses the same seeds.
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    /// Hyperparameter name in the configured layout, e.g. `noise_0`.
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub axis1: Axis,
    pub axis2: Axis,
    pub seeds: usize,
    pub seed_base: u64,
    pub seed_policy: SeedPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: Mode,
    pub output_dir: String,
    /// Write measured seconds; off keeps every output bit-reproducible.
    pub record_wallclock: bool,
    pub log_interval: u64,
    pub eval_interval: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub reg: RegConfig,
    pub optim: OptimConfig,
    pub hyperopt: HyperoptConfig,
    pub seeds: Seeds,
    pub grid: Option<GridSpec>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

struct Sections {
    map: BTreeMap<(String, String), Entry>,
    headers: BTreeMap<String, usize>,
}

const KNOWN: &[(&str, &[&str])] = &[
    (
        "experiment",
        &["name", "mode", "output_dir", "record_wallclock", "log_interval", "eval_interval"],
    ),
    (
        "data",
        &[
            "source", "images", "labels", "limit", "samples", "dims", "noise", "synth_seed", "classes",
            "test_size", "t2_size", "t1_size", "preprocessing", "split_seed", "test_seed",
        ],
    ),
    ("model", &["hidden", "batch_norm", "init"]),
    ("regularization", &["layout", "noise", "l2", "tune"]),
    ("optim", &["optimizer", "lr", "anneal_start", "epochs", "batch_size"]),
    (
        "hyperopt",
        &["optimizer", "noise_lr", "l2_lr", "interval", "scale_lr_by_interval", "route", "t2_batch_stats"],
    ),
    ("seeds", &["init", "noise", "shuffle"]),
    ("grid", &["axis1", "axis2", "seeds", "seed_base", "seed_policy"]),
];

fn cfg_err(line: usize, message: impl Into<String>) -> LabError {
    LabError::Config {
        line,
        message: message.into(),
    }
}

impl Sections {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut headers = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(line, format!("malformed section header `{content}`")))?
                    .trim()
                    .to_string();
                if !KNOWN.iter().any(|(s, _)| *s == name) {
                    return Err(cfg_err(line, format!("unknown section [{name}]")));
                }
                if headers.insert(name.clone(), line).is_some() {
                    return Err(cfg_err(line, format!("duplicate section [{name}]")));
                }
                section = Some(name);
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| cfg_err(line, format!("expected `key = value`, got `{content}`")))?;
            let key = key.trim().to_string();
            let sec = section
                .clone()
                .ok_or_else(|| cfg_err(line, format!("key `{key}` outside any section")))?;
            let known = KNOWN.iter().find(|(s, _)| *s == sec).map(|(_, k)| *k).unwrap_or(&[]);
            if !known.contains(&key.as_str()) {
                return Err(cfg_err(line, format!("unknown key `{key}` in [{sec}]")));
            }
            let entry = Entry {
                value: value.trim().to_string(),
                line,
                used: false,
            };
            if map.insert((sec.clone(), key.clone()), entry).is_some() {
                return Err(cfg_err(line, format!("duplicate key `{key}` in [{sec}]")));
            }
        }
        Ok(Self { map, headers })
    }

    fn raw(&mut self, sec: &str, key: &str) -> Option<(String, usize)> {
        self.map.get_mut(&(sec.to_string(), key.to_string())).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    fn get<T: FromStr>(&mut self, sec: &str, key: &str, what: &str) -> Result<Option<T>> {
        match self.raw(sec, key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| cfg_err(line, format!("key `{key}`: expected {what}, got `{v}`"))),
        }
    }

    fn or<T: FromStr>(&mut self, sec: &str, key: &str, what: &str, default: T) -> Result<T> {
        Ok(self.get(sec, key, what)?.unwrap_or(default))
    }

    fn bool(&mut self, sec: &str, key: &str, default: bool) -> Result<bool> {
        self.or(sec, key, "true or false", default)
    }

    fn required(&mut self, sec: &str, key: &str) -> Result<(String, usize)> {
        let line = self.headers.get(sec).copied().unwrap_or(0);
        self.raw(sec, key)
            .ok_or_else(|| cfg_err(line, format!("missing required key `{key}` in [{sec}]")))
    }

    fn list<T: FromStr>(&mut self, sec: &str, key: &str, what: &str) -> Result<Option<(Vec<T>, usize)>> {
        match self.raw(sec, key) {
            None => Ok(None),
            Some((v, line)) => parse_list(&v, key, what, line).map(|l| Some((l, line))),
        }
    }

    fn choice<T: Copy>(&mut self, sec: &str, key: &str, options: &[(&str, T)], default: T) -> Result<T> {
        match self.raw(sec, key) {
            None => Ok(default),
            Some((v, line)) => lookup(&v, key, options, line),
        }
    }
}

fn parse_list<T: FromStr>(v: &str, key: &str, what: &str, line: usize) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| cfg_err(line, format!("key `{key}`: expected a list of {what}, got `{s}`")))
        })
        .collect()
}

fn lookup<T: Copy>(v: &str, key: &str, options: &[(&str, T)], line: usize) -> Result<T> {
    options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        cfg_err(line, format!("key `{key}`: expected one of {}, got `{v}`", names.join(" | ")))
    })
}

const MODES: &[(&str, Mode)] = &[
    ("t1t2", Mode::T1T2),
    ("fixed", Mode::Fixed),
    ("grid", Mode::Grid),
    ("hypercheck", Mode::Hypercheck),
];
const OPTIMIZERS: &[(&str, OptimizerKind)] = &[("sgd", OptimizerKind::Sgd), ("adam", OptimizerKind::Adam)];
const LAYOUTS: &[(&str, Layout)] = &[("per_layer", Layout::PerLayer), ("tied", Layout::Tied)];
const INITS: &[(&str, InitScheme)] = &[("he", InitScheme::He), ("lecun", InitScheme::LeCun)];
const ROUTES: &[(&str, NoiseRoute)] = &[("joint", NoiseRoute::Joint), ("per_site", NoiseRoute::PerSite)];
const PREPROCESS: &[(&str, Preprocess)] = &[
    ("none", Preprocess::None),
    ("center", Preprocess::Center),
    ("gcn", Preprocess::Gcn),
];
const POLICIES: &[(&str, SeedPolicy)] = &[("derived", SeedPolicy::Derived), ("shared", SeedPolicy::Shared)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: &T) -> &'static str {
    options.iter().find(|(_, t)| t == v).map(|(n, _)| *n).expect("every variant is named")
}

fn parse_axis(v: &str, key: &str, line: usize) -> Result<Axis> {
    let (name, values) = v
        .split_once(':')
        .ok_or_else(|| cfg_err(line, format!("key `{key}`: expected `name : v1, v2, ...`")))?;
    let values: Vec<f64> = parse_list(values, key, "numbers", line)?;
    if values.is_empty() {
        return Err(cfg_err(line, format!("key `{key}`: axis has no values")));
    }
    Ok(Axis {
        name: name.trim().to_string(),
        values,
    })
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(", ")
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut s = Sections::parse(text)?;
    let (mode, mode_line) = s.required("experiment", "mode")?;
    let mode = lookup(&mode, "mode", MODES, mode_line)?;
    let name = s.or("experiment", "name", "a name", "run".to_string())?;
    let output_dir = s.or("experiment", "output_dir", "a path", "out".to_string())?;
    let record_wallclock = s.bool("experiment", "record_wallclock", false)?;
    let log_interval = s.or("experiment", "log_interval", "an integer", 50u64)?;
    let eval_interval = s.or("experiment", "eval_interval", "an integer", 1usize)?;

    let source = s.choice("data", "source", &[("idx", 0u8), ("synth", 1u8)], 1)?;
    let source = if source == 0 {
        DataSource::Idx {
            images: s.required("data", "images")?.0,
            labels: s.required("data", "labels")?.0,
            limit: s.get("data", "limit", "an integer")?,
        }
    } else {
        DataSource::Synth {
            samples: s.or("data", "samples", "an integer", 1000usize)?,
            dims: s.or("data", "dims", "an integer", 20usize)?,
            noise: s.or("data", "noise", "a number", 1.0f64)?,
            seed: s.or("data", "synth_seed", "an integer", 1u64)?,
        }
    };
    let data = DataConfig {
        source,
        classes: s.or("data", "classes", "an integer", 10usize)?,
        test_size: s.or("data", "test_size", "an integer", 200usize)?,
        t2_size: s.or("data", "t2_size", "an integer", 200usize)?,
        t1_size: s.get("data", "t1_size", "an integer")?,
        preprocessing: s.choice("data", "preprocessing", PREPROCESS, Preprocess::Center)?,
        split_seed: s.or("data", "split_seed", "an integer", 1u64)?,
        test_seed: s.or("data", "test_seed", "an integer", 0u64)?,
    };

    let (hidden, hidden_line) = s
        .list("model", "hidden", "integers")?
        .unwrap_or_else(|| (vec![64, 64], 0));
    if hidden.is_empty() || hidden.contains(&0) {
        return Err(cfg_err(hidden_line, "key `hidden`: need at least one nonzero width"));
    }
    let model = ModelConfig {
        hidden,
        batch_norm: s.bool("model", "batch_norm", false)?,
        init: s.choice("model", "init", INITS, InitScheme::He)?,
    };
    let depth = model.hidden.len() + 1;

    let layout = s.choice("regularization", "layout", LAYOUTS, Layout::PerLayer)?;
    let (n_noise, n_l2) = match layout {
        Layout::Tied => (2, 1),
        Layout::PerLayer => (depth, depth),
    };
    let mut sized = |key: &str, n: usize| -> Result<Vec<f64>> {
        match s.list::<f64>("regularization", key, "numbers")? {
            None => Ok(vec![0.0; n]),
            Some((v, _)) if v.len() == 1 => Ok(vec![v[0]; n]),
            Some((v, line)) if v.len() != n => Err(cfg_err(
                line,
                format!("key `{key}`: {} values for {n} slots", v.len()),
            )),
            Some((v, line)) if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) => {
                Err(cfg_err(line, format!("key `{key}`: values must be finite and non-negative")))
            }
            Some((v, _)) => Ok(v),
        }
    };
    let noise = sized("noise", n_noise)?;
    let l2 = sized("l2", n_l2)?;
    let tune = match s.raw("regularization", "tune") {
        None => Families {
            input_noise: true,
            hidden_noise: true,
            l2: true,
        },
        Some((v, line)) => {
            let mut f = Families::NONE;
            for item in v.split(',').map(str::trim).filter(|x| !x.is_empty()) {
                match item {
                    "input_noise" => f.input_noise = true,
                    "hidden_noise" => f.hidden_noise = true,
                    "l2" => f.l2 = true,
                    "none" => {}
                    other => {
                        return Err(cfg_err(
                            line,
                            format!("key `tune`: unknown family `{other}` (input_noise | hidden_noise | l2 | none)"),
                        ))
                    }
                }
            }
            f
        }
    };
    let reg = RegConfig { layout, noise, l2, tune };

    let optim = OptimConfig {
        optimizer: s.choice("optim", "optimizer", OPTIMIZERS, OptimizerKind::Adam)?,
        lr: s.or("optim", "lr", "a number", 1e-3)?,
        anneal_start: s.or("optim", "anneal_start", "a number", 0.5)?,
        epochs: s.or("optim", "epochs", "an integer", 30usize)?,
        batch_size: s.or("optim", "batch_size", "an integer", 100usize)?,
    };
    let hyper_kind = s.choice("hyperopt", "optimizer", OPTIMIZERS, OptimizerKind::Sgd)?;
    let defaults = match hyper_kind {
        OptimizerKind::Sgd => HyperOptConfig::SGD_DEFAULT,
        OptimizerKind::Adam => HyperOptConfig::ADAM_DEFAULT,
    };
    let hyperopt = HyperoptConfig {
        optimizer: hyper_kind,
        noise_lr: s.or("hyperopt", "noise_lr", "a number", defaults.noise_lr)?,
        l2_lr: s.or("hyperopt", "l2_lr", "a number", defaults.l2_lr)?,
        interval: s.or("hyperopt", "interval", "an integer", defaults.interval)?,
        scale_lr_by_interval: s.bool("hyperopt", "scale_lr_by_interval", false)?,
        route: s.choice("hyperopt", "route", ROUTES, NoiseRoute::Joint)?,
        t2_batch_stats: s.bool("hyperopt", "t2_batch_stats", false)?,
    };
    let seeds = Seeds {
        init: s.or("seeds", "init", "an integer", 1u64)?,
        noise: s.or("seeds", "noise", "an integer", 1u64)?,
        shuffle: s.or("seeds", "shuffle", "an integer", 1u64)?,
    };

    let grid = if s.headers.contains_key("grid") || mode == Mode::Grid {
        let (a1, l1) = s.required("grid", "axis1")?;
        let (a2, l2line) = s.required("grid", "axis2")?;
        Some(GridSpec {
            axis1: parse_axis(&a1, "axis1", l1)?,
            axis2: parse_axis(&a2, "axis2", l2line)?,
            seeds: s.or("grid", "seeds", "an integer", 1usize)?,
            seed_base: s.or("grid", "seed_base", "an integer", 1u64)?,
            seed_policy: s.choice("grid", "seed_policy", POLICIES, SeedPolicy::Derived)?,
        })
    } else {
        None
    };
    debug_assert!(s.map.values().all(|e| e.used || e.line > 0));

    let cfg = ExperimentConfig {
        name,
        mode,
        output_dir,
        record_wallclock,
        log_interval,
        eval_interval,
        data,
        model,
        reg,
        optim,
        hyperopt,
        seeds,
        grid,
        base_dir: PathBuf::from("."),
    };
    cfg.check()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut cfg = parse_config(&text).map_err(|e| match e {
        LabError::Config { line, message } => LabError::Config {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    Ok(cfg)
}

impl ExperimentConfig {
    fn check(&self) -> Result<()> {
        let tc = self.train_config(TrainMode::Fixed);
        tc.validate().map_err(|e| cfg_err(0, e.to_string()))?;
        if let Some(g) = &self.grid {
            for axis in [&g.axis1, &g.axis2] {
                self.hyper_index(&axis.name)?;
                if axis.values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(cfg_err(0, format!("grid axis `{}` has a negative value", axis.name)));
                }
            }
            if g.seeds == 0 {
                return Err(cfg_err(0, "grid needs at least one seed"));
            }
        }
        Ok(())
    }

    pub fn initial_hypers(&self) -> HyperParams {
        HyperParams {
            layout: self.reg.layout,
            noise_std: self.reg.noise.clone(),
            l2: self.reg.l2.clone(),
        }
    }

    /// Index of a hyperparameter by its name in the configured layout.
    pub fn hyper_index(&self, name: &str) -> Result<t1t2_core::HyperIndex> {
        let h = self.initial_hypers();
        h.indices()
            .into_iter()
            .find(|&ix| h.name(ix) == name)
            .ok_or_else(|| {
                let names: Vec<String> = h.indices().into_iter().map(|ix| h.name(ix)).collect();
                cfg_err(0, format!("unknown hyperparameter `{name}`; expected one of {}", names.join(", ")))
            })
    }

    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            hidden: self.model.hidden.clone(),
            batch_norm: self.model.batch_norm,
            init: self.model.init,
            initial_hypers: self.initial_hypers(),
            families: self.reg.tune,
            optimizer: self.optim.optimizer,
            lr: self.optim.lr,
            anneal_start: self.optim.anneal_start,
            hyper: HyperOptConfig {
                kind: self.hyperopt.optimizer,
                noise_lr: self.hyperopt.noise_lr,
                l2_lr: self.hyperopt.l2_lr,
                interval: self.hyperopt.interval,
                scale_lr_by_interval: self.hyperopt.scale_lr_by_interval,
            },
            route: self.hyperopt.route,
            t2_batch_stats: self.hyperopt.t2_batch_stats,
            epochs: self.optim.epochs,
            batch_size: self.optim.batch_size,
            seeds: self.seeds,
            log_interval: self.log_interval,
            eval_interval: self.eval_interval,
        }
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Canonical text with every key written out. Parses back to an equal
    /// config.
    pub fn to_ini(&self) -> String {
        let mut o = String::new();
        let b = |v: bool| if v { "true" } else { "false" };
        let _ = writeln!(o, "[experiment]");
        let _ = writeln!(o, "name = {}", self.name);
        let _ = writeln!(o, "mode = {}", name_of(MODES, &self.mode));
        let _ = writeln!(o, "output_dir = {}", self.output_dir);
        let _ = writeln!(o, "record_wallclock = {}", b(self.record_wallclock));
        let _ = writeln!(o, "log_interval = {}", self.log_interval);
        let _ = writeln!(o, "eval_interval = {}", self.eval_interval);

        let d = &self.data;
        let _ = writeln!(o, "\n[data]");
        match &d.source {
            DataSource::Idx { images, labels, limit } => {
                let _ = writeln!(o, "source = idx");
                let _ = writeln!(o, "images = {images}");
                let _ = writeln!(o, "labels = {labels}");
                if let Some(l) = limit {
                    let _ = writeln!(o, "limit = {l}");
                }
            }
            DataSource::Synth { samples, dims, noise, seed } => {
                let _ = writeln!(o, "source = synth");
                let _ = writeln!(o, "samples = {samples}");
                let _ = writeln!(o, "dims = {dims}");
                let _ = writeln!(o, "noise = {}", fmt_f64(*noise));
                let _ = writeln!(o, "synth_seed = {seed}");
            }
        }
        let _ = writeln!(o, "classes = {}", d.classes);
        let _ = writeln!(o, "test_size = {}", d.test_size);
        let _ = writeln!(o, "t2_size = {}", d.t2_size);
        if let Some(t) = d.t1_size {
            let _ = writeln!(o, "t1_size = {t}");
        }
        let _ = writeln!(o, "preprocessing = {}", name_of(PREPROCESS, &d.preprocessing));
        let _ = writeln!(o, "split_seed = {}", d.split_seed);
        let _ = writeln!(o, "test_seed = {}", d.test_seed);

        let _ = writeln!(o, "\n[model]");
        let _ = writeln!(o, "hidden = {}", join(&self.model.hidden, |h| h.to_string()));
        let _ = writeln!(o, "batch_norm = {}", b(self.model.batch_norm));
        let _ = writeln!(o, "init = {}", name_of(INITS, &self.model.init));

        let r = &self.reg;
        let _ = writeln!(o, "\n[regularization]");
        let _ = writeln!(o, "layout = {}", name_of(LAYOUTS, &r.layout));
        let _ = writeln!(o, "noise = {}", join(&r.noise, |v| fmt_f64(*v)));
        let _ = writeln!(o, "l2 = {}", join(&r.l2, |v| fmt_f64(*v)));
        let mut fam = Vec::new();
        if r.tune.input_noise {
            fam.push("input_noise");
        }
        if r.tune.hidden_noise {
            fam.push("hidden_noise");
        }
        if r.tune.l2 {
            fam.push("l2");
        }
        if fam.is_empty() {
            fam.push("none");
        }
        let _ = writeln!(o, "tune = {}", fam.join(", "));

        let p = &self.optim;
        let _ = writeln!(o, "\n[optim]");
        let _ = writeln!(o, "optimizer = {}", name_of(OPTIMIZERS, &p.optimizer));
        let _ = writeln!(o, "lr = {}", fmt_f64(p.lr));
        let _ = writeln!(o, "anneal_start = {}", fmt_f64(p.anneal_start));
        let _ = writeln!(o, "epochs = {}", p.epochs);
        let _ = writeln!(o, "batch_size = {}", p.batch_size);

        let h = &self.hyperopt;
        let _ = writeln!(o, "\n[hyperopt]");
        let _ = writeln!(o, "optimizer = {}", name_of(OPTIMIZERS, &h.optimizer));
        let _ = writeln!(o, "noise_lr = {}", fmt_f64(h.noise_lr));
        let _ = writeln!(o, "l2_lr = {}", fmt_f64(h.l2_lr));
        let _ = writeln!(o, "interval = {}", h.interval);
        let _ = writeln!(o, "scale_lr_by_interval = {}", b(h.scale_lr_by_interval));
        let _ = writeln!(o, "route = {}", name_of(ROUTES, &h.route));
        let _ = writeln!(o, "t2_batch_stats = {}", b(h.t2_batch_stats));

        let _ = writeln!(o, "\n[seeds]");
        let _ = writeln!(o, "init = {}", self.seeds.init);
        let _ = writeln!(o, "noise = {}", self.seeds.noise);
        let _ = writeln!(o, "shuffle = {}", self.seeds.shuffle);

        if let Some(g) = &self.grid {
            let axis = |a: &Axis| format!("{} : {}", a.name, join(&a.values, |v| fmt_f64(*v)));
            let _ = writeln!(o, "\n[grid]");
            let _ = writeln!(o, "axis1 = {}", axis(&g.axis1));
            let _ = writeln!(o, "axis2 = {}", axis(&g.axis2));
            let _ = writeln!(o, "seeds = {}", g.seeds);
            let _ = writeln!(o, "seed_base = {}", g.seed_base);
            let _ = writeln!(o, "seed_policy = {}", name_of(POLICIES, &g.seed_policy));
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[experiment]\nmode = t1t2\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.mode, Mode::T1T2);
        assert_eq!(c.optim.batch_size, 100);
        assert_eq!(c.hyperopt.interval, 10);
        assert_eq!(c.hyperopt.noise_lr, 0.1);
        assert_eq!(c.hyperopt.l2_lr, 1e-4);
        assert_eq!(c.optim.lr, 1e-3);
        assert_eq!(c.model.hidden, vec![64, 64]);
        assert_eq!(c.reg.noise, vec![0.0; 3]);
        assert!(!c.record_wallclock);
        assert!(c.grid.is_none());
    }

    #[test]
    fn adam_hyperopt_defaults() {
        let c = parse_config("[experiment]\nmode = t1t2\n[hyperopt]\noptimizer = adam\n").unwrap();
        assert_eq!((c.hyperopt.noise_lr, c.hyperopt.l2_lr), (1e-3, 1e-6));
    }

    #[test]
    fn type_error_names_key_and_line() {
        let err = parse_config("[experiment]\nmode = t1t2\n\n[optim]\nbatch_size = ten\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 5") && msg.contains("batch_size"), "{msg}");
    }

    #[test]
    fn unknown_and_missing_keys_are_errors() {
        let err = parse_config("[experiment]\nmode = t1t2\nbatchsize = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 3") && err.to_string().contains("batchsize"));
        let err = parse_config("[experiment]\nname = x\n").unwrap_err();
        assert!(err.to_string().contains("mode"), "{err}");
        let err = parse_config("[experiment]\nmode = grid\n").unwrap_err();
        assert!(err.to_string().contains("axis1"), "{err}");
        assert!(parse_config("[bogus]\n").is_err());
        assert!(parse_config("[experiment]\nmode = t1t2\n[data]\nsource = idx\n").is_err());
    }

    #[test]
    fn list_lengths_checked() {
        let err = parse_config("[experiment]\nmode = t1t2\n[regularization]\nnoise = 0.1, 0.2\n").unwrap_err();
        assert!(err.to_string().contains("2 values for 3 slots"), "{err}");
        let c = parse_config("[experiment]\nmode = t1t2\n[regularization]\nlayout = tied\nnoise = 0.1, 0.2\nl2 = 0.5\n")
            .unwrap();
        assert_eq!(c.initial_hypers(), HyperParams::tied(0.1, 0.2, 0.5));
    }

    #[test]
    fn round_trip() {
        let text = "[experiment]\nmode = grid\nname = g\n[data]\nsource = idx\nimages = a.gz\nlabels = b.gz\nlimit = 500\nt1_size = 50\n\
                    [model]\nhidden = 8, 4\nbatch_norm = true\n[regularization]\nnoise = 0.1, 0.3, 1e-7\nl2 = 0.001\ntune = l2\n\
                    [optim]\nlr = 0.003\n[hyperopt]\nroute = per_site\n[grid]\naxis1 = noise_0 : 0, 0.25, 1.5\naxis2 = l2_1 : 0\nseed_policy = shared\n";
        let c = parse_config(text).unwrap();
        let again = parse_config(&c.to_ini()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_ini(), again.to_ini());
        let m = parse_config(MINIMAL).unwrap();
        assert_eq!(parse_config(&m.to_ini()).unwrap(), m);
    }

    #[test]
    fn grid_axis_must_name_a_hyperparameter() {
        let err = parse_config("[experiment]\nmode = grid\n[grid]\naxis1 = sigma : 1\naxis2 = l2_1 : 0\n").unwrap_err();
        assert!(err.to_string().contains("noise_0"), "{err}");
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.0, 1e-300, 0.1, 1.5, 123456.789, 1e20, 3e-6] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}

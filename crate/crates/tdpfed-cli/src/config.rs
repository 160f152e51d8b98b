//! Line-oriented sectioned key-value config files.
//!
//! Grammar: `[section]` headers, `key = value` lines, `#` comments and
//! blank lines. Sections are `[experiment]`, `[data]`, `[fl]`, `[opt]` and
//! `[model]`; unknown sections and keys are rejected with their line
//! number. `layer` is the only repeatable key. Defaults follow the MNIST
//! reference setup. The resolved config echoes back through
//! [`to_text`] such that re-parsing reproduces it exactly.

use std::fmt;
use std::path::PathBuf;
use tdpfed::layers::{
    dnn_model_spec, rank_for_target_cr, Activation, LayerKind, LayerSpec, ModelSpec,
};
use tdpfed::simulator::{
    AggregationStrategy, DataConfig, Parallelism, SimConfig,
};

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "config error at line {}: {}", self.line, self.message)
        } else {
            write!(f, "config error: {}", self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError { line, message: message.into() }
}

#[derive(Debug, Clone, PartialEq)]
enum LayerRankSpec {
    Rank(usize),
    TargetCr(f64),
}

#[derive(Debug, Default)]
struct Builder {
    seed: Option<u64>,
    strategy: Option<AggregationStrategy>,
    eval_cadence: Option<usize>,
    als_iters: Option<usize>,
    train_only_sampled: Option<bool>,

    source: Option<String>,
    classes: Option<usize>,
    dim: Option<usize>,
    n_per_class: Option<usize>,
    n_test_per_class: Option<usize>,
    separation: Option<f64>,
    classes_per_client: Option<usize>,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,

    k: Option<usize>,
    s_clients: Option<usize>,
    t_rounds: Option<usize>,
    tau: Option<usize>,
    batch_size: Option<usize>,

    lambda: Option<f64>,
    beta: Option<f64>,
    eta: Option<f64>,
    eta_p: Option<f64>,
    s: Option<usize>,
    s_prime: Option<usize>,

    preset: Option<String>,
    target_cr: Option<f64>,
    layers: Vec<(usize, LayerKind, Activation, LayerRankSpec)>,
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| err(line, format!("invalid value '{value}' for {key}")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, format!("invalid value '{value}' for {key} (true|false)"))),
    }
}

fn parse_layer(line: usize, value: &str) -> Result<(LayerKind, Activation, LayerRankSpec), ConfigError> {
    let tokens: Vec<&str> = value.split_whitespace().collect();
    if tokens.len() != 5 || tokens[0] != "linear" {
        return Err(err(
            line,
            format!("layer must be 'linear <in> <out> <relu|softmax|none> rank=<R>|cr=<X>', got '{value}'"),
        ));
    }
    let i_in: usize = parse_num(line, "[model].layer input", tokens[1])?;
    let i_out: usize = parse_num(line, "[model].layer output", tokens[2])?;
    let activation = match tokens[3] {
        "relu" => Activation::Relu,
        "softmax" => Activation::Softmax,
        "none" => Activation::None,
        other => return Err(err(line, format!("unknown activation '{other}'"))),
    };
    let rank = if let Some(r) = tokens[4].strip_prefix("rank=") {
        LayerRankSpec::Rank(parse_num(line, "[model].layer rank", r)?)
    } else if let Some(cr) = tokens[4].strip_prefix("cr=") {
        LayerRankSpec::TargetCr(parse_num(line, "[model].layer cr", cr)?)
    } else {
        return Err(err(line, format!("layer needs rank=<R> or cr=<X>, got '{}'", tokens[4])));
    };
    Ok((LayerKind::Linear { i_out, i_in }, activation, rank))
}

/// Parses a config document into a validated [`SimConfig`]. The
/// `parallelism` field is left at its default; the CLI applies the
/// `TDPFED_THREADS` policy afterwards.
pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let mut b = Builder::default();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            match name {
                "experiment" | "data" | "fl" | "opt" | "model" => section = name.to_string(),
                other => return Err(err(line_no, format!("unknown section [{other}]"))),
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(line_no, format!("expected 'key = value', got '{line}'")));
        };
        let (key, value) = (key.trim(), value.trim());
        macro_rules! dup {
            ($field:expr) => {
                if $field.is_some() {
                    return Err(err(line_no, format!("duplicate key '{key}' in [{section}]")));
                }
            };
        }
        match (section.as_str(), key) {
            ("experiment", "seed") => {
                dup!(b.seed);
                b.seed = Some(parse_num(line_no, "[experiment].seed", value)?);
            }
            ("experiment", "strategy") => {
                dup!(b.strategy);
                b.strategy = Some(AggregationStrategy::parse(value).ok_or_else(|| {
                    err(line_no, format!("[experiment].strategy must be afm|act, got '{value}'"))
                })?);
            }
            ("experiment", "eval_cadence") => {
                dup!(b.eval_cadence);
                b.eval_cadence = Some(parse_num(line_no, "[experiment].eval_cadence", value)?);
            }
            ("experiment", "als_iters") => {
                dup!(b.als_iters);
                b.als_iters = Some(parse_num(line_no, "[experiment].als_iters", value)?);
            }
            ("experiment", "train_only_sampled") => {
                dup!(b.train_only_sampled);
                b.train_only_sampled = Some(parse_bool(line_no, "[experiment].train_only_sampled", value)?);
            }
            ("data", "source") => {
                dup!(b.source);
                if value != "synthetic" && value != "idx" {
                    return Err(err(line_no, format!("[data].source must be synthetic|idx, got '{value}'")));
                }
                b.source = Some(value.to_string());
            }
            ("data", "classes") => {
                dup!(b.classes);
                b.classes = Some(parse_num(line_no, "[data].classes", value)?);
            }
            ("data", "dim") => {
                dup!(b.dim);
                b.dim = Some(parse_num(line_no, "[data].dim", value)?);
            }
            ("data", "n_per_class") => {
                dup!(b.n_per_class);
                b.n_per_class = Some(parse_num(line_no, "[data].n_per_class", value)?);
            }
            ("data", "n_test_per_class") => {
                dup!(b.n_test_per_class);
                b.n_test_per_class = Some(parse_num(line_no, "[data].n_test_per_class", value)?);
            }
            ("data", "separation") => {
                dup!(b.separation);
                b.separation = Some(parse_num(line_no, "[data].separation", value)?);
            }
            ("data", "classes_per_client") => {
                dup!(b.classes_per_client);
                b.classes_per_client = Some(parse_num(line_no, "[data].classes_per_client", value)?);
            }
            ("data", "train_images") => {
                dup!(b.train_images);
                b.train_images = Some(PathBuf::from(value));
            }
            ("data", "train_labels") => {
                dup!(b.train_labels);
                b.train_labels = Some(PathBuf::from(value));
            }
            ("data", "test_images") => {
                dup!(b.test_images);
                b.test_images = Some(PathBuf::from(value));
            }
            ("data", "test_labels") => {
                dup!(b.test_labels);
                b.test_labels = Some(PathBuf::from(value));
            }
            ("fl", "K") => {
                dup!(b.k);
                b.k = Some(parse_num(line_no, "[fl].K", value)?);
            }
            ("fl", "S") => {
                dup!(b.s_clients);
                b.s_clients = Some(parse_num(line_no, "[fl].S", value)?);
            }
            ("fl", "T") => {
                dup!(b.t_rounds);
                b.t_rounds = Some(parse_num(line_no, "[fl].T", value)?);
            }
            ("fl", "tau") => {
                dup!(b.tau);
                b.tau = Some(parse_num(line_no, "[fl].tau", value)?);
            }
            ("fl", "batch_size") => {
                dup!(b.batch_size);
                b.batch_size = Some(parse_num(line_no, "[fl].batch_size", value)?);
            }
            ("opt", "lambda") => {
                dup!(b.lambda);
                b.lambda = Some(parse_num(line_no, "[opt].lambda", value)?);
            }
            ("opt", "beta") => {
                dup!(b.beta);
                b.beta = Some(parse_num(line_no, "[opt].beta", value)?);
            }
            ("opt", "eta") => {
                dup!(b.eta);
                b.eta = Some(parse_num(line_no, "[opt].eta", value)?);
            }
            ("opt", "eta_p") => {
                dup!(b.eta_p);
                b.eta_p = Some(parse_num(line_no, "[opt].eta_p", value)?);
            }
            ("opt", "s") => {
                dup!(b.s);
                b.s = Some(parse_num(line_no, "[opt].s", value)?);
            }
            ("opt", "s_prime") => {
                dup!(b.s_prime);
                b.s_prime = Some(parse_num(line_no, "[opt].s_prime", value)?);
            }
            ("model", "preset") => {
                dup!(b.preset);
                b.preset = Some(value.to_string());
            }
            ("model", "target_cr") => {
                dup!(b.target_cr);
                b.target_cr = Some(parse_num(line_no, "[model].target_cr", value)?);
            }
            ("model", "layer") => {
                let (kind, act, rank) = parse_layer(line_no, value)?;
                b.layers.push((line_no, kind, act, rank));
            }
            ("", _) => return Err(err(line_no, format!("key '{key}' before any section"))),
            (sec, _) => return Err(err(line_no, format!("unknown key '{key}' in [{sec}]"))),
        }
    }
    build(b)
}

fn build(b: Builder) -> Result<SimConfig, ConfigError> {
    let model = match (&b.preset, b.layers.is_empty()) {
        (Some(_), false) => {
            return Err(err(0, "[model] cannot mix preset with layer lines".to_string()))
        }
        (Some(preset), true) => {
            if preset != "dnn" {
                return Err(err(0, format!("[model].preset must be 'dnn' for runs, got '{preset}'")));
            }
            dnn_model_spec(b.target_cr.unwrap_or(2.0))
        }
        (None, false) => {
            let layers: Vec<LayerSpec> = b
                .layers
                .iter()
                .map(|(line, kind, activation, rank)| {
                    let rank = match rank {
                        LayerRankSpec::Rank(r) => *r,
                        LayerRankSpec::TargetCr(cr) => {
                            if *cr <= 0.0 {
                                return Err(err(*line, "layer cr must be > 0".to_string()));
                            }
                            rank_for_target_cr(kind, *cr)
                        }
                    };
                    Ok(LayerSpec { kind: *kind, rank, activation: *activation })
                })
                .collect::<Result<_, ConfigError>>()?;
            ModelSpec::new(layers).map_err(|e| err(0, format!("[model] invalid: {e}")))?
        }
        (None, true) => return Err(err(0, "[model] needs a preset or layer lines".to_string())),
    };

    let data = match b.source.as_deref() {
        Some("idx") => {
            let need = |v: Option<PathBuf>, name: &str| {
                v.ok_or_else(|| err(0, format!("[data].{name} is required for source = idx")))
            };
            DataConfig::Idx {
                train_images: need(b.train_images, "train_images")?,
                train_labels: need(b.train_labels, "train_labels")?,
                test_images: need(b.test_images, "test_images")?,
                test_labels: need(b.test_labels, "test_labels")?,
            }
        }
        Some("synthetic") | None => DataConfig::Synthetic {
            classes: b.classes.unwrap_or(10),
            dim: b.dim.unwrap_or(784),
            n_per_class: b.n_per_class.unwrap_or(600),
            n_test_per_class: b.n_test_per_class.unwrap_or(100),
            separation: b.separation.unwrap_or(3.0),
        },
        Some(other) => return Err(err(0, format!("unknown data source '{other}'"))),
    };

    let config = SimConfig {
        model,
        data,
        classes_per_client: b.classes_per_client.unwrap_or(2),
        clients: b.k.unwrap_or(20),
        sampled: b.s_clients.unwrap_or(20),
        rounds: b.t_rounds.unwrap_or(800),
        tau: b.tau.unwrap_or(23),
        batch_size: b.batch_size.unwrap_or(20),
        lambda: b.lambda.unwrap_or(12.0),
        beta: b.beta.unwrap_or(1.0),
        eta: b.eta.unwrap_or(8e-4),
        eta_p: b.eta_p.unwrap_or(0.08),
        s: b.s.unwrap_or(5),
        s_prime: b.s_prime.unwrap_or(17),
        strategy: b.strategy.unwrap_or(AggregationStrategy::Afm),
        seed: b.seed.unwrap_or(42),
        eval_cadence: b.eval_cadence.unwrap_or(5),
        train_only_sampled: b.train_only_sampled.unwrap_or(false),
        als_iters: b.als_iters.unwrap_or(25),
        parallelism: Parallelism::Sequential,
    };
    config
        .validate()
        .map_err(|e| err(0, e.to_string()))?;
    Ok(config)
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips.
    let s = format!("{v}");
    if s.parse::<f64>() == Ok(v) {
        s
    } else {
        format!("{v:.17e}")
    }
}

/// Serializes the resolved config; `parse_config(to_text(c)) == c` (up to
/// the env-controlled parallelism field).
pub fn to_text(c: &SimConfig) -> String {
    let mut out = String::new();
    out.push_str("[experiment]\n");
    out.push_str(&format!("seed = {}\n", c.seed));
    out.push_str(&format!("strategy = {}\n", c.strategy.name()));
    out.push_str(&format!("eval_cadence = {}\n", c.eval_cadence));
    out.push_str(&format!("als_iters = {}\n", c.als_iters));
    out.push_str(&format!("train_only_sampled = {}\n", c.train_only_sampled));
    out.push_str("\n[data]\n");
    match &c.data {
        DataConfig::Synthetic { classes, dim, n_per_class, n_test_per_class, separation } => {
            out.push_str("source = synthetic\n");
            out.push_str(&format!("classes = {classes}\n"));
            out.push_str(&format!("dim = {dim}\n"));
            out.push_str(&format!("n_per_class = {n_per_class}\n"));
            out.push_str(&format!("n_test_per_class = {n_test_per_class}\n"));
            out.push_str(&format!("separation = {}\n", fmt_f64(*separation)));
        }
        DataConfig::Idx { train_images, train_labels, test_images, test_labels } => {
            out.push_str("source = idx\n");
            out.push_str(&format!("train_images = {}\n", train_images.display()));
            out.push_str(&format!("train_labels = {}\n", train_labels.display()));
            out.push_str(&format!("test_images = {}\n", test_images.display()));
            out.push_str(&format!("test_labels = {}\n", test_labels.display()));
        }
    }
    out.push_str(&format!("classes_per_client = {}\n", c.classes_per_client));
    out.push_str("\n[fl]\n");
    out.push_str(&format!("K = {}\n", c.clients));
    out.push_str(&format!("S = {}\n", c.sampled));
    out.push_str(&format!("T = {}\n", c.rounds));
    out.push_str(&format!("tau = {}\n", c.tau));
    out.push_str(&format!("batch_size = {}\n", c.batch_size));
    out.push_str("\n[opt]\n");
    out.push_str(&format!("lambda = {}\n", fmt_f64(c.lambda)));
    out.push_str(&format!("beta = {}\n", fmt_f64(c.beta)));
    out.push_str(&format!("eta = {}\n", fmt_f64(c.eta)));
    out.push_str(&format!("eta_p = {}\n", fmt_f64(c.eta_p)));
    out.push_str(&format!("s = {}\n", c.s));
    out.push_str(&format!("s_prime = {}\n", c.s_prime));
    out.push_str("\n[model]\n");
    for l in &c.model.layers {
        let LayerKind::Linear { i_out, i_in } = l.kind else {
            unreachable!("run configs are linear-only");
        };
        let act = match l.activation {
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
            Activation::None => "none",
        };
        out.push_str(&format!("layer = linear {i_in} {i_out} {act} rank={}\n", l.rank));
    }
    out
}

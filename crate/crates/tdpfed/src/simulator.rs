//! Server loop: initialization, broadcast, client updates, client sampling,
//! aggregation, evaluation and metrics.
//!
//! A run is a pure function of its configuration. Every random draw flows
//! through a named ChaCha stream derived from the run seed, each client owns
//! its state exclusively during an update, and results reduce in ascending
//! client id, so the output is identical for any worker count.

use crate::aggregation::{afm, act, make_broadcast, AggregationInput, ClientContribution};
use crate::data::{load_idx, partition_noniid, synthetic_dataset, Dataset};
use crate::error::{Error, Result};
use crate::layers::{LayerKind, ModelSpec};
use crate::model::{PersonalizedModel, TensorizedLayer, TensorizedModel, predict};
use crate::layers::{TensorizedConv, TensorizedLinear};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{DenseTensor, Matrix};
use crate::training::{client_update, ClientState, ClientUpdateOutcome, LocalHyper};
use rand::Rng;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

/// Named RNG streams. One run seed fans out into independent ChaCha streams
/// so no draw order depends on another subsystem.
pub mod seeds {
    pub const GLOBAL_INIT: u64 = 1;
    pub const SAMPLE_BASE: u64 = 1 << 32;
    pub const CLIENT_DATA_BASE: u64 = 2 << 32;
    pub const CLIENT_INIT_BASE: u64 = 3 << 32;
    pub const ACT_ALS_BASE: u64 = 4 << 32;
    pub const SYNTH_TRAIN: u64 = 5 << 32;
    pub const SYNTH_TEST: u64 = (5 << 32) + 1;
    pub const PARTITION: u64 = 6 << 32;

    /// splitmix64 of `seed ^ tag`; derives plain `u64` seeds for APIs that
    /// take one (the ALS refit, the synthetic generator).
    pub fn mix(seed: u64, tag: u64) -> u64 {
        let mut z = (seed ^ tag).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn stream(seed: u64, tag: u64) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(tag);
        rng
    }
}

/// Server aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationStrategy {
    Afm,
    Act,
}

impl AggregationStrategy {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "afm" => Some(Self::Afm),
            "act" => Some(Self::Act),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Afm => "afm",
            Self::Act => "act",
        }
    }
}

/// How client updates execute within a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Rayon pool; 0 threads means the library default.
    #[cfg(feature = "parallel")]
    Rayon { threads: usize },
}

impl Default for Parallelism {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        Parallelism::Rayon { threads: 0 }
    }
    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        Parallelism::Sequential
    }
}

impl Parallelism {
    /// Honors `TDPFED_THREADS`: unset or 0 means auto, 1 means sequential.
    pub fn from_env() -> Self {
        match std::env::var("TDPFED_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            Some(1) => Parallelism::Sequential,
            #[cfg(feature = "parallel")]
            Some(n) => Parallelism::Rayon { threads: n },
            #[cfg(feature = "parallel")]
            None => Parallelism::Rayon { threads: 0 },
            #[cfg(not(feature = "parallel"))]
            _ => Parallelism::Sequential,
        }
    }
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Synthetic {
        classes: usize,
        dim: usize,
        n_per_class: usize,
        n_test_per_class: usize,
        separation: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: ModelSpec,
    pub data: DataConfig,
    pub classes_per_client: usize,
    /// K: total clients.
    pub clients: usize,
    /// S: clients aggregated per round.
    pub sampled: usize,
    /// T: global communication rounds.
    pub rounds: usize,
    /// tau: local update rounds per global round.
    pub tau: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub beta: f64,
    /// Factor (Adam) learning rate.
    pub eta: f64,
    /// Personalized (Nesterov) learning rate.
    pub eta_p: f64,
    /// Personalized steps per local round.
    pub s: usize,
    /// Factor sweeps per local round.
    pub s_prime: usize,
    pub strategy: AggregationStrategy,
    pub seed: u64,
    /// Evaluate (and emit a metrics row) every this many rounds.
    pub eval_cadence: usize,
    /// Train only the sampled subset instead of every client.
    pub train_only_sampled: bool,
    /// ALS iterations for the ACT refit.
    pub als_iters: usize,
    pub parallelism: Parallelism,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.clients == 0 {
            return bad("[fl].K must be >= 1".into());
        }
        if self.sampled == 0 || self.sampled > self.clients {
            return bad(format!(
                "[fl].S must satisfy 1 <= S <= K, got S={} K={}",
                self.sampled, self.clients
            ));
        }
        if self.rounds == 0 {
            return bad("[fl].T must be >= 1".into());
        }
        if self.tau == 0 {
            return bad("[fl].tau must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("[fl].batch_size must be >= 1".into());
        }
        if self.lambda <= 0.0 {
            return bad("[opt].lambda must be > 0".into());
        }
        if self.beta <= 0.0 {
            return bad("[opt].beta must be > 0".into());
        }
        if self.eta < 0.0 || self.eta_p < 0.0 {
            return bad("[opt].eta and [opt].eta_p must be >= 0".into());
        }
        if self.s == 0 || self.s_prime == 0 {
            return bad("[opt].s and [opt].s_prime must be >= 1".into());
        }
        if self.eval_cadence == 0 {
            return bad("[experiment].eval_cadence must be >= 1".into());
        }
        if self.als_iters == 0 {
            return bad("[experiment].als_iters must be >= 1".into());
        }
        if self.classes_per_client == 0 {
            return bad("[data].classes_per_client must be >= 1".into());
        }
        if let DataConfig::Synthetic { classes, separation, .. } = &self.data {
            if *classes < 2 {
                return bad("[data].classes must be >= 2".into());
            }
            if !separation.is_finite() || *separation < 0.0 {
                return bad("[data].separation must be >= 0".into());
            }
        }
        Ok(())
    }
}

/// One emitted metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub acc_personalized_mean: f64,
    pub acc_personalized_std: f64,
    pub acc_global: f64,
    pub loss_train_mean: f64,
    pub prox_gap_mean: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    /// Measured wall-clock seconds for the round. Excluded from the
    /// deterministic CSV surface (see [`write_metrics_csv`]).
    pub wall_s: f64,
}

pub const METRICS_CSV_HEADER: &str = "round,acc_personalized_mean,acc_personalized_std,acc_global,loss_train_mean,prox_gap_mean,uplink_bytes,downlink_bytes,wall_s";

/// 17 significant digits, round-trippable through `f64` parsing.
pub fn format_g17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serializes metrics rows. With `include_wall` false (the default surface)
/// the wall_s column is written as 0 so that replayed runs produce
/// byte-identical files; pass true to record measured timings instead.
pub fn write_metrics_csv(
    w: &mut impl Write,
    metrics: &[RoundMetrics],
    include_wall: bool,
) -> std::io::Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for m in metrics {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            m.round,
            format_g17(m.acc_personalized_mean),
            format_g17(m.acc_personalized_std),
            format_g17(m.acc_global),
            format_g17(m.loss_train_mean),
            format_g17(m.prox_gap_mean),
            m.uplink_bytes,
            m.downlink_bytes,
            format_g17(if include_wall { m.wall_s } else { 0.0 })
        )?;
    }
    Ok(())
}

/// Seeded factor initialization: uniform(-0.5/sqrt(R), +0.5/sqrt(R))
/// entries, zero biases. Deterministic in `seed`.
pub fn init_global(spec: &ModelSpec, seed: u64) -> TensorizedModel {
    let mut rng = seeds::stream(seed, seeds::GLOBAL_INIT);
    let layers = spec
        .layers
        .iter()
        .map(|l| {
            let bound = 0.5 / (l.rank as f64).sqrt();
            let mut draw = |rows: usize| {
                let data = (0..rows * l.rank)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Matrix::new(rows, l.rank, data).expect("positive extents")
            };
            match l.kind {
                LayerKind::Linear { i_out, i_in } => TensorizedLayer::Linear(
                    TensorizedLinear::new(draw(i_out), draw(i_in), vec![0.0; i_out])
                        .expect("consistent dims"),
                ),
                LayerKind::Conv { i_d, i_s, i_t } => TensorizedLayer::Conv(
                    TensorizedConv::new(draw(i_d), draw(i_d), draw(i_s), draw(i_t))
                        .expect("consistent dims"),
                ),
            }
        })
        .collect();
    TensorizedModel { layers }
}

/// Uniform without-replacement draw of `s` clients from a per-round stream;
/// returns sorted ids.
pub fn sample_clients(k: usize, s: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if s > k {
        return Err(Error::InvalidConfig(format!("cannot sample {s} of {k} clients")));
    }
    let mut rng = seeds::stream(seed, seeds::SAMPLE_BASE + round as u64);
    let mut ids: Vec<usize> = (0..k).collect();
    for i in 0..s {
        let j = rng.random_range(i..ids.len());
        ids.swap(i, j);
    }
    ids.truncate(s);
    ids.sort_unstable();
    Ok(ids)
}

/// Accuracy of a prediction function over one test shard.
fn shard_accuracy(
    forward: &mut dyn FnMut(&DenseTensor) -> Result<Vec<f64>>,
    dataset: &Dataset,
    shard: &[usize],
) -> Result<f64> {
    let mut correct = 0usize;
    for &i in shard {
        let x = DenseTensor::new(dataset.feature_shape.clone(), dataset.feature(i).to_vec())?;
        let logits = forward(&x)?;
        if predict(&logits) == dataset.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / shard.len() as f64)
}

/// Per-client personalized accuracy on each client's own test shard, plus
/// the composed global model's accuracy weighted by shard size.
pub fn evaluate(
    clients: &[ClientState],
    spec: &ModelSpec,
    test: &Dataset,
    global: &TensorizedModel,
) -> Result<(Vec<f64>, f64)> {
    let composed: Vec<DenseTensor> = global.layers.iter().map(|l| l.compose()).collect();
    let biases: Vec<Vec<f64>> = global.layers.iter().map(|l| l.bias().to_vec()).collect();
    let global_dense = PersonalizedModel::from_composed(&composed, &biases)?;

    let mut personalized = Vec::with_capacity(clients.len());
    let mut global_weighted = 0.0;
    let mut total_weight = 0.0;
    for c in clients {
        if c.test_shard.is_empty() {
            return Err(Error::EmptyShard { client: c.id });
        }
        let mut f_personal = |x: &DenseTensor| c.theta.forward(spec, x);
        personalized.push(shard_accuracy(&mut f_personal, test, &c.test_shard)?);
        let mut f_global = |x: &DenseTensor| global_dense.forward(spec, x);
        let acc = shard_accuracy(&mut f_global, test, &c.test_shard)?;
        global_weighted += acc * c.test_shard.len() as f64;
        total_weight += c.test_shard.len() as f64;
    }
    Ok((personalized, global_weighted / total_weight))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn find_nonfinite_layer(model: &TensorizedModel) -> Option<usize> {
    model.layers.iter().position(|l| {
        (0..l.factor_count()).any(|n| l.factor(n).data().iter().any(|v| !v.is_finite()))
            || l.bias().iter().any(|v| !v.is_finite())
    })
}

fn check_outcome_finite(round: usize, client: usize, out: &ClientUpdateOutcome) -> Result<()> {
    if !out.train_loss_mean.is_finite() {
        return Err(Error::NumericDivergence {
            round,
            client,
            layer: 0,
            what: format!("training loss {}", out.train_loss_mean),
        });
    }
    if let Some(layer) = find_nonfinite_layer(&out.factors) {
        return Err(Error::NumericDivergence {
            round,
            client,
            layer,
            what: "returned factor matrices".into(),
        });
    }
    Ok(())
}

fn load_data(config: &SimConfig) -> Result<(Dataset, Dataset)> {
    match &config.data {
        DataConfig::Synthetic {
            classes,
            dim,
            n_per_class,
            n_test_per_class,
            separation,
        } => {
            let train = synthetic_dataset(
                seeds::mix(config.seed, seeds::SYNTH_TRAIN),
                *classes,
                *dim,
                *n_per_class,
                *separation,
            )?;
            let test = synthetic_dataset(
                seeds::mix(config.seed, seeds::SYNTH_TEST),
                *classes,
                *dim,
                *n_test_per_class,
                *separation,
            )?;
            Ok((train, test))
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
        )),
    }
}

fn make_clients(
    config: &SimConfig,
    train: &Dataset,
    test: &Dataset,
    global: &TensorizedModel,
) -> Result<Vec<ClientState>> {
    let partition = partition_noniid(
        train,
        test,
        config.clients,
        config.classes_per_client,
        seeds::mix(config.seed, seeds::PARTITION),
    )?;
    Ok((0..config.clients)
        .map(|k| {
            let mut init_rng = seeds::stream(config.seed, seeds::CLIENT_INIT_BASE + k as u64);
            ClientState {
                id: k,
                train_shard: partition.train_shards[k].clone(),
                test_shard: partition.test_shards[k].clone(),
                theta: PersonalizedModel::init(&config.model, &mut init_rng),
                factors: global.clone(),
                personalized_opt: Optimizer::new(OptimizerKind::nesterov(), config.eta_p),
                factor_opt: Optimizer::new(OptimizerKind::adam(), config.eta),
                rng: seeds::stream(config.seed, seeds::CLIENT_DATA_BASE + k as u64),
            }
        })
        .collect())
}

fn run_updates(
    clients: &mut [ClientState],
    spec: &ModelSpec,
    train: &Dataset,
    broadcast: &TensorizedModel,
    hyper: &LocalHyper,
    parallelism: Parallelism,
    update_set: &[usize],
) -> Vec<Result<ClientUpdateOutcome>> {
    let in_set = |id: usize| update_set.binary_search(&id).is_ok();
    match parallelism {
        Parallelism::Sequential => clients
            .iter_mut()
            .map(|c| {
                if in_set(c.id) {
                    client_update(c, spec, train, broadcast, hyper).map(Some)
                } else {
                    Ok(None)
                }
            })
            .filter_map(Result::transpose)
            .collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon { threads } => {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool");
            pool.install(|| {
                clients
                    .par_iter_mut()
                    .map(|c| {
                        if in_set(c.id) {
                            client_update(c, spec, train, broadcast, hyper).map(Some)
                        } else {
                            Ok(None)
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .into_iter()
            .filter_map(Result::transpose)
            .collect()
        }
    }
}

/// What a completed run yields: metrics rows plus the final global model.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub global: TensorizedModel,
}

/// Executes the full federated loop. Emits one metrics row per evaluated
/// round (every `eval_cadence` rounds, always including the last).
pub fn run(config: &SimConfig) -> Result<RunOutput> {
    run_with(config, &mut |_| Ok(()))
}

/// Like [`run`], invoking `on_row` as each metrics row is produced so
/// callers can stream partial results to disk.
pub fn run_with(
    config: &SimConfig,
    on_row: &mut dyn FnMut(&RoundMetrics) -> Result<()>,
) -> Result<RunOutput> {
    config.validate()?;
    let (train, test) = load_data(config)?;
    if let Some(LayerKind::Linear { i_in, .. }) = config.model.layers.first().map(|l| l.kind) {
        if i_in != train.feature_dim() {
            return Err(Error::InvalidConfig(format!(
                "[model] first layer input {i_in} does not match data feature dim {}",
                train.feature_dim()
            )));
        }
    }
    let mut global = init_global(&config.model, config.seed);
    let mut clients = make_clients(config, &train, &test, &global)?;
    let hyper = LocalHyper {
        lambda: config.lambda,
        tau: config.tau,
        s: config.s,
        s_prime: config.s_prime,
        eta: config.eta,
        eta_p: config.eta_p,
        batch_size: config.batch_size,
    };

    let mut metrics = Vec::new();
    for round in 1..=config.rounds {
        let started = Instant::now();
        let payload = make_broadcast(&global);
        let selected = sample_clients(config.clients, config.sampled, round, config.seed)?;
        let update_set: Vec<usize> = if config.train_only_sampled {
            selected.clone()
        } else {
            (0..config.clients).collect()
        };

        let results = run_updates(
            &mut clients,
            &config.model,
            &train,
            &payload.factors,
            &hyper,
            config.parallelism,
            &update_set,
        );
        let mut outcomes: Vec<(usize, ClientUpdateOutcome)> = Vec::with_capacity(results.len());
        for (&id, res) in update_set.iter().zip(results) {
            let out = res?;
            check_outcome_finite(round, id, &out)?;
            outcomes.push((id, out));
        }

        let contributions: Vec<ClientContribution> = outcomes
            .iter()
            .filter(|(id, _)| selected.binary_search(id).is_ok())
            .map(|(id, out)| ClientContribution {
                client_id: *id,
                model: &out.factors,
                weight: match config.strategy {
                    AggregationStrategy::Afm => out.batch_size as f64,
                    AggregationStrategy::Act => clients[*id].train_shard.len() as f64,
                },
            })
            .collect();
        let input = AggregationInput { global: &global, clients: contributions };
        global = match config.strategy {
            AggregationStrategy::Afm => afm(&input, config.beta)?,
            AggregationStrategy::Act => {
                let als_seed = seeds::mix(config.seed, seeds::ACT_ALS_BASE + round as u64);
                act(&input, config.beta, config.als_iters, als_seed)?.1
            }
        };
        if let Some(layer) = find_nonfinite_layer(&global) {
            return Err(Error::NumericDivergence {
                round,
                client: selected[0],
                layer,
                what: "aggregated global model".into(),
            });
        }

        if round % config.eval_cadence == 0 || round == config.rounds {
            let (personalized, acc_global) = evaluate(&clients, &config.model, &test, &global)?;
            let (acc_mean, acc_std) = mean_std(&personalized);
            let losses: Vec<f64> = outcomes.iter().map(|(_, o)| o.train_loss_mean).collect();
            let gaps: Vec<f64> = outcomes.iter().map(|(_, o)| o.prox_gap).collect();
            let row = RoundMetrics {
                round,
                acc_personalized_mean: acc_mean,
                acc_personalized_std: acc_std,
                acc_global,
                loss_train_mean: mean_std(&losses).0,
                prox_gap_mean: mean_std(&gaps).0,
                uplink_bytes: config.sampled as u64 * payload.uplink_bytes,
                downlink_bytes: config.clients as u64 * payload.downlink_bytes,
                wall_s: started.elapsed().as_secs_f64(),
            };
            on_row(&row)?;
            metrics.push(row);
        }
    }
    Ok(RunOutput { metrics, global })
}

//! The eight training strategies as policies over one task loop.
//!
//! Every strategy sees the same model initialisation for a given seed. The
//! run seed is split into independent streams (initialisation, training
//! order and dropout, buffer maintenance, Fisher subsampling) so adding a
//! draw to one never shifts another.

pub mod losses;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Scenario, Target, TimeWindow, FEATURES, WINDOW};
use crate::error::{Error, Result};
use crate::model::{Adam, AdamConfig, Batch, BiGruClassifier, Mode};
use crate::numcore::{Scalar, Tape};
use crate::replay::{Policy, PrototypeLookup, ReplayBuffer, CAPACITY};

use losses::{
    derpp_step_loss, loss_ce, loss_ewc, loss_logit_mse, proder_step_loss, ProderWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Joint,
    Cumulative,
    FineTuning,
    Ewc,
    Lwf,
    Er,
    Derpp,
    Proder,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Joint,
        Method::Cumulative,
        Method::FineTuning,
        Method::Ewc,
        Method::Lwf,
        Method::Er,
        Method::Derpp,
        Method::Proder,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Joint => "joint",
            Method::Cumulative => "cumulative",
            Method::FineTuning => "fine_tuning",
            Method::Ewc => "ewc",
            Method::Lwf => "lwf",
            Method::Er => "er",
            Method::Derpp => "derpp",
            Method::Proder => "proder",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::Joint => "Joint",
            Method::Cumulative => "Cumulative",
            Method::FineTuning => "Fine-Tuning",
            Method::Ewc => "EWC",
            Method::Lwf => "LwF",
            Method::Er => "ER",
            Method::Derpp => "DER++",
            Method::Proder => "ProDER",
        }
    }

    pub fn uses_buffer(self) -> bool {
        matches!(self, Method::Er | Method::Derpp | Method::Proder)
    }

    fn stores_logits(self) -> bool {
        matches!(self, Method::Derpp | Method::Proder)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '+')
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "joint" => Method::Joint,
            "cumulative" => Method::Cumulative,
            "finetuning" | "ft" => Method::FineTuning,
            "ewc" => Method::Ewc,
            "lwf" => Method::Lwf,
            "er" => Method::Er,
            "derpp" | "der++" => Method::Derpp,
            "proder" => Method::Proder,
            _ => return Err(Error::Parameter(format!("unknown method {s:?}"))),
        })
    }
}

/// Every knob of the training loop and the strategy losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ewc_lambda: f64,
    /// Windows per task used for the Fisher estimate.
    pub fisher_samples: usize,
    pub lwf_lambda: f64,
    pub replay_ratio: f64,
    pub buffer_capacity: usize,
    pub derpp_alpha: f64,
    pub derpp_beta: f64,
    pub proder_alpha: f64,
    pub proder_beta: f64,
    pub proder_gamma: f64,
    pub proder_rho: f64,
    pub kd_temperature: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ewc_lambda: 10.0,
            fisher_samples: 512,
            lwf_lambda: 1.0,
            replay_ratio: 0.5,
            buffer_capacity: CAPACITY,
            derpp_alpha: 2.0,
            derpp_beta: 1.0,
            proder_alpha: 2.0,
            proder_beta: 5.0,
            proder_gamma: 0.5,
            proder_rho: 0.45,
            kd_temperature: 2.0,
        }
    }
}

impl StrategyConfig {
    /// Reference settings for a scenario: ProDER's β and ρ differ per plan.
    pub fn for_scenario(id: u8) -> Self {
        let mut c = Self::default();
        if id >= 2 {
            c.proder_beta = 7.2;
        }
        if id == 4 {
            c.proder_rho = 0.5;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.replay_ratio) {
            return bad("replay_ratio must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.proder_rho) {
            return bad("proder_rho must lie in [0, 1]");
        }
        let weights = [
            self.ewc_lambda,
            self.lwf_lambda,
            self.derpp_alpha,
            self.derpp_beta,
            self.proder_alpha,
            self.proder_beta,
            self.proder_gamma,
        ];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad("loss weights must be finite and non-negative");
        }
        if !(self.kd_temperature > 0.0) || !self.kd_temperature.is_finite() {
            return bad("kd_temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam moments");
        }
        Ok(())
    }

    /// Task and replay windows per optimisation step once the buffer holds
    /// something: the replay share is `ratio · batch` rounded to nearest.
    pub fn replay_split(&self) -> (usize, usize) {
        let replay = ((self.replay_ratio * self.batch_size as f64).round() as usize).min(self.batch_size);
        (self.batch_size - replay, replay)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype<S> {
    pub centroid: Vec<S>,
    /// Windows averaged into the centroid at its last refresh.
    pub count: usize,
    pub refreshed_epoch: usize,
    /// No windows were available at the latest refresh.
    pub stale: bool,
}

/// Per-class feature centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank<S = f32> {
    classes: BTreeMap<usize, Prototype<S>>,
}

impl<S: Scalar> Default for PrototypeBank<S> {
    fn default() -> Self {
        Self {
            classes: BTreeMap::new(),
        }
    }
}

impl<S: Scalar> PrototypeBank<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn centroid(&self, class: usize) -> Option<&[S]> {
        self.classes.get(&class).map(|p| p.centroid.as_slice())
    }

    pub fn get(&self, class: usize) -> Option<&Prototype<S>> {
        self.classes.get(&class)
    }

    pub fn insert(&mut self, class: usize, centroid: Vec<S>, count: usize, epoch: usize) {
        self.classes.insert(
            class,
            Prototype {
                centroid,
                count,
                refreshed_epoch: epoch,
                stale: false,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }
}

impl PrototypeLookup for PrototypeBank<f32> {
    fn prototype(&self, class: usize) -> Option<&[f32]> {
        self.centroid(class)
    }
}

/// Recomputes every centroid from the union of `stream` and the buffer's
/// windows (deduplicated by window id), using eval-mode features. Classes
/// with nothing available keep their centroid and are marked stale.
pub fn refresh_prototypes(
    bank: &mut PrototypeBank<f32>,
    model: &BiGruClassifier<f32>,
    stream: &[(&TimeWindow, usize)],
    buffer: Option<&ReplayBuffer>,
    epoch: usize,
) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut windows: Vec<&TimeWindow> = Vec::new();
    let mut labels = Vec::new();
    let buffered = buffer.map(|b| b.entries()).unwrap_or(&[]);
    let all = stream
        .iter()
        .copied()
        .chain(buffered.iter().map(|e| (&e.window, e.label)));
    for (w, y) in all {
        if seen.insert(w.id) {
            windows.push(w);
            labels.push(y);
        }
    }
    let feats = if windows.is_empty() {
        Vec::new()
    } else {
        model.extract_features(&windows, WINDOW)?
    };
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, &y) in feats.iter().zip(&labels) {
        let e = sums.entry(y).or_insert_with(|| (vec![0.0; f.len()], 0));
        for (a, v) in e.0.iter_mut().zip(f) {
            *a += *v as f64;
        }
        e.1 += 1;
    }
    for p in bank.classes.values_mut() {
        p.stale = true;
    }
    for (y, (sum, n)) in sums {
        let centroid = sum.iter().map(|s| (s / n as f64) as f32).collect();
        bank.insert(y, centroid, n, epoch);
    }
    Ok(())
}

/// Diagonal Fisher estimate and the parameters it was taken at. Vectors
/// follow [`BiGruClassifier::params`] order and keep the lengths of that
/// moment, so a head grown later is only penalised on its old part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherState<S = f32> {
    pub importance: Vec<Vec<S>>,
    pub anchor: Vec<Vec<S>>,
}

/// Mean over (at most `max_samples`, subsampled with `rng`) windows of the
/// squared per-window gradient of `−log softmax(logits)[label]`, eval mode.
pub fn fisher_update<S: Scalar, R: rand::Rng + ?Sized>(
    model: &BiGruClassifier<S>,
    stream: &[(&[S], usize)],
    steps: usize,
    max_samples: usize,
    rng: &mut R,
) -> Result<FisherState<S>> {
    let mut importance: Vec<Vec<S>> = model.params().iter().map(|p| vec![S::zero(); p.len()]).collect();
    let mut picks: Vec<usize> = if stream.len() > max_samples {
        sample(rng, stream.len(), max_samples).into_vec()
    } else {
        (0..stream.len()).collect()
    };
    picks.sort_unstable();
    for &i in &picks {
        let (w, y) = stream[i];
        let batch = Batch::from_windows(&[w], steps, model.input_size())?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let out = model.forward_eval(&mut tape, &bound, &batch)?;
        let loss = loss_ce(&mut tape, out.logits, &[y])?;
        tape.backward(loss)?;
        for (acc, g) in importance.iter_mut().zip(model.gradients(&tape, &bound)) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v * v;
            }
        }
    }
    if !picks.is_empty() {
        let inv = S::one() / S::lit(picks.len() as f64);
        importance.iter_mut().flatten().for_each(|v| *v *= inv);
    }
    Ok(FisherState {
        importance,
        anchor: model.params().iter().map(|p| p.to_vec()).collect(),
    })
}

/// Child seed for one purpose of a run.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    // splitmix64 finaliser over the combined value
    let mut z = seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_INIT: u64 = 1;
const SEED_TRAIN: u64 = 2;
const SEED_BUFFER: u64 = 3;
const SEED_FISHER: u64 = 4;

/// State a method carries through a scenario.
pub struct Learner {
    method: Method,
    cfg: StrategyConfig,
    target: Target,
    pub model: BiGruClassifier<f32>,
    adam: Adam<f32>,
    init_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    fisher_rng: ChaCha8Rng,
    pub buffer: Option<ReplayBuffer>,
    pub bank: PrototypeBank<f32>,
    pub fishers: Vec<FisherState<f32>>,
    teacher: Option<BiGruClassifier<f32>>,
    seen: Vec<usize>,
    epoch_counter: usize,
}

impl Learner {
    pub fn new(method: Method, cfg: &StrategyConfig, target: Target, seed: u64) -> Result<Self> {
        Self::with_model(method, cfg, target, seed, |rng| BiGruClassifier::new(FEATURES, rng))
    }

    /// Same as [`Learner::new`] with a custom architecture (tests, gradient
    /// checks on small models).
    pub fn with_model(
        method: Method,
        cfg: &StrategyConfig,
        target: Target,
        seed: u64,
        build: impl FnOnce(&mut ChaCha8Rng) -> Result<BiGruClassifier<f32>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_INIT));
        let model = build(&mut init_rng)?;
        let buffer = method.uses_buffer().then(|| {
            let policy = if method == Method::Proder {
                Policy::PrototypeAware
            } else {
                Policy::Uniform
            };
            ReplayBuffer::new(
                cfg.buffer_capacity,
                policy,
                method.stores_logits(),
                derive_seed(seed, SEED_BUFFER),
            )
        });
        Ok(Self {
            method,
            cfg: cfg.clone(),
            target,
            model,
            adam: Adam::new(cfg.adam()),
            init_rng,
            train_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_TRAIN)),
            fisher_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_FISHER)),
            buffer,
            bank: PrototypeBank::new(),
            fishers: Vec::new(),
            teacher: None,
            seen: Vec::new(),
            epoch_counter: 0,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen
    }

    /// Grows the head for labels `new_classes`, which must be the next
    /// consecutive column indices.
    pub fn begin_task(&mut self, new_classes: &[usize]) -> Result<()> {
        let start = self.model.classes();
        if new_classes.iter().enumerate().any(|(k, &c)| c != start + k) {
            return Err(Error::InternalState(format!(
                "new classes {new_classes:?} do not extend a head of {start}"
            )));
        }
        if !new_classes.is_empty() {
            self.model.expand_head(new_classes.len(), &mut self.init_rng)?;
        }
        self.seen.extend_from_slice(new_classes);
        Ok(())
    }

    /// Trains for the configured number of epochs on `stream` and returns
    /// the mean loss of the last epoch.
    pub fn train_task(&mut self, stream: &[(&TimeWindow, usize)], task: usize) -> Result<f64> {
        if stream.is_empty() {
            return Err(Error::Data(format!("task {task} has an empty train stream")));
        }
        if let Some(&(_, y)) = stream.iter().find(|(_, y)| *y >= self.model.classes()) {
            return Err(Error::InternalState(format!("label {y} has no head column")));
        }
        crate::numcore::flush_denormals();
        self.model.set_mode(Mode::Train);
        self.model.lock_head(true);
        let result = self.run_epochs(stream);
        self.model.lock_head(false);
        self.model.set_mode(Mode::Eval);
        result
    }

    fn run_epochs(&mut self, stream: &[(&TimeWindow, usize)]) -> Result<f64> {
        let mut last = 0.0;
        for _ in 0..self.cfg.epochs {
            self.epoch_counter += 1;
            if self.method == Method::Proder {
                refresh_prototypes(
                    &mut self.bank,
                    &self.model,
                    stream,
                    self.buffer.as_ref(),
                    self.epoch_counter,
                )?;
            }
            let mut order: Vec<usize> = (0..stream.len()).collect();
            order.shuffle(&mut self.train_rng);
            let replaying = self.buffer.as_ref().is_some_and(|b| !b.is_empty());
            let (task_part, replay_part) = if replaying {
                self.cfg.replay_split()
            } else {
                (self.cfg.batch_size, 0)
            };
            let task_part = task_part.max(1);
            let (mut total, mut steps) = (0.0, 0usize);
            for chunk in order.chunks(task_part) {
                let picked: Vec<(&TimeWindow, usize)> = chunk.iter().map(|&i| stream[i]).collect();
                total += self.step(&picked, replay_part)?;
                steps += 1;
            }
            last = total / steps as f64;
        }
        Ok(last)
    }

    fn step(&mut self, task: &[(&TimeWindow, usize)], replay_part: usize) -> Result<f64> {
        let replay: Vec<(Vec<f32>, usize, Option<Vec<f32>>)> = match &self.buffer {
            Some(b) if replay_part > 0 => b
                .sample(replay_part, &mut self.train_rng)
                .into_iter()
                .map(|e| (e.window.data.clone(), e.label, e.logits.clone()))
                .collect(),
            _ => Vec::new(),
        };
        let mut inputs: Vec<&[f32]> = task.iter().map(|(w, _)| w.data.as_slice()).collect();
        inputs.extend(replay.iter().map(|r| r.0.as_slice()));
        let mut labels: Vec<usize> = task.iter().map(|(_, y)| *y).collect();
        labels.extend(replay.iter().map(|r| r.1));
        let replay_rows: Vec<usize> = (task.len()..task.len() + replay.len()).collect();

        let batch = Batch::from_windows(&inputs, WINDOW, self.model.input_size())?;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let out = self.model.forward(&mut tape, &bound, &batch, &mut self.train_rng)?;
        let cfg = &self.cfg;
        let stored = || -> Result<Vec<Vec<f32>>> {
            replay
                .iter()
                .map(|r| {
                    r.2.clone()
                        .ok_or_else(|| Error::InternalState("replay entry without stored logits".into()))
                })
                .collect()
        };
        let loss = match self.method {
            Method::Joint | Method::Cumulative | Method::FineTuning | Method::Er => {
                loss_ce(&mut tape, out.logits, &labels)?
            }
            Method::Ewc => {
                let ce = loss_ce(&mut tape, out.logits, &labels)?;
                let vars: Vec<_> = bound.vars().into_iter().flatten().collect();
                let pen = loss_ewc(&mut tape, &vars, &self.fishers, cfg.ewc_lambda as f32)?;
                tape.add(ce, pen)?
            }
            Method::Lwf => {
                let ce = loss_ce(&mut tape, out.logits, &labels)?;
                match &self.teacher {
                    Some(teacher) => {
                        let targets = teacher.logits(&inputs, WINDOW)?;
                        let rows: Vec<usize> = (0..inputs.len()).collect();
                        let mse = loss_logit_mse(&mut tape, out.logits, &rows, &targets)?;
                        let mse = tape.scale(mse, cfg.lwf_lambda as f32)?;
                        tape.add(ce, mse)?
                    }
                    None => ce,
                }
            }
            Method::Derpp => derpp_step_loss(
                &mut tape,
                out.logits,
                &labels,
                &replay_rows,
                &stored()?,
                cfg.derpp_alpha as f32,
                cfg.derpp_beta as f32,
            )?,
            Method::Proder => {
                let weights = ProderWeights {
                    alpha: cfg.proder_alpha as f32,
                    beta: cfg.proder_beta as f32,
                    gamma: cfg.proder_gamma as f32,
                    temperature: cfg.kd_temperature as f32,
                };
                proder_step_loss(
                    &mut tape,
                    out.features,
                    out.logits,
                    &labels,
                    &replay_rows,
                    &stored()?,
                    &self.seen,
                    &self.bank,
                    weights,
                )?
                .total
            }
        };
        let value = tape.scalar(loss) as f64;
        tape.backward(loss)?;
        let grads = self.model.gradients(&tape, &bound);
        self.adam.step(self.model.params_mut(), &grads)?;
        Ok(value)
    }

    /// Task-boundary bookkeeping: buffer update, Fisher anchor, teacher copy.
    pub fn end_task(&mut self, stream: &[(&TimeWindow, usize)], task: usize) -> Result<()> {
        let windows: Vec<&TimeWindow> = stream.iter().map(|(w, _)| *w).collect();
        match self.method {
            Method::Er | Method::Derpp => {
                if let Some(b) = &mut self.buffer {
                    b.update_uniform(&windows, self.target, task, &self.model)?;
                }
            }
            Method::Proder => {
                self.epoch_counter += 1;
                refresh_prototypes(
                    &mut self.bank,
                    &self.model,
                    stream,
                    self.buffer.as_ref(),
                    self.epoch_counter,
                )?;
                if let Some(b) = &mut self.buffer {
                    b.update_prototype_aware(&windows, self.target, task, &self.model, &self.bank, self.cfg.proder_rho)?;
                }
            }
            Method::Ewc => {
                let pairs: Vec<(&[f32], usize)> = stream.iter().map(|(w, y)| (w.data.as_slice(), *y)).collect();
                let st = fisher_update(&self.model, &pairs, WINDOW, self.cfg.fisher_samples, &mut self.fisher_rng)?;
                self.fishers.push(st);
            }
            Method::Lwf => {
                let mut teacher = self.model.clone();
                teacher.set_mode(Mode::Eval);
                self.teacher = Some(teacher);
            }
            Method::Joint | Method::Cumulative | Method::FineTuning => {}
        }
        Ok(())
    }
}

/// Labelled train stream of task `t` (indices into `split.train`).
pub fn task_stream<'a>(split: &'a DatasetSplit, scenario: &Scenario, indices: &[usize]) -> Vec<(&'a TimeWindow, usize)> {
    indices
        .iter()
        .map(|&i| {
            let w = &split.train[i];
            (w, scenario.label(w))
        })
        .collect()
}

/// Outcome of driving one method through a scenario.
pub struct MethodRun {
    pub learner: Learner,
    /// Mean loss of the final epoch of every training phase.
    pub final_epoch_loss: Vec<f64>,
}

/// Trains `method` through every task of `scenario`, calling `after_task`
/// with the model after each task. Joint trains once on everything with the
/// full head and reports that model for every task.
pub fn run_method(
    method: Method,
    split: &DatasetSplit,
    scenario: &Scenario,
    cfg: &StrategyConfig,
    seed: u64,
    after_task: impl FnMut(usize, &BiGruClassifier<f32>) -> Result<()>,
) -> Result<MethodRun> {
    let learner = Learner::new(method, cfg, scenario.plan.target, seed)?;
    drive(learner, split, scenario, after_task)
}

/// [`run_method`] with a prepared learner.
pub fn drive(
    mut learner: Learner,
    split: &DatasetSplit,
    scenario: &Scenario,
    mut after_task: impl FnMut(usize, &BiGruClassifier<f32>) -> Result<()>,
) -> Result<MethodRun> {
    let plan = &scenario.plan;
    let tasks = plan.tasks.len();
    let mut losses = Vec::new();
    if learner.method == Method::Joint {
        let all: Vec<usize> = (0..tasks).flat_map(|t| plan.new_classes(t)).collect();
        learner.begin_task(&all)?;
        let mut everything: Vec<usize> = scenario.train_streams.concat();
        everything.sort_unstable();
        everything.dedup();
        let stream = task_stream(split, scenario, &everything);
        losses.push(learner.train_task(&stream, 0)?);
        for t in 0..tasks {
            after_task(t, &learner.model)?;
        }
    } else {
        let mut union: Vec<usize> = Vec::new();
        for t in 0..tasks {
            learner.begin_task(&plan.new_classes(t))?;
            let indices = if learner.method == Method::Cumulative {
                union.extend_from_slice(&scenario.train_streams[t]);
                union.sort_unstable();
                union.clone()
            } else {
                scenario.train_streams[t].clone()
            };
            let stream = task_stream(split, scenario, &indices);
            losses.push(learner.train_task(&stream, t)?);
            let own = task_stream(split, scenario, &scenario.train_streams[t]);
            learner.end_task(&own, t)?;
            after_task(t, &learner.model)?;
        }
    }
    Ok(MethodRun {
        learner,
        final_epoch_loss: losses,
    })
}

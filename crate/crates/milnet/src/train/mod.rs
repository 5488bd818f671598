//! Training plans and the three regimes: separate models, a joint model
//! with weighted losses, and tied-weights alternation over a physically
//! shared trunk.

mod adam;
pub mod evaluate;

pub use adam::{scheduled_lr, Adam, AdamConfig};

use std::cell::RefCell;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::{HnhSampler, InputMode, Minibatch, PlainSampler, PreparedDataset};
use crate::error::{Error, Result};
use crate::layers::checkpoint::{self, StateEntry};
use crate::layers::{
    build_when, build_who, l2_penalty, Head, Initializer, Mode, ModelGraph, ParamList, Trunk,
    WhenHead, WhoHead,
};
use crate::losses::{self, WhenLoss};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Separate,
    Joint,
    Tied,
}

impl Regime {
    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "separate" => Ok(Regime::Separate),
            "joint" => Ok(Regime::Joint),
            "tied" => Ok(Regime::Tied),
            other => Err(Error::Train(format!(
                "unknown regime `{other}` (expected separate, joint or tied)"
            ))),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            Regime::Separate => "separate",
            Regime::Joint => "joint",
            Regime::Tied => "tied",
        }
    }
}

fn d_when_input() -> InputMode {
    InputMode::Hnh
}
fn d_who_input() -> InputMode {
    InputMode::Plain
}
fn d_weights() -> (f64, f64) {
    (0.5, 0.5)
}
fn d_epochs() -> usize {
    60
}
fn d_initial_lr() -> f64 {
    1e-5
}
fn d_halving() -> usize {
    20
}
fn d_floor() -> f64 {
    1e-8
}
fn d_batch() -> usize {
    8
}
fn d_fmaps() -> usize {
    64
}
fn d_gru() -> usize {
    64
}
fn d_mean_frac() -> f64 {
    losses::DEFAULT_MEAN_TARGET_FRACTION
}
fn d_true() -> bool {
    true
}

/// Everything that defines a run. The defaults mirror the reference
/// configuration: batches of 8, Adam from 1e-5 halving every 20 epochs down
/// to 1e-8, balanced input + compound loss for the detector, conventional
/// input + cross-entropy for the tagger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPlan {
    #[serde(default)]
    pub regime: Regime,
    #[serde(default = "d_when_input")]
    pub when_input: InputMode,
    #[serde(default = "d_who_input")]
    pub who_input: InputMode,
    #[serde(default)]
    pub when_loss: WhenLoss,
    /// (detector weight, tagger weight) for the joint loss.
    #[serde(default = "d_weights")]
    pub loss_weights: (f64, f64),
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_initial_lr")]
    pub initial_lr: f64,
    #[serde(default = "d_halving")]
    pub lr_halving_period: usize,
    #[serde(default = "d_floor")]
    pub lr_floor: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_fmaps")]
    pub feature_maps: usize,
    #[serde(default = "d_gru")]
    pub gru_units: usize,
    /// Target fraction of the bag label for the compound loss's mean term.
    #[serde(default = "d_mean_frac")]
    pub mean_target_fraction: f64,
    /// Phase switches; disabling one turns separate/tied training into the
    /// other task's half.
    #[serde(default = "d_true")]
    pub train_when: bool,
    #[serde(default = "d_true")]
    pub train_who: bool,
    /// Stop after this many epochs without validation-AUC improvement;
    /// requires `eval_every` > 0. Off by default.
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    /// Evaluate on the test split every N epochs (0 = never).
    #[serde(default)]
    pub eval_every: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.regime == Regime::Joint && self.when_input != self.who_input {
            return Err(Error::Train(
                "joint training feeds both heads from a single input stream: \
                 the detector and tagger input modes must match"
                    .into(),
            ));
        }
        if self.loss_weights.0 < 0.0 || self.loss_weights.1 < 0.0 {
            return Err(Error::Train("loss weights must be non-negative".into()));
        }
        if self.loss_weights.0 == 0.0 && self.loss_weights.1 == 0.0 {
            return Err(Error::Train("at least one loss weight must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Train("batch size must be positive".into()));
        }
        if self.early_stop_patience.is_some() && self.eval_every == 0 {
            return Err(Error::Train(
                "early stopping needs eval_every > 0 to see validation AUCs".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        scheduled_lr(self.initial_lr, epoch, self.lr_halving_period, self.lr_floor)
    }
}

/// One history row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub when_loss: Option<f64>,
    pub who_loss: Option<f64>,
    pub when_auc: Option<f64>,
    pub who_auc: Option<f64>,
}

/// Result of a run: per-epoch history and named checkpoints.
pub struct RunOutput {
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<(String, Vec<StateEntry>)>,
}

enum EitherSampler {
    Hnh(HnhSampler),
    Plain(PlainSampler),
}

impl EitherSampler {
    fn build(
        mode: InputMode,
        prep: &PreparedDataset,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        match mode {
            InputMode::Hnh => {
                let polarity: Vec<bool> =
                    prep.split.train.iter().map(|r| r.is_positive()).collect();
                Ok(EitherSampler::Hnh(HnhSampler::new(&polarity, batch_size, seed)?))
            }
            InputMode::Plain => Ok(EitherSampler::Plain(PlainSampler::new(
                prep.split.train.len(),
                batch_size,
                seed,
            )?)),
        }
    }

    fn epoch(&self, e: usize) -> Vec<Vec<usize>> {
        match self {
            EitherSampler::Hnh(s) => s.epoch(e),
            EitherSampler::Plain(s) => s.epoch(e),
        }
    }
}

/// Feature block of a minibatch as a `[B, T, 40, 1]` constant leaf.
fn input_leaf<E: Element>(tape: &mut Tape<E>, mb: &Minibatch) -> Result<Var> {
    let s = mb.features.shape();
    let data: Vec<E> = mb.features.data().iter().map(|&v| E::from_f32(v)).collect();
    Ok(tape.constant(Tensor::new(vec![s[0], s[1], s[2], 1], data)?))
}

/// Detector batch loss: per-bag loss over the unpadded frames, averaged
/// over the minibatch so learning-rate semantics do not depend on the batch
/// size.
pub fn when_task_loss<E: Element>(
    tape: &mut Tape<E>,
    out: Var,
    mb: &Minibatch,
    kind: WhenLoss,
    mean_target_fraction: f64,
) -> Result<Var> {
    let t = tape.value(out).shape()[1];
    let mut per_bag = Vec::with_capacity(mb.batch_size());
    for b in 0..mb.batch_size() {
        let row = tape.slice(out, 0, b, b + 1)?;
        let flat = tape.reshape(row, vec![t])?;
        let valid = mb.valid_frames[b].min(t).max(1);
        let bag = tape.slice(flat, 0, 0, valid)?;
        let loss = losses::when_bag_loss(
            tape,
            kind,
            bag,
            mb.when_labels[b] as f64,
            mean_target_fraction,
        )?;
        per_bag.push(tape.reshape(loss, vec![1])?);
    }
    let stacked = tape.concat(&per_bag, 0)?;
    Ok(tape.reduce_mean(stacked, 0)?)
}

/// Tagger batch loss: binary cross-entropy averaged over labels and batch.
pub fn who_task_loss<E: Element>(tape: &mut Tape<E>, out: Var, mb: &Minibatch) -> Result<Var> {
    let s = mb.who_targets.shape().to_vec();
    let data: Vec<E> = mb
        .who_targets
        .data()
        .iter()
        .map(|&v| E::from_f32(v))
        .collect();
    let targets = tape.constant(Tensor::new(s, data)?);
    losses::bce_mean_vs_targets(tape, out, targets)
}

fn scalar_value<E: Element>(tape: &Tape<E>, v: Var) -> f64 {
    tape.value(v).item().to_f64()
}

fn check_finite_loss(value: f64, what: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{what} loss is {value}")));
    }
    Ok(())
}

struct TaskRunner<'p> {
    prep: &'p PreparedDataset,
    plan: TrainPlan,
}

impl<'p> TaskRunner<'p> {
    fn new(prep: &'p PreparedDataset, plan: TrainPlan) -> Self {
        TaskRunner { prep, plan }
    }

    /// One detector epoch; returns the mean task loss.
    #[allow(clippy::too_many_arguments)]
    fn when_epoch<E: Element>(
        &self,
        tape: &mut Tape<E>,
        model: &ModelGraph<E>,
        params: &ParamList,
        adam: &mut Adam<E>,
        batches: &[Vec<usize>],
        lr: f64,
    ) -> Result<f64> {
        let mark = tape.mark();
        let mut total = 0.0;
        for indices in batches {
            let mb = self.prep.minibatch(&self.prep.split.train, indices)?;
            let x = input_leaf(tape, &mb)?;
            let out = model.forward(tape, x, Mode::Train)?;
            let task = when_task_loss(
                tape,
                out,
                &mb,
                self.plan.when_loss,
                self.plan.mean_target_fraction,
            )?;
            let reg = l2_penalty(tape, &model.l2_terms())?;
            let loss = tape.add(task, reg)?;
            let task_v = scalar_value(tape, task);
            check_finite_loss(scalar_value(tape, loss), "detector")?;
            tape.backward(loss)?;
            adam.step(tape, params, lr)?;
            tape.reset_to(mark);
            total += task_v;
        }
        Ok(total / batches.len().max(1) as f64)
    }

    /// One tagger epoch; returns the mean task loss.
    fn who_epoch<E: Element>(
        &self,
        tape: &mut Tape<E>,
        model: &ModelGraph<E>,
        params: &ParamList,
        adam: &mut Adam<E>,
        batches: &[Vec<usize>],
        lr: f64,
    ) -> Result<f64> {
        let mark = tape.mark();
        let mut total = 0.0;
        for indices in batches {
            let mb = self.prep.minibatch(&self.prep.split.train, indices)?;
            let x = input_leaf(tape, &mb)?;
            let out = model.forward(tape, x, Mode::Train)?;
            let task = who_task_loss(tape, out, &mb)?;
            let reg = l2_penalty(tape, &model.l2_terms())?;
            let loss = tape.add(task, reg)?;
            let task_v = scalar_value(tape, task);
            check_finite_loss(scalar_value(tape, loss), "tagger")?;
            tape.backward(loss)?;
            adam.step(tape, params, lr)?;
            tape.reset_to(mark);
            total += task_v;
        }
        Ok(total / batches.len().max(1) as f64)
    }
}

/// The four scalars of one joint batch, still on the tape.
pub struct JointBatchTerms {
    pub total: Var,
    pub when: Var,
    pub who: Var,
    pub reg: Var,
}

/// Forward both heads over one shared trunk pass and combine the losses:
/// `total = w_when·L_when + w_who·L_who + reg`.
pub fn joint_batch_terms<E: Element>(
    tape: &mut Tape<E>,
    when_model: &ModelGraph<E>,
    who_model: &ModelGraph<E>,
    mb: &Minibatch,
    plan: &TrainPlan,
) -> Result<JointBatchTerms> {
    let x = input_leaf(tape, mb)?;
    let trunk_out = when_model
        .trunk
        .borrow_mut()
        .forward(tape, x, Mode::Train)?;
    let when_out = when_model.forward_head(tape, trunk_out)?;
    let who_out = who_model.forward_head(tape, trunk_out)?;
    let l_when = when_task_loss(tape, when_out, mb, plan.when_loss, plan.mean_target_fraction)?;
    let l_who = who_task_loss(tape, who_out, mb)?;
    let mut terms = when_model.trunk.borrow().l2_terms();
    if let Head::When(h) = &when_model.head {
        terms.extend(h.l2_terms());
    }
    if let Head::Who(h) = &who_model.head {
        terms.extend(h.l2_terms());
    }
    let reg = l2_penalty(tape, &terms)?;
    let w_when = tape.affine(l_when, plan.loss_weights.0, 0.0);
    let w_who = tape.affine(l_who, plan.loss_weights.1, 0.0);
    let sum = tape.add(w_when, w_who)?;
    let total = tape.add(sum, reg)?;
    Ok(JointBatchTerms {
        total,
        when: l_when,
        who: l_who,
        reg,
    })
}

/// Build the shared-trunk pair used by the joint and tied regimes. The
/// trunk, detector head and tagger head draw from the initialiser in that
/// order, so the detector half is seeded identically to a separate run.
fn build_shared_pair<E: Element>(
    tape: &mut Tape<E>,
    init: &mut Initializer,
    plan: &TrainPlan,
    frames: usize,
    num_labels: usize,
) -> (ModelGraph<E>, ModelGraph<E>) {
    let trunk = Rc::new(RefCell::new(Trunk::build(tape, init, plan.feature_maps)));
    let when_head = WhenHead::build(tape, init, plan.feature_maps, plan.gru_units);
    let who_head = WhoHead::build(tape, init, plan.feature_maps, num_labels.max(1));
    let when_model = ModelGraph {
        trunk: trunk.clone(),
        head: Head::When(when_head),
        frames,
    };
    let who_model = ModelGraph {
        trunk,
        head: Head::Who(who_head),
        frames,
    };
    (when_model, who_model)
}

struct EvalTracker {
    best: f64,
    since_best: usize,
}

impl EvalTracker {
    fn new() -> Self {
        EvalTracker {
            best: f64::NEG_INFINITY,
            since_best: 0,
        }
    }

    /// Returns true when patience is exhausted.
    fn observe(&mut self, score: f64, patience: Option<usize>) -> bool {
        if score > self.best {
            self.best = score;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        patience.is_some_and(|p| self.since_best >= p)
    }
}

fn maybe_eval<E: Element>(
    tape: &mut Tape<E>,
    plan: &TrainPlan,
    prep: &PreparedDataset,
    epoch: usize,
    when_model: Option<&ModelGraph<E>>,
    who_model: Option<&ModelGraph<E>>,
) -> Result<(Option<f64>, Option<f64>)> {
    if plan.eval_every == 0 || !(epoch + 1).is_multiple_of(plan.eval_every) {
        return Ok((None, None));
    }
    let when_auc = match when_model {
        Some(m) => Some(evaluate::eval_when_model(tape, m, prep)?.auc_micro),
        None => None,
    };
    let who_auc = match who_model {
        Some(m) => Some(evaluate::eval_who_model(tape, m, prep)?.auc_micro),
        None => None,
    };
    Ok((when_auc, who_auc))
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Train the two models independently, each on its own input stream.
pub fn run_separate<E: Element>(plan: &TrainPlan, prep: &PreparedDataset) -> Result<RunOutput> {
    plan.validate()?;
    let mut tape = Tape::<E>::new();
    let mut init = Initializer::new(plan.seed);
    let frames = prep.target_frames;
    let num_labels = prep.split.vocab.len().max(1);
    let when_model = build_when(
        &mut tape,
        &mut init,
        frames,
        crate::features::N_BANDS,
        plan.feature_maps,
        plan.gru_units,
    )?;
    let who_model = build_who(
        &mut tape,
        &mut init,
        frames,
        crate::features::N_BANDS,
        plan.feature_maps,
        num_labels,
    )?;
    let when_params = when_model.parameters();
    let who_params = who_model.parameters();
    let mut adam_when = Adam::new(AdamConfig::default());
    let mut adam_who = Adam::new(AdamConfig::default());
    let when_sampler = EitherSampler::build(plan.when_input, prep, plan.batch_size, plan.seed)?;
    let who_sampler = EitherSampler::build(plan.who_input, prep, plan.batch_size, plan.seed)?;
    let runner = TaskRunner::new(prep, plan.clone());
    let mut history = Vec::new();
    let mut tracker = EvalTracker::new();
    for epoch in 0..plan.epochs {
        let lr = plan.lr_at(epoch);
        let when_loss = if plan.train_when {
            Some(runner.when_epoch(
                &mut tape,
                &when_model,
                &when_params,
                &mut adam_when,
                &when_sampler.epoch(epoch),
                lr,
            )?)
        } else {
            None
        };
        let who_loss = if plan.train_who {
            Some(runner.who_epoch(
                &mut tape,
                &who_model,
                &who_params,
                &mut adam_who,
                &who_sampler.epoch(epoch),
                lr,
            )?)
        } else {
            None
        };
        let (when_auc, who_auc) = maybe_eval(
            &mut tape,
            plan,
            prep,
            epoch,
            plan.train_when.then_some(&when_model),
            plan.train_who.then_some(&who_model),
        )?;
        history.push(EpochRecord {
            epoch,
            lr,
            when_loss,
            who_loss,
            when_auc,
            who_auc,
        });
        if let Some(score) = mean_of(&[when_auc, who_auc]) {
            if tracker.observe(score, plan.early_stop_patience) {
                break;
            }
        }
    }
    let mut checkpoints = Vec::new();
    if plan.train_when {
        checkpoints.push(("when".to_string(), when_model.state(&tape)));
    }
    if plan.train_who {
        checkpoints.push(("who".to_string(), who_model.state(&tape)));
    }
    Ok(RunOutput {
        history,
        checkpoints,
    })
}

/// Train one shared-trunk graph with both heads on a single input stream,
/// combining the two losses with the plan's weights.
pub fn run_joint<E: Element>(plan: &TrainPlan, prep: &PreparedDataset) -> Result<RunOutput> {
    plan.validate()?;
    let mut tape = Tape::<E>::new();
    let mut init = Initializer::new(plan.seed);
    let num_labels = prep.split.vocab.len().max(1);
    let (when_model, who_model) =
        build_shared_pair(&mut tape, &mut init, plan, prep.target_frames, num_labels);
    let mut params = when_model.parameters();
    params.extend(who_model.head_parameters());
    let mut adam = Adam::new(AdamConfig::default());
    let sampler = EitherSampler::build(plan.when_input, prep, plan.batch_size, plan.seed)?;
    let mut history = Vec::new();
    let mut tracker = EvalTracker::new();
    let mark = tape.mark();
    for epoch in 0..plan.epochs {
        let lr = plan.lr_at(epoch);
        let mut when_total = 0.0;
        let mut who_total = 0.0;
        let batches = sampler.epoch(epoch);
        for indices in &batches {
            let mb = prep.minibatch(&prep.split.train, indices)?;
            let terms = joint_batch_terms(&mut tape, &when_model, &who_model, &mb, plan)?;
            check_finite_loss(scalar_value(&tape, terms.total), "joint")?;
            when_total += scalar_value(&tape, terms.when);
            who_total += scalar_value(&tape, terms.who);
            tape.backward(terms.total)?;
            adam.step(&mut tape, &params, lr)?;
            tape.reset_to(mark);
        }
        let n = batches.len().max(1) as f64;
        let (when_auc, who_auc) = maybe_eval(
            &mut tape,
            plan,
            prep,
            epoch,
            Some(&when_model),
            Some(&who_model),
        )?;
        history.push(EpochRecord {
            epoch,
            lr,
            when_loss: Some(when_total / n),
            who_loss: Some(who_total / n),
            when_auc,
            who_auc,
        });
        if let Some(score) = mean_of(&[when_auc, who_auc]) {
            if tracker.observe(score, plan.early_stop_patience) {
                break;
            }
        }
    }
    let mut state = when_model.state(&tape);
    for (name, var) in who_model.head_parameters() {
        state.push(StateEntry::from_tensor(name, tape.value(var)));
    }
    Ok(RunOutput {
        history,
        checkpoints: vec![("joint".to_string(), state)],
    })
}

/// Train two models that physically share trunk parameters (and batch-norm
/// running statistics), alternating one detector epoch then one tagger
/// epoch, each on its own input stream and optimiser state.
pub fn run_tied<E: Element>(plan: &TrainPlan, prep: &PreparedDataset) -> Result<RunOutput> {
    plan.validate()?;
    let mut tape = Tape::<E>::new();
    let mut init = Initializer::new(plan.seed);
    let num_labels = prep.split.vocab.len().max(1);
    let (when_model, who_model) =
        build_shared_pair(&mut tape, &mut init, plan, prep.target_frames, num_labels);
    let when_params = when_model.parameters();
    let who_params = who_model.parameters();
    let mut adam_when = Adam::new(AdamConfig::default());
    let mut adam_who = Adam::new(AdamConfig::default());
    let when_sampler = EitherSampler::build(plan.when_input, prep, plan.batch_size, plan.seed)?;
    let who_sampler = EitherSampler::build(plan.who_input, prep, plan.batch_size, plan.seed)?;
    let runner = TaskRunner::new(prep, plan.clone());
    let mut history = Vec::new();
    let mut tracker = EvalTracker::new();
    for epoch in 0..plan.epochs {
        let lr = plan.lr_at(epoch);
        let when_loss = if plan.train_when {
            Some(runner.when_epoch(
                &mut tape,
                &when_model,
                &when_params,
                &mut adam_when,
                &when_sampler.epoch(epoch),
                lr,
            )?)
        } else {
            None
        };
        let who_loss = if plan.train_who {
            Some(runner.who_epoch(
                &mut tape,
                &who_model,
                &who_params,
                &mut adam_who,
                &who_sampler.epoch(epoch),
                lr,
            )?)
        } else {
            None
        };
        let (when_auc, who_auc) = maybe_eval(
            &mut tape,
            plan,
            prep,
            epoch,
            plan.train_when.then_some(&when_model),
            plan.train_who.then_some(&who_model),
        )?;
        history.push(EpochRecord {
            epoch,
            lr,
            when_loss,
            who_loss,
            when_auc,
            who_auc,
        });
        if let Some(score) = mean_of(&[when_auc, who_auc]) {
            if tracker.observe(score, plan.early_stop_patience) {
                break;
            }
        }
    }
    Ok(RunOutput {
        history,
        checkpoints: vec![
            ("when".to_string(), when_model.state(&tape)),
            ("who".to_string(), who_model.state(&tape)),
        ],
    })
}

/// Dispatch on the plan's regime.
pub fn run<E: Element>(plan: &TrainPlan, prep: &PreparedDataset) -> Result<RunOutput> {
    match plan.regime {
        Regime::Separate => run_separate::<E>(plan, prep),
        Regime::Joint => run_joint::<E>(plan, prep),
        Regime::Tied => run_tied::<E>(plan, prep),
    }
}

/// Render history as CSV.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,when_loss,who_loss,when_auc,who_auc\n");
    let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            fmt(&r.when_loss),
            fmt(&r.who_loss),
            fmt(&r.when_auc),
            fmt(&r.who_auc),
        ));
    }
    out
}

/// Run a plan and write the self-describing run directory: `plan.json`,
/// `history.csv`, and one `.ckpt` per trained graph.
pub fn execute_plan(plan: &TrainPlan, prep: &PreparedDataset, dir: &Path) -> Result<RunOutput> {
    let output = run::<f32>(plan, prep)?;
    write_run_dir(plan, &output, dir)?;
    Ok(output)
}

pub fn write_run_dir(plan: &TrainPlan, output: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let plan_json = serde_json::to_string_pretty(plan)
        .map_err(|e| Error::Train(format!("encoding plan: {e}")))?;
    std::fs::write(dir.join("plan.json"), plan_json)
        .map_err(|e| Error::io("writing plan.json", e))?;
    std::fs::write(dir.join("history.csv"), history_csv(&output.history))
        .map_err(|e| Error::io("writing history.csv", e))?;
    for (name, state) in &output.checkpoints {
        checkpoint::save(&dir.join(format!("{name}.ckpt")), state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};

    fn tiny_prep(
        classes: usize,
        train: usize,
        test: usize,
        pos_fraction: f64,
        seed: u64,
    ) -> (tempfile::TempDir, PreparedDataset) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            duration_range: (0.25, 0.4),
            ..SynthConfig::new(classes, train, test, pos_fraction, seed)
        };
        let ds = synth_dataset(&cfg).unwrap();
        ds.write_to_dir(dir.path()).unwrap();
        let split = crate::data::load_dataset(dir.path()).unwrap();
        let prep = PreparedDataset::prepare(dir.path(), split).unwrap();
        (dir, prep)
    }

    fn tiny_plan(regime: Regime, epochs: usize) -> TrainPlan {
        TrainPlan {
            regime,
            epochs,
            seed: 7,
            initial_lr: 1e-3,
            feature_maps: 2,
            gru_units: 2,
            batch_size: 4,
            ..TrainPlan::default()
        }
    }

    fn state_of(out: &RunOutput, name: &str) -> Vec<StateEntry> {
        out.checkpoints
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.clone())
            .unwrap_or_else(|| panic!("no checkpoint `{name}`"))
    }

    #[test]
    fn zero_epochs_leaves_checkpoints_at_initialisation() {
        let (_d, prep) = tiny_prep(2, 6, 2, 0.5, 3);
        let plan = tiny_plan(Regime::Separate, 0);
        let out = run_separate::<f32>(&plan, &prep).unwrap();

        // Rebuild with the same seed and compare states directly.
        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(plan.seed);
        let when = build_when(
            &mut tape,
            &mut init,
            prep.target_frames,
            crate::features::N_BANDS,
            plan.feature_maps,
            plan.gru_units,
        )
        .unwrap();
        let who = build_who(
            &mut tape,
            &mut init,
            prep.target_frames,
            crate::features::N_BANDS,
            plan.feature_maps,
            prep.split.vocab.len(),
        )
        .unwrap();
        assert_eq!(state_of(&out, "when"), when.state(&tape));
        assert_eq!(state_of(&out, "who"), who.state(&tape));
        assert!(out.history.is_empty());
    }

    #[test]
    fn identical_plans_produce_byte_identical_checkpoints() {
        let (_d, prep) = tiny_prep(2, 8, 2, 0.5, 5);
        for regime in [Regime::Separate, Regime::Joint, Regime::Tied] {
            let mut plan = tiny_plan(regime, 2);
            if regime == Regime::Joint {
                plan.who_input = plan.when_input;
            }
            let a = run::<f32>(&plan, &prep).unwrap();
            let b = run::<f32>(&plan, &prep).unwrap();
            assert_eq!(a.checkpoints.len(), b.checkpoints.len());
            for ((na, sa), (nb, sb)) in a.checkpoints.iter().zip(&b.checkpoints) {
                assert_eq!(na, nb);
                assert_eq!(sa, sb, "{regime:?}/{na} differs between runs");
            }
            assert_eq!(history_csv(&a.history), history_csv(&b.history));
        }
    }

    #[test]
    fn tied_checkpoints_share_identical_trunk_state() {
        let (_d, prep) = tiny_prep(2, 8, 2, 0.5, 9);
        let plan = tiny_plan(Regime::Tied, 2);
        let out = run_tied::<f32>(&plan, &prep).unwrap();
        let when = state_of(&out, "when");
        let who = state_of(&out, "who");
        let trunk_of = |s: &[StateEntry]| -> Vec<StateEntry> {
            s.iter()
                .filter(|e| e.name.starts_with("trunk."))
                .cloned()
                .collect()
        };
        let (tw, to) = (trunk_of(&when), trunk_of(&who));
        assert!(!tw.is_empty());
        assert_eq!(tw, to, "trunk state diverged between the two graphs");
    }

    #[test]
    fn tied_with_tagger_disabled_equals_the_separate_detector_half() {
        let (_d, prep) = tiny_prep(2, 8, 2, 0.5, 11);
        let mut tied = tiny_plan(Regime::Tied, 3);
        tied.train_who = false;
        let mut separate = tiny_plan(Regime::Separate, 3);
        separate.train_who = false;
        let a = run_tied::<f32>(&tied, &prep).unwrap();
        let b = run_separate::<f32>(&separate, &prep).unwrap();
        assert_eq!(state_of(&a, "when"), state_of(&b, "when"));
    }

    #[test]
    fn joint_total_decomposes_into_weighted_terms_plus_regularisation() {
        let (_d, prep) = tiny_prep(2, 6, 2, 0.5, 13);
        let mut plan = tiny_plan(Regime::Joint, 1);
        plan.when_input = InputMode::Plain;
        plan.who_input = InputMode::Plain;
        plan.loss_weights = (0.5, 5.0);
        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(plan.seed);
        let (when_model, who_model) = build_shared_pair(
            &mut tape,
            &mut init,
            &plan,
            prep.target_frames,
            prep.split.vocab.len(),
        );
        let mb = prep.minibatch(&prep.split.train, &[0, 1, 2, 3]).unwrap();
        let terms = joint_batch_terms(&mut tape, &when_model, &who_model, &mb, &plan).unwrap();
        let total = scalar_value(&tape, terms.total);
        let want = 0.5 * scalar_value(&tape, terms.when)
            + 5.0 * scalar_value(&tape, terms.who)
            + scalar_value(&tape, terms.reg);
        assert!((total - want).abs() < 1e-6, "{total} vs {want}");
        assert!(scalar_value(&tape, terms.reg) > 0.0);
    }

    #[test]
    fn zero_tagger_weight_gives_its_head_only_regularisation_gradient() {
        let (_d, prep) = tiny_prep(2, 6, 2, 0.5, 15);
        let mut plan = tiny_plan(Regime::Joint, 1);
        plan.when_input = InputMode::Plain;
        plan.who_input = InputMode::Plain;
        plan.loss_weights = (1.0, 0.0);
        let mut tape = Tape::<f32>::new();
        let mut init = Initializer::new(plan.seed);
        let (when_model, who_model) = build_shared_pair(
            &mut tape,
            &mut init,
            &plan,
            prep.target_frames,
            prep.split.vocab.len(),
        );
        let mb = prep.minibatch(&prep.split.train, &[0, 1, 2, 3]).unwrap();
        let terms = joint_batch_terms(&mut tape, &when_model, &who_model, &mb, &plan).unwrap();
        tape.backward(terms.total).unwrap();
        let params = who_model.head_parameters();
        for (name, var) in &params {
            let grad = tape.grad_tensor(*var);
            if name.ends_with("kernel") {
                // Exactly the regularisation gradient 2·coeff·w.
                let w = tape.value(*var);
                for (g, &wv) in grad.data().iter().zip(w.data()) {
                    let want = 2.0 * crate::layers::WHO_DENSE_L2 as f32 * wv;
                    assert!((g - want).abs() < 1e-7, "{name}: {g} vs {want}");
                }
            } else {
                assert!(grad.data().iter().all(|&g| g == 0.0), "{name} got gradient");
            }
        }
    }

    #[test]
    fn joint_rejects_mismatched_input_streams() {
        let mut plan = tiny_plan(Regime::Joint, 1);
        plan.when_input = InputMode::Hnh;
        plan.who_input = InputMode::Plain;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn joint_loss_decreases_on_a_small_synthetic_set() {
        let (_d, prep) = tiny_prep(2, 16, 4, 0.5, 17);
        let mut plan = tiny_plan(Regime::Joint, 5);
        plan.when_input = InputMode::Plain;
        plan.who_input = InputMode::Plain;
        let out = run_joint::<f32>(&plan, &prep).unwrap();
        let first = out.history.first().unwrap();
        let last = out.history.last().unwrap();
        let combined = |r: &EpochRecord| r.when_loss.unwrap() + r.who_loss.unwrap();
        assert!(
            combined(last) < combined(first),
            "loss did not decrease: {} -> {}",
            combined(first),
            combined(last)
        );
    }

    #[test]
    fn run_directory_is_self_describing() {
        let (_d, prep) = tiny_prep(2, 6, 2, 0.5, 19);
        let plan = tiny_plan(Regime::Separate, 1);
        let run_dir = tempfile::tempdir().unwrap();
        execute_plan(&plan, &prep, run_dir.path()).unwrap();
        let plan_text = std::fs::read_to_string(run_dir.path().join("plan.json")).unwrap();
        let parsed: TrainPlan = serde_json::from_str(&plan_text).unwrap();
        assert_eq!(parsed.seed, plan.seed);
        assert!(run_dir.path().join("history.csv").exists());
        assert!(run_dir.path().join("when.ckpt").exists());
        assert!(run_dir.path().join("who.ckpt").exists());
        let loaded = checkpoint::load(&run_dir.path().join("when.ckpt")).unwrap();
        assert!(loaded.iter().any(|e| e.name.starts_with("trunk.")));
    }


    #[test]
    fn early_stopping_cuts_the_run_short() {
        let (_d, prep) = tiny_prep(2, 10, 4, 0.5, 23);
        let mut plan = tiny_plan(Regime::Separate, 30);
        plan.eval_every = 1;
        plan.early_stop_patience = Some(2);
        let out = run_separate::<f32>(&plan, &prep).unwrap();
        assert!(
            out.history.len() < 30,
            "patience did not stop the run ({} epochs ran)",
            out.history.len()
        );
        assert!(out.history.iter().all(|r| r.when_auc.is_some()));
    }

    #[test]
    fn patience_without_evaluation_is_rejected() {
        let mut plan = tiny_plan(Regime::Separate, 5);
        plan.early_stop_patience = Some(1);
        plan.eval_every = 0;
        assert!(plan.validate().is_err());
    }


    #[test]
    fn default_plan_mirrors_the_reference_configuration() {
        let plan = TrainPlan::default();
        assert_eq!(plan.regime, Regime::Separate);
        assert_eq!(plan.when_input, InputMode::Hnh);
        assert_eq!(plan.who_input, InputMode::Plain);
        assert_eq!(plan.when_loss, crate::losses::WhenLoss::Mmm);
        assert_eq!(plan.batch_size, 8);
        assert_eq!(plan.initial_lr, 1e-5);
        assert_eq!(plan.lr_halving_period, 20);
        assert_eq!(plan.lr_floor, 1e-8);
        assert_eq!(plan.loss_weights, (0.5, 0.5));
        assert!(plan.early_stop_patience.is_none());
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let records = vec![
            EpochRecord {
                epoch: 0,
                lr: 1e-5,
                when_loss: Some(0.5),
                who_loss: None,
                when_auc: None,
                who_auc: Some(0.9),
            },
        ];
        let csv = history_csv(&records);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "epoch,lr,when_loss,who_loss,when_auc,who_auc");
        assert_eq!(lines[1], "0,0.00001,0.5,,,0.9");
    }
}

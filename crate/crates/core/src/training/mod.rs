//! Objectives, the epoch loop with early stopping, teacher handling and
//! checkpoints.

pub mod checkpoint;

use std::collections::HashMap;

use log::{debug, info};
use numkit::{adamw_step, Gradients, NumError, OptimState, ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bind::{Binder, Trainable};
use crate::config::{Objective, TrainConfig};
use crate::data::{SegmentedSession, ZStats};
use crate::error::{Error, Result};
use crate::model::{make_mask_plan, LossTerms, Model};
use crate::tokenizer::{multimodal_input, Modality, SeqInput};

/// Prefix under which a live teacher's parameters appear on a shared tape.
pub const TEACHER_PREFIX: &str = "teacher/";

/// A session with the statistics needed to build model inputs.
#[derive(Clone, Debug)]
pub struct SessionData {
    pub seg: SegmentedSession,
    /// Spike z-score statistics for multimodal inputs.
    pub spike_stats: Option<ZStats>,
}

impl SessionData {
    pub fn new(seg: SegmentedSession) -> Self {
        let spike_stats = seg.record.spikes.as_ref().map(|s| {
            let x: Vec<f64> = s.data.iter().map(|&k| k as f64).collect();
            crate::preprocess::zscore(&x, s.rows, s.cols).1
        });
        Self { seg, spike_stats }
    }

    pub fn id(&self) -> &str {
        self.seg.id()
    }

    /// Model input for one sequence in the given modality.
    pub fn input(&self, modality: Modality, seq: usize, zero_spikes: bool) -> Result<SeqInput> {
        match modality {
            Modality::Spike => Ok(SeqInput::Counts(self.seg.spikes(seq)?)),
            Modality::Lfp => Ok(SeqInput::Values(self.seg.lfp(seq)?)),
            Modality::Multimodal => {
                let stats = self
                    .spike_stats
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("session {} has no spikes", self.id())))?;
                multimodal_input(&self.seg.spikes(seq)?, stats, &self.seg.lfp(seq)?, zero_spikes)
            }
        }
    }

    /// Number of input signals for a modality.
    pub fn n_signals(&self, modality: Modality) -> usize {
        let r = &self.seg.record;
        match modality {
            Modality::Spike => r.n_spikes(),
            Modality::Lfp => r.n_lfp(),
            Modality::Multimodal => r.n_spikes() + r.n_lfp(),
        }
    }

    pub fn spike_dims(&self, modality: Modality) -> usize {
        if modality == Modality::Multimodal {
            self.seg.record.n_spikes()
        } else {
            0
        }
    }
}

/// `(session index, sequence index)`.
pub type Item = (usize, usize);

pub fn split_items(sessions: &[SessionData], pick: impl Fn(&SessionData) -> Vec<usize>) -> Vec<Item> {
    sessions
        .iter()
        .enumerate()
        .flat_map(|(s, d)| pick(d).into_iter().map(move |q| (s, q)))
        .collect()
}

/// Frozen (or later unfrozen) spike teacher.
pub struct Teacher<F: Scalar> {
    pub model: Model<F>,
    pub optim: OptimState<F>,
    cache: HashMap<(String, usize), Tensor<F>>,
}

impl<F: Scalar> Teacher<F> {
    pub fn new(model: Model<F>) -> Self {
        Self {
            model,
            optim: OptimState::new(),
            cache: HashMap::new(),
        }
    }

    /// Clean (unmasked) pooled teacher representation, cached while frozen.
    pub fn pooled(&mut self, data: &SessionData, seq: usize) -> Result<Tensor<F>> {
        let key = (data.id().to_string(), seq);
        if let Some(t) = self.cache.get(&key) {
            return Ok(t.clone());
        }
        let input = data.input(self.model.modality(), seq, false)?;
        let mut tape = Tape::inference();
        let (p, _) = self.model.pooled(&mut tape, &Binder::new(&self.model.params), data.id(), &input)?;
        let v = tape.value(p).clone();
        self.cache.insert(key, v.clone());
        Ok(v)
    }

    pub fn invalidate(&mut self) {
        self.cache.clear();
    }
}

/// What a training run optimises.
pub struct Job<'a> {
    pub objective: Objective,
    pub epochs: u32,
    pub batch: usize,
    pub train: Vec<Item>,
    pub val: Vec<Item>,
    pub trainable: Trainable,
    pub patience: u32,
    pub lambda: f64,
    pub unfreeze_epoch: Option<u32>,
    pub sessions: &'a [SessionData],
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState<F: Scalar> {
    pub model: Model<F>,
    pub optim: OptimState<F>,
    pub epoch: u32,
    pub rng: ChaCha8Rng,
    pub best_val: Option<f64>,
    pub since_best: u32,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(model: Model<F>, seed: u64) -> Self {
        Self {
            model,
            optim: OptimState::new(),
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            best_val: None,
            since_best: 0,
        }
    }

    /// Fresh optimiser, schedule and stopping state on the same weights.
    pub fn restart(&mut self, seed: u64) {
        self.optim = OptimState::new();
        self.epoch = 0;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.best_val = None;
        self.since_best = 0;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub wd: f64,
    pub train: LossTerms,
    pub val: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub best_val: f64,
    pub best_epoch: u32,
    pub stopped_early: bool,
}

impl TrainReport {
    /// One tab-separated line per epoch.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tlr\twd\tmae\tbehavior\trecon\talign\ttrain_total\tval_total\n");
        for e in &self.history {
            s.push_str(&format!(
                "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                e.epoch, e.lr, e.wd, e.train.mae, e.train.behavior, e.train.recon, e.train.align, e.train.total, e.val
            ));
        }
        s
    }
}

/// Counts epochs without validation improvement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: u32,
    pub best: Option<f64>,
    pub since: u32,
}

impl EarlyStopper {
    pub fn new(patience: u32) -> Self {
        Self {
            patience,
            best: None,
            since: 0,
        }
    }

    /// Records a validation loss; returns whether it is a new best.
    pub fn observe(&mut self, val: f64) -> bool {
        match self.best {
            Some(b) if val >= b => {
                self.since += 1;
                false
            }
            _ => {
                self.best = Some(val);
                self.since = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since >= self.patience
    }
}

fn teacher_live(job: &Job, epoch: u32) -> bool {
    matches!(job.unfreeze_epoch, Some(u) if epoch >= u)
}

/// Builds the loss of one sequence on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn sequence_loss<F: Scalar>(
    tape: &mut Tape<F>,
    model: &Model<F>,
    student: &Binder<F>,
    teacher: Option<(&Model<F>, &Binder<F>)>,
    teacher_fixed: Option<&Tensor<F>>,
    objective: Objective,
    lambda: f64,
    data: &SessionData,
    seq: usize,
    mask_seed: u64,
) -> Result<(Var, LossTerms)> {
    let session = data.id();
    let input = data.input(model.modality(), seq, false)?;
    let mut terms = LossTerms::default();
    let loss = match objective {
        Objective::Mae | Objective::Sup => {
            let tokens = input.rows() * model.tokenizer.session(session)?.layout.n_patches;
            let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let plan = make_mask_plan(tokens, model.config.encoder.mask_prob, &mut rng);
            let mae = model.mae_loss(tape, student, session, &input, &plan)?;
            terms.mae = tape.value(mae).item().to_f64_lossy();
            if objective == Objective::Sup {
                let (pooled, _) = model.pooled(tape, student, session, &input)?;
                let beh = model.behavior_loss(tape, student, pooled, &data.seg.behavior(seq)?)?;
                terms.behavior = tape.value(beh).item().to_f64_lossy();
                tape.add(mae, beh)?
            } else {
                mae
            }
        }
        Objective::Fullsup => {
            let (pooled, _) = model.pooled(tape, student, session, &input)?;
            let beh = model.behavior_loss(tape, student, pooled, &data.seg.behavior(seq)?)?;
            terms.behavior = tape.value(beh).item().to_f64_lossy();
            beh
        }
        Objective::Distill | Objective::DistillSup => {
            let (pooled, enc) = model.pooled(tape, student, session, &input)?;
            let first = if objective == Objective::Distill {
                let r = model.recon_loss(tape, student, session, &input, &enc)?;
                terms.recon = tape.value(r).item().to_f64_lossy();
                r
            } else {
                let beh = model.behavior_loss(tape, student, pooled, &data.seg.behavior(seq)?)?;
                terms.behavior = tape.value(beh).item().to_f64_lossy();
                beh
            };
            if lambda == 0.0 {
                first
            } else {
                let target = match (teacher, teacher_fixed) {
                    (_, Some(fixed)) => tape.constant(fixed.clone()),
                    (Some((tm, tb)), None) => {
                        let t_in = data.input(tm.modality(), seq, false)?;
                        tm.pooled(tape, tb, session, &t_in)?.0
                    }
                    (None, None) => return Err(Error::Usage("distillation requires a teacher".into())),
                };
                if tape.shape(target) != tape.shape(pooled) {
                    return Err(Error::Config(format!(
                        "teacher representation {:?} does not match student {:?}",
                        tape.shape(target),
                        tape.shape(pooled)
                    )));
                }
                let align = tape.cosine_alignment(pooled, target)?;
                terms.align = tape.value(align).item().to_f64_lossy();
                let scaled = tape.scale(align, lambda);
                tape.add(first, scaled)?
            }
        }
    };
    terms.total = tape.value(loss).item().to_f64_lossy();
    Ok((loss, terms))
}

/// Per-sequence mask seeds used for validation; fixed for a run so the
/// validation loss is comparable across epochs.
fn val_seed(base: u64, item: Item) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(base ^ 0x5eed_0000_0000_0000);
    r.set_stream(((item.0 as u64) << 32) | item.1 as u64);
    r.next_u64()
}

struct ItemResult<F> {
    terms: LossTerms,
    grads: Option<Gradients<F>>,
}

fn run_item<F: Scalar>(
    state_model: &Model<F>,
    teacher: Option<&Model<F>>,
    fixed: Option<&Tensor<F>>,
    job: &Job,
    trainable: &Trainable,
    item: Item,
    seed: u64,
    grad: bool,
) -> Result<ItemResult<F>> {
    let mut tape = if grad { Tape::new() } else { Tape::inference() };
    let student = Binder::with(&state_model.params, "", trainable.clone());
    let tb = teacher.map(|t| Binder::with(&t.params, TEACHER_PREFIX, Trainable::All));
    let pair = match (teacher, tb.as_ref()) {
        (Some(t), Some(b)) => Some((t, b)),
        _ => None,
    };
    let (loss, terms) = sequence_loss(
        &mut tape,
        state_model,
        &student,
        pair,
        fixed,
        job.objective,
        job.lambda,
        &job.sessions[item.0],
        item.1,
        seed,
    )?;
    if !terms.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss on session {} sequence {}",
            job.sessions[item.0].id(),
            item.1
        )));
    }
    let grads = if grad { Some(tape.backward(loss)?) } else { None };
    Ok(ItemResult { terms, grads })
}

fn needs_teacher(job: &Job) -> bool {
    matches!(job.objective, Objective::Distill | Objective::DistillSup) && job.lambda > 0.0
}

/// Mean validation loss with fixed mask seeds.
pub fn validate<F: Scalar>(
    model: &Model<F>,
    teacher: Option<&mut Teacher<F>>,
    job: &Job,
    seed: u64,
    live_teacher: bool,
) -> Result<LossTerms> {
    if job.val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let (fixed, tmodel) = teacher_inputs(teacher, job, &job.val, live_teacher)?;
    let results: Vec<Result<ItemResult<F>>> = job
        .val
        .par_iter()
        .enumerate()
        .map(|(i, &item)| {
            run_item(model, tmodel, fixed.get(i), job, &Trainable::Nothing, item, val_seed(seed, item), false)
        })
        .collect();
    let mut terms = LossTerms::default();
    let w = 1.0 / job.val.len() as f64;
    for r in results {
        terms.add_scaled(&r?.terms, w);
    }
    Ok(terms)
}

/// Cached teacher targets for `items` (frozen) or the live teacher model.
fn teacher_inputs<'t, F: Scalar>(
    teacher: Option<&'t mut Teacher<F>>,
    job: &Job,
    items: &[Item],
    live: bool,
) -> Result<(Vec<Tensor<F>>, Option<&'t Model<F>>)> {
    if !needs_teacher(job) {
        return Ok((Vec::new(), None));
    }
    let t = teacher.ok_or_else(|| Error::Usage("distillation requires a teacher".into()))?;
    if live {
        return Ok((Vec::new(), Some(&t.model)));
    }
    let mut fixed = Vec::with_capacity(items.len());
    for &(s, q) in items {
        fixed.push(t.pooled(&job.sessions[s], q)?);
    }
    Ok((fixed, None))
}

/// Trains until `job.epochs` epochs have run in total or validation stops
/// improving; the model is left at the best validation checkpoint.
pub fn train<F: Scalar>(
    state: &mut TrainState<F>,
    mut teacher: Option<&mut Teacher<F>>,
    job: &Job,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if job.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if job.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(t) = teacher.as_deref() {
        if needs_teacher(job) && t.model.d() != state.model.d() {
            return Err(Error::Config(format!(
                "teacher width {} differs from student width {}",
                t.model.d(),
                state.model.d()
            )));
        }
    }
    let schedule = cfg.schedule();
    let adam = cfg.adamw();
    let val_base = cfg.seed;
    let mut stopper = EarlyStopper {
        patience: job.patience,
        best: state.best_val,
        since: state.since_best,
    };
    let mut best_params: ParamStore<F> = state.model.params.clone();
    let mut best_teacher: Option<ParamStore<F>> = teacher.as_ref().map(|t| t.model.params.clone());
    let mut report = TrainReport {
        best_val: state.best_val.unwrap_or(f64::INFINITY),
        ..TrainReport::default()
    };

    while state.epoch < job.epochs {
        let epoch = state.epoch;
        let live = teacher_live(job, epoch) && needs_teacher(job);
        let lr = schedule.lr_at(epoch);
        let wd = schedule.wd_at(epoch);
        let mut order = job.train.clone();
        order.shuffle(&mut state.rng);
        let mut epoch_terms = LossTerms::default();
        for batch in order.chunks(job.batch) {
            let seeds: Vec<u64> = batch.iter().map(|_| state.rng.next_u64()).collect();
            let (fixed, tmodel) = teacher_inputs(teacher.as_deref_mut(), job, batch, live)?;
            let model = &state.model;
            let results: Vec<Result<ItemResult<F>>> = batch
                .par_iter()
                .enumerate()
                .map(|(i, &item)| run_item(model, tmodel, fixed.get(i), job, &job.trainable, item, seeds[i], true))
                .collect();
            let w = F::from_f64_lossy(1.0 / batch.len() as f64);
            let mut total = Gradients::default();
            for r in results {
                let r = r.map_err(|e| abort(e, state, &best_params))?;
                epoch_terms.add_scaled(&r.terms, 1.0 / order.len() as f64);
                total.accumulate(r.grads.as_ref().expect("grad tape"), w);
            }
            let (student_g, teacher_g) = split_grads(total);
            adamw_step(&mut state.model.params, &student_g, &mut state.optim, lr, wd, &adam)
                .map_err(|e| abort(e.into(), state, &best_params))?;
            if live {
                let t = teacher.as_deref_mut().expect("live teacher");
                adamw_step(&mut t.model.params, &teacher_g, &mut t.optim, lr, wd, &adam)?;
                t.invalidate();
            }
        }
        let val = validate(&state.model, teacher.as_deref_mut(), job, val_base, live)?.total;
        if !val.is_finite() {
            return Err(abort(Error::Numerical("validation loss is not finite".into()), state, &best_params));
        }
        debug!("epoch {epoch}: lr {lr:.3e} train {:.5} val {val:.5}", epoch_terms.total);
        report.history.push(EpochLog {
            epoch,
            lr,
            wd,
            train: epoch_terms,
            val,
        });
        state.epoch += 1;
        if stopper.observe(val) {
            best_params = state.model.params.clone();
            best_teacher = teacher.as_ref().map(|t| t.model.params.clone());
            report.best_val = val;
            report.best_epoch = epoch;
        }
        state.best_val = stopper.best;
        state.since_best = stopper.since;
        if stopper.should_stop() {
            info!("early stop at epoch {epoch}; best epoch {}", report.best_epoch);
            report.stopped_early = true;
            break;
        }
    }
    state.model.params = best_params;
    if let (Some(t), Some(p)) = (teacher.as_deref_mut(), best_teacher) {
        if t.model.params != p {
            t.model.params = p;
            t.invalidate();
        }
    }
    Ok(report)
}

/// Restores the last good parameters and converts the failure.
fn abort<F: Scalar>(e: Error, state: &mut TrainState<F>, best: &ParamStore<F>) -> Error {
    state.model.params = best.clone();
    match e {
        Error::Tensor(NumError::NonFiniteGradient { name }) => {
            Error::Numerical(format!("training diverged: non-finite gradient for `{name}`"))
        }
        other => other,
    }
}

/// Separates gradients for student parameters from live-teacher ones.
fn split_grads<F: Scalar>(g: Gradients<F>) -> (Gradients<F>, Gradients<F>) {
    let mut student = Gradients::default();
    let mut teacher = Gradients::default();
    for (name, t) in g.into_params() {
        match name.strip_prefix(TEACHER_PREFIX) {
            Some(rest) => teacher.insert(rest, t),
            None => student.insert(name, t),
        }
    }
    (student, teacher)
}

/// Loss of a fixed set of items without touching any state.
pub fn evaluate_loss<F: Scalar>(model: &Model<F>, teacher: Option<&mut Teacher<F>>, job: &Job, seed: u64) -> Result<LossTerms> {
    validate(model, teacher, job, seed, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopper_counts_non_improving_epochs() {
        let mut s = EarlyStopper::new(2);
        assert!(s.observe(1.0));
        assert!(!s.observe(1.0));
        assert!(!s.should_stop());
        assert!(!s.observe(1.5));
        assert!(s.should_stop());
        assert!(s.observe(0.5));
        assert!(!s.should_stop());
    }

    #[test]
    fn teacher_gradients_are_routed_by_prefix() {
        let mut g = Gradients::<f64>::default();
        g.insert("enc.0.wq", Tensor::zeros([1]));
        g.insert("teacher/enc.0.wq", Tensor::ones([1]));
        let (s, t) = split_grads(g);
        assert_eq!(s.len(), 1);
        assert_eq!(t.get("enc.0.wq").unwrap().data(), &[1.0]);
    }
}

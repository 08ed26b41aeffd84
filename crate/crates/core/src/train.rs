//! Optimization: learning-rate schedule, Adam, gradient accumulation, the
//! training loop with dev selection, and checkpoint averaging.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autograd::Tape;
use crate::data::{collate, make_batches, shuffle_batches, AugmentSpec, TripletExample};
use crate::decode::{DecodePath, DecodeRequest};
use crate::error::{MetricError, TrainError};
use crate::metrics::st_bleu;
use crate::nn::{BoundParams, Dropout, Model, ModelConfig, ParamStore};
use crate::objective::{batch_loss, DualBatch, LossBreakdown, Objective};
use crate::rng::{derive_seed, rng};
use crate::tensor::{Real, Tensor};
use crate::vocab::Vocabulary;

/// `peak_lr * min(step / warmup, sqrt(warmup / step))`, for `step >= 1`.
pub fn lr_schedule(step: u64, peak_lr: f64, warmup: u64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    peak_lr * (s / w).min(Float::sqrt(w / s))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates and the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub step: u64,
    pub m: ParamStore<R>,
    pub v: ParamStore<R>,
}

impl<R: Real> AdamState<R> {
    /// Zero moments shaped like `params`.
    pub fn zeros(params: &ParamStore<R>) -> Self {
        let mut m = ParamStore::default();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes, so a non-finite gradient leaves everything untouched.
pub fn adam_step<R: Real>(
    params: &mut ParamStore<R>,
    grads: &ParamStore<R>,
    state: &mut AdamState<R>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| crate::error::ModelError::MissingParameter(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(crate::error::ModelError::ParameterShape {
                name: name.clone(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            }
            .into());
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient { param: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - Float::powf(cfg.beta1, t);
    let c2 = 1.0 - Float::powf(cfg.beta2, t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above").data();
        let m = state.m.get_mut(name).expect("moments match params").data_mut();
        let v = state.v.get_mut(name).expect("moments match params").data_mut();
        for i in 0..g.len() {
            let gi = g[i].as_f64();
            let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
            m[i] = R::from_f64(mi);
            v[i] = R::from_f64(vi);
            let update = lr * (mi / c1) / (Float::sqrt(vi / c2) + cfg.eps);
            let pd = p.data_mut();
            pd[i] = R::from_f64(pd[i].as_f64() - update);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Transcription NLL only, to pre-train the encoder.
    PretrainAsr,
    /// Both layouts plus the KL agreement terms.
    TrainTda,
    /// Both layouts, lambda forced to zero.
    TrainMleOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::PretrainAsr, TrainMode::TrainTda, TrainMode::TrainMleOnly];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::PretrainAsr => "pretrain-asr",
            TrainMode::TrainTda => "train-tda",
            TrainMode::TrainMleOnly => "train-mle-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// What ranks checkpoints for the best-k set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DevMetric {
    /// Token-mean dev objective, lower is better.
    Loss,
    /// Greedy ST corpus BLEU, higher is better.
    Bleu,
}

impl DevMetric {
    pub fn name(self) -> &'static str {
        match self {
            DevMetric::Loss => "loss",
            DevMetric::Bleu => "bleu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [DevMetric::Loss, DevMetric::Bleu].into_iter().find(|m| m.name() == s)
    }

    /// Whether `a` ranks above `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            DevMetric::Loss => a < b,
            DevMetric::Bleu => a > b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub lambda: f64,
    pub max_steps: u64,
    /// Stops early after this many passes over the data.
    pub max_epochs: Option<u64>,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub keep_best_k: usize,
    /// Batches per update.
    pub grad_accum: usize,
    pub mode: TrainMode,
    /// Padded target tokens per batch, counted over both layouts.
    pub token_budget: usize,
    pub augment: Option<AugmentSpec>,
    pub dev_metric: DevMetric,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 0.002,
            warmup_steps: 500,
            label_smoothing: 0.1,
            dropout: 0.1,
            lambda: 1.0,
            max_steps: 5000,
            max_epochs: None,
            seed: 1,
            checkpoint_every: 500,
            keep_best_k: 10,
            grad_accum: 1,
            mode: TrainMode::TrainTda,
            token_budget: 2000,
            augment: None,
            dev_metric: DevMetric::Loss,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale recipe: 10k warm-up, dropout 0.3, four batches per update.
    pub fn full_scale() -> Self {
        Self {
            warmup_steps: 10_000,
            dropout: 0.3,
            grad_accum: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.into()));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if self.checkpoint_every == 0 || self.keep_best_k == 0 || self.grad_accum == 0 || self.token_budget == 0 {
            return bad("checkpoint_every, keep_best_k, grad_accum and token_budget must be at least 1");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        if self.mode == TrainMode::PretrainAsr && self.dev_metric == DevMetric::Bleu {
            return bad("pretrain-asr selects checkpoints by loss");
        }
        Ok(())
    }

    /// Lambda actually applied: zero outside train-tda.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            TrainMode::TrainTda => self.lambda,
            _ => 0.0,
        }
    }

    pub fn objective(&self) -> Objective {
        match self.mode {
            TrainMode::PretrainAsr => Objective::Asr,
            _ => Objective::Dual {
                lambda: self.effective_lambda(),
            },
        }
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub dev_metric: Option<f64>,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
}

/// Per-scalar arithmetic mean of the snapshots' parameters, computed in f64.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<ParamStore<f32>, TrainError> {
    let first = checkpoints.first().ok_or(TrainError::NoCheckpoints)?;
    if checkpoints.iter().any(|c| c.model != first.model) {
        return Err(TrainError::ConfigMismatch);
    }
    let stores: Vec<&ParamStore<f32>> = checkpoints.iter().map(|c| &c.params).collect();
    average_params(&stores)
}

/// Per-scalar mean of parameter stores with identical names and shapes.
pub fn average_params(stores: &[&ParamStore<f32>]) -> Result<ParamStore<f32>, TrainError> {
    let first = stores.first().ok_or(TrainError::NoCheckpoints)?;
    let k = stores.len() as f64;
    let mut out = ParamStore::default();
    for (name, t) in first.iter() {
        let mut sum = alloc::vec![0.0f64; t.numel()];
        for s in stores {
            let o = s.get(name).ok_or(TrainError::ConfigMismatch)?;
            if o.shape() != t.shape() {
                return Err(TrainError::ConfigMismatch);
            }
            for (acc, &x) in sum.iter_mut().zip(o.data()) {
                *acc += f64::from(x);
            }
        }
        let mean: Vec<f32> = sum.iter().map(|&x| (x / k) as f32).collect();
        out.insert(
            name.clone(),
            Tensor::new(t.shape(), mean).map_err(crate::error::ModelError::from)?,
        );
    }
    if stores.iter().any(|s| s.len() != first.len()) {
        return Err(TrainError::ConfigMismatch);
    }
    Ok(out)
}

/// Copies the down-sampler and encoder from a pre-trained parameter set.
pub fn init_encoder_from(params: &mut ParamStore<f32>, pretrained: &ParamStore<f32>) -> Result<usize, TrainError> {
    Ok(params.copy_prefix_from(pretrained, "conv.")? + params.copy_prefix_from(pretrained, "enc.")?)
}

/// Gradients of one update, already divided by the token count.
#[derive(Clone, Debug)]
pub struct Accumulated<R> {
    pub grads: ParamStore<R>,
    /// Token means over all micro-batches.
    pub loss: LossBreakdown,
    pub tokens: usize,
}

/// Runs forward and backward over each micro-batch and sums the gradients
/// of the unnormalized objective, then divides by the total token count.
/// The result equals one pass over the concatenated batch.
pub fn accumulate_gradients<R: Real>(
    model: &Model,
    params: &ParamStore<R>,
    batches: &[DualBatch<R>],
    objective: Objective,
    label_smoothing: f64,
    dropout: &mut Dropout<'_>,
) -> Result<Accumulated<R>, TrainError> {
    let mut grads: Option<ParamStore<R>> = None;
    let mut sums: Option<LossBreakdown> = None;
    let mut tokens = 0;
    for batch in batches {
        let mut tape = Tape::<R>::new();
        let bound = BoundParams::bind(&mut tape, params, true);
        let loss = batch_loss(&mut tape, model, &bound, batch, objective, label_smoothing, dropout)?;
        tape.backward(loss.total).map_err(crate::error::ModelError::from)?;
        let g = bound.grads(&tape);
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (name, t) in acc.iter_mut() {
                    let src = g.get(name).expect("same parameter set").data();
                    for (a, &b) in t.data_mut().iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
        sums = Some(match sums {
            None => loss.sums,
            Some(s) => s.accumulate(&loss.sums),
        });
        tokens += loss.tokens;
    }
    let mut grads = grads.ok_or(TrainError::Config("no batches to accumulate".into()))?;
    let scale = R::from_f64(1.0 / tokens.max(1) as f64);
    for (_, t) in grads.iter_mut() {
        for x in t.data_mut() {
            *x = *x * scale;
        }
    }
    Ok(Accumulated {
        grads,
        loss: sums.expect("at least one batch").per_token(tokens),
        tokens,
    })
}

/// Token-mean objective over `examples` without dropout or smoothing.
pub fn evaluate_loss(
    model: &Model,
    params: &ParamStore<f32>,
    examples: &[TripletExample],
    objective: Objective,
    budget: usize,
) -> Result<LossBreakdown, TrainError> {
    let vocab = model.config().vocab_size;
    let mut sums: Option<LossBreakdown> = None;
    let mut tokens = 0;
    for idx in make_batches(examples, budget)? {
        let batch = collate(examples, &idx, vocab, None)?;
        let mut tape = Tape::<f32>::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let loss = batch_loss(
            &mut tape,
            model,
            &bound,
            &batch.dual,
            objective,
            0.0,
            &mut Dropout::disabled(),
        )?;
        sums = Some(match sums {
            None => loss.sums,
            Some(s) => s.accumulate(&loss.sums),
        });
        tokens += loss.tokens;
    }
    let lambda = match objective {
        Objective::Asr => 0.0,
        Objective::Dual { lambda } => lambda,
    };
    let empty = crate::objective::tda_objective(0.0, 0.0, 0.0, 0.0, lambda)?;
    Ok(sums.unwrap_or(empty).per_token(tokens))
}

/// One optimizer update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Token means of the update's batches.
    pub loss: LossBreakdown,
    pub tokens: usize,
}

/// One dev evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalLog {
    pub step: u64,
    pub loss: LossBreakdown,
    pub bleu: Option<f64>,
    /// Value of the selection metric.
    pub metric: f64,
}

/// Observer of training progress; the std crate writes files from here.
pub trait TrainHooks {
    fn on_step(&mut self, _log: &StepLog) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_eval(&mut self, _log: &EvalLog) -> Result<(), TrainError> {
        Ok(())
    }

    /// Called after every dev evaluation with the current state. `best` is
    /// set when the checkpoint entered the best-k set.
    fn on_checkpoint(&mut self, _ckpt: &Checkpoint, _best: bool) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Final state, best-k set and logs of a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Best first; ties keep the earlier step.
    pub best: Vec<Checkpoint>,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
}

/// Training set, dev set and the vocabulary used to score BLEU.
pub struct TrainData<'a> {
    pub train: &'a [TripletExample],
    pub dev: &'a [TripletExample],
    pub vocab: &'a Vocabulary,
}

fn insert_best(best: &mut Vec<Checkpoint>, ckpt: &Checkpoint, metric: DevMetric, k: usize) -> bool {
    let value = ckpt.dev_metric.expect("evaluated checkpoint");
    let pos = best
        .iter()
        .position(|c| metric.better(value, c.dev_metric.expect("evaluated checkpoint")))
        .unwrap_or(best.len());
    if pos >= k {
        return false;
    }
    let mut kept = ckpt.clone();
    kept.adam = None;
    best.insert(pos, kept);
    best.truncate(k);
    true
}

/// Whether `e` comes from a NaN or infinity in the forward pass.
fn non_finite(e: &TrainError) -> bool {
    use crate::error::{ModelError, ObjectiveError, TensorError};
    let model = |m: &ModelError| matches!(m, ModelError::Tensor(TensorError::NonFinite { .. }));
    match e {
        TrainError::Model(m) => model(m),
        TrainError::Objective(ObjectiveError::Model(m)) => model(m),
        TrainError::Objective(ObjectiveError::Tensor(TensorError::NonFinite { .. })) => true,
        _ => false,
    }
}

fn dev_eval(
    model: &Model,
    params: &ParamStore<f32>,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    step: u64,
) -> Result<EvalLog, TrainError> {
    let loss = evaluate_loss(model, params, data.dev, cfg.objective(), cfg.token_budget)?;
    let bleu = match cfg.dev_metric {
        DevMetric::Loss => None,
        DevMetric::Bleu => Some(
            st_bleu(
                model,
                params,
                data.dev,
                data.vocab,
                &DecodeRequest::greedy(DecodePath::St),
            )
            .map_err(|e| match e {
                MetricError::Model(m) => TrainError::Model(m),
                other => TrainError::Config(format!("dev BLEU: {other}")),
            })?,
        ),
    };
    Ok(EvalLog {
        step,
        metric: bleu.unwrap_or(loss.total),
        loss,
        bleu,
    })
}

/// Trains from `init` for `cfg.max_steps` updates (or `cfg.max_epochs`).
///
/// The dev set is evaluated before the first update, every
/// `checkpoint_every` updates and after the last one. A non-finite loss or
/// gradient stops the run with [`TrainError::Diverged`]; the parameters of
/// the failing update are never applied, and checkpoints already handed to
/// `hooks` stay valid.
pub fn train(
    model: &Model,
    cfg: &TrainConfig,
    init: ParamStore<f32>,
    data: &TrainData<'_>,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    init.check(model.config())?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(TrainError::Config("train and dev sets must be non-empty".into()));
    }
    let vocab = model.config().vocab_size;
    let objective = cfg.objective();
    let batches = make_batches(data.train, cfg.token_budget)?;
    let mut params = init;
    let mut adam = AdamState::zeros(&params);
    let mut best = Vec::new();
    let mut steps = Vec::new();
    let mut evals = Vec::new();

    let diverged = |step: u64| {
        move |e: TrainError| {
            if non_finite(&e) {
                TrainError::Diverged { step }
            } else {
                e
            }
        }
    };
    let checkpoint = |params: &ParamStore<f32>,
                      adam: &AdamState<f32>,
                      step: u64,
                      evals: &mut Vec<EvalLog>,
                      best: &mut Vec<Checkpoint>,
                      hooks: &mut dyn TrainHooks|
     -> Result<Checkpoint, TrainError> {
        let log = dev_eval(model, params, cfg, data, step).map_err(diverged(step))?;
        hooks.on_eval(&log)?;
        let ckpt = Checkpoint {
            model: model.config().clone(),
            train: cfg.clone(),
            step,
            dev_metric: Some(log.metric),
            params: params.clone(),
            adam: Some(adam.clone()),
        };
        evals.push(log);
        let kept = insert_best(best, &ckpt, cfg.dev_metric, cfg.keep_best_k);
        hooks.on_checkpoint(&ckpt, kept)?;
        Ok(ckpt)
    };

    let mut last = checkpoint(&params, &adam, 0, &mut evals, &mut best, hooks)?;
    let mut epoch = 0u64;
    let mut order = batches.clone();
    shuffle_batches(&mut order, derive_seed(cfg.seed, "epoch0"));
    let mut cursor = 0;
    let mut step = 0u64;
    while step < cfg.max_steps {
        let mut micro = Vec::with_capacity(cfg.grad_accum);
        let mut exhausted = false;
        for m in 0..cfg.grad_accum {
            if cursor == order.len() {
                epoch += 1;
                if cfg.max_epochs.is_some_and(|e| epoch >= e) {
                    exhausted = true;
                    break;
                }
                order = batches.clone();
                shuffle_batches(&mut order, derive_seed(cfg.seed, &format!("epoch{epoch}")));
                cursor = 0;
            }
            let aug_seed = derive_seed(cfg.seed, &format!("augment{}/{m}", step + 1));
            let augment = cfg.augment.as_ref().map(|a| (a, aug_seed));
            micro.push(collate(data.train, &order[cursor], vocab, augment)?.dual);
            cursor += 1;
        }
        if exhausted && micro.is_empty() {
            break;
        }
        step += 1;
        let mut r = rng(derive_seed(cfg.seed, &format!("dropout{step}")));
        let mut dropout = Dropout::new(cfg.dropout, &mut r);
        let acc = accumulate_gradients(model, &params, &micro, objective, cfg.label_smoothing, &mut dropout)
            .map_err(diverged(step))?;
        if !acc.loss.total.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        let lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps);
        match adam_step(&mut params, &acc.grads, &mut adam, lr, &cfg.adam) {
            Ok(()) => {}
            Err(TrainError::NonFiniteGradient { .. }) => return Err(TrainError::Diverged { step }),
            Err(e) => return Err(e),
        }
        let log = StepLog {
            step,
            epoch,
            lr,
            loss: acc.loss,
            tokens: acc.tokens,
        };
        hooks.on_step(&log)?;
        steps.push(log);
        if step.is_multiple_of(cfg.checkpoint_every) {
            last = checkpoint(&params, &adam, step, &mut evals, &mut best, hooks)?;
        }
        if exhausted {
            break;
        }
    }
    if last.step != step {
        last = checkpoint(&params, &adam, step, &mut evals, &mut best, hooks)?;
    }
    Ok(TrainOutcome {
        last,
        best,
        steps,
        evals,
    })
}

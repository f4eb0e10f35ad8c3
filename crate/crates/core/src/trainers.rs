//! Training loops: plain cross-entropy, knowledge distillation from fixed
//! teacher logits, and TRADES-style adversarial training, plus the PGD
//! attack and evaluation they share.
//!
//! Randomness: parameters come from the `INIT` stream of the seed, batch
//! order from `SHUFFLE`, training-time attack starts from `ATTACK` and
//! evaluation-time attack starts from a fresh `EVAL_ATTACK` stream on every
//! call to [`evaluate`].

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::class_stats::{ClassStatsTable, DEFAULT_MOMENTUM, DEFAULT_TEMPERATURE};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    dkl_family_traced, hard_ce, jsd_forward_backward, kl_backward, kl_forward, LossConfig,
    LossOutput, WeightSource, WmseOutput,
};
use crate::model::{argmax_rows, cosine_lr, MlpParams, Sgd, DEFAULT_WEIGHT_DECAY};
use crate::rng::{stream, SeededRng};

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Kl,
    /// [`crate::dkl_family`] with `loss_config` used as given.
    Dkl,
    /// [`crate::dkl_family`] with class-wise weights and the student side of
    /// the wMSE term enabled; `alpha`, `beta`, `kernel` and `detach_m` come
    /// from `loss_config`.
    Ikl,
    Jsd,
    CeOnly,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Kl => "kl",
            LossKind::Dkl => "dkl",
            LossKind::Ikl => "ikl",
            LossKind::Jsd => "jsd",
            LossKind::CeOnly => "ce_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_start: bool,
}

impl Default for AttackConfig {
    /// Desk-scale setting for features in `[0, 1]`.
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            step_size: 0.025,
            iterations: 10,
            random_start: true,
        }
    }
}

impl AttackConfig {
    /// `8/255` radius, `2/255` step, for 8-bit image features scaled to
    /// `[0, 1]`.
    pub fn image_linf() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iterations: 10,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "attack epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "attack step size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("attack needs at least 1 iteration".into()));
        }
        Ok(())
    }

    /// Same attack at radius `epsilon`, with the step scaled in proportion.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let step_size = if self.epsilon > 0.0 {
            self.step_size * epsilon / self.epsilon
        } else {
            self.step_size
        };
        Self {
            epsilon,
            step_size: if step_size > 0.0 { step_size } else { self.step_size },
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub stats_temperature: f64,
    pub stats_momentum: f64,
    /// Distillation: both logit sets are divided by this before the loss,
    /// the loss is scaled by its square.
    pub kd_temperature: f64,
    /// Distillation: weight of the hard-label cross-entropy.
    pub gamma: f64,
    /// Adversarial: weight of the divergence term.
    pub lambda: f64,
    /// Adversarial: fraction of epochs over which epsilon ramps up linearly.
    pub warmup_fraction: f64,
    /// Also report robust accuracy in baseline and distillation runs.
    pub eval_robust: bool,
    pub loss_config: LossConfig,
    pub attack: AttackConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            loss: LossKind::Kl,
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
            stats_temperature: DEFAULT_TEMPERATURE,
            stats_momentum: DEFAULT_MOMENTUM,
            kd_temperature: 4.0,
            gamma: 1.0,
            lambda: 6.0,
            warmup_fraction: 0.4,
            eval_robust: false,
            loss_config: LossConfig::dkl(),
            attack: AttackConfig::default(),
        }
    }
}

impl TrainConfig {
    /// TRADES: KL divergence term with weight 6.
    pub fn trades() -> Self {
        Self::default()
    }

    /// IKL adversarial training: `alpha / 4 = 5`, `beta = 5`, divergence
    /// weight 1.
    pub fn ikl_at() -> Self {
        Self {
            loss: LossKind::Ikl,
            lambda: 1.0,
            loss_config: LossConfig::ikl(20.0, 5.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Error::InvalidArgument(format!("{what} out of range: {v}"));
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("zero-width hidden layer".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        let nonneg = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ];
        for (what, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(what, v));
            }
        }
        for (what, v) in [("momentum", self.momentum), ("stats_momentum", self.stats_momentum)] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(what, v));
            }
        }
        for (what, v) in [
            ("stats_temperature", self.stats_temperature),
            ("kd_temperature", self.kd_temperature),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(what, v));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(bad("warmup_fraction", self.warmup_fraction));
        }
        self.loss_config.validate()?;
        self.attack.validate()
    }

    /// The loss configuration actually passed to the loss for this run.
    pub fn effective_loss_config(&self, distill: bool) -> LossConfig {
        let mut cfg = self.loss_config.clone();
        if self.loss == LossKind::Ikl {
            cfg.weight_source = WeightSource::ClassWise;
            cfg.break_asymmetry = true;
        }
        if distill {
            cfg.detach_m = true;
        }
        cfg
    }

    /// Attack radius used during `epoch` (0-based).
    pub fn epsilon_at(&self, epoch: usize) -> f64 {
        let ramp = (self.warmup_fraction * self.epochs as f64).round() as usize;
        if ramp == 0 {
            self.attack.epsilon
        } else {
            self.attack.epsilon * ((epoch + 1) as f64 / ramp as f64).min(1.0)
        }
    }
}

/// One record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    pub epsilon: Option<f64>,
    /// Mean training objective.
    pub loss: f64,
    /// Mean hard-label cross-entropy on natural inputs.
    pub ce: f64,
    /// Mean unweighted wMSE component (decoupled losses only).
    pub wmse: Option<f64>,
    /// Mean soft-label cross-entropy component (decoupled losses only).
    pub soft_ce: Option<f64>,
    /// Mean KL between the two logit sets the divergence compares.
    pub kl: Option<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub robust_acc: Option<f64>,
    /// Mean of `margins`.
    pub mean_margin: f64,
    /// Boundary margin per class of the exact mean train probabilities.
    pub margins: Vec<f64>,
    /// Fraction of train rows where student and teacher agree (distillation).
    pub agreement: Option<f64>,
    /// Smallest and largest per-step max-norm of the student gradient sent
    /// by the wMSE term (decoupled distillation).
    pub wmse_grad_min: Option<f64>,
    pub wmse_grad_max: Option<f64>,
}

impl EpochMetrics {
    /// Fields that must coincide between runs whose gradients coincide.
    /// Loss values are excluded because the decoupled losses differ from KL
    /// in value.
    pub fn trajectory_fields(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("lr", self.lr),
            ("ce", self.ce),
            ("train_acc", self.train_acc),
            ("test_acc", self.test_acc),
            ("mean_margin", self.mean_margin),
        ];
        let optional = [
            ("epsilon", self.epsilon),
            ("kl", self.kl),
            ("robust_acc", self.robust_acc),
            ("agreement", self.agreement),
        ];
        out.extend(optional.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out.extend(self.margins.iter().map(|&m| ("margin", m)));
        out
    }
}

/// Largest absolute difference over [`EpochMetrics::trajectory_fields`];
/// `None` when the two runs do not record the same fields.
pub fn trajectory_gap(a: &[EpochMetrics], b: &[EpochMetrics]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut gap: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (fx, fy) = (x.trajectory_fields(), y.trajectory_fields());
        if fx.len() != fy.len() {
            return None;
        }
        for ((kx, vx), (ky, vy)) in fx.into_iter().zip(fy) {
            if kx != ky {
                return None;
            }
            gap = gap.max((vx - vy).abs());
        }
    }
    Some(gap)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub metrics: Vec<EpochMetrics>,
    /// Class statistics used by the loss (distillation: from the teacher;
    /// adversarial: the running table), or for baseline runs the exact
    /// table of the final model.
    pub stats: ClassStatsTable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
}

/// What the attack ascends: cross-entropy on labels, or
/// `KL(reference || current)`.
#[derive(Debug, Clone, Copy)]
pub enum AttackTarget<'a> {
    Labels(&'a [usize]),
    Reference(ArrayView2<'a, f64>),
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected signed-gradient ascent inside `[x0 - eps, x0 + eps] ∩ [0, 1]`.
/// The optional random start draws `U(-eps, eps)` per coordinate from `rng`.
pub fn pgd_attack(
    params: &MlpParams,
    x0: ArrayView2<'_, f64>,
    target: AttackTarget<'_>,
    atk: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<Array2<f64>> {
    atk.validate()?;
    if x0.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("attack inputs must lie in [0, 1]".into()));
    }
    match target {
        AttackTarget::Labels(y) if y.len() != x0.nrows() => {
            return Err(Error::ShapeMismatch {
                what: "attack labels",
                expected: (x0.nrows(), 1),
                found: (y.len(), 1),
            })
        }
        AttackTarget::Reference(r) if r.dim() != (x0.nrows(), params.num_classes()) => {
            return Err(Error::ShapeMismatch {
                what: "attack reference logits",
                expected: (x0.nrows(), params.num_classes()),
                found: r.dim(),
            })
        }
        _ => {}
    }
    if atk.epsilon == 0.0 {
        return Ok(x0.to_owned());
    }
    let eps = atk.epsilon;
    let lo = x0.mapv(|v| (v - eps).max(0.0));
    let hi = x0.mapv(|v| (v + eps).min(1.0));
    let mut x = x0.to_owned();
    if atk.random_start {
        x.mapv_inplace(|v| v + rng.uniform_in(-eps, eps));
        project(&mut x, &lo, &hi);
    }
    for _ in 0..atk.iterations {
        let (logits, cache) = params.forward(x.view())?;
        let grad_logits = match target {
            AttackTarget::Labels(y) => hard_ce(logits.view(), y)?.grad_n,
            AttackTarget::Reference(r) => kl_backward(r, logits.view())?.grad_n,
        };
        let gx = params.backward(&cache, grad_logits.view())?.input;
        if gx.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attack input gradient"));
        }
        Zip::from(&mut x).and(&gx).for_each(|x, &g| *x += atk.step_size * sign(g));
        project(&mut x, &lo, &hi);
    }
    Ok(x)
}

fn project(x: &mut Array2<f64>, lo: &Array2<f64>, hi: &Array2<f64>) {
    Zip::from(x).and(lo).and(hi).for_each(|x, &l, &h| *x = x.clamp(l, h));
}

fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Clean accuracy, and with an attack the accuracy on PGD inputs that ascend
/// the cross-entropy. Attack starts come from a fresh `EVAL_ATTACK` stream
/// of `seed`, consumed in batches of 256 rows in dataset order.
pub fn evaluate(
    params: &MlpParams,
    dataset: &Dataset,
    atk: Option<&AttackConfig>,
    seed: u64,
) -> Result<EvalMetrics> {
    let predicted = params.predict(dataset.features())?;
    let clean_acc = accuracy(&predicted, dataset.labels());
    let robust_acc = match atk {
        None => None,
        Some(atk) => {
            let mut rng = SeededRng::new(seed, stream::EVAL_ATTACK);
            let mut hits = 0usize;
            let order: Vec<usize> = (0..dataset.len()).collect();
            for chunk in order.chunks(EVAL_BATCH) {
                let (x, y) = dataset.batch(chunk);
                let adv = pgd_attack(params, x.view(), AttackTarget::Labels(&y), atk, &mut rng)?;
                let pred = params.predict(adv.view())?;
                hits += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
            }
            Some(if dataset.is_empty() {
                0.0
            } else {
                hits as f64 / dataset.len() as f64
            })
        }
    };
    Ok(EvalMetrics {
        clean_acc,
        robust_acc,
    })
}

/// Per-class boundary margins of the exact mean softmax (temperature 1) of
/// `params` over `dataset`.
pub fn class_margins(params: &MlpParams, dataset: &Dataset) -> Result<Vec<f64>> {
    let logits = params.logits(dataset.features())?;
    let table = ClassStatsTable::exact_recompute(logits.view(), dataset.labels(), 1.0, DEFAULT_MOMENTUM)?;
    Ok(table.margins())
}

enum Mode<'a> {
    Baseline,
    Distill(ArrayView2<'a, f64>),
    Adversarial,
}

fn divergence(
    kind: LossKind,
    cfg: &LossConfig,
    o_m: ArrayView2<'_, f64>,
    o_n: ArrayView2<'_, f64>,
    labels: &[usize],
    stats: &ClassStatsTable,
) -> Result<Option<(LossOutput, Option<WmseOutput>)>> {
    Ok(match kind {
        LossKind::CeOnly => None,
        LossKind::Kl => Some((kl_backward(o_m, o_n)?, None)),
        LossKind::Jsd => Some((jsd_forward_backward(o_m, o_n)?, None)),
        LossKind::Dkl | LossKind::Ikl => {
            let (out, wmse) = dkl_family_traced(o_m, o_n, Some(labels), cfg, Some(stats))?;
            Some((out, Some(wmse)))
        }
    })
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[derive(Default)]
struct Running {
    weight: f64,
    loss: f64,
    ce: f64,
    wmse: Option<f64>,
    soft_ce: Option<f64>,
    kl: Option<f64>,
    wmse_grad: Option<(f64, f64)>,
}

impl Running {
    fn add(slot: &mut Option<f64>, w: f64, v: f64) {
        *slot = Some(slot.unwrap_or(0.0) + w * v);
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.weight
    }
}

fn check_compatible(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.num_classes() != test.num_classes() || train.dim() != test.dim() {
        return Err(Error::ShapeMismatch {
            what: "test set (rows: classes, cols: features)",
            expected: (train.num_classes(), train.dim()),
            found: (test.num_classes(), test.dim()),
        });
    }
    Ok(())
}

fn run(
    cfg: &TrainConfig,
    mode: Mode<'_>,
    train: &Dataset,
    test: &Dataset,
    observer: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(train, test)?;
    if matches!(mode, Mode::Adversarial) && !(train.in_unit_box() && test.in_unit_box()) {
        return Err(Error::InvalidArgument(
            "adversarial training needs features in [0, 1]".into(),
        ));
    }
    let classes = train.num_classes();
    let mut dims = vec![train.dim()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(classes);
    let mut params = MlpParams::init(&dims, cfg.seed)?;
    let mut opt = Sgd::new(&params, cfg.momentum, cfg.weight_decay)?;
    let mut shuffle_rng = SeededRng::new(cfg.seed, stream::SHUFFLE);
    let mut attack_rng = SeededRng::new(cfg.seed, stream::ATTACK);
    let loss_cfg = cfg.effective_loss_config(matches!(mode, Mode::Distill(_)));

    let n = train.len();
    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut stats = match mode {
        Mode::Distill(teacher) => ClassStatsTable::exact_recompute(
            teacher,
            train.labels(),
            cfg.stats_temperature,
            cfg.stats_momentum,
        )?,
        _ => ClassStatsTable::init_uniform(classes, cfg.stats_temperature, cfg.stats_momentum)?,
    };
    let teacher_pred = match mode {
        Mode::Distill(teacher) => Some(argmax_rows(teacher)),
        _ => None,
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.lr;
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let epsilon = cfg.epsilon_at(epoch);
        let atk = cfg.attack.with_epsilon(epsilon);
        let mut acc = Running::default();
        for (b, chunk) in order.chunks(batch).enumerate() {
            let step = epoch * steps_per_epoch + b;
            lr = cosine_lr(step, total_steps, cfg.lr)?;
            let (x, y) = train.batch(chunk);
            let w = chunk.len() as f64;
            let (o_nat, cache_nat) = params.forward(x.view())?;
            let ce = hard_ce(o_nat.view(), &y)?;
            let (loss, grads) = match mode {
                Mode::Baseline => (ce.value, params.backward(&cache_nat, ce.grad_n.view())?),
                Mode::Distill(teacher) => {
                    let t = cfg.kd_temperature;
                    let o_m = teacher.select(Axis(0), chunk) / t;
                    let o_n = &o_nat / t;
                    let mut g = &ce.grad_n * cfg.gamma;
                    let mut loss = cfg.gamma * ce.value;
                    if let Some((out, wmse)) = divergence(cfg.loss, &loss_cfg, o_m.view(), o_n.view(), &y, &stats)? {
                        g.scaled_add(t, &out.grad_n);
                        loss += t * t * out.value;
                        Running::add(&mut acc.kl, w, t * t * kl_forward(o_m.view(), o_n.view())?);
                        if let Some(wmse) = wmse {
                            Running::add(&mut acc.wmse, w, wmse.value);
                            Running::add(&mut acc.soft_ce, w, out.ce);
                            let g_norm = loss_cfg.alpha * t * max_abs(&wmse.grad_n);
                            let (lo, hi) = acc.wmse_grad.unwrap_or((f64::INFINITY, 0.0));
                            acc.wmse_grad = Some((lo.min(g_norm), hi.max(g_norm)));
                        }
                    }
                    (loss, params.backward(&cache_nat, g.view())?)
                }
                Mode::Adversarial => {
                    let x_adv = pgd_attack(
                        &params,
                        x.view(),
                        AttackTarget::Reference(o_nat.view()),
                        &atk,
                        &mut attack_rng,
                    )?;
                    let (o_adv, cache_adv) = params.forward(x_adv.view())?;
                    let mut g_nat = ce.grad_n.clone();
                    let mut g_adv = Array2::zeros(o_adv.raw_dim());
                    let mut loss = ce.value;
                    if let Some((out, wmse)) = divergence(cfg.loss, &loss_cfg, o_nat.view(), o_adv.view(), &y, &stats)? {
                        g_nat.scaled_add(cfg.lambda, &out.grad_m);
                        g_adv.scaled_add(cfg.lambda, &out.grad_n);
                        loss += cfg.lambda * out.value;
                        if wmse.is_some() {
                            Running::add(&mut acc.wmse, w, out.wmse);
                            Running::add(&mut acc.soft_ce, w, out.ce);
                        }
                    }
                    Running::add(&mut acc.kl, w, kl_forward(o_nat.view(), o_adv.view())?);
                    stats.update_batch(o_nat.view(), &y)?;
                    let mut grads = params.backward(&cache_nat, g_nat.view())?;
                    grads.accumulate(&params.backward(&cache_adv, g_adv.view())?);
                    (loss, grads)
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    what: "training loss",
                });
            }
            opt.step(&mut params, &grads, lr)?;
            acc.weight += w;
            acc.loss += w * loss;
            acc.ce += w * ce.value;
        }

        let train_logits = params.logits(train.features())?;
        let train_acc = accuracy(&argmax_rows(train_logits.view()), train.labels());
        let robust = matches!(mode, Mode::Adversarial) || cfg.eval_robust;
        let eval = evaluate(&params, test, robust.then_some(&cfg.attack), cfg.seed)?;
        let margins = ClassStatsTable::exact_recompute(
            train_logits.view(),
            train.labels(),
            1.0,
            DEFAULT_MOMENTUM,
        )?
        .margins();
        let record = EpochMetrics {
            epoch: epoch + 1,
            lr,
            epsilon: matches!(mode, Mode::Adversarial).then_some(epsilon),
            loss: acc.mean(acc.loss),
            ce: acc.mean(acc.ce),
            wmse: acc.wmse.map(|v| acc.mean(v)),
            soft_ce: acc.soft_ce.map(|v| acc.mean(v)),
            kl: acc.kl.map(|v| acc.mean(v)),
            train_acc,
            test_acc: eval.clean_acc,
            robust_acc: eval.robust_acc,
            mean_margin: margins.iter().sum::<f64>() / margins.len() as f64,
            margins,
            agreement: teacher_pred
                .as_ref()
                .map(|t| accuracy(&argmax_rows(train_logits.view()), t)),
            wmse_grad_min: acc.wmse_grad.map(|(lo, _)| lo),
            wmse_grad_max: acc.wmse_grad.map(|(_, hi)| hi),
        };
        observer(&record)?;
        metrics.push(record);
    }
    if matches!(mode, Mode::Baseline) {
        let logits = params.logits(train.features())?;
        stats = ClassStatsTable::exact_recompute(
            logits.view(),
            train.labels(),
            cfg.stats_temperature,
            cfg.stats_momentum,
        )?;
    }
    Ok(TrainOutcome {
        params,
        metrics,
        stats,
    })
}

/// Hard-label cross-entropy training.
pub fn train_baseline(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    observer: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    run(cfg, Mode::Baseline, train, test, observer)
}

/// Distillation from fixed teacher logits, one row per train row:
/// `gamma * CE(labels) + T^2 * loss(teacher / T, student / T)`.
/// Class-wise weights come from the exact class means of the teacher.
pub fn train_distill(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    teacher_logits: ArrayView2<'_, f64>,
    observer: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    let expected = (train.len(), train.num_classes());
    if teacher_logits.dim() != expected {
        return Err(Error::ShapeMismatch {
            what: "teacher logits",
            expected,
            found: teacher_logits.dim(),
        });
    }
    if teacher_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("teacher logits"));
    }
    run(cfg, Mode::Distill(teacher_logits), train, test, observer)
}

/// Adversarial training: `CE(natural) + lambda * loss(natural, adversarial)`,
/// where adversarial inputs ascend `KL(natural || adversarial)` and the
/// class statistics track natural logits.
pub fn train_adversarial(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    observer: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    run(cfg, Mode::Adversarial, train, test, observer)
}

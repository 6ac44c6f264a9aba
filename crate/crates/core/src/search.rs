//! Two-stage bilevel search: momentum SGD on weights with adversarial
//! training batches, Adam on α with adversarial (stage one) or combined
//! natural/adversarial (stage two) validation gradients.

use advnas_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{eval_loss, pgd_with_rng, AttackConfig};
use crate::data::{shuffled, Dataset};
use crate::error::{Error, Result};
use crate::mgda::{combine_with, descent_margins, GradientPair};
use crate::nn::{apply_stat_updates, recalibrate_batch_norm, GradientMap, Mode, Model, Session};
use crate::optim::{adam_update, cosine_lr, AdamState, Sgd};
use crate::space::{discretize, ArchParams, EdgeRetention, Genotype, Supernet, SupernetConfig};

const METRIC_SEED_SALT: u64 = 0x6d65_7472_6963_7321;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSchedule {
    /// Total epochs E.
    pub epochs: usize,
    /// Epochs of single-objective search, E_so.
    pub first_stage_epochs: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub weight_momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr_stage1: f64,
    pub alpha_lr_stage2: f64,
    pub alpha_betas: (f64, f64),
    pub alpha_weight_decay: f64,
    pub alpha_eps: f64,
    pub attack: AttackConfig,
    /// Scale both α gradients to unit norm before combining them.
    pub normalize_gradients: bool,
    pub edge_retention: EdgeRetention,
    /// Relative rise of validation adversarial loss over its running minimum
    /// that marks an epoch as degraded in the selection report.
    pub degradation_threshold: f64,
    pub seed: u64,
}

impl Default for SearchSchedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            first_stage_epochs: 20,
            batch_size: 64,
            weight_lr: 0.025,
            weight_momentum: 0.9,
            weight_decay: 3e-4,
            alpha_lr_stage1: 3e-4,
            alpha_lr_stage2: 5e-5,
            alpha_betas: (0.5, 0.999),
            alpha_weight_decay: 1e-3,
            alpha_eps: 1e-8,
            attack: AttackConfig::search_default(),
            normalize_gradients: false,
            edge_retention: EdgeRetention::TopTwo,
            degradation_threshold: 0.1,
            seed: 0,
        }
    }
}

impl SearchSchedule {
    pub fn validate(&self) -> Result<()> {
        let e = |m: String| Err(Error::Config(format!("search: {m}")));
        if self.epochs == 0 {
            return e("epochs must be positive".into());
        }
        if self.first_stage_epochs > self.epochs {
            return e(format!(
                "first_stage_epochs {} exceeds epochs {}",
                self.first_stage_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return e("batch_size must be positive".into());
        }
        for (name, v) in [
            ("weight_lr", self.weight_lr),
            ("alpha_lr_stage1", self.alpha_lr_stage1),
            ("alpha_lr_stage2", self.alpha_lr_stage2),
            ("weight_decay", self.weight_decay),
            ("alpha_weight_decay", self.alpha_weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return e(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.alpha_eps <= 0.0 {
            return e("alpha_eps must be positive".into());
        }
        self.attack.validate()
    }

    /// Stage of a 1-based epoch.
    pub fn stage(&self, epoch: usize) -> u8 {
        if epoch <= self.first_stage_epochs {
            1
        } else {
            2
        }
    }

    pub fn weight_lr_at(&self, epoch: usize) -> f64 {
        cosine_lr(self.weight_lr, epoch.saturating_sub(1), self.epochs)
    }

    pub fn alpha_lr_at(&self, epoch: usize) -> f64 {
        if self.stage(epoch) == 1 {
            self.alpha_lr_stage1
        } else {
            self.alpha_lr_stage2
        }
    }
}

/// One minibatch of images and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

/// Mutable search state. Steps replace it wholesale on success.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub net: Supernet,
    pub sgd: Sgd,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub genotypes: Vec<Genotype>,
}

impl SearchState {
    pub fn new(config: SupernetConfig, schedule: &SearchSchedule) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let net = Supernet::new(config, &mut rng)?;
        let adam = AdamState::new(net.alpha().tensor().shape());
        Ok(Self {
            net,
            sgd: Sgd::new(schedule.weight_momentum, schedule.weight_decay),
            adam,
            rng,
            epoch: 0,
            metrics: Vec::new(),
            genotypes: Vec::new(),
        })
    }
}

/// Diagnostics of one search step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub stage: u8,
    /// Natural training loss before the weight update.
    pub train_nat_loss: f64,
    pub train_adv_loss: f64,
    pub val_adv_loss: f64,
    /// Natural validation loss (stage two only).
    pub val_nat_loss: Option<f64>,
    /// γ* (stage two only).
    pub gamma: Option<f64>,
    /// Smaller of the two descent margins (stage two only).
    pub min_margin: Option<f64>,
    pub alpha_updated: bool,
}

fn loss_and_grads<M: Model>(
    net: &M,
    x: &Tensor,
    y: &[usize],
    sess: &mut Session,
) -> Result<(f64, advnas_tensor::Gradients)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = net.forward(&mut tape, xv, sess)?;
    let loss = tape.cross_entropy(logits, y)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Divergence("non-finite loss".into()));
    }
    Ok((value, tape.backward(loss)?))
}

/// Adversarial weight step shared by both stages; returns the natural and
/// adversarial training losses.
fn weight_step(
    net: &mut Supernet,
    sgd: &mut Sgd,
    rng: &mut ChaCha8Rng,
    batch: &Batch,
    attack: &AttackConfig,
    lr: f64,
) -> Result<(f64, f64)> {
    let nat = batch_loss(net, &batch.x, &batch.y)?;
    let adv = pgd_with_rng(net, &batch.x, &batch.y, attack, rng)?;
    let mut sess = Session::train();
    let (loss, grads) = loss_and_grads(net, &adv, &batch.y, &mut sess)?;
    let wg: GradientMap = sess.weight_gradients(&grads);
    if !wg.all_finite() {
        return Err(Error::Divergence("non-finite weight gradient".into()));
    }
    sgd.step(net.params_mut(), &wg, lr)?;
    apply_stat_updates(net.params_mut(), sess.take_stat_updates())?;
    Ok((nat, loss))
}

/// Gradient of the validation loss with respect to α, using batch statistics
/// without updating running averages.
fn alpha_gradient(net: &Supernet, x: &Tensor, y: &[usize]) -> Result<(f64, Tensor)> {
    let mut sess = Session::new(Mode::Train).with_arch_grads(true);
    let (loss, grads) = loss_and_grads(net, x, y, &mut sess)?;
    let g = sess
        .arch_gradient(&grads)
        .unwrap_or_else(|| Tensor::zeros(net.alpha().tensor().shape()));
    if !g.is_finite() {
        return Err(Error::Divergence("non-finite architecture gradient".into()));
    }
    Ok((loss, g))
}

fn adam_alpha_step(net: &mut Supernet, adam: &mut AdamState, direction: &Tensor, lr: f64, s: &SearchSchedule) -> Result<()> {
    let alpha = net.alpha();
    let (next, state) = adam_update(
        alpha.tensor(),
        direction,
        adam,
        lr,
        s.alpha_betas,
        s.alpha_weight_decay,
        s.alpha_eps,
    )?;
    if !next.is_finite() {
        return Err(Error::Divergence("non-finite architecture parameters after update".into()));
    }
    let nodes = alpha.nodes();
    net.set_alpha(ArchParams::from_tensor(nodes, next)?)?;
    *adam = state;
    Ok(())
}

/// Stage one: adversarial ω step, then an α step on the adversarial
/// validation loss. The state is left untouched on error.
pub fn first_stage_step(
    state: &mut SearchState,
    schedule: &SearchSchedule,
    train: &Batch,
    val: &Batch,
    weight_lr: f64,
    alpha_lr: f64,
) -> Result<StepReport> {
    let mut net = state.net.clone();
    let mut sgd = state.sgd.clone();
    let mut adam = state.adam.clone();
    let mut rng = state.rng.clone();
    let (train_nat_loss, train_adv_loss) = weight_step(&mut net, &mut sgd, &mut rng, train, &schedule.attack, weight_lr)?;
    let val_adv = pgd_with_rng(&net, &val.x, &val.y, &schedule.attack, &mut rng)?;
    let (val_adv_loss, g) = alpha_gradient(&net, &val_adv, &val.y)?;
    adam_alpha_step(&mut net, &mut adam, &g, alpha_lr, schedule)?;
    state.net = net;
    state.sgd = sgd;
    state.adam = adam;
    state.rng = rng;
    Ok(StepReport {
        stage: 1,
        train_nat_loss,
        train_adv_loss,
        val_adv_loss,
        val_nat_loss: None,
        gamma: None,
        min_margin: None,
        alpha_updated: true,
    })
}

/// Stage two: the same ω step, then an α step along the min-norm combination
/// of the natural and adversarial validation gradients. A zero combined
/// direction leaves α and the Adam moments unchanged.
pub fn second_stage_step(
    state: &mut SearchState,
    schedule: &SearchSchedule,
    train: &Batch,
    val: &Batch,
    weight_lr: f64,
    alpha_lr: f64,
) -> Result<StepReport> {
    let mut net = state.net.clone();
    let mut sgd = state.sgd.clone();
    let mut adam = state.adam.clone();
    let mut rng = state.rng.clone();
    let (train_nat_loss, train_adv_loss) = weight_step(&mut net, &mut sgd, &mut rng, train, &schedule.attack, weight_lr)?;
    let val_adv = pgd_with_rng(&net, &val.x, &val.y, &schedule.attack, &mut rng)?;
    let (val_nat_loss, theta) = alpha_gradient(&net, &val.x, &val.y)?;
    let (val_adv_loss, theta_bar) = alpha_gradient(&net, &val_adv, &val.y)?;
    let pair = GradientPair::new(theta.into_data(), theta_bar.into_data())?;
    let combined = combine_with(&pair, schedule.normalize_gradients);
    let (m1, m2) = descent_margins(&pair, &combined.direction);
    let alpha_updated = combined.direction.iter().any(|&v| v != 0.0);
    if alpha_updated {
        let d = Tensor::new(net.alpha().tensor().shape(), combined.direction)?;
        adam_alpha_step(&mut net, &mut adam, &d, alpha_lr, schedule)?;
    }
    state.net = net;
    state.sgd = sgd;
    state.adam = adam;
    state.rng = rng;
    Ok(StepReport {
        stage: 2,
        train_nat_loss,
        train_adv_loss,
        val_adv_loss,
        val_nat_loss: Some(val_nat_loss),
        gamma: Some(combined.gamma),
        min_margin: Some(m1.min(m2)),
        alpha_updated,
    })
}

/// One row of the search log. Training losses are means over the epoch's
/// steps; validation losses are measured on the whole validation half after
/// the epoch by [`measure_losses`], with statistics from the training half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: u8,
    pub weight_lr: f64,
    pub alpha_lr: f64,
    /// Mean γ* over the epoch's steps (stage two).
    pub gamma_mean: Option<f64>,
    /// Smallest descent margin over the epoch's steps (stage two).
    pub min_margin: Option<f64>,
    pub train_nat_loss: f64,
    pub train_adv_loss: f64,
    pub val_nat_loss: f64,
    pub val_adv_loss: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str =
        "epoch,stage,weight_lr,alpha_lr,gamma_mean,min_margin,train_nat_loss,train_adv_loss,val_nat_loss,val_adv_loss";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{},{:e},{:e},{},{},{:e},{:e},{:e},{:e}",
            self.epoch,
            self.stage,
            self.weight_lr,
            self.alpha_lr,
            opt(self.gamma_mean),
            opt(self.min_margin),
            self.train_nat_loss,
            self.train_adv_loss,
            self.val_nat_loss,
            self.val_adv_loss
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Data(format!("malformed metrics row `{line}`"));
        if f.len() != 10 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            stage: f[1].parse().map_err(|_| bad())?,
            weight_lr: num(f[2])?,
            alpha_lr: num(f[3])?,
            gamma_mean: opt(f[4])?,
            min_margin: opt(f[5])?,
            train_nat_loss: num(f[6])?,
            train_adv_loss: num(f[7])?,
            val_nat_loss: num(f[8])?,
            val_adv_loss: num(f[9])?,
        })
    }
}

/// Mean natural and adversarial loss over `data`, attacked with a fixed seed,
/// on a copy of `net` whose batch-norm statistics are recomputed from
/// `calibration`.
pub fn measure_losses(
    net: &Supernet,
    calibration: &Dataset,
    data: &Dataset,
    attack: &AttackConfig,
    batch: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut net = net.clone();
    recalibrate_batch_norm(&mut net, calibration.images(), batch)?;
    let net = &net;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut nat, mut adv) = (0.0, 0.0);
    let n = data.len();
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let idx: Vec<usize> = (start..start + len).collect();
        let (x, y) = data.batch(&idx)?;
        let xa = pgd_with_rng(net, &x, &y, attack, &mut rng)?;
        nat += eval_loss(net, &x, &y)? * len as f64;
        adv += eval_loss(net, &xa, &y)? * len as f64;
        start += len;
    }
    Ok((nat / n as f64, adv / n as f64))
}

fn batch_loss(net: &Supernet, x: &Tensor, y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut sess = Session::new(Mode::Train);
    let logits = net.forward(&mut tape, xv, &mut sess)?;
    let loss = tape.cross_entropy(logits, y)?;
    Ok(tape.value(loss).item()?)
}

/// Epoch picks for rolling back to an earlier genotype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub final_epoch: usize,
    pub best_val_adv_epoch: usize,
    pub best_val_nat_epoch: usize,
    /// Epochs whose validation adversarial loss exceeds the running minimum
    /// by more than the schedule's degradation threshold.
    pub degraded_epochs: Vec<usize>,
}

impl SelectionReport {
    pub fn from_metrics(metrics: &[EpochMetrics], threshold: f64) -> Self {
        let best = |key: fn(&EpochMetrics) -> f64| {
            metrics
                .iter()
                .min_by(|a, b| key(a).total_cmp(&key(b)))
                .map(|m| m.epoch)
                .unwrap_or(0)
        };
        let mut running = f64::INFINITY;
        let mut degraded = Vec::new();
        for m in metrics {
            if m.val_adv_loss > running * (1.0 + threshold) {
                degraded.push(m.epoch);
            }
            running = running.min(m.val_adv_loss);
        }
        Self {
            final_epoch: metrics.last().map(|m| m.epoch).unwrap_or(0),
            best_val_adv_epoch: best(|m| m.val_adv_loss),
            best_val_nat_epoch: best(|m| m.val_nat_loss),
            degraded_epochs: degraded,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub state: SearchState,
    pub train: Dataset,
    pub val: Dataset,
    pub selection: SelectionReport,
}

impl SearchOutcome {
    pub fn genotypes(&self) -> &[Genotype] {
        &self.state.genotypes
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.state.metrics
    }

    pub fn final_genotype(&self) -> &Genotype {
        self.state.genotypes.last().expect("at least one epoch")
    }
}

/// Runs one epoch: alternating ω/α steps over shuffled minibatches, then
/// end-of-epoch measurements and the genotype snapshot.
pub fn run_epoch(state: &mut SearchState, schedule: &SearchSchedule, train: &Dataset, val: &Dataset) -> Result<()> {
    let epoch = state.epoch + 1;
    let stage = schedule.stage(epoch);
    let (wlr, alr) = (schedule.weight_lr_at(epoch), schedule.alpha_lr_at(epoch));
    let bs = schedule.batch_size;
    let tr_order = shuffled(train.len(), &mut state.rng);
    let va_order = shuffled(val.len(), &mut state.rng);
    let steps = (train.len() / bs).min(val.len() / bs);
    let mut gammas = Vec::new();
    let mut min_margin: Option<f64> = None;
    let (mut train_nat_loss, mut train_adv_loss) = (0.0, 0.0);
    for s in 0..steps {
        let (x, y) = train.batch(&tr_order[s * bs..(s + 1) * bs])?;
        let tb = Batch { x, y };
        let (x, y) = val.batch(&va_order[s * bs..(s + 1) * bs])?;
        let vb = Batch { x, y };
        let report = if stage == 1 {
            first_stage_step(state, schedule, &tb, &vb, wlr, alr)
        } else {
            second_stage_step(state, schedule, &tb, &vb, wlr, alr)
        }
        .map_err(|e| match e {
            Error::Divergence(m) => Error::Divergence(format!("epoch {epoch}, step {}: {m}", s + 1)),
            other => other,
        })?;
        train_nat_loss += report.train_nat_loss / steps as f64;
        train_adv_loss += report.train_adv_loss / steps as f64;
        if let Some(g) = report.gamma {
            gammas.push(g);
        }
        if let Some(m) = report.min_margin {
            min_margin = Some(min_margin.map_or(m, |x| x.min(m)));
        }
    }
    let seed = schedule.seed ^ METRIC_SEED_SALT;
    let (val_nat_loss, val_adv_loss) = measure_losses(&state.net, train, val, &schedule.attack, bs, seed)?;
    state.metrics.push(EpochMetrics {
        epoch,
        stage,
        weight_lr: wlr,
        alpha_lr: alr,
        gamma_mean: (!gammas.is_empty()).then(|| gammas.iter().sum::<f64>() / gammas.len() as f64),
        min_margin,
        train_nat_loss,
        train_adv_loss,
        val_nat_loss,
        val_adv_loss,
    });
    let g = discretize(state.net.alpha(), state.net.config(), schedule.edge_retention)?;
    state.genotypes.push(g);
    state.epoch = epoch;
    Ok(())
}

/// Full search on `data`, split into equal train and validation halves.
/// `on_epoch` sees the state after every epoch.
pub fn run_search_with(
    config: SupernetConfig,
    schedule: &SearchSchedule,
    data: &Dataset,
    mut on_epoch: impl FnMut(&SearchState) -> Result<()>,
) -> Result<SearchOutcome> {
    schedule.validate()?;
    config.validate()?;
    if data.image_shape() != config.input_shape {
        return Err(Error::Config(format!(
            "data images {:?} do not match network input {:?}",
            data.image_shape(),
            config.input_shape
        )));
    }
    if data.classes() != config.classes {
        return Err(Error::Config(format!(
            "data has {} classes, network expects {}",
            data.classes(),
            config.classes
        )));
    }
    let (train, val) = data.split_halves(schedule.seed)?;
    if train.len() < schedule.batch_size {
        return Err(Error::Data(format!(
            "{} samples per half is smaller than the batch size {}",
            train.len(),
            schedule.batch_size
        )));
    }
    let mut state = SearchState::new(config, schedule)?;
    for _ in 0..schedule.epochs {
        run_epoch(&mut state, schedule, &train, &val)?;
        on_epoch(&state)?;
    }
    let selection = SelectionReport::from_metrics(&state.metrics, schedule.degradation_threshold);
    Ok(SearchOutcome {
        state,
        train,
        val,
        selection,
    })
}

pub fn run_search(config: SupernetConfig, schedule: &SearchSchedule, data: &Dataset) -> Result<SearchOutcome> {
    run_search_with(config, schedule, data, |_| Ok(()))
}

//! Adversarial training and evaluation of fixed networks.

use std::fmt::Write as _;

use advnas_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{adversarial_accuracy, natural_accuracy, pgd_with_rng, AttackConfig, Counts};
use crate::data::{augment, shuffled, Dataset};
use crate::error::{Error, Result};
use crate::nn::{apply_stat_updates, Mode, Model, Session};
use crate::optim::{step_decay_lr, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 0-based epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub attack: AttackConfig,
    pub augment: bool,
    /// Maximum shift in pixels when augmenting.
    pub augment_pad: usize,
    /// Evaluate on the test split every this many epochs; 0 disables.
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![100, 150],
            lr_decay: 0.1,
            batch_size: 32,
            attack: AttackConfig::train_default(),
            augment: false,
            augment_pad: 2,
            eval_every: 1,
            eval_batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let e = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return e("batch sizes must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return e(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.momentum >= 0.0) {
            return e("momentum and weight decay must be non-negative".into());
        }
        for w in self.milestones.windows(2) {
            if w[0] >= w[1] {
                return e(format!("milestones {:?} are not strictly increasing", self.milestones));
            }
        }
        if self.milestones.first() == Some(&0) {
            return e("milestones must be positive".into());
        }
        self.attack.validate()
    }

    /// Learning rate of a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay_lr(self.lr, epoch, &self.milestones, self.lr_decay)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_nat_loss: f64,
    pub train_adv_loss: f64,
    pub test_natural: Option<Counts>,
    pub test_adversarial: Option<Counts>,
}

impl TrainCurve {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,train_nat_loss,train_adv_loss,test_nat_correct,test_adv_correct,test_total";

    pub fn csv_row(&self) -> String {
        let c = |v: Option<Counts>| v.map(|c| c.correct.to_string()).unwrap_or_default();
        let total = self
            .test_natural
            .or(self.test_adversarial)
            .map(|c| c.total.to_string())
            .unwrap_or_default();
        format!(
            "{},{:e},{:e},{:e},{},{},{}",
            self.epoch,
            self.lr,
            self.train_nat_loss,
            self.train_adv_loss,
            c(self.test_natural),
            c(self.test_adversarial),
            total
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Data(format!("malformed curve row `{line}`"));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let counts = |s: &str| -> Result<Option<Counts>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(Counts {
                    correct: int(s)?,
                    total: int(f[6])?,
                }))
            }
        };
        Ok(Self {
            epoch: int(f[0])?,
            lr: num(f[1])?,
            train_nat_loss: num(f[2])?,
            train_adv_loss: num(f[3])?,
            test_natural: counts(f[4])?,
            test_adversarial: counts(f[5])?,
        })
    }
}

/// Network, optimizer and RNG of a training run.
#[derive(Debug, Clone)]
pub struct TrainState<M> {
    pub net: M,
    pub sgd: Sgd,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub curves: Vec<TrainCurve>,
}

impl<M: Model + Clone> TrainState<M> {
    pub fn new(net: M, cfg: &TrainConfig) -> Self {
        Self {
            net,
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            epoch: 0,
            curves: Vec::new(),
        }
    }
}

/// One SGD step on the PGD counterpart of a batch. Returns the natural loss
/// (batch statistics, before the update) and the adversarial loss. The state
/// is untouched on error.
fn train_step<M: Model + Clone>(
    state: &mut TrainState<M>,
    cfg: &TrainConfig,
    x: &Tensor,
    y: &[usize],
    lr: f64,
) -> Result<(f64, f64)> {
    let mut net = state.net.clone();
    let mut sgd = state.sgd.clone();
    let mut rng = state.rng.clone();
    let x = if cfg.augment {
        augment(x, cfg.augment_pad, &mut rng)
    } else {
        x.clone()
    };
    let nat = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let logits = net.forward(&mut tape, xv, &mut Session::new(Mode::Train))?;
        let l = tape.cross_entropy(logits, y)?;
        tape.value(l).item()?
    };
    let adv = pgd_with_rng(&net, &x, y, &cfg.attack, &mut rng)?;
    let mut tape = Tape::new();
    let xv = tape.constant(adv);
    let mut sess = Session::train();
    let logits = net.forward(&mut tape, xv, &mut sess)?;
    let loss = tape.cross_entropy(logits, y)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() || !nat.is_finite() {
        return Err(Error::Divergence("non-finite training loss".into()));
    }
    let grads = tape.backward(loss)?;
    let wg = sess.weight_gradients(&grads);
    if !wg.all_finite() {
        return Err(Error::Divergence("non-finite weight gradient".into()));
    }
    sgd.step(net.params_mut(), &wg, lr)?;
    apply_stat_updates(net.params_mut(), sess.take_stat_updates())?;
    state.net = net;
    state.sgd = sgd;
    state.rng = rng;
    Ok((nat, value))
}

/// One epoch over shuffled minibatches; a final batch smaller than the batch
/// size is kept when it has at least two images.
pub fn train_epoch<M: Model + Clone>(
    state: &mut TrainState<M>,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<()> {
    let epoch = state.epoch + 1;
    let lr = cfg.lr_at(epoch - 1);
    let order = shuffled(train.len(), &mut state.rng);
    let (mut nat, mut adv, mut seen) = (0.0, 0.0, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 && seen > 0 {
            continue;
        }
        let (x, y) = train.batch(chunk)?;
        let (n, a) = train_step(state, cfg, &x, &y, lr).map_err(|e| match e {
            Error::Divergence(m) => Error::Divergence(format!("epoch {epoch}: {m}")),
            other => other,
        })?;
        nat += n * chunk.len() as f64;
        adv += a * chunk.len() as f64;
        seen += chunk.len();
    }
    let evaluate_now = cfg.eval_every > 0 && epoch % cfg.eval_every == 0;
    let (test_natural, test_adversarial) = match test {
        Some(t) if evaluate_now => {
            let (x, y) = (t.images(), t.labels());
            (
                Some(natural_accuracy(&state.net, x, y, cfg.eval_batch_size)?),
                Some(adversarial_accuracy(&state.net, x, y, &cfg.attack, cfg.eval_batch_size)?),
            )
        }
        _ => (None, None),
    };
    state.curves.push(TrainCurve {
        epoch,
        lr,
        train_nat_loss: nat / seen.max(1) as f64,
        train_adv_loss: adv / seen.max(1) as f64,
        test_natural,
        test_adversarial,
    });
    state.epoch = epoch;
    Ok(())
}

/// Trains until `cfg.epochs` epochs are complete, resuming from
/// `state.epoch`. `on_epoch` sees the state after every epoch.
pub fn adversarial_train_with<M: Model + Clone>(
    state: &mut TrainState<M>,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    mut on_epoch: impl FnMut(&TrainState<M>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if train.image_shape() != state.net.input_shape() {
        return Err(Error::Config(format!(
            "data images {:?} do not match network input {:?}",
            train.image_shape(),
            state.net.input_shape()
        )));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    while state.epoch < cfg.epochs {
        train_epoch(state, cfg, train, test)?;
        on_epoch(state)?;
    }
    Ok(())
}

pub fn adversarial_train<M: Model + Clone>(net: M, cfg: &TrainConfig, train: &Dataset, test: Option<&Dataset>) -> Result<TrainState<M>> {
    let mut state = TrainState::new(net, cfg);
    adversarial_train_with(&mut state, cfg, train, test, |_| Ok(()))?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub label: String,
    pub attack: AttackConfig,
    pub counts: Counts,
}

/// Natural accuracy plus one accuracy per attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub natural: Counts,
    pub attacks: Vec<AttackResult>,
}

impl EvalReport {
    /// Fixed-width table: one row per measurement with the exact counts and
    /// the accuracy in percent to two decimals.
    ///
    /// ```text
    /// metric      correct   total  accuracy
    /// natural         118     128    92.19%
    /// PGD^20           77     128    60.16%
    /// ```
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8} {:>7} {:>9}", "metric", "correct", "total", "accuracy");
        let mut row = |name: &str, c: &Counts| {
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>7} {:>8.2}%",
                name,
                c.correct,
                c.total,
                100.0 * c.accuracy()
            );
        };
        row("natural", &self.natural);
        for a in &self.attacks {
            row(&a.label, &a.counts);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate<M: Model + ?Sized>(model: &M, data: &Dataset, attacks: &[AttackConfig], batch: usize) -> Result<EvalReport> {
    let (x, y) = (data.images(), data.labels());
    let natural = natural_accuracy(model, x, y, batch)?;
    let mut out = Vec::with_capacity(attacks.len());
    for a in attacks {
        out.push(AttackResult {
            label: a.label(),
            attack: *a,
            counts: adversarial_accuracy(model, x, y, a, batch)?,
        });
    }
    Ok(EvalReport { natural, attacks: out })
}

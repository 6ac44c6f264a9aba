//! Text and JSON reports.
//!
//! Search reports list one row per epoch (losses to six decimals, `-` for
//! stage-one γ) followed by the selection summary. Training reports list the
//! curves (accuracies in percent) followed by the evaluation table of
//! [`EvalReport::to_table`].

use std::fmt::Write as _;

use advnas_core::attack::{Counts, TransferReport};
use advnas_core::search::{EpochMetrics, SelectionReport};
use advnas_core::train::{EvalReport, TrainCurve};
use serde_json::{json, Value};

fn pct(c: Option<Counts>) -> String {
    c.map(|c| format!("{:.2}", 100.0 * c.accuracy())).unwrap_or_else(|| "-".into())
}

pub fn search_text(metrics: &[EpochMetrics], selection: &SelectionReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>5} {:>5} {:>10} {:>10} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "epoch", "stage", "weight_lr", "alpha_lr", "gamma", "train_nat", "train_adv", "val_nat", "val_adv"
    );
    for m in metrics {
        let g = m.gamma_mean.map(|g| format!("{g:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>10.6} {:>10.2e} {:>8} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
            m.epoch, m.stage, m.weight_lr, m.alpha_lr, g, m.train_nat_loss, m.train_adv_loss, m.val_nat_loss, m.val_adv_loss
        );
    }
    let degraded = if selection.degraded_epochs.is_empty() {
        "none".to_string()
    } else {
        selection
            .degraded_epochs
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    };
    let _ = writeln!(s);
    let _ = writeln!(s, "final epoch:            {}", selection.final_epoch);
    let _ = writeln!(s, "lowest val adv loss:    epoch {}", selection.best_val_adv_epoch);
    let _ = writeln!(s, "lowest val nat loss:    epoch {}", selection.best_val_nat_epoch);
    let _ = writeln!(s, "degraded epochs:        {degraded}");
    s
}

pub fn search_json(metrics: &[EpochMetrics], selection: &SelectionReport) -> Value {
    json!({ "kind": "search", "metrics": metrics, "selection": selection })
}

pub fn train_text(curves: &[TrainCurve], eval: Option<&EvalReport>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>5} {:>10} {:>10} {:>10} {:>9} {:>9}",
        "epoch", "lr", "train_nat", "train_adv", "test_nat%", "test_adv%"
    );
    for c in curves {
        let _ = writeln!(
            s,
            "{:>5} {:>10.6} {:>10.6} {:>10.6} {:>9} {:>9}",
            c.epoch,
            c.lr,
            c.train_nat_loss,
            c.train_adv_loss,
            pct(c.test_natural),
            pct(c.test_adversarial)
        );
    }
    if let Some(e) = eval {
        let _ = writeln!(s);
        s.push_str(&e.to_table());
    }
    s
}

pub fn train_json(curves: &[TrainCurve], eval: Option<&EvalReport>) -> Value {
    json!({ "kind": "train", "curves": curves, "evaluation": eval })
}

pub fn eval_json(report: &EvalReport) -> Value {
    json!({ "kind": "eval", "evaluation": report })
}

pub fn transfer_text(attack_label: &str, t: &TransferReport, white_box: &Counts) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "attack: {attack_label}");
    let _ = writeln!(s, "{:<10} {:>8} {:>7} {:>9}", "metric", "correct", "total", "accuracy");
    for (name, c) in [("natural", &t.natural), ("white-box", white_box), ("transfer", &t.transfer)] {
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>7} {:>8.2}%",
            name,
            c.correct,
            c.total,
            100.0 * c.accuracy()
        );
    }
    s
}

pub fn transfer_json(attack_label: &str, t: &TransferReport, white_box: &Counts) -> Value {
    json!({ "kind": "transfer", "attack": attack_label, "natural": t.natural, "white_box": white_box, "transfer": t.transfer })
}

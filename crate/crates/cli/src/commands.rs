use std::fs;
use std::path::{Path, PathBuf};

use advnas_core::attack::{adversarial_accuracy, transfer_attack, AttackConfig};
use advnas_core::checkpoint::{hash_text, Checkpoint};
use advnas_core::config::ExperimentConfig;
use advnas_core::data::{Dataset, Splits};
use advnas_core::nn::Model;
use advnas_core::optim::Sgd;
use advnas_core::search::{run_search_with, EpochMetrics, SelectionReport};
use advnas_core::space::{DiscreteNetwork, Genotype, SupernetConfig};
use advnas_core::train::{adversarial_train_with, evaluate, TrainCurve, TrainState};
use advnas_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::{report, AttackArgs, Common};

const INIT_SEED_SALT: u64 = 0x696e_6974_5f77_6569;

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_shape(data: &Dataset, shape: [usize; 3], classes: usize) -> Result<()> {
    if data.image_shape() != shape || data.classes() != classes {
        return Err(Error::Config(format!(
            "data ({:?}, {} classes) does not match network ({:?}, {} classes)",
            data.image_shape(),
            data.classes(),
            shape,
            classes
        )));
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Creates the output directory and writes the resolved config.
fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> Result<String> {
    mkdir(out)?;
    let text = cfg.to_toml();
    write(&out.join("config.resolved.toml"), &text)?;
    Ok(text)
}

fn write_report(out: &Path, text: &str, json: &Value) -> Result<()> {
    write(&out.join("report.txt"), text)?;
    let mut j = serde_json::to_string_pretty(json).expect("report serializes");
    j.push('\n');
    write(&out.join("report.json"), &j)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn search(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let Splits { train, .. } = cfg.data.load()?;
    check_shape(&train, cfg.supernet.input_shape, cfg.supernet.classes)?;
    prepare_out(&common.out, &cfg)?;
    let out = &common.out;
    let gdir = out.join("genotypes");
    mkdir(&gdir)?;
    let metrics_path = out.join("metrics.csv");
    let outcome = run_search_with(cfg.supernet.clone(), &cfg.search, &train, |st| {
        let m = st.metrics.last().expect("epoch recorded");
        let g = st.genotypes.last().expect("epoch recorded");
        write(&gdir.join(format!("epoch_{:03}.txt", m.epoch)), &g.to_text())?;
        let mut csv = String::from(EpochMetrics::CSV_HEADER);
        csv.push('\n');
        for row in &st.metrics {
            csv.push_str(&row.csv_row());
            csv.push('\n');
        }
        write(&metrics_path, &csv)?;
        eprintln!(
            "epoch {:>3} stage {} val_nat {:.4} val_adv {:.4}",
            m.epoch, m.stage, m.val_nat_loss, m.val_adv_loss
        );
        Ok(())
    })?;
    write(&out.join("genotype_final.txt"), &outcome.final_genotype().to_text())?;
    write_report(
        out,
        &report::search_text(outcome.metrics(), &outcome.selection),
        &report::search_json(outcome.metrics(), &outcome.selection),
    )
}

/// Checkpoint metadata: the network config and the curves so far.
fn metadata(network: &SupernetConfig, curves: &[TrainCurve]) -> String {
    serde_json::json!({ "network": network, "curves": curves }).to_string()
}

fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.train.epochs = 0;
    hash_text(&c.to_toml())
}

pub(crate) fn train(common: &Common, genotype_path: &Path, resume: bool) -> Result<()> {
    let cfg = resolve(common)?;
    let genotype = Genotype::from_text(&read_text(genotype_path)?)?;
    let network = cfg.network.clone().unwrap_or_else(|| genotype.config.clone());
    let splits = cfg.data.load()?;
    check_shape(&splits.train, network.input_shape, network.classes)?;
    let ckpt_path = common.out.join("checkpoints").join("last.ckpt");
    let resumed = if resume { Some(Checkpoint::load(&ckpt_path)?) } else { None };
    let mut init = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ INIT_SEED_SALT);
    let net = DiscreteNetwork::new(&genotype, network.clone(), &mut init)?;
    let mut state = TrainState::new(net, &cfg.train);
    let hash = config_hash(&cfg);
    let arch = genotype.to_text();
    if let Some(ck) = &resumed {
        if ck.config_hash != hash {
            return Err(Error::Config("checkpoint was written under a different config".into()));
        }
        if ck.architecture != arch {
            return Err(Error::Config("checkpoint was written for a different genotype".into()));
        }
        let meta: Value = serde_json::from_str(&ck.metadata).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let curves: Vec<TrainCurve> =
            serde_json::from_value(meta["curves"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut sgd = state.sgd.clone();
        let rng = ck.restore_into(&mut state.net, &mut sgd)?;
        state.sgd = sgd;
        state.rng = rng;
        state.epoch = ck.epoch as usize;
        state.curves = curves;
    }
    prepare_out(&common.out, &cfg)?;
    mkdir(&common.out.join("checkpoints"))?;
    let curves_path = common.out.join("curves.csv");
    adversarial_train_with(&mut state, &cfg.train, &splits.train, Some(&splits.test), |st| {
        Checkpoint::capture(
            &st.net,
            &st.sgd,
            &st.rng,
            st.epoch as u64,
            hash.clone(),
            arch.clone(),
            metadata(&network, &st.curves),
        )
        .save(&ckpt_path)?;
        let mut csv = String::from(TrainCurve::CSV_HEADER);
        csv.push('\n');
        for c in &st.curves {
            csv.push_str(&c.csv_row());
            csv.push('\n');
        }
        write(&curves_path, &csv)?;
        let c = st.curves.last().expect("epoch recorded");
        eprintln!(
            "epoch {:>3} lr {:.4} train_adv {:.4}",
            c.epoch, c.lr, c.train_adv_loss
        );
        Ok(())
    })?;
    let eval = evaluate(&state.net, &splits.test, &cfg.evaluation.attacks, cfg.evaluation.batch_size)?;
    write_report(
        &common.out,
        &report::train_text(&state.curves, Some(&eval)),
        &report::train_json(&state.curves, Some(&eval)),
    )
}

/// Rebuilds the network stored in a checkpoint.
pub(crate) fn load_network(path: &Path) -> Result<DiscreteNetwork> {
    let ck = Checkpoint::load(path)?;
    let genotype = Genotype::from_text(&ck.architecture)?;
    let meta: Value = serde_json::from_str(&ck.metadata).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let network: SupernetConfig =
        serde_json::from_value(meta["network"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut net = DiscreteNetwork::new(&genotype, network, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore_into(&mut net, &mut Sgd::new(0.0, 0.0))?;
    Ok(net)
}

fn test_split(cfg: &ExperimentConfig, net: &DiscreteNetwork) -> Result<Dataset> {
    let Splits { test, .. } = cfg.data.load()?;
    check_shape(&test, net.input_shape(), net.classes())?;
    Ok(test)
}

pub(crate) fn attack(common: &Common, checkpoint: &Path, args: &AttackArgs) -> Result<()> {
    let cfg = resolve(common)?;
    let attack = args.apply(cfg.train.attack);
    attack.validate()?;
    let net = load_network(checkpoint)?;
    let test = test_split(&cfg, &net)?;
    prepare_out(&common.out, &cfg)?;
    let r = evaluate(&net, &test, &[attack], cfg.evaluation.batch_size)?;
    write_report(&common.out, &r.to_table(), &report::eval_json(&r))
}

pub(crate) fn eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let net = load_network(checkpoint)?;
    let test = test_split(&cfg, &net)?;
    prepare_out(&common.out, &cfg)?;
    let r = evaluate(&net, &test, &cfg.evaluation.attacks, cfg.evaluation.batch_size)?;
    write_report(&common.out, &r.to_table(), &report::eval_json(&r))
}

pub(crate) fn transfer(common: &Common, source: &Path, target: &Path, args: &AttackArgs) -> Result<()> {
    let cfg = resolve(common)?;
    let attack: AttackConfig = args.apply(cfg.train.attack);
    attack.validate()?;
    let src = load_network(source)?;
    let tgt = load_network(target)?;
    let test = test_split(&cfg, &tgt)?;
    prepare_out(&common.out, &cfg)?;
    let b = cfg.evaluation.batch_size;
    let t = transfer_attack(&src, &tgt, test.images(), test.labels(), &attack, b)?;
    let wb = adversarial_accuracy(&tgt, test.images(), test.labels(), &attack, b)?;
    let label = attack.label();
    write_report(
        &common.out,
        &report::transfer_text(&label, &t, &wb),
        &report::transfer_json(&label, &t, &wb),
    )
}

fn read_rows<T>(path: &Path, parse: fn(&str) -> Result<T>) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(parse)
        .collect()
}

pub(crate) fn report(run: &Path, out: Option<&Path>) -> Result<()> {
    let metrics: PathBuf = run.join("metrics.csv");
    let curves = run.join("curves.csv");
    let (text, json) = if metrics.is_file() {
        let rows = read_rows(&metrics, EpochMetrics::from_csv_row)?;
        let threshold = match fs::read_to_string(run.join("config.resolved.toml")) {
            Ok(t) => ExperimentConfig::from_toml(&t)?.search.degradation_threshold,
            Err(_) => ExperimentConfig::default().search.degradation_threshold,
        };
        let sel = SelectionReport::from_metrics(&rows, threshold);
        (report::search_text(&rows, &sel), report::search_json(&rows, &sel))
    } else if curves.is_file() {
        let rows = read_rows(&curves, TrainCurve::from_csv_row)?;
        (report::train_text(&rows, None), report::train_json(&rows, None))
    } else {
        return Err(Error::Data(format!(
            "{} holds neither metrics.csv nor curves.csv",
            run.display()
        )));
    };
    print!("{text}");
    if let Some(o) = out {
        mkdir(o)?;
        write_report(o, &text, &json)?;
    }
    Ok(())
}

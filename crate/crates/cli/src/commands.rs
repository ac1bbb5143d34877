use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use relext_core::checkpoint::Checkpoint;
use relext_core::config::{parse_pairs, RunConfig};
use relext_core::corpus::{group_by_pair, group_by_triple, load_instances, write_instances, Instance, RelationVocab};
use relext_core::eval::{score_pairs, TestData, TrainData};
use relext_core::experiment::{attention_scores, prepare_synth, run_filter_experiment, train_and_evaluate, FilterRow};
use relext_core::featurizer::Vocab;
use relext_core::metrics::{evaluate, write_curve_csv, write_summary_json, Summary};
use relext_core::synth::generate_synth;
use relext_core::trainer::{attention_histogram, train as fit, Variant};
use relext_core::{Error, Result};
use serde::Serialize;

use crate::manifest::Manifest;
use crate::ConfigArgs;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const RELATIONS_FILE: &str = "relations.txt";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const CHECKPOINT_FILE: &str = "model.json";

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.into(), source }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Defaults, then the config file, then `--set` pairs, then `--seed`.
pub fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut pairs = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
            parse_pairs(&text, path)?
        }
        None => BTreeMap::new(),
    };
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        pairs.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Some(seed) = args.seed {
        pairs.insert("seed".into(), seed.to_string());
    }
    let mut cfg = RunConfig::default();
    cfg.apply(&pairs)?;
    Ok(cfg)
}

fn config_manifest(command: &str, cfg: &RunConfig) -> Manifest {
    Manifest::new(command).with_config(cfg.canonical(), cfg.seed)
}

fn noisy(instances: &[Instance], truth: &[usize]) -> usize {
    instances.iter().zip(truth).filter(|(i, &t)| i.relation != t).count()
}

#[derive(Serialize)]
struct Diagnostics {
    train_instances: usize,
    train_bags: usize,
    train_noisy_instances: usize,
    train_noise_fraction: f64,
    test_instances: usize,
    test_pairs: usize,
    test_noisy_instances: usize,
}

pub fn gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    create_dir(out)?;
    let corpus = generate_synth(&cfg.synth)?;
    let mut manifest = config_manifest("gen-data", &cfg);
    let train = out.join(TRAIN_FILE);
    let test = out.join(TEST_FILE);
    let relations = out.join(RELATIONS_FILE);
    let diagnostics = out.join(DIAGNOSTICS_FILE);
    write_instances(&train, &corpus.train, &corpus.relations)?;
    write_instances(&test, &corpus.test, &corpus.relations)?;
    corpus.relations.save(&relations)?;
    let d = Diagnostics {
        train_instances: corpus.train.len(),
        train_bags: corpus.train_bags().len(),
        train_noisy_instances: noisy(&corpus.train, &corpus.train_truth),
        train_noise_fraction: corpus.train_noise_fraction(),
        test_instances: corpus.test.len(),
        test_pairs: corpus.test_bags().len(),
        test_noisy_instances: noisy(&corpus.test, &corpus.test_truth),
    };
    write_json(&diagnostics, &d)?;
    log::info!(
        "{} train instances ({} noisy), {} test pairs",
        d.train_instances,
        d.train_noisy_instances,
        d.test_pairs
    );
    for p in [&train, &test, &relations, &diagnostics] {
        manifest.output(p)?;
    }
    manifest.write(out)
}

fn load_split(data: &Path, file: &str, relations: &RelationVocab) -> Result<Vec<Instance>> {
    let instances = load_instances(&data.join(file), relations)?;
    if instances.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} has no instances", data.join(file).display())));
    }
    Ok(instances)
}

pub fn train(args: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let relations = RelationVocab::load(&data.join(RELATIONS_FILE))?;
    let instances = load_split(data, TRAIN_FILE, &relations)?;
    let vocab = Vocab::build(instances.iter());
    let bags = group_by_triple(instances);
    let prepared = TrainData::prepare(&bags, &cfg.featurizer, &vocab)?;
    if prepared.rejected > 0 {
        log::warn!("{} training instances rejected by the featurizer", prepared.rejected);
    }
    let model = cfg.model(relations.len());
    create_dir(out)?;
    let mut manifest = config_manifest("train", &cfg);
    manifest.input(data)?;
    let (params, log) = match fit(&prepared, &model, vocab.len(), &cfg.train) {
        Ok(r) => r,
        Err(Error::Diverged { epoch, step, last_good }) => {
            let path = out.join("last_good.json");
            Checkpoint { model, vocab, relations, params: (*last_good).clone() }.save(&path)?;
            log::error!("last finite parameters written to {}", path.display());
            return Err(Error::Diverged { epoch, step, last_good });
        }
        Err(e) => return Err(e),
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    let log_path = out.join("train_log.jsonl");
    Checkpoint { model, vocab, relations, params }.save(&ckpt)?;
    write_text(&log_path, &log.to_json_lines())?;
    manifest.output(&ckpt)?;
    manifest.output(&log_path)?;
    manifest.write(out)
}

pub fn eval(ckpt_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let instances = load_split(data, TEST_FILE, &ckpt.relations)?;
    let test = TestData::prepare(&group_by_pair(instances), &ckpt.model.featurizer, &ckpt.vocab)?;
    let records = score_pairs(&ckpt.params, &ckpt.model, &test)?;
    let (curve, summary) = evaluate(&records, test.positives())?;
    create_dir(out)?;
    let mut manifest = Manifest::new("eval");
    manifest.input(ckpt_path)?;
    manifest.input(data)?;
    let metrics = out.join("metrics.json");
    let curve_path = out.join("pr_curve.csv");
    write_summary_json(&metrics, &summary)?;
    write_curve_csv(&curve_path, &curve)?;
    log::info!("auc {:.4}", summary.auc);
    manifest.output(&metrics)?;
    manifest.output(&curve_path)?;
    manifest.write(out)
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    names.iter().map(|n| n.parse()).collect()
}

/// Configs for `k` consecutive seeds starting at the configured one.
fn seed_configs(cfg: &RunConfig, k: usize) -> Result<Vec<RunConfig>> {
    if k == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    (0..k as u64)
        .map(|i| {
            let mut c = cfg.clone();
            c.set("seed", &(cfg.seed + i).to_string())?;
            Ok(c)
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn ablate(args: &ConfigArgs, seeds: usize, variants: &[String], out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let variants = parse_variants(variants)?;
    let configs = seed_configs(&cfg, seeds)?;
    let prepared = configs.par_iter().map(prepare_synth).collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..variants.len()).flat_map(|v| (0..seeds).map(move |s| (v, s))).collect();
    let results: Vec<Summary> = cells
        .par_iter()
        .map(|&(v, s)| {
            let p = &prepared[s];
            let t = relext_core::trainer::TrainConfig { variant: variants[v], ..configs[s].train.clone() };
            let r = train_and_evaluate(&p.train, &p.test, &p.model, p.vocab.len(), &t)?;
            log::info!("{} seed {}: auc {:.4}", variants[v], configs[s].seed, r.summary.auc);
            Ok(r.summary)
        })
        .collect::<Result<_>>()?;

    create_dir(out)?;
    let mut manifest = config_manifest("ablate", &cfg);
    let mut runs = String::from("variant,seed,auc,p@100,p@200,p@300\n");
    for (&(v, s), r) in cells.iter().zip(&results) {
        let _ = writeln!(runs, "{},{},{},{},{},{}", variants[v], configs[s].seed, r.auc, opt(r.p100), opt(r.p200), opt(r.p300));
    }
    let mut table = String::from("variant,seeds,auc_mean,auc_std\n");
    let mut shown = String::new();
    for (v, variant) in variants.iter().enumerate() {
        let aucs: Vec<f64> = cells.iter().zip(&results).filter(|((cv, _), _)| *cv == v).map(|(_, r)| r.auc).collect();
        let (m, sd) = mean_std(&aucs);
        let _ = writeln!(table, "{variant},{},{m},{sd}", aucs.len());
        let _ = writeln!(shown, "{:<24} {:>6.2}±{:.2}", variant.to_string(), 100.0 * m, 100.0 * sd);
    }
    print!("{:<24} {:>6}\n{shown}", "variant", "AUC");
    let runs_path = out.join("runs.csv");
    let table_path = out.join("table.csv");
    write_text(&runs_path, &runs)?;
    write_text(&table_path, &table)?;
    manifest.output(&runs_path)?;
    manifest.output(&table_path)?;
    manifest.write(out)
}

#[derive(Serialize)]
struct SeededRow {
    seed: u64,
    #[serde(flatten)]
    row: FilterRow,
}

pub fn filter_exp(
    args: &ConfigArgs,
    thresholds: &[f64],
    seeds: usize,
    methods: &[String],
    scorer: &str,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(args)?;
    let methods = parse_variants(methods)?;
    let scorer: Variant = scorer.parse()?;
    if let Some(t) = thresholds.iter().find(|t| !(0.0..1.0).contains(*t)) {
        return Err(Error::Config(format!("threshold {t} outside [0, 1)")));
    }
    let configs = seed_configs(&cfg, seeds)?;
    let per_seed: Vec<Vec<FilterRow>> = configs
        .par_iter()
        .map(|c| {
            let p = prepare_synth(c)?;
            log::info!("seed {}: {} training instances", c.seed, p.train.instances());
            run_filter_experiment(&p.train, &p.test, &p.model, &p.vocab, thresholds, &methods, scorer, &c.train)
        })
        .collect::<Result<_>>()?;

    create_dir(out)?;
    let mut manifest = config_manifest("filter-exp", &cfg);
    let mut runs = String::from("seed,threshold,instances,removed_fraction,method,auc,relative_delta\n");
    for (c, rows) in configs.iter().zip(&per_seed) {
        for r in rows {
            let _ = writeln!(
                runs,
                "{},{},{},{},{},{},{}",
                c.seed, r.threshold, r.instances, r.removed_fraction, r.method, r.auc, r.relative_delta
            );
        }
    }
    // one row per (threshold, method), averaged over seeds
    let mut table = String::from("dataset,instances,removed_fraction,method,auc_mean,auc_std,relative_delta_mean\n");
    let mut shown = format!("{:<16} {:>9} {:<20} {:>7} {:>9}\n", "dataset", "instances", "method", "AUC", "delta");
    let n_rows = per_seed[0].len();
    for i in 0..n_rows {
        let rows: Vec<&FilterRow> = per_seed.iter().map(|rs| &rs[i]).collect();
        let r0 = rows[0];
        let dataset = if r0.threshold == 0.0 { "original".to_string() } else { format!("filtered@{}", r0.threshold) };
        let (auc, sd) = mean_std(&rows.iter().map(|r| r.auc).collect::<Vec<_>>());
        let (inst, _) = mean_std(&rows.iter().map(|r| r.instances as f64).collect::<Vec<_>>());
        let (removed, _) = mean_std(&rows.iter().map(|r| r.removed_fraction).collect::<Vec<_>>());
        let (delta, _) = mean_std(&rows.iter().map(|r| r.relative_delta).collect::<Vec<_>>());
        let _ = writeln!(table, "{dataset},{inst},{removed},{},{auc},{sd},{delta}", r0.method);
        let _ = writeln!(shown, "{dataset:<16} {inst:>9.0} {:<20} {:>7.2} {:>+8.1}%", r0.method, 100.0 * auc, 100.0 * delta);
    }
    print!("{shown}");
    let runs_path = out.join("runs.csv");
    let table_path = out.join("table.csv");
    let json_path = out.join("runs.json");
    let json_rows: Vec<SeededRow> = configs
        .iter()
        .zip(per_seed)
        .flat_map(|(c, rows)| rows.into_iter().map(move |row| SeededRow { seed: c.seed, row }))
        .collect();
    write_text(&runs_path, &runs)?;
    write_text(&table_path, &table)?;
    write_json(&json_path, &json_rows)?;
    for p in [&runs_path, &table_path, &json_path] {
        manifest.output(p)?;
    }
    manifest.write(out)
}

pub fn histogram(ckpt_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let instances = load_split(data, TRAIN_FILE, &ckpt.relations)?;
    let train = TrainData::prepare(&group_by_triple(instances), &ckpt.model.featurizer, &ckpt.vocab)?;
    let h = attention_histogram(&attention_scores(&ckpt.params, &ckpt.model, &train)?);
    let mut csv = String::from("bin,lower,upper,count\n");
    for (i, c) in h.bins.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{},{c}", i as f64 / 10.0, (i + 1) as f64 / 10.0);
    }
    let _ = writeln!(csv, "singleton,1,1,{}", h.singleton);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(out, &csv)?;
    let mut manifest = Manifest::new("histogram");
    manifest.input(ckpt_path)?;
    manifest.input(data)?;
    manifest.output(out)?;
    let name = format!("{}.manifest.json", out.file_stem().unwrap_or_default().to_string_lossy());
    manifest.write_to(&out.with_file_name(name))
}

//! Subcommand implementations.

use crate::campaign::{
    config_hash, job_echo, read_rows, run_job, select_targets, slug, write_campaign, CampaignReport, Target,
    REPORT_FILE, ROWS_FILE,
};
use crate::method::{jobs_from_settings, Job, MethodSpec};
use crate::setup::{write_json, Context, SplitName, ThresholdRecord, MODEL_FILE};
use crate::{ensure_dir, usage, AblateArgs, AttackArgs, DefendArgs, GenDataArgs, TrainArgs};
use anyhow::{bail, Context as _, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use sigattack_core::baselines::Direction;
use sigattack_core::data::{build_pairs, load_dir, load_png_image, save_dataset, Dataset, Pair, PairSet};
use sigattack_core::defense::{adversarial_retrain, MixRatio};
use sigattack_core::eval::{best_threshold, tpr_tnr, write_records, DistanceRecord};
use sigattack_core::model::{train as train_model, Architecture, ModelWeights, TrainConfig};
use sigattack_core::optim::AdamSettings;
use std::collections::BTreeMap;
use std::path::Path;

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.writers == 0 {
        return Err(usage("--writers must be at least 1"));
    }
    if a.genuine == 0 {
        return Err(usage("--genuine must be at least 1"));
    }
    let dataset = Dataset::synthetic(a.writers, a.genuine, a.forged, a.seed)?;
    let n = save_dataset(&dataset, &a.out)?;
    println!("wrote {n} images for {} writers to {}", a.writers, a.out.display());
    Ok(())
}

fn train_config(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Result<TrainConfig> {
    if epochs == 0 {
        return Err(usage("--epochs must be at least 1"));
    }
    if batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    Ok(TrainConfig {
        epochs,
        batch_size,
        adam: AdamSettings::with_lr(lr),
        seed,
        ..TrainConfig::default()
    })
}

/// Fits tau on the train split and evaluates it on the test split.
fn fit_threshold(
    model: &ModelWeights,
    dataset: &Dataset,
    train: &PairSet,
    test: &PairSet,
    out: &Path,
) -> Result<(ThresholdRecordParts, Vec<DistanceRecord>)> {
    let train_d = model.pair_distances(&dataset.images, &train.pairs)?;
    let fit = best_threshold(&train_d)?;
    let test_d = model.pair_distances(&dataset.images, &test.pairs)?;
    let (test_tpr, test_tnr) = tpr_tnr(&test_d, fit.tau)?;
    write_records(std::fs::File::create(out.join("train_distances.csv"))?, &train_d)?;
    write_records(std::fs::File::create(out.join("test_distances.csv"))?, &test_d)?;
    Ok((
        ThresholdRecordParts {
            tau: fit.tau,
            tpr: fit.tpr,
            tnr: fit.tnr,
            accuracy: fit.accuracy,
            test_tpr,
            test_tnr,
            test_accuracy: (test_tpr + test_tnr) / 2.0,
        },
        train_d,
    ))
}

struct ThresholdRecordParts {
    tau: f64,
    tpr: f64,
    tnr: f64,
    accuracy: f64,
    test_tpr: f64,
    test_tnr: f64,
    test_accuracy: f64,
}

impl ThresholdRecordParts {
    fn record(self, split_seed: u64, train_writers: usize, pairs_per_class: Option<usize>, dataset_seed: u64, model: &ModelWeights) -> ThresholdRecord {
        ThresholdRecord {
            tau: self.tau,
            tpr: self.tpr,
            tnr: self.tnr,
            accuracy: self.accuracy,
            test_tpr: self.test_tpr,
            test_tnr: self.test_tnr,
            test_accuracy: self.test_accuracy,
            split_seed,
            train_writers,
            pairs_per_class,
            dataset_seed,
            model_checksum: model.checksum(),
        }
    }
}

fn write_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a.epochs, a.batch_size, a.lr, a.seed)?;
    if a.pairs_per_class == 0 {
        return Err(usage("--pairs-per-class must be at least 1"));
    }
    let (dataset, issues) = load_dir(&a.data)?;
    for issue in &issues {
        log::warn!("skipped {}: {}", issue.path.display(), issue.message);
    }
    let per_class = Some(a.pairs_per_class);
    let (train_set, test_set) = build_pairs(&dataset, a.train_writers, per_class, a.seed)?;
    let arch = Architecture {
        height: dataset.height,
        width: dataset.width,
        ..Architecture::default()
    };
    let mut model = ModelWeights::init(arch, a.seed)?;
    log::info!(
        "training on {} pairs from {} writers for {} epochs",
        train_set.pairs.len(),
        train_set.writers.len(),
        cfg.epochs
    );
    let curve = train_model(&mut model, &dataset.images, &train_set.pairs, &cfg)
        .context("training failed; no model was written")?;
    ensure_dir(&a.out)?;
    write_curve(&a.out.join("loss_curve.csv"), &curve)?;
    let (parts, _) = fit_threshold(&model, &dataset, &train_set, &test_set, &a.out)?;
    let record = parts.record(a.seed, a.train_writers, per_class, dataset.seed, &model);
    model.save(&a.out.join(MODEL_FILE))?;
    record.save(&a.out)?;
    println!(
        "tau {:.6}  train accuracy {:.4}  test accuracy {:.4} (tpr {:.4}, tnr {:.4})",
        record.tau, record.accuracy, record.test_accuracy, record.test_tpr, record.test_tnr
    );
    Ok(())
}

pub(crate) fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Ensures baselines without an explicit seed use the command's seed.
fn seed_jobs(jobs: &mut [Job], explicit: bool, seed: u64) {
    if explicit {
        return;
    }
    for job in jobs {
        if let MethodSpec::Baseline(b) = &mut job.method {
            b.seed = seed;
        }
    }
}

struct CampaignPlan<'a> {
    split: SplitName,
    pairs: &'a [Pair],
    records: &'a [DistanceRecord],
    tau: f64,
    limit: Option<usize>,
    seed: u64,
}

fn campaign_header(ctx: &Context, plan: &CampaignPlan, jobs: &[Job], model: &ModelWeights) -> CampaignReport {
    let mut lines = vec![
        format!("seed={}", plan.seed),
        format!("split={}", plan.split.as_str()),
        format!("pairs={:?}", plan.limit),
        format!("tau={}", plan.tau),
        format!("model={}", model.checksum()),
        format!("dataset_seed={}", ctx.dataset.seed),
    ];
    for job in jobs {
        lines.push(format!("job={}", job.label()));
        lines.extend(job.method.echo().into_iter().map(|(k, v)| format!("  {k}={v}")));
    }
    CampaignReport {
        config_hash: config_hash(&lines),
        seed: plan.seed,
        tau: plan.tau,
        split: plan.split.as_str().into(),
        pair_limit: plan.limit,
        dataset_seed: ctx.dataset.seed,
        model_checksum: model.checksum(),
        jobs: jobs.iter().map(job_echo).collect(),
        aggregates: Vec::new(),
        notes: Vec::new(),
    }
}

pub fn attack(a: &AttackArgs, jobs_n: usize) -> Result<()> {
    let settings = a.settings.resolve()?;
    if a.pairs == Some(0) {
        return Err(usage("--pairs must be at least 1"));
    }
    let ctx = Context::load(&a.data, &a.model)?;
    let model_path = a.model.join(MODEL_FILE);
    let digest_before = file_digest(&model_path)?;
    let tau = ctx.record.tau;
    let mut jobs = jobs_from_settings(&settings, tau)?;
    seed_jobs(&mut jobs, settings.contains_key("seed"), a.seed);

    let pairs = &ctx.split(a.split).pairs;
    let records = ctx.distances(&ctx.model, pairs)?;
    let plan = CampaignPlan {
        split: a.split,
        pairs,
        records: &records,
        tau,
        limit: a.pairs,
        seed: a.seed,
    };
    let mut targets: BTreeMap<&'static str, Vec<Target>> = BTreeMap::new();
    let mut outcomes = Vec::new();
    for job in &jobs {
        let dir = job.direction;
        let t = targets
            .entry(dir.as_str())
            .or_insert_with(|| select_targets(plan.records, plan.pairs, tau, dir, plan.limit, plan.seed));
        log::info!("{}: {} pairs", job.label(), t.len());
        let outs = run_job(&ctx.model, &ctx.dataset.images, t, job, tau, jobs_n)?;
        outcomes.push((job.clone(), outs));
    }
    let header = campaign_header(&ctx, &plan, &jobs, &ctx.model);
    let report = write_campaign(&a.out, header, &outcomes, !a.no_images)?;

    if file_digest(&model_path)? != digest_before {
        bail!("{} changed during the campaign", model_path.display());
    }
    print_aggregates(&report);
    Ok(())
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".into(), |v| format!("{:.3}", v))
}

fn print_aggregates(report: &CampaignReport) {
    println!("tau {:.6}", report.tau);
    for agg in &report.aggregates {
        println!(
            "{:<36} tn {:>6} ({}/{})  fp {:>6} ({}/{})",
            agg.method,
            fmt_rate(agg.tn_rate),
            agg.tn_succeeded,
            agg.tn_attacked,
            fmt_rate(agg.fp_rate),
            agg.fp_succeeded,
            agg.fp_attacked
        );
    }
    for note in &report.notes {
        println!("note: {note}");
    }
}

#[derive(Debug, Serialize)]
struct DefenseSide {
    tau: f64,
    test_accuracy: f64,
    model_checksum: String,
    attacked: usize,
    /// Pairs still decided correctly before the attack is re-run.
    correctly_decided: usize,
    succeeded: usize,
    success_rate: Option<f64>,
}

#[derive(Debug, Serialize)]
struct DefenseReport {
    job: String,
    ratio: String,
    epochs: usize,
    seed: u64,
    adversarial_pairs: usize,
    before: DefenseSide,
    after: DefenseSide,
    rate_drop: Option<f64>,
}

pub fn defend(a: &DefendArgs, jobs_n: usize) -> Result<()> {
    let ratio = MixRatio::parse(&a.ratio)?;
    let cfg = train_config(a.epochs, a.batch_size, a.lr, a.seed)?;
    let report_path = a.campaign.join(REPORT_FILE);
    if !report_path.is_file() {
        return Err(usage(format!("no campaign report at {}", report_path.display())));
    }
    let ctx = Context::load(&a.data, &a.model)?;
    let text = std::fs::read_to_string(&report_path)?;
    let prior: CampaignReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", report_path.display()))?;
    if prior.model_checksum != ctx.model.checksum() {
        return Err(usage(format!("campaign {} was run against a different model", a.campaign.display())));
    }
    let echo = match &a.job {
        Some(label) => prior.jobs.iter().find(|j| &j.label == label),
        None => prior.jobs.iter().find(|j| j.direction == "fp"),
    }
    .ok_or_else(|| usage(format!("campaign {} has no matching job", a.campaign.display())))?;
    let direction = Direction::parse(&echo.direction).ok_or_else(|| usage(format!("bad direction {:?}", echo.direction)))?;
    let method = MethodSpec::from_echo(&echo.settings, prior.tau)?;
    let method_label = method.label();
    let rows: Vec<_> = read_rows(&a.campaign.join(ROWS_FILE))?
        .into_iter()
        .filter(|r| r.method == method_label && r.direction == echo.direction)
        .collect();
    if rows.is_empty() {
        return Err(usage(format!("campaign has no rows for {}", echo.label)));
    }
    let split = match prior.split.as_str() {
        "train" => SplitName::Train,
        _ => SplitName::Test,
    };
    let by_id: BTreeMap<&str, &Pair> = ctx.split(split).pairs.iter().map(|p| (p.id.as_str(), p)).collect();

    // Adversarial images join the image table as extra entries.
    let mut images = ctx.dataset.images.clone();
    let mut adversarial = Vec::with_capacity(rows.len());
    let mut same_pairs = Vec::with_capacity(rows.len());
    let image_dir = a.campaign.join("adversarial").join(slug(&echo.label));
    for row in &rows {
        let pair = *by_id
            .get(row.pair_id.as_str())
            .ok_or_else(|| anyhow::anyhow!("campaign pair {} is not in the {} split", row.pair_id, prior.split))?;
        let path = image_dir.join(format!("{}.png", row.pair_id));
        if !path.is_file() {
            return Err(usage(format!(
                "missing adversarial image {}; rerun attack without --no-images",
                path.display()
            )));
        }
        images.push(load_png_image(&path, ctx.dataset.height, ctx.dataset.width)?);
        adversarial.push((pair.a, images.len() - 1));
        same_pairs.push(pair.clone());
    }

    let (defended, curve) = adversarial_retrain(&ctx.model, &images, &ctx.train.pairs, &adversarial, ratio, &cfg)?;
    ensure_dir(&a.out)?;
    write_curve(&a.out.join("loss_curve.csv"), &curve)?;
    let (parts, _) = fit_threshold(&defended, &ctx.dataset, &ctx.train, &ctx.test, &a.out)?;
    let r = &ctx.record;
    let record = parts.record(r.split_seed, r.train_writers, r.pairs_per_class, r.dataset_seed, &defended);
    defended.save(&a.out.join(MODEL_FILE))?;
    record.save(&a.out)?;

    // Re-run the same attack on the same pairs against the defended model.
    let tau = record.tau;
    let mut job = Job { method, direction };
    job.method.set_tau(tau);
    let after_d = defended.pair_distances(&ctx.dataset.images, &same_pairs)?;
    let targets: Vec<Target> = same_pairs
        .iter()
        .zip(&after_d)
        .map(|(p, d)| Target {
            pair: p.clone(),
            distance: d.distance,
        })
        .collect();
    let correct = after_d
        .iter()
        .filter(|d| match direction {
            Direction::Fp => d.distance > tau,
            Direction::Tn => d.distance <= tau,
        })
        .count();
    let outs = run_job(&defended, &ctx.dataset.images, &targets, &job, tau, jobs_n)?;
    let succeeded = outs.iter().filter(|o| o.row.success).count();
    let n = rows.len();
    let before_succeeded = rows.iter().filter(|r| r.success).count();
    let plan = CampaignPlan {
        split,
        pairs: &same_pairs,
        records: &after_d,
        tau,
        limit: None,
        seed: prior.seed,
    };
    let header = campaign_header(&ctx, &plan, std::slice::from_ref(&job), &defended);
    write_campaign(&a.out.join("campaign"), header, &[(job.clone(), outs)], true)?;

    let rate = |k: usize| (n > 0).then(|| k as f64 / n as f64);
    let report = DefenseReport {
        job: echo.label.clone(),
        ratio: ratio.to_string(),
        epochs: a.epochs,
        seed: a.seed,
        adversarial_pairs: adversarial.len(),
        before: DefenseSide {
            tau: prior.tau,
            test_accuracy: ctx.record.test_accuracy,
            model_checksum: prior.model_checksum.clone(),
            attacked: n,
            correctly_decided: n,
            succeeded: before_succeeded,
            success_rate: rate(before_succeeded),
        },
        after: DefenseSide {
            tau,
            test_accuracy: record.test_accuracy,
            model_checksum: record.model_checksum.clone(),
            attacked: n,
            correctly_decided: correct,
            succeeded,
            success_rate: rate(succeeded),
        },
        rate_drop: rate(before_succeeded).zip(rate(succeeded)).map(|(b, a)| b - a),
    };
    write_json(&a.out.join("defense.json"), &report)?;
    println!(
        "{}: success {} -> {} on {n} pairs (test accuracy {:.4} -> {:.4})",
        report.job,
        fmt_rate(report.before.success_rate),
        fmt_rate(report.after.success_rate),
        report.before.test_accuracy,
        report.after.test_accuracy
    );
    Ok(())
}

pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub weight: String,
    pub value: f64,
    pub fp_rate: f64,
    pub mean_abs_perturbation: f64,
}

pub fn ablate(a: &AblateArgs, jobs_n: usize) -> Result<()> {
    if !matches!(a.weight.as_str(), "alpha" | "beta" | "gamma" | "delta") {
        return Err(usage(format!("--weight must be alpha, beta, gamma or delta, got {:?}", a.weight)));
    }
    if a.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let settings = a.settings.resolve()?;
    let ctx = Context::load(&a.data, &a.model)?;
    let tau = ctx.record.tau;
    let jobs = jobs_from_settings(&settings, tau)?;
    let base = match jobs.as_slice() {
        [Job {
            method: MethodSpec::Ours(cfg),
            ..
        }] => cfg.clone(),
        _ => return Err(usage("ablation applies to the proposed attack only")),
    };
    let centre = match a.weight.as_str() {
        "alpha" => base.alpha,
        "beta" => base.beta,
        "gamma" => base.gamma,
        _ => base.delta,
    };
    let grid = if a.values.is_empty() {
        if centre <= 0.0 {
            return Err(usage(format!("{} is {centre}; the sweep needs a positive centre", a.weight)));
        }
        vec![0.0, centre / 10.0, centre, centre * 10.0]
    } else {
        if let Some(v) = a.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(usage(format!("sweep values must be finite and nonnegative, got {v}")));
        }
        a.values.clone()
    };
    let pairs = &ctx.split(a.split).pairs;
    let records = ctx.distances(&ctx.model, pairs)?;
    let targets = select_targets(&records, pairs, tau, Direction::Fp, Some(a.samples), a.seed);
    if targets.is_empty() {
        bail!("no correctly rejected forgeries to attack");
    }
    if targets.len() < a.samples {
        log::warn!("only {} attackable pairs, fewer than --samples {}", targets.len(), a.samples);
    }
    let mut rows = Vec::new();
    for value in grid {
        let mut cfg = base.clone();
        cfg.apply(&a.weight, &value.to_string())?;
        let job = Job {
            method: MethodSpec::Ours(cfg),
            direction: Direction::Fp,
        };
        let outs = run_job(&ctx.model, &ctx.dataset.images, &targets, &job, tau, jobs_n)?;
        let n = outs.len() as f64;
        let row = AblationRow {
            weight: a.weight.clone(),
            value,
            fp_rate: outs.iter().filter(|o| o.row.success).count() as f64 / n,
            mean_abs_perturbation: outs.iter().map(|o| o.row.mean_abs_perturbation).sum::<f64>() / n,
        };
        println!("{}={:<12e} fp_rate {:.3}  mean |perturbation| {:.5}", row.weight, row.value, row.fp_rate, row.mean_abs_perturbation);
        rows.push(row);
    }
    ensure_dir(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join(ABLATION_FILE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

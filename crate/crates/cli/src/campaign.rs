//! Attack campaigns: pair selection, per-pair execution and reports.

use crate::method::{Job, MethodSpec};
use crate::setup::write_json;
use anyhow::{ensure, Context as _, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sigattack_core::attack::run_attack;
use sigattack_core::baselines::{attack_image, Direction};
use sigattack_core::data::{save_png, Pair, SigImage};
use sigattack_core::eval::{select_correct_pairs, success_rates, DistanceRecord, Label};
use sigattack_core::model::ModelWeights;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

pub const ROWS_FILE: &str = "campaign.csv";
pub const REPORT_FILE: &str = "campaign.json";
pub const TIMINGS_FILE: &str = "timings.csv";

/// A pair the verifier currently decides correctly, with its clean distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub pair: Pair,
    pub distance: f64,
}

/// Correctly decided pairs for `direction`, optionally subsampled to `limit`
/// with a seeded shuffle, returned sorted by pair id.
pub fn select_targets(
    records: &[DistanceRecord],
    pairs: &[Pair],
    tau: f64,
    direction: Direction,
    limit: Option<usize>,
    seed: u64,
) -> Vec<Target> {
    let (genuine, forged) = select_correct_pairs(records, tau);
    let chosen = match direction {
        Direction::Tn => genuine,
        Direction::Fp => forged,
    };
    let by_id: BTreeMap<&str, &Pair> = pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut targets: Vec<Target> = chosen
        .iter()
        .map(|r| Target {
            pair: by_id[r.pair_id.as_str()].clone(),
            distance: r.distance,
        })
        .collect();
    targets.sort_by(|a, b| a.pair.id.cmp(&b.pair.id));
    if let Some(n) = limit {
        if n < targets.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            targets.shuffle(&mut rng);
            targets.truncate(n);
            targets.sort_by(|a, b| a.pair.id.cmp(&b.pair.id));
        }
    }
    targets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub pair_id: String,
    pub method: String,
    pub direction: String,
    pub distance_before: f64,
    pub distance_after: f64,
    pub success: bool,
    pub mean_abs_perturbation: f64,
    pub zero_gradient_steps: usize,
}

pub struct Outcome {
    pub row: Row,
    pub genuine: SigImage,
    pub start: SigImage,
    pub adversarial: SigImage,
    pub millis: f64,
}

/// Per-pair seed for stochastic baselines, independent of scheduling.
pub fn pair_seed(seed: u64, pair_id: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{pair_id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Applies `f` to every item on up to `jobs` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Runs one job on every target against a frozen model.
pub fn run_job(
    model: &ModelWeights,
    images: &[SigImage],
    targets: &[Target],
    job: &Job,
    tau: f64,
    jobs: usize,
) -> Result<Vec<Outcome>> {
    let label = job.method.label();
    par_map(targets, jobs, |t| {
        let genuine = &images[t.pair.a];
        let start = &images[t.pair.b];
        let clock = Instant::now();
        let (adversarial, after, zero) = match &job.method {
            MethodSpec::Ours(cfg) => {
                let r = run_attack(model, genuine, start, cfg)?;
                (r.synthesized, r.distance_after, 0)
            }
            MethodSpec::Baseline(cfg) => {
                let mut cfg = cfg.clone();
                cfg.seed = pair_seed(cfg.seed, &t.pair.id);
                let (adv, out) = attack_image(model, genuine, start, &cfg)?;
                let after = model.distance(genuine, &adv)?;
                (adv, after, out.zero_gradient_steps)
            }
        };
        let success = match job.direction {
            Direction::Fp => after <= tau,
            Direction::Tn => after > tau,
        };
        Ok(Outcome {
            row: Row {
                pair_id: t.pair.id.clone(),
                method: label.clone(),
                direction: job.direction.as_str().into(),
                distance_before: t.distance,
                distance_after: after,
                success,
                mean_abs_perturbation: adversarial.mean_abs_diff(start),
                zero_gradient_steps: zero,
            },
            genuine: genuine.clone(),
            start: start.clone(),
            adversarial,
            millis: clock.elapsed().as_secs_f64() * 1e3,
        })
    })
}

/// Table-style success counts for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub tn_attacked: usize,
    pub tn_succeeded: usize,
    /// `None` when no pair was attacked in this direction.
    pub tn_rate: Option<f64>,
    pub fp_attacked: usize,
    pub fp_succeeded: usize,
    pub fp_rate: Option<f64>,
    pub mean_abs_perturbation: Option<f64>,
}

fn rate(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Aggregates per method, in first-appearance order.
pub fn aggregate(rows: &[Row]) -> Vec<Aggregate> {
    let mut order: Vec<String> = Vec::new();
    let mut counts: BTreeMap<String, ([usize; 4], f64)> = BTreeMap::new();
    for r in rows {
        if !counts.contains_key(&r.method) {
            order.push(r.method.clone());
        }
        let (c, pert) = counts.entry(r.method.clone()).or_default();
        let base = if r.direction == "tn" { 0 } else { 2 };
        c[base] += 1;
        c[base + 1] += usize::from(r.success);
        *pert += r.mean_abs_perturbation;
    }
    order
        .into_iter()
        .map(|m| {
            let (c, pert) = counts[&m];
            let n = c[0] + c[2];
            Aggregate {
                method: m,
                tn_attacked: c[0],
                tn_succeeded: c[1],
                tn_rate: rate(c[1], c[0]),
                fp_attacked: c[2],
                fp_succeeded: c[3],
                fp_rate: rate(c[3], c[2]),
                mean_abs_perturbation: (n > 0).then(|| pert / n as f64),
            }
        })
        .collect()
}

/// Recomputes every aggregate from the row distances with the verification
/// rules and fails if anything disagrees.
pub fn check_consistency(rows: &[Row], aggregates: &[Aggregate], tau: f64) -> Result<()> {
    for agg in aggregates {
        let mine: Vec<&Row> = rows.iter().filter(|r| r.method == agg.method).collect();
        let record = |r: &Row, d: f64| {
            let label = if r.direction == "tn" { Label::Similar } else { Label::Dissimilar };
            DistanceRecord::new(r.pair_id.clone(), label, d)
        };
        let before: Vec<DistanceRecord> = mine.iter().map(|r| record(r, r.distance_before)).collect();
        let after: Vec<DistanceRecord> = mine.iter().map(|r| record(r, r.distance_after)).collect();
        let rates = success_rates(&before, &after, tau)?;
        ensure!(
            (rates.tn_attacked, rates.tn_succeeded, rates.fp_attacked, rates.fp_succeeded)
                == (agg.tn_attacked, agg.tn_succeeded, agg.fp_attacked, agg.fp_succeeded),
            "aggregate for {} disagrees with its rows",
            agg.method
        );
        for r in &mine {
            let expect = if r.direction == "tn" { r.distance_after > tau } else { r.distance_after <= tau };
            ensure!(expect == r.success, "row {} / {} has an inconsistent success flag", r.pair_id, r.method);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEcho {
    pub label: String,
    pub direction: String,
    pub settings: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config_hash: String,
    pub seed: u64,
    pub tau: f64,
    pub split: String,
    pub pair_limit: Option<usize>,
    pub dataset_seed: u64,
    pub model_checksum: String,
    pub jobs: Vec<JobEcho>,
    pub aggregates: Vec<Aggregate>,
    pub notes: Vec<String>,
}

/// SHA-256 over the canonical run description.
pub fn config_hash(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn job_echo(job: &Job) -> JobEcho {
    JobEcho {
        label: job.label(),
        direction: job.direction.as_str().into(),
        settings: job.method.echo(),
    }
}

/// File-system friendly form of a job label.
pub fn slug(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    for c in label.chars() {
        if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
            out.push(c);
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_end_matches('_').to_string()
}

pub fn write_rows(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for r in rd.deserialize() {
        out.push(r?);
    }
    Ok(out)
}

/// Writes the report files; `outcomes` is grouped per job in job order.
pub fn write_campaign(
    dir: &Path,
    report_base: CampaignReport,
    outcomes: &[(Job, Vec<Outcome>)],
    images: bool,
) -> Result<CampaignReport> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    let mut timings = csv::Writer::from_path(dir.join(TIMINGS_FILE))?;
    timings.write_record(["pair_id", "method", "direction", "millis"])?;
    for (job, outs) in outcomes {
        let label_slug = slug(&job.label());
        for o in outs {
            rows.push(o.row.clone());
            timings.write_record([o.row.pair_id.as_str(), &o.row.method, &o.row.direction, &format!("{:.1}", o.millis)])?;
            if images {
                let adv_path = dir.join("adversarial").join(&label_slug).join(format!("{}.png", o.row.pair_id));
                save_png(&o.adversarial, &adv_path)?;
                let trip = crate::triptych(&o.genuine, &o.start, &o.adversarial);
                save_png(&trip, &dir.join("triptych").join(&label_slug).join(format!("{}.png", o.row.pair_id)))?;
            }
        }
    }
    timings.flush()?;
    let aggregates = aggregate(&rows);
    check_consistency(&rows, &aggregates, report_base.tau)?;
    let mut report = report_base;
    for a in &aggregates {
        if a.tn_attacked + a.fp_attacked == 0 {
            report.notes.push(format!("{}: no attackable pairs, rates undefined", a.method));
        }
    }
    for (job, outs) in outcomes {
        if outs.is_empty() {
            report.notes.push(format!("{}: no attackable pairs, rates undefined", job.label()));
        }
    }
    report.aggregates = aggregates;
    write_rows(&dir.join(ROWS_FILE), &rows)?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

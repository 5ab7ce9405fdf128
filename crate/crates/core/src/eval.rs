//! Verification metrics: TPR/TNR at a threshold, accuracy-maximizing
//! threshold selection, attackable-pair selection and attack success rates.
//!
//! A pair is accepted as same-identity when `distance <= tau`.

use crate::error::{Error, Result};
use std::io::{Read, Write};

/// Reference thresholds reported for the original victim models. They depend
/// on that model's embedding scale and are not meaningful for other models.
pub const REFERENCE_TAU_CEDAR: f64 = 0.0314;
pub const REFERENCE_TAU_BHSIG260_BENGALI: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Similar,
    Dissimilar,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Similar => "similar",
            Label::Dissimilar => "dissimilar",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "similar" => Some(Label::Similar),
            "dissimilar" => Some(Label::Dissimilar),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRecord {
    pub pair_id: String,
    pub label: Label,
    pub distance: f64,
}

impl DistanceRecord {
    pub fn new(pair_id: impl Into<String>, label: Label, distance: f64) -> Self {
        Self {
            pair_id: pair_id.into(),
            label,
            distance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdReport {
    pub tau: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub accuracy: f64,
}

/// Distances split by label, each sorted ascending.
struct Sorted {
    similar: Vec<f64>,
    dissimilar: Vec<f64>,
}

impl Sorted {
    fn new(records: &[DistanceRecord]) -> Result<Self> {
        let mut similar = Vec::new();
        let mut dissimilar = Vec::new();
        for r in records {
            if !r.distance.is_finite() || r.distance < 0.0 {
                return Err(Error::Contract(format!(
                    "pair {}: distance {} is not a finite nonnegative value",
                    r.pair_id, r.distance
                )));
            }
            match r.label {
                Label::Similar => similar.push(r.distance),
                Label::Dissimilar => dissimilar.push(r.distance),
            }
        }
        if similar.is_empty() || dissimilar.is_empty() {
            return Err(Error::Config(format!(
                "need both labels, got {} similar and {} dissimilar records",
                similar.len(),
                dissimilar.len()
            )));
        }
        similar.sort_by(f64::total_cmp);
        dissimilar.sort_by(f64::total_cmp);
        Ok(Self { similar, dissimilar })
    }

    fn rates(&self, tau: f64) -> (f64, f64) {
        let accepted_similar = self.similar.partition_point(|&d| d <= tau);
        let rejected_dissimilar = self.dissimilar.len() - self.dissimilar.partition_point(|&d| d <= tau);
        (
            accepted_similar as f64 / self.similar.len() as f64,
            rejected_dissimilar as f64 / self.dissimilar.len() as f64,
        )
    }
}

/// True-positive and true-negative rates at `tau`.
pub fn tpr_tnr(records: &[DistanceRecord], tau: f64) -> Result<(f64, f64)> {
    Ok(Sorted::new(records)?.rates(tau))
}

/// Threshold maximizing `(TPR + TNR) / 2`.
///
/// The objective is piecewise constant on `[d_i, d_{i+1})` between sorted
/// distinct distances, so the candidates are every distinct distance plus
/// the float just below the smallest one (reject everything). Ties go to the
/// smallest threshold.
pub fn best_threshold(records: &[DistanceRecord]) -> Result<ThresholdReport> {
    let sorted = Sorted::new(records)?;
    let mut all: Vec<f64> = sorted.similar.iter().chain(&sorted.dissimilar).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut best: Option<ThresholdReport> = None;
    let mut consider = |tau: f64| {
        let (tpr, tnr) = sorted.rates(tau);
        let accuracy = (tpr + tnr) / 2.0;
        if best.is_none_or(|b| accuracy > b.accuracy) {
            best = Some(ThresholdReport { tau, tpr, tnr, accuracy });
        }
    };
    consider(all[0].next_down());
    for &d in &all {
        consider(d);
    }
    Ok(best.expect("at least two records"))
}

/// Pairs the verifier currently decides correctly: similar pairs with
/// `D <= tau` (TN-attack inputs) and dissimilar pairs with `D > tau`
/// (FP-attack inputs).
pub fn select_correct_pairs(
    records: &[DistanceRecord],
    tau: f64,
) -> (Vec<DistanceRecord>, Vec<DistanceRecord>) {
    let genuine = records
        .iter()
        .filter(|r| r.label == Label::Similar && r.distance <= tau)
        .cloned()
        .collect();
    let forged = records
        .iter()
        .filter(|r| r.label == Label::Dissimilar && r.distance > tau)
        .cloned()
        .collect();
    (genuine, forged)
}

/// Outcome counts of an attack campaign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttackRates {
    pub tn_attacked: usize,
    pub tn_succeeded: usize,
    pub fp_attacked: usize,
    pub fp_succeeded: usize,
}

impl AttackRates {
    /// Fraction of attacked similar pairs pushed above the threshold
    /// (0 when none were attacked).
    pub fn tn_rate(&self) -> f64 {
        ratio(self.tn_succeeded, self.tn_attacked)
    }

    /// Fraction of attacked dissimilar pairs pulled to or below the threshold
    /// (0 when none were attacked).
    pub fn fp_rate(&self) -> f64 {
        ratio(self.fp_succeeded, self.fp_attacked)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Success counts from distances before and after an attack, aligned by pair id.
pub fn success_rates(
    before: &[DistanceRecord],
    after: &[DistanceRecord],
    tau: f64,
) -> Result<AttackRates> {
    if before.len() != after.len() {
        return Err(Error::Contract(format!(
            "{} records before the attack but {} after",
            before.len(),
            after.len()
        )));
    }
    let mut rates = AttackRates::default();
    for (b, a) in before.iter().zip(after) {
        if b.pair_id != a.pair_id || b.label != a.label {
            return Err(Error::Contract(format!(
                "records misaligned: {} ({}) vs {} ({})",
                b.pair_id,
                b.label.as_str(),
                a.pair_id,
                a.label.as_str()
            )));
        }
        match a.label {
            Label::Similar => {
                rates.tn_attacked += 1;
                rates.tn_succeeded += usize::from(a.distance > tau);
            }
            Label::Dissimilar => {
                rates.fp_attacked += 1;
                rates.fp_succeeded += usize::from(a.distance <= tau);
            }
        }
    }
    Ok(rates)
}

/// Writes `pair_id,label,distance` rows with a header.
pub fn write_records<W: Write>(out: W, records: &[DistanceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["pair_id", "label", "distance"]).map_err(csv_err)?;
    for r in records {
        w.write_record([r.pair_id.as_str(), r.label.as_str(), &r.distance.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<DistanceRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let bad = || Error::Format(format!("bad distance record {row:?}"));
        if row.len() != 3 {
            return Err(bad());
        }
        out.push(DistanceRecord {
            pair_id: row[0].to_string(),
            label: Label::parse(&row[1]).ok_or_else(bad)?,
            distance: row[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

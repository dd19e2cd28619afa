//! Sensing accuracy, probability of detection and probability of false alarm.
//!
//! Accuracy is counted per (sample, band) pair. Rates whose conditioning set
//! is empty are reported as `None` and written as `null`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::collab::Scheme;
use crate::error::{Error, Result};

fn check(decisions: &[u8], labels: &[u8]) -> Result<()> {
    if decisions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} decisions vs {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    if decisions.is_empty() {
        return Err(Error::InvalidParameter("no decisions to evaluate".into()));
    }
    Ok(())
}

/// Counts of a binary detector against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl Confusion {
    pub fn from_decisions(decisions: &[u8], labels: &[u8]) -> Result<Self> {
        check(decisions, labels)?;
        let mut c = Confusion::default();
        c.add(decisions, labels, None);
        Ok(c)
    }

    /// Accumulates pairs, optionally restricted to bands where `mask != 0`
    /// (`mask` repeats every `mask.len()` entries).
    pub fn add(&mut self, decisions: &[u8], labels: &[u8], mask: Option<&[u8]>) {
        for (i, (&d, &y)) in decisions.iter().zip(labels).enumerate() {
            if let Some(m) = mask {
                if m[i % m.len()] == 0 {
                    continue;
                }
            }
            match (d != 0, y != 0) {
                (true, true) => self.true_pos += 1,
                (true, false) => self.false_pos += 1,
                (false, false) => self.true_neg += 1,
                (false, true) => self.false_neg += 1,
            }
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn positives(&self) -> u64 {
        self.true_pos + self.false_neg
    }

    pub fn negatives(&self) -> u64 {
        self.true_neg + self.false_pos
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total() > 0).then(|| (self.true_pos + self.true_neg) as f64 / self.total() as f64)
    }

    pub fn pd(&self) -> Option<f64> {
        (self.positives() > 0).then(|| self.true_pos as f64 / self.positives() as f64)
    }

    pub fn pfa(&self) -> Option<f64> {
        (self.negatives() > 0).then(|| self.false_pos as f64 / self.negatives() as f64)
    }
}

/// Fraction of pairs where the decision equals the label.
pub fn accuracy(decisions: &[u8], labels: &[u8]) -> Result<f64> {
    Ok(Confusion::from_decisions(decisions, labels)?
        .accuracy()
        .expect("non-empty input"))
}

/// `P(decision = 1 | label = 1)`; `None` without busy entries.
pub fn pd(decisions: &[u8], labels: &[u8]) -> Result<Option<f64>> {
    Ok(Confusion::from_decisions(decisions, labels)?.pd())
}

/// `P(decision = 1 | label = 0)`; `None` without idle entries.
pub fn pfa(decisions: &[u8], labels: &[u8]) -> Result<Option<f64>> {
    Ok(Confusion::from_decisions(decisions, labels)?.pfa())
}

/// Test-set evaluation of one run after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scheme: Scheme,
    pub irs: bool,
    pub snr_db: f64,
    pub seed: u64,
    pub round: usize,
    pub accuracy: f64,
    pub pd: Option<f64>,
    pub pfa: Option<f64>,
    pub mean_loss: f64,
    pub bytes_exchanged: u64,
}

/// Seed-averaged metrics for one (scheme, IRS, SNR, round) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub scheme: Scheme,
    #[serde(skip)]
    pub irs: bool,
    pub snr_db: f64,
    pub round: usize,
    pub seed_count: usize,
    pub accuracy: f64,
    pub pd: Option<f64>,
    pub pfa: Option<f64>,
    pub mean_loss: f64,
    pub bytes_exchanged: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    scheme: Scheme,
    irs: bool,
    snr: OrdF64,
    round: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Order-independent mean (values are sorted before summing).
fn mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| mean(&mut v))
}

/// Means over seeds within each (scheme, IRS, SNR, round) group, sorted by
/// that key. Undefined rates are skipped; a group with none stays `None`.
pub fn aggregate(evals: &[Evaluation]) -> Vec<MetricsRecord> {
    let mut groups: BTreeMap<GroupKey, Vec<&Evaluation>> = BTreeMap::new();
    for e in evals {
        let key = GroupKey {
            scheme: e.scheme,
            irs: e.irs,
            snr: OrdF64(e.snr_db),
            round: e.round,
        };
        groups.entry(key).or_default().push(e);
    }
    groups
        .into_iter()
        .map(|(key, members)| {
            let mut seeds: Vec<u64> = members.iter().map(|e| e.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let pick = |f: fn(&Evaluation) -> f64| mean(&mut members.iter().map(|e| f(e)).collect::<Vec<_>>());
            let bytes: Vec<u64> = members.iter().map(|e| e.bytes_exchanged).collect();
            MetricsRecord {
                scheme: key.scheme,
                irs: key.irs,
                snr_db: key.snr.0,
                round: key.round,
                seed_count: seeds.len(),
                accuracy: pick(|e| e.accuracy),
                pd: mean_defined(&members.iter().map(|e| e.pd).collect::<Vec<_>>()),
                pfa: mean_defined(&members.iter().map(|e| e.pfa).collect::<Vec<_>>()),
                mean_loss: pick(|e| e.mean_loss),
                bytes_exchanged: bytes.iter().sum::<u64>() / bytes.len() as u64,
            }
        })
        .collect()
}

pub const CSV_COLUMNS: [&str; 9] = [
    "scheme",
    "snr_db",
    "round",
    "seed_count",
    "accuracy",
    "pd",
    "pfa",
    "mean_loss",
    "bytes_exchanged",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| x.to_string())
}

/// Writes records with a header row, `null` for undefined rates.
pub fn write_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record([
            r.scheme.as_str().to_string(),
            r.snr_db.to_string(),
            r.round.to_string(),
            r.seed_count.to_string(),
            r.accuracy.to_string(),
            fmt_opt(r.pd),
            fmt_opt(r.pfa),
            r.mean_loss.to_string(),
            r.bytes_exchanged.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv stream>", e))?;
    Ok(())
}

/// Writes `records` to `path` through a temporary file and a rename.
pub fn write_csv_file(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(&mut buf, records)?;
    crate::experiment::write_atomic(path, &buf)
}

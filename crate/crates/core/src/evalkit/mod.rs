//! Voxel-wise evaluation: binarization, confusion counts, overlap metrics,
//! the CSV report format, and the label-sparsity sweep.

mod sweep;

pub use sweep::{run_sweep, ConditionFailure, SweepOutcome, TrainingRecord};

use crate::error::{Error, Result};
use crate::volgrid::{Label, LabelVolume, ProbVolume, Shape3};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

/// Foreground mask in (Z, Y, X) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub shape: Shape3,
    pub data: Vec<bool>,
}

/// `p >= thr` is foreground.
pub fn binarize(p: &ProbVolume, thr: f64) -> Result<BinaryMask> {
    if !(thr > 0.0 && thr < 1.0) {
        return Err(Error::Invalid(format!("threshold must be in (0, 1), got {thr}")));
    }
    Ok(BinaryMask { shape: p.shape(), data: p.probs().iter().map(|&v| v as f64 >= thr).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Counts against a fully annotated ground truth.
pub fn confusion(pred: &BinaryMask, gt: &LabelVolume) -> Result<ConfusionCounts> {
    gt.check_aligned(pred.shape)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(gt.labels()) {
        match (p, g) {
            (true, Label::Foreground) => c.tp += 1,
            (true, Label::Background) => c.fp += 1,
            (false, Label::Foreground) => c.fn_ += 1,
            (false, Label::Background) => c.tn += 1,
            (_, Label::Unlabeled) => {
                return Err(Error::Invalid("ground truth for evaluation contains unlabeled voxels".into()));
            }
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2tp / (2tp + fp + fn)`, 0 when nothing is predicted or present.
pub fn dice(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `tp / (tp + fp)`, 0 when nothing is predicted.
pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

/// `tp / (tp + fn)`, 0 when the ground truth has no foreground.
pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// Names of the metrics whose denominator was zero.
pub fn degenerate_flags(c: &ConfusionCounts) -> Vec<String> {
    let mut f = Vec::new();
    if 2 * c.tp + c.fp + c.fn_ == 0 {
        f.push("dice_undefined".to_string());
    }
    if c.tp + c.fp == 0 {
        f.push("precision_undefined".to_string());
    }
    if c.tp + c.fn_ == 0 {
        f.push("recall_undefined".to_string());
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Seg2d,
    Seg3dSparse,
    Seg3dPseudo,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Seg2d, Scheme::Seg3dSparse, Scheme::Seg3dPseudo];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Seg2d => "seg2d",
            Scheme::Seg3dSparse => "seg3d_sparse",
            Scheme::Seg3dPseudo => "seg3d_pseudo",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| Error::Format(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scheme: Scheme,
    pub labeled_fraction: f64,
    /// Pseudo-label weight; absent for the 2D model.
    pub alpha: Option<f64>,
    pub seed: u64,
    pub counts: ConfusionCounts,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub degenerate_flags: Vec<String>,
}

impl MetricsReport {
    pub fn new(scheme: Scheme, labeled_fraction: f64, alpha: Option<f64>, seed: u64, counts: ConfusionCounts) -> Self {
        MetricsReport {
            scheme,
            labeled_fraction,
            alpha,
            seed,
            counts,
            dice: dice(&counts),
            precision: precision(&counts),
            recall: recall(&counts),
            degenerate_flags: degenerate_flags(&counts),
        }
    }
}

pub const CSV_HEADER: [&str; 12] = [
    "scheme",
    "labeled_fraction",
    "alpha",
    "seed",
    "tp",
    "fp",
    "fn",
    "tn",
    "dice",
    "precision",
    "recall",
    "degenerate_flags",
];

/// Six significant digits in the style of C's `%g`.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..6).contains(&exp) {
        trim(format!("{:.*}", (5 - exp) as usize, x))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa.to_string()), exp.abs())
    }
}

pub fn write_reports_csv<W: Write>(w: W, reports: &[MetricsReport]) -> Result<()> {
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(CSV_HEADER).map_err(err)?;
    for r in reports {
        let flags = if r.degenerate_flags.is_empty() { "none".to_string() } else { r.degenerate_flags.join(";") };
        out.write_record([
            r.scheme.as_str().to_string(),
            fmt_sig6(r.labeled_fraction),
            r.alpha.map(fmt_sig6).unwrap_or_default(),
            r.seed.to_string(),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.fn_.to_string(),
            r.counts.tn.to_string(),
            fmt_sig6(r.dice),
            fmt_sig6(r.precision),
            fmt_sig6(r.recall),
            flags,
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| Error::Format(format!("csv: {e}")))
}

pub fn reports_to_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, reports)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_reports_csv<R: Read>(r: R) -> Result<Vec<MetricsReport>> {
    let mut rd = csv::ReaderBuilder::new().from_reader(r);
    let header = rd.headers().map_err(|e| Error::Format(format!("csv: {e}")))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Format(format!("unexpected csv header {:?}", header)));
    }
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("csv: {e}")))?;
        let bad = |what: &str| Error::Format(format!("csv row {}: bad {what}", line + 2));
        let f = |i: usize, what: &str| rec[i].parse::<f64>().map_err(|_| bad(what));
        let u = |i: usize, what: &str| rec[i].parse::<u64>().map_err(|_| bad(what));
        let alpha = if rec[2].is_empty() { None } else { Some(f(2, "alpha")?) };
        let flags = match &rec[11] {
            "none" => Vec::new(),
            s => s.split(';').map(str::to_string).collect(),
        };
        out.push(MetricsReport {
            scheme: rec[0].parse()?,
            labeled_fraction: f(1, "labeled_fraction")?,
            alpha,
            seed: u(3, "seed")?,
            counts: ConfusionCounts { tp: u(4, "tp")?, fp: u(5, "fp")?, fn_: u(6, "fn")?, tn: u(7, "tn")? },
            dice: f(8, "dice")?,
            precision: f(9, "precision")?,
            recall: f(10, "recall")?,
            degenerate_flags: flags,
        });
    }
    Ok(out)
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Per-seed medians of one (scheme, α, labeled fraction) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scheme: Scheme,
    pub alpha: Option<f64>,
    pub labeled_fraction: f64,
    pub seeds: usize,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Groups reports by scheme, α and labeled fraction, in that sort order.
pub fn summarize(reports: &[MetricsReport]) -> Vec<SummaryRow> {
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    let key = |r: &MetricsReport| (r.scheme, r.alpha.unwrap_or(-1.0), r.labeled_fraction);
    sorted.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
    });
    let mut rows = Vec::new();
    for group in sorted.chunk_by(|a, b| key(a) == key(b)) {
        let med = |f: fn(&MetricsReport) -> f64| median(&group.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap();
        rows.push(SummaryRow {
            scheme: group[0].scheme,
            alpha: group[0].alpha,
            labeled_fraction: group[0].labeled_fraction,
            seeds: group.len(),
            dice: med(|r| r.dice),
            precision: med(|r| r.precision),
            recall: med(|r| r.recall),
        });
    }
    rows
}

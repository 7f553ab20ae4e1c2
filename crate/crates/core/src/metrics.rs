//! Confusion matrices, weighted precision/recall/F1, and the SemEval F1
//! (mean of the FAVOR and AGAINST one-vs-rest F1).
//!
//! Scores are computed as exact rationals and converted to `f64` last.
//! A class whose denominator is zero scores 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::Serialize;

use crate::corpus::{Stance, StanceTarget};
use crate::error::{MeltError, Result};
use crate::stance::Prediction;

/// Rows are gold labels, columns predictions, both in against/none/favor order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

pub fn confusion(gold: &[Stance], pred: &[Stance]) -> Result<ConfusionMatrix> {
    if gold.len() != pred.len() {
        return Err(MeltError::Shape {
            op: "confusion",
            lhs: vec![gold.len()],
            rhs: vec![pred.len()],
        });
    }
    if gold.is_empty() {
        return Err(MeltError::Empty("confusion"));
    }
    let mut cm = ConfusionMatrix::default();
    for (g, p) in gold.iter().zip(pred) {
        cm.counts[g.index()][p.index()] += 1;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> BigRational {
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("finite ratio")
}

/// Exact precision, recall and F1 of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactScores {
    pub precision: BigRational,
    pub recall: BigRational,
    pub f1: BigRational,
}

impl ExactScores {
    pub fn to_f64(&self) -> Scores {
        Scores {
            precision: to_f64(&self.precision),
            recall: to_f64(&self.recall),
            f1: to_f64(&self.f1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, c: Stance) -> u64 {
        self.counts[c.index()].iter().sum()
    }

    pub fn predicted(&self, c: Stance) -> u64 {
        self.counts.iter().map(|r| r[c.index()]).sum()
    }

    pub fn tp(&self, c: Stance) -> u64 {
        self.counts[c.index()][c.index()]
    }

    /// `F1 = 2tp / (2tp + fp + fn)`, which equals `2PR/(P+R)` whenever
    /// both are defined and is 0 when `tp = 0`.
    pub fn class_exact(&self, c: Stance) -> ExactScores {
        let tp = self.tp(c);
        let fp = self.predicted(c) - tp;
        let fn_ = self.support(c) - tp;
        ExactScores {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }

    /// Gold-frequency-weighted average of per-class scores.
    pub fn weighted_exact(&self) -> ExactScores {
        let n = self.total();
        let mut acc = ExactScores {
            precision: BigRational::zero(),
            recall: BigRational::zero(),
            f1: BigRational::zero(),
        };
        for c in Stance::ALL {
            let w = ratio(self.support(c), n);
            let s = self.class_exact(c);
            acc.precision += &w * s.precision;
            acc.recall += &w * s.recall;
            acc.f1 += &w * s.f1;
        }
        acc
    }

    pub fn semeval_exact(&self) -> BigRational {
        (self.class_exact(Stance::Favor).f1 + self.class_exact(Stance::Against).f1) / BigInt::from(2)
    }

    pub fn weighted_scores(&self) -> Scores {
        self.weighted_exact().to_f64()
    }

    pub fn semeval_f1(&self) -> f64 {
        to_f64(&self.semeval_exact())
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            n: self.total(),
            per_class: Stance::ALL.map(|c| self.class_exact(c).to_f64()),
            weighted: self.weighted_scores(),
            semeval_f1: self.semeval_f1(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: u64,
    /// Against, none, favor.
    pub per_class: [Scores; 3],
    pub weighted: Scores,
    pub semeval_f1: f64,
}

pub fn report(preds: &[Prediction]) -> Result<MetricsReport> {
    let gold: Vec<Stance> = preds.iter().map(|p| p.gold).collect();
    let pred: Vec<Stance> = preds.iter().map(|p| p.pred).collect();
    Ok(confusion(&gold, &pred)?.report())
}

/// Per-target metrics plus two aggregates: the unweighted mean of the
/// per-target scores and the scores of all examples pooled.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetTable {
    pub rows: Vec<(StanceTarget, MetricsReport)>,
    pub mean: Scores,
    pub mean_semeval: f64,
    pub pooled: MetricsReport,
}

pub fn per_target_report(preds: &[Prediction]) -> Result<TargetTable> {
    let mut by: BTreeMap<StanceTarget, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        by.entry(p.target).or_default().push(p.clone());
    }
    let rows = by
        .into_iter()
        .map(|(t, ps)| Ok((t, report(&ps)?)))
        .collect::<Result<Vec<_>>>()?;
    let k = rows.len() as f64;
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| rows.iter().map(|(_, r)| f(r)).sum::<f64>() / k;
    Ok(TargetTable {
        mean: Scores {
            precision: avg(&|r| r.weighted.precision),
            recall: avg(&|r| r.weighted.recall),
            f1: avg(&|r| r.weighted.f1),
        },
        mean_semeval: avg(&|r| r.semeval_f1),
        pooled: report(preds)?,
        rows,
    })
}

impl TargetTable {
    fn lines(&self, pooled: bool) -> Vec<[String; 6]> {
        let f = |x: f64| format!("{x:.4}");
        let mut out: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|(t, r)| {
                [
                    t.as_str().to_string(),
                    r.n.to_string(),
                    f(r.weighted.precision),
                    f(r.weighted.recall),
                    f(r.weighted.f1),
                    f(r.semeval_f1),
                ]
            })
            .collect();
        out.push([
            "All(Avg)".into(),
            self.pooled.n.to_string(),
            f(self.mean.precision),
            f(self.mean.recall),
            f(self.mean.f1),
            f(self.mean_semeval),
        ]);
        if pooled {
            let p = &self.pooled;
            out.push([
                "All(Pooled)".into(),
                p.n.to_string(),
                f(p.weighted.precision),
                f(p.weighted.recall),
                f(p.weighted.f1),
                f(p.semeval_f1),
            ]);
        }
        out
    }

    const HEADER: [&'static str; 6] = ["target", "n", "weighted_p", "weighted_r", "weighted_f1", "semeval_f1"];

    pub fn to_csv(&self, pooled: bool) -> String {
        let mut s = Self::HEADER.join(",");
        s.push('\n');
        for l in self.lines(pooled) {
            s.push_str(&l.join(","));
            s.push('\n');
        }
        s
    }

    /// Column-aligned plain text.
    pub fn to_text(&self, pooled: bool) -> String {
        let lines = self.lines(pooled);
        let mut width = Self::HEADER.map(str::len);
        for l in &lines {
            for (w, c) in width.iter_mut().zip(l) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        let header = Self::HEADER.map(String::from);
        for l in std::iter::once(&header).chain(&lines) {
            for (i, (c, w)) in l.iter().zip(width).enumerate() {
                if i == 0 {
                    let _ = write!(s, "{c:<w$}");
                } else {
                    let _ = write!(s, "  {c:>w$}");
                }
            }
            s.push('\n');
        }
        s
    }
}

//! Classification and ranking metrics: accuracy, macro F1 and
//! precision-recall curves with step-interpolated average precision.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// Accuracy and macro-averaged F1 over `(predicted, true)` pairs.
///
/// Per-class F1 is `2PR / (P + R)`, taken as 0 when `P + R = 0`; a class
/// with no predictions has precision 0.
pub fn accuracy_f1(predictions: &[(usize, usize)], num_classes: usize) -> Result<(f64, f64)> {
    if predictions.is_empty() {
        return Err(Error::Config("no predictions to score".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    let mut actual = vec![0usize; num_classes];
    for &(p, t) in predictions {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Index(format!("label pair ({p}, {t}) outside {num_classes} classes")));
        }
        predicted[p] += 1;
        actual[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let accuracy = correct as f64 / predictions.len() as f64;
    let f1_sum: f64 = (0..num_classes)
        .map(|c| {
            let precision = if predicted[c] == 0 { 0.0 } else { tp[c] as f64 / predicted[c] as f64 };
            let recall = if actual[c] == 0 { 0.0 } else { tp[c] as f64 / actual[c] as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .sum();
    Ok((accuracy, f1_sum / num_classes as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    /// One point per distinct score, thresholds strictly decreasing.
    pub points: Vec<PrPoint>,
    pub average_precision: f64,
    pub positives: usize,
}

/// Sweeps a threshold down through every distinct score; items with equal
/// scores enter the positive set together.
///
/// Average precision is `Σ (R_i − R_{i−1}) P_i` with `R_0 = 0`.
pub fn pr_curve(scored: &[(f64, bool)]) -> Result<PrCurve> {
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let positives = scored.iter().filter(|(_, y)| *y).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("precision-recall needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    // Accumulate ΔTP · TP / (TP + FP) and divide by P once at the end,
    // exactly while the running fraction fits in u128.
    let mut ap_sum = 0.0;
    let mut ap_exact = Some((0u128, 1u128));
    let mut i = 0;
    while i < order.len() {
        let threshold = scored[order[i]].0;
        let tp_before = tp;
        while i < order.len() && scored[order[i]].0 == threshold {
            if scored[order[i]].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        ap_sum += (tp - tp_before) as f64 * tp as f64 / (tp + fp) as f64;
        if tp > tp_before {
            ap_exact = ap_exact.and_then(|acc| add_fraction(acc, ((tp - tp_before) * tp) as u128, (tp + fp) as u128));
        }
        points.push(PrPoint {
            threshold,
            precision,
            recall: tp as f64 / positives as f64,
            true_positives: tp,
            false_positives: fp,
        });
    }
    Ok(PrCurve {
        points,
        average_precision: match ap_exact.and_then(|(n, d)| Some((n, d.checked_mul(positives as u128)?))) {
            Some((n, d)) if n < 1 << 53 && d < 1 << 53 => n as f64 / d as f64,
            _ => ap_sum / positives as f64,
        },
        positives,
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `a/b + c/d` in lowest terms, `None` on overflow.
fn add_fraction((a, b): (u128, u128), c: u128, d: u128) -> Option<(u128, u128)> {
    let g = gcd(b, d);
    let den = (b / g).checked_mul(d)?;
    let num = a.checked_mul(d / g)?.checked_add(c.checked_mul(b / g)?)?;
    let r = gcd(num, den);
    Some((num / r, den / r))
}

impl PrCurve {
    /// `threshold,precision,recall` rows plus a trailing AP comment.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall);
        }
        let _ = writeln!(out, "# average_precision={}", self.average_precision);
        out
    }

    /// Minimal stand-alone SVG of the curve, recall on x, precision on y.
    pub fn to_svg(&self, title: &str) -> String {
        const SIZE: f64 = 400.0;
        const MARGIN: f64 = 40.0;
        let x = |r: f64| MARGIN + r * SIZE;
        let y = |p: f64| MARGIN + (1.0 - p) * SIZE;
        let mut path = format!("M {:.2} {:.2}", x(0.0), y(self.points.first().map_or(1.0, |p| p.precision)));
        for p in &self.points {
            let _ = write!(path, " L {:.2} {:.2}", x(p.recall), y(p.precision));
        }
        let side = SIZE + 2.0 * MARGIN;
        format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{side}\">\n",
                "<rect x=\"{m}\" y=\"{m}\" width=\"{s}\" height=\"{s}\" fill=\"none\" stroke=\"#888\"/>\n",
                "<path d=\"{path}\" fill=\"none\" stroke=\"#1a6\" stroke-width=\"2\"/>\n",
                "<text x=\"{m}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title} (AP={ap:.4})</text>\n",
                "<text x=\"{mid}\" y=\"{bottom}\" font-family=\"sans-serif\" font-size=\"12\">recall</text>\n",
                "<text x=\"4\" y=\"{mid}\" font-family=\"sans-serif\" font-size=\"12\">precision</text>\n",
                "</svg>\n"
            ),
            side = side,
            m = MARGIN,
            s = SIZE,
            path = path,
            title = xml_escape(title),
            ap = self.average_precision,
            mid = side / 2.0,
            bottom = side - 8.0,
        )
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

//! Equal Error Rate, accuracy, and the cross-method report table.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-sample detection scores: probability of the "real" class, paired with
/// ground truth. Score orientation matters when importing scores from
/// elsewhere; high must mean real.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    real: Vec<bool>,
}

/// How the equal-error operating point is located.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EerMode {
    /// Sweep thresholds over the observed scores and average FAR and FRR at
    /// the crossing (the first minimizer of their gap).
    ThresholdSweep,
    /// Intersect the ROC convex hull with the FAR = FRR diagonal. On
    /// balanced sets this never exceeds the sweep value; it differs when the
    /// crossing sits in a concavity of the empirical curve.
    RocConvexHull,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, real: Vec<bool>) -> Result<ScoreSet> {
        if scores.len() != real.len() {
            return Err(Error::dimension(format!(
                "{} scores with {} labels",
                scores.len(),
                real.len()
            )));
        }
        if let Some(&bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::domain(format!("score {bad} outside [0, 1]")));
        }
        Ok(ScoreSet { scores, real })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn real_flags(&self) -> &[bool] {
        &self.real
    }

    fn class_counts(&self) -> (usize, usize) {
        let real = self.real.iter().filter(|&&r| r).count();
        (self.len() - real, real)
    }

    /// Equal Error Rate via the default threshold sweep.
    pub fn eer(&self) -> Result<f64> {
        Ok(self.eer_with_threshold()?.0)
    }

    pub fn eer_mode(&self, mode: EerMode) -> Result<f64> {
        match mode {
            EerMode::ThresholdSweep => self.eer(),
            EerMode::RocConvexHull => self.eer_convex_hull(),
        }
    }

    /// The sweep EER together with the threshold attaining it. Candidate
    /// thresholds are the sorted distinct scores plus an "accept nothing"
    /// sentinel; at each, FAR is the fraction of fake samples scoring at or
    /// above it and FRR the fraction of real samples scoring below it. The
    /// winner minimizes |FAR - FRR|, breaking ties by the smaller mean of
    /// the two rates and then by the lower threshold; the EER is that mean.
    /// The mean tie-break keeps the value symmetric under swapping classes
    /// and reversing scores, which a pure first-crossing rule is not.
    pub fn eer_with_threshold(&self) -> Result<(f64, f64)> {
        let (ops, n_fake, n_real) = self.operating_points()?;
        let mut best: Option<(f64, f64, f64)> = None;
        for &(tau, fake_below, real_below) in &ops {
            let far = (n_fake - fake_below) as f64 / n_fake as f64;
            let frr = real_below as f64 / n_real as f64;
            let gap = (far - frr).abs();
            let mean = (far + frr) / 2.0;
            if best.map_or(true, |(g, m, _)| gap < g || (gap == g && mean < m)) {
                best = Some((gap, mean, tau));
            }
        }
        let (_, eer, tau) = best.expect("operating points are never empty");
        Ok((eer, tau))
    }

    fn eer_convex_hull(&self) -> Result<f64> {
        let (ops, n_fake, n_real) = self.operating_points()?;
        let mut points: Vec<(f64, f64)> = ops
            .iter()
            .map(|&(_, fake_below, real_below)| {
                let far = (n_fake - fake_below) as f64 / n_fake as f64;
                let tpr = 1.0 - real_below as f64 / n_real as f64;
                (far, tpr)
            })
            .collect();
        points.push((0.0, 0.0));
        points.push((1.0, 1.0));
        points.sort_by(|a, b| a.partial_cmp(b).expect("rates are finite"));
        points.dedup();
        // Upper hull, left to right: drop any point that turns the chain
        // counter-clockwise or sits on a segment.
        let mut hull: Vec<(f64, f64)> = Vec::with_capacity(points.len());
        for p in points {
            while hull.len() >= 2 {
                let o = hull[hull.len() - 2];
                let a = hull[hull.len() - 1];
                let cross = (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0);
                if cross >= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        // Walk the hull until FAR + TPR crosses 1 (the FAR = FRR diagonal)
        // and interpolate inside that segment. The crossing's abscissa is
        // the hull EER.
        for pair in hull.windows(2) {
            let (ax, ay) = pair[0];
            let (bx, by) = pair[1];
            if bx + by >= 1.0 {
                let denom = (bx - ax) + (by - ay);
                if denom <= 0.0 {
                    return Ok(ax);
                }
                let t = ((1.0 - ax - ay) / denom).clamp(0.0, 1.0);
                return Ok(ax + t * (bx - ax));
            }
        }
        Ok(1.0)
    }

    /// Sorted candidate thresholds with counts of samples scoring strictly
    /// below each; the final sentinel rejects everything.
    fn operating_points(&self) -> Result<(Vec<(f64, usize, usize)>, usize, usize)> {
        let (n_fake, n_real) = self.class_counts();
        if n_fake == 0 || n_real == 0 {
            return Err(Error::domain(
                "equal error rate needs both real and fake samples",
            ));
        }
        let mut sorted: Vec<(f64, bool)> = self
            .scores
            .iter()
            .copied()
            .zip(self.real.iter().copied())
            .collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut candidates: Vec<f64> = sorted.iter().map(|&(s, _)| s).collect();
        candidates.dedup();
        candidates.push(f64::INFINITY);
        let mut ops = Vec::with_capacity(candidates.len());
        let (mut i, mut fake_below, mut real_below) = (0, 0, 0);
        for tau in candidates {
            while i < sorted.len() && sorted[i].0 < tau {
                if sorted[i].1 {
                    real_below += 1;
                } else {
                    fake_below += 1;
                }
                i += 1;
            }
            ops.push((tau, fake_below, real_below));
        }
        Ok((ops, n_fake, n_real))
    }

    /// Fraction of samples classified correctly when "real" is predicted at
    /// or above the threshold.
    pub fn accuracy(&self, threshold: f64) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::domain("accuracy of an empty score set"));
        }
        let correct = self
            .scores
            .iter()
            .zip(&self.real)
            .filter(|&(&s, &r)| (s >= threshold) == r)
            .count();
        Ok(correct as f64 / self.len() as f64)
    }
}

/// Softmax mass assigned to the listed classes, one score per row of raw
/// logits. Stabilized with the log-sum-exp shift so saturated logits stay
/// inside [0, 1].
pub fn real_mass_scores(logits: &Matrix, real_classes: &[u8]) -> Result<Vec<f64>> {
    if real_classes.is_empty() {
        return Err(Error::domain("no classes marked as real"));
    }
    let mut classes: Vec<usize> = real_classes.iter().map(|&c| c as usize).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.last().copied().unwrap_or(0) >= logits.cols() {
        return Err(Error::dimension(format!(
            "real class out of range for {} logits",
            logits.cols()
        )));
    }
    let mut out = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        let num: f64 = classes.iter().map(|&c| (row[c] - max).exp()).sum();
        out.push((num / denom).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// One method's row in the cross-method table: a value per experience plus
/// the row average, all stored as fractions in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub values: Vec<f64>,
    pub average: f64,
}

/// The methods-by-experiences result table with its presentation formats.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

fn format_pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl SequenceReport {
    /// Builds the report from per-method value rows; the matrix must be
    /// rectangular and every value a fraction in [0, 1].
    pub fn summarize(columns: Vec<String>, rows: Vec<(String, Vec<f64>)>) -> Result<SequenceReport> {
        if columns.is_empty() {
            return Err(Error::dimension("a report needs at least one column"));
        }
        let mut out = Vec::with_capacity(rows.len());
        for (method, values) in rows {
            if values.len() != columns.len() {
                return Err(Error::dimension(format!(
                    "row {method} has {} values for {} columns",
                    values.len(),
                    columns.len()
                )));
            }
            if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::domain(format!("report value {bad} outside [0, 1]")));
            }
            let average = values.iter().sum::<f64>() / values.len() as f64;
            out.push(ReportRow {
                method,
                values,
                average,
            });
        }
        Ok(SequenceReport {
            columns,
            rows: out,
            seed: None,
            config_hash: None,
        })
    }

    /// Default column names for a task sequence: exp1..expN.
    pub fn experience_columns(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("exp{i}")).collect()
    }

    /// CSV form: header `method,exp1,...,expN,avg`, one row per method,
    /// values as percentages with two decimals.
    pub fn to_csv(&self) -> String {
        let mut text = String::from("method");
        for c in &self.columns {
            text.push(',');
            text.push_str(c);
        }
        text.push_str(",avg\n");
        for row in &self.rows {
            text.push_str(&row.method);
            for &v in &row.values {
                text.push(',');
                text.push_str(&format_pct(v));
            }
            text.push(',');
            text.push_str(&format_pct(row.average));
            text.push('\n');
        }
        text
    }

    /// Parses the CSV form back. The stored average is kept as written (so a
    /// parse and re-serialize is byte-identical) but must agree with the row
    /// mean to within the rounding the format allows.
    pub fn from_csv(text: &str) -> Result<SequenceReport> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::config("empty report"))?;
        let head: Vec<&str> = header.split(',').collect();
        if head.len() < 3 || head[0] != "method" || *head.last().unwrap() != "avg" {
            return Err(Error::config(format!("bad report header {header:?}")));
        }
        let columns: Vec<String> = head[1..head.len() - 1].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != head.len() {
                return Err(Error::dimension(format!(
                    "row {:?} has {} fields, header has {}",
                    fields[0],
                    fields.len(),
                    head.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                let pct: f64 = s
                    .parse()
                    .map_err(|_| Error::config(format!("bad report value {s:?}")))?;
                Ok(pct / 100.0)
            };
            let values: Vec<f64> = fields[1..fields.len() - 1]
                .iter()
                .map(|s| parse(s))
                .collect::<Result<_>>()?;
            let average = parse(fields[fields.len() - 1])?;
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            // Each cell and the average were rounded to 0.01 percent points.
            if (average - mean).abs() > 0.000_151 {
                return Err(Error::config(format!(
                    "stored average {} disagrees with row mean {}",
                    average, mean
                )));
            }
            rows.push(ReportRow {
                method: fields[0].to_string(),
                values,
                average,
            });
        }
        Ok(SequenceReport {
            columns,
            rows,
            seed: None,
            config_hash: None,
        })
    }

    /// Aligned text table for terminal reading, percentages with two
    /// decimals, plus a metadata footer when present.
    pub fn to_table(&self) -> String {
        let mut header: Vec<String> = Vec::with_capacity(self.columns.len() + 2);
        header.push("method".to_string());
        header.extend(self.columns.iter().cloned());
        header.push("avg".to_string());
        let mut body: Vec<Vec<String>> = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let mut cells = Vec::with_capacity(header.len());
            cells.push(row.method.clone());
            cells.extend(row.values.iter().map(|&v| format_pct(v)));
            cells.push(format_pct(row.average));
            body.push(cells);
        }
        let mut widths: Vec<usize> = header.iter().map(String::len).collect();
        for cells in &body {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.len());
            }
        }
        let render = |cells: &[String]| -> String {
            let mut line = String::new();
            for (i, (c, &w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    line.push_str("  ");
                }
                if i == 0 {
                    line.push_str(&format!("{c:<w$}"));
                } else {
                    line.push_str(&format!("{c:>w$}"));
                }
            }
            line.push('\n');
            line
        };
        let mut text = render(&header);
        for cells in &body {
            text.push_str(&render(cells));
        }
        if let Some(seed) = self.seed {
            text.push_str(&format!("seed: {seed}\n"));
        }
        if let Some(hash) = &self.config_hash {
            text.push_str(&format!("config: {hash}\n"));
        }
        text
    }
}

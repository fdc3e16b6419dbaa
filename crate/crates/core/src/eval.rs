//! Calibrated-stacking inference and GZSL / ZSL metrics.

use crate::error::{Error, Result};
use crate::model::{ClassSpace, Example, Model};
use crate::par::{self, Execution};

/// `argmax_c score_c − γ·1[c seen]`, lowest index on ties.
pub fn cs_predict(scores: &[f64], gamma: f64, seen_mask: &[bool]) -> usize {
    let adjusted = |c: usize| scores[c] - if seen_mask[c] { gamma } else { 0.0 };
    argmax_by(0..scores.len(), adjusted)
}

/// Argmax restricted to `classes`, lowest class id winning ties when the
/// ids are ascending.
pub fn restricted_argmax(scores: &[f64], classes: &[usize]) -> usize {
    argmax_by(classes.iter().copied(), |c| scores[c])
}

fn argmax_by(ids: impl Iterator<Item = usize>, f: impl Fn(usize) -> f64) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for c in ids {
        let v = f(c);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best.expect("non-empty class set").0
}

/// `2SU / (S + U)`, or 0 when either is 0.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s == 0.0 || u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Per-class top-1 accuracy in percent over the classes present in
/// `labels`, and its mean over those classes.
pub fn per_class_accuracy(labels: &[usize], predictions: &[usize], num_classes: usize) -> (f64, Vec<Option<f64>>) {
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        counts[y] += 1;
        if y == p {
            hits[y] += 1;
        }
    }
    let per: Vec<Option<f64>> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &n)| (n > 0).then(|| 100.0 * h as f64 / n as f64))
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (mean, per)
}

pub const REPORT_HEADER: &str = "gamma,acc,U,S,H,alpha_s,beta_s,alpha_u,beta_u";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub gamma: f64,
    /// ZSL accuracy: unseen samples, unseen classes only.
    pub acc: f64,
    pub unseen: f64,
    pub seen: f64,
    pub h: f64,
    /// GZSL accuracy per class id; `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    /// Mean / population variance of seen-class and unseen-class scores,
    /// computed per sample and averaged over all test samples.
    pub alpha_s: f64,
    pub beta_s: f64,
    pub alpha_u: f64,
    pub beta_u: f64,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.gamma, self.acc, self.unseen, self.seen, self.h, self.alpha_s, self.beta_s, self.alpha_u, self.beta_u
        )
    }
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Labelled score vectors over all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub labels: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
}

impl Scored {
    pub fn compute(model: &Model, space: &ClassSpace, examples: &[Example], exec: Execution) -> Result<Self> {
        let scores = par::map(exec, examples, |ex| model.predict(space, &ex.visual).map(|p| p.scores))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Scored {
            labels: examples.iter().map(|e| e.label).collect(),
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Scored seen and unseen test sets; γ-independent, so one scoring pass
/// serves a whole sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    seen_mask: Vec<bool>,
    seen_ids: Vec<usize>,
    unseen_ids: Vec<usize>,
    pub test_seen: Scored,
    pub test_unseen: Scored,
}

impl EvalSet {
    pub fn new(seen_mask: Vec<bool>, test_seen: Scored, test_unseen: Scored) -> Result<Self> {
        if test_seen.is_empty() {
            return Err(Error::Empty("seen test set"));
        }
        if test_unseen.is_empty() {
            return Err(Error::Empty("unseen test set"));
        }
        let k = seen_mask.len();
        for (set, want_seen) in [(&test_seen, true), (&test_unseen, false)] {
            for (&y, s) in set.labels.iter().zip(&set.scores) {
                if y >= k {
                    return Err(Error::UnknownLabel(y));
                }
                if seen_mask[y] != want_seen {
                    return Err(Error::Config(format!("class {y} is in the wrong test split")));
                }
                if s.len() != k {
                    return Err(Error::Shape { op: "evaluate", lhs: vec![s.len()], rhs: vec![k] });
                }
            }
        }
        let seen_ids = (0..k).filter(|&c| seen_mask[c]).collect();
        let unseen_ids = (0..k).filter(|&c| !seen_mask[c]).collect();
        Ok(EvalSet { seen_mask, seen_ids, unseen_ids, test_seen, test_unseen })
    }

    pub fn score(
        model: &Model,
        space: &ClassSpace,
        test_seen: &[Example],
        test_unseen: &[Example],
        exec: Execution,
    ) -> Result<Self> {
        EvalSet::new(
            space.seen_mask(),
            Scored::compute(model, space, test_seen, exec)?,
            Scored::compute(model, space, test_unseen, exec)?,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.seen_mask.len()
    }

    /// GZSL predictions for the seen and unseen test sets.
    pub fn predictions(&self, gamma: f64) -> (Vec<usize>, Vec<usize>) {
        let run = |s: &Scored| s.scores.iter().map(|v| cs_predict(v, gamma, &self.seen_mask)).collect();
        (run(&self.test_seen), run(&self.test_unseen))
    }

    /// Fraction of all test samples predicted as an unseen class.
    pub fn unseen_fraction(&self, gamma: f64) -> f64 {
        let (ps, pu) = self.predictions(gamma);
        let n = ps.len() + pu.len();
        ps.iter().chain(&pu).filter(|&&c| !self.seen_mask[c]).count() as f64 / n as f64
    }

    pub fn report(&self, gamma: f64) -> EvalReport {
        let k = self.num_classes();
        let (ps, pu) = self.predictions(gamma);
        let (s, per_s) = per_class_accuracy(&self.test_seen.labels, &ps, k);
        let (u, per_u) = per_class_accuracy(&self.test_unseen.labels, &pu, k);
        let per_class = per_s.into_iter().zip(per_u).map(|(a, b)| a.or(b)).collect();

        let zsl: Vec<usize> =
            self.test_unseen.scores.iter().map(|v| restricted_argmax(v, &self.unseen_ids)).collect();
        let (acc, _) = per_class_accuracy(&self.test_unseen.labels, &zsl, k);

        let mut m = [0.0; 4];
        let all = self.test_seen.scores.iter().chain(&self.test_unseen.scores);
        let n = (self.test_seen.len() + self.test_unseen.len()) as f64;
        for v in all {
            let (a_s, b_s) = moments(v, &self.seen_ids);
            let (a_u, b_u) = moments(v, &self.unseen_ids);
            for (acc, x) in m.iter_mut().zip([a_s, b_s, a_u, b_u]) {
                *acc += x / n;
            }
        }
        EvalReport {
            gamma,
            acc,
            unseen: u,
            seen: s,
            h: harmonic_mean(s, u),
            per_class,
            alpha_s: m[0],
            beta_s: m[1],
            alpha_u: m[2],
            beta_u: m[3],
        }
    }
}

fn moments(v: &[f64], idx: &[usize]) -> (f64, f64) {
    if idx.is_empty() {
        return (0.0, 0.0);
    }
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| v[i]).sum::<f64>() / n;
    let var = idx.iter().map(|&i| (v[i] - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

pub fn evaluate(
    model: &Model,
    space: &ClassSpace,
    test_seen: &[Example],
    test_unseen: &[Example],
    gamma: f64,
    exec: Execution,
) -> Result<EvalReport> {
    Ok(EvalSet::score(model, space, test_seen, test_unseen, exec)?.report(gamma))
}

/// `min, min + step, …` up to `max` inclusive (within half a step).
pub fn gamma_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(max >= min) || !min.is_finite() || !max.is_finite() {
        return Err(Error::Config(format!("invalid gamma grid {min}..{max} step {step}")));
    }
    let n = ((max - min) / step + 0.5).floor() as usize;
    Ok((0..=n).map(|i| min + i as f64 * step).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub reports: Vec<EvalReport>,
    /// Index of the first report with the largest H.
    pub best: usize,
}

impl Sweep {
    pub fn best_report(&self) -> &EvalReport {
        &self.reports[self.best]
    }
}

pub fn gamma_sweep(set: &EvalSet, grid: &[f64]) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::Empty("gamma grid"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("gamma grid must be sorted ascending".into()));
    }
    let reports: Vec<EvalReport> = grid.iter().map(|&g| set.report(g)).collect();
    let mut best = 0;
    for (i, r) in reports.iter().enumerate() {
        if r.h > reports[best].h {
            best = i;
        }
    }
    Ok(Sweep { reports, best })
}

/// Per-class-averaged accuracy (percent) of seen samples with the search
/// space restricted to seen classes.
pub fn seen_accuracy(model: &Model, space: &ClassSpace, examples: &[Example], exec: Execution) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("seen validation set"));
    }
    let scored = Scored::compute(model, space, examples, exec)?;
    let preds: Vec<usize> = scored.scores.iter().map(|v| restricted_argmax(v, space.seen_ids())).collect();
    Ok(per_class_accuracy(&scored.labels, &preds, space.num_classes()).0)
}

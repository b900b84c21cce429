//! Bag-level and instance-level evaluation: balanced accuracy, AUROC with
//! tie handling, adaptive (equal-mass) expected calibration error, the
//! attention-as-probability instance protocol with threshold sweep, Welch's
//! t-test over predictive uncertainty, and inducing-point label maps.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{mean, sample_variance, Mat};
use crate::model::{project_instances, MilModel};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Per-bag prediction summary: Monte Carlo class-probability samples, their
/// mean and standard deviation, and the post-activation attention means.
#[derive(Debug, Clone)]
pub struct PredictionRecord {
    pub bag_id: String,
    /// N_s x C probability samples.
    pub prob_samples: Mat,
    pub mean_probs: Vec<f64>,
    /// Per-class sample standard deviation across the probability samples.
    pub std_probs: Vec<f64>,
    /// argmax of mean_probs; ties resolve to the smallest index.
    pub predicted: usize,
    pub true_label: usize,
    /// Mean post-activation attention per instance.
    pub attention_mean: Vec<f64>,
}

/// Mean of per-class recalls. Every class in 0..n_classes must occur in
/// `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::invalid("balanced_accuracy: empty or mismatched input"));
    }
    let mut support = vec![0usize; n_classes];
    let mut hits = vec![0usize; n_classes];
    for (p, l) in preds.iter().zip(labels) {
        if *l >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: *l,
                n_classes,
            });
        }
        support[*l] += 1;
        if p == l {
            hits[*l] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        if support[c] == 0 {
            return Err(Error::invalid(format!(
                "balanced_accuracy: class {c} has no support"
            )));
        }
        total += hits[c] as f64 / support[c] as f64;
    }
    Ok(total / n_classes as f64)
}

/// Mann-Whitney AUROC: the probability that a random positive outscores a
/// random negative, ties counted one half. Computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid("auroc: empty or mismatched input"));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auroc: both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).unwrap());
    let mut rank = vec![0.0f64; scores.len()];
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average rank for the tie group, ranks are 1-based
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            rank[order[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = rank
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(r, _)| *r)
        .sum();
    let auc = (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64);
    Ok(auc)
}

/// Unweighted one-vs-rest mean AUROC over mean-probability columns.
pub fn multiclass_auroc(records: &[&PredictionRecord], n_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..n_classes {
        let scores: Vec<f64> = records.iter().map(|r| r.mean_probs[c]).collect();
        let labels: Vec<bool> = records.iter().map(|r| r.true_label == c).collect();
        total += auroc(&scores, &labels)?;
    }
    Ok(total / n_classes as f64)
}

/// Adaptive (equal-mass) expected calibration error. Confidence is the top
/// class probability; samples are sorted by confidence and split into
/// equal-mass bins, the remainder spread over the leading bins; the result
/// averages |accuracy - mean confidence| over the nonempty bins.
pub fn adaptive_ece(mean_probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> Result<f64> {
    if mean_probs.is_empty() || mean_probs.len() != labels.len() {
        return Err(Error::invalid("adaptive_ece: empty or mismatched input"));
    }
    if n_bins == 0 {
        return Err(Error::invalid("adaptive_ece: n_bins must be positive"));
    }
    let n = mean_probs.len();
    let mut conf = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    for (probs, label) in mean_probs.iter().zip(labels) {
        let mut arg = 0usize;
        for c in 1..probs.len() {
            if probs[c] > probs[arg] {
                arg = c;
            }
        }
        conf.push(probs[arg]);
        correct.push(arg == *label);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| conf[*a].partial_cmp(&conf[*b]).unwrap().then(a.cmp(b)));

    let base = n / n_bins;
    let rem = n % n_bins;
    let mut cursor = 0usize;
    let mut total = 0.0;
    let mut nonempty = 0usize;
    for b in 0..n_bins {
        let size = base + usize::from(b < rem);
        if size == 0 {
            continue;
        }
        let idx = &order[cursor..cursor + size];
        cursor += size;
        let acc = idx.iter().filter(|i| correct[**i]).count() as f64 / size as f64;
        let mc = idx.iter().map(|i| conf[*i]).sum::<f64>() / size as f64;
        total += (acc - mc).abs();
        nonempty += 1;
    }
    Ok(total / nonempty as f64)
}

// --- Student-t distribution via the regularized incomplete beta ----------

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const COEF: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, c) in COEF.iter().enumerate() {
        acc += c / (x + (i + 1) as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    // Lentz's algorithm.
    const TINY: f64 = 1e-300;
    const EPS: f64 = 3e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..400 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

fn incomplete_beta_direct(a: f64, b: f64, x: f64) -> f64 {
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    ln_front.exp() * beta_continued_fraction(a, b, x) / a
}

/// Regularized incomplete beta I_x(a, b). The continued fraction converges
/// fast for x below the crossover point; the symmetry I_x(a,b) =
/// 1 - I_{1-x}(b,a) covers the rest.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    if x < (a + 1.0) / (a + b + 2.0) {
        incomplete_beta_direct(a, b, x)
    } else {
        1.0 - incomplete_beta_direct(b, a, 1.0 - x)
    }
}

/// Two-sided p-value of a Student-t statistic with `dof` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    incomplete_beta(0.5 * dof, 0.5, x)
}

/// Welch's two-sample t-test (unequal variances).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WelchResult {
    /// (mean_a - mean_b) / sqrt(var_a/n_a + var_b/n_b).
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Welch-Satterthwaite degrees of freedom.
    pub dof: f64,
    /// Set when both group variances vanish (t undefined; p forced to 0
    /// unless the means coincide).
    pub zero_variance: bool,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(
            "welch_t_test: both groups need at least two members",
        ));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        // Degenerate zero-variance groups: |t| -> infinity when the means
        // differ, t = 0 when they coincide.
        let same = ma == mb;
        return Ok(WelchResult {
            t: if same {
                0.0
            } else {
                f64::INFINITY * (ma - mb).signum()
            },
            p: if same { 1.0 } else { 0.0 },
            dof: f64::NAN,
            zero_variance: true,
            n_a: a.len(),
            n_b: b.len(),
            mean_a: ma,
            mean_b: mb,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    Ok(WelchResult {
        t,
        p: student_t_two_sided_p(t, dof),
        dof,
        zero_variance: false,
        n_a: a.len(),
        n_b: b.len(),
        mean_a: ma,
        mean_b: mb,
    })
}

/// Welch separation of predictive uncertainty between misclassified and
/// correctly classified bags. The per-record scalar is std_probs at the
/// predicted class; group a is the misclassified set, so t > 0 means the
/// errors carry more uncertainty.
pub fn uncertainty_separation(records: &[PredictionRecord]) -> Result<WelchResult> {
    let mut incorrect = Vec::new();
    let mut correct = Vec::new();
    for r in records {
        let s = r.std_probs[r.predicted];
        if r.predicted == r.true_label {
            correct.push(s);
        } else {
            incorrect.push(s);
        }
    }
    welch_t_test(&incorrect, &correct)
}

/// Result of the instance-level attention evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceEval {
    pub auc: f64,
    pub best_acc: f64,
    pub best_threshold: f64,
    pub n_instances: usize,
    /// Bags whose attention was constant and mapped to all zeros.
    pub constant_bags: usize,
}

/// Min-max normalize per bag (constant rows map to zeros), pool instances
/// across bags, then compute AUROC and the best balanced accuracy over the
/// thresholds {0, 0.01, ..., 1}.
pub fn instance_eval(records: &[PredictionRecord], dataset: &Dataset) -> Result<InstanceEval> {
    let by_id: HashMap<&str, &crate::data::InstanceBag> =
        dataset.bags.iter().map(|b| (b.id.as_str(), b)).collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut constant_bags = 0usize;
    for rec in records {
        let bag = by_id.get(rec.bag_id.as_str()).ok_or_else(|| {
            Error::invalid(format!("instance_eval: unknown bag id {}", rec.bag_id))
        })?;
        let inst = bag.instance_labels.as_ref().ok_or_else(|| {
            Error::invalid(format!(
                "instance_eval: bag {} has no instance labels",
                rec.bag_id
            ))
        })?;
        if rec.attention_mean.len() != inst.len() {
            return Err(Error::DimensionMismatch {
                context: "instance_eval: attention length",
                expected: inst.len(),
                actual: rec.attention_mean.len(),
            });
        }
        let lo = rec.attention_mean.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rec
            .attention_mean
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let constant = hi == lo;
        if constant {
            constant_bags += 1;
        }
        for (a, l) in rec.attention_mean.iter().zip(inst) {
            let norm = if constant { 0.0 } else { (a - lo) / (hi - lo) };
            scores.push(norm);
            labels.push(*l > 0);
        }
    }
    if scores.is_empty() {
        return Err(Error::invalid("instance_eval: no instances"));
    }
    let auc = auroc(&scores, &labels)?;

    let mut best_acc = f64::NEG_INFINITY;
    let mut best_threshold = 0.0;
    for step in 0..=100 {
        let thr = step as f64 / 100.0;
        let preds: Vec<usize> = scores.iter().map(|s| usize::from(*s >= thr)).collect();
        let truth: Vec<usize> = labels.iter().map(|l| usize::from(*l)).collect();
        let acc = balanced_accuracy(&preds, &truth, 2)?;
        if acc > best_acc {
            best_acc = acc;
            best_threshold = thr;
        }
    }
    Ok(InstanceEval {
        auc,
        best_acc,
        best_threshold,
        n_instances: scores.len(),
        constant_bags,
    })
}

/// Assignment of every instance to its most cosine-similar inducing point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceAssignment {
    pub bag_index: usize,
    pub instance_index: usize,
    pub inducing: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone)]
pub struct InducingLabelMap {
    pub assignments: Vec<InstanceAssignment>,
    /// Per inducing point, the top-k most similar instances dataset-wide.
    pub top_instances: Vec<Vec<InstanceAssignment>>,
    /// Instances with zero-norm projections (similarity defined as 0).
    pub zero_norm_instances: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = crate::linalg::dot(a, a).sqrt();
    let nb = crate::linalg::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(crate::linalg::dot(a, b) / (na * nb))
}

/// Assign each projected instance to the inducing point with the highest
/// cosine similarity (ties to the lowest index) and collect each point's
/// top-k instances.
pub fn inducing_label_map(
    dataset: &Dataset,
    model: &MilModel,
    top_k: usize,
) -> Result<InducingLabelMap> {
    let z = &model.sgp.inducing;
    let m = z.rows();
    let mut assignments = Vec::new();
    let mut zero_norm = 0usize;
    for (bag_index, bag) in dataset.bags.iter().enumerate() {
        let projected = project_instances(&bag.features, model)?;
        for k in 0..projected.rows() {
            let row = projected.row(k);
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            let mut any_zero = false;
            for j in 0..m {
                let sim = match cosine(row, z.row(j)) {
                    Some(s) => s,
                    None => {
                        any_zero = true;
                        0.0
                    }
                };
                if sim > best_sim {
                    best_sim = sim;
                    best = j;
                }
            }
            if any_zero {
                zero_norm += 1;
            }
            assignments.push(InstanceAssignment {
                bag_index,
                instance_index: k,
                inducing: best,
                similarity: best_sim,
            });
        }
    }
    let mut top_instances = Vec::with_capacity(m);
    for j in 0..m {
        let mut sims: Vec<InstanceAssignment> = Vec::new();
        for (bag_index, bag) in dataset.bags.iter().enumerate() {
            let projected = project_instances(&bag.features, model)?;
            for k in 0..projected.rows() {
                let sim = cosine(projected.row(k), z.row(j)).unwrap_or(0.0);
                sims.push(InstanceAssignment {
                    bag_index,
                    instance_index: k,
                    inducing: j,
                    similarity: sim,
                });
            }
        }
        sims.sort_by(|a, b| {
            b.similarity
                .partial_cmp(&a.similarity)
                .unwrap()
                .then(a.bag_index.cmp(&b.bag_index))
                .then(a.instance_index.cmp(&b.instance_index))
        });
        sims.truncate(top_k);
        top_instances.push(sims);
    }
    Ok(InducingLabelMap {
        assignments,
        top_instances,
        zero_norm_instances: zero_norm,
    })
}

/// Flat metrics summary of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_bags: usize,
    pub class_support: Vec<usize>,
    pub balanced_acc: f64,
    pub auc: f64,
    pub ace: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_acc_best: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance_best_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub welch_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub welch_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub welch_dof: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub welch_zero_variance: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_std_correct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_std_incorrect: Option<f64>,
}

impl MetricsReport {
    /// Flat key=value rendering, one metric per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("n_bags", self.n_bags.to_string());
        push(
            "class_support",
            self.class_support
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        push("balanced_acc", format!("{:.6}", self.balanced_acc));
        push("auc", format!("{:.6}", self.auc));
        push("ace", format!("{:.6}", self.ace));
        if let Some(v) = self.instance_auc {
            push("instance_auc", format!("{v:.6}"));
        }
        if let Some(v) = self.instance_acc_best {
            push("instance_acc_best", format!("{v:.6}"));
        }
        if let Some(v) = self.instance_best_threshold {
            push("instance_best_threshold", format!("{v:.2}"));
        }
        if let Some(v) = self.welch_t {
            push("welch_t", format!("{v:.6}"));
        }
        if let Some(v) = self.welch_p {
            push("welch_p", format!("{v:.6e}"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Assemble the full report for a set of prediction records. Instance
/// metrics are included when every bag carries instance labels; the Welch
/// separation is included when both groups have at least two members.
pub fn compute_report(
    records: &[PredictionRecord],
    dataset: &Dataset,
    ece_bins: usize,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::invalid("compute_report: no prediction records"));
    }
    let n_classes = dataset.n_classes;
    let preds: Vec<usize> = records.iter().map(|r| r.predicted).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.true_label).collect();
    let balanced_acc = balanced_accuracy(&preds, &labels, n_classes)?;
    let refs: Vec<&PredictionRecord> = records.iter().collect();
    let auc = multiclass_auroc(&refs, n_classes)?;
    let mean_probs: Vec<Vec<f64>> = records.iter().map(|r| r.mean_probs.clone()).collect();
    let ace = adaptive_ece(&mean_probs, &labels, ece_bins)?;

    let mut class_support = vec![0usize; n_classes];
    for l in &labels {
        class_support[*l] += 1;
    }

    let instance = if dataset.bags.iter().all(|b| b.instance_labels.is_some()) {
        Some(instance_eval(records, dataset)?)
    } else {
        None
    };
    let welch = uncertainty_separation(records).ok();
    let (mean_std_correct, mean_std_incorrect) = match &welch {
        Some(w) => (Some(w.mean_b), Some(w.mean_a)),
        None => (None, None),
    };

    Ok(MetricsReport {
        n_bags: records.len(),
        class_support,
        balanced_acc,
        auc,
        ace,
        instance_auc: instance.as_ref().map(|i| i.auc),
        instance_acc_best: instance.as_ref().map(|i| i.best_acc),
        instance_best_threshold: instance.as_ref().map(|i| i.best_threshold),
        welch_t: welch.as_ref().map(|w| w.t).filter(|t| t.is_finite()),
        welch_p: welch.as_ref().map(|w| w.p),
        welch_dof: welch.as_ref().map(|w| w.dof).filter(|d| d.is_finite()),
        welch_zero_variance: welch.as_ref().map(|w| w.zero_variance),
        mean_std_correct,
        mean_std_incorrect,
    })
}

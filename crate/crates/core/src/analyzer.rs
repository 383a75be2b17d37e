//! Multinomial logistic regression, classification metrics and selective
//! feature addition.
//!
//! The classifier minimizes
//!
//! ```text
//! J(W, b) = sum_i -log softmax(W x_i + b)[y_i] + ||W||^2 / (2C)
//! ```
//!
//! over a `3 x n` coefficient matrix `W` and unpenalized intercepts `b`, using
//! L-BFGS from a zero start. Features are used as-is.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::SatisfactionLabel;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::memory::StrategyId;
use crate::retriever::FeatureMatrix;

pub const N_CLASSES: usize = 3;
pub const MODEL_FORMAT: &str = "praise-model/v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Inverse regularization strength.
    pub c: f64,
    pub max_iterations: usize,
    /// Stop once the gradient infinity-norm falls to this value.
    pub tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            c: 100.0,
            max_iterations: 500,
            tolerance: 1e-6,
        }
    }
}

/// Value and gradient of the penalized objective.
///
/// `params` holds `W` row-major (`3 * n` values, class-major) followed by the
/// three intercepts; the gradient uses the same layout.
pub fn penalized_objective(
    params: &[f64],
    x: ArrayView2<f64>,
    y: &[usize],
    c: f64,
) -> (f64, Vec<f64>) {
    let n = x.ncols();
    debug_assert_eq!(params.len(), N_CLASSES * (n + 1));
    let w =
        ArrayView2::from_shape((N_CLASSES, n), &params[..N_CLASSES * n]).expect("parameter layout");
    let b = &params[N_CLASSES * n..];

    let mut z = x.dot(&w.t());
    let mut loss = 0.0;
    for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
        for (l, v) in row.iter_mut().enumerate() {
            *v += b[l];
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_norm = max + sum.ln();
        loss += log_norm - row[y[i]];
        // row becomes p - onehot(y)
        for v in row.iter_mut() {
            *v = (*v - log_norm).exp();
        }
        row[y[i]] -= 1.0;
    }
    let penalty: f64 = w.iter().map(|v| v * v).sum::<f64>() / (2.0 * c);

    let grad_w = z.t().dot(&x) + &w.mapv(|v| v / c);
    let grad_b = z.sum_axis(Axis(0));
    let mut grad = grad_w.into_raw_vec_and_offset().0;
    grad.extend(grad_b.iter());
    (loss + penalty, grad)
}

struct Optimum {
    params: Vec<f64>,
    iterations: usize,
    converged: bool,
    gradient_norm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

const LBFGS_MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn lbfgs(
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    x0: Vec<f64>,
    max_iterations: usize,
    tolerance: f64,
) -> Optimum {
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(LBFGS_MEMORY);
    let mut iterations = 0;

    while iterations < max_iterations {
        if inf_norm(&g) <= tolerance {
            return Optimum {
                gradient_norm: inf_norm(&g),
                params: x,
                iterations,
                converged: true,
            };
        }

        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, yv, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(yv).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, yv, _)) => dot(s, yv) / dot(yv, yv),
            None => 1.0 / dot(&g, &g).sqrt().max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, yv, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let beta = rho * dot(yv, &q);
            q.iter_mut()
                .zip(s)
                .for_each(|(qi, si)| *qi += si * (a - beta));
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut gd = dot(&g, &d);
        if gd >= 0.0 {
            history.clear();
            let scale = 1.0 / dot(&g, &g).sqrt().max(1.0);
            d = g.iter().map(|v| -v * scale).collect();
            gd = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = f(&trial);
            if ft.is_finite() && ft <= fx + ARMIJO * step * gd {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((x_new, f_new, g_new)) = accepted else {
            // no decrease representable at this precision
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() && sy > 0.0 {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((s, yv, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    let gradient_norm = inf_norm(&g);
    Optimum {
        converged: gradient_norm <= tolerance,
        gradient_norm,
        params: x,
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatisfactionModel {
    pub classes: [SatisfactionLabel; N_CLASSES],
    pub feature_ids: Vec<StrategyId>,
    /// `3 x n`, rows in `classes` order.
    pub coefficients: Array2<f64>,
    pub intercepts: Array1<f64>,
    pub config: FitConfig,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    classes: Vec<SatisfactionLabel>,
    feature_ids: Vec<StrategyId>,
    coefficients: Vec<Vec<f64>>,
    intercepts: Vec<f64>,
    hyperparameters: FitConfig,
    iterations: usize,
    converged: bool,
}

fn class_indices(labels: &[SatisfactionLabel]) -> Vec<usize> {
    labels.iter().map(|l| l.class_index()).collect()
}

/// Fit the classifier on `features` (rows aligned with `labels`).
pub fn fit(
    features: &FeatureMatrix,
    labels: &[SatisfactionLabel],
    config: &FitConfig,
) -> Result<SatisfactionModel> {
    let x = features.values.view();
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    let y = class_indices(labels);
    let mut seen = [false; N_CLASSES];
    y.iter().for_each(|&c| seen[c] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::SingleClass);
    }
    if let Some(((row, col), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { row, col });
    }
    if !(config.c > 0.0) {
        return Err(Error::Config(format!(
            "C must be positive, got {}",
            config.c
        )));
    }

    let n = x.ncols();
    let opt = lbfgs(
        |p| penalized_objective(p, x, &y, config.c),
        vec![0.0; N_CLASSES * (n + 1)],
        config.max_iterations,
        config.tolerance,
    );
    if !opt.converged {
        log::debug!(
            "fit stopped after {} iterations with gradient norm {:.3e}",
            opt.iterations,
            opt.gradient_norm
        );
    }
    let coefficients = Array2::from_shape_vec((N_CLASSES, n), opt.params[..N_CLASSES * n].to_vec())
        .expect("parameter layout");
    let intercepts = Array1::from(opt.params[N_CLASSES * n..].to_vec());
    Ok(SatisfactionModel {
        classes: SatisfactionLabel::CLASSES,
        feature_ids: features.column_ids.clone(),
        coefficients,
        intercepts,
        config: *config,
        iterations: opt.iterations,
        converged: opt.converged,
    })
}

impl SatisfactionModel {
    pub fn n_features(&self) -> usize {
        self.coefficients.ncols()
    }

    fn check(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.n_features() {
            return Err(Error::Shape(format!(
                "model has {} features, matrix has {} columns",
                self.n_features(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Class scores `W x + b`, one row per example.
    pub fn decision_function(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        Ok(x.dot(&self.coefficients.t()) + &self.intercepts)
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut z = self.decision_function(x)?;
        for mut row in z.axis_iter_mut(Axis(0)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        Ok(z)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<SatisfactionLabel>> {
        Ok(self
            .decision_function(x)?
            .axis_iter(Axis(0))
            .map(|row| self.classes[argmax(row.iter().copied())])
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            classes: self.classes.to_vec(),
            feature_ids: self.feature_ids.clone(),
            coefficients: self.coefficients.outer_iter().map(|r| r.to_vec()).collect(),
            intercepts: self.intercepts.to_vec(),
            hyperparameters: self.config,
            iterations: self.iterations,
            converged: self.converged,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Config(format!(
                "unsupported model format {}",
                file.format
            )));
        }
        let classes: [SatisfactionLabel; N_CLASSES] = file
            .classes
            .try_into()
            .map_err(|_| Error::Shape("model must list three classes".into()))?;
        let n = file.feature_ids.len();
        if file.coefficients.len() != N_CLASSES
            || file.coefficients.iter().any(|r| r.len() != n)
            || file.intercepts.len() != N_CLASSES
        {
            return Err(Error::Shape(
                "coefficient matrix does not match feature ids".into(),
            ));
        }
        let flat: Vec<f64> = file.coefficients.into_iter().flatten().collect();
        Ok(SatisfactionModel {
            classes,
            feature_ids: file.feature_ids,
            coefficients: Array2::from_shape_vec((N_CLASSES, n), flat).expect("checked shape"),
            intercepts: Array1::from(file.intercepts),
            config: file.hyperparameters,
            iterations: file.iterations,
            converged: file.converged,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Index of the first maximum.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Rows are true classes, columns predictions, both in SAT/NEU/DSAT order.
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Accuracy and macro-averaged precision/recall/F1 (0/0 counts as 0).
pub fn metrics(truth: &[SatisfactionLabel], predicted: &[SatisfactionLabel]) -> Result<EvalReport> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
    for (t, p) in truth.iter().zip(predicted) {
        confusion[t.class_index()][p.class_index()] += 1;
    }
    let total = truth.len() as f64;
    let correct: u64 = (0..N_CLASSES).map(|c| confusion[c][c]).sum();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..N_CLASSES {
        let tp = confusion[c][c] as f64;
        let predicted_c: u64 = (0..N_CLASSES).map(|t| confusion[t][c]).sum();
        let actual_c: u64 = confusion[c].iter().sum();
        let p = ratio(tp, predicted_c as f64);
        let r = ratio(tp, actual_c as f64);
        p_sum += p;
        r_sum += r;
        f_sum += ratio(2.0 * p * r, p + r);
    }
    let k = N_CLASSES as f64;
    Ok(EvalReport {
        accuracy: ratio(correct as f64, total),
        macro_precision: p_sum / k,
        macro_recall: r_sum / k,
        macro_f1: f_sum / k,
        confusion,
    })
}

pub fn evaluate(
    model: &SatisfactionModel,
    features: &FeatureMatrix,
    labels: &[SatisfactionLabel],
) -> Result<EvalReport> {
    if features.column_ids != model.feature_ids {
        return Err(Error::Shape(
            "feature columns do not match the model".into(),
        ));
    }
    let predicted = model.predict(features.values.view())?;
    metrics(labels, &predicted)
}

/// Train and validation blocks of one feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitFeatures {
    pub train: FeatureMatrix,
    pub validation: FeatureMatrix,
}

impl SplitFeatures {
    pub fn select(&self, ids: &[StrategyId]) -> Result<SplitFeatures> {
        Ok(SplitFeatures {
            train: self.train.select(ids)?,
            validation: self.validation.select(ids)?,
        })
    }

    pub fn hstack(&self, other: &SplitFeatures) -> Result<SplitFeatures> {
        Ok(SplitFeatures {
            train: self.train.hstack(&other.train)?,
            validation: self.validation.hstack(&other.validation)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub accepted: Vec<StrategyId>,
    pub rejected: Vec<StrategyId>,
    pub per_candidate_improvement: BTreeMap<StrategyId, f64>,
    pub score_0: f64,
}

/// Validation macro-F1 of a model fit on the training block.
pub fn validation_score(
    features: &SplitFeatures,
    y_train: &[SatisfactionLabel],
    y_val: &[SatisfactionLabel],
    config: &FitConfig,
) -> Result<f64> {
    let model = fit(&features.train, y_train, config)?;
    Ok(evaluate(&model, &features.validation, y_val)?.macro_f1)
}

/// Score each candidate column on its own against the current features and
/// accept those that raise validation macro-F1 above the baseline.
pub fn selective_feature_addition(
    current: &SplitFeatures,
    candidates: &SplitFeatures,
    y_train: &[SatisfactionLabel],
    y_val: &[SatisfactionLabel],
    config: &FitConfig,
) -> Result<SelectionOutcome> {
    selective_feature_addition_with(
        current,
        candidates,
        y_train,
        y_val,
        config,
        Execution::default(),
    )
}

pub fn selective_feature_addition_with(
    current: &SplitFeatures,
    candidates: &SplitFeatures,
    y_train: &[SatisfactionLabel],
    y_val: &[SatisfactionLabel],
    config: &FitConfig,
    exec: Execution,
) -> Result<SelectionOutcome> {
    for (name, m, n) in [
        ("current train", current.train.nrows(), y_train.len()),
        ("candidate train", candidates.train.nrows(), y_train.len()),
        (
            "current validation",
            current.validation.nrows(),
            y_val.len(),
        ),
        (
            "candidate validation",
            candidates.validation.nrows(),
            y_val.len(),
        ),
    ] {
        if m != n {
            return Err(Error::Shape(format!(
                "{name} block has {m} rows, expected {n}"
            )));
        }
    }
    if candidates.train.column_ids != candidates.validation.column_ids {
        return Err(Error::Shape(
            "candidate train/validation columns differ".into(),
        ));
    }

    let score_0 = validation_score(current, y_train, y_val, config)?;
    let ids = &candidates.train.column_ids;
    let scores = exec.map(ids, |id| -> Result<f64> {
        let column = candidates.select(std::slice::from_ref(id))?;
        validation_score(&current.hstack(&column)?, y_train, y_val, config)
    });

    let mut outcome = SelectionOutcome {
        accepted: Vec::new(),
        rejected: Vec::new(),
        per_candidate_improvement: BTreeMap::new(),
        score_0,
    };
    for (id, score) in ids.iter().zip(scores) {
        let improvement = score? - score_0;
        outcome
            .per_candidate_improvement
            .insert(id.clone(), improvement);
        if improvement > 0.0 {
            outcome.accepted.push(id.clone());
        } else {
            outcome.rejected.push(id.clone());
        }
    }
    Ok(outcome)
}

/// Sum of absolute coefficients across classes, per feature.
pub fn importance(model: &SatisfactionModel) -> BTreeMap<StrategyId, f64> {
    model
        .feature_ids
        .iter()
        .zip(model.coefficients.axis_iter(Axis(1)))
        .map(|(id, col)| (id.clone(), col.iter().map(|c| c.abs()).sum()))
        .collect()
}

/// Highest-importance ids first; equal importances keep input order.
pub fn select_top_k(importances: &[(StrategyId, f64)], k_top: usize) -> Vec<StrategyId> {
    let mut ranked: Vec<&(StrategyId, f64)> = importances.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
        .into_iter()
        .take(k_top)
        .map(|(id, _)| id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use SatisfactionLabel::{Dsat, Neu, Sat};

    fn ids(n: usize, prefix: &str) -> Vec<StrategyId> {
        (0..n).map(|j| StrategyId(format!("{prefix}{j}"))).collect()
    }

    fn matrix(values: Array2<f64>, prefix: &str) -> FeatureMatrix {
        let column_ids = ids(values.ncols(), prefix);
        FeatureMatrix { values, column_ids }
    }

    /// Three noisy Gaussian blobs in `n` dimensions.
    fn blobs(
        seed: u64,
        per_class: usize,
        n: usize,
        spread: f64,
    ) -> (Array2<f64>, Vec<SatisfactionLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((per_class * 3, n));
        let mut y = Vec::new();
        for (c, label) in SatisfactionLabel::CLASSES.iter().enumerate() {
            for i in 0..per_class {
                let r = c * per_class + i;
                for j in 0..n {
                    let centre = if j % 3 == c { 1.0 } else { 0.0 };
                    x[[r, j]] = centre + spread * (rng.gen::<f64>() - 0.5);
                }
                y.push(*label);
            }
        }
        (x, y)
    }

    #[test]
    fn separable_one_dimensional() {
        let train = matrix(array![[-2.0], [-1.0], [-0.5], [0.5], [1.0], [2.0]], "f");
        let y = vec![Dsat, Dsat, Dsat, Sat, Sat, Sat];
        let model = fit(&train, &y, &FitConfig::default()).unwrap();
        let held_out = matrix(array![[-3.0], [-0.2], [0.3], [4.0]], "f");
        let report = evaluate(&model, &held_out, &[Dsat, Dsat, Sat, Sat]).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn zero_features_predict_majority() {
        let train = matrix(Array2::zeros((7, 2)), "f");
        let y = vec![Neu, Neu, Neu, Sat, Dsat, Neu, Sat];
        let model = fit(&train, &y, &FitConfig::default()).unwrap();
        assert!(model.coefficients.iter().all(|&c| c == 0.0));
        assert_eq!(model.predict(train.values.view()).unwrap(), vec![Neu; 7]);
        let empty = FeatureMatrix::empty(7);
        let model = fit(&empty, &y, &FitConfig::default()).unwrap();
        assert_eq!(model.predict(empty.values.view()).unwrap(), vec![Neu; 7]);
    }

    #[test]
    fn fit_errors() {
        let f = matrix(array![[1.0], [2.0]], "f");
        assert!(matches!(
            fit(&f, &[Sat, Sat], &FitConfig::default()),
            Err(Error::SingleClass)
        ));
        let bad = matrix(array![[1.0], [f64::NAN]], "f");
        assert!(matches!(
            fit(&bad, &[Sat, Dsat], &FitConfig::default()),
            Err(Error::NonFinite { row: 1, col: 0 })
        ));
        assert!(fit(&f, &[Sat], &FitConfig::default()).is_err());
    }

    fn central_difference(
        params: &[f64],
        x: ArrayView2<f64>,
        y: &[usize],
        c: f64,
        h: f64,
    ) -> Vec<f64> {
        (0..params.len())
            .map(|i| {
                let mut up = params.to_vec();
                let mut down = params.to_vec();
                up[i] += h;
                down[i] -= h;
                (penalized_objective(&up, x, y, c).0 - penalized_objective(&down, x, y, c).0)
                    / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_at_optimum_matches_finite_differences() {
        let (x, y) = blobs(3, 20, 3, 3.0);
        let train = matrix(x, "f");
        let model = fit(&train, &y, &FitConfig::default()).unwrap();
        let mut params = model.coefficients.iter().copied().collect::<Vec<_>>();
        params.extend(model.intercepts.iter());
        let yi = class_indices(&y);
        let (_, analytic) = penalized_objective(&params, train.values.view(), &yi, 100.0);
        let numeric = central_difference(&params, train.values.view(), &yi, 100.0, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(
                (a - n).abs() / a.abs().max(n.abs()).max(1.0) <= 1e-4,
                "{a} vs {n}"
            );
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (x, y) = blobs(9, 30, 4, 2.0);
        let f = matrix(x, "f");
        let a = fit(&f, &y, &FitConfig::default()).unwrap();
        let b = fit(&f, &y, &FitConfig::default()).unwrap();
        assert!(a
            .coefficients
            .iter()
            .zip(b.coefficients.iter())
            .all(|(p, q)| (p - q).abs() <= 1e-10));
        assert_eq!(a, b);
    }

    #[test]
    fn weaker_penalty_fits_training_data_no_worse() {
        let (x, y) = blobs(5, 40, 3, 3.0);
        let yi = class_indices(&y);
        let f = matrix(x, "f");
        let cross_entropy = |c: f64| {
            let cfg = FitConfig {
                c,
                max_iterations: 5000,
                tolerance: 1e-6,
            };
            let m = fit(&f, &y, &cfg).unwrap();
            assert!(m.converged, "C={c} did not converge");
            let mut params = m.coefficients.iter().copied().collect::<Vec<_>>();
            params.extend(m.intercepts.iter());
            // objective with an infinite C is the bare cross-entropy
            penalized_objective(&params, f.values.view(), &yi, f64::INFINITY).0
        };
        let ce: Vec<f64> = [0.1, 1.0, 100.0].into_iter().map(cross_entropy).collect();
        assert!(ce[0] >= ce[1] - 1e-9 && ce[1] >= ce[2] - 1e-9, "{ce:?}");
    }

    #[test]
    fn probabilities_sum_to_one_and_shift_invariant() {
        let (x, y) = blobs(2, 10, 2, 2.0);
        let f = matrix(x, "f");
        let m = fit(&f, &y, &FitConfig::default()).unwrap();
        let p = m.predict_proba(f.values.view()).unwrap();
        for row in p.axis_iter(Axis(0)) {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        let mut shifted = m.clone();
        shifted.intercepts += 37.5;
        assert_eq!(
            shifted.predict(f.values.view()).unwrap(),
            m.predict(f.values.view()).unwrap()
        );
    }

    #[test]
    fn metrics_perfect_and_all_sat() {
        let truth: Vec<_> = SatisfactionLabel::CLASSES
            .iter()
            .flat_map(|&l| vec![l; 10])
            .collect();
        let perfect = metrics(&truth, &truth).unwrap();
        assert_eq!((perfect.accuracy, perfect.macro_f1), (1.0, 1.0));

        let r = metrics(&truth, &vec![Sat; 30]).unwrap();
        assert_abs_diff_eq!(r.accuracy, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.macro_precision, 1.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.macro_recall, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.macro_f1, 1.0 / 6.0, epsilon = 1e-12);
        assert_eq!(r.confusion, [[10, 0, 0], [10, 0, 0], [10, 0, 0]]);
        assert!(metrics(&truth, &truth[..3]).is_err());
    }

    #[test]
    fn metrics_invariant_to_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draw = |rng: &mut ChaCha8Rng| SatisfactionLabel::CLASSES[rng.gen_range(0..3)];
        let truth: Vec<_> = (0..50).map(|_| draw(&mut rng)).collect();
        let pred: Vec<_> = (0..50).map(|_| draw(&mut rng)).collect();
        let perm = |l: &SatisfactionLabel| match l {
            Sat => Neu,
            Neu => Dsat,
            Dsat => Sat,
        };
        let a = metrics(&truth, &pred).unwrap();
        let b = metrics(
            &truth.iter().map(perm).collect::<Vec<_>>(),
            &pred.iter().map(perm).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_abs_diff_eq!(a.macro_f1, b.macro_f1, epsilon = 1e-12);
        assert_abs_diff_eq!(a.macro_precision, b.macro_precision, epsilon = 1e-12);
        assert_abs_diff_eq!(a.macro_recall, b.macro_recall, epsilon = 1e-12);
        assert_eq!(a.accuracy, b.accuracy);
    }

    fn split(
        x: &Array2<f64>,
        y: &[SatisfactionLabel],
        prefix: &str,
    ) -> (
        SplitFeatures,
        Vec<SatisfactionLabel>,
        Vec<SatisfactionLabel>,
    ) {
        let n = x.nrows();
        let train_rows: Vec<usize> = (0..n).filter(|i| i % 4 != 0).collect();
        let val_rows: Vec<usize> = (0..n).filter(|i| i % 4 == 0).collect();
        let f = |rows: &[usize]| matrix(x.select(Axis(0), rows), prefix);
        (
            SplitFeatures {
                train: f(&train_rows),
                validation: f(&val_rows),
            },
            train_rows.iter().map(|&i| y[i]).collect(),
            val_rows.iter().map(|&i| y[i]).collect(),
        )
    }

    #[test]
    fn constant_rejected_and_oracle_feature_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 120;
        let y: Vec<_> = (0..n).map(|i| SatisfactionLabel::CLASSES[i % 3]).collect();
        let noise = Array2::from_shape_fn((n, 2), |_| rng.gen::<f64>());
        let mut cand = Array2::zeros((n, 2));
        for i in 0..n {
            cand[[i, 0]] = 1.0;
            cand[[i, 1]] = y[i].class_index() as f64;
        }
        let (current, yt, yv) = split(&noise, &y, "base");
        let (candidates, _, _) = split(&cand, &y, "cand");
        let out =
            selective_feature_addition(&current, &candidates, &yt, &yv, &FitConfig::default())
                .unwrap();
        assert_eq!(out.rejected, vec![StrategyId("cand0".into())]);
        assert_eq!(out.accepted, vec![StrategyId("cand1".into())]);
        assert_eq!(
            out.per_candidate_improvement[&StrategyId("cand0".into())],
            0.0
        );
        assert!(out.per_candidate_improvement[&StrategyId("cand1".into())] > 0.0);
    }

    #[test]
    fn selection_edge_cases() {
        let (x, y) = blobs(4, 10, 2, 2.0);
        let (current, yt, yv) = split(&x, &y, "base");
        let none = SplitFeatures {
            train: FeatureMatrix::empty(yt.len()),
            validation: FeatureMatrix::empty(yv.len()),
        };
        let out =
            selective_feature_addition(&current, &none, &yt, &yv, &FitConfig::default()).unwrap();
        assert!(out.accepted.is_empty() && out.rejected.is_empty());
        assert_eq!(
            out.score_0,
            validation_score(&current, &yt, &yv, &FitConfig::default()).unwrap()
        );
        assert!(matches!(
            selective_feature_addition(&current, &none, &yt[1..], &yv, &FitConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn importance_sums_absolute_coefficients() {
        let m = SatisfactionModel {
            classes: SatisfactionLabel::CLASSES,
            feature_ids: ids(2, "s"),
            coefficients: array![[0.5, 0.0], [-1.0, 0.0], [0.2, 0.0]],
            intercepts: array![3.0, -1.0, 0.0],
            config: FitConfig::default(),
            iterations: 0,
            converged: true,
        };
        let imp = importance(&m);
        assert_abs_diff_eq!(imp[&StrategyId("s0".into())], 1.7, epsilon = 1e-12);
        assert_eq!(imp[&StrategyId("s1".into())], 0.0);
        let mut flipped = m.clone();
        flipped.coefficients.column_mut(0).mapv_inplace(|v| -v);
        assert_eq!(importance(&flipped), imp);
    }

    #[test]
    fn top_k_examples() {
        let s = |x: &str| StrategyId(x.into());
        let imps = vec![(s("a"), 1.7), (s("b"), 0.4), (s("c"), 2.0)];
        assert_eq!(select_top_k(&imps, 2), vec![s("c"), s("a")]);
        assert_eq!(select_top_k(&imps, 10), vec![s("c"), s("a"), s("b")]);
        let ties = vec![(s("x"), 1.0), (s("y"), 1.0), (s("z"), 1.0)];
        assert_eq!(select_top_k(&ties, 2), vec![s("x"), s("y")]);
    }

    #[test]
    fn model_file_round_trips() {
        let (x, y) = blobs(8, 10, 3, 2.0);
        let f = matrix(x, "f");
        let m = fit(&f, &y, &FitConfig::default()).unwrap();
        let back = SatisfactionModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            back.predict_proba(f.values.view()).unwrap(),
            m.predict_proba(f.values.view()).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn selection_partitions_and_ignores_order(seed in any::<u64>()) {
            let (x, y) = blobs(seed, 12, 1, 4.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cand = Array2::from_shape_fn((x.nrows(), 4), |(i, j)| {
                if j == 0 { y[i].class_index() as f64 + rng.gen::<f64>() } else { rng.gen::<f64>() }
            });
            let (current, yt, yv) = split(&x, &y, "base");
            let (candidates, _, _) = split(&cand, &y, "cand");
            let out = selective_feature_addition(&current, &candidates, &yt, &yv, &FitConfig::default()).unwrap();
            prop_assert_eq!(out.accepted.len() + out.rejected.len(), 4);
            let rev: Vec<_> = candidates.train.column_ids.iter().rev().cloned().collect();
            let out_rev = selective_feature_addition(&current, &candidates.select(&rev).unwrap(), &yt, &yv, &FitConfig::default()).unwrap();
            prop_assert_eq!(&out.per_candidate_improvement, &out_rev.per_candidate_improvement);
            let mut a = out.accepted.clone(); a.sort();
            let mut b = out_rev.accepted.clone(); b.sort();
            prop_assert_eq!(a, b);
        }
    }
}

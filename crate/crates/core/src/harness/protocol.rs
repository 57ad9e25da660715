use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svm::{Scaler, SolverConfig, SvmModel};

/// Regularization values searched by default, 1e-5 through 10.
pub const DEFAULT_C_GRID: [f64; 7] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0];

/// Disjoint held-out index sets covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
    pub num_samples: usize,
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn test_indices(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Every index outside `fold`, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut held = vec![false; self.num_samples];
        for &i in &self.folds[fold] {
            held[i] = true;
        }
        (0..self.num_samples).filter(|&i| !held[i]).collect()
    }
}

/// Shuffles each class with a seeded generator and deals its members
/// round-robin over the folds. The dealing position carries over between
/// classes so fold sizes differ by at most one overall.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Parameter(format!("need at least 2 folds, got {k}")));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for &c in &classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} members, fewer than {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan {
        folds,
        num_samples: labels.len(),
    })
}

/// Mean recall over the classes that occur in `labels`.
pub fn uar(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions", labels.len()), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::Data("UAR of an empty label set".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let (hit, n) = predictions
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .fold((0usize, 0usize), |(h, n), (&p, _)| (h + usize::from(p == c), n + 1));
            hit as f64 / n as f64
        })
        .sum();
    Ok(total / classes.len() as f64)
}

/// What one fold of one grid point saw and produced.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub test_indices: Vec<usize>,
    pub predictions: Vec<usize>,
    pub decisions: Vec<f64>,
    pub scaler: Scaler,
    pub uar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub c: f64,
    pub uar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    /// Mean held-out UAR per grid value, in grid order.
    pub entries: Vec<CvEntry>,
    pub best_index: usize,
    /// `folds[g][f]`: fold `f` at grid value `g`.
    pub folds: Vec<Vec<FoldOutcome>>,
}

impl GridSearch {
    pub fn best_c(&self) -> f64 {
        self.entries[self.best_index].c
    }

    pub fn best_uar(&self) -> f64 {
        self.entries[self.best_index].uar
    }

    /// Held-out decision values at the chosen C, indexed like the input rows.
    pub fn out_of_fold_decisions(&self) -> Vec<f64> {
        let folds = &self.folds[self.best_index];
        let n = folds.iter().map(|f| f.test_indices.len()).sum();
        let mut out = vec![0.0; n];
        for f in folds {
            for (&i, &d) in f.test_indices.iter().zip(&f.decisions) {
                out[i] = d;
            }
        }
        out
    }
}

/// Cross-validated UAR for every C. Each fold fits its own scaler and SVM
/// on the training portion only. Ties go to the smallest C.
pub fn grid_search_c(
    features: ArrayView2<f64>,
    labels: &[usize],
    plan: &FoldPlan,
    c_grid: &[f64],
    solver: &SolverConfig,
) -> Result<GridSearch> {
    if c_grid.is_empty() || c_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Parameter("C grid must be nonempty and strictly ascending".into()));
    }
    if labels.len() != features.nrows() || plan.num_samples != labels.len() {
        return Err(Error::shape(format!("{} labels and plan size", features.nrows()), labels.len()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Label("grid search expects binary labels 0 and 1".into()));
    }
    let splits: Vec<(Vec<usize>, &[usize])> = (0..plan.len())
        .map(|f| (plan.train_indices(f), plan.test_indices(f)))
        .collect();
    for (f, (train, _)) in splits.iter().enumerate() {
        let has = |c| train.iter().any(|&i| labels[i] == c);
        if !has(0) || !has(1) {
            return Err(Error::Stratification(format!("fold {f} training portion lacks a class")));
        }
    }
    let names = ["class0".to_string(), "class1".to_string()];
    let mut entries = Vec::with_capacity(c_grid.len());
    let mut folds = Vec::with_capacity(c_grid.len());
    for &c in c_grid {
        let mut outcomes = Vec::with_capacity(plan.len());
        for (train, test) in &splits {
            let x_train = features.select(Axis(0), train);
            let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let (model, _) = SvmModel::fit(x_train.view(), &y_train, names.clone(), c, solver)?;
            let x_test = features.select(Axis(0), test);
            let decisions = model.decision_values(x_test.view())?.to_vec();
            let predictions: Vec<usize> = decisions.iter().map(|&f| usize::from(f >= 0.0)).collect();
            let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
            outcomes.push(FoldOutcome {
                test_indices: test.to_vec(),
                uar: uar(&predictions, &truth)?,
                predictions,
                decisions,
                scaler: model.scaler,
            });
        }
        let mean = outcomes.iter().map(|o| o.uar).sum::<f64>() / outcomes.len() as f64;
        log::debug!("C = {c:e}: mean CV UAR {mean:.4}");
        entries.push(CvEntry { c, uar: mean });
        folds.push(outcomes);
    }
    let mut best_index = 0;
    for (i, e) in entries.iter().enumerate() {
        if e.uar > entries[best_index].uar {
            best_index = i;
        }
    }
    Ok(GridSearch {
        entries,
        best_index,
        folds,
    })
}

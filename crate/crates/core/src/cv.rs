//! Repeated stratified k-fold cross-validation over the nine
//! (metric, view) branches, with leakage-safe selection, training and
//! fusion-weight estimation inside each training fold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::View;
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, fuse, make_folds, summarize, FusionScheme, Metrics, Summary, DECISION_THRESHOLD};
use crate::net1d::{parameter_count_for, train_branch, Architecture, InputShape, Net1D, TrainConfig};
use crate::pooling::{
    apply_selection, learn_selection, ChannelSelection, SelectionIndices, SelectionRule, TrainingFeatureCorpus,
};
use crate::rng::{derive_path, splitmix};
use crate::tensor::Tensor;
use crate::volume::{Label, Metric};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Branch {
    pub metric: Metric,
    pub view: View,
}

impl Branch {
    /// The nine branches, metric-major: gm/axial, gm/coronal, ..., csf/sagittal.
    pub fn all() -> Vec<Branch> {
        Metric::ALL.iter().flat_map(|&metric| View::ALL.iter().map(move |&view| Branch { metric, view })).collect()
    }

    pub fn name(&self) -> String {
        format!("{}/{}", self.metric, self.view)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectInfo {
    pub id: String,
    pub label: Label,
}

/// Max-pooled feature maps for every subject and branch.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub subjects: Vec<SubjectInfo>,
    pub branches: Vec<Branch>,
    /// `maps[branch][subject]`, rank 4 `N x W x H x CH`.
    pub maps: Vec<Vec<Tensor>>,
}

impl FeatureBank {
    pub fn new(subjects: Vec<SubjectInfo>, branches: Vec<Branch>, maps: Vec<Vec<Tensor>>) -> Result<Self> {
        if branches.is_empty() || maps.len() != branches.len() {
            return Err(Error::invalid("feature bank needs one map list per branch"));
        }
        for (b, per_subject) in branches.iter().zip(&maps) {
            if per_subject.len() != subjects.len() {
                return Err(Error::invalid(format!(
                    "branch {} has {} maps for {} subjects",
                    b.name(),
                    per_subject.len(),
                    subjects.len()
                )));
            }
            let dims = per_subject.first().map(|t| t.dims().to_vec()).unwrap_or_default();
            if dims.len() != 4 || per_subject.iter().any(|t| t.dims() != dims.as_slice()) {
                return Err(Error::shape(format!("branch {} maps must be congruent rank-4 tensors", b.name())));
            }
        }
        Ok(Self { subjects, branches, maps })
    }

    pub fn labels(&self) -> Vec<Label> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    /// `(N, W, H, CH)` of a branch.
    pub fn branch_dims(&self, branch: usize) -> (usize, usize, usize, usize) {
        let d = self.maps[branch][0].dims();
        (d[0], d[1], d[2], d[3])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub n_folds: usize,
    pub n_repeats: usize,
    pub base_seed: u64,
    pub train: TrainConfig,
    pub selection: SelectionRule,
    pub channel_selection: ChannelSelection,
    pub fusion: FusionScheme,
    /// Feed the full `N x W x H x CH` maps to the classifier.
    pub skip_global_pooling: bool,
    /// Replace the alternating network with a single dense layer.
    pub skip_net1d: bool,
    /// Report the single branch with the best inner-holdout accuracy instead of fusing.
    pub skip_fusion: bool,
    /// The inner holdout is one of this many stratified folds of the training fold.
    pub inner_folds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            n_folds: 5,
            n_repeats: 10,
            base_seed: 2023,
            train: TrainConfig::default(),
            selection: SelectionRule::default(),
            channel_selection: ChannelSelection::PerSlice,
            fusion: FusionScheme::HoldoutAccuracy,
            skip_global_pooling: false,
            skip_net1d: false,
            skip_fusion: false,
            inner_folds: 5,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::invalid("n_folds must be at least 2"));
        }
        if self.n_repeats == 0 {
            return Err(Error::invalid("n_repeats must be at least 1"));
        }
        if self.inner_folds < 2 {
            return Err(Error::invalid("inner_folds must be at least 2"));
        }
        self.train.validate()
    }

    pub fn architecture(&self) -> Architecture {
        if self.skip_net1d {
            Architecture::LinearHead
        } else {
            Architecture::AlternatingConv
        }
    }

    fn needs_inner_holdout(&self) -> bool {
        self.skip_fusion || self.fusion == FusionScheme::HoldoutAccuracy
    }

    /// Classifier input shape for a branch with `(N, W, H, CH)` maps.
    pub fn input_shape(&self, dims: (usize, usize, usize, usize)) -> Result<InputShape> {
        let (n, w, h, ch) = dims;
        let (j, k) = if self.skip_global_pooling { (n, ch) } else { self.selection.counts(n, ch)? };
        Ok(InputShape { slices: j, width: w, height: h, channels: k })
    }
}

/// Split seed of repeat `r`: `splitmix(base_seed + r)`.
pub fn repeat_seed(base_seed: u64, repeat: usize) -> u64 {
    splitmix(base_seed.wrapping_add(repeat as u64))
}

const STAGE_OUTER: u64 = 0;
const STAGE_INNER: u64 = 1;
const STAGE_INNER_SPLIT: u64 = 2;

/// A branch's selection and classifier, fitted on one set of training subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedBranch {
    pub selection: SelectionIndices,
    pub net: Net1D,
}

impl FittedBranch {
    pub fn predict(&self, maps: &Tensor) -> Result<f64> {
        self.net.predict(&apply_selection(maps, &self.selection)?)
    }
}

/// Learns the selection on `train` subjects only, then trains the classifier on them.
pub fn fit_branch(
    bank: &FeatureBank,
    branch: usize,
    train: &[usize],
    cfg: &CvConfig,
    seed: u64,
) -> Result<FittedBranch> {
    let maps = &bank.maps[branch];
    let view = bank.branches[branch].view;
    let selection = if cfg.skip_global_pooling {
        let (n, _, _, ch) = bank.branch_dims(branch);
        SelectionIndices::identity(view, n, ch)
    } else {
        let corpus = TrainingFeatureCorpus::new(view, train.iter().map(|&t| &maps[t]).collect())?;
        learn_selection(&corpus, cfg.selection, cfg.channel_selection)?
    };
    let pooled = train.iter().map(|&t| apply_selection(&maps[t], &selection)).collect::<Result<Vec<_>>>()?;
    let corpus: Vec<(&Tensor, Label)> = pooled.iter().zip(train).map(|(x, &t)| (x, bank.subjects[t].label)).collect();
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let net = train_branch(&corpus, cfg.architecture(), &train_cfg)?;
    Ok(FittedBranch { selection, net })
}

fn fit_all(
    bank: &FeatureBank,
    train: &[usize],
    cfg: &CvConfig,
    seed_of: impl Fn(usize) -> u64 + Sync,
) -> Result<Vec<FittedBranch>> {
    (0..bank.branches.len())
        .into_par_iter()
        .map(|b| {
            fit_branch(bank, b, train, cfg, seed_of(b))
                .map_err(|e| e.context(format!("branch {}", bank.branches[b].name())))
        })
        .collect()
}

fn predict_all(bank: &FeatureBank, fitted: &[FittedBranch], subjects: &[usize]) -> Result<Vec<Vec<f64>>> {
    fitted.iter().enumerate().map(|(b, f)| subjects.iter().map(|&s| f.predict(&bank.maps[b][s])).collect()).collect()
}

fn accuracy(p: &[f64], labels: &[Label]) -> f64 {
    let correct = p.iter().zip(labels).filter(|(&p, l)| (p >= DECISION_THRESHOLD) == l.is_positive()).count();
    correct as f64 / p.len() as f64
}

/// Everything produced by one (repeat, fold) cell, including the fitted models.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub repeat: usize,
    pub fold: usize,
    pub repeat_seed: u64,
    pub train_subjects: Vec<usize>,
    pub test_subjects: Vec<usize>,
    pub fitted: Vec<FittedBranch>,
    /// Per-branch inner-holdout accuracy, when an inner holdout was used.
    pub inner_accuracies: Option<Vec<f64>>,
    pub weights: Vec<f64>,
    pub selected_branch: Option<usize>,
    /// `[branch][test subject]`.
    pub branch_predictions: Vec<Vec<f64>>,
    pub fused_predictions: Vec<f64>,
    pub branch_metrics: Vec<Metrics>,
    pub fused_metrics: Metrics,
}

/// Inner stratified split of `train`: (inner-train, holdout).
pub fn inner_split(bank: &FeatureBank, train: &[usize], cfg: &CvConfig, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels: Vec<Label> = train.iter().map(|&t| bank.subjects[t].label).collect();
    let folds = make_folds(&labels, cfg.inner_folds, seed)?;
    let (mut inner, mut holdout) = (Vec::new(), Vec::new());
    for (&t, &f) in train.iter().zip(&folds) {
        if f == 0 {
            holdout.push(t);
        } else {
            inner.push(t);
        }
    }
    for (name, part) in [("inner-train", &inner), ("inner holdout", &holdout)] {
        let pos = part.iter().filter(|&&t| bank.subjects[t].label.is_positive()).count();
        if pos == 0 || pos == part.len() {
            return Err(Error::invalid(format!("degenerate {name} split: a single class")));
        }
    }
    Ok((inner, holdout))
}

pub fn run_cell(bank: &FeatureBank, cfg: &CvConfig, repeat: usize, fold: usize) -> Result<CellOutcome> {
    let labels = bank.labels();
    let rseed = repeat_seed(cfg.base_seed, repeat);
    let folds = make_folds(&labels, cfg.n_folds, rseed)?;
    let train: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != fold).collect();
    let test: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == fold).collect();
    let fold_u = fold as u64;

    let inner_accuracies = if cfg.needs_inner_holdout() {
        let (inner, holdout) = inner_split(bank, &train, cfg, derive_path(rseed, &[STAGE_INNER_SPLIT, fold_u]))?;
        let fitted = fit_all(bank, &inner, cfg, |b| derive_path(rseed, &[STAGE_INNER, fold_u, b as u64]))?;
        let holdout_labels: Vec<Label> = holdout.iter().map(|&t| labels[t]).collect();
        let preds = predict_all(bank, &fitted, &holdout)?;
        Some(preds.iter().map(|p| accuracy(p, &holdout_labels)).collect::<Vec<f64>>())
    } else {
        None
    };

    let fitted = fit_all(bank, &train, cfg, |b| derive_path(rseed, &[STAGE_OUTER, fold_u, b as u64]))?;
    let branch_predictions = predict_all(bank, &fitted, &test)?;
    let test_labels: Vec<Label> = test.iter().map(|&t| labels[t]).collect();
    let nb = bank.branches.len();

    let (weights, selected_branch) = if cfg.skip_fusion {
        let acc = inner_accuracies.as_ref().expect("inner holdout computed");
        let best = (0..nb).fold(0, |best, b| if acc[b] > acc[best] { b } else { best });
        let mut w = vec![0.0; nb];
        w[best] = 1.0;
        (w, Some(best))
    } else {
        let w = match (cfg.fusion, &inner_accuracies) {
            (FusionScheme::HoldoutAccuracy, Some(acc)) if acc.iter().any(|&a| a > 0.0) => acc.clone(),
            _ => vec![1.0; nb],
        };
        (w, None)
    };

    let fused_predictions = (0..test.len())
        .map(|i| {
            let p: Vec<f64> = branch_predictions.iter().map(|bp| bp[i]).collect();
            fuse(&p, &weights).map(|(p, _)| p)
        })
        .collect::<Result<Vec<_>>>()?;

    let branch_metrics =
        branch_predictions.iter().map(|p| compute_metrics(p, &test_labels)).collect::<Result<Vec<_>>>()?;
    let fused_metrics = compute_metrics(&fused_predictions, &test_labels)?;

    Ok(CellOutcome {
        repeat,
        fold,
        repeat_seed: rseed,
        train_subjects: train,
        test_subjects: test,
        fitted,
        inner_accuracies,
        weights,
        selected_branch,
        branch_predictions,
        fused_predictions,
        branch_metrics,
        fused_metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchCell {
    pub branch: Branch,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject: String,
    pub label: Label,
    pub p_fused: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub repeat: usize,
    pub fold: usize,
    pub repeat_seed: u64,
    pub n_train: usize,
    pub weights: Vec<f64>,
    pub inner_accuracies: Option<Vec<f64>>,
    pub selected_branch: Option<Branch>,
    pub branches: Vec<BranchCell>,
    pub fused: Metrics,
    pub predictions: Vec<SubjectPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: Summary,
    pub sensitivity: Option<Summary>,
    pub specificity: Option<Summary>,
    pub roc_auc: Option<Summary>,
}

impl MetricSummary {
    /// Means over cells of each per-cell metric (no pooled confusion).
    pub fn over<'a>(cells: impl Iterator<Item = &'a Metrics> + Clone) -> Self {
        Self {
            accuracy: summarize(cells.clone().map(|m| Some(m.accuracy))).expect("at least one cell"),
            sensitivity: summarize(cells.clone().map(|m| m.sensitivity)),
            specificity: summarize(cells.clone().map(|m| m.specificity)),
            roc_auc: summarize(cells.map(|m| m.roc_auc)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub branch: Branch,
    pub input: InputShape,
    pub architecture: Architecture,
    pub parameter_count: usize,
    pub summary: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config_hash: Option<String>,
    pub config: CvConfig,
    pub n_subjects: usize,
    pub repeat_seeds: Vec<u64>,
    pub cells: Vec<CellReport>,
    pub branches: Vec<BranchSummary>,
    pub fused: MetricSummary,
    pub total_parameters: usize,
}

impl CvReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json { context: "cv report".into(), source })
    }
}

fn cell_report(bank: &FeatureBank, c: &CellOutcome) -> CellReport {
    CellReport {
        repeat: c.repeat,
        fold: c.fold,
        repeat_seed: c.repeat_seed,
        n_train: c.train_subjects.len(),
        weights: c.weights.clone(),
        inner_accuracies: c.inner_accuracies.clone(),
        selected_branch: c.selected_branch.map(|b| bank.branches[b]),
        branches: bank
            .branches
            .iter()
            .zip(&c.branch_metrics)
            .map(|(&branch, m)| BranchCell { branch, metrics: m.clone() })
            .collect(),
        fused: c.fused_metrics.clone(),
        predictions: c
            .test_subjects
            .iter()
            .zip(&c.fused_predictions)
            .map(|(&s, &p)| SubjectPrediction {
                subject: bank.subjects[s].id.clone(),
                label: bank.subjects[s].label,
                p_fused: p,
            })
            .collect(),
    }
}

/// Parameter count of a branch classifier for the given input.
pub fn classifier_parameters(architecture: Architecture, input: InputShape) -> usize {
    match architecture {
        Architecture::AlternatingConv => parameter_count_for(input),
        Architecture::LinearHead => input.slices * input.width * input.height * input.channels * 2 + 2,
    }
}

/// Runs every (repeat, fold) cell, in parallel, and aggregates. The result
/// does not depend on the thread count.
pub fn run_cv(bank: &FeatureBank, cfg: &CvConfig) -> Result<CvReport> {
    cfg.validate()?;
    if bank.subjects.len() < cfg.n_folds {
        return Err(Error::invalid(format!("{} subjects cannot fill {} folds", bank.subjects.len(), cfg.n_folds)));
    }
    let cells: Vec<(usize, usize)> = (0..cfg.n_repeats).flat_map(|r| (0..cfg.n_folds).map(move |f| (r, f))).collect();
    let outcomes = cells
        .par_iter()
        .map(|&(r, f)| run_cell(bank, cfg, r, f).map_err(|e| e.context(format!("repeat {r}, fold {f}"))))
        .collect::<Result<Vec<_>>>()?;

    let architecture = cfg.architecture();
    let branches = (0..bank.branches.len())
        .map(|b| {
            let input = cfg.input_shape(bank.branch_dims(b))?;
            Ok(BranchSummary {
                branch: bank.branches[b],
                input,
                architecture,
                parameter_count: classifier_parameters(architecture, input),
                summary: MetricSummary::over(outcomes.iter().map(|c| &c.branch_metrics[b])),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport {
        config_hash: None,
        config: cfg.clone(),
        n_subjects: bank.subjects.len(),
        repeat_seeds: (0..cfg.n_repeats).map(|r| repeat_seed(cfg.base_seed, r)).collect(),
        cells: outcomes.iter().map(|c| cell_report(bank, c)).collect(),
        total_parameters: branches.iter().map(|b| b.parameter_count).sum(),
        branches,
        fused: MetricSummary::over(outcomes.iter().map(|c| &c.fused_metrics)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Positive subjects get a bump on channel 0 of the middle slices.
    pub(crate) fn toy_bank(n_per_class: usize, effect: f32, seed: u64) -> FeatureBank {
        let mut rng = SplitMix64::new(seed);
        let subjects: Vec<SubjectInfo> = (0..2 * n_per_class)
            .map(|i| SubjectInfo { id: format!("s{i:02}"), label: Label::from_positive(i < n_per_class) })
            .collect();
        let branches = Branch::all();
        let maps = branches
            .iter()
            .map(|_| {
                subjects
                    .iter()
                    .map(|s| {
                        let mut data: Vec<f32> = (0..16 * 8).map(|_| 0.5 + 0.2 * rng.next_f64() as f32).collect();
                        if s.label.is_positive() {
                            for n in 4..12 {
                                data[n * 8] += effect;
                            }
                        }
                        Tensor::new(vec![16, 1, 1, 8], data).unwrap()
                    })
                    .collect()
            })
            .collect();
        FeatureBank::new(subjects, branches, maps).unwrap()
    }

    fn quick_cfg() -> CvConfig {
        CvConfig { n_repeats: 1, train: TrainConfig { epochs: 20, ..TrainConfig::default() }, ..CvConfig::default() }
    }

    #[test]
    fn branch_order() {
        let b = Branch::all();
        assert_eq!(b.len(), 9);
        assert_eq!(b[0].name(), "gm/axial");
        assert_eq!(b[8].name(), "csf/sagittal");
    }

    #[test]
    fn cell_partitions_subjects() {
        let bank = toy_bank(6, 1.0, 1);
        let c = run_cell(&bank, &quick_cfg(), 0, 2).unwrap();
        let mut all: Vec<usize> = c.train_subjects.iter().chain(&c.test_subjects).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert_eq!(c.weights.len(), 9);
        assert_eq!(c.fitted.len(), 9);
        assert!(c.fitted.iter().all(|f| f.selection.j() == 8 && f.selection.k() == 2));
    }

    #[test]
    fn skip_fusion_picks_best_inner_branch() {
        let bank = toy_bank(6, 1.0, 2);
        let cfg = CvConfig { skip_fusion: true, ..quick_cfg() };
        let c = run_cell(&bank, &cfg, 0, 0).unwrap();
        let b = c.selected_branch.unwrap();
        let acc = c.inner_accuracies.as_ref().unwrap();
        assert!(acc.iter().all(|&a| a <= acc[b]));
        assert_eq!(c.fused_predictions, c.branch_predictions[b]);
    }

    #[test]
    fn uniform_scheme_skips_inner_holdout() {
        let bank = toy_bank(6, 1.0, 3);
        let cfg = CvConfig { fusion: FusionScheme::Uniform, ..quick_cfg() };
        let c = run_cell(&bank, &cfg, 0, 1).unwrap();
        assert!(c.inner_accuracies.is_none());
        assert_eq!(c.weights, vec![1.0; 9]);
    }

    #[test]
    fn degenerate_inner_split_is_an_error() {
        let mut bank = toy_bank(6, 1.0, 4);
        // Only one positive subject overall: some inner split must lack it.
        for (i, s) in bank.subjects.iter_mut().enumerate() {
            s.label = Label::from_positive(i == 0);
        }
        let train: Vec<usize> = (0..12).collect();
        let err = inner_split(&bank, &train, &quick_cfg(), 1);
        assert!(err.is_err());
    }

    #[test]
    fn aggregate_is_mean_of_cells() {
        let bank = toy_bank(6, 1.0, 5);
        let report = run_cv(&bank, &CvConfig { fusion: FusionScheme::Uniform, ..quick_cfg() }).unwrap();
        assert_eq!(report.cells.len(), 5);
        let mean = report.cells.iter().map(|c| c.fused.accuracy).sum::<f64>() / 5.0;
        assert!((report.fused.accuracy.mean - mean).abs() < 1e-12);
        let back = CvReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn skip_global_pooling_keeps_full_maps() {
        let cfg = CvConfig { skip_global_pooling: true, ..CvConfig::default() };
        let s = cfg.input_shape((61, 3, 3, 1536)).unwrap();
        assert_eq!((s.slices, s.channels), (61, 1536));
        let s = CvConfig::default().input_shape((61, 3, 3, 1536)).unwrap();
        assert_eq!((s.slices, s.channels), (30, 384));
        assert_eq!(classifier_parameters(Architecture::AlternatingConv, s), 62_043);
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use vox2p1d::cv::{run_cv, Branch, CvReport, MetricSummary};
use vox2p1d::decomposition::ExtractorDescriptor;
use vox2p1d::eval::Summary;
use vox2p1d::net1d::{parameter_count_for, InputShape};
use vox2p1d::volume::{generate_phantom_cohort, DatasetManifest, PhantomSpec};
use vox2p1d::{Error, Result};

use crate::config::PipelineConfig;
use crate::extract::{extract_features, Extraction};

pub const REPORT_FILE: &str = "cv_report.json";
pub const SUMMARY_FILE: &str = "cv_summary.txt";
/// Total trainable parameters quoted for the published model.
pub const PUBLISHED_TOTAL_PARAMETERS: usize = 115_259;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a phantom cohort described by the JSON spec file into `out`.
pub fn cmd_synth(spec_path: &Path, out: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Error::invalid(format!("cannot read phantom spec {}: {e}", spec_path.display())))?;
    let spec: PhantomSpec = serde_json::from_str(&text).map_err(|e| Error::invalid(format!("phantom spec: {e}")))?;
    generate_phantom_cohort(&spec, out)
}

pub fn cmd_extract(cfg: &PipelineConfig, cache: &Path) -> Result<Extraction> {
    extract_features(cfg, cache).map_err(|e| e.context("extract"))
}

/// Extracts (or reuses) features, runs cross-validation and writes the
/// JSON report and the summary table under `out`.
pub fn cmd_cv(cfg: &PipelineConfig, out: &Path, cache: &Path) -> Result<CvReport> {
    let extraction = cmd_extract(cfg, cache)?;
    let mut report = run_cv(&extraction.bank, &cfg.cv_config()).map_err(|e| e.context("cv"))?;
    report.config_hash = Some(cfg.config_hash());
    write(&out.join(REPORT_FILE), &report.to_json())?;
    write(&out.join(SUMMARY_FILE), &summary_table(&report))?;
    Ok(report)
}

pub fn load_report(path: &Path) -> Result<CvReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CvReport::from_json(&text)
}

/// Human-readable rendering of a saved report with the parameter audit.
pub fn cmd_report(path: &Path) -> Result<String> {
    let report = load_report(path)?;
    let mut s = summary_table(&report);
    s.push('\n');
    s.push_str(&parameter_table(&report));
    s.push('\n');
    s.push_str(&reference_audit());
    s.push('\n');
    s.push_str(&cell_table(&report));
    Ok(s)
}

fn pct(v: &Option<Summary>) -> String {
    match v {
        Some(s) => format!("{:6.2} ± {:5.2}", 100.0 * s.mean, 100.0 * s.std),
        None => format!("{:>15}", "n/a"),
    }
}

fn ratio(v: &Option<Summary>) -> String {
    match v {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std),
        None => format!("{:>15}", "n/a"),
    }
}

fn summary_row(name: &str, m: &MetricSummary) -> String {
    format!(
        "{name:<16} {} {} {} {}\n",
        pct(&Some(m.accuracy.clone())),
        pct(&m.specificity),
        pct(&m.sensitivity),
        ratio(&m.roc_auc)
    )
}

/// One row per branch plus the fused row; columns Acc, Sp, Se, ROC-AUC.
pub fn summary_table(report: &CvReport) -> String {
    let mut s = String::new();
    let c = &report.config;
    writeln!(s, "config hash: {}", report.config_hash.as_deref().unwrap_or("none")).unwrap();
    writeln!(
        s,
        "{} subjects, {}-fold x {} repeats, base seed {}",
        report.n_subjects, c.n_folds, c.n_repeats, c.base_seed
    )
    .unwrap();
    writeln!(
        s,
        "ablations: skip_global_pooling={} skip_net1d={} skip_fusion={}",
        c.skip_global_pooling, c.skip_net1d, c.skip_fusion
    )
    .unwrap();
    writeln!(s, "{:<16} {:>15} {:>15} {:>15} {:>15}", "branch", "Acc(%)", "Sp(%)", "Se(%)", "ROC-AUC").unwrap();
    for b in &report.branches {
        s.push_str(&summary_row(&b.branch.name(), &b.summary));
    }
    let fused = if c.skip_fusion { "best branch" } else { "fused" };
    s.push_str(&summary_row(fused, &report.fused));
    s
}

pub fn parameter_table(report: &CvReport) -> String {
    let mut s = String::from("trainable parameters\n");
    for b in &report.branches {
        let i = b.input;
        writeln!(
            s,
            "{:<16} {:?} J={} W={} H={} K={}: {}",
            b.branch.name(),
            b.architecture,
            i.slices,
            i.width,
            i.height,
            i.channels,
            b.parameter_count
        )
        .unwrap();
    }
    writeln!(s, "{:<16} {}", "total", report.total_parameters).unwrap();
    s
}

/// Parameter counts at the reference geometry: 121x145x121 volumes padded
/// to even dims and halved, 3x3x1536 extractor maps.
pub fn reference_branch_inputs() -> Vec<(Branch, InputShape)> {
    let sub = [122 / 2, 146 / 2, 122 / 2];
    let (w, h, ch) = ExtractorDescriptor::reference().out_dims;
    Branch::all()
        .into_iter()
        .map(|b| {
            let n = sub[b.view.slice_axis()];
            (b, InputShape { slices: n / 2, width: w, height: h, channels: ch / 4 })
        })
        .collect()
}

pub fn reference_audit() -> String {
    let mut s = String::from("reference geometry audit\n");
    let mut total = 0;
    for (b, input) in reference_branch_inputs() {
        let count = parameter_count_for(input);
        total += count;
        if b.metric == vox2p1d::volume::Metric::Gm {
            writeln!(s, "{:<10} J={} K={}: {count}", b.view.as_str(), input.slices, input.channels).unwrap();
        }
    }
    writeln!(s, "all nine branches: {total}").unwrap();
    writeln!(s, "published total: {PUBLISHED_TOTAL_PARAMETERS} (not comparable — counting convention unstated)")
        .unwrap();
    s
}

pub fn reference_total() -> usize {
    reference_branch_inputs().into_iter().map(|(_, i)| parameter_count_for(i)).sum()
}

pub fn cell_table(report: &CvReport) -> String {
    let mut s = String::from("cells\n");
    writeln!(
        s,
        "{:>6} {:>4} {:>20} {:>8} {:>8} {:>8} {:>8}  selected",
        "repeat", "fold", "seed", "Acc", "Sp", "Se", "AUC"
    )
    .unwrap();
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    for c in &report.cells {
        writeln!(
            s,
            "{:>6} {:>4} {:>20} {:>8.4} {:>8} {:>8} {:>8}  {}",
            c.repeat,
            c.fold,
            c.repeat_seed,
            c.fused.accuracy,
            opt(c.fused.specificity),
            opt(c.fused.sensitivity),
            opt(c.fused.roc_auc),
            c.selected_branch.map_or_else(|| "-".to_string(), |b| b.name())
        )
        .unwrap();
    }
    s
}

pub fn report_path(out: &Path) -> PathBuf {
    out.join(REPORT_FILE)
}

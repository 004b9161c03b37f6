//! Accuracy matrices and significance-annotated method comparisons.
//!
//! Two pairings are offered. `Bootstrap` resamples each run's final test
//! predictions (200 examples, 10 times, with one shared seed so replicate
//! `k` of every run uses the same indices) and runs the signed-rank test
//! over the replicates. `AcrossSeeds` pairs runs of two methods by seed and
//! tests the final accuracies directly, which avoids treating resamples of
//! one test set as independent evidence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ida::RunRecord;
use crate::stats::{bootstrap_eval, wilcoxon_one_tailed, Alternative};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Markdown,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "markdown" | "md" => Ok(Format::Markdown),
            _ => Err(Error::InvalidArgument(format!(
                "unknown report format `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    Bootstrap,
    AcrossSeeds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub format: Format,
    pub pairing: Pairing,
    /// Method every other method is compared against; defaults to the
    /// method of the first run.
    pub reference: Option<String>,
    pub subset_size: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            format: Format::Markdown,
            pairing: Pairing::Bootstrap,
            reference: None,
            subset_size: 200,
            repeats: 10,
            seed: 0,
        }
    }
}

/// `↑`/`⇑` when the compared run is significantly better than the reference
/// at `p < 0.05`/`p < 0.01`, `↓`/`⇓` when worse, empty otherwise.
pub fn arrow(a: &[f64], reference: &[f64]) -> &'static str {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len().max(1) as f64;
    let (alt, up) = if mean(a) >= mean(reference) {
        (Alternative::Greater, true)
    } else {
        (Alternative::Less, false)
    };
    match wilcoxon_one_tailed(a, reference, alt) {
        Ok(r) if r.p_value < 0.01 => ["⇓", "⇑"][up as usize],
        Ok(r) if r.p_value < 0.05 => ["↓", "↑"][up as usize],
        _ => "",
    }
}

struct Section {
    title: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn matrix_section(run: &RunRecord) -> Section {
    let kind = if run.incremental {
        ""
    } else {
        ", non-incremental"
    };
    let mut header = vec!["trained".to_string()];
    header.extend(run.domains.iter().cloned());
    Section {
        title: format!("{} ({}, seed {}{kind})", run.run_id, run.method, run.seed),
        header,
        rows: run
            .stages
            .iter()
            .zip(&run.accuracy)
            .map(|(stage, row)| {
                std::iter::once(stage.clone())
                    .chain(row.iter().map(|a| pct(*a)))
                    .collect()
            })
            .collect(),
    }
}

fn check_domains(runs: &[RunRecord]) -> Result<Vec<String>> {
    let first = runs.first().ok_or(Error::Empty("runs"))?;
    let set: BTreeSet<&String> = first.domains.iter().collect();
    for r in runs {
        r.validate()?;
        if r.domains.iter().collect::<BTreeSet<_>>() != set {
            return Err(Error::InvalidArgument(format!(
                "run `{}` covers domains {:?}, expected {:?}",
                r.run_id, r.domains, first.domains
            )));
        }
    }
    Ok(first.domains.clone())
}

fn final_accuracy(run: &RunRecord, domain: &str) -> f64 {
    let k = run
        .domains
        .iter()
        .position(|d| d == domain)
        .expect("domain sets checked");
    run.final_row()[k]
}

fn bootstrap_samples(run: &RunRecord, domain: &str, opts: &ReportOptions) -> Result<Vec<f64>> {
    let (p, l) = match (run.predictions.get(domain), run.labels.get(domain)) {
        (Some(p), Some(l)) => (p, l),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "run `{}` has no stored predictions for `{domain}`",
                run.run_id
            )))
        }
    };
    bootstrap_eval(p, l, opts.subset_size, opts.repeats, opts.seed)
}

fn bootstrap_comparison(
    runs: &[RunRecord],
    domains: &[String],
    reference: &str,
    opts: &ReportOptions,
) -> Result<Section> {
    let base = runs.iter().find(|r| r.method == reference).ok_or_else(|| {
        Error::InvalidArgument(format!("no run of reference method `{reference}`"))
    })?;
    let mut header = vec!["run".to_string()];
    header.extend(domains.iter().cloned());
    let mut rows = Vec::new();
    for run in runs {
        let mut row = vec![run.run_id.clone()];
        for d in domains {
            let mark = if std::ptr::eq(run, base) {
                ""
            } else {
                arrow(
                    &bootstrap_samples(run, d, opts)?,
                    &bootstrap_samples(base, d, opts)?,
                )
            };
            row.push(format!("{}{mark}", pct(final_accuracy(run, d))));
        }
        rows.push(row);
    }
    Ok(Section {
        title: format!(
            "final-stage accuracy vs {} (bootstrap pairing: {} samples × {} repeats)",
            base.run_id, opts.subset_size, opts.repeats
        ),
        header,
        rows,
    })
}

fn seed_comparison(runs: &[RunRecord], domains: &[String], reference: &str) -> Result<Section> {
    let mut by_method: BTreeMap<&str, BTreeMap<u64, &RunRecord>> = BTreeMap::new();
    for r in runs {
        by_method
            .entry(r.method.as_str())
            .or_default()
            .insert(r.seed, r);
    }
    let base = by_method.get(reference).ok_or_else(|| {
        Error::InvalidArgument(format!("no run of reference method `{reference}`"))
    })?;
    let mut header = vec!["method".to_string(), "seeds".to_string()];
    header.extend(domains.iter().cloned());
    let mut rows = Vec::new();
    for (method, seeds) in &by_method {
        let common: Vec<u64> = seeds
            .keys()
            .filter(|s| base.contains_key(s))
            .copied()
            .collect();
        let mut row = vec![method.to_string(), common.len().to_string()];
        for d in domains {
            let mine: Vec<f64> = common.iter().map(|s| final_accuracy(seeds[s], d)).collect();
            let theirs: Vec<f64> = common.iter().map(|s| final_accuracy(base[s], d)).collect();
            let mean = mine.iter().sum::<f64>() / mine.len().max(1) as f64;
            let mark = if *method == reference {
                ""
            } else {
                arrow(&mine, &theirs)
            };
            row.push(format!("{}{mark}", pct(mean)));
        }
        rows.push(row);
    }
    Ok(Section {
        title: format!("mean final-stage accuracy vs {reference} (across-seed pairing)"),
        header,
        rows,
    })
}

fn render(sections: &[Section], format: Format) -> String {
    let mut out = String::new();
    for s in sections {
        match format {
            Format::Csv => {
                let _ = writeln!(out, "# {}", s.title);
                let _ = writeln!(out, "{}", s.header.join(","));
                for r in &s.rows {
                    let _ = writeln!(out, "{}", r.join(","));
                }
            }
            Format::Markdown => {
                let _ = writeln!(out, "### {}\n", s.title);
                let _ = writeln!(out, "| {} |", s.header.join(" | "));
                let _ = writeln!(out, "|{}", "---|".repeat(s.header.len()));
                for r in &s.rows {
                    let _ = writeln!(out, "| {} |", r.join(" | "));
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Renders every run's stage × domain matrix (percent, two decimals) and,
/// for more than one run, a comparison against the reference method.
pub fn report_matrix(runs: &[RunRecord], opts: &ReportOptions) -> Result<String> {
    let domains = check_domains(runs)?;
    let mut sections: Vec<Section> = runs.iter().map(matrix_section).collect();
    if runs.len() > 1 {
        let reference = opts
            .reference
            .clone()
            .unwrap_or_else(|| runs[0].method.clone());
        sections.push(match opts.pairing {
            Pairing::Bootstrap => bootstrap_comparison(runs, &domains, &reference, opts)?,
            Pairing::AcrossSeeds => seed_comparison(runs, &domains, &reference)?,
        });
    }
    Ok(render(&sections, opts.format))
}

/// File-name suffix of serialized run records.
pub const RUN_SUFFIX: &str = ".run.json";

/// Every run record under `dir` or its immediate subdirectories, in path order.
pub fn load_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            for inner in std::fs::read_dir(&path)? {
                paths.push(inner?.path());
            }
        } else {
            paths.push(path);
        }
    }
    paths.retain(|p| p.to_string_lossy().ends_with(RUN_SUFFIX));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no `*{RUN_SUFFIX}` files under {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| RunRecord::load(p)).collect()
}

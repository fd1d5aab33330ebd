//! Report rendering: a CSV of all run results and a plain-text table of
//! variant × protocol means with the pairwise comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{compare_variants, ComparisonEntry, Summary};

pub fn write_results_csv(summary: &Summary, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("variant,task,protocol,fraction,seed,dev_accuracy,epochs,batch_size,learning_rate\n");
    for r in &summary.results {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.student_provenance,
            r.task,
            r.protocol.label(),
            r.fraction,
            r.seed,
            r.dev_accuracy,
            r.selected_hparams.epochs,
            r.selected_hparams.batch_size,
            r.selected_hparams.learning_rate
        )
        .expect("string write");
    }
    write_file(path, out.as_bytes())
}

/// Plain-text table of variant × protocol means (± seed-level sd), the
/// variant ordering, the pairwise comparison, and classifier-floor flags for
/// protocol cells where no variant escaped the majority-class prior.
pub fn render_report(
    summary: &Summary,
    floors: &BTreeMap<String, f64>,
    path: &Path,
) -> Result<()> {
    let comparisons = compare_variants(summary).unwrap_or_default();
    let mut protocols: Vec<String> = summary
        .rows
        .iter()
        .map(|r| r.protocol.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    // in-domain first, then out-domain, then low-resource by fraction.
    protocols.sort_by_key(|p| match p.as_str() {
        "in-domain" => (0, p.clone()),
        "out-domain" => (1, p.clone()),
        _ => (2, p.clone()),
    });

    let mut out = String::new();
    out.push_str("mean dev accuracy by variant and protocol (± sd over seeds)\n");
    out.push_str(&"-".repeat(72));
    out.push('\n');
    write!(out, "{:<16}", "variant").expect("string write");
    for p in &protocols {
        write!(out, "{p:>22}").expect("string write");
    }
    out.push('\n');
    for variant in &summary.ordering {
        write!(out, "{variant:<16}").expect("string write");
        for p in &protocols {
            match (summary.mean_of(variant, p), summary.sd_of(variant, p)) {
                (Some(m), Some(s)) => {
                    write!(out, "{:>22}", format!("{m:.4} ± {s:.4}")).expect("string write")
                }
                _ => write!(out, "{:>22}", "-").expect("string write"),
            }
        }
        out.push('\n');
    }
    out.push('\n');
    out.push_str("variants ordered by out-domain mean:\n");
    for (i, v) in summary.ordering.iter().enumerate() {
        let mean = summary.mean_of(v, "out-domain").unwrap_or(f64::NAN);
        writeln!(out, "  {}. {v} ({mean:.4})", i + 1).expect("string write");
    }
    out.push('\n');
    out.push_str("pairwise comparison (difference, pooled sd over seeds)\n");
    out.push_str(&"-".repeat(72));
    out.push('\n');
    for c in &comparisons {
        writeln!(
            out,
            "{:<14} vs {:<14} {:<20} {:+.4} (pooled sd {:.4}) {}",
            c.variant_a,
            c.variant_b,
            c.protocol,
            c.difference,
            c.pooled_sd,
            if c.conclusive { "conclusive" } else { "inconclusive" }
        )
        .expect("string write");
    }

    // Per (task, fraction): flag cells where every variant sits at or below
    // the majority-class floor (expected at tiny fractions).
    let mut floor_flags = Vec::new();
    let mut by_cell: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &summary.results {
        by_cell
            .entry((r.task.clone(), format!("{}", r.fraction)))
            .or_default()
            .push(r.dev_accuracy);
    }
    for ((task, fraction), accs) in &by_cell {
        if let Some(&floor) = floors.get(task) {
            if accs.iter().all(|a| *a <= floor + 1e-9) {
                floor_flags.push(format!(
                    "  task {task} at fraction {fraction}: all variants at the classifier floor ({floor:.4})"
                ));
            }
        }
    }
    out.push('\n');
    if floor_flags.is_empty() {
        out.push_str("classifier-floor cells: none\n");
    } else {
        out.push_str("classifier-floor cells (not interpreted):\n");
        for f in floor_flags {
            out.push_str(&f);
            out.push('\n');
        }
    }
    write_file(path, out.as_bytes())
}

pub fn comparison_entries(summary: &Summary) -> Result<Vec<ComparisonEntry>> {
    compare_variants(summary)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

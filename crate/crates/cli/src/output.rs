//! Artifact writers. Floats use the shortest round-trip representation so
//! reruns with the same seed produce identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use schwarz_core::experiments::{ExperimentConfig, ExperimentOutput};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    let path = dir.join(name);
    csv::Writer::from_path(&path).with_context(|| format!("cannot create {}", path.display()))
}

pub fn write_all(dir: &Path, cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let id = cfg.experiment.name();

    let mut w = csv_writer(dir, "errors.csv")?;
    w.write_record(["experiment_id", "overlap_or_solver", "k", "e_k"])?;
    for r in &out.errors {
        w.write_record([id, &r.series, &r.k.to_string(), &r.error.to_string()])?;
    }
    w.flush()?;

    let mut w = csv_writer(dir, "rates.csv")?;
    w.write_record([
        "overlap",
        "overlap_fraction",
        "tau",
        "mean_rate",
        "theoretical_bound",
        "final_error",
        "unconverged_solves",
    ])?;
    for r in &out.rates {
        w.write_record([
            r.series.clone(),
            r.overlap.to_string(),
            r.tau.to_string(),
            opt(r.mean_rate),
            opt(r.theoretical_bound),
            r.final_error.to_string(),
            r.unconverged_solves.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(dir, "fit.csv")?;
    w.write_record(["tau_unit", "c_hat", "rho_hat"])?;
    for f in &out.fits {
        w.write_record([f.tau_unit, &f.c_hat.to_string(), &f.rho_hat.to_string()])?;
    }
    w.flush()?;

    let mut w = csv_writer(dir, "constants.csv")?;
    w.write_record(["name", "value"])?;
    for (k, v) in &out.constants {
        w.write_record([k, &v.to_string()])?;
    }
    w.flush()?;

    fs::write(dir.join("report.txt"), report_text(cfg, out))?;
    fs::write(dir.join("plot.gp"), gnuplot_script(cfg, out))?;
    Ok(())
}

pub fn report_text(cfg: &ExperimentConfig, out: &ExperimentOutput) -> String {
    let mut s = Vec::new();
    let _ = writeln!(s, "# experiment {}", cfg.experiment.name());
    let _ = writeln!(s, "# problem {} {:?}", cfg.problem, cfg.params);
    let methods: Vec<&str> = cfg.integrators.iter().map(|m| m.name()).collect();
    let _ = writeln!(
        s,
        "# dt_reference {} dt_subproblem {} m {} integrators {} seed {}",
        cfg.dt_reference,
        cfg.dt_subproblem,
        cfg.m,
        methods.join(","),
        cfg.seed
    );
    for c in &out.checks {
        let _ = writeln!(s, "{}", c);
    }
    for n in &out.notes {
        let _ = writeln!(s, "NOTE {}", n);
    }
    let failed = out.checks.iter().filter(|c| !c.pass).count();
    let _ = writeln!(s, "SUMMARY {} checks, {} failed", out.checks.len(), failed);
    String::from_utf8(s).expect("ascii report")
}

/// Data-only plot script: reads the CSVs written next to it.
pub fn gnuplot_script(cfg: &ExperimentConfig, out: &ExperimentOutput) -> String {
    let mut series: Vec<&str> = Vec::new();
    for r in &out.errors {
        if !series.contains(&r.series.as_str()) {
            series.push(&r.series);
        }
    }
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset key outside\nset logscale y\nset format y '%.0e'\n");
    s.push_str("set terminal pngcairo size 900,600\n");
    s.push_str(&format!("set output '{}_errors.png'\n", cfg.experiment.name()));
    s.push_str("set xlabel 'k'\nset ylabel 'e_k'\n");
    let plots: Vec<String> = series
        .iter()
        .map(|name| {
            format!("'errors.csv' using ($2 eq '{0}' ? $3 : 1/0):4 with linespoints title '{0}'", name)
        })
        .collect();
    if !plots.is_empty() {
        s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    }
    if !out.rates.is_empty() && out.rates.iter().any(|r| r.mean_rate.is_some()) {
        s.push_str(&format!("set output '{}_rates.png'\n", cfg.experiment.name()));
        s.push_str("set xlabel 'overlap (%)'\nset ylabel 'mean rate'\n");
        s.push_str("plot 'rates.csv' skip 1 using ($2*100):4 with linespoints title 'measured'");
        if let Some(f) = out.fits.iter().find(|f| f.tau_unit == "percent") {
            s.push_str(&format!(", {} * exp(-{} * x) title 'fit'", f.c_hat, f.rho_hat));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use schwarz_core::experiments::{Check, ErrorRow, Experiment, FitRow};

    #[test]
    fn report_lists_checks_and_summary() {
        let cfg = ExperimentConfig::preset(Experiment::OverlapSweep);
        let out = ExperimentOutput {
            checks: vec![Check { name: "a".into(), pass: true, measured: 1.0, bound: "<2".into() }],
            notes: vec!["hello".into()],
            ..Default::default()
        };
        let text = report_text(&cfg, &out);
        assert!(text.contains("CHECK a PASS 1.000000e0 <2\n"));
        assert!(text.contains("NOTE hello\n"));
        assert!(text.ends_with("SUMMARY 1 checks, 0 failed\n"));
    }

    #[test]
    fn script_has_one_curve_per_series() {
        let cfg = ExperimentConfig::preset(Experiment::OverlapSweep);
        let row = |s: &str| ErrorRow { series: s.into(), k: 1, error: 0.5 };
        let out = ExperimentOutput {
            errors: vec![row("1%"), row("1%"), row("5%")],
            fits: vec![FitRow { tau_unit: "percent", c_hat: 0.9, rho_hat: 0.05 }],
            ..Default::default()
        };
        let gp = gnuplot_script(&cfg, &out);
        assert_eq!(gp.matches("with linespoints title").count(), 2);
        assert!(!gp.contains("rates.png"));
    }
}

//! Aligned plain-text rendering of reports.

use std::fmt::Write;

use adaptpoc_core::contrast::ContrastSet;
use adaptpoc_core::model::DoseResponseModel;
use adaptpoc_sim::analysis::StageReport;
use adaptpoc_sim::AnalysisReport;

fn row(out: &mut String, label: &str, values: &[f64], digits: usize) {
    let _ = write!(out, "  {label:<12}");
    for v in values {
        let _ = write!(out, " {v:>9.digits$}");
    }
    out.push('\n');
}

fn stage(out: &mut String, title: &str, s: &StageReport) {
    let _ = writeln!(out, "{title}");
    row(out, "dose", &s.doses, 3);
    let n: Vec<f64> = s.n.iter().map(|&v| v as f64).collect();
    row(out, "n", &n, 0);
    row(out, "mean", &s.means, 4);
    match s.variance {
        Some(v) => {
            let _ = writeln!(out, "  pooled sd    {:.4}", v.sqrt());
        }
        None => out.push_str("  pooled sd    undefined\n"),
    }
    for (i, c) in s.contrasts.iter().enumerate() {
        row(out, &format!("contrast {}", i + 1), c, 4);
    }
    row(out, "t", &s.statistics, 4);
    row(out, "raw p", &s.raw_p, 4);
    if let (Some(psi), Some(p)) = (s.psi, s.p_value) {
        let _ = writeln!(out, "  statistic    {psi:.4}\n  stage p      {p:.6}");
    }
}

pub fn render(r: &AnalysisReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method       {}\nalpha        {}\n", r.method, r.alpha);
    stage(&mut out, "stage 1", &r.stage1);
    if let Some(a) = &r.adaptation {
        out.push_str("\ninterim\n");
        if a.futility_stop {
            out.push_str("  futility stop\n");
        } else {
            let doses: Vec<String> = a.retained_doses.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "  retained     {}", doses.join(", "));
        }
        let _ = writeln!(out, "  provenance   {}", a.provenance.join(", "));
        if a.degenerate_fallback.iter().any(|&d| d) {
            let _ = writeln!(out, "  fallback     {:?}", a.degenerate_fallback);
        }
    }
    if let Some(s2) = &r.stage2 {
        out.push('\n');
        stage(&mut out, "stage 2", s2);
    }
    out.push('\n');
    if let Some(c) = r.critical_value {
        let _ = writeln!(out, "critical     {c:.4}");
    }
    if let Some(o) = &r.overall {
        let _ = writeln!(out, "combined     {:.4}\noverall p    {:.6}", o.psi, o.p);
    }
    if let Some(c) = &r.crp {
        let _ = writeln!(out, "base crit    {:.4}\ncond. error  {:.4}", c.base_critical, c.conditional_error);
        if let Some(a) = c.adaptive_critical {
            let _ = writeln!(out, "adapt. crit  {a:.4}");
        }
        if !c.combined_statistics.is_empty() {
            row(&mut out, "combined", &c.combined_statistics, 4);
        }
    }
    let _ = writeln!(out, "decision     {}", if r.reject { "reject" } else { "do not reject" });
    out
}

pub fn contrasts(models: &[DoseResponseModel], set: &ContrastSet) -> String {
    let mut out = String::new();
    row(&mut out, "dose", set.doses(), 3);
    let n: Vec<f64> = set.n().iter().map(|&v| v as f64).collect();
    row(&mut out, "n", &n, 0);
    for (m, c) in models.iter().zip(set.coeffs()) {
        row(&mut out, &m.family().to_string(), c, 4);
    }
    out.push_str("\ncorrelation\n");
    let corr = set.corr();
    for (i, m) in models.iter().enumerate() {
        let r: Vec<f64> = (0..corr.ncols()).map(|j| corr[(i, j)]).collect();
        row(&mut out, &m.family().to_string(), &r, 4);
    }
    out
}

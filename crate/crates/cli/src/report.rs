use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::stages::Outcome;

fn json<T: Serialize>(value: &T, pretty: bool) -> String {
    let mut s = if pretty { serde_json::to_string_pretty(value) } else { serde_json::to_string(value) }
        .expect("artifacts serialize");
    s.push('\n');
    s
}

/// Write all artifacts of `outcome` into `dir`; returns the written paths.
pub fn write_all(dir: &Path, outcome: &Outcome, pretty: bool) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files: Vec<(&str, String)> = Vec::new();
    if let Some(s) = &outcome.spectrum {
        files.push(("spectrum.json", json(s, pretty)));
    }
    if let Some(w) = &outcome.widths {
        files.push(("widths.json", json(w, pretty)));
    }
    if let Some(s) = &outcome.stability {
        files.push(("stability.json", json(s, pretty)));
    }
    if let Some(t) = &outcome.trajectory {
        files.push(("trajectory.csv", t.to_csv()));
    }
    if let Some(p) = &outcome.propagation {
        files.push(("propagation.json", json(p, pretty)));
    }
    if let Some(rows) = &outcome.purity_rows {
        let mut s = String::from("t,purity,closed_form\n");
        for r in rows {
            writeln!(s, "{:.12e},{:.15e},{:.15e}", r[0], r[1], r[2]).unwrap();
        }
        files.push(("purity.csv", s));
    }
    files.push(("checks.json", json(&outcome.checks, pretty)));
    files.push(("summary.md", summary(outcome)));
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

/// Human-readable tables; every number also appears in one of the JSON files.
pub fn summary(outcome: &Outcome) -> String {
    let mut s = String::from("# Resonance width run\n");
    if let Some(spec) = &outcome.spectrum {
        s.push_str("\n## Spectrum (spectrum.json)\n\n| run | hermitian | sector | states | lowest Re ε |\n|---|---|---|---|---|\n");
        for e in spec {
            for sec in &e.sectors {
                let low = sec.eigenvalues.first().map(|z| format!("{:.8}", z.re)).unwrap_or_default();
                writeln!(s, "| {} | {} | N={} | {} | {} |", e.label, e.hermitian, sec.particles, sec.eigenvalues.len(), low).unwrap();
            }
        }
    }
    if let Some(w) = &outcome.widths {
        s.push_str("\n## Widths (widths.json)\n");
        for run in &w.runs {
            let r = &run.report;
            writeln!(
                s,
                "\n### {} ({:?})\n\nε_res = {:.10} {:+.6e}i, Γ = {:.8e}, Γ − ΣΓ_p = {:.3e}\n",
                run.label, r.method, r.resonance_energy.re, r.resonance_energy.im, r.gamma_total, r.sum_residual
            )
            .unwrap();
            s.push_str("| p | ε_p | Γ_p | Γ_p/Γ |\n|---|---|---|---|\n");
            for p in &r.partials {
                writeln!(s, "| {} | {:.8} | {:.8e} | {:.6} |", p.p, p.energy, p.gamma_p, p.gamma_p / r.gamma_total).unwrap();
            }
            for warn in &r.warnings {
                writeln!(s, "\nwarning: {warn}").unwrap();
            }
        }
        for c in &w.cross_checks {
            writeln!(
                s,
                "\n### CAP vs ECS: {} vs {}\n\n| quantity | CAP | ECS | relative |\n|---|---|---|---|\n| Γ | {:.8e} | {:.8e} | {:.3e} |",
                c.cap, c.ecs, c.gamma_cap, c.gamma_ecs, c.gamma_relative
            )
            .unwrap();
            for d in &c.channels {
                let mark = if d.checked { "" } else { " (below floor)" };
                writeln!(s, "| Γ_p at {:.8}{mark} | {:.8e} | {:.8e} | {:.3e} |", d.energy, d.cap, d.ecs, d.relative).unwrap();
            }
        }
    }
    if let Some(st) = &outcome.stability {
        for sc in &st.scans {
            let r = &sc.report;
            writeln!(
                s,
                "\n## Scan of {:?} for {} (stability.json)\n\nΓ drift {:.3e}, tolerance {:.1e}, residual monotone {}, {}\n",
                r.parameter,
                sc.label,
                r.gamma_drift,
                r.tolerance,
                r.residual_monotone,
                if r.pass { "PASS" } else { "FAIL" }
            )
            .unwrap();
            s.push_str("| value | Re ε | Γ | Γ − ΣΓ_p | Γ_p |\n|---|---|---|---|---|\n");
            for row in &r.rows {
                let ps: Vec<String> = row.partials.iter().map(|g| format!("{g:.6e}")).collect();
                writeln!(
                    s,
                    "| {} | {:.10} | {:.8e} | {:.3e} | {} |",
                    row.value,
                    row.energy.re,
                    row.gamma,
                    row.sum_residual,
                    ps.join(", ")
                )
                .unwrap();
            }
        }
    }
    if let Some(p) = &outcome.propagation {
        writeln!(
            s,
            "\n## Propagation of {} (propagation.json, trajectory.csv)\n\n| quantity | value |\n|---|---|\n| t_end | {:.6e} |\n| max |P_res − e^(−Γt)| | {:.3e} |\n| max |P_p − rate equation| | {:.3e} |\n| max |Tr ρ − 1| | {:.3e} |\n| min block eigenvalue | {:.3e} |",
            p.label, p.final_time, p.decay_law_error, p.rate_error, p.trace_error, p.min_eigenvalue
        )
        .unwrap();
        if let (Some(e), Some(a)) = (p.purity_error, p.purity_asymptote) {
            writeln!(s, "| max |Tr ρ² − closed form| | {e:.3e} |\n| purity asymptote | {a:.10} |").unwrap();
        }
    }
    s.push_str("\n## Checks (checks.json)\n\n| check | value | limit | result |\n|---|---|---|---|\n");
    for c in &outcome.checks {
        writeln!(s, "| {} | {:.3e} | {:.1e} | {} |", c.name, c.value, c.limit, if c.pass { "PASS" } else { "FAIL" }).unwrap();
    }
    s
}

use std::collections::BTreeSet;

use num_complex::Complex64;
use rayon::prelude::*;
use reswidth_core::lindblad::{Trajectory, rate_oracle};
use reswidth_core::model::{AbsorberSpec, GridModel};
use reswidth_core::pipeline::{
    PipelineError, Propagator, ScanReport, Solution, prepare, propagate_resonance, scan_point, scan_report, solve,
};
use reswidth_core::spectral::{ScanParameter, StabilityRecord};
use reswidth_core::widths::{WidthReport, purity_closed_form};
use serde::Serialize;

use crate::config::{AbsorberRun, ExperimentConfig, PropagatorKind, Stage};

#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` ({label}): {source}")]
pub struct StageError {
    pub stage: &'static str,
    pub label: String,
    #[source]
    pub source: PipelineError,
}

fn at(stage: &'static str, label: &str) -> impl FnOnce(PipelineError) -> StageError {
    let label = label.to_owned();
    move |source| StageError { stage, label, source }
}

/// One hard assertion of the run.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, pass: value <= limit }
    }

    fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, pass: value >= limit }
    }
}

#[derive(Debug, Serialize)]
pub struct SectorSpectrum {
    pub particles: usize,
    pub eigenvalues: Vec<Complex64>,
}

#[derive(Debug, Serialize)]
pub struct SpectrumEntry {
    pub label: String,
    pub absorber: AbsorberSpec,
    pub hermitian: bool,
    pub sectors: Vec<SectorSpectrum>,
}

#[derive(Debug, Serialize)]
pub struct ChannelSummary {
    pub energy: f64,
    pub cap_overlap: f64,
}

#[derive(Debug, Serialize)]
pub struct WidthsEntry {
    pub label: String,
    pub absorber: AbsorberSpec,
    pub report: WidthReport,
    /// CAP in an orbital space: the grid formula on back-projected amplitudes.
    pub grid_report: Option<WidthReport>,
    pub channels: Vec<ChannelSummary>,
}

#[derive(Debug, Serialize)]
pub struct ChannelDelta {
    pub energy: f64,
    pub cap: f64,
    pub ecs: f64,
    pub relative: f64,
    pub checked: bool,
}

#[derive(Debug, Serialize)]
pub struct CrossCheck {
    pub cap: String,
    pub ecs: String,
    pub gamma_cap: f64,
    pub gamma_ecs: f64,
    pub gamma_relative: f64,
    pub channels: Vec<ChannelDelta>,
}

#[derive(Debug, Serialize)]
pub struct WidthsArtifact {
    pub runs: Vec<WidthsEntry>,
    pub cross_checks: Vec<CrossCheck>,
}

#[derive(Debug, Serialize)]
pub struct LabelledRecord {
    pub label: String,
    pub record: StabilityRecord,
}

#[derive(Debug, Serialize)]
pub struct LabelledScan {
    pub label: String,
    pub report: ScanReport,
}

#[derive(Debug, Serialize)]
pub struct StabilityArtifact {
    pub identification: Vec<LabelledRecord>,
    pub scans: Vec<LabelledScan>,
}

#[derive(Debug, Serialize)]
pub struct PropagationArtifact {
    pub label: String,
    pub gamma: f64,
    pub final_time: f64,
    pub samples: usize,
    pub decay_law_error: f64,
    pub rate_error: f64,
    /// `P_p(t_end)/(1 − e^{−Γ t_end}) − Γ_p/Γ` per channel.
    pub branching_error: Vec<f64>,
    pub trace_error: f64,
    pub min_eigenvalue: f64,
    pub purity_error: Option<f64>,
    pub purity_asymptote: Option<f64>,
}

/// Everything a run produced; the writer turns it into files.
#[derive(Default)]
pub struct Outcome {
    pub spectrum: Option<Vec<SpectrumEntry>>,
    pub widths: Option<WidthsArtifact>,
    pub stability: Option<StabilityArtifact>,
    pub trajectory: Option<Trajectory>,
    pub purity_rows: Option<Vec<[f64; 3]>>,
    pub propagation: Option<PropagationArtifact>,
    pub checks: Vec<Check>,
}

pub fn execute(
    config: &ExperimentConfig,
    model: &GridModel,
    stages: &BTreeSet<Stage>,
    pool: &rayon::ThreadPool,
) -> Result<Outcome, StageError> {
    let mut out = Outcome::default();
    if stages.contains(&Stage::Spectrum) {
        out.spectrum = Some(pool.install(|| spectra(config, model))?);
    }
    let dynamics = stages.contains(&Stage::Propagate) || stages.contains(&Stage::Purity);
    let want_widths = stages.contains(&Stage::Widths);
    let mut solutions: Vec<(usize, Solution)> = Vec::new();
    if want_widths || dynamics {
        let wanted: Vec<usize> = if want_widths {
            (0..config.absorbers.len()).collect()
        } else {
            let label = &config.propagation_run().expect("validated").label;
            config.absorbers.iter().position(|a| &a.label == label).into_iter().collect()
        };
        solutions = pool.install(|| {
            wanted
                .par_iter()
                .map(|&i| {
                    let run = &config.absorbers[i];
                    solve(&config.setup(model, run), &run.scan, &config.search)
                        .map(|s| (i, s))
                        .map_err(at("widths", &run.label))
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
    }
    let mut identification = Vec::new();
    if want_widths {
        let mut runs = Vec::new();
        for (i, sol) in &solutions {
            let run = &config.absorbers[*i];
            let gamma = sol.report.gamma_total;
            out.checks.push(Check::at_most(
                format!("{}: |Γ − ΣΓ_p|/Γ", run.label),
                sol.report.sum_residual.abs() / gamma,
                run.sum_residual.unwrap_or(config.tolerances.sum_residual),
            ));
            identification.push(LabelledRecord { label: run.label.clone(), record: sol.resonance.stability.clone() });
            runs.push(WidthsEntry {
                label: run.label.clone(),
                absorber: run.spec,
                report: sol.report.clone(),
                grid_report: sol.grid_report.clone(),
                channels: sol.channels.iter().map(|c| ChannelSummary { energy: c.energy, cap_overlap: c.cap_overlap }).collect(),
            });
        }
        let cross_checks = cross_checks(&runs, config.tolerances.drift_floor);
        for c in &cross_checks {
            let name = format!("{} vs {}", c.cap, c.ecs);
            out.checks.push(Check::at_most(format!("{name}: Γ relative"), c.gamma_relative, config.tolerances.cross_total));
            for d in c.channels.iter().filter(|d| d.checked) {
                out.checks.push(Check::at_most(
                    format!("{name}: Γ_p relative at {:.6}", d.energy),
                    d.relative,
                    config.tolerances.cross_partial,
                ));
            }
        }
        out.widths = Some(WidthsArtifact { runs, cross_checks });
    }
    let mut scans = Vec::new();
    if stages.contains(&Stage::Scan) {
        for run in &config.absorbers {
            let report = pool.install(|| scan(config, model, run))?;
            out.checks.push(Check::at_most(format!("{}: scan drift of Γ", run.label), report.gamma_drift, report.tolerance));
            for (e, d) in &report.partial_drifts {
                out.checks.push(Check::at_most(format!("{}: scan drift of Γ_p at {e:.6}", run.label), *d, report.tolerance));
            }
            if report.parameter == ScanParameter::Onset {
                let v = if report.residual_monotone { 1.0 } else { 0.0 };
                out.checks.push(Check::at_least(format!("{}: residual shrinks with onset", run.label), v, 1.0));
            }
            scans.push(LabelledScan { label: run.label.clone(), report });
        }
    }
    if want_widths || !scans.is_empty() {
        out.stability = Some(StabilityArtifact { identification, scans });
    }
    if dynamics {
        let run = config.propagation_run().expect("validated");
        let sol = solutions
            .iter()
            .find(|(i, _)| config.absorbers[*i].label == run.label)
            .map(|(_, s)| s)
            .expect("propagated run was solved");
        dynamics_stage(config, run, sol, stages.contains(&Stage::Purity), &mut out)?;
    }
    Ok(out)
}

fn spectra(config: &ExperimentConfig, model: &GridModel) -> Result<Vec<SpectrumEntry>, StageError> {
    config
        .absorbers
        .par_iter()
        .map(|run| {
            let err = || at("spectrum", &run.label);
            let p = prepare(&config.setup(model, run)).map_err(err())?;
            let hermitian = p.top_ah.matrix.iter().chain(p.next_ah.matrix.iter()).all(|c| *c == Complex64::new(0.0, 0.0));
            let mut sectors = Vec::new();
            for (particles, mut eigenvalues) in
                [(p.particles, p.top_eigenvalues().map_err(err())?), (p.particles - 1, p.next_eigenvalues().map_err(err())?)]
            {
                if hermitian {
                    eigenvalues.iter_mut().for_each(|z| z.im = 0.0);
                }
                eigenvalues.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
                sectors.push(SectorSpectrum { particles, eigenvalues });
            }
            Ok(SpectrumEntry { label: run.label.clone(), absorber: run.spec, hermitian, sectors })
        })
        .collect()
}

fn scan(config: &ExperimentConfig, model: &GridModel, run: &AbsorberRun) -> Result<ScanReport, StageError> {
    let setup = config.setup(model, run);
    let points = run
        .scan
        .values
        .par_iter()
        .map(|&v| scan_point(&setup, run.scan.parameter, v))
        .collect::<Result<Vec<_>, _>>()
        .map_err(at("scan", &run.label))?;
    let t = &config.tolerances;
    let drift = run.scan_drift.unwrap_or(t.scan_drift);
    scan_report(points, run.scan.parameter, &config.search, drift, t.drift_floor).map_err(at("scan", &run.label))
}

fn cross_checks(runs: &[WidthsEntry], floor: f64) -> Vec<CrossCheck> {
    let mut out = Vec::new();
    for cap in runs.iter().filter(|r| matches!(r.absorber, AbsorberSpec::Cap { .. })) {
        for ecs in runs.iter().filter(|r| matches!(r.absorber, AbsorberSpec::Ecs { .. })) {
            let (a, b) = (&cap.report, &ecs.report);
            let channels = a
                .partials
                .iter()
                .filter_map(|p| {
                    let q = b.partials.iter().find(|q| (q.energy - p.energy).abs() <= 1e-6 * p.energy.abs().max(1.0))?;
                    Some(ChannelDelta {
                        energy: p.energy,
                        cap: p.gamma_p,
                        ecs: q.gamma_p,
                        relative: (p.gamma_p - q.gamma_p).abs() / q.gamma_p.abs().max(f64::MIN_POSITIVE),
                        checked: p.gamma_p >= floor * a.gamma_total && q.gamma_p >= floor * b.gamma_total,
                    })
                })
                .collect();
            out.push(CrossCheck {
                cap: cap.label.clone(),
                ecs: ecs.label.clone(),
                gamma_cap: a.gamma_total,
                gamma_ecs: b.gamma_total,
                gamma_relative: (a.gamma_total - b.gamma_total).abs() / b.gamma_total,
                channels,
            });
        }
    }
    out
}

fn dynamics_stage(
    config: &ExperimentConfig,
    run: &AbsorberRun,
    sol: &Solution,
    purity: bool,
    out: &mut Outcome,
) -> Result<(), StageError> {
    let p = config.propagation.as_ref().expect("validated");
    let gamma = sol.report.gamma_total;
    let t_end = p.horizon / gamma;
    let times: Vec<f64> = (0..p.samples).map(|i| t_end * i as f64 / (p.samples - 1) as f64).collect();
    let step = p.step / gamma;
    let propagator = match p.method {
        PropagatorKind::Exponential => Propagator::Exponential { max_step: step },
        PropagatorKind::Rk4 => Propagator::Rk4 { dt: step },
        PropagatorKind::Adaptive => Propagator::Adaptive { dt: step, tol: p.tol },
    };
    let traj = propagate_resonance(sol, &times, propagator).map_err(at("propagate", &run.label))?;
    let partials = sol.report.gammas();
    let oracle = rate_oracle(gamma, &partials, &times).map_err(|e| at("propagate", &run.label)(e.into()))?;
    let decay_law_error = traj.times.iter().zip(&traj.p_res).map(|(t, p)| (p - (-gamma * t).exp()).abs()).fold(0.0, f64::max);
    let mut rate_error = oracle.p_res.iter().zip(&traj.p_res).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    for (c, curve) in oracle.channels.iter().enumerate() {
        for (i, v) in curve.iter().enumerate() {
            rate_error = rate_error.max((traj.populations[i][c] - v).abs());
        }
    }
    let last = traj.times.len() - 1;
    let absorbed = -(-gamma * t_end).exp_m1();
    let branching_error = partials.iter().enumerate().map(|(c, g)| traj.populations[last][c] / absorbed - g / gamma).collect();
    let min_eigenvalue = traj.min_eigenvalue.iter().cloned().fold(f64::INFINITY, f64::min);
    let t = &config.tolerances;
    out.checks.push(Check::at_most("propagation: max |P_res − e^{−Γt}|", decay_law_error, t.decay_law));
    out.checks.push(Check::at_most("propagation: max |P_p − rate equation|", rate_error, t.rates));
    out.checks.push(Check::at_most("propagation: max |Tr ρ − 1|", traj.max_trace_error(), t.trace));
    out.checks.push(Check::at_least("propagation: min block eigenvalue", min_eigenvalue, -t.positivity));
    let mut art = PropagationArtifact {
        label: run.label.clone(),
        gamma,
        final_time: t_end,
        samples: p.samples,
        decay_law_error,
        rate_error,
        branching_error,
        trace_error: traj.max_trace_error(),
        min_eigenvalue,
        purity_error: None,
        purity_asymptote: None,
    };
    if purity {
        let closed = purity_closed_form(&sol.report.kappa, &sol.report.energies(), gamma, &times);
        let rows: Vec<[f64; 3]> = times.iter().zip(&traj.purity).zip(&closed.values).map(|((t, a), b)| [*t, *a, *b]).collect();
        let err = rows.iter().map(|r| (r[1] - r[2]).abs()).fold(0.0, f64::max);
        out.checks.push(Check::at_most("purity: max |Tr ρ² − closed form|", err, t.purity));
        art.purity_error = Some(err);
        art.purity_asymptote = Some(closed.asymptote);
        out.purity_rows = Some(rows);
    }
    out.trajectory = Some(traj);
    out.propagation = Some(art);
    Ok(())
}

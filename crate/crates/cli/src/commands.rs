//! Subcommand bodies. Each returns the paths it wrote.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde_json::json;
use tpshock_core::experiments::{
    build_iteration_tables, decay_report, extract_phase, fit_l_coefficients, gaussian_perturbation, iterate_fixed_point,
    perturbed_state, run_perturbation, FixedPointOptions, IterationGrid, PhaseOptions, RunOptions,
};
use tpshock_core::floquet::{spectral_stability_report, SpectralOptions};
use tpshock_core::flux::{characteristic_data, ShockCharacteristics};
use tpshock_core::greens::{
    check_template_bound, decompose_green, fit_template_constants, greens_column, template_bundle, GreenDecomposition,
    Region,
};
use tpshock_core::pde::{evolve_nonlinear, mass, GridSpec};
use tpshock_core::profiles::{solve_stationary_profile, PeriodicCoefficientField, ShockProfile};
use tpshock_core::spatial::{evans_circle, evans_value, winding_number, TransportOptions};

use crate::config::RunConfig;
use crate::failure::{Failure, Staged};
use crate::output::{sibling, write_json, write_provenance, Csv};

pub struct Run {
    pub command: &'static str,
    pub cfg: RunConfig,
    pub hash: String,
    pub out: Option<PathBuf>,
}

/// `every, 2 every, ...` up to `t_max` (inclusive within rounding).
fn sample_times(start: f64, every: f64, t_max: f64) -> Vec<f64> {
    let count = ((t_max - start) / every + 1e-9).floor() as usize;
    (1..=count).map(|k| start + k as f64 * every).collect()
}

fn component_columns(prefix: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![prefix.to_string()]
    } else {
        (0..n).map(|c| format!("{prefix}{c}")).collect()
    }
}

impl Run {
    fn target(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new(&self.cfg.output.dir).join(default))
    }

    fn grid(&self) -> GridSpec {
        self.cfg.grid_spec()
    }

    fn chars(&self) -> Result<ShockCharacteristics, Failure> {
        let (um, up) = self.cfg.endstates();
        characteristic_data(&self.cfg.flux(), &um, &up).stage("characteristics")
    }

    fn profile(&self) -> Result<ShockProfile, Failure> {
        self.chars()?;
        let (um, up) = self.cfg.endstates();
        solve_stationary_profile(&self.cfg.flux(), &um, &up, &self.grid()).stage("profile")
    }

    fn finish(&self, main: &Path, mut outputs: Vec<PathBuf>) -> Result<Vec<PathBuf>, Failure> {
        let prov = write_provenance(main, self.command, &self.cfg, &self.hash, &outputs)?;
        outputs.push(prov);
        Ok(outputs)
    }

    fn meta(&self) -> Vec<(&'static str, String)> {
        let g = self.grid();
        vec![
            ("command", self.command.to_string()),
            ("model", serde_json::to_string(&self.cfg.model).unwrap_or_default()),
            ("grid", format!("L={} dx={} dt={}", g.half_width, g.dx, g.dt)),
        ]
    }

    pub fn profile_cmd(&self) -> Result<Vec<PathBuf>, Failure> {
        let p = self.profile()?;
        let grid = self.grid();
        let n = p.n();
        let traj = if self.cfg.grid.t_max > 0.0 {
            evolve_nonlinear(&p.model, &p.values, self.cfg.grid.t_max, &grid, self.cfg.output.every).stage("evolution")?
        } else {
            tpshock_core::pde::Trajectory { times: vec![0.0], fields: vec![p.values.clone()] }
        };
        let mut cols = vec!["x".to_string(), "t".to_string()];
        cols.extend(component_columns("u", n));
        let mut csv = Csv::new(&self.hash, &self.meta(), &cols);
        for (t, f) in traj.times.iter().zip(&traj.fields) {
            for i in 0..grid.nx() {
                let mut row = vec![grid.x(i), *t];
                row.extend_from_slice(f.at(i));
                csv.row(&row);
            }
        }
        let main = self.target("profile.csv");
        csv.write(&main)?;
        let side = sibling(&main, "meta.json");
        write_json(
            &side,
            &self.hash,
            &json!({
                "tail_rate": p.tail_rate,
                "residual": p.residual,
                "endstates": { "minus": p.u_minus, "plus": p.u_plus },
                "speeds": { "minus": p.chars.minus.speeds, "plus": p.chars.plus.speeds },
                "lax_index": p.chars.lax_index(),
                "snapshots": traj.times.len(),
            }),
        )?;
        self.finish(&main, vec![main.clone(), side])
    }

    pub fn spectrum(&self) -> Result<Vec<PathBuf>, Failure> {
        let p = self.profile()?;
        let tol = &self.cfg.tolerances;
        let coeffs = PeriodicCoefficientField::stationary(&p).stage("coefficients")?;
        let opts = SpectralOptions {
            cluster_radius: tol.cluster_radius,
            gap: tol.spectral_gap,
            loc_tol: tol.localization,
            det_tol: tol.determinant,
            count: tol.multipliers,
        };
        let report = spectral_stability_report(&p, &coeffs, &p.chars, &p.grid, &opts).stage("spectrum")?;
        let main = self.target("report.json");
        write_json(&main, &self.hash, &report)?;
        self.finish(&main, vec![main.clone()])
    }

    pub fn dichotomy(&self) -> Result<Vec<PathBuf>, Failure> {
        let d = &self.cfg.experiment.dichotomy;
        let p = self.profile()?;
        let coeffs = PeriodicCoefficientField::stationary(&p).stage("coefficients")?;
        let opts = TransportOptions { step: None, gap_tol: self.cfg.tolerances.transport_gap };
        let sigma = Complex64::new(d.sigma_re, d.sigma_im);
        let at = evans_value(&coeffs, sigma, d.k, &opts).stage("dichotomy")?;
        let circle = match d.circle_radius {
            Some(r) => {
                let values = evans_circle(&coeffs, sigma, r, d.samples, d.k, &opts).stage("dichotomy")?;
                let dets: Vec<Complex64> = values.iter().map(|v| v.det_complex()).collect();
                let winding = winding_number(&dets).stage("winding")?;
                Some(json!({ "radius": r, "samples": values, "winding_number": winding }))
            }
            None => None,
        };
        let main = self.target("frame.json");
        write_json(&main, &self.hash, &json!({ "sigma": [d.sigma_re, d.sigma_im], "K": d.k, "intersection": at, "circle": circle }))?;
        self.finish(&main, vec![main.clone()])
    }

    pub fn greens(&self) -> Result<Vec<PathBuf>, Failure> {
        let g = &self.cfg.experiment.greens;
        let p = self.profile()?;
        let grid = self.grid();
        let coeffs = PeriodicCoefficientField::stationary(&p).stage("coefficients")?;
        let times = sample_times(g.s, g.every, g.t_max);
        let col = greens_column(&coeffs, g.y, g.s, &times, &grid, g.component, None).stage("greens")?;
        let mut cols = vec!["t".to_string(), "x".to_string()];
        cols.extend(component_columns("g", p.n()));
        let mut meta = self.meta();
        meta.push(("source", format!("y={} s={} component={} mollifier_width={}", g.y, g.s, g.component, col.mollifier.width)));
        let mut csv = Csv::new(&self.hash, &meta, &cols);
        for (t, f) in col.times.iter().zip(&col.fields) {
            for i in 0..grid.nx() {
                let mut row = vec![*t, grid.x(i)];
                row.extend_from_slice(f.at(i));
                csv.row(&row);
            }
        }
        let main = self.target("green.csv");
        csv.write(&main)?;
        self.finish(&main, vec![main.clone()])
    }

    fn decompositions(&self, p: &ShockProfile) -> Result<Vec<GreenDecomposition>, Failure> {
        let tc = &self.cfg.experiment.templates;
        let coeffs = PeriodicCoefficientField::stationary(p).stage("coefficients")?;
        let times = sample_times(0.0, tc.every, tc.t_max);
        tc.ys
            .iter()
            .map(|&y| {
                let col = greens_column(&coeffs, y, 0.0, &times, &p.grid, 0, None).stage("greens")?;
                decompose_green(&col, p, &p.chars, tc.fit_from).stage("decomposition")
            })
            .collect()
    }

    pub fn templates(&self) -> Result<Vec<PathBuf>, Failure> {
        let tc = &self.cfg.experiment.templates;
        let p = self.profile()?;
        let decomps = self.decompositions(&p)?;
        let region = Region { t_min: tc.t_min, t_max: tc.t_max, x_max: tc.x_max.unwrap_or(0.8 * p.grid.half_width) };
        let check = if tc.fit {
            let ms = tc.ms.clone().unwrap_or_default();
            let etas = tc.etas.clone().unwrap_or_default();
            fit_template_constants(&decomps, &p.chars, &region, &ms, &etas).stage("template-fit")?
        } else {
            let bundle = template_bundle(&p.chars, tc.m, tc.eta).stage("template-bundle")?;
            check_template_bound(&decomps, &bundle, &region, None).stage("template-check")?
        };
        let main = self.target("fit.json");
        write_json(
            &main,
            &self.hash,
            &json!({
                "C_min": check.c_min,
                "M": check.m,
                "eta": check.eta,
                "ceiling": check.ceiling,
                "violations": check.violations,
                "samples": check.samples,
                "fitted": tc.fit,
                "region": region,
            }),
        )?;
        self.finish(&main, vec![main.clone()])
    }

    pub fn decay(&self) -> Result<Vec<PathBuf>, Failure> {
        let dc = &self.cfg.experiment.decay;
        let tol = &self.cfg.tolerances;
        let p = self.profile()?;
        let grid = self.grid();
        let v0 = gaussian_perturbation(&grid, p.n(), dc.amplitude, dc.center, dc.width);
        let opts = RunOptions { every: self.cfg.output.every, delta: tol.delta };
        let run = run_perturbation(&p, &v0, dc.t_max, &grid, &opts).stage("perturbation")?;
        let phase = extract_phase(&run, &p, &PhaseOptions { trust: tol.phase_trust, late_fraction: tol.late_fraction })
            .stage("phase")?;
        let bundle = template_bundle(&p.chars, dc.m, dc.eta).stage("template-bundle")?;
        let mut ps = dc.p.clone();
        ps.push(f64::INFINITY);
        let window = dc.window.unwrap_or((0.1 * dc.t_max, dc.t_max));
        let rep = decay_report(&run, &phase, &p, &bundle, &ps, window).stage("decay")?;

        let mut cols: Vec<String> = ["t", "q", "tau", "q_dot"].iter().map(|s| s.to_string()).collect();
        cols.extend(ps.iter().map(|p| if p.is_infinite() { "L_inf".to_string() } else { format!("L_{p}") }));
        cols.push("template_ratio".into());
        let mut meta = self.meta();
        meta.push(("perturbation", format!("amplitude={} center={} width={}", dc.amplitude, dc.center, dc.width)));
        let mut csv = Csv::new(&self.hash, &meta, &cols);
        for (m, t) in rep.times.iter().enumerate() {
            let mut row = vec![*t, phase.q[m], phase.tau[m], phase.q_dot[m]];
            row.extend(rep.norms.iter().map(|s| s.values[m]));
            row.push(rep.pointwise[m]);
            csv.row(&row);
        }
        let main = self.target("decay.csv");
        csv.write(&main)?;
        let summary = sibling(&main, "summary.json");
        let slopes: Vec<_> = rep.norms.iter().map(|s| json!({ "p": if s.p.is_infinite() { json!("inf") } else { json!(s.p) }, "slope": s.slope })).collect();
        write_json(
            &summary,
            &self.hash,
            &json!({
                "mass": mass(&v0, &grid),
                "q_star": phase.q_star,
                "tau_star": phase.tau_star,
                "window": window,
                "norm_slopes": slopes,
                "q_slope": rep.q_slope,
                "q_dot_slope": rep.q_dot_slope,
                "max_template_ratio": rep.pointwise_ratio,
                "b1_norm": phase.b1_norm(),
                "b2_norm": rep.b2_norm,
                "max_fit_residual": phase.residuals.iter().copied().fold(0.0, f64::max),
            }),
        )?;
        self.finish(&main, vec![main.clone(), summary])
    }

    pub fn iterate(&self) -> Result<Vec<PathBuf>, Failure> {
        let it = &self.cfg.experiment.iterate;
        let p = self.profile()?;
        let l = fit_l_coefficients(&p, &p.chars).stage("l-coefficients")?;
        let lattice = IterationGrid { y_max: it.y_max, y_stride: it.y_stride, t_stride: it.t_stride, t_max: it.t_max };
        let tables = build_iteration_tables(&p, &p.chars, Some(l.clone()), &lattice).stage("tables")?;
        let v0 = gaussian_perturbation(&tables.grid, p.n(), it.amplitude, it.center, it.width);
        let u0 = perturbed_state(&p, &tables.grid, &v0);
        let opts = FixedPointOptions { max_iter: it.n, tol: self.cfg.tolerances.fixed_point };
        let rep = iterate_fixed_point(&tables, &u0, &opts).stage("fixed-point")?;
        let main = self.target("iter.json");
        write_json(
            &main,
            &self.hash,
            &json!({
                "converged": rep.converged,
                "iterations": rep.history,
                "zeta": rep.last.zeta,
                "zeta_star": rep.last.zeta_star,
                "l_coefficients": l,
                "lattice": lattice,
                "sources": tables.nodes.len(),
            }),
        )?;
        self.finish(&main, vec![main.clone()])
    }
}

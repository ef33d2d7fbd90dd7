//! Run configuration: parsing, validation and default resolution.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tpshock_core::flux::FluxModel;
use tpshock_core::pde::GridSpec;
use tpshock_core::profiles::{default_quadratic_model, rankine_hugoniot_partner};

use crate::failure::{Failure, Staged};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    Burgers,
    #[serde(rename = "quadratic2")]
    Quadratic2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticParameters {
    pub a: [[f64; 2]; 2],
    pub q1: [[f64; 2]; 2],
    pub q2: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endstates {
    pub minus: Vec<f64>,
    /// Solved from the Rankine-Hugoniot condition when omitted.
    #[serde(default)]
    pub plus: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: ModelName,
    #[serde(default)]
    pub parameters: Option<QuadraticParameters>,
    #[serde(default)]
    pub endstates: Option<Endstates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    #[serde(rename = "L")]
    pub l: f64,
    pub dx: f64,
    pub dt: Option<f64>,
    pub t_max: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { l: 40.0, dx: 0.1, dt: None, t_max: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DichotomySection {
    pub sigma_re: f64,
    pub sigma_im: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub circle_radius: Option<f64>,
    pub samples: usize,
}

impl Default for DichotomySection {
    fn default() -> Self {
        Self { sigma_re: 0.0, sigma_im: 0.0, k: 4, circle_radius: None, samples: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreensSection {
    pub y: f64,
    pub s: f64,
    pub t_max: f64,
    pub every: f64,
    pub component: usize,
}

impl Default for GreensSection {
    fn default() -> Self {
        Self { y: -2.0, s: 0.0, t_max: 10.0, every: 0.5, component: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplatesSection {
    pub ys: Vec<f64>,
    pub t_max: f64,
    pub every: f64,
    pub fit_from: f64,
    pub t_min: f64,
    pub x_max: Option<f64>,
    pub fit: bool,
    #[serde(rename = "M")]
    pub m: f64,
    pub eta: f64,
    #[serde(rename = "Ms")]
    pub ms: Option<Vec<f64>>,
    pub etas: Option<Vec<f64>>,
}

impl Default for TemplatesSection {
    fn default() -> Self {
        Self {
            ys: vec![-5.0, -2.0, 2.0, 5.0],
            t_max: 50.0,
            every: 0.5,
            fit_from: 25.0,
            t_min: 1.0,
            x_max: None,
            fit: false,
            m: 50.0,
            eta: 0.5,
            ms: None,
            etas: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecaySection {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    pub t_max: f64,
    /// Finite exponents; the sup norm is always reported.
    pub p: Vec<f64>,
    pub window: Option<(f64, f64)>,
    #[serde(rename = "M")]
    pub m: f64,
    pub eta: f64,
}

impl Default for DecaySection {
    fn default() -> Self {
        Self { amplitude: 0.05, center: -2.0, width: 1.0, t_max: 100.0, p: vec![1.0, 2.0], window: None, m: 50.0, eta: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterateSection {
    pub n: usize,
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    pub y_max: f64,
    pub y_stride: usize,
    pub t_stride: usize,
    pub t_max: f64,
}

impl Default for IterateSection {
    fn default() -> Self {
        Self { n: 3, amplitude: 1e-3, center: -2.0, width: 1.0, y_max: 15.0, y_stride: 1, t_stride: 5, t_max: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub dichotomy: DichotomySection,
    pub greens: GreensSection,
    pub templates: TemplatesSection,
    pub decay: DecaySection,
    pub iterate: IterateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub every: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: ".".into(), every: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub cluster_radius: f64,
    pub spectral_gap: f64,
    pub localization: f64,
    pub determinant: f64,
    pub multipliers: usize,
    pub transport_gap: f64,
    pub phase_trust: f64,
    pub late_fraction: f64,
    pub delta: f64,
    pub fixed_point: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            cluster_radius: 5e-3,
            spectral_gap: 1e-3,
            localization: 1e-4,
            determinant: 1e-8,
            multipliers: 20,
            transport_gap: 1e-8,
            phase_trust: 0.5,
            late_fraction: 0.1,
            delta: 5.0,
            fixed_point: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection { name: ModelName::Burgers, parameters: None, endstates: None },
            grid: GridSection::default(),
            experiment: ExperimentSection::default(),
            output: OutputSection::default(),
            tolerances: Tolerances::default(),
        }
    }
}

/// Line and column (1-based) of the first occurrence of `"key"` in `text`.
fn locate(text: &str, key: &str) -> (usize, usize) {
    let needle = format!("\"{key}\"");
    for (i, line) in text.lines().enumerate() {
        if let Some(c) = line.find(&needle) {
            return (i + 1, c + 1);
        }
    }
    (1, 1)
}

fn anchored(origin: &str, text: &str, key: &str, msg: impl std::fmt::Display) -> Failure {
    let (l, c) = locate(text, key);
    Failure::Config(format!("{origin}:{l}:{c}: {msg}"))
}

impl RunConfig {
    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<(Self, String), Failure> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{origin}:1:1: cannot read: {e}")))?;
        let cfg = Self::parse(&text, &origin)?;
        Ok((cfg, text))
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, Failure> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let msg = msg.split(" at line ").next().unwrap_or(&msg);
            Failure::Config(format!("{origin}:{}:{}: {msg}", e.line().max(1), e.column().max(1)))
        })?;
        cfg.validate(text, origin)?;
        Ok(cfg)
    }

    fn validate(&self, text: &str, origin: &str) -> Result<(), Failure> {
        let dim = match self.model.name {
            ModelName::Burgers => 1,
            ModelName::Quadratic2 => 2,
        };
        if self.model.name == ModelName::Burgers && self.model.parameters.is_some() {
            return Err(anchored(origin, text, "parameters", "the burgers model takes no parameters"));
        }
        if let Some(e) = &self.model.endstates {
            let bad = e.minus.len() != dim || e.plus.as_ref().is_some_and(|p| p.len() != dim);
            if bad {
                return Err(anchored(origin, text, "endstates", format!("endstates must have {dim} components")));
            }
        }
        let g = &self.grid;
        if !(g.l > 0.0 && g.dx > 0.0 && g.dx < g.l) || g.dt.is_some_and(|dt| dt <= 0.0) || g.t_max < 0.0 {
            return Err(anchored(origin, text, "grid", "grid needs 0 < dx < L, dt > 0 and t_max >= 0"));
        }
        if self.output.every <= 0.0 {
            return Err(anchored(origin, text, "every", "output.every must be positive"));
        }
        Ok(())
    }

    /// Fills every optional entry so the record is self-contained.
    pub fn resolve(mut self) -> Result<Self, Failure> {
        if self.model.name == ModelName::Quadratic2 && self.model.parameters.is_none() {
            if let FluxModel::Quadratic2 { a, q1, q2 } = default_quadratic_model() {
                self.model.parameters = Some(QuadraticParameters { a, q1, q2 });
            }
        }
        let model = self.flux();
        let minus = self.model.endstates.as_ref().map(|e| e.minus.clone());
        let plus = self.model.endstates.as_ref().and_then(|e| e.plus.clone());
        let (minus, plus) = match (self.model.name, minus, plus) {
            (_, Some(m), Some(p)) => (m, p),
            (ModelName::Burgers, m, _) => {
                let m = m.unwrap_or_else(|| vec![1.0]);
                let p = vec![-m[0]];
                (m, p)
            }
            (ModelName::Quadratic2, m, _) => {
                let m = m.unwrap_or_else(|| vec![1.0, 0.2]);
                let guess = [-m[0], m[1]];
                let p = rankine_hugoniot_partner(&model, &m, &guess).stage("endstates")?;
                (m, p)
            }
        };
        self.model.endstates = Some(Endstates { minus, plus: Some(plus) });
        self.grid.dt.get_or_insert(0.4 * self.grid.dx);
        let l = self.grid.l;
        self.experiment.templates.x_max.get_or_insert((0.8 * l).min(50.0));
        let (ms, etas) = tpshock_core::greens::default_template_grid();
        self.experiment.templates.ms.get_or_insert(ms);
        self.experiment.templates.etas.get_or_insert(etas);
        let t = self.experiment.decay.t_max;
        self.experiment.decay.window.get_or_insert((0.1 * t, t));
        Ok(self)
    }

    pub fn flux(&self) -> FluxModel {
        match (&self.model.name, &self.model.parameters) {
            (ModelName::Burgers, _) => FluxModel::Burgers,
            (ModelName::Quadratic2, Some(p)) => FluxModel::Quadratic2 { a: p.a, q1: p.q1, q2: p.q2 },
            (ModelName::Quadratic2, None) => default_quadratic_model(),
        }
    }

    pub fn endstates(&self) -> (Vec<f64>, Vec<f64>) {
        let e = self.model.endstates.as_ref().expect("resolved config");
        (e.minus.clone(), e.plus.clone().expect("resolved config"))
    }

    pub fn grid_spec(&self) -> GridSpec {
        let g = &self.grid;
        GridSpec::new(g.l, g.dx).with_dt(g.dt.unwrap_or(0.4 * g.dx))
    }

    /// SHA-256 of the canonical JSON of the resolved configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

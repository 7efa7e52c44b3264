//! Explicit finite-difference thermal model of a thin-wall build.
//!
//! The wall is a 2-D node lattice in the build plane (x along the scan
//! direction, z vertical); the third dimension is lumped into a wall
//! thickness that scales capacities and loss areas. Nodes are born as the
//! laser spot passes over the current layer: a freshly activated node starts
//! at the deposition temperature and remembers its birth time and the laser
//! power that created it.
//!
//! Update rule, forward Euler on active nodes only:
//!
//! - conduction in finite-volume form, `g·(T_neighbor − T)` per face, which
//!   is exactly energy-conserving between interior nodes;
//! - a fixed-temperature (Dirichlet) substrate under the bottom row;
//! - convection `h·A·(T − T_amb)` and radiation `ε·σ·A·(T⁴ − T_amb⁴)` on
//!   free surfaces, with the two broad faces of the thin wall always exposed;
//! - a Gaussian laser flux with spot shape `exp(−2r²/w²)`, `w` the 1/e²
//!   beam radius, truncated at `2w` and normalized so the total deposited
//!   power is exactly `absorptivity · P` regardless of discretization.
//!
//! Stability is enforced up front: `dt ≤ 0.9·min(dx,dz)²/(4α)`.
//!
//! Recorded per node every `record_every` internal steps: temperature,
//! distance to the laser deposition point, distance to the nearest free
//! surface of the built geometry (the substrate interface is not free),
//! and the commanded laser power.

use serde::{Deserialize, Serialize};

use crate::profile::LaserPowerProfile;
use crate::{ensure_finite, Error, Result};

const STEFAN_BOLTZMANN: f64 = 5.670374419e-8;
const KELVIN_OFFSET: f64 = 273.15;

/// Thermophysical and boundary properties of the deposited alloy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialProps {
    /// Thermal conductivity, W/(m·K).
    pub conductivity_w_mk: f64,
    /// Density, kg/m³.
    pub density_kg_m3: f64,
    /// Specific heat, J/(kg·K).
    pub specific_heat_j_kgk: f64,
    /// Fraction of commanded laser power absorbed by the wall.
    pub absorptivity: f64,
    /// Convection coefficient on free surfaces, W/(m²·K).
    pub convection_w_m2k: f64,
    /// Surface emissivity for radiative losses; 0 disables radiation.
    pub emissivity: f64,
    /// Ambient temperature, °C.
    pub ambient_c: f64,
    /// Substrate temperature for the Dirichlet boundary, °C.
    pub substrate_c: f64,
}

impl Default for MaterialProps {
    /// Nickel-superalloy-like values for a desk-scale model.
    fn default() -> Self {
        MaterialProps {
            conductivity_w_mk: 11.4,
            density_kg_m3: 8190.0,
            specific_heat_j_kgk: 435.0,
            absorptivity: 0.35,
            convection_w_m2k: 20.0,
            emissivity: 0.4,
            ambient_c: 25.0,
            substrate_c: 25.0,
        }
    }
}

impl MaterialProps {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("conductivity_w_mk", self.conductivity_w_mk),
            ("density_kg_m3", self.density_kg_m3),
            ("specific_heat_j_kgk", self.specific_heat_j_kgk),
        ] {
            ensure_finite(name, v)?;
            if v <= 0.0 {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("absorptivity", self.absorptivity),
            ("convection_w_m2k", self.convection_w_m2k),
            ("emissivity", self.emissivity),
        ] {
            ensure_finite(name, v)?;
            if v < 0.0 {
                return Err(Error::Param(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.absorptivity > 1.0 || self.emissivity > 1.0 {
            return Err(Error::Param(
                "absorptivity and emissivity must not exceed 1".into(),
            ));
        }
        ensure_finite("ambient_c", self.ambient_c)?;
        ensure_finite("substrate_c", self.substrate_c)?;
        Ok(())
    }

    /// Thermal diffusivity α = k/(ρ·c_p), m²/s.
    pub fn diffusivity_m2_s(&self) -> f64 {
        self.conductivity_w_mk / (self.density_kg_m3 * self.specific_heat_j_kgk)
    }
}

/// Geometry and kinematics of one thin-wall build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSpec {
    pub wall_length_mm: f64,
    /// Lumped out-of-plane thickness, mm.
    pub wall_thickness_mm: f64,
    pub n_layers: u32,
    pub layer_height_mm: f64,
    pub scan_speed_mm_s: f64,
    /// 1/e² beam diameter, mm; the spot radius used everywhere is half this.
    pub beam_diameter_mm: f64,
    /// Temperature assigned to freshly deposited material, °C.
    pub deposition_temp_c: f64,
    /// When false the substrate face is adiabatic (used by energy audits).
    pub substrate_dirichlet: bool,
}

impl Default for BuildSpec {
    /// 49 mm × 40 layers at 7 mm/s: one 280 s build.
    fn default() -> Self {
        BuildSpec {
            wall_length_mm: 49.0,
            wall_thickness_mm: 2.0,
            n_layers: 40,
            layer_height_mm: 0.75,
            scan_speed_mm_s: 7.0,
            beam_diameter_mm: 2.24,
            deposition_temp_c: 1300.0,
            substrate_dirichlet: true,
        }
    }
}

impl BuildSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("wall_length_mm", self.wall_length_mm),
            ("wall_thickness_mm", self.wall_thickness_mm),
            ("layer_height_mm", self.layer_height_mm),
            ("scan_speed_mm_s", self.scan_speed_mm_s),
            ("beam_diameter_mm", self.beam_diameter_mm),
        ] {
            ensure_finite(name, v)?;
            if v <= 0.0 {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        ensure_finite("deposition_temp_c", self.deposition_temp_c)?;
        if self.n_layers == 0 {
            return Err(Error::Param("n_layers must be >= 1".into()));
        }
        Ok(())
    }

    /// Seconds per layer pass.
    pub fn layer_time_s(&self) -> f64 {
        self.wall_length_mm / self.scan_speed_mm_s
    }

    /// Total build duration, s.
    pub fn build_duration_s(&self) -> f64 {
        self.n_layers as f64 * self.layer_time_s()
    }

    /// Laser layer index and x position at time `t_s`. Passes alternate
    /// direction: even layers run left→right, odd layers right→left.
    pub fn laser_position(&self, t_s: f64) -> (u32, f64) {
        let layer_time = self.layer_time_s();
        let layer = ((t_s / layer_time).floor() as i64)
            .clamp(0, self.n_layers as i64 - 1) as u32;
        let pass_t = (t_s - layer as f64 * layer_time).clamp(0.0, layer_time);
        let x = if layer % 2 == 0 {
            self.scan_speed_mm_s * pass_t
        } else {
            self.wall_length_mm - self.scan_speed_mm_s * pass_t
        };
        (layer, x)
    }
}

/// Discretization and recording controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Requested horizontal node spacing, mm; adjusted so nodes span the
    /// wall exactly.
    pub dx_mm: f64,
    /// Vertical node spacing, mm; must divide the layer height.
    pub dz_mm: f64,
    /// Internal integration step, s.
    pub dt_s: f64,
    /// Record features every this many internal steps.
    pub record_every: u32,
    /// Nodes to record, as `[column, row]` lattice indices.
    pub record_nodes: Vec<[u32; 2]>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dx_mm: 1.75,
            dz_mm: 0.75,
            dt_s: 0.002,
            record_every: 10,
            record_nodes: vec![[14, 4], [14, 19], [14, 34]],
        }
    }
}

/// Laser spot state passed to the per-step update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaserState {
    pub x_mm: f64,
    pub z_mm: f64,
    pub power_w: f64,
}

/// Recorded per-node feature series. All five series share one length and
/// start at the first record tick at or after the node's birth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermalHistory {
    pub node: [u32; 2],
    pub x_mm: f64,
    pub z_mm: f64,
    pub t_birth_s: f64,
    pub lp_birth_w: f64,
    /// Record period, s (internal dt × record_every).
    pub sample_period_s: f64,
    pub time_s: Vec<f64>,
    pub temp_c: Vec<f64>,
    pub dl_mm: Vec<f64>,
    pub dn_mm: Vec<f64>,
    pub lp_w: Vec<f64>,
}

impl ThermalHistory {
    pub fn len(&self) -> usize {
        self.temp_c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temp_c.is_empty()
    }

    /// `time_s,temp_c,dl_mm,dn_mm,lp_w` CSV with six-decimal formatting.
    /// Birth metadata travels in the JSON sidecar, not the CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(48 * self.len() + 32);
        out.push_str("time_s,temp_c,dl_mm,dn_mm,lp_w\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                self.time_s[i], self.temp_c[i], self.dl_mm[i], self.dn_mm[i], self.lp_w[i]
            ));
        }
        out
    }

    /// Rebuilds a history from the CSV series plus its JSON sidecar (`meta`,
    /// a `ThermalHistory` with empty series is accepted).
    pub fn from_csv(meta: &ThermalHistory, csv: &str) -> Result<ThermalHistory> {
        let mut lines = csv.lines();
        match lines.next() {
            Some("time_s,temp_c,dl_mm,dn_mm,lp_w") => {}
            other => {
                return Err(Error::Parse(format!(
                    "expected history header, got {other:?}"
                )))
            }
        }
        let mut out = ThermalHistory {
            time_s: Vec::new(),
            temp_c: Vec::new(),
            dl_mm: Vec::new(),
            dn_mm: Vec::new(),
            lp_w: Vec::new(),
            ..meta.clone()
        };
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Parse(format!(
                    "line {}: expected 5 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let mut parsed = [0.0; 5];
            for (slot, field) in parsed.iter_mut().zip(&fields) {
                *slot = field
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
            }
            out.time_s.push(parsed[0]);
            out.temp_c.push(parsed[1]);
            out.dl_mm.push(parsed[2]);
            out.dn_mm.push(parsed[3]);
            out.lp_w.push(parsed[4]);
        }
        Ok(out)
    }
}

/// Live simulation state. Construct with [`Simulation::new`], then either
/// drive it through [`run_build`] or manually via [`deposit`](Self::deposit)
/// and [`step`](Self::step).
pub struct Simulation {
    build: BuildSpec,
    material: MaterialProps,
    nx: usize,
    n_rows: usize,
    rows_per_layer: usize,
    dx_m: f64,
    dz_m: f64,
    dt_s: f64,
    spot_radius_m: f64,
    /// Per-node heat capacity ρ·c_p·V, J/K.
    cap_j_k: f64,
    cond_x_w_k: f64,
    cond_z_w_k: f64,
    area_broad_m2: f64,
    area_top_m2: f64,
    area_side_m2: f64,
    temp_c: Vec<f64>,
    active: Vec<bool>,
    t_birth_s: Vec<f64>,
    lp_birth_w: Vec<f64>,
    /// Highest active row per column, or -1 when the column is empty.
    top_row: Vec<i64>,
    /// Scratch for the explicit update.
    delta: Vec<f64>,
    flux_w: Vec<f64>,
}

impl Simulation {
    pub fn new(build: &BuildSpec, material: &MaterialProps, cfg: &SimConfig) -> Result<Self> {
        build.validate()?;
        material.validate()?;
        ensure_finite("dx_mm", cfg.dx_mm)?;
        ensure_finite("dz_mm", cfg.dz_mm)?;
        ensure_finite("dt_s", cfg.dt_s)?;
        if cfg.dx_mm <= 0.0 || cfg.dz_mm <= 0.0 || cfg.dt_s <= 0.0 {
            return Err(Error::Config("dx, dz and dt must be positive".into()));
        }
        if cfg.record_every == 0 {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        let rows_per_layer = build.layer_height_mm / cfg.dz_mm;
        if (rows_per_layer - rows_per_layer.round()).abs() > 1e-9 || rows_per_layer < 0.999 {
            return Err(Error::Config(format!(
                "dz {} mm must divide the layer height {} mm",
                cfg.dz_mm, build.layer_height_mm
            )));
        }
        let rows_per_layer = rows_per_layer.round() as usize;
        let dz_mm = build.layer_height_mm / rows_per_layer as f64;
        let nx = ((build.wall_length_mm / cfg.dx_mm).round() as usize).max(1) + 1;
        let dx_mm = build.wall_length_mm / (nx - 1) as f64;
        let n_rows = build.n_layers as usize * rows_per_layer;

        let dx_m = dx_mm * 1e-3;
        let dz_m = dz_mm * 1e-3;
        let limit = 0.9 * dx_m.min(dz_m).powi(2) / (4.0 * material.diffusivity_m2_s());
        if cfg.dt_s > limit {
            return Err(Error::Config(format!(
                "dt {} s violates the stability limit {:.6} s for dx={dx_mm} mm, dz={dz_mm} mm",
                cfg.dt_s, limit
            )));
        }

        let thickness_m = build.wall_thickness_mm * 1e-3;
        let n = nx * n_rows;
        let cap_j_k = material.density_kg_m3
            * material.specific_heat_j_kgk
            * dx_m
            * dz_m
            * thickness_m;
        Ok(Simulation {
            build: *build,
            material: *material,
            nx,
            n_rows,
            rows_per_layer,
            dx_m,
            dz_m,
            dt_s: cfg.dt_s,
            spot_radius_m: build.beam_diameter_mm * 1e-3 / 2.0,
            cap_j_k,
            cond_x_w_k: material.conductivity_w_mk * dz_m * thickness_m / dx_m,
            cond_z_w_k: material.conductivity_w_mk * dx_m * thickness_m / dz_m,
            area_broad_m2: 2.0 * dx_m * dz_m,
            area_top_m2: dx_m * thickness_m,
            area_side_m2: dz_m * thickness_m,
            temp_c: vec![material.ambient_c; n],
            active: vec![false; n],
            t_birth_s: vec![0.0; n],
            lp_birth_w: vec![0.0; n],
            top_row: vec![-1; nx],
            delta: vec![0.0; n],
            flux_w: vec![0.0; n],
        })
    }

    pub fn columns(&self) -> usize {
        self.nx
    }

    pub fn rows(&self) -> usize {
        self.n_rows
    }

    pub fn is_active(&self, col: usize, row: usize) -> bool {
        self.active[row * self.nx + col]
    }

    pub fn temp_at(&self, col: usize, row: usize) -> f64 {
        self.temp_c[row * self.nx + col]
    }

    /// Node position, mm. Rows sit at `(row+1)·dz` so a layer's top row lies
    /// exactly on the layer's top surface; z = 0 is the substrate interface.
    pub fn node_position_mm(&self, col: usize, row: usize) -> (f64, f64) {
        (
            col as f64 * self.dx_m * 1e3,
            (row as f64 + 1.0) * self.dz_m * 1e3,
        )
    }

    /// Activates every node of `layer` whose column lies inside the spot
    /// radius of `x_laser_mm`. New nodes start at the deposition temperature.
    pub fn deposit(&mut self, layer: u32, x_laser_mm: f64, t_s: f64, power_w: f64) {
        if layer as usize >= self.build.n_layers as usize {
            return;
        }
        let spot_mm = self.spot_radius_m * 1e3;
        let row_lo = layer as usize * self.rows_per_layer;
        let row_hi = row_lo + self.rows_per_layer;
        for col in 0..self.nx {
            let x_mm = col as f64 * self.dx_m * 1e3;
            if (x_mm - x_laser_mm).abs() > spot_mm {
                continue;
            }
            for row in row_lo..row_hi {
                let idx = row * self.nx + col;
                if !self.active[idx] {
                    self.active[idx] = true;
                    self.temp_c[idx] = self.build.deposition_temp_c;
                    self.t_birth_s[idx] = t_s;
                    self.lp_birth_w[idx] = power_w;
                    if self.top_row[col] < row as i64 {
                        self.top_row[col] = row as i64;
                    }
                }
            }
        }
    }

    /// Activates the whole lattice at a uniform temperature. Intended for
    /// energy audits and cooldown studies that start from a finished wall.
    pub fn activate_all(&mut self, temp_c: f64) {
        for idx in 0..self.active.len() {
            self.active[idx] = true;
            self.temp_c[idx] = temp_c;
            self.t_birth_s[idx] = 0.0;
        }
        for col in 0..self.nx {
            self.top_row[col] = self.n_rows as i64 - 1;
        }
    }

    /// One forward-Euler step over the active nodes. `laser` adds the
    /// normalized Gaussian flux on top-surface nodes within twice the spot
    /// radius.
    pub fn step(&mut self, laser: Option<&LaserState>) {
        let nx = self.nx;
        self.flux_w.iter_mut().for_each(|f| *f = 0.0);
        if let Some(laser) = laser {
            if laser.power_w > 0.0 {
                let w = self.spot_radius_m;
                let xl = laser.x_mm * 1e-3;
                let zl = laser.z_mm * 1e-3;
                let mut weights: Vec<(usize, f64)> = Vec::new();
                let mut total = 0.0;
                for col in 0..nx {
                    let row = self.top_row[col];
                    if row < 0 {
                        continue;
                    }
                    let x = col as f64 * self.dx_m;
                    let z = (row as f64 + 1.0) * self.dz_m;
                    let r2 = (x - xl) * (x - xl) + (z - zl) * (z - zl);
                    if r2 <= 4.0 * w * w {
                        let wgt = (-2.0 * r2 / (w * w)).exp();
                        weights.push((row as usize * nx + col, wgt));
                        total += wgt;
                    }
                }
                if total > 0.0 {
                    let absorbed = self.material.absorptivity * laser.power_w;
                    for (idx, wgt) in weights {
                        self.flux_w[idx] = absorbed * wgt / total;
                    }
                }
            }
        }

        let amb = self.material.ambient_c;
        let amb_k4 = (amb + KELVIN_OFFSET).powi(4);
        let h = self.material.convection_w_m2k;
        let eps_sigma = self.material.emissivity * STEFAN_BOLTZMANN;
        for row in 0..self.n_rows {
            for col in 0..nx {
                let idx = row * nx + col;
                if !self.active[idx] {
                    self.delta[idx] = 0.0;
                    continue;
                }
                let t = self.temp_c[idx];
                let mut q = self.flux_w[idx];

                let left_active = col > 0 && self.active[idx - 1];
                let right_active = col + 1 < nx && self.active[idx + 1];
                let below_active = row > 0 && self.active[idx - nx];
                let above_active = row + 1 < self.n_rows && self.active[idx + nx];
                if left_active {
                    q += self.cond_x_w_k * (self.temp_c[idx - 1] - t);
                }
                if right_active {
                    q += self.cond_x_w_k * (self.temp_c[idx + 1] - t);
                }
                if below_active {
                    q += self.cond_z_w_k * (self.temp_c[idx - nx] - t);
                }
                if above_active {
                    q += self.cond_z_w_k * (self.temp_c[idx + nx] - t);
                }
                if row == 0 && self.build.substrate_dirichlet {
                    q += self.cond_z_w_k * (self.material.substrate_c - t);
                }

                if h > 0.0 || eps_sigma > 0.0 {
                    let mut area = self.area_broad_m2;
                    if !above_active {
                        area += self.area_top_m2;
                    }
                    if !left_active {
                        area += self.area_side_m2;
                    }
                    if !right_active {
                        area += self.area_side_m2;
                    }
                    if h > 0.0 {
                        q -= h * area * (t - amb);
                    }
                    if eps_sigma > 0.0 {
                        q -= eps_sigma * area * ((t + KELVIN_OFFSET).powi(4) - amb_k4);
                    }
                }
                self.delta[idx] = self.dt_s * q / self.cap_j_k;
            }
        }
        for idx in 0..self.temp_c.len() {
            self.temp_c[idx] += self.delta[idx];
        }
    }

    /// Total enthalpy of active nodes relative to `ref_c`, J.
    pub fn total_enthalpy_j(&self, ref_c: f64) -> f64 {
        self.temp_c
            .iter()
            .zip(&self.active)
            .filter(|(_, a)| **a)
            .map(|(t, _)| self.cap_j_k * (t - ref_c))
            .sum()
    }

    /// Exact distance from a point to the free surface of the built
    /// geometry: per-column top faces, outer side faces, and the vertical
    /// risers between columns of unequal height. The substrate plane is not
    /// a free surface.
    pub fn free_surface_distance_mm(&self, x_mm: f64, z_mm: f64) -> f64 {
        let dx = self.dx_m * 1e3;
        let length = self.build.wall_length_mm;
        let mut best = f64::INFINITY;
        let mut consider =
            |d: f64| {
                if d < best {
                    best = d;
                }
            };

        // Column top faces.
        for col in 0..self.nx {
            let row = self.top_row[col];
            if row < 0 {
                continue;
            }
            let top_z = (row as f64 + 1.0) * self.dz_m * 1e3;
            let xc = col as f64 * dx;
            let x0 = (xc - dx / 2.0).max(0.0);
            let x1 = (xc + dx / 2.0).min(length);
            let px = x_mm.clamp(x0, x1);
            consider(((x_mm - px).powi(2) + (z_mm - top_z).powi(2)).sqrt());
        }
        // Vertical faces at every column boundary where the height changes,
        // including the two outer ends (virtual height 0 outside the wall).
        let height = |col: i64| -> f64 {
            if col < 0 || col >= self.nx as i64 {
                return 0.0;
            }
            let row = self.top_row[col as usize];
            if row < 0 {
                0.0
            } else {
                (row as f64 + 1.0) * self.dz_m * 1e3
            }
        };
        for boundary in -1..self.nx as i64 {
            let h_left = height(boundary);
            let h_right = height(boundary + 1);
            if h_left == h_right {
                continue;
            }
            let xb = (boundary as f64 * dx + dx / 2.0).clamp(0.0, length);
            let z_lo = h_left.min(h_right);
            let z_hi = h_left.max(h_right);
            // The outer faces drop all the way to the substrate.
            let z_lo = if h_left == 0.0 || h_right == 0.0 { 0.0 } else { z_lo };
            let pz = z_mm.clamp(z_lo, z_hi);
            consider(((x_mm - xb).powi(2) + (z_mm - pz).powi(2)).sqrt());
        }
        best
    }
}

/// Runs a full build, recording the configured nodes.
///
/// The profile must cover the whole build duration; histories start at each
/// node's first record tick after birth.
pub fn run_build(
    build: &BuildSpec,
    material: &MaterialProps,
    cfg: &SimConfig,
    profile: &LaserPowerProfile,
) -> Result<Vec<ThermalHistory>> {
    let mut sim = Simulation::new(build, material, cfg)?;
    if cfg.record_nodes.is_empty() {
        return Err(Error::Param("record_nodes must not be empty".into()));
    }
    for [col, row] in &cfg.record_nodes {
        if *col as usize >= sim.nx || *row as usize >= sim.n_rows {
            return Err(Error::Param(format!(
                "record node [{col}, {row}] outside the {}x{} lattice",
                sim.nx, sim.n_rows
            )));
        }
    }
    if profile.is_empty() {
        return Err(Error::Param("profile has no samples".into()));
    }
    let duration = build.build_duration_s();
    if profile.duration_s() + 1e-9 < duration {
        return Err(Error::Param(format!(
            "profile covers {:.3} s but the build needs {:.3} s",
            profile.duration_s(),
            duration
        )));
    }

    let n_steps = (duration / cfg.dt_s + 1e-9).floor() as usize;
    let mut histories: Vec<ThermalHistory> = cfg
        .record_nodes
        .iter()
        .map(|&[col, row]| {
            let (x_mm, z_mm) = sim.node_position_mm(col as usize, row as usize);
            ThermalHistory {
                node: [col, row],
                x_mm,
                z_mm,
                t_birth_s: f64::NAN,
                lp_birth_w: f64::NAN,
                sample_period_s: cfg.dt_s * cfg.record_every as f64,
                time_s: Vec::new(),
                temp_c: Vec::new(),
                dl_mm: Vec::new(),
                dn_mm: Vec::new(),
                lp_w: Vec::new(),
            }
        })
        .collect();

    for k in 0..n_steps {
        let t = k as f64 * cfg.dt_s;
        let (layer, x_laser) = build.laser_position(t);
        let z_laser = (layer as f64 + 1.0) * build.layer_height_mm;
        let power = profile.power_at(t);
        sim.deposit(layer, x_laser, t, power);

        if k % cfg.record_every as usize == 0 {
            for (slot, &[col, row]) in cfg.record_nodes.iter().enumerate() {
                let idx = row as usize * sim.nx + col as usize;
                if !sim.active[idx] {
                    continue;
                }
                let hist = &mut histories[slot];
                if hist.t_birth_s.is_nan() {
                    hist.t_birth_s = sim.t_birth_s[idx];
                    hist.lp_birth_w = sim.lp_birth_w[idx];
                }
                let temp = sim.temp_c[idx];
                if !temp.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite temperature at node [{col}, {row}], t = {t:.4} s"
                    )));
                }
                let (x_mm, z_mm) = sim.node_position_mm(col as usize, row as usize);
                let dl = ((x_mm - x_laser).powi(2) + (z_mm - z_laser).powi(2)).sqrt();
                hist.time_s.push(t);
                hist.temp_c.push(temp);
                hist.dl_mm.push(dl);
                hist.dn_mm.push(sim.free_surface_distance_mm(x_mm, z_mm));
                hist.lp_w.push(power);
            }
        }
        sim.step(Some(&LaserState {
            x_mm: x_laser,
            z_mm: z_laser,
            power_w: power,
        }));
    }

    for (hist, &[col, row]) in histories.iter().zip(&cfg.record_nodes) {
        if hist.is_empty() {
            return Err(Error::Param(format!(
                "record node [{col}, {row}] was never activated during the build"
            )));
        }
    }
    Ok(histories)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::LaserPowerProfile;

    fn flat_profile(duration_s: f64, power_w: f64) -> LaserPowerProfile {
        let n = (duration_s / 0.02).floor() as usize + 1;
        LaserPowerProfile {
            times_s: (0..n).map(|k| k as f64 * 0.02).collect(),
            powers_w: vec![power_w; n],
        }
    }

    fn small_build() -> (BuildSpec, MaterialProps, SimConfig) {
        let build = BuildSpec {
            wall_length_mm: 7.0,
            n_layers: 2,
            ..BuildSpec::default()
        };
        let cfg = SimConfig {
            dx_mm: 0.7,
            record_nodes: vec![[0, 0], [5, 0], [5, 1]],
            ..SimConfig::default()
        };
        (build, MaterialProps::default(), cfg)
    }

    #[test]
    fn stability_limit_is_enforced() {
        let (build, material, mut cfg) = small_build();
        cfg.dt_s = 1.0;
        assert!(matches!(
            Simulation::new(&build, &material, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dz_must_divide_layer_height() {
        let (build, material, mut cfg) = small_build();
        cfg.dz_mm = 0.4;
        assert!(matches!(
            Simulation::new(&build, &material, &cfg),
            Err(Error::Config(_))
        ));
        cfg.dz_mm = 0.375;
        assert!(Simulation::new(&build, &material, &cfg).is_ok());
    }

    #[test]
    fn first_layer_completes_in_length_over_speed() {
        let build = BuildSpec {
            wall_length_mm: 7.0,
            n_layers: 1,
            ..BuildSpec::default()
        };
        assert_eq!(build.layer_time_s(), 1.0);
        let (layer, x) = build.laser_position(0.5);
        assert_eq!(layer, 0);
        assert!((x - 3.5).abs() < 1e-12);
    }

    #[test]
    fn birth_times_follow_the_alternating_scan() {
        let (build, material, cfg) = small_build();
        let profile = flat_profile(build.build_duration_s(), 500.0);
        let mut sim = Simulation::new(&build, &material, &cfg).unwrap();
        let n_steps = (build.build_duration_s() / cfg.dt_s).floor() as usize;
        for k in 0..n_steps {
            let t = k as f64 * cfg.dt_s;
            let (layer, x) = build.laser_position(t);
            sim.deposit(layer, x, t, profile.power_at(t));
            sim.step(None);
        }
        // Layer 0 left->right: birth time non-decreasing in x.
        let births0: Vec<f64> = (0..sim.columns())
            .map(|c| sim.t_birth_s[c])
            .collect();
        assert!(births0.windows(2).all(|p| p[1] >= p[0]), "{births0:?}");
        assert!(births0.iter().all(|t| (0.0..=1.0 + 1e-9).contains(t)));
        // Layer 1 right->left: non-increasing in x.
        let births1: Vec<f64> = (0..sim.columns())
            .map(|c| sim.t_birth_s[sim.columns() + c])
            .collect();
        assert!(births1.windows(2).all(|p| p[1] <= p[0]), "{births1:?}");
        assert!(sim.is_active(0, 1) && sim.is_active(sim.columns() - 1, 1));
    }

    #[test]
    fn fresh_nodes_start_at_deposition_temperature() {
        let (build, material, cfg) = small_build();
        let mut sim = Simulation::new(&build, &material, &cfg).unwrap();
        sim.deposit(0, 0.0, 0.0, 480.0);
        assert!(sim.is_active(0, 0));
        assert_eq!(sim.temp_at(0, 0), 1300.0);
        assert_eq!(sim.lp_birth_w[0], 480.0);
        assert!(!sim.is_active(sim.columns() - 1, 0));
    }

    #[test]
    fn cooling_is_monotone_toward_ambient_without_laser() {
        let (build, material, cfg) = small_build();
        let mut sim = Simulation::new(&build, &material, &cfg).unwrap();
        sim.activate_all(900.0);
        let mut last = sim.temp_at(3, 1);
        for _ in 0..500 {
            sim.step(None);
            let t = sim.temp_at(3, 1);
            assert!(t <= last + 1e-12 && t >= material.ambient_c - 1e-9);
            last = t;
        }
    }

    #[test]
    fn energy_balance_with_losses_disabled() {
        let build = BuildSpec {
            wall_length_mm: 19.0,
            substrate_dirichlet: false,
            ..BuildSpec::default()
        };
        let material = MaterialProps {
            convection_w_m2k: 0.0,
            emissivity: 0.0,
            ..MaterialProps::default()
        };
        let cfg = SimConfig {
            dx_mm: 1.0,
            record_nodes: vec![[0, 0]],
            ..SimConfig::default()
        };
        let mut sim = Simulation::new(&build, &material, &cfg).unwrap();
        sim.activate_all(25.0);
        let h0 = sim.total_enthalpy_j(25.0);
        let laser = LaserState {
            x_mm: 9.5,
            z_mm: build.n_layers as f64 * build.layer_height_mm,
            power_w: 600.0,
        };
        let steps = 1000;
        for _ in 0..steps {
            sim.step(Some(&laser));
        }
        let put_in = material.absorptivity * laser.power_w * cfg.dt_s * steps as f64;
        let gained = sim.total_enthalpy_j(25.0) - h0;
        let rel = (gained - put_in).abs() / put_in;
        assert!(rel < 0.01, "ledger off by {:.4}%", rel * 100.0);
    }

    #[test]
    fn laser_under_node_gives_zero_standoff_features() {
        let (build, material, cfg) = small_build();
        let profile = flat_profile(build.build_duration_s(), 500.0);
        let histories = run_build(&build, &material, &cfg, &profile).unwrap();
        let h = &histories[0]; // node [0,0]: born at t = 0 under the laser
        assert_eq!(h.t_birth_s, 0.0);
        assert!((h.dl_mm[0]).abs() < 1e-9, "dl = {}", h.dl_mm[0]);
        assert!((h.dn_mm[0]).abs() < 1e-9, "dn = {}", h.dn_mm[0]);
        assert_eq!(h.lp_w[0], 500.0);
        assert_eq!(h.temp_c[0], 1300.0);
    }

    #[test]
    fn histories_are_aligned_and_finite() {
        let (build, material, cfg) = small_build();
        let profile = flat_profile(build.build_duration_s(), 500.0);
        let histories = run_build(&build, &material, &cfg, &profile).unwrap();
        assert_eq!(histories.len(), 3);
        let half_diag = 0.5
            * (build.wall_length_mm.powi(2)
                + (build.n_layers as f64 * build.layer_height_mm).powi(2))
            .sqrt();
        for h in &histories {
            let n = h.len();
            assert!(n > 0);
            for series in [&h.time_s, &h.temp_c, &h.dl_mm, &h.dn_mm, &h.lp_w] {
                assert_eq!(series.len(), n);
                assert!(series.iter().all(|v| v.is_finite()));
            }
            assert!(h.time_s[0] + 1e-9 >= h.t_birth_s);
            assert!(h.dn_mm.iter().all(|d| *d <= half_diag + 1e-9));
            assert!(h
                .time_s
                .windows(2)
                .all(|p| (p[1] - p[0] - h.sample_period_s).abs() < 1e-9));
        }
    }

    #[test]
    fn refusals_for_short_profiles_and_bad_nodes() {
        let (build, material, mut cfg) = small_build();
        let short = flat_profile(0.5, 500.0);
        assert!(matches!(
            run_build(&build, &material, &cfg, &short),
            Err(Error::Param(_))
        ));
        cfg.record_nodes = vec![[99, 0]];
        let profile = flat_profile(build.build_duration_s(), 500.0);
        assert!(matches!(
            run_build(&build, &material, &cfg, &profile),
            Err(Error::Param(_))
        ));
        cfg.record_nodes = vec![];
        assert!(matches!(
            run_build(&build, &material, &cfg, &profile),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn surface_distance_matches_brute_force_sampling() {
        // Independent oracle: enumerate every active cell's exposed faces and
        // sample each densely; compare the exact segment distance.
        let (build, material, cfg) = small_build();
        let profile = flat_profile(build.build_duration_s(), 500.0);
        let mut sim = Simulation::new(&build, &material, &cfg).unwrap();
        let n_steps = (build.layer_time_s() * 1.5 / cfg.dt_s) as usize;
        for k in 0..n_steps {
            let t = k as f64 * cfg.dt_s;
            let (layer, x) = build.laser_position(t);
            sim.deposit(layer, x, t, profile.power_at(t));
            sim.step(None);
        }
        let dx = build.wall_length_mm / (sim.columns() - 1) as f64;
        let dz = build.layer_height_mm;
        let length = build.wall_length_mm;
        let mut surface_points: Vec<(f64, f64)> = Vec::new();
        let mut add_segment = |x0: f64, z0: f64, x1: f64, z1: f64| {
            for k in 0..=400 {
                let s = k as f64 / 400.0;
                surface_points.push((x0 + s * (x1 - x0), z0 + s * (z1 - z0)));
            }
        };
        for row in 0..sim.rows() {
            for col in 0..sim.columns() {
                if !sim.is_active(col, row) {
                    continue;
                }
                let xc = col as f64 * dx;
                let (x0, x1) = ((xc - dx / 2.0).max(0.0), (xc + dx / 2.0).min(length));
                let (z0, z1) = (row as f64 * dz, (row + 1) as f64 * dz);
                let above = row + 1 < sim.rows() && sim.is_active(col, row + 1);
                let left = col > 0 && sim.is_active(col - 1, row);
                let right = col + 1 < sim.columns() && sim.is_active(col + 1, row);
                if !above {
                    add_segment(x0, z1, x1, z1);
                }
                if !left {
                    add_segment(x0, z0, x0, z1);
                }
                if !right {
                    add_segment(x1, z0, x1, z1);
                }
            }
        }
        for (col, row) in [(0usize, 0usize), (3, 0), (5, 1), (9, 0)] {
            if !sim.is_active(col, row) {
                continue;
            }
            let (x, z) = sim.node_position_mm(col, row);
            let exact = sim.free_surface_distance_mm(x, z);
            let brute = surface_points
                .iter()
                .map(|(sx, sz)| ((x - sx).powi(2) + (z - sz).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(
                (exact - brute).abs() < 5e-3,
                "node ({col},{row}): exact {exact} vs brute {brute}"
            );
        }
    }

    #[test]
    fn finished_wall_distance_is_min_of_ends_and_top() {
        let (build, material, cfg) = small_build();
        let mut sim = Simulation::new(&build, &material, &cfg).unwrap();
        sim.activate_all(100.0);
        let height = build.n_layers as f64 * build.layer_height_mm;
        let (x, z) = (build.wall_length_mm / 2.0, height / 2.0);
        let want = (build.wall_length_mm / 2.0).min(height - z);
        let got = sim.free_surface_distance_mm(x, z);
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn grid_refinement_changes_recorded_temperature_mildly() {
        let build = BuildSpec {
            wall_length_mm: 7.0,
            n_layers: 3,
            ..BuildSpec::default()
        };
        let material = MaterialProps::default();
        let profile = flat_profile(build.build_duration_s(), 500.0);
        let coarse_cfg = SimConfig {
            dx_mm: 0.7,
            dz_mm: 0.75,
            dt_s: 0.002,
            record_every: 10,
            record_nodes: vec![[5, 0]],
        };
        // Same node on the halved lattice: column doubles, row maps to the
        // upper sub-row so the physical position is identical.
        let fine_cfg = SimConfig {
            dx_mm: 0.35,
            dz_mm: 0.375,
            dt_s: 0.0005,
            record_every: 40,
            record_nodes: vec![[10, 1]],
        };
        let coarse = run_build(&build, &material, &coarse_cfg, &profile).unwrap();
        let fine = run_build(&build, &material, &fine_cfg, &profile).unwrap();
        let (hc, hf) = (&coarse[0], &fine[0]);
        assert!((hc.x_mm - hf.x_mm).abs() < 1e-9 && (hc.z_mm - hf.z_mm).abs() < 1e-9);
        // Compare the tail of the traces at matching absolute times.
        let last_c = *hc.temp_c.last().unwrap();
        let last_f = *hf.temp_c.last().unwrap();
        assert!((hc.time_s.last().unwrap() - hf.time_s.last().unwrap()).abs() < 0.021);
        let rel = (last_c - last_f).abs() / last_f.abs();
        assert!(rel < 0.10, "refinement moved the tail by {:.2}%", rel * 100.0);
    }

    #[test]
    fn history_csv_round_trip() {
        let (build, material, cfg) = small_build();
        let profile = flat_profile(build.build_duration_s(), 500.0);
        let histories = run_build(&build, &material, &cfg, &profile).unwrap();
        let h = &histories[1];
        let csv = h.to_csv();
        assert!(csv.starts_with("time_s,temp_c,dl_mm,dn_mm,lp_w\n"));
        let mut meta = h.clone();
        meta.time_s.clear();
        meta.temp_c.clear();
        meta.dl_mm.clear();
        meta.dn_mm.clear();
        meta.lp_w.clear();
        let back = ThermalHistory::from_csv(&meta, &csv).unwrap();
        assert_eq!(back.len(), h.len());
        for (a, b) in h.temp_c.iter().zip(&back.temp_c) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(back.node, h.node);
    }
}

//! Seeded cellular-automata fire spread over a homogeneous grass grid.
//!
//! Each cell carries fuel, moisture and a status that only moves forward:
//! `Unignited -> Igniting -> Burning -> BurnedOut`. A cell must dry to zero
//! moisture before it can burn, then loses a fixed amount of fuel per step.
//! Spread to unignited neighbors is stochastic and biased along the wind's
//! direction of travel.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Upper bound of fuel density in the grass model.
pub const MAX_FUEL: f64 = 0.7;

/// Initial fuel moisture used by [`ScenarioConfig::new`].
pub const DEFAULT_MOISTURE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("{kind} ignition needs at least an 8x8 grid, got {rows}x{cols}")]
    GridTooSmall {
        kind: IgnitionKind,
        rows: usize,
        cols: usize,
    },
    #[error("unknown ignition pattern `{0}`")]
    UnknownPattern(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IgnitionKind {
    Aerial,
    Inward,
    Outward,
    StripNorth,
    StripSouth,
}

impl IgnitionKind {
    pub const ALL: [IgnitionKind; 5] = [
        IgnitionKind::Aerial,
        IgnitionKind::Inward,
        IgnitionKind::Outward,
        IgnitionKind::StripNorth,
        IgnitionKind::StripSouth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IgnitionKind::Aerial => "aerial",
            IgnitionKind::Inward => "inward",
            IgnitionKind::Outward => "outward",
            IgnitionKind::StripNorth => "strip_north",
            IgnitionKind::StripSouth => "strip_south",
        }
    }
}

impl fmt::Display for IgnitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IgnitionKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IgnitionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SimError::UnknownPattern(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IgnitionEvent {
    pub t: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IgnitionPattern {
    pub kind: IgnitionKind,
    pub events: Vec<IgnitionEvent>,
}

impl IgnitionPattern {
    pub fn empty(kind: IgnitionKind) -> Self {
        Self {
            kind,
            events: Vec::new(),
        }
    }

    /// Every cell that is ever lit, as a row-major boolean mask.
    pub fn mask(&self, rows: usize, cols: usize) -> Vec<bool> {
        self.mask_until(rows, cols, usize::MAX)
    }

    /// Cells lit at or before step `t`.
    pub fn mask_until(&self, rows: usize, cols: usize, t: usize) -> Vec<bool> {
        let mut m = vec![false; rows * cols];
        for e in self.events.iter().filter(|e| e.t <= t) {
            if e.row < rows && e.col < cols {
                m[e.row * cols + e.col] = true;
            }
        }
        m
    }
}

/// Lays out the ignition schedule for a pattern on an `rows x cols` grid.
///
/// Strip and ring patterns are fully lit at step 0. Aerial drops
/// `ceil(rows*cols/400)` seeded random dots in four batches at steps 0, 2, 4, 6.
pub fn build_ignition_pattern(
    kind: IgnitionKind,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<IgnitionPattern, SimError> {
    if rows == 0 || cols == 0 {
        return Err(SimError::Config("grid must be at least 1x1".into()));
    }
    let at0 = |row, col| IgnitionEvent { t: 0, row, col };
    let events = match kind {
        IgnitionKind::StripSouth | IgnitionKind::StripNorth => {
            let frac = if kind == IgnitionKind::StripSouth { 0.85 } else { 0.15 };
            let row = ((frac * rows as f64).floor() as usize).min(rows - 1);
            (0..cols).map(|c| at0(row, c)).collect()
        }
        IgnitionKind::Inward | IgnitionKind::Outward if rows < 8 || cols < 8 => {
            return Err(SimError::GridTooSmall { kind, rows, cols });
        }
        IgnitionKind::Inward => {
            let ri = (0.15 * rows as f64).floor() as usize;
            let ci = (0.15 * cols as f64).floor() as usize;
            let (r0, r1, c0, c1) = (ri, rows - 1 - ri, ci, cols - 1 - ci);
            let mut ev = Vec::new();
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if r == r0 || r == r1 || c == c0 || c == c1 {
                        ev.push(at0(r, c));
                    }
                }
            }
            ev
        }
        IgnitionKind::Outward => {
            let (cr, cc) = (rows / 2, cols / 2);
            let arm = (rows.min(cols) / 10).max(1);
            let mut ev = Vec::new();
            for r in cr - arm..=cr + arm {
                for c in cc - arm..=cc + arm {
                    if r == cr || c == cc {
                        ev.push(at0(r, c));
                    }
                }
            }
            ev
        }
        IgnitionKind::Aerial => {
            let n = (rows * cols).div_ceil(400).min(rows * cols);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cells: Vec<usize> = sample(&mut rng, rows * cols, n).into_vec();
            cells.sort_unstable();
            cells
                .into_iter()
                .enumerate()
                .map(|(i, cell)| IgnitionEvent {
                    t: 2 * (i * 4 / n),
                    row: cell / cols,
                    col: cell % cols,
                })
                .collect()
        }
    };
    Ok(IgnitionPattern { kind, events })
}

/// Tunable spread constants of the automaton.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaParams {
    /// Base ignition probability per step from one burning neighbor.
    pub p0: f64,
    /// Wind amplification per m/s.
    pub alpha: f64,
    pub dry_rate: f64,
    pub burn_rate: f64,
}

impl Default for CaParams {
    fn default() -> Self {
        Self {
            p0: 0.25,
            alpha: 0.3,
            dry_rate: 0.34,
            burn_rate: 0.14,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
    pub cell_size_m: f64,
    pub dt_s: f64,
    pub wind_speed: f64,
    /// Meteorological convention: the compass bearing the wind blows *from*.
    pub wind_direction: f64,
    pub ignition: IgnitionPattern,
    pub seed: u64,
    pub initial_fuel: f64,
    pub initial_moisture: f64,
    pub ca: CaParams,
}

impl ScenarioConfig {
    /// A scenario with the pattern's schedule laid out for the given grid.
    pub fn new(
        kind: IgnitionKind,
        rows: usize,
        cols: usize,
        steps: usize,
        wind_speed: f64,
        wind_direction: f64,
        seed: u64,
    ) -> Result<Self, SimError> {
        let ignition = build_ignition_pattern(kind, rows, cols, seed)?;
        let cfg = Self {
            rows,
            cols,
            steps,
            cell_size_m: 2.0,
            dt_s: 1.0,
            wind_speed,
            wind_direction,
            ignition,
            seed,
            initial_fuel: MAX_FUEL,
            initial_moisture: DEFAULT_MOISTURE,
            ca: CaParams::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.rows == 0 || self.cols == 0 || self.steps == 0 {
            return bad(format!(
                "rows, cols and steps must be >= 1 (got {}x{}x{})",
                self.rows, self.cols, self.steps
            ));
        }
        if !(self.wind_speed >= 0.0 && self.wind_speed.is_finite()) {
            return bad(format!("wind_speed must be >= 0, got {}", self.wind_speed));
        }
        if !(0.0..360.0).contains(&self.wind_direction) {
            return bad(format!(
                "wind_direction must lie in [0, 360), got {}",
                self.wind_direction
            ));
        }
        if !(self.initial_fuel > 0.0 && self.initial_fuel <= MAX_FUEL) {
            return bad(format!(
                "initial_fuel must lie in (0, {MAX_FUEL}], got {}",
                self.initial_fuel
            ));
        }
        if !(0.0..=1.0).contains(&self.initial_moisture) {
            return bad(format!(
                "initial_moisture must lie in [0, 1], got {}",
                self.initial_moisture
            ));
        }
        if let Some(e) = self
            .ignition
            .events
            .iter()
            .find(|e| e.row >= self.rows || e.col >= self.cols || e.t >= self.steps)
        {
            return bad(format!(
                "ignition event (t={}, row={}, col={}) outside {}x{} grid or {} steps",
                e.t, e.row, e.col, self.rows, self.cols, self.steps
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CellStatus {
    Unignited,
    Igniting,
    Burning,
    BurnedOut,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState {
    pub fuel: f64,
    pub moisture: f64,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<CellState>,
}

impl Grid {
    pub fn uniform(rows: usize, cols: usize, fuel: f64, moisture: f64) -> Self {
        Self {
            rows,
            cols,
            cells: vec![
                CellState {
                    fuel,
                    moisture,
                    status: CellStatus::Unignited,
                };
                rows * cols
            ],
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &CellState {
        &self.cells[row * self.cols + col]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut CellState {
        &mut self.cells[row * self.cols + col]
    }

    pub fn fuel(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells.iter().map(|c| c.fuel)
    }

    fn neighbors(&self, row: usize, col: usize) -> impl Iterator<Item = (isize, isize, usize)> + '_ {
        const OFFSETS: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        let (r, c) = (row as isize, col as isize);
        OFFSETS.iter().filter_map(move |&(dr, dc)| {
            let (nr, nc) = (r + dr, c + dc);
            (nr >= 0 && nc >= 0 && (nr as usize) < self.rows && (nc as usize) < self.cols)
                .then(|| (dr, dc, nr as usize * self.cols + nc as usize))
        })
    }
}

/// Ambient wind; `direction` is where it blows from, in compass degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wind {
    pub speed: f64,
    pub direction: f64,
}

impl Wind {
    /// Unit vector of travel in (row, col) coordinates; row grows southward.
    fn travel(self) -> (f64, f64) {
        let bearing = ((self.direction + 180.0) % 360.0).to_radians();
        (-bearing.cos(), bearing.sin())
    }
}

/// Advances the automaton one step. All rules read the incoming state; the
/// RNG is consumed once per spread candidate in row-major order.
///
/// A candidate's ignition probability comes from its most favorably placed
/// burning neighbor.
pub fn step(grid: &Grid, wind: Wind, params: &CaParams, rng: &mut impl Rng) -> Grid {
    let (tr, tc) = wind.travel();
    let mut next = grid.clone();
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let idx = row * grid.cols + col;
            let cur = grid.cells[idx];
            let out = &mut next.cells[idx];
            let burning_nbrs = grid
                .neighbors(row, col)
                .filter(|&(_, _, n)| grid.cells[n].status == CellStatus::Burning);
            match cur.status {
                CellStatus::Igniting => {
                    if cur.moisture == 0.0 {
                        out.status = CellStatus::Burning;
                    } else {
                        out.moisture = (cur.moisture - params.dry_rate).max(0.0);
                    }
                }
                CellStatus::Burning => {
                    let fuel = cur.fuel - params.burn_rate;
                    if fuel <= 1e-12 {
                        out.fuel = 0.0;
                        out.status = CellStatus::BurnedOut;
                    } else {
                        out.fuel = fuel;
                    }
                }
                CellStatus::BurnedOut => {}
                CellStatus::Unignited => {
                    let mut any = false;
                    let mut best: f64 = 0.0;
                    for (dr, dc, _) in burning_nbrs {
                        any = true;
                        // Vector from the burning neighbor to this cell.
                        let (vr, vc) = (-dr as f64, -dc as f64);
                        let cos = (vr * tr + vc * tc) / (vr * vr + vc * vc).sqrt();
                        let p = (params.p0 * (1.0 + params.alpha * wind.speed * cos.max(0.0)))
                            .clamp(0.0, 1.0);
                        best = best.max(p);
                    }
                    if any {
                        out.moisture = (cur.moisture - params.dry_rate).max(0.0);
                        let u: f64 = rng.random();
                        if u < best {
                            out.status = CellStatus::Igniting;
                        }
                    }
                }
            }
        }
    }
    next
}

/// T x M x P fuel-density frames, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FuelFieldSequence {
    pub steps: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl FuelFieldSequence {
    pub fn new(steps: usize, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, SimError> {
        if values.len() != steps * rows * cols {
            return Err(SimError::Config(format!(
                "{} values do not fill a {steps}x{rows}x{cols} sequence",
                values.len()
            )));
        }
        Ok(Self {
            steps,
            rows,
            cols,
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.steps, self.rows, self.cols)
    }

    pub fn frame_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn at(&self, t: usize, row: usize, col: usize) -> f64 {
        self.values[(t * self.rows + row) * self.cols + col]
    }
}

/// Stepwise driver; exposes the full cell state after each step.
pub struct Simulator {
    config: ScenarioConfig,
    grid: Grid,
    rng: ChaCha8Rng,
    t: usize,
}

impl Simulator {
    pub fn new(config: ScenarioConfig) -> Result<Self, SimError> {
        config.validate()?;
        let grid = Grid::uniform(
            config.rows,
            config.cols,
            config.initial_fuel,
            config.initial_moisture,
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            grid,
            rng,
            t: 0,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Lights the cells scheduled for the current step, then applies one
    /// automaton step. Returns `None` once all configured steps are done.
    pub fn advance(&mut self) -> Option<&Grid> {
        if self.t >= self.config.steps {
            return None;
        }
        for e in self.config.ignition.events.iter().filter(|e| e.t == self.t) {
            let cell = self.grid.cell_mut(e.row, e.col);
            if cell.status == CellStatus::Unignited {
                cell.status = CellStatus::Igniting;
            }
        }
        let wind = Wind {
            speed: self.config.wind_speed,
            direction: self.config.wind_direction,
        };
        self.grid = step(&self.grid, wind, &self.config.ca, &mut self.rng);
        self.t += 1;
        Some(&self.grid)
    }
}

/// Runs a scenario to completion; frame `t` is the fuel field after the
/// step that processes ignitions scheduled at `t`.
pub fn simulate(config: &ScenarioConfig) -> Result<FuelFieldSequence, SimError> {
    let (steps, rows, cols) = (config.steps, config.rows, config.cols);
    let mut sim = Simulator::new(config.clone())?;
    let mut values = Vec::with_capacity(steps * rows * cols);
    while let Some(grid) = sim.advance() {
        values.extend(grid.fuel());
    }
    FuelFieldSequence::new(steps, rows, cols, values)
}

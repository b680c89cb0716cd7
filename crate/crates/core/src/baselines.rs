//! Nearest-run retrieval baselines: predict a scenario by copying the
//! closest historical run, by ignition geometry or by wind.

use crate::error::{Error, Result};
use crate::sim::{FuelFieldSequence, ScenarioConfig};

/// Historical runs in stable insertion order.
#[derive(Debug, Clone, Default)]
pub struct HistoricalLibrary {
    entries: Vec<(ScenarioConfig, FuelFieldSequence)>,
}

/// The retrieved entry and its distance to the query.
#[derive(Debug, Clone, Copy)]
pub struct Retrieved<'a> {
    pub index: usize,
    pub distance: f64,
    pub config: &'a ScenarioConfig,
    pub sequence: &'a FuelFieldSequence,
    /// Set by [`match_wind`] when every entry has the same speed.
    pub speed_term_dropped: bool,
}

impl HistoricalLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a run; every run must share the first run's dims.
    pub fn push(&mut self, config: ScenarioConfig, sequence: FuelFieldSequence) -> Result<()> {
        if let Some((_, first)) = self.entries.first() {
            if first.dims() != sequence.dims() {
                return Err(Error::Shape(format!(
                    "library holds {:?} sequences, got {:?}",
                    first.dims(),
                    sequence.dims()
                )));
            }
        }
        self.entries.push((config, sequence));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(ScenarioConfig, FuelFieldSequence)] {
        &self.entries
    }

    fn nonempty(&self) -> Result<()> {
        if self.entries.is_empty() {
            Err(Error::Retrieval("historical library is empty".into()))
        } else {
            Ok(())
        }
    }

    fn argmin(&self, distances: &[f64], dropped: bool) -> Retrieved<'_> {
        let mut best = 0;
        for (i, &d) in distances.iter().enumerate() {
            if d < distances[best] {
                best = i;
            }
        }
        let (config, sequence) = &self.entries[best];
        Retrieved {
            index: best,
            distance: distances[best],
            config,
            sequence,
            speed_term_dropped: dropped,
        }
    }
}

/// `1 - |A n B| / |A u B|` over ignition masks; two empty masks are identical.
pub fn ignition_distance(a: &ScenarioConfig, b: &ScenarioConfig) -> f64 {
    let ma = a.ignition.mask(a.rows, a.cols);
    let mb = b.ignition.mask(a.rows, a.cols);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in ma.iter().zip(&mb) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Minimal circular difference in degrees, in `[0, 180]`.
pub fn angular_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Closest ignition geometry; ties go to the lowest index.
pub fn match_ignition<'a>(
    query: &ScenarioConfig,
    library: &'a HistoricalLibrary,
) -> Result<Retrieved<'a>> {
    library.nonempty()?;
    let d: Vec<f64> = library
        .entries
        .iter()
        .map(|(c, _)| ignition_distance(query, c))
        .collect();
    Ok(library.argmin(&d, false))
}

/// Closest wind by range-normalized speed and half-turn-normalized
/// direction; ties go to the lowest index.
pub fn match_wind<'a>(query: &ScenarioConfig, library: &'a HistoricalLibrary) -> Result<Retrieved<'a>> {
    library.nonempty()?;
    let speeds = library.entries.iter().map(|(c, _)| c.wind_speed);
    let lo = speeds.clone().fold(f64::INFINITY, f64::min);
    let hi = speeds.fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let dropped = range <= 0.0;
    let d: Vec<f64> = library
        .entries
        .iter()
        .map(|(c, _)| {
            let ds = if dropped {
                0.0
            } else {
                (query.wind_speed - c.wind_speed) / range
            };
            let dd = angular_diff(query.wind_direction, c.wind_direction) / 180.0;
            (ds * ds + dd * dd).sqrt()
        })
        .collect();
    Ok(library.argmin(&d, dropped))
}

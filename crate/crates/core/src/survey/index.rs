use std::collections::HashMap;

use crate::error::{Error, Result};

/// Uniform grid over (easting, northing) answering strict-radius neighbour queries.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    cell: f64,
    positions: Vec<(f64, f64)>,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl SpatialIndex {
    /// `positions[id] = (easting_m, northing_m)`. Queries with radius larger
    /// than `cell_size` still work, they just scan more cells.
    pub fn new(positions: Vec<(f64, f64)>, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Invalid(format!("cell size must be positive, got {cell_size}")));
        }
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (id, &(e, n)) in positions.iter().enumerate() {
            if !(e.is_finite() && n.is_finite()) {
                return Err(Error::Invalid(format!("patch {id} has a non-finite position")));
            }
            cells.entry(Self::key(cell_size, e, n)).or_default().push(id);
        }
        Ok(Self {
            cell: cell_size,
            positions,
            cells,
        })
    }

    fn key(cell: f64, e: f64, n: f64) -> (i64, i64) {
        ((e / cell).floor() as i64, (n / cell).floor() as i64)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn position(&self, id: usize) -> Option<(f64, f64)> {
        self.positions.get(id).copied()
    }

    /// Sorted ids `j != i` whose planar distance to `i` is strictly below `r`.
    pub fn radius_query(&self, i: usize, r: f64) -> Result<Vec<usize>> {
        let (e, n) = self.position(i).ok_or(Error::UnknownPatch(i))?;
        if !(r > 0.0) {
            return Err(Error::Invalid(format!("query radius must be positive, got {r}")));
        }
        let (cx, cy) = Self::key(self.cell, e, n);
        let reach = (r / self.cell).ceil() as i64;
        let mut out = Vec::new();
        let mut scan = |ids: &[usize]| {
            for &j in ids {
                let (ej, nj) = self.positions[j];
                if j != i && ((n - nj).powi(2) + (e - ej).powi(2)).sqrt() < r {
                    out.push(j);
                }
            }
        };
        let window = (2 * reach + 1).saturating_mul(2 * reach + 1);
        if window as usize > self.cells.len() {
            self.cells.values().for_each(|ids| scan(ids));
        } else {
            for dx in -reach..=reach {
                for dy in -reach..=reach {
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy)) {
                        scan(ids);
                    }
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Smallest distance between any two distinct positions, or `None` with fewer than two.
    pub fn min_spacing(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (i, &(e, n)) in self.positions.iter().enumerate() {
            for &(ej, nj) in &self.positions[i + 1..] {
                let d = ((n - nj).powi(2) + (e - ej).powi(2)).sqrt();
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }
}

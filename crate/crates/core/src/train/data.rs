use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use super::TrainError;
use crate::datagen::{Dataset, DatasetSample};
use crate::physics::{BubbleSystem, FluidParams};

/// Trunk input for `k` radii on an `n`-point grid: row `j·n + i` is
/// `(t_i, r0_j)`. Also returns the matching time tangent `(1, 0)`.
pub fn multi_radius_assemble(
    r0: &[f64],
    t_grid: &[f64],
) -> Result<(Array2<f64>, Array2<f64>), TrainError> {
    if r0.is_empty() || t_grid.is_empty() {
        return Err(TrainError::Config(
            "multi-radius grid needs at least one radius and one time".into(),
        ));
    }
    let n = t_grid.len();
    let rows = n * r0.len();
    let x = Array2::from_shape_fn((rows, 2), |(row, c)| {
        if c == 0 {
            t_grid[row % n]
        } else {
            r0[row / n]
        }
    });
    let mut dx = Array2::zeros((rows, 2));
    dx.column_mut(0).fill(1.0);
    Ok((x, dx))
}

/// `m × (k·n)` → `m × k × n`.
pub fn reshape_multi(out: &Array2<f64>, k: usize) -> Result<Array3<f64>, TrainError> {
    let (m, cols) = out.dim();
    if k == 0 || cols % k != 0 {
        return Err(TrainError::Config(format!(
            "cannot split {cols} columns into {k} radius blocks"
        )));
    }
    Ok(out
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((m, k, cols / k))
        .expect("sizes checked"))
}

pub fn flatten_multi(out: &Array3<f64>) -> Array2<f64> {
    let (m, k, n) = out.dim();
    out.as_standard_layout()
        .into_owned()
        .into_shape_with_order((m, k * n))
        .expect("sizes agree")
}

/// Training rows: one per forcing profile, each carrying the trajectories
/// of every initial radius in radius-major blocks.
#[derive(Debug, Clone)]
pub struct TrainData {
    /// Branch input `m × n`.
    pub pressure: Array2<f64>,
    /// Targets `m × (k·n)` in non-dimensional radius.
    pub radius: Array2<f64>,
    /// `m × k`
    pub systems: Vec<Vec<BubbleSystem>>,
    /// Sample ids per row, one per radius.
    pub ids: Vec<Vec<usize>>,
    /// `(amp, freq)` per row.
    pub forcing: Vec<(f64, f64)>,
    pub r0_values: Vec<f64>,
    pub t_grid: Vec<f64>,
}

impl TrainData {
    /// Group samples by forcing profile and order each group by `r0_values`.
    /// Profiles that miss a radius are dropped; their count is returned.
    pub fn from_samples(
        samples: &[DatasetSample],
        r0_values: &[f64],
        fluid: &FluidParams,
    ) -> Result<(Self, usize), TrainError> {
        let Some(first) = samples.first() else {
            return Err(TrainError::Config("no samples to train on".into()));
        };
        let t_grid = first.pressure.t_grid.clone();
        let n = t_grid.len();
        let k = r0_values.len();
        let mut groups: BTreeMap<(u64, u64), Vec<Option<&DatasetSample>>> = BTreeMap::new();
        let mut order = Vec::new();
        for s in samples {
            if s.n_points() != n || s.pressure.t_grid != t_grid {
                return Err(TrainError::Config(format!(
                    "sample {} uses a different time grid",
                    s.id
                )));
            }
            let Some(j) = r0_values.iter().position(|&r| r == s.meta.r0) else {
                return Err(TrainError::Config(format!(
                    "sample {} has r0 {} outside the design",
                    s.id, s.meta.r0
                )));
            };
            let key = (s.meta.amp.to_bits(), s.meta.freq.to_bits());
            let slot = groups.entry(key).or_insert_with(|| {
                order.push(key);
                vec![None; k]
            });
            slot[j] = Some(s);
        }
        let mut rows = Vec::new();
        let mut dropped = 0;
        for key in order {
            let g = &groups[&key];
            if g.iter().all(Option::is_some) {
                rows.push(g.iter().map(|s| s.expect("checked")).collect::<Vec<_>>());
            } else {
                dropped += 1;
            }
        }
        let m = rows.len();
        let mut pressure = Array2::zeros((m, n));
        let mut radius = Array2::zeros((m, k * n));
        let mut systems = Vec::with_capacity(m);
        let mut ids = Vec::with_capacity(m);
        let mut forcing = Vec::with_capacity(m);
        for (i, row) in rows.iter().enumerate() {
            for (c, &p) in row[0].pressure.p_bar.iter().enumerate() {
                pressure[[i, c]] = p;
            }
            let mut sys = Vec::with_capacity(k);
            for (j, s) in row.iter().enumerate() {
                for (c, &r) in s.radius.iter().enumerate() {
                    radius[[i, j * n + c]] = r;
                }
                sys.push(s.system(fluid)?);
            }
            systems.push(sys);
            ids.push(row.iter().map(|s| s.id).collect());
            forcing.push((row[0].meta.amp, row[0].meta.freq));
        }
        Ok((
            Self {
                pressure,
                radius,
                systems,
                ids,
                forcing,
                r0_values: r0_values.to_vec(),
                t_grid,
            },
            dropped,
        ))
    }

    pub fn load(dataset: &Dataset, ids: &[usize]) -> Result<(Self, usize), TrainError> {
        let samples = dataset.load_many(ids)?;
        let m = &dataset.manifest;
        Self::from_samples(&samples, &m.doe.r0_values, &m.fluid)
    }

    pub fn rows(&self) -> usize {
        self.pressure.nrows()
    }

    pub fn n_time(&self) -> usize {
        self.t_grid.len()
    }

    pub fn n_radii(&self) -> usize {
        self.r0_values.len()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            pressure: self.pressure.select(ndarray::Axis(0), rows),
            radius: self.radius.select(ndarray::Axis(0), rows),
            systems: rows.iter().map(|&r| self.systems[r].clone()).collect(),
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            forcing: rows.iter().map(|&r| self.forcing[r]).collect(),
            r0_values: self.r0_values.clone(),
            t_grid: self.t_grid.clone(),
        }
    }

    /// Trunk input and tangent for a trunk of input width `width`: the time
    /// column alone for width 1, `(t, r0/r0_ref)` for width 2.
    pub fn trunk_input(
        &self,
        width: usize,
        r0_ref: f64,
    ) -> Result<(Array2<f64>, Array2<f64>), TrainError> {
        trunk_input(&self.t_grid, &self.r0_values, width, r0_ref)
    }
}

pub fn trunk_input(
    t_grid: &[f64],
    r0_values: &[f64],
    width: usize,
    r0_ref: f64,
) -> Result<(Array2<f64>, Array2<f64>), TrainError> {
    match width {
        1 if r0_values.len() == 1 => Ok(crate::nn::time_column(t_grid)),
        2 => {
            let scaled: Vec<f64> = r0_values.iter().map(|r| r / r0_ref).collect();
            multi_radius_assemble(&scaled, t_grid)
        }
        _ => Err(TrainError::Config(format!(
            "trunk input width {width} does not fit {} initial radii (use 1 for a single radius, 2 for (t, r0))",
            r0_values.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn assemble_sizes() {
        let t = crate::physics::unit_grid(2000);
        let r0 = [1.0, 1.2, 1.4, 1.6, 1.8];
        let (x, dx) = multi_radius_assemble(&r0, &t).unwrap();
        assert_eq!(x.dim(), (10000, 2));
        assert_eq!(x[[2000 * 3 + 17, 0]], t[17]);
        assert_eq!(x[[2000 * 3 + 17, 1]], 1.6);
        assert!(dx.column(0).iter().all(|&v| v == 1.0) && dx.column(1).iter().all(|&v| v == 0.0));
        let out = Array2::from_shape_fn((3, 10000), |(i, c)| (i * 10000 + c) as f64);
        let r = reshape_multi(&out, 5).unwrap();
        assert_eq!(r.dim(), (3, 5, 2000));
        assert_eq!(r[[2, 4, 1999]], out[[2, 9999]]);
        assert_eq!(r[[1, 2, 5]], out[[1, 4005]]);
        assert_eq!(flatten_multi(&r), out);
    }

    #[test]
    fn single_radius_reduces_to_time_plus_r0() {
        let t = [0.0, 0.5, 1.0];
        let (x, _) = multi_radius_assemble(&[1.0], &t).unwrap();
        assert_eq!(x.column(0).to_vec(), t.to_vec());
        assert!(x.column(1).iter().all(|&v| v == 1.0));
        assert!(multi_radius_assemble(&[], &t).is_err());
    }

    proptest! {
        #[test]
        fn reshape_round_trip(m in 1usize..4, k in 1usize..5, n in 1usize..7, seed in 0u64..100) {
            let x = Array3::from_shape_fn((m, k, n), |(a, b, c)| (seed as f64) + (a * 100 + b * 10 + c) as f64);
            prop_assert_eq!(reshape_multi(&flatten_multi(&x), k).unwrap(), x);
        }
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_doe, DatasetError, DoePoint, DoeSpec};
use crate::integrator::{mean_residual_sq, solve_adaptive, AdaptiveOptions, TrajectoryMeta};
use crate::physics::{
    dimensionless_groups, make_scales, sinusoidal_pressure, BubbleModel, BubbleState, BubbleSystem,
    FluidParams, PressureProfile, Scales, SinusoidalForcing,
};

pub const GENERATOR_VERSION: u32 = 1;

/// Provenance stored alongside every sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub r0: f64,
    pub amp: f64,
    pub freq: f64,
    pub model: BubbleModel,
    pub scales: Scales,
    pub rtol: f64,
    pub atol: f64,
    pub generator_version: u32,
    /// Mean one-step residual `‖G‖²` of the stored trajectory on its own
    /// grid; `None` when a grid step cannot even be evaluated (a trial
    /// stage crosses `R = 0` during a collapse).
    pub residual_mean_sq: Option<f64>,
}

impl SampleMeta {
    /// Whether the stored grid resolves the dynamics to within `bound`.
    pub fn grid_resolved(&self, bound: f64) -> bool {
        self.residual_mean_sq.is_some_and(|r| r <= bound)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub id: usize,
    pub pressure: PressureProfile,
    pub radius: Vec<f64>,
    pub rdot: Vec<f64>,
    pub meta: SampleMeta,
}

impl DatasetSample {
    pub fn n_points(&self) -> usize {
        self.radius.len()
    }

    pub fn system(&self, fluid: &FluidParams) -> Result<BubbleSystem, DatasetError> {
        build_system(
            fluid,
            self.meta.model,
            &self.meta.scales,
            self.meta.r0,
            self.meta.amp,
            self.meta.freq,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SampleStatus {
    Ok,
    Failed { reason: String },
}

/// Bubble system for one design point.
pub(crate) fn build_system(
    fluid: &FluidParams,
    model: BubbleModel,
    scales: &Scales,
    r0: f64,
    amp: f64,
    freq: f64,
) -> Result<BubbleSystem, DatasetError> {
    let mut f = *fluid;
    f.p_g0 = Some(fluid.gas_pressure_at(r0));
    let groups =
        dimensionless_groups(&f, scales).map_err(|e| DatasetError::Invalid(e.to_string()))?;
    Ok(BubbleSystem {
        model,
        groups,
        forcing: SinusoidalForcing::new(amp, freq, fluid, scales),
    })
}

/// Solve one design point to a stored sample.
///
/// Failures come back as the reason string so the caller can keep them in
/// the manifest.
pub fn generate_sample(
    id: usize,
    point: DoePoint,
    spec: &DoeSpec,
    fluid: &FluidParams,
    opts: &AdaptiveOptions,
) -> Result<DatasetSample, String> {
    let scales = make_scales(point.r0, spec.t_max, fluid).map_err(|e| e.to_string())?;
    let pressure = sinusoidal_pressure(point.amp, point.freq, fluid, &scales, spec.n_points)
        .map_err(|e| e.to_string())?;
    let system = build_system(fluid, spec.model, &scales, point.r0, point.amp, point.freq)
        .map_err(|e| e.to_string())?;
    let meta = TrajectoryMeta {
        r0: point.r0,
        amp: point.amp,
        freq: point.freq,
        model: spec.model,
        scales,
    };
    let traj = solve_adaptive(
        &system,
        BubbleState::EQUILIBRIUM.to_array(),
        &pressure.t_grid,
        opts,
        meta,
    )
    .map_err(|e| e.to_string())?;
    let residual = mean_residual_sq(&system, &traj.t_grid, &traj.r_bar, &traj.rdot_bar).ok();
    Ok(DatasetSample {
        id,
        pressure,
        radius: traj.r_bar,
        rdot: traj.rdot_bar,
        meta: SampleMeta {
            r0: point.r0,
            amp: point.amp,
            freq: point.freq,
            model: spec.model,
            scales,
            rtol: opts.rtol,
            atol: opts.atol,
            generator_version: GENERATOR_VERSION,
            residual_mean_sq: residual,
        },
    })
}

/// Solve every design point in parallel. Output order follows
/// [`build_doe`] regardless of thread count.
pub fn generate_corpus(
    spec: &DoeSpec,
    fluid: &FluidParams,
    opts: &AdaptiveOptions,
) -> Result<Vec<(DoePoint, Result<DatasetSample, String>)>, DatasetError> {
    fluid
        .validate()
        .map_err(|e| DatasetError::Invalid(e.to_string()))?;
    let points = build_doe(spec)?;
    Ok(points
        .into_par_iter()
        .enumerate()
        .map(|(id, p)| (p, generate_sample(id, p, spec, fluid, opts)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub seed: u64,
    pub ratio: f64,
}

/// Seeded train/validation split over the usable samples.
///
/// `items` holds `(id, amp, freq)`. Samples sharing a forcing profile move
/// together, so a multi-radius corpus never leaks a profile across the
/// split. The validation share is `floor(groups·(1−ratio))`, at least one.
pub fn split(items: &[(usize, f64, f64)], ratio: f64, seed: u64) -> Result<Split, DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::Invalid(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    let mut groups: Vec<((u64, u64), Vec<usize>)> = Vec::new();
    for &(id, amp, freq) in items {
        let key = (amp.to_bits(), freq.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, ids)) => ids.push(id),
            None => groups.push((key, vec![id])),
        }
    }
    if groups.len() < 2 {
        return Err(DatasetError::Invalid(
            "need at least two distinct forcing profiles to split".into(),
        ));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((groups.len() as f64 * (1.0 - ratio) + 1e-9).floor() as usize).max(1);
    let mut validation: Vec<usize> = order[..n_val]
        .iter()
        .flat_map(|&g| groups[g].1.clone())
        .collect();
    let mut train: Vec<usize> = order[n_val..]
        .iter()
        .flat_map(|&g| groups[g].1.clone())
        .collect();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(Split {
        train,
        validation,
        seed,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::LevelRange;
    use proptest::prelude::*;

    fn tiny_spec(amp: LevelRange, freq: LevelRange) -> DoeSpec {
        DoeSpec {
            r0_values: vec![50e-6],
            amp,
            freq,
            t_max: 50e-6,
            n_points: 2000,
            model: BubbleModel::RayleighPlesset,
        }
    }

    #[test]
    fn zero_amplitude_is_equilibrium() {
        let spec = tiny_spec(LevelRange::new(0.0, 0.0, 1), LevelRange::new(5e5, 5e5, 1));
        let p = build_doe(&spec).unwrap()[0];
        let s = generate_sample(
            0,
            p,
            &spec,
            &FluidParams::default(),
            &AdaptiveOptions::default(),
        )
        .unwrap();
        assert_eq!(s.radius.len(), 2000);
        assert_eq!(s.pressure.p_bar.len(), 2000);
        for (&r, &v) in s.radius.iter().zip(&s.rdot) {
            assert!((r - 1.0).abs() < 1e-10 && v.abs() < 1e-10, "{r} {v}");
        }
    }

    #[test]
    fn generated_samples_are_self_consistent() {
        let fluid = FluidParams::default();
        for model in [BubbleModel::RayleighPlesset, BubbleModel::KellerMiksis] {
            let mut spec = tiny_spec(
                LevelRange::new(2e5, 1e6, 2),
                LevelRange::new(400e3, 1900e3, 2),
            );
            spec.model = model;
            spec.t_max = crate::datagen::default_horizon(model);
            for (_, s) in generate_corpus(&spec, &fluid, &AdaptiveOptions::default()).unwrap() {
                let s = s.unwrap();
                assert!(s.radius.iter().all(|&r| r > 0.0));
                assert!(s.meta.grid_resolved(1e-10), "{model} {:?}", s.meta);
            }
        }
    }

    #[test]
    fn violent_collapse_is_kept_with_its_residual() {
        // 10 bar at 200 kHz drives a collapse far shorter than one grid step.
        let spec = tiny_spec(
            LevelRange::new(1e6, 1e6, 1),
            LevelRange::new(200e3, 200e3, 1),
        );
        let p = build_doe(&spec).unwrap()[0];
        let s = generate_sample(
            0,
            p,
            &spec,
            &FluidParams::default(),
            &AdaptiveOptions::default(),
        )
        .unwrap();
        assert!(s.radius.iter().all(|&r| r > 0.0));
        assert!(!s.meta.grid_resolved(1e-10));
    }

    #[test]
    fn impossible_tolerance_is_reported_not_dropped() {
        let spec = tiny_spec(
            LevelRange::new(1e6, 1e6, 1),
            LevelRange::new(200e3, 200e3, 1),
        );
        let opts = AdaptiveOptions {
            max_steps: 10,
            ..AdaptiveOptions::default()
        };
        let out = generate_corpus(&spec, &FluidParams::default(), &opts).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].1.is_err());
    }

    fn items(n: usize) -> Vec<(usize, f64, f64)> {
        (0..n).map(|i| (i, 1e5, 1e5 + i as f64)).collect()
    }

    #[test]
    fn split_sizes() {
        let s = split(&items(3000), 0.8, 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (2400, 600));
        let s = split(&items(5), 0.8, 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (4, 1));
        assert!(split(&items(5), 1.0, 7).is_err());
        assert!(split(&items(5), 0.0, 7).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        assert_eq!(
            split(&items(100), 0.8, 3).unwrap(),
            split(&items(100), 0.8, 3).unwrap()
        );
        assert_ne!(
            split(&items(100), 0.8, 3).unwrap(),
            split(&items(100), 0.8, 4).unwrap()
        );
    }

    #[test]
    fn split_keeps_profiles_together() {
        let mut it = Vec::new();
        for r in 0..5 {
            for p in 0..10 {
                it.push((r * 10 + p, 1e5, 1e5 * (p + 1) as f64));
            }
        }
        let s = split(&it, 0.8, 1).unwrap();
        assert_eq!(s.validation.len(), 10);
        for &v in &s.validation {
            let freq = it[v].2;
            assert!(s.train.iter().all(|&t| it[t].2 != freq));
        }
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..400, ratio in 0.05f64..0.95, seed in any::<u64>()) {
            let s = split(&items(n), ratio, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(!s.validation.is_empty());
        }
    }
}

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use super::{abs_error, detect_peaks, fft_spectrum, io, mse, SpectralError, SpectrumReport};
use crate::datagen::{build_doe, Dataset, DatasetSample, DoePoint, DoeSpec};
use crate::nn::NetworkParams;
use crate::train::trunk_input;

/// Anything that maps a stored pressure profile to a non-dimensional
/// radius trajectory on the same grid.
pub trait Predictor: Sync {
    fn predict(&self, sample: &DatasetSample) -> Result<Vec<f64>, SpectralError>;
}

/// Returns the ground truth unchanged.
pub struct OracleStub;

impl Predictor for OracleStub {
    fn predict(&self, sample: &DatasetSample) -> Result<Vec<f64>, SpectralError> {
        Ok(sample.radius.clone())
    }
}

pub struct ModelPredictor {
    pub params: NetworkParams,
    /// Radius used to normalize the `r0` trunk coordinate.
    pub r0_ref: f64,
}

impl ModelPredictor {
    /// Prediction for an arbitrary non-dimensional pressure row.
    pub fn predict_profile(
        &self,
        p_bar: &[f64],
        t_grid: &[f64],
        r0: f64,
    ) -> Result<Vec<f64>, SpectralError> {
        let width = self.params.branch_input_dim();
        if p_bar.len() != width {
            return Err(SpectralError::Predict(format!(
                "pressure has {} samples but the branch expects {width}; resample the input onto {width} uniform points",
                p_bar.len()
            )));
        }
        let (x, _) = trunk_input(t_grid, &[r0], self.params.trunk_input_dim(), self.r0_ref)
            .map_err(|e| SpectralError::Predict(e.to_string()))?;
        let p = Array2::from_shape_vec((1, width), p_bar.to_vec()).expect("one row");
        let (r, _) = self
            .params
            .predict(&p, &x, None)
            .map_err(|e| SpectralError::Predict(e.to_string()))?;
        Ok(r.row(0).to_vec())
    }
}

impl Predictor for ModelPredictor {
    fn predict(&self, sample: &DatasetSample) -> Result<Vec<f64>, SpectralError> {
        self.predict_profile(&sample.pressure.p_bar, &sample.pressure.t_grid, sample.meta.r0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub case: usize,
    pub r0: f64,
    pub amp: f64,
    pub freq: f64,
    pub in_distribution: bool,
    /// Non-dimensional radius.
    pub mse: f64,
    pub max_abs_err: f64,
    /// Signed error envelope, non-dimensional.
    pub err_min: f64,
    pub err_max: f64,
    /// Signed error envelope in µm.
    pub err_min_um: f64,
    pub err_max_um: f64,
    pub driving_peak_found: bool,
    pub truth_driving_peak_found: bool,
    pub natural_freq_pred: Option<f64>,
    pub natural_freq_truth: Option<f64>,
    pub error: Option<String>,
}

impl StudyRow {
    fn failed(case: usize, p: DoePoint, in_distribution: bool, error: String) -> Self {
        Self {
            case,
            r0: p.r0,
            amp: p.amp,
            freq: p.freq,
            in_distribution,
            mse: f64::NAN,
            max_abs_err: f64::NAN,
            err_min: f64::NAN,
            err_max: f64::NAN,
            err_min_um: f64::NAN,
            err_max_um: f64::NAN,
            driving_peak_found: false,
            truth_driving_peak_found: false,
            natural_freq_pred: None,
            natural_freq_truth: None,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StudyAggregate {
    pub cases: usize,
    pub failed: usize,
    pub in_distribution_mean_mse: Option<f64>,
    pub extrapolation_mean_mse: Option<f64>,
    pub driving_peaks_found: usize,
}

/// Per-case series kept for plot-data emission.
#[derive(Debug, Clone)]
pub struct CaseSeries {
    pub t: Vec<f64>,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
    pub spectrum_truth: SpectrumReport,
    pub spectrum_pred: SpectrumReport,
    /// Metres per non-dimensional radius unit.
    pub length_scale: f64,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub series: Vec<Option<CaseSeries>>,
    pub aggregate: StudyAggregate,
}

fn find_sample(corpus: &Dataset, p: DoePoint) -> Result<DatasetSample, String> {
    let entry = corpus
        .manifest
        .samples
        .iter()
        .find(|e| e.r0 == p.r0 && e.amp == p.amp && e.freq == p.freq)
        .ok_or_else(|| "no ground truth for this case in the corpus".to_string())?;
    if !entry.is_ok() {
        return Err(format!("ground truth sample {} failed to generate", entry.id));
    }
    corpus.load(entry.id).map_err(|e| e.to_string())
}

fn evaluate(
    predictor: &dyn Predictor,
    sample: &DatasetSample,
    case: usize,
    p: DoePoint,
    in_distribution: bool,
) -> Result<(StudyRow, CaseSeries), SpectralError> {
    let pred = predictor.predict(sample)?;
    let truth = &sample.radius;
    let err = abs_error(&pred, truth)?;
    let scales = &sample.meta.scales;
    let (lo, hi) = err
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    let dt = scales.time_to_si(sample.pressure.t_grid[1] - sample.pressure.t_grid[0]);
    let hint = Some(p.freq);
    let spec_t = detect_peaks(&fft_spectrum(truth, dt)?, hint)?;
    // A flat prediction has no peaks at all; report that as "not found".
    let raw_p = fft_spectrum(&pred, dt)?;
    let spec_p = detect_peaks(&raw_p, hint).unwrap_or(raw_p);
    let um = scales.a * 1e6;
    let row = StudyRow {
        case,
        r0: p.r0,
        amp: p.amp,
        freq: p.freq,
        in_distribution,
        mse: mse(&pred, truth)?,
        max_abs_err: lo.abs().max(hi.abs()),
        err_min: lo,
        err_max: hi,
        err_min_um: lo * um,
        err_max_um: hi * um,
        driving_peak_found: spec_p.driving_peak.is_some(),
        truth_driving_peak_found: spec_t.driving_peak.is_some(),
        natural_freq_pred: spec_p.natural_peak.map(|k| k.freq),
        natural_freq_truth: spec_t.natural_peak.map(|k| k.freq),
        error: None,
    };
    let series = CaseSeries {
        t: sample.pressure.t_grid.iter().map(|&t| scales.time_to_si(t)).collect(),
        truth: truth.clone(),
        pred,
        spectrum_truth: spec_t,
        spectrum_pred: spec_p,
        length_scale: scales.a,
    };
    Ok((row, series))
}

/// Evaluate `predictor` on every case of `study`, comparing against the
/// matching samples of `corpus`. Cases inside the `training` ranges are
/// flagged in-distribution. A case without usable ground truth yields an
/// error row and the study continues.
pub fn run_study(
    predictor: &dyn Predictor,
    study: &DoeSpec,
    training: &DoeSpec,
    corpus: &Dataset,
) -> Result<StudyReport, SpectralError> {
    let points = build_doe(study)?;
    let results: Vec<(StudyRow, Option<CaseSeries>)> = points
        .par_iter()
        .enumerate()
        .map(|(case, &p)| {
            let inside = training.covers(p.amp, p.freq) && training.r0_values.contains(&p.r0);
            let res = find_sample(corpus, p).and_then(|s| {
                evaluate(predictor, &s, case, p, inside).map_err(|e| e.to_string())
            });
            match res {
                Ok((row, series)) => (row, Some(series)),
                Err(e) => (StudyRow::failed(case, p, inside, e), None),
            }
        })
        .collect();
    let (rows, series): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mean = |pick: bool| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.error.is_none() && r.in_distribution == pick)
            .map(|r| r.mse)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let aggregate = StudyAggregate {
        cases: rows.len(),
        failed: rows.iter().filter(|r| r.error.is_some()).count(),
        in_distribution_mean_mse: mean(true),
        extrapolation_mean_mse: mean(false),
        driving_peaks_found: rows.iter().filter(|r| r.driving_peak_found).count(),
    };
    Ok(StudyReport {
        rows,
        series,
        aggregate,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> SpectralError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io(path, source),
        other => io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), SpectralError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `report.csv`, `summary.json`, and per case `spectrum_<case>.csv` and
/// `plotdata_<case>.csv`. Plot data is in SI units (s, m).
pub fn write_study(report: &StudyReport, dir: &Path) -> Result<(), SpectralError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let header = [
        "case",
        "r0",
        "amp",
        "freq",
        "in_distribution",
        "mse",
        "max_abs_err",
        "err_min",
        "err_max",
        "err_min_um",
        "err_max_um",
        "driving_peak_found",
        "truth_driving_peak_found",
        "natural_freq_pred",
        "natural_freq_truth",
        "error",
    ];
    let rows = report.rows.iter().map(|r| {
        vec![
            r.case.to_string(),
            r.r0.to_string(),
            r.amp.to_string(),
            r.freq.to_string(),
            r.in_distribution.to_string(),
            r.mse.to_string(),
            r.max_abs_err.to_string(),
            r.err_min.to_string(),
            r.err_max.to_string(),
            r.err_min_um.to_string(),
            r.err_max_um.to_string(),
            r.driving_peak_found.to_string(),
            r.truth_driving_peak_found.to_string(),
            opt(r.natural_freq_pred),
            opt(r.natural_freq_truth),
            r.error.clone().unwrap_or_default(),
        ]
    });
    write_rows(&dir.join("report.csv"), &header, rows)?;
    let summary = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&report.aggregate).expect("plain struct");
    fs::write(&summary, json).map_err(|e| io(&summary, e))?;
    for (row, series) in report.rows.iter().zip(&report.series) {
        let Some(s) = series else { continue };
        let name = format!("{:03}", row.case);
        let spec = s
            .spectrum_truth
            .freqs
            .iter()
            .zip(&s.spectrum_truth.mags)
            .zip(&s.spectrum_pred.mags)
            .map(|((f, mt), mp)| vec![f.to_string(), mt.to_string(), mp.to_string()]);
        write_rows(
            &dir.join(format!("spectrum_{name}.csv")),
            &["freq", "mag_truth", "mag_pred"],
            spec,
        )?;
        let a = s.length_scale;
        let plot = (0..s.t.len()).map(|i| {
            vec![
                s.t[i].to_string(),
                (s.truth[i] * a).to_string(),
                (s.pred[i] * a).to_string(),
                ((s.pred[i] - s.truth[i]) * a).to_string(),
            ]
        });
        write_rows(
            &dir.join(format!("plotdata_{name}.csv")),
            &["t", "truth", "pred", "abs_err"],
            plot,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, write_dataset, read_dataset, split, LevelRange};
    use crate::integrator::AdaptiveOptions;
    use crate::physics::{BubbleModel, FluidParams};

    fn small_study() -> DoeSpec {
        DoeSpec {
            r0_values: vec![50e-6],
            amp: LevelRange::new(1e5, 2e5, 2),
            freq: LevelRange::new(400e3, 1200e3, 3),
            t_max: 20e-6,
            n_points: 400,
            model: BubbleModel::RayleighPlesset,
        }
    }

    fn corpus(dir: &Path, spec: &DoeSpec) -> Dataset {
        let fluid = FluidParams::default();
        let solver = AdaptiveOptions::default();
        let recs = generate_corpus(spec, &fluid, &solver).unwrap();
        let items: Vec<_> = recs
            .iter()
            .filter_map(|(p, r)| r.as_ref().ok().map(|s| (s.id, p.amp, p.freq)))
            .collect();
        let sp = split(&items, 0.8, 3).unwrap();
        write_dataset(dir, spec, &fluid, &solver, &recs, Some(sp)).unwrap();
        read_dataset(dir).unwrap()
    }

    #[test]
    fn oracle_stub_has_zero_error_and_one_row_per_case() {
        let dir = tempfile::tempdir().unwrap();
        let study = small_study();
        let ds = corpus(dir.path(), &study);
        let mut training = study.clone();
        training.freq = LevelRange::new(400e3, 800e3, 2);
        let rep = run_study(&OracleStub, &study, &training, &ds).unwrap();
        assert_eq!(rep.rows.len(), study.cardinality());
        for r in &rep.rows {
            assert!(r.error.is_none(), "{:?}", r.error);
            assert_eq!(r.mse, 0.0);
            assert_eq!(r.max_abs_err, 0.0);
            assert_eq!(r.in_distribution, r.freq <= 800e3);
            assert_eq!(r.driving_peak_found, r.truth_driving_peak_found);
        }
        let out = dir.path().join("study");
        write_study(&rep, &out).unwrap();
        let report = fs::read_to_string(out.join("report.csv")).unwrap();
        assert_eq!(report.lines().count(), 1 + study.cardinality());
        let plot = fs::read_to_string(out.join("plotdata_000.csv")).unwrap();
        assert_eq!(plot.lines().next().unwrap(), "t,truth,pred,abs_err");
        assert_eq!(plot.lines().count(), 401);
        assert!(out.join("spectrum_005.csv").exists());
    }

    #[test]
    fn missing_ground_truth_gives_error_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut have = small_study();
        have.freq = LevelRange::new(400e3, 400e3, 1);
        let ds = corpus(dir.path(), &have);
        let study = small_study();
        let rep = run_study(&OracleStub, &study, &study, &ds).unwrap();
        assert_eq!(rep.rows.len(), 6);
        assert_eq!(rep.aggregate.failed, 4);
        assert!(rep.rows.iter().filter(|r| r.freq == 400e3).all(|r| r.error.is_none()));
    }

    #[test]
    fn table_three_study_flags() {
        let study = DoeSpec::interpolation_study(BubbleModel::KellerMiksis);
        let training = DoeSpec::single_radius(BubbleModel::KellerMiksis);
        let pts = build_doe(&study).unwrap();
        assert_eq!(pts.len(), 40);
        for p in pts {
            let inside = training.covers(p.amp, p.freq);
            if p.amp == 5.5e5 && p.freq <= 2000e3 {
                assert!(inside);
            }
            if p.freq > 2000e3 || p.amp > 1e6 {
                assert!(!inside);
            }
        }
    }

    #[test]
    fn model_predictor_rejects_wrong_width() {
        use crate::nn::{Activation, Architecture};
        let arch = Architecture {
            branch: vec![16, 8, 4],
            trunk: vec![1, 8, 4],
            branch_activation: Activation::Relu,
            trunk_activation: Activation::Relu,
            rowdy_terms: 3,
        };
        let m = ModelPredictor {
            params: NetworkParams::init(&arch, 1).unwrap(),
            r0_ref: 50e-6,
        };
        let t = crate::physics::unit_grid(16);
        assert_eq!(m.predict_profile(&[1.0; 16], &t, 50e-6).unwrap().len(), 16);
        let e = m.predict_profile(&[1.0; 20], &t, 50e-6).unwrap_err();
        assert!(e.to_string().contains("resample"));
    }
}

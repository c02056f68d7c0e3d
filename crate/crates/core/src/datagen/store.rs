use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sample::{DatasetSample, SampleMeta, SampleStatus, Split, GENERATOR_VERSION};
use super::{DatasetError, DoePoint, DoeSpec};
use crate::integrator::AdaptiveOptions;
use crate::physics::{sinusoidal_pressure, FluidParams, PressureProfile};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOBS: &str = "samples.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub r0: f64,
    pub amp: f64,
    pub freq: f64,
    #[serde(flatten)]
    pub status: SampleStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<SampleMeta>,
    /// Byte offset of the sample's three arrays in `samples.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    pub n_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crc32c: Option<u32>,
}

impl ManifestEntry {
    pub fn is_ok(&self) -> bool {
        matches!(self.status, SampleStatus::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator_version: u32,
    pub doe: DoeSpec,
    pub fluid: FluidParams,
    pub solver: AdaptiveOptions,
    pub samples: Vec<ManifestEntry>,
    #[serde(default)]
    pub split: Option<Split>,
}

impl DatasetManifest {
    pub fn ok_ids(&self) -> Vec<usize> {
        self.samples
            .iter()
            .filter(|e| e.is_ok())
            .map(|e| e.id)
            .collect()
    }

    pub fn failed_count(&self) -> usize {
        self.samples.len() - self.ok_ids().len()
    }

    /// `(id, amp, freq)` of usable samples, as consumed by [`super::split`].
    pub fn split_items(&self) -> Vec<(usize, f64, f64)> {
        self.samples
            .iter()
            .filter(|e| e.is_ok())
            .map(|e| (e.id, e.amp, e.freq))
            .collect()
    }

    pub fn entry(&self, id: usize) -> Result<&ManifestEntry, DatasetError> {
        self.samples
            .get(id)
            .filter(|e| e.id == id)
            .or_else(|| self.samples.iter().find(|e| e.id == id))
            .ok_or(DatasetError::UnknownSample(id))
    }
}

fn encode(sample: &DatasetSample) -> Vec<u8> {
    let n = sample.n_points();
    let mut buf = Vec::with_capacity(24 * n);
    for arr in [&sample.pressure.p_bar, &sample.radius, &sample.rdot] {
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Persist a generated corpus. Samples are written sequentially by the
/// calling thread, so output bytes do not depend on how they were produced.
pub fn write_dataset(
    dir: &Path,
    doe: &DoeSpec,
    fluid: &FluidParams,
    solver: &AdaptiveOptions,
    records: &[(DoePoint, Result<DatasetSample, String>)],
    split: Option<Split>,
) -> Result<DatasetManifest, DatasetError> {
    std::fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    let blob_path = dir.join(BLOBS);
    let file = File::create(&blob_path).map_err(|e| DatasetError::io(&blob_path, e))?;
    let mut out = BufWriter::new(file);
    let mut offset = 0u64;
    let mut samples = Vec::with_capacity(records.len());
    for (id, (point, rec)) in records.iter().enumerate() {
        let entry = match rec {
            Ok(s) => {
                if s.id != id {
                    return Err(DatasetError::Invalid(format!(
                        "record {id} carries sample id {}",
                        s.id
                    )));
                }
                let bytes = encode(s);
                out.write_all(&bytes)
                    .map_err(|e| DatasetError::io(&blob_path, e))?;
                let e = ManifestEntry {
                    id,
                    r0: point.r0,
                    amp: point.amp,
                    freq: point.freq,
                    status: SampleStatus::Ok,
                    meta: Some(s.meta),
                    offset: Some(offset),
                    n_points: s.n_points(),
                    crc32c: Some(crc32c::crc32c(&bytes)),
                };
                offset += bytes.len() as u64;
                e
            }
            Err(reason) => ManifestEntry {
                id,
                r0: point.r0,
                amp: point.amp,
                freq: point.freq,
                status: SampleStatus::Failed {
                    reason: reason.clone(),
                },
                meta: None,
                offset: None,
                n_points: doe.n_points,
                crc32c: None,
            },
        };
        samples.push(entry);
    }
    out.flush().map_err(|e| DatasetError::io(&blob_path, e))?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        generator_version: GENERATOR_VERSION,
        doe: doe.clone(),
        fluid: *fluid,
        solver: *solver,
        samples,
        split,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, text).map_err(|e| DatasetError::io(&path, e))
}

/// An opened dataset directory. Sample payloads are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    dir: PathBuf,
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
    let probe: serde_json::Value = serde_json::from_str(&text)?;
    let found = probe
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(DatasetError::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(probe)?;
    Ok(Dataset {
        manifest,
        dir: dir.to_path_buf(),
    })
}

impl Dataset {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn load(&self, id: usize) -> Result<DatasetSample, DatasetError> {
        let entry = self.manifest.entry(id)?;
        let (meta, offset, crc) = match (&entry.status, entry.meta, entry.offset, entry.crc32c) {
            (SampleStatus::Ok, Some(m), Some(o), Some(c)) => (m, o, c),
            (SampleStatus::Failed { reason }, ..) => {
                return Err(DatasetError::FailedSample {
                    id,
                    reason: reason.clone(),
                })
            }
            _ => {
                return Err(DatasetError::Invalid(format!(
                    "manifest entry {id} lacks offset/checksum"
                )))
            }
        };
        let n = entry.n_points;
        let needed = 24 * n as u64;
        let path = self.dir.join(BLOBS);
        let mut file = File::open(&path).map_err(|e| DatasetError::io(&path, e))?;
        let len = file
            .metadata()
            .map_err(|e| DatasetError::io(&path, e))?
            .len();
        if offset + needed > len {
            return Err(DatasetError::Truncated {
                id,
                offset,
                needed,
                len,
            });
        }
        file.seek(SeekFrom::Start(offset))
            .map_err(|e| DatasetError::io(&path, e))?;
        let mut bytes = vec![0u8; needed as usize];
        file.read_exact(&mut bytes)
            .map_err(|e| DatasetError::io(&path, e))?;
        if crc32c::crc32c(&bytes) != crc {
            return Err(DatasetError::Checksum { id });
        }
        let mut vals = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = || (&mut vals).take(n).collect::<Vec<f64>>();
        let p_bar = take();
        let radius = take();
        let rdot = take();

        // The forcing derivative is not stored; regenerate the profile with
        // the generator's own routine so the values match bit for bit.
        let profile =
            sinusoidal_pressure(meta.amp, meta.freq, &self.manifest.fluid, &meta.scales, n)
                .map_err(|e| DatasetError::Invalid(e.to_string()))?;
        Ok(DatasetSample {
            id,
            pressure: PressureProfile { p_bar, ..profile },
            radius,
            rdot,
            meta,
        })
    }

    pub fn load_many(&self, ids: &[usize]) -> Result<Vec<DatasetSample>, DatasetError> {
        ids.iter().map(|&i| self.load(i)).collect()
    }

    pub fn train_ids(&self) -> Result<&[usize], DatasetError> {
        self.split().map(|s| s.train.as_slice())
    }

    pub fn validation_ids(&self) -> Result<&[usize], DatasetError> {
        self.split().map(|s| s.validation.as_slice())
    }

    fn split(&self) -> Result<&Split, DatasetError> {
        self.manifest
            .split
            .as_ref()
            .ok_or_else(|| DatasetError::Invalid("dataset has no train/validation split".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, split, LevelRange};
    use crate::physics::BubbleModel;

    fn small() -> (DoeSpec, FluidParams, AdaptiveOptions) {
        let doe = DoeSpec {
            r0_values: vec![50e-6],
            amp: LevelRange::new(1e5, 5e5, 2),
            freq: LevelRange::new(300e3, 900e3, 3),
            t_max: 50e-6,
            n_points: 200,
            model: BubbleModel::RayleighPlesset,
        };
        (doe, FluidParams::default(), AdaptiveOptions::default())
    }

    fn write_small(
        dir: &Path,
    ) -> (
        DatasetManifest,
        Vec<(DoePoint, Result<DatasetSample, String>)>,
    ) {
        let (doe, fluid, opts) = small();
        let mut recs = generate_corpus(&doe, &fluid, &opts).unwrap();
        recs[4].1 = Err("forced failure".into());
        let items: Vec<_> = recs
            .iter()
            .filter_map(|(p, r)| r.as_ref().ok().map(|s| (s.id, p.amp, p.freq)))
            .collect();
        let sp = split(&items, 0.8, 11).unwrap();
        let m = write_dataset(dir, &doe, &fluid, &opts, &recs, Some(sp)).unwrap();
        (m, recs)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (m, recs) = write_small(dir.path());
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.manifest.failed_count(), 1);
        for (_, r) in &recs {
            if let Ok(s) = r {
                let back = ds.load(s.id).unwrap();
                assert_eq!(&back, s);
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&back.radius), bits(&s.radius));
                assert_eq!(bits(&back.pressure.dp_bar), bits(&s.pressure.dp_bar));
            }
        }
        let sp = ds.manifest.split.as_ref().unwrap();
        assert_eq!(sp.train.len() + sp.validation.len(), 5);
        assert!(!sp.train.contains(&4) && !sp.validation.contains(&4));
        assert!(matches!(
            ds.load(4),
            Err(DatasetError::FailedSample { id: 4, .. })
        ));
        assert!(matches!(ds.load(99), Err(DatasetError::UnknownSample(99))));
    }

    #[test]
    fn corrupted_byte_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = write_small(dir.path());
        let e = &m.samples[2];
        let pos = e.offset.unwrap() as usize + 8 * 250;
        let path = dir.path().join(BLOBS);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[pos] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert!(matches!(ds.load(2), Err(DatasetError::Checksum { id: 2 })));
        assert!(ds.load(1).is_ok());
    }

    #[test]
    fn truncation_and_version_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = write_small(dir.path());
        let path = dir.path().join(BLOBS);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        let last = m.samples.iter().rev().find(|e| e.is_ok()).unwrap().id;
        assert!(matches!(ds.load(last), Err(DatasetError::Truncated { .. })));

        let mut m2 = m.clone();
        m2.format_version = 7;
        write_manifest(dir.path(), &m2).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DatasetError::Version {
                found: 7,
                expected: 1
            })
        ));
    }
}

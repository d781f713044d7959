//! Binary model container: `EVM1` magic, little-endian fields, CRC32 trailer.

use std::fs;
use std::path::Path;

use super::{Distance, EvmClass, EvmError, EvmHyperparams, EvmModel, ExtremeVector, Weibull};
use crate::features::{put_str, Reader};

pub const MAGIC: &[u8; 4] = b"EVM1";
pub const FORMAT_VERSION: u32 = 1;

impl EvmModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let hp = &self.hyperparams;
        out.extend_from_slice(&(hp.tail_size as u64).to_le_bytes());
        out.extend_from_slice(&hp.cover_threshold.to_le_bytes());
        out.push(hp.distance.code());
        out.extend_from_slice(&hp.distance_multiplier.to_le_bytes());
        put_str(&mut out, &self.extractor);
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.push(u8::from(self.threshold.is_some()));
        out.extend_from_slice(&self.threshold.unwrap_or(0.0).to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            put_str(&mut out, &c.label);
            out.extend_from_slice(&(c.vectors.len() as u32).to_le_bytes());
            for v in &c.vectors {
                for a in &v.anchor {
                    out.extend_from_slice(&a.to_le_bytes());
                }
                out.extend_from_slice(&v.weibull.shape.to_le_bytes());
                out.extend_from_slice(&v.weibull.scale.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, EvmError> {
        let corrupt = |reason: &str| EvmError::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes.len() < MAGIC.len() + 8 {
            return Err(EvmError::Checksum(path.to_path_buf()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body).to_le_bytes() != trailer {
            return Err(EvmError::Checksum(path.to_path_buf()));
        }
        let mut r = Reader::new(&body[MAGIC.len()..]);
        let short = || corrupt("truncated");
        let version = r.u32().ok_or_else(short)?;
        if version != FORMAT_VERSION {
            return Err(EvmError::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let tail_size = r.u64().ok_or_else(short)? as usize;
        let cover_threshold = r.f64().ok_or_else(short)?;
        let distance = r
            .take(1)
            .and_then(|b| Distance::from_code(b[0]))
            .ok_or_else(|| corrupt("unknown distance"))?;
        let distance_multiplier = r.f64().ok_or_else(short)?;
        let hyperparams = EvmHyperparams {
            tail_size,
            cover_threshold,
            distance,
            distance_multiplier,
        };
        hyperparams
            .validate()
            .map_err(|e| corrupt(&e.to_string()))?;
        let extractor = r.string().ok_or_else(short)?;
        let dimension = r.u32().ok_or_else(short)? as usize;
        let has_threshold = r.take(1).ok_or_else(short)?[0] != 0;
        let t = r.f64().ok_or_else(short)?;
        let threshold = has_threshold.then_some(t);
        let n_classes = r.u32().ok_or_else(short)?;
        let mut classes = Vec::new();
        for _ in 0..n_classes {
            let label = r.string().ok_or_else(short)?;
            let n = r.u32().ok_or_else(short)?;
            let mut vectors = Vec::new();
            for _ in 0..n {
                let anchor = (0..dimension)
                    .map(|_| r.f32())
                    .collect::<Option<Vec<f32>>>()
                    .ok_or_else(short)?;
                let shape = r.f64().ok_or_else(short)?;
                let scale = r.f64().ok_or_else(short)?;
                if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
                    return Err(corrupt("non-positive Weibull parameters"));
                }
                vectors.push(ExtremeVector {
                    anchor,
                    weibull: Weibull { shape, scale },
                });
            }
            if vectors.is_empty() {
                return Err(corrupt("class without extreme vectors"));
            }
            classes.push(EvmClass { label, vectors });
        }
        if !r.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(EvmModel {
            hyperparams,
            extractor,
            dimension,
            classes,
            threshold,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EvmError> {
        fs::write(path, self.to_bytes()).map_err(|source| EvmError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EvmError> {
        let bytes = fs::read(path).map_err(|source| EvmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evm::{fit, TrainingClass};
    use crate::features::FeatureVector;
    use crate::seed;
    use rand::Rng;

    fn model() -> EvmModel {
        let mut rng = seed::rng(17);
        let classes: Vec<TrainingClass> = (0..3)
            .map(|c| TrainingClass {
                label: format!("w{c}"),
                points: (0..30)
                    .map(|_| (0..6).map(|_| rng.random_range(0.0..1.0) + f64::from(c)).collect())
                    .collect(),
            })
            .collect();
        let mut m = fit(&classes, "mean-hog", Default::default()).unwrap();
        m.threshold = Some(0.42);
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.evm");
        m.save(&path).unwrap();
        let back = EvmModel::load(&path).unwrap();
        assert_eq!(back, m);
        let mut rng = seed::rng(3);
        for _ in 0..100 {
            let x = FeatureVector {
                extractor: "mean-hog".into(),
                values: (0..6).map(|_| rng.random_range(-1.0..4.0)).collect(),
            };
            let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
            assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = model().to_bytes();
        let p = Path::new("m.evm");
        for cut in [bytes.len() - 1, bytes.len() / 2, 9] {
            assert!(matches!(
                EvmModel::from_bytes(&bytes[..cut], p),
                Err(EvmError::Checksum(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(EvmModel::from_bytes(&flipped, p), Err(EvmError::Checksum(_))));
        assert!(matches!(
            EvmModel::from_bytes(b"NOPE1234", p),
            Err(EvmError::Format { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = model().to_bytes();
        bytes[4] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            EvmModel::from_bytes(&bytes, Path::new("m")),
            Err(EvmError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn extractor_binding_survives_reload() {
        let m = EvmModel::from_bytes(&model().to_bytes(), Path::new("m")).unwrap();
        let x = FeatureVector {
            extractor: "m-mean-hog".into(),
            values: vec![0.0; 6],
        };
        assert!(matches!(
            m.class_scores(&x),
            Err(EvmError::ExtractorMismatch { .. })
        ));
    }
}

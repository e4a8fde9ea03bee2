//! Perturbation estimates recovered from an attacked image alone, plus the
//! oracle (true δ) and identity (raw x′) inputs used for comparison.

pub mod cs;
pub mod dct;
pub mod jpeg;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cs::{cs_reconstruct, soft_threshold, CsConfig, Dictionary};
pub use jpeg::{jpeg_roundtrip, JpegConfig};

use crate::attacks::AdversarialRecord;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    TrueDelta,
    RawImage,
    Jpeg(JpegConfig),
    Cs(CsConfig),
}

impl Method {
    /// Short stable name, e.g. `jpeg-q75`.
    pub fn name(&self) -> String {
        match self {
            Method::TrueDelta => "true-delta".into(),
            Method::RawImage => "raw-image".into(),
            Method::Jpeg(j) => format!("jpeg-q{}", j.quality),
            Method::Cs(_) => "cs".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Method::Jpeg(j) => j.validate(),
            Method::Cs(c) => c.validate(),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Parses `true-delta`, `raw-image`, `jpeg` (quality 75), `jpeg-q<N>` and
/// `cs` (default CS parameters).
impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s {
            "true-delta" => Method::TrueDelta,
            "raw-image" => Method::RawImage,
            "jpeg" => Method::Jpeg(JpegConfig::default()),
            "cs" => Method::Cs(CsConfig::default()),
            _ => match s.strip_prefix("jpeg-q").map(str::parse::<u8>) {
                Some(Ok(quality)) => Method::Jpeg(JpegConfig { quality }),
                _ => return Err(Error::Config(format!("unknown fingerprint method '{s}'"))),
            },
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    /// Same shape as the source image.
    pub delta_hat: Tensor<f32>,
    pub method: Method,
    pub source_id: u64,
    pub class_index: usize,
}

/// `x' - x̂` elementwise.
fn residual(adv: &Tensor<f32>, recon: &Tensor<f32>) -> Tensor<f32> {
    adv.zip_map(recon, |a, b| a - b).expect("reconstruction keeps the image shape")
}

pub fn jpeg_fingerprint(adv: &Tensor<f32>, cfg: &JpegConfig) -> Result<Tensor<f32>> {
    Ok(residual(adv, &jpeg_roundtrip(adv, cfg)?))
}

pub fn cs_fingerprint(adv: &Tensor<f32>, cfg: &CsConfig) -> Result<Tensor<f32>> {
    Ok(residual(adv, &cs_reconstruct(adv, cfg)?.image))
}

/// Fingerprint of a single record. CS masks are seeded per record from the
/// configured seed, the class index and the source id.
pub fn fingerprint(record: &AdversarialRecord, method: &Method) -> Result<Fingerprint> {
    let adv = &record.adversarial;
    let delta_hat = match method {
        Method::TrueDelta => record.delta.clone(),
        Method::RawImage => adv.clone(),
        Method::Jpeg(j) => jpeg_fingerprint(adv, j)?,
        Method::Cs(c) => {
            let seed = derive_seed(c.seed, &[record.meta.class_index as u64, record.meta.source_id]);
            cs_fingerprint(adv, &CsConfig { seed, ..*c })?
        }
    };
    Ok(Fingerprint { delta_hat, method: *method, source_id: record.meta.source_id, class_index: record.meta.class_index })
}

/// Fingerprints for every record, in order, computed in parallel.
pub fn extract(records: &[AdversarialRecord], method: &Method) -> Result<Vec<Fingerprint>> {
    method.validate()?;
    if records.is_empty() {
        return Err(Error::invalid("no records to fingerprint"));
    }
    records.par_iter().map(|r| fingerprint(r, method)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for s in ["true-delta", "raw-image", "jpeg-q75", "jpeg-q25", "cs"] {
            assert_eq!(s.parse::<Method>().unwrap().name(), s);
        }
        assert_eq!("jpeg".parse::<Method>().unwrap().name(), "jpeg-q75");
        assert!("jpeg-q0".parse::<Method>().is_err());
        assert!("wavelet".parse::<Method>().is_err());
    }

    #[test]
    fn method_json_carries_parameters() {
        let m = Method::Jpeg(JpegConfig { quality: 25 });
        let j = serde_json::to_string(&m).unwrap();
        assert_eq!(j, r#"{"kind":"jpeg","quality":25}"#);
        assert_eq!(serde_json::from_str::<Method>(&j).unwrap(), m);
    }
}

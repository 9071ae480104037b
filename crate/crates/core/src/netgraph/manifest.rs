//! `model.toml` plus little-endian tensor blobs; see `docs/manifest.md`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cyclic::{CyclicKind, CyclicSpec, Slope};
use crate::error::{Error, Result};
use crate::fxp::{FixedTensor, QuantKind, QuantScheme, RealTensor};
use crate::kernels::ConvGeometry;

use super::{LayerOp, LayerSpec, ModelManifest, Weights};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.toml";

#[derive(Debug, Serialize, Deserialize)]
struct Doc {
    version: u32,
    accumulator_bits: u32,
    seed: u64,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    name: String,
    op: String,
    full_precision: bool,
    relu: bool,
    #[serde(default)]
    buffered: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    conv: Option<ConvDoc>,
    weights: BlobDoc,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_scheme: Option<SchemeDoc>,
    /// `[2, C]`: scale row then shift row.
    affine: BlobDoc,
    #[serde(skip_serializing_if = "Option::is_none")]
    carry_mean: Option<BlobDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_scheme: Option<SchemeDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_scheme: Option<SchemeDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cyclic: Option<CyclicDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConvDoc {
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
    in_channels: usize,
    height: usize,
    width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobDoc {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemeDoc {
    /// Decimal string with 17 significant digits.
    step_size: String,
    bits: u32,
    signed: bool,
    kind: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CyclicDoc {
    bits: u32,
    slope: String,
    kind: String,
}

fn scheme_doc(s: &QuantScheme) -> SchemeDoc {
    SchemeDoc {
        step_size: format!("{:.16e}", s.step_size()),
        bits: s.bits(),
        signed: s.signed(),
        kind: s.kind().as_str().to_string(),
    }
}

fn scheme_from(d: &SchemeDoc) -> Result<QuantScheme> {
    let step: f64 = d
        .step_size
        .parse()
        .map_err(|_| Error::Format(format!("bad step size `{}`", d.step_size)))?;
    QuantScheme::new(step, d.bits, d.signed, d.kind.parse::<QuantKind>()?)
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_blob(dir: &Path, file: String, bytes: Vec<u8>) -> Result<BlobDoc> {
    let path = dir.join(&file);
    let sha256 = hex(&bytes);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobDoc { path: file, sha256 })
}

fn read_blob(dir: &Path, blob: &BlobDoc) -> Result<Vec<u8>> {
    if Path::new(&blob.path).is_absolute() || blob.path.contains("..") {
        return Err(Error::Format(format!("blob path `{}` must be relative", blob.path)));
    }
    let path = dir.join(&blob.path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if hex(&bytes) != blob.sha256.to_ascii_lowercase() {
        return Err(Error::Checksum { path });
    }
    Ok(bytes)
}

fn real_bytes(t: &RealTensor) -> Vec<u8> {
    let mut buf = Vec::new();
    t.write_blob(&mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Writes `model.toml` and its blobs into `dir` (created if missing);
/// returns the manifest path.
pub fn save_model(model: &ModelManifest, dir: &Path) -> Result<PathBuf> {
    model.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        let stem = format!("{i:02}_{}", sanitize(&l.name));
        let (weights, weight_scheme) = match &l.weights {
            Weights::Fixed(t) => {
                let mut buf = Vec::new();
                t.write_blob(&mut buf).expect("writing to a Vec cannot fail");
                (write_blob(dir, format!("{stem}.weights.bin"), buf)?, Some(scheme_doc(t.scheme())))
            }
            Weights::Real(t) => (write_blob(dir, format!("{stem}.weights.bin"), real_bytes(t))?, None),
        };
        let c = l.out_channels();
        let affine = RealTensor::new(vec![2, c], l.scale.iter().chain(&l.shift).copied().collect())?;
        let affine = write_blob(dir, format!("{stem}.affine.bin"), real_bytes(&affine))?;
        let carry_mean = match &l.carry_mean {
            Some(m) => Some(write_blob(
                dir,
                format!("{stem}.carry.bin"),
                real_bytes(&RealTensor::new(vec![m.len()], m.clone())?),
            )?),
            None => None,
        };
        let (op, conv) = match l.op {
            LayerOp::Linear => ("linear", None),
            LayerOp::Conv {
                geometry,
                in_channels,
                height,
                width,
            } => (
                "conv",
                Some(ConvDoc {
                    kernel_h: geometry.kernel_h,
                    kernel_w: geometry.kernel_w,
                    stride: geometry.stride,
                    pad: geometry.pad,
                    in_channels,
                    height,
                    width,
                }),
            ),
        };
        layers.push(LayerDoc {
            name: l.name.clone(),
            op: op.into(),
            full_precision: l.full_precision,
            relu: l.relu,
            buffered: l.buffered,
            conv,
            weights,
            weight_scheme,
            affine,
            carry_mean,
            input_scheme: l.input_scheme.as_ref().map(scheme_doc),
            output_scheme: l.output_scheme.as_ref().map(scheme_doc),
            cyclic: l.cyclic.as_ref().map(|c| CyclicDoc {
                bits: c.bits(),
                slope: c.slope().to_string(),
                kind: c.kind().as_str().into(),
            }),
        });
    }
    let doc = Doc {
        version: model.version,
        accumulator_bits: model.accumulator_bits,
        seed: model.seed,
        layers,
    };
    let text = toml::to_string(&doc).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Loads a manifest; `path` may be the `model.toml` file or its directory.
pub fn load_model(path: &Path) -> Result<ModelManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let dir = file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let doc: Doc = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if doc.version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: doc.version,
            expected: MANIFEST_VERSION,
        });
    }
    let mut layers = Vec::new();
    for d in &doc.layers {
        let op = match (d.op.as_str(), &d.conv) {
            ("linear", None) => LayerOp::Linear,
            ("conv", Some(c)) => LayerOp::Conv {
                geometry: ConvGeometry::new(c.kernel_h, c.kernel_w, c.stride, c.pad)?,
                in_channels: c.in_channels,
                height: c.height,
                width: c.width,
            },
            (other, _) => {
                return Err(Error::Format(format!(
                    "layer `{}`: op `{other}` without matching geometry",
                    d.name
                )))
            }
        };
        let bytes = read_blob(&dir, &d.weights)?;
        let weights = match &d.weight_scheme {
            Some(s) => Weights::Fixed(FixedTensor::read_blob(bytes.as_slice(), scheme_from(s)?)?),
            None => Weights::Real(RealTensor::read_blob(bytes.as_slice())?),
        };
        let affine = RealTensor::read_blob(read_blob(&dir, &d.affine)?.as_slice())?;
        if affine.shape.len() != 2 || affine.shape[0] != 2 {
            return Err(Error::Format(format!("layer `{}`: affine blob must be [2, C]", d.name)));
        }
        let c = affine.shape[1];
        let carry_mean = match &d.carry_mean {
            Some(b) => Some(RealTensor::read_blob(read_blob(&dir, b)?.as_slice())?.values),
            None => None,
        };
        let cyclic = match &d.cyclic {
            Some(c) => Some(CyclicSpec::new(
                c.bits,
                c.slope.parse::<Slope>()?,
                c.kind.parse::<CyclicKind>()?,
            )?),
            None => None,
        };
        layers.push(LayerSpec {
            name: d.name.clone(),
            op,
            weights,
            input_scheme: d.input_scheme.as_ref().map(scheme_from).transpose()?,
            cyclic,
            scale: affine.values[..c].to_vec(),
            shift: affine.values[c..].to_vec(),
            relu: d.relu,
            output_scheme: d.output_scheme.as_ref().map(scheme_from).transpose()?,
            full_precision: d.full_precision,
            carry_mean,
            buffered: d.buffered,
        });
    }
    let model = ModelManifest {
        version: doc.version,
        accumulator_bits: doc.accumulator_bits,
        seed: doc.seed,
        layers,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelManifest {
        let act = QuantScheme::uniform(0.1 / 3.0, 3, false).unwrap();
        let l0 = LayerSpec {
            name: "fc in".into(),
            op: LayerOp::Linear,
            weights: Weights::Real(RealTensor::new(vec![2, 2], vec![0.5, -1.0 / 3.0, 0.25, 1e-300]).unwrap()),
            input_scheme: None,
            cyclic: None,
            scale: vec![1.0, 2.0],
            shift: vec![0.1, -0.2],
            relu: true,
            output_scheme: Some(act),
            full_precision: true,
            carry_mean: None,
            buffered: false,
        };
        let w = FixedTensor::new(vec![2, 2], vec![1, -1, -1, 1], QuantScheme::binary(0.7).unwrap()).unwrap();
        let l1 = LayerSpec {
            name: "q".into(),
            op: LayerOp::Linear,
            weights: Weights::Fixed(w),
            input_scheme: Some(act),
            cyclic: Some(CyclicSpec::smooth(8, 2.0).unwrap()),
            scale: vec![1.5, 0.5],
            shift: vec![0.0, 1.0],
            relu: false,
            output_scheme: None,
            full_precision: false,
            carry_mean: Some(vec![3.25, 4.0]),
            buffered: false,
        };
        ModelManifest::new(8, 7, vec![l0, l1]).unwrap()
    }

    #[test]
    fn roundtrip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let p = save_model(&m, dir.path()).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);
        assert_eq!(load_model(dir.path()).unwrap(), m);
    }

    #[test]
    fn truncated_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&model(), dir.path()).unwrap();
        let blob = dir.path().join("01_q.weights.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = save_model(&model(), dir.path()).unwrap();
        let text = fs::read_to_string(&p).unwrap().replace("version = 1", "version = 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(
            load_model(&p),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn step_sizes_keep_every_bit() {
        let s = QuantScheme::uniform(0.1 / 3.0, 3, false).unwrap();
        assert_eq!(scheme_from(&scheme_doc(&s)).unwrap(), s);
        assert_eq!(scheme_doc(&s).step_size.trim_start_matches('-').replace(['.', '-', '+'], "").split('e').next().unwrap().len(), 17);
    }
}

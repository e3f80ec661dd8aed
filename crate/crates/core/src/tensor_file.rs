//! Raw tensors on disk: a little-endian `f64` row-major payload (`<base>.bin`)
//! next to a JSON sidecar (`<base>.json`) holding name, dtype, shape, CRC32
//! of the payload and free-form attributes.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::codec::LinearCodec;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VectorFieldModel};

pub const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub crc32: u32,
    #[serde(default)]
    pub attrs: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub meta: TensorMeta,
    pub data: Vec<f64>,
}

impl Tensor {
    fn attr<T: serde::de::DeserializeOwned>(&self, key: &str, base: &Path) -> Result<T> {
        let v = self
            .meta
            .attrs
            .get(key)
            .ok_or_else(|| file_err(base, format!("missing attribute `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| file_err(base, format!("attribute `{key}`: {e}")))
    }
}

/// `(<base>.bin, <base>.json)`.
pub fn file_paths(base: &Path) -> (PathBuf, PathBuf) {
    let mut bin = base.as_os_str().to_owned();
    bin.push(".bin");
    let mut meta = base.as_os_str().to_owned();
    meta.push(".json");
    (bin.into(), meta.into())
}

fn file_err(base: &Path, reason: impl Into<String>) -> Error {
    Error::TensorFile {
        path: base.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write(
    base: &Path,
    name: &str,
    shape: &[usize],
    data: &[f64],
    attrs: Map<String, Value>,
) -> Result<TensorMeta> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(file_err(
            base,
            format!("shape {shape:?} needs {expected} values, got {}", data.len()),
        ));
    }
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let meta = TensorMeta {
        name: name.to_string(),
        dtype: DTYPE.to_string(),
        shape: shape.to_vec(),
        crc32: crc32fast::hash(&bytes),
        attrs,
    };
    let (bin, sidecar) = file_paths(base);
    if let Some(dir) = bin.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&bin, &bytes)?;
    fs::write(&sidecar, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

pub fn read(base: &Path) -> Result<Tensor> {
    let (bin, sidecar) = file_paths(base);
    let meta: TensorMeta = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
    if meta.dtype != DTYPE {
        return Err(file_err(base, format!("unsupported dtype `{}`", meta.dtype)));
    }
    let bytes = fs::read(&bin)?;
    let count: usize = meta.shape.iter().product();
    if bytes.len() != 8 * count {
        return Err(file_err(
            base,
            format!("payload has {} bytes, shape {:?} needs {}", bytes.len(), meta.shape, 8 * count),
        ));
    }
    let crc = crc32fast::hash(&bytes);
    if crc != meta.crc32 {
        return Err(file_err(
            base,
            format!("checksum mismatch: sidecar {:08x}, payload {crc:08x}", meta.crc32),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Tensor { meta, data })
}

/// Stores `n` equally shaped trajectories as an `n x m x d` tensor.
pub fn save_trajectories(base: &Path, trajs: &[Trajectory]) -> Result<TensorMeta> {
    let first = trajs.first().ok_or(Error::Empty("trajectory list"))?;
    let (m, d) = (first.len(), first.dim());
    let mut data = Vec::with_capacity(trajs.len() * m * d);
    for tr in trajs {
        if tr.len() != m || tr.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: m * d,
                got: tr.len() * tr.dim(),
            });
        }
        data.extend(tr.states.iter().flatten());
    }
    let mut attrs = Map::new();
    attrs.insert("system_id".into(), json!(first.system_id));
    attrs.insert("dt".into(), json!(first.dt));
    attrs.insert("channels".into(), json!(first.channels));
    attrs.insert("field_shape".into(), json!(first.field_shape));
    attrs.insert("times".into(), json!(first.times));
    write(base, "trajectories", &[trajs.len(), m, d], &data, attrs)
}

pub fn load_trajectories(base: &Path) -> Result<Vec<Trajectory>> {
    let t = read(base)?;
    let [n, m, d] = t.meta.shape[..] else {
        return Err(file_err(base, format!("expected a 3-d tensor, got shape {:?}", t.meta.shape)));
    };
    let times: Vec<f64> = t.attr("times", base)?;
    if times.len() != m {
        return Err(file_err(base, "times attribute does not match shape"));
    }
    let system_id: String = t.attr("system_id", base)?;
    let dt: f64 = t.attr("dt", base)?;
    let channels: usize = t.attr("channels", base)?;
    let field_shape: Option<(usize, usize)> = t.attr("field_shape", base)?;
    Ok((0..n)
        .map(|i| Trajectory {
            times: times.clone(),
            states: (0..m)
                .map(|j| t.data[(i * m + j) * d..(i * m + j + 1) * d].to_vec())
                .collect(),
            system_id: system_id.clone(),
            dt,
            channels,
            field_shape,
        })
        .collect())
}

/// Stores the codec as a `d x (p + 1)` tensor: basis columns, then the mean.
pub fn save_codec(base: &Path, codec: &LinearCodec) -> Result<TensorMeta> {
    let (d, p) = (codec.d(), codec.p());
    let mut data = Vec::with_capacity(d * (p + 1));
    for i in 0..d {
        data.extend(codec.basis().row(i).iter());
        data.push(codec.mean()[i]);
    }
    let mut attrs = Map::new();
    attrs.insert("p".into(), json!(p));
    write(base, "codec", &[d, p + 1], &data, attrs)
}

pub fn load_codec(base: &Path) -> Result<LinearCodec> {
    let t = read(base)?;
    let [d, cols] = t.meta.shape[..] else {
        return Err(file_err(base, format!("expected a 2-d tensor, got shape {:?}", t.meta.shape)));
    };
    let p: usize = t.attr("p", base)?;
    if cols != p + 1 {
        return Err(file_err(base, "attribute p does not match shape"));
    }
    let basis = DMatrix::from_fn(d, p, |i, j| t.data[i * cols + j]);
    let mean = DVector::from_fn(d, |i, _| t.data[i * cols + p]);
    LinearCodec::from_parts(basis, mean)
}

/// Stores the flat parameter vector with the model configuration and layer layout.
pub fn save_model(base: &Path, model: &VectorFieldModel) -> Result<TensorMeta> {
    let mut attrs = Map::new();
    attrs.insert("config".into(), serde_json::to_value(model.config())?);
    attrs.insert("layout".into(), json!(model.layout()));
    write(base, "model", &[model.num_params()], model.params(), attrs)
}

pub fn load_model(base: &Path) -> Result<VectorFieldModel> {
    let t = read(base)?;
    let config: ModelConfig = t.attr("config", base)?;
    VectorFieldModel::from_params(config, t.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec;
    use crate::model::ModelConfig;
    use crate::rng;

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("x");
        let data = [1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, 1e300];
        let meta = write(&base, "x", &[2, 3], &data, Map::new()).unwrap();
        let bytes = fs::read(dir.path().join("x.bin")).unwrap();
        assert_eq!(bytes.len(), 48);
        assert_eq!(&bytes[8..16], &(-2.5f64).to_le_bytes());
        let back = read(&base).unwrap();
        assert_eq!(back.data, data);
        assert_eq!(back.meta, meta);
        assert_eq!(back.meta.dtype, "f64le");
    }

    #[test]
    fn corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("y");
        write(&base, "y", &[2], &[1.0, 2.0], Map::new()).unwrap();
        let bin = dir.path().join("y.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[3] ^= 1;
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(read(&base), Err(Error::TensorFile { .. })));
        fs::write(&bin, &bytes[..8]).unwrap();
        assert!(read(&base).is_err());
        assert!(write(&base, "y", &[3], &[1.0], Map::new()).is_err());
    }

    #[test]
    fn codec_and_model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::seeded(0);
        let states: Vec<Vec<f64>> = (0..20).map(|_| rng::normal_vec(&mut r, 5)).collect();
        let c = codec::fit(&states, 3).unwrap();
        save_codec(&dir.path().join("codec"), &c).unwrap();
        assert_eq!(load_codec(&dir.path().join("codec")).unwrap(), c);

        let m = VectorFieldModel::init(ModelConfig::new(3), 5).unwrap();
        save_model(&dir.path().join("model"), &m).unwrap();
        assert_eq!(load_model(&dir.path().join("model")).unwrap(), m);
    }
}

//! Tensor bundle file format: a UTF-8 JSON manifest listing tensor
//! metadata (shape, dtype, bits, dyadic scales, zero-points, granularity)
//! with payload offsets into a little-endian raw-byte sidecar `.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::block::{BlockDims, BlockWeights, CalibratedBlock, ChannelGrid, QuantConfig};
use crate::error::{Error, Result};
use crate::fsbr::SmoothingSet;
use crate::gen::OutlierSpec;
use crate::nonlinear::{ClipConfig, NormParams};
use crate::quant::{DyadicScale, Granularity, QuantTensor};
use crate::tensor::FloatTensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrngInfo {
    pub name: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_m: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_k: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_point: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis: Option<Granularity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<bool>,
    pub offset: usize,
    pub byte_len: usize,
}

/// Manifest head shared by all bundle kinds; sections are present or
/// absent depending on what the file carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prng: Option<PrngInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dims: Option<BlockDims>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outliers: Option<OutlierSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qconfig: Option<QuantConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<ClipConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<SmoothingSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm1: Option<NormParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm2: Option<NormParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid1: Option<ChannelGrid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid2: Option<ChannelGrid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_gate: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_up: Option<Vec<i64>>,
    pub tensors: Vec<TensorMeta>,
}

impl Manifest {
    fn new(format: &str) -> Self {
        Manifest {
            format: format.to_string(),
            prng: None,
            dims: None,
            samples: None,
            tokens: None,
            outliers: None,
            qconfig: None,
            clip: None,
            smoothing: None,
            sigma: None,
            norm1: None,
            norm2: None,
            grid1: None,
            grid2: None,
            bias_gate: None,
            bias_up: None,
            tensors: Vec::new(),
        }
    }
}

fn bin_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("bin")
}

struct BundleWriter {
    manifest: Manifest,
    payload: Vec<u8>,
}

impl BundleWriter {
    fn new(format: &str) -> Self {
        BundleWriter {
            manifest: Manifest::new(format),
            payload: Vec::new(),
        }
    }

    fn push_float(&mut self, name: &str, t: &FloatTensor) {
        let offset = self.payload.len();
        for v in t.as_slice() {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.manifest.tensors.push(TensorMeta {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
            bits: None,
            scale_m: None,
            scale_k: None,
            zero_point: None,
            axis: None,
            degenerate: None,
            offset,
            byte_len: self.payload.len() - offset,
        });
    }

    fn push_quant(&mut self, name: &str, t: &QuantTensor) -> Result<()> {
        if t.is_wide() {
            return Err(Error::Manifest(format!(
                "wide tensor {name} is not serializable"
            )));
        }
        let offset = self.payload.len();
        for &v in t.data() {
            self.payload.push(u8::try_from(v).map_err(|_| {
                Error::Manifest(format!("affine value {v} out of u8 range in {name}"))
            })?);
        }
        self.manifest.tensors.push(TensorMeta {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "u8".to_string(),
            bits: Some(t.bits()),
            scale_m: Some(t.scales().iter().map(|s| s.m).collect()),
            scale_k: Some(t.scales().iter().map(|s| s.k).collect()),
            zero_point: Some(t.zero_points().to_vec()),
            axis: Some(t.axis()),
            degenerate: Some(t.is_degenerate()),
            offset,
            byte_len: self.payload.len() - offset,
        });
        Ok(())
    }

    fn write(self, json_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(json_path, json)?;
        fs::write(bin_path(json_path), &self.payload)?;
        Ok(())
    }
}

struct BundleReader {
    manifest: Manifest,
    payload: Vec<u8>,
}

impl BundleReader {
    fn open(json_path: &Path, expect_format: &str) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(json_path)?)?;
        if manifest.format != expect_format {
            return Err(Error::Manifest(format!(
                "expected format {expect_format}, found {}",
                manifest.format
            )));
        }
        let payload = fs::read(bin_path(json_path))?;
        Ok(BundleReader { manifest, payload })
    }

    fn meta(&self, name: &str) -> Result<&TensorMeta> {
        self.manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Manifest(format!("missing tensor {name}")))
    }

    fn float(&self, name: &str) -> Result<FloatTensor> {
        let m = self.meta(name)?;
        if m.dtype != "f32" {
            return Err(Error::Manifest(format!("{name} is not f32")));
        }
        let bytes = self
            .payload
            .get(m.offset..m.offset + m.byte_len)
            .ok_or_else(|| Error::Manifest(format!("{name} payload out of bounds")))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FloatTensor::new(m.shape.clone(), data)
    }

    fn quant(&self, name: &str) -> Result<QuantTensor> {
        let m = self.meta(name)?;
        if m.dtype != "u8" {
            return Err(Error::Manifest(format!("{name} is not u8")));
        }
        let bytes = self
            .payload
            .get(m.offset..m.offset + m.byte_len)
            .ok_or_else(|| Error::Manifest(format!("{name} payload out of bounds")))?;
        let data: Vec<i64> = bytes.iter().map(|&b| b as i64).collect();
        let sm = m
            .scale_m
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("{name} missing scales")))?;
        let sk = m
            .scale_k
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("{name} missing shifts")))?;
        let scales: Vec<DyadicScale> = sm
            .iter()
            .zip(sk)
            .map(|(&m, &k)| DyadicScale { m, k })
            .collect();
        QuantTensor::new(
            m.shape.clone(),
            data,
            m.bits.unwrap_or(8),
            scales,
            m.zero_point.clone().unwrap_or_default(),
            m.axis.unwrap_or(Granularity::PerTensor),
            m.degenerate.unwrap_or(false),
        )
    }
}

pub const MODEL_FORMAT: &str = "iqmodel/1";
pub const DATA_FORMAT: &str = "iqdata/1";
pub const CALIB_FORMAT: &str = "iqcalib/1";

pub fn save_model(path: &Path, block: &BlockWeights, prng: Option<PrngInfo>) -> Result<()> {
    let mut w = BundleWriter::new(MODEL_FORMAT);
    w.manifest.prng = prng;
    w.manifest.dims = Some(block.dims);
    w.manifest.norm1 = Some(block.norm1.clone());
    w.manifest.norm2 = Some(block.norm2.clone());
    for (name, t) in [
        ("w_q", &block.w_q),
        ("w_k", &block.w_k),
        ("w_v", &block.w_v),
        ("w_o", &block.w_o),
        ("w_gate", &block.w_gate),
        ("w_up", &block.w_up),
        ("w_down", &block.w_down),
    ] {
        w.push_float(name, t);
    }
    let f = block.dims.d_ffn;
    w.push_float(
        "b_gate",
        &FloatTensor::new(vec![f], block.b_gate.clone()).unwrap_or_else(|_| FloatTensor::zeros(vec![f])),
    );
    w.push_float(
        "b_up",
        &FloatTensor::new(vec![f], block.b_up.clone()).unwrap_or_else(|_| FloatTensor::zeros(vec![f])),
    );
    w.write(path)
}

pub fn load_model(path: &Path) -> Result<(BlockWeights, Manifest)> {
    let r = BundleReader::open(path, MODEL_FORMAT)?;
    let dims = r
        .manifest
        .dims
        .ok_or_else(|| Error::Manifest("model missing dims".into()))?;
    let block = BlockWeights {
        dims,
        w_q: r.float("w_q")?,
        w_k: r.float("w_k")?,
        w_v: r.float("w_v")?,
        w_o: r.float("w_o")?,
        w_gate: r.float("w_gate")?,
        b_gate: r.float("b_gate")?.as_slice().to_vec(),
        w_up: r.float("w_up")?,
        b_up: r.float("b_up")?.as_slice().to_vec(),
        w_down: r.float("w_down")?,
        norm1: r
            .manifest
            .norm1
            .clone()
            .ok_or_else(|| Error::Manifest("model missing norm1".into()))?,
        norm2: r
            .manifest
            .norm2
            .clone()
            .ok_or_else(|| Error::Manifest("model missing norm2".into()))?,
    };
    block.validate()?;
    Ok((block, r.manifest))
}

pub fn save_data(
    path: &Path,
    samples: &[FloatTensor],
    prng: Option<PrngInfo>,
    outliers: Option<OutlierSpec>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let (t, d) = (samples[0].rows(), samples[0].cols());
    let mut flat = Vec::with_capacity(samples.len() * t * d);
    for s in samples {
        if s.rows() != t || s.cols() != d {
            return Err(Error::ShapeMismatch("ragged sample set".into()));
        }
        flat.extend_from_slice(s.as_slice());
    }
    let all = FloatTensor::new(vec![samples.len(), t, d], flat)?;
    let mut w = BundleWriter::new(DATA_FORMAT);
    w.manifest.prng = prng;
    w.manifest.samples = Some(samples.len());
    w.manifest.tokens = Some(t);
    w.manifest.outliers = outliers;
    w.push_float("data", &all);
    w.write(path)
}

pub fn load_data(path: &Path) -> Result<(Vec<FloatTensor>, Manifest)> {
    let r = BundleReader::open(path, DATA_FORMAT)?;
    let all = r.float("data")?;
    let shape = all.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Manifest(format!(
            "data tensor must be [samples, tokens, d], found {shape:?}"
        )));
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let samples = (0..n)
        .map(|i| {
            FloatTensor::new(
                vec![t, d],
                all.as_slice()[i * t * d..(i + 1) * t * d].to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, r.manifest))
}

pub fn save_calibrated(path: &Path, cb: &CalibratedBlock, prng: Option<PrngInfo>) -> Result<()> {
    let mut w = BundleWriter::new(CALIB_FORMAT);
    w.manifest.prng = prng;
    w.manifest.dims = Some(cb.dims);
    w.manifest.qconfig = Some(cb.qconfig);
    w.manifest.clip = Some(cb.clip);
    w.manifest.smoothing = Some(cb.smoothing.clone());
    w.manifest.sigma = Some(cb.sigma.clone());
    w.manifest.norm1 = Some(cb.norm1.clone());
    w.manifest.norm2 = Some(cb.norm2.clone());
    w.manifest.grid1 = Some(cb.grid1.clone());
    w.manifest.grid2 = Some(cb.grid2.clone());
    w.manifest.bias_gate = Some(cb.b_gate_m.clone());
    w.manifest.bias_up = Some(cb.b_up_m.clone());
    for (name, t) in [
        ("w_q", &cb.w_q),
        ("w_k", &cb.w_k),
        ("w_v", &cb.w_v),
        ("w_o", &cb.w_o),
        ("w_gate", &cb.w_gate),
        ("w_up", &cb.w_up),
        ("w_down", &cb.w_down),
    ] {
        w.push_quant(name, t)?;
    }
    w.write(path)
}

pub fn load_calibrated(path: &Path) -> Result<(CalibratedBlock, Manifest)> {
    let r = BundleReader::open(path, CALIB_FORMAT)?;
    let need = |s: &str| Error::Manifest(format!("calibrated model missing {s}"));
    let m = &r.manifest;
    let cb = CalibratedBlock {
        dims: m.dims.ok_or_else(|| need("dims"))?,
        qconfig: m.qconfig.ok_or_else(|| need("qconfig"))?,
        clip: m.clip.ok_or_else(|| need("clip"))?,
        smoothing: m.smoothing.clone().ok_or_else(|| need("smoothing"))?,
        w_q: r.quant("w_q")?,
        w_k: r.quant("w_k")?,
        w_v: r.quant("w_v")?,
        w_o: r.quant("w_o")?,
        w_gate: r.quant("w_gate")?,
        w_up: r.quant("w_up")?,
        w_down: r.quant("w_down")?,
        b_gate_m: m.bias_gate.clone().ok_or_else(|| need("bias_gate"))?,
        b_up_m: m.bias_up.clone().ok_or_else(|| need("bias_up"))?,
        norm1: m.norm1.clone().ok_or_else(|| need("norm1"))?,
        norm2: m.norm2.clone().ok_or_else(|| need("norm2"))?,
        grid1: m.grid1.clone().ok_or_else(|| need("grid1"))?,
        grid2: m.grid2.clone().ok_or_else(|| need("grid2"))?,
        sigma: m.sigma.clone().ok_or_else(|| need("sigma"))?,
        norm1_int: crate::nonlinear::IntNormParams {
            gamma: vec![],
            sign: vec![],
            beta_m: None,
        },
        norm2_int: crate::nonlinear::IntNormParams {
            gamma: vec![],
            sign: vec![],
            beta_m: None,
        },
        sigma_spec: crate::nonlinear::SigmaPrimeSpec { alpha_q16: vec![] },
    };
    let manifest = r.manifest.clone();
    Ok((cb.prepare()?, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{calibrate, BlockDims};
    use crate::fsbr::ReconstructionConfig;
    use crate::gen::{gen_block, gen_calib, OutlierSpec};

    #[test]
    fn model_and_data_roundtrip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let dims = BlockDims {
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
        };
        let block = gen_block(5, &dims);
        let path = dir.path().join("model.json");
        save_model(
            &path,
            &block,
            Some(PrngInfo {
                name: "chacha12".into(),
                seed: 5,
            }),
        )
        .unwrap();
        let (back, manifest) = load_model(&path).unwrap();
        assert_eq!(block, back);
        assert_eq!(manifest.prng.unwrap().seed, 5);

        let calib = gen_calib(6, &dims, 3, 4, &OutlierSpec::default());
        let dpath = dir.path().join("calib.json");
        save_data(&dpath, &calib, None, None).unwrap();
        let (cback, _) = load_data(&dpath).unwrap();
        assert_eq!(calib, cback);
    }

    #[test]
    fn calibrated_block_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let dims = BlockDims {
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
        };
        let block = gen_block(9, &dims);
        let calib = gen_calib(10, &dims, 4, 4, &OutlierSpec::default());
        let qc = QuantConfig::new(8, 8).unwrap();
        let rc = ReconstructionConfig {
            steps: 0,
            ..Default::default()
        };
        let (cb, _) = calibrate(&block, &calib, qc, &rc, ClipConfig::DEFAULT, false).unwrap();
        let path = dir.path().join("calibrated.json");
        save_calibrated(&path, &cb, None).unwrap();
        let (back, _) = load_calibrated(&path).unwrap();
        assert_eq!(cb.w_q, back.w_q);
        assert_eq!(cb.w_down, back.w_down);
        assert_eq!(cb.grid2, back.grid2);
        assert_eq!(cb.norm1, back.norm1);
        // Same integer outputs after a save/load cycle.
        let a = crate::block::int_forward(&cb, &calib[0]).unwrap();
        let b = crate::block::int_forward(&back, &calib[0]).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }
}

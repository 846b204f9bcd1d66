//! Post-training int8 quantization of the visual tower, an integer inference
//! path and an analytic cost model.
//!
//! Quantization is symmetric and per tensor (zero point 0). The text branch
//! stays in floating point.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::model::checkpoint::{
    blob_to_tensor, decode_container, encode_container, f64_blob, BlobHeader, DType,
};
use crate::model::{pool_image, pool_images, ModelConfig, ModelParams};
use crate::numcore::{Tensor, DEGENERATE_NORM};
use crate::synthgen::GrayImage;

pub const QMAX: i32 = 127;
pub const SCALE_FLOOR: f64 = 1e-8;
pub const MIN_CALIBRATION: usize = 16;
pub const QMODEL_FORMAT: &str = "scriptbridge-qmodel/1";

/// Scale mapping `max_abs` onto 127, floored to stay positive.
pub fn symmetric_scale(values: &[f64]) -> f64 {
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (max_abs / f64::from(QMAX)).max(SCALE_FLOOR)
}

fn quantize_value(x: f64, scale: f64) -> i8 {
    (x / scale).round().clamp(-f64::from(QMAX), f64::from(QMAX)) as i8
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i8>,
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantTensor {
    pub fn quantize(t: &Tensor, scale: f64) -> Self {
        QuantTensor {
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|&x| quantize_value(x, scale)).collect(),
            scale,
            zero_point: 0,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::quantize(t, symmetric_scale(t.data()))
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self
            .values
            .iter()
            .map(|&q| f64::from(i32::from(q) - self.zero_point) * self.scale)
            .collect();
        Tensor::new(self.shape.clone(), data).expect("shape preserved")
    }
}

/// Per-layer scales of the three dense layers of the visual tower.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub weight_scales: [f64; 3],
    /// Scales of each layer's input activations.
    pub activation_scales: [f64; 3],
}

fn dense_f64(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = x.matmul(w)?;
    let n = b.len();
    for row in out.data_mut().chunks_mut(n) {
        for (o, bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Weight scales from max |w|; activation scales from the float forward
/// pass over a pooled calibration batch.
pub fn calibrate(params: &ModelParams, calibration: &Tensor) -> Result<Calibration> {
    if !calibration.is_matrix() || calibration.rows() < MIN_CALIBRATION {
        return Err(Error::Validation(format!(
            "calibration needs at least {MIN_CALIBRATION} pooled samples, got {:?}",
            calibration.shape()
        )));
    }
    let a0 = calibration.clone();
    let a1 = dense_f64(&a0, &params.w1, &params.b1)?.map(f64::tanh);
    let a2 = dense_f64(&a1, &params.w2, &params.b2)?.map(f64::tanh);
    Ok(Calibration {
        weight_scales: [
            symmetric_scale(params.w1.data()),
            symmetric_scale(params.w2.data()),
            symmetric_scale(params.w3.data()),
        ],
        activation_scales: [
            symmetric_scale(a0.data()),
            symmetric_scale(a1.data()),
            symmetric_scale(a2.data()),
        ],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantLayer {
    pub weight: QuantTensor,
    pub bias: Tensor,
    pub input_scale: f64,
}

/// Visual tower with int8 weights plus the float text projector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub model: ModelConfig,
    pub layers: [QuantLayer; 3],
    pub text_proj: Tensor,
    pub log_temperature: Tensor,
}

pub fn quantize_model(
    params: &ModelParams,
    cfg: &ModelConfig,
    calibration: &Calibration,
) -> Result<QuantizedModel> {
    params.check_shapes(cfg)?;
    let layer = |w: &Tensor, b: &Tensor, i: usize| QuantLayer {
        weight: QuantTensor::quantize(w, calibration.weight_scales[i]),
        bias: b.clone(),
        input_scale: calibration.activation_scales[i],
    };
    Ok(QuantizedModel {
        model: *cfg,
        layers: [
            layer(&params.w1, &params.b1, 0),
            layer(&params.w2, &params.b2, 1),
            layer(&params.w3, &params.b3, 2),
        ],
        text_proj: params.text_proj.clone(),
        log_temperature: params.log_temperature.clone(),
    })
}

impl QuantizedModel {
    /// Float parameters with the visual weights replaced by their
    /// dequantized values; used to build the text gallery.
    pub fn text_params(&self) -> ModelParams {
        let [l1, l2, l3] = &self.layers;
        ModelParams {
            w1: l1.weight.dequantize(),
            b1: l1.bias.clone(),
            w2: l2.weight.dequantize(),
            b2: l2.bias.clone(),
            w3: l3.weight.dequantize(),
            b3: l3.bias.clone(),
            text_proj: self.text_proj.clone(),
            log_temperature: self.log_temperature.clone(),
        }
    }
}

/// Integer layer: int8 activations times int8 weights with checked int32
/// accumulation, rescaled and biased in floating point.
fn quant_dense(layer_index: usize, x: &Tensor, layer: &QuantLayer) -> Result<Tensor> {
    let (n, k) = (x.rows(), x.cols());
    let (wk, m) = (layer.weight.shape[0], layer.weight.shape[1]);
    if k != wk {
        return Err(Error::Dimension(format!(
            "layer {layer_index}: input width {k}, weight fan-in {wk}"
        )));
    }
    let xq: Vec<i32> = x
        .data()
        .iter()
        .map(|&v| i32::from(quantize_value(v, layer.input_scale)))
        .collect();
    let w = &layer.weight.values;
    let rescale = layer.input_scale * layer.weight.scale;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc: i32 = 0;
            for t in 0..k {
                let p = xq[i * k + t] * i32::from(w[t * m + j]);
                acc = acc
                    .checked_add(p)
                    .ok_or(Error::Overflow { layer: layer_index })?;
            }
            out[i * m + j] = f64::from(acc) * rescale + layer.bias.data()[j];
        }
    }
    Tensor::matrix(n, m, out)
}

/// Largest |accumulator| any input can produce for a layer of this fan-in.
pub fn accumulator_bound(fan_in: usize) -> i64 {
    fan_in as i64 * i64::from(QMAX) * i64::from(QMAX)
}

pub fn quantized_encode_pooled(qm: &QuantizedModel, pooled: &Tensor) -> Result<Tensor> {
    let h1 = quant_dense(0, pooled, &qm.layers[0])?.map(f64::tanh);
    let h2 = quant_dense(1, &h1, &qm.layers[1])?.map(f64::tanh);
    let mut out = quant_dense(2, &h2, &qm.layers[2])?;
    let d = out.cols();
    for row in out.data_mut().chunks_mut(d) {
        let n = crate::numcore::norm(row);
        if n < DEGENERATE_NORM {
            return Err(Error::DegenerateVector { norm: n });
        }
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(out)
}

pub fn quantized_encode(img: &GrayImage, qm: &QuantizedModel) -> Result<Vec<f64>> {
    let pooled = Tensor::new(vec![1, qm.model.pooled_dim()], pool_image(img, &qm.model)?)?;
    Ok(quantized_encode_pooled(qm, &pooled)?.into_data())
}

pub fn quantized_encode_images<'a>(
    images: impl IntoIterator<Item = &'a GrayImage>,
    qm: &QuantizedModel,
) -> Result<Tensor> {
    quantized_encode_pooled(qm, &pool_images(images, &qm.model)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct QuantMeta {
    model: ModelConfig,
    calibration: Calibration,
}

pub fn encode_quantized_model(qm: &QuantizedModel) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    for (i, l) in qm.layers.iter().enumerate() {
        blobs.push((
            BlobHeader {
                name: format!("visual.w{}", i + 1),
                dtype: DType::I8,
                shape: l.weight.shape.clone(),
            },
            l.weight.values.iter().map(|&v| v as u8).collect(),
        ));
        blobs.push(f64_blob(&format!("visual.b{}", i + 1), &l.bias));
    }
    blobs.push(f64_blob("text.proj", &qm.text_proj));
    blobs.push(f64_blob("log_temperature", &qm.log_temperature));
    let meta = QuantMeta {
        model: qm.model,
        calibration: Calibration {
            weight_scales: qm.layers.each_ref().map(|l| l.weight.scale),
            activation_scales: qm.layers.each_ref().map(|l| l.input_scale),
        },
    };
    encode_container(QMODEL_FORMAT, &meta, &blobs)
}

pub fn decode_quantized_model(bytes: &[u8]) -> Result<QuantizedModel> {
    let (meta, blobs): (QuantMeta, _) = decode_container(QMODEL_FORMAT, bytes)?;
    meta.model.validate()?;
    if blobs.len() != 8 {
        return Err(Error::Checkpoint(format!(
            "expected 8 tensors, found {}",
            blobs.len()
        )));
    }
    let mut it = blobs.iter();
    let mut layers = Vec::with_capacity(3);
    for i in 0..3 {
        let (wh, wb) = it.next().expect("length checked");
        let (bh, bb) = it.next().expect("length checked");
        if wh.dtype != DType::I8 {
            return Err(Error::Checkpoint(format!("{} is not int8", wh.name)));
        }
        layers.push(QuantLayer {
            weight: QuantTensor {
                shape: wh.shape.clone(),
                values: wb.iter().map(|&b| b as i8).collect(),
                scale: meta.calibration.weight_scales[i],
                zero_point: 0,
            },
            bias: blob_to_tensor(bh, bb)?,
            input_scale: meta.calibration.activation_scales[i],
        });
    }
    let (th, tb) = it.next().expect("length checked");
    let (lh, lb) = it.next().expect("length checked");
    let layers: [QuantLayer; 3] = layers.try_into().expect("three layers");
    let qm = QuantizedModel {
        model: meta.model,
        layers,
        text_proj: blob_to_tensor(th, tb)?,
        log_temperature: blob_to_tensor(lh, lb)?,
    };
    qm.text_params().check_shapes(&qm.model)?;
    Ok(qm)
}

pub fn save_quantized_model(path: &Path, qm: &QuantizedModel) -> Result<()> {
    fsio::write_atomic(path, &encode_quantized_model(qm)?)
}

pub fn load_quantized_model(path: &Path) -> Result<QuantizedModel> {
    decode_quantized_model(&fsio::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub macs: u64,
}

/// Analytic, non-physical cost comparison of float32 and int8 inference of
/// the visual tower for one image.
///
/// Latency is modeled as proportional to `MACs × bytes per operand` and
/// energy as `MACs × energy per MAC`, with int8 costing a quarter of
/// float32 per MAC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    /// Additions performed by mean pooling.
    pub pooling_ops: u64,
    pub total_macs: u64,
    pub weight_bytes_f32: u64,
    pub weight_bytes_i8: u64,
    /// Per-tensor scales stored next to the int8 weights.
    pub scale_bytes: u64,
    pub activation_bytes_f32: u64,
    pub activation_bytes_i8: u64,
    pub latency_ratio_f32_over_i8: f64,
    pub energy_ratio_f32_over_i8: f64,
}

pub const ENERGY_PER_MAC_F32: f64 = 4.0;
pub const ENERGY_PER_MAC_I8: f64 = 1.0;

pub fn cost_model(cfg: &ModelConfig) -> CostReport {
    let dims = [
        ("visual.w1", cfg.pooled_dim(), cfg.hidden),
        ("visual.w2", cfg.hidden, cfg.hidden),
        ("visual.w3", cfg.hidden, cfg.embed_dim()),
    ];
    let layers: Vec<LayerCost> = dims
        .iter()
        .map(|&(name, fan_in, fan_out)| LayerCost {
            name: name.to_string(),
            fan_in,
            fan_out,
            macs: (fan_in * fan_out) as u64,
        })
        .collect();
    let total_macs: u64 = layers.iter().map(|l| l.macs).sum();
    let weights: u64 = total_macs;
    let activations: u64 = dims.iter().map(|&(_, i, o)| (i + o) as u64).sum();
    let pooling_ops = (cfg.canvas.height * cfg.canvas.width) as u64;
    let f32_cost = total_macs as f64 * 4.0;
    let i8_cost = total_macs as f64 * 1.0;
    CostReport {
        layers,
        pooling_ops,
        total_macs,
        weight_bytes_f32: 4 * weights,
        weight_bytes_i8: weights,
        scale_bytes: 8 * dims.len() as u64,
        activation_bytes_f32: 4 * activations,
        activation_bytes_i8: activations,
        latency_ratio_f32_over_i8: f32_cost / i8_cost,
        energy_ratio_f32_over_i8: (total_macs as f64 * ENERGY_PER_MAC_F32)
            / (total_macs as f64 * ENERGY_PER_MAC_I8),
    }
}

impl CostReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "fan_in", "fan_out", "macs"])?;
        for l in &self.layers {
            w.write_record([
                l.name.clone(),
                l.fan_in.to_string(),
                l.fan_out.to_string(),
                l.macs.to_string(),
            ])?;
        }
        w.write_record(["total", "", "", &self.total_macs.to_string()])?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Metric(format!("csv flush: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode_pooled, init_params};
    use proptest::prelude::*;
    use rand::Rng;

    fn pooled_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor {
        let mut rng = crate::seed::rng(&[seed]);
        let d = cfg.pooled_dim();
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.random_range(0.0..0.6)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn scale_examples() {
        let w = Tensor::vector(vec![-1.27, 0.5, 1.0]);
        assert!((symmetric_scale(w.data()) - 0.01).abs() < 1e-15);
        assert_eq!(symmetric_scale(&[0.0; 4]), SCALE_FLOOR);
        let q = QuantTensor::from_tensor(&Tensor::vector(vec![0.0; 3]));
        assert_eq!(q.scale, 1e-8);
        assert!(q.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn calibration_is_deterministic_and_needs_enough_samples() {
        let cfg = ModelConfig::default();
        let p = init_params(1, &cfg).unwrap();
        let batch = pooled_batch(&cfg, 16, 0);
        assert_eq!(
            calibrate(&p, &batch).unwrap(),
            calibrate(&p, &batch).unwrap()
        );
        assert!(calibrate(&p, &pooled_batch(&cfg, 15, 0)).is_err());
    }

    #[test]
    fn quantized_path_tracks_float_path() {
        let cfg = ModelConfig::default();
        let p = init_params(2, &cfg).unwrap();
        let batch = pooled_batch(&cfg, 32, 1);
        let qm = quantize_model(&p, &cfg, &calibrate(&p, &batch).unwrap()).unwrap();
        let qv = quantized_encode_pooled(&qm, &batch).unwrap();
        let fv = encode_pooled(&p, &batch).unwrap();
        for i in 0..batch.rows() {
            let c = crate::numcore::dot(qv.row(i), fv.row(i));
            assert!(c > 0.98, "row {i}: {c}");
        }
        assert_eq!(qv, quantized_encode_pooled(&qm, &batch).unwrap());
    }

    #[test]
    fn default_widths_cannot_overflow() {
        let cfg = ModelConfig::default();
        for fan_in in [cfg.pooled_dim(), cfg.hidden] {
            assert!(accumulator_bound(fan_in) < i64::from(i32::MAX));
        }
    }

    #[test]
    fn overflow_is_reported() {
        let fan_in = 140_000;
        let layer = QuantLayer {
            weight: QuantTensor {
                shape: vec![fan_in, 1],
                values: vec![127; fan_in],
                scale: 1.0,
                zero_point: 0,
            },
            bias: Tensor::zeros(&[1]),
            input_scale: 1.0,
        };
        let x = Tensor::new(vec![1, fan_in], vec![127.0; fan_in]).unwrap();
        assert!(matches!(
            quant_dense(0, &x, &layer),
            Err(Error::Overflow { layer: 0 })
        ));
    }

    #[test]
    fn cost_model_examples() {
        let cfg = ModelConfig::default();
        let r = cost_model(&cfg);
        assert_eq!(r.layers[0].macs, 6912);
        assert_eq!(r.weight_bytes_f32, 4 * r.weight_bytes_i8);
        assert_eq!(r.latency_ratio_f32_over_i8, 4.0);
        assert_eq!(r.energy_ratio_f32_over_i8, 4.0);
        let wide = cost_model(&ModelConfig { hidden: 128, ..cfg });
        assert_eq!(wide.layers[0].macs, 2 * r.layers[0].macs);
        assert_eq!(r, cost_model(&cfg));
        assert_eq!(r.to_csv().unwrap().lines().count(), 5);
    }

    #[test]
    fn quantized_model_file_roundtrip() {
        let cfg = ModelConfig::default();
        let p = init_params(3, &cfg).unwrap();
        let qm = quantize_model(
            &p,
            &cfg,
            &calibrate(&p, &pooled_batch(&cfg, 16, 2)).unwrap(),
        )
        .unwrap();
        let back = decode_quantized_model(&encode_quantized_model(&qm).unwrap()).unwrap();
        assert_eq!(back, qm);
    }

    proptest! {
        #[test]
        fn roundtrip_error_is_at_most_half_a_step(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..64)
        ) {
            let t = Tensor::vector(xs);
            let q = QuantTensor::from_tensor(&t);
            let back = q.dequantize();
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= q.scale / 2.0 + 1e-12);
            }
        }
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::anchors::{anchor_base, anchor_matrix, AnchorConfig};
use crate::numcore::{Graph, NodeId, Tensor, DEGENERATE_NORM};
use crate::seed;
use crate::synthgen::{Canvas, GrayImage, Lexicon};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub canvas: Canvas,
    /// Side of the square mean-pool window applied before the MLP.
    pub pool: usize,
    pub hidden: usize,
    pub anchor: AnchorConfig,
    pub tau_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            canvas: Canvas::default(),
            pool: 4,
            hidden: 64,
            anchor: AnchorConfig::default(),
            tau_init: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.anchor.embed_dim
    }

    pub fn pooled_dim(&self) -> usize {
        (self.canvas.height / self.pool) * (self.canvas.width / self.pool)
    }

    pub fn validate(&self) -> Result<()> {
        self.anchor.validate()?;
        if self.pool == 0
            || self.canvas.height % self.pool != 0
            || self.canvas.width % self.pool != 0
        {
            return Err(Error::Config(format!(
                "pool {} must divide canvas {}x{}",
                self.pool, self.canvas.height, self.canvas.width
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            return Err(Error::Config(format!(
                "tau_init {} outside [{TAU_MIN}, {TAU_MAX}]",
                self.tau_init
            )));
        }
        Ok(())
    }
}

/// Trainable weights. Anchor base vectors are not stored here; they are
/// regenerated from the anchor seed whenever needed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    /// Text projector, `[base_dim, embed_dim]`.
    pub text_proj: Tensor,
    pub log_temperature: Tensor,
}

pub const PARAM_NAMES: [&str; 8] = [
    "visual.w1",
    "visual.b1",
    "visual.w2",
    "visual.b2",
    "visual.w3",
    "visual.b3",
    "text.proj",
    "log_temperature",
];

impl ModelParams {
    /// Tensors in `PARAM_NAMES` order.
    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w3,
            &self.b3,
            &self.text_proj,
            &self.log_temperature,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.text_proj,
            &mut self.log_temperature,
        ]
    }

    /// Weight decay applies to weight matrices only.
    pub fn decay_mask() -> [bool; 8] {
        [true, false, true, false, true, false, true, false]
    }

    pub fn from_tensors(mut tensors: Vec<Tensor>, cfg: &ModelConfig) -> Result<Self> {
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.drain(..);
        let mut next = || it.next().expect("length checked");
        let p = ModelParams {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            w3: next(),
            b3: next(),
            text_proj: next(),
            log_temperature: next(),
        };
        p.check_shapes(cfg)?;
        Ok(p)
    }

    pub fn expected_shapes(cfg: &ModelConfig) -> [Vec<usize>; 8] {
        let (p, h, d, b) = (
            cfg.pooled_dim(),
            cfg.hidden,
            cfg.embed_dim(),
            cfg.anchor.base_dim,
        );
        [
            vec![p, h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![h, d],
            vec![d],
            vec![b, d],
            vec![1],
        ]
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        for ((name, t), want) in PARAM_NAMES
            .iter()
            .zip(self.tensors())
            .zip(Self::expected_shapes(cfg))
        {
            if t.shape() != want.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name}: shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.item().exp()
    }

    pub fn clamp_temperature(&mut self) {
        let v = &mut self.log_temperature.data_mut()[0];
        *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

/// Xavier-uniform weights, zero biases, `τ = tau_init`.
pub fn init_params(seed: u64, cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = seed::rng(&[seed, 0x1417]);
    let (p, h, d, b) = (
        cfg.pooled_dim(),
        cfg.hidden,
        cfg.embed_dim(),
        cfg.anchor.base_dim,
    );
    Ok(ModelParams {
        w1: xavier(&mut rng, p, h),
        b1: Tensor::zeros(&[h]),
        w2: xavier(&mut rng, h, h),
        b2: Tensor::zeros(&[h]),
        w3: xavier(&mut rng, h, d),
        b3: Tensor::zeros(&[d]),
        text_proj: xavier(&mut rng, b, d),
        log_temperature: Tensor::scalar(cfg.tau_init.ln()),
    })
}

/// Mean over non-overlapping `pool × pool` patches, row-major patch order.
pub fn pool_image(img: &GrayImage, cfg: &ModelConfig) -> Result<Vec<f64>> {
    if img.height != cfg.canvas.height || img.width != cfg.canvas.width {
        return Err(Error::Dimension(format!(
            "image {}x{} does not match canvas {}x{}",
            img.height, img.width, cfg.canvas.height, cfg.canvas.width
        )));
    }
    let k = cfg.pool;
    let (ph, pw) = (img.height / k, img.width / k);
    let inv = 1.0 / (k * k) as f64 / 255.0;
    let mut out = vec![0.0; ph * pw];
    for r in 0..img.height {
        for c in 0..img.width {
            out[(r / k) * pw + c / k] += f64::from(img.pixels[r * img.width + c]);
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    Ok(out)
}

pub fn pool_images<'a>(
    images: impl IntoIterator<Item = &'a GrayImage>,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let rows = images
        .into_iter()
        .map(|img| pool_image(img, cfg))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = x.matmul(w)?;
    let n = b.len();
    for row in out.data_mut().chunks_mut(n) {
        for (o, bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(out)
}

fn normalize_rows(mut t: Tensor) -> Result<Tensor> {
    let cols = t.cols();
    for row in t.data_mut().chunks_mut(cols) {
        let n = crate::numcore::norm(row);
        if n < DEGENERATE_NORM {
            return Err(Error::DegenerateVector { norm: n });
        }
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(t)
}

/// Visual tower up to (not including) the final normalization.
pub fn visual_pre_norm(params: &ModelParams, pooled: &Tensor) -> Result<Tensor> {
    let h1 = dense(pooled, &params.w1, &params.b1)?.map(f64::tanh);
    let h2 = dense(&h1, &params.w2, &params.b2)?.map(f64::tanh);
    dense(&h2, &params.w3, &params.b3)
}

/// Embeds pooled images `[N, pooled_dim]` to unit rows `[N, D]`.
pub fn encode_pooled(params: &ModelParams, pooled: &Tensor) -> Result<Tensor> {
    normalize_rows(visual_pre_norm(params, pooled)?)
}

pub fn encode_image(img: &GrayImage, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let pooled = Tensor::new(vec![1, cfg.pooled_dim()], pool_image(img, cfg)?)?;
    Ok(encode_pooled(params, &pooled)?.into_data())
}

pub fn encode_images<'a>(
    images: impl IntoIterator<Item = &'a GrayImage>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    encode_pooled(params, &pool_images(images, cfg)?)
}

/// Projects stacked anchor bases `[N, base_dim]` to unit rows `[N, D]`.
pub fn project_anchors(params: &ModelParams, anchors: &Tensor) -> Result<Tensor> {
    normalize_rows(anchors.matmul(&params.text_proj)?)
}

pub fn encode_text(
    semantic_id: usize,
    language: &str,
    params: &ModelParams,
    cfg: &ModelConfig,
    lexicon: &Lexicon,
) -> Result<Vec<f64>> {
    let a = anchor_base(semantic_id, language, lexicon, &cfg.anchor)?;
    let a = Tensor::new(vec![1, a.len()], a)?;
    Ok(project_anchors(params, &a)?.into_data())
}

pub fn encode_texts<'a>(
    items: impl IntoIterator<Item = (usize, &'a str)>,
    params: &ModelParams,
    cfg: &ModelConfig,
    lexicon: &Lexicon,
) -> Result<Tensor> {
    project_anchors(params, &anchor_matrix(items, lexicon, &cfg.anchor)?)
}

/// Graph leaves for every trainable tensor, in `PARAM_NAMES` order.
#[derive(Clone, Copy, Debug)]
pub struct ParamNodes {
    pub ids: [NodeId; 8],
}

impl ParamNodes {
    pub fn register(g: &mut Graph, params: &ModelParams) -> Self {
        let ts = params.tensors();
        ParamNodes {
            ids: ts.map(|t| g.leaf(t.clone())),
        }
    }

    pub fn log_temperature(&self) -> NodeId {
        self.ids[7]
    }

    pub fn grads<'g>(&self, g: &'g Graph) -> [&'g Tensor; 8] {
        self.ids.map(|id| g.grad(id))
    }

    /// Visual tower on a pooled-input leaf; returns unit-row embeddings.
    pub fn visual(&self, g: &mut Graph, pooled: NodeId) -> Result<NodeId> {
        let [w1, b1, w2, b2, w3, b3, _, _] = self.ids;
        let h = g.matmul(pooled, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.tanh(h);
        let h = g.matmul(h, w2)?;
        let h = g.add_bias(h, b2)?;
        let h = g.tanh(h);
        let h = g.matmul(h, w3)?;
        let h = g.add_bias(h, b3)?;
        g.l2_normalize(h)
    }

    /// Text projector on a leaf of stacked anchor bases. The anchor leaf is
    /// never handed to the optimizer.
    pub fn text(&self, g: &mut Graph, anchors: NodeId) -> Result<NodeId> {
        let z = g.matmul(anchors, self.ids[6])?;
        g.l2_normalize(z)
    }
}

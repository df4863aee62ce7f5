//! The lane network: a strided convolutional backbone with an auxiliary
//! segmentation head, and a decoder of curve queries that refines a 3D anchor
//! point set and its active range layer by layer against the feature pyramid.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::lane::{clip_points_to_range, expand_scaled_basis, uniform_y_positions, AnchorPointSet, PolyLane, WorldBox};
use crate::matching::PredSummary;
use crate::nn::{Conv, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::synth::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffMode {
    /// Coefficients regressed from the final query content.
    Direct,
    /// Least-squares fit through the final active anchor points.
    AnchorFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channels per stage; one pyramid level per stage.
    pub channels: Vec<usize>,
    /// Stride of the first stage; each later stage halves the resolution (rounding up).
    pub first_stride: usize,
    pub seg_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 48, 64],
            first_stride: 8,
            seg_channels: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub queries: usize,
    pub heads: usize,
    /// Sampling points per anchor point (K).
    pub samples: usize,
    pub dim: usize,
    /// Anchor points per query (N).
    pub anchors: usize,
    pub poly_order: usize,
    pub ffn_dim: usize,
    pub range_restriction: bool,
    pub self_attention: bool,
    pub context_sampling: bool,
    pub pe_base: f64,
    pub pe_freqs: usize,
    /// Standard deviation (m) of the initial anchor x and z.
    pub anchor_init_std: f64,
    /// Initial start/end logits are `-init_range_logit` / `+init_range_logit`.
    pub init_range_logit: f64,
    pub init_confidence: f64,
    pub coeff_mode: CoeffMode,
    /// Stop gradients through anchors between decoder layers.
    pub detach_anchors: bool,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            queries: 16,
            heads: 4,
            samples: 4,
            dim: 64,
            anchors: 40,
            poly_order: 3,
            ffn_dim: 128,
            range_restriction: true,
            self_attention: true,
            context_sampling: true,
            pe_base: 10000.0,
            pe_freqs: 4,
            anchor_init_std: 1.0,
            init_range_logit: 4.0,
            init_confidence: 0.1,
            coeff_mode: CoeffMode::Direct,
            detach_anchors: false,
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 || self.queries == 0 || self.heads == 0 || self.samples == 0 || self.anchors < 2 {
            return bad("layers, queries, heads and samples must be positive and anchors at least 2");
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad("model.dim must be divisible by model.heads");
        }
        if self.backbone.channels.is_empty() || self.backbone.first_stride == 0 {
            return bad("backbone needs at least one stage and a positive stride");
        }
        if !(0.0 < self.init_confidence && self.init_confidence < 1.0) {
            return bad("model.init_confidence must lie in (0, 1)");
        }
        Ok(())
    }

    /// Strides of the pyramid levels.
    pub fn strides(&self) -> Vec<usize> {
        (0..self.backbone.channels.len())
            .map(|i| self.backbone.first_stride << i)
            .collect()
    }

    /// Pyramid level shapes for an input of `(h, w)`.
    pub fn level_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let (mut lh, mut lw) = (h / self.backbone.first_stride, w / self.backbone.first_stride);
        for _ in 0..self.backbone.channels.len() {
            out.push((lh, lw));
            lh = lh.div_ceil(2);
            lw = lw.div_ceil(2);
        }
        out
    }
}

/// Prior state injected by temporal fusion; the default is the single-frame model.
#[derive(Debug, Clone, Default)]
pub struct QueryPrior {
    /// Replacement initial anchors `(x, z)` in meters, `[Q * N]` each.
    pub anchor_override: Option<(Vec<f64>, Vec<f64>)>,
    /// Historical query contents `[M, D]` attended to before the first layer.
    pub memory: Option<Tensor>,
    /// Historical queries appended to the current set.
    pub extra: Option<ExtraQueries>,
}

impl QueryPrior {
    pub fn is_empty(&self) -> bool {
        self.anchor_override.is_none() && self.memory.is_none() && self.extra.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct ExtraQueries {
    /// `[K, D]`
    pub content: Tensor,
    /// Query index each entry was stored from.
    pub source_index: Vec<usize>,
    /// Transformed anchors `(x, z)` in meters `[K * N]` and range logits `[K * 2]`; when
    /// absent the initial anchors of `source_index` are used.
    pub anchors: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    sa_norm: LayerNorm,
    offset_mlp: Mlp,
    attn_weights: Linear,
    value: Linear,
    output: Linear,
    ca_norm: LayerNorm,
    ffn: Mlp,
    ffn_norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct Backbone {
    stems: Vec<(Conv, Conv)>,
    proj: Vec<Conv>,
    seg: (Conv, Conv),
}

/// Outputs of one decoder layer (after its refinement).
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    /// Anchor x in meters `[Q, N]`.
    pub anchor_x: Var,
    pub anchor_z: Var,
    /// Normalized `(start, end)` `[Q, 2]`.
    pub range: Var,
    /// Cross-attention weights `[Q * M, L * N * K]`.
    pub attn: Var,
    /// Reference feature from context sampling `[Q, D]`.
    pub context: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub num_queries: usize,
    pub conf_logit: Var,
    pub coeff_x: Var,
    pub coeff_z: Var,
    /// Curve sampled at the y-grid `[Q, N]`.
    pub curve_x: Var,
    pub curve_z: Var,
    pub range: Var,
    pub layers: Vec<LayerOutput>,
    pub content: Var,
    pub seg_logits: Var,
    pub pyramid: Vec<Var>,
}

/// Model output for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePrediction {
    pub lane: PolyLane,
    /// Refined anchors after each decoder layer.
    pub layer_anchors: Vec<AnchorPointSet>,
}

pub struct LaneModel {
    pub cfg: ModelConfig,
    pub world: WorldBox,
    pub y_grid: Vec<f64>,
    pub image_size: (usize, usize),
    backbone: Backbone,
    layers: Vec<DecoderLayer>,
    pe_mlp: Mlp,
    refine: Linear,
    temporal_attn: MultiHeadAttention,
    temporal_norm: LayerNorm,
    conf_head: Linear,
    coeff_head: Linear,
    init_content: ParamId,
    init_x: ParamId,
    init_z: ParamId,
    init_range: ParamId,
    pe_freq: Vec<f64>,
    /// `t_n^r` laid out `[R + 1, N]`.
    vandermonde: Vec<f64>,
}

const VALID_EPS: f64 = 1e-12;
const LOGIT_CLAMP: f64 = 1e-9;
const FIT_RIDGE: f64 = 1e-6;

fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Converts a raster to a normalized `[C, H, W]` tensor.
pub fn image_tensor(img: &Raster) -> Tensor {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut data = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + p] = (img.data[p * c + ch] as f64 / 255.0 - 0.5) / 0.25;
        }
    }
    Tensor::new(vec![c, h, w], data)
}

impl LaneModel {
    /// Registers all parameters in `store`, initialized from `seed`.
    pub fn new(
        cfg: ModelConfig,
        world: WorldBox,
        image_size: (usize, usize),
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let s0 = cfg.backbone.first_stride;
        if !image_size.0.is_multiple_of(s0) || !image_size.1.is_multiple_of(s0) || image_size.0 < s0 || image_size.1 < s0 {
            return Err(Error::Shape(format!(
                "image {}x{} is not divisible by the first stride {s0}",
                image_size.0, image_size.1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let d = cfg.dim;
        let (q, n, m, k) = (cfg.queries, cfg.anchors, cfg.heads, cfg.samples);
        let levels = cfg.backbone.channels.len();

        let ch = &cfg.backbone.channels;
        let mut stems = Vec::new();
        let mut proj = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            let (a, b) = if i == 0 {
                (
                    Conv::new(store, rng, "backbone.0.a", 3, c, s0, s0, 0),
                    Conv::new(store, rng, "backbone.0.b", c, c, 3, 1, 1),
                )
            } else {
                (
                    Conv::new(store, rng, &format!("backbone.{i}.a"), ch[i - 1], c, 3, 2, 1),
                    Conv::new(store, rng, &format!("backbone.{i}.b"), c, c, 3, 1, 1),
                )
            };
            stems.push((a, b));
            proj.push(Conv::new(store, rng, &format!("backbone.{i}.proj"), c, d, 1, 1, 0));
        }
        let sc = cfg.backbone.seg_channels;
        let seg = (
            Conv::new(store, rng, "seg.0", ch[0], sc, 3, 1, 1),
            Conv::new(store, rng, "seg.1", sc, 1, 1, 1, 0),
        );
        let backbone = Backbone { stems, proj, seg };

        let mut layers = Vec::new();
        let offsets_out = m * levels * n * k * 2;
        for l in 0..cfg.layers {
            let p = format!("decoder.{l}");
            let offset_mlp = Mlp::new(store, rng, &format!("{p}.offsets"), [2 * d, d, offsets_out]);
            // Small weights plus a fan-shaped bias: head m points along angle 2πm/M, sample k at radius (k+1)/2.
            let w = store.get_mut(offset_mlp.l2.w);
            w.data.iter_mut().for_each(|v| *v *= 0.01);
            let b = store.get_mut(offset_mlp.l2.b);
            for mi in 0..m {
                let ang = std::f64::consts::TAU * mi as f64 / m as f64;
                for li in 0..levels {
                    for ni in 0..n {
                        for ki in 0..k {
                            let idx = (((mi * levels + li) * n + ni) * k + ki) * 2;
                            let r = 0.5 * (ki + 1) as f64;
                            b.data[idx] = r * ang.cos();
                            b.data[idx + 1] = r * ang.sin();
                        }
                    }
                }
            }
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, rng, &format!("{p}.self_attn"), d, m),
                sa_norm: LayerNorm::new(store, &format!("{p}.sa_norm"), d),
                offset_mlp,
                attn_weights: Linear::with_init(store, rng, &format!("{p}.attn_weights"), d, m * levels * n * k, 0.01),
                value: Linear::new(store, rng, &format!("{p}.value"), d, d),
                output: Linear::new(store, rng, &format!("{p}.output"), d, d),
                ca_norm: LayerNorm::new(store, &format!("{p}.ca_norm"), d),
                ffn: Mlp::new(store, rng, &format!("{p}.ffn"), [d, cfg.ffn_dim, d]),
                ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d),
            });
        }
        let pe_in = 3 * n * 2 * cfg.pe_freqs;
        let pe_mlp = Mlp::new(store, rng, "pos_embed", [pe_in, d, d]);
        let refine = Linear::with_init(store, rng, "refine", d, 2 * n + 2, 0.0);
        let temporal_attn = MultiHeadAttention::new(store, rng, "temporal.attn", d, m);
        let temporal_norm = LayerNorm::new(store, "temporal.norm", d);
        let conf_head = Linear::new(store, rng, "head.confidence", d, 1);
        store.get_mut(conf_head.b).data[0] = logit(cfg.init_confidence);
        let r1 = cfg.poly_order + 1;
        let coeff_head = Linear::new(store, rng, "head.coefficients", d, 2 * r1);

        let normal = Normal::new(0.0, cfg.anchor_init_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let init_content = store.add("query.content", crate::nn::uniform(rng, &[q, d], 1.0));
        let xs: Vec<f64> = (0..q * n)
            .map(|_| logit((normal.sample(rng) - world.x.0) / (world.x.1 - world.x.0)))
            .collect();
        let zs: Vec<f64> = (0..q * n)
            .map(|_| logit((normal.sample(rng) - world.z.0) / (world.z.1 - world.z.0)))
            .collect();
        let init_x = store.add("query.anchor_x", Tensor::new(vec![q, n], xs));
        let init_z = store.add("query.anchor_z", Tensor::new(vec![q, n], zs));
        let rl = cfg.init_range_logit;
        let init_range = store.add(
            "query.range",
            Tensor::new(vec![q, 2], (0..q).flat_map(|_| [-rl, rl]).collect()),
        );

        let y_grid = uniform_y_positions(n, world.y.0, world.y.1);
        let (c, s) = basis_center_scale(&world);
        let mut vandermonde = vec![0.0; r1 * n];
        for (ni, y) in y_grid.iter().enumerate() {
            let t = (y - c) / s;
            for r in 0..r1 {
                vandermonde[r * n + ni] = t.powi(r as i32);
            }
        }
        let pe_freq = (0..cfg.pe_freqs)
            .map(|i| cfg.pe_base.powf(-(i as f64) / cfg.pe_freqs as f64))
            .collect();
        Ok(Self {
            cfg,
            world,
            y_grid,
            image_size,
            backbone,
            layers,
            pe_mlp,
            refine,
            temporal_attn,
            temporal_norm,
            conf_head,
            coeff_head,
            init_content,
            init_x,
            init_z,
            init_range,
            pe_freq,
            vandermonde,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.cfg.backbone.channels.len()
    }

    pub fn init_params(&self) -> (ParamId, ParamId, ParamId, ParamId) {
        (self.init_content, self.init_x, self.init_z, self.init_range)
    }

    pub fn refine_head(&self) -> Linear {
        self.refine
    }

    pub fn temporal_attention(&self) -> MultiHeadAttention {
        self.temporal_attn
    }

    /// Backbone: pyramid levels `[H_l, W_l, D]` and segmentation logits `[1, H_0, W_0]`.
    pub fn backbone_forward(&self, g: &mut Graph, image: Var) -> (Vec<Var>, Var) {
        let mut x = image;
        let mut levels = Vec::new();
        let mut first = None;
        for ((a, b), p) in self.backbone.stems.iter().zip(&self.backbone.proj) {
            let h = a.forward(g, x);
            let h = g.relu(h);
            let h = b.forward(g, h);
            x = g.relu(h);
            if first.is_none() {
                first = Some(x);
            }
            let f = p.forward(g, x);
            levels.push(g.chw_to_hwc(f));
        }
        let s = self.backbone.seg.0.forward(g, first.expect("at least one stage"));
        let s = g.relu(s);
        let seg = self.backbone.seg.1.forward(g, s);
        (levels, seg)
    }

    fn to_meters(&self, g: &mut Graph, logits: Var, axis: (f64, f64)) -> Var {
        let s = g.sigmoid(logits);
        let s = g.scale(s, axis.1 - axis.0);
        g.add_scalar(s, axis.0)
    }

    fn meters_to_logits(&self, vals: &[f64], axis: (f64, f64)) -> Vec<f64> {
        vals.iter().map(|v| logit((v - axis.0) / (axis.1 - axis.0))).collect()
    }

    /// `(start, end)` from range logits `[Q, 2]`: `s = σ(a)`, `e = s + (1 - s)·σ(b)`.
    fn range_fractions(&self, g: &mut Graph, lr: Var) -> Var {
        let a = g.narrow(lr, 0, 1);
        let b = g.narrow(lr, 1, 1);
        let s = g.sigmoid(a);
        let t = g.sigmoid(b);
        let neg = g.scale(s, -1.0);
        let one_minus = g.add_scalar(neg, 1.0);
        let gap = g.mul(one_minus, t);
        let e = g.add(s, gap);
        g.concat(&[s, e])
    }

    /// Sinusoidal embedding of the anchor coordinates followed by the shared MLP.
    pub fn positional_embed(&self, g: &mut Graph, xm: Var, zm: Var) -> Var {
        let q = g.shape(xm)[0];
        let ys: Vec<f64> = (0..q).flat_map(|_| self.y_grid.iter().copied()).collect();
        let yv = g.constant(Tensor::new(vec![q, self.cfg.anchors], ys));
        let px = g.sin_embed(xm, self.pe_freq.clone());
        let py = g.sin_embed(yv, self.pe_freq.clone());
        let pz = g.sin_embed(zm, self.pe_freq.clone());
        let pe = g.concat(&[px, py, pz]);
        self.pe_mlp.forward(g, pe)
    }

    /// Active-point mask `[Q * N]` for a range value `[Q, 2]`.
    pub fn active_mask(&self, range: &Tensor) -> Vec<bool> {
        let n = self.cfg.anchors;
        let q = range.rows();
        let mut out = Vec::with_capacity(q * n);
        for qi in 0..q {
            let (s, e) = (range.data[2 * qi], range.data[2 * qi + 1]);
            let mut m = if self.cfg.range_restriction {
                clip_points_to_range(&self.y_grid, (s, e), self.world.y.0, self.world.y_span())
            } else {
                vec![true; n]
            };
            if !m.iter().any(|v| *v) {
                let center = self.world.y_at_fraction((s + e) / 2.0);
                let best = (0..n)
                    .min_by(|a, b| {
                        (self.y_grid[*a] - center)
                            .abs()
                            .total_cmp(&(self.y_grid[*b] - center).abs())
                    })
                    .expect("anchors > 0");
                m[best] = true;
            }
            out.extend(m);
        }
        out
    }

    /// Per-level reference locations `[Q, L, N, 2]` (level pixels) and in-image flags `[Q * N]`.
    fn references(
        &self,
        g: &mut Graph,
        xm: Var,
        zm: Var,
        rig: &CameraRig,
        levels: &[(usize, usize)],
    ) -> (Var, Vec<bool>) {
        let q = g.shape(xm)[0];
        let n = self.cfg.anchors;
        let ys: Vec<f64> = (0..q).flat_map(|_| self.y_grid.iter().copied()).collect();
        let yv = g.constant(Tensor::new(vec![q * n, 1], ys));
        let x1 = g.reshape(xm, &[q * n, 1]);
        let z1 = g.reshape(zm, &[q * n, 1]);
        let pts = g.concat(&[x1, yv, z1]);
        let uv = g.project(pts, rig);
        let (h, w) = rig.image_size;
        let in_image: Vec<bool> = g
            .value(uv)
            .data
            .chunks(2)
            .map(|p| p[0] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] >= 0.0 && p[1] <= (h - 1) as f64)
            .collect();
        let mut per_level = Vec::with_capacity(levels.len());
        for &(lh, lw) in levels {
            let sx = if w > 1 {
                (lw as f64 - 1.0) / (w as f64 - 1.0)
            } else {
                0.0
            };
            let sy = if h > 1 {
                (lh as f64 - 1.0) / (h as f64 - 1.0)
            } else {
                0.0
            };
            let r = g.scale_cols(uv, vec![sx, sy]);
            per_level.push(g.reshape(r, &[q, n * 2]));
        }
        let refs = if per_level.len() == 1 {
            per_level[0]
        } else {
            g.concat(&per_level)
        };
        let refs = g.reshape(refs, &[q, levels.len(), n, 2]);
        (refs, in_image)
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_layer(
        &self,
        g: &mut Graph,
        layer: &DecoderLayer,
        z: Var,
        lx: Var,
        lz: Var,
        lr: Var,
        pyramid: &[Var],
        level_shapes: &[(usize, usize)],
        rig: &CameraRig,
    ) -> (Var, Var, Var, Var, LayerOutput) {
        let (n, m, k, d) = (self.cfg.anchors, self.cfg.heads, self.cfg.samples, self.cfg.dim);
        let levels = level_shapes.len();
        let q = g.shape(z)[0];
        let xm = self.to_meters(g, lx, self.world.x);
        let zm = self.to_meters(g, lz, self.world.z);
        let range = self.range_fractions(g, lr);
        let active = self.active_mask(g.value(range));

        // Self-attention among queries (query/key carry the positional embedding).
        let mut z = z;
        if self.cfg.self_attention {
            let p = self.positional_embed(g, xm, zm);
            let qk = g.add(z, p);
            let sa = layer.self_attn.forward(g, qk, qk, z);
            let r = g.add(z, sa);
            z = layer.sa_norm.forward(g, r);
        }

        // Context sampling: validity-masked mean of features at the projected anchors.
        let (refs, in_image) = self.references(g, xm, zm, rig, level_shapes);
        let valid: Vec<bool> = in_image.iter().zip(&active).map(|(a, b)| *a && *b).collect();
        let mut wc = vec![0.0; q * levels * n];
        for qi in 0..q {
            let cnt = (0..n).filter(|ni| valid[qi * n + ni]).count() * levels;
            let wv = 1.0 / (cnt as f64 + VALID_EPS);
            for li in 0..levels {
                for ni in 0..n {
                    if valid[qi * n + ni] {
                        wc[(qi * levels + li) * n + ni] = wv;
                    }
                }
            }
        }
        let wc = g.constant(Tensor::new(vec![q, 1, levels, n, 1], wc));
        let context = g.deform_sample(pyramid, refs, None, wc, 1, 1);
        let ctx_in = if self.cfg.context_sampling {
            context
        } else {
            g.constant(Tensor::zeros(&[q, d]))
        };
        let off_in = g.concat(&[ctx_in, z]);
        let offsets = layer.offset_mlp.forward(g, off_in);

        // Curve cross-attention over active anchor points.
        let a = layer.attn_weights.forward(g, z);
        let a = g.reshape(a, &[q * m, levels * n * k]);
        let mut mask = vec![false; q * m * levels * n * k];
        for qi in 0..q {
            for mi in 0..m {
                for li in 0..levels {
                    for ni in 0..n {
                        if active[qi * n + ni] {
                            let base = (((qi * m + mi) * levels + li) * n + ni) * k;
                            mask[base..base + k].iter_mut().for_each(|v| *v = true);
                        }
                    }
                }
            }
        }
        let attn = g.softmax(a, Some(mask));
        let values: Vec<Var> = pyramid.iter().map(|v| layer.value.forward(g, *v)).collect();
        let sampled = g.deform_sample(&values, refs, Some(offsets), attn, m, k);
        let ca = layer.output.forward(g, sampled);
        let r = g.add(z, ca);
        let z = layer.ca_norm.forward(g, r);

        let f = layer.ffn.forward(g, z);
        let r = g.add(z, f);
        let z = layer.ffn_norm.forward(g, r);

        // Shared refinement head: deltas in logit space.
        let delta = self.refine.forward(g, z);
        let dx = g.narrow(delta, 0, n);
        let dz = g.narrow(delta, n, n);
        let dr = g.narrow(delta, 2 * n, 2);
        let lx = g.add(lx, dx);
        let lz = g.add(lz, dz);
        let lr = g.add(lr, dr);
        let out = LayerOutput {
            anchor_x: self.to_meters(g, lx, self.world.x),
            anchor_z: self.to_meters(g, lz, self.world.z),
            range: self.range_fractions(g, lr),
            attn,
            context,
        };
        (z, lx, lz, lr, out)
    }

    /// Full forward pass for one frame.
    pub fn forward(&self, g: &mut Graph, image: &Tensor, rig: &CameraRig, prior: &QueryPrior) -> Result<ForwardOutput> {
        let (h, w) = (image.shape[1], image.shape[2]);
        if (h, w) != self.image_size || rig.image_size != self.image_size {
            return Err(Error::Shape(format!(
                "model built for {:?}, got image {h}x{w} and rig {:?}",
                self.image_size, rig.image_size
            )));
        }
        let img = g.constant(image.clone());
        let (pyramid, seg_logits) = self.backbone_forward(g, img);
        let level_shapes: Vec<(usize, usize)> = pyramid.iter().map(|v| (g.shape(*v)[0], g.shape(*v)[1])).collect();

        let mut z = g.param(self.init_content);
        let mut lx = g.param(self.init_x);
        let mut lz = g.param(self.init_z);
        let mut lr = g.param(self.init_range);
        if let Some((xs, zs)) = &prior.anchor_override {
            let (q, n) = (self.cfg.queries, self.cfg.anchors);
            lx = g.constant(Tensor::new(vec![q, n], self.meters_to_logits(xs, self.world.x)));
            lz = g.constant(Tensor::new(vec![q, n], self.meters_to_logits(zs, self.world.z)));
        }
        if let Some(extra) = &prior.extra {
            let kq = extra.content.rows();
            let n = self.cfg.anchors;
            let ez = g.constant(extra.content.clone());
            let (ex, ezz, er) = match &extra.anchors {
                Some((xs, zs, rs)) => (
                    g.constant(Tensor::new(vec![kq, n], self.meters_to_logits(xs, self.world.x))),
                    g.constant(Tensor::new(vec![kq, n], self.meters_to_logits(zs, self.world.z))),
                    g.constant(Tensor::new(vec![kq, 2], rs.clone())),
                ),
                None => {
                    let ix = g.param(self.init_x);
                    let iz = g.param(self.init_z);
                    let ir = g.param(self.init_range);
                    (
                        g.select_rows(ix, extra.source_index.clone()),
                        g.select_rows(iz, extra.source_index.clone()),
                        g.select_rows(ir, extra.source_index.clone()),
                    )
                }
            };
            z = g.concat_rows(&[z, ez]);
            lx = g.concat_rows(&[lx, ex]);
            lz = g.concat_rows(&[lz, ezz]);
            lr = g.concat_rows(&[lr, er]);
            let t = self.temporal_attn.forward(g, z, z, z);
            let r = g.add(z, t);
            z = self.temporal_norm.forward(g, r);
        }
        if let Some(mem) = &prior.memory {
            let mv = g.constant(mem.clone());
            let t = self.temporal_attn.forward(g, z, mv, mv);
            let r = g.add(z, t);
            z = self.temporal_norm.forward(g, r);
        }
        let num_queries = g.shape(z)[0];

        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (nz, nx, nzz, nr, out) = self.decoder_layer(g, layer, z, lx, lz, lr, &pyramid, &level_shapes, rig);
            z = nz;
            if self.cfg.detach_anchors {
                lx = g.detach(nx);
                lz = g.detach(nzz);
                lr = g.detach(nr);
            } else {
                (lx, lz, lr) = (nx, nzz, nr);
            }
            outs.push(out);
        }
        let last = *outs.last().expect("at least one layer");
        let conf_logit = self.conf_head.forward(g, z);
        let r1 = self.cfg.poly_order + 1;
        let n = self.cfg.anchors;
        let (coeff_x, coeff_z) = match self.cfg.coeff_mode {
            CoeffMode::Direct => {
                let c = self.coeff_head.forward(g, z);
                (g.narrow(c, 0, r1), g.narrow(c, r1, r1))
            }
            CoeffMode::AnchorFit => {
                let active = self.active_mask(g.value(last.range));
                let fit = self.fit_operators(&active, num_queries);
                (
                    g.row_matmul_const(last.anchor_x, fit.clone(), r1),
                    g.row_matmul_const(last.anchor_z, fit, r1),
                )
            }
        };
        let v = g.constant(Tensor::new(vec![r1, n], self.vandermonde.clone()));
        let curve_x = g.matmul(coeff_x, v);
        let curve_z = g.matmul(coeff_z, v);
        Ok(ForwardOutput {
            num_queries,
            conf_logit,
            coeff_x,
            coeff_z,
            curve_x,
            curve_z,
            range: last.range,
            layers: outs,
            content: z,
            seg_logits,
            pyramid,
        })
    }

    /// Per-query ridge least-squares operators `[Q, N, R + 1]` mapping anchor values to
    /// scaled-basis coefficients using only active points.
    fn fit_operators(&self, active: &[bool], q: usize) -> Vec<f64> {
        let n = self.cfg.anchors;
        let r1 = self.cfg.poly_order + 1;
        let mut out = vec![0.0; q * n * r1];
        for qi in 0..q {
            let idx: Vec<usize> = (0..n).filter(|ni| active[qi * n + ni]).collect();
            let a = DMatrix::from_fn(idx.len(), r1, |i, r| self.vandermonde[r * n + idx[i]]);
            let ata = a.transpose() * &a + DMatrix::identity(r1, r1) * FIT_RIDGE;
            let inv = ata.try_inverse().expect("ridge keeps the normal matrix invertible");
            let op = inv * a.transpose(); // [R+1, |idx|]
            for (j, &ni) in idx.iter().enumerate() {
                for r in 0..r1 {
                    out[(qi * n + ni) * r1 + r] = op[(r, j)];
                }
            }
        }
        out
    }

    /// Plain-value summaries of every query for matching.
    pub fn summaries(&self, g: &Graph, out: &ForwardOutput) -> Vec<PredSummary> {
        let n = self.cfg.anchors;
        let conf = &g.value(out.conf_logit).data;
        let cx = &g.value(out.curve_x).data;
        let cz = &g.value(out.curve_z).data;
        let r = &g.value(out.range).data;
        (0..out.num_queries)
            .map(|qi| PredSummary {
                prob: sigmoid(conf[qi]),
                xs: cx[qi * n..(qi + 1) * n].to_vec(),
                zs: cz[qi * n..(qi + 1) * n].to_vec(),
                range: (r[2 * qi], r[2 * qi + 1]),
            })
            .collect()
    }

    /// Decoded lanes with raw-y polynomial coefficients and per-layer anchors.
    pub fn predictions(&self, g: &Graph, out: &ForwardOutput) -> Vec<LanePrediction> {
        let n = self.cfg.anchors;
        let r1 = self.cfg.poly_order + 1;
        let (c, s) = basis_center_scale(&self.world);
        let conf = &g.value(out.conf_logit).data;
        let kx = &g.value(out.coeff_x).data;
        let kz = &g.value(out.coeff_z).data;
        let r = &g.value(out.range).data;
        (0..out.num_queries)
            .map(|qi| {
                let (rs, re) = (r[2 * qi], r[2 * qi + 1]);
                let y_start = self.world.y_at_fraction(rs);
                let y_end = self.world.y_at_fraction(re).max(y_start + 1e-9);
                let lane = PolyLane {
                    confidence: sigmoid(conf[qi]),
                    y_start,
                    y_end,
                    coeffs_x: expand_scaled_basis(&kx[qi * r1..(qi + 1) * r1], c, s),
                    coeffs_z: expand_scaled_basis(&kz[qi * r1..(qi + 1) * r1], c, s),
                    category: None,
                };
                let layer_anchors = out
                    .layers
                    .iter()
                    .map(|l| {
                        let ax = &g.value(l.anchor_x).data[qi * n..(qi + 1) * n];
                        let az = &g.value(l.anchor_z).data[qi * n..(qi + 1) * n];
                        let lr = &g.value(l.range).data[2 * qi..2 * qi + 2];
                        AnchorPointSet {
                            points: (0..n).map(|i| [ax[i], self.y_grid[i], az[i]]).collect(),
                            range: (lr[0], lr[1]),
                        }
                    })
                    .collect();
                LanePrediction { lane, layer_anchors }
            })
            .collect()
    }
}

/// Center and half-width of the world y-span, used for the normalized polynomial basis.
pub fn basis_center_scale(world: &WorldBox) -> (f64, f64) {
    ((world.y.0 + world.y.1) / 2.0, world.y_span() / 2.0)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-pools a binary mask to the `stride`-cell grid of shape `(h, w)` (any set pixel sets the cell).
pub fn pool_mask(mask: &Raster, stride: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.data[r * mask.width + c] != 0 {
                let (pr, pc) = ((r / stride).min(h - 1), (c / stride).min(w - 1));
                out[pr * w + pc] = 1.0;
            }
        }
    }
    out
}

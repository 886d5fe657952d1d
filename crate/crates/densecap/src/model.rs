//! The captioning model: convolutional backbone, region proposal heads,
//! ROI features, the caption/location LSTMs, and context fusion. One
//! [`Model`] owns every parameter; forward passes run through a [`Fwd`]
//! context that leases parameters into a fresh tape.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::geometry::{AnchorSpec, BBox, BoxOffset};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Feature-map stride of the backbone relative to the input image.
pub const DOWNSAMPLE: usize = 16;

/// How the bounding-box offset is predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// offset and detection score straight from the region feature
    Baseline,
    /// offset from the caption LSTM hidden state at the stop step
    SLstm,
    /// offset from [hidden at stop step ; region feature]
    ScLstm,
    /// offset from a separate location LSTM fed the same inputs
    TLstm,
}

/// Where visual context enters the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fusion {
    None,
    /// fused into the region representation before step 0
    Early,
    /// a context LSTM runs in parallel and fuses before the word logits
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionOp {
    Concat,
    Sum,
    Mul,
}

macro_rules! enum_strings {
    ($ty:ident { $($v:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$v => $s),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$v),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), s
                    ))),
                }
            }
        }
    };
}

enum_strings!(Variant {
    Baseline => "baseline",
    SLstm => "s-lstm",
    ScLstm => "sc-lstm",
    TLstm => "t-lstm",
});
enum_strings!(Fusion { None => "none", Early => "early", Late => "late" });
enum_strings!(FusionOp { Concat => "concat", Sum => "sum", Mul => "mul" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub fusion: Fusion,
    /// only meaningful when fusion != None
    pub fusion_op: FusionOp,
    /// LSTM hidden size; also the region-feature and embedding width
    pub hidden: usize,
    pub vocab_size: usize,
    /// maximum decode steps (longest caption + 1 for the stop token)
    pub max_steps: usize,
    pub backbone_channels: [usize; 4],
    pub rpn_channels: usize,
    pub roi_pool: usize,
    pub anchors: AnchorSpec,
}

impl ModelConfig {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            variant: Variant::TLstm,
            fusion: Fusion::None,
            fusion_op: FusionOp::Sum,
            hidden: 64,
            vocab_size,
            max_steps: 11,
            backbone_channels: [8, 16, 32, 64],
            rpn_channels: 64,
            roi_pool: 7,
            anchors: AnchorSpec {
                scales: vec![12.0, 20.0, 32.0, 48.0],
                aspect_ratios: vec![0.5, 1.0, 2.0],
            },
        }
    }

    /// Full-size configuration matching the reference setup (LSTM width
    /// 512, 10k vocabulary, 12 anchors per cell).
    pub fn paper_scale(vocab_size: usize) -> Self {
        ModelConfig {
            variant: Variant::TLstm,
            fusion: Fusion::None,
            fusion_op: FusionOp::Sum,
            hidden: 512,
            vocab_size,
            max_steps: 11,
            backbone_channels: [64, 128, 256, 512],
            rpn_channels: 256,
            roi_pool: 7,
            anchors: AnchorSpec {
                scales: vec![64.0, 128.0, 256.0, 512.0],
                aspect_ratios: vec![0.5, 1.0, 2.0],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.rpn_channels == 0 || self.roi_pool == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocab must include the special tokens".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if self.anchors.anchors_per_cell() == 0 {
            return Err(Error::Config("anchor spec is empty".into()));
        }
        if self.backbone_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ParamIds {
    pub backbone: Vec<(ParamId, ParamId)>,
    pub rpn_conv: (ParamId, ParamId),
    pub rpn_cls: (ParamId, ParamId),
    pub rpn_reg: (ParamId, ParamId),
    pub roi_fc: (ParamId, ParamId),
    pub embed: ParamId,
    pub cap: LstmIds,
    pub word: (ParamId, ParamId),
    pub det: (ParamId, ParamId),
    pub offset: (ParamId, ParamId),
    pub loc: Option<LstmIds>,
    pub ctx: Option<LstmIds>,
    /// context projection (early sum/mul and all late fusions)
    pub fuse_proj: Option<(ParamId, ParamId)>,
    /// FC after [region ; context] for early concat fusion
    pub fuse_cat: Option<(ParamId, ParamId)>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub ids: ParamIds,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.hidden;
        let v = cfg.vocab_size;

        let mut conv = |store: &mut ParamStore,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        c_out: usize,
                        c_in: usize,
                        k: usize| {
            let w = Tensor::uniform_fanin(&[c_out, c_in, k, k], c_in * k * k, rng);
            let wi = store.add(&format!("{name}.w"), w);
            let bi = store.add(&format!("{name}.b"), Tensor::zeros(&[c_out]));
            (wi, bi)
        };
        let mut lin = |store: &mut ParamStore,
                       rng: &mut ChaCha8Rng,
                       name: &str,
                       d_in: usize,
                       d_out: usize| {
            let w = Tensor::uniform_fanin(&[d_in, d_out], d_in, rng);
            let wi = store.add(&format!("{name}.w"), w);
            let bi = store.add(&format!("{name}.b"), Tensor::zeros(&[d_out]));
            (wi, bi)
        };
        let mut lstm = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            let w_ih =
                store.add(&format!("{name}.w_ih"), Tensor::uniform_fanin(&[d, 4 * d], d, rng));
            let w_hh =
                store.add(&format!("{name}.w_hh"), Tensor::uniform_fanin(&[d, 4 * d], d, rng));
            // forget-gate bias starts at 1 so early training keeps memory
            let mut b = Tensor::zeros(&[4 * d]);
            b.data[d..2 * d].fill(1.0);
            let bi = store.add(&format!("{name}.b"), b);
            LstmIds { w_ih, w_hh, b: bi }
        };

        let mut backbone = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in cfg.backbone_channels.iter().enumerate() {
            backbone.push(conv(&mut store, &mut rng, &format!("backbone.conv{i}"), c_out, c_in, 3));
            c_in = c_out;
        }
        let fm_c = *cfg.backbone_channels.last().unwrap();
        let a = cfg.anchors.anchors_per_cell();
        let rpn_conv = conv(&mut store, &mut rng, "rpn.conv", cfg.rpn_channels, fm_c, 3);
        let rpn_cls = conv(&mut store, &mut rng, "rpn.cls", 2 * a, cfg.rpn_channels, 1);
        let rpn_reg = conv(&mut store, &mut rng, "rpn.reg", 4 * a, cfg.rpn_channels, 1);
        let roi_fc =
            lin(&mut store, &mut rng, "roi.fc", fm_c * cfg.roi_pool * cfg.roi_pool, d);
        let embed = store.add("embed.w", Tensor::uniform_fanin(&[v, d], d, &mut rng));
        let cap = lstm(&mut store, &mut rng, "cap");

        let word_in = if cfg.fusion == Fusion::Late && cfg.fusion_op == FusionOp::Concat {
            2 * d
        } else {
            d
        };
        let mut word_w = Tensor::uniform_fanin(&[word_in, v], word_in, &mut rng);
        if word_in == 2 * d {
            // the context half starts silent so a freshly attached context
            // path reproduces the context-free model exactly
            word_w.data[d * v..].fill(0.0);
        }
        let word = (store.add("word.w", word_w), store.add("word.b", Tensor::zeros(&[v])));
        let det = lin(&mut store, &mut rng, "det", d, 2);

        let offset_in = match cfg.variant {
            Variant::Baseline | Variant::SLstm | Variant::TLstm => d,
            Variant::ScLstm => 2 * d,
        };
        let offset = lin(&mut store, &mut rng, "offset", offset_in, 4);

        let loc = match cfg.variant {
            Variant::TLstm => Some(lstm(&mut store, &mut rng, "loc")),
            _ => None,
        };
        let ctx = match cfg.fusion {
            Fusion::Late => Some(lstm(&mut store, &mut rng, "ctx")),
            _ => None,
        };
        let fuse_proj = match (cfg.fusion, cfg.fusion_op) {
            (Fusion::None, _) | (Fusion::Early, FusionOp::Concat) => None,
            (_, op) => {
                // identity warm start: sum adds zero, mul scales by one,
                // late concat is silenced by the zeroed word.w half
                let w = match op {
                    FusionOp::Concat => Tensor::uniform_fanin(&[d, d], d, &mut rng),
                    FusionOp::Sum | FusionOp::Mul => Tensor::zeros(&[d, d]),
                };
                let b = match op {
                    FusionOp::Mul => Tensor::filled(&[d], 1.0),
                    _ => Tensor::zeros(&[d]),
                };
                Some((store.add("fuse.proj.w", w), store.add("fuse.proj.b", b)))
            }
        };
        let fuse_cat = match (cfg.fusion, cfg.fusion_op) {
            (Fusion::Early, FusionOp::Concat) => {
                // [I ; 0] keeps the fused representation equal to the raw one
                let mut w = Tensor::zeros(&[2 * d, d]);
                for i in 0..d {
                    w.data[i * d + i] = 1.0;
                }
                Some((store.add("fuse.cat.w", w), store.add("fuse.cat.b", Tensor::zeros(&[d]))))
            }
            _ => None,
        };

        let ids = ParamIds {
            backbone,
            rpn_conv,
            rpn_cls,
            rpn_reg,
            roi_fc,
            embed,
            cap,
            word,
            det,
            offset,
            loc,
            ctx,
            fuse_proj,
            fuse_cat,
        };
        Ok(Model { cfg, store, ids })
    }

    /// Copy every parameter of `base` into this model by name. Used to
    /// warm-start a context-fusion model from a context-free checkpoint;
    /// the extra fusion parameters keep their identity initialization, so
    /// right after this call the two models produce equal outputs.
    pub fn load_base_params(&mut self, base: &ParamStore) -> Result<()> {
        let d = self.cfg.hidden;
        for (_, entry) in base.iter() {
            let Some(id) = self.store.id_of(&entry.name) else {
                return Err(Error::Config(format!(
                    "base parameter '{}' has no slot in the fusion model",
                    entry.name
                )));
            };
            let mine = self.store.entry_mut(id);
            if mine.value.shape == entry.value.shape {
                mine.value.data.copy_from_slice(&entry.value.data);
            } else if entry.name == "word.w"
                && mine.value.shape == vec![2 * d, self.cfg.vocab_size]
                && entry.value.shape == vec![d, self.cfg.vocab_size]
            {
                mine.value.data[..entry.value.data.len()].copy_from_slice(&entry.value.data);
            } else {
                return Err(Error::Config(format!(
                    "base parameter '{}' shape {:?} does not fit {:?}",
                    entry.name, entry.value.shape, mine.value.shape
                )));
            }
        }
        Ok(())
    }

    /// Start a forward pass. `trainable` leases parameters as
    /// gradient-bearing leaves; inference passes skip the bookkeeping.
    pub fn fwd(&self, trainable: bool) -> Fwd<'_> {
        Fwd {
            g: Graph::new(),
            model: self,
            leased: vec![None; self.store.len()],
            trainable,
        }
    }
}

/// A feature map inside a graph, with its spatial geometry.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// RPN outputs rearranged to anchor order: row (y, x, a) cell-major.
#[derive(Debug, Clone, Copy)]
pub struct RpnOutput {
    /// [#anchors, 2] background/foreground logits
    pub cls: Var,
    /// [#anchors, 4] box offsets
    pub reg: Var,
}

/// Teacher-forced head outputs for one region.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// [L+1, V]; row t predicts word_targets[t]
    pub word_logits: Var,
    /// the caption words followed by the stop token
    pub word_targets: Vec<usize>,
    /// [1, 2] background/foreground logits
    pub det_logits: Var,
    /// [1, 4] offset read at the stop step
    pub offset: Var,
}

/// Greedy decode of one region.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// emitted words, stop token excluded
    pub words: Vec<usize>,
    /// sum of log-probabilities of the emitted tokens (stop included)
    pub word_log_prob: f64,
    /// foreground probability from the detection head
    pub det_prob: f64,
    /// offset at the step where decoding stopped
    pub offset: BoxOffset,
    /// offset reading after every step, stop step included
    pub step_offsets: Vec<BoxOffset>,
    pub ended_with_eos: bool,
}

pub struct Fwd<'m> {
    pub g: Graph,
    model: &'m Model,
    leased: Vec<Option<Var>>,
    trainable: bool,
}

impl<'m> Fwd<'m> {
    /// Release the borrow of the model, keeping the finished tape (for
    /// backward/flush while the parameter store is mutated).
    pub fn into_graph(self) -> Graph {
        self.g
    }

    /// Lease a parameter into the graph (cached per graph).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leased[id.index()] {
            return v;
        }
        let v = if self.trainable {
            self.g.param(&self.model.store, id)
        } else {
            self.g.leaf(self.model.store.entry(id).value.clone(), false)
        };
        self.leased[id.index()] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, wb: (ParamId, ParamId)) -> Result<Var> {
        let w = self.p(wb.0);
        let b = self.p(wb.1);
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    fn conv_bias_relu(&mut self, x: Var, wb: (ParamId, ParamId), pad: usize) -> Result<Var> {
        let w = self.p(wb.0);
        let b = self.p(wb.1);
        let y = self.g.conv2d(x, w, 1, pad)?;
        let y = self.g.add(y, b)?;
        self.g.relu(y)
    }

    /// Run the backbone on a [3, H, W] image; H and W must be multiples of
    /// the stride.
    pub fn backbone(&mut self, image: &Tensor) -> Result<FeatureMap> {
        if image.shape.len() != 3 || image.shape[0] != 3 {
            return Err(Error::Shape(format!("backbone wants [3,H,W], got {:?}", image.shape)));
        }
        let (h, w) = (image.shape[1], image.shape[2]);
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} not a multiple of the stride {DOWNSAMPLE}"
            )));
        }
        let mut x = self.g.constant(image.clone());
        for wb in self.model.ids.backbone.clone() {
            x = self.conv_bias_relu(x, wb, 1)?;
            x = self.g.max_pool2(x)?;
        }
        Ok(FeatureMap {
            var: x,
            channels: *self.model.cfg.backbone_channels.last().unwrap(),
            height: h / DOWNSAMPLE,
            width: w / DOWNSAMPLE,
        })
    }

    /// RPN heads over a feature map, rearranged so row (y*W + x)*A + a of
    /// each output matches the anchor order of `generate_anchors`.
    pub fn rpn(&mut self, fm: &FeatureMap) -> Result<RpnOutput> {
        let shared = self.conv_bias_relu(fm.var, self.model.ids.rpn_conv, 1)?;
        let a = self.model.cfg.anchors.anchors_per_cell();
        let (h, w) = (fm.height, fm.width);

        let head = |fwd: &mut Self, wb: (ParamId, ParamId), k: usize| -> Result<Var> {
            let wv = fwd.p(wb.0);
            let bv = fwd.p(wb.1);
            let map = fwd.g.conv2d(shared, wv, 1, 0)?;
            let map = fwd.g.add(map, bv)?; // [k*A, h, w]
            let mut idx = Vec::with_capacity(h * w * a * k);
            for y in 0..h {
                for x in 0..w {
                    for ai in 0..a {
                        for ki in 0..k {
                            idx.push(((ai * k + ki) * h + y) * w + x);
                        }
                    }
                }
            }
            fwd.g.gather(map, idx, &[h * w * a, k])
        };
        let cls = head(self, self.model.ids.rpn_cls, 2)?;
        let reg = head(self, self.model.ids.rpn_reg, 4)?;
        Ok(RpnOutput { cls, reg })
    }

    /// ROI-pool a box (image pixel coordinates) and project to the shared
    /// region-feature width. Also used for the whole-image context feature.
    pub fn region_feature(&mut self, fm: &FeatureMap, bbox: &BBox) -> Result<Var> {
        let s = DOWNSAMPLE as f64;
        let p = self.model.cfg.roi_pool;
        let pooled =
            self.g.roi_pool(fm.var, (bbox.x1 / s, bbox.y1 / s, bbox.x2 / s, bbox.y2 / s), p)?;
        let flat = self.g.reshape(pooled, &[1, fm.channels * p * p])?;
        let fc = self.linear(flat, self.model.ids.roi_fc)?;
        self.g.relu(fc)
    }

    fn lstm_step(&mut self, ids: LstmIds, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let d = self.model.cfg.hidden;
        let w_ih = self.p(ids.w_ih);
        let w_hh = self.p(ids.w_hh);
        let b = self.p(ids.b);
        let xi = self.g.matmul(x, w_ih)?;
        let hh = self.g.matmul(h, w_hh)?;
        let gates = self.g.add(xi, hh)?;
        let gates = self.g.add(gates, b)?;
        let chunk = |fwd: &mut Self, k: usize| {
            fwd.g.gather(gates, (k * d..(k + 1) * d).collect(), &[1, d])
        };
        let i_g = chunk(self, 0)?;
        let f_g = chunk(self, 1)?;
        let g_g = chunk(self, 2)?;
        let o_g = chunk(self, 3)?;
        let i_g = self.g.sigmoid(i_g)?;
        let f_g = self.g.sigmoid(f_g)?;
        let g_g = self.g.tanh(g_g)?;
        let o_g = self.g.sigmoid(o_g)?;
        let fc = self.g.mul(f_g, c)?;
        let ig = self.g.mul(i_g, g_g)?;
        let c_new = self.g.add(fc, ig)?;
        let ct = self.g.tanh(c_new)?;
        let h_new = self.g.mul(o_g, ct)?;
        Ok((h_new, c_new))
    }

    fn embed_token(&mut self, tok: usize) -> Result<Var> {
        let e = self.p(self.model.ids.embed);
        self.g.select_rows(e, &[tok])
    }

    /// Early fusion of the region representation, identity when fusion is
    /// None or Late.
    fn fused_region(&mut self, region: Var, context: Option<Var>) -> Result<Var> {
        let (fusion, op) = (self.model.cfg.fusion, self.model.cfg.fusion_op);
        match (fusion, context) {
            (Fusion::None, None) => Ok(region),
            (Fusion::None, Some(_)) => {
                Err(Error::Usage("context feature passed to a context-free model".into()))
            }
            (_, None) => Err(Error::Usage("fusion model needs a context feature".into())),
            (Fusion::Late, Some(_)) => Ok(region),
            (Fusion::Early, Some(ctx)) => match op {
                FusionOp::Concat => {
                    let cat = self.g.concat_cols(region, ctx)?;
                    self.linear(cat, self.model.ids.fuse_cat.unwrap())
                }
                FusionOp::Sum => {
                    let p = self.linear(ctx, self.model.ids.fuse_proj.unwrap())?;
                    self.g.add(region, p)
                }
                FusionOp::Mul => {
                    let p = self.linear(ctx, self.model.ids.fuse_proj.unwrap())?;
                    self.g.mul(region, p)
                }
            },
        }
    }

    /// Late fusion of the caption hidden state with the context hidden
    /// state, just before the word logits.
    fn fused_hidden(&mut self, h: Var, ctx_h: Var) -> Result<Var> {
        let op = self.model.cfg.fusion_op;
        let p = self.linear(ctx_h, self.model.ids.fuse_proj.unwrap())?;
        match op {
            FusionOp::Concat => self.g.concat_cols(h, p),
            FusionOp::Sum => self.g.add(h, p),
            FusionOp::Mul => self.g.mul(h, p),
        }
    }

    fn offset_from(&mut self, region: Var, h: Var, loc_h: Var) -> Result<Var> {
        match self.model.cfg.variant {
            Variant::Baseline => {
                let r = region;
                self.linear(r, self.model.ids.offset)
            }
            Variant::SLstm => self.linear(h, self.model.ids.offset),
            Variant::ScLstm => {
                let cat = self.g.concat_cols(h, region)?;
                self.linear(cat, self.model.ids.offset)
            }
            Variant::TLstm => self.linear(loc_h, self.model.ids.offset),
        }
    }

    /// Teacher-forced pass over one region. `words` is the caption without
    /// start/stop tokens; the offset is read at the stop step.
    pub fn head_forward(
        &mut self,
        region: Var,
        context: Option<Var>,
        words: &[usize],
    ) -> Result<HeadOutput> {
        let (max_steps, vocab, d) =
            (self.model.cfg.max_steps, self.model.cfg.vocab_size, self.model.cfg.hidden);
        if words.len() + 1 > max_steps {
            return Err(Error::Usage(format!(
                "caption of {} words exceeds max_steps {max_steps}",
                words.len(),
            )));
        }
        if words.iter().any(|&w| w >= vocab) {
            return Err(Error::Usage("caption token outside the vocabulary".into()));
        }
        let repr = self.fused_region(region, context)?;
        let zero = self.g.constant(Tensor::zeros(&[1, d]));
        let ids = self.model.ids.clone();

        // step -1: prime each LSTM with its visual input
        let (mut h, mut c) = self.lstm_step(ids.cap, repr, zero, zero)?;
        let mut loc_state = match ids.loc {
            Some(l) => Some(self.lstm_step(l, repr, zero, zero)?),
            None => None,
        };
        let mut ctx_state = match (ids.ctx, context) {
            (Some(l), Some(cv)) => Some(self.lstm_step(l, cv, zero, zero)?),
            _ => None,
        };

        let mut logit_rows = Vec::with_capacity(words.len() + 1);
        for t in 0..=words.len() {
            let tok = if t == 0 { SOS } else { words[t - 1] };
            let x = self.embed_token(tok)?;
            let (nh, nc) = self.lstm_step(ids.cap, x, h, c)?;
            h = nh;
            c = nc;
            if let Some((lh, lc)) = loc_state {
                loc_state = Some(self.lstm_step(ids.loc.unwrap(), x, lh, lc)?);
            }
            if let Some((ch, cc)) = ctx_state {
                ctx_state = Some(self.lstm_step(ids.ctx.unwrap(), x, ch, cc)?);
            }
            let out_h = match ctx_state {
                Some((ch, _)) => self.fused_hidden(h, ch)?,
                None => h,
            };
            logit_rows.push(self.linear(out_h, ids.word)?);
        }
        let word_logits = self.g.concat_rows(&logit_rows)?;
        let mut word_targets = words.to_vec();
        word_targets.push(EOS);

        let loc_h = loc_state.map(|(lh, _)| lh).unwrap_or(h);
        let offset = self.offset_from(region, h, loc_h)?;
        let det_logits = self.linear(region, ids.det)?;
        Ok(HeadOutput { word_logits, word_targets, det_logits, offset })
    }

    /// Greedy (beam-1) decode of one region.
    pub fn decode(&mut self, region: Var, context: Option<Var>) -> Result<DecodeResult> {
        let (max_steps, d) = (self.model.cfg.max_steps, self.model.cfg.hidden);
        let repr = self.fused_region(region, context)?;
        let zero = self.g.constant(Tensor::zeros(&[1, d]));
        let ids = self.model.ids.clone();

        let (mut h, mut c) = self.lstm_step(ids.cap, repr, zero, zero)?;
        let mut loc_state = match ids.loc {
            Some(l) => Some(self.lstm_step(l, repr, zero, zero)?),
            None => None,
        };
        let mut ctx_state = match (ids.ctx, context) {
            (Some(l), Some(cv)) => Some(self.lstm_step(l, cv, zero, zero)?),
            _ => None,
        };

        let det_logits = self.linear(region, ids.det)?;
        let dv = self.g.value(det_logits);
        let m = dv[0].max(dv[1]);
        let det_prob = (dv[1] - m).exp() / ((dv[0] - m).exp() + (dv[1] - m).exp());

        let mut words = Vec::new();
        let mut step_offsets = Vec::new();
        let mut word_log_prob = 0.0;
        let mut ended_with_eos = false;
        let mut prev = SOS;
        for _t in 0..max_steps {
            let x = self.embed_token(prev)?;
            let (nh, nc) = self.lstm_step(ids.cap, x, h, c)?;
            h = nh;
            c = nc;
            if let Some((lh, lc)) = loc_state {
                loc_state = Some(self.lstm_step(ids.loc.unwrap(), x, lh, lc)?);
            }
            if let Some((ch, cc)) = ctx_state {
                ctx_state = Some(self.lstm_step(ids.ctx.unwrap(), x, ch, cc)?);
            }
            let loc_h = loc_state.map(|(lh, _)| lh).unwrap_or(h);
            let off = self.offset_from(region, h, loc_h)?;
            step_offsets.push(BoxOffset::from_slice(self.g.value(off)));

            let out_h = match ctx_state {
                Some((ch, _)) => self.fused_hidden(h, ch)?,
                None => h,
            };
            let logits = self.linear(out_h, ids.word)?;
            let row = self.g.value(logits);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            let (mut best, mut best_v) = (0usize, f64::NEG_INFINITY);
            for (j, &x) in row.iter().enumerate() {
                // start/pad tokens are never valid outputs
                if j == SOS || j == PAD {
                    continue;
                }
                if x > best_v {
                    best_v = x;
                    best = j;
                }
            }
            word_log_prob += best_v - mx - z.ln();
            if best == EOS {
                ended_with_eos = true;
                break;
            }
            words.push(best);
            prev = best;
        }
        let offset = *step_offsets.last().expect("max_steps >= 1");
        Ok(DecodeResult {
            words,
            word_log_prob,
            det_prob,
            offset,
            step_offsets,
            ended_with_eos,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region_inputs(model: &Model, fwd: &mut Fwd<'_>) -> (Var, Option<Var>) {
        let d = model.cfg.hidden;
        let mut rt = Tensor::zeros(&[1, d]);
        let mut ct = Tensor::zeros(&[1, d]);
        for i in 0..d {
            rt.data[i] = ((i as f64 * 0.37).sin() * 0.5).abs();
            ct.data[i] = ((i as f64 * 0.11).cos() * 0.5).abs();
        }
        let region = fwd.g.leaf(rt, false);
        let context = if model.cfg.fusion == Fusion::None {
            None
        } else {
            Some(fwd.g.leaf(ct, false))
        };
        (region, context)
    }

    fn all_configs() -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for variant in [Variant::Baseline, Variant::SLstm, Variant::ScLstm, Variant::TLstm] {
            for (fusion, ops) in [
                (Fusion::None, &[FusionOp::Sum][..]),
                (Fusion::Early, &[FusionOp::Concat, FusionOp::Sum, FusionOp::Mul][..]),
                (Fusion::Late, &[FusionOp::Concat, FusionOp::Sum, FusionOp::Mul][..]),
            ] {
                for &fusion_op in ops {
                    let mut cfg = ModelConfig::desk(24);
                    cfg.hidden = 8;
                    cfg.variant = variant;
                    cfg.fusion = fusion;
                    cfg.fusion_op = fusion_op;
                    out.push(cfg);
                }
            }
        }
        out
    }

    #[test]
    fn every_variant_runs_and_shapes_hold() {
        for cfg in all_configs() {
            let v = cfg.vocab_size;
            let model = Model::new(cfg, 7).unwrap();
            let mut fwd = model.fwd(true);
            let (region, context) = region_inputs(&model, &mut fwd);
            let words = vec![5, 6, 7];
            let out = fwd.head_forward(region, context, &words).unwrap();
            assert_eq!(fwd.g.shape(out.word_logits), &[4, v]);
            assert_eq!(out.word_targets, vec![5, 6, 7, EOS]);
            assert_eq!(fwd.g.shape(out.det_logits), &[1, 2]);
            assert_eq!(fwd.g.shape(out.offset), &[1, 4]);

            let mut fwd = model.fwd(false);
            let (region, context) = region_inputs(&model, &mut fwd);
            let dec = fwd.decode(region, context).unwrap();
            assert!(dec.words.len() + 1 <= model.cfg.max_steps || !dec.ended_with_eos);
            assert!(dec.det_prob > 0.0 && dec.det_prob < 1.0);
            assert!(!dec.step_offsets.is_empty());
        }
    }

    #[test]
    fn baseline_offset_ignores_words_lstm_offsets_do_not() {
        for variant in [Variant::Baseline, Variant::SLstm, Variant::ScLstm, Variant::TLstm] {
            let mut cfg = ModelConfig::desk(24);
            cfg.hidden = 8;
            cfg.variant = variant;
            let model = Model::new(cfg, 3).unwrap();
            let run = |words: &[usize]| {
                let mut fwd = model.fwd(false);
                let (region, context) = region_inputs(&model, &mut fwd);
                let out = fwd.head_forward(region, context, words).unwrap();
                fwd.g.value(out.offset).to_vec()
            };
            let a = run(&[5, 6, 7]);
            let b = run(&[7, 6, 5]);
            if variant == Variant::Baseline {
                assert_eq!(a, b);
            } else {
                assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
            }
        }
    }

    #[test]
    fn fusion_models_reproduce_base_after_warm_start() {
        let mut base_cfg = ModelConfig::desk(24);
        base_cfg.hidden = 8;
        base_cfg.variant = Variant::TLstm;
        let base = Model::new(base_cfg.clone(), 11).unwrap();
        for fusion in [Fusion::Early, Fusion::Late] {
            for op in [FusionOp::Concat, FusionOp::Sum, FusionOp::Mul] {
                let mut cfg = base_cfg.clone();
                cfg.fusion = fusion;
                cfg.fusion_op = op;
                let mut m = Model::new(cfg, 999).unwrap();
                m.load_base_params(&base.store).unwrap();

                let mut fb = base.fwd(false);
                let (r, _) = region_inputs(&base, &mut fb);
                let ob = fb.head_forward(r, None, &[5, 6]).unwrap();

                let mut fm = m.fwd(false);
                let (r2, ctx) = region_inputs(&m, &mut fm);
                let om = fm.head_forward(r2, ctx, &[5, 6]).unwrap();

                let wl_b = fb.g.value(ob.word_logits);
                let wl_m = fm.g.value(om.word_logits);
                for (x, y) in wl_b.iter().zip(wl_m) {
                    assert!((x - y).abs() <= 1e-9, "{fusion} {op}: {x} vs {y}");
                }
                for (x, y) in fb.g.value(ob.offset).iter().zip(fm.g.value(om.offset)) {
                    assert!((x - y).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn rpn_rearrangement_matches_anchor_order() {
        // zero the cls/reg conv weights and give each output channel a
        // distinct bias: row (y,x,a) must read back channel biases a*k..a*k+k
        let mut cfg = ModelConfig::desk(24);
        cfg.hidden = 8;
        let mut model = Model::new(cfg, 1).unwrap();
        let a = model.cfg.anchors.anchors_per_cell();
        let (cw, cb) = model.ids.rpn_cls;
        model.store.entry_mut(cw).value.data.fill(0.0);
        for (i, x) in model.store.entry_mut(cb).value.data.iter_mut().enumerate() {
            *x = i as f64;
        }
        let img = Tensor::filled(&[3, 32, 32], 0.3);
        let mut fwd = model.fwd(false);
        let fm = fwd.backbone(&img).unwrap();
        assert_eq!((fm.height, fm.width), (2, 2));
        let rpn = fwd.rpn(&fm).unwrap();
        assert_eq!(fwd.g.shape(rpn.cls), &[2 * 2 * a, 2]);
        let v = fwd.g.value(rpn.cls);
        for row in 0..2 * 2 * a {
            let ai = row % a;
            assert_eq!(v[row * 2], (ai * 2) as f64);
            assert_eq!(v[row * 2 + 1], (ai * 2 + 1) as f64);
        }
    }

    #[test]
    fn backbone_and_region_feature_shapes() {
        let mut cfg = ModelConfig::desk(24);
        cfg.hidden = 8;
        let model = Model::new(cfg, 2).unwrap();
        let img = Tensor::filled(&[3, 64, 64], 0.25);
        let mut fwd = model.fwd(false);
        let fm = fwd.backbone(&img).unwrap();
        assert_eq!(fwd.g.shape(fm.var), &[64, 4, 4]);
        let bbox = BBox::new(5.0, 9.0, 40.0, 50.0).unwrap();
        let feat = fwd.region_feature(&fm, &bbox).unwrap();
        assert_eq!(fwd.g.shape(feat), &[1, 8]);
        assert!(fwd.g.value(feat).iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        // end-to-end check through LSTMs, fusion, and all three heads
        let mut cfg = ModelConfig::desk(16);
        cfg.hidden = 6;
        cfg.variant = Variant::TLstm;
        cfg.fusion = Fusion::Late;
        cfg.fusion_op = FusionOp::Mul;
        let mut model = Model::new(cfg, 5).unwrap();
        // break the identity warm start so fusion params carry gradient
        let (pw, _) = model.ids.fuse_proj.unwrap();
        for (i, x) in model.store.entry_mut(pw).value.data.iter_mut().enumerate() {
            *x = ((i as f64) * 0.7).sin() * 0.3;
        }
        let words = vec![5, 9];
        let loss_of = |model: &Model| -> f64 {
            let mut fwd = model.fwd(true);
            let (region, context) = region_inputs(model, &mut fwd);
            let out = fwd.head_forward(region, context, &words).unwrap();
            let l_cap = fwd.g.softmax_cross_entropy(out.word_logits, &out.word_targets).unwrap();
            let l_det = fwd.g.softmax_cross_entropy(out.det_logits, &[1]).unwrap();
            let tgt = fwd.g.constant(Tensor::from_vec(&[1, 4], vec![0.2, -0.1, 0.3, 0.05]).unwrap());
            let l_box = fwd.g.smooth_l1(out.offset, tgt).unwrap();
            let s = fwd.g.add(l_cap, l_det).unwrap();
            let s = fwd.g.add(s, l_box).unwrap();
            fwd.g.value(s)[0]
        };
        // analytic grads
        let mut fwd = model.fwd(true);
        let (region, context) = region_inputs(&model, &mut fwd);
        let out = fwd.head_forward(region, context, &words).unwrap();
        let l_cap = fwd.g.softmax_cross_entropy(out.word_logits, &out.word_targets).unwrap();
        let l_det = fwd.g.softmax_cross_entropy(out.det_logits, &[1]).unwrap();
        let tgt = fwd.g.constant(Tensor::from_vec(&[1, 4], vec![0.2, -0.1, 0.3, 0.05]).unwrap());
        let l_box = fwd.g.smooth_l1(out.offset, tgt).unwrap();
        let s = fwd.g.add(l_cap, l_det).unwrap();
        let s = fwd.g.add(s, l_box).unwrap();
        let mut graph = fwd.into_graph();
        graph.backward(s).unwrap();
        model.store.zero_grads();
        graph.flush_grads(&mut model.store);

        let h = 1e-6;
        for name in
            ["cap.w_hh", "loc.w_ih", "ctx.w_ih", "fuse.proj.w", "word.w", "offset.w", "embed.w"]
        {
            let id = model.store.id_of(name).unwrap();
            let n = model.store.entry(id).value.data.len();
            for &i in &[0usize, n / 2, n - 1] {
                let analytic = model.store.entry(id).grad[i];
                let orig = model.store.entry(id).value.data[i];
                model.store.entry_mut(id).value.data[i] = orig + h;
                let up = loss_of(&model);
                model.store.entry_mut(id).value.data[i] = orig - h;
                let dn = loss_of(&model);
                model.store.entry_mut(id).value.data[i] = orig;
                let numeric = (up - dn) / (2.0 * h);
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1.0);
                assert!(rel < 1e-5, "{name}[{i}]: analytic {analytic} vs numeric {numeric}");
            }
        }
    }
}

//! The full classifier: three sparse disentangled token branches plus the
//! mini-batch graph stream, fused into a classification head.

pub mod checkpoint;
pub mod complexity;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{GcnLayer, GraphBatch, SigmaMode};
use crate::params::{fan_in_uniform, zeros, ParamId, ParamStore, TapeBinding};
use crate::rng::{substream, Stream};
use crate::scalar::Scalar;
use crate::sparse::{topk_mask, AttentionScorer, CosineScorer, SelectionMask};
use crate::ssm::{MambaBlock, MambaConfig};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokens::{SpatialTokenizer, SpectralTokenizer, TemporalTokenizer};

// ── Configuration ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    WoSpatial,
    WoSpectral,
    WoTemporal,
    WoGraph,
    WoSparsity,
    WoDisentanglement,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::WoSpatial,
        Ablation::WoSpectral,
        Ablation::WoTemporal,
        Ablation::WoGraph,
        Ablation::WoSparsity,
        Ablation::WoDisentanglement,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Ablation::Full),
            "wo-spatial" => Ok(Ablation::WoSpatial),
            "wo-spectral" => Ok(Ablation::WoSpectral),
            "wo-temporal" => Ok(Ablation::WoTemporal),
            "wo-graph" => Ok(Ablation::WoGraph),
            "wo-sparsity" => Ok(Ablation::WoSparsity),
            "wo-disentanglement" => Ok(Ablation::WoDisentanglement),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ablation::Full => "full",
            Ablation::WoSpatial => "wo-spatial",
            Ablation::WoSpectral => "wo-spectral",
            Ablation::WoTemporal => "wo-temporal",
            Ablation::WoGraph => "wo-graph",
            Ablation::WoSparsity => "wo-sparsity",
            Ablation::WoDisentanglement => "wo-disentanglement",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision '{other}'"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub c0: usize,
    pub classes: usize,
    /// Spectral tokens per pixel (C).
    pub spectral_channels: usize,
    /// Spatial token width (d).
    pub spatial_dim: usize,
    pub k_spectral: usize,
    pub k_temporal: usize,
    pub k_spatial: usize,
    pub heads: usize,
    pub d_k: usize,
    pub mamba_depth: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub gcn_depth: usize,
    pub gcn_width: usize,
    pub sigma: SigmaMode,
    /// Pin Ã's diagonal to 1 instead of the literal A + I.
    pub clamp_diagonal: bool,
    /// Standardize center vectors with train-split statistics before the RBF.
    pub standardize_features: bool,
    /// Scatter fills unselected positions with the original tokens instead of zeros.
    pub residual_scatter: bool,
    pub fusion_width: usize,
    /// Token width of the single entangled branch (wo-disentanglement).
    pub entangled_dim: usize,
    pub precision: Precision,
    pub seed: u64,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Reference-scale defaults: 13×13 patches, 23 steps, 6 bands.
    pub fn new(classes: usize) -> Self {
        let (h, w, t) = (13, 13, 23);
        ModelConfig {
            h,
            w,
            t,
            c0: 6,
            classes,
            spectral_channels: 16,
            spatial_dim: 32,
            k_spectral: 8,           // ⌈C/2⌉
            k_temporal: t.div_ceil(2),
            k_spatial: (h * w).div_ceil(4),
            heads: 2,
            d_k: 8,
            mamba_depth: 1,
            d_state: 16,
            expand: 2,
            conv_width: 4,
            gcn_depth: 2,
            gcn_width: 64,
            sigma: SigmaMode::Median,
            clamp_diagonal: false,
            standardize_features: true,
            residual_scatter: false,
            fusion_width: 64,
            entangled_dim: 16,
            precision: Precision::F32,
            seed: 0,
            ablation: Ablation::Full,
        }
    }

    /// Small dims for gradient checks and smoke tests.
    pub fn tiny(classes: usize) -> Self {
        let mut cfg = ModelConfig::new(classes);
        cfg.h = 3;
        cfg.w = 3;
        cfg.t = 4;
        cfg.c0 = 2;
        cfg.spectral_channels = 4;
        cfg.spatial_dim = 6;
        cfg.k_spectral = 2;
        cfg.k_temporal = 2;
        cfg.k_spatial = 3;
        cfg.heads = 1;
        cfg.d_k = 3;
        cfg.gcn_width = 8;
        cfg.fusion_width = 8;
        cfg.entangled_dim = 4;
        cfg.precision = Precision::F64;
        cfg
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn series_len(&self) -> usize {
        self.t * self.c0
    }

    pub fn flat_len(&self) -> usize {
        self.h * self.w * self.t * self.c0
    }

    pub fn center_index(&self) -> usize {
        (self.h / 2) * self.w + self.w / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.h % 2 == 0 || self.w % 2 == 0 {
            return Err(Error::Config(format!("patch dims must be odd, got {}×{}", self.h, self.w)));
        }
        let positive: [(&str, usize); 14] = [
            ("t", self.t),
            ("c0", self.c0),
            ("classes", self.classes),
            ("spectral_channels", self.spectral_channels),
            ("spatial_dim", self.spatial_dim),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("mamba_depth", self.mamba_depth),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("conv_width", self.conv_width),
            ("gcn_depth", self.gcn_depth),
            ("gcn_width", self.gcn_width),
            ("fusion_width", self.fusion_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let budgets = [
            ("k_spectral", self.k_spectral, self.spectral_channels),
            ("k_temporal", self.k_temporal, self.t),
            ("k_spatial", self.k_spatial, self.hw()),
        ];
        for (name, k, limit) in budgets {
            if k == 0 || k > limit {
                return Err(Error::Config(format!("{name} = {k} outside [1, {limit}]")));
            }
        }
        if let SigmaMode::Fixed(s) = self.sigma {
            if s <= 0.0 {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Effective per-branch top-k sizes under the active ablation.
    pub fn effective_k(&self) -> (usize, usize, usize) {
        if self.ablation == Ablation::WoSparsity {
            (self.spectral_channels, self.t, self.hw())
        } else {
            (self.k_spectral, self.k_temporal, self.k_spatial)
        }
    }

    pub fn has_spectral(&self) -> bool {
        !matches!(self.ablation, Ablation::WoSpectral | Ablation::WoDisentanglement)
    }

    pub fn has_temporal(&self) -> bool {
        !matches!(self.ablation, Ablation::WoTemporal | Ablation::WoDisentanglement)
    }

    pub fn has_spatial(&self) -> bool {
        !matches!(self.ablation, Ablation::WoSpatial | Ablation::WoDisentanglement)
    }

    pub fn has_entangled(&self) -> bool {
        matches!(self.ablation, Ablation::WoDisentanglement)
    }

    pub fn graph_enabled(&self) -> bool {
        !matches!(self.ablation, Ablation::WoGraph)
    }

    pub fn fusion_input_width(&self) -> usize {
        let branches = [self.has_spectral(), self.has_temporal(), self.has_spatial(), self.has_entangled()]
            .iter()
            .filter(|&&b| b)
            .count();
        branches * self.fusion_width + self.gcn_width
    }

    // Key-value serialization shared by checkpoints and run configs.

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut p = |k: &str, v: String| kv.push((format!("model.{k}"), v));
        p("h", self.h.to_string());
        p("w", self.w.to_string());
        p("t", self.t.to_string());
        p("c0", self.c0.to_string());
        p("classes", self.classes.to_string());
        p("spectral_channels", self.spectral_channels.to_string());
        p("spatial_dim", self.spatial_dim.to_string());
        p("k_spectral", self.k_spectral.to_string());
        p("k_temporal", self.k_temporal.to_string());
        p("k_spatial", self.k_spatial.to_string());
        p("heads", self.heads.to_string());
        p("d_k", self.d_k.to_string());
        p("mamba_depth", self.mamba_depth.to_string());
        p("d_state", self.d_state.to_string());
        p("expand", self.expand.to_string());
        p("conv_width", self.conv_width.to_string());
        p("gcn_depth", self.gcn_depth.to_string());
        p("gcn_width", self.gcn_width.to_string());
        p(
            "sigma",
            match self.sigma {
                SigmaMode::Median => "median".to_string(),
                SigmaMode::Fixed(v) => format!("{v}"),
            },
        );
        p("clamp_diagonal", self.clamp_diagonal.to_string());
        p("standardize_features", self.standardize_features.to_string());
        p("residual_scatter", self.residual_scatter.to_string());
        p("fusion_width", self.fusion_width.to_string());
        p("entangled_dim", self.entangled_dim.to_string());
        p("precision", self.precision.to_string());
        p("seed", self.seed.to_string());
        p("ablation", self.ablation.to_string());
        kv
    }

    /// Applies `model.*` keys onto `self`; unknown model keys are an error.
    pub fn apply_kv(&mut self, kv: &[(String, String)]) -> Result<()> {
        for (key, value) in kv {
            let Some(field) = key.strip_prefix("model.") else { continue };
            let parse_usize = || -> Result<usize> {
                value.parse().map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
            };
            let parse_bool = || -> Result<bool> {
                value.parse().map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
            };
            match field {
                "h" => self.h = parse_usize()?,
                "w" => self.w = parse_usize()?,
                "t" => self.t = parse_usize()?,
                "c0" => self.c0 = parse_usize()?,
                "classes" => self.classes = parse_usize()?,
                "spectral_channels" => self.spectral_channels = parse_usize()?,
                "spatial_dim" => self.spatial_dim = parse_usize()?,
                "k_spectral" => self.k_spectral = parse_usize()?,
                "k_temporal" => self.k_temporal = parse_usize()?,
                "k_spatial" => self.k_spatial = parse_usize()?,
                "heads" => self.heads = parse_usize()?,
                "d_k" => self.d_k = parse_usize()?,
                "mamba_depth" => self.mamba_depth = parse_usize()?,
                "d_state" => self.d_state = parse_usize()?,
                "expand" => self.expand = parse_usize()?,
                "conv_width" => self.conv_width = parse_usize()?,
                "gcn_depth" => self.gcn_depth = parse_usize()?,
                "gcn_width" => self.gcn_width = parse_usize()?,
                "sigma" => {
                    self.sigma = if value == "median" {
                        SigmaMode::Median
                    } else {
                        SigmaMode::Fixed(
                            value.parse().map_err(|_| Error::Config(format!("bad sigma '{value}'")))?,
                        )
                    }
                }
                "clamp_diagonal" => self.clamp_diagonal = parse_bool()?,
                "standardize_features" => self.standardize_features = parse_bool()?,
                "residual_scatter" => self.residual_scatter = parse_bool()?,
                "fusion_width" => self.fusion_width = parse_usize()?,
                "entangled_dim" => self.entangled_dim = parse_usize()?,
                "precision" => self.precision = Precision::parse(value)?,
                "seed" => {
                    self.seed =
                        value.parse().map_err(|_| Error::Config(format!("bad seed '{value}'")))?
                }
                "ablation" => self.ablation = Ablation::parse(value)?,
                other => return Err(Error::Config(format!("unknown config key model.{other}"))),
            }
        }
        Ok(())
    }
}

// ── Components ──────────────────────────────────────────────────────

struct PixelBranch {
    scorer: AttentionScorer,
    blocks: Vec<MambaBlock>,
    proj_w: ParamId,
    proj_b: ParamId,
    k: usize,
}

struct SpatialBranch {
    tokenizer: SpatialTokenizer,
    scorer: CosineScorer,
    blocks: Vec<MambaBlock>,
    proj_w: ParamId,
    proj_b: ParamId,
    k: usize,
}

struct EntangledBranch {
    in_w: ParamId,
    in_b: ParamId,
    blocks: Vec<MambaBlock>,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// Logits for one batch, still attached to the tape so a loss can be added.
pub struct ForwardPass<S: Scalar> {
    pub tape: Tape<S>,
    pub binding: TapeBinding,
    pub logits: NodeId,
}

pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    spectral_tok: Option<SpectralTokenizer>,
    spectral: Option<PixelBranch>,
    temporal_tok: Option<TemporalTokenizer>,
    temporal: Option<PixelBranch>,
    spatial: Option<SpatialBranch>,
    entangled: Option<EntangledBranch>,
    gcn: Vec<GcnLayer>,
    fusion_w: ParamId,
    fusion_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    feat_mean: ParamId,
    feat_std: ParamId,
}

impl<S: Scalar> Model<S> {
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = substream(cfg.seed, Stream::ParamInit, 0);
        let (k_f, k_t, k_s) = cfg.effective_k();
        let fusion = cfg.fusion_width;

        let mut spectral_tok = None;
        let mut spectral = None;
        if cfg.has_spectral() {
            spectral_tok = Some(SpectralTokenizer::init(
                &mut store,
                &mut rng,
                "spectral.stem",
                cfg.t,
                cfg.c0,
                cfg.spectral_channels,
            ));
            let scorer = AttentionScorer::init(&mut store, &mut rng, "spectral.score", cfg.t, cfg.heads, cfg.d_k)?;
            let blocks = (0..cfg.mamba_depth)
                .map(|i| {
                    let mc = MambaConfig {
                        d_model: cfg.t,
                        d_state: cfg.d_state,
                        expand: cfg.expand,
                        conv_width: cfg.conv_width,
                    };
                    MambaBlock::init(&mut store, &mut rng, &format!("spectral.mamba{i}"), mc)
                })
                .collect();
            let proj_w = store.add(
                "spectral.proj.w",
                vec![cfg.t, fusion],
                fan_in_uniform(&mut rng, cfg.t, cfg.t * fusion),
                true,
            );
            let proj_b = store.add("spectral.proj.b", vec![fusion], zeros(fusion), true);
            spectral = Some(PixelBranch { scorer, blocks, proj_w, proj_b, k: k_f });
        }

        let mut temporal_tok = None;
        let mut temporal = None;
        if cfg.has_temporal() {
            temporal_tok = Some(TemporalTokenizer::init(
                &mut store,
                &mut rng,
                "temporal.stem",
                cfg.t,
                cfg.c0,
                cfg.spectral_channels,
            ));
            let c = cfg.spectral_channels;
            let scorer = AttentionScorer::init(&mut store, &mut rng, "temporal.score", c, cfg.heads, cfg.d_k)?;
            let blocks = (0..cfg.mamba_depth)
                .map(|i| {
                    let mc = MambaConfig {
                        d_model: c,
                        d_state: cfg.d_state,
                        expand: cfg.expand,
                        conv_width: cfg.conv_width,
                    };
                    MambaBlock::init(&mut store, &mut rng, &format!("temporal.mamba{i}"), mc)
                })
                .collect();
            let proj_w = store.add("temporal.proj.w", vec![c, fusion], fan_in_uniform(&mut rng, c, c * fusion), true);
            let proj_b = store.add("temporal.proj.b", vec![fusion], zeros(fusion), true);
            temporal = Some(PixelBranch { scorer, blocks, proj_w, proj_b, k: k_t });
        }

        let mut spatial = None;
        if cfg.has_spatial() {
            let tokenizer = SpatialTokenizer::init(
                &mut store,
                &mut rng,
                "spatial.stem",
                cfg.hw(),
                cfg.series_len(),
                cfg.spatial_dim,
            );
            let d = cfg.spatial_dim;
            let blocks = (0..cfg.mamba_depth)
                .map(|i| {
                    let mc = MambaConfig {
                        d_model: d,
                        d_state: cfg.d_state,
                        expand: cfg.expand,
                        conv_width: cfg.conv_width,
                    };
                    MambaBlock::init(&mut store, &mut rng, &format!("spatial.mamba{i}"), mc)
                })
                .collect();
            let proj_w = store.add("spatial.proj.w", vec![d, fusion], fan_in_uniform(&mut rng, d, d * fusion), true);
            let proj_b = store.add("spatial.proj.b", vec![fusion], zeros(fusion), true);
            spatial = Some(SpatialBranch {
                tokenizer,
                scorer: CosineScorer { center: cfg.center_index() },
                blocks,
                proj_w,
                proj_b,
                k: k_s,
            });
        }

        let mut entangled = None;
        if cfg.has_entangled() {
            let slice_len = cfg.hw() * cfg.c0;
            let e = cfg.entangled_dim;
            let in_w = store.add(
                "entangled.in.w",
                vec![slice_len, e],
                fan_in_uniform(&mut rng, slice_len, slice_len * e),
                true,
            );
            let in_b = store.add("entangled.in.b", vec![e], zeros(e), true);
            let blocks = (0..cfg.mamba_depth)
                .map(|i| {
                    let mc = MambaConfig {
                        d_model: e,
                        d_state: cfg.d_state,
                        expand: cfg.expand,
                        conv_width: cfg.conv_width,
                    };
                    MambaBlock::init(&mut store, &mut rng, &format!("entangled.mamba{i}"), mc)
                })
                .collect();
            let proj_w = store.add("entangled.proj.w", vec![e, fusion], fan_in_uniform(&mut rng, e, e * fusion), true);
            let proj_b = store.add("entangled.proj.b", vec![fusion], zeros(fusion), true);
            entangled = Some(EntangledBranch { in_w, in_b, blocks, proj_w, proj_b });
        }

        let mut gcn = Vec::with_capacity(cfg.gcn_depth);
        for l in 0..cfg.gcn_depth {
            let f_in = if l == 0 { cfg.flat_len() } else { cfg.gcn_width };
            gcn.push(GcnLayer::init(&mut store, &mut rng, &format!("gcn.layer{l}"), f_in, cfg.gcn_width));
        }

        let fin = cfg.fusion_input_width();
        let fusion_w = store.add("fusion.w", vec![fin, fusion], fan_in_uniform(&mut rng, fin, fin * fusion), true);
        let fusion_b = store.add("fusion.b", vec![fusion], zeros(fusion), true);
        let head_w = store.add(
            "head.w",
            vec![fusion, cfg.classes],
            fan_in_uniform(&mut rng, fusion, fusion * cfg.classes),
            true,
        );
        let head_b = store.add("head.b", vec![cfg.classes], zeros(cfg.classes), true);

        let series = cfg.series_len();
        let feat_mean = store.add("state.feat_mean", vec![series], zeros(series), false);
        let feat_std = store.add("state.feat_std", vec![series], vec![S::ONE; series], false);

        Ok(Model {
            cfg,
            store,
            spectral_tok,
            spectral,
            temporal_tok,
            temporal,
            spatial,
            entangled,
            gcn,
            fusion_w,
            fusion_b,
            head_w,
            head_b,
            feat_mean,
            feat_std,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_len()
    }

    /// Stores the train-split standardization statistics used by the graph.
    pub fn set_feature_stats(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        if mean.len() != self.cfg.series_len() || std.len() != self.cfg.series_len() {
            return Err(Error::Dimension(format!(
                "feature stats length {} does not match series length {}",
                mean.len(),
                self.cfg.series_len()
            )));
        }
        self.store
            .set_data(self.feat_mean, mean.iter().map(|&v| S::from_f64(v)).collect());
        self.store.set_data(
            self.feat_std,
            std.iter().map(|&v| S::from_f64(v.max(1e-8))).collect(),
        );
        Ok(())
    }

    fn validate_cubes(&self, cubes: &Tensor<S>) -> Result<usize> {
        let s = cubes.shape();
        let want = [self.cfg.h, self.cfg.w, self.cfg.t, self.cfg.c0];
        let names = ["h", "w", "t", "c0"];
        if s.len() != 5 {
            return Err(Error::Config(format!("cubes must be [B, h, w, t, c0], got {s:?}")));
        }
        for (i, (&got, (&expect, name))) in s[1..].iter().zip(want.iter().zip(names.iter())).enumerate() {
            if got != expect {
                return Err(Error::Config(format!(
                    "axis {name} (dim {}): expected {expect}, got {got}",
                    i + 1
                )));
            }
        }
        if s[0] == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        Ok(s[0])
    }

    /// Builds the batch graph from center-pixel vectors (standardized with
    /// the stored train statistics when configured).
    pub fn build_graph(&self, cubes: &Tensor<S>) -> Result<GraphBatch> {
        let b = self.validate_cubes(cubes)?;
        let series = self.cfg.series_len();
        let data = cubes.data();
        let cube_len = self.cfg.flat_len();
        let center_base = ((self.cfg.h / 2) * self.cfg.w + self.cfg.w / 2) * series;
        let mean = self.store.data(self.feat_mean);
        let std = self.store.data(self.feat_std);
        let mut vectors = Vec::with_capacity(b);
        for i in 0..b {
            let base = i * cube_len + center_base;
            let mut v = Vec::with_capacity(series);
            for j in 0..series {
                let raw = data[base + j].to_f64();
                if self.cfg.standardize_features {
                    v.push((raw - mean[j].to_f64()) / std[j].to_f64());
                } else {
                    v.push(raw);
                }
            }
            vectors.push(v);
        }
        GraphBatch::build(&vectors, self.cfg.sigma, self.cfg.clamp_diagonal)
    }

    /// One forward pass; `training` switches batch-norm statistics and
    /// updates their running estimates.
    pub fn forward(&mut self, cubes: &Tensor<S>, training: bool) -> Result<ForwardPass<S>> {
        let b = self.validate_cubes(cubes)?;
        let graph = if self.cfg.graph_enabled() { Some(self.build_graph(cubes)?) } else { None };

        let mut tape: Tape<S> = Tape::new();
        let binding = self.store.bind(&mut tape)?;
        let cube_node = tape.constant(cubes.clone());
        let pixels = tape.reshape(cube_node, vec![b * self.cfg.hw(), self.cfg.series_len()])?;

        let mut fusion_parts: Vec<NodeId> = Vec::new();

        if let (Some(tok), Some(branch)) = (&self.spectral_tok, &self.spectral) {
            let tokens = tok.forward(&mut tape, &binding, pixels)?;
            let scores = branch.scorer.forward(&mut tape, &binding, tokens.node)?;
            let pooled = run_pixel_branch(
                &mut tape,
                &binding,
                &self.cfg,
                tokens.node,
                scores,
                branch,
                b,
                self.cfg.hw(),
            )?;
            let part = tape.linear(pooled, binding.node(branch.proj_w)?, Some(binding.node(branch.proj_b)?))?;
            fusion_parts.push(part);
        }

        if let (Some(tok), Some(branch)) = (&self.temporal_tok, &self.temporal) {
            let tokens = tok.forward(&mut tape, &binding, pixels)?;
            let scores = branch.scorer.forward(&mut tape, &binding, tokens.node)?;
            let pooled = run_pixel_branch(
                &mut tape,
                &binding,
                &self.cfg,
                tokens.node,
                scores,
                branch,
                b,
                self.cfg.hw(),
            )?;
            let part = tape.linear(pooled, binding.node(branch.proj_w)?, Some(binding.node(branch.proj_b)?))?;
            fusion_parts.push(part);
        }

        if let Some(branch) = &self.spatial {
            let tokens = branch.tokenizer.forward(&mut tape, &binding, pixels, b)?;
            let scores = branch.scorer.forward(&mut tape, tokens.node)?;
            let masks = masks_from_scores(&tape, scores, branch.k)?;
            let gated = gate_and_gather(&mut tape, tokens.node, scores, &masks)?;
            let mut processed = gated;
            for block in &branch.blocks {
                processed = block.forward(&mut tape, &binding, processed)?;
            }
            let scattered = scatter_with_fill(&mut tape, &self.cfg, tokens.node, processed, &masks)?;
            let pooled = tape.mean_axis(scattered, 1)?; // [B, d]
            let part = tape.linear(pooled, binding.node(branch.proj_w)?, Some(binding.node(branch.proj_b)?))?;
            fusion_parts.push(part);
        }

        if let Some(branch) = &self.entangled {
            // Per-time-step slices of the whole patch, flattened; built on
            // the data side since the input is a constant.
            let slice_len = self.cfg.hw() * self.cfg.c0;
            let src = cubes.data();
            let mut permuted = vec![S::ZERO; b * self.cfg.t * slice_len];
            let (hw, t, c0) = (self.cfg.hw(), self.cfg.t, self.cfg.c0);
            for bi in 0..b {
                for px in 0..hw {
                    for tt in 0..t {
                        for band in 0..c0 {
                            let from = ((bi * hw + px) * t + tt) * c0 + band;
                            let to = (bi * t + tt) * slice_len + px * c0 + band;
                            permuted[to] = src[from];
                        }
                    }
                }
            }
            let slices = tape.constant(Tensor::new(permuted, vec![b * t, slice_len])?);
            let projected =
                tape.linear(slices, binding.node(branch.in_w)?, Some(binding.node(branch.in_b)?))?;
            let mut tokens = tape.reshape(projected, vec![b, t, self.cfg.entangled_dim])?;
            for block in &branch.blocks {
                tokens = block.forward(&mut tape, &binding, tokens)?;
            }
            let pooled = tape.mean_axis(tokens, 1)?;
            let part = tape.linear(pooled, binding.node(branch.proj_w)?, Some(binding.node(branch.proj_b)?))?;
            fusion_parts.push(part);
        }

        // Graph stream: H⁰ is the flattened cube.
        let h0 = tape.reshape(cube_node, vec![b, self.cfg.flat_len()])?;
        let propagate = match &graph {
            Some(g) => Some(tape.constant(g.normalized_tensor::<S>())),
            None => None,
        };
        let mut h = h0;
        for (l, layer) in self.gcn.iter().enumerate() {
            h = layer.forward(&mut tape, &binding, &mut self.store, h, propagate, training)?;
            if l + 1 < self.gcn.len() {
                h = tape.relu(h)?;
            }
        }
        fusion_parts.push(h);

        let concat = tape.concat_last(&fusion_parts)?;
        let fused_lin = tape.linear(concat, binding.node(self.fusion_w)?, Some(binding.node(self.fusion_b)?))?;
        let fused = tape.relu(fused_lin)?;
        let logits = tape.linear(fused, binding.node(self.head_w)?, Some(binding.node(self.head_b)?))?;
        tape.value(logits).assert_all_finite("logits")?;

        Ok(ForwardPass { tape, binding, logits })
    }

    /// Eval-mode argmax predictions for one batch.
    pub fn predict(&mut self, cubes: &Tensor<S>) -> Result<Vec<usize>> {
        let pass = self.forward(cubes, false)?;
        let logits = pass.tape.value(pass.logits);
        let k = self.cfg.classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

/// Top-k masks per row from the score values (hard, non-differentiable).
fn masks_from_scores<S: Scalar>(tape: &Tape<S>, scores: NodeId, k: usize) -> Result<Vec<SelectionMask>> {
    let shape = tape.shape(scores).to_vec();
    let (rows, l) = (shape[0], shape[1]);
    let values = tape.value(scores).data();
    let mut masks = Vec::with_capacity(rows);
    for r in 0..rows {
        let row: Vec<f64> = values[r * l..(r + 1) * l].iter().map(|v| v.to_f64()).collect();
        masks.push(topk_mask(&row, k)?);
    }
    Ok(masks)
}

/// Gathers the selected tokens and gates each by (1 + γ), which is what
/// carries gradient back into the scoring projections.
fn gate_and_gather<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: NodeId,
    scores: NodeId,
    masks: &[SelectionMask],
) -> Result<NodeId> {
    let (table, k) = crate::sparse::mask_table(masks)?;
    let shape = tape.shape(scores).to_vec();
    let scores3 = tape.reshape(scores, vec![shape[0], shape[1], 1])?;
    let sel_scores = tape.gather_tokens(scores3, Arc::clone(&table), k)?;
    let gate = tape.add_scalar(sel_scores, S::ONE)?;
    let gathered = tape.gather_tokens(tokens, table, k)?;
    tape.mul_broadcast_last(gathered, gate)
}

/// Scatter back to the source positions; zeros elsewhere by default, or the
/// original tokens under the residual-fill flag.
fn scatter_with_fill<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    original: NodeId,
    processed: NodeId,
    masks: &[SelectionMask],
) -> Result<NodeId> {
    let (table, _k) = crate::sparse::mask_table(masks)?;
    let src_len = tape.shape(original)[1];
    let scattered = tape.scatter_tokens(processed, Arc::clone(&table), src_len)?;
    if !cfg.residual_scatter {
        return Ok(scattered);
    }
    // original − scatter(gather(original)) leaves the unselected rows.
    let shape = tape.shape(original).to_vec();
    let k = masks[0].k();
    let gathered_orig = tape.gather_tokens(original, Arc::clone(&table), k)?;
    let covered = tape.scatter_tokens(gathered_orig, table, shape[1])?;
    let fill = tape.sub(original, covered)?;
    tape.add(scattered, fill)
}

#[allow(clippy::too_many_arguments)]
fn run_pixel_branch<S: Scalar>(
    tape: &mut Tape<S>,
    binding: &TapeBinding,
    cfg: &ModelConfig,
    tokens: NodeId,
    scores: NodeId,
    branch: &PixelBranch,
    b: usize,
    hw: usize,
) -> Result<NodeId> {
    let masks = masks_from_scores(tape, scores, branch.k)?;
    let gated = gate_and_gather(tape, tokens, scores, &masks)?;
    let mut processed = gated;
    for block in &branch.blocks {
        processed = block.forward(tape, binding, processed)?;
    }
    let scattered = scatter_with_fill(tape, cfg, tokens, processed, &masks)?;
    let per_pixel = tape.mean_axis(scattered, 1)?; // [B·HW, width]
    let width = tape.shape(per_pixel)[1];
    let grouped = tape.reshape(per_pixel, vec![b, hw, width])?;
    tape.mean_axis(grouped, 1) // [B, width]
}

/// The composition Fuse(F, Z, S, H): mean-pool per token axis, project each
/// branch, concatenate with the graph feature, one linear + activation.
/// Exposed for direct testing; `Model::forward` uses the same path.
pub fn fuse_parts<S: Scalar>(
    tape: &mut Tape<S>,
    parts: &[NodeId],
    fusion_w: NodeId,
    fusion_b: NodeId,
) -> Result<NodeId> {
    let concat = tape.concat_last(parts)?;
    let lin = tape.linear(concat, fusion_w, Some(fusion_b))?;
    tape.relu(lin)
}

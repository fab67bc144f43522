//! Full model assembly: two backbones, bridge blocks, fusion, and head.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, BackboneParams};
use crate::error::{Error, Result, TensorError};
use crate::fusion::{
    self, AttentionParams, LnParams, MlpParams, TokenMap,
};
use crate::head::{self, DilatedStackParams, FcParams, HeadParams};
use crate::nn::{BnSettings, ParamKind, ParamVisitor};
use crate::scalar::Scalar;
use crate::tcb::{self, TcbParams, TcbWidths};
use crate::tensor::{BnMode, Tensor};

/// Component knocked out for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Tcb,
    DepthCar,
    Dilation,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tcb" => Ok(Ablation::Tcb),
            "depthcar" => Ok(Ablation::DepthCar),
            "dilation" => Ok(Ablation::Dilation),
            other => Err(format!("unknown ablation `{other}` (tcb|depthcar|dilation)")),
        }
    }
}

/// All architecture hyper-parameters. Defaults give the desk-scale model;
/// [`ModelConfig::full`] restores the paper-scale geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input/crop side; must be divisible by 32.
    pub input_size: usize,
    pub base_channels: usize,
    pub depth_blocks_per_stage: usize,
    /// Stage-1 bridge output width; later stages double it.
    pub tcb_base_channels: usize,
    pub tcb_reduction: usize,
    pub heads: usize,
    /// Dilated-stack width; `None` keeps the fused token width.
    pub head_channels: Option<usize>,
    pub residual: bool,
    pub refine_mlp: bool,
    pub layer_norm: bool,
    /// Debug flag: RGB queries over depth keys/values.
    pub swap_modalities: bool,
    pub use_tcb: bool,
    pub use_depth_car: bool,
    pub use_dilation: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            base_channels: 16,
            depth_blocks_per_stage: 1,
            tcb_base_channels: 8,
            tcb_reduction: 16,
            heads: 2,
            head_channels: None,
            residual: true,
            refine_mlp: false,
            layer_norm: false,
            swap_modalities: false,
            use_tcb: true,
            use_depth_car: true,
            use_dilation: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Smallest verification-friendly configuration.
    pub fn toy() -> Self {
        ModelConfig {
            input_size: 64,
            base_channels: 8,
            tcb_base_channels: 4,
            heads: 2,
            ..Default::default()
        }
    }

    /// Paper-scale geometry: 224 input, channels (96,..) bridged to (64,..).
    pub fn full() -> Self {
        ModelConfig {
            input_size: 224,
            base_channels: 96,
            depth_blocks_per_stage: 2,
            tcb_base_channels: 64,
            tcb_reduction: 16,
            heads: 4,
            ..Default::default()
        }
    }

    pub fn ablate(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::Tcb => self.use_tcb = false,
            Ablation::DepthCar => self.use_depth_car = false,
            Ablation::Dilation => self.use_dilation = false,
        }
        self
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn tcb_widths(&self, stage: usize) -> TcbWidths {
        TcbWidths::new(
            self.stage_channels(stage),
            self.tcb_base_channels << stage,
            self.tcb_reduction,
        )
    }

    /// Token feature width after align+concat.
    pub fn d_model(&self) -> usize {
        (0..4)
            .map(|i| {
                if self.use_tcb {
                    self.tcb_base_channels << i
                } else {
                    self.stage_channels(i)
                }
            })
            .sum()
    }

    /// Channel width entering the fully connected scorer.
    pub fn head_dim(&self) -> usize {
        if self.use_dilation {
            self.head_channels.unwrap_or_else(|| self.d_model())
        } else {
            self.d_model()
        }
    }

    /// Stage-4 grid side for the configured input size.
    pub fn token_grid(&self) -> usize {
        self.input_size / 32
    }

    pub fn backbone_config(&self, in_channels: usize) -> BackboneConfig {
        BackboneConfig {
            in_channels,
            base_channels: self.base_channels,
            input_size: (self.input_size, self.input_size),
            depth_blocks_per_stage: self.depth_blocks_per_stage,
        }
    }

    pub fn bn_settings<S: Scalar>(&self) -> BnSettings<S> {
        BnSettings {
            eps: S::of_f64(self.bn_eps),
            momentum: S::of_f64(self.bn_momentum),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size % 32 != 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("depth_blocks_per_stage", self.depth_blocks_per_stage),
            ("tcb_base_channels", self.tcb_base_channels),
            ("tcb_reduction", self.tcb_reduction),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.use_depth_car && self.d_model() % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide token width {}",
                self.heads,
                self.d_model()
            )));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bad batchnorm settings".into()));
        }
        Ok(())
    }
}

/// All parameters of a configured model; ablated components are absent.
pub struct DgiqaParams<S: Scalar> {
    pub rgb_backbone: BackboneParams<S>,
    pub depth_backbone: Option<BackboneParams<S>>,
    pub tcb_rgb: Option<Vec<TcbParams<S>>>,
    pub tcb_depth: Option<Vec<TcbParams<S>>>,
    pub cross: Option<AttentionParams<S>>,
    pub refine: Option<AttentionParams<S>>,
    pub refine_mlp: Option<MlpParams<S>>,
    pub ln_cross: Option<LnParams<S>>,
    pub ln_refine: Option<LnParams<S>>,
    pub head: HeadParams<S>,
}

/// Configured model: architecture plus parameter state.
pub struct DgiqaModel<S: Scalar> {
    pub config: ModelConfig,
    pub params: DgiqaParams<S>,
}

/// Handles kept from a forward pass for losses and attribution.
pub struct ForwardTrace<S: Scalar> {
    /// `[N]` scores in (0,1).
    pub q_hat: Tensor<S>,
    /// Fused map `[N, D, h4, w4]` entering the head.
    pub fused: Tensor<S>,
    /// Dilated-stack output (equals `fused` when dilation is ablated).
    pub dilated: Tensor<S>,
}

impl<S: Scalar> DgiqaModel<S> {
    /// Deterministically initializes all parameters from one seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let rgb_backbone = backbone::init_params_with(&config.backbone_config(3), &mut rng)?;
        let depth_backbone = if config.use_depth_car {
            Some(backbone::init_params_with(
                &config.backbone_config(1),
                &mut rng,
            )?)
        } else {
            None
        };
        let mut init_tcbs = |rng: &mut ChaCha12Rng| -> Vec<TcbParams<S>> {
            (0..4)
                .map(|i| TcbParams::init(config.tcb_widths(i), rng))
                .collect()
        };
        let tcb_rgb = config.use_tcb.then(|| init_tcbs(&mut rng));
        let tcb_depth = (config.use_tcb && config.use_depth_car).then(|| init_tcbs(&mut rng));
        let d_model = config.d_model();
        let (cross, refine, refine_mlp, ln_cross, ln_refine) = if config.use_depth_car {
            (
                Some(AttentionParams::init(d_model, config.heads, &mut rng)?),
                Some(AttentionParams::init(d_model, config.heads, &mut rng)?),
                config
                    .refine_mlp
                    .then(|| MlpParams::init(d_model, &mut rng)),
                config.layer_norm.then(|| LnParams::init(d_model)),
                config.layer_norm.then(|| LnParams::init(d_model)),
            )
        } else {
            (None, None, None, None, None)
        };
        let dilated = config
            .use_dilation
            .then(|| DilatedStackParams::init(d_model, config.head_dim(), &mut rng));
        let fc = FcParams::init(config.head_dim(), &mut rng);
        Ok(DgiqaModel {
            config,
            params: DgiqaParams {
                rgb_backbone,
                depth_backbone,
                tcb_rgb,
                tcb_depth,
                cross,
                refine,
                refine_mlp,
                ln_cross,
                ln_refine,
                head: HeadParams { dilated, fc },
            },
        })
    }

    fn bridge(
        &self,
        stages: &[Tensor<S>; 4],
        tcbs: &Option<Vec<TcbParams<S>>>,
        mode: BnMode,
    ) -> Result<TokenMap<S>, TensorError> {
        let bn = self.config.bn_settings();
        let bridged: [Tensor<S>; 4] = match tcbs {
            Some(tcbs) => {
                let mut out = Vec::with_capacity(4);
                for (stage, params) in stages.iter().zip(tcbs) {
                    out.push(tcb::tcb_forward(stage, params, &bn, mode)?);
                }
                out.try_into().map_err(|_| TensorError::Invalid {
                    op: "bridge",
                    msg: "expected 4 stages".into(),
                })?
            }
            None => stages.clone(),
        };
        fusion::align_concat(&bridged)
    }

    /// Runs RGB (and depth, when fused) through the network.
    pub fn forward(
        &self,
        rgb: &Tensor<S>,
        depth: &Tensor<S>,
        mode: BnMode,
    ) -> Result<ForwardTrace<S>> {
        let bn = self.config.bn_settings();
        let rgb_pyr = backbone::extract(rgb, &self.params.rgb_backbone, &bn, mode)?;
        let rgb_tokens = self.bridge(&rgb_pyr.stages, &self.params.tcb_rgb, mode)?;

        let fused_tokens = if self.config.use_depth_car {
            let depth_backbone = self
                .params
                .depth_backbone
                .as_ref()
                .expect("depth backbone present when fusion is on");
            let depth_pyr = backbone::extract(depth, depth_backbone, &bn, mode)?;
            let depth_tokens = self.bridge(&depth_pyr.stages, &self.params.tcb_depth, mode)?;
            let (q_src, kv_src) = if self.config.swap_modalities {
                (&rgb_tokens, &depth_tokens)
            } else {
                (&depth_tokens, &rgb_tokens)
            };
            let cross = fusion::cross_attention(
                q_src,
                kv_src,
                self.params.cross.as_ref().expect("cross attention params"),
                self.config.residual,
                self.params.ln_cross.as_ref(),
            )?;
            fusion::self_attention_refine(
                &cross,
                self.params.refine.as_ref().expect("refine params"),
                self.config.residual,
                self.params.refine_mlp.as_ref(),
                self.params.ln_refine.as_ref(),
            )?
        } else {
            rgb_tokens
        };

        let fused = fused_tokens.to_map()?;
        let dilated = match &self.params.head.dilated {
            Some(stack) => head::dilated_stack(&fused, stack, &bn, mode)?,
            None => fused.clone(),
        };
        let q_hat = head::predict(&dilated, &self.params.head.fc)?;
        Ok(ForwardTrace {
            q_hat,
            fused,
            dilated,
        })
    }

    /// Siamese full-reference score for aligned reference/distorted pairs.
    pub fn fr_forward(
        &self,
        rgb_ref: &Tensor<S>,
        depth_ref: &Tensor<S>,
        rgb_dist: &Tensor<S>,
        depth_dist: &Tensor<S>,
        mode: BnMode,
    ) -> Result<Tensor<S>> {
        let trace_ref = self.forward(rgb_ref, depth_ref, mode)?;
        let trace_dist = self.forward(rgb_dist, depth_dist, mode)?;
        Ok(head::fr_predict(
            &trace_ref.dilated,
            &trace_dist.dilated,
            &self.params.head.fc,
        )?)
    }

    /// Walks every parameter tensor in canonical order.
    pub fn visit(&self, f: &mut ParamVisitor<'_, S>) {
        self.params.rgb_backbone.visit("backbone.rgb", f);
        if let Some(bb) = &self.params.depth_backbone {
            bb.visit("backbone.depth", f);
        }
        if let Some(tcbs) = &self.params.tcb_rgb {
            for (i, t) in tcbs.iter().enumerate() {
                t.visit(&format!("tcb.rgb.stage{}", i + 1), f);
            }
        }
        if let Some(tcbs) = &self.params.tcb_depth {
            for (i, t) in tcbs.iter().enumerate() {
                t.visit(&format!("tcb.depth.stage{}", i + 1), f);
            }
        }
        if let Some(a) = &self.params.cross {
            a.visit("fusion.cross", f);
        }
        if let Some(ln) = &self.params.ln_cross {
            ln.visit("fusion.cross.ln", f);
        }
        if let Some(a) = &self.params.refine {
            a.visit("fusion.refine", f);
        }
        if let Some(ln) = &self.params.ln_refine {
            ln.visit("fusion.refine.ln", f);
        }
        if let Some(mlp) = &self.params.refine_mlp {
            mlp.visit("fusion.refine.mlp", f);
        }
        self.params.head.visit("head", f);
    }

    /// Learnable tensors in canonical order (optimizer view).
    pub fn learnable(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, kind, t| {
            if kind == ParamKind::Learnable {
                out.push((name.to_string(), t.clone()));
            }
        });
        out
    }

    /// Exact learnable-scalar count by enumeration.
    pub fn learnable_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, kind, t| {
            if kind == ParamKind::Learnable {
                total += t.numel();
            }
        });
        total
    }
}

/// Per-module learnable parameter counts, computed in closed form from the
/// configuration (no tensors are allocated).
#[derive(Debug, Clone, Serialize)]
pub struct ParamCountReport {
    pub sections: Vec<(String, usize)>,
    pub total: usize,
}

pub fn count_params(config: &ModelConfig) -> ParamCountReport {
    let c = config.base_channels;
    let backbone_count = |in_ch: usize| -> usize {
        let mut total = in_ch * c * 16 + c; // patch 4x4 conv
        for i in 0..3 {
            let c_in = c << i;
            let c_out = c << (i + 1);
            total += c_in * c_out * 9 + c_out + 2 * c_out; // down conv + bn
            total += config.depth_blocks_per_stage * (c_out * c_out * 9 + c_out + 2 * c_out);
        }
        total
    };
    let mut sections = Vec::new();
    sections.push(("backbone.rgb".to_string(), backbone_count(3)));
    if config.use_depth_car {
        sections.push(("backbone.depth".to_string(), backbone_count(1)));
    }
    if config.use_tcb {
        let per_modality: usize = (0..4)
            .map(|i| tcb::tcb_param_count(&config.tcb_widths(i)))
            .sum();
        let modalities = if config.use_depth_car { 2 } else { 1 };
        sections.push(("tcb".to_string(), modalities * per_modality));
    }
    if config.use_depth_car {
        let d = config.d_model();
        let mut fusion_total = 2 * 4 * d * d;
        if config.refine_mlp {
            fusion_total += d * 4 * d + 4 * d + 4 * d * d + d;
        }
        if config.layer_norm {
            fusion_total += 2 * 2 * d;
        }
        sections.push(("fusion".to_string(), fusion_total));
    }
    let d = config.d_model();
    let dh = config.head_dim();
    let mut head_total = dh + 1; // fc
    if config.use_dilation {
        head_total += d * dh * 9 + dh + 2 * dh; // conv_a + bn_a
        head_total += dh * dh * 9 + dh + 2 * dh; // conv_b + bn_b
    }
    sections.push(("head".to_string(), head_total));
    let total = sections.iter().map(|(_, n)| n).sum();
    ParamCountReport { sections, total }
}

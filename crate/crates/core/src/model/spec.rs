use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::blocks::{se_hidden, HEAD_DIM};
use crate::error::{Error, Result};
use crate::tensor::{Activation, BN_EPS};

/// The six published network sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Variant {
    T0,
    T1,
    T2,
    S,
    M,
    L,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::T0,
        Variant::T1,
        Variant::T2,
        Variant::S,
        Variant::M,
        Variant::L,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::T0 => "T0",
            Variant::T1 => "T1",
            Variant::T2 => "T2",
            Variant::S => "S",
            Variant::M => "M",
            Variant::L => "L",
        }
    }

    pub fn config(self) -> VariantConfig {
        let (base_channels, depths, activation) = match self {
            Variant::T0 => (32, [1, 2, 6, 4], Activation::Gelu),
            Variant::T1 => (48, [2, 2, 6, 4], Activation::Gelu),
            Variant::T2 => (64, [2, 2, 6, 4], Activation::Relu),
            Variant::S => (96, [2, 2, 9, 4], Activation::Relu),
            Variant::M => (128, [2, 3, 16, 4], Activation::Relu),
            Variant::L => (160, [2, 3, 20, 4], Activation::Relu),
        };
        VariantConfig {
            variant: self,
            base_channels,
            depths,
            activation,
            partial_ratio: (1, 4),
            mlp_ratio: 2,
            se_reduction: 1,
            head_dim: HEAD_DIM,
            classifier_hidden: 1280,
            num_classes: 1000,
        }
    }

    fn valid_names() -> String {
        Self::ALL.map(Variant::name).join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase();
        let key = key.strip_prefix("PATNET-").unwrap_or(&key);
        Self::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::UnknownVariant {
                name: s.to_string(),
                valid: Self::valid_names(),
            })
    }
}

/// Static description of one network size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantConfig {
    pub variant: Variant,
    pub base_channels: usize,
    pub depths: [usize; 4],
    pub activation: Activation,
    /// `(numerator, denominator)` of the convolution-branch channel fraction.
    pub partial_ratio: (usize, usize),
    pub mlp_ratio: usize,
    /// Gate head width is `max(8, c_u / se_reduction)`.
    pub se_reduction: usize,
    pub head_dim: usize,
    pub classifier_hidden: usize,
    pub num_classes: usize,
}

impl VariantConfig {
    pub fn stage_widths(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.base_channels << i)
    }
}

/// Token mixer at the start of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixer {
    /// Partial conv + Gaussian-SE channel attention.
    PatCh,
    /// Partial conv + self-attention with relative position bias.
    PatSf,
    /// Partial conv, identity on untouched channels.
    PConv,
    /// Dense 3x3 convolution over all channels.
    DenseConv,
    /// Depthwise 3x3 convolution over all channels.
    DwConv,
}

impl Mixer {
    pub fn name(self) -> &'static str {
        match self {
            Mixer::PatCh => "pat_ch",
            Mixer::PatSf => "pat_sf",
            Mixer::PConv => "pconv",
            Mixer::DenseConv => "conv",
            Mixer::DwConv => "dwconv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSpec {
    pub width: usize,
    pub depth: usize,
    pub mixer: Mixer,
    /// Channels routed to the mixer's convolution branch (partial mixers only).
    pub mixer_cp: usize,
    /// `Some(c_p)` when the block ends in a spatial-attention gate that leaves
    /// the first `c_p` channels ungated.
    pub spatial_gate: Option<usize>,
    pub mlp_hidden: usize,
}

/// One substitution from the ablation studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Channel attention over all channels, no convolution branch.
    FullCh,
    /// Spatial gate over all channels.
    FullSp,
    /// Self-attention over all channels, no convolution branch.
    FullSf,
    /// Channel-attention mixers become partial convolutions.
    NoPatch,
    /// Blocks end with the plain MLP.
    NoPatsp,
    /// Self-attention mixers become channel-attention mixers (block v1).
    NoPatsf,
    /// Channel-attention mixers become dense 3x3 convolutions.
    ConvDense,
    /// Channel-attention mixers become depthwise 3x3 convolutions, with the
    /// MLP widened by half to compensate.
    ConvDw,
    /// Stage depths `(2, 2, 8, 2)`.
    Depths2284,
}

impl Ablation {
    pub const ALL: [Ablation; 9] = [
        Ablation::FullCh,
        Ablation::FullSp,
        Ablation::FullSf,
        Ablation::NoPatch,
        Ablation::NoPatsp,
        Ablation::NoPatsf,
        Ablation::ConvDense,
        Ablation::ConvDw,
        Ablation::Depths2284,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::FullCh => "full_ch",
            Ablation::FullSp => "full_sp",
            Ablation::FullSf => "full_sf",
            Ablation::NoPatch => "no_patch",
            Ablation::NoPatsp => "no_patsp",
            Ablation::NoPatsf => "no_patsf",
            Ablation::ConvDense => "conv_dense",
            Ablation::ConvDw => "conv_dw",
            Ablation::Depths2284 => "depths_2284",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::UnknownAblation {
                name: s.to_string(),
                valid: Self::ALL.map(Ablation::name).join(", "),
            })
    }
}

/// Fully resolved layer structure of a network.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub ablations: Vec<Ablation>,
    pub in_channels: usize,
    /// `(H, W)` the relative position tables are sized for.
    pub input_size: (usize, usize),
    pub activation: Activation,
    pub stages: Vec<StageSpec>,
    pub se_reduction: usize,
    pub head_dim: usize,
    pub classifier_hidden: usize,
    pub num_classes: usize,
    pub bn_eps: f64,
}

/// Spec for a named variant at the canonical 224x224 input.
pub fn build_variant(name: &str) -> Result<ModelSpec> {
    Ok(ModelSpec::from_config(&name.parse::<Variant>()?.config()))
}

/// Applies one ablation substitution to a spec.
pub fn build_ablation(spec: &ModelSpec, mode: Ablation) -> Result<ModelSpec> {
    let mut out = spec.clone();
    for st in &mut out.stages {
        match (mode, st.mixer) {
            (Ablation::FullCh, Mixer::PatCh) | (Ablation::FullSf, Mixer::PatSf) => st.mixer_cp = 0,
            (Ablation::FullSp, _) => st.spatial_gate = st.spatial_gate.map(|_| 0),
            (Ablation::NoPatch, Mixer::PatCh) => st.mixer = Mixer::PConv,
            (Ablation::NoPatsp, _) => st.spatial_gate = None,
            (Ablation::NoPatsf, Mixer::PatSf) => st.mixer = Mixer::PatCh,
            (Ablation::ConvDense, Mixer::PatCh) => {
                st.mixer = Mixer::DenseConv;
                st.mixer_cp = st.width;
            }
            (Ablation::ConvDw, Mixer::PatCh) => {
                st.mixer = Mixer::DwConv;
                st.mixer_cp = st.width;
                st.mlp_hidden = st.mlp_hidden * 3 / 2;
            }
            _ => {}
        }
    }
    if mode == Ablation::Depths2284 {
        for (st, d) in out.stages.iter_mut().zip([2, 2, 8, 2]) {
            st.depth = d;
        }
    }
    out.ablations.push(mode);
    out.validate()?;
    Ok(out)
}

impl ModelSpec {
    pub fn from_config(cfg: &VariantConfig) -> Self {
        let (num, den) = cfg.partial_ratio;
        let stages = cfg
            .stage_widths()
            .iter()
            .zip(cfg.depths)
            .enumerate()
            .map(|(i, (&width, depth))| StageSpec {
                width,
                depth,
                mixer: if i == 3 { Mixer::PatSf } else { Mixer::PatCh },
                mixer_cp: width * num / den,
                spatial_gate: Some(width * num / den),
                mlp_hidden: width * cfg.mlp_ratio,
            })
            .collect();
        Self {
            variant: cfg.variant,
            ablations: Vec::new(),
            in_channels: 3,
            input_size: (224, 224),
            activation: cfg.activation,
            stages,
            se_reduction: cfg.se_reduction,
            head_dim: cfg.head_dim,
            classifier_hidden: cfg.classifier_hidden,
            num_classes: cfg.num_classes,
            bn_eps: BN_EPS,
        }
    }

    /// Same network with position tables sized for an `h x w` input.
    pub fn with_input_size(mut self, h: usize, w: usize) -> Result<Self> {
        check_input_size(h, w)?;
        self.input_size = (h, w);
        Ok(self)
    }

    /// Human-readable name such as `T2` or `T2+no_patch+no_patsp`.
    pub fn label(&self) -> String {
        std::iter::once(self.variant.name())
            .chain(self.ablations.iter().map(|a| a.name()))
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn stem_width(&self) -> usize {
        self.stages[0].width
    }

    pub fn final_width(&self) -> usize {
        self.stages.last().map_or(0, |s| s.width)
    }

    /// Spatial extent seen by stage `i` (0-based) for an `h x w` input.
    pub fn stage_extent(&self, i: usize, (h, w): (usize, usize)) -> (usize, usize) {
        (h >> (2 + i), w >> (2 + i))
    }

    pub fn heads(&self, c_u: usize) -> usize {
        c_u / self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        check_input_size(self.input_size.0, self.input_size.1)?;
        if self.stages.len() != 4 {
            return Err(Error::InvalidArgument("a network has exactly four stages".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.mixer_cp > st.width || st.spatial_gate.is_some_and(|cp| cp > st.width) {
                return Err(Error::InvalidArgument(format!(
                    "stage {}: partial channels exceed width {}",
                    i + 1,
                    st.width
                )));
            }
            if st.mixer == Mixer::PatSf {
                let c_u = st.width - st.mixer_cp;
                if c_u == 0 || c_u % self.head_dim != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "stage {}: {c_u} attention channels are not a multiple of head width {}",
                        i + 1,
                        self.head_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::InvalidArgument(format!(
            "input size {h}x{w} must be a positive multiple of 32 on both sides"
        )));
    }
    Ok(())
}

/// How a parameter tensor is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Standard normal scaled by `1 / sqrt(fan_in)`.
    Normal { fan_in: usize },
    Zeros,
    Ones,
}

/// One named tensor a network of a given spec owns.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Batch-norm running statistics are stored but not learned.
    pub learnable: bool,
}

impl ParamSlot {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameter and multiply-accumulate totals of one layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    /// 0 for the stem, 1..=4 for the stages, 5 for the classifier.
    pub stage: usize,
    pub params: u64,
    pub macs: u64,
}

/// Walks a spec in execution order, emitting parameter slots and costs.
struct Walker {
    fused: bool,
    slots: Vec<ParamSlot>,
    costs: Vec<LayerCost>,
    stage: usize,
}

impl Walker {
    fn tensor(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        self.slots.push(ParamSlot {
            name: name.to_string(),
            shape,
            init,
            learnable: !(name.ends_with("running_mean") || name.ends_with("running_var")),
        });
    }

    fn cost(&mut self, name: &str, params: usize, macs: usize) {
        self.costs.push(LayerCost {
            name: name.to_string(),
            stage: self.stage,
            params: params as u64,
            macs: macs as u64,
        });
    }

    fn conv(&mut self, name: &str, out: usize, inp_per_group: usize, k: usize, bias: bool) {
        let fan_in = inp_per_group * k * k;
        self.tensor(&format!("{name}.weight"), vec![out, inp_per_group, k, k], Init::Normal { fan_in });
        if bias {
            self.tensor(&format!("{name}.bias"), vec![out], Init::Zeros);
        }
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        self.tensor(&format!("{name}.weight"), vec![out, inp], Init::Normal { fan_in: inp });
        self.tensor(&format!("{name}.bias"), vec![out], Init::Zeros);
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.tensor(&format!("{name}.weight"), vec![c], Init::Ones);
        self.tensor(&format!("{name}.bias"), vec![c], Init::Zeros);
        self.tensor(&format!("{name}.running_mean"), vec![c], Init::Zeros);
        self.tensor(&format!("{name}.running_var"), vec![c], Init::Ones);
    }

    /// Convolution followed by batch norm, or the folded convolution with bias.
    fn conv_bn(&mut self, name: &str, out: usize, inp: usize, k: usize, positions: usize) {
        let before = self.learnable_count();
        self.conv(&format!("{name}.conv"), out, inp, k, self.fused);
        if !self.fused {
            self.bn(&format!("{name}.bn"), out);
        }
        let params = self.learnable_count() - before;
        self.cost(name, params, positions * out * inp * k * k);
    }

    fn learnable_count(&self) -> usize {
        self.slots.iter().filter(|s| s.learnable).map(ParamSlot::numel).sum()
    }
}

impl ModelSpec {
    /// Every parameter tensor of the unfused (`fused = false`) or fused network,
    /// in execution order.
    pub fn param_layout(&self, fused: bool) -> Vec<ParamSlot> {
        self.walk(fused, self.input_size).slots
    }

    /// Per-layer parameter and MAC counts for an `h x w` input.
    pub fn layer_costs(&self, hw: (usize, usize), fused: bool) -> Vec<LayerCost> {
        self.walk(fused, hw).costs
    }

    fn walk(&self, fused: bool, (h, w): (usize, usize)) -> Walker {
        let mut wk = Walker {
            fused,
            slots: Vec::new(),
            costs: Vec::new(),
            stage: 0,
        };
        let c0 = self.stem_width();
        let (h1, w1) = self.stage_extent(0, (h, w));
        wk.conv_bn("embed", c0, self.in_channels, 4, h1 * w1);

        let (th, tw) = self.stage_extent(3, self.input_size);
        for (i, st) in self.stages.iter().enumerate() {
            wk.stage = i + 1;
            let c = st.width;
            let (sh, sw) = self.stage_extent(i, (h, w));
            let hw = sh * sw;
            if i > 0 {
                let prev = self.stages[i - 1].width;
                wk.conv_bn(&format!("stage{}.merge", i + 1), c, prev, 2, hw);
            }
            for b in 0..st.depth {
                let prefix = format!("stage{}.block{}", i + 1, b + 1);
                self.walk_block(&mut wk, &prefix, st, hw, (th, tw));
            }
        }

        wk.stage = 5;
        let (cf, hid, classes) = (self.final_width(), self.classifier_hidden, self.num_classes);
        let before = wk.learnable_count();
        wk.conv("head.conv", hid, cf, 1, false);
        wk.linear("head.fc", classes, hid);
        let params = wk.learnable_count() - before;
        wk.cost("head", params, cf * hid + hid * classes);
        wk
    }

    fn walk_block(
        &self,
        wk: &mut Walker,
        prefix: &str,
        st: &StageSpec,
        hw: usize,
        table_extent: (usize, usize),
    ) {
        let c = st.width;
        let cp = st.mixer_cp;
        let cu = c - cp;
        let before = wk.learnable_count();
        let macs = match st.mixer {
            Mixer::PatCh => {
                if cp > 0 {
                    wk.conv(&format!("{prefix}.patch.conv3"), cp, cp, 3, false);
                }
                let hidden = se_hidden(cu, self.se_reduction);
                wk.linear(&format!("{prefix}.patch.se.fc1"), hidden, 2 * cu);
                wk.linear(&format!("{prefix}.patch.se.fc2"), cu, hidden);
                hw * cp * cp * 9 + hidden * 2 * cu + cu * hidden + hw * cu
            }
            Mixer::PatSf => {
                if cp > 0 {
                    wk.conv(&format!("{prefix}.patsf.conv3"), cp, cp, 3, false);
                }
                for proj in ["q", "k", "v", "o"] {
                    wk.linear(&format!("{prefix}.patsf.{proj}"), cu, cu);
                }
                let (th, tw) = table_extent;
                wk.tensor(
                    &format!("{prefix}.patsf.rpe"),
                    vec![self.heads(cu), 2 * th - 1, 2 * tw - 1],
                    Init::Zeros,
                );
                hw * cp * cp * 9 + 4 * hw * cu * cu + 2 * hw * hw * cu
            }
            Mixer::PConv => {
                if cp > 0 {
                    wk.conv(&format!("{prefix}.pconv.conv3"), cp, cp, 3, false);
                }
                hw * cp * cp * 9
            }
            Mixer::DenseConv => {
                wk.conv(&format!("{prefix}.conv"), c, c, 3, false);
                hw * c * c * 9
            }
            Mixer::DwConv => {
                wk.conv(&format!("{prefix}.dwconv"), c, 1, 3, false);
                hw * c * 9
            }
        };
        let params = wk.learnable_count() - before;
        wk.cost(&format!("{prefix}.{}", st.mixer.name()), params, macs);

        let before = wk.learnable_count();
        let hid = st.mlp_hidden;
        wk.conv(&format!("{prefix}.mlp.fc1"), hid, c, 1, wk.fused);
        if !wk.fused {
            wk.bn(&format!("{prefix}.mlp.bn"), hid);
        }
        let merged = wk.fused && st.spatial_gate.is_some();
        let fc2_out = if merged { c + 1 } else { c };
        wk.conv(&format!("{prefix}.mlp.fc2"), fc2_out, hid, 1, merged);
        let params = wk.learnable_count() - before;
        wk.cost(&format!("{prefix}.mlp"), params, hw * c * hid + hw * hid * fc2_out);

        if let Some(gate_cp) = st.spatial_gate {
            let before = wk.learnable_count();
            let mut macs = hw * (c - gate_cp);
            if !wk.fused {
                wk.conv(&format!("{prefix}.patsp.map"), 1, c, 1, true);
                macs += hw * c;
            }
            let params = wk.learnable_count() - before;
            wk.cost(&format!("{prefix}.pat_sp"), params, macs);
        }
    }
}

/// Learnable scalar count of the unfused network, batch-norm `gamma`/`beta`
/// and position tables included, running statistics excluded.
pub fn count_params(spec: &ModelSpec) -> u64 {
    spec.param_layout(false)
        .iter()
        .filter(|s| s.learnable)
        .map(|s| s.numel() as u64)
        .sum()
}

/// Multiply-accumulate count of the unfused network for an `h x w` input.
pub fn count_flops(spec: &ModelSpec, hw: (usize, usize)) -> u64 {
    spec.layer_costs(hw, false).iter().map(|c| c.macs).sum()
}

/// Multiply-accumulate count after batch-norm folding and gate merging.
pub fn count_flops_fused(spec: &ModelSpec, hw: (usize, usize)) -> u64 {
    spec.layer_costs(hw, true).iter().map(|c| c.macs).sum()
}

use super::spec::{Mixer, ModelSpec, StageSpec};
use super::store::{ParamStore, ParamTensor};
use crate::blocks::{
    apply_spatial_gate, pat_ch_forward, pat_sf_forward, pat_sp_forward, pconv_forward, Linear,
    PartialSplit, PatChParams, PatSfParams, PatSpParams, RelPosBias,
};
use crate::error::{Error, Result};
use crate::tensor::{
    activation_in_place, batch_norm_infer, conv2d, global_avg_pool, Activation, BnParams, ConvParams, Matrix, Tensor4,
};

/// Convolution optionally followed by inference batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: ConvParams,
    /// `None` once folded into `conv`.
    pub bn: Option<BnParams>,
}

impl ConvBn {
    pub fn apply(&self, x: &Tensor4) -> Result<Tensor4> {
        let y = conv2d(x, &self.conv)?;
        match &self.bn {
            Some(bn) => batch_norm_infer(&y, bn),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MixerParams {
    PatCh(PatChParams),
    PatSf(PatSfParams),
    PConv(Option<ConvParams>),
    Dense(ConvParams),
    Dw(ConvParams),
}

/// The spatial gate closing a block.
#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    None,
    /// Standalone `C -> 1` map convolution.
    Separate(PatSpParams),
    /// Map convolution merged into the last MLP convolution as output `C`.
    Merged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub mixer: MixerParams,
    pub mixer_split: PartialSplit,
    pub fc1: ConvBn,
    pub fc2: ConvParams,
    pub gate: Gate,
    pub gate_split: PartialSplit,
}

impl BlockParams {
    /// One block including its residual connections.
    pub fn forward(&self, x: &Tensor4, act: Activation) -> Result<Tensor4> {
        match &self.mixer {
            MixerParams::PatSf(p) => {
                let mut y1 = pat_sf_forward(x, p, self.mixer_split)?;
                y1.add_assign(x)?;
                let mut y = self.mlp_gate(&y1, act)?;
                y.add_assign(&y1)?;
                Ok(y)
            }
            mixer => {
                let m = match mixer {
                    MixerParams::PatCh(p) => pat_ch_forward(x, p, self.mixer_split)?,
                    MixerParams::PConv(c) => pconv_forward(x, c.as_ref(), self.mixer_split)?,
                    MixerParams::Dense(c) | MixerParams::Dw(c) => conv2d(x, c)?,
                    MixerParams::PatSf(_) => unreachable!(),
                };
                let mut y = self.mlp_gate(&m, act)?;
                y.add_assign(x)?;
                Ok(y)
            }
        }
    }

    /// MLP followed by the spatial gate, without the residual.
    pub(crate) fn mlp_gate(&self, x: &Tensor4, act: Activation) -> Result<Tensor4> {
        let mut h = self.fc1.apply(x)?;
        activation_in_place(&mut h, act);
        let z = conv2d(&h, &self.fc2)?;
        match &self.gate {
            Gate::None => Ok(z),
            Gate::Separate(sp) => pat_sp_forward(&z, sp, self.gate_split),
            Gate::Merged => {
                let (mut y, logits) = split_last_channel(&z)?;
                apply_spatial_gate(&mut y, &logits, self.gate_split)?;
                Ok(y)
            }
        }
    }
}

/// Separates the trailing channel of `z` as an `n*h*w` map.
fn split_last_channel(z: &Tensor4) -> Result<(Tensor4, Vec<f32>)> {
    let c = z.c() - 1;
    let plane = z.spatial();
    let mut body = Vec::with_capacity(z.n() * c * plane);
    let mut last = Vec::with_capacity(z.n() * plane);
    for n in 0..z.n() {
        let s = z.sample(n);
        body.extend_from_slice(&s[..c * plane]);
        last.extend_from_slice(&s[c * plane..]);
    }
    Ok((Tensor4::from_vec(z.n(), c, z.h(), z.w(), body)?, last))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    /// Stride-2 downsampling, absent in the first stage.
    pub merge: Option<ConvBn>,
    pub blocks: Vec<BlockParams>,
}

/// A network with typed parameters, ready for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub(crate) spec: ModelSpec,
    pub(crate) fused: bool,
    pub(crate) stem: ConvBn,
    pub(crate) stages: Vec<StageParams>,
    pub(crate) head_conv: ConvParams,
    pub(crate) head_fc: Linear,
}

impl Network {
    /// Takes ownership of `store`, which must hold exactly the unfused or the
    /// fused layout of `spec`.
    pub fn from_store(spec: &ModelSpec, store: ParamStore) -> Result<Self> {
        spec.validate()?;
        let fused = store.looks_fused();
        store.check_layout(&spec.param_layout(fused))?;
        let mut t = Taker { store, eps: spec.bn_eps as f32 };
        let stem = t.conv_bn("embed", 4, fused)?;
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (i, st) in spec.stages.iter().enumerate() {
            let merge = if i > 0 {
                Some(t.conv_bn(&format!("stage{}.merge", i + 1), 2, fused)?)
            } else {
                None
            };
            let blocks = (0..st.depth)
                .map(|b| t.block(&format!("stage{}.block{}", i + 1, b + 1), st, fused))
                .collect::<Result<_>>()?;
            stages.push(StageParams { merge, blocks });
        }
        let head_conv = t.conv("head.conv", 1, 0, 1, false)?;
        let head_fc = t.linear("head.fc")?;
        Ok(Self {
            spec: spec.clone(),
            fused,
            stem,
            stages,
            head_conv,
            head_fc,
        })
    }

    /// Inverse of [`Network::from_store`].
    pub fn into_store(self) -> ParamStore {
        let mut g = Giver::default();
        g.conv_bn("embed", self.stem);
        for (i, stage) in self.stages.into_iter().enumerate() {
            if let Some(m) = stage.merge {
                g.conv_bn(&format!("stage{}.merge", i + 1), m);
            }
            for (b, block) in stage.blocks.into_iter().enumerate() {
                g.block(&format!("stage{}.block{}", i + 1, b + 1), block);
            }
        }
        g.conv("head.conv", self.head_conv);
        g.linear("head.fc", self.head_fc);
        g.store
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[StageParams] {
        &self.stages
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    /// Class logits, `n x num_classes`.
    pub fn forward(&self, x: &Tensor4) -> Result<Matrix> {
        self.check_input(x)?;
        let act = self.spec.activation;
        let mut h = self.stem.apply(x)?;
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                h = m.apply(&h)?;
            }
            for block in &stage.blocks {
                h = block.forward(&h, act)?;
            }
        }
        let pooled = global_avg_pool(&h);
        let z = conv2d(&pooled, &self.head_conv)?;
        let classes = self.head_fc.out_features();
        let mut logits = Matrix::zeros(x.n(), classes);
        for n in 0..x.n() {
            let feat: Vec<f32> = z.sample(n).iter().map(|&v| act.apply(v)).collect();
            logits.data_mut()[n * classes..(n + 1) * classes]
                .copy_from_slice(&self.head_fc.apply_vec(&feat));
        }
        Ok(logits)
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.c() != self.spec.in_channels {
            return Err(Error::shape(format!(
                "input channel dimension c = {} does not match the network's {} input channels",
                x.c(),
                self.spec.in_channels
            )));
        }
        if x.n() == 0 || x.h() % 32 != 0 || x.w() % 32 != 0 || x.h() == 0 || x.w() == 0 {
            return Err(Error::shape(format!(
                "input {}x{} (batch {}) must be non-empty with sides divisible by 32",
                x.h(),
                x.w(),
                x.n()
            )));
        }
        let has_attention = self.spec.stages.iter().any(|s| s.mixer == Mixer::PatSf);
        if has_attention && (x.h(), x.w()) != self.spec.input_size {
            return Err(Error::shape(format!(
                "input {}x{} does not match the {}x{} the position tables were built for",
                x.h(),
                x.w(),
                self.spec.input_size.0,
                self.spec.input_size.1
            )));
        }
        Ok(())
    }
}

struct Taker {
    store: ParamStore,
    eps: f32,
}

impl Taker {
    fn raw(&mut self, name: &str) -> Result<ParamTensor> {
        self.store
            .remove(name)
            .ok_or_else(|| Error::Store(format!("missing tensor `{name}`")))
    }

    fn conv(&mut self, name: &str, stride: usize, pad: usize, groups: usize, bias: bool) -> Result<ConvParams> {
        let w = self.raw(&format!("{name}.weight"))?;
        let [o, i, kh, kw] = <[usize; 4]>::try_from(w.shape.as_slice())
            .map_err(|_| Error::Store(format!("`{name}.weight` is not 4-d")))?;
        let weight = Tensor4::from_vec(o, i, kh, kw, w.data)?;
        let bias = if bias {
            Some(self.raw(&format!("{name}.bias"))?.data)
        } else {
            None
        };
        ConvParams::new(weight, bias, stride, pad, groups)
    }

    fn linear(&mut self, name: &str) -> Result<Linear> {
        let w = self.raw(&format!("{name}.weight"))?;
        let [o, i] = <[usize; 2]>::try_from(w.shape.as_slice())
            .map_err(|_| Error::Store(format!("`{name}.weight` is not 2-d")))?;
        Linear::new(Matrix::from_vec(o, i, w.data)?, self.raw(&format!("{name}.bias"))?.data)
    }

    fn bn(&mut self, name: &str) -> Result<BnParams> {
        BnParams::new(
            self.raw(&format!("{name}.weight"))?.data,
            self.raw(&format!("{name}.bias"))?.data,
            self.raw(&format!("{name}.running_mean"))?.data,
            self.raw(&format!("{name}.running_var"))?.data,
            self.eps,
        )
    }

    fn conv_bn(&mut self, name: &str, stride: usize, fused: bool) -> Result<ConvBn> {
        let conv = self.conv(&format!("{name}.conv"), stride, 0, 1, fused)?;
        let bn = if fused {
            None
        } else {
            Some(self.bn(&format!("{name}.bn"))?)
        };
        Ok(ConvBn { conv, bn })
    }

    fn conv3(&mut self, name: &str, cp: usize) -> Result<Option<ConvParams>> {
        if cp == 0 {
            return Ok(None);
        }
        self.conv(name, 1, 1, 1, false).map(Some)
    }

    fn block(&mut self, prefix: &str, st: &StageSpec, fused: bool) -> Result<BlockParams> {
        let c = st.width;
        let mixer_split = PartialSplit::new(c, st.mixer_cp)?;
        let mixer = match st.mixer {
            Mixer::PatCh => MixerParams::PatCh(PatChParams {
                conv3: self.conv3(&format!("{prefix}.patch.conv3"), st.mixer_cp)?,
                fc1: self.linear(&format!("{prefix}.patch.se.fc1"))?,
                fc2: self.linear(&format!("{prefix}.patch.se.fc2"))?,
            }),
            Mixer::PatSf => {
                let conv3 = self.conv3(&format!("{prefix}.patsf.conv3"), st.mixer_cp)?;
                let q = self.linear(&format!("{prefix}.patsf.q"))?;
                let k = self.linear(&format!("{prefix}.patsf.k"))?;
                let v = self.linear(&format!("{prefix}.patsf.v"))?;
                let o = self.linear(&format!("{prefix}.patsf.o"))?;
                let rpe = self.raw(&format!("{prefix}.patsf.rpe"))?;
                let heads = rpe.shape[0];
                let rpe = RelPosBias {
                    heads,
                    h: rpe.shape[1].div_ceil(2),
                    w: rpe.shape[2].div_ceil(2),
                    table: rpe.data,
                };
                MixerParams::PatSf(PatSfParams { conv3, q, k, v, o, heads, rpe })
            }
            Mixer::PConv => MixerParams::PConv(self.conv3(&format!("{prefix}.pconv.conv3"), st.mixer_cp)?),
            Mixer::DenseConv => MixerParams::Dense(self.conv(&format!("{prefix}.conv"), 1, 1, 1, false)?),
            Mixer::DwConv => MixerParams::Dw(self.conv(&format!("{prefix}.dwconv"), 1, 1, c, false)?),
        };
        let fc1 = ConvBn {
            conv: self.conv(&format!("{prefix}.mlp.fc1"), 1, 0, 1, fused)?,
            bn: if fused {
                None
            } else {
                Some(self.bn(&format!("{prefix}.mlp.bn"))?)
            },
        };
        let merged = fused && st.spatial_gate.is_some();
        let fc2 = self.conv(&format!("{prefix}.mlp.fc2"), 1, 0, 1, merged)?;
        let gate = match st.spatial_gate {
            None => Gate::None,
            Some(_) if fused => Gate::Merged,
            Some(_) => Gate::Separate(PatSpParams {
                map: self.conv(&format!("{prefix}.patsp.map"), 1, 0, 1, true)?,
            }),
        };
        let gate_split = PartialSplit::new(c, st.spatial_gate.unwrap_or(c))?;
        Ok(BlockParams {
            mixer,
            mixer_split,
            fc1,
            fc2,
            gate,
            gate_split,
        })
    }
}

#[derive(Default)]
struct Giver {
    store: ParamStore,
}

impl Giver {
    fn put(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) {
        self.store.insert(name, ParamTensor { shape, data });
    }

    fn conv(&mut self, name: &str, p: ConvParams) {
        let shape = p.weight.shape().to_vec();
        self.put(format!("{name}.weight"), shape, p.weight.into_vec());
        if let Some(b) = p.bias {
            self.put(format!("{name}.bias"), vec![b.len()], b);
        }
    }

    fn linear(&mut self, name: &str, l: Linear) {
        let shape = vec![l.weight.rows(), l.weight.cols()];
        self.put(format!("{name}.weight"), shape, l.weight.into_vec());
        self.put(format!("{name}.bias"), vec![l.bias.len()], l.bias);
    }

    fn bn(&mut self, name: &str, p: BnParams) {
        let c = p.channels();
        self.put(format!("{name}.weight"), vec![c], p.gamma);
        self.put(format!("{name}.bias"), vec![c], p.beta);
        self.put(format!("{name}.running_mean"), vec![c], p.running_mean);
        self.put(format!("{name}.running_var"), vec![c], p.running_var);
    }

    fn conv_bn(&mut self, name: &str, p: ConvBn) {
        self.conv(&format!("{name}.conv"), p.conv);
        if let Some(bn) = p.bn {
            self.bn(&format!("{name}.bn"), bn);
        }
    }

    fn block(&mut self, prefix: &str, b: BlockParams) {
        match b.mixer {
            MixerParams::PatCh(p) => {
                if let Some(c) = p.conv3 {
                    self.conv(&format!("{prefix}.patch.conv3"), c);
                }
                self.linear(&format!("{prefix}.patch.se.fc1"), p.fc1);
                self.linear(&format!("{prefix}.patch.se.fc2"), p.fc2);
            }
            MixerParams::PatSf(p) => {
                if let Some(c) = p.conv3 {
                    self.conv(&format!("{prefix}.patsf.conv3"), c);
                }
                self.linear(&format!("{prefix}.patsf.q"), p.q);
                self.linear(&format!("{prefix}.patsf.k"), p.k);
                self.linear(&format!("{prefix}.patsf.v"), p.v);
                self.linear(&format!("{prefix}.patsf.o"), p.o);
                let shape = vec![p.rpe.heads, 2 * p.rpe.h - 1, 2 * p.rpe.w - 1];
                self.put(format!("{prefix}.patsf.rpe"), shape, p.rpe.table);
            }
            MixerParams::PConv(c) => {
                if let Some(c) = c {
                    self.conv(&format!("{prefix}.pconv.conv3"), c);
                }
            }
            MixerParams::Dense(c) => self.conv(&format!("{prefix}.conv"), c),
            MixerParams::Dw(c) => self.conv(&format!("{prefix}.dwconv"), c),
        }
        self.conv(&format!("{prefix}.mlp.fc1"), b.fc1.conv);
        if let Some(bn) = b.fc1.bn {
            self.bn(&format!("{prefix}.mlp.bn"), bn);
        }
        self.conv(&format!("{prefix}.mlp.fc2"), b.fc2);
        if let Gate::Separate(sp) = b.gate {
            self.conv(&format!("{prefix}.patsp.map"), sp.map);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ablation, build_variant, init_params, Ablation};

    fn image(n: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::from_fn(n, 3, h, w, |a, c, y, x| {
            ((a * 7 + c * 13 + y * 3 + x * 5) as f32 * 0.017).sin()
        })
    }

    #[test]
    fn store_round_trip_is_lossless() {
        let spec = build_variant("T0").unwrap();
        let store = init_params(&spec, 3).unwrap();
        let net = Network::from_store(&spec, store.clone()).unwrap();
        assert!(!net.is_fused());
        assert_eq!(net.into_store(), store);
    }

    #[test]
    fn ablation_layouts_round_trip() {
        let base = build_variant("T0").unwrap();
        for mode in Ablation::ALL {
            let spec = build_ablation(&base, mode).unwrap();
            let store = init_params(&spec, 1).unwrap();
            let net = Network::from_store(&spec, store.clone()).unwrap();
            assert_eq!(net.into_store(), store, "{}", mode.name());
        }
    }

    #[test]
    fn forward_produces_finite_logits() {
        let spec = build_variant("T0").unwrap().with_input_size(64, 64).unwrap();
        let net = Network::from_store(&spec, init_params(&spec, 11).unwrap()).unwrap();
        let logits = net.forward(&image(2, 64, 64)).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (2, 1000));
        assert!(logits.data().iter().all(|v| v.is_finite()));
        // Samples are independent.
        let first = Tensor4::from_vec(1, 3, 64, 64, image(2, 64, 64).sample(0).to_vec()).unwrap();
        let single = net.forward(&first).unwrap();
        assert!(single.row(0).iter().zip(logits.row(0)).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let spec = build_variant("T0").unwrap().with_input_size(64, 64).unwrap();
        let net = Network::from_store(&spec, init_params(&spec, 11).unwrap()).unwrap();
        assert!(net.forward(&Tensor4::zeros(1, 4, 64, 64)).is_err());
        assert!(net.forward(&Tensor4::zeros(1, 3, 60, 64)).is_err());
        let err = net.forward(&Tensor4::zeros(1, 3, 96, 96)).unwrap_err().to_string();
        assert!(err.contains("96x96"), "{err}");
    }
}

//! Inference-time rewrites: batch-norm folding and merging the spatial-gate
//! map convolution into the preceding MLP convolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::blocks::{apply_spatial_gate, pat_sp_forward, PartialSplit, PatSpParams};
use crate::error::{Error, Result};
use crate::model::{ConvBn, Gate, ModelSpec, Network, ParamStore};
use crate::tensor::{conv2d, BnParams, ConvParams, Tensor4};

/// Folds an inference batch norm into the convolution that feeds it.
pub fn fold_bn(conv: &ConvParams, bn: &BnParams) -> Result<ConvParams> {
    if bn.channels() != conv.out_ch() {
        return Err(Error::shape(format!(
            "batch norm has {} channels but the convolution produces {}",
            bn.channels(),
            conv.out_ch()
        )));
    }
    let per_out = conv.weight.len() / conv.out_ch().max(1);
    let mut weight = conv.weight.clone();
    let mut bias = Vec::with_capacity(conv.out_ch());
    let eps = f64::from(bn.eps);
    for o in 0..conv.out_ch() {
        let scale = f64::from(bn.gamma[o]) / (f64::from(bn.running_var[o]) + eps).sqrt();
        for w in &mut weight.data_mut()[o * per_out..(o + 1) * per_out] {
            *w = (f64::from(*w) * scale) as f32;
        }
        let b = conv.bias.as_ref().map_or(0.0, |b| f64::from(b[o]));
        bias.push(((b - f64::from(bn.running_mean[o])) * scale + f64::from(bn.beta[o])) as f32);
    }
    ConvParams::new(weight, Some(bias), conv.stride, conv.padding, conv.groups)
}

/// Appends the composition `map_conv . mlp_conv2` to `mlp_conv2` as one extra
/// (last) output channel carrying the pre-activation spatial logit.
pub fn merge_patsp(mlp_conv2: &ConvParams, map_conv: &ConvParams) -> Result<ConvParams> {
    if !mlp_conv2.is_pointwise() || !map_conv.is_pointwise() {
        return Err(Error::shape("only 1x1 convolutions can be merged"));
    }
    let (c, hid) = (mlp_conv2.out_ch(), mlp_conv2.in_ch());
    if map_conv.in_ch() != c || map_conv.out_ch() != 1 {
        return Err(Error::shape(format!(
            "map convolution is {} -> {}, expected {c} -> 1",
            map_conv.in_ch(),
            map_conv.out_ch()
        )));
    }
    let w2 = mlp_conv2.weight.data();
    let m = map_conv.weight.data();
    let b2 = |o: usize| mlp_conv2.bias.as_ref().map_or(0.0, |b| f64::from(b[o]));
    let mut weight = Vec::with_capacity((c + 1) * hid);
    weight.extend_from_slice(w2);
    for i in 0..hid {
        let v: f64 = (0..c).map(|o| f64::from(m[o]) * f64::from(w2[o * hid + i])).sum();
        weight.push(v as f32);
    }
    let mut bias: Vec<f32> = (0..c).map(|o| b2(o) as f32).collect();
    let map_bias = map_conv.bias.as_ref().map_or(0.0, |b| f64::from(b[0]));
    bias.push(((0..c).map(|o| f64::from(m[o]) * b2(o)).sum::<f64>() + map_bias) as f32);
    ConvParams::pointwise(Tensor4::from_vec(c + 1, hid, 1, 1, weight)?, Some(bias))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteKind {
    FoldBn,
    MergePatSp,
}

/// One rewrite and the largest output change it caused on a probe batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rewrite {
    pub layer: String,
    pub kind: RewriteKind,
    pub max_abs_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionReport {
    pub rewrites: Vec<Rewrite>,
    pub tensors_before: usize,
    pub tensors_after: usize,
    pub tensors_removed: usize,
    /// Largest logit change on a probe batch at the spec's input size.
    pub end_to_end_max_abs_deviation: f64,
}

impl FusionReport {
    pub fn max_rewrite_deviation(&self) -> f64 {
        self.rewrites.iter().map(|r| r.max_abs_deviation).fold(0.0, f64::max)
    }
}

/// Spatial extent of the probe activations used for per-rewrite checks.
const PROBE_EXTENT: usize = 8;

struct Prober {
    rng: ChaCha8Rng,
    rewrites: Vec<Rewrite>,
}

impl Prober {
    fn input(&mut self, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        let data = (0..n * c * h * w).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        Tensor4::from_vec(n, c, h, w, data).expect("probe shape")
    }

    fn fold(&mut self, layer: &str, cb: &mut ConvBn) -> Result<()> {
        let Some(bn) = cb.bn.take() else {
            return Ok(());
        };
        let folded = fold_bn(&cb.conv, &bn)?;
        let x = self.input(2, cb.conv.in_ch(), PROBE_EXTENT, PROBE_EXTENT);
        let want = ConvBn { conv: cb.conv.clone(), bn: Some(bn) }.apply(&x)?;
        let got = conv2d(&x, &folded)?;
        self.record(layer, RewriteKind::FoldBn, &want, &got);
        cb.conv = folded;
        Ok(())
    }

    fn merge(&mut self, layer: &str, fc2: &mut ConvParams, sp: &PatSpParams, split: PartialSplit) -> Result<()> {
        let merged = merge_patsp(fc2, &sp.map)?;
        let h = self.input(2, fc2.in_ch(), PROBE_EXTENT, PROBE_EXTENT);
        let want = pat_sp_forward(&conv2d(&h, fc2)?, sp, split)?;
        let z = conv2d(&h, &merged)?;
        let c = fc2.out_ch();
        let plane = z.spatial();
        let mut body = Vec::with_capacity(z.n() * c * plane);
        let mut logits = Vec::with_capacity(z.n() * plane);
        for n in 0..z.n() {
            body.extend_from_slice(&z.sample(n)[..c * plane]);
            logits.extend_from_slice(&z.sample(n)[c * plane..]);
        }
        let mut got = Tensor4::from_vec(z.n(), c, z.h(), z.w(), body)?;
        apply_spatial_gate(&mut got, &logits, split)?;
        self.record(layer, RewriteKind::MergePatSp, &want, &got);
        *fc2 = merged;
        Ok(())
    }

    fn record(&mut self, layer: &str, kind: RewriteKind, want: &Tensor4, got: &Tensor4) {
        self.rewrites.push(Rewrite {
            layer: layer.to_string(),
            kind,
            max_abs_deviation: f64::from(want.max_abs_diff(got)),
        });
    }
}

/// Fused copy of `net` and the deviation each rewrite caused.
pub fn fuse_network(net: &Network, probe_seed: u64) -> Result<(Network, Vec<Rewrite>)> {
    if net.is_fused() {
        return Err(Error::AlreadyFused);
    }
    let mut out = net.clone();
    let mut p = Prober {
        rng: ChaCha8Rng::seed_from_u64(probe_seed),
        rewrites: Vec::new(),
    };
    p.fold("embed", &mut out.stem)?;
    for (i, stage) in out.stages.iter_mut().enumerate() {
        if let Some(m) = &mut stage.merge {
            p.fold(&format!("stage{}.merge", i + 1), m)?;
        }
        for (b, block) in stage.blocks.iter_mut().enumerate() {
            let prefix = format!("stage{}.block{}", i + 1, b + 1);
            p.fold(&format!("{prefix}.mlp.fc1"), &mut block.fc1)?;
            if let Gate::Separate(sp) = &block.gate {
                let sp = sp.clone();
                p.merge(&format!("{prefix}.mlp.fc2"), &mut block.fc2, &sp, block.gate_split)?;
                block.gate = Gate::Merged;
            }
        }
    }
    out.fused = true;
    Ok((out, p.rewrites))
}

/// Fuses an unfused store. The input store is left untouched.
pub fn fuse_model(params: &ParamStore, spec: &ModelSpec) -> Result<(ParamStore, FusionReport)> {
    if params.looks_fused() {
        return Err(Error::AlreadyFused);
    }
    let net = Network::from_store(spec, params.clone())?;
    let (fused, rewrites) = fuse_network(&net, 0x5eed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let (h, w) = spec.input_size;
    let data = (0..2 * 3 * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Tensor4::from_vec(2, 3, h, w, data)?;
    let end_to_end = net.forward(&x)?.max_abs_diff(&fused.forward(&x)?);

    let store = fused.into_store();
    let report = FusionReport {
        rewrites,
        tensors_before: params.len(),
        tensors_after: store.len(),
        tensors_removed: params.len() - store.len(),
        end_to_end_max_abs_deviation: f64::from(end_to_end),
    };
    Ok((store, report))
}

/// Replaces every batch norm's identity initialisation with plausible trained
/// statistics, so that folding is exercised with non-trivial values.
pub fn randomize_bn_stats(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in store.iter_mut() {
        if !name.contains(".bn.") {
            continue;
        }
        for v in &mut t.data {
            *v = if name.ends_with(".weight") {
                rng.random_range(0.5..1.5)
            } else if name.ends_with(".running_var") {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-0.2..0.2)
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(out: usize, inp: usize, k: usize, f: impl FnMut(usize, usize, usize, usize) -> f32) -> ConvParams {
        ConvParams::new(Tensor4::from_fn(out, inp, k, k, f), None, 1, k / 2, 1).unwrap()
    }

    #[test]
    fn identity_bn_leaves_conv_unchanged() {
        let c = conv(4, 3, 3, |o, i, y, x| (o * 27 + i * 9 + y * 3 + x) as f32 * 0.01 - 0.5);
        let folded = fold_bn(&c, &BnParams::identity(4, 0.0)).unwrap();
        assert_eq!(folded.weight, c.weight);
        assert_eq!(folded.bias, Some(vec![0.0; 4]));
    }

    #[test]
    fn zero_conv_takes_bn_shift() {
        let c = conv(2, 2, 1, |_, _, _, _| 0.0);
        let mut bn = BnParams::identity(2, 1e-5);
        bn.beta = vec![2.0, 2.0];
        assert_eq!(fold_bn(&c, &bn).unwrap().bias, Some(vec![2.0, 2.0]));
        assert!(fold_bn(&c, &BnParams::identity(3, 1e-5)).is_err());
    }

    #[test]
    fn zero_map_appends_bias_only_row() {
        let fc2 = conv(3, 5, 1, |o, i, _, _| (o * 5 + i) as f32);
        let map = ConvParams::pointwise(Tensor4::zeros(1, 3, 1, 1), Some(vec![0.7])).unwrap();
        let merged = merge_patsp(&fc2, &map).unwrap();
        assert_eq!(merged.out_ch(), 4);
        assert_eq!(&merged.weight.data()[15..], &[0.0; 5]);
        assert_eq!(merged.bias.as_ref().unwrap()[3], 0.7);
        assert_eq!(&merged.weight.data()[..15], fc2.weight.data());
    }

    #[test]
    fn selector_map_copies_first_row() {
        let fc2 = conv(3, 5, 1, |o, i, _, _| (o * 5 + i) as f32 * 0.3);
        let mut sel = vec![0.0; 3];
        sel[0] = 1.0;
        let map = ConvParams::pointwise(Tensor4::from_vec(1, 3, 1, 1, sel).unwrap(), Some(vec![0.0])).unwrap();
        let merged = merge_patsp(&fc2, &map).unwrap();
        assert_eq!(&merged.weight.data()[15..], &fc2.weight.data()[..5]);
    }

    #[test]
    fn non_pointwise_merge_is_rejected() {
        let fc2 = conv(3, 5, 3, |_, _, _, _| 1.0);
        let map = ConvParams::pointwise(Tensor4::zeros(1, 3, 1, 1), None).unwrap();
        assert!(merge_patsp(&fc2, &map).is_err());
    }
}

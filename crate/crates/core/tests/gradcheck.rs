mod common;

use common::{conv, normals, pat_ch, pat_sf, pat_sp, rng, tensor};
use patnet::blocks::PartialSplit;
use patnet::gradcheck::{
    block_vjp, conv2d_vjp, finite_diff_grad, gradcheck_block, gradcheck_block_with, linear_vjp,
    softmax_vjp, Block, BlockKind, GradcheckOptions, ProbeSizes,
};
use patnet::tensor::{conv2d, softmax_in_place, Tensor4};
use proptest::prelude::*;

#[test]
fn every_block_passes_for_five_seeds() {
    for kind in BlockKind::ALL {
        for seed in 0..5 {
            let r = gradcheck_block(kind, seed, &ProbeSizes::default_for(kind)).unwrap();
            assert!(r.pass, "{} seed {seed}: {:.3e}", kind.name(), r.max_rel_err());
            assert!(r.max_rel_err() < 1e-3);
            assert_eq!(r.entries[0].name, "input");
        }
    }
}

#[test]
fn f64_recomputation_meets_the_tight_tolerance() {
    for kind in BlockKind::ALL {
        for seed in 0..5 {
            let r = gradcheck_block_with(kind, seed, &ProbeSizes::default_for(kind), &GradcheckOptions::f64()).unwrap();
            assert!(r.max_rel_err() < 1e-6, "{} seed {seed}: {:.3e}", kind.name(), r.max_rel_err());
        }
    }
}

#[test]
fn injected_fault_is_caught() {
    for kind in BlockKind::ALL {
        let opts = GradcheckOptions { inject_fault: true, ..GradcheckOptions::f32() };
        let r = gradcheck_block_with(kind, 0, &ProbeSizes::default_for(kind), &opts).unwrap();
        assert!(!r.pass, "{}", kind.name());
    }
}

#[test]
fn pat_sf_probe_with_nine_tokens() {
    let sizes = ProbeSizes::default_for(BlockKind::PatSf);
    assert_eq!((sizes.heads, sizes.h * sizes.w), (2, 9));
    assert!(gradcheck_block(BlockKind::PatSf, 17, &sizes).unwrap().pass);
}

#[test]
fn oversized_probe_is_rejected() {
    let mut sizes = ProbeSizes::default_for(BlockKind::PatCh);
    sizes.h = 9;
    assert!(gradcheck_block(BlockKind::PatCh, 0, &sizes).is_err());
}

#[test]
fn finite_differences_basics() {
    let g = finite_diff_grad(|v| v[0] * v[0], &[3.0], 1e-4);
    assert!((g[0] - 6.0).abs() < 1e-7);
    let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-3);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn conv_input_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let x = tensor(&mut r, 1, 3, 4, 4).cast::<f64>();
    let p = conv(&mut r, 3, 2, 3, 1, true).cast::<f64>();
    let u = tensor(&mut r, 1, 2, 4, 4).cast::<f64>();
    let grads = conv2d_vjp(&x, &p, &u).unwrap();
    let num = finite_diff_grad(
        |v| {
            let xv = Tensor4::from_vec(1, 3, 4, 4, v.to_vec()).unwrap();
            conv2d(&xv, &p).unwrap().data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
        },
        x.data(),
        1e-5,
    );
    for (a, n) in grads.x.data().iter().zip(&num) {
        assert!((a - n).abs() / n.abs().max(1.0) < 1e-6);
    }
    // Bias gradient is the upstream summed per output channel.
    assert!((grads.bias[0] - u.data()[..16].iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let mut r = rng(2);
    let l = common::linear(&mut r, 3, 4, 1.0).cast::<f64>();
    let x: Vec<f64> = normals(&mut r, 4 * 5, 1.0).into_iter().map(f64::from).collect();
    let dy: Vec<f64> = normals(&mut r, 3 * 5, 1.0).into_iter().map(f64::from).collect();
    let g = linear_vjp(&l, &x, 5, &dy);
    let num = finite_diff_grad(|v| l.apply_cols(v, 5).iter().zip(&dy).map(|(a, b)| a * b).sum(), &x, 1e-5);
    for (a, n) in g.x.iter().zip(&num) {
        assert!((a - n).abs() < 1e-6);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut r = rng(3);
    let s = PartialSplit::new(8, 2).unwrap();
    let x = tensor(&mut r, 1, 8, 3, 3);
    let zero = Tensor4::zeros(1, 8, 3, 3);
    let blocks = [
        Block::PatCh(pat_ch(&mut r, 2, 6, 8)),
        Block::PatSp(pat_sp(&mut r, 8)),
        Block::PatSf(pat_sf(&mut r, 2, 6, 2, 3, 3)),
    ];
    for b in &blocks {
        let (gx, gp) = block_vjp(b, s, &x, &zero).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gp.iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn saturated_spatial_gate_has_no_map_gradient() {
    let mut r = rng(4);
    let s = PartialSplit::new(8, 2).unwrap();
    let mut p = pat_sp(&mut r, 8);
    p.map.weight = p.map.weight.map(|v| v * 0.01);
    p.map.bias = Some(vec![10.0]);
    let x = tensor(&mut r, 2, 8, 3, 3);
    let u = tensor(&mut r, 2, 8, 3, 3);
    let (_, gp) = block_vjp(&Block::PatSp(p), s, &x, &u).unwrap();
    for (name, g) in gp {
        assert!(g.iter().all(|&v| v == 0.0), "{name}");
    }
}

#[test]
fn conv_branch_has_no_gradient_into_untouched_channels() {
    let mut r = rng(5);
    let s = PartialSplit::new(8, 2).unwrap();
    let x = tensor(&mut r, 1, 8, 3, 3);
    // Upstream only on the conv-branch outputs.
    let u = Tensor4::from_fn(1, 8, 3, 3, |_, c, y, x| if c < 2 { (c + y + x) as f32 - 2.0 } else { 0.0 });
    for b in [Block::PatCh(pat_ch(&mut r, 2, 6, 8)), Block::PatSf(pat_sf(&mut r, 2, 6, 2, 3, 3))] {
        let (gx, _) = block_vjp(&b, s, &x, &u).unwrap();
        assert!(gx.data()[2 * 9..].iter().all(|&v| v == 0.0), "{:?}", b.kind());
        assert!(gx.data()[..2 * 9].iter().any(|&v| v != 0.0));
    }
}

proptest! {
    #[test]
    fn softmax_jacobian_annihilates_constants(len in 1usize..=16, seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut r = rng(seed);
        let mut a: Vec<f64> = normals(&mut r, len, 3.0).into_iter().map(f64::from).collect();
        softmax_in_place(&mut a);
        let da: Vec<f64> = normals(&mut r, len, 1.0).into_iter().map(f64::from).collect();
        let dx = softmax_vjp(&a, &da);
        prop_assert!(dx.iter().sum::<f64>().abs() < 1e-6);
        // Adding a constant to every upstream entry changes nothing.
        let shifted: Vec<f64> = da.iter().map(|v| v + shift).collect();
        let dx2 = softmax_vjp(&a, &shifted);
        for (p, q) in dx.iter().zip(&dx2) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }
}

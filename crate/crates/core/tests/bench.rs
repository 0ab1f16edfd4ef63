use patnet::fusion::fuse_network;
use patnet::io::{bench_network, bench_run, BenchConfig};
use patnet::model::{build_variant, init_params, Network};
use patnet::Error;

fn cfg(iters: usize, fused: bool) -> BenchConfig {
    BenchConfig { batch: 1, iters, warmup: 1, threads: 1, fused, seed: 0 }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn report_fields_are_consistent() {
    let spec = build_variant("T0").unwrap().with_input_size(64, 64).unwrap();
    let r = bench_run(&spec, &BenchConfig { batch: 2, threads: 2, ..cfg(6, false) }).unwrap();
    assert!(r.p95_latency_ms >= r.p50_latency_ms && r.p50_latency_ms >= 0.0);
    assert!(r.mean_latency_ms > 0.0 && r.images_per_sec > 0.0);
    assert_eq!((r.batch_size, r.thread_count, r.measured_iters, r.warmup_iters), (2, 2, 6, 1));
    assert!(!r.fused);
    assert_eq!(r.variant, "T0");
    let text = r.to_text();
    assert_eq!(text.lines().count(), 10);
    assert!(text.starts_with("variant"));
}

#[test]
fn zero_iterations_is_rejected() {
    let spec = build_variant("T0").unwrap().with_input_size(32, 32).unwrap();
    for bad in [cfg(0, false), BenchConfig { batch: 0, ..cfg(1, false) }, BenchConfig { threads: 0, ..cfg(1, false) }] {
        assert!(matches!(bench_run(&spec, &bad), Err(Error::InvalidArgument(_))));
    }
}

#[test]
fn smallest_variant_outpaces_largest() {
    let t0 = bench_run(&build_variant("T0").unwrap(), &cfg(2, false)).unwrap();
    let l = bench_run(&build_variant("L").unwrap(), &cfg(1, false)).unwrap();
    assert!(t0.images_per_sec > l.images_per_sec, "{} vs {}", t0.images_per_sec, l.images_per_sec);
}

#[test]
fn fused_t0_is_not_slower() {
    let spec = build_variant("T0").unwrap();
    let net = Network::from_store(&spec, init_params(&spec, 0).unwrap()).unwrap();
    let fused = fuse_network(&net, 0).unwrap().0;
    assert!(fused.is_fused());
    // Interleave paired runs so drift affects both sides alike.
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..5 {
        a.push(bench_network(&net, &cfg(3, false)).unwrap().p50_latency_ms);
        b.push(bench_network(&fused, &cfg(3, true)).unwrap().p50_latency_ms);
    }
    let (unfused, fused) = (median(a), median(b));
    assert!(fused <= 1.05 * unfused, "fused {fused:.2} ms vs unfused {unfused:.2} ms");
}

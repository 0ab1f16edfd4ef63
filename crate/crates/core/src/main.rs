use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use patnet::fusion::fuse_model;
use patnet::gradcheck::{gradcheck_block_with, BlockKind, GradcheckOptions, ProbeSizes};
use patnet::io::{bench_run, load_ppm, load_weights, preprocess, save_weights, BenchConfig};
use patnet::model::{
    build_ablation, build_variant, count_flops, count_flops_fused, count_params, identify_spec,
    init_params, Ablation, ModelSpec, Network,
};

#[derive(Parser)]
#[command(name = "patnet", version, about = "CPU inference and tooling for partial-attention networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter and multiply-accumulate breakdown of a variant.
    Summary {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
        /// Ablation substitution, repeatable.
        #[arg(long)]
        ablation: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Write seeded random weights for a variant.
    Init {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
    },
    /// Fold batch norms and merge spatial gates into an inference-only store.
    Fuse {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Classify a binary PPM image.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// One class name per line.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// Compare analytic block gradients with finite differences.
    Gradcheck {
        /// pat_ch, pat_sp or pat_sf; all three when omitted.
        #[arg(long)]
        block: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Analytic gradients in 64-bit with the tighter tolerance.
        #[arg(long)]
        f64: bool,
        #[arg(long)]
        json: bool,
    },
    /// Measure forward throughput on seeded random weights.
    Bench {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        fused: bool,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Returns `Ok(false)` when the command ran but its check failed.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Summary { variant, input_size, ablation, json } => {
            let mut spec = build_variant(&variant)?;
            for a in &ablation {
                spec = build_ablation(&spec, a.parse::<Ablation>()?)?;
            }
            let spec = spec.with_input_size(input_size, input_size)?;
            summary(&spec, json)?;
        }
        Command::Init { variant, seed, out, input_size } => {
            let spec = build_variant(&variant)?.with_input_size(input_size, input_size)?;
            let store = init_params(&spec, seed)?;
            save_weights(&store, &out)?;
            eprintln!("wrote {} tensors ({} values) to {}", store.len(), store.total_numel(), out.display());
        }
        Command::Fuse { weights, out, json } => {
            let store = load_weights(&weights)?;
            let (spec, _) = identify_spec(&store)?;
            let (fused, report) = fuse_model(&store, &spec)?;
            save_weights(&fused, &out)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("variant          {}", spec.label());
                println!("rewrites         {}", report.rewrites.len());
                for r in &report.rewrites {
                    println!("  {:<28} {:<13} {:.3e}", r.layer, serde_json::to_value(&r.kind)?.as_str().unwrap_or(""), r.max_abs_deviation);
                }
                println!("tensors          {} -> {} ({} removed)", report.tensors_before, report.tensors_after, report.tensors_removed);
                println!("max rewrite dev  {:.3e}", report.max_rewrite_deviation());
                println!("end-to-end dev   {:.3e}", report.end_to_end_max_abs_deviation);
            }
        }
        Command::Infer { weights, image, labels, topk } => infer(&weights, &image, labels.as_deref(), topk)?,
        Command::Gradcheck { block, seed, f64, json } => {
            let kinds = match block {
                Some(b) => vec![b.parse::<BlockKind>()?],
                None => BlockKind::ALL.to_vec(),
            };
            let opts = if f64 { GradcheckOptions::f64() } else { GradcheckOptions::f32() };
            let mut all_pass = true;
            let mut reports = Vec::new();
            for kind in kinds {
                let r = gradcheck_block_with(kind, seed, &ProbeSizes::default_for(kind), &opts)?;
                all_pass &= r.pass;
                if !json {
                    println!("{:<7} {}  max rel err {:.3e} (tolerance {:.0e})", kind.name(), if r.pass { "PASS" } else { "FAIL" }, r.max_rel_err(), opts.tolerance);
                    for e in &r.entries {
                        println!("  {:<14} {:>5} values  {:.3e}", e.name, e.numel, e.max_rel_err);
                    }
                }
                reports.push(r);
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            }
            return Ok(all_pass);
        }
        Command::Bench { variant, batch, iters, warmup, threads, fused, input_size, seed, json } => {
            let spec = build_variant(&variant)?.with_input_size(input_size, input_size)?;
            let report = bench_run(&spec, &BenchConfig { batch, iters, warmup, threads, fused, seed })?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_text());
            }
        }
    }
    Ok(true)
}

fn summary(spec: &ModelSpec, json: bool) -> Result<()> {
    let hw = spec.input_size;
    let costs = spec.layer_costs(hw, false);
    let params = count_params(spec);
    let macs = count_flops(spec, hw);
    let fused_macs = count_flops_fused(spec, hw);
    if json {
        let v = serde_json::json!({
            "variant": spec.label(),
            "input_size": [hw.0, hw.1],
            "params": params,
            "flops": macs,
            "fused_flops": fused_macs,
            "layers": costs,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    println!("PATNet-{}  input {}x{}  activation {}", spec.label(), hw.0, hw.1, spec.activation.name());
    println!("{:<8} {:>6} {:>6} {:>12} {:>14}", "part", "width", "depth", "params", "MACs");
    let part_name = |i: usize| match i {
        0 => "stem".to_string(),
        5 => "head".to_string(),
        i => format!("stage{i}"),
    };
    for part in 0..=5 {
        let (p, m) = costs
            .iter()
            .filter(|c| c.stage == part)
            .fold((0u64, 0u64), |(p, m), c| (p + c.params, m + c.macs));
        let (width, depth) = match part {
            1..=4 => (spec.stages[part - 1].width.to_string(), spec.stages[part - 1].depth.to_string()),
            0 => (spec.stem_width().to_string(), "-".into()),
            _ => (spec.classifier_hidden.to_string(), "-".into()),
        };
        println!("{:<8} {:>6} {:>6} {:>12} {:>14}", part_name(part), width, depth, p, m);
    }
    println!("params        {:.3} M ({params})", params as f64 / 1e6);
    println!("FLOPs (MACs)  {:.3} G ({macs})", macs as f64 / 1e9);
    println!("fused FLOPs   {:.3} G ({fused_macs})", fused_macs as f64 / 1e9);
    Ok(())
}

fn infer(weights: &Path, image: &Path, labels: Option<&Path>, topk: usize) -> Result<()> {
    let store = load_weights(weights)?;
    let (spec, _) = identify_spec(&store)?;
    let (h, w) = spec.input_size;
    if h != w {
        bail!("inference needs a square input size, the weights were built for {h}x{w}");
    }
    let names = match labels {
        Some(p) => Some(
            fs::read_to_string(p)
                .with_context(|| format!("reading labels {}", p.display()))?
                .lines()
                .map(str::to_string)
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    let x = preprocess(&load_ppm(image)?, h)?;
    let net = Network::from_store(&spec, store)?;
    let logits = net.forward(&x)?;
    let row = logits.row(0);
    if !row.iter().all(|v| v.is_finite()) {
        bail!("network produced non-finite logits");
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let denom: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    eprintln!("{} logits from PATNet-{}", row.len(), spec.label());
    for (rank, &id) in order.iter().take(topk).enumerate() {
        let label = names
            .as_ref()
            .and_then(|n| n.get(id))
            .map_or_else(|| format!("class_{id}"), Clone::clone);
        let prob = f64::from(row[id] - max).exp() / denom;
        println!("{:>2}  {:>4}  {:<24} logit {:>9.4}  prob {:.4}", rank + 1, id, label, row[id], prob);
    }
    Ok(())
}

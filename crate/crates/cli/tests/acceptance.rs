//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero when any
//! criterion fails or overruns its time budget.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use favit_cli::commands::{self, synthetic_image, METRICS_FILE};
use favit_cli::config::RunConfig;
use favit_core::bench::{self, count_attention_entries, measure, reduced_ratio, token_reduction, BenchOptions};
use favit_core::imaging::{patch_grid, rgb_to_lab, ImageRgb};
use favit_core::lla::{lla_attention, multi_head_attention, AttentionParams, AttentionTrace, LlaConfig, LlaParams, QuerySource};
use favit_core::model::{check_gradients, ModelConfig, Model, Prepared, Variant};
use favit_core::numerics::{FiniteDiff, ParamStore, Tape, Tensor};
use favit_core::slic::{slic_segment, SlicConfig, SuperpixelMap};
use favit_core::sppp::{assign_patches, compute_overlap, pool_embeddings, AssignMode, PoolMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn core<T>(r: favit_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn noise_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageRgb {
    ImageRgb::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// 224x224, P=4, K=16, majority assignment.
fn token_reduction_ratio() -> Outcome {
    let cfg = ModelConfig {
        image_height: 224,
        image_width: 224,
        d_model: 16,
        assign: AssignMode::Majority,
        ..ModelConfig::desk(Variant::SpppOnly)
    };
    ensure(cfg.superpixels == 16 && cfg.patch == 4, || "desk preset changed".into())?;
    let uniform = core(ImageRgb::filled(224, 224, [0.5; 3]))?;
    let r = core(token_reduction(&uniform, &cfg, 0))?;
    ensure(r.n == 3136 && r.s == 16, || format!("N={} S={}", r.n, r.s))?;
    ensure(r.ratio() == (38416, 1), || format!("ratio {:?}", r.ratio()))?;
    for seed in 0..3 {
        let img = core(synthetic_image(224, 224, seed).map_err(|e| favit_core::Error::Config(e.to_string())))?;
        let t = core(token_reduction(&img, &cfg, seed))?;
        ensure(t.n == 3136 && t.s <= 16, || format!("seed {seed}: N={} S={}", t.n, t.s))?;
        ensure(t.ratio() == reduced_ratio(3136 * 3136, (t.s * t.s) as u64), || {
            format!("seed {seed}: ratio {:?} with S={}", t.ratio(), t.s)
        })?;
    }
    Ok(format!("N=3136 S=16 grid/pooled entries {}/{} = 38416", r.grid_entries, r.pooled_entries))
}

fn complexity_shapes() -> Outcome {
    let mut checked = 0;
    for v in Variant::ALL {
        let cfg = ModelConfig::desk(v);
        let model = core(Model::build(&cfg, 1))?;
        let (n, l) = (cfg.patches(), cfg.latents);
        for seed in 0..8 {
            let img = synthetic_image(32, 32, seed).map_err(|e| e.to_string())?;
            let input = core(model.prepare(&img))?;
            let x = input.sequence_len();
            let s = x - 1;
            let per_head = match v {
                Variant::Baseline => (n + 1) * (n + 1),
                Variant::SpppOnly => (s + 1) * (s + 1),
                Variant::LlaOnly => l * (n + 1),
                Variant::SpppLla => l * (s + 1),
            } as u64;
            let mut tape = Tape::new();
            let trace = core(model.forward_trace(&mut tape, &[&input]))?;
            ensure(trace.attention[0].len() == cfg.layers, || format!("{v}: layer count"))?;
            for (layer, out) in trace.attention[0].iter().enumerate() {
                ensure(out.weights.len() == cfg.heads, || format!("{v}: head count"))?;
                for &w in &out.weights {
                    let t = tape.value(w);
                    let entries = (t.rows() * t.cols()) as u64;
                    ensure(entries == per_head, || {
                        format!("{v} layer {layer}: {entries} entries per head, expected {per_head}")
                    })?;
                }
            }
            let total = (cfg.layers * cfg.heads) as u64 * per_head;
            ensure(tape.counters().score_entries == total, || {
                format!("{v}: counter {} vs {total}", tape.counters().score_entries)
            })?;
            ensure(core(count_attention_entries(&model, &input))? == total, || format!("{v}: closed form"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} forwards, every layer and head exact"))
}

/// Noisy copies of one signal pooled through a real superpixel layout.
fn snr() -> Outcome {
    const TRIALS: usize = 10_000;
    const SIGMA: f64 = 0.5;
    let signal = [0.8, -1.2, 2.0, 0.1];
    let mut worst: f64 = 0.0;
    for m in [2usize, 4, 16] {
        for mode in [PoolMode::Mean, PoolMode::OverlapWeighted] {
            // a single region over a 2 x 2m image, P=2
            let map = core(SuperpixelMap::from_labels(2, 2 * m, &vec![0; 4 * m]))?;
            let grid = core(patch_grid(2, 2 * m, 2))?;
            let overlap = core(compute_overlap(&map, &grid))?;
            let assignment = core(assign_patches(&overlap, AssignMode::Majority))?;
            let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
            let noise = Normal::new(0.0, SIGMA).unwrap();
            let d = signal.len();
            let mut sum = vec![0.0; d];
            let mut sq = vec![0.0; d];
            for _ in 0..TRIALS {
                let data: Vec<f64> = (0..m).flat_map(|_| signal.map(|s| s + noise.sample(&mut rng))).collect();
                let pooled = core(pool_embeddings(&core(Tensor::matrix(m, d, data))?, &assignment, &overlap, mode))?;
                for k in 0..d {
                    let r = pooled.tokens.at(0, k) - signal[k];
                    sum[k] += r;
                    sq[k] += r * r;
                }
            }
            let expected = SIGMA * SIGMA / m as f64;
            for k in 0..d {
                let mean = sum[k] / TRIALS as f64;
                let var = (sq[k] - TRIALS as f64 * mean * mean) / (TRIALS as f64 - 1.0);
                let rel = (var - expected).abs() / expected;
                worst = worst.max(rel);
                ensure(rel < 0.05, || format!("m={m} {mode:?} coord {k}: variance {var:.5} vs {expected:.5}"))?;
                let se = (expected / TRIALS as f64).sqrt();
                ensure(mean.abs() < 4.0 * se, || format!("m={m} {mode:?} coord {k}: signal shifted by {mean}"))?;
            }
        }
    }
    Ok(format!("variance ratios within {:.2}% of 1/m", 100.0 * worst))
}

fn gradient_fidelity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for v in Variant::ALL {
        let cfg = ModelConfig::desk(v);
        let mut model = core(Model::build(&cfg, 11))?;
        let batch: Vec<Prepared> = (0..2)
            .map(|i| model.prepare(&synthetic_image(32, 32, 40 + i).unwrap()))
            .collect::<favit_core::Result<_>>()
            .map_err(|e| e.to_string())?;
        let report = core(check_gradients(&mut model, &batch, &[1, 7], FiniteDiff::Ridders(1e-2), 8))?;
        ensure(report.max_rel_err < 1e-4, || format!("{v}: {:?}", report.worst))?;
        worst = worst.max(report.max_rel_err);
        coords += report.coordinates;
    }
    Ok(format!("{coords} coordinates over 4 variants, max rel err {worst:.2e}"))
}

fn slic_partitions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut runs = 0;
    for i in 0..50u64 {
        let img = if i % 2 == 0 {
            noise_image(64, 64, &mut rng)
        } else {
            synthetic_image(64, 64, 500 + i).map_err(|e| e.to_string())?
        };
        let lab = rgb_to_lab(&img);
        for k in [2usize, 4, 16] {
            let cfg = SlicConfig::with_k(k);
            let map = core(slic_segment(&lab, &cfg))?;
            let r = map.regions();
            ensure(map.labels.len() == 64 * 64, || format!("image {i} K={k}: label count"))?;
            ensure(r >= 1 && r <= k, || format!("image {i} K={k}: R={r}"))?;
            let mut counts = vec![0usize; r];
            for &l in &map.labels {
                ensure(l < r, || format!("image {i} K={k}: label {l} >= R={r}"))?;
                counts[l] += 1;
            }
            ensure(counts == map.sizes && counts.iter().all(|&c| c > 0), || {
                format!("image {i} K={k}: sizes {:?} vs counts {counts:?}", map.sizes)
            })?;
            ensure(map.sizes.iter().sum::<usize>() == 64 * 64, || format!("image {i} K={k}: size sum"))?;
            let again = core(slic_segment(&lab, &cfg))?;
            ensure(again == map, || format!("image {i} K={k}: rerun differs"))?;
            runs += 1;
        }
    }
    Ok(format!("{runs} segmentations are total, deterministic partitions with R <= K"))
}

fn overlap_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..20 {
        let p = rng.random_range(1..=4usize);
        let (gh, gw) = (rng.random_range(1..=5usize), rng.random_range(1..=5usize));
        let (h, w) = (gh * p, gw * p);
        let k = rng.random_range(1..=6usize);
        let raw: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..k)).collect();
        let map = core(SuperpixelMap::from_labels(h, w, &raw))?;
        let grid = core(patch_grid(h, w, p))?;
        let o = core(compute_overlap(&map, &grid))?;
        // oracle: visit every pixel once
        let r = map.regions();
        let mut brute = vec![vec![0u32; gh * gw]; r];
        for y in 0..h {
            for x in 0..w {
                brute[map.labels[y * w + x]][(y / p) * gw + x / p] += 1;
            }
        }
        ensure(o.regions() == r && o.patches() == gh * gw, || format!("case {case}: shape"))?;
        for (i, row) in brute.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                ensure(o.count(i, j) == c, || format!("case {case}: O[{i}][{j}] {} vs {c}", o.count(i, j)))?;
            }
        }
        for j in 0..gh * gw {
            let s: f64 = (0..r).map(|i| o.get(i, j)).sum();
            ensure((s - 1.0).abs() < 1e-12, || format!("case {case}: column {j} sums to {s}"))?;
        }
    }
    Ok("20 random instances match per-pixel counting; columns sum to 1".into())
}

fn check_trace(t: &AttentionTrace, i: usize) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for (h, (w, (v, out))) in t.weights.iter().zip(t.values.iter().zip(&t.head_outputs)).enumerate() {
        for r in 0..w.rows() {
            let s: f64 = w.row(r).iter().sum();
            worst = worst.max((s - 1.0).abs());
            ensure((s - 1.0).abs() <= 1e-6, || format!("forward {i} head {h} row {r}: sums to {s}"))?;
        }
        for c in 0..v.cols() {
            let col: Vec<f64> = (0..v.rows()).map(|k| v.at(k, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
            for r in 0..out.rows() {
                let y = out.at(r, c);
                ensure(y >= lo - slack && y <= hi + slack, || {
                    format!("forward {i} head {h}: output {y} outside [{lo}, {hi}]")
                })?;
            }
        }
    }
    Ok(worst)
}

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let heads = [1usize, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=6usize);
        let x = rng.random_range(2..=24usize);
        let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let data: Vec<f64> = (0..x * d).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let h = core(tape.constant(core(Tensor::matrix(x, d, data))?))?;
        let out = if i % 2 == 0 {
            let rows = rng.random_range(1..=8usize);
            let q: Vec<f64> = (0..rows * d).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let q = core(tape.constant(core(Tensor::matrix(rows, d, q))?))?;
            let params = AttentionParams::new(&mut store, "attn", d, &mut rng);
            core(multi_head_attention(&mut tape, &store, q, h, heads, &params))?
        } else {
            let cfg = LlaConfig {
                d_model: d,
                heads,
                latents: rng.random_range(1..x),
                max_seq: x + rng.random_range(0..4usize),
                queries: if rng.random_bool(0.5) { QuerySource::Mixing } else { QuerySource::FreeLatents },
                class_latent: rng.random_bool(0.5),
            };
            let params = LlaParams::new(&mut store, "lla", &cfg, &mut rng);
            core(lla_attention(&mut tape, &store, h, &cfg, &params))?.1
        };
        worst = worst.max(check_trace(&out.trace(&tape), i)?);
    }
    Ok(format!("1000 forwards, max |row sum - 1| = {worst:.1e}, outputs inside value hulls"))
}

const SMOKE_DATA_ENV: &str = "FAV_CIFAR10_DIR";

/// Desk preset sppp+lla on airplane (0) versus frog (6): first 500 training
/// and 200 test images of the pair, 5 epochs, seed 0.
fn smoke_training() -> Outcome {
    let dir = std::env::var_os(SMOKE_DATA_ENV).map(PathBuf::from).ok_or_else(|| {
        format!("BLOCKED: CIFAR-10 binary batches not available; set {SMOKE_DATA_ENV} to the extracted cifar-10-batches-bin directory")
    })?;
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig {
        model: ModelConfig::desk(Variant::SpppLla),
        data: Some(dir),
        class_subset: Some(vec![0, 6]),
        train_limit: Some(500),
        test_limit: Some(200),
        seed: 0,
        epochs: 5,
        batch: 16,
        lr: 1e-3,
        out: out.path().to_path_buf(),
        ..RunConfig::default()
    };
    cfg.model.classes = 2;
    commands::train(&cfg).map_err(|e| e.to_string())?;
    let metrics = std::fs::read_to_string(out.path().join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let last = metrics.lines().last().ok_or("no metrics written")?;
    let field = |key: &str| -> Result<f64, String> {
        last.split_whitespace()
            .find_map(|f| f.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("metrics line lacks {key}"))
    };
    let (loss, acc) = (field("train_loss=")?, field("test_acc=")?);
    ensure(acc > 0.75 && loss < 0.45, || format!("test acc {acc:.3} (need > 0.75), train loss {loss:.3} (need < 0.45)"))?;
    Ok(format!("test acc {acc:.3}, final train loss {loss:.3}"))
}

fn efficiency_direction() -> Outcome {
    let images: Vec<ImageRgb> = (0..8)
        .map(|i| synthetic_image(32, 32, 900 + i))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let cfgs = [ModelConfig::desk(Variant::Baseline), ModelConfig::desk(Variant::SpppLla)];
    let opts = BenchOptions {
        warmup: 2,
        runs: 9,
        seed: 0,
    };
    let rows = core(bench::benchmark_run(&cfgs, &images, opts))?;
    let (b, f) = (&rows[0], &rows[1]);
    // peak bytes over every image, not just the first
    let peak = |cfg: &ModelConfig| -> Result<u64, String> {
        let model = core(Model::build(cfg, 0))?;
        let mut best = 0;
        for img in &images {
            best = best.max(core(measure(&model, &core(model.prepare(img))?))?.peak_bytes);
        }
        Ok(best)
    };
    let (pb, pf) = (peak(&cfgs[0])?, peak(&cfgs[1])?);
    ensure(f.macs < b.macs, || format!("MACs {} vs baseline {}", f.macs, b.macs))?;
    ensure(pf < pb, || format!("peak bytes {pf} vs baseline {pb}"))?;
    ensure(f.secs_per_image < b.secs_per_image, || {
        format!("median {:.3e}s vs baseline {:.3e}s", f.secs_per_image, b.secs_per_image)
    })?;
    Ok(format!(
        "MACs {}/{}, peak bytes {pf}/{pb}, median s/image {:.2e}/{:.2e} (sppp+lla/baseline, segmentation included)",
        f.macs, b.macs, f.secs_per_image, b.secs_per_image
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("token-reduction ratio", 10, token_reduction_ratio),
        ("complexity shapes", 5, complexity_shapes),
        ("pooling SNR", 30, snr),
        ("gradient fidelity", 60, gradient_fidelity),
        ("SLIC partition invariants", 30, slic_partitions),
        ("overlap matrix oracle", 10, overlap_oracle),
        ("attention normalization", 30, attention_normalization),
        ("smoke training", 600, smoke_training),
        ("relative efficiency direction", 120, efficiency_direction),
        ("format fidelity", 5, common::check_fixtures),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = t.elapsed();
        let result = match result {
            Ok(_) if elapsed > Duration::from_secs(budget) => Err(format!("took {elapsed:.1?}, budget {budget}s")),
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {:>2} {name} [{:.2}s]: {detail}", i + 1, elapsed.as_secs_f64());
        failed += usize::from(result.is_err());
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

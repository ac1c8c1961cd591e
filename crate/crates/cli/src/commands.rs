//! The six subcommands. Each returns the text it prints and writes its
//! artifacts under the configured output directory.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use favit_core::bench::{self, BenchOptions};
use favit_core::imaging::{rgb_to_lab, ImageRgb};
use favit_core::model::{check_gradients, checkpoint, evaluate, Model, ModelConfig, Prepared, TrainState, Variant};
use favit_core::numerics::Tape;
use favit_core::slic::slic_segment;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::{self, fit_image, DatasetSplit};
use crate::error::{CliError, Result};

pub const LABELS_FILE: &str = "labels.txt";
pub const TOKENS_FILE: &str = "tokens.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.fav";
pub const RUN_CONFIG_FILE: &str = "run.cfg";
pub const BENCH_FILE: &str = "bench.txt";

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out)?;
    Ok(&cfg.out)
}

/// Decodes a PNG or PNM file and fits it to the configured input size.
pub fn load_image(path: &Path, cfg: &ModelConfig) -> Result<ImageRgb> {
    let img = image::open(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let rgb = ImageRgb::from_rgb8(h as usize, w as usize, img.as_raw())?;
    fit_image(&rgb, cfg.image_height, cfg.image_width)
}

/// Soft colored discs on a gradient background, fixed by `seed`.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> Result<ImageRgb> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let discs: Vec<([f64; 3], f64, f64, f64)> = (0..4)
        .map(|_| {
            let color = [rng.random(), rng.random(), rng.random()];
            let cy = rng.random_range(0.0..height as f64);
            let cx = rng.random_range(0.0..width as f64);
            let r = rng.random_range(0.15..0.4) * height.min(width) as f64;
            (color, cy, cx, r)
        })
        .collect();
    Ok(ImageRgb::from_fn(height, width, |y, x| {
        let t = x as f64 / width.max(2) as f64;
        let mut px = base.map(|b| 0.5 * b + 0.3 * t);
        for (color, cy, cx, r) in &discs {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let w = (1.0 - (d - r).max(0.0) / 2.0).clamp(0.0, 1.0);
            for c in 0..3 {
                px[c] = (1.0 - w) * px[c] + w * color[c];
            }
        }
        px.map(|v| v.clamp(0.0, 1.0))
    })?)
}

pub fn segment(cfg: &RunConfig, image: &Path) -> Result<String> {
    let img = load_image(image, &cfg.model)?;
    let map = slic_segment(&rgb_to_lab(&img), &cfg.model.slic())?;
    let path = out_dir(cfg)?.join(LABELS_FILE);
    fs::write(&path, map.to_text())?;
    let sizes: Vec<String> = map.sizes.iter().map(usize::to_string).collect();
    Ok(format!(
        "regions={}\nsizes={}\niterations={}\nlabels={}\n",
        map.regions(),
        sizes.join(","),
        map.changes.len(),
        path.display()
    ))
}

pub fn tokenize(cfg: &RunConfig, image: &Path) -> Result<String> {
    if !cfg.model.variant.uses_sppp() {
        return Err(CliError::Config(format!(
            "tokenize needs a superpixel variant, got {}",
            cfg.model.variant
        )));
    }
    let img = load_image(image, &cfg.model)?;
    let model = Model::build(&cfg.model, cfg.seed)?;
    let input = model.prepare(&img)?;
    let Prepared::Sppp(layout) = &input else {
        unreachable!("superpixel variants prepare superpixel layouts")
    };
    let mut tape = Tape::new();
    let tokens = model.tokens(&mut tape, &model.store, &input)?;
    let values = tape.value(tokens);

    let mut out = String::new();
    let _ = writeln!(out, "patches={}", layout.grid.len());
    let _ = writeln!(out, "regions={}", layout.map.regions());
    let _ = writeln!(out, "tokens={}", layout.tokens());
    let _ = writeln!(out, "group anchor patches centroid_x centroid_y norm_x norm_y token_norm");
    for g in 0..layout.tokens() {
        let members: Vec<String> = layout.assignment.members(g).iter().map(usize::to_string).collect();
        let (cx, cy) = layout.centroids[g];
        let (nx, ny) = layout.normalized[g];
        // row 0 is the class token
        let norm = values.row(g + 1).iter().map(|v| v * v).sum::<f64>().sqrt();
        let _ = writeln!(
            out,
            "{g} {} {} {cx:.4} {cy:.4} {nx:.6} {ny:.6} {norm:.6}",
            layout.assignment.anchors[g],
            members.join(",")
        );
    }
    fs::write(out_dir(cfg)?.join(TOKENS_FILE), &out)?;
    Ok(out)
}

/// Loaded, class-filtered, truncated and resized splits.
pub fn load_splits(cfg: &RunConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    let dir = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("no dataset: set data=<dir>".into()))?;
    let (mut train, mut test) = dataset::load(cfg.format, dir)?;
    if let Some(keep) = &cfg.class_subset {
        train = train.select_classes(keep)?;
        test = test.select_classes(keep)?;
    }
    if let Some(n) = cfg.train_limit {
        train = train.truncate(n);
    }
    if let Some(n) = cfg.test_limit {
        test = test.truncate(n);
    }
    if train.classes != cfg.model.classes {
        return Err(CliError::Config(format!(
            "dataset has {} classes but classes={}",
            train.classes, cfg.model.classes
        )));
    }
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Data("a split is empty after filtering".into()));
    }
    let (h, w) = (cfg.model.image_height, cfg.model.image_width);
    Ok((train.fit(h, w)?, test.fit(h, w)?))
}

fn prepare_all(model: &Model, split: &DatasetSplit) -> Result<Vec<Prepared>> {
    Ok(split.images.iter().map(|i| model.prepare(i)).collect::<favit_core::Result<_>>()?)
}

/// One metrics line: epoch, train loss, train accuracy, test accuracy.
pub fn metrics_line(epoch: u64, train_loss: f64, train_acc: f64, test_acc: f64) -> String {
    format!("epoch={epoch} train_loss={train_loss:.6} train_acc={train_acc:.6} test_acc={test_acc:.6}")
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let (train, test) = load_splits(cfg)?;
    let out = out_dir(cfg)?;
    fs::write(out.join(RUN_CONFIG_FILE), cfg.to_text())?;
    let metrics = out.join(METRICS_FILE);
    let timing = out.join(TIMING_FILE);
    fs::write(&metrics, "")?;
    fs::write(&timing, "")?;

    let mut state = TrainState::new(&cfg.model, cfg.seed, cfg.optimizer())?;
    let train_in = prepare_all(&state.model, &train)?;
    let test_in = prepare_all(&state.model, &test)?;
    let mut report = String::new();
    for _ in 0..cfg.epochs {
        let t = Instant::now();
        let stats = state.train_epoch(&train_in, &train.labels, cfg.batch)?;
        let eval = evaluate(&state.model, &test_in, &test.labels, cfg.batch)?;
        let line = metrics_line(state.epoch, stats.loss, stats.accuracy, eval.accuracy);
        append_line(&metrics, &line)?;
        append_line(&timing, &format!("epoch={} elapsed_secs={:.3}", state.epoch, t.elapsed().as_secs_f64()))?;
        checkpoint::save(&state, &out.join(CHECKPOINT_FILE))?;
        report.push_str(&line);
        report.push('\n');
    }
    Ok(report)
}

pub fn eval(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<String> {
    cfg.validate()?;
    let path: PathBuf = checkpoint_path.map_or_else(|| cfg.out.join(CHECKPOINT_FILE), Path::to_path_buf);
    let state = checkpoint::load(&path, &cfg.model, cfg.optimizer())?;
    let (_, test) = load_splits(cfg)?;
    let inputs = prepare_all(&state.model, &test)?;
    let stats = evaluate(&state.model, &inputs, &test.labels, cfg.batch)?;
    Ok(format!(
        "images={} test_loss={:.6} test_acc={:.6}\n",
        test.len(),
        stats.loss,
        stats.accuracy
    ))
}

fn variant_configs(cfg: &RunConfig) -> Vec<ModelConfig> {
    cfg.variants
        .iter()
        .map(|&variant| ModelConfig {
            variant,
            ..cfg.model.clone()
        })
        .collect()
}

pub fn bench(cfg: &RunConfig, image: Option<&Path>) -> Result<String> {
    cfg.validate()?;
    let images = match image {
        Some(p) => vec![load_image(p, &cfg.model)?],
        None => (0..cfg.bench_images.max(1))
            .map(|i| synthetic_image(cfg.model.image_height, cfg.model.image_width, cfg.seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?,
    };
    let opts = BenchOptions {
        warmup: cfg.warmup,
        runs: cfg.runs,
        seed: cfg.seed,
    };
    let rows = bench::benchmark_run(&variant_configs(cfg), &images, opts)?;
    let text = bench::render_report(&rows);
    fs::write(out_dir(cfg)?.join(BENCH_FILE), &text)?;
    Ok(text)
}

/// Parameter name with block indices kept and everything after the first
/// component dropped, e.g. `block1.attn.wq` becomes `block1`.
pub fn module_of(param: &str) -> &str {
    param.split('.').next().unwrap_or(param)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let mut out = String::new();
    let mut worst = 0.0f64;
    for mc in variant_configs(cfg) {
        let mut model = Model::build(&mc, cfg.seed)?;
        let images: Vec<ImageRgb> = (0..cfg.grad_batch.max(1))
            .map(|i| synthetic_image(mc.image_height, mc.image_width, cfg.seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        let batch: Vec<Prepared> = images.iter().map(|i| model.prepare(i)).collect::<favit_core::Result<_>>()?;
        let labels: Vec<usize> = (0..batch.len()).map(|i| i % mc.classes).collect();
        let report = check_gradients(&mut model, &batch, &labels, cfg.grad_scheme, cfg.grad_per_param)?;
        let mut modules: Vec<(&str, f64)> = Vec::new();
        for (name, err) in &report.per_param {
            let m = module_of(name);
            match modules.iter_mut().find(|(k, _)| *k == m) {
                Some(entry) => entry.1 = entry.1.max(*err),
                None => modules.push((m, *err)),
            }
        }
        for (m, err) in modules {
            let _ = writeln!(out, "variant={} module={m} max_rel_err={err:.3e}", mc.variant);
        }
        let _ = writeln!(
            out,
            "variant={} coordinates={} max_rel_err={:.3e}",
            mc.variant, report.coordinates, report.max_rel_err
        );
        worst = worst.max(report.max_rel_err);
    }
    if worst >= cfg.grad_tolerance {
        return Err(CliError::Acceptance(format!(
            "max relative error {worst:.3e} not below {:.1e}\n{out}",
            cfg.grad_tolerance
        )));
    }
    Ok(out)
}

/// Variants named on the command line, comma separated.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    Ok(list
        .split(',')
        .map(|v| v.trim().parse())
        .collect::<favit_core::Result<_>>()?)
}

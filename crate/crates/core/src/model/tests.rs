use super::checkpoint;
use super::*;
use crate::imaging::ImageRgb;
use crate::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_image(h: usize, w: usize, seed: u64) -> ImageRgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    ImageRgb::new(h, w, data).unwrap()
}

/// Two-class set: a warm blob on the left or a cool blob on the right, with
/// pixel noise.
fn two_class_set(n: usize, size: usize, seed: u64) -> (Vec<ImageRgb>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let cx = if label == 0 { 0.3 } else { 0.7 } * size as f64;
        let cy = rng.random_range(0.3..0.7) * size as f64;
        let color = if label == 0 { [0.9, 0.4, 0.1] } else { [0.1, 0.4, 0.9] };
        let noise: Vec<f64> = (0..size * size).map(|_| rng.random_range(-0.05..0.05)).collect();
        let img = ImageRgb::from_fn(size, size, |y, x| {
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let inside = r2 < (size as f64 * 0.22).powi(2);
            let base = if inside { color } else { [0.5, 0.5, 0.5] };
            base.map(|c| (c + noise[y * size + x]).clamp(0.0, 1.0))
        })
        .unwrap();
        images.push(img);
        labels.push(label);
    }
    (images, labels)
}

fn prepared(model: &Model, images: &[ImageRgb]) -> Vec<Prepared> {
    images.iter().map(|i| model.prepare(i).unwrap()).collect()
}

#[test]
fn presets_follow_the_architecture_table() {
    let p = ModelConfig::preset(Preset::Full, Variant::SpppLla);
    assert_eq!((p.patch, p.d_model, p.layers, p.heads, p.ffn), (4, 768, 12, 12, 768));
    let d = ModelConfig::desk(Variant::Baseline);
    assert_eq!((d.d_model, d.layers, d.heads), (64, 2, 4));
    assert!(p.validate().is_ok() && d.validate().is_ok());
}

#[test]
fn baseline_parameter_count_matches_closed_form() {
    for cfg in [
        ModelConfig::desk(Variant::Baseline),
        ModelConfig {
            layers: 3,
            classes: 7,
            ffn: 48,
            ..ModelConfig::desk(Variant::Baseline)
        },
    ] {
        let model = Model::build(&cfg, 1).unwrap();
        assert_eq!(model.parameter_count(), baseline_parameter_count(&cfg));
    }
    // D=64, N=64, F=64, 2 layers, 10 classes
    assert_eq!(baseline_parameter_count(&ModelConfig::desk(Variant::Baseline)), 57_994);
}

#[test]
fn config_validation_rejects_bad_combinations() {
    let mut c = ModelConfig::desk(Variant::LlaOnly);
    c.latents = c.patches() + 1;
    assert!(matches!(Model::build(&c, 0), Err(crate::Error::Config(_))));
    c.latents = c.patches();
    assert!(Model::build(&c, 0).is_ok());

    let mut c = ModelConfig::desk(Variant::SpppLla);
    c.latents = 17;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::desk(Variant::Baseline);
    c.heads = 5;
    assert!(c.validate().is_err());
    c.heads = 4;
    c.image_width = 30;
    assert!(matches!(c.validate(), Err(crate::Error::Geometry { .. })));
    assert!("sppp+lla".parse::<Variant>().is_ok());
    assert!("transformer".parse::<Variant>().is_err());
}

#[test]
fn config_text_round_trips() {
    let mut c = ModelConfig::desk(Variant::SpppLla);
    c.assign = crate::sppp::AssignMode::Threshold { tau: 0.35 };
    c.compactness = crate::slic::Compactness::Classic { m: 12.5 };
    let mut back = ModelConfig::desk(Variant::Baseline);
    for (k, v) in c.entries() {
        assert!(ModelConfig::has_key(k));
        back.set(k, &v).unwrap();
    }
    assert_eq!(back, c);
    assert_eq!(back.canonical(), c.canonical());
    assert!(back.set("dmodel", "3").is_err());
    assert!(back.set("layers", "two").is_err());
}

#[test]
fn focused_variant_feeds_seventeen_tokens() {
    let cfg = ModelConfig::desk(Variant::SpppLla);
    let model = Model::build(&cfg, 3).unwrap();
    let img = ImageRgb::filled(32, 32, [0.4, 0.5, 0.6]).unwrap();
    let p = model.prepare(&img).unwrap();
    assert_eq!(p.sequence_len(), 17);
    let mut tape = Tape::new();
    let trace = model.forward_trace(&mut tape, &[&p]).unwrap();
    assert_eq!(tape.value(trace.tokens[0]).shape(), &[17, 64]);
    for layer in &trace.attention[0] {
        assert!(layer.weights.iter().all(|w| tape.value(*w).shape() == [8, 17]));
    }
    assert_eq!(tape.counters().score_entries, (2 * 4 * 8 * 17) as u64);
    assert!(tape.counters().max_score_matrix <= 8 * 17);
}

#[test]
fn baseline_scores_are_quadratic() {
    let cfg = ModelConfig::desk(Variant::Baseline);
    let model = Model::build(&cfg, 3).unwrap();
    let p = model.prepare(&noise_image(32, 32, 1)).unwrap();
    let mut tape = Tape::new();
    model.forward_trace(&mut tape, &[&p]).unwrap();
    assert_eq!(tape.counters().score_entries, 2 * 4 * 65 * 65);
    assert_eq!(tape.counters().max_score_matrix, 65 * 65);
}

#[test]
fn initialization_is_deterministic() {
    for v in Variant::ALL {
        let cfg = ModelConfig::desk(v);
        let imgs = [noise_image(32, 32, 5)];
        let a = Model::build(&cfg, 11).unwrap().forward(&imgs).unwrap();
        let b = Model::build(&cfg, 11).unwrap().forward(&imgs).unwrap();
        let c = Model::build(&cfg, 12).unwrap().forward(&imgs).unwrap();
        assert_eq!(a, b, "{v}");
        assert_ne!(a, c, "{v}");
    }
}

#[test]
fn zero_head_gives_uniform_logits_and_identical_rows() {
    for v in Variant::ALL {
        let mut model = Model::build(&ModelConfig::desk(v), 2).unwrap();
        let img = noise_image(32, 32, 9);
        let logits = model.forward(&[img.clone(), img.clone()]).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        model.store.set_value("head.weight", Tensor::zeros(&[64, 10])).unwrap();
        let logits = model.forward(&[img]).unwrap();
        assert!(logits.data().iter().all(|&l| l == 0.0));
    }
}

/// Dense helpers over `Vec<Vec<f64>>` for the staged oracle.
mod oracle {
    pub type M = Vec<Vec<f64>>;

    pub fn mm(a: &M, b: &M) -> M {
        a.iter()
            .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    }

    pub fn ln(a: &M, g: &[f64], b: &[f64]) -> M {
        a.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(i, x)| (x - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    pub fn add(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn attention(x: &M, wq: &M, wk: &M, wv: &M, wo: &M) -> M {
        let (q, k, v) = (mm(x, wq), mm(x, wk), mm(x, wv));
        let d = q[0].len() as f64;
        let out: M = q
            .iter()
            .map(|qr| {
                let s: Vec<f64> = k.iter().map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len()).map(|c| e.iter().zip(&v).map(|(w, vr)| w / z * vr[c]).sum()).collect()
            })
            .collect();
        mm(&out, wo)
    }
}

#[test]
fn baseline_matches_staged_oracle() {
    use oracle::*;
    let cfg = ModelConfig {
        image_height: 8,
        image_width: 8,
        patch: 4,
        d_model: 4,
        layers: 1,
        heads: 1,
        ffn: 3,
        classes: 2,
        ..ModelConfig::desk(Variant::Baseline)
    };
    let mut model = Model::build(&cfg, 0).unwrap();
    // hand-set small weights
    let names: Vec<String> = model.store.iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let shape = model.store.get(model.store.id(name).unwrap()).value.shape().to_vec();
        let n: usize = shape.iter().product();
        let vals = (0..n).map(|i| 0.1 * ((i * 7 + pi * 3) as f64 * 0.37).sin() + if name.ends_with("gain") { 1.0 } else { 0.0 });
        model.store.set_value(name, Tensor::new(shape, vals.collect()).unwrap()).unwrap();
    }
    let get = |name: &str| -> M {
        let t = &model.store.get(model.store.id(name).unwrap()).value;
        let cols = t.cols();
        t.data().chunks(cols).map(|c| c.to_vec()).collect()
    };
    let vec = |name: &str| get(name).concat();
    let img = noise_image(8, 8, 4);

    // patches: row-major grid, pixels row-major, channels innermost
    let mut patches: M = Vec::new();
    for gy in 0..2 {
        for gx in 0..2 {
            let mut p = Vec::new();
            for y in 0..4 {
                for x in 0..4 {
                    p.extend(img.pixel(gy * 4 + y, gx * 4 + x));
                }
            }
            patches.push(p);
        }
    }
    let mut z = vec![vec("class_token")];
    z.extend(mm(&patches, &get("embed")));
    z = add(&z, &get("positions"));
    let n1 = ln(&z, &vec("block0.norm1.gain"), &vec("block0.norm1.bias"));
    let a = attention(&n1, &get("block0.attn.wq"), &get("block0.attn.wk"), &get("block0.attn.wv"), &get("block0.attn.wo"));
    z = add(&z, &a);
    let n2 = ln(&z, &vec("block0.norm2.gain"), &vec("block0.norm2.bias"));
    let b0 = vec("block0.ffn.0.bias");
    let hidden: M = mm(&n2, &get("block0.ffn.0.weight"))
        .into_iter()
        .map(|r| r.iter().zip(&b0).map(|(x, b)| gelu(x + b)).collect())
        .collect();
    let b1 = vec("block0.ffn.1.bias");
    let f: M = mm(&hidden, &get("block0.ffn.1.weight"))
        .into_iter()
        .map(|r| r.iter().zip(&b1).map(|(x, b)| x + b).collect())
        .collect();
    z = add(&z, &f);
    let cls = ln(&z[..1].to_vec(), &vec("final_norm.gain"), &vec("final_norm.bias"));
    let hb = vec("head.bias");
    let expected: Vec<f64> = mm(&cls, &get("head.weight"))[0].iter().zip(&hb).map(|(x, b)| x + b).collect();

    let got = model.forward(&[img]).unwrap();
    for (g, e) in got.data().iter().zip(&expected) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn gradients_match_finite_differences_on_desk_preset() {
    for v in Variant::ALL {
        let mut model = Model::build(&ModelConfig::desk(v), 21).unwrap();
        let (imgs, labels) = two_class_set(2, 32, 5);
        let batch = prepared(&model, &imgs);
        let report = check_gradients(&mut model, &batch, &labels, crate::numerics::FiniteDiff::Central(1e-5), 3).unwrap();
        assert!(report.max_rel_err < 1e-4, "{v}: {report:?}");
        assert!(report.coordinates > 50);
    }
}

#[test]
fn first_loss_is_near_uniform_cross_entropy() {
    for v in [Variant::Baseline, Variant::SpppLla] {
        let mut state = TrainState::new(&ModelConfig::desk(v), 8, AdamW::default()).unwrap();
        let imgs: Vec<ImageRgb> = (0..10).map(|i| noise_image(32, 32, 100 + i)).collect();
        let batch = prepared(&state.model, &imgs);
        let labels: Vec<usize> = (0..10).collect();
        let (loss, _) = state.train_step(&batch.iter().collect::<Vec<_>>(), &labels).unwrap();
        let ln10 = 10f64.ln();
        assert!((loss - ln10).abs() < 0.1 * ln10, "{v}: {loss}");
    }
}

#[test]
fn zero_learning_rate_moves_only_the_moments() {
    let opt = AdamW {
        lr: 0.0,
        ..AdamW::default()
    };
    let mut state = TrainState::new(&ModelConfig::desk(Variant::SpppLla), 4, opt).unwrap();
    let before = state.model.store.clone();
    let (imgs, labels) = two_class_set(4, 32, 1);
    let batch = prepared(&state.model, &imgs);
    state.train_step(&batch.iter().collect::<Vec<_>>(), &labels).unwrap();
    for (a, b) in before.iter().zip(state.model.store.iter()) {
        assert_eq!(a.value, b.value);
        assert!(b.grad.data().iter().all(|&g| g == 0.0));
    }
    assert!(state.m.iter().any(|m| m.max_abs() > 0.0));
    assert!(state.v.iter().any(|v| v.max_abs() > 0.0));
    assert_eq!(state.step, 1);
}

#[test]
fn label_errors_are_reported() {
    let mut state = TrainState::new(&ModelConfig::desk(Variant::Baseline), 4, AdamW::default()).unwrap();
    let p = state.model.prepare(&noise_image(32, 32, 0)).unwrap();
    assert!(matches!(state.train_step(&[&p], &[10]), Err(crate::Error::Index { .. })));
    assert!(state.train_step(&[&p], &[0, 1]).is_err());
}

#[test]
fn overflowing_update_is_reported() {
    let opt = AdamW {
        lr: 1e300,
        ..AdamW::default()
    };
    let mut state = TrainState::new(&ModelConfig::desk(Variant::Baseline), 4, opt).unwrap();
    let p = state.model.prepare(&noise_image(32, 32, 0)).unwrap();
    match state.train_step(&[&p], &[3]) {
        Err(crate::Error::NonFinite { stage }) => assert!(stage.starts_with("update of"), "{stage}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn converges_on_separable_synthetic_set() {
    for v in [Variant::Baseline, Variant::SpppLla] {
        let mut cfg = ModelConfig::desk(v);
        cfg.classes = 2;
        let opt = AdamW {
            lr: 1e-3,
            ..AdamW::default()
        };
        let mut state = TrainState::new(&cfg, 3, opt).unwrap();
        let (imgs, labels) = two_class_set(32, 32, 2);
        let data = prepared(&state.model, &imgs);
        let mut last = f64::INFINITY;
        // 4 batches of 8 per epoch, 50 epochs = 200 steps
        for _ in 0..50 {
            last = state.train_epoch(&data, &labels, 8).unwrap().loss;
        }
        assert_eq!(state.step, 200);
        let eval = evaluate(&state.model, &data, &labels, 16).unwrap();
        assert!(last < 0.1 && eval.loss < 0.1, "{v}: train {last}, eval {}", eval.loss);
        assert_eq!(eval.accuracy, 1.0);
    }
}

#[test]
fn evaluation_levels() {
    // a one-hot oracle head is always right
    let labels = [3usize, 0, 2];
    let mut leak = vec![0.0; 12];
    for (r, &y) in labels.iter().enumerate() {
        leak[r * 4 + y] = 5.0;
    }
    assert_eq!(count_correct(&Tensor::matrix(3, 4, leak).unwrap(), &labels), 3);

    // an untrained model on a balanced 10-class split sits near chance
    let model = Model::build(&ModelConfig::desk(Variant::Baseline), 5).unwrap();
    let imgs: Vec<ImageRgb> = (0..200).map(|i| noise_image(32, 32, 1000 + i)).collect();
    let labels: Vec<usize> = (0..200).map(|i| i % 10).collect();
    let data = prepared(&model, &imgs);
    let a = evaluate(&model, &data, &labels, 50).unwrap();
    assert!((a.accuracy - 0.1).abs() <= 0.03, "{}", a.accuracy);
    let b = evaluate(&model, &data, &labels, 7).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = std::env::temp_dir().join(format!("favit-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for v in [Variant::Baseline, Variant::SpppLla] {
        let cfg = ModelConfig::desk(v);
        let mut state = TrainState::new(&cfg, 77, AdamW::default()).unwrap();
        let (imgs, labels) = two_class_set(4, 32, 3);
        let data = prepared(&state.model, &imgs);
        state.train_epoch(&data, &labels, 2).unwrap();
        let path = dir.join(format!("{}.fav", v.name().replace('+', "_")));
        checkpoint::save(&state, &path).unwrap();
        let back = checkpoint::load(&path, &cfg, AdamW::default()).unwrap();
        let refs: Vec<&Prepared> = data.iter().collect();
        assert_eq!(
            state.model.forward_prepared(&refs).unwrap().data(),
            back.model.forward_prepared(&refs).unwrap().data()
        );
        assert_eq!(back.m, state.m);
        assert_eq!(back.v, state.v);
        assert_eq!((back.epoch, back.step, back.seed), (1, 2, 77));
        assert_eq!(checkpoint::to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FAV1");
        let other = ModelConfig {
            latents: 4,
            ..cfg.clone()
        };
        assert!(checkpoint::from_bytes(&bytes, &other, AdamW::default()).is_err());
        assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3], &cfg, AdamW::default()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            checkpoint::from_bytes(&bad, &cfg, AdamW::default()),
            Err(crate::Error::Format(_))
        ));
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

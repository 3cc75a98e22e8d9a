use cogtran::encoding::{TokenGrid, TokenId, Vocabulary};
use cogtran::model::{
    forward, init_params, load_archive, loss, loss_and_gradients, save_archive, ModelConfig, ModelError, Params,
};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        hidden_size: 16,
        intermediate_size: 32,
        num_heads: 2,
        num_layers: 2,
        vocab_size,
        max_row_positions: 32,
        dropout: 0.0,
    }
}

/// `rows` words of `sites` sites each, last row masked, labels on its sites
/// and `[SEP]`.
fn random_grid(rng: &mut impl Rng, rows: usize, sites: usize, vocab: usize) -> TokenGrid {
    let width = sites + 3;
    let first_free = Vocabulary::NUM_SPECIALS as TokenId;
    let mut ids = Array2::zeros((rows, width));
    let mut labels = vec![None; width];
    for r in 0..rows {
        ids[[r, 0]] = Vocabulary::CLS_ID;
        ids[[r, 1]] = rng.random_range(first_free..vocab as TokenId);
        for c in 2..width - 1 {
            ids[[r, c]] = rng.random_range(Vocabulary::GAP_ID..vocab as TokenId);
        }
        ids[[r, width - 1]] = Vocabulary::SEP_ID;
    }
    let target = rows - 1;
    for c in 2..width {
        labels[c] = Some(ids[[target, c]]);
        if c < width - 1 {
            ids[[target, c]] = Vocabulary::MASK_ID;
        }
    }
    TokenGrid {
        pad_mask: ids.mapv(|i| i == Vocabulary::PAD_ID),
        ids,
        labels,
        target_row: target,
    }
}

fn max_abs_diff(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn preset_parameter_counts() {
    let tiny = init_params::<f32>(&ModelConfig::tiny(2300), 0).unwrap();
    let small = init_params::<f32>(&ModelConfig::small(2300), 0).unwrap();
    assert_eq!(tiny.param_count(), ModelConfig::tiny(2300).param_count());
    assert_eq!(small.param_count(), ModelConfig::small(2300).param_count());
    let within = |n: usize, target: f64| ((n as f64 - target) / target).abs() <= 0.15;
    assert!(within(tiny.param_count(), 1.0e6), "tiny has {}", tiny.param_count());
    assert!(within(small.param_count(), 4.4e6), "small has {}", small.param_count());
}

#[test]
fn init_is_deterministic_and_well_formed() {
    let cfg = small_config(20);
    let a = init_params::<f32>(&cfg, 3).unwrap();
    let b = init_params::<f32>(&cfg, 3).unwrap();
    let c = init_params::<f32>(&cfg, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.layers[0].attn_norm.scale.iter().all(|&x| x == 1.0));
    assert!(a.layers[1].ffn_norm.offset.iter().all(|&x| x == 0.0));
    assert!(a.classifier.bias.iter().all(|&x| x == 0.0));
    let w = &a.token_embedding;
    let std = (w.mapv(|x| x * x).mean().unwrap()).sqrt();
    assert!((std - 0.02).abs() < 0.004, "std {std}");
    let names: Vec<String> = a.tensors().into_iter().map(|t| t.name).collect();
    let mut a2 = a.clone();
    let names_mut: Vec<String> = a2.tensors_mut().into_iter().map(|t| t.name).collect();
    assert_eq!(names, names_mut);
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = small_config(20);
    cfg.num_heads = 3;
    assert!(matches!(init_params::<f32>(&cfg, 0), Err(ModelError::InvalidConfig(_))));
    let mut cfg = small_config(20);
    cfg.dropout = 1.0;
    assert!(init_params::<f32>(&cfg, 0).is_err());
}

#[test]
fn output_shape_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = init_params::<f32>(&small_config(20), 0).unwrap();
    let grid = random_grid(&mut rng, 3, 5, 20);
    let logits = forward(&params, &grid).unwrap();
    assert_eq!(logits.dim(), (8, 20));
    assert!(logits.iter().all(|x| x.is_finite()));

    let wide = random_grid(&mut rng, 2, 40, 20);
    assert!(matches!(forward(&params, &wide), Err(ModelError::WidthExceeded { width: 43, max: 32 })));
    let mut bad = grid.clone();
    bad.ids[[0, 2]] = 99;
    assert!(matches!(forward(&params, &bad), Err(ModelError::TokenOutOfRange { id: 99, .. })));
}

#[test]
fn row_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = init_params::<f32>(&small_config(24), 5).unwrap();
    for _ in 0..50 {
        let rows = rng.random_range(2..6);
        let sites = rng.random_range(1..9);
        let grid = random_grid(&mut rng, rows, sites, 24);
        let base = forward(&params, &grid).unwrap();

        let mut order: Vec<usize> = (0..rows - 1).collect();
        order.reverse();
        order.rotate_left(rng.random_range(0..rows - 1));
        order.push(rows - 1);
        let mut permuted = grid.clone();
        for (dst, &src) in order.iter().enumerate() {
            permuted.ids.row_mut(dst).assign(&grid.ids.row(src));
            permuted.pad_mask.row_mut(dst).assign(&grid.pad_mask.row(src));
        }
        let moved = forward(&params, &permuted).unwrap();
        assert!(max_abs_diff(&base, &moved) <= 1e-4);

        // the unknown row may also sit elsewhere, with padding rows appended
        let mut shuffled = permuted.clone();
        let last = rows - 1;
        for c in 0..grid.width() {
            shuffled.ids.swap([0, c], [last, c]);
            shuffled.pad_mask.swap([0, c], [last, c]);
        }
        shuffled.target_row = 0;
        let padded = shuffled.padded(rows + 2, grid.width());
        let again = forward(&params, &padded).unwrap();
        assert!(max_abs_diff(&base, &again) <= 1e-4);
    }
}

#[test]
fn padding_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = init_params::<f32>(&small_config(24), 6).unwrap();
    for _ in 0..50 {
        let rows = rng.random_range(2..6);
        let sites = rng.random_range(1..9);
        let grid = random_grid(&mut rng, rows, sites, 24);
        let base = forward(&params, &grid).unwrap();
        let extra_cols = rng.random_range(1..6);
        let extra_rows = rng.random_range(0..3);
        let padded = grid.padded(rows + extra_rows, grid.width() + extra_cols);
        let logits = forward(&params, &padded).unwrap();
        let head = logits.slice(ndarray::s![..grid.width(), ..]).to_owned();
        for (c, label) in grid.labels.iter().enumerate() {
            if label.is_some() {
                let diff = base
                    .row(c)
                    .iter()
                    .zip(head.row(c))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f32::max);
                assert!(diff <= 1e-4, "column {c} moved by {diff}");
            }
        }
        assert_eq!(
            loss(&base, &grid.labels).unwrap(),
            loss(&logits, &padded.labels).unwrap()
        );
    }
}

/// Naive oracle: explicit softmax per labelled column.
fn oracle_loss(logits: &Array2<f64>, labels: &[Option<TokenId>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (c, label) in labels.iter().enumerate() {
        let Some(label) = label else { continue };
        let row = logits.row(c);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        total += -(row[*label as usize].exp() / z).ln();
        n += 1;
    }
    total / n as f64
}

#[test]
fn loss_oracles() {
    let v = 37;
    let uniform = Array2::<f64>::from_elem((4, v), 0.3);
    let labels = vec![None, Some(3), Some(10), None];
    assert!((loss(&uniform, &labels).unwrap() - (v as f64).ln()).abs() < 1e-12);

    let mut sharp = Array2::<f64>::zeros((4, v));
    sharp[[1, 3]] = 60.0;
    sharp[[2, 10]] = 60.0;
    assert!(loss(&sharp, &labels).unwrap() < 1e-20);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let logits = Array2::from_shape_fn((6, v), |_| rng.random_range(-4.0..4.0));
        let labels: Vec<Option<TokenId>> = (0..6)
            .map(|_| rng.random_bool(0.6).then(|| rng.random_range(0..v as TokenId)))
            .collect();
        if labels.iter().all(Option::is_none) {
            continue;
        }
        assert!((loss(&logits, &labels).unwrap() - oracle_loss(&logits, &labels)).abs() < 1e-6);
    }

    assert_eq!(loss(&uniform, &[None; 4]), Err(ModelError::NoSupervisedPositions));
    assert!(matches!(loss(&uniform, &[None; 3]), Err(ModelError::LabelMismatch { .. })));
}

fn batch_loss(params: &Params<f64>, grids: &[&TokenGrid]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for g in grids {
        let logits = forward(params, g).unwrap();
        let k = g.supervised();
        sum += loss(&logits, &g.labels).unwrap() * k as f64;
        n += k;
    }
    sum / n as f64
}

#[test]
fn gradients_match_central_differences() {
    let cfg = ModelConfig {
        hidden_size: 8,
        intermediate_size: 12,
        num_heads: 2,
        num_layers: 2,
        vocab_size: 14,
        max_row_positions: 10,
        dropout: 0.0,
    };
    let mut params = init_params::<f64>(&cfg, 9).unwrap();
    assert!(params.param_count() <= 5000, "{}", params.param_count());
    // move away from the symmetric init so every tensor gets a real gradient
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for t in params.tensors_mut() {
        for x in t.data.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let a = random_grid(&mut rng, 3, 4, 14);
    let b = random_grid(&mut rng, 2, 6, 14).padded(4, 9);
    let grids = [&a, &b];

    let (value, grad) = loss_and_gradients(&params, &grids, None).unwrap();
    assert!((value - batch_loss(&params, &grids)).abs() < 1e-12);

    let step = 1e-5;
    let names: Vec<(String, usize)> = params.tensors().into_iter().map(|t| (t.name, t.data.len())).collect();
    let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().map(|t| t.data.to_vec()).collect();
    let mut checked = 0;
    for (ti, (name, len)) in names.iter().enumerate() {
        for i in 0..*len {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data[i] += step;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data[i] -= step;
            let numeric = (batch_loss(&plus, &grids) - batch_loss(&minus, &grids)) / (2.0 * step);
            let exact = analytic[ti][i];
            let scale = exact.abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (exact - numeric).abs() / scale;
            assert!(rel <= 1e-3, "{name}[{i}]: analytic {exact} numeric {numeric}");
            checked += 1;
        }
    }
    assert!(checked > 1000, "only {checked} entries had a usable gradient");
}

#[test]
fn batch_gradient_is_count_weighted_mean() {
    let cfg = small_config(20);
    let params = init_params::<f64>(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_grid(&mut rng, 3, 2, 20);
    let b = random_grid(&mut rng, 4, 7, 20);
    let (_, ga) = loss_and_gradients(&params, &[&a], None).unwrap();
    let (_, gb) = loss_and_gradients(&params, &[&b], None).unwrap();
    let (_, gab) = loss_and_gradients(&params, &[&a, &b], None).unwrap();
    let (na, nb) = (a.supervised() as f64, b.supervised() as f64);
    let expect = (&ga.classifier.weight * na + &gb.classifier.weight * nb) / (na + nb);
    let diff = (&expect - &gab.classifier.weight).mapv(f64::abs).sum_axis(Axis(0)).sum();
    assert!(diff < 1e-10);
}

#[test]
fn dropout_is_seeded() {
    let mut cfg = small_config(20);
    cfg.dropout = 0.1;
    let params = init_params::<f32>(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_grid(&mut rng, 3, 5, 20);
    let run = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        loss_and_gradients(&params, &[&a], Some(&mut r)).unwrap().0
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let plain = loss_and_gradients(&params, &[&a], None).unwrap().0;
    let logits = forward(&params, &a).unwrap();
    assert_eq!(plain, loss(&logits, &a.labels).unwrap());
}

#[test]
fn archive_round_trip_is_bit_exact() {
    let tokens: Vec<(String, Vec<String>)> = vec![
        ("la".into(), vec!["p".into(), "a".into(), "t.e".into()]),
        ("it".into(), vec!["p".into(), "-".into(), "e".into()]),
    ];
    let vocab = Vocabulary::build(&[tokens], &["la".into(), "it".into()]).unwrap();
    let params = init_params::<f32>(&small_config(vocab.len()), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_archive(dir.path(), &params, &vocab).unwrap();
    let (loaded, vocab2) = load_archive(dir.path()).unwrap();
    assert_eq!(vocab2, vocab);
    for (a, b) in params.tensors().iter().zip(loaded.tensors()) {
        assert_eq!(a.name, b.name);
        assert!(a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(loaded.config, params.config);

    let blob = std::fs::read(dir.path().join("weights.bin")).unwrap();
    std::fs::write(dir.path().join("weights.bin"), &blob[..blob.len() - 4]).unwrap();
    assert!(load_archive(dir.path()).is_err());

    let wrong = init_params::<f32>(&small_config(vocab.len() + 1), 8).unwrap();
    assert!(save_archive(dir.path(), &wrong, &vocab).is_err());
}

//! Encoder contracts: patch indexing, attention locality, shape preservation,
//! zero-init gating, frame-permutation behavior, and agreement with an
//! independent spatial-only reference implementation.

use sta_core::adapt::init_stage1;
use sta_core::encoder::{patch_matrix, EncoderConfig, Model, Placement, TraceRequest};
use sta_core::params::ParamId;
use sta_core::rng::SeededRng;
use sta_core::synthvideo::{permute_frames, reverse_clip};
use sta_core::tape::{softmax_rows, Tape};
use sta_core::tensor::Tensor;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        frames: 4,
        height: 16,
        width: 16,
        patch_size: 8,
        embed_dim: 16,
        blocks: 2,
        spatial_heads: 2,
        head_dim: 8,
        head_scale: 0.5,
        projector_dim: 16,
        ..EncoderConfig::default()
    }
}

fn random_clip(config: &EncoderConfig, seed: u64) -> Tensor {
    let mut rng = SeededRng::derive(seed, "clip");
    Tensor::from_fn(
        &[config.frames, config.height, config.width, config.channels],
        |_| rng.uniform(0.0, 1.0),
    )
}

fn zero_params_matching(model: &mut Model, needle: &str) {
    for i in 0..model.params.len() {
        if model.params.name(ParamId(i)).contains(needle) {
            model.params.get_mut(ParamId(i)).value.data_mut().fill(0.0);
        }
    }
}

#[test]
fn patch_count_follows_grid() {
    let config = small_config();
    assert_eq!(config.n_patches(), 4);
}

#[test]
fn zero_clip_embeds_to_zero_tokens() {
    let config = small_config();
    let model = Model::new(config.clone(), 2, 1).unwrap();
    let clip = Tensor::zeros(&[4, 16, 16, 3]);
    let mut tape = Tape::new();
    let tokens = model.patchify_tape(&mut tape, &clip).unwrap();
    // bias is zero-initialized, so tokens are a linear map of zero pixels
    assert!(tape.value(tokens).data().iter().all(|v| *v == 0.0));
}

#[test]
fn one_hot_pixel_shifts_token_index_by_one_per_patch_column() {
    let config = small_config();
    let lit = |x: usize, y: usize| {
        // single bright pixel in frame 0
        let mut clip = Tensor::zeros(&[4, 16, 16, 3]);
        clip.data_mut()[(y * 16 + x) * 3] = 1.0;
        clip
    };
    let nonzero_row = |pm: &Tensor| -> usize {
        let (rows, cols) = pm.dims2();
        (0..rows)
            .find(|r| pm.data()[r * cols..(r + 1) * cols].iter().any(|v| *v != 0.0))
            .unwrap()
    };
    let a = patch_matrix(&lit(3, 5), &config).unwrap();
    let b = patch_matrix(&lit(3 + config.patch_size, 5), &config).unwrap();
    assert_eq!(nonzero_row(&b), nonzero_row(&a) + 1);
}

#[test]
fn patchify_rejects_extent_mismatch() {
    let config = small_config();
    let clip = Tensor::zeros(&[4, 16, 8, 3]);
    assert!(patch_matrix(&clip, &config).is_err());
}

#[test]
fn spatial_attention_with_zero_weights_is_identity() {
    let config = small_config();
    let mut model = Model::new(config.clone(), 2, 2).unwrap();
    zero_params_matching(&mut model, ".spatial.w");
    let mut rng = SeededRng::new(3);
    let x_val = Tensor::from_fn(&[config.tokens(), config.embed_dim], |_| rng.uniform(-1.0, 1.0));
    let mut tape = Tape::new();
    let x = tape.input(x_val.clone());
    let out = model.spatial_attention(&mut tape, x, 0, None).unwrap();
    assert_eq!(tape.value(out), &x_val);
}

#[test]
fn single_patch_attention_weight_is_one() {
    let config = EncoderConfig {
        height: 8,
        width: 8,
        blocks: 1,
        ..small_config()
    };
    assert_eq!(config.n_patches(), 1);
    let model = Model::new(config.clone(), 2, 4).unwrap();
    let clip = random_clip(&config, 5);
    let (_, maps) = model.encode_with_attention(&clip, 0).unwrap();
    for frame_map in &maps.spatial {
        assert_eq!(frame_map.shape(), &[1, 1]);
        assert_eq!(frame_map.data()[0], 1.0);
    }
}

#[test]
fn single_frame_temporal_weight_is_one() {
    let config = EncoderConfig {
        frames: 1,
        blocks: 1,
        ..small_config()
    };
    let model = Model::new(config.clone(), 2, 6).unwrap();
    let clip = random_clip(&config, 7);
    let (_, maps) = model.encode_with_attention(&clip, 0).unwrap();
    assert_eq!(maps.temporal.len(), config.n_patches());
    for patch_map in &maps.temporal {
        assert_eq!(patch_map.shape(), &[1, 1]);
        assert_eq!(patch_map.data()[0], 1.0);
    }
}

#[test]
fn spatial_attention_never_mixes_frames() {
    let config = EncoderConfig {
        temporal_enabled: false,
        ..small_config()
    };
    let model = Model::new(config.clone(), 2, 8).unwrap();
    let base = random_clip(&config, 9);
    let mut bumped = base.clone();
    // perturb every pixel of frame 2
    let frame = config.height * config.width * config.channels;
    for v in &mut bumped.data_mut()[2 * frame..3 * frame] {
        *v += 0.25;
    }
    let a = model.encode(&base).unwrap();
    let b = model.encode(&bumped).unwrap();
    let n = config.n_patches();
    let d = config.embed_dim;
    for t in 0..config.frames {
        let rows_a = &a.data()[t * n * d..(t + 1) * n * d];
        let rows_b = &b.data()[t * n * d..(t + 1) * n * d];
        if t == 2 {
            assert!(rows_a != rows_b, "perturbed frame must change");
        } else {
            assert_eq!(rows_a, rows_b, "frame {t} leaked across frames");
        }
    }
}

#[test]
fn temporal_attention_never_mixes_patches() {
    let config = small_config();
    let model = Model::new(config.clone(), 2, 10).unwrap();
    let mut rng = SeededRng::new(11);
    let x_val = Tensor::from_fn(&[config.tokens(), config.embed_dim], |_| rng.uniform(-1.0, 1.0));
    let mut bumped = x_val.clone();
    let n = config.n_patches();
    let d = config.embed_dim;
    let patch = 1;
    for t in 0..config.frames {
        for c in 0..d {
            bumped.data_mut()[(t * n + patch) * d + c] += 0.5;
        }
    }
    let run = |input: &Tensor| {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let out = model.temporal_attention(&mut tape, x, 0, None).unwrap();
        tape.value(out).clone()
    };
    let a = run(&x_val);
    let b = run(&bumped);
    for row in 0..config.tokens() {
        let ra = a.row(row);
        let rb = b.row(row);
        if row % n == patch {
            assert!(ra != rb);
        } else {
            assert_eq!(ra, rb, "patch {} leaked into row {row}", patch);
        }
    }
}

#[test]
fn pure_residual_block_is_identity() {
    let config = small_config();
    let mut model = Model::new(config.clone(), 2, 12).unwrap();
    zero_params_matching(&mut model, ".spatial.w");
    zero_params_matching(&mut model, ".temporal.w");
    zero_params_matching(&mut model, ".mlp.fc2.weight");
    let mut rng = SeededRng::new(13);
    let x_val = Tensor::from_fn(&[config.tokens(), config.embed_dim], |_| rng.uniform(-1.0, 1.0));
    let mut tape = Tape::new();
    let x = tape.input(x_val.clone());
    let out = model.block_forward(&mut tape, x, 0, None).unwrap();
    assert_eq!(tape.value(out), &x_val);
}

#[test]
fn block_preserves_token_shape() {
    let config = EncoderConfig {
        frames: 8,
        height: 32,
        width: 32,
        embed_dim: 32,
        spatial_heads: 2,
        head_dim: 16,
        head_scale: 0.5,
        blocks: 1,
        projector_dim: 32,
        ..small_config()
    };
    let model = Model::new(config.clone(), 2, 14).unwrap();
    let clip = random_clip(&config, 15);
    let out = model.encode(&clip).unwrap();
    assert_eq!(out.shape(), &[8, 16, 32]);
}

/// Independent spatial-only reference: plain loops on f64 slices, no tape.
mod reference {
    pub struct BlockWeights<'a> {
        pub ln1_gain: &'a [f64],
        pub ln1_bias: &'a [f64],
        pub wq: &'a [f64],
        pub wk: &'a [f64],
        pub wv: &'a [f64],
        pub wo: &'a [f64],
        pub ln2_gain: &'a [f64],
        pub ln2_bias: &'a [f64],
        pub fc1_w: &'a [f64],
        pub fc1_b: &'a [f64],
        pub fc2_w: &'a [f64],
        pub fc2_b: &'a [f64],
    }

    pub struct Dims {
        pub frames: usize,
        pub n: usize,
        pub d: usize,
        pub heads: usize,
        pub head_dim: usize,
        pub grid_w: usize,
        pub rope_base: f64,
        pub eps: f64,
    }

    fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (row_i, row) in x.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                out[row_i * d + i] = (row[i] - mean) * s * gain[i] + bias[i];
            }
        }
        out
    }

    fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = a[i * k + l];
                for j in 0..n {
                    out[i * n + j] += av * b[l * n + j];
                }
            }
        }
        out
    }

    fn rotate_2d(x: &mut [f64], dims: &Dims) {
        // first half of each head by patch row, second half by patch column
        let half = dims.head_dim / 2;
        let pairs = half / 2;
        for token in 0..dims.frames * dims.n {
            let patch = token % dims.n;
            let positions = [patch / dims.grid_w, patch % dims.grid_w];
            for h in 0..dims.heads {
                for (axis, &pos) in positions.iter().enumerate() {
                    for j in 0..pairs {
                        let freq = dims.rope_base.powf(-2.0 * j as f64 / half as f64);
                        let angle = pos as f64 * freq;
                        let (c, s) = (angle.cos(), angle.sin());
                        let base = token * dims.heads * dims.head_dim + h * dims.head_dim + axis * half + 2 * j;
                        let (x0, x1) = (x[base], x[base + 1]);
                        x[base] = x0 * c - x1 * s;
                        x[base + 1] = x0 * s + x1 * c;
                    }
                }
            }
        }
    }

    fn gelu(x: f64) -> f64 {
        let s = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (s * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn spatial_block(x: &[f64], w: &BlockWeights, dims: &Dims) -> Vec<f64> {
        let d = dims.d;
        let tokens = dims.frames * dims.n;
        let xn = layer_norm(x, w.ln1_gain, w.ln1_bias, dims.eps, d);
        let mut q = matmul(&xn, w.wq, tokens, d, d);
        let mut k = matmul(&xn, w.wk, tokens, d, d);
        let v = matmul(&xn, w.wv, tokens, d, d);
        rotate_2d(&mut q, dims);
        rotate_2d(&mut k, dims);

        let scale = 1.0 / (dims.head_dim as f64).sqrt();
        let mut ctx = vec![0.0; tokens * d];
        for frame in 0..dims.frames {
            for h in 0..dims.heads {
                let col = h * dims.head_dim;
                for qi in 0..dims.n {
                    let qrow = (frame * dims.n + qi) * d + col;
                    let mut logits = vec![0.0; dims.n];
                    for ki in 0..dims.n {
                        let krow = (frame * dims.n + ki) * d + col;
                        let mut dot = 0.0;
                        for c in 0..dims.head_dim {
                            dot += q[qrow + c] * k[krow + c];
                        }
                        logits[ki] = dot * scale;
                    }
                    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for l in logits.iter_mut() {
                        *l = (*l - maxv).exp();
                        sum += *l;
                    }
                    for (ki, l) in logits.iter().enumerate() {
                        let p = l / sum;
                        let vrow = (frame * dims.n + ki) * d + col;
                        for c in 0..dims.head_dim {
                            ctx[qrow + c] += p * v[vrow + c];
                        }
                    }
                }
            }
        }
        let proj = matmul(&ctx, w.wo, tokens, d, d);
        let z: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

        let zn = layer_norm(&z, w.ln2_gain, w.ln2_bias, dims.eps, d);
        let mut h1 = matmul(&zn, w.fc1_w, tokens, d, 4 * d);
        for (i, v) in h1.iter_mut().enumerate() {
            *v = gelu(*v + w.fc1_b[i % (4 * d)]);
        }
        let mut h2 = matmul(&h1, w.fc2_w, tokens, 4 * d, d);
        for (i, v) in h2.iter_mut().enumerate() {
            *v += w.fc2_b[i % d];
        }
        z.iter().zip(&h2).map(|(a, b)| a + b).collect()
    }
}

#[test]
fn temporal_disabled_block_matches_reference_implementation() {
    let config = EncoderConfig {
        temporal_enabled: false,
        blocks: 1,
        ..small_config()
    };
    let model = Model::new(config.clone(), 2, 20).unwrap();
    let get = |p: &str| model.params.by_path(p).unwrap().value.data();
    let weights = reference::BlockWeights {
        ln1_gain: get("blocks.0.spatial.ln.gain"),
        ln1_bias: get("blocks.0.spatial.ln.bias"),
        wq: get("blocks.0.spatial.wq"),
        wk: get("blocks.0.spatial.wk"),
        wv: get("blocks.0.spatial.wv"),
        wo: get("blocks.0.spatial.wo"),
        ln2_gain: get("blocks.0.mlp.ln.gain"),
        ln2_bias: get("blocks.0.mlp.ln.bias"),
        fc1_w: get("blocks.0.mlp.fc1.weight"),
        fc1_b: get("blocks.0.mlp.fc1.bias"),
        fc2_w: get("blocks.0.mlp.fc2.weight"),
        fc2_b: get("blocks.0.mlp.fc2.bias"),
    };
    let dims = reference::Dims {
        frames: config.frames,
        n: config.n_patches(),
        d: config.embed_dim,
        heads: config.spatial_heads,
        head_dim: config.head_dim,
        grid_w: config.grid().1,
        rope_base: config.rope_base,
        eps: 1e-5,
    };
    let mut rng = SeededRng::new(21);
    for trial in 0..50 {
        let x_val = Tensor::from_fn(&[config.tokens(), config.embed_dim], |_| rng.uniform(-1.0, 1.0));
        let expected = reference::spatial_block(x_val.data(), &weights, &dims);
        let mut tape = Tape::new();
        let x = tape.input(x_val);
        let out = model.block_forward(&mut tape, x, 0, None).unwrap();
        let max_diff = tape
            .value(out)
            .data()
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-12, "trial {trial}: max diff {max_diff}");
    }
}

#[test]
fn zero_block_encode_equals_patchify() {
    let config = EncoderConfig {
        blocks: 0,
        sta_placement: Placement::None,
        ..small_config()
    };
    let model = Model::new(config.clone(), 2, 22).unwrap();
    let clip = random_clip(&config, 23);
    let encoded = model.encode(&clip).unwrap();
    let mut tape = Tape::new();
    let tokens = model.patchify_tape(&mut tape, &clip).unwrap();
    assert_eq!(encoded.data(), tape.value(tokens).data());
}

#[test]
fn encode_is_deterministic() {
    let config = small_config();
    let clip = random_clip(&config, 25);
    let a = Model::new(config.clone(), 2, 24).unwrap().encode(&clip).unwrap();
    let b = Model::new(config, 2, 24).unwrap().encode(&clip).unwrap();
    assert_eq!(a, b);
}

#[test]
fn one_block_encode_is_patchify_then_block() {
    let config = EncoderConfig {
        blocks: 1,
        ..small_config()
    };
    let model = Model::new(config.clone(), 2, 26).unwrap();
    let clip = random_clip(&config, 27);
    let encoded = model.encode(&clip).unwrap();
    let mut tape = Tape::new();
    let tokens = model.patchify_tape(&mut tape, &clip).unwrap();
    let out = model.block_forward(&mut tape, tokens, 0, None).unwrap();
    assert_eq!(encoded.data(), tape.value(out).data());
}

#[test]
fn projector_identity_and_constant_cases() {
    let config = small_config();
    let mut model = Model::new(config.clone(), 2, 28).unwrap();
    let d = config.embed_dim;
    let mut rng = SeededRng::new(29);
    let x_val = Tensor::from_fn(&[config.tokens(), d], |_| rng.uniform(-1.0, 1.0));

    // identity weight, zero bias
    let id = model.params.id("projector.weight").unwrap();
    model.params.get_mut(id).value.data_mut().fill(0.0);
    for i in 0..d {
        model.params.get_mut(id).value.data_mut()[i * d + i] = 1.0;
    }
    let mut tape = Tape::new();
    let x = tape.input(x_val.clone());
    let out = model.project_tape(&mut tape, x).unwrap();
    assert_eq!(tape.value(out), &x_val);

    // zero weight, constant bias
    model.params.get_mut(id).value.data_mut().fill(0.0);
    let bid = model.params.id("projector.bias").unwrap();
    model.params.get_mut(bid).value.data_mut().fill(0.5);
    let mut tape = Tape::new();
    let x = tape.input(x_val);
    let out = model.project_tape(&mut tape, x).unwrap();
    assert!(tape.value(out).data().iter().all(|v| *v == 0.5));
}

#[test]
fn projection_matches_per_token_oracle() {
    let config = small_config();
    let model = Model::new(config.clone(), 2, 30).unwrap();
    let mut rng = SeededRng::new(31);
    let x_val = Tensor::from_fn(&[config.tokens(), config.embed_dim], |_| rng.uniform(-1.0, 1.0));
    let w = model.params.by_path("projector.weight").unwrap().value.clone();
    let b = model.params.by_path("projector.bias").unwrap().value.clone();
    let mut tape = Tape::new();
    let x = tape.input(x_val.clone());
    let out = model.project_tape(&mut tape, x).unwrap();
    let (d, d_out) = w.dims2();
    for token in 0..config.tokens() {
        for j in 0..d_out {
            let mut expect = b.data()[j];
            for c in 0..d {
                expect += x_val.data()[token * d + c] * w.data()[c * d_out + j];
            }
            let got = tape.value(out).data()[token * d_out + j];
            assert!((got - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn clip_embedding_has_unit_norm_and_self_similarity_one() {
    let config = small_config();
    let model = Model::new(config.clone(), 2, 32).unwrap();
    let clip = random_clip(&config, 33);
    let emb = model.clip_embedding(&clip).unwrap();
    assert!((emb.norm() - 1.0).abs() < 1e-12);
    let emb2 = model.clip_embedding(&clip).unwrap();
    let cos: f64 = emb.data().iter().zip(emb2.data()).map(|(a, b)| a * b).sum();
    assert!((cos - 1.0).abs() < 1e-12);
}

#[test]
fn zero_head_gives_uniform_class_distribution() {
    let config = small_config();
    let mut model = Model::new(config.clone(), 4, 34).unwrap();
    for p in ["head.weight", "head.bias"] {
        let id = model.params.id(p).unwrap();
        model.params.get_mut(id).value.data_mut().fill(0.0);
    }
    let clip = random_clip(&config, 35);
    let logits = model.class_logits(&clip).unwrap();
    let probs = softmax_rows(&logits);
    for v in probs.data() {
        assert!((v - 0.25).abs() < 1e-12);
    }
}

#[test]
fn mean_pool_matches_sum_oracle() {
    let config = small_config();
    let model = Model::new(config.clone(), 2, 36).unwrap();
    let clip = random_clip(&config, 37);
    let mut tape = Tape::new();
    let x = model.encode_tape(&mut tape, &clip, None).unwrap();
    let proj = model.project_tape(&mut tape, x).unwrap();
    let pooled = tape.mean_rows(proj);
    let proj_val = tape.value(proj).clone();
    let (rows, cols) = proj_val.dims2();
    for c in 0..cols {
        let mut sum = 0.0;
        for r in 0..rows {
            sum += proj_val.data()[r * cols + c];
        }
        let expect = sum / (config.tokens() as f64);
        assert!((tape.value(pooled).data()[c] - expect).abs() < 1e-12);
    }
}

#[test]
fn parameter_counts_match_arithmetic() {
    let model = Model::new(EncoderConfig::default(), 2, 38).unwrap();
    let counts = model.count_parameters();
    // D=64, head_dim=16, h_s=4, s=0.25 => h_t=1, d_t=16
    assert_eq!(counts.per_block_temporal_attention, 3 * 64 * 16 + 16 * 64);
    assert_eq!(counts.per_block_temporal_attention, 4096);
    assert_eq!(counts.per_block_spatial_attention, 3 * 64 * 64 + 64 * 64);
    assert_eq!(counts.per_block_spatial_attention, 16384);
    assert_eq!(counts.temporal_spatial_ratio(), 0.25);
    assert_eq!(counts.spatial_attention, 4 * 16384);
    assert_eq!(counts.temporal_attention, 4 * 4096);

    let full = Model::new(
        EncoderConfig {
            head_scale: 1.0,
            ..EncoderConfig::default()
        },
        2,
        38,
    )
    .unwrap();
    assert_eq!(full.count_parameters().temporal_spatial_ratio(), 1.0);

    let total_from_store = model.params.total_scalars();
    assert_eq!(counts.total(), total_from_store);
}

#[test]
fn zero_init_gating_makes_temporal_branch_invisible() {
    let config = small_config();
    let mut gated = Model::new(config.clone(), 2, 40).unwrap();
    init_stage1(&mut gated).unwrap();
    let disabled_config = EncoderConfig {
        temporal_enabled: false,
        ..config.clone()
    };
    // same seed => identical shared weights
    let mut disabled = Model::new(disabled_config, 2, 40).unwrap();
    init_stage1(&mut disabled).unwrap();
    for trial in 0..50 {
        let clip = random_clip(&config, 41 + trial);
        let a = gated.encode(&clip).unwrap();
        let b = disabled.encode(&clip).unwrap();
        assert!(
            a.max_abs_diff(&b) <= 1e-12,
            "trial {trial}: gating violated by {}",
            a.max_abs_diff(&b)
        );
    }
}

#[test]
fn frame_permutation_equivariance_without_temporal_attention() {
    let config = EncoderConfig {
        temporal_enabled: false,
        ..small_config()
    };
    let model = Model::new(config.clone(), 2, 50).unwrap();
    let mut rng = SeededRng::new(51);
    for trial in 0..10 {
        let clip = random_clip(&config, 52 + trial);
        let mut perm: Vec<usize> = (0..config.frames).collect();
        rng.shuffle(&mut perm);
        let encoded_permuted = model.encode(&permute_frames(&clip, &perm)).unwrap();
        let encoded = model.encode(&clip).unwrap();
        let permuted_encoded = permute_frames(&encoded, &perm);
        assert_eq!(
            encoded_permuted, permuted_encoded,
            "equivariance must be bit-exact (trial {trial})"
        );
    }
}

#[test]
fn temporal_attention_breaks_reversal_commutation() {
    let config = small_config();
    let model = Model::new(config.clone(), 2, 60).unwrap(); // random nonzero temporal wo
    let mut violated = 0;
    for trial in 0..10 {
        let clip = random_clip(&config, 61 + trial);
        let enc_rev = model.encode(&reverse_clip(&clip)).unwrap();
        let rev_enc = permute_frames(
            &model.encode(&clip).unwrap(),
            &(0..config.frames).rev().collect::<Vec<_>>(),
        );
        if enc_rev.max_abs_diff(&rev_enc) > 1e-6 {
            violated += 1;
        }
    }
    assert_eq!(violated, 10, "temporal attention must see frame order");
}

#[test]
fn attention_rows_are_stochastic_in_both_sub_blocks() {
    let config = small_config();
    let model = Model::new(config.clone(), 2, 70).unwrap();
    let clip = random_clip(&config, 71);
    for block in 0..config.blocks {
        let (_, maps) = model.encode_with_attention(&clip, block).unwrap();
        assert_eq!(maps.spatial.len(), config.frames);
        assert_eq!(maps.temporal.len(), config.n_patches());
        for m in maps.spatial.iter().chain(&maps.temporal) {
            let (rows, cols) = m.dims2();
            for r in 0..rows {
                let sum: f64 = m.data()[r * cols..(r + 1) * cols].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn traced_block_forward_exposes_trace_request() {
    let config = small_config();
    let model = Model::new(config.clone(), 2, 72).unwrap();
    let clip = random_clip(&config, 73);
    let mut req = TraceRequest {
        block: 1,
        spatial: None,
        temporal: None,
    };
    let mut tape = Tape::new();
    model.encode_tape(&mut tape, &clip, Some(&mut req)).unwrap();
    assert!(req.spatial.is_some());
    assert!(req.temporal.is_some());
}

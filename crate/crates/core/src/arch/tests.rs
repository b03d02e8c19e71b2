use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{finite_diff_check, Graph, Tensor, Var};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Random parameters with non-trivial biases, positional tables and norms.
fn busy_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".b") || name.ends_with(".pos") || name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
        if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
    p
}

fn with_forward<R>(
    cfg: &ModelConfig,
    params: &ModelParams,
    f: impl FnOnce(&mut Forward, &mut Vec<Var>) -> R,
    inputs: &[Tensor],
) -> R {
    let mut g = Graph::no_grad();
    let bound = params.bind(&mut g, false);
    let mut vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let mut fwd = Forward::new(&mut g, &bound, cfg, false);
    f(&mut fwd, &mut vars)
}

#[test]
fn tokenize_roundtrip_and_counts() {
    let x = rand_tensor(&[1, 64, 16, 16], 1);
    let mut g = Graph::no_grad();
    let v = g.constant(x.clone());
    let t = tokenize(&mut g, &v, 8, 1).unwrap();
    assert_eq!(t.shape(), [4, 64, 64]);
    assert_eq!(t.shape()[0] * t.shape()[1], 16 * 16);
    let back = detokenize(&mut g, &t, [1, 64, 16, 16], 8, 1).unwrap();
    assert_eq!(back.value(), &x);

    let whole = tokenize(&mut g, &v, 16, 1).unwrap();
    assert_eq!(whole.shape(), [1, 256, 64]);

    let patched = tokenize(&mut g, &v, 4, 2).unwrap();
    assert_eq!(patched.shape(), [4, 16, 256]);
    let back = detokenize(&mut g, &patched, [1, 64, 16, 16], 4, 2).unwrap();
    assert_eq!(back.value(), &x);

    assert!(tokenize(&mut g, &v, 5, 1).is_err());
}

#[test]
fn token_holds_its_pixel() {
    // token (window, position) must carry the channel vector of its pixel
    let x = rand_tensor(&[2, 3, 8, 8], 2);
    let mut g = Graph::no_grad();
    let v = g.constant(x.clone());
    let t = tokenize(&mut g, &v, 4, 1).unwrap();
    let (n, wy, wx, py, px) = (1, 1, 0, 2, 3);
    let group = n * 4 + wy * 2 + wx;
    let tok = py * 4 + px;
    for c in 0..3 {
        let pix = x.data()[((n * 3 + c) * 8 + wy * 4 + py) * 8 + wx * 4 + px];
        assert_eq!(t.value().data()[(group * 16 + tok) * 3 + c], pix);
    }
}

#[test]
fn mhsa_with_zero_weights_is_zero() {
    let cfg = ModelConfig::tiny(1);
    let params = ModelParams::zeros(&cfg);
    let out = with_forward(&cfg, &params, |f, v| f.mhsa("sb.tm.mhsa", &v[0]).unwrap(), &[rand_tensor(&[3, 16, 8], 3)]);
    assert!(out.value().data().iter().all(|&x| x == 0.0));
}

/// Direct loop implementation of multi-head attention used as an oracle.
fn naive_mhsa(t: &Tensor, p: &ModelParams, prefix: &str, heads: usize, scale: f64, eps: f64) -> Tensor {
    let s = t.shape();
    let (groups, tokens, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let get = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap().data().to_vec();
    let (gamma, beta) = (get("ln.gamma"), get("ln.beta"));
    let affine = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        (0..b.len()).map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>()).collect()
    };
    let mut out = Vec::new();
    for gi in 0..groups {
        let rows: Vec<Vec<f64>> = (0..tokens)
            .map(|ti| {
                let x = &t.data()[(gi * tokens + ti) * d..(gi * tokens + ti + 1) * d];
                let mean = x.iter().sum::<f64>() / d as f64;
                let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                x.iter().enumerate().map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma[j] + beta[j]).collect()
            })
            .collect();
        let proj = |n: &str| -> Vec<Vec<f64>> { rows.iter().map(|r| affine(r, &get(&format!("{n}.w")), &get(&format!("{n}.b")))).collect() };
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        let mut mixed = vec![vec![0.0; d]; tokens];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            for i in 0..tokens {
                let scores: Vec<f64> =
                    (0..tokens).map(|j| r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / scale).collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in r.clone() {
                    mixed[i][c] = (0..tokens).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        for row in &mixed {
            out.extend(affine(row, &get("proj.w"), &get("proj.b")));
        }
    }
    Tensor::new(s, out).unwrap()
}

#[test]
fn mhsa_matches_naive_oracle_for_each_head_count() {
    for heads in [1, 2, 4] {
        let cfg = ModelConfig { heads, ..ModelConfig::tiny(1) };
        let params = busy_params(&cfg, 10 + heads as u64);
        let t = rand_tensor(&[3, 16, 8], 4);
        let got = with_forward(&cfg, &params, |f, v| f.mhsa("sb.tm.mhsa", &v[0]).unwrap(), &[t.clone()]);
        let want = naive_mhsa(&t, &params, "sb.tm.mhsa", heads, cfg.scale(), cfg.ln_eps);
        assert!(got.value().max_abs_diff(&want) < 1e-10, "heads={heads}");
    }
}

#[test]
fn mhsa_heads_equivalent_under_head_zero_support() {
    // with Q, K, V supported on the first head's block and a shared scale,
    // four heads reproduce the single-head formula
    let base = ModelConfig { attn_scale: Some(1.7), ..ModelConfig::tiny(1) };
    let one = ModelConfig { heads: 1, ..base.clone() };
    let four = ModelConfig { heads: 4, ..base };
    let mut params = busy_params(&one, 5);
    let d = one.embed_dim();
    for proj in ["q", "k", "v"] {
        let w = params.get_mut(&format!("sb.tm.mhsa.{proj}.w")).unwrap();
        for o in d / 4..d {
            w.data_mut()[o * d..(o + 1) * d].fill(0.0);
        }
        let b = params.get_mut(&format!("sb.tm.mhsa.{proj}.b")).unwrap();
        b.data_mut()[d / 4..].fill(0.0);
    }
    let t = rand_tensor(&[2, 16, 8], 6);
    let a = with_forward(&one, &params, |f, v| f.mhsa("sb.tm.mhsa", &v[0]).unwrap(), &[t.clone()]);
    let b = with_forward(&four, &params, |f, v| f.mhsa("sb.tm.mhsa", &v[0]).unwrap(), &[t]);
    assert!(a.value().max_abs_diff(b.value()) < 1e-10);
}

#[test]
fn mhsa_single_token_reduces_to_value_path() {
    let cfg = ModelConfig::tiny(1);
    let params = busy_params(&cfg, 7);
    let t = rand_tensor(&[5, 1, 8], 8);
    let got = with_forward(&cfg, &params, |f, v| f.mhsa("sb.tm.mhsa", &v[0]).unwrap(), &[t.clone()]);
    let mut g = Graph::no_grad();
    let b = params.bind(&mut g, false);
    let x = g.constant(t);
    let n = g.layer_norm(&x, b.get("sb.tm.mhsa.ln.gamma").unwrap(), b.get("sb.tm.mhsa.ln.beta").unwrap(), cfg.ln_eps).unwrap();
    let v = g.linear(&n, b.get("sb.tm.mhsa.v.w").unwrap(), b.get("sb.tm.mhsa.v.b").unwrap()).unwrap();
    let want = g.linear(&v, b.get("sb.tm.mhsa.proj.w").unwrap(), b.get("sb.tm.mhsa.proj.b").unwrap()).unwrap();
    assert!(got.value().max_abs_diff(want.value()) < 1e-12);
}

#[test]
fn residual_blocks_are_identity_under_zero_weights() {
    for cfg in [ModelConfig::tiny(1), ModelConfig { token_patch: 2, ..ModelConfig::tiny(1) }] {
        let params = ModelParams::zeros(&cfg);
        let x = rand_tensor(&[2, cfg.width, 8, 8], 9);
        let tm = with_forward(&cfg, &params, |f, v| f.tm("sb.tm", &v[0]).unwrap(), &[x.clone()]);
        assert_eq!(tm.value(), &x);
        let itm = with_forward(&cfg, &params, |f, v| f.itm("subnet3.itm1", &v[0]).unwrap(), &[x.clone()]);
        assert_eq!(itm.value(), &x);
        let tok = rand_tensor(&[4, 16, cfg.embed_dim()], 10);
        let cfe = with_forward(&cfg, &params, |f, v| f.cfe("sb.tm.cfe", &v[0]).unwrap(), &[tok.clone()]);
        assert_eq!(cfe.value(), &tok);
    }
}

#[test]
fn cfe_hidden_width() {
    let cfg = ModelConfig::tiny(1);
    let p = ModelParams::zeros(&cfg);
    assert_eq!(p.get("sb.tm.cfe.fc1.w").unwrap().shape(), [cfg.cfe_hidden_ratio * 8, 8]);
    assert_eq!(p.get("sb.tm.cfe.fc2.w").unwrap().shape(), [8, 32]);
}

#[test]
fn tm_paper_scale_shape() {
    let cfg = ModelConfig::paper(3);
    let params = ModelParams::init(&cfg, 1);
    let x = rand_tensor(&[1, 64, 48, 48], 11);
    let y = with_forward(&cfg, &params, |f, v| f.tm("sb.tm", &v[0]).unwrap(), &[x]);
    assert_eq!(y.shape(), [1, 64, 48, 48]);
}

#[test]
fn fm_cases() {
    let cfg = ModelConfig::tiny(1);
    let c = cfg.width;
    let mut params = ModelParams::zeros(&cfg);
    // delta depthwise kernels and a pointwise average of the two halves
    let dw = params.get_mut("subnet2.fm1.dw.w").unwrap();
    for ch in 0..2 * c {
        dw.data_mut()[ch * 9 + 4] = 1.0;
    }
    let pw = params.get_mut("subnet2.fm1.pw.w").unwrap();
    for o in 0..c {
        pw.data_mut()[o * 2 * c + o] = 0.5;
        pw.data_mut()[o * 2 * c + c + o] = 0.5;
    }
    let x = rand_tensor(&[1, c, 8, 8], 12);
    let y = with_forward(&cfg, &params, |f, v| f.fm("subnet2.fm1", &[&v[0], &v[0]]).unwrap(), &[x.clone()]);
    assert!(y.value().max_abs_diff(&x) < 1e-15);

    let mut params = ModelParams::zeros(&cfg);
    params.get_mut("subnet3.fm3.pw.b").unwrap().data_mut()[3] = 0.75;
    let y = with_forward(
        &cfg,
        &params,
        |f, v| f.fm("subnet3.fm3", &[&v[0], &v[0], &v[0]]).unwrap(),
        &[x.clone()],
    );
    for (ch, plane) in y.value().data().chunks(64).enumerate() {
        let want = if ch == 3 { 0.75 } else { 0.0 };
        assert!(plane.iter().all(|&v| v == want));
    }

    let odd = rand_tensor(&[1, c, 4, 8], 13);
    let err = with_forward(&cfg, &params, |f, v| f.fm("subnet2.fm1", &[&v[0], &v[1]]).is_err(), &[x, odd]);
    assert!(err);
}

#[test]
fn fm_three_inputs_at_paper_width() {
    let cfg = ModelConfig::paper(3);
    let p = ModelParams::init(&cfg, 2);
    assert_eq!(p.get("subnet3.fm3.dw.w").unwrap().shape(), [192, 1, 3, 3]);
    let x = rand_tensor(&[1, 64, 8, 8], 14);
    let y = with_forward(&cfg, &p, |f, v| f.fm("subnet3.fm3", &[&v[0], &v[0], &v[0]]).unwrap(), &[x]);
    assert_eq!(y.shape(), [1, 64, 8, 8]);
}

#[test]
fn zero_weight_block_outputs() {
    let cfg = ModelConfig::tiny(3);
    let params = ModelParams::zeros(&cfg);
    let i_n = rand_tensor(&[1, 3, 8, 8], 15);
    let o_sb_in = rand_tensor(&[1, 8, 8, 8], 16);
    let (o_sb, s1, s2, o_pb, i_c) = with_forward(
        &cfg,
        &params,
        |f, v| {
            let o_sb = f.sb(&v[0]).unwrap();
            let s1 = f.subnet1(&v[1]).unwrap();
            let s2 = f.subnet2(&v[1], &s1).unwrap();
            let o_pb = f.subnet3(&v[1], &s2.o_it2, &s1.o_subnet1, &s2.o_subnet2).unwrap();
            let i_c = f.rb(&v[0], &v[1]).unwrap();
            (o_sb, s1, s2, o_pb, i_c)
        },
        &[i_n.clone(), o_sb_in.clone()],
    );
    assert!(o_sb.value().data().iter().all(|&v| v == 0.0));
    assert_eq!(s1.o_it.value(), &o_sb_in);
    assert_eq!(s1.o_subnet1.value(), &o_sb_in);
    assert_eq!(s1.tm_o_it.value(), &o_sb_in);
    for v in [&s2.o_it3, &s2.o_it2, &s2.o_subnet2, &o_pb] {
        assert!(v.value().data().iter().all(|&x| x == 0.0));
    }
    assert_eq!(i_c.value(), &i_n);
    assert_eq!(i_c.shape()[1], 3);
}

#[test]
fn first_conv_lifts_color_input() {
    let cfg = ModelConfig::paper(3);
    let params = ModelParams::init(&cfg, 3);
    let y = with_forward(&cfg, &params, |f, v| f.sb(&v[0]).unwrap(), &[rand_tensor(&[1, 3, 8, 8], 17)]);
    assert_eq!(y.shape(), [1, 64, 8, 8]);
}

/// Finite-difference check of a block over a sample of the parameters whose
/// names start with `prefix`, plus the block input.
fn block_gradcheck(prefix: &str, input_shape: &[usize], tol: f64, run: impl Fn(&mut Forward, &Var) -> Var) {
    let cfg = ModelConfig::tiny(1);
    let params = busy_params(&cfg, 21);
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut point: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    point.push(rand_tensor(input_shape, 22));

    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut coords = Vec::new();
    for (i, n) in names.iter().enumerate() {
        // the key bias shifts every score of a query equally, so softmax
        // makes its gradient exactly zero and only roundoff is left to compare
        if n.starts_with(prefix) && !n.ends_with(".k.b") {
            for _ in 0..3 {
                coords.push((i, rng.random_range(0..point[i].len())));
            }
        }
    }
    for _ in 0..10 {
        coords.push((names.len(), rng.random_range(0..point[names.len()].len())));
    }

    let report = finite_diff_check(
        |g, vs| {
            let bound = BoundParams::from_vars(names.iter().cloned().zip(vs.iter().cloned()));
            let x = vs.last().unwrap().clone();
            let y = {
                let mut f = Forward::new(g, &bound, &cfg, false);
                run(&mut f, &x)
            };
            let p = g.constant(rand_tensor(y.shape(), 23));
            let yp = g.mul(&y, &p)?;
            Ok(g.sum(&yp))
        },
        &point,
        Some(&coords),
        1e-5,
        tol,
    )
    .unwrap();
    assert!(report.num_checked() >= coords.len() / 2, "{} of {} skipped", report.num_skipped(), coords.len());
    for c in report.failures() {
        eprintln!("{} {:?}", names.get(c.input).map(String::as_str).unwrap_or("input"), c);
    }
    assert!(report.passed(), "{prefix}: max rel err {:.3e}", report.max_rel_err());
}

#[test]
fn tm_gradients() {
    block_gradcheck("sb.tm.", &[1, 8, 8, 8], 1e-4, |f, x| f.tm("sb.tm", x).unwrap());
}

#[test]
fn cfe_gradients() {
    block_gradcheck("sb.tm.cfe.", &[4, 16, 8], 1e-5, |f, x| f.cfe("sb.tm.cfe", x).unwrap());
}

#[test]
fn itm_gradients() {
    block_gradcheck("subnet3.itm1.", &[1, 8, 8, 8], 1e-4, |f, x| f.itm("subnet3.itm1", x).unwrap());
}

#[test]
fn sb_gradients() {
    block_gradcheck("sb.", &[1, 1, 8, 8], 1e-4, |f, x| f.sb(x).unwrap());
}

#[test]
fn subnet2_gradients() {
    block_gradcheck("subnet", &[1, 8, 8, 8], 1e-4, |f, x| {
        let s1 = f.subnet1(x).unwrap();
        f.subnet2(x, &s1).unwrap().o_subnet2
    });
}

#[test]
fn rb_gradients() {
    block_gradcheck("rb.", &[1, 8, 8, 8], 1e-4, |f, x| {
        let i_n = f.graph().constant(rand_tensor(&[1, 1, 8, 8], 30));
        f.rb(&i_n, x).unwrap()
    });
}

#[test]
fn forward_reports_first_non_finite_layer() {
    let cfg = ModelConfig::tiny(1);
    let mut params = ModelParams::init(&cfg, 4);
    params.get_mut("subnet2.conv3.w").unwrap().data_mut()[0] = f64::NAN;
    let err = ctnet_forward(&rand_tensor(&[1, 1, 8, 8], 31), &params, &cfg, false).unwrap_err();
    match err {
        crate::Error::Numeric { layer } => assert_eq!(layer, "subnet2.conv3"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn forward_rejects_channel_mismatch() {
    let cfg = ModelConfig::tiny(1);
    let params = ModelParams::zeros(&cfg);
    assert!(ctnet_forward(&rand_tensor(&[1, 3, 8, 8], 32), &params, &cfg, false).is_err());
}

#[test]
fn closed_form_count_matches_layout() {
    let mut cfgs = vec![ModelConfig::paper(1), ModelConfig::paper(3), ModelConfig::tiny(1)];
    cfgs.push(ModelConfig { token_patch: 3, window: 4, ..ModelConfig::paper(3) });
    for (_, ab) in Ablation::variants() {
        cfgs.push(ModelConfig::tiny(3).with_ablation(ab));
    }
    for cfg in cfgs {
        let brute: usize = param_specs(&cfg).iter().map(|s| s.numel()).sum();
        assert_eq!(count_parameters(&cfg), brute as u64, "{cfg:?}");
        assert_eq!(ModelParams::init(&cfg, 0).numel(), brute);
    }
}

#[test]
fn every_ablation_drops_parameters_and_still_runs() {
    let full = ModelConfig::tiny(1);
    let x = rand_tensor(&[1, 1, 8, 8], 40);
    for (label, ab) in Ablation::variants() {
        let cfg = full.clone().with_ablation(ab);
        assert!(count_parameters(&cfg) < count_parameters(&full), "{label}");
        let params = ModelParams::init(&cfg, 1);
        let (y, trace) = ctnet_forward(&x, &params, &cfg, true).unwrap();
        assert_eq!(y.shape(), x.shape());
        let names: Vec<&str> = trace.as_ref().unwrap().names().collect();
        assert_eq!(names, trace_names(&cfg), "{label}");
    }
}

#[test]
fn trace_names_match_full_forward() {
    let cfg = ModelConfig::tiny(1);
    let params = ModelParams::init(&cfg, 2);
    let (_, trace) = ctnet_forward(&rand_tensor(&[1, 1, 8, 8], 41), &params, &cfg, true).unwrap();
    let trace = trace.unwrap();
    let names: Vec<&str> = trace.names().collect();
    assert_eq!(names, trace_names(&cfg));
    for (_, t) in trace.iter() {
        assert_eq!(t.rank(), 4);
        assert_eq!(&t.shape()[2..], [8, 8]);
    }
}

#[test]
fn odd_sizes_are_padded_and_cropped() {
    let cfg = ModelConfig::tiny(1);
    let params = ModelParams::init(&cfg, 3);
    let x = rand_tensor(&[1, 1, 7, 10], 42);
    let (y, _) = ctnet_forward(&x, &params, &cfg, false).unwrap();
    assert_eq!(y.shape(), [1, 1, 7, 10]);
    // zero weights still give the identity denoiser after padding and crop
    let (y, _) = ctnet_forward(&x, &ModelParams::zeros(&cfg), &cfg, false).unwrap();
    assert_eq!(y, x);
}

#[test]
fn every_parameter_receives_gradient() {
    // residual reachability: a nonzero gradient reaches every parameter tensor
    let cfg = ModelConfig::tiny(1);
    let params = busy_params(&cfg, 4);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(rand_tensor(&[1, 1, 8, 8], 43));
    let (y, _) = ctnet_forward_graph(&mut g, &bound, &cfg, &x, false).unwrap();
    let sq = g.mul(&y, &y).unwrap();
    let loss = g.sum(&sq);
    g.backward(&loss).unwrap();
    for (name, grad) in bound.grads(&g, &params) {
        if name.ends_with(".k.b") {
            continue;
        }
        assert!(grad.data().iter().any(|&v| v != 0.0), "{name} got no gradient");
    }
}

#[test]
fn paper_config_count_is_reported() {
    // token_patch = 1 keeps D = C = 64
    let n = count_parameters(&ModelConfig::paper(3));
    assert_eq!(n, param_specs(&ModelConfig::paper(3)).iter().map(|s| s.numel() as u64).sum::<u64>());
    assert!(n > 1_000_000 && n < 1_300_000, "{n}");
}

#[test]
fn perturbing_any_parameter_changes_a_trace_entry() {
    let cfg = ModelConfig::tiny(1);
    let params = busy_params(&cfg, 5);
    let x = rand_tensor(&[1, 1, 8, 8], 44);
    let (_, base) = ctnet_forward(&x, &params, &cfg, true).unwrap();
    let base = base.unwrap();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let mut p = params.clone();
        p.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v += 0.05);
        let (_, trace) = ctnet_forward(&x, &p, &cfg, true).unwrap();
        let moved = trace.unwrap().iter().zip(base.iter()).map(|((_, a), (_, b))| a.max_abs_diff(b)).fold(0.0, f64::max);
        if name.ends_with(".k.b") {
            // shifts every score of a query equally: invisible through softmax
            assert!(moved < 1e-12, "{name} moved the trace by {moved:e}");
        } else {
            assert!(moved > 1e-9, "{name} does not reach any trace entry");
        }
    }
}

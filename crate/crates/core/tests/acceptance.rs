//! Acceptance suite: one PASS/FAIL line per criterion, each at its stated
//! tolerance. Run with `cargo test -p ctnet --test acceptance`.

use std::collections::BTreeSet;
use std::time::Instant;

use ctnet::arch::*;
use ctnet::data::*;
use ctnet::metrics::*;
use ctnet::tensor::{finite_diff_check, Graph, Tensor};
use ctnet::train::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.0..1.0))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let r = model_gradcheck(&ModelConfig::tiny(1), 7, 128, 1e-5, 1e-4).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let rep = &r.report;
    ensure!(rep.num_checked() >= 100, "only {} coordinates checked ({} skipped at ReLU kinks)", rep.num_checked(), rep.num_skipped());
    if let Some(bad) = rep.failures().next() {
        return Err(format!(
            "{} [{}]: analytic {:e} numeric {:e} rel err {:.3e}",
            r.name_of(bad.input),
            bad.index,
            bad.analytic,
            bad.numeric,
            bad.rel_err
        ));
    }
    ensure!(secs < 300.0, "took {secs:.1}s");
    Ok(format!(
        "{} coords checked, {} skipped at kinks, max rel err {:.2e}, {secs:.1}s",
        rep.num_checked(),
        rep.num_skipped(),
        rep.max_rel_err()
    ))
}

fn zero_identity() -> Outcome {
    let sizes = [(7, 11), (13, 8), (16, 16), (33, 20), (64, 64)];
    let mut n = 0;
    for cfg in [ModelConfig::paper(1), ModelConfig::paper(3), ModelConfig::tiny(1), ModelConfig::tiny(3)] {
        let params = ModelParams::zeros(&cfg);
        for (i, &(h, w)) in sizes.iter().enumerate() {
            let x = rand_tensor(&[1, cfg.image_channels, h, w], i as u64);
            let (y, _) = ctnet_forward(&x, &params, &cfg, false).map_err(|e| e.to_string())?;
            ensure!(y == x, "{}ch width {} at {h}x{w}: output differs from input", cfg.image_channels, cfg.width);
            n += 1;
        }
    }
    Ok(format!("{n} gray/color cases, 7x11 .. 64x64, bit-exact"))
}

fn trace_coverage() -> Outcome {
    let required = [
        "sb.conv1", "sb.conv2", "sb.conv3", "O_IN_TM", "sb.tm.O_MHSA", "sb.tm.O_IN_CFE", "O_SB", "O_It",
        "subnet1.tm", "O_SubNet1", "subnet2.tm1", "O_It3", "O_It2", "subnet2.tm3", "O_SubNet2", "subnet3.fm1",
        "subnet3.fm2", "subnet3.itm1.O_FCL", "subnet3.itm1", "subnet3.fm3", "subnet3.itm2", "O_PB", "rb.conv", "I_C",
    ];
    for cfg in [ModelConfig::tiny(1), ModelConfig::tiny(3)] {
        let params = ModelParams::init(&cfg, 1);
        let x = rand_tensor(&[1, cfg.image_channels, 8, 12], 3);
        let (_, trace) = ctnet_forward(&x, &params, &cfg, true).map_err(|e| e.to_string())?;
        let trace = trace.ok_or("no trace returned")?;
        let got: Vec<String> = trace.names().map(String::from).collect();
        ensure!(got == trace_names(&cfg), "trace names differ from the documented list");
        for r in required {
            ensure!(got.iter().any(|g| g == r), "missing trace entry {r}");
        }
        for (name, t) in trace.iter() {
            ensure!(t.shape()[2..] == [8, 12], "{name} has shape {:?}", t.shape());
        }
    }
    Ok(format!("{} named entries, documented list matched exactly", trace_names(&ModelConfig::tiny(1)).len()))
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let model = ModelConfig::tiny(1);
    let cfg = TrainConfig { seed: 11, noise: NoiseSpec::fixed(25.0, 11), ..TrainConfig::tiny() };
    let sources: Vec<ImageBuffer> = (0..8).map(|s| synth_image(48, 48, 1, s)).collect();
    let data = PatchDataset::from_images(&sources, cfg.patch.clone(), cfg.seed).map_err(|e| e.to_string())?;
    ensure!(data.len() == 64 && data.patches[0].height == 16, "dataset is not 64 patches of 16x16");
    let held_out: Vec<(String, ImageBuffer)> =
        (0..8).map(|s| (format!("toy{s}"), synth_image(32, 32, 1, 1000 + s))).collect();

    let run = || -> Result<(Checkpoint, Vec<f64>), String> {
        let mut tr = Trainer::new(model.clone(), ModelParams::init(&model, cfg.seed), cfg.clone(), &data, &[])
            .map_err(|e| e.to_string())?;
        let mut losses = Vec::new();
        while tr.step_count() < 200 {
            losses.push(tr.step().map_err(|e| e.to_string())?);
        }
        Ok((tr.checkpoint(), losses))
    };
    let (ckpt, losses) = run()?;
    let (again, _) = run()?;

    let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    let table = evaluate(&ckpt.params, &model, "toy", &held_out, &[25.0], 5).map_err(|e| e.to_string())?;
    let (_, _, trained, identity) = table.averages()[0].clone();
    let same = ckpt.to_bytes() == again.to_bytes();
    let detail = format!(
        "loss {first:.4} -> {last:.4} (x{:.2}), held-out PSNR {trained:.2} dB vs identity {identity:.2} dB, {:.0}s",
        last / first,
        start.elapsed().as_secs_f64()
    );
    ensure!(last <= 0.5 * first, "loss did not halve: {detail}");
    ensure!(trained >= identity + 2.0, "PSNR gain below 2 dB: {detail}");
    ensure!(same, "two runs with the same seed gave different checkpoints");
    Ok(detail + ", checkpoints bit-identical")
}

fn optimizer_schedule() -> Outcome {
    let c = TrainConfig::default();
    for (epoch, want) in [(0, 2e-4), (16, 1e-4), (32, 1.5625e-6)] {
        ensure!(lr_at(epoch, &c) == want, "lr_at({epoch}) = {:e}, want {want:e}", lr_at(epoch, &c));
    }
    // (m, v, p) after each step of g = 1, -2, 0.5 from p = 1 at lr 0.1, computed at 40 digits
    let table = [
        (0.1, 0.01, 0.900_000_000_999_999_99),
        (-0.11, 0.0499, 0.936_560_772_102_605_4),
        (-0.049, 0.051901, 0.950_238_830_667_981_8),
    ];
    let adam = AdamConfig { beta1: c.beta1, beta2: c.beta2, eps: c.eps };
    let mut p = ModelParams::from_entries(vec![("x.w".into(), Tensor::scalar(1.0))]).map_err(|e| e.to_string())?;
    let mut s = AdamState::new(&p);
    let mut worst: f64 = 0.0;
    for (g, (m, v, want)) in [1.0, -2.0, 0.5].into_iter().zip(table) {
        adam_step(&mut p, &[("x.w".into(), Tensor::scalar(g))], &mut s, 0.1, &adam).map_err(|e| e.to_string())?;
        let got = p.get("x.w").unwrap().data()[0];
        for err in [got - want, s.moments[0].1.data()[0] - m, s.moments[0].2.data()[0] - v] {
            worst = worst.max(err.abs());
        }
    }
    ensure!(worst < 1e-12, "adam deviates from the reference table by {worst:e}");
    Ok(format!("lr 2e-4 / 1e-4 / 1.5625e-6 exact; adam 3-step max deviation {worst:.1e}"))
}

fn loss_contract() -> Outcome {
    let mut g = Graph::no_grad();
    let mut pred = Tensor::zeros([1, 1, 3, 3]);
    pred.data_mut()[4] = 2.0;
    let (a, b) = (g.constant(pred), g.constant(Tensor::zeros([1, 1, 3, 3])));
    let l = mse_loss(&mut g, &a, &b, LossReduction::PerSample).map_err(|e| e.to_string())?.value().item().unwrap();
    ensure!(l == 2.0, "single-pixel case gives {l}");
    let same = mse_loss(&mut g, &a, &a, LossReduction::PerSample).unwrap().value().item().unwrap();
    ensure!(same == 0.0, "equal inputs give {same}");

    let p = rand_tensor(&[4, 1, 3, 3], 1);
    let t = rand_tensor(&[4, 1, 3, 3], 2);
    let mut g = Graph::new();
    let (pv, tv) = (g.param(p.clone()), g.constant(t.clone()));
    let loss = mse_loss(&mut g, &pv, &tv, LossReduction::PerSample).unwrap();
    g.backward(&loss).unwrap();
    let grad = g.grad(&pv).unwrap();
    let closed = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) / 4.0);
    let dev = grad.data().iter().zip(closed).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure!(dev < 1e-15, "gradient differs from (pred - target)/n by {dev:e}");
    let fd = finite_diff_check(
        |g, v| {
            let tv = g.constant(t.clone());
            mse_loss(g, &v[0], &tv, LossReduction::PerSample)
        },
        &[p],
        None,
        1e-5,
        1e-6,
    )
    .map_err(|e| e.to_string())?;
    ensure!(fd.passed(), "finite differences: max rel err {:e}", fd.max_rel_err());
    Ok(format!("2.0 hand case; finite-difference max rel err {:.1e}", fd.max_rel_err()))
}

fn psnr_oracle() -> Outcome {
    let flat = |v: f64| ImageBuffer::new(8, 8, 1, vec![v; 64]).unwrap();
    let same = psnr(&flat(0.4), &flat(0.4), 1.0).unwrap();
    ensure!(same == f64::INFINITY && format_db(same) == "inf", "identical images give {same}");
    let v = psnr(&flat(0.2), &flat(0.2 + 16.0 / 255.0), 1.0).unwrap();
    ensure!((v - 24.0487).abs() < 1e-3, "uniform 16/255 difference gives {v}");
    let z = psnr(&flat(0.0), &flat(1.0), 1.0).unwrap();
    ensure!(z.abs() < 1e-12, "MSE = peak^2 gives {z}");
    Ok(format!("inf, {v:.4} dB, {z} dB"))
}

fn noise_pipeline() -> Outcome {
    let zero = ImageBuffer::zeros(1000, 1000, 1);
    let (noisy, _) = add_awgn_indexed(&zero, &NoiseSpec::fixed(25.0, 3), 0, 0);
    let n = noisy.len() as f64;
    let mean = noisy.data.iter().sum::<f64>() / n;
    let std = (noisy.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let rel = (std * 255.0 / 25.0 - 1.0).abs();
    ensure!(rel <= 0.004, "sample std {:.4} (8-bit units) is {:.3}% off", std * 255.0, rel * 100.0);

    let spec = NoiseSpec::blind(0.0, 55.0, 4);
    let px = ImageBuffer::zeros(1, 1, 1);
    let bins = 11;
    let draws = 20_000;
    let mut counts = vec![0usize; bins];
    for i in 0..draws {
        let (_, s) = add_awgn_indexed(&px, &spec, 0, i);
        ensure!((0.0..=55.0).contains(&s), "blind sigma {s} out of range");
        counts[((s / 55.0 * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let expect = draws as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
    ensure!(p > 0.01, "blind sigma histogram chi2 = {chi2:.2}, p = {p:.4}");

    let probe = ImageBuffer::new(3, 4, 1, (0..12).map(f64::from).collect()).unwrap();
    let ways: Vec<ImageBuffer> = (0..8).map(|w| augment(&probe, w).unwrap()).collect();
    for a in 0..8 {
        ensure!(augment(&ways[a], inverse_way(a)).unwrap() == probe, "way {a} is not undone by its inverse");
        if a % 2 == 1 || a == 4 {
            ensure!(augment(&ways[a], a).unwrap() == probe, "way {a} is not an involution");
        }
        for b in 0..8 {
            let ab = augment(&ways[a], b).unwrap();
            ensure!(ways.contains(&ab), "ways {a} then {b} leave the group");
        }
    }
    Ok(format!(
        "std {:.3}/255 ({:.2}% off), blind chi2 {chi2:.2} p={p:.3}, D4 closure and inverses hold",
        std * 255.0,
        rel * 100.0
    ))
}

fn random_orthogonal(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|a| a / norm).collect());
    }
    Tensor::from_fn([n, n], |i| cols[i % n][i / n])
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn([n, m], |idx| (0..k).map(|j| a.data()[idx / m * k + j] * b.data()[j * m + idx % m]).sum())
}

fn cka_checks() -> Outcome {
    let x = rand_tensor(&[40, 6], 1);
    let y = Tensor::from_fn([40, 4], |i| (i as f64 * 0.37).sin() + x.data()[i / 4 * 6] * 0.5);
    let self_sim = linear_cka(&x, &x).map_err(|e| e.to_string())?;
    ensure!((self_sim - 1.0).abs() < 1e-10, "CKA(X, X) = {self_sim}");
    let base = linear_cka(&x, &y).unwrap();
    let rot = linear_cka(&matmul(&x, &random_orthogonal(6, 2)), &y).unwrap();
    let scaled = linear_cka(&x, &y.map(|v| v * 7.5)).unwrap();
    ensure!((rot - base).abs() < 1e-10, "orthogonal transform moved CKA by {:e}", rot - base);
    ensure!((scaled - base).abs() < 1e-10, "isotropic scaling moved CKA by {:e}", scaled - base);

    // 3 samples, 2 features, against HSIC with explicit centering
    let a = Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 1.0, 0.0, 4.0]).unwrap();
    let b = Tensor::new([3, 2], vec![2.0, 0.0, 1.0, 1.0, 5.0, 3.0]).unwrap();
    let hsic = |p: &Tensor, q: &Tensor| {
        let k = |m: &Tensor| matmul(m, &Tensor::from_fn([2, 3], |i| m.data()[(i % 3) * 2 + i / 3]));
        let h = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 2.0 / 3.0 } else { -1.0 / 3.0 });
        let kc = matmul(&matmul(&h, &k(p)), &h);
        let lc = matmul(&matmul(&h, &k(q)), &h);
        kc.data().iter().zip(lc.data()).map(|(u, v)| u * v).sum::<f64>()
    };
    let oracle = hsic(&a, &b) / (hsic(&a, &a) * hsic(&b, &b)).sqrt();
    let got = linear_cka(&a, &b).unwrap();
    ensure!((got - oracle).abs() < 1e-12, "hand example {got} vs HSIC {oracle}");
    Ok(format!(
        "self {self_sim:.12}, rotation/scale drift {:.1e}/{:.1e}, hand example {got:.12} = HSIC",
        (rot - base).abs(),
        (scaled - base).abs()
    ))
}

fn complexity() -> Outcome {
    let cfg = ModelConfig::paper(3);
    let closed = count_parameters(&cfg);
    let brute = ModelParams::init(&cfg, 0).numel() as u64;
    ensure!(closed == brute, "closed form {closed} vs instantiated {brute}");
    for tiny in [ModelConfig::tiny(1), ModelConfig::tiny(3)] {
        let b = ModelParams::init(&tiny, 0).numel() as u64;
        ensure!(count_parameters(&tiny) == b, "tiny closed form {} vs {b}", count_parameters(&tiny));
    }
    let patch = ModelConfig { token_patch: 3, ..cfg.clone() };
    let reference = 49.03e6;
    Ok(format!(
        "paper config {:.3}M (reference 49.03M, {:+.1}%); 3x3 patch tokens {:.3}M ({:+.1}%); brute force = closed form",
        closed as f64 / 1e6,
        (closed as f64 / reference - 1.0) * 100.0,
        count_parameters(&patch) as f64 / 1e6,
        (count_parameters(&patch) as f64 / reference - 1.0) * 100.0
    ))
}

fn ablation() -> Outcome {
    let full = ModelConfig::tiny(1);
    let full_names: BTreeSet<String> = trace_names(&full).into_iter().collect();
    let group = |p: &str| vec![format!("{p}.O_MHSA"), format!("{p}.O_IN_CFE"), p.to_string()];
    let itm = |p: &str| {
        let mut v = vec![format!("{p}.O_FCL")];
        v.extend(group(&format!("{p}.tm")));
        v.push(p.to_string());
        v
    };
    let serial_removed: Vec<String> =
        full_names.iter().filter(|n| n.starts_with("subnet") || ["O_It", "O_SubNet1", "O_It3", "O_It2", "O_SubNet2"].contains(&n.as_str())).cloned().collect();
    let spot: Vec<(&str, Ablation, Vec<String>)> = vec![
        ("without TM in SB", Ablation { no_sb_tm: true, ..Default::default() }, group("sb.tm")),
        ("without ITM", Ablation { no_itm: true, ..Default::default() }, [itm("subnet3.itm1"), itm("subnet3.itm2")].concat()),
        ("serial only", Ablation { serial_only: true, ..Default::default() }, serial_removed),
    ];
    let x = rand_tensor(&[1, 1, 8, 8], 9);
    for (label, ab) in Ablation::variants() {
        let cfg = full.clone().with_ablation(ab);
        ensure!(count_parameters(&cfg) < count_parameters(&full), "{label}: parameter count did not drop");
        let (_, trace) = ctnet_forward(&x, &ModelParams::init(&cfg, 1), &cfg, true).map_err(|e| format!("{label}: {e}"))?;
        let names: BTreeSet<String> = trace.unwrap().names().map(String::from).collect();
        ensure!(names == trace_names(&cfg).into_iter().collect(), "{label}: trace differs from its documented list");
        ensure!(names.is_subset(&full_names), "{label}: ablation adds trace entries");
    }
    for (label, ab, expect) in &spot {
        let cfg = full.clone().with_ablation(*ab);
        let kept: BTreeSet<String> = trace_names(&cfg).into_iter().collect();
        let removed: BTreeSet<String> = full_names.difference(&kept).cloned().collect();
        let expect: BTreeSet<String> = expect.iter().cloned().collect();
        ensure!(removed == expect, "{label}: removed {removed:?}, expected {expect:?}");
    }
    let counts: Vec<String> = spot
        .iter()
        .map(|(l, ab, _)| format!("{l} {}", count_parameters(&full.clone().with_ablation(*ab))))
        .collect();
    Ok(format!("{} toggles reduce params (full {}; {})", Ablation::variants().len(), count_parameters(&full), counts.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient correctness", gradient_correctness),
        ("zero-parameter identity", zero_identity),
        ("shape/coverage of the activation trace", trace_coverage),
        ("toy training", toy_training),
        ("optimizer and schedule", optimizer_schedule),
        ("loss contract", loss_contract),
        ("PSNR oracle", psnr_oracle),
        ("noise pipeline", noise_pipeline),
        ("CKA", cka_checks),
        ("complexity diagnostic", complexity),
        ("ablation soundness", ablation),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let res = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let t = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {:>2}. {name}: {detail} [{t:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2}. {name}: {why} [{t:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

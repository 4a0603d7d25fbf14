//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::Instant;

use hetvae::cli::{cmd_generate, cmd_train, RunConfig};
use hetvae::data::{
    fit_normalizer, synthetic_dataset, train_val_test, Channel, IrregularSeries, SyntheticConfig, DEFAULT_TRIM,
};
use hetvae::eval::{evaluate, interpolation_trace, mixture_nll, mixture_nll_point};
use hetvae::model::{Hetvae, HetvaeConfig};
use hetvae::numgrad::{finite_diff_check, AdamState, Array};
use hetvae::objective::{
    frozen_noise, gaussian_logpdf, kl_diag_standard, nvae_loss, nvae_loss_on_tape, train, LossRecord, TrainConfig,
};
use hetvae::rng::{normals, stream, streams};
use hetvae::untan::{
    intensity, softmax_value, untan, untand, value, AttentionHead, Pooling, TimeEmbeddingHead, UnTANWeights,
    UnionTimeSet,
};
use rand::seq::SliceRandom;
use rand::Rng as _;

type Outcome = Result<(bool, String), String>;
type Criterion = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Criterion); 7] = [
        ("1 gradient suite", gradient_suite),
        ("2 untan invariants", untan_invariants),
        ("3 closed-form oracles", closed_form_oracles),
        ("4 synthetic end-to-end", synthetic_end_to_end),
        ("5 ablation direction", ablation_direction),
        ("6 determinism", determinism),
        ("7 normalization", normalization),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = start.elapsed().as_secs_f64();
        println!("{} [{name}] {detail} ({secs:.1}s)", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn e(err: hetvae::Error) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = HetvaeConfig {
        input_dim: 1,
        n_ref: 4,
        n_heads: 1,
        embed_dim: 8,
        untan_dim: 8,
        latent_dim: 4,
        mlp_width: 8,
        het: true,
        ..HetvaeConfig::default()
    };
    let mut rng = stream(17, 0);
    let grid: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
    let batch: Vec<IrregularSeries> = (0..3)
        .map(|i| hetvae::model::random_series(&format!("g{i}"), 1, 6, &grid, &mut rng))
        .collect();
    let union = UnionTimeSet::from_dataset(&batch, 1);
    let model = Hetvae::new(cfg, union, 3).map_err(e)?;
    let tc = TrainConfig {
        lambda: 1.0,
        samples: 1,
        ..TrainConfig::default()
    };
    let noise = frozen_noise(&model, batch.len(), 1, 9);
    let err = finite_diff_check(
        |tape, params| {
            let bound = tape.bind(params);
            nvae_loss_on_tape(tape, &bound, &model, &batch, &noise, &tc)
        },
        &model.params,
        1e-5,
    )
    .map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    let n = model.params.n_values();
    Ok((
        err < 1e-4 && secs < 60.0,
        format!("max rel err {err:.2e} over {n} values (tol 1e-4), {secs:.1}s (limit 60s)"),
    ))
}

// ---------------------------------------------------------------- 2

fn random_head(rng: &mut hetvae::rng::Rng, d_e: usize, d_k: usize) -> AttentionHead {
    let arr = |rng: &mut hetvae::rng::Rng, shape: &[usize], scale: f64| {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), normals(rng, n).into_iter().map(|v| v * scale).collect()).unwrap()
    };
    AttentionHead {
        embedding: TimeEmbeddingHead {
            omega: arr(rng, &[d_e], 3.0),
            beta: arr(rng, &[d_e], 1.0),
        },
        w: arr(rng, &[d_e, d_k], 1.0),
        v: arr(rng, &[d_e, d_k], 1.0),
    }
}

fn random_times(rng: &mut hetvae::rng::Rng, n: usize) -> Vec<f64> {
    let mut t: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

fn untan_invariants() -> Outcome {
    const N: usize = 1000;
    let mut rng = stream(2024, 0);
    let mut failures = Vec::new();
    let (mut int_range, mut int_one, mut shift, mut rows, mut perm) = (0, 0, 0, 0, 0);
    let mut worst_shift: f64 = 0.0;
    for _ in 0..N {
        let n_h = rng.gen_range(1..=2);
        let d_e = n_h * rng.gen_range(1..=3);
        let head = random_head(&mut rng, d_e, d_e);
        let n_u = rng.gen_range(2..12);
        let t_u = random_times(&mut rng, n_u);
        let n_d = rng.gen_range(1..=t_u.len());
        let mut t_d: Vec<f64> = t_u.choose_multiple(&mut rng, n_d).copied().collect();
        t_d.sort_by(f64::total_cmp);
        let t_q = rng.gen::<f64>();
        let x_d = normals(&mut rng, t_d.len());

        // intensity in [0, 1] for both poolings; exactly 1 on the union itself
        for pooling in [Pooling::Max, Pooling::Sum] {
            let v = intensity(t_q, &t_d, &t_u, &head, pooling).map_err(e)?;
            if (0.0..=1.0).contains(&v) {
                int_range += 1;
            }
            let full = intensity(t_q, &t_u, &t_u, &head, pooling).map_err(e)?;
            if full == 1.0 {
                int_one += 1;
            }
        }

        // value pathway shift invariance
        let scores = normals(&mut rng, t_d.len()).into_iter().map(|s| s * 5.0).collect::<Vec<_>>();
        let base = softmax_value(&scores, &x_d).map_err(e)?;
        let mut ok = true;
        for delta in [-50.0, 0.0, 50.0] {
            let shifted: Vec<f64> = scores.iter().map(|s| s - delta).collect();
            let d = (softmax_value(&shifted, &x_d).map_err(e)? - base).abs();
            worst_shift = worst_shift.max(d);
            ok &= d <= 1e-9;
        }
        shift += usize::from(ok);

        // untand rows are untan at each reference point, bit for bit
        let dim = rng.gen_range(1..=2);
        let heads = (0..n_h).map(|_| random_head(&mut rng, d_e, d_e / n_h)).collect::<Vec<_>>();
        let j = rng.gen_range(1..=4);
        let weights = UnTANWeights {
            heads,
            mixing: Array::new(vec![2 * dim * n_h, j], normals(&mut rng, 2 * dim * n_h * j)).unwrap(),
            pooling_intensity: if rng.gen() { Pooling::Max } else { Pooling::Sum },
        };
        let channels: Vec<Channel> = (0..dim)
            .map(|_| {
                let n = rng.gen_range(0..=t_u.len());
                let mut t: Vec<f64> = t_u.choose_multiple(&mut rng, n).copied().collect();
                t.sort_by(f64::total_cmp);
                let x = normals(&mut rng, t.len());
                Channel::new(t, x)
            })
            .collect();
        let union = UnionTimeSet::uniform(dim, &t_u);
        let n_r = rng.gen_range(1..6);
        let refs = random_times(&mut rng, n_r);
        let full = untand(&refs, &channels, &weights, &union).map_err(e)?;
        let mut all_rows = true;
        for (i, r) in refs.iter().enumerate() {
            let single = untan(*r, &channels, &weights, &union).map_err(e)?;
            all_rows &= single.data() == full.row(i);
        }
        rows += usize::from(all_rows);

        // permutation invariance: shuffling observation order changes nothing
        let mut idx: Vec<usize> = (0..t_d.len()).collect();
        idx.shuffle(&mut rng);
        let pt: Vec<f64> = idx.iter().map(|&i| t_d[i]).collect();
        let px: Vec<f64> = idx.iter().map(|&i| x_d[i]).collect();
        let mut same = value(t_q, &pt, &px, &head).map_err(e)? == value(t_q, &t_d, &x_d, &head).map_err(e)?;
        for pooling in [Pooling::Max, Pooling::Sum] {
            same &= intensity(t_q, &pt, &t_u, &head, pooling).map_err(e)?
                == intensity(t_q, &t_d, &t_u, &head, pooling).map_err(e)?;
        }
        let shuffled: Vec<Channel> = channels
            .iter()
            .map(|c| {
                let mut k: Vec<usize> = (0..c.len()).collect();
                k.shuffle(&mut rng);
                Channel::new(k.iter().map(|&i| c.times[i]).collect(), k.iter().map(|&i| c.values[i]).collect())
            })
            .collect();
        same &= untand(&refs, &shuffled, &weights, &union).map_err(e)? == full;
        perm += usize::from(same);
    }
    for (name, got, want) in [
        ("intensity in [0,1]", int_range, 2 * N),
        ("intensity = 1 on union", int_one, 2 * N),
        ("shift invariance", shift, N),
        ("untand rows", rows, N),
        ("permutation", perm, N),
    ] {
        if got != want {
            failures.push(format!("{name}: {got}/{want}"));
        }
    }
    let detail = if failures.is_empty() {
        format!("{N} instances each; worst shift deviation {worst_shift:.1e} (tol 1e-9)")
    } else {
        failures.join("; ")
    };
    Ok((failures.is_empty(), detail))
}

// ---------------------------------------------------------------- 3

/// Composite Simpson rule with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn closed_form_oracles() -> Outcome {
    let mut rng = stream(7, 0);
    let mut kl_err: f64 = 0.0;
    for _ in 0..100 {
        let mu = rng.gen_range(-3.0..3.0);
        let var: f64 = (rng.gen_range(-2.0f64..2.0)).exp();
        let sd = var.sqrt();
        let log_q = |z: f64| -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (z - mu) * (z - mu) / (2.0 * var);
        let log_p = |z: f64| -0.5 * (2.0 * std::f64::consts::PI).ln() - z * z / 2.0;
        let quad = simpson(|z| log_q(z).exp() * (log_q(z) - log_p(z)), mu - 14.0 * sd, mu + 14.0 * sd, 20_000);
        let closed = kl_diag_standard(&[mu], &[var]).map_err(e)?;
        kl_err = kl_err.max((quad - closed).abs());
    }

    let mut norm_err: f64 = 0.0;
    for _ in 0..20 {
        let mu = rng.gen_range(-3.0..3.0);
        let var: f64 = (rng.gen_range(-3.0f64..3.0)).exp();
        let sd = var.sqrt();
        let total = simpson(
            |x| gaussian_logpdf(x, mu, var).unwrap().exp(),
            mu - 16.0 * sd,
            mu + 16.0 * sd,
            40_000,
        );
        norm_err = norm_err.max((total - 1.0).abs());
    }

    let mut mix_err: f64 = 0.0;
    for _ in 0..200 {
        let mu: Vec<f64> = normals(&mut rng, 3);
        let var: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..2.0)).collect();
        let x = rng.gen_range(-3.0..3.0);
        let direct = -(mu
            .iter()
            .zip(&var)
            .map(|(m, v): (&f64, &f64)| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
            .sum::<f64>()
            / 3.0)
            .ln();
        mix_err = mix_err.max((mixture_nll_point(x, &mu, &var).map_err(e)? - direct).abs());
    }

    // model-level mixture NLL against the same oracle on decoded components
    let model = tiny_model(1)?;
    let cond = IrregularSeries::new("c", vec![Channel::new(vec![0.1, 0.6], vec![0.3, -0.4])]);
    let target = IrregularSeries::new("c", vec![Channel::new(vec![0.3, 0.8], vec![0.1, 0.9])]);
    let got = mixture_nll(&model, &cond, &target, 3, &mut stream(1, 1)).map_err(e)?;
    let pred = model.predict(&cond, &[0.3, 0.8], 3, &mut stream(1, 1)).map_err(e)?;
    let mut oracle = 0.0;
    for (q, x) in [0.1, 0.9].iter().enumerate() {
        let dens: f64 = (0..3)
            .map(|s| {
                let (m, v) = pred.at(s, q, 0);
                (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
            })
            .sum::<f64>()
            / 3.0;
        oracle -= dens.ln();
    }
    mix_err = mix_err.max((got - oracle / 2.0).abs());

    let ok = kl_err < 1e-6 && norm_err < 1e-10 && mix_err < 1e-10;
    Ok((
        ok,
        format!("KL {kl_err:.1e} (tol 1e-6), logpdf mass {norm_err:.1e} (tol 1e-10), mixture {mix_err:.1e} (tol 1e-10)"),
    ))
}

fn tiny_model(seed: u64) -> Result<Hetvae, String> {
    let cfg = HetvaeConfig {
        n_ref: 4,
        embed_dim: 8,
        untan_dim: 8,
        latent_dim: 4,
        mlp_width: 8,
        ..HetvaeConfig::default()
    };
    let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
    Hetvae::new(cfg, UnionTimeSet::uniform(1, &grid), seed).map_err(e)
}

// ---------------------------------------------------------------- 4 & 5

fn synthetic_model_config() -> HetvaeConfig {
    HetvaeConfig {
        embed_dim: 32,
        n_ref: 16,
        latent_dim: 16,
        mlp_width: 128,
        untan_dim: 128,
        ..HetvaeConfig::default()
    }
}

fn synthetic_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 2000,
        batch_size: 128,
        lr: 1e-4,
        cond_fraction: 0.5,
        seed,
        ..TrainConfig::default()
    }
}

struct Run {
    model: Hetvae,
    history: Vec<LossRecord>,
    test: Vec<IrregularSeries>,
    secs: f64,
}

fn synthetic_run(seed: u64, ablate_het_alo: bool) -> Result<Run, String> {
    let syn = SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    };
    let data = synthetic_dataset(&syn).map_err(e)?;
    let (_, [train_s, _, test_s]) = train_val_test(&data, seed, &mut stream(seed, streams::SPLIT));
    let norm = fit_normalizer(&train_s, DEFAULT_TRIM).map_err(e)?;
    let train_n = norm.apply_all(&train_s).map_err(e)?;
    let test = norm.apply_all(&test_s).map_err(e)?;
    let mut mc = synthetic_model_config();
    let mut tc = synthetic_train_config(seed);
    if ablate_het_alo {
        mc.het = false;
        tc.alo = false;
    }
    let mut model = Hetvae::new(mc, UnionTimeSet::from_dataset(&train_n, 1), seed).map_err(e)?;
    let mut adam = AdamState::new(tc.adam(), &model.params);
    let start = Instant::now();
    let history = train(&mut model, &mut adam, &train_n, &tc, |_, _, _| Ok(())).map_err(e)?;
    Ok(Run {
        model,
        history,
        test,
        secs: start.elapsed().as_secs_f64(),
    })
}

thread_local! {
    static FULL_SEED0: std::cell::RefCell<Option<std::rc::Rc<Run>>> = const { std::cell::RefCell::new(None) };
}

fn full_run_seed0() -> Result<std::rc::Rc<Run>, String> {
    if let Some(r) = FULL_SEED0.with(|c| c.borrow().clone()) {
        return Ok(r);
    }
    let r = std::rc::Rc::new(synthetic_run(0, false)?);
    FULL_SEED0.with(|c| *c.borrow_mut() = Some(r.clone()));
    Ok(r)
}

fn synthetic_end_to_end() -> Outcome {
    let run = full_run_seed0()?;
    let first = run.history.first().ok_or("empty history")?.total;
    let last = run.history.last().ok_or("empty history")?.total;
    let grid: Vec<f64> = (0..51).map(|i| i as f64 / 50.0).collect();
    let (mut near, mut n_near, mut far, mut n_far) = (0.0, 0usize, 0.0, 0usize);
    for case in &run.test {
        let mut rng = hetvae::rng::keyed(0, streams::CASE_NOISE, &case.id);
        let trace = interpolation_trace(&run.model, case, &grid, 50, &mut rng).map_err(e)?;
        let obs = case.observed_times();
        for (q, t) in grid.iter().enumerate() {
            let gap = obs.iter().map(|o| (o - t).abs()).fold(f64::INFINITY, f64::min);
            let sd = trace.get(q, 0).1;
            if gap < 0.02 {
                near += sd;
                n_near += 1;
            } else if gap > 0.1 {
                far += sd;
                n_far += 1;
            }
        }
    }
    let (near, far) = (near / n_near as f64, far / n_far as f64);
    let ratio = far / near;
    let ok = last < first && ratio >= 1.1 && run.secs < 1800.0;
    Ok((
        ok,
        format!(
            "loss {first:.3} -> {last:.3}; trace std near {near:.4} far {far:.4} ratio {ratio:.4} (need >= 1.1); train {:.0}s",
            run.secs
        ),
    ))
}

fn ablation_direction() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let full = if seed == 0 {
            full_run_seed0()?
        } else {
            std::rc::Rc::new(synthetic_run(seed, false)?)
        };
        let hom = synthetic_run(seed, true)?;
        let a = evaluate(&full.model, &full.test, 0.5, 100, seed, 1).map_err(e)?.nll;
        let b = evaluate(&hom.model, &hom.test, 0.5, 100, seed, 1).map_err(e)?.nll;
        wins += usize::from(a < b);
        rows.push(format!("seed {seed}: full {a:.4} vs -HET-ALO {b:.4}"));
    }
    Ok((wins >= 2, format!("{} ({wins}/3 ordered, need 2)", rows.join("; "))))
}

// ---------------------------------------------------------------- 6

fn determinism() -> Outcome {
    // Both runs write to the same paths, since the resolved config (paths
    // included) is embedded in the checkpoint.
    let d = tempfile::tempdir().map_err(|x| x.to_string())?;
    let mut gen = Vec::new();
    let mut ckpts = Vec::new();
    let mut losses = Vec::new();
    for force in [false, true] {
        let mut cfg = RunConfig {
            seed: 5,
            out: d.path().join("data"),
            ..RunConfig::default()
        };
        cfg.synthetic.n_trajectories = 60;
        cfg.model = HetvaeConfig {
            n_ref: 8,
            embed_dim: 16,
            untan_dim: 16,
            latent_dim: 8,
            mlp_width: 32,
            ..HetvaeConfig::default()
        };
        cfg.train.iterations = 30;
        cfg.train.batch_size = 16;
        cfg.train.cond_fraction = 0.5;
        let cfg = resolve(cfg)?;
        cmd_generate(&cfg, force).map_err(e)?;
        let mut bytes = Vec::new();
        for split in ["train", "val", "test"] {
            bytes.push(std::fs::read(cfg.out.join(format!("{split}.jsonl"))).map_err(|x| x.to_string())?);
        }
        gen.push(bytes);
        let mut tcfg = cfg.clone();
        tcfg.data = cfg.out.clone();
        tcfg.out = d.path().join("run");
        cmd_train(&tcfg, None, force).map_err(e)?;
        ckpts.push(std::fs::read(tcfg.out.join("checkpoint.json")).map_err(|x| x.to_string())?);
        losses.push(std::fs::read(tcfg.out.join("loss.csv")).map_err(|x| x.to_string())?);
    }
    let same_gen = gen[0] == gen[1];
    let same_ckpt = ckpts[0] == ckpts[1];
    let same_loss = losses[0] == losses[1];
    Ok((
        same_gen && same_ckpt && same_loss,
        format!("generate identical: {same_gen}; checkpoint identical: {same_ckpt}; loss history identical: {same_loss}"),
    ))
}

fn resolve(cfg: RunConfig) -> Result<RunConfig, String> {
    // Round-trip through JSON the way a config file would be read.
    let text = serde_json::to_string(&cfg).map_err(|x| x.to_string())?;
    serde_json::from_str(&text).map_err(|x| x.to_string())
}

// ---------------------------------------------------------------- 7

fn normalization() -> Outcome {
    let model = tiny_model(11)?;
    let mut rng = stream(3, 0);
    let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
    let tc = TrainConfig::default();
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let case = hetvae::model::random_series(&format!("n{i}"), 1, 8, &grid, &mut rng);
        let dup = IrregularSeries::new(
            case.id.clone(),
            case.channels
                .iter()
                .map(|c| {
                    let t = c.times.iter().flat_map(|&t| [t; 3]).collect();
                    let x = c.values.iter().flat_map(|&x| [x; 3]).collect();
                    Channel::new(t, x)
                })
                .collect(),
        );
        let noise = frozen_noise(&model, 1, 1, i);
        let a = nvae_loss(&model, &[case], &noise, &tc).map_err(e)?;
        let b = nvae_loss(&model, &[dup], &noise, &tc).map_err(e)?;
        let (ca, cb) = (&a.cases[0], &b.cases[0]);
        if cb.n_obs != 3 * ca.n_obs {
            return Ok((false, format!("normalizer {} vs {}", cb.n_obs, ca.n_obs)));
        }
        let per_case = |c: &hetvae::objective::CaseTerms| (c.nll + tc.lambda * c.mse) / c.n_obs as f64;
        worst = worst.max((per_case(ca) - per_case(cb)).abs());
    }
    Ok((worst < 1e-9, format!("max change {worst:.1e} over 20 cases (tol 1e-9)")))
}

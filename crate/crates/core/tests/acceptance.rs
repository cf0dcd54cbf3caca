//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when a
//! gating criterion fails. Run with `cargo test --test acceptance`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patchmix::cli::{default_loss, grad_check, grad_check_with_step, oracle_grid, random_patches, GRAD_STEP, GRAD_TOLERANCE};
use patchmix::data::{
    load_cifar_split, parse_cifar, synth_blobs, CifarVariant, LabeledDataset, Split, SynthSpec, CIFAR_PIXELS,
};
use patchmix::encoder::{ema_update, Checkpoint, EncoderParams, ViTConfig};
use patchmix::evaluation::{feature_bank, extract_features, knn_classify};
use patchmix::numerics::Array;
use patchmix::objectives::{loss_total, ContrastBatch};
use patchmix::patch_ops::Permutation;
use patchmix::patchmix::{apply_mix, flat_mix_index, group_bounds, naive_mix_oracle, plan_mix, MixConfig};
use patchmix::trainer::{pretrain, run_steps, LossTerms, StepSchedule, TrainConfig, TrainState};

const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const EXAMPLE_TOL: f64 = 1e-12;
const RANDOM_INSTANCES: usize = 1000;
const CLOSED_FORM_TOL: f64 = 1e-9;
const EMA_MU: f64 = 0.99;
const EMA_STEPS: i32 = 100;
const EMA_TOL: f64 = 1e-12;
const SMOKE_SEEDS: u64 = 10;
const SMOKE_REQUIRED: usize = 8;
const SMOKE_LOSS_DROP: f64 = 0.20;
const SMOKE_KNN_FLOOR: f64 = 0.80;
const SMOKE_KNN_MARGIN: f64 = 0.15;
const SMOKE_K: usize = 5;
const SMOKE_BUDGET: Duration = Duration::from_secs(300);
const ABLATION_REQUIRED: usize = 7;
const ABLATION_STEPS: usize = 300;
const ABLATION_STEPS_VAR: &str = "PATCHMIX_ABLATION_STEPS";
const SWEEP_SEEDS: u64 = 100;
const CIFAR_DIR_VARS: [(&str, CifarVariant); 2] = [
    ("PATCHMIX_CIFAR10_DIR", CifarVariant::Cifar10),
    ("PATCHMIX_CIFAR100_DIR", CifarVariant::Cifar100),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Outcome;

fn oracle() -> Outcome {
    let start = Instant::now();
    let report = match oracle_grid(0, &|_| {}) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let elapsed = start.elapsed();
    let mut detail = format!(
        "{} instances bit-exact, {} oversized mixes rejected, {:.2}s (limit {}s)",
        report.checked,
        report.rejected,
        elapsed.as_secs_f64(),
        ORACLE_BUDGET.as_secs()
    );
    if let Some(f) = report.failures.first() {
        detail = format!("{} failures, first: {f}", report.failures.len());
    }
    outcome(report.passed() && elapsed < ORACLE_BUDGET, detail)
}

fn worked_examples() -> Outcome {
    let plan = plan_mix(MixConfig::new(9, 3, 9).unwrap(), Permutation::identity(9)).unwrap();
    let want_w = [1.0 / 3.0, 2.0 / 3.0, 1.0, 2.0 / 3.0, 1.0 / 3.0];
    let y_ok = plan.y_mtm[0] == [7, 8, 0, 1, 2];
    let w_err = plan.w_mtm[0].iter().zip(want_w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let q = flat_mix_index(3, 4);
    let q_ok = q == [0, 5, 10, 3, 4, 9, 2, 7, 8, 1, 6, 11];
    outcome(
        y_ok && w_err <= EXAMPLE_TOL && q_ok,
        format!("y_mtm={:?} w err={w_err:e} (tol {EXAMPLE_TOL:e}) q(3,4)={q:?}", plan.y_mtm[0]),
    )
}

fn conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut uneven = 0;
    for k in 0..RANDOM_INSTANCES {
        let n = rng.gen_range(2..=8);
        let m = rng.gen_range(1..=n.min(4));
        let t = rng.gen_range(m..=50);
        if t % m != 0 {
            uneven += 1;
        }
        let cfg = MixConfig::new(n, m, t).unwrap();
        let pb = random_patches(n, t, &mut rng);
        let perm = Permutation::sample(t, &mut rng);
        let plan = plan_mix(cfg, perm.clone()).unwrap();
        let sizes: Vec<usize> = plan.group_bounds.windows(2).map(|w| w[1] - w[0]).collect();
        let leftover_ok = sizes == group_bounds(t, m).windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>()
            && sizes.iter().enumerate().all(|(g, &s)| s == t / m + usize::from(g < t % m));
        let mixed = apply_mix(&pb, &plan).unwrap();
        let reference = naive_mix_oracle(&pb, cfg, &perm).unwrap();
        let positions_ok = (0..n).all(|i| (0..t).all(|j| mixed.patches.patch(i, j) == pb.patch(plan.source(i, j), j)));
        let multiset_ok = (0..t).all(|j| {
            let key = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
            let mut a: Vec<_> = (0..n).map(|i| key(pb.patch(i, j))).collect();
            let mut b: Vec<_> = (0..n).map(|i| key(mixed.patches.patch(i, j))).collect();
            a.sort();
            b.sort();
            a == b
        });
        if !(leftover_ok && positions_ok && multiset_ok && mixed.patches == reference.patches) {
            return outcome(
                false,
                format!("instance {k}: N={n} M={m} T={t} perm={:?} leftover={leftover_ok} position={positions_ok} multiset={multiset_ok}", perm.forward()),
            );
        }
    }
    outcome(uneven > 0, format!("{RANDOM_INSTANCES} instances, {uneven} with T mod M != 0"))
}

fn closed_forms() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (n, m) in [(4usize, 2usize), (9, 3), (16, 3)] {
        let row: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() - 0.5).collect();
        let same = Array::from_fn(&[n, 8], |k| row[k % 8]);
        let cb = ContrastBatch {
            h_mix1: same.clone(),
            h_view2: same.clone(),
            z_view1: same.clone(),
            z_view2: same.clone(),
            z_mix2: same,
            plan: plan_mix(MixConfig::new(n, m, 16).unwrap(), Permutation::identity(16)).unwrap(),
            temperature: 0.2,
            normalize_mtm: false,
        };
        let r = loss_total(&cb).unwrap();
        let ln = (n as f64).ln();
        let mf = m as f64;
        for (got, want) in [(r.l_oto, ln), (r.l_mto, ln), (r.l_mtm, mf * ln), (r.l_total, (mf + 2.0) * ln)] {
            worst = worst.max((got - want).abs());
        }
    }
    outcome(worst <= CLOSED_FORM_TOL, format!("max abs err {worst:e} (tol {CLOSED_FORM_TOL:e})"))
}

fn gradients() -> Outcome {
    let r = grad_check(0, &default_loss).unwrap();
    let total = r.per_loss.iter().find(|(n, _)| *n == "l_total").map_or(f64::INFINITY, |p| p.1);
    // Seeds beyond the default draw; failures there shrink as h^2 when h drops.
    let sweep: Vec<(u64, f64)> = (1..SWEEP_SEEDS)
        .map(|s| {
            let e = grad_check(s, &default_loss).unwrap().per_loss.last().unwrap().1;
            (s, e)
        })
        .collect();
    let over: Vec<&(u64, f64)> = sweep.iter().filter(|(_, e)| *e > GRAD_TOLERANCE).collect();
    let mut note = format!("sweep seeds 1-{}: {} above tol", SWEEP_SEEDS - 1, over.len());
    if let Some(&&(s, e)) = over.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
        let fine = grad_check_with_step(s, GRAD_STEP / 10.0, &default_loss).unwrap().per_loss.last().unwrap().1;
        note.push_str(&format!(", worst seed {s}: {e:.2e} at h={GRAD_STEP:e}, {fine:.2e} at h={:e}", GRAD_STEP / 10.0));
    }
    outcome(
        r.passed(),
        format!(
            "l_total rel err {total:.2e} (tol {GRAD_TOLERANCE:e}, h={GRAD_STEP:e}), target-branch grad max {:e}; {note}",
            r.target_grad_max
        ),
    )
}

fn ema() -> Outcome {
    let cfg = ViTConfig::micro();
    let theta = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut start = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for (_, b) in start.buffers.iter_mut() {
        b.data_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    let xi0 = start.momentum_copy();
    let mut xi = xi0.clone();
    for _ in 0..EMA_STEPS {
        ema_update(&theta, &mut xi, EMA_MU).unwrap();
    }
    let decay = EMA_MU.powi(EMA_STEPS);
    let tracked = theta.momentum_copy();
    let mut worst: f64 = 0.0;
    for (got, (init, target)) in [
        (&xi.params, (&xi0.params, &tracked.params)),
        (&xi.buffers, (&xi0.buffers, &tracked.buffers)),
    ] {
        for ((_, g), ((_, a), (_, b))) in got.iter().zip(init.iter().zip(target.iter())) {
            for ((x, x0), t) in g.data().iter().zip(a.data()).zip(b.data()) {
                worst = worst.max((x - (decay * x0 + (1.0 - decay) * t)).abs());
            }
        }
    }
    let mut frozen = xi.clone();
    ema_update(&theta, &mut frozen, 1.0).unwrap();
    let bits = |s: &patchmix::encoder::MomentumParams| -> Vec<u64> {
        s.params
            .iter()
            .chain(s.buffers.iter())
            .flat_map(|(_, a)| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let fixpoint = bits(&frozen) == bits(&xi);
    outcome(
        worst <= EMA_TOL && fixpoint,
        format!("max abs err {worst:e} after {EMA_STEPS} steps (tol {EMA_TOL:e}), mu=1 fixpoint {fixpoint}"),
    )
}

fn schedules() -> Outcome {
    let cfg = TrainConfig::default();
    let (total, warmup) = (1000, 100);
    let s0 = StepSchedule::at(&cfg, 0, total, warmup);
    let sw = StepSchedule::at(&cfg, warmup, total, warmup);
    let se = StepSchedule::at(&cfg, total, total, warmup);
    let ok = s0.lr == 0.0
        && sw.lr == cfg.base_lr
        && se.lr == 0.0
        && s0.wd == 0.04
        && se.wd == 0.4
        && s0.mu == 0.996
        && se.mu == 1.0;
    outcome(
        ok,
        format!(
            "lr {}/{}/{}, wd {}/{}, mu {}/{}",
            s0.lr, sw.lr, se.lr, s0.wd, se.wd, s0.mu, se.mu
        ),
    )
}

fn smoke_data(seed: u64) -> (LabeledDataset, LabeledDataset) {
    let train = synth_blobs(&SynthSpec::nuisance(2, 128, 8, 1000 + seed)).unwrap();
    let val = synth_blobs(&SynthSpec::nuisance(2, 64, 8, 2000 + seed)).unwrap();
    (train, val)
}

fn knn_accuracy(enc: &EncoderParams, train: &LabeledDataset, val: &LabeledDataset) -> f64 {
    let bank = feature_bank(enc, train).unwrap();
    let queries = extract_features(enc, &val.images, 256).unwrap();
    knn_classify(&bank, &queries, Some(&val.labels), SMOKE_K, 0.07)
        .unwrap()
        .accuracy
        .unwrap()
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn smoke() -> Outcome {
    let start = Instant::now();
    let mut passed = 0;
    for seed in 0..SMOKE_SEEDS {
        let (train, val) = smoke_data(seed);
        let cfg = TrainConfig::smoke(seed);
        let random = knn_accuracy(&TrainState::init(&cfg).unwrap().theta, &train, &val);
        let out = pretrain(&cfg, &train.images, None, None).unwrap();
        let losses: Vec<f64> = out.state.history.iter().map(|r| r.report.l_total).collect();
        let (first, last) = (window_mean(&losses[..10]), window_mean(&losses[losses.len() - 10..]));
        let drop = 1.0 - last / first;
        let trained = knn_accuracy(&out.state.theta, &train, &val);
        let ok = drop >= SMOKE_LOSS_DROP && trained >= SMOKE_KNN_FLOOR && trained - random >= SMOKE_KNN_MARGIN;
        passed += usize::from(ok);
        println!(
            "    seed {seed}: steps {} loss {first:.3} -> {last:.3} (drop {:.1}%), kNN random {random:.3} trained {trained:.3} {}",
            losses.len(),
            100.0 * drop,
            if ok { "ok" } else { "miss" }
        );
    }
    let elapsed = start.elapsed();
    outcome(
        passed >= SMOKE_REQUIRED && elapsed <= SMOKE_BUDGET,
        format!(
            "{passed}/{SMOKE_SEEDS} seeds (need {SMOKE_REQUIRED}), {:.0}s (limit {}s)",
            elapsed.as_secs_f64(),
            SMOKE_BUDGET.as_secs()
        ),
    )
}

fn ablation() -> Outcome {
    let steps = std::env::var(ABLATION_STEPS_VAR)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(ABLATION_STEPS);
    let (mut m2_wins, mut m3_wins) = (0, 0);
    for seed in 0..SMOKE_SEEDS {
        let (train, val) = smoke_data(seed);
        let run = |mix: usize, terms: LossTerms| {
            let cfg = TrainConfig {
                mix,
                terms,
                total_steps: Some(steps),
                ..TrainConfig::smoke(seed)
            };
            let out = pretrain(&cfg, &train.images, None, None).unwrap();
            knn_accuracy(&out.state.theta, &train, &val)
        };
        let base = run(2, LossTerms::OTO_ONLY);
        let m2 = run(2, LossTerms::ALL);
        let m3 = run(3, LossTerms::ALL);
        m2_wins += usize::from(m2 >= base);
        m3_wins += usize::from(m3 >= base);
        println!("    seed {seed}: oto-only {base:.3} M=2 {m2:.3} M=3 {m3:.3}");
    }
    outcome(
        m2_wins >= ABLATION_REQUIRED && m3_wins >= ABLATION_REQUIRED,
        format!(
            "M=2 >= baseline in {m2_wins}/{SMOKE_SEEDS}, M=3 in {m3_wins}/{SMOKE_SEEDS} (need {ABLATION_REQUIRED}), {steps} steps per run"
        ),
    )
}

fn small_run_cfg() -> TrainConfig {
    TrainConfig {
        model: ViTConfig {
            head_hidden: 32,
            head_out: 16,
            ..ViTConfig::micro()
        },
        epochs: 4,
        warmup_epochs: 1,
        total_steps: None,
        batch: 8,
        ..TrainConfig::smoke(21)
    }
}

fn determinism() -> Outcome {
    let cfg = small_run_cfg();
    let images = synth_blobs(&SynthSpec::nuisance(2, 16, 8, 3)).unwrap().images;
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = pretrain(&cfg, &images, Some(&dir.path().join(name)), None).unwrap();
        std::fs::read(out.log.unwrap()).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let total = cfg.total_steps(images.len()).unwrap();
    let mut partial = TrainState::init(&cfg).unwrap();
    run_steps(&mut partial, &cfg, &images, Some(total / 2)).unwrap();
    let mid = dir.path().join("mid.ckpt");
    partial.to_checkpoint(&cfg).save(&mid).unwrap();
    let restored = TrainState::from_checkpoint(&Checkpoint::load(&mid).unwrap()).unwrap();
    let resumed = pretrain(&cfg, &images, Some(&dir.path().join("c")), Some(restored)).unwrap();
    let c = std::fs::read(resumed.log.unwrap()).unwrap();
    let full = pretrain(&cfg, &images, None, None).unwrap();
    let same_params = resumed.state.theta == full.state.theta && resumed.state.xi == full.state.xi;
    outcome(
        a == b && a == c && same_params,
        format!(
            "{total} steps, repeat log identical {}, resumed at step {} identical {}, final parameters identical {same_params}",
            a == b,
            total / 2,
            a == c
        ),
    )
}

fn golden_record(variant: CifarVariant, coarse: u8, label: u8) -> Vec<u8> {
    let mut r = Vec::new();
    if variant == CifarVariant::Cifar100 {
        r.push(coarse);
    }
    r.push(label);
    r.extend((0..CIFAR_PIXELS).map(|k| (k * 7 % 256) as u8));
    r
}

fn cifar() -> Outcome {
    let mut ok = true;
    for (variant, labels) in [(CifarVariant::Cifar10, [3u8, 9]), (CifarVariant::Cifar100, [42, 99])] {
        let bytes: Vec<u8> = labels.iter().flat_map(|&l| golden_record(variant, 7, l)).collect();
        let ds = parse_cifar(&bytes, variant, Split::Train, Path::new("golden.bin")).unwrap();
        ok &= ds.labels == labels.map(usize::from);
        ok &= ds.images.as_array().shape() == [2, 3, 32, 32];
        for i in 0..2 {
            ok &= ds
                .images
                .image(i)
                .iter()
                .enumerate()
                .all(|(k, &v)| v == (k * 7 % 256) as f64 / 255.0);
        }
        let mut cut = bytes.clone();
        cut.pop();
        ok &= parse_cifar(&cut, variant, Split::Train, Path::new("golden.bin")).is_err();
    }
    let mut notes = Vec::new();
    for (var, variant) in CIFAR_DIR_VARS {
        let Some(dir) = std::env::var_os(var).map(PathBuf::from) else {
            notes.push(format!("{} full splits skipped ({var} unset)", variant.name()));
            continue;
        };
        for (split, want) in [(Split::Train, 50_000), (Split::Val, 10_000)] {
            match load_cifar_split(&dir, variant, split) {
                Ok(ds) => {
                    ok &= ds.len() == want;
                    notes.push(format!("{} {split:?} {} records (expect {want})", variant.name(), ds.len()));
                }
                Err(e) => {
                    ok = false;
                    notes.push(e.to_string());
                }
            }
        }
    }
    outcome(ok, format!("golden records bit-exact {ok}; {}", notes.join("; ")))
}

fn main() {
    let criteria: [(&str, bool, Check); 11] = [
        ("index-algebra oracle", true, oracle),
        ("worked examples", true, worked_examples),
        ("multiset and position invariants", true, conservation),
        ("degenerate loss closed forms", true, closed_forms),
        ("gradient correctness", true, gradients),
        ("EMA closed form", true, ema),
        ("schedule endpoints", true, schedules),
        ("end-to-end smoke learning", true, smoke),
        ("ablation direction (informational)", false, ablation),
        ("determinism and resume", true, determinism),
        ("CIFAR loader", true, cifar),
    ];
    let mut failed = 0;
    for (k, (name, gating, check)) in criteria.iter().enumerate() {
        let o = check();
        let tag = match (o.pass, gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (non-gating)",
        };
        if !o.pass && *gating {
            failed += 1;
        }
        println!("criterion {:>2} {tag}: {name}: {}", k + 1, o.detail);
    }
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
    println!("all gating criteria passed");
}
